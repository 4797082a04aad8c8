"""Command-line interface: config handling, command chain, manifests."""

import json
from pathlib import Path

import numpy as np
import pytest

from handavatar import cli


def _read_manifest(d):
    with open(Path(d) / "manifest.json") as f:
        return json.load(f)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    rc = cli.main(["synth-gen", "--out", str(out),
                   "template=mini", "subjects=2", "frames=3",
                   "image_size=48", "scan_points=200"])
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("model")
    rc = cli.main(["train", "--out", str(out), "--template", "mini",
                   f"data={dataset}", "steps_phase1=8", "steps_phase2=2",
                   "texture_res=32"])
    assert rc == 0
    return out


class TestConfigHandling:
    def test_unknown_key_rejected(self, tmp_path):
        rc = cli.main(["synth-gen", "--out", str(tmp_path), "bogus_key=1"])
        assert rc == 1

    def test_nested_override(self, tmp_path):
        rc = cli.main(["synth-gen", "--out", str(tmp_path),
                       "template=mini", "subjects=1", "frames=1",
                       "image_size=48", "scan_points=50",
                       "lights.ambient=0.3"])
        assert rc == 0
        assert _read_manifest(tmp_path)["config"]["lights"]["ambient"] == 0.3

    def test_config_file_plus_override(self, tmp_path):
        cfgf = tmp_path / "c.json"
        cfgf.write_text(json.dumps({"template": "mini", "subjects": 1,
                                    "frames": 2, "image_size": 48,
                                    "scan_points": 50}))
        rc = cli.main(["synth-gen", "--config", str(cfgf),
                       "--out", str(tmp_path / "o"), "frames=1"])
        assert rc == 0
        m = _read_manifest(tmp_path / "o")
        assert m["config"]["frames"] == 1
        assert m["config"]["template"] == "mini"

    def test_missing_required_input(self, tmp_path):
        rc = cli.main(["train", "--out", str(tmp_path)])
        assert rc == 1
        rc = cli.main(["train", "--out", str(tmp_path),
                       "data=/nonexistent/place"])
        assert rc == 1


class TestSynthGen:
    def test_layout_and_manifest(self, dataset):
        dirs = sorted(p.name for p in dataset.iterdir() if p.is_dir())
        assert dirs == ["subject_000", "subject_001"]
        assert (dataset / "subject_000" / "frame_0002" / "image.png").exists()
        m = _read_manifest(dataset)
        assert m["command"] == "synth-gen"
        assert m["metrics"]["subjects"] == 2

    def test_deterministic(self, tmp_path):
        args = ["template=mini", "subjects=1", "frames=2",
                "image_size=48", "scan_points=100"]
        cli.main(["synth-gen", "--out", str(tmp_path / "a")] + args)
        cli.main(["synth-gen", "--out", str(tmp_path / "b")] + args)
        fa = (tmp_path / "a" / "subject_000" / "frame_0001"
              / "depth.pfm").read_bytes()
        fb = (tmp_path / "b" / "subject_000" / "frame_0001"
              / "depth.pfm").read_bytes()
        assert fa == fb


class TestTrainFitChain:
    def test_train_outputs(self, trained):
        assert (trained / "model.ckpt").exists()
        assert (trained / "tracking.json").exists()
        m = _read_manifest(trained)
        assert m["metrics"]["diverged"] is False
        assert np.isfinite(m["metrics"]["train_p2s_mm"])
        # the manifest hashes its dataset input for provenance
        assert len(m["inputs"]["data"]) == 64

    def test_fit_and_eval(self, dataset, trained, tmp_path):
        fit_out = tmp_path / "fit"
        rc = cli.main(["fit", "--out", str(fit_out),
                       f"model={trained}",
                       f"data={dataset / 'subject_001'}",
                       "iters=15", "warmup_iters=20"])
        assert rc == 0
        with open(fit_out / "geometry.json") as f:
            g = json.load(f)
        assert len(g["poses"]) == 3
        m = _read_manifest(fit_out)
        assert np.isfinite(m["metrics"]["p2s_pct_hand"])

        ev_out = tmp_path / "eval"
        rc = cli.main(["eval", "--out", str(ev_out),
                       f"model={trained}",
                       f"data={dataset / 'subject_001'}",
                       f"geometry={fit_out / 'geometry.json'}"])
        assert rc == 0
        with open(ev_out / "eval.json") as f:
            ej = json.load(f)
        assert len(ej["per_frame"]) == 3
        assert (ev_out / "eval.txt").read_text().startswith("frame")


class TestAdaptRenderExport:
    def test_full_chain(self, dataset, trained, tmp_path):
        adapt_out = tmp_path / "adapt"
        rc = cli.main(["adapt", "--out", str(adapt_out),
                       f"model={trained}",
                       f"data={dataset / 'subject_000'}",
                       "fit.iters=15", "fit.warmup_iters=20",
                       "shadow.iters=3", "shadow.uv_res=32",
                       "texture.res=32", "texture.refine_iters=3"])
        assert rc == 0
        bundle_dir = adapt_out / "bundle"
        assert (bundle_dir / "albedo.png").exists()
        m = _read_manifest(adapt_out)
        assert np.isfinite(m["metrics"]["self_render_psnr_db"])

        rend_out = tmp_path / "render"
        rc = cli.main(["render", "--out", str(rend_out),
                       f"model={trained}", f"bundle={bundle_dir}",
                       "turntable_frames=2", "image_size=48"])
        assert rc == 0
        assert (rend_out / "turn_0001.png").exists()

        exp_out = tmp_path / "export"
        rc = cli.main(["export", "--out", str(exp_out),
                       f"model={trained}", f"bundle={bundle_dir}",
                       "frames=1"])
        assert rc == 0
        assert (exp_out / "posed_0000.obj").exists()
        assert (exp_out / "posed_0000.ply").exists()
        assert (exp_out / "albedo.png").exists()
