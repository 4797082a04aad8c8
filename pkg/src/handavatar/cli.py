"""Command-line entry points.

Commands: synth-gen, train, fit, adapt, render, eval, export. Every command
reads an optional JSON config plus dotted-path overrides, runs
deterministically for a fixed config, and writes a ``manifest.json`` into its
output directory recording the resolved config, input hashes, and key
metrics.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import checkpoint, imgio, pipeline, render, synth
from .kin import Pose
from .loss import TERM_WEIGHTS
from . import __version__
from .model import HandModel


# ---------------------------------------------------------------------------
# config handling
# ---------------------------------------------------------------------------


def _coerce(text):
    """Override values arrive as strings; parse them as JSON when possible
    so numbers, booleans and lists round-trip."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(config, overrides):
    """Apply ``key.sub=value`` overrides onto a nested dict, in order."""
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override '{item}' is not of the form key=value")
        dotted, raw = item.split("=", 1)
        node = config
        parts = dotted.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ValueError(f"override path '{dotted}' crosses a "
                                 f"non-object value at '{p}'")
        node[parts[-1]] = _coerce(raw)
    return config


def validate_keys(config, allowed, context=""):
    """Reject unknown keys so typos fail loudly instead of silently using
    defaults. ``allowed`` maps key -> None (leaf) or a nested allowed dict."""
    for k, v in config.items():
        where = f"{context}.{k}" if context else k
        if k not in allowed:
            raise ValueError(f"unknown config key '{where}'")
        sub = allowed[k]
        if isinstance(sub, dict):
            if not isinstance(v, dict):
                raise ValueError(f"config key '{where}' must be an object")
            validate_keys(v, sub, where)


def load_config(args, defaults, allowed):
    config = dict(defaults)
    if args.config:
        with open(args.config) as f:
            loaded = json.load(f)
        config = _merge(config, loaded)
    config = apply_overrides(config, args.override or [])
    if args.seed is not None:
        config["seed"] = args.seed
    if getattr(args, "template", None):
        config["template"] = args.template
    validate_keys(config, allowed)
    return config


def _merge(base, extra):
    out = dict(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _hash_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hash_tree(root):
    """Stable hash of a directory: sorted relative paths + content hashes."""
    root = Path(root)
    if root.is_file():
        return _hash_file(root)
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(bytes.fromhex(_hash_file(p)))
    return h.hexdigest()


def write_manifest(out_dir, command, config, inputs=None, metrics=None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "version": __version__,
        "numpy": np.__version__,
        "python": sys.version.split()[0],
        "config": config,
        "inputs": {k: _hash_tree(v) for k, v in (inputs or {}).items()},
        "metrics": metrics or {},
    }
    with open(out_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return manifest


# ---------------------------------------------------------------------------
# model checkpoint I/O (model weights + the template preset that shapes them)
# ---------------------------------------------------------------------------


def save_model(path, model, template_name):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    checkpoint.save_checkpoint(path / "model.ckpt", model.params.state())
    with open(path / "model.json", "w") as f:
        json.dump({"template": template_name, "d_id": model.d_id}, f)


def load_model(path):
    path = Path(path)
    with open(path / "model.json") as f:
        meta = json.load(f)
    template, _ = synth.build_template(meta["template"])
    model = HandModel(template, np.random.default_rng(0), d_id=meta["d_id"])
    model.params.load_state(checkpoint.load_checkpoint(path / "model.ckpt"))
    return model, meta["template"]


def _loaded_subject_data(root):
    meta, frames = synth.load_subject_dataset(root)
    return pipeline.SubjectData(frames=frames,
                                neutral_depths=meta["neutral_depths"],
                                neutral_joints=np.array(meta["neutral_joints"])), meta


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


_SYNTH_DEFAULTS = {
    "seed": 0, "template": "desk", "subjects": 1, "frames": 30,
    "image_size": 64, "scan_points": 800,
    "lights": {"intensities": [0.55, 0.35], "ambient": 0.25},
}
_SYNTH_ALLOWED = {k: ({"intensities": None, "ambient": None}
                      if k == "lights" else None)
                  for k in _SYNTH_DEFAULTS}


def cmd_synth_gen(args):
    cfg = load_config(args, _SYNTH_DEFAULTS, _SYNTH_ALLOWED)
    out = Path(args.out)
    cams = synth.default_cameras(image_size=cfg["image_size"])
    lights = synth.LightRig(intensities=np.array(cfg["lights"]["intensities"]),
                            ambient=cfg["lights"]["ambient"])
    for i in range(cfg["subjects"]):
        seed = cfg["seed"] + i
        subject = synth.generate_subject(seed, quality=cfg["template"])
        poses = synth.sample_pose_sequence(subject.mesh, cfg["frames"],
                                           seed=10_000 + seed)
        frames, flows = synth.generate_capture(
            subject, poses, cams, lights, scan_points=cfg["scan_points"])
        synth.save_subject_dataset(out / f"subject_{seed:03d}", subject,
                                   frames, flows, quality=cfg["template"])
    write_manifest(out, "synth-gen", cfg,
                   metrics={"subjects": cfg["subjects"],
                            "frames": cfg["frames"]})
    return 0


_TRAIN_DEFAULTS = {
    "seed": 0, "template": "desk", "data": None,
    "steps_phase1": 400, "steps_phase2": 0, "frames_per_step": 2,
    "lr_model": 1e-3, "lr_pose": 1e-2, "texture_res": 64,
    "weights": dict(TERM_WEIGHTS) | {"laplacian": 1.0, "tangential_id": 0.5,
                                     "tangential_pose": 0.5},
}
_TRAIN_ALLOWED = {k: ({w: None for w in TERM_WEIGHTS} if k == "weights"
                      else None) for k in _TRAIN_DEFAULTS}


def cmd_train(args):
    cfg = load_config(args, _TRAIN_DEFAULTS, _TRAIN_ALLOWED)
    if not cfg["data"]:
        raise ValueError("config key 'data' (dataset directory) is required")
    data_root = Path(cfg["data"])
    subject_dirs = sorted(p for p in data_root.iterdir()
                          if p.is_dir() and p.name.startswith("subject_"))
    if not subject_dirs:
        raise FileNotFoundError(f"no subject_* directories under {data_root}")
    subjects = []
    for d in subject_dirs:
        sd, _ = _loaded_subject_data(d)
        subjects.append(sd)
    template, _ = synth.build_template(cfg["template"])
    tc = pipeline.TrainConfig(
        steps_phase1=cfg["steps_phase1"], steps_phase2=cfg["steps_phase2"],
        frames_per_step=cfg["frames_per_step"], lr_model=cfg["lr_model"],
        lr_pose=cfg["lr_pose"], seed=cfg["seed"],
        texture_res=cfg["texture_res"], weights=cfg["weights"],
        log_path=str(Path(args.out) / "train_log.jsonl"))
    Path(args.out).mkdir(parents=True, exist_ok=True)
    result = pipeline.train_tracking_and_modeling(subjects, template, tc)

    out = Path(args.out)
    save_model(out, result.model, cfg["template"])
    with open(out / "tracking.json", "w") as f:
        json.dump({"id_codes": [z.tolist() for z in result.id_codes],
                   "poses": [[p.to_json() for p in seq]
                             for seq in result.poses]}, f)
    p2s = []
    for si, sd in enumerate(subjects):
        for t, fr in enumerate(sd.frames):
            p = result.poses[si][t]
            v, _, _ = result.model.forward(result.id_codes[si], p.theta,
                                           p.global_rot, p.global_trans)
            p2s.append(synth.p2s_error(fr.scan, v.data, template.faces))
    write_manifest(out, "train", cfg, inputs={"data": data_root},
                   metrics={"diverged": result.diverged,
                            "final_total": result.log[-1]["total"]
                            if result.log else None,
                            "train_p2s_mm": float(np.mean(p2s))})
    return 0


_FIT_DEFAULTS = {
    "seed": 0, "model": None, "data": None, "frames": None,
    "iters": 300, "warmup_iters": 400, "lr": 2e-2, "warmup_lr": 3e-2,
}
_FIT_ALLOWED = {k: None for k in _FIT_DEFAULTS}


def cmd_fit(args):
    cfg = load_config(args, _FIT_DEFAULTS, _FIT_ALLOWED)
    for key in ("model", "data"):
        if not cfg[key]:
            raise ValueError(f"config key '{key}' is required")
    model, template_name = load_model(cfg["model"])
    sd, meta = _loaded_subject_data(cfg["data"])
    frames = sd.frames if cfg["frames"] is None else sd.frames[:cfg["frames"]]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fc = pipeline.FitConfig(iters=cfg["iters"],
                            warmup_iters=cfg["warmup_iters"],
                            lr=cfg["lr"], warmup_lr=cfg["warmup_lr"],
                            log_path=str(out / "fit_log.jsonl"))
    fit = pipeline.fit_geometry(frames, model, fc)
    with open(out / "geometry.json", "w") as f:
        json.dump({"z": fit.z.tolist(),
                   "poses": [p.to_json() for p in fit.poses],
                   "flags": [bool(x) for x in fit.flags]}, f)
    p2s = []
    for t, fr in enumerate(frames):
        p = fit.poses[t]
        v, _, _ = model.forward(fit.z, p.theta, p.global_rot, p.global_trans)
        p2s.append(synth.p2s_error(fr.scan, v.data, model.template.faces))
    write_manifest(out, "fit", cfg,
                   inputs={"model": Path(cfg["model"]) / "model.ckpt",
                           "data": cfg["data"]},
                   metrics={"p2s_mm": float(np.mean(p2s)),
                            "p2s_pct_hand": 100 * float(np.mean(p2s))
                            / meta["hand_length"],
                            "flagged_frames": int(np.sum(fit.flags))})
    return 0


_ADAPT_DEFAULTS = {
    "seed": 0, "model": None, "data": None, "frames": None,
    "fit": {"iters": 300, "warmup_iters": 400},
    "shadow": {"iters": 250, "tv_weight": 0.1, "uv_res": 64},
    "texture": {"res": 64, "refine_iters": 120},
}
_ADAPT_ALLOWED = {
    "seed": None, "model": None, "data": None, "frames": None,
    "fit": {"iters": None, "warmup_iters": None},
    "shadow": {"iters": None, "tv_weight": None, "uv_res": None},
    "texture": {"res": None, "refine_iters": None},
}


def cmd_adapt(args):
    cfg = load_config(args, _ADAPT_DEFAULTS, _ADAPT_ALLOWED)
    for key in ("model", "data"):
        if not cfg[key]:
            raise ValueError(f"config key '{key}' is required")
    model, _ = load_model(cfg["model"])
    sd, meta = _loaded_subject_data(cfg["data"])
    frames = sd.frames if cfg["frames"] is None else sd.frames[:cfg["frames"]]
    out = Path(args.out)
    bundle = pipeline.adapt_avatar(
        frames, model,
        fit_config=pipeline.FitConfig(**cfg["fit"]),
        shadow_config=pipeline.ShadowConfig(seed=cfg["seed"],
                                            **cfg["shadow"]),
        texture_config=pipeline.TextureConfig(**cfg["texture"]))
    pipeline.save_bundle(out / "bundle", bundle)
    psnrs = []
    for t, fr in enumerate(frames):
        if bundle.meta["flags"][t]:
            continue
        img, _ = bundle.render_frame(model, fr.camera, pose_index=t)
        m = np.asarray(fr.mask, dtype=bool)
        psnrs.append(synth.psnr(img[m], np.asarray(fr.image)[m]))
    write_manifest(out, "adapt", cfg,
                   inputs={"model": Path(cfg["model"]) / "model.ckpt",
                           "data": cfg["data"]},
                   metrics={"self_render_psnr_db": float(np.mean(psnrs)),
                            "flagged_frames":
                            int(np.sum(bundle.meta["flags"]))})
    return 0


_RENDER_DEFAULTS = {
    "seed": 0, "model": None, "bundle": None, "poses": None,
    "turntable_frames": 12, "image_size": 128,
}
_RENDER_ALLOWED = {k: None for k in _RENDER_DEFAULTS}


def cmd_render(args):
    cfg = load_config(args, _RENDER_DEFAULTS, _RENDER_ALLOWED)
    for key in ("model", "bundle"):
        if not cfg[key]:
            raise ValueError(f"config key '{key}' is required")
    model, _ = load_model(cfg["model"])
    bundle = pipeline.load_bundle(cfg["bundle"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if cfg["poses"]:
        with open(cfg["poses"]) as f:
            poses = [Pose.from_json(p) for p in json.load(f)["poses"]]
    else:
        poses = [bundle.poses[0]] * cfg["turntable_frames"]

    n = len(poses)
    size = cfg["image_size"]
    for k, pose in enumerate(poses):
        ang = 2 * np.pi * k / max(n, 1)
        eye = np.array([90.0 + 420 * np.sin(ang), 0.0, -420 * np.cos(ang)])
        cam = render.Camera.look_at(eye, [90.0, 0.0, 0.0], [0, -1, 0],
                                    fov_deg=32.0, width=size, height=size)
        img, _ = bundle.render_frame(model, cam, pose=pose)
        imgio.save_png(out / f"turn_{k:04d}.png", np.clip(img, 0.0, 1.0))
    write_manifest(out, "render", cfg,
                   inputs={"model": Path(cfg["model"]) / "model.ckpt",
                           "bundle": cfg["bundle"]},
                   metrics={"frames": n})
    return 0


_EVAL_DEFAULTS = {
    "seed": 0, "model": None, "bundle": None, "data": None, "frames": None,
    "geometry": None,
}
_EVAL_ALLOWED = {k: None for k in _EVAL_DEFAULTS}


def cmd_eval(args):
    cfg = load_config(args, _EVAL_DEFAULTS, _EVAL_ALLOWED)
    for key in ("model", "data"):
        if not cfg[key]:
            raise ValueError(f"config key '{key}' is required")
    model, _ = load_model(cfg["model"])
    sd, meta = _loaded_subject_data(cfg["data"])
    frames = sd.frames if cfg["frames"] is None else sd.frames[:cfg["frames"]]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    bundle = pipeline.load_bundle(cfg["bundle"]) if cfg["bundle"] else None
    if bundle is not None:
        z, poses = bundle.z, bundle.poses
    elif cfg["geometry"]:
        with open(cfg["geometry"]) as f:
            g = json.load(f)
        z = np.array(g["z"])
        poses = [Pose.from_json(p) for p in g["poses"]]
    else:
        raise ValueError("eval needs either 'bundle' or 'geometry'")

    rows = []
    for t, fr in enumerate(frames[:len(poses)]):
        p = poses[t]
        v, _, _ = model.forward(z, p.theta, p.global_rot, p.global_trans)
        row = {"frame": t,
               "p2s_mm": synth.p2s_error(fr.scan, v.data,
                                         model.template.faces)}
        if bundle is not None:
            img, _ = bundle.render_frame(model, fr.camera, pose=p)
            m = np.asarray(fr.mask, dtype=bool)
            row["psnr_db"] = synth.psnr(img[m], np.asarray(fr.image)[m])
            row["ssim"] = synth.ssim(np.clip(img, 0, 1),
                                     np.asarray(fr.image))
        rows.append(row)

    summary = {"p2s_mm": float(np.mean([r["p2s_mm"] for r in rows])),
               "p2s_pct_hand": 100 * float(np.mean([r["p2s_mm"]
                                                    for r in rows]))
               / meta["hand_length"]}
    if bundle is not None:
        summary["psnr_db"] = float(np.mean([r["psnr_db"] for r in rows]))
        summary["ssim"] = float(np.mean([r["ssim"] for r in rows]))
    with open(out / "eval.json", "w") as f:
        json.dump({"per_frame": rows, "summary": summary}, f, indent=1)
    lines = ["frame  p2s_mm" + ("    psnr_db   ssim" if bundle else "")]
    for r in rows:
        line = f"{r['frame']:5d}  {r['p2s_mm']:7.3f}"
        if bundle is not None:
            line += f"  {r['psnr_db']:8.2f}  {r['ssim']:6.4f}"
        lines.append(line)
    lines.append("mean   " + "  ".join(f"{v:.4f}" for v in summary.values()))
    (out / "eval.txt").write_text("\n".join(lines) + "\n")
    write_manifest(out, "eval", cfg, inputs={"data": cfg["data"]},
                   metrics=summary)
    return 0


_EXPORT_DEFAULTS = {
    "seed": 0, "model": None, "bundle": None, "poses": None, "frames": None,
}
_EXPORT_ALLOWED = {k: None for k in _EXPORT_DEFAULTS}


def cmd_export(args):
    cfg = load_config(args, _EXPORT_DEFAULTS, _EXPORT_ALLOWED)
    for key in ("model", "bundle"):
        if not cfg[key]:
            raise ValueError(f"config key '{key}' is required")
    model, _ = load_model(cfg["model"])
    bundle = pipeline.load_bundle(cfg["bundle"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t = model.template
    poses = bundle.poses
    if cfg["poses"]:
        with open(cfg["poses"]) as f:
            poses = [Pose.from_json(p) for p in json.load(f)["poses"]]
    if cfg["frames"] is not None:
        poses = poses[:cfg["frames"]]
    for k, p in enumerate(poses):
        v, _, _ = model.forward(bundle.z, p.theta, p.global_rot,
                                p.global_trans)
        synth.save_obj(out / f"posed_{k:04d}.obj", v.data, t.faces,
                       t.uv_coords)
        imgio.save_ply(out / f"posed_{k:04d}.ply", v.data)
    imgio.save_png(out / "albedo.png", np.clip(bundle.albedo.values, 0, 1))
    write_manifest(out, "export", cfg,
                   inputs={"model": Path(cfg["model"]) / "model.ckpt",
                           "bundle": cfg["bundle"]},
                   metrics={"meshes": len(poses)})
    return 0


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


_COMMANDS = {
    "synth-gen": cmd_synth_gen,
    "train": cmd_train,
    "fit": cmd_fit,
    "adapt": cmd_adapt,
    "render": cmd_render,
    "eval": cmd_eval,
    "export": cmd_export,
}


def build_parser():
    ap = argparse.ArgumentParser(
        prog="handavatar",
        description="Hand avatar toolkit: synthetic data, model training, "
                    "capture fitting, adaptation, rendering, evaluation.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--template", choices=["desk", "mini"], default=None)
        sp.add_argument("--threads", type=int, default=None,
                        help="accepted for interface compatibility; "
                             "execution is single-process")
        sp.add_argument("override", nargs="*",
                        help="dotted-path config overrides, key.sub=value")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, FileNotFoundError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
