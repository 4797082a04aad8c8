"""Latent-identity hand model: decoders, encoder, correctives, forward."""

import numpy as np
import pytest

from handavatar import synth, tape
from handavatar.kin import IDENT6
from handavatar.model import HandModel, child_table, kl_divergence
from handavatar.tape import Params, Tensor, finite_diff_check


@pytest.fixture(scope="module")
def template():
    mesh, _ = synth.build_template("mini")
    return mesh


@pytest.fixture(scope="module")
def model(template):
    return HandModel(template, np.random.default_rng(0))


def _perturbed(template, seed=1):
    """Model whose identity decoder actually responds to z (fresh weights in
    the zero-initialized last layer)."""
    m = HandModel(template, np.random.default_rng(0))
    rng = np.random.default_rng(seed)
    w = m.params["id_decoder.w1"]
    w.data = 0.02 * rng.standard_normal(w.data.shape)
    w2 = m.params["pose_decoder.w1"]
    w2.data = 0.02 * rng.standard_normal(w2.data.shape)
    return m


class TestChildTable:
    def test_chain(self):
        assert np.array_equal(child_table([-1, 0, 1]), [1, 2, -1])

    def test_branching_picks_lowest(self):
        assert np.array_equal(child_table([-1, 0, 0]), [1, -1, -1])

    def test_branching_override(self):
        assert np.array_equal(child_table([-1, 0, 0], {0: 2}), [2, -1, -1])


class TestZeroLatentIsTemplate:
    def test_decode_id_zero(self, model):
        skel, vert = model.decode_id(np.zeros(model.d_id))
        assert np.abs(skel.data).max() == 0.0
        assert np.abs(vert.data).max() == 0.0

    def test_forward_zero_everything(self, model, template):
        v, j, _ = model.forward(np.zeros(model.d_id),
                                np.zeros((template.num_joints, 6)))
        assert np.abs(v.data - template.rest_vertices).max() < 1e-9
        assert np.abs(j.data - template.rest_joints).max() < 1e-9


class TestSkeletonCorrective:
    def test_constrained_joints_slide_along_bone(self, template):
        m = _perturbed(template)
        rng = np.random.default_rng(2)
        for _ in range(5):
            z = rng.standard_normal(m.d_id)
            skel, _ = m.decode_id(z)
            offs = skel.data[m.constrained_skel]
            axes = template.bone_axis[m.constrained_skel]
            cross = np.cross(offs, axes)
            assert np.linalg.norm(cross, axis=1).max() < 1e-9

    def test_root_never_moves(self, template):
        m = _perturbed(template)
        skel, _ = m.decode_id(np.random.default_rng(3).standard_normal(m.d_id))
        assert np.abs(skel.data[m.root]).max() == 0.0


class TestPoseCorrective:
    def test_zero_pose_gives_zero_corrective(self, template):
        m = _perturbed(template)
        rng = np.random.default_rng(4)
        for _ in range(3):
            z = rng.standard_normal(m.d_id)
            c = m.decode_pose_corrective(np.zeros((template.num_joints, 6)), z)
            assert np.abs(c.data).max() < 1e-12

    def test_masked_entries_have_no_effect(self, template):
        m = _perturbed(template)
        rng = np.random.default_rng(5)
        z = rng.standard_normal(m.d_id)
        theta = rng.standard_normal((template.num_joints, 6))
        base = m.decode_pose_corrective(theta, z).data
        bumped = theta + 10.0 * (1.0 - m.theta_mask)   # only masked entries
        again = m.decode_pose_corrective(bumped, z).data
        assert np.abs(base - again).max() == 0.0

    def test_gate_is_nonnegative(self, model):
        gate = np.maximum(model.phi.data, 0.0)
        assert gate.min() >= 0.0


class TestEncoder:
    def _inputs(self, template, seed=0):
        rng = np.random.default_rng(seed)
        depths = rng.uniform(0, 300, size=(2, 64, 64))
        joints = template.rest_joints - template.rest_joints[0]
        return depths, joints

    def test_shape_validation(self, model, template):
        with pytest.raises(ValueError, match="depth maps"):
            model.encode_id(np.zeros((2, 32, 32)), template.rest_joints * 0)

    def test_alignment_validation(self, model, template):
        depths = np.zeros((2, 64, 64))
        joints = template.rest_joints + 50.0   # root far from origin
        with pytest.raises(ValueError, match="rigid-aligned"):
            model.encode_id(depths, joints)

    def test_posterior_mean_when_no_eps(self, model, template):
        d, j = self._inputs(template)
        code = model.encode_id(d, j)
        assert np.array_equal(code.z.data, code.mu.data)

    def test_reparameterization(self, model, template):
        d, j = self._inputs(template)
        eps = np.random.default_rng(6).standard_normal(model.d_id)
        code = model.encode_id(d, j, eps=eps)
        expect = code.mu.data + np.exp(0.5 * code.log_var.data) * eps
        assert np.allclose(code.z.data, expect)

    def test_zero_init_head_gives_standard_normal_posterior(self, model,
                                                            template):
        d, j = self._inputs(template)
        code = model.encode_id(d, j)
        assert np.abs(code.mu.data).max() == 0.0
        assert np.abs(code.log_var.data).max() == 0.0
        assert float(kl_divergence(code).data) == 0.0


class TestKlDivergence:
    def test_closed_form(self):
        from handavatar.model import IdCode
        mu = Tensor(np.array([1.0, -2.0]))
        lv = Tensor(np.array([0.5, -0.3]))
        got = kl_divergence(IdCode(z=mu, mu=mu, log_var=lv)).data
        expect = 0.5 * np.sum(np.exp(lv.data) + mu.data ** 2 - 1 - lv.data)
        assert np.allclose(got, expect)

    def test_zero_at_standard_normal(self):
        from handavatar.model import IdCode
        mu = Tensor(np.zeros(8))
        lv = Tensor(np.zeros(8))
        assert float(kl_divergence(IdCode(z=mu, mu=mu, log_var=lv)).data) == 0.0


class TestForwardGradients:
    def test_full_forward_gradcheck(self, template):
        m = _perturbed(template)
        rng = np.random.default_rng(7)
        p = Params()
        z = p.add("z", 0.5 * rng.standard_normal(m.d_id))
        th = p.add("theta", 0.1 * rng.standard_normal((template.num_joints, 6)))
        gr = p.add("grot", 0.1 * rng.standard_normal(6))
        gt = p.add("gtrans", rng.standard_normal(3))
        tgt = template.rest_vertices + rng.standard_normal(
            template.rest_vertices.shape)

        def build():
            v, j, _ = m.forward(z, th, gr, gt)
            return tape.tmean((v - tgt) ** 2)

        err, name = finite_diff_check(build, p, max_coords_per_param=8)
        assert err < 1e-5, f"worst {err:.2e} at {name}"

    def test_gradients_reach_model_weights(self, template):
        m = _perturbed(template)
        rng = np.random.default_rng(8)
        z = Tensor(rng.standard_normal(m.d_id), requires_grad=True)
        v, _, _ = m.forward(z, 0.1 * rng.standard_normal(
            (template.num_joints, 6)))
        tape.tsum(v * v).backward()
        assert m.params["id_decoder.w1"].grad is not None
        assert np.abs(m.params["id_decoder.w1"].grad).max() > 0
        assert m.params["phi"].grad is not None


class TestDeterminism:
    def test_same_rng_same_weights(self, template):
        a = HandModel(template, np.random.default_rng(42))
        b = HandModel(template, np.random.default_rng(42))
        for name, t in a.params:
            assert np.array_equal(t.data, b.params[name].data), name
