import math

import numpy as np
import pytest

from premixer.errors import CheckpointError, ConfigError, ShapeError
from premixer.patchmask import complementary_masks, patchify
from premixer.pretrain import (
    PIEncoder,
    Pretrainer,
    contrastive_loss,
    contrastive_probs,
    load_checkpoint,
    pretrain_objective,
    recon_loss,
    restore_optimizer,
    save_checkpoint,
)
from premixer.tensorcore import Rng, grad_check


@pytest.fixture
def enc():
    return PIEncoder(P=12, D=16, rng=Rng(0), L=12, C=1)


class TestForward:
    def test_zero_patch_depends_on_bias_only(self, enc):
        z1, _ = enc.embed(np.zeros((3, 2, 12)))
        np.testing.assert_array_equal(z1[0, 0], np.maximum(enc.enc1.bias.value, 0))
        assert np.array_equal(z1[0, 0], z1[2, 1])

    def test_patch_independence(self, enc):
        x = Rng(1).normal(size=(5, 4, 12))
        _, z2 = enc.embed(x)
        x2 = x.copy()
        x2[3, 1] += 10.0
        _, z2b = enc.embed(x2)
        keep = np.ones((5, 4), bool)
        keep[3, 1] = False
        assert np.array_equal(z2[keep], z2b[keep])

    def test_node_independence(self):
        enc = PIEncoder(P=12, D=16, rng=Rng(0))
        x = Rng(2).normal(size=(4, 6, 12))
        _, z2 = enc.embed(x)
        x2 = x.copy()
        x2[:, 2] = Rng(3).normal(size=(4, 12))
        _, z2b = enc.embed(x2)
        assert np.array_equal(z2[:, 5], z2b[:, 5])

    def test_shape_mismatch(self, enc):
        with pytest.raises(ShapeError):
            enc.embed(np.zeros((1, 1, 11)))

    def test_forward_matches_embed(self, enc):
        x = Rng(4).normal(size=(3, 2, 12))
        emb = enc.forward(x)
        z1, z2 = enc.embed(x)
        np.testing.assert_allclose(emb.z1, z1, rtol=1e-13)
        np.testing.assert_allclose(emb.z2, z2, rtol=1e-13)


class TestReconstruct:
    def test_bias_free_head(self, enc):
        assert enc.recon_head.bias is None
        assert not enc.reconstruct(np.zeros((56, 3, 16))).any()

    def test_shape(self, enc):
        assert enc.reconstruct(np.ones((56, 3, 16))).shape == (56, 3, 12)

    def test_identity_head(self):
        enc = PIEncoder(P=4, D=4, rng=Rng(0))
        enc.recon_head.weight.value[...] = np.eye(4)
        z = Rng(1).normal(size=(2, 3, 4))
        assert np.array_equal(enc.reconstruct(z), z)


class TestReconLoss:
    def test_perfect(self):
        x = Rng(0).normal(size=(4, 2, 3))
        m = complementary_masks(4, 2, 0.5, Rng(1)).m
        assert recon_loss(x, x, x, m) == 0.0

    def test_single_patch(self):
        x = np.array([[[1.0, 0.0]]])
        assert recon_loss(x, np.zeros((1, 1, 2)), np.full((1, 1, 2), 9.0), np.ones((1, 1))) == 1.0

    def test_collapse_identity(self):
        rng = Rng(5)
        x = rng.normal(size=(8, 3, 5))
        v1, v2 = rng.normal(size=x.shape), rng.normal(size=x.shape)
        m = complementary_masks(8, 3, 0.5, rng).m
        sel = np.where(m[..., None] == 1, v1, v2)
        ref = float(((x - sel) ** 2).sum())
        assert abs(recon_loss(x, v1, v2, m) - ref) <= 1e-9 * ref

    def test_non_binary_mask(self):
        x = np.zeros((2, 1, 2))
        with pytest.raises(ConfigError):
            recon_loss(x, x, x, np.full((2, 1), 0.5))


class TestContrastive:
    def test_t_p_one(self):
        rng = Rng(0)
        assert contrastive_loss(rng.normal(size=(1, 3, 4)), rng.normal(size=(1, 3, 4))) == 0.0

    def test_probs_normalized(self):
        rng = Rng(1)
        p = contrastive_probs(rng.normal(size=(5, 3, 4)) * 3, rng.normal(size=(5, 3, 4)) * 3)
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-9)
        assert np.all(np.diagonal(p, axis1=-2, axis2=-1) == 0.0)

    def test_hand_enumeration(self):
        e = np.eye(4)
        # partners (0,2) and (1,3) share a unit vector; distractors are orthogonal
        v1 = np.stack([e[0], e[1]])[:, None, :]
        v2 = np.stack([e[0], e[1]])[:, None, :]
        expected = -math.log(math.e / (math.e + 2))
        assert abs(contrastive_loss(v1, v2) - expected) < 1e-12

    def test_gradient(self):
        rng = Rng(2)
        z1, z2 = rng.normal(size=(3, 2, 4)), rng.normal(size=(3, 2, 4))

        def fn(a, b):
            loss, da, db = contrastive_loss(a, b, return_grad=True)
            return loss, [da, db]

        assert grad_check(fn, [z1, z2]) < 1e-5


class TestObjective:
    def test_total_is_sum(self, enc):
        x = Rng(0).normal(size=(2, 48, 3, 1))
        res = pretrain_objective(enc, x, 0.5, Rng(1), backward=False)
        assert abs(res.total - (res.recon + res.contrastive)) < 1e-9

    def test_no_cl(self, enc):
        res = pretrain_objective(enc, Rng(0).normal(size=(1, 24, 2, 1)), 0.5, Rng(1), use_cl=False,
                                 backward=False)
        assert res.contrastive == 0.0 and res.total == res.recon

    def test_gradcheck_two_patch_toy(self):
        enc = PIEncoder(P=4, D=5, rng=Rng(3), L=4)
        x = Rng(4).normal(size=(1, 8, 2, 1))
        params = enc.parameters()

        def fn(*_):
            for p in params:
                p.zero_grad()
            loss = pretrain_objective(enc, x, 0.5, Rng(9)).total
            return loss, [p.grad.copy() for p in params]

        assert grad_check(fn, [p.value for p in params]) < 1e-5

    def test_loss_decreases_and_is_deterministic(self):
        from premixer.datapipe import generate_synthetic

        v = generate_synthetic(3, 3, 0).values
        v = (v - v.mean()) / v.std()
        batch = np.stack([v[i : i + 96] for i in range(0, 96 * 2, 24)])

        def run():
            tr = Pretrainer(PIEncoder(P=12, D=16, rng=Rng(1), L=12), lr=3e-3, seed=5)
            return [tr.step(batch).total for _ in range(50)]

        a, b = run(), run()
        assert a == b
        assert np.mean(a[-5:]) < np.mean(a[:5])


class TestCheckpoint:
    def test_round_trip(self, enc, tmp_path):
        save_checkpoint(enc, tmp_path / "ck", seed=3)
        back, manifest, _ = load_checkpoint(tmp_path / "ck")
        assert manifest["D"] == 16 and manifest["L"] == 12 and manifest["seed"] == 3
        x = Rng(0).normal(size=(4, 2, 12))
        a, b = enc.autoencode(x), back.autoencode(x)
        np.testing.assert_allclose(b, a, rtol=1e-5, atol=1e-6)

    def test_default_manifest_values(self, tmp_path):
        save_checkpoint(PIEncoder(12, 96, Rng(0), L=12), tmp_path / "ck")
        import json

        m = json.loads((tmp_path / "ck" / "manifest.json").read_text())
        assert m["D"] == 96 and m["L"] == 12

    def test_wrong_patch_dim(self, enc, tmp_path):
        save_checkpoint(enc, tmp_path / "ck")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "ck", expect_P=24)

    def test_missing(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "none")

    def test_optimizer_state(self, enc, tmp_path):
        tr = Pretrainer(enc, seed=0)
        tr.step(Rng(0).normal(size=(2, 24, 2, 1)))
        save_checkpoint(enc, tmp_path / "ck", optim=tr.optim)
        back, manifest, arrays = load_checkpoint(tmp_path / "ck")
        tr2 = Pretrainer(back)
        restore_optimizer(tr2.optim, manifest, arrays)
        assert tr2.optim.step_count == 1


def test_patchify_default_grid():
    assert patchify(np.zeros((672, 2, 1)), 12).patches.shape == (56, 2, 12)
