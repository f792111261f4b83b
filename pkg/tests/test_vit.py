"""Mini ViT: shapes, attention records, adjoints, checkpoint format,
and the attention-equivariance property that the whole method rests on."""

import numpy as np
import pytest

from attnreg import autodiff as ad
from attnreg import gridtransform as gt
from attnreg import vit
from attnreg.autodiff import Tape, Tensor
from attnreg.errors import ContractError, DimensionError, StateError
from attnreg.gridtransform import FLIP_H, FLIP_HV, FLIP_V, ROT90, ROT180, ROT270, GridShape


def tiny_config(**kw):
    base = dict(patch_size=2, grid=GridShape(3, 3), embed_dim=16, num_layers=2,
                num_heads=2, mlp_ratio=2.0, num_classes=2,
                use_positional_embedding=False, in_channels=3)
    base.update(kw)
    return vit.ViTConfig(**base)


def random_image(rng, config):
    h = config.grid.h * config.patch_size
    w = config.grid.w * config.patch_size
    return rng.random(size=(config.in_channels, h, w))


def patch_constant_image(rng, config):
    """Every patch is a single flat color; flips/rotations then act on the
    patch grid exactly."""
    blocks = rng.random(size=(config.in_channels, config.grid.h, config.grid.w))
    return np.repeat(np.repeat(blocks, config.patch_size, axis=1), config.patch_size, axis=2)


class TestPatchify:
    def test_hand_layout(self):
        img = np.arange(16.0).reshape(1, 4, 4)
        rows = vit.patchify(img, 2)
        np.testing.assert_array_equal(rows[0], [0, 1, 4, 5])
        np.testing.assert_array_equal(rows[3], [10, 11, 14, 15])

    def test_channel_major_rows(self):
        img = np.stack([np.zeros((2, 2)), np.ones((2, 2))])
        rows = vit.patchify(img, 2)
        np.testing.assert_array_equal(rows, [[0, 0, 0, 0, 1, 1, 1, 1]])

    def test_divisibility_enforced(self):
        with pytest.raises(DimensionError):
            vit.patchify(np.zeros((1, 5, 4)), 2)


class TestForward:
    def test_shapes_and_row_stochastic_attention(self):
        cfg = tiny_config(use_positional_embedding=True)
        rng = np.random.default_rng(0)
        params = vit.init_params(cfg, rng)
        res = vit.forward(random_image(rng, cfg), params, cfg)
        assert res.logits.shape == (cfg.num_classes,)
        assert len(res.attentions) == cfg.num_layers
        n = cfg.grid.n
        for rec in res.attentions:
            assert rec.matrix.shape == (n + 1, n + 1)
            np.testing.assert_allclose(rec.matrix.data.sum(axis=1), np.ones(n + 1), atol=1e-9)
            assert rec.matrix.data.min() >= 0.0

    def test_forward_is_deterministic(self):
        cfg = tiny_config()
        rng = np.random.default_rng(1)
        img = random_image(rng, cfg)
        params = vit.init_params(cfg, np.random.default_rng(7))
        a = vit.forward(img, params, cfg).logits.data
        b = vit.forward(img, params, cfg).logits.data
        assert np.array_equal(a, b)

    def test_same_seed_same_params(self):
        cfg = tiny_config()
        p1 = vit.init_params(cfg, np.random.default_rng(3))
        p2 = vit.init_params(cfg, np.random.default_rng(3))
        assert list(p1) == list(p2)
        for k in p1:
            assert np.array_equal(p1[k].data, p2[k].data)

    def test_resized_view_runs_with_positional_resampling(self):
        cfg = tiny_config(use_positional_embedding=True)
        params = vit.init_params(cfg, np.random.default_rng(2))
        small = np.random.default_rng(4).random(size=(3, 4, 4))  # 2x2 grid view
        res = vit.forward(small, params, cfg)
        assert res.grid == GridShape(2, 2)
        assert res.attentions[0].matrix.shape == (5, 5)

    def test_wrong_channels_rejected(self):
        cfg = tiny_config()
        with pytest.raises(DimensionError):
            vit.forward(np.zeros((1, 6, 6)), vit.init_params(cfg, np.random.default_rng(0)), cfg)


class TestAdjoints:
    def test_adjoints_require_backward(self):
        cfg = tiny_config()
        params = vit.init_params(cfg, np.random.default_rng(0))
        res = vit.forward(random_image(np.random.default_rng(1), cfg), params, cfg)
        with pytest.raises(StateError):
            vit.attention_adjoints(res, 0)

    def test_adjoints_populated_after_backward(self):
        cfg = tiny_config()
        params = vit.init_params(cfg, np.random.default_rng(0))
        with Tape() as tape:
            res = vit.forward(random_image(np.random.default_rng(1), cfg), params, cfg)
            y = vit.class_logit(res, 1)
        tape.backward(y)
        adjoints = vit.attention_adjoints(res, 1)
        n = cfg.grid.n
        assert len(adjoints) == cfg.num_layers
        for adj in adjoints:
            assert adj.shape == (n + 1, n + 1)
            assert np.any(adj != 0.0)

    def test_class_index_validated(self):
        cfg = tiny_config()
        params = vit.init_params(cfg, np.random.default_rng(0))
        res = vit.forward(random_image(np.random.default_rng(1), cfg), params, cfg)
        with pytest.raises(ContractError):
            vit.attention_adjoints(res, 9)


class TestGradientFidelity:
    def test_class_logit_wrt_patch_embedding(self):
        """Full-model gradient of a class logit against central differences."""
        cfg = vit.ViTConfig(patch_size=2, grid=GridShape(2, 2), embed_dim=8, num_layers=1,
                            num_heads=2, mlp_ratio=2.0, num_classes=2,
                            use_positional_embedding=True, in_channels=3)
        rng = np.random.default_rng(5)
        params = vit.init_params(cfg, rng)
        img = random_image(rng, cfg)

        def f(probe):
            patched = dict(params)
            patched["patch_embed.weight"] = probe
            return vit.class_logit(vit.forward(img, patched, cfg), 0)

        err = ad.grad_check(f, Tensor(params["patch_embed.weight"].data.copy()), step=1e-5)
        assert err < 1e-4, f"rel err {err:.2e}"

    def test_bce_loss_wrt_attention_projection(self):
        cfg = vit.ViTConfig(patch_size=2, grid=GridShape(2, 2), embed_dim=8, num_layers=1,
                            num_heads=2, mlp_ratio=2.0, num_classes=2,
                            use_positional_embedding=False, in_channels=1)
        rng = np.random.default_rng(6)
        params = vit.init_params(cfg, rng)
        img = random_image(rng, cfg)
        targets = Tensor(np.array([1.0, 0.0]))

        def f(probe):
            patched = dict(params)
            patched["blocks.0.attn.wq"] = probe
            res = vit.forward(img, patched, cfg)
            return ad.bce_with_logits(res.logits, targets)

        err = ad.grad_check(f, Tensor(params["blocks.0.attn.wq"].data.copy()), step=1e-5)
        assert err < 1e-4, f"rel err {err:.2e}"


class TestEquivariance:
    """Zero positional embeddings + per-patch-constant images: a spatial
    transform of the image conjugates every layer's attention by the token
    permutation, so the inverse transform recovers it to float precision."""

    PIXEL_VIEW = {
        FLIP_H: lambda m: np.flip(m, axis=2),
        FLIP_V: lambda m: np.flip(m, axis=1),
        FLIP_HV: lambda m: np.flip(m, axis=(1, 2)),
        ROT90: lambda m: np.rot90(m, 1, axes=(1, 2)),
        ROT180: lambda m: np.rot90(m, 2, axes=(1, 2)),
        ROT270: lambda m: np.rot90(m, 3, axes=(1, 2)),
    }

    @pytest.mark.parametrize("transform", list(PIXEL_VIEW), ids=str)
    def test_attention_equivariance(self, transform):
        cfg = tiny_config()  # positional embeddings off, 3x3 grid
        rng = np.random.default_rng(17)
        params = vit.init_params(cfg, rng)
        for _ in range(3):
            img = patch_constant_image(rng, cfg)
            view = np.ascontiguousarray(self.PIXEL_VIEW[transform](img))
            res_a = vit.forward(img, params, cfg)
            res_b = vit.forward(view, params, cfg)
            for rec_a, rec_b in zip(res_a.attentions, res_b.attentions):
                back = gt.invert_attention_fast(rec_b.matrix, transform, cfg.grid).data
                assert np.max(np.abs(back - rec_a.matrix.data)) < 1e-9


class TestCheckpoint:
    def test_roundtrip_bitwise(self, tmp_path):
        cfg = tiny_config(use_positional_embedding=True)
        params = vit.init_params(cfg, np.random.default_rng(8))
        path = tmp_path / "model.ckpt"
        vit.save_checkpoint(path, params, cfg)
        loaded, cfg2 = vit.load_checkpoint(path)
        assert cfg2 == cfg
        assert list(loaded) == list(params)
        for k in params:
            assert np.array_equal(loaded[k].data, params[k].data)

    def test_save_is_byte_deterministic(self, tmp_path):
        cfg = tiny_config()
        params = vit.init_params(cfg, np.random.default_rng(9))
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        vit.save_checkpoint(a, params, cfg)
        vit.save_checkpoint(b, params, cfg)
        assert a.read_bytes() == b.read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 16)
        with pytest.raises(ContractError):
            vit.load_checkpoint(path)

    def test_load_params_into_checks_shapes(self):
        cfg = tiny_config()
        params = vit.init_params(cfg, np.random.default_rng(0))
        other = {k: Tensor(v.data.copy()) for k, v in params.items()}
        other["head.weight"] = Tensor(np.zeros((3, 3)))
        with pytest.raises(DimensionError):
            vit.load_params_into(params, other)
