"""Vision transformer: geometry, gradients, positional sensitivity, determinism."""

import numpy as np
import pytest

from facetclip import tensor as T
from facetclip import vit as V
from facetclip.errors import ConfigError

from helpers import finite_difference, grad_agreement, ref_vit_global


SMALL = V.ViTConfig(image_size=16, patch_size=8, d_v=8, n_layers=1, n_heads=2)


class TestGeometry:
    def test_default_patch_grid_is_4x4(self):
        cfg = V.ViTConfig()
        assert cfg.grid == 4
        assert cfg.n_patches == 16

    def test_encode_image_shapes(self):
        model = V.VisionTransformer(V.ViTConfig(), seed=0)
        img = np.zeros((3, 64, 64), dtype=np.float32)
        g, patches = V.encode_image(model, img)
        assert g.shape == (64,)
        assert patches.shape == (16, 64)

    @pytest.mark.parametrize("size,patch", [(64, 16), (32, 8), (16, 8)])
    def test_shape_contract_across_configs(self, size, patch):
        cfg = V.ViTConfig(image_size=size, patch_size=patch, d_v=8, n_layers=1, n_heads=2)
        model = V.VisionTransformer(cfg, seed=1)
        g, patches = V.encode_image(model, np.zeros((3, size, size), dtype=np.float32))
        assert patches.shape == ((size // patch) ** 2, 8)
        assert g.shape == (8,)

    def test_indivisible_patch_rejected(self):
        with pytest.raises(ConfigError):
            V.ViTConfig(image_size=60, patch_size=16)

    def test_patchify_layout(self):
        img = np.arange(3 * 4 * 4, dtype=np.float32).reshape(1, 3, 4, 4)
        patches = V.patchify(img, 2)
        assert patches.shape == (1, 4, 12)
        np.testing.assert_array_equal(patches[0, 0], img[0, :, :2, :2].reshape(-1))
        np.testing.assert_array_equal(patches[0, 1], img[0, :, :2, 2:].reshape(-1))
        np.testing.assert_array_equal(patches[0, 2], img[0, :, 2:, :2].reshape(-1))


class TestGradients:
    def test_forward_matches_float64_reference(self):
        model = V.VisionTransformer(SMALL, seed=2)
        rng = np.random.default_rng(12)
        patches = V.patchify(rng.standard_normal((2, 3, 16, 16)).astype(np.float32), 8)
        g, _ = model.encode_batch(patches)
        ref = ref_vit_global({k: v.data.astype(np.float64) for k, v in model.params.items()},
                             SMALL, patches)
        np.testing.assert_allclose(g.data, ref, atol=1e-5)

    def test_patch_embedding_gradient_vs_finite_differences(self):
        # The global feature sits behind a final layer norm, so its gradients
        # are far below float32 finite-difference resolution; the oracle runs
        # an independent float64 reference forward instead.
        model = V.VisionTransformer(SMALL, seed=2)
        rng = np.random.default_rng(3)
        img = rng.standard_normal((3, 16, 16)).astype(np.float32)
        patches = V.patchify(img[None], SMALL.patch_size)
        w = model.params["patch.w"]

        with T.GradTape() as tape:
            tape.watch([p for _, p in model.parameters()])
            g, _ = model.encode_batch(patches)
            tape.backward(T.sum_all(T.mul(g, g)))

        ref_params = {k: v.data.astype(np.float64) for k, v in model.params.items()}

        def ref_loss():
            out = ref_vit_global(ref_params, SMALL, patches)
            return float((out * out).sum())

        class _P:  # adapter so finite_difference perturbs the float64 copy
            data = ref_params["patch.w"]

        fd = finite_difference([_P], ref_loss)[0]
        ok = grad_agreement(w.grad, fd, abs_floor=1e-6)
        assert ok.mean() >= 0.99

    def test_every_parameter_gets_finite_gradient(self):
        model = V.VisionTransformer(SMALL, seed=4)
        rng = np.random.default_rng(5)
        patches = V.patchify(rng.standard_normal((2, 3, 16, 16)).astype(np.float32), 8)
        with T.GradTape() as tape:
            params = [p for _, p in model.parameters()]
            tape.watch(params)
            g, _ = model.encode_batch(patches)
            tape.backward(T.sum_all(T.mul(g, g)))
        for name, p in model.parameters():
            assert p.grad is not None, name
            assert np.isfinite(p.grad).all(), name


class TestPositionalSensitivity:
    def test_shuffling_patches_changes_global(self):
        model = V.VisionTransformer(SMALL, seed=6)
        rng = np.random.default_rng(7)
        patches = V.patchify(rng.standard_normal((1, 3, 16, 16)).astype(np.float32), 8)
        g1, _ = model.encode_batch(patches)
        perm = np.array([2, 0, 3, 1])
        g2, _ = model.encode_batch(patches[:, perm])
        assert not np.allclose(g1.data, g2.data, atol=1e-6)


class TestDeterminism:
    def test_same_seed_same_params_and_output(self):
        a = V.VisionTransformer(SMALL, seed=11)
        b = V.VisionTransformer(SMALL, seed=11)
        for (na, pa), (nb, pb) in zip(a.parameters(), b.parameters()):
            assert na == nb
            assert pa.data.tobytes() == pb.data.tobytes()
        rng = np.random.default_rng(8)
        patches = V.patchify(rng.standard_normal((1, 3, 16, 16)).astype(np.float32), 8)
        ga, _ = a.encode_batch(patches)
        gb, _ = b.encode_batch(patches)
        assert ga.data.tobytes() == gb.data.tobytes()

    def test_mean_pool_mode(self):
        cfg = V.ViTConfig(image_size=16, patch_size=8, d_v=8, n_layers=1, n_heads=2,
                          global_pool="mean")
        model = V.VisionTransformer(cfg, seed=9)
        rng = np.random.default_rng(10)
        patches = V.patchify(rng.standard_normal((1, 3, 16, 16)).astype(np.float32), 8)
        g, toks = model.encode_batch(patches)
        np.testing.assert_allclose(g.data[0], toks.data[0].mean(axis=0), atol=1e-6)
