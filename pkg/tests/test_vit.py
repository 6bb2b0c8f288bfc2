import numpy as np
import pytest

from sslvit import tensor as T
from sslvit import vit
from sslvit.errors import BadMagicError, ConfigError, ShapeError, TruncatedFileError, VersionError
from sslvit.tensor import Tensor
from sslvit.vit import ViTConfig, ViTParams, encode, head, param_count, patchify

MICRO = ViTConfig(image_size=8, patch_size=4, channels=1, depth=2, heads=2, dim=16,
                  mlp_ratio=2.0, out_dim=8)
DESK = ViTConfig()


def make_params(config, seed=0, requires_grad=True):
    return ViTParams.init(config, np.random.default_rng(seed), requires_grad=requires_grad)


class TestConfig:
    def test_defaults_are_desk_scale(self):
        assert (DESK.image_size, DESK.patch_size, DESK.depth, DESK.heads, DESK.dim,
                DESK.out_dim) == (32, 8, 4, 4, 64, 128)

    def test_indivisible_image_rejected(self):
        with pytest.raises(ConfigError):
            ViTConfig(image_size=30, patch_size=8)

    def test_dim_heads_divisibility(self):
        with pytest.raises(ConfigError):
            ViTConfig(dim=62, heads=4)

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="bogus"):
            ViTConfig.from_dict({"bogus": 1})

    def test_dict_roundtrip(self):
        assert ViTConfig.from_dict(DESK.to_dict()) == DESK


class TestPatchify:
    def test_single_patch_is_flattened_image(self):
        rng = np.random.default_rng(1)
        img = rng.standard_normal((1, 4, 4))
        out = patchify(img, 4)
        assert out.shape == (1, 16)
        assert np.array_equal(out[0], img.reshape(-1))

    def test_patches_are_pixel_permutation(self):
        rng = np.random.default_rng(2)
        img = rng.standard_normal((1, 4, 4))
        out = patchify(img, 2)
        assert out.shape == (4, 4)
        assert np.array_equal(np.sort(out.reshape(-1)), np.sort(img.reshape(-1)))

    def test_paper_scale_shapes(self):
        img = np.zeros((3, 32, 32))
        out = patchify(img, 16)
        assert out.shape == (4, 768)

    def test_indivisible_error_names_dims(self):
        with pytest.raises(ShapeError, match="H=5.*W=4.*patch_size=2"):
            patchify(np.zeros((1, 5, 4)), 2)

    def test_values_preserved_exactly(self):
        rng = np.random.default_rng(3)
        img = rng.standard_normal((2, 6, 6))
        out = patchify(img, 3)
        # top-left patch, channel-major layout
        assert np.array_equal(out[0].reshape(2, 3, 3), img[:, :3, :3])


class TestEncode:
    def test_embedding_shape(self):
        params = make_params(MICRO)
        img = np.random.default_rng(0).random((1, 8, 8))
        emb = encode(params, img)
        assert emb.shape == (MICRO.dim,)

    def test_deterministic_bit_exact(self):
        params = make_params(MICRO)
        img = np.random.default_rng(1).random((1, 8, 8))
        a = encode(params, img).data
        b = encode(params, img).data
        assert np.array_equal(a, b)

    def test_continuity_probe(self):
        params = make_params(MICRO, seed=4)
        rng = np.random.default_rng(5)
        img = rng.random((1, 8, 8))
        base = encode(params, img).data
        ratios = []
        for step in (1e-6, 1e-5, 1e-4):
            bumped = img.copy()
            bumped[0, 3, 3] += step
            delta = np.linalg.norm(encode(params, bumped).data - base)
            ratios.append(delta / step)
        ratios = np.array(ratios)
        assert np.all(np.isfinite(ratios))
        assert ratios.max() / max(ratios.min(), 1e-30) < 10.0

    def test_wrong_channel_count(self):
        params = make_params(MICRO)
        with pytest.raises(ShapeError):
            encode(params, np.zeros((3, 8, 8)))

    def test_lower_resolution_uses_interpolated_positions(self):
        params = make_params(DESK)
        img = np.random.default_rng(6).random((1, 16, 16))
        emb = encode(params, img)
        assert emb.shape == (DESK.dim,)

    def test_mismatch_without_interpolation_errors(self):
        cfg = ViTConfig(pos_interpolation=False)
        params = make_params(cfg)
        with pytest.raises(ShapeError, match="interpolation"):
            encode(params, np.random.default_rng(7).random((1, 16, 16)))

    def test_permutation_covariance_with_zero_positions(self):
        cfg = MICRO
        params = make_params(cfg, seed=8)
        params["pos_embed"].data[:] = 0.0
        rng = np.random.default_rng(9)
        img = rng.random((1, 8, 8))
        patches = patchify(img, cfg.patch_size)
        perm = rng.permutation(patches.shape[0])
        shuffled = patches[perm].reshape(cfg.grid, cfg.grid, cfg.channels,
                                         cfg.patch_size, cfg.patch_size)
        shuffled = shuffled.transpose(2, 0, 3, 1, 4).reshape(cfg.channels, 8, 8)
        a = encode(params, img).data
        b = encode(params, shuffled).data
        assert np.allclose(a, b, atol=1e-12)


class TestHead:
    def test_zero_embedding_zero_init_gives_zero_logits(self):
        params = make_params(MICRO)
        params["head.weight"].data[:] = 0.0
        params["head.bias"].data[:] = 0.0
        logits = head(params, np.zeros(MICRO.dim))
        assert np.array_equal(logits.data, np.zeros(MICRO.out_dim))

    def test_logits_length(self):
        params = make_params(MICRO)
        assert head(params, np.ones(MICRO.dim)).shape == (8,)

    def test_length_mismatch(self):
        params = make_params(MICRO)
        with pytest.raises(ShapeError):
            head(params, np.zeros(MICRO.dim + 1))

    def test_head_gradient_matches_fd(self):
        params = make_params(MICRO, seed=10)
        emb = Tensor(np.random.default_rng(11).standard_normal(MICRO.dim))

        def f():
            return head(params, emb)[3]

        loss = f()
        T.backward(loss)
        w = params["head.weight"]
        numeric = T.finite_difference(f, [w], eps=1e-5)[0]
        assert np.allclose(w.grad, numeric, rtol=1e-4, atol=1e-7)


class TestParams:
    def test_param_count_matches_closed_form(self):
        params = make_params(DESK)
        assert params.num_params() == param_count(DESK)

    def test_desk_default_param_count_regression(self):
        assert param_count(DESK) == 213696

    def test_init_conventions(self):
        params = make_params(MICRO, seed=12)
        assert np.array_equal(params["cls_token"].data, np.zeros(MICRO.dim))
        assert np.array_equal(params["blocks.0.norm1.gamma"].data, np.ones(MICRO.dim))
        assert np.array_equal(params["patch_embed.bias"].data, np.zeros(MICRO.dim))
        w = params["patch_embed.weight"].data
        assert np.all(np.abs(w) <= 0.04 + 1e-12)  # truncated at 2 std
        assert w.std() > 0.005

    def test_copy_detaches(self):
        params = make_params(MICRO)
        clone = params.copy(requires_grad=False)
        clone["cls_token"].data[0] = 99.0
        assert params["cls_token"].data[0] == 0.0
        assert not clone["cls_token"].requires_grad


class TestEncodeHeadGradients:
    def test_full_pass_matches_fd_sampled_coords(self):
        params = make_params(MICRO, seed=13)
        rng = np.random.default_rng(14)
        img = rng.random((1, 8, 8))
        weights = Tensor(rng.standard_normal(MICRO.out_dim))

        def f():
            return T.sum_(head(params, encode(params, img)) * weights)

        loss = f()
        T.backward(loss)
        for name, t in params.items():
            coords = rng.choice(t.size, size=min(2, t.size), replace=False)
            for c in coords:
                numeric = T.finite_difference_at(f, t, int(c), eps=1e-5)
                analytic = t.grad.reshape(-1)[c]
                assert np.isclose(analytic, numeric, rtol=1e-4, atol=1e-7), \
                    f"{name}[{c}]: {analytic} vs {numeric}"


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        params = make_params(MICRO, seed=15)
        path = str(tmp_path / "model.svtc")
        vit.write_checkpoint(path, params)
        back = vit.read_checkpoint(path)
        assert back.config == MICRO
        for (n1, t1), (n2, t2) in zip(params.items(), back.items()):
            assert n1 == n2
            assert np.array_equal(t1.data, t2.data)
        assert not back["cls_token"].requires_grad

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.svtc"
        path.write_bytes(b"XXXX" + b"\x00" * 16)
        with pytest.raises(BadMagicError):
            vit.read_checkpoint(str(path))

    def test_truncated(self, tmp_path):
        params = make_params(MICRO)
        path = str(tmp_path / "model.svtc")
        vit.write_checkpoint(path, params)
        raw = open(path, "rb").read()
        open(path, "wb").write(raw[:len(raw) // 2])
        with pytest.raises(TruncatedFileError):
            vit.read_checkpoint(path)

    def test_version_mismatch(self, tmp_path):
        params = make_params(MICRO)
        path = str(tmp_path / "model.svtc")
        vit.write_checkpoint(path, params)
        raw = bytearray(open(path, "rb").read())
        raw[4] = 99
        open(path, "wb").write(bytes(raw))
        with pytest.raises(VersionError):
            vit.read_checkpoint(path)


class TestBilinear:
    def test_same_grid_identity(self):
        m = vit._bilinear_matrix(4, 4)
        assert np.allclose(m, np.eye(16))

    def test_rows_sum_to_one(self):
        m = vit._bilinear_matrix(4, 2)
        assert np.allclose(m.sum(axis=1), 1.0)

    def test_single_target_is_center(self):
        m = vit._bilinear_matrix(3, 1)
        # center of a 3x3 grid is its middle cell
        expected = np.zeros(9)
        expected[4] = 1.0
        assert np.allclose(m[0], expected)
