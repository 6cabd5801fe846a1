import numpy as np
import pytest

from vitaepp import tensor as T
from vitaepp.gradcheck import check_grads
from vitaepp.model import (
    ModelConfig,
    attention_cost,
    decode,
    encode,
    encode_indices,
    extract_features,
    full_plan,
    init_params,
    make_mask_plan,
    num_hidden,
    patchify,
    positional_encoding_3d,
    predictor_head,
    unpatchify,
)
from vitaepp.tensor import Tensor


@pytest.fixture(autouse=True)
def f64():
    with T.precision("f64"):
        yield


def tiny(**kw):
    base = dict(input_side=16, patch_side=8, channels=2, enc_dim=12, enc_blocks=1, enc_heads=2,
                dec_dim=6, dec_blocks=1, dec_heads=2, predictor_hidden=8)
    base.update(kw)
    return ModelConfig(**base)


class TestConfig:
    def test_paper_defaults(self):
        cfg = ModelConfig()
        assert cfg.num_patches == 1728 and cfg.patch_voxels == 2048

    def test_desk(self):
        cfg = ModelConfig.desk()
        assert (cfg.input_side, cfg.enc_dim, cfg.enc_blocks, cfg.dec_dim, cfg.dec_blocks) == (32, 64, 4, 32, 2)
        assert cfg.num_patches == 64

    @pytest.mark.parametrize("kw", [dict(input_side=30), dict(enc_heads=5), dict(mask_ratio=1.0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            ModelConfig.desk(**kw)


class TestPatchify:
    def test_counts(self):
        x = np.zeros((4, 96, 96, 96), dtype=np.float32)
        assert patchify(x, 8).shape == (1728, 2048)
        assert patchify(np.zeros((1, 16, 16, 16)), 8).shape == (8, 512)

    def test_order(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((3, 8, 12, 16))
        t = patchify(x, 4)
        gd, gh, gw = 2, 3, 4
        for i, (a, b, c) in enumerate(np.ndindex(gd, gh, gw)):
            np.testing.assert_array_equal(t[i], x[:, 4 * a : 4 * a + 4, 4 * b : 4 * b + 4, 4 * c : 4 * c + 4].ravel())

    @pytest.mark.parametrize("seed", range(5))
    def test_round_trip(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((2, 4, 16, 16, 16))
        np.testing.assert_array_equal(unpatchify(patchify(x, 8), (2, 2, 2), 4, 8), x)
        t = rng.standard_normal((8, 4 * 512))
        np.testing.assert_array_equal(patchify(unpatchify(t, (2, 2, 2), 4, 8), 8), t)

    def test_tensor_round_trip_and_grad(self):
        x = Tensor(np.random.default_rng(1).standard_normal((1, 2, 4, 4, 4)), requires_grad=True)
        y = unpatchify(patchify(x, 2), (2, 2, 2), 2, 2)
        np.testing.assert_array_equal(y.data, x.data)
        (y * y).sum().backward()
        np.testing.assert_allclose(x.grad, 2 * x.data)

    def test_errors(self):
        with pytest.raises(T.ShapeError):
            patchify(np.zeros((1, 10, 8, 8)), 8)
        with pytest.raises(T.ShapeError):
            unpatchify(np.zeros((7, 512)), (2, 2, 2), 1, 8)


class TestPositional:
    def test_rows(self):
        assert positional_encoding_3d((12, 12, 12), 768).shape == (1729, 768)

    def test_origin_and_cls(self):
        pe = positional_encoding_3d((4, 4, 4), 64)
        assert not pe[0].any()
        w, half = 64 // 3, (64 // 3) // 2
        for a in range(3):
            blk = pe[1, a * w : (a + 1) * w]
            np.testing.assert_array_equal(blk[:half], 0.0)
            np.testing.assert_array_equal(blk[half : 2 * half], 1.0)
        # remainder and odd trailing columns are zero everywhere
        np.testing.assert_array_equal(pe[:, 3 * w :], 0.0)
        np.testing.assert_array_equal(pe[:, w - 1 :: w][:, :3], 0.0)

    def test_distinct(self):
        pe = positional_encoding_3d((12, 12, 12), 64)
        sq = (pe * pe).sum(1)
        d2 = sq[:, None] + sq[None, :] - 2 * pe @ pe.T
        np.fill_diagonal(d2, np.inf)
        assert d2.min() > 1e-6

    def test_axis_blocks_independent(self):
        grid, dim = (3, 4, 5), 30
        pe = positional_encoding_3d(grid, dim)
        idx = lambda d, h, w: 1 + (d * grid[1] + h) * grid[2] + w
        a, b = pe[idx(1, 2, 0)], pe[idx(1, 2, 4)]
        np.testing.assert_array_equal(a[:20], b[:20])
        assert np.any(a[20:] != b[20:])

    def test_small_dim(self):
        with pytest.raises(ValueError):
            positional_encoding_3d((2, 2, 2), 5)


class TestMasking:
    @pytest.mark.parametrize("k,p", [(1728, 0.75), (8, 0.5), (64, 0.75), (27, 0.5), (10, 0.25), (7, 0.9)])
    def test_counts(self, k, p):
        plan = make_mask_plan(k, p, seed=3)
        assert len(plan.hidden_idx) == num_hidden(k, p)
        assert np.array_equal(np.sort(np.r_[plan.visible_idx, plan.hidden_idx]), np.arange(k))
        assert np.all(np.diff(plan.visible_idx) > 0) and np.all(np.diff(plan.hidden_idx) > 0)

    def test_paper_counts(self):
        assert make_mask_plan(1728, 0.75, 0).num_visible == 432
        assert make_mask_plan(8, 0.5, 0).num_visible == 4

    def test_half_up(self):
        assert num_hidden(10, 0.25) == 3 and num_hidden(6, 0.25) == 2

    def test_errors(self):
        for p in (0.0, 1.0, -0.1):
            with pytest.raises(ValueError):
                make_mask_plan(8, p, 0)
        with pytest.raises(ValueError):
            make_mask_plan(1, 0.5, 0)

    def test_deterministic(self):
        assert np.array_equal(make_mask_plan(64, 0.75, 9).hidden_idx, make_mask_plan(64, 0.75, 9).hidden_idx)


class TestEncoderDecoder:
    def setup_method(self):
        self.cfg = tiny()
        self.params = init_params(self.cfg, seed=0)
        self.x = np.random.default_rng(0).uniform(0, 1, size=(2, 2, 16, 16, 16))

    def test_shapes(self):
        plan = make_mask_plan(8, 0.5, 1)
        enc = encode(self.x, [plan, make_mask_plan(8, 0.5, 2)], self.params, self.cfg)
        assert enc.tokens.shape == (2, 5, 12) and enc.visible_tokens.shape == (2, 4, 12)
        assert enc.cls_feature.shape == (2, 12)
        out = decode(enc, self.params, self.cfg)
        assert out.shape == self.x.shape

    def test_full_plan_decode(self):
        enc = encode(self.x, full_plan(8), self.params, self.cfg)
        assert decode(enc, self.params, self.cfg, full_plan(8)).shape == self.x.shape

    def test_plan_mismatch(self):
        with pytest.raises(ValueError):
            encode(self.x, make_mask_plan(27, 0.5, 0), self.params, self.cfg)
        enc = encode(self.x, make_mask_plan(8, 0.5, 0), self.params, self.cfg)
        with pytest.raises(ValueError):
            decode(enc, self.params, self.cfg, make_mask_plan(8, 0.5, 1))

    def test_different_masks_differ(self):
        a = encode(self.x[:1], make_mask_plan(8, 0.5, 1), self.params, self.cfg).cls_feature.data
        b = encode(self.x[:1], make_mask_plan(8, 0.5, 2), self.params, self.cfg).cls_feature.data
        assert np.abs(a - b).max() > 1e-6

    def test_permutation_invariance_of_cls(self):
        idx = np.array([[1, 3, 4, 6]])
        a = encode_indices(self.x[:1], idx, self.params, self.cfg).cls_feature.data
        b = encode_indices(self.x[:1], idx[:, ::-1].copy(), self.params, self.cfg).cls_feature.data
        assert np.linalg.norm(a - b) <= 1e-5 * np.linalg.norm(a)

    def test_mask_token_gradient(self):
        plan = make_mask_plan(8, 0.5, 0)
        out = decode(encode(self.x, plan, self.params, self.cfg), self.params, self.cfg)
        T.mse(out, self.x).backward()
        assert np.abs(self.params["mask_token"].grad).max() > 0

    def test_features(self):
        f1 = extract_features(self.x[0], self.params, self.cfg)
        f2 = extract_features(self.x[0], self.params, self.cfg)
        assert f1.shape == (12,)
        np.testing.assert_array_equal(f1, f2)
        assert extract_features(self.x, self.params, self.cfg).shape == (2, 12)

    def test_init_deterministic(self):
        other = init_params(self.cfg, seed=0)
        for k, v in self.params.items():
            np.testing.assert_array_equal(v.data, other[k].data)

    def test_encoder_grads_fd(self):
        plan = make_mask_plan(8, 0.5, 0)
        cfg = self.cfg

        p = self.params

        def f():
            out = decode(encode(self.x[:1], plan, p, cfg), p, cfg)
            return T.mse(out, self.x[:1])

        assert check_grads(f, [p["cls_token"], p["mask_token"], p["enc.0.attn.qkv.w"]], h=1e-6) < 1e-6


class TestPredictor:
    def test_shape_and_zero_init(self):
        cfg = tiny()
        params = init_params(cfg, 0)
        f = Tensor(np.random.default_rng(0).standard_normal((3, 12)))
        assert predictor_head(f, params).shape == (3, 12)
        params["predictor.fc2.w"] = Tensor(np.zeros((8, 12)))
        np.testing.assert_array_equal(predictor_head(f, params).data, 0.0)

    def test_fd(self):
        params = init_params(tiny(), 0)
        f = Tensor(np.random.default_rng(1).standard_normal((2, 12)), requires_grad=True)
        def loss():
            y = predictor_head(f, params)
            return (y * y).sum()

        assert check_grads(loss, [f, params["predictor.fc1.w"]]) < 1e-6


def test_attention_cost_scales_with_visible():
    k, p, d, blocks = 1728, 0.75, 768, 12
    masked = attention_cost(k - num_hidden(k, p) + 1, d, blocks)
    full = attention_cost(k + 1, d, blocks)
    assert masked < 0.3 * full
