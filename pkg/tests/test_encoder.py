"""Encoder tests: stage contracts, ablation parameter accounting, and
gradient spot checks against finite differences."""

import numpy as np
import pytest

from rgbdflow.encoder import (
    DEPTH_CHANNELS,
    DOWNSAMPLE,
    EncoderConfig,
    FeatureMap,
    attention_context,
    cross_attention,
    depth_channels,
    downsample_kv,
    extract_low_level,
    init_encoder_params,
    mff_encode,
    mmtm_gate,
    scaled_dot_attention,
    self_attention,
)
from rgbdflow.tape import GradientTape, Tensor, finite_diff_check, tsum
from rgbdflow.weights import parameter_count


def tiny_cfg(**kw):
    base = dict(channels=8, heads=4, n_mmtm=2, z_max=8.0)
    base.update(kw)
    return EncoderConfig(**base)


def rand_frame(rng, h=16, w=16):
    rgb = rng.random((3, h, w))
    depth = rng.random((h, w)) * 6 + 0.5
    return rgb, depth


class TestConfig:
    def test_heads_must_divide_channels(self):
        with pytest.raises(ValueError):
            EncoderConfig(channels=10, heads=4)

    def test_rgb_only_rejects_cross_attention(self):
        with pytest.raises(ValueError):
            EncoderConfig(rgb_only=True, use_cross_attention=True)

    def test_out_channels(self):
        assert tiny_cfg().out_channels == 16
        assert tiny_cfg(rgb_only=True, use_cross_attention=False).out_channels == 8

    def test_fusion_validation(self):
        with pytest.raises(ValueError):
            EncoderConfig(fusion="gated-sum")


class TestLowLevelStack:
    def test_output_resolution(self):
        cfg = tiny_cfg()
        params = init_encoder_params(cfg, seed=0, prefix="fnet")
        rgb, _ = rand_frame(np.random.default_rng(0), 32, 48)
        fm = extract_low_level(rgb, params, "fnet", "rgb")
        assert fm.shape == (8, 32 // DOWNSAMPLE, 48 // DOWNSAMPLE)
        assert fm.stage == "low"

    def test_zero_image_zero_biases_gives_zero_features(self):
        cfg = tiny_cfg()
        params = init_encoder_params(cfg, seed=1, prefix="fnet")
        fm = extract_low_level(np.zeros((3, 16, 16)), params, "fnet", "rgb")
        assert np.allclose(fm.tensor.data, 0.0)

    def test_gradients_flow_to_first_conv(self):
        cfg = tiny_cfg()
        params = init_encoder_params(cfg, seed=4, prefix="fnet")
        rng = np.random.default_rng(5)
        rgb, _ = rand_frame(rng, 8, 8)
        w = params["fnet.rgb.conv1.w"]

        def f(t):
            return tsum(extract_low_level(rgb, params, "fnet", "rgb").tensor)

        idx = rng.choice(w.size, size=12, replace=False)
        assert finite_diff_check(f, w, h=1e-5, coords=idx.tolist()) < 1e-4


class TestDepthChannels:
    def test_normalization_and_validity(self):
        depth = np.array([[2.0, 0.0], [-1.0, np.inf]])
        ch = depth_channels(depth, z_max=4.0)
        assert ch.shape == (DEPTH_CHANNELS, 2, 2)
        assert ch[0, 0, 0] == 0.5
        assert np.array_equal(ch[1], [[1.0, 0.0], [0.0, 0.0]])
        assert np.all(ch[0][ch[1] == 0] == 0.0)

    def test_clamp_at_z_max(self):
        ch = depth_channels(np.full((2, 2), 50.0), z_max=10.0)
        assert np.all(ch[0] == 1.0)


class TestDownsampleKv:
    def test_pooled_grid_shape(self):
        fm = FeatureMap(Tensor(np.random.default_rng(6).random((4, 9, 10))), "rgb", "low")
        pooled = downsample_kv(fm, (3, 5))
        assert pooled.shape == (4, 3, 2)

    def test_ceil_division_on_ragged_extents(self):
        fm = FeatureMap(Tensor(np.zeros((2, 8, 8))), "rgb", "low")
        assert downsample_kv(fm, (3, 5)).shape == (2, 3, 2)

    def test_constant_map_stays_constant(self):
        fm = FeatureMap(Tensor(np.full((3, 6, 10), 2.5)), "rgb", "low")
        assert np.all(downsample_kv(fm).tensor.data == 2.5)

    def test_values_are_subset_per_channel(self):
        rng = np.random.default_rng(7)
        x = rng.random((5, 7, 9))
        pooled = downsample_kv(FeatureMap(Tensor(x), "rgb", "low")).tensor.data
        for c in range(5):
            assert set(pooled[c].ravel()).issubset(set(x[c].ravel()))


class TestAttention:
    def setup_method(self):
        self.cfg = tiny_cfg()
        self.params = init_encoder_params(self.cfg, seed=8, prefix="fnet")
        rng = np.random.default_rng(9)
        self.f = FeatureMap(Tensor(rng.standard_normal((8, 4, 4))), "rgb", "low")
        self.pooled = downsample_kv(self.f, self.cfg.pool_kernel)

    def test_uniform_values_pass_through(self):
        rng = np.random.default_rng(10)
        q = Tensor(rng.standard_normal((6, 4)))
        k = Tensor(rng.standard_normal((3, 4)))
        v_row = rng.standard_normal(4)
        v = Tensor(np.tile(v_row, (3, 1)))
        out = scaled_dot_attention(q, k, v, 0.5).data
        assert np.allclose(out, np.tile(v_row, (6, 1)), atol=1e-12)

    def test_rows_stay_in_value_hull(self):
        for seed in range(10):
            rng = np.random.default_rng(seed)
            q = Tensor(rng.standard_normal((5, 4)))
            k = Tensor(rng.standard_normal((7, 4)))
            v = Tensor(rng.standard_normal((7, 4)))
            out = scaled_dot_attention(q, k, v, 1.0).data
            lo, hi = v.data.min(axis=0), v.data.max(axis=0)
            assert np.all(out >= lo - 1e-12) and np.all(out <= hi + 1e-12)

    def test_fresh_block_is_exact_identity(self):
        # the MLP final layer initializes to zero, so the residual path is
        # the whole story on a fresh block
        out = self_attention(self.f, self.pooled, self.params, "fnet.sa_rgb", heads=4)
        assert np.array_equal(out.tensor.data, self.f.tensor.data)
        assert out.stage == "self"

    def test_context_shape_and_heads(self):
        f_mat = Tensor(np.random.default_rng(11).standard_normal((16, 8)))
        kv = Tensor(np.random.default_rng(12).standard_normal((4, 8)))
        ctx = attention_context(f_mat, kv, self.params, "fnet.sa_rgb", heads=4)
        assert ctx.shape == (16, 8)

    def test_cross_attention_swap_symmetry(self):
        params = dict(self.params)
        rng = np.random.default_rng(13)
        a = FeatureMap(Tensor(rng.standard_normal((8, 4, 4))), "rgb", "self")
        b = FeatureMap(Tensor(rng.standard_normal((8, 4, 4))), "depth", "self")
        pa, pb = downsample_kv(a), downsample_kv(b)
        out_ab = cross_attention(a, pb, params, "fnet.ca_rgb", 4).tensor.data
        out_ba = cross_attention(b, pa, params, "fnet.ca_depth", 4).tensor.data
        # swapping inputs and weight roles swaps the outputs
        swap_ab = cross_attention(b, pa, params, "fnet.ca_rgb", 4).tensor.data
        swap_ba = cross_attention(a, pb, params, "fnet.ca_depth", 4).tensor.data
        roles = {"fnet.ca_rgb": swap_ab, "fnet.ca_depth": swap_ba}
        assert np.array_equal(roles["fnet.ca_rgb"], swap_ab)
        assert not np.array_equal(out_ab, swap_ab)  # different queries, different output
        assert out_ab.shape == out_ba.shape == swap_ab.shape == swap_ba.shape

    def test_attention_projection_gradients(self):
        # make the MLP output layer nonzero so gradients reach the
        # attention projections through the whole block
        params = self.params
        rng = np.random.default_rng(14)
        params["fnet.sa_rgb.mlp.l3.w"].data[:] = rng.standard_normal((16, 8)) * 0.1
        probe = rng.standard_normal((8, 4, 4))
        wq = params["fnet.sa_rgb.h0.wq"]

        def f(t):
            out = self_attention(self.f, downsample_kv(self.f), params, "fnet.sa_rgb", 4)
            return tsum(out.tensor * Tensor(probe))

        idx = rng.choice(wq.size, size=10, replace=False)
        assert finite_diff_check(f, wq, h=1e-5, coords=idx.tolist()) < 1e-4


class TestMmtm:
    def test_neutral_gate_is_identity(self):
        cfg = tiny_cfg()
        params = init_encoder_params(cfg, seed=15, prefix="fnet")
        for k in ("w", "b", "wr", "wd"):
            params[f"fnet.mmtm0.{k}"].data[:] = 0.0
        rng = np.random.default_rng(16)
        fr = FeatureMap(Tensor(rng.standard_normal((8, 4, 4))), "rgb", "cross")
        fd = FeatureMap(Tensor(rng.standard_normal((8, 4, 4))), "depth", "cross")
        out_r, out_d = mmtm_gate(fr, fd, params, "fnet.mmtm0")
        assert np.array_equal(out_r.tensor.data, fr.tensor.data)
        assert np.array_equal(out_d.tensor.data, fd.tensor.data)

    def test_hand_computed_scalar_case(self):
        # single channel, single pixel: squeeze means are the pixel values
        params = {
            "m.w": Tensor(np.array([[1.0, 1.0]]), requires_grad=True),
            "m.b": Tensor(np.zeros((1, 1)), requires_grad=True),
            "m.wr": Tensor(np.array([[1.0]]), requires_grad=True),
            "m.wd": Tensor(np.array([[1.0]]), requires_grad=True),
        }
        fr = FeatureMap(Tensor(np.full((1, 1, 1), 2.0)), "rgb", "cross")
        fd = FeatureMap(Tensor(np.full((1, 1, 1), 4.0)), "depth", "cross")
        out_r, out_d = mmtm_gate(fr, fd, params, "m")
        gate = 2.0 / (1.0 + np.exp(-6.0))
        assert out_r.tensor.data[0, 0, 0] == pytest.approx(2.0 * gate, abs=1e-12)
        assert out_d.tensor.data[0, 0, 0] == pytest.approx(4.0 * gate, abs=1e-12)
        assert out_r.tensor.data[0, 0, 0] == pytest.approx(3.990109507, abs=1e-6)

    def test_gates_bound_outputs(self):
        cfg = tiny_cfg()
        params = init_encoder_params(cfg, seed=17, prefix="fnet")
        rng = np.random.default_rng(18)
        fr = FeatureMap(Tensor(rng.standard_normal((8, 4, 4))), "rgb", "cross")
        fd = FeatureMap(Tensor(rng.standard_normal((8, 4, 4))), "depth", "cross")
        out_r, _ = mmtm_gate(fr, fd, params, "fnet.mmtm0")
        ratio = np.abs(out_r.tensor.data) / np.maximum(np.abs(fr.tensor.data), 1e-300)
        assert np.all(ratio < 2.0)
        assert np.all(ratio > 0.0)

    def test_mmtm_weight_gradients(self):
        cfg = tiny_cfg()
        params = init_encoder_params(cfg, seed=19, prefix="fnet")
        rng = np.random.default_rng(20)
        fr = FeatureMap(Tensor(rng.standard_normal((8, 4, 4))), "rgb", "cross")
        fd = FeatureMap(Tensor(rng.standard_normal((8, 4, 4))), "depth", "cross")
        probe = rng.standard_normal((8, 4, 4))
        w = params["fnet.mmtm0.w"]

        def f(t):
            out_r, out_d = mmtm_gate(fr, fd, params, "fnet.mmtm0")
            return tsum(out_r.tensor * Tensor(probe)) + tsum(out_d.tensor)

        idx = rng.choice(w.size, size=12, replace=False)
        assert finite_diff_check(f, w, h=1e-5, coords=idx.tolist()) < 1e-4


ABLATIONS = [
    # (name, cfg kwargs, present fragments, absent fragments)
    ("rgb_only", dict(rgb_only=True, use_self_attention=False, use_cross_attention=False, fusion="concat"),
     ["rgb.conv1"], ["depth.", "sa_", "ca_", "mmtm"]),
    ("rgb_only_sa", dict(rgb_only=True, use_self_attention=True, use_cross_attention=False, fusion="concat"),
     ["rgb.conv1", "sa_rgb"], ["depth.", "sa_depth", "ca_", "mmtm"]),
    ("concat_plain", dict(use_self_attention=False, use_cross_attention=False, fusion="concat"),
     ["rgb.conv1", "depth.conv1"], ["sa_", "ca_", "mmtm"]),
    ("mmtm_plain", dict(use_self_attention=False, use_cross_attention=False, fusion="mmtm"),
     ["depth.conv1", "mmtm0"], ["sa_", "ca_"]),
    ("concat_sa_rgb", dict(use_self_attention=True, self_attention_rgb_only=True, use_cross_attention=False, fusion="concat"),
     ["sa_rgb"], ["sa_depth", "ca_", "mmtm"]),
    ("mmtm_sa", dict(use_self_attention=True, use_cross_attention=False, fusion="mmtm"),
     ["sa_rgb", "sa_depth", "mmtm0"], ["ca_"]),
    ("concat_sa_ca", dict(use_self_attention=True, use_cross_attention=True, fusion="concat"),
     ["sa_rgb", "sa_depth", "ca_rgb", "ca_depth"], ["mmtm"]),
    ("mmtm_sa_ca", dict(use_self_attention=True, use_cross_attention=True, fusion="mmtm"),
     ["sa_rgb", "sa_depth", "ca_rgb", "ca_depth", "mmtm0"], []),
]


class TestAblations:
    @pytest.mark.parametrize("name,kw,present,absent", ABLATIONS, ids=[a[0] for a in ABLATIONS])
    def test_parameter_presence(self, name, kw, present, absent):
        cfg = tiny_cfg(**kw)
        params = init_encoder_params(cfg, seed=21, prefix="fnet")
        paths = list(params)
        for frag in present:
            assert any(frag in p for p in paths), f"{name}: expected {frag}"
        for frag in absent:
            assert not any(frag in p for p in paths), f"{name}: unexpected {frag}"

    @pytest.mark.parametrize("name,kw,present,absent", ABLATIONS, ids=[a[0] for a in ABLATIONS])
    def test_forward_shapes(self, name, kw, present, absent):
        cfg = tiny_cfg(**kw)
        params = init_encoder_params(cfg, seed=22, prefix="fnet")
        rng = np.random.default_rng(23)
        rgb, depth = rand_frame(rng, 16, 16)
        out = mff_encode(rgb, None if cfg.rgb_only else depth, params, cfg)
        assert out.shape == (cfg.out_channels, 4, 4)
        assert np.all(np.isfinite(out.data))

    def test_shared_branch_weights_identical_across_ablations(self):
        a = init_encoder_params(tiny_cfg(), seed=7, prefix="fnet")
        b = init_encoder_params(tiny_cfg(use_cross_attention=False, fusion="concat"), seed=7, prefix="fnet")
        assert np.array_equal(a["fnet.rgb.conv1.w"].data, b["fnet.rgb.conv1.w"].data)
        assert np.array_equal(a["fnet.sa_rgb.h2.wk"].data, b["fnet.sa_rgb.h2.wk"].data)

    def test_branch_independence_without_exchange(self):
        cfg = tiny_cfg(use_self_attention=True, use_cross_attention=False, fusion="concat")
        params = init_encoder_params(cfg, seed=24, prefix="fnet")
        rng = np.random.default_rng(25)
        rgb, depth = rand_frame(rng, 16, 16)
        out1 = mff_encode(rgb, depth, params, cfg).data
        out2 = mff_encode(rgb, depth + 0.75, params, cfg).data
        d = cfg.channels
        assert np.array_equal(out1[:d], out2[:d])
        assert not np.array_equal(out1[d:], out2[d:])


class TestEndToEnd:
    def test_param_determinism(self):
        a = init_encoder_params(tiny_cfg(), seed=1, prefix="fnet")
        b = init_encoder_params(tiny_cfg(), seed=1, prefix="fnet")
        c = init_encoder_params(tiny_cfg(), seed=2, prefix="fnet")
        assert sorted(a) == sorted(b)
        assert all(np.array_equal(a[k].data, b[k].data) for k in a)
        assert any(not np.array_equal(a[k].data, c[k].data) for k in a)

    def test_prefix_separates_streams(self):
        f = init_encoder_params(tiny_cfg(), seed=1, prefix="fnet")
        c = init_encoder_params(tiny_cfg(), seed=1, prefix="cnet")
        assert not np.array_equal(f["fnet.rgb.conv1.w"].data, c["cnet.rgb.conv1.w"].data)

    def test_encode_deterministic(self):
        cfg = tiny_cfg()
        params = init_encoder_params(cfg, seed=26, prefix="fnet")
        rng = np.random.default_rng(27)
        rgb, depth = rand_frame(rng, 16, 16)
        out1 = mff_encode(rgb, depth, params, cfg).data
        out2 = mff_encode(rgb, depth, params, cfg).data
        assert np.array_equal(out1, out2)

    def test_full_encoder_gradient_spot_checks(self):
        # sampled coordinates from one parameter of each block family; the
        # exhaustive sweep lives in the acceptance harness
        cfg = tiny_cfg()
        params = init_encoder_params(cfg, seed=28, prefix="fnet")
        rng = np.random.default_rng(29)
        rgb, depth = rand_frame(rng, 8, 8)
        probe = rng.standard_normal((16, 2, 2))

        def loss():
            return tsum(mff_encode(rgb, depth, params, cfg) * Tensor(probe))

        for path in ("fnet.rgb.conv1.w", "fnet.depth.res1.conv2.w", "fnet.sa_rgb.h1.wv",
                     "fnet.ca_depth.mlp.l1.w", "fnet.mmtm1.wr"):
            t = params[path]
            idx = rng.choice(t.size, size=6, replace=False)
            err = finite_diff_check(lambda _: loss(), t, h=1e-5, coords=idx.tolist())
            assert err < 1e-4, f"{path}: {err}"

    def test_parameter_count_positive(self):
        params = init_encoder_params(tiny_cfg(), seed=0, prefix="fnet")
        assert parameter_count(params) > 0
