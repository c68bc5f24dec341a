"""Generator geometry, ground-truth exactness, and corruption contracts."""

import numpy as np
import pytest

from rgbdflow.data import (
    CorruptionSpec,
    Layer,
    SceneConfig,
    apply_agn,
    apply_dark,
    compose_pair,
    draw_dark_factor,
    flat_texture,
    gen_synthetic,
    random_texture,
)
from rgbdflow.flow import lift_to_3d


def small_cfg(**kw):
    return SceneConfig(height=32, width=32, **kw)


class TestSceneConfig:
    def test_extent_must_be_multiple_of_32(self):
        with pytest.raises(ValueError, match="multiple"):
            SceneConfig(height=48, width=64)

    def test_depth_order_enforced(self):
        with pytest.raises(ValueError, match="depth"):
            SceneConfig(depth_min=5.0, depth_max=2.0)

    def test_default_intrinsics_rule(self):
        intr = SceneConfig(height=32, width=64).intrinsics()
        assert intr.fx == 64.0 and intr.fy == 64.0
        assert intr.cx == 31.5 and intr.cy == 15.5

    def test_intrinsics_overrides(self):
        intr = small_cfg(fx=100.0, fy=90.0, cx=3.0, cy=4.0).intrinsics()
        assert (intr.fx, intr.fy, intr.cx, intr.cy) == (100.0, 90.0, 3.0, 4.0)


class TestTexture:
    def test_flat_texture_is_constant(self):
        xs, ys = np.meshgrid(np.arange(4.0), np.arange(4.0))
        np.testing.assert_array_equal(
            flat_texture(0.3).sample(xs, ys), np.full((3, 4, 4), 0.3)
        )

    def test_random_texture_stays_inside_unit_range(self):
        xs, ys = np.meshgrid(np.arange(0, 64, 0.25), np.arange(0, 64, 0.25))
        for seed in range(5):
            tex = random_texture(np.random.default_rng(seed), waves=6)
            vals = tex.sample(xs, ys)
            assert vals.min() > 0.0 and vals.max() < 1.0

    def test_translation_consistency(self):
        tex = random_texture(np.random.default_rng(1), waves=4)
        xs, ys = np.meshgrid(np.arange(8.0), np.arange(8.0))
        np.testing.assert_array_equal(
            tex.sample(xs, ys), tex.sample((xs + 2.5) - 2.5, (ys - 7.0) + 7.0)
        )


class TestComposePair:
    def test_single_layer_flow_is_offset_on_layer_zero_elsewhere(self):
        layer = Layer(8, 8, 8, 8, depth=4.0, offset=(3.0, 0.0), texture=flat_texture(0.9))
        pair = compose_pair(flat_texture(0.5), 10.0, [layer], small_cfg())
        on = np.zeros((32, 32), dtype=bool)
        on[8:16, 8:16] = True
        assert (pair.gt_flow2d[0][on] == 3.0).all()
        assert (pair.gt_flow2d[1] == 0.0).all()
        assert (pair.gt_flow2d[0][~on] == 0.0).all()
        assert (pair.frame_t.depth[on] == 4.0).all()
        assert (pair.frame_t.depth[~on] == 10.0).all()

    def test_single_layer_frame2_footprint_shifts(self):
        layer = Layer(8, 8, 8, 8, depth=4.0, offset=(3.0, 2.0), texture=flat_texture(0.9))
        pair = compose_pair(flat_texture(0.5), 10.0, [layer], small_cfg())
        expect = np.full((32, 32), 10.0)
        expect[10:18, 11:19] = 4.0
        np.testing.assert_array_equal(pair.frame_t1.depth, expect)

    def test_background_pixels_hidden_behind_moved_layer_are_invalid(self):
        layer = Layer(8, 8, 8, 8, depth=4.0, offset=(3.0, 0.0))
        pair = compose_pair(flat_texture(0.5), 10.0, [layer], small_cfg())
        # Background end points are the pixels themselves; those inside the
        # shifted footprint but not on the layer are occluded.
        assert not pair.valid[9, 16]
        assert not pair.valid[9, 17]
        assert pair.valid[9, 19]
        # Layer pixels follow their own motion and stay visible.
        assert pair.valid[9, 9]

    def test_out_of_frame_end_points_are_invalid(self):
        layer = Layer(24, 8, 8, 8, depth=4.0, offset=(5.0, 0.0))
        pair = compose_pair(flat_texture(0.5), 10.0, [layer], small_cfg())
        assert not pair.valid[10, 28]  # 28 + 5 = 33 > 31
        assert pair.valid[10, 26]  # 26 + 5 = 31, still in frame

    def test_nearer_layer_occludes_farther_layer(self):
        far = Layer(4, 4, 8, 8, depth=6.0, offset=(0.0, 0.0), texture=flat_texture(0.8))
        near = Layer(16, 4, 8, 8, depth=2.0, offset=(-6.0, 0.0), texture=flat_texture(0.2))
        pair = compose_pair(flat_texture(0.5), 10.0, [far, near], small_cfg())
        # Near footprint in frame 2 covers x in [10, 18); far pixels there
        # stay put and end up behind it.
        assert not pair.valid[6, 10]
        assert not pair.valid[6, 11]
        assert pair.valid[6, 9]
        assert pair.frame_t1.depth[6, 12] == 2.0

    def test_depths_must_be_distinct(self):
        a = Layer(0, 0, 4, 4, depth=3.0, offset=(0.0, 0.0))
        b = Layer(8, 8, 4, 4, depth=3.0, offset=(1.0, 0.0))
        with pytest.raises(ValueError, match="distinct"):
            compose_pair(flat_texture(), 10.0, [a, b], small_cfg())

    def test_validity_matches_per_pixel_oracle(self):
        rng = np.random.default_rng(42)
        cfg = small_cfg()
        for trial in range(4):
            fractional = trial % 2 == 1
            layers = []
            depths = rng.permutation([2.0, 3.5, 5.0])
            for i in range(3):
                lw, lh = int(rng.integers(6, 14)), int(rng.integers(6, 14))
                off = rng.uniform(-6, 6, 2) if fractional else rng.integers(-6, 7, 2)
                layers.append(
                    Layer(
                        x0=int(rng.integers(0, 32 - lw)),
                        y0=int(rng.integers(0, 32 - lh)),
                        width=lw,
                        height=lh,
                        depth=float(depths[i]),
                        offset=(float(off[0]), float(off[1])),
                    )
                )
            pair = compose_pair(flat_texture(), 10.0, layers, cfg)
            for y in range(32):
                for x in range(32):
                    qx = x + pair.gt_flow2d[0, y, x]
                    qy = y + pair.gt_flow2d[1, y, x]
                    ok = 0 <= qx <= 31 and 0 <= qy <= 31
                    if ok:
                        for l in layers:
                            if l.depth >= pair.frame_t.depth[y, x]:
                                continue
                            if (
                                l.x0 + l.offset[0] <= qx < l.x0 + l.width + l.offset[0]
                                and l.y0 + l.offset[1] <= qy < l.y0 + l.height + l.offset[1]
                            ):
                                ok = False
                                break
                    assert pair.valid[y, x] == ok, (trial, y, x)


class TestGenSynthetic:
    def test_deterministic_per_seed(self):
        a = gen_synthetic(7, small_cfg())
        b = gen_synthetic(7, small_cfg())
        np.testing.assert_array_equal(a.frame_t.rgb, b.frame_t.rgb)
        np.testing.assert_array_equal(a.frame_t1.depth, b.frame_t1.depth)
        np.testing.assert_array_equal(a.gt_flow2d, b.gt_flow2d)
        np.testing.assert_array_equal(a.gt_flow3d, b.gt_flow3d)
        np.testing.assert_array_equal(a.valid, b.valid)

    def test_different_seeds_differ(self):
        a = gen_synthetic(0, small_cfg())
        b = gen_synthetic(1, small_cfg())
        assert not np.array_equal(a.frame_t.rgb, b.frame_t.rgb)

    def test_no_layers_means_static_scene(self):
        pair = gen_synthetic(3, small_cfg(n_layers=0))
        assert (pair.gt_flow2d == 0).all()
        assert (pair.gt_flow3d == 0).all()
        assert pair.valid.all()

    def test_single_layer_offset_vocabulary(self):
        pair = gen_synthetic(11, small_cfg(n_layers=1, max_disp=5))
        vectors = {tuple(v) for v in pair.gt_flow2d.reshape(2, -1).T}
        assert (0.0, 0.0) in vectors
        assert len(vectors) <= 2
        assert all(abs(u) <= 5 and abs(v) <= 5 for u, v in vectors)

    def test_integer_offsets_are_photometrically_exact(self):
        pair = gen_synthetic(5, small_cfg(max_disp=4))
        ys, xs = np.nonzero(pair.valid)
        qx = (xs + pair.gt_flow2d[0, ys, xs]).astype(int)
        qy = (ys + pair.gt_flow2d[1, ys, xs]).astype(int)
        np.testing.assert_array_equal(
            pair.frame_t1.rgb[:, qy, qx], pair.frame_t.rgb[:, ys, xs]
        )
        np.testing.assert_array_equal(
            pair.frame_t1.depth[qy, qx], pair.frame_t.depth[ys, xs]
        )

    @pytest.mark.parametrize("fractional", [False, True])
    def test_pinhole_consistency_within_nanometers(self, fractional):
        for seed in range(3):
            pair = gen_synthetic(
                seed, small_cfg(fractional_offsets=fractional, max_disp=5)
            )
            intr = pair.intrinsics
            ys, xs = np.nonzero(pair.valid)
            z = pair.frame_t.depth[ys, xs]
            x1 = np.stack(intr.backproject(xs, ys, z))
            x2 = np.stack(
                intr.backproject(
                    xs + pair.gt_flow2d[0, ys, xs], ys + pair.gt_flow2d[1, ys, xs], z
                )
            )
            err = np.abs(pair.gt_flow3d[:, ys, xs] - (x2 - x1)).max()
            assert err <= 1e-9

    def test_lift_recovers_ground_truth_on_integer_offsets(self):
        pair = gen_synthetic(9, small_cfg(max_disp=5))
        flow3d, ok = lift_to_3d(
            pair.gt_flow2d, pair.frame_t.depth, pair.frame_t1.depth, pair.intrinsics
        )
        both = pair.valid & ok
        assert both.sum() == pair.valid.sum()  # lift never loses valid pixels
        err = np.abs(flow3d[:, both] - pair.gt_flow3d[:, both]).max()
        assert err <= 1e-9

    def test_fractional_offsets_produce_fractional_flow(self):
        pair = gen_synthetic(2, small_cfg(fractional_offsets=True, n_layers=2))
        moving = pair.gt_flow2d[np.abs(pair.gt_flow2d) > 0]
        assert moving.size > 0
        assert np.any(moving != np.round(moving))


class TestApplyAgn:
    def test_sigma_zero_is_identity_copy(self):
        rgb = np.random.default_rng(0).random((3, 4, 4))
        out = apply_agn(rgb, 0.0, seed=1)
        np.testing.assert_array_equal(out, rgb)
        assert out is not rgb

    def test_deterministic_per_seed(self):
        rgb = np.full((3, 8, 8), 0.5)
        np.testing.assert_array_equal(
            apply_agn(rgb, 35.0, seed=4), apply_agn(rgb, 35.0, seed=4)
        )
        assert not np.array_equal(apply_agn(rgb, 35.0, 4), apply_agn(rgb, 35.0, 5))

    def test_matches_rebuilt_noise_then_clamp(self):
        rgb = np.random.default_rng(1).random((3, 6, 5))
        noise = np.random.default_rng(77).normal(0.0, 35.0 / 255.0, rgb.shape)
        np.testing.assert_array_equal(
            apply_agn(rgb, 35.0, seed=77), np.clip(rgb + noise, 0.0, 1.0)
        )

    def test_output_stays_clamped(self):
        rgb = np.full((3, 16, 16), 0.99)
        out = apply_agn(rgb, 200.0, seed=0)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_unclamped_noise_mean_statistical_oracle(self):
        # Mean of the raw noise over >= 1e6 elements sits within three
        # standard errors of zero.
        shape = (3, 640, 528)  # 1,013,760 elements
        assert np.prod(shape) >= 1_000_000
        noise = np.random.default_rng(123).normal(0.0, 35.0 / 255.0, shape)
        bound = 3 * (35.0 / 255.0) / 1000.0
        assert abs(noise.mean()) <= bound
        rgb = np.full(shape, 0.5)
        np.testing.assert_array_equal(
            apply_agn(rgb, 35.0, seed=123), np.clip(rgb + noise, 0.0, 1.0)
        )

    def test_rejects_out_of_range_input(self):
        with pytest.raises(ValueError, match=r"\[0, 1\]"):
            apply_agn(np.full((3, 2, 2), 1.2), 35.0, 0)


class TestApplyDark:
    def test_factor_one_is_identity(self):
        seed = next(s for s in range(100) if draw_dark_factor(s) == 1)
        rgb = np.random.default_rng(0).random((3, 4, 4))
        np.testing.assert_array_equal(apply_dark(rgb, seed), rgb)

    def test_factor_four_quarters_values(self):
        seed = next(s for s in range(100) if draw_dark_factor(s) == 4)
        out = apply_dark(np.full((3, 2, 2), 0.8), seed)
        np.testing.assert_array_equal(out, np.full((3, 2, 2), 0.2))

    def test_never_increases_any_pixel(self):
        rgb = np.random.default_rng(3).random((3, 8, 8))
        for seed in range(20):
            assert (apply_dark(rgb, seed) <= rgb + 1e-15).all()

    def test_factor_histogram_is_uniform(self):
        # Fixed seed block; 50 = 5% of the expected 1000 per factor (the
        # multinomial std is ~30, so an arbitrary block can exceed this).
        counts = np.bincount(
            [draw_dark_factor(s) for s in range(60000, 69000)], minlength=10
        )[1:]
        assert counts.sum() == 9000
        assert (np.abs(counts - 1000) <= 50).all()

    def test_deterministic_per_seed(self):
        rgb = np.random.default_rng(5).random((3, 4, 4))
        np.testing.assert_array_equal(apply_dark(rgb, 8), apply_dark(rgb, 8))


class TestCorruptionSpec:
    def test_kind_validated(self):
        with pytest.raises(ValueError, match="kind"):
            CorruptionSpec(kind="fog")

    def test_none_returns_untouched_copy(self):
        rgb = np.random.default_rng(0).random((3, 4, 4))
        out = CorruptionSpec(kind="none").apply(rgb, 0)
        np.testing.assert_array_equal(out, rgb)
        assert out is not rgb

    def test_pair_subseeds_are_deterministic_and_distinct(self):
        spec = CorruptionSpec(kind="agn", seed=9)
        s1a, s2a = spec.seeds_for_pair(0)
        s1b, s2b = spec.seeds_for_pair(0)
        rgb = np.full((3, 4, 4), 0.5)
        np.testing.assert_array_equal(
            apply_agn(rgb, 35.0, s1a), apply_agn(rgb, 35.0, s1b)
        )
        assert not np.array_equal(apply_agn(rgb, 35.0, s1a), apply_agn(rgb, 35.0, s2a))
        assert not np.array_equal(
            apply_agn(rgb, 35.0, s1a), apply_agn(rgb, 35.0, spec.seeds_for_pair(1)[0])
        )

    def test_dispatch_matches_direct_calls(self):
        rgb = np.random.default_rng(1).random((3, 4, 4))
        np.testing.assert_array_equal(
            CorruptionSpec(kind="agn", sigma=20.0).apply(rgb, 3),
            apply_agn(rgb, 20.0, 3),
        )
        np.testing.assert_array_equal(
            CorruptionSpec(kind="dark").apply(rgb, 3), apply_dark(rgb, 3)
        )
