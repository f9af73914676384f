import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spatrob.warp import (
    AttackSpace,
    TransformParams,
    apply_transform,
    black_canvas_pad,
    sufficient_pad,
    transform_vjp,
    warp_batch,
)

from oracles import fd_param_grads, gaussian_blob, reference_warp

RNG = np.random.default_rng(1234)


def random_image(h=9, w=9, n_ch=1, rng=RNG):
    return rng.random((n_ch, h, w))


def sample_params_away_from_kinks(rng, h, w, margin=3e-3, max_trans=2.0, max_rot=25.0):
    """Draw params whose sample coordinates all stay >margin from integers.

    Bilinear interpolation kinks at integer sample coordinates; finite
    differences are only valid when the probe step does not straddle one.
    """
    from spatrob.warp import _source_grids

    while True:
        p = (
            rng.uniform(-max_trans, max_trans),
            rng.uniform(-max_trans, max_trans),
            rng.uniform(-max_rot, max_rot),
        )
        xs, ys, _, _ = _source_grids(h, w, np.asarray(p, float)[None])
        d = np.minimum(np.abs(xs - np.round(xs)), np.abs(ys - np.round(ys)))
        if d.min() > margin:
            return p


# ---------------------------------------------------------------------------
# apply_transform
# ---------------------------------------------------------------------------


class TestApplyTransform:
    def test_identity_is_bit_exact(self):
        for dtype in (np.float64, np.float32):
            x = random_image(8, 8, 2).astype(dtype)
            out = apply_transform(x, TransformParams(0.0, 0.0, 0.0))
            assert out.dtype == dtype
            assert np.array_equal(out, x)

    def test_single_pixel_integer_shift(self):
        # value 1 at row 1, col 1; du=+1 moves content one pixel in +u (columns)
        x = np.zeros((1, 4, 4))
        x[0, 1, 1] = 1.0
        expected = np.zeros((1, 4, 4))
        expected[0, 1, 2] = 1.0
        out = apply_transform(x, TransformParams(1.0, 0.0, 0.0))
        assert np.array_equal(out, expected)
        assert np.allclose(reference_warp(x, 1, 0, 0), expected)

    def test_integer_shift_equals_raster_shift(self):
        x = random_image(7, 6)
        out = apply_transform(x, TransformParams(2.0, -1.0, 0.0))
        expected = np.zeros_like(x)
        expected[:, : 7 - 1, 2:] = x[:, 1:, : 6 - 2]  # content +2 cols, -1 row
        assert np.array_equal(out, expected)

    def test_quarter_turn_is_exact_permutation(self):
        x = np.arange(9, dtype=np.float64).reshape(1, 3, 3)
        out = apply_transform(x, TransformParams(0.0, 0.0, 90.0))
        assert np.array_equal(out[0], np.rot90(x[0], 3))
        # and the brute-force oracle agrees up to its radian round-off
        assert np.allclose(reference_warp(x, 0, 0, 90), out, atol=1e-12)

    @pytest.mark.parametrize(
        "params",
        [(0.7, -1.3, 17.0), (-2.5, 0.0, -29.0), (1.5, 1.5, 3.3), (0.0, 2.0, 45.0)],
    )
    def test_matches_brute_force_reference(self, params):
        x = random_image(11, 9, 2)
        out = apply_transform(x, TransformParams(*params))
        assert np.allclose(out, reference_warp(x, *params), atol=1e-10)

    def test_rejects_non_finite(self):
        x = random_image()
        bad = x.copy()
        bad[0, 0, 0] = np.nan
        with pytest.raises(ValueError):
            apply_transform(bad, TransformParams())
        with pytest.raises(ValueError):
            TransformParams(np.inf, 0.0, 0.0)

    @settings(max_examples=30, deadline=None)
    @given(
        du=st.floats(-4, 4),
        dv=st.floats(-4, 4),
        theta=st.floats(-45, 45),
        seed=st.integers(0, 2**31),
    )
    def test_output_in_convex_range(self, du, dv, theta, seed):
        x = np.random.default_rng(seed).random((1, 8, 8))
        out = apply_transform(x, TransformParams(du, dv, theta))
        assert out.min() >= -1e-12
        assert out.max() <= x.max() + 1e-12

    def test_approximate_rotation_inverse(self):
        x = gaussian_blob(28, 28, sigma=4.0)
        padded = black_canvas_pad(x, 10)
        for theta in (7.0, 19.5, 30.0):
            back = apply_transform(
                apply_transform(padded, TransformParams(0, 0, theta)),
                TransformParams(0, 0, -theta),
            )
            err = np.linalg.norm(back - padded) / np.linalg.norm(padded)
            assert err <= 0.02


class TestWarpBatch:
    def test_rows_match_single_calls(self):
        x = random_image(10, 10)
        space = AttackSpace(3.0, 30.0, 3, 5)
        grid = space.grid_params()
        batch = warp_batch(x, grid)
        for row, p in zip(batch, grid):
            assert np.array_equal(row, apply_transform(x, TransformParams.from_array(p)))

    def test_pairwise_images_and_params(self):
        imgs = RNG.random((4, 1, 6, 6))
        params = np.array([[1, 0, 0], [0, 1, 0], [0, 0, 10], [0.5, -0.5, -5]], float)
        batch = warp_batch(imgs, params)
        for b in range(4):
            assert np.array_equal(
                batch[b], apply_transform(imgs[b], TransformParams.from_array(params[b]))
            )

    def test_batch_mismatch_raises(self):
        with pytest.raises(ValueError):
            warp_batch(RNG.random((3, 1, 5, 5)), np.zeros((2, 3)))


# ---------------------------------------------------------------------------
# transform_vjp
# ---------------------------------------------------------------------------


class TestTransformVjp:
    def test_zero_upstream_gives_zero_grads(self):
        x = random_image()
        g_du, g_dv, g_th, g_img = transform_vjp(
            x, TransformParams(0.3, -0.2, 5.0), np.zeros_like(x)
        )
        assert g_du == g_dv == g_th == 0.0
        assert np.array_equal(g_img, np.zeros_like(x))

    @pytest.mark.parametrize("seed", range(6))
    def test_param_grads_match_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        x = gaussian_blob(16, 16, sigma=2.5)
        params = sample_params_away_from_kinks(rng, 16, 16)
        upstream = np.ones_like(x)
        g_du, g_dv, g_th, _ = transform_vjp(x, TransformParams(*params), upstream)

        def objective(du, dv, th):
            return float(np.sum(upstream * apply_transform(x, TransformParams(du, dv, th))))

        fd = fd_param_grads(objective, params)
        got = np.array([g_du, g_dv, g_th])
        assert np.linalg.norm(got - fd) <= 1e-4 * max(np.linalg.norm(fd), 1e-8)

    def test_constant_field_interior_grads_vanish(self):
        x = np.full((1, 16, 16), 0.6)
        upstream = np.zeros_like(x)
        upstream[:, 5:11, 5:11] = 1.0  # samples of these outputs stay interior
        g_du, g_dv, g_th, _ = transform_vjp(x, TransformParams(0.4, -0.3, 6.0), upstream)
        assert abs(g_du) <= 1e-6 and abs(g_dv) <= 1e-6 and abs(g_th) <= 1e-6

    def test_image_grad_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        x = gaussian_blob(10, 10, sigma=2.0)
        upstream = rng.random(x.shape)
        params = TransformParams(0.7, -0.4, 12.0)
        _, _, _, g_img = transform_vjp(x, params, upstream)
        eps = 1e-5
        for _ in range(10):
            ch, i, j = 0, rng.integers(10), rng.integers(10)
            xp, xm = x.copy(), x.copy()
            xp[ch, i, j] += eps
            xm[ch, i, j] -= eps
            fd = (
                np.sum(upstream * apply_transform(xp, params))
                - np.sum(upstream * apply_transform(xm, params))
            ) / (2 * eps)
            assert abs(fd - g_img[ch, i, j]) <= 1e-6 + 1e-5 * abs(fd)

    def test_upstream_shape_mismatch_raises(self):
        with pytest.raises(ValueError):
            transform_vjp(random_image(6, 6), TransformParams(), np.zeros((1, 5, 5)))


# ---------------------------------------------------------------------------
# black_canvas_pad / attack space
# ---------------------------------------------------------------------------


class TestBlackCanvasPad:
    def test_zero_pad_is_identity(self):
        x = random_image(28, 28)
        assert np.array_equal(black_canvas_pad(x, 0), x)

    def test_pad_shape_and_sum(self):
        x = random_image(28, 28)
        out = black_canvas_pad(x, 10)
        assert out.shape == (1, 48, 48)
        assert out.sum() == pytest.approx(x.sum(), rel=1e-12)
        assert np.array_equal(out[:, 10:38, 10:38], x)

    def test_insufficient_pad_loses_mass_frozen_oracle_value(self):
        # brute-force reference value: pad 6 is NOT enough for (3, 3, 30)
        ones = np.ones((1, 28, 28))
        out = apply_transform(black_canvas_pad(ones, 6), TransformParams(3, 3, 30))
        assert out.sum() == pytest.approx(773.5804045911289, abs=1e-8)

    def test_sufficient_pad_preserves_mass(self):
        pad = sufficient_pad(28, 28, 3.0)
        assert pad == 9
        ones = np.ones((1, 28, 28))
        padded = black_canvas_pad(ones, pad)
        for du in (-3.0, 3.0):
            for dv in (-3.0, 3.0):
                for th in (-30.0, 30.0):
                    s = apply_transform(padded, TransformParams(du, dv, th)).sum()
                    # rotations resample on a tilted lattice: sum conserved to ~0.01%
                    assert abs(s - 784.0) <= 1e-3 * 784.0
        # pure translations conserve the sum exactly up to float round-off
        s = apply_transform(padded, TransformParams(2.5, -3.0, 0.0)).sum()
        assert s == pytest.approx(784.0, abs=1e-9)

    def test_negative_pad_raises(self):
        with pytest.raises(ValueError):
            black_canvas_pad(random_image(), -1)


class TestAttackSpace:
    def test_default_grid_is_775_and_contains_identity(self):
        space = AttackSpace(3.0, 30.0, 5, 31)
        grid = space.grid_params()
        assert grid.shape == (775, 3)
        assert any(np.array_equal(row, [0.0, 0.0, 0.0]) for row in grid)

    def test_grid_scan_order_rotation_major(self):
        space = AttackSpace(1.0, 10.0, 3, 3)
        grid = space.grid_params()
        # du varies fastest, theta slowest
        assert np.array_equal(grid[0], [-1.0, -1.0, -10.0])
        assert np.array_equal(grid[1], [0.0, -1.0, -10.0])
        assert np.array_equal(grid[3], [-1.0, 0.0, -10.0])
        assert np.array_equal(grid[9], [-1.0, -1.0, 0.0])

    def test_grid_values_equally_spaced(self):
        space = AttackSpace(3.0, 30.0)
        assert np.allclose(np.diff(space.trans_values()), 1.5)
        assert np.allclose(np.diff(space.rot_values()), 2.0)
        assert 0.0 in space.trans_values() and 0.0 in space.rot_values()

    @pytest.mark.parametrize("kwargs", [dict(trans_grid_points=4), dict(rot_grid_points=0), dict(max_trans=-1)])
    def test_invalid_space_rejected(self, kwargs):
        with pytest.raises(ValueError):
            AttackSpace(**{**dict(max_trans=3, max_rot=30), **kwargs})

    def test_sample_uniform_inside_box_and_deterministic(self):
        space = AttackSpace(3.0, 30.0)
        a = space.sample_uniform(np.random.default_rng(5), 100)
        b = space.sample_uniform(np.random.default_rng(5), 100)
        assert np.array_equal(a, b)
        assert (np.abs(a[:, :2]) <= 3.0).all() and (np.abs(a[:, 2]) <= 30.0).all()

    def test_restricted_spaces(self):
        space = AttackSpace(3.0, 30.0, 5, 31)
        t = space.translation_only()
        r = space.rotation_only()
        assert t.grid_size == 25 and (t.grid_params()[:, 2] == 0).all()
        assert r.grid_size == 31 and (r.grid_params()[:, :2] == 0).all()
