import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moco5d.volume import (
    ComplexVolume,
    DeformationField,
    Gradient,
    ShapeError,
    bspline_weight_derivs,
    bspline_weights,
    field_to_dense,
    min_control_dims,
    spline_coefficients,
    warp,
    warp_dense,
    warp_jvp,
    warp_vjp,
    zero_field,
)


def bspline_basis_ref(t):
    """Independent cardinal cubic B-spline, straight from the piecewise polynomial."""
    t = abs(t)
    if t < 1:
        return (4.0 - 6.0 * t * t + 3.0 * t**3) / 6.0
    if t < 2:
        return (2.0 - t) ** 3 / 6.0
    return 0.0


def random_volume(rng, dims, spacing=1.0):
    d = rng.standard_normal(dims) + 1j * rng.standard_normal(dims)
    return ComplexVolume(d, spacing)


def random_field(rng, dims, spacing=2.0, amp=0.5):
    cd = min_control_dims(dims, spacing)
    return DeformationField(amp * rng.standard_normal((3, *cd)), spacing)


class TestBsplineWeights:
    def test_at_knot(self):
        # basis evaluated exactly at a knot
        w = bspline_weights(0.0)
        assert np.allclose(w, [1 / 6, 4 / 6, 1 / 6, 0.0], atol=1e-15)

    def test_symmetry_at_half(self):
        w = bspline_weights(0.5)
        assert w[0] == pytest.approx(w[3], abs=1e-15)
        assert w[1] == pytest.approx(w[2], abs=1e-15)

    @given(st.floats(min_value=0.0, max_value=1.0, exclude_max=True))
    @settings(max_examples=200, deadline=None)
    def test_partition_of_unity(self, u):
        assert abs(bspline_weights(u).sum() - 1.0) < 1e-14

    @given(st.floats(min_value=0.0, max_value=1.0, exclude_max=True))
    @settings(max_examples=100, deadline=None)
    def test_matches_piecewise_reference(self, u):
        w = bspline_weights(u)
        ref = [bspline_basis_ref(u + 1), bspline_basis_ref(u),
               bspline_basis_ref(u - 1), bspline_basis_ref(u - 2)]
        assert np.allclose(w, ref, atol=1e-14)

    @given(st.floats(min_value=0.0, max_value=1.0, exclude_max=True))
    @settings(max_examples=100, deadline=None)
    def test_derivs_sum_to_zero(self, u):
        assert abs(bspline_weight_derivs(u).sum()) < 1e-14

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            bspline_weights(1.0)
        with pytest.raises(ValueError):
            bspline_weights(-0.1)


class TestTypes:
    def test_volume_validation(self):
        with pytest.raises(ShapeError):
            ComplexVolume(np.zeros((3, 8, 8)))
        with pytest.raises(ShapeError):
            ComplexVolume(np.zeros((8, 8)))
        with pytest.raises(ValueError):
            ComplexVolume(np.full((8, 8, 8), np.nan))

    def test_field_validation(self):
        with pytest.raises(ShapeError):
            DeformationField(np.zeros((2, 6, 6, 6)))
        with pytest.raises(ValueError):
            DeformationField(np.full((3, 6, 6, 6), np.inf))

    def test_volume_is_immutable(self):
        v = ComplexVolume(np.zeros((8, 8, 8), dtype=complex))
        with pytest.raises(ValueError):
            v.data[0, 0, 0] = 1.0

    def test_gradient_accumulate_checks_shape(self):
        g = Gradient.zeros_like({"w": np.zeros((3, 4))})
        g.accumulate({"w": np.ones((3, 4))})
        assert np.all(g["w"] == 1.0)
        with pytest.raises(ShapeError):
            g.accumulate({"w": np.ones((4, 3))})
        with pytest.raises(ShapeError):
            g.accumulate({"w": np.ones((3, 4), dtype=complex)})


class TestWarp:
    def test_zero_field_is_identity(self):
        rng = np.random.default_rng(0)
        vol = random_volume(rng, (12, 10, 14))
        out = warp(vol, zero_field(vol.dims, 4.0))
        rel = np.linalg.norm(out.data - vol.data) / np.linalg.norm(vol.data)
        assert rel < 1e-12

    def test_delta_peak_moves_against_uniform_displacement(self):
        # pull-back: out(r) = template(r + u), so +2 in x moves the peak to -x
        n = 16
        d = np.zeros((n, n, n), dtype=complex)
        d[8, 8, 8] = 1.0
        vol = ComplexVolume(d)
        cd = min_control_dims((n, n, n), 4.0)
        disp = np.zeros((3, *cd))
        disp[0] = 2.0
        out = warp(vol, DeformationField(disp, 4.0))
        peak = np.unravel_index(np.argmax(np.abs(out.data)), out.dims)
        assert peak == (6, 8, 8)

    def test_gaussian_matches_analytic_resampling(self):
        # closed-form Gaussian as oracle; interior mask accounts for the
        # documented zero-padding boundary
        n, sigma, margin = 64, 10.0, 6
        idx = np.arange(n) - n / 2.0
        X, Y, Z = np.meshgrid(idx, idx, idx, indexing="ij")

        def gauss(x, y, z):
            return np.exp(-(x**2 + y**2 + z**2) / (2 * sigma**2))

        vol = ComplexVolume(gauss(X, Y, Z).astype(complex))
        cd = min_control_dims((n, n, n), 4.0)
        ci = [np.arange(c) for c in cd]
        CX, CY, CZ = np.meshgrid(*ci, indexing="ij")
        disp = 0.7 * np.stack([
            np.sin(2 * np.pi * CX / cd[0]),
            np.cos(2 * np.pi * CY / cd[1]),
            np.sin(2 * np.pi * (CZ + CX) / cd[2]),
        ])
        fld = DeformationField(disp, 4.0)
        out = warp(vol, fld).data
        u = field_to_dense(fld, (n, n, n))
        oracle = gauss(X + u[0], Y + u[1], Z + u[2])
        err = np.abs(out - oracle)[margin:-margin, margin:-margin, margin:-margin]
        assert np.sqrt(np.mean(err**2)) < 1e-6

    def test_linearity_in_template(self):
        rng = np.random.default_rng(3)
        dims = (10, 10, 10)
        t1 = random_volume(rng, dims)
        t2 = random_volume(rng, dims)
        fld = random_field(rng, dims)
        a, b = 1.7 - 0.3j, -0.6 + 2.1j
        combined = warp(ComplexVolume(a * t1.data + b * t2.data), fld).data
        separate = a * warp(t1, fld).data + b * warp(t2, fld).data
        rel = np.linalg.norm(combined - separate) / np.linalg.norm(separate)
        assert rel < 1e-12

    def test_coverage_check(self):
        vol = ComplexVolume(np.zeros((16, 16, 16), dtype=complex))
        small = DeformationField(np.zeros((3, 4, 4, 4)), 4.0)
        with pytest.raises(ShapeError):
            warp(vol, small)

    def test_warp_dense_matches_control_grid_path(self):
        rng = np.random.default_rng(4)
        dims = (10, 12, 10)
        vol = random_volume(rng, dims)
        fld = random_field(rng, dims)
        u = field_to_dense(fld, dims)
        assert np.allclose(warp(vol, fld).data, warp_dense(vol, u), atol=1e-13)


class TestWarpVjp:
    def test_zero_cotangent(self):
        rng = np.random.default_rng(5)
        dims = (8, 8, 8)
        vol = random_volume(rng, dims)
        fld = random_field(rng, dims)
        g_t, g_f = warp_vjp(vol, fld, np.zeros(dims, dtype=complex))
        assert np.all(g_t == 0) and np.all(g_f == 0)

    def test_uniform_template_field_gradient_vanishes(self):
        # spatial derivative of a constant image is zero away from the border;
        # the zero-padding boundary ringing decays by 2 - sqrt(3) per voxel,
        # so a cotangent 20 voxels inside is past the 1e-10 level
        dims = (48, 48, 48)
        vol = ComplexVolume(np.full(dims, 2.0 + 1.0j))
        fld = zero_field(dims, 4.0)
        cot = np.zeros(dims, dtype=complex)
        cot[20:28, 20:28, 20:28] = 1.0
        _, g_f = warp_vjp(vol, fld, cot)
        assert np.max(np.abs(g_f)) < 1e-10

    def test_finite_differences(self):
        rng = np.random.default_rng(6)
        dims = (8, 8, 8)
        vol = random_volume(rng, dims)
        fld = random_field(rng, dims, spacing=2.0, amp=0.4)
        cot = rng.standard_normal(dims) + 1j * rng.standard_normal(dims)
        g_t, g_f = warp_vjp(vol, fld, cot)

        def loss(data, disp):
            out = warp(ComplexVolume(data), DeformationField(disp, fld.control_spacing)).data
            return np.real(np.vdot(cot, out))

        h = 1e-3
        dt = rng.standard_normal(dims) + 1j * rng.standard_normal(dims)
        df = rng.standard_normal(g_f.shape)
        fd_t = (loss(vol.data + h * dt, fld.displacements)
                - loss(vol.data - h * dt, fld.displacements)) / (2 * h)
        an_t = np.real(np.vdot(g_t, dt))
        assert abs(fd_t - an_t) / max(abs(fd_t), 1e-12) < 1e-4

        fd_f = (loss(vol.data, fld.displacements + h * df)
                - loss(vol.data, fld.displacements - h * df)) / (2 * h)
        an_f = np.sum(g_f * df)
        assert abs(fd_f - an_f) / max(abs(fd_f), 1e-12) < 1e-4

    def test_jvp_vjp_dot_product(self):
        # <J d, c> == <d, J^T c> for the linearized warp
        rng = np.random.default_rng(7)
        dims = (8, 10, 8)
        vol = random_volume(rng, dims)
        fld = random_field(rng, dims, spacing=2.0)
        dt = rng.standard_normal(dims) + 1j * rng.standard_normal(dims)
        df = rng.standard_normal((3, *fld.control_dims))
        cot = rng.standard_normal(dims) + 1j * rng.standard_normal(dims)

        jv = warp_jvp(vol, fld, dt, df)
        g_t, g_f = warp_vjp(vol, fld, cot)
        lhs = np.real(np.vdot(cot, jv))
        rhs = np.real(np.vdot(g_t, dt)) + np.sum(g_f * df)
        assert abs(lhs - rhs) / max(abs(lhs), 1e-12) < 1e-10

    def test_cotangent_shape_checked(self):
        rng = np.random.default_rng(8)
        vol = random_volume(rng, (8, 8, 8))
        fld = random_field(rng, (8, 8, 8))
        with pytest.raises(ShapeError):
            warp_vjp(vol, fld, np.zeros((6, 6, 6), dtype=complex))


def test_spline_coefficients_interpolate_data():
    rng = np.random.default_rng(9)
    data = rng.standard_normal((9, 8, 7)) + 1j * rng.standard_normal((9, 8, 7))
    coef = spline_coefficients(data)
    vol = ComplexVolume(coef.copy())
    # evaluating the spline back on the integer grid must reproduce the data
    from moco5d.volume import _base_coords, _sample3

    base = _base_coords((9, 8, 7))
    out = np.empty((9, 8, 7), dtype=complex)
    _sample3(coef, base[0].copy(), base[1].copy(), base[2].copy(), out)
    assert np.allclose(out, data, atol=1e-12)
    del vol
