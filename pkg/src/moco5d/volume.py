"""Complex image volumes, B-spline deformation fields, and the warp operator.

The warp follows the pull-back convention: the output at voxel r is the
template sampled at r + u(r), where u is a displacement field (in voxel
units) expanded from a coarse control grid by cubic B-splines.  Template
values are sampled by interpolating cubic B-splines (prefiltered
coefficients), with zero padding outside the grid.  Every operator here
exposes an exact vector-Jacobian product so gradients can be chained
through the acquisition model.

Gradient convention for complex outputs: a cotangent g encodes the real
inner product dL = Re <g, dout> = Re sum(conj(g) * dout).  Gradients with
respect to real parameters are therefore real arrays; gradients with
respect to complex arrays are complex arrays under the same pairing.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numba as nb
import numpy as np
from scipy.linalg import solve_banded


class ShapeError(ValueError):
    """Raised when array shapes or grid coverage do not match."""


def _as_readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    if a.flags.writeable:
        # own a frozen copy; never retroactively freeze the caller's buffer
        a = a.copy()
        a.flags.writeable = False
    return a


@dataclass(frozen=True)
class ComplexVolume:
    """A 3D complex-valued image on an isotropic voxel grid.

    data is (nx, ny, nz) complex128 in row-major order; spacing is mm per
    voxel.  Instances are immutable and safe to share between workers.
    """

    data: np.ndarray
    spacing: float = 1.0

    def __post_init__(self):
        d = np.asarray(self.data)
        if d.ndim != 3:
            raise ShapeError(f"volume data must be 3D, got shape {d.shape}")
        if min(d.shape) < 4:
            raise ShapeError(f"volume dims must all be >= 4, got {d.shape}")
        d = np.ascontiguousarray(d, dtype=np.complex128)
        if not np.isfinite(d.view(np.float64)).all():
            raise ValueError("volume contains non-finite values")
        if not self.spacing > 0:
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        object.__setattr__(self, "data", _as_readonly(d))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class DeformationField:
    """Displacement field parameterized on a cubic B-spline control grid.

    displacements is (3, cx, cy, cz) in voxel units; control point j of an
    axis sits at voxel coordinate (j - 1) * control_spacing, so the grid
    extends one point beyond each volume boundary.
    """

    displacements: np.ndarray
    control_spacing: float = 4.0

    def __post_init__(self):
        d = np.asarray(self.displacements, dtype=np.float64)
        if d.ndim != 4 or d.shape[0] != 3:
            raise ShapeError(f"displacements must be (3, cx, cy, cz), got {d.shape}")
        if min(d.shape[1:]) < 4:
            raise ShapeError(f"control dims must all be >= 4, got {d.shape[1:]}")
        if not np.isfinite(d).all():
            raise ValueError("displacements contain non-finite values")
        if not self.control_spacing > 0:
            raise ValueError("control_spacing must be positive")
        object.__setattr__(self, "displacements", _as_readonly(d))

    @property
    def control_dims(self) -> tuple[int, int, int]:
        return self.displacements.shape[1:]

    def covers(self, vol_dims) -> bool:
        need = min_control_dims(vol_dims, self.control_spacing)
        return all(c >= n for c, n in zip(self.control_dims, need))


def min_control_dims(vol_dims, control_spacing: float) -> tuple[int, int, int]:
    """Smallest control grid whose B-spline support covers the volume."""
    return tuple(int(np.floor((n - 1) / control_spacing)) + 4 for n in vol_dims)


def zero_field(vol_dims, control_spacing: float = 4.0) -> DeformationField:
    cd = min_control_dims(vol_dims, control_spacing)
    return DeformationField(np.zeros((3, *cd)), control_spacing)


class Gradient:
    """Gradient container mirroring the structure of its primal parameters.

    Wraps a dict of named arrays (a single array becomes {"": array}).
    Accumulation checks shape and dtype kind against the existing entries,
    which catches mismatched primal/gradient pairs early.
    """

    def __init__(self, arrays):
        if isinstance(arrays, np.ndarray):
            arrays = {"": arrays}
        self.arrays = dict(arrays)

    @classmethod
    def zeros_like(cls, params) -> "Gradient":
        if isinstance(params, np.ndarray):
            return cls(np.zeros_like(params))
        return cls({k: np.zeros_like(v) for k, v in params.items()})

    def accumulate(self, other) -> "Gradient":
        other = other.arrays if isinstance(other, Gradient) else other
        if isinstance(other, np.ndarray):
            other = {"": other}
        for k, v in other.items():
            tgt = self.arrays[k]
            if tgt.shape != v.shape:
                raise ShapeError(f"gradient '{k}': shape {v.shape} != primal {tgt.shape}")
            if np.iscomplexobj(tgt) != np.iscomplexobj(v):
                raise ShapeError(f"gradient '{k}': real/complex kind mismatch")
            self.arrays[k] = tgt + v
        return self

    def scaled(self, alpha: float) -> "Gradient":
        return Gradient({k: alpha * v for k, v in self.arrays.items()})

    def __getitem__(self, key):
        return self.arrays[key]


# ---------------------------------------------------------------------------
# cubic B-spline basis

@nb.njit(cache=True, inline="always")
def _bw(u):
    # weights for control points floor(x)-1 .. floor(x)+2 at fraction u
    v = 1.0 - u
    w0 = v * v * v / 6.0
    w1 = (3.0 * u * u * u - 6.0 * u * u + 4.0) / 6.0
    w2 = (-3.0 * u * u * u + 3.0 * u * u + 3.0 * u + 1.0) / 6.0
    w3 = u * u * u / 6.0
    return w0, w1, w2, w3


@nb.njit(cache=True, inline="always")
def _bwd(u):
    # d/dx of the four basis functions at fraction u
    v = 1.0 - u
    return -0.5 * v * v, 1.5 * u * u - 2.0 * u, -1.5 * u * u + u + 0.5, 0.5 * u * u


def bspline_weights(fraction: float) -> np.ndarray:
    """The four cubic B-spline basis values at a fractional offset in [0, 1)."""
    if not 0.0 <= fraction < 1.0:
        raise ValueError(f"fraction must be in [0, 1), got {fraction}")
    return np.array(_bw(fraction))


def bspline_weight_derivs(fraction: float) -> np.ndarray:
    """Derivatives (per voxel) of the four basis values at a fractional offset."""
    if not 0.0 <= fraction < 1.0:
        raise ValueError(f"fraction must be in [0, 1), got {fraction}")
    return np.array(_bwd(fraction))


@lru_cache(maxsize=64)
def _axis_weight_matrix(n: int, spacing: float, c: int) -> np.ndarray:
    """Dense (n, c) matrix expanding control values to voxel positions."""
    W = np.zeros((n, c))
    for x in range(n):
        t = x / spacing
        i0 = int(np.floor(t))
        w = _bw(t - i0)
        for m in range(4):
            W[x, i0 + m] = w[m]
    return _as_readonly(W)


def _check_coverage(vol_dims, field: DeformationField):
    if not field.covers(vol_dims):
        raise ShapeError(
            f"control grid {field.control_dims} at spacing {field.control_spacing} "
            f"does not cover volume {tuple(vol_dims)} "
            f"(needs >= {min_control_dims(vol_dims, field.control_spacing)})"
        )


def field_to_dense(field: DeformationField, vol_dims) -> np.ndarray:
    """Evaluate the control-grid displacement at every voxel center.

    Returns (3, nx, ny, nz) in voxel units.
    """
    _check_coverage(vol_dims, field)
    Ws = [_axis_weight_matrix(n, field.control_spacing, c)
          for n, c in zip(vol_dims, field.control_dims)]
    return np.einsum("xi,yj,zk,dijk->dxyz", Ws[0], Ws[1], Ws[2],
                     field.displacements, optimize=True)


def field_to_dense_vjp(field: DeformationField, vol_dims, g_dense: np.ndarray) -> np.ndarray:
    """Adjoint of field_to_dense: voxel cotangent -> control-point gradient."""
    Ws = [_axis_weight_matrix(n, field.control_spacing, c)
          for n, c in zip(vol_dims, field.control_dims)]
    return np.einsum("xi,yj,zk,dxyz->dijk", Ws[0], Ws[1], Ws[2],
                     g_dense, optimize=True)


# ---------------------------------------------------------------------------
# interpolating-spline prefilter (zero boundary, symmetric tridiagonal solve)

def spline_coefficients(data: np.ndarray) -> np.ndarray:
    """Coefficients c with (B * c)(i) = data(i), zero outside the grid."""
    out = np.asarray(data, dtype=np.complex128)
    for axis in range(3):
        n = out.shape[axis]
        ab = np.zeros((3, n))
        ab[0, 1:] = 1.0 / 6.0
        ab[1, :] = 4.0 / 6.0
        ab[2, :-1] = 1.0 / 6.0
        moved = np.moveaxis(out, axis, 0)
        sol = solve_banded((1, 1), ab, moved.reshape(n, -1))
        out = np.moveaxis(sol.reshape(moved.shape), 0, axis)
    return np.ascontiguousarray(out)


# ---------------------------------------------------------------------------
# numba sampling kernels (sequential: deterministic for any thread count)

@nb.njit(cache=True)
def _sample3(coef, cx_, cy_, cz_, out):
    nx, ny, nz = out.shape
    cxn, cyn, czn = coef.shape
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                x = cx_[i, j, k]
                y = cy_[i, j, k]
                z = cz_[i, j, k]
                ix = int(np.floor(x))
                iy = int(np.floor(y))
                iz = int(np.floor(z))
                wx0, wx1, wx2, wx3 = _bw(x - ix)
                wy0, wy1, wy2, wy3 = _bw(y - iy)
                wz0, wz1, wz2, wz3 = _bw(z - iz)
                acc = 0.0 + 0.0j
                for a in range(4):
                    pa = ix - 1 + a
                    if pa < 0 or pa >= cxn:
                        continue
                    wa = wx0 if a == 0 else (wx1 if a == 1 else (wx2 if a == 2 else wx3))
                    for b in range(4):
                        pb = iy - 1 + b
                        if pb < 0 or pb >= cyn:
                            continue
                        wb = wy0 if b == 0 else (wy1 if b == 1 else (wy2 if b == 2 else wy3))
                        wab = wa * wb
                        for c in range(4):
                            pc = iz - 1 + c
                            if pc < 0 or pc >= czn:
                                continue
                            wc = wz0 if c == 0 else (wz1 if c == 1 else (wz2 if c == 2 else wz3))
                            acc += wab * wc * coef[pa, pb, pc]
                out[i, j, k] = acc
    return out


@nb.njit(cache=True)
def _sample3_grad(coef, cx_, cy_, cz_, out, gx, gy, gz):
    # value plus spatial derivative of the spline along each axis
    nx, ny, nz = out.shape
    cxn, cyn, czn = coef.shape
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                x = cx_[i, j, k]
                y = cy_[i, j, k]
                z = cz_[i, j, k]
                ix = int(np.floor(x))
                iy = int(np.floor(y))
                iz = int(np.floor(z))
                wx = _bw(x - ix)
                wy = _bw(y - iy)
                wz = _bw(z - iz)
                dx = _bwd(x - ix)
                dy = _bwd(y - iy)
                dz = _bwd(z - iz)
                acc = 0.0 + 0.0j
                ax = 0.0 + 0.0j
                ay = 0.0 + 0.0j
                az = 0.0 + 0.0j
                for a in range(4):
                    pa = ix - 1 + a
                    if pa < 0 or pa >= cxn:
                        continue
                    for b in range(4):
                        pb = iy - 1 + b
                        if pb < 0 or pb >= cyn:
                            continue
                        for c in range(4):
                            pc = iz - 1 + c
                            if pc < 0 or pc >= czn:
                                continue
                            v = coef[pa, pb, pc]
                            acc += wx[a] * wy[b] * wz[c] * v
                            ax += dx[a] * wy[b] * wz[c] * v
                            ay += wx[a] * dy[b] * wz[c] * v
                            az += wx[a] * wy[b] * dz[c] * v
                out[i, j, k] = acc
                gx[i, j, k] = ax
                gy[i, j, k] = ay
                gz[i, j, k] = az


@nb.njit(cache=True)
def _scatter3(cot, cx_, cy_, cz_, gcoef):
    # exact adjoint of _sample3; sequential so accumulation is reproducible
    nx, ny, nz = cot.shape
    cxn, cyn, czn = gcoef.shape
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                g = cot[i, j, k]
                if g == 0:
                    continue
                x = cx_[i, j, k]
                y = cy_[i, j, k]
                z = cz_[i, j, k]
                ix = int(np.floor(x))
                iy = int(np.floor(y))
                iz = int(np.floor(z))
                wx = _bw(x - ix)
                wy = _bw(y - iy)
                wz = _bw(z - iz)
                for a in range(4):
                    pa = ix - 1 + a
                    if pa < 0 or pa >= cxn:
                        continue
                    for b in range(4):
                        pb = iy - 1 + b
                        if pb < 0 or pb >= cyn:
                            continue
                        wab = wx[a] * wy[b]
                        for c in range(4):
                            pc = iz - 1 + c
                            if pc < 0 or pc >= czn:
                                continue
                            gcoef[pa, pb, pc] += wab * wz[c] * g
    return gcoef


@lru_cache(maxsize=16)
def _base_coords(dims) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    grids = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in dims], indexing="ij")
    return tuple(_as_readonly(g) for g in grids)


def _warp_coords(field: DeformationField, dims):
    u = field_to_dense(field, dims)
    base = _base_coords(tuple(dims))
    return u, (base[0] + u[0], base[1] + u[1], base[2] + u[2])


# ---------------------------------------------------------------------------
# public warp API

def warp(template: ComplexVolume, field: DeformationField) -> ComplexVolume:
    """Deform a template: output(r) = template(r + u(r)), zero outside."""
    _, coords = _warp_coords(field, template.dims)
    coef = spline_coefficients(template.data)
    out = np.empty(template.dims, dtype=np.complex128)
    _sample3(coef, coords[0], coords[1], coords[2], out)
    return ComplexVolume(out, template.spacing)


def warp_dense(template: ComplexVolume, u: np.ndarray) -> np.ndarray:
    """Warp with an explicit dense displacement (3, nx, ny, nz), voxel units.

    Shares the sampling core with warp; used by the simulator's ground-truth
    fields and as an oracle in tests.
    """
    if u.shape != (3, *template.dims):
        raise ShapeError(f"dense field shape {u.shape} != (3, *{template.dims})")
    base = _base_coords(template.dims)
    coef = spline_coefficients(template.data)
    out = np.empty(template.dims, dtype=np.complex128)
    _sample3(coef, base[0] + u[0], base[1] + u[1], base[2] + u[2], out)
    return out


def warp_vjp(template: ComplexVolume, field: DeformationField,
             cotangent: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vector-Jacobian products of warp w.r.t. template values and control
    displacements.

    Returns (g_template complex (nx,ny,nz), g_field real (3,cx,cy,cz)).
    """
    if cotangent.shape != template.dims:
        raise ShapeError(f"cotangent shape {cotangent.shape} != volume {template.dims}")
    cot = np.ascontiguousarray(cotangent, dtype=np.complex128)
    _, coords = _warp_coords(field, template.dims)

    # template branch: (Sample . Prefilter)^T = Prefilter . Scatter
    # (the prefilter matrix is symmetric, the sampling weights are real)
    g_coef = np.zeros(template.dims, dtype=np.complex128)
    _scatter3(cot, coords[0], coords[1], coords[2], g_coef)
    g_template = spline_coefficients(g_coef)

    # field branch: spatial derivative of the spline, paired with the cotangent
    coef = spline_coefficients(template.data)
    val = np.empty(template.dims, dtype=np.complex128)
    gx = np.empty_like(val)
    gy = np.empty_like(val)
    gz = np.empty_like(val)
    _sample3_grad(coef, coords[0], coords[1], coords[2], val, gx, gy, gz)
    g_dense = np.stack([
        (np.conj(cot) * gx).real,
        (np.conj(cot) * gy).real,
        (np.conj(cot) * gz).real,
    ])
    g_field = field_to_dense_vjp(field, template.dims, g_dense)
    return g_template, g_field


def warp_jvp(template: ComplexVolume, field: DeformationField,
             d_template: np.ndarray | None,
             d_field: np.ndarray | None) -> np.ndarray:
    """Directional derivative of warp (linearized operator applied to a tangent)."""
    _, coords = _warp_coords(field, template.dims)
    out = np.zeros(template.dims, dtype=np.complex128)
    if d_template is not None:
        if d_template.shape != template.dims:
            raise ShapeError("d_template shape mismatch")
        dcoef = spline_coefficients(d_template)
        tmp = np.empty(template.dims, dtype=np.complex128)
        _sample3(dcoef, coords[0], coords[1], coords[2], tmp)
        out += tmp
    if d_field is not None:
        if d_field.shape != (3, *field.control_dims):
            raise ShapeError("d_field shape mismatch")
        du = field_to_dense(DeformationField(d_field, field.control_spacing), template.dims)
        coef = spline_coefficients(template.data)
        val = np.empty(template.dims, dtype=np.complex128)
        gx = np.empty_like(val)
        gy = np.empty_like(val)
        gz = np.empty_like(val)
        _sample3_grad(coef, coords[0], coords[1], coords[2], val, gx, gy, gz)
        out += gx * du[0] + gy * du[1] + gz * du[2]
    return out
