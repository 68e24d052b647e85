"""CNN mapping a 3-vector latent code to a deformation control grid.

Decoder layout: dense layer seeds a 32-channel cube, three upsampling
stages (zero-stuffing x2 then 3x3x3 same-convolution) shrink the channels
32 -> 16 -> 8 -> 3, and a center crop plus a learnable scalar gain produce
the 3-component control-point displacements in voxel units.  Hidden
activations are tanh (smooth, so finite-difference checks apply); the final
convolution is zero-initialized, making the generator identically zero at
initialization for every latent input.

All gradients are hand-chained VJPs under the package's real-pairing
convention (fields are real, so cotangents here are plain real arrays).
"""

from __future__ import annotations

from dataclasses import dataclass

import numba as nb
import numpy as np

from .volume import DeformationField, ShapeError

CHANNELS = (32, 16, 8, 3)


@nb.njit(cache=True)
def _conv3d(x, w, b, out):
    # same-padding 3x3x3 convolution: out[co] = sum_ci x[ci] * w[co, ci] + b[co]
    co_n, ci_n = w.shape[0], w.shape[1]
    D, H, W = x.shape[1], x.shape[2], x.shape[3]
    for co in range(co_n):
        for i in range(D):
            for j in range(H):
                for k in range(W):
                    acc = b[co]
                    for ci in range(ci_n):
                        for a in range(3):
                            ia = i + a - 1
                            if ia < 0 or ia >= D:
                                continue
                            for bb in range(3):
                                jb = j + bb - 1
                                if jb < 0 or jb >= H:
                                    continue
                                for c in range(3):
                                    kc = k + c - 1
                                    if kc < 0 or kc >= W:
                                        continue
                                    acc += w[co, ci, a, bb, c] * x[ci, ia, jb, kc]
                    out[co, i, j, k] = acc
    return out


@nb.njit(cache=True)
def _conv3d_vjp_x(g, w, gx):
    # adjoint w.r.t. input: correlate cotangent with the kernel
    co_n, ci_n = w.shape[0], w.shape[1]
    D, H, W = gx.shape[1], gx.shape[2], gx.shape[3]
    for ci in range(ci_n):
        for i in range(D):
            for j in range(H):
                for k in range(W):
                    acc = 0.0
                    for co in range(co_n):
                        for a in range(3):
                            ia = i - (a - 1)
                            if ia < 0 or ia >= D:
                                continue
                            for bb in range(3):
                                jb = j - (bb - 1)
                                if jb < 0 or jb >= H:
                                    continue
                                for c in range(3):
                                    kc = k - (c - 1)
                                    if kc < 0 or kc >= W:
                                        continue
                                    acc += w[co, ci, a, bb, c] * g[co, ia, jb, kc]
                    gx[ci, i, j, k] = acc
    return gx


@nb.njit(cache=True)
def _conv3d_vjp_w(x, g, gw):
    co_n, ci_n = gw.shape[0], gw.shape[1]
    D, H, W = x.shape[1], x.shape[2], x.shape[3]
    for co in range(co_n):
        for ci in range(ci_n):
            for a in range(3):
                for bb in range(3):
                    for c in range(3):
                        acc = 0.0
                        for i in range(D):
                            ia = i + a - 1
                            if ia < 0 or ia >= D:
                                continue
                            for j in range(H):
                                jb = j + bb - 1
                                if jb < 0 or jb >= H:
                                    continue
                                for k in range(W):
                                    kc = k + c - 1
                                    if kc < 0 or kc >= W:
                                        continue
                                    acc += g[co, i, j, k] * x[ci, ia, jb, kc]
                        gw[co, ci, a, bb, c] = acc
    return gw


def _upsample(x: np.ndarray) -> np.ndarray:
    # zero-stuffing: size s -> 2s - 1 per spatial axis
    c, d, h, w = x.shape
    out = np.zeros((c, 2 * d - 1, 2 * h - 1, 2 * w - 1))
    out[:, ::2, ::2, ::2] = x
    return out


def _upsample_vjp(g: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(g[:, ::2, ::2, ::2])


def _crop_center(x: np.ndarray, dims) -> tuple[np.ndarray, tuple]:
    offs = tuple((s - d) // 2 for s, d in zip(x.shape[1:], dims))
    sl = (slice(None),) + tuple(slice(o, o + d) for o, d in zip(offs, dims))
    return np.ascontiguousarray(x[sl]), sl


@dataclass
class GeneratorParams:
    """Trainable decoder parameters plus the fixed output geometry."""

    weights: dict[str, np.ndarray]
    seed_size: int
    control_dims: tuple[int, int, int]
    control_spacing: float

    @classmethod
    def init(cls, control_dims, control_spacing: float = 4.0,
             seed: int = 0) -> "GeneratorParams":
        """Zero-displacement initialization: hidden layers random (scaled by
        fan-in), final convolution and gain-bias zero, gain 1 voxel."""
        n_stages = len(CHANNELS) - 1
        cmax = max(control_dims)
        s0 = max(2, int(np.ceil((cmax - 1) / 2**n_stages)) + 1)
        sizes = [s0]
        for _ in range(n_stages):
            sizes.append(2 * sizes[-1] - 1)
        if sizes[-1] < cmax:
            raise ShapeError(f"stage sizes {sizes} cannot cover control dims {control_dims}")
        rng = np.random.default_rng(seed)
        w = {
            "dense_w": rng.standard_normal((CHANNELS[0] * s0**3, 3)) / np.sqrt(3),
            "dense_b": np.zeros(CHANNELS[0] * s0**3),
            "gain": np.array([1.0]),
        }
        for i in range(n_stages):
            ci, co = CHANNELS[i], CHANNELS[i + 1]
            fan_in = ci * 27
            k = rng.standard_normal((co, ci, 3, 3, 3)) / np.sqrt(fan_in)
            if i == n_stages - 1:
                k = np.zeros_like(k)
            w[f"conv{i}_w"] = k
            w[f"conv{i}_b"] = np.zeros(co)
        return cls(w, s0, tuple(control_dims), control_spacing)

    @property
    def n_stages(self) -> int:
        return len(CHANNELS) - 1


def _forward_pass(params: GeneratorParams, z: np.ndarray):
    """Returns (field displacements, cached intermediates for the VJP)."""
    w = params.weights
    s0 = params.seed_size
    pre = w["dense_w"] @ z + w["dense_b"]
    seed = np.tanh(pre).reshape(CHANNELS[0], s0, s0, s0)
    cache = {"z": z, "seed": seed}
    h = seed
    for i in range(params.n_stages):
        up = _upsample(h)
        out = np.empty((CHANNELS[i + 1], *up.shape[1:]))
        _conv3d(up, w[f"conv{i}_w"], w[f"conv{i}_b"], out)
        cache[f"up{i}"] = up
        cache[f"lin{i}"] = out
        h = out if i == params.n_stages - 1 else np.tanh(out)
        cache[f"act{i}"] = h
    cropped, sl = _crop_center(h, params.control_dims)
    cache["crop_sl"] = sl
    cache["cropped"] = cropped
    disp = float(w["gain"][0]) * cropped
    return disp, cache


def generate(params: GeneratorParams, z: np.ndarray) -> DeformationField:
    """Deterministic displacement field for a latent 3-vector."""
    z = np.asarray(z, dtype=np.float64).reshape(3)
    if not np.isfinite(z).all():
        raise ValueError("latent vector contains non-finite values")
    disp, _ = _forward_pass(params, z)
    return DeformationField(disp, params.control_spacing)


def generate_vjp(params: GeneratorParams, z: np.ndarray, cotangent: np.ndarray
                 ) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Reverse-mode gradients of generate w.r.t. parameters and latent input.

    cotangent has the field shape (3, cx, cy, cz).
    """
    z = np.asarray(z, dtype=np.float64).reshape(3)
    if cotangent.shape != (3, *params.control_dims):
        raise ShapeError(f"cotangent shape {cotangent.shape} != field "
                         f"(3, {params.control_dims})")
    disp, cache = _forward_pass(params, z)
    w = params.weights
    grads: dict[str, np.ndarray] = {}

    grads["gain"] = np.array([np.sum(cotangent * cache["cropped"])])
    g = float(w["gain"][0]) * cotangent
    # undo the crop
    g_full = np.zeros_like(cache[f"act{params.n_stages - 1}"])
    g_full[cache["crop_sl"]] = g
    g = g_full

    for i in reversed(range(params.n_stages)):
        if i < params.n_stages - 1:
            pass  # handled below via act derivative of stage i when reached
        lin = cache[f"lin{i}"]
        if i == params.n_stages - 1:
            g_lin = g
        else:
            g_lin = g * (1.0 - cache[f"act{i}"] ** 2)
        up = cache[f"up{i}"]
        gw = np.empty_like(w[f"conv{i}_w"])
        _conv3d_vjp_w(up, g_lin, gw)
        grads[f"conv{i}_w"] = gw
        grads[f"conv{i}_b"] = g_lin.sum(axis=(1, 2, 3))
        gx = np.empty_like(up)
        _conv3d_vjp_x(g_lin, w[f"conv{i}_w"], gx)
        g = _upsample_vjp(gx)
        del lin

    g_seed = g * (1.0 - cache["seed"] ** 2)
    gs = g_seed.ravel()
    grads["dense_w"] = np.outer(gs, cache["z"])
    grads["dense_b"] = gs
    g_z = w["dense_w"].T @ gs
    return grads, g_z
