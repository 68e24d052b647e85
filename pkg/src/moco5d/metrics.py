"""Quantitative scores against phantom ground truth."""

from __future__ import annotations

import numpy as np

PSNR_CAP_DB = 120.0


def psnr(recon: np.ndarray, truth: np.ndarray, roi: np.ndarray | None = None,
         peak: float | None = None) -> float:
    """Peak SNR of |recon| against |truth|, over an optional boolean ROI.

    Complex inputs are compared by magnitude (reconstructions carry an
    arbitrary residual phase).  Identical inputs return the documented cap.
    """
    if recon.shape != truth.shape:
        raise ValueError(f"shape mismatch {recon.shape} vs {truth.shape}")
    a = np.abs(recon)
    b = np.abs(truth)
    if roi is not None:
        a, b = a[roi], b[roi]
    if peak is None:
        peak = float(b.max())
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 20.0 * np.log10(peak / np.sqrt(mse)))


def aligned_phase_corr(signal: np.ndarray, phase: np.ndarray) -> float:
    """Best |correlation| of a signal with cos(2 pi phase + psi) over psi.

    Computed as the multiple correlation of the signal regressed on the
    (cos, sin) pair, which is exactly the phase-aligned correlation.
    """
    s = np.asarray(signal, dtype=np.float64)
    s = s - s.mean()
    c = np.cos(2 * np.pi * phase)
    si = np.sin(2 * np.pi * phase)
    X = np.stack([c - c.mean(), si - si.mean()], axis=1)
    beta, *_ = np.linalg.lstsq(X, s, rcond=None)
    fit = X @ beta
    denom = float(np.linalg.norm(s))
    if denom == 0:
        return 0.0
    return float(np.linalg.norm(fit) / denom)


def phase_subspace_corr(Z: np.ndarray, phase: np.ndarray) -> float:
    """First canonical correlation between latent channels (rows of Z) and
    the (cos, sin) pair of a phase signal.

    For a channel group that jointly encodes one physiological motion, any
    rotation within the group is an equally valid code; the canonical
    correlation scores the group as a subspace.
    """
    X = Z.T - Z.T.mean(axis=0)
    Y = np.stack([np.cos(2 * np.pi * phase), np.sin(2 * np.pi * phase)], axis=1)
    Y = Y - Y.mean(axis=0)
    qx, _ = np.linalg.qr(X)
    qy, _ = np.linalg.qr(Y)
    s = np.linalg.svd(qx.T @ qy, compute_uv=False)
    return float(s[0])


def band_energy_fraction(x: np.ndarray, fs_hz: float, lo_hz: float, hi_hz: float) -> float:
    """Fraction of (DC-excluded) spectral energy inside [lo, hi] Hz."""
    x = np.asarray(x, dtype=np.float64)
    x = x - x.mean()
    F = np.abs(np.fft.rfft(x)) ** 2
    freqs = np.fft.rfftfreq(len(x), d=1.0 / fs_hz)
    total = F[1:].sum()
    if total == 0:
        return 0.0
    band = F[(freqs >= lo_hz) & (freqs <= hi_hz)].sum()
    return float(band / total)


def endpoint_error(u_recon: np.ndarray, u_truth: np.ndarray,
                   roi: np.ndarray | None = None) -> float:
    """Mean Euclidean displacement error, in the fields' own (voxel) units."""
    if u_recon.shape != u_truth.shape:
        raise ValueError(f"field shape mismatch {u_recon.shape} vs {u_truth.shape}")
    d = np.sqrt(np.sum((u_recon - u_truth) ** 2, axis=0))
    if roi is not None:
        d = d[roi]
    return float(d.mean())


def inter_volume_variance(volumes: np.ndarray) -> float:
    """Mean per-voxel variance across a stack of volumes (first axis)."""
    return float(np.mean(np.var(np.abs(volumes), axis=0)))
