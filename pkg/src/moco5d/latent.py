"""Navigator preprocessing and the band-constrained auto-encoder.

The encoder maps each navigator column to a 3-vector latent code: channel 0
is cardiac, channels 1-2 respiratory.  Disentanglement comes from the
penalty term: each channel is convolved with a filter that removes its own
assigned band, and the surviving (out-of-band) energy is penalized, so the
respiratory channels are pushed into 0.05-0.7 Hz and the cardiac channel
out of it.

The reconstruction loss is an l1 norm of the temporal DFT of the residual
(smoothed as sqrt(x^2 + eps^2) for differentiability), taken over the whole
record; training therefore runs full-record gradient steps by default, with
an optional random contiguous window for stochastic updates.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import convolve1d
from scipy.signal import firwin, kaiserord

from ._optim import Adam, DivergenceError

logger = logging.getLogger(__name__)

SMOOTH_L1_EPS = 1e-8
RESP_BAND_HZ = (0.05, 0.7)
CHANNEL_ROLES = ("cardiac", "resp1", "resp2")


# ---------------------------------------------------------------------------
# filters

@dataclass(frozen=True)
class BandStopFilter:
    """Linear-phase FIR whose stop region is either the band itself
    (mode="stop") or everything outside it (mode="pass", i.e. band-pass).

    The Kaiser design places both transition skirts outside the declared
    stop region, so attenuation is >= 40 dB across the entire stop region
    and the passband sits beyond one transition width from its edges.
    """

    taps: np.ndarray
    band_hz: tuple[float, float]
    fs_hz: float
    mode: str = "stop"

    def response(self, freqs_hz: np.ndarray) -> np.ndarray:
        w = 2 * np.pi * freqs_hz / self.fs_hz
        n = np.arange(len(self.taps))
        return np.abs(np.exp(-1j * np.outer(w, n)) @ self.taps)

    def stop_region(self):
        lo, hi = self.band_hz
        if self.mode == "stop":
            return [(lo, hi)]
        return [(0.0, lo), (hi, self.fs_hz / 2)]

    def pass_region(self, margin: float | None = None):
        lo, hi = self.band_hz
        m = self.transition_hz if margin is None else margin
        if self.mode == "stop":
            return [(0.0, max(lo - m, 0.0)), (hi + m, self.fs_hz / 2)]
        return [(lo + m, hi - m)]

    @property
    def transition_hz(self) -> float:
        return 0.03 * self.fs_hz / 11.3636  # scales with the design below


def design_band_filter(band_hz, fs_hz: float, mode: str = "stop",
                       atten_db: float = 60.0) -> BandStopFilter:
    """Kaiser-window FIR with its transition bands outside the stop region."""
    lo, hi = band_hz
    width = 0.03 * fs_hz / 11.3636
    numtaps, beta = kaiserord(atten_db, width / (fs_hz / 2))
    numtaps |= 1  # odd length, symmetric, zero phase when center-aligned
    if mode == "stop":
        cutoff = [max(lo - width / 2, width / 4), hi + width / 2]
        taps = firwin(numtaps, cutoff, window=("kaiser", beta),
                      fs=fs_hz, pass_zero="bandstop")
    elif mode == "pass":
        cutoff = [lo + width / 2, hi - width / 2]
        taps = firwin(numtaps, cutoff, window=("kaiser", beta),
                      fs=fs_hz, pass_zero="bandpass")
    else:
        raise ValueError(f"mode must be 'stop' or 'pass', got {mode!r}")
    return BandStopFilter(taps, (lo, hi), fs_hz, mode)


def channel_filters(fs_hz: float, resp_band=RESP_BAND_HZ) -> list[BandStopFilter]:
    """Penalty filters per latent channel: cardiac keeps only out-of-band
    leakage (band-pass on the respiratory band), respiratory channels keep
    only their out-of-band leakage (band-stop)."""
    resp = design_band_filter(resp_band, fs_hz, "stop")
    cardiac = design_band_filter(resp_band, fs_hz, "pass")
    return [cardiac, resp, resp]


# ---------------------------------------------------------------------------
# preprocessing

def preprocess_navigators(Y_raw: np.ndarray, fs_hz: float,
                          lp_cutoff_hz: float = 2.8, cheb_degree: int = 8
                          ) -> tuple[np.ndarray, np.ndarray]:
    """Low-pass, polynomial detrend, and standardize navigator rows.

    Per voxel row: zero-phase FIR low-pass at lp_cutoff_hz, subtraction of a
    fitted degree-`cheb_degree` Chebyshev polynomial (drift removal), then
    zero-mean unit-variance scaling.  The polynomial is removed both before
    and after the filter: before, so drifts never meet the filter's edge
    padding (a polynomial row must vanish identically); after, per the
    stated pipeline.  Rows with (near-)zero variance are dropped with a
    warning.  Returns (Y, kept_row_indices).
    """
    Y = np.asarray(Y_raw, dtype=np.float64)
    if Y.ndim != 2:
        raise ValueError("navigators must be (nav_samples, T)")
    T = Y.shape[1]
    if T < 64:
        raise ValueError(f"need at least 64 frames, got {T}")

    x = np.linspace(-1.0, 1.0, T)

    def detrend(a):
        coef = np.polynomial.chebyshev.chebfit(x, a.T, cheb_degree)
        return a - np.polynomial.chebyshev.chebval(x, coef)

    Y = detrend(Y)
    numtaps = min(129, (T // 2) * 2 - 1)
    lp = firwin(numtaps, lp_cutoff_hz, fs=fs_hz)
    Y = convolve1d(Y, lp, axis=1, mode="reflect")  # symmetric taps: zero phase
    Y = detrend(Y)

    std = Y.std(axis=1)
    keep = std > max(1e-12, 1e-8 * std.max())
    dropped = int((~keep).sum())
    if dropped:
        logger.warning("dropping %d zero-variance navigator rows", dropped)
    Y = Y[keep]
    Y = (Y - Y.mean(axis=1, keepdims=True)) / Y.std(axis=1, keepdims=True)
    return Y, np.flatnonzero(keep)


# ---------------------------------------------------------------------------
# auto-encoder

@dataclass
class AutoencoderParams:
    """Fully connected encoder/decoder weights; latent dimension 3."""

    weights: dict[str, np.ndarray]
    nav_dim: int
    hidden: tuple[int, ...] = (64, 32)

    @classmethod
    def init(cls, nav_dim: int, hidden=(64, 32), seed: int = 0) -> "AutoencoderParams":
        rng = np.random.default_rng(seed)
        sizes_enc = (nav_dim, *hidden, 3)
        sizes_dec = (3, *hidden[::-1], nav_dim)
        w = {}
        for tag, sizes in (("enc", sizes_enc), ("dec", sizes_dec)):
            for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
                w[f"{tag}_w{i}"] = rng.standard_normal((b, a)) / np.sqrt(a)
                w[f"{tag}_b{i}"] = np.zeros(b)
        return cls(w, nav_dim, tuple(hidden))

    @property
    def n_layers(self) -> int:
        return len(self.hidden) + 1


def _mlp_forward(w: dict, tag: str, n_layers: int, X: np.ndarray):
    """Hidden layers tanh, final layer linear; returns activations list."""
    acts = [X]
    h = X
    for i in range(n_layers):
        h = w[f"{tag}_w{i}"] @ h + w[f"{tag}_b{i}"][:, None]
        if i < n_layers - 1:
            h = np.tanh(h)
        acts.append(h)
    return acts


def _mlp_backward(w: dict, tag: str, n_layers: int, acts, g_out):
    """Backprop through _mlp_forward; returns (grads, g_input)."""
    grads = {}
    g = g_out
    for i in reversed(range(n_layers)):
        if i < n_layers - 1:
            g = g * (1.0 - acts[i + 1] ** 2)
        grads[f"{tag}_w{i}"] = g @ acts[i].T
        grads[f"{tag}_b{i}"] = g.sum(axis=1)
        g = w[f"{tag}_w{i}"].T @ g
    return grads, g


def encode(params: AutoencoderParams, Y: np.ndarray) -> np.ndarray:
    return _mlp_forward(params.weights, "enc", params.n_layers, Y)[-1]


def decode(params: AutoencoderParams, Z: np.ndarray) -> np.ndarray:
    return _mlp_forward(params.weights, "dec", params.n_layers, Z)[-1]


def _conv_same(x: np.ndarray, taps: np.ndarray) -> np.ndarray:
    full = np.convolve(x, taps, mode="full")
    k0 = (len(taps) - 1) // 2
    return full[k0:k0 + len(x)]


def _conv_same_adjoint(g: np.ndarray, taps: np.ndarray, n: int) -> np.ndarray:
    k0 = (len(taps) - 1) // 2
    gf = np.zeros(n + len(taps) - 1)
    gf[k0:k0 + len(g)] = g
    return np.correlate(gf, taps, mode="valid")


def band_penalty(Z: np.ndarray, filters) -> tuple[float, np.ndarray]:
    """sum_ch ||Z_ch (*) B_ch||^2 and its gradient w.r.t. Z."""
    pen = 0.0
    g = np.zeros_like(Z)
    for ch, filt in enumerate(filters):
        y = _conv_same(Z[ch], filt.taps)
        pen += float(y @ y)
        g[ch] = 2.0 * _conv_same_adjoint(y, filt.taps, Z.shape[1])
    return pen, g


def autoencoder_loss(params: AutoencoderParams, Y: np.ndarray, filters,
                     lam: float) -> tuple[float, dict[str, np.ndarray], dict]:
    """Smoothed l1 of the temporal DFT of the residual plus the band penalty.

    Returns (loss, gradient dict matching params.weights, aux terms).
    """
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    nl = params.n_layers
    w = params.weights
    enc_acts = _mlp_forward(w, "enc", nl, Y)
    Z = enc_acts[-1]
    dec_acts = _mlp_forward(w, "dec", nl, Z)
    R = dec_acts[-1] - Y

    F = np.fft.fft(R, axis=1)
    absF = np.sqrt(F.real**2 + F.imag**2 + SMOOTH_L1_EPS**2)
    recon = float(absF.sum())
    cot_F = F / absF
    # adjoint of the unnormalized row-wise DFT is T * ifft
    g_R = np.fft.ifft(cot_F, axis=1).real * R.shape[1]

    pen, g_Z_pen = (0.0, np.zeros_like(Z)) if lam == 0 else band_penalty(Z, filters)

    grads_dec, g_Z_recon = _mlp_backward(w, "dec", nl, dec_acts, g_R)
    grads_enc, _ = _mlp_backward(w, "enc", nl, enc_acts, g_Z_recon + lam * g_Z_pen)
    grads = {**grads_enc, **grads_dec}
    loss = recon + lam * pen
    return loss, grads, {"recon_l1": recon, "band_penalty": pen, "Z": Z}


@dataclass(frozen=True)
class LatentSeries:
    """3 x T real latent matrix; channel roles cardiac, resp1, resp2."""

    Z: np.ndarray
    frame_times: np.ndarray
    roles: tuple[str, ...] = CHANNEL_ROLES

    def __post_init__(self):
        if self.Z.shape[0] != 3 or self.Z.shape[1] != len(self.frame_times):
            raise ValueError(f"latents must be (3, T), got {self.Z.shape}")
        if not np.isfinite(self.Z).all():
            raise ValueError("latents contain non-finite values")

    def channel(self, role: str) -> np.ndarray:
        return self.Z[self.roles.index(role)]


@dataclass
class LatentTrainConfig:
    lam: float = 1e4
    iters: int = 4000
    lr: float = 1e-3
    seed: int = 0
    hidden: tuple[int, ...] = (64, 32)
    window: int | None = None      # None: full-record steps
    resp_band: tuple[float, float] = RESP_BAND_HZ
    restarts: int = 3              # independent fits; lowest final loss wins
    log_every: int = 500


def _train_once(Y: np.ndarray, fs_hz: float, config: LatentTrainConfig,
                seed: int) -> tuple[AutoencoderParams, dict]:
    T = Y.shape[1]
    params = AutoencoderParams.init(Y.shape[0], config.hidden, seed)
    filters = channel_filters(fs_hz, config.resp_band)
    opt = Adam(params.weights, lr=config.lr)
    rng = np.random.default_rng(seed + 1)
    history = {"loss": [], "recon_l1": [], "band_penalty": []}

    for it in range(config.iters):
        if config.window is not None and config.window < T:
            start = int(rng.integers(0, T - config.window + 1))
            Yb = Y[:, start:start + config.window]
        else:
            Yb = Y
        loss, grads, aux = autoencoder_loss(params, Yb, filters, config.lam)
        if not np.isfinite(loss):
            raise DivergenceError(
                f"auto-encoder loss became non-finite at iter {it}: "
                f"recon={aux['recon_l1']}, penalty={aux['band_penalty']}")
        opt.step(params.weights, grads)
        history["loss"].append(loss)
        history["recon_l1"].append(aux["recon_l1"])
        history["band_penalty"].append(aux["band_penalty"])
        if config.log_every and it % config.log_every == 0:
            logger.info("latent iter %d: loss %.4g (recon %.4g, penalty %.4g)",
                        it, loss, aux["recon_l1"], aux["band_penalty"])
    return params, history


def train_autoencoder(Y: np.ndarray, fs_hz: float, config: LatentTrainConfig,
                      frame_times: np.ndarray | None = None
                      ) -> tuple[AutoencoderParams, LatentSeries, dict]:
    """Fit the auto-encoder on preprocessed navigators.

    Runs `config.restarts` independent fits from derived seeds and keeps the
    one with the lowest final loss: the band-constrained objective has a
    known bad local minimum where the cardiac channel dies (its content is
    never reconstructed), and that minimum is clearly separated in loss.
    Deterministic for a fixed config.
    """
    best = None
    for r in range(max(1, config.restarts)):
        params, history = _train_once(Y, fs_hz, config, config.seed + 1000 * r)
        final = history["loss"][-1]
        logger.info("latent restart %d: final loss %.4g", r, final)
        if best is None or final < best[0]:
            best = (final, params, history)
    _, params, history = best

    Z = encode(params, Y)
    if frame_times is None:
        frame_times = np.arange(Y.shape[1]) / fs_hz
    return params, LatentSeries(Z, frame_times), history
