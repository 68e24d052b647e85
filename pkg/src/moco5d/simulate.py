"""Synthetic test bed: kooshball trajectory, deforming phantom, acquisition.

The phantom is a torso ellipsoid containing a contracting heart ellipsoid,
optionally wrapped in a bright static fat shell.  Cardiac motion scales the
heart semi-axes by 1 - a*(1 - cos(2*pi*phase))/2; respiration translates
the whole volume along the SI (z) axis by d*sin(2*pi*phase).  Both motions
have exact displacement fields, so every reconstruction result can be
scored against analytic truth.

Frame timing follows the acquisition framing: one frame = spokes_per_frame
radial spokes = frame_seconds of scan time, with phases evaluated at the
frame center.  The SI navigator is the ideal 1D projection of the current
volume onto z, once per frame.  Noise is complex white Gaussian with
standard deviation noise_sigma per real component, generated by a
counter-based stream keyed on (seed, frame) so frame order or parallelism
cannot change the data.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import erf

from .io import KTDataset
from .nufft import CoilMaps, Trajectory, make_plan, nufft_forward
from .volume import ComplexVolume

GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))
RESP_BAND_HZ = (0.05, 0.7)


@dataclass
class PhantomSpec:
    """Geometry, motion rates, and noise level of the synthetic phantom."""

    torso_center_mm: tuple[float, float, float] = (0.0, 0.0, 0.0)
    torso_axes_mm: tuple[float, float, float] = (80.0, 92.0, 85.0)
    torso_intensity: float = 1.0
    heart_center_mm: tuple[float, float, float] = (22.0, -14.0, 6.0)
    heart_axes_mm: tuple[float, float, float] = (26.0, 30.0, 28.0)
    heart_intensity: float = 1.6
    fat_enabled: bool = True
    fat_thickness_mm: float = 9.0
    fat_intensity: float = 1.9
    cardiac_rate_hz: float = 1.2
    resp_rate_hz: float = 0.25
    cardiac_contraction: float = 0.2
    resp_amp_mm: float = 6.0
    noise_sigma: float = 0.0
    edge_mm: float = 4.0

    def __post_init__(self):
        lo, hi = RESP_BAND_HZ
        if not lo < self.resp_rate_hz < hi:
            raise ValueError(f"resp_rate_hz must lie inside {RESP_BAND_HZ}")
        if lo < self.cardiac_rate_hz < hi:
            raise ValueError(f"cardiac_rate_hz must lie outside {RESP_BAND_HZ}")
        if self.cardiac_contraction < 0 or self.resp_amp_mm < 0:
            raise ValueError("motion amplitudes must be nonnegative")
        if not 0 <= self.cardiac_contraction < 1:
            raise ValueError("cardiac_contraction must be in [0, 1)")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "PhantomSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown phantom fields: {sorted(unknown)}")
        obj = {k: tuple(v) if isinstance(v, list) else v for k, v in obj.items()}
        return cls(**obj)

    @classmethod
    def from_file(cls, path) -> "PhantomSpec":
        from pathlib import Path

        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class NavigatorMatrix:
    """SI projection readouts: Y is (nav_samples, T)."""

    Y: np.ndarray
    sample_spacing_mm: float
    frame_times: np.ndarray

    def __post_init__(self):
        if self.Y.shape[1] != self.frame_times.shape[0]:
            raise ValueError("navigator columns must match frame count")


# ---------------------------------------------------------------------------
# trajectory

def kooshball_trajectory(n_spokes_total: int, samples_per_spoke: int,
                         spokes_per_frame: int = 22) -> Trajectory:
    """Spiral-phyllotaxis kooshball: radial spokes through k=0, grouped into
    frames of consecutive spokes, golden-angle rotation between interleaves.

    Spoke m of interleave j reads pattern index m * n_interleaves + j, so
    each interleave sweeps pole-to-equator along a spiral arm and successive
    interleaves are rotated by one golden angle.
    """
    if n_spokes_total % spokes_per_frame:
        raise ValueError(
            f"n_spokes_total={n_spokes_total} not divisible by spokes_per_frame={spokes_per_frame}")
    n_int = n_spokes_total // spokes_per_frame
    p = np.empty(n_spokes_total, dtype=np.int64)
    for j in range(n_int):
        p[j * spokes_per_frame:(j + 1) * spokes_per_frame] = (
            np.arange(spokes_per_frame) * n_int + j)
    theta = 0.5 * np.pi * np.sqrt(p / n_spokes_total)
    phi = p * GOLDEN_ANGLE
    dirs = np.stack([np.sin(theta) * np.cos(phi),
                     np.sin(theta) * np.sin(phi),
                     np.cos(theta)], axis=1)

    s = np.arange(samples_per_spoke)
    kr = (s - samples_per_spoke // 2) / samples_per_spoke  # in [-0.5, 0.5)
    k = dirs[:, None, :] * kr[None, :, None]               # (spokes, S, 3)
    frames = k.reshape(n_int, spokes_per_frame * samples_per_spoke, 3)

    dens = kr**2
    dens = dens / dens.max()
    density = np.tile(dens, (n_int, spokes_per_frame)).reshape(
        n_int, spokes_per_frame * samples_per_spoke)
    return Trajectory(frames, density, spokes_per_frame, samples_per_spoke)


# ---------------------------------------------------------------------------
# phantom rendering

def _grid_mm(dims, spacing):
    coords = [(np.arange(n) - n // 2) * spacing for n in dims]
    return np.meshgrid(*coords, indexing="ij")


def _ellipsoid_profile(X, Y, Z, center, axes, edge_mm):
    rho = np.sqrt(((X - center[0]) / axes[0]) ** 2
                  + ((Y - center[1]) / axes[1]) ** 2
                  + ((Z - center[2]) / axes[2]) ** 2)
    abar = float(np.prod(axes)) ** (1.0 / 3.0)
    return 0.5 * (1.0 + erf((1.0 - rho) * abar / edge_mm))


def _motion_state(spec: PhantomSpec, cardiac_phase: float, resp_phase: float):
    gamma = 1.0 - spec.cardiac_contraction * (1.0 - np.cos(2 * np.pi * cardiac_phase)) / 2.0
    shift_mm = spec.resp_amp_mm * np.sin(2 * np.pi * resp_phase)
    return gamma, shift_mm


def phantom_volume(spec: PhantomSpec, dims, spacing: float,
                   cardiac_phase: float, resp_phase: float
                   ) -> tuple[ComplexVolume, np.ndarray]:
    """Render the phantom and its exact pull-back displacement field.

    Returns (volume, u) with u of shape (3, nx, ny, nz) in voxel units such
    that warping phantom(0, 0) by u reproduces this volume (up to the
    smooth-edge rendering tolerance).
    """
    if not (0 <= cardiac_phase < 1 and 0 <= resp_phase < 1):
        raise ValueError("phases must lie in [0, 1)")
    X, Y, Z = _grid_mm(dims, spacing)
    gamma, shift = _motion_state(spec, cardiac_phase, resp_phase)
    tc = np.asarray(spec.torso_center_mm) + [0.0, 0.0, shift]
    hc = np.asarray(spec.heart_center_mm) + [0.0, 0.0, shift]

    s_torso = _ellipsoid_profile(X, Y, Z, tc, spec.torso_axes_mm, spec.edge_mm)
    s_heart = _ellipsoid_profile(X, Y, Z, hc,
                                 gamma * np.asarray(spec.heart_axes_mm), spec.edge_mm)
    v = spec.torso_intensity * s_torso + (spec.heart_intensity - spec.torso_intensity) * s_heart
    if spec.fat_enabled:
        outer = np.asarray(spec.torso_axes_mm) + spec.fat_thickness_mm
        s_outer = _ellipsoid_profile(X, Y, Z, tc, outer, spec.edge_mm)
        v = v + spec.fat_intensity * (s_outer - s_torso)

    u = truth_displacement(spec, dims, spacing, cardiac_phase, resp_phase)
    return ComplexVolume(v.astype(np.complex128), spacing), u


def truth_displacement(spec: PhantomSpec, dims, spacing: float,
                       cardiac_phase: float, resp_phase: float) -> np.ndarray:
    """Exact pull-back displacement (voxel units) for the given phases.

    u(r) = -shift + h(r) * (1/gamma - 1) * (r - shift - heart_center), with
    h a smooth bump that is 1 across the (contracted) heart and decays to 0
    inside the constant-intensity torso interior, so warping the reference
    with u reproduces the moving phantom away from rendering tolerance.
    """
    X, Y, Z = _grid_mm(dims, spacing)
    gamma, shift = _motion_state(spec, cardiac_phase, resp_phase)
    hc = np.asarray(spec.heart_center_mm) + [0.0, 0.0, shift]
    rho = np.sqrt(((X - hc[0]) / (gamma * spec.heart_axes_mm[0])) ** 2
                  + ((Y - hc[1]) / (gamma * spec.heart_axes_mm[1])) ** 2
                  + ((Z - hc[2]) / (gamma * spec.heart_axes_mm[2])) ** 2)
    h = 0.5 * (1.0 + erf((1.25 - rho) * 6.0))
    scale = (1.0 / gamma - 1.0)
    u = np.stack([
        h * scale * (X - hc[0]),
        h * scale * (Y - hc[1]),
        h * scale * (Z - hc[2]) - shift,
    ])
    return u / spacing


def si_projection(vol: ComplexVolume) -> np.ndarray:
    """Ideal SI navigator readout: magnitude of the complex xy-sum per z."""
    return np.abs(vol.data.sum(axis=(0, 1)))


# ---------------------------------------------------------------------------
# coil maps

def make_coil_maps(dims, spacing: float, ncoils: int = 8,
                   ring_radius_mm: float = 110.0, width_mm: float = 95.0) -> CoilMaps:
    """Gaussian-lobed surface coils on a ring around the torso, with smooth
    per-coil phase ramps; RSS-normalized to peak 1."""
    X, Y, Z = _grid_mm(dims, spacing)
    maps = np.empty((ncoils, *dims), dtype=np.complex128)
    for c in range(ncoils):
        ang = 2 * np.pi * c / ncoils
        px, py = ring_radius_mm * np.cos(ang), ring_radius_mm * np.sin(ang)
        pz = 25.0 if c % 2 else -25.0
        r2 = (X - px) ** 2 + (Y - py) ** 2 + (Z - pz) ** 2
        mag = np.exp(-r2 / (2 * width_mm**2))
        ramp = 2 * np.pi * 1e-3 * (np.cos(ang) * Y - np.sin(ang) * X + 0.3 * Z)
        maps[c] = mag * np.exp(1j * ramp)
    rss = np.sqrt(np.sum(np.abs(maps) ** 2, axis=0))
    maps /= rss.max() * (1 + 1e-12)
    return CoilMaps(maps, spacing)


# ---------------------------------------------------------------------------
# acquisition

def _frame_noise(seed: int, frame: int, shape, sigma: float) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(key=(np.uint64(seed) << np.uint64(32))
                                               + np.uint64(frame)))
    return sigma * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def simulate_acquisition(spec: PhantomSpec, traj: Trajectory, dims, spacing: float,
                         coil_count: int = 8, seed: int = 0,
                         frame_seconds: float = 0.088,
                         kspace: bool = True, workers: int = 1,
                         maps: CoilMaps | None = None) -> KTDataset:
    """Run the forward model over every frame of the trajectory.

    Set kspace=False to synthesize only navigators and truth phases (cheap
    path for latent-space experiments).
    """
    T = traj.n_frames
    ns = traj.samples_per_frame
    if maps is None:
        maps = make_coil_maps(dims, spacing, coil_count)
    times = (np.arange(T) + 0.5) * frame_seconds
    phases = np.stack([np.mod(spec.cardiac_rate_hz * times, 1.0),
                       np.mod(spec.resp_rate_hz * times, 1.0)], axis=1)

    nav = np.empty((dims[2], T))
    ks = np.zeros((T, maps.ncoils, ns), dtype=np.complex128) if kspace else \
        np.zeros((T, maps.ncoils, 0), dtype=np.complex128)
    for t in range(T):
        vol, _ = phantom_volume(spec, dims, spacing, phases[t, 0], phases[t, 1])
        nav[:, t] = si_projection(vol)
        if kspace:
            plan = make_plan(traj.frames[t], dims)
            ks[t] = nufft_forward(vol.data, maps.maps, traj.frames[t],
                                  plan, workers=workers)
            if spec.noise_sigma > 0:
                ks[t] += _frame_noise(seed, t, (maps.ncoils, ns), spec.noise_sigma)

    return KTDataset(
        traj=traj, kspace=ks, navigators=nav, coilmaps=maps,
        frame_seconds=frame_seconds, nav_spacing_mm=spacing,
        meta={"seed": seed, "kspace": kspace},
        truth_phases=phases, phantom_spec_json=spec.to_json(),
    )
