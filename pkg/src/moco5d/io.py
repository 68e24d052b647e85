"""File containers: volumes, k-t datasets, parameter checkpoints, reports.

Volume container: a pair of files <base>.vjson / <base>.vbin.  The JSON
header holds {dims, spacing, dtype, order, version}; the blob is the raw
little-endian array in row-major order.  dtype is one of "c64", "c128",
"f64".  Core math always runs in double precision; "c64" exists only as a
storage option.

A KTDataset directory bundles meta.json, traj.bin, kspace.bin,
navigators.bin, coilmaps.vjson/.vbin and an optional truth/ subdirectory
(ground-truth phases and the phantom description; per-frame truth fields
are materialized on demand from these, not stored densely).

All writes go through an atomic write-temp-then-rename.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nufft import CoilMaps, Trajectory
from .volume import ComplexVolume

CONTAINER_VERSION = 1
REPORT_VERSION = 1

_DTYPES = {"c64": np.complex64, "c128": np.complex128, "f64": np.float64}
_DTYPE_NAMES = {np.dtype(np.complex64): "c64", np.dtype(np.complex128): "c128",
                np.dtype(np.float64): "f64"}


def atomic_write_bytes(path: Path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_json(path: Path, obj):
    atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def write_volume(base: str | Path, vol: ComplexVolume, dtype: str = "c128"):
    """Write <base>.vjson + <base>.vbin."""
    base = Path(base)
    header = {
        "version": CONTAINER_VERSION,
        "dims": list(vol.dims),
        "spacing": vol.spacing,
        "dtype": dtype,
        "order": "row-major",
    }
    data = np.ascontiguousarray(vol.data.astype(_DTYPES[dtype]))
    atomic_write_json(base.with_suffix(".vjson"), header)
    atomic_write_bytes(base.with_suffix(".vbin"), data.tobytes())


def read_volume(base: str | Path) -> ComplexVolume:
    base = Path(base)
    header = json.loads(base.with_suffix(".vjson").read_text())
    if header["version"] != CONTAINER_VERSION:
        raise ValueError(f"unsupported container version {header['version']}")
    dt = _DTYPES[header["dtype"]]
    raw = np.frombuffer(base.with_suffix(".vbin").read_bytes(), dtype=dt)
    data = raw.reshape(header["dims"]).astype(np.complex128)
    return ComplexVolume(data, header["spacing"])


def _write_array(path: Path, a: np.ndarray):
    atomic_write_bytes(path, np.ascontiguousarray(a).tobytes())


def _read_array(path: Path, dtype, shape) -> np.ndarray:
    raw = np.frombuffer(Path(path).read_bytes(), dtype=dtype)
    return raw.reshape(shape).copy()


@dataclass
class KTDataset:
    """One acquisition: trajectory, k-space, navigators, coil maps, truth."""

    traj: Trajectory
    kspace: np.ndarray            # (T, ncoils, ns) complex128
    navigators: np.ndarray        # (nav_samples, T) float64
    coilmaps: CoilMaps
    frame_seconds: float
    nav_spacing_mm: float
    meta: dict = field(default_factory=dict)
    truth_phases: np.ndarray | None = None   # (T, 2) cardiac, resp in [0, 1)
    phantom_spec_json: dict | None = None

    @property
    def n_frames(self) -> int:
        return self.kspace.shape[0]

    @property
    def frame_times(self) -> np.ndarray:
        return (np.arange(self.n_frames) + 0.5) * self.frame_seconds

    def save(self, directory: str | Path):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        T, nc, ns = self.kspace.shape
        meta = {
            "version": CONTAINER_VERSION,
            "frames": T,
            "ncoils": nc,
            "samples_per_frame": ns,
            "spokes_per_frame": self.traj.spokes_per_frame,
            "samples_per_spoke": self.traj.samples_per_spoke,
            "frame_seconds": self.frame_seconds,
            "nav_samples": int(self.navigators.shape[0]),
            "nav_spacing_mm": self.nav_spacing_mm,
            "grid_dims": list(self.coilmaps.dims),
            "spacing_mm": self.coilmaps.spacing,
            "has_density": self.traj.density is not None,
            "extra": self.meta,
        }
        atomic_write_json(d / "meta.json", meta)
        _write_array(d / "traj.bin", self.traj.frames)
        if self.traj.density is not None:
            _write_array(d / "density.bin", self.traj.density)
        _write_array(d / "kspace.bin", self.kspace)
        _write_array(d / "navigators.bin", self.navigators)
        cm = self.coilmaps
        header = {"version": CONTAINER_VERSION, "dims": [cm.ncoils, *cm.dims],
                  "spacing": cm.spacing, "dtype": "c128", "order": "row-major"}
        atomic_write_json(d / "coilmaps.vjson", header)
        atomic_write_bytes(d / "coilmaps.vbin", np.ascontiguousarray(cm.maps).tobytes())
        if self.truth_phases is not None:
            t = d / "truth"
            t.mkdir(exist_ok=True)
            _write_array(t / "phases.bin", np.ascontiguousarray(self.truth_phases))
            if self.phantom_spec_json is not None:
                atomic_write_json(t / "phantom_spec.json", self.phantom_spec_json)

    @classmethod
    def load(cls, directory: str | Path) -> "KTDataset":
        d = Path(directory)
        if not (d / "meta.json").exists():
            raise FileNotFoundError(f"no dataset at {d} (missing {d / 'meta.json'})")
        meta = json.loads((d / "meta.json").read_text())
        if meta["version"] != CONTAINER_VERSION:
            raise ValueError(f"unsupported dataset version {meta['version']}")
        T, nc, ns = meta["frames"], meta["ncoils"], meta["samples_per_frame"]
        frames = _read_array(d / "traj.bin", np.float64, (T, ns, 3))
        density = None
        if meta["has_density"]:
            density = _read_array(d / "density.bin", np.float64, (T, ns))
        traj = Trajectory(frames, density, meta["spokes_per_frame"],
                          meta["samples_per_spoke"])
        kspace = _read_array(d / "kspace.bin", np.complex128, (T, nc, ns))
        nav = _read_array(d / "navigators.bin", np.float64, (meta["nav_samples"], T))
        header = json.loads((d / "coilmaps.vjson").read_text())
        maps = _read_array(d / "coilmaps.vbin", np.complex128, header["dims"])
        cm = CoilMaps(maps, header["spacing"])
        truth = None
        spec_json = None
        if (d / "truth" / "phases.bin").exists():
            truth = _read_array(d / "truth" / "phases.bin", np.float64, (T, 2))
            sp = d / "truth" / "phantom_spec.json"
            spec_json = json.loads(sp.read_text()) if sp.exists() else None
        return cls(traj, kspace, nav, cm, meta["frame_seconds"],
                   meta["nav_spacing_mm"], meta.get("extra", {}), truth, spec_json)


# ---------------------------------------------------------------------------
# parameter checkpoints: JSON manifest + one binary blob

def save_params(base: str | Path, params: dict[str, np.ndarray], extra: dict | None = None):
    base = Path(base)
    manifest = {"version": CONTAINER_VERSION, "arrays": {}, "extra": extra or {}}
    blob = bytearray()
    offset = 0
    for name in sorted(params):
        a = np.ascontiguousarray(params[name])
        dt = "c128" if np.iscomplexobj(a) else "f64"
        a = a.astype(_DTYPES[dt])
        manifest["arrays"][name] = {"dtype": dt, "shape": list(a.shape), "offset": offset}
        b = a.tobytes()
        blob.extend(b)
        offset += len(b)
    atomic_write_json(base.with_suffix(".json"), manifest)
    atomic_write_bytes(base.with_suffix(".bin"), bytes(blob))


def load_params(base: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    base = Path(base)
    manifest = json.loads(base.with_suffix(".json").read_text())
    if manifest["version"] != CONTAINER_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest['version']}")
    raw = base.with_suffix(".bin").read_bytes()
    params = {}
    for name, info in manifest["arrays"].items():
        dt = np.dtype(_DTYPES[info["dtype"]])
        count = int(np.prod(info["shape"])) if info["shape"] else 1
        a = np.frombuffer(raw, dtype=dt, count=count, offset=info["offset"])
        params[name] = a.reshape(info["shape"]).copy()
    return params, manifest.get("extra", {})


# ---------------------------------------------------------------------------
# pipeline report (versioned, strict schema)

REPORT_KEYS = {
    "version", "seed", "config", "compression", "latent", "clusters",
    "moco", "baseline", "benchmark", "criteria",
}


def save_report(path: str | Path, report: dict):
    unknown = set(report) - REPORT_KEYS
    if unknown:
        raise ValueError(f"unknown report fields: {sorted(unknown)}")
    report = dict(report)
    report["version"] = REPORT_VERSION
    atomic_write_json(Path(path), report)


def load_report(path: str | Path) -> dict:
    report = json.loads(Path(path).read_text())
    if report.get("version") != REPORT_VERSION:
        raise ValueError(f"unsupported report version {report.get('version')}")
    unknown = set(report) - REPORT_KEYS
    if unknown:
        raise ValueError(f"unknown report fields: {sorted(unknown)}")
    return report
