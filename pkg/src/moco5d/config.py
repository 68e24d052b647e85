"""Pipeline configuration: one JSON document drives every stage."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .simulate import PhantomSpec


def _from_dict(cls, obj: dict, ctx: str):
    known = {f.name for f in fields(cls)}
    unknown = set(obj) - known
    if unknown:
        raise ValueError(f"unknown {ctx} fields: {sorted(unknown)}")
    return cls(**obj)


@dataclass
class ScanConfig:
    frames: int = 1000
    spokes_per_frame: int = 22
    samples_per_spoke: int = 64
    frame_seconds: float = 0.088
    coils: int = 8

    def __post_init__(self):
        if self.frames < 1 or self.spokes_per_frame < 1 or self.samples_per_spoke < 4:
            raise ValueError("scan geometry out of range")
        if not 0 < self.frame_seconds < 10:
            raise ValueError("frame_seconds out of range")


@dataclass
class CompressionConfig:
    enabled: bool = True
    roi_margin_mm: float = 15.0       # ROI radius = max heart semi-axis + margin
    energy_fraction: float = 0.75

    def __post_init__(self):
        if not 0 < self.energy_fraction <= 1:
            raise ValueError("energy_fraction must be in (0, 1]")


@dataclass
class LatentConfig:
    lam: float = 1e4
    iters: int = 4000
    lr: float = 1e-3
    restarts: int = 3
    hidden: tuple[int, ...] = (64, 32)
    lp_cutoff_hz: float = 2.8
    cheb_degree: int = 8
    resp_band: tuple[float, float] = (0.05, 0.7)

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        self.resp_band = tuple(self.resp_band)
        if self.lam < 0 or self.iters < 1:
            raise ValueError("latent config out of range")


@dataclass
class ReconStageConfig:
    clusters: int = 30
    epochs: int = 120
    eta_step_scale: float = 1.0
    eta_step_decay: float = 0.995
    theta_lr: float = 3e-4
    theta_warmup_epochs: int = 5
    control_spacing: float = 4.0
    init_cg_iters: int = 80
    checkpoint_every: int = 25

    def __post_init__(self):
        if self.clusters < 1 or self.epochs < 1:
            raise ValueError("recon config out of range")


@dataclass
class BaselineConfig:
    n_cardiac: int = 4
    n_resp: int = 4
    lam_tv: float | None = None       # None: 5-point log sweep against truth
    sweep_decades: tuple[float, float] = (2.0, 6.0)
    iters: int = 40

    def __post_init__(self):
        self.sweep_decades = tuple(self.sweep_decades)
        if self.n_cardiac < 1 or self.n_resp < 1:
            raise ValueError("baseline bins out of range")


@dataclass
class PipelineConfig:
    grid_dims: tuple[int, int, int] = (64, 64, 64)
    spacing_mm: float = 3.4
    seed: int = 0
    threads: int = 1
    phantom_path: str | None = None
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    scan: ScanConfig = field(default_factory=ScanConfig)
    compression: CompressionConfig = field(default_factory=CompressionConfig)
    latent: LatentConfig = field(default_factory=LatentConfig)
    recon: ReconStageConfig = field(default_factory=ReconStageConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    metrics_roi_margin_mm: float = 15.0

    def __post_init__(self):
        self.grid_dims = tuple(self.grid_dims)
        if len(self.grid_dims) != 3 or min(self.grid_dims) < 8:
            raise ValueError(f"grid_dims must be 3 axes >= 8, got {self.grid_dims}")
        if not 0 < self.spacing_mm < 100:
            raise ValueError("spacing_mm out of range")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")

    def to_json(self) -> dict:
        d = asdict(self)
        d["phantom"] = self.phantom.to_json()
        return d

    @classmethod
    def from_json(cls, obj: dict, base_dir: Path | None = None) -> "PipelineConfig":
        obj = dict(obj)
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        if obj.get("phantom_path"):
            p = Path(obj["phantom_path"])
            if base_dir is not None and not p.is_absolute():
                p = base_dir / p
            if not p.exists():
                raise FileNotFoundError(f"phantom spec not found: {p}")
            obj["phantom"] = PhantomSpec.from_file(p)
        elif "phantom" in obj and isinstance(obj["phantom"], dict):
            obj["phantom"] = PhantomSpec.from_json(obj["phantom"])
        for key, sub in (("scan", ScanConfig), ("compression", CompressionConfig),
                         ("latent", LatentConfig), ("recon", ReconStageConfig),
                         ("baseline", BaselineConfig)):
            if key in obj and isinstance(obj[key], dict):
                obj[key] = _from_dict(sub, obj[key], key)
        return cls(**obj)

    @classmethod
    def from_file(cls, path) -> "PipelineConfig":
        path = Path(path)
        cfg = cls.from_json(json.loads(path.read_text()), base_dir=path.parent)
        return cfg

    def roi_center_radius(self) -> tuple[tuple, float]:
        c = self.phantom.heart_center_mm
        r = max(self.phantom.heart_axes_mm) + self.compression.roi_margin_mm
        return tuple(c), float(r)
