"""Command-line surface.

Thread count is pinned before numpy loads (BLAS pools read the environment
at import), so heavy imports happen inside main().
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="moco5d",
                                description="Motion-compensated 5D MRI phantom pipeline")
    p.add_argument("--config", type=Path, help="pipeline config JSON")
    p.add_argument("--seed", type=int, help="override config seed")
    p.add_argument("--threads", type=int,
                   default=int(os.environ.get("MOCO5D_THREADS", "0")) or None,
                   help="worker threads (default: config value or MOCO5D_THREADS)")
    p.add_argument("--out", type=Path, default=Path("moco5d_out"),
                   help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name, needs_frames in (("simulate", False), ("latents", False),
                               ("cluster", False), ("recon", False),
                               ("binned-recon", False), ("metrics", False),
                               ("run", False)):
        sub.add_parser(name)
    render = sub.add_parser("render")
    render.add_argument("--frames", default="0:64",
                        help="frame range start:stop[:step]")
    return p


def _load_config(args):
    from .config import PipelineConfig

    if args.config:
        if not args.config.exists():
            raise FileNotFoundError(f"config not found: {args.config}")
        cfg = PipelineConfig.from_file(args.config)
    else:
        cfg = PipelineConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.threads is not None:
        cfg.threads = args.threads
    return cfg


def _load_dataset(out: Path):
    from .io import KTDataset

    comp = out / "dataset_compressed"
    plain = out / "dataset"
    return KTDataset.load(comp if (comp / "meta.json").exists() else plain)


def _load_latents(out: Path):
    import numpy as np

    from .latent import LatentSeries

    meta_path = out / "latents_meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"latents not found: {meta_path}")
    meta = json.loads(meta_path.read_text())
    Z = np.fromfile(out / "latents.bin", dtype=np.float64).reshape(meta["shape"])
    times = (np.arange(Z.shape[1]) + 0.5) * meta["frame_seconds"]
    return LatentSeries(Z, times, tuple(meta["roles"]))


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    threads = args.threads or 1
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(threads))
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)

    from . import pipeline
    from .config import PipelineConfig  # noqa: F401 (import check)

    try:
        cfg = _load_config(args)
        out = args.out
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "run":
            pipeline.run_pipeline(cfg, out)
        elif args.command == "simulate":
            pipeline.stage_simulate(cfg, out)
        elif args.command == "latents":
            ds = _load_dataset(out)
            pipeline.stage_latents(cfg, ds, out)
        elif args.command == "cluster":
            import numpy as np

            from .io import atomic_write_json
            from .recon import cluster_latents

            series = _load_latents(out)
            Zs = (series.Z - series.Z.mean(1, keepdims=True)) \
                / np.maximum(series.Z.std(1, keepdims=True), 1e-12)
            centroids, assign = cluster_latents(Zs, cfg.recon.clusters, cfg.seed)
            atomic_write_json(out / "clusters.json", {
                "centroids": centroids.tolist(),
                "assignment": assign.tolist(),
            })
        elif args.command == "recon":
            ds = _load_dataset(out)
            pipeline.stage_recon(cfg, ds, _load_latents(out), out)
        elif args.command == "binned-recon":
            ds = _load_dataset(out)
            pipeline.stage_baseline(cfg, ds, _load_latents(out), out)
        elif args.command == "metrics":
            ds = _load_dataset(out)
            series = _load_latents(out)
            recon_result, tv_result, binned = _reload_results(cfg, ds, series, out)
            pipeline.stage_metrics(cfg, ds, series, recon_result, tv_result,
                                   binned, out)
        elif args.command == "render":
            _render(cfg, out, args.frames)
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


def _reload_results(cfg, ds, series, out: Path):
    import numpy as np

    from .binned import bin_frames, tv_reconstruct
    from .generator import GeneratorParams
    from .io import load_params, read_volume
    from .recon import ReconConfig, ReconResult

    eta = read_volume(out / "recon" / "template")
    weights, extra = load_params(out / "recon" / "generator")
    gen = GeneratorParams(weights, extra["seed_size"],
                          tuple(extra["control_dims"]), extra["control_spacing"])
    centroids = np.load(out / "recon" / "centroids.npy")
    assignment = np.load(out / "recon" / "assignment.npy")
    z_mean = series.Z.mean(axis=1)
    z_std = np.maximum(series.Z.std(axis=1), 1e-12)
    recon_result = ReconResult(eta, gen, centroids, assignment, z_mean, z_std,
                               np.zeros(1), ReconConfig(n_clusters=len(centroids)))
    binned = bin_frames(series.Z, ds.traj.frames, ds.kspace,
                        cfg.baseline.n_cardiac, cfg.baseline.n_resp)
    lam = cfg.baseline.lam_tv if cfg.baseline.lam_tv is not None else 1e4
    tv_result = tv_reconstruct(binned, ds.coilmaps, lam, cfg.baseline.iters,
                               workers=cfg.threads)
    return recon_result, tv_result, binned


def _render(cfg, out: Path, frames_arg: str):
    import numpy as np

    from . import plots
    from .generator import GeneratorParams
    from .io import load_params, read_volume, write_volume
    from .recon import ReconConfig, ReconResult, synthesize_realtime

    ds = _load_dataset(out)
    series = _load_latents(out)
    eta = read_volume(out / "recon" / "template")
    weights, extra = load_params(out / "recon" / "generator")
    gen = GeneratorParams(weights, extra["seed_size"],
                          tuple(extra["control_dims"]), extra["control_spacing"])
    z_mean = series.Z.mean(axis=1)
    z_std = np.maximum(series.Z.std(axis=1), 1e-12)
    result = ReconResult(eta, gen, np.zeros((1, 3)), np.zeros(1, dtype=int),
                         z_mean, z_std, np.zeros(1), ReconConfig(n_clusters=1))

    parts = [int(x) for x in frames_arg.split(":")]
    sl = slice(*parts) if len(parts) > 1 else slice(parts[0], parts[0] + 1)
    idx = list(range(*sl.indices(ds.n_frames)))
    vols = synthesize_realtime(result, series.Z, idx)
    (out / "render").mkdir(exist_ok=True)
    for t, v in zip(idx, vols):
        write_volume(out / "render" / f"frame_{t:05d}", v)
    profile = np.stack([np.abs(v.data.sum(axis=(0, 1))) for v in vols], axis=1)
    plots.profile_vs_time(out / "render" / "profile", profile,
                          ds.frame_times[idx])


if __name__ == "__main__":
    raise SystemExit(main())
