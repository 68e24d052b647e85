"""Stage orchestration: simulate -> compress -> latents -> recon -> baseline
-> metrics, with every stage re-runnable from its on-disk artifacts.

The metrics stage quantifies the head-to-head on phantom truth: for every
(cardiac, respiratory) bin it picks the member frame whose true motion
state is closest to the bin's mean state, renders the noiseless phantom at
that frame's exact phases, and scores both reconstructions against it over
the heart ROI.  The motion-compensated volume is synthesized at that
frame's latent code; the motion-resolved method is represented by its bin
volume.

report.json carries only deterministic quantities; wall-clock timings go
to timings.json so repeated runs with the same seed are bit-identical.
"""

from __future__ import annotations

import json
import logging
import time
from pathlib import Path

import numpy as np

from .binned import BinnedDataset, bin_frames, tune_lambda, tv_reconstruct
from .config import PipelineConfig
from .io import KTDataset, atomic_write_json, save_params, save_report, write_volume
from .latent import LatentSeries, LatentTrainConfig, preprocess_navigators, train_autoencoder
from .metrics import (
    aligned_phase_corr,
    band_energy_fraction,
    endpoint_error,
    phase_subspace_corr,
    psnr,
)
from .nufft import compress_coils, roi_sphere_mask
from .recon import ReconConfig, ReconResult, reconstruct, synthesize_realtime
from .simulate import (
    PhantomSpec,
    kooshball_trajectory,
    phantom_volume,
    simulate_acquisition,
    truth_displacement,
)
from .volume import field_to_dense
from . import plots

logger = logging.getLogger(__name__)


def stage_simulate(cfg: PipelineConfig, out: Path) -> KTDataset:
    scan = cfg.scan
    traj = kooshball_trajectory(scan.frames * scan.spokes_per_frame,
                                scan.samples_per_spoke, scan.spokes_per_frame)
    ds = simulate_acquisition(cfg.phantom, traj, cfg.grid_dims, cfg.spacing_mm,
                              coil_count=scan.coils, seed=cfg.seed,
                              frame_seconds=scan.frame_seconds,
                              workers=cfg.threads)
    ds.save(out / "dataset")
    ref, _ = phantom_volume(cfg.phantom, cfg.grid_dims, cfg.spacing_mm, 0.0, 0.0)
    write_volume(out / "dataset" / "truth" / "reference", ref)
    return ds


def stage_compress(cfg: PipelineConfig, ds: KTDataset, out: Path
                   ) -> tuple[KTDataset, dict]:
    if not cfg.compression.enabled or ds.coilmaps.ncoils == 1:
        return ds, {"enabled": False, "nvirtual": ds.coilmaps.ncoils,
                    "roi_energy_fraction": 1.0}
    center, radius = cfg.roi_center_radius()
    ks, maps, U, info = compress_coils(ds.kspace, ds.coilmaps, center, radius,
                                       cfg.compression.energy_fraction)
    comp = KTDataset(ds.traj, ks, ds.navigators, maps, ds.frame_seconds,
                     ds.nav_spacing_mm, {**ds.meta, "compressed": True},
                     ds.truth_phases, ds.phantom_spec_json)
    comp.save(out / "dataset_compressed")
    report = {"enabled": True, "nvirtual": info["nvirtual"],
              "roi_energy_fraction": info["roi_energy_fraction"],
              "ncoils_physical": ds.coilmaps.ncoils}
    logger.info("coil compression: %d -> %d channels (ROI fraction %.3f)",
                ds.coilmaps.ncoils, info["nvirtual"], info["roi_energy_fraction"])
    return comp, report


def stage_latents(cfg: PipelineConfig, ds: KTDataset, out: Path
                  ) -> tuple[LatentSeries, dict]:
    fs = 1.0 / ds.frame_seconds
    lc = cfg.latent
    Y, kept = preprocess_navigators(ds.navigators, fs, lc.lp_cutoff_hz,
                                    lc.cheb_degree)
    tc = LatentTrainConfig(lam=lc.lam, iters=lc.iters, lr=lc.lr, seed=cfg.seed,
                           hidden=lc.hidden, resp_band=lc.resp_band,
                           restarts=lc.restarts, log_every=0)
    params, series, history = train_autoencoder(Y, fs, tc, ds.frame_times)
    save_params(out / "autoencoder", params.weights,
                extra={"nav_rows": int(Y.shape[0]), "hidden": list(lc.hidden)})
    series.Z.astype(np.float64).tofile(out / "latents.bin")
    atomic_write_json(out / "latents_meta.json", {
        "shape": list(series.Z.shape), "roles": list(series.roles),
        "frame_seconds": ds.frame_seconds, "resp_band": list(lc.resp_band),
    })
    plots.latent_traces(out / "latent_traces", series.Z, series.frame_times,
                        series.roles)
    report = {
        "final_loss": float(history["loss"][-1]),
        "band_penalty": float(history["band_penalty"][-1]),
        "cardiac_resp_band_fraction": band_energy_fraction(
            series.channel("cardiac"), fs, *lc.resp_band),
        "resp_band_fractions": [
            band_energy_fraction(series.channel(ch), fs, *lc.resp_band)
            for ch in ("resp1", "resp2")],
    }
    if ds.truth_phases is not None:
        pc, pr = ds.truth_phases[:, 0], ds.truth_phases[:, 1]
        report["cardiac_phase_corr"] = aligned_phase_corr(series.channel("cardiac"), pc)
        report["resp_subspace_corr"] = phase_subspace_corr(series.Z[1:3], pr)
    return series, report


def stage_recon(cfg: PipelineConfig, ds: KTDataset, series: LatentSeries,
                out: Path) -> tuple[ReconResult, dict]:
    rc = cfg.recon
    rcfg = ReconConfig(n_clusters=rc.clusters, epochs=rc.epochs,
                       eta_step_scale=rc.eta_step_scale,
                       eta_step_decay=rc.eta_step_decay, theta_lr=rc.theta_lr,
                       theta_warmup_epochs=rc.theta_warmup_epochs,
                       control_spacing=rc.control_spacing,
                       init_cg_iters=rc.init_cg_iters, seed=cfg.seed,
                       workers=cfg.threads,
                       checkpoint_every=rc.checkpoint_every,
                       checkpoint_base=str(out / "recon" / "checkpoint"),
                       log_every=10)
    (out / "recon").mkdir(parents=True, exist_ok=True)
    result = reconstruct(ds, series.Z, rcfg)
    write_volume(out / "recon" / "template", result.eta)
    save_params(out / "recon" / "generator", result.gen.weights,
                extra={"control_dims": list(result.gen.control_dims),
                       "control_spacing": result.gen.control_spacing,
                       "seed_size": result.gen.seed_size})
    np.save(out / "recon" / "centroids.npy", result.centroids)
    np.save(out / "recon" / "assignment.npy", result.assignment)
    plots.loss_curve(out / "recon" / "loss", result.loss_trace)

    n_prof = min(ds.n_frames, 128)
    vols = synthesize_realtime(result, series.Z, range(n_prof))
    profile = np.stack([np.abs(v.data.sum(axis=(0, 1))) for v in vols], axis=1)
    plots.profile_vs_time(out / "recon" / "profile", profile,
                          ds.frame_times[:n_prof])
    report = {
        "clusters": int(result.config.n_clusters),
        "epochs": int(result.config.epochs),
        "final_objective": float(result.loss_trace[-1]),
        "initial_objective": float(result.loss_trace[0]),
    }
    return result, report


def _bin_truth_medoids(binned: BinnedDataset, truth_phases: np.ndarray) -> list[int]:
    """Per bin: the member frame whose true motion state is nearest the bin's
    mean state (deterministic, lowest index on ties)."""
    state = np.stack([-np.cos(2 * np.pi * truth_phases[:, 0]),
                      np.sin(2 * np.pi * truth_phases[:, 1])], axis=1)
    medoids = []
    for members in binned.frames:
        if len(members) == 0:
            medoids.append(-1)
            continue
        s = state[members]
        d = np.sum((s - s.mean(axis=0)) ** 2, axis=1)
        medoids.append(int(members[int(np.argmin(d))]))
    return medoids


def stage_baseline(cfg: PipelineConfig, ds: KTDataset, series: LatentSeries,
                   out: Path) -> tuple[object, BinnedDataset, dict]:
    bc = cfg.baseline
    binned = bin_frames(series.Z, ds.traj.frames, ds.kspace, bc.n_cardiac, bc.n_resp)
    (out / "baseline").mkdir(parents=True, exist_ok=True)
    plots.bin_occupancy(out / "baseline" / "occupancy", binned.occupancy)

    spec = PhantomSpec.from_json(ds.phantom_spec_json) if ds.phantom_spec_json else None
    sweep_table = None
    if bc.lam_tv is None:
        if spec is None or ds.truth_phases is None:
            raise ValueError("lam_tv sweep needs ground truth; set baseline.lam_tv")
        center, radius = cfg.roi_center_radius()
        roi = roi_sphere_mask(cfg.grid_dims, cfg.spacing_mm, center, radius)
        medoids = _bin_truth_medoids(binned, ds.truth_phases)
        truths = {}
        for b, t in enumerate(medoids):
            if t >= 0:
                truths[b] = phantom_volume(spec, cfg.grid_dims, cfg.spacing_mm,
                                           *ds.truth_phases[t])[0].data

        def score(volumes):
            flat = volumes.reshape(binned.n_bins, *cfg.grid_dims)
            vals = [psnr(flat[b], truths[b], roi) for b in truths]
            return float(np.mean(vals))

        lams = np.logspace(bc.sweep_decades[0], bc.sweep_decades[1], 5)
        result, sweep_table = tune_lambda(binned, ds.coilmaps, lams, score,
                                          n_iters=max(bc.iters // 2, 8),
                                          workers=cfg.threads)
        result = tv_reconstruct(binned, ds.coilmaps, result.lam, bc.iters,
                                workers=cfg.threads)
    else:
        result = tv_reconstruct(binned, ds.coilmaps, bc.lam_tv, bc.iters,
                                workers=cfg.threads)

    flat = result.volumes.reshape(binned.n_bins, *cfg.grid_dims)
    for b in range(binned.n_bins):
        write_volume(out / "baseline" / f"bin_{b:02d}",
                     _as_volume(flat[b], cfg.spacing_mm))
    report = {
        "lam_tv": float(result.lam),
        "objective_initial": float(result.objective_trace[0]),
        "objective_final": float(result.objective_trace[-1]),
        "step_halvings": int(result.step_halvings),
        "occupancy": binned.occupancy.tolist(),
    }
    if sweep_table is not None:
        report["sweep"] = [[float(s), float(l)] for s, l in sweep_table]
    return result, binned, report


def _as_volume(data, spacing):
    from .volume import ComplexVolume

    return ComplexVolume(data, spacing)


def stage_metrics(cfg: PipelineConfig, ds: KTDataset, series: LatentSeries,
                  recon_result: ReconResult, tv_result, binned: BinnedDataset,
                  out: Path) -> dict:
    if ds.truth_phases is None or ds.phantom_spec_json is None:
        raise ValueError("metrics stage requires simulator ground truth")
    spec = PhantomSpec.from_json(ds.phantom_spec_json)
    center, radius = cfg.roi_center_radius()
    roi = roi_sphere_mask(cfg.grid_dims, cfg.spacing_mm, center, radius)
    medoids = _bin_truth_medoids(binned, ds.truth_phases)

    truths = {}
    for b, t in enumerate(medoids):
        if t >= 0:
            truths[b] = phantom_volume(spec, cfg.grid_dims, cfg.spacing_mm,
                                       *ds.truth_phases[t])[0]
    peak = max(float(np.abs(v.data).max()) for v in truths.values())

    flat_tv = tv_result.volumes.reshape(binned.n_bins, *cfg.grid_dims)
    rows = []
    for b, t in enumerate(medoids):
        if t < 0:
            continue
        truth = truths[b]
        moco_vol = synthesize_realtime(recon_result, series.Z, [t])[0]
        u_rec = field_to_dense(
            _field_at(recon_result, series.Z, t), cfg.grid_dims)
        u_true = truth_displacement(spec, cfg.grid_dims, cfg.spacing_mm,
                                    *ds.truth_phases[t])
        rows.append({
            "bin": b,
            "frame": t,
            "moco_roi_psnr_db": psnr(moco_vol.data, truth.data, roi, peak),
            "tv_roi_psnr_db": psnr(flat_tv[b], truth.data, roi, peak),
            "moco_full_psnr_db": psnr(moco_vol.data, truth.data, None, peak),
            "tv_full_psnr_db": psnr(flat_tv[b], truth.data, None, peak),
            "field_endpoint_error_vox": endpoint_error(u_rec, u_true, roi),
        })

    moco = np.array([r["moco_roi_psnr_db"] for r in rows])
    tv = np.array([r["tv_roi_psnr_db"] for r in rows])
    summary = {
        "per_bin": rows,
        "moco_mean_roi_psnr_db": float(moco.mean()),
        "tv_mean_roi_psnr_db": float(tv.mean()),
        "mean_gap_db": float(moco.mean() - tv.mean()),
        "moco_worst_roi_psnr_db": float(moco.min()),
        "tv_worst_roi_psnr_db": float(tv.min()),
        "worst_phase_gap_db": float(moco.min() - tv.min()),
        "mean_field_endpoint_error_vox": float(np.mean(
            [r["field_endpoint_error_vox"] for r in rows])),
    }
    atomic_write_json(out / "benchmark.json", summary)
    return summary


def _field_at(result: ReconResult, Z: np.ndarray, t: int):
    from .generator import generate

    return generate(result.gen, result.scale_latents(Z)[:, t])


def run_pipeline(cfg: PipelineConfig, out_dir) -> dict:
    """Execute every stage; returns the report dict written to report.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_json(out / "config.json", cfg.to_json())
    timings = {}
    report = {"seed": cfg.seed, "config": cfg.to_json()}

    t0 = time.time()
    ds = stage_simulate(cfg, out)
    timings["simulate_s"] = time.time() - t0
    logger.info("simulate: %.1fs (%d frames)", timings["simulate_s"], ds.n_frames)

    t0 = time.time()
    ds_c, report["compression"] = stage_compress(cfg, ds, out)
    timings["compress_s"] = time.time() - t0

    t0 = time.time()
    series, report["latent"] = stage_latents(cfg, ds_c, out)
    timings["latents_s"] = time.time() - t0
    logger.info("latents: %.1fs", timings["latents_s"])

    t0 = time.time()
    recon_result, report["moco"] = stage_recon(cfg, ds_c, series, out)
    timings["recon_s"] = time.time() - t0
    logger.info("recon: %.1fs", timings["recon_s"])

    t0 = time.time()
    tv_result, binned, report["baseline"] = stage_baseline(cfg, ds_c, series, out)
    timings["baseline_s"] = time.time() - t0
    logger.info("baseline: %.1fs", timings["baseline_s"])

    t0 = time.time()
    report["benchmark"] = stage_metrics(cfg, ds_c, series, recon_result,
                                        tv_result, binned, out)
    timings["metrics_s"] = time.time() - t0

    report["clusters"] = {"n": int(recon_result.config.n_clusters)}
    save_report(out / "report.json", report)
    atomic_write_json(out / "timings.json", timings)
    logger.info("pipeline done: report at %s", out / "report.json")
    return report
