"""SVG diagnostics with CSV data alongside (no interactive UI)."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def latent_traces(path_base, Z: np.ndarray, times: np.ndarray, roles):
    base = Path(path_base)
    fig, axes = plt.subplots(3, 1, figsize=(10, 6), sharex=True)
    for ch, ax in enumerate(axes):
        ax.plot(times, Z[ch], lw=0.7)
        ax.set_ylabel(roles[ch])
    axes[-1].set_xlabel("time (s)")
    fig.tight_layout()
    fig.savefig(base.with_suffix(".svg"))
    plt.close(fig)
    _write_csv(base.with_suffix(".csv"), ["time_s", *roles],
               [[t, *Z[:, i]] for i, t in enumerate(times)])


def profile_vs_time(path_base, profile: np.ndarray, times: np.ndarray):
    """profile is (nz, T): SI line magnitude per synthesized frame."""
    base = Path(path_base)
    fig, ax = plt.subplots(figsize=(10, 4))
    ax.imshow(profile, aspect="auto", origin="lower", cmap="gray",
              extent=[times[0], times[-1], 0, profile.shape[0]])
    ax.set_xlabel("time (s)")
    ax.set_ylabel("SI position (voxel)")
    fig.tight_layout()
    fig.savefig(base.with_suffix(".svg"))
    plt.close(fig)
    _write_csv(base.with_suffix(".csv"), ["time_s"] + [f"z{i}" for i in range(profile.shape[0])],
               [[t, *profile[:, i]] for i, t in enumerate(times)])


def bin_occupancy(path_base, occupancy: np.ndarray):
    base = Path(path_base)
    fig, ax = plt.subplots(figsize=(4, 4))
    im = ax.imshow(occupancy, cmap="viridis")
    for (i, j), v in np.ndenumerate(occupancy):
        ax.text(j, i, str(int(v)), ha="center", va="center", color="white")
    ax.set_xlabel("respiratory bin")
    ax.set_ylabel("cardiac bin")
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(base.with_suffix(".svg"))
    plt.close(fig)
    _write_csv(base.with_suffix(".csv"), ["cardiac_bin", "resp_bin", "frames"],
               [[i, j, int(v)] for (i, j), v in np.ndenumerate(occupancy)])


def loss_curve(path_base, trace: np.ndarray):
    base = Path(path_base)
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.semilogy(trace)
    ax.set_xlabel("epoch")
    ax.set_ylabel("objective")
    fig.tight_layout()
    fig.savefig(base.with_suffix(".svg"))
    plt.close(fig)
    _write_csv(base.with_suffix(".csv"), ["epoch", "objective"],
               list(enumerate(trace)))
