"""Clustered motion-compensated reconstruction.

Latent vectors are z-scored per channel, clustered by k-means, and the
static template plus generator weights are fit jointly by stochastic
gradient steps over clusters: each step evaluates the squared data residual
of one cluster through the chain generator -> warp -> NUFFT and pulls the
gradient back through the exact VJPs of each stage.

The template update is plain gradient descent with a step of
eta_step_scale / L, where L is the gradient Lipschitz constant 2*lambda_max
estimated by power iteration on the largest cluster's normal operator; the
generator update is adaptive-moment SGD.  The generator's zero-initialized
final layer makes the starting point "motion-averaged template, no motion".
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ._optim import Adam, DivergenceError
from .generator import GeneratorParams, generate, generate_vjp
from .io import KTDataset, save_params
from .nufft import CoilMaps, GriddingPlan, make_plan, nufft_adjoint, nufft_forward
from .volume import ComplexVolume, warp, warp_vjp

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# latent clustering

def cluster_latents(Z: np.ndarray, n_clusters: int = 30, seed: int = 0,
                    max_iters: int = 200, tol: float = 1e-8
                    ) -> tuple[np.ndarray, np.ndarray]:
    """k-means++ seeded Lloyd iterations over latent columns.

    Channels are z-scored internally so no channel dominates the metric;
    returned centroids are means of the original (unscaled) columns.
    N == T short-circuits to one frame per cluster with centroids equal to
    the latents.  Returns (centroids (N, 3), assignment (T,)).
    """
    pts = np.ascontiguousarray(Z.T, dtype=np.float64)
    T = pts.shape[0]
    if n_clusters > T:
        raise ValueError(f"n_clusters={n_clusters} exceeds frames T={T}")
    if n_clusters == T:
        return pts.copy(), np.arange(T)

    mu = pts.mean(axis=0)
    sd = pts.std(axis=0)
    sd[sd < 1e-12] = 1.0
    X = (pts - mu) / sd

    rng = np.random.default_rng(seed)
    centers = np.empty((n_clusters, X.shape[1]))
    centers[0] = X[rng.integers(T)]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for i in range(1, n_clusters):
        total = d2.sum()
        if total <= 0:
            centers[i:] = X[rng.integers(T, size=n_clusters - i)]
            break
        centers[i] = X[rng.choice(T, p=d2 / total)]
        d2 = np.minimum(d2, np.sum((X - centers[i]) ** 2, axis=1))

    assign = np.zeros(T, dtype=np.int64)
    for it in range(max_iters):
        dist = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assign = np.argmin(dist, axis=1)
        new_centers = centers.copy()
        for i in range(n_clusters):
            members = assign == i
            if members.any():
                new_centers[i] = X[members].mean(axis=0)
            else:
                far = int(np.argmax(dist[np.arange(T), assign]))
                new_centers[i] = X[far]
        shift = float(np.max(np.abs(new_centers - centers)))
        centers = new_centers
        if shift < tol:
            break

    dist = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    assign = np.argmin(dist, axis=1)
    centroids = np.empty((n_clusters, pts.shape[1]))
    for i in range(n_clusters):
        members = assign == i
        centroids[i] = pts[members].mean(axis=0) if members.any() else mu
    return centroids, assign


@dataclass
class ClusterSet:
    """Centroids plus per-cluster pooled trajectory and k-space data."""

    centroids: np.ndarray            # (N, 3), same units as the latents given
    assignment: np.ndarray           # (T,)
    k_points: list[np.ndarray]       # per cluster (ns_n, 3)
    kspace: list[np.ndarray]         # per cluster (nc, ns_n)
    density: list[np.ndarray] | None
    frames: list[np.ndarray]
    _plans: list[GriddingPlan | None] = field(default_factory=list, repr=False)

    @classmethod
    def build(cls, Z: np.ndarray, traj_frames: np.ndarray, kspace: np.ndarray,
              n_clusters: int, seed: int = 0,
              density: np.ndarray | None = None) -> "ClusterSet":
        centroids, assign = cluster_latents(Z, n_clusters, seed)
        T, nc, ns = kspace.shape
        kp, kd, dens, frames = [], [], [], []
        for i in range(len(centroids)):
            members = np.flatnonzero(assign == i)
            frames.append(members)
            kp.append(np.ascontiguousarray(
                traj_frames[members].reshape(-1, 3)))
            kd.append(np.ascontiguousarray(
                np.moveaxis(kspace[members], 1, 0).reshape(nc, -1)))
            if density is not None:
                dens.append(np.ascontiguousarray(density[members].reshape(-1)))
        n_total = sum(k.shape[0] for k in kp)
        if n_total != T * ns:
            raise AssertionError("cluster grouping lost samples")
        return cls(centroids, assign, kp, kd,
                   dens if density is not None else None, frames,
                   [None] * len(centroids))

    @property
    def n_clusters(self) -> int:
        return len(self.centroids)

    def plan(self, i: int, dims) -> GriddingPlan:
        if self._plans[i] is None:
            self._plans[i] = make_plan(self.k_points[i], dims)
        return self._plans[i]


# ---------------------------------------------------------------------------
# objective

def moco_objective(eta: ComplexVolume, gen: GeneratorParams, z_n: np.ndarray,
                   k_n: np.ndarray, b_n: np.ndarray, maps: CoilMaps,
                   plan: GriddingPlan | None = None, workers: int = 1,
                   want_grads: bool = True):
    """Squared data residual of one cluster and its exact gradients.

    Returns (value, g_eta, g_theta, g_z); the gradient entries are None when
    want_grads is False.
    """
    field_ = generate(gen, z_n)
    warped = warp(eta, field_)
    if plan is None:
        plan = make_plan(k_n, eta.dims)
    residual = nufft_forward(warped.data, maps.maps, k_n, plan, workers) - b_n
    value = float(np.real(np.vdot(residual, residual)))
    if not want_grads:
        return value, None, None, None
    g_vol = nufft_adjoint(2.0 * residual, maps.maps, k_n, plan, workers)
    g_eta, g_field = warp_vjp(eta, field_, g_vol)
    g_theta, g_z = generate_vjp(gen, z_n, g_field)
    return value, g_eta, g_theta, g_z


def total_objective(eta: ComplexVolume, gen: GeneratorParams,
                    clusters: ClusterSet, maps: CoilMaps,
                    workers: int = 1) -> float:
    """Sum of the clustered objective over all clusters, in cluster order."""
    vals = [moco_objective(eta, gen, clusters.centroids[i], clusters.k_points[i],
                           clusters.kspace[i], maps, clusters.plan(i, eta.dims),
                           workers, want_grads=False)[0]
            for i in range(clusters.n_clusters)]
    return float(np.sum(vals))


# ---------------------------------------------------------------------------
# initialization helpers

def density_weighted_adjoint(clusters: ClusterSet, maps: CoilMaps, dims,
                             workers: int = 1) -> np.ndarray:
    """Motion-averaged starting template: density-compensated adjoint of all
    data pooled, scaled by a scalar least-squares fit to the measurements."""
    acc = np.zeros(dims, dtype=np.complex128)
    for i in range(clusters.n_clusters):
        b = clusters.kspace[i]
        w = clusters.density[i] if clusters.density is not None else None
        wb = b * w if w is not None else b
        acc += nufft_adjoint(wb, maps.maps, clusters.k_points[i],
                             clusters.plan(i, dims), workers)
    num = 0.0
    den = 0.0
    for i in range(clusters.n_clusters):
        y = nufft_forward(acc, maps.maps, clusters.k_points[i],
                          clusters.plan(i, dims), workers)
        num += float(np.real(np.vdot(y, clusters.kspace[i])))
        den += float(np.real(np.vdot(y, y)))
    return acc * (num / den if den > 0 else 1.0)


def power_iteration_lipschitz(k: np.ndarray, maps: CoilMaps, dims,
                              iters: int = 10, seed: int = 0,
                              workers: int = 1) -> float:
    """lambda_max of A^H A for one cluster's forward operator."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(dims) + 1j * rng.standard_normal(dims)
    v /= np.linalg.norm(v)
    plan = make_plan(k, dims)
    lam = 1.0
    for _ in range(iters):
        w = nufft_adjoint(nufft_forward(v, maps.maps, k, plan, workers),
                          maps.maps, k, plan, workers)
        lam = float(np.linalg.norm(w))
        v = w / lam
    return lam


def cg_reconstruct(kspace: np.ndarray, traj_frames: np.ndarray, maps: CoilMaps,
                   n_iters: int = 30, tol: float = 1e-9,
                   workers: int = 1) -> ComplexVolume:
    """Linear least-squares template by conjugate gradients on the normal
    equations, all frames pooled (oracle for the motionless case)."""
    dims = maps.dims
    T, nc, ns = kspace.shape
    k = traj_frames.reshape(-1, 3)
    b = np.moveaxis(kspace, 1, 0).reshape(nc, -1)
    plan = make_plan(k, dims)

    def normal_op(x):
        return nufft_adjoint(nufft_forward(x, maps.maps, k, plan, workers),
                             maps.maps, k, plan, workers)

    rhs = nufft_adjoint(b, maps.maps, k, plan, workers)
    x = np.zeros(dims, dtype=np.complex128)
    r = rhs.copy()
    p = r.copy()
    rs = float(np.real(np.vdot(r, r)))
    rs0 = rs
    for _ in range(n_iters):
        Ap = normal_op(p)
        alpha = rs / float(np.real(np.vdot(p, Ap)))
        x += alpha * p
        r -= alpha * Ap
        rs_new = float(np.real(np.vdot(r, r)))
        if rs_new / rs0 < tol**2:
            break
        p = r + (rs_new / rs) * p
        rs = rs_new
    return ComplexVolume(x, maps.spacing)


# ---------------------------------------------------------------------------
# the clustered joint fit

@dataclass
class ReconConfig:
    n_clusters: int = 30
    epochs: int = 300
    eta_step_scale: float = 1.0     # template step: scale / (2 lambda_max)
    eta_momentum: float = 0.9       # heavy-ball momentum on the template
    eta_step_decay: float = 0.998   # per-epoch geometric decay of the eta step
    theta_lr: float = 3e-4
    theta_warmup_epochs: int = 10   # template-only epochs before motion unfreezes
    control_spacing: float = 4.0
    init_cg_iters: int = 80         # pooled CG warm start; 0 = DCF adjoint only
    seed: int = 0
    workers: int = 1
    checkpoint_every: int = 0
    checkpoint_base: str | None = None
    log_every: int = 10


@dataclass
class ReconResult:
    """Joint fit output: template, generator, clustering, diagnostics."""

    eta: ComplexVolume
    gen: GeneratorParams
    centroids: np.ndarray          # z-scored units (generator input space)
    assignment: np.ndarray
    z_mean: np.ndarray
    z_std: np.ndarray
    loss_trace: np.ndarray         # per-epoch summed objective
    config: ReconConfig

    def scale_latents(self, Z: np.ndarray) -> np.ndarray:
        return (Z - self.z_mean[:, None]) / self.z_std[:, None]

    def cluster_fields(self):
        return [generate(self.gen, z) for z in self.centroids]


def reconstruct(dataset: KTDataset, Z: np.ndarray, config: ReconConfig
                ) -> ReconResult:
    """Fit template and generator to the clustered k-t data."""
    maps = dataset.coilmaps
    dims = maps.dims
    z_mean = Z.mean(axis=1)
    z_std = Z.std(axis=1)
    z_std[z_std < 1e-12] = 1.0
    Zs = (Z - z_mean[:, None]) / z_std[:, None]

    clusters = ClusterSet.build(Zs, dataset.traj.frames, dataset.kspace,
                                config.n_clusters, config.seed,
                                dataset.traj.density)
    logger.info("clustered %d frames into %d groups", Z.shape[1], clusters.n_clusters)

    if config.init_cg_iters > 0:
        # motion-blurred average template: short pooled linear solve
        eta0 = cg_reconstruct(dataset.kspace, dataset.traj.frames, maps,
                              n_iters=config.init_cg_iters,
                              workers=config.workers).data
    else:
        eta0 = density_weighted_adjoint(clusters, maps, dims, config.workers)
    gen = GeneratorParams.init(
        _control_dims_for(dims, config.control_spacing), config.control_spacing,
        seed=config.seed)

    biggest = int(np.argmax([k.shape[0] for k in clusters.k_points]))
    lam_max = power_iteration_lipschitz(clusters.k_points[biggest], maps, dims,
                                        seed=config.seed, workers=config.workers)
    eta_lr = config.eta_step_scale / (2.0 * lam_max)
    logger.info("power iteration lambda_max %.3g -> eta step %.3g", lam_max, eta_lr)

    opt = Adam(gen.weights, lr=config.theta_lr)
    rng = np.random.default_rng(config.seed)
    trace = []
    eta_data = eta0.copy()
    velocity = np.zeros_like(eta_data)
    beta = config.eta_momentum
    for epoch in range(config.epochs):
        order = rng.permutation(clusters.n_clusters)
        epoch_loss = 0.0
        step = eta_lr * config.eta_step_decay**epoch
        for n in order:
            eta_vol = ComplexVolume(eta_data, maps.spacing)
            value, g_eta, g_theta, _ = moco_objective(
                eta_vol, gen, clusters.centroids[n], clusters.k_points[n],
                clusters.kspace[n], maps, clusters.plan(n, dims), config.workers)
            if not np.isfinite(value):
                raise DivergenceError(
                    f"objective non-finite at epoch {epoch}, cluster {n}; "
                    f"last epoch losses: {trace[-3:]}")
            epoch_loss += value
            velocity = beta * velocity - step * g_eta
            eta_data = eta_data + velocity
            if epoch >= config.theta_warmup_epochs:
                opt.step(gen.weights, g_theta)
        trace.append(epoch_loss)
        if config.log_every and epoch % config.log_every == 0:
            logger.info("epoch %d: objective %.6g", epoch, epoch_loss)
        if (config.checkpoint_every and config.checkpoint_base
                and (epoch + 1) % config.checkpoint_every == 0):
            save_params(config.checkpoint_base,
                        {**gen.weights, "eta": eta_data},
                        extra={"epoch": epoch})

    eta = ComplexVolume(eta_data, maps.spacing)
    return ReconResult(eta, gen, clusters.centroids, clusters.assignment,
                       z_mean, z_std, np.asarray(trace), config)


def _control_dims_for(dims, control_spacing: float):
    from .volume import min_control_dims
    return min_control_dims(dims, control_spacing)


def synthesize_realtime(result: ReconResult, Z: np.ndarray,
                        frame_indices) -> list[ComplexVolume]:
    """Real-time volumes at the requested frames: warp(eta, G(z_t))."""
    T = Z.shape[1]
    out = []
    Zs = result.scale_latents(Z)
    for t in frame_indices:
        if not 0 <= t < T:
            raise IndexError(f"frame {t} out of range [0, {T})")
        out.append(warp(result.eta, generate(result.gen, Zs[:, t])))
    return out
