"""Composition-map training: losses, nested loops, and the direct baseline.

The training procedure alternates a single isomorphism-network update per
outer iteration with a block of transport-network updates on the pushed
reference batch, each loss combining a fitting term (how well the image
batch matches the intended measure) with a distortion-gap regularizer. The
direct baseline trains one network on the same loss in a single loop.

Everything is a pure function of (config, seed): rerunning a command
reproduces logs and checkpoints byte for byte.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from .geometry import PointCloud, cross_cost
from .kernels import sinkhorn, sinkhorn_divergence, gromov_monge_gap
from .nets import MlpMap, AdamState, Grads, forward, backward, adam_step

LOOP_ISO_PRETRAIN = "iso_pretrain"
LOOP_ISO_OUTER = "iso_outer"
LOOP_TRANSPORT_INNER = "transport_inner"
LOOP_DIRECT = "direct"


@dataclass
class TrainConfig:
    """All hyperparameters of a run, including solver budgets.

    Epsilon/eta/lambda defaults follow the reference experimental setup:
    the isomorphism fitting loss is a squared-Euclidean debiased divergence
    at eps 0.01, every other fitting loss and the gap regularizer run at
    eps 0.001, evaluation at eps 0.1; cross-domain costs are mean-scaled
    and intra-domain costs max-scaled.
    """

    lambda_gm: float = 1.0
    eps_fit_iso: float = 0.01
    eps_fit_transport: float = 0.001
    eps_gw: float = 0.001
    eps_eval: float = 0.1
    eta_iso: float = 1e-3
    eta_transport: float = 1e-4
    batch_n: int = 1024
    k_outer: int = 5
    k_inner: int = 2000
    pretrain_iters: int = 5000
    direct_iters: int = 5000
    seed: int = 0
    n_total: int = 8192
    n_eval: int = 2048
    hidden_dims: tuple[int, ...] = (128, 64, 64)
    scaling_fit: str = "mean"
    scaling_intra: str = "max"
    metric_fit_iso: str = "sq_euclidean"
    metric_fit_transport: str = "euclidean"
    metric_intra: str = "euclidean"
    # transport-role networks start at the identity (residual + zero final
    # layer); the aligned reference is then a working initialization for the
    # transport stage, and the direct baseline gets the same scheme
    identity_init_transport: bool = True
    # solver budgets (method-silent knobs; defaults favor accuracy, presets
    # tighten them for speed)
    stabilized: bool = True
    fit_max_iter: int = 80
    fit_tol: float = 1e-3
    fit_anneal: bool = True
    gw_outer_iter: int = 12
    gw_tol: float = 1e-3
    gw_inner_iter: int = 60
    gw_inner_tol: float = 1e-3
    gw_anneal: bool = True
    gw_anneal_inner_iter: int = 15
    gw_anneal_factor: float = 0.5
    eval_max_iter: int = 3000
    eval_tol: float = 1e-6
    loss_guard: float = 1e6

    def __post_init__(self):
        for name in ("eps_fit_iso", "eps_fit_transport", "eps_gw", "eps_eval"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.lambda_gm < 0:
            raise ValueError("lambda_gm must be nonnegative")
        for name in ("k_outer", "k_inner", "pretrain_iters", "direct_iters"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.batch_n < 2:
            raise ValueError("batch_n must be at least 2")
        self.hidden_dims = tuple(int(d) for d in self.hidden_dims)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "TrainConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def paper_preset(seed: int = 0) -> TrainConfig:
    """The reference experiment configuration at full scale."""
    return TrainConfig(seed=seed)


def desk_preset(seed: int = 0) -> TrainConfig:
    """Shrunk configuration that finishes in minutes on a laptop CPU.

    Keeps the epsilon/eta/lambda values of the full setup; shrinks the cloud,
    batch, and iteration counts, and matches the direct baseline's budget to
    the composition pipeline's total gradient steps (1500 + 5 + 5*400).
    """
    return TrainConfig(seed=seed, batch_n=256, k_outer=5, k_inner=400,
                       pretrain_iters=1500, direct_iters=3505,
                       n_total=2048, n_eval=1024)


PRESETS = {"paper": paper_preset, "desk": desk_preset}


@dataclass
class LogRecord:
    loop: str
    iteration: int
    fitting_loss: float
    gm_gap: float
    total_loss: float
    wall_time: float


@dataclass
class TrainLog:
    records: list[LogRecord] = field(default_factory=list)
    final_metrics: dict = field(default_factory=dict)

    def append(self, loop: str, iteration: int, fitting: float, gap: float,
               total: float, wall: float) -> None:
        self.records.append(LogRecord(loop, iteration, fitting, gap, total, wall))

    def rows(self, loop: str | None = None) -> list[LogRecord]:
        if loop is None:
            return list(self.records)
        return [r for r in self.records if r.loop == loop]

    def write_csv(self, path) -> None:
        # wall_time stays out of the CSV so reruns are byte-identical.
        with open(path, "w") as fh:
            fh.write("loop,iteration,fitting_loss,gm_gap,total_loss\n")
            for r in self.records:
                fh.write(f"{r.loop},{r.iteration},{r.fitting_loss!r},"
                         f"{r.gm_gap!r},{r.total_loss!r}\n")


class TrainingDiverged(RuntimeError):
    """Raised when a loss turns non-finite or exceeds the guard bound."""

    def __init__(self, message: str, last_good: dict | None = None):
        super().__init__(message)
        self.last_good = last_good or {}


@dataclass
class LossResult:
    total: float
    fitting: float
    gap: float
    grads: Grads
    distortion: float
    gw_cost: float
    fit_converged: bool
    gw_converged: bool
    fit_potentials: tuple | None = None


def isomorphism_loss(net: MlpMap, x_batch: np.ndarray, z_batch: np.ndarray,
                     cfg: TrainConfig, fit_init: tuple | None = None) -> LossResult:
    """Divergence-to-reference fitting plus the distortion-gap regularizer.

    The fitting term is the debiased divergence between the mapped source
    batch and the reference batch (squared-Euclidean, mean-scaled); the gap
    compares the source batch with its own image on max-scaled intra costs.
    Gradients reach the network parameters by chaining the envelope position
    gradients through backprop.
    """
    mapped = forward(net, x_batch)
    div = sinkhorn_divergence(
        PointCloud.uniform(mapped), PointCloud.uniform(z_batch),
        metric=cfg.metric_fit_iso, epsilon=cfg.eps_fit_iso,
        max_iter=cfg.fit_max_iter, tol=cfg.fit_tol, scaling=cfg.scaling_fit,
        anneal=cfg.fit_anneal and fit_init is None, stabilized=cfg.stabilized,
        init=fit_init)
    gap = gromov_monge_gap(
        PointCloud.uniform(x_batch), PointCloud.uniform(mapped),
        metric=cfg.metric_intra, epsilon=cfg.eps_gw, scaling=cfg.scaling_intra,
        outer_iter=cfg.gw_outer_iter, tol=cfg.gw_tol,
        inner_max_iter=cfg.gw_inner_iter, inner_tol=cfg.gw_inner_tol,
        anneal=cfg.gw_anneal, anneal_inner_iter=cfg.gw_anneal_inner_iter,
        anneal_factor=cfg.gw_anneal_factor, stabilized=cfg.stabilized)
    upstream = div.grad_a + cfg.lambda_gm * gap.grad_mapped
    grads = backward(net, upstream)
    total = div.value + cfg.lambda_gm * gap.gap
    return LossResult(total, div.value, gap.gap, grads, gap.distortion, gap.gw_cost,
                      div.converged, gap.gw.converged, div.potentials)


def transport_loss(net: MlpMap, z_batch: np.ndarray, y_batch: np.ndarray,
                   cfg: TrainConfig, fit_init: tuple | None = None) -> LossResult:
    """Entropic-Wasserstein fitting to the target plus the gap regularizer.

    The fitting term is the linear transport cost <C, pi> on the
    mean-scaled Euclidean cross cost between the mapped batch and the
    target batch; its position gradient is the fixed-plan envelope
    gradient of the entropy-included value.
    """
    mapped = forward(net, z_batch)
    n = mapped.shape[0]
    m = y_batch.shape[0]
    cross = cross_cost(PointCloud.uniform(mapped), PointCloud.uniform(y_batch),
                       cfg.metric_fit_transport, cfg.scaling_fit)
    wa = np.full(n, 1.0 / n)
    wb = np.full(m, 1.0 / m)
    ot = sinkhorn(cross.values, wa, wb, cfg.eps_fit_transport,
                  max_iter=cfg.fit_max_iter, tol=cfg.fit_tol,
                  source_points=mapped, target_points=y_batch,
                  metric=cfg.metric_fit_transport, cost_scale=cross.scale_factor,
                  init=fit_init, anneal=cfg.fit_anneal and fit_init is None,
                  stabilized=cfg.stabilized)
    gap = gromov_monge_gap(
        PointCloud.uniform(z_batch), PointCloud.uniform(mapped),
        metric=cfg.metric_intra, epsilon=cfg.eps_gw, scaling=cfg.scaling_intra,
        outer_iter=cfg.gw_outer_iter, tol=cfg.gw_tol,
        inner_max_iter=cfg.gw_inner_iter, inner_tol=cfg.gw_inner_tol,
        anneal=cfg.gw_anneal, anneal_inner_iter=cfg.gw_anneal_inner_iter,
        anneal_factor=cfg.gw_anneal_factor, stabilized=cfg.stabilized)
    upstream = ot.grad_source + cfg.lambda_gm * gap.grad_mapped
    grads = backward(net, upstream)
    total = ot.cost + cfg.lambda_gm * gap.gap
    pots = (ot.coupling.potential_source, ot.coupling.potential_target)
    return LossResult(total, ot.cost, gap.gap, grads, gap.distortion, gap.gw_cost,
                      ot.coupling.converged, gap.gw.converged, pots)


class _PotentialTable:
    """Per-index warm starts for the batch fitting solves.

    Potentials are functions of the points; between consecutive training
    steps the map moves little, so stale per-index values cut the solve to a
    handful of scaling iterations.
    """

    def __init__(self, *sizes: int):
        self.tables = [np.zeros(s) for s in sizes]
        self.primed = False

    def get(self, *indexes):
        if not self.primed:
            return None
        return tuple(t[idx] for t, idx in zip(self.tables, indexes))

    def put(self, potentials, *indexes) -> None:
        for t, p, idx in zip(self.tables, potentials, indexes):
            t[idx] = p
        self.primed = True


def _loss_guard(cfg: TrainConfig, total: float, where: str, last_good: dict) -> None:
    if not np.isfinite(total) or abs(total) > cfg.loss_guard:
        raise TrainingDiverged(f"loss diverged in {where}: total={total!r}", last_good)


def _batch_streams(cfg: TrainConfig, label: str) -> np.random.Generator:
    root = np.random.SeedSequence(cfg.seed)
    labels = {"pretrain": 1, "composition": 2, "direct": 3}
    return np.random.default_rng(root.spawn(max(labels.values()) + 1)[labels[label]])


def pretrain_isomorphism(net: MlpMap, source: PointCloud, reference: PointCloud,
                         cfg: TrainConfig, iters: int | None = None,
                         log: TrainLog | None = None) -> TrainLog:
    """Train the isomorphism network alone as a direct source-to-reference map.

    Each step resamples batches with replacement from the full clouds,
    takes one Adam step on the isomorphism loss, and logs the breakdown.
    """
    iters = cfg.pretrain_iters if iters is None else iters
    log = log if log is not None else TrainLog()
    if iters == 0:
        return log
    rng = _batch_streams(cfg, "pretrain")
    state = AdamState.create(net, cfg.eta_iso)
    tables = _PotentialTable(source.n, reference.n, source.n, reference.n)
    last_good = {"iso": net.copy()}
    t0 = time.perf_counter()
    for it in range(iters):
        idx_x = rng.integers(0, source.n, cfg.batch_n)
        idx_z = rng.integers(0, reference.n, cfg.batch_n)
        res = isomorphism_loss(net, source.points[idx_x], reference.points[idx_z],
                               cfg, fit_init=tables.get(idx_x, idx_z, idx_x, idx_z))
        _loss_guard(cfg, res.total, f"{LOOP_ISO_PRETRAIN} step {it}", last_good)
        tables.put(res.fit_potentials, idx_x, idx_z, idx_x, idx_z)
        adam_step(net, res.grads, state)
        log.append(LOOP_ISO_PRETRAIN, it, res.fitting, res.gap, res.total,
                   time.perf_counter() - t0)
        if (it + 1) % 25 == 0:
            last_good["iso"] = net.copy()
    return log


def train_composition(iso_net: MlpMap, transport_net: MlpMap, source: PointCloud,
                      reference: PointCloud, target: PointCloud, cfg: TrainConfig,
                      log: TrainLog | None = None) -> TrainLog:
    """Nested loops: one isomorphism update per outer iteration, then a block
    of transport updates on freshly pushed source batches.

    The pushed batch is recomputed from the current isomorphism network at
    every inner step; transport gradients do not propagate into it.
    """
    log = log if log is not None else TrainLog()
    if cfg.k_outer == 0:
        return log
    rng = _batch_streams(cfg, "composition")
    iso_state = AdamState.create(iso_net, cfg.eta_iso)
    tr_state = AdamState.create(transport_net, cfg.eta_transport)
    iso_tables = _PotentialTable(source.n, reference.n, source.n, reference.n)
    tr_tables = _PotentialTable(source.n, target.n)
    last_good = {"iso": iso_net.copy(), "transport": transport_net.copy()}
    inner_count = 0
    t0 = time.perf_counter()
    for k in range(cfg.k_outer):
        idx_x = rng.integers(0, source.n, cfg.batch_n)
        idx_z = rng.integers(0, reference.n, cfg.batch_n)
        res = isomorphism_loss(iso_net, source.points[idx_x], reference.points[idx_z],
                               cfg, fit_init=iso_tables.get(idx_x, idx_z, idx_x, idx_z))
        _loss_guard(cfg, res.total, f"{LOOP_ISO_OUTER} step {k}", last_good)
        iso_tables.put(res.fit_potentials, idx_x, idx_z, idx_x, idx_z)
        adam_step(iso_net, res.grads, iso_state)
        log.append(LOOP_ISO_OUTER, k, res.fitting, res.gap, res.total,
                   time.perf_counter() - t0)
        for _ in range(cfg.k_inner):
            idx_x = rng.integers(0, source.n, cfg.batch_n)
            idx_y = rng.integers(0, target.n, cfg.batch_n)
            pushed = forward(iso_net, source.points[idx_x])
            res = transport_loss(transport_net, pushed, target.points[idx_y],
                                 cfg, fit_init=tr_tables.get(idx_x, idx_y))
            _loss_guard(cfg, res.total,
                        f"{LOOP_TRANSPORT_INNER} step {inner_count}", last_good)
            tr_tables.put(res.fit_potentials, idx_x, idx_y)
            adam_step(transport_net, res.grads, tr_state)
            log.append(LOOP_TRANSPORT_INNER, inner_count, res.fitting, res.gap,
                       res.total, time.perf_counter() - t0)
            inner_count += 1
            if inner_count % 25 == 0:
                last_good = {"iso": iso_net.copy(), "transport": transport_net.copy()}
    return log


def train_direct(net: MlpMap, source: PointCloud, target: PointCloud,
                 cfg: TrainConfig, iters: int | None = None,
                 log: TrainLog | None = None) -> TrainLog:
    """Single-loop baseline: the transport loss applied straight from the
    source cloud to the target cloud."""
    iters = cfg.direct_iters if iters is None else iters
    log = log if log is not None else TrainLog()
    if iters == 0:
        return log
    rng = _batch_streams(cfg, "direct")
    state = AdamState.create(net, cfg.eta_transport)
    tables = _PotentialTable(source.n, target.n)
    last_good = {"direct": net.copy()}
    t0 = time.perf_counter()
    for it in range(iters):
        idx_x = rng.integers(0, source.n, cfg.batch_n)
        idx_y = rng.integers(0, target.n, cfg.batch_n)
        res = transport_loss(net, source.points[idx_x], target.points[idx_y],
                             cfg, fit_init=tables.get(idx_x, idx_y))
        _loss_guard(cfg, res.total, f"{LOOP_DIRECT} step {it}", last_good)
        tables.put(res.fit_potentials, idx_x, idx_y)
        adam_step(net, res.grads, state)
        log.append(LOOP_DIRECT, it, res.fitting, res.gap, res.total,
                   time.perf_counter() - t0)
        if (it + 1) % 25 == 0:
            last_good["direct"] = net.copy()
    return log


def evaluate(mapped_points: np.ndarray, target_points: np.ndarray,
             cfg: TrainConfig) -> float:
    """Squared-Euclidean debiased divergence at the evaluation epsilon,
    computed on the full given clouds (no batching, no scaling)."""
    div = sinkhorn_divergence(
        PointCloud.uniform(mapped_points), PointCloud.uniform(target_points),
        metric="sq_euclidean", epsilon=cfg.eps_eval,
        max_iter=cfg.eval_max_iter, tol=cfg.eval_tol, scaling="none",
        anneal=True, stabilized=cfg.stabilized, with_grads=False)
    return float(div.value)
