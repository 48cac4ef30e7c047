"""Entropic optimal-transport solvers and distortion/gap quantities.

All Sinkhorn updates run in the log domain so that very small regularization
(epsilon down to 1e-3 on O(1) costs) stays stable. Position gradients follow
the envelope rule: plans and scale factors are held fixed and the cost
matrix's dependence on the points is differentiated, which is exact for the
entropy-included optimal value at convergence.

Entropic regularization convention: OT_eps = <C, pi> + eps * KL(pi | a x b),
with optimal plan pi_ij = a_i b_j exp((f_i + g_j - C_ij)/eps). At the fixed
point the entropy-included value equals <f, a> + <g, b>.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .geometry import PointCloud, CostMatrix, pairwise_cost, cross_cost

_TINY = 1e-300


@dataclass
class Coupling:
    """Transport plan with its dual potentials and solver diagnostics."""

    plan: np.ndarray
    potential_source: np.ndarray
    potential_target: np.ndarray
    epsilon: float
    iterations_used: int
    converged: bool
    marginal_error: float


@dataclass
class OtResult:
    """Entropic OT solve: linear cost, entropy-included cost, and gradients.

    `cost` is the transport cost <C, pi> excluding the entropy term;
    `reg_cost` is the entropy-included regularized value (the quantity whose
    position gradient the envelope rule computes exactly).
    """

    cost: float
    reg_cost: float
    coupling: Coupling
    grad_source: np.ndarray | None = None
    grad_target: np.ndarray | None = None


@dataclass
class DivergenceResult:
    """Debiased divergence value with envelope position gradients."""

    value: float
    grad_a: np.ndarray | None
    grad_b: np.ndarray | None
    converged: bool
    term_ab: float
    term_aa: float
    term_bb: float
    scale_factor: float
    potentials: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray] | None = None


@dataclass
class GwResult:
    """Quadratic objective value (entropy excluded) at the returned coupling."""

    cost: float
    coupling: Coupling
    inner_iterations: int
    outer_iterations: int
    converged: bool


@dataclass
class DistortionResult:
    value: float
    grad_mapped: np.ndarray | None
    mapped_scale: float


@dataclass
class GmGapResult:
    """Distortion minus entropic-GW cost, with components kept separate.

    The gap may be slightly negative (entropic bias, unconverged GW); it is
    returned as-is.
    """

    gap: float
    distortion: float
    gw_cost: float
    grad_mapped: np.ndarray | None
    gw: GwResult
    source_scale: float
    mapped_scale: float


def _validate_weights(w: np.ndarray, name: str) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1 or np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-9:
        raise ValueError(f"{name} must be a strictly positive probability vector")
    return w


def _log_plan(loga, logb, f, g, c, inv_eps):
    return loga[:, None] + logb[None, :] + (f[:, None] + g[None, :] - c) * inv_eps


def _anneal_ladder(epsilon: float, c: np.ndarray, start_div: float = 8.0,
                   factor: float = 0.5) -> list[float]:
    # Geometric continuation from a span-sized epsilon down toward the target.
    span = float(c.max() - c.min())
    ladder = []
    e = span / start_div
    while e > 2.0 * epsilon:
        ladder.append(e)
        e *= factor
    return ladder


def _lse_update_f(c, loga, logb, f, g, eps):
    m = (g[None, :] - c) / eps + logb[None, :]
    mmax = m.max(axis=1)
    return -eps * (mmax + np.log(np.exp(m - mmax[:, None]).sum(axis=1)))


def _lse_update_g(c, loga, logb, f, g, eps):
    m = (f[:, None] - c) / eps + loga[:, None]
    mmax = m.max(axis=0)
    return -eps * (mmax + np.log(np.exp(m - mmax[None, :]).sum(axis=0)))


# Residual scalings may safely span a wide fp64 exponent range: kernel
# entries are <= O(1) after the opening normalization and all sums are of
# positive terms, so only overflow limits the span.
_ABSORB_SPAN = 1e80


def _stabilized_stage(c, loga, logb, a, b, f, g, eps, budget, tol, check_every):
    """Scaling iterations on an absorbed kernel; potentials stay in log space.

    One LSE row normalization opens the stage so the rebuilt kernel has
    bounded row sums, then each iteration is two matrix-vector products.
    Residual scalings are absorbed into (f, g) and the kernel rebuilt when
    they leave [1/span, span].
    """
    f = _lse_update_f(c, loga, logb, f, g, eps)
    kern = np.exp(_log_plan(loga, logb, f, g, c, 1.0 / eps))
    u = np.ones(a.size)
    v = np.ones(b.size)
    plan = kern
    iters = 1
    converged = False
    err = np.inf
    for it in range(budget):
        u = a / np.maximum(kern @ v, _TINY)
        v = b / np.maximum(kern.T @ u, _TINY)
        iters += 1
        if max(u.max(), v.max(), 1.0 / u.min(), 1.0 / v.min()) > _ABSORB_SPAN:
            f = f + eps * np.log(u)
            g = g + eps * np.log(v)
            kern = np.exp(_log_plan(loga, logb, f, g, c, 1.0 / eps))
            u = np.ones(a.size)
            v = np.ones(b.size)
        if (it + 1) % check_every == 0 or it == budget - 1:
            plan = (u[:, None] * kern) * v[None, :]
            err = max(np.abs(plan.sum(axis=1) - a).max(),
                      np.abs(plan.sum(axis=0) - b).max())
            if err < tol:
                converged = True
                break
    if not converged:
        plan = (u[:, None] * kern) * v[None, :]
    f = f + eps * np.log(u)
    g = g + eps * np.log(v)
    return f, g, plan, iters, converged, err


def sinkhorn_coupling(c: np.ndarray, a: np.ndarray, b: np.ndarray, epsilon: float,
                      max_iter: int = 2000, tol: float = 1e-6,
                      init: tuple[np.ndarray, np.ndarray] | None = None,
                      anneal: bool = False, anneal_iters: int = 10,
                      anneal_factor: float = 0.5,
                      check_every: int = 10, stabilized: bool = False) -> Coupling:
    """Log-domain Sinkhorn fixed-point iterations for the plan in Pi(a, b).

    Stops when the max marginal violation of the current plan drops below
    `tol`, or after `max_iter` iterations (converged=False; the caller
    decides). With `anneal`, a geometric epsilon ladder warm-starts the
    potentials before the final solve at the target epsilon. `stabilized`
    selects the absorption variant (scaling iterations on an absorbed
    kernel): the same fixed point, far cheaper per iteration, used by the
    training loop.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    c = np.asarray(c, dtype=np.float64)
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix must be finite")
    a = _validate_weights(a, "a")
    b = _validate_weights(b, "b")
    if c.shape != (a.size, b.size):
        raise ValueError(f"cost shape {c.shape} does not match weights ({a.size}, {b.size})")

    loga = np.log(a)
    logb = np.log(b)
    if init is not None:
        f = np.array(init[0], dtype=np.float64, copy=True)
        g = np.array(init[1], dtype=np.float64, copy=True)
    else:
        f = np.zeros(a.size)
        g = np.zeros(b.size)

    total_iters = 0
    schedule = ([(e, anneal_iters) for e in _anneal_ladder(epsilon, c, factor=anneal_factor)]
                if anneal else [])
    schedule.append((epsilon, max_iter))

    converged = False
    err = np.inf
    stage_plan = None
    for eps_k, budget in schedule:
        final_stage = eps_k == epsilon
        if stabilized:
            f, g, stage_plan, iters, conv, err = _stabilized_stage(
                c, loga, logb, a, b, f, g, eps_k, budget, tol, check_every)
            total_iters += iters
            if final_stage and conv:
                converged = True
                break
            continue
        for it in range(budget):
            f = _lse_update_f(c, loga, logb, f, g, eps_k)
            g = _lse_update_g(c, loga, logb, f, g, eps_k)
            total_iters += 1
            if final_stage and ((it + 1) % check_every == 0 or it == budget - 1):
                plan = np.exp(_log_plan(loga, logb, f, g, c, 1.0 / eps_k))
                err = max(np.abs(plan.sum(axis=1) - a).max(),
                          np.abs(plan.sum(axis=0) - b).max())
                if err < tol:
                    converged = True
                    break
        if converged:
            break

    if stabilized and stage_plan is not None:
        plan = stage_plan
    else:
        plan = np.exp(_log_plan(loga, logb, f, g, c, 1.0 / epsilon))
    err = max(np.abs(plan.sum(axis=1) - a).max(), np.abs(plan.sum(axis=0) - b).max())
    return Coupling(plan, f, g, epsilon, total_iters, bool(err < tol), float(err))


def _symmetric_stabilized_stage(c, loga, a, f, eps, budget, tol, check_every):
    m = (f[None, :] - c) / eps + loga[None, :]
    mmax = m.max(axis=1)
    f = 0.5 * (f - eps * (mmax + np.log(np.exp(m - mmax[:, None]).sum(axis=1))))
    kern = np.exp(_log_plan(loga, loga, f, f, c, 1.0 / eps))
    u = np.ones(a.size)
    iters = 1
    converged = False
    for it in range(budget):
        u = np.sqrt(u * a / np.maximum(kern @ u, _TINY))
        iters += 1
        if max(u.max(), 1.0 / u.min()) > _ABSORB_SPAN:
            f = f + eps * np.log(u)
            kern = np.exp(_log_plan(loga, loga, f, f, c, 1.0 / eps))
            u = np.ones(a.size)
        if (it + 1) % check_every == 0 or it == budget - 1:
            plan = (u[:, None] * kern) * u[None, :]
            if np.abs(plan.sum(axis=1) - a).max() < tol:
                converged = True
                break
    f = f + eps * np.log(u)
    return f, iters, converged


def _symmetric_coupling(c: np.ndarray, a: np.ndarray, epsilon: float,
                        max_iter: int = 2000, tol: float = 1e-6,
                        init: np.ndarray | None = None,
                        anneal: bool = False, anneal_iters: int = 10,
                        check_every: int = 10, stabilized: bool = False) -> Coupling:
    """Self-transport solve OT(a, a) via the averaged symmetric update.

    The symmetric fixed point has equal potentials, and the halved update
    converges much faster than alternating row/column scalings here.
    """
    a = _validate_weights(a, "a")
    loga = np.log(a)
    f = np.zeros(a.size) if init is None else np.array(init, dtype=np.float64, copy=True)

    total_iters = 0
    schedule = [(e, anneal_iters) for e in _anneal_ladder(epsilon, c)] if anneal else []
    schedule.append((epsilon, max_iter))

    converged = False
    for eps_k, budget in schedule:
        inv_eps = 1.0 / eps_k
        final_stage = eps_k == epsilon
        if stabilized:
            f, iters, conv = _symmetric_stabilized_stage(
                c, loga, a, f, eps_k, budget, tol, check_every)
            total_iters += iters
            if final_stage and conv:
                converged = True
                break
            continue
        for it in range(budget):
            m = (f[None, :] - c) * inv_eps + loga[None, :]
            mmax = m.max(axis=1)
            f = 0.5 * (f - eps_k * (mmax + np.log(np.exp(m - mmax[:, None]).sum(axis=1))))
            total_iters += 1
            if final_stage and ((it + 1) % check_every == 0 or it == budget - 1):
                plan = np.exp(_log_plan(loga, loga, f, f, c, inv_eps))
                err = np.abs(plan.sum(axis=1) - a).max()
                if err < tol:
                    converged = True
                    break
        if converged:
            break

    plan = np.exp(_log_plan(loga, loga, f, f, c, 1.0 / epsilon))
    err = max(np.abs(plan.sum(axis=1) - a).max(), np.abs(plan.sum(axis=0) - a).max())
    return Coupling(plan, f, f.copy(), epsilon, total_iters, bool(err < tol), float(err))


def plan_position_grads(plan: np.ndarray, x: np.ndarray, y: np.ndarray,
                        metric: str, cost_scale: float = 1.0):
    """Fixed-plan gradients of <C(x, y), pi> with respect to both point sets.

    `cost_scale` is the frozen factor the cost matrix was divided by.
    Coincident pairs under the euclidean metric contribute a zero
    subgradient.
    """
    if metric == "sq_euclidean":
        gs = 2.0 * (plan.sum(axis=1)[:, None] * x - plan @ y)
        gt = 2.0 * (plan.sum(axis=0)[:, None] * y - plan.T @ x)
    elif metric == "euclidean":
        sq_x = np.sum(x * x, axis=1)
        sq_y = np.sum(y * y, axis=1)
        d = np.sqrt(np.maximum(sq_x[:, None] + sq_y[None, :] - 2.0 * (x @ y.T), 0.0))
        w = plan / np.maximum(d, _TINY)
        w[d <= 0.0] = 0.0
        gs = w.sum(axis=1)[:, None] * x - w @ y
        gt = w.sum(axis=0)[:, None] * y - w.T @ x
    else:
        raise ValueError(f"unknown metric {metric!r}")
    return gs / cost_scale, gt / cost_scale


def symmetric_cost_chain(w: np.ndarray, pts: np.ndarray, metric: str) -> np.ndarray:
    """Gradient of sum_ij w_ij c(y_i, y_j) in the points, for symmetric w."""
    if metric == "sq_euclidean":
        rs = w.sum(axis=1)
        return 4.0 * (rs[:, None] * pts - w @ pts)
    if metric == "euclidean":
        sq = np.sum(pts * pts, axis=1)
        d = np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2.0 * (pts @ pts.T), 0.0))
        v = w / np.maximum(d, _TINY)
        v[d <= 0.0] = 0.0
        rs = v.sum(axis=1)
        return 2.0 * (rs[:, None] * pts - v @ pts)
    raise ValueError(f"unknown metric {metric!r}")


def sinkhorn(c: np.ndarray, a: np.ndarray, b: np.ndarray, epsilon: float,
             max_iter: int = 2000, tol: float = 1e-6,
             source_points: np.ndarray | None = None,
             target_points: np.ndarray | None = None,
             metric: str = "sq_euclidean", cost_scale: float = 1.0,
             init: tuple[np.ndarray, np.ndarray] | None = None,
             anneal: bool = False, stabilized: bool = False,
             debug_dir: str | None = None) -> OtResult:
    """Entropic OT between weighted point sets given their cost matrix.

    Returns the linear cost <C, pi>, the entropy-included value, and (when
    `source_points`/`target_points` are given) the fixed-plan position
    gradients.
    """
    coupling = sinkhorn_coupling(c, a, b, epsilon, max_iter=max_iter, tol=tol,
                                 init=init, anneal=anneal, stabilized=stabilized)
    plan = coupling.plan
    cost = float(np.sum(plan * c))
    reg_cost = float(coupling.potential_source @ np.asarray(a, dtype=np.float64)
                     + coupling.potential_target @ np.asarray(b, dtype=np.float64))
    gs = gt = None
    if source_points is not None and target_points is not None:
        gs, gt = plan_position_grads(plan, np.asarray(source_points, dtype=np.float64),
                                     np.asarray(target_points, dtype=np.float64),
                                     metric, cost_scale)
    if debug_dir is not None:
        dump_coupling(coupling, debug_dir, "sinkhorn")
    return OtResult(cost, reg_cost, coupling, gs, gt)


def sinkhorn_divergence(a: PointCloud, b: PointCloud, metric: str = "sq_euclidean",
                        epsilon: float = 0.1, max_iter: int = 2000, tol: float = 1e-6,
                        scaling: str = "none", anneal: bool = False,
                        stabilized: bool = False, with_grads: bool = True,
                        init: tuple | None = None) -> DivergenceResult:
    """Debiased divergence S = OT(a,b) - OT(a,a)/2 - OT(b,b)/2.

    Each term is the entropy-included regularized cost. With `scaling`,
    one scale factor is computed from the raw cross matrix and divides all
    three cost matrices (frozen for gradient purposes). Solver
    non-convergence is propagated through `converged`.
    """
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: d={a.dim} vs d={b.dim}")
    # Canonical argument orientation: the divergence is symmetric, so solve
    # one fixed orientation and swap the outputs back. This makes
    # S(a, b) == S(b, a) exact rather than solver-tolerance-close.
    if (a.n, a.points.tobytes()) > (b.n, b.points.tobytes()):
        res = sinkhorn_divergence(b, a, metric=metric, epsilon=epsilon,
                                  max_iter=max_iter, tol=tol, scaling=scaling,
                                  anneal=anneal, stabilized=stabilized,
                                  with_grads=with_grads,
                                  init=None if init is None else
                                  (init[1], init[0], init[3], init[2]))
        return DivergenceResult(res.value, res.grad_b, res.grad_a, res.converged,
                                res.term_ab, res.term_bb, res.term_aa,
                                res.scale_factor,
                                None if res.potentials is None else
                                (res.potentials[1], res.potentials[0],
                                 res.potentials[3], res.potentials[2]))
    c_ab = cross_cost(a, b, metric, "none").values
    if scaling == "mean":
        s = float(c_ab.mean()) or 1.0
    elif scaling == "max":
        s = float(c_ab.max()) or 1.0
    elif scaling == "none":
        s = 1.0
    else:
        raise ValueError(f"unknown scaling {scaling!r}")
    c_ab = c_ab / s
    c_aa = pairwise_cost(a, metric, "none").values / s
    c_bb = pairwise_cost(b, metric, "none").values / s

    wa, wb = a.weights, b.weights
    init_ab = (init[0], init[1]) if init is not None else None
    init_aa = init[2] if init is not None else None
    init_bb = init[3] if init is not None else None
    identical = (a.n == b.n and a.points.tobytes() == b.points.tobytes()
                 and np.array_equal(wa, wb))
    if identical:
        # the cross problem is the self problem; the symmetric solve makes
        # S(mu, mu) == 0 exact instead of solver-residual-sized
        res_ab = _symmetric_coupling(c_ab, wa, epsilon, max_iter=max_iter, tol=tol,
                                     anneal=anneal, stabilized=stabilized,
                                     init=None if init_ab is None else init_ab[0])
    else:
        res_ab = sinkhorn_coupling(c_ab, wa, wb, epsilon, max_iter=max_iter, tol=tol,
                                   anneal=anneal, stabilized=stabilized, init=init_ab)
    res_aa = _symmetric_coupling(c_aa, wa, epsilon, max_iter=max_iter, tol=tol,
                                 anneal=anneal, stabilized=stabilized, init=init_aa)
    res_bb = _symmetric_coupling(c_bb, wb, epsilon, max_iter=max_iter, tol=tol,
                                 anneal=anneal, stabilized=stabilized, init=init_bb)

    term_ab = float(res_ab.potential_source @ wa + res_ab.potential_target @ wb)
    term_aa = float(res_aa.potential_source @ wa + res_aa.potential_target @ wa)
    term_bb = float(res_bb.potential_source @ wb + res_bb.potential_target @ wb)
    value = term_ab - 0.5 * term_aa - 0.5 * term_bb

    grad_a = grad_b = None
    if with_grads:
        gs_ab, gt_ab = plan_position_grads(res_ab.plan, a.points, b.points, metric, s)
        gs_aa, gt_aa = plan_position_grads(res_aa.plan, a.points, a.points, metric, s)
        gs_bb, gt_bb = plan_position_grads(res_bb.plan, b.points, b.points, metric, s)
        grad_a = gs_ab - 0.5 * (gs_aa + gt_aa)
        grad_b = gt_ab - 0.5 * (gs_bb + gt_bb)

    converged = res_ab.converged and res_aa.converged and res_bb.converged
    pots = (res_ab.potential_source, res_ab.potential_target,
            res_aa.potential_source, res_bb.potential_source)
    return DivergenceResult(value, grad_a, grad_b, converged,
                            term_ab, term_aa, term_bb, s, pots)


def entropic_gw(cx: np.ndarray, cy: np.ndarray, a: np.ndarray, b: np.ndarray,
                epsilon: float, outer_iter: int = 100, tol: float = 1e-6,
                inner_max_iter: int = 2000, inner_tol: float = 1e-6,
                anneal: bool = False, anneal_inner_iter: int = 30,
                anneal_factor: float = 0.5,
                stabilized: bool = False,
                debug_dir: str | None = None) -> GwResult:
    """Entropic quadratic-loss coupling between two intra-space geometries.

    Mirror descent a la projected iterations: linearize the quadratic
    objective at the current plan into the pseudo-cost
    ``constC - 2 Cx @ pi @ Cy^T``, solve a Sinkhorn subproblem at `epsilon`
    (warm-started from the previous potentials), and repeat until the plan
    stops moving. With `anneal`, subproblem epsilons follow a geometric
    ladder down to the target before convergence is assessed.

    The reported cost is the quadratic objective evaluated from the actual
    plan's row/column sums, so it agrees with the O(n^2 m^2) direct sum to
    floating-point accuracy even on unconverged plans.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    cx = np.asarray(cx, dtype=np.float64)
    cy = np.asarray(cy, dtype=np.float64)
    for name, m in (("cx", cx), ("cy", cy)):
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"{name} must be square, got shape {m.shape}")
        if np.max(np.abs(m - m.T), initial=0.0) > 1e-9:
            raise ValueError(f"{name} must be symmetric")
    a = _validate_weights(a, "a")
    b = _validate_weights(b, "b")
    if cx.shape[0] != a.size or cy.shape[0] != b.size:
        raise ValueError("cost matrix sizes must match the weight vectors")

    const = ((cx ** 2) @ a)[:, None] + ((cy ** 2) @ b)[None, :]
    plan = np.outer(a, b)
    f = np.zeros(a.size)
    g = np.zeros(b.size)

    eps_schedule = []
    if anneal:
        span = float(max(cx.max() - cx.min(), cy.max() - cy.min()))
        e = span / 8.0
        while e > 2.0 * epsilon:
            eps_schedule.append(e)
            e *= anneal_factor

    total_inner = 0
    outer_done = 0
    converged = False
    for k in range(outer_iter):
        eps_k = eps_schedule[k] if k < len(eps_schedule) else epsilon
        budget = anneal_inner_iter if k < len(eps_schedule) else inner_max_iter
        pseudo = const - 2.0 * (cx @ plan @ cy)
        sub = sinkhorn_coupling(pseudo, a, b, eps_k, max_iter=budget, tol=inner_tol,
                                init=(f, g), stabilized=stabilized)
        f, g = sub.potential_source, sub.potential_target
        total_inner += sub.iterations_used
        err = float(np.abs(sub.plan - plan).max())
        plan = sub.plan
        outer_done = k + 1
        if eps_k == epsilon and err < tol:
            converged = True
            break

    r = plan.sum(axis=1)
    cvec = plan.sum(axis=0)
    cost = float(r @ (cx ** 2) @ r + cvec @ (cy ** 2) @ cvec
                 - 2.0 * np.sum(plan * (cx @ plan @ cy)))
    marg = max(np.abs(r - a).max(), np.abs(cvec - b).max())
    coupling = Coupling(plan, f, g, epsilon, total_inner, bool(marg < inner_tol), float(marg))
    if debug_dir is not None:
        dump_coupling(coupling, debug_dir, "gw")
    return GwResult(cost, coupling, total_inner, outer_done, converged)


def distortion_sq(cost_source: CostMatrix | np.ndarray, mapped: PointCloud,
                  metric: str | None = None, scaling: str | None = None,
                  with_grad: bool = True) -> DistortionResult:
    """Mean squared deviation between source costs and mapped-image costs.

    ``(1/n^2) sum_ij (Cx_ij - Cmapped_ij)^2`` where the mapped-side matrix is
    recomputed here with the same metric/scaling convention as
    `cost_source` (overridable). The gradient with respect to the mapped
    points is exact for unscaled costs and holds the recomputed scale factor
    fixed otherwise.
    """
    if isinstance(cost_source, CostMatrix):
        cs = cost_source.values
        metric = metric or cost_source.metric
        scaling = scaling or cost_source.scaling
    else:
        cs = np.asarray(cost_source, dtype=np.float64)
        if metric is None:
            raise ValueError("metric is required when cost_source is a plain array")
        scaling = scaling or "none"
    if cs.shape[0] != mapped.n:
        raise ValueError(f"size mismatch: cost is {cs.shape[0]}x{cs.shape[1]}, "
                         f"mapped cloud has n={mapped.n}")
    cm = pairwise_cost(mapped, metric, scaling)
    resid = cm.values - cs
    n = mapped.n
    value = float(np.sum(resid * resid) / (n * n))
    grad = None
    if with_grad:
        w = (2.0 / (n * n)) * resid
        grad = symmetric_cost_chain(w, mapped.points, metric) / cm.scale_factor
    return DistortionResult(value, grad, cm.scale_factor)


def gromov_monge_gap(source: PointCloud, mapped: PointCloud, metric: str = "euclidean",
                     epsilon: float = 1e-3, scaling: str = "max",
                     outer_iter: int = 100, tol: float = 1e-6,
                     inner_max_iter: int = 2000, inner_tol: float = 1e-6,
                     anneal: bool = False, anneal_inner_iter: int = 30,
                     anneal_factor: float = 0.5,
                     stabilized: bool = False,
                     with_grad: bool = True) -> GmGapResult:
    """Distortion of the candidate map minus the entropic-GW cost.

    Zero (up to entropic bias) exactly when the map is distortion-optimal
    onto its own image. Components and solver flags stay accessible on the
    result; no clamping of small negative values.
    """
    if source.n != mapped.n:
        raise ValueError(f"clouds must have equal n, got {source.n} and {mapped.n}")
    cs = pairwise_cost(source, metric, scaling)
    cm = pairwise_cost(mapped, metric, scaling)
    n = source.n
    resid = cm.values - cs.values
    dis = float(np.sum(resid * resid) / (n * n))

    w = np.full(n, 1.0 / n)
    gw = entropic_gw(cs.values, cm.values, w, w, epsilon, outer_iter=outer_iter,
                     tol=tol, inner_max_iter=inner_max_iter, inner_tol=inner_tol,
                     anneal=anneal, anneal_inner_iter=anneal_inner_iter,
                     anneal_factor=anneal_factor, stabilized=stabilized)
    gap = dis - gw.cost

    grad = None
    if with_grad:
        plan = gw.coupling.plan
        cvec = plan.sum(axis=0)
        w_dis = (2.0 / (n * n)) * resid
        w_gw = 2.0 * (cm.values * np.outer(cvec, cvec) - plan.T @ cs.values @ plan)
        grad = symmetric_cost_chain(w_dis - w_gw, mapped.points, metric) / cm.scale_factor
    return GmGapResult(gap, dis, gw.cost, grad, gw, cs.scale_factor, cm.scale_factor)


def dump_coupling(coupling: Coupling, directory: str, tag: str) -> None:
    """Diagnostic CSV dump of a plan and its potentials."""
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, f"{tag}_plan.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in coupling.plan:
            writer.writerow([repr(float(v)) for v in row])
    with open(os.path.join(directory, f"{tag}_potentials.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["side", "index", "value"])
        for i, v in enumerate(coupling.potential_source):
            writer.writerow(["source", i, repr(float(v))])
        for j, v in enumerate(coupling.potential_target):
            writer.writerow(["target", j, repr(float(v))])
