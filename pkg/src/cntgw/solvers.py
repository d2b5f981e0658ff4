"""Outer solvers for entropic Gromov-Wasserstein with CNT base costs.

Three families share one alternate-minimization engine:

* ``solve_cnt_gw`` iterates in feature space: a linear-operator update
  ``Gamma = X^T pi Y`` alternates with an entropic OT step whose cost is the
  squared distance between augmented features, run at temperature eps/8. The
  plan stays implicit throughout, so memory is linear in the support sizes.
* ``solve_kernel_gw`` iterates on dense plans with the kernel-trick cost
  ``-4 diag(K_X) diag(K_Y)^T - 16 K_X pi K_Y`` at temperature eps.
* ``solve_entropic_gw`` is the classical baseline: the full loss gradient
  ``2 S_X(i) + 2 S_Y(j) - 4 (C_X pi C_Y)_ij`` as the per-step cost at
  temperature eps.

On a cost of negative type the three produce the same iterates (up to inner
truncation), which the tests check directly. ``solve_adaptive`` wraps any of
them with an inner-budget doubling rule, and ``solve_multiscale`` runs the
feature-space solver on a clustered coarsening first and upsamples.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .kernels import EmbeddedMeasure, kernel_from_cost
from .measures import BLOCK_SIZE, DenseCoupling, ImplicitCoupling
from .sinkhorn import DenseCost, SinkhornConfig, SquaredEuclideanCost, sinkhorn

MAX_DENSE_ENTRIES = 25_000_000
ADAPTIVE_CAP = 2**14
_DIVERGENCE_PATIENCE = 5

INIT_KINDS = ("product", "random", "gamma", "coupling", "landmarks")


class SolverError(RuntimeError):
    """An outer solve failed (divergence, budget cap, degenerate state)."""


@dataclass(frozen=True)
class EgwConfig:
    """Outer-loop configuration shared by all solver families.

    ``inner`` carries the Sinkhorn mode and budget; its temperature field is
    overridden by each solver (eps/8 on the feature-space path, eps on the
    dense paths), so only the mode/budget/annealing fields matter here.

    Init kinds: ``product`` (Gamma = 0, equivalently the product plan),
    ``random`` (Gaussian operator scaled by
    sqrt(trace Cov_src * trace Cov_tgt / (D E)) times ``init_scale``),
    ``gamma`` (explicit operator), ``coupling`` (explicit plan; dense solvers
    start from it directly, the feature-space solver starts from its
    operator projection), and ``landmarks`` (index pairs (i, j) summed into
    Gamma_0 = sum_k X_i_k Y_j_k^T).
    """

    eps: float
    inner: SinkhornConfig
    max_outer: int = 200
    delta_outer: float = 1e-5
    init: str = "product"
    init_gamma: np.ndarray | None = field(default=None, repr=False)
    init_coupling: np.ndarray | None = field(default=None, repr=False)
    init_pairs: np.ndarray | None = field(default=None, repr=False)
    init_scale: float = 1.0
    seed: int = 0
    final_anneal: float | None = None
    record_iterates: bool = False
    max_dense_entries: int = MAX_DENSE_ENTRIES
    feasibility_tol: float = 1e-4

    def __post_init__(self):
        if not (self.eps > 0.0 and np.isfinite(self.eps)):
            raise ValueError(f"eps must be positive and finite, got {self.eps!r}")
        if self.max_outer < 1:
            raise ValueError(f"max_outer must be >= 1, got {self.max_outer!r}")
        if not (self.delta_outer > 0.0):
            raise ValueError(f"delta_outer must be positive, got {self.delta_outer!r}")
        if self.init not in INIT_KINDS:
            raise ValueError(f"init must be one of {INIT_KINDS}, got {self.init!r}")
        if self.init == "gamma" and self.init_gamma is None:
            raise ValueError("init='gamma' needs init_gamma")
        if self.init == "coupling" and self.init_coupling is None:
            raise ValueError("init='coupling' needs init_coupling")
        if self.init == "landmarks" and self.init_pairs is None:
            raise ValueError("init='landmarks' needs init_pairs")
        if self.final_anneal is not None and not (self.final_anneal > 0.0):
            raise ValueError(f"final_anneal must be positive, got {self.final_anneal!r}")
        if not (self.feasibility_tol > 0.0):
            raise ValueError(f"feasibility_tol must be positive, got {self.feasibility_tol!r}")


def make_config(
    eps: float,
    *,
    mode: str = "symmetrized",
    n_inner: int | None = None,
    threshold: float | None = None,
    max_inner: int = 10000,
    **kwargs,
) -> EgwConfig:
    """Convenience constructor bundling the inner Sinkhorn configuration."""
    inner = SinkhornConfig(
        eps=eps, mode=mode, n_inner=n_inner, threshold=threshold, max_inner=max_inner
    )
    return EgwConfig(eps=eps, inner=inner, **kwargs)


@dataclass
class SolveTrace:
    """Per-outer-step log: the exact columns the CLI writes to trace CSVs."""

    steps: list = field(default_factory=list)
    objectives: list = field(default_factory=list)
    gamma_deltas: list = field(default_factory=list)
    marginal_errs: list = field(default_factory=list)
    inner_iters: list = field(default_factory=list)
    elapsed_s: list = field(default_factory=list)

    def append(self, step, objective, gamma_delta, marginal_err, inner, elapsed):
        self.steps.append(int(step))
        self.objectives.append(float(objective))
        self.gamma_deltas.append(float(gamma_delta))
        self.marginal_errs.append(float(marginal_err))
        self.inner_iters.append(int(inner))
        self.elapsed_s.append(float(elapsed))

    def __len__(self):
        return len(self.steps)

    def to_csv(self, path, header=None) -> None:
        with open(path, "w", encoding="utf-8") as handle:
            if header:
                for line in str(header).splitlines():
                    handle.write(f"# {line}\n")
            handle.write("step,objective,gamma_delta,marginal_err,inner_iters,elapsed_s\n")
            for row in zip(
                self.steps,
                self.objectives,
                self.gamma_deltas,
                self.marginal_errs,
                self.inner_iters,
                self.elapsed_s,
            ):
                handle.write(
                    f"{row[0]},{row[1]:.17g},{row[2]:.17g},{row[3]:.17g},{row[4]},{row[5]:.6f}\n"
                )


@dataclass
class EgwResult:
    """Outcome of an outer solve.

    ``gamma`` is None for the dense families (they never build features).
    ``value`` repeats the last objective estimate in the trace. ``iterates``
    holds per-step dense plans when recording was requested, ``schedule`` the
    adaptive inner budgets, and ``coarse`` the coarse-stage result of a
    multiscale run.
    """

    gamma: np.ndarray | None
    coupling: object
    trace: SolveTrace
    value: float
    converged: bool
    iterates: list | None = None
    schedule: list | None = None
    coarse: "EgwResult | None" = None


@dataclass
class _StepStats:
    objective: float
    gamma_delta: float
    marginal_err: float
    inner_iters: int


def random_gamma(src: EmbeddedMeasure, tgt: EmbeddedMeasure, rng, scale: float = 1.0) -> np.ndarray:
    """Gaussian operator draw at the canonical landscape scale."""
    d, e = src.dim, tgt.dim
    base = math.sqrt(src.trace_second_moment() * tgt.trace_second_moment() / (d * e))
    return rng.standard_normal((d, e)) * (base * scale)


def gamma_step(coupling, src: EmbeddedMeasure, tgt: EmbeddedMeasure) -> np.ndarray:
    """Closed-form operator update Gamma = X^T pi Y, plan kept implicit."""
    x, y = src.features, tgt.features
    out = np.zeros((src.dim, tgt.dim))
    for i0, i1, block in coupling.row_blocks():
        out += x[i0:i1].T @ (block @ y)
    return out


def pi_step(
    gamma: np.ndarray,
    src: EmbeddedMeasure,
    tgt: EmbeddedMeasure,
    eps: float,
    inner: SinkhornConfig,
):
    """Plan update: EOT between augmented features at temperature eps / 8.

    The target is mapped through the augmented operator, ``(Gamma Y_j, s_j)``,
    so the cost ``||Xbar_i - Zbar_j||^2`` carries both the linear term and the
    self-interaction column.

    When no warm start is given, the potentials start at the separable part
    of the cost (``||Xbar_i||^2`` and ``||Zbar_j||^2``) rather than at zero.
    That leaves only the interaction part of the cost for Sinkhorn to absorb,
    which makes a truncated run reproduce the kernel-trick solver's iterates
    sweep for sweep instead of carrying a separable bias; the converged
    solution is the same either way.
    """
    zbar = np.column_stack([tgt.features @ gamma.T, tgt.half_sq_norms])
    xbar = src.augmented()
    cost = SquaredEuclideanCost(xbar, zbar)
    if inner.warm_start is None:
        inner = inner.with_warm_start((xbar**2).sum(axis=1), (zbar**2).sum(axis=1))
    return sinkhorn(src.weights, tgt.weights, cost, inner.with_temperature(eps / 8.0))


def _cnt_reductions(coupling: ImplicitCoupling, src: EmbeddedMeasure, tgt: EmbeddedMeasure):
    """One fused pass over an implicit plan.

    Returns (pi @ Y, sum pi s_i s_j, KL, unweighted marginal error).
    """
    y = tgt.features
    s_x, s_y = src.half_sq_norms, tgt.half_sq_norms
    pi_y = np.zeros((src.n, tgt.dim))
    col = np.zeros(tgt.n)
    sigma_ss = 0.0
    kl = 0.0
    row_err = 0.0
    inv_eps = 1.0 / coupling.eps_eff
    f, g = coupling.f, coupling.g
    log_a = np.log(coupling.source_weights)
    log_bg = np.log(coupling.target_weights) + g * inv_eps
    n = src.n
    for i0 in range(0, n, BLOCK_SIZE):
        i1 = min(i0 + BLOCK_SIZE, n)
        c = coupling.cost.rows(i0, i1)
        log_ratio = (f[i0:i1, None] + g[None, :] - c) * inv_eps
        block = np.exp((log_a[i0:i1] + f[i0:i1] * inv_eps)[:, None] + log_bg[None, :] - c * inv_eps)
        pi_y[i0:i1] = block @ y
        rows = block.sum(axis=1)
        col += block.sum(axis=0)
        sigma_ss += float(s_x[i0:i1] @ (block @ s_y))
        kl += float((block * log_ratio).sum())
        row_err += float(np.abs(rows - coupling.source_weights[i0:i1]).sum())
    err = row_err + float(np.abs(col - coupling.target_weights).sum())
    return pi_y, sigma_ss, kl, err


def egw_objective(gamma, coupling, src: EmbeddedMeasure, tgt: EmbeddedMeasure, eps: float) -> float:
    """EGW estimate C + 8 F(Gamma, pi) for any operator/plan pair.

    The inner product against the augmented operator splits into
    ``tr(Gamma^T X^T pi Y) + sum_ij pi_ij s_i s_j``; the plan is consumed
    block by block.
    """
    from .divergence import constant_value

    if isinstance(coupling, ImplicitCoupling):
        pi_y, sigma_ss, kl, _ = _cnt_reductions(coupling, src, tgt)
        xt_pi_y = src.features.T @ pi_y
    else:
        from .measures import kl_divergence

        pi = coupling.matrix
        pi_y = pi @ tgt.features
        xt_pi_y = src.features.T @ pi_y
        sigma_ss = float(src.half_sq_norms @ pi @ tgt.half_sq_norms)
        kl = kl_divergence(coupling)
    cross = float((gamma * xt_pi_y).sum()) + sigma_ss
    gamma_sq = float((gamma**2).sum())
    const = constant_value(src, tgt)
    return const + 8.0 * (gamma_sq + (eps / 8.0) * kl - 2.0 * cross)


class _CntGwState:
    """Feature-space alternate minimization with implicit plans."""

    def __init__(self, src, tgt, cfg, warm_potentials=None):
        self.src, self.tgt, self.cfg = src, tgt, cfg
        if cfg.record_iterates and src.n * tgt.n > cfg.max_dense_entries:
            raise ValueError(
                f"recording iterates would densify {src.n * tgt.n} entries per step, "
                f"beyond the memory guard ({cfg.max_dense_entries})"
            )
        self.gamma = _initial_gamma(src, tgt, cfg)
        self.psi = self._column_norms(self.gamma)
        if warm_potentials is None:
            # start the potentials at the separable part of the cost so only
            # the interaction part is left for the inner loop (see pi_step)
            self.f = (src.augmented() ** 2).sum(axis=1)
            self.g = np.array(self.psi)
        else:
            self.f = np.array(warm_potentials[0], dtype=np.float64)
            self.g = np.array(warm_potentials[1], dtype=np.float64)
        from .divergence import constant_value

        self.constant = constant_value(src, tgt)
        self.coupling = None
        self.record = []

    def _column_norms(self, gamma) -> np.ndarray:
        zbar = np.column_stack([self.tgt.features @ gamma.T, self.tgt.half_sq_norms])
        return (zbar**2).sum(axis=1)

    def step(self, inner_budget=None, anneal_from=None) -> _StepStats:
        cfg = self.cfg
        # the column-separable part of the cost moved with Gamma since the
        # last step; shift the warm-start potential along with it
        psi_now = self._column_norms(self.gamma)
        inner = cfg.inner.with_warm_start(self.f, self.g + (psi_now - self.psi))
        self.psi = psi_now
        if inner_budget is not None:
            inner = replace(inner, n_inner=inner_budget, threshold=None)
        if anneal_from is not None:
            inner = replace(inner, anneal_from=anneal_from)
        res = pi_step(self.gamma, self.src, self.tgt, cfg.eps, inner)
        coupling = res.coupling
        self.f, self.g = coupling.f, coupling.g
        pi_y, sigma_ss, kl, err = _cnt_reductions(coupling, self.src, self.tgt)
        new_gamma = self.src.features.T @ pi_y
        objective = self.constant + 8.0 * (
            -float((new_gamma**2).sum()) + (cfg.eps / 8.0) * kl - 2.0 * sigma_ss
        )
        delta = float(np.linalg.norm(new_gamma - self.gamma))
        self.gamma = new_gamma
        self.coupling = coupling
        if cfg.record_iterates:
            self.record.append(coupling.densify().matrix)
        return _StepStats(objective, delta, err, res.iterations)

    def result(self, trace, converged, schedule=None) -> EgwResult:
        return EgwResult(
            gamma=self.gamma,
            coupling=self.coupling,
            trace=trace,
            value=trace.objectives[-1] if len(trace) else math.nan,
            converged=converged,
            iterates=self.record if self.cfg.record_iterates else None,
            schedule=schedule,
        )


def _initial_gamma(src: EmbeddedMeasure, tgt: EmbeddedMeasure, cfg: EgwConfig) -> np.ndarray:
    if cfg.init == "product":
        return np.zeros((src.dim, tgt.dim))
    if cfg.init == "random":
        rng = np.random.default_rng(cfg.seed)
        return random_gamma(src, tgt, rng, cfg.init_scale)
    if cfg.init == "gamma":
        gamma = np.asarray(cfg.init_gamma, dtype=np.float64)
        if gamma.shape != (src.dim, tgt.dim):
            raise ValueError(
                f"init_gamma shape {gamma.shape} does not match ({src.dim}, {tgt.dim})"
            )
        return np.array(gamma)
    if cfg.init == "coupling":
        raw = getattr(cfg.init_coupling, "matrix", cfg.init_coupling)
        pi = np.asarray(raw, dtype=np.float64)
        if pi.shape != (src.n, tgt.n):
            raise ValueError(f"init_coupling shape {pi.shape} does not match ({src.n}, {tgt.n})")
        return src.features.T @ (pi @ tgt.features)
    # landmarks
    pairs = np.asarray(cfg.init_pairs)
    if pairs.ndim != 2 or pairs.shape[1] != 2:
        raise ValueError("init_pairs must be an array of (source, target) index pairs")
    gamma = np.zeros((src.dim, tgt.dim))
    for i, j in pairs:
        if not (0 <= i < src.n and 0 <= j < tgt.n):
            raise ValueError(f"landmark pair ({i}, {j}) out of range")
        gamma += np.outer(src.features[int(i)], tgt.features[int(j)])
    return gamma


class _DenseState:
    """Shared machinery for the kernel-trick and classical baselines."""

    family = "dense"

    def __init__(self, src_cost, tgt_cost, a, b, cfg):
        self.cfg = cfg
        self.a = np.asarray(a, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)
        n, m = self.a.size, self.b.size
        guard = cfg.max_dense_entries
        for label, entries in (("plan", n * m), ("source kernel", n * n), ("target kernel", m * m)):
            if entries > guard:
                raise ValueError(
                    f"{label} would hold {entries} entries, beyond the memory guard "
                    f"({guard}); use the feature-space solver or raise max_dense_entries"
                )
        self.cx = np.asarray(src_cost, dtype=np.float64)
        self.cy = np.asarray(tgt_cost, dtype=np.float64)
        if self.cx.shape != (n, n) or self.cy.shape != (m, m):
            raise ValueError("cost matrix shapes do not match the weights")
        self.kx = kernel_from_cost(self.cx, self.a).matrix
        self.ky = kernel_from_cost(self.cy, self.b).matrix
        self.dx = np.diag(self.kx).copy()
        self.dy = np.diag(self.ky).copy()
        # constant term evaluated on the cost matrices directly
        tx = float(self.a @ self.dx)
        ty = float(self.b @ self.dy)
        self.constant = (
            float(self.a @ (self.cx**2) @ self.a)
            + float(self.b @ (self.cy**2) @ self.b)
            - 4.0 * tx * ty
        )
        self.pi = self._initial_plan()
        self.sandwich = self.kx @ self.pi @ self.ky  # K_X pi K_Y, reused across steps
        self.f = np.zeros(n)
        self.g = np.zeros(m)
        self.coupling = None
        self.record = []
        self.last_inner_err = 0.0

    def _initial_plan(self) -> np.ndarray:
        cfg = self.cfg
        if cfg.init == "product":
            return np.outer(self.a, self.b)
        if cfg.init == "coupling":
            raw = getattr(cfg.init_coupling, "matrix", cfg.init_coupling)
            pi = np.asarray(raw, dtype=np.float64)
            if pi.shape != (self.a.size, self.b.size):
                raise ValueError("init_coupling shape does not match the weights")
            return np.array(pi)
        raise ValueError(
            f"init={cfg.init!r} is not available for dense solvers; use 'product' or 'coupling'"
        )

    def _step_cost(self) -> np.ndarray:
        raise NotImplementedError

    def _objective(self, pi_new, sandwich_new, kl) -> float:
        raise NotImplementedError

    def _warm_start(self):
        return self.f, self.g

    def step(self, inner_budget=None, anneal_from=None) -> _StepStats:
        cfg = self.cfg
        inner = cfg.inner.with_warm_start(*self._warm_start())
        if inner_budget is not None:
            inner = replace(inner, n_inner=inner_budget, threshold=None)
        if anneal_from is not None:
            inner = replace(inner, anneal_from=anneal_from)
        cost = DenseCost(self._step_cost())
        res = sinkhorn(self.a, self.b, cost, inner.with_temperature(cfg.eps))
        self.f, self.g = res.coupling.f, res.coupling.g
        pi_new = np.empty((self.a.size, self.b.size))
        for i0, i1, block in res.coupling.row_blocks():
            pi_new[i0:i1] = block
        from .measures import kl_divergence

        kl = kl_divergence(res.coupling)
        sandwich_new = self.kx @ pi_new @ self.ky
        # ||Gamma(pi') - Gamma(pi)||_HS via the kernel trick
        delta_sq = (
            float((pi_new * sandwich_new).sum())
            - 2.0 * float((pi_new * self.sandwich).sum())
            + float((self.pi * self.sandwich).sum())
        )
        objective = self._objective(pi_new, sandwich_new, kl)
        self.pi = pi_new
        self.sandwich = sandwich_new
        self.coupling = res.coupling
        self.last_inner_err = res.marginal_err
        if cfg.record_iterates:
            self.record.append(np.array(pi_new))
        return _StepStats(
            objective, math.sqrt(max(delta_sq, 0.0)), res.marginal_err, res.iterations
        )

    def result(self, trace, converged, schedule=None) -> EgwResult:
        try:
            final = DenseCoupling(self.pi, self.a, self.b)
        except ValueError as exc:
            raise SolverError(
                f"final plan failed validation ({exc}); raise n_inner or use the "
                "adaptive wrapper"
            ) from exc
        return EgwResult(
            gamma=None,
            coupling=final,
            trace=trace,
            value=trace.objectives[-1] if len(trace) else math.nan,
            converged=converged,
            iterates=self.record if self.cfg.record_iterates else None,
            schedule=schedule,
        )


class _KernelGwState(_DenseState):
    def _step_cost(self) -> np.ndarray:
        return -4.0 * np.outer(self.dx, self.dy) - 16.0 * self.sandwich

    def _objective(self, pi_new, sandwich_new, kl) -> float:
        gamma_sq = float((pi_new * sandwich_new).sum())
        sigma_ss = 0.25 * float(self.dx @ pi_new @ self.dy)
        return self.constant + 8.0 * (-gamma_sq + (self.cfg.eps / 8.0) * kl - 2.0 * sigma_ss)


class _EntropicGwState(_DenseState):
    def __init__(self, src_cost, tgt_cost, a, b, cfg):
        super().__init__(src_cost, tgt_cost, a, b, cfg)
        self.sx = (self.cx**2) @ self.a
        self.sy = (self.cy**2) @ self.b
        self.rx = self.cx @ self.a
        self.ry = self.cy @ self.b
        self.mx = float(self.a @ self.rx)
        self.my = float(self.b @ self.ry)
        self.cxy_sandwich = self.cx @ self.pi @ self.cy
        # seed the potentials with the separable offset between this step cost
        # and the kernel-trick cost at the same plan; shifting the carried
        # potentials by its change each step keeps truncated runs on the
        # kernel solver's trajectory (the two costs agree up to this offset
        # whenever the plan satisfies its marginals)
        self._u, self._v = self._separable_offset(self.pi)
        self.f = np.array(self._u)
        self.g = np.array(self._v)

    def _separable_offset(self, pi):
        u = 2.0 * self.sx - 4.0 * (self.cx @ (pi @ self.ry)) + 2.0 * self.my * self.rx
        v = 2.0 * self.sy - 4.0 * (self.cy @ (pi.T @ self.rx)) + 2.0 * self.mx * self.ry
        return u, v

    def _warm_start(self):
        u, v = self._separable_offset(self.pi)
        warm = self.f + (u - self._u), self.g + (v - self._v)
        self._u, self._v = u, v
        return warm

    def _step_cost(self) -> np.ndarray:
        return 2.0 * self.sx[:, None] + 2.0 * self.sy[None, :] - 4.0 * self.cxy_sandwich

    def _objective(self, pi_new, sandwich_new, kl) -> float:
        self.cxy_sandwich = self.cx @ pi_new @ self.cy
        mu = pi_new.sum(axis=1)
        nu = pi_new.sum(axis=0)
        quartic = (
            float(mu @ (self.cx**2) @ mu)
            + float(nu @ (self.cy**2) @ nu)
            - 2.0 * float((pi_new * self.cxy_sandwich).sum())
        )
        return quartic + self.cfg.eps * kl


def _run_outer(state, cfg: EgwConfig, adaptive: bool = False) -> EgwResult:
    trace = SolveTrace()
    start = time.perf_counter()
    prev = None
    schedule = []
    budget = None
    if adaptive:
        if cfg.inner.n_inner is None:
            raise ValueError("the adaptive wrapper needs a fixed-budget inner configuration")
        budget = cfg.inner.n_inner
    consecutive_up = 0
    converged = False
    for step_index in range(1, cfg.max_outer + 1):
        stats = state.step(inner_budget=budget)
        schedule.append(budget if adaptive else stats.inner_iters)
        trace.append(
            step_index,
            stats.objective,
            stats.gamma_delta,
            stats.marginal_err,
            stats.inner_iters,
            time.perf_counter() - start,
        )
        if prev is not None:
            change = prev - stats.objective
            # changes below the outer resolution are plateau noise either way;
            # an adaptive run additionally has to be near-feasible, because a
            # small budget can make the estimate plateau long before the plan
            # satisfies its marginals
            if abs(change) < cfg.delta_outer and not (
                adaptive and stats.marginal_err > cfg.feasibility_tol
            ):
                converged = True
                prev = stats.objective
                break
            if change < 0.0:
                if adaptive:
                    # the inner budget was too small for a descent step: double
                    # it and keep going
                    budget *= 2
                    if budget > ADAPTIVE_CAP:
                        raise SolverError(
                            f"adaptive inner budget exceeded the cap ({ADAPTIVE_CAP}); "
                            "the objective keeps increasing, likely a non-CNT cost or "
                            "a temperature too small for this instance"
                        )
                    prev = stats.objective
                    continue
                consecutive_up += 1
                if consecutive_up >= _DIVERGENCE_PATIENCE:
                    raise SolverError(
                        f"objective increased {_DIVERGENCE_PATIENCE} outer steps in a "
                        "row; raise n_inner or use the adaptive wrapper"
                    )
            else:
                consecutive_up = 0
        prev = stats.objective
    if cfg.final_anneal is not None:
        stats = state.step(inner_budget=budget, anneal_from=cfg.final_anneal)
        trace.append(
            len(trace) + 1,
            stats.objective,
            stats.gamma_delta,
            stats.marginal_err,
            stats.inner_iters,
            time.perf_counter() - start,
        )
        if adaptive:
            schedule.append(budget)
    return state.result(trace, converged, schedule=schedule if adaptive else None)


def solve_cnt_gw(
    src: EmbeddedMeasure, tgt: EmbeddedMeasure, cfg: EgwConfig, _warm_potentials=None
) -> EgwResult:
    """Feature-space EGW solve; returns the operator, implicit plan, trace."""
    return _run_outer(_CntGwState(src, tgt, cfg, warm_potentials=_warm_potentials), cfg)


def solve_kernel_gw(src_cost, tgt_cost, a, b, cfg: EgwConfig) -> EgwResult:
    """Kernel-trick EGW solve on dense plans, exact for any CNT cost."""
    return _run_outer(_KernelGwState(src_cost, tgt_cost, a, b, cfg), cfg)


def solve_entropic_gw(src_cost, tgt_cost, a, b, cfg: EgwConfig) -> EgwResult:
    """Classical projected-descent baseline with the full loss gradient."""
    return _run_outer(_EntropicGwState(src_cost, tgt_cost, a, b, cfg), cfg)


_SOLVER_STATES = {
    solve_cnt_gw: _CntGwState,
    solve_kernel_gw: _KernelGwState,
    solve_entropic_gw: _EntropicGwState,
}


def solve_adaptive(solver, *args, cfg: EgwConfig) -> EgwResult:
    """Wrap an outer solver with the inner-budget doubling rule.

    Whenever the objective estimate increases between consecutive outer
    steps, the fixed inner budget doubles (starting from ``cfg.inner.n_inner``)
    and the solve continues; past 2**14 the run aborts with a diagnostic.
    The applied budgets are returned in ``result.schedule``.
    """
    try:
        state_cls = _SOLVER_STATES[solver]
    except (TypeError, KeyError):
        raise ValueError("solver must be one of the solve_* functions of this module") from None
    state = state_cls(*args, cfg)
    return _run_outer(state, cfg, adaptive=True)


def _weighted_kmeans(features, weights, k, rng, sweeps: int = 100):
    """Seeded weighted k-means. Returns (assignments, centers, center_weights)."""
    n = features.shape[0]
    centers = np.empty((k, features.shape[1]))
    idx = rng.choice(n, p=weights)
    centers[0] = features[idx]
    d2 = ((features - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        mass = weights * d2
        total = mass.sum()
        probs = mass / total if total > 0.0 else weights
        idx = rng.choice(n, p=probs)
        centers[j] = features[idx]
        d2 = np.minimum(d2, ((features - centers[j]) ** 2).sum(axis=1))
    assign = np.zeros(n, dtype=int)
    for _ in range(sweeps):
        dists = ((features[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_assign = np.argmin(dists, axis=1)
        own = dists[np.arange(n), new_assign]
        for j in range(k):
            members = new_assign == j
            if not np.any(members):
                far = int(np.argmax(own))
                centers[j] = features[far]
                new_assign[far] = j
                own[far] = 0.0
                members = new_assign == j
            w = weights[members]
            centers[j] = (w[:, None] * features[members]).sum(axis=0) / w.sum()
        if np.array_equal(new_assign, assign):
            assign = new_assign
            break
        assign = new_assign
    center_weights = np.zeros(k)
    np.add.at(center_weights, assign, weights)
    return assign, centers, center_weights


def coarsen(measure: EmbeddedMeasure, rho: float, rng) -> tuple[EmbeddedMeasure, np.ndarray]:
    """Cluster an embedded measure into ceil(rho n) weighted centroids.

    Weighted centroids keep the coarse features exactly centered, which the
    objective decomposition relies on. Returns the coarse measure and the
    fine-to-coarse assignment vector.
    """
    if not (0.0 < rho < 1.0):
        raise ValueError(f"rho must lie in (0, 1), got {rho!r}")
    k = math.ceil(rho * measure.n)
    if k < 2:
        raise ValueError(
            f"rho={rho} gives {k} cluster(s) for {measure.n} points; need at least 2"
        )
    assign, centers, center_weights = _weighted_kmeans(
        measure.features, measure.weights, k, rng
    )
    coarse = EmbeddedMeasure(
        centers, center_weights, explained_variance=measure.explained_variance
    )
    return coarse, assign


def solve_multiscale(
    src: EmbeddedMeasure, tgt: EmbeddedMeasure, cfg: EgwConfig, rho: float = 0.1
) -> EgwResult:
    """Two-stage feature-space solve: clustered coarse stage, then fine stage.

    The coarse solve runs on weighted k-means centroids; its operator carries
    over directly and its potentials are upsampled cluster-constant as warm
    starts for the fine stage.
    """
    rng = np.random.default_rng(cfg.seed)
    coarse_src, assign_src = coarsen(src, rho, rng)
    coarse_tgt, assign_tgt = coarsen(tgt, rho, rng)
    coarse_result = solve_cnt_gw(coarse_src, coarse_tgt, cfg)
    gamma_c = coarse_result.gamma
    # cluster-constant inheritance of the potentials, stated in the
    # separable-free parametrization: each potential carries the squared
    # augmented norm of its own problem (see pi_step), so that part is
    # swapped out for the fine-scale one
    phi_c = (coarse_src.augmented() ** 2).sum(axis=1)
    psi_c = (
        np.column_stack([coarse_tgt.features @ gamma_c.T, coarse_tgt.half_sq_norms]) ** 2
    ).sum(axis=1)
    phi_f = (src.augmented() ** 2).sum(axis=1)
    psi_f = (
        np.column_stack([tgt.features @ gamma_c.T, tgt.half_sq_norms]) ** 2
    ).sum(axis=1)
    f_up = (coarse_result.coupling.f - phi_c)[assign_src] + phi_f
    g_up = (coarse_result.coupling.g - psi_c)[assign_tgt] + psi_f
    fine_cfg = replace(cfg, init="gamma", init_gamma=gamma_c)
    fine_result = solve_cnt_gw(src, tgt, fine_cfg, _warm_potentials=(f_up, g_up))
    fine_result.coarse = coarse_result
    return fine_result
