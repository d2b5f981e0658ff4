"""Objective bookkeeping, the debiased divergence, and position gradients.

This module owns everything built on top of the solvers: the closed-form
constant of the quartic objective, a brute-force loss evaluation used as an
independent cross-check, the debiased divergence (cross term minus half of
each self term), envelope-style position gradients that never differentiate
through the solver loop, and gradient flows driven by those gradients.

Solvers are imported lazily inside functions so that this module and
``solvers`` can depend on each other without an import cycle.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .kernels import CostSpec, EmbeddedMeasure, cost_gradients, covariance_spectrum
from .measures import BLOCK_SIZE, DiscreteMeasure, ImplicitCoupling, kl_divergence

# The 4-index brute-force sum materializes (n * m)^2 pair-pair terms.
BRUTEFORCE_PAIR_LIMIT = 1_000_000


def fourth_moment(measure: EmbeddedMeasure) -> float:
    """Q = sum_ik a_i a_k ||X_i - X_k||^4, computed in row blocks."""
    x, a = measure.features, measure.weights
    sq_norms = (x**2).sum(axis=1)
    total = 0.0
    for i0 in range(0, measure.n, BLOCK_SIZE):
        i1 = min(i0 + BLOCK_SIZE, measure.n)
        d2 = sq_norms[i0:i1, None] + sq_norms[None, :] - 2.0 * (x[i0:i1] @ x.T)
        np.maximum(d2, 0.0, out=d2)
        total += float(a[i0:i1] @ (d2**2) @ a)
    return total


def constant_value(src: EmbeddedMeasure, tgt: EmbeddedMeasure) -> float:
    """Plan-independent part of the loss: Q_src + Q_tgt - 4 T_src T_tgt."""
    return (
        fourth_moment(src)
        + fourth_moment(tgt)
        - 4.0 * src.trace_second_moment() * tgt.trace_second_moment()
    )


def gw_loss_bruteforce(cost_x, cost_y, plan) -> float:
    """Quartic loss sum_ijkl (C_x[i,k] - C_y[j,l])^2 pi_ij pi_kl, no shortcuts.

    This is the reference evaluation the decomposed objective is tested
    against. The 4-index tensor is materialized directly, so support sizes
    are capped at (n * m)^2 <= 10^6 pair-pairs.
    """
    cx = np.asarray(cost_x, dtype=np.float64)
    cy = np.asarray(cost_y, dtype=np.float64)
    pi = plan.matrix if hasattr(plan, "matrix") else np.asarray(plan, dtype=np.float64)
    n, m = pi.shape
    if cx.shape != (n, n) or cy.shape != (m, m):
        raise ValueError("cost matrix shapes do not match the plan")
    if (n * m) ** 2 > BRUTEFORCE_PAIR_LIMIT:
        raise ValueError(
            f"brute-force evaluation needs (n m)^2 <= {BRUTEFORCE_PAIR_LIMIT}, "
            f"got n={n}, m={m}"
        )
    diff = cx[:, None, :, None] - cy[None, :, None, :]
    return float((diff**2 * pi[:, :, None, None] * pi[None, None, :, :]).sum())


def _plan_reductions(coupling, src: EmbeddedMeasure, tgt: EmbeddedMeasure):
    """One blocked pass: (pi Y, pi s_y, pi^T X, pi^T s_x, sigma_ss)."""
    x, y = src.features, tgt.features
    s_x, s_y = src.half_sq_norms, tgt.half_sq_norms
    pi_y = np.empty((src.n, tgt.dim))
    pi_sy = np.empty(src.n)
    pit_x = np.zeros((tgt.n, src.dim))
    pit_sx = np.zeros(tgt.n)
    for i0, i1, block in coupling.row_blocks():
        pi_y[i0:i1] = block @ y
        pi_sy[i0:i1] = block @ s_y
        pit_x += block.T @ x[i0:i1]
        pit_sx += block.T @ s_x[i0:i1]
    sigma_ss = float(s_x @ pi_sy)
    return pi_y, pi_sy, pit_x, pit_sx, sigma_ss


@dataclass(frozen=True)
class GwValueReport:
    """Decomposed loss estimate: value = constant + 8 (gamma_sq + (eps/8) kl - 2 (cross + sigma_ss))."""

    value: float
    constant: float
    gamma_sq: float
    kl_term: float
    cross_term: float
    sigma_ss: float
    eps: float


def gw_value_report(
    gamma: np.ndarray, coupling, src: EmbeddedMeasure, tgt: EmbeddedMeasure, eps: float
) -> GwValueReport:
    """Break an operator/plan pair down into the objective's named pieces."""
    pi_y, _, _, _, sigma_ss = _plan_reductions(coupling, src, tgt)
    cross = float((gamma * (src.features.T @ pi_y)).sum())
    gamma_sq = float((gamma**2).sum())
    kl = kl_divergence(coupling)
    constant = constant_value(src, tgt)
    value = constant + 8.0 * (gamma_sq + (eps / 8.0) * kl - 2.0 * (cross + sigma_ss))
    return GwValueReport(
        value=value,
        constant=constant,
        gamma_sq=gamma_sq,
        kl_term=kl,
        cross_term=cross,
        sigma_ss=sigma_ss,
        eps=eps,
    )


def quartic_loss(coupling, src: EmbeddedMeasure, tgt: EmbeddedMeasure) -> float:
    """Non-entropic loss of a plan via the decomposition, no 4-index sum.

    Equals ``gw_loss_bruteforce`` on the embedded distance matrices whenever
    the plan marginals match the weights; the agreement of the two routes is
    a test invariant.
    """
    pi_y, _, _, _, sigma_ss = _plan_reductions(coupling, src, tgt)
    gamma = src.features.T @ pi_y
    return constant_value(src, tgt) - 8.0 * float((gamma**2).sum()) - 16.0 * sigma_ss


def _grad_constant(measure: EmbeddedMeasure, other_trace: float) -> np.ndarray:
    """Per-point gradient of Q(measure) - 4 T(measure) T(other) in one slot."""
    x, a = measure.features, measure.weights
    sq_norms = (x**2).sum(axis=1)
    out = np.empty_like(x)
    for i0 in range(0, measure.n, BLOCK_SIZE):
        i1 = min(i0 + BLOCK_SIZE, measure.n)
        diff = x[i0:i1, None, :] - x[None, :, :]
        sq = sq_norms[i0:i1, None] + sq_norms[None, :] - 2.0 * (x[i0:i1] @ x.T)
        np.maximum(sq, 0.0, out=sq)
        out[i0:i1] = 8.0 * a[i0:i1, None] * np.einsum("mk,mkd->md", sq * a[None, :], diff)
    out -= 8.0 * other_trace * a[:, None] * x
    return out


def feature_gradients(src: EmbeddedMeasure, tgt: EmbeddedMeasure, gamma, coupling):
    """Envelope gradients of the loss estimate in both feature slots.

    At a solver fixed point the plan and operator are minimizers, so moving
    a support point only hits the explicit feature dependence:

        grad_{X_k} = grad_{X_k} constant - 16 (Gamma (pi Y)_k + X_k (pi s_y)_k)

    and symmetrically for the target slot. Both gradients are returned; for
    a self comparison (src is tgt with one shared plan) their sum is the
    total derivative.
    """
    pi_y, pi_sy, pit_x, pit_sx, _ = _plan_reductions(coupling, src, tgt)
    gsrc = _grad_constant(src, tgt.trace_second_moment())
    gsrc -= 16.0 * (pi_y @ gamma.T + src.features * pi_sy[:, None])
    gtgt = _grad_constant(tgt, src.trace_second_moment())
    gtgt -= 16.0 * (pit_x @ gamma + tgt.features * pit_sx[:, None])
    return gsrc, gtgt


@dataclass(frozen=True)
class PositionGradient:
    """Position gradients of a solved instance.

    ``source``/``target`` live in feature space; ``ambient`` (when a chain
    rule back to input coordinates was requested) in the original space.
    ``approximate`` flags the frozen-eigenvector Jacobian used for embedded
    non-Euclidean costs.
    """

    source: np.ndarray
    target: np.ndarray
    value: float
    ambient: np.ndarray | None = None
    approximate: bool = False


def egw_gradient(src: EmbeddedMeasure, tgt: EmbeddedMeasure, cfg=None, result=None) -> PositionGradient:
    """Solve (or reuse a solve) and return envelope position gradients."""
    if result is None:
        if cfg is None:
            raise ValueError("either a solver result or a configuration is required")
        from .solvers import solve_cnt_gw

        result = solve_cnt_gw(src, tgt, cfg)
    gamma = result.gamma
    if gamma is None:
        from .solvers import gamma_step

        gamma = gamma_step(result.coupling, src, tgt)
    gsrc, gtgt = feature_gradients(src, tgt, gamma, result.coupling)
    return PositionGradient(source=gsrc, target=gtgt, value=result.value)


def ambient_gradient(
    measure: DiscreteMeasure,
    spec: CostSpec,
    embedded: EmbeddedMeasure,
    feature_grad: np.ndarray,
) -> tuple[np.ndarray, bool]:
    """Pull a feature-space gradient back to input coordinates.

    For squared Euclidean costs embedded on the exact path the only map is
    the weighted centering, whose chain rule is exact. Any other
    differentiable cost goes through the kernel-PCA Jacobian with the
    eigenvectors held fixed, which is a first-order approximation; the
    returned flag says which case applied.
    """
    a = measure.weights
    feature_grad = np.asarray(feature_grad, dtype=np.float64)
    if spec.kind == "sq_euclidean" and embedded.dim == measure.dim:
        grad = feature_grad - a[:, None] * feature_grad.sum(axis=0)[None, :]
        return grad, False
    if embedded.eigenvalues is None or embedded.eigenvectors is None:
        raise ValueError(
            "embedded measure carries no kernel spectrum; ambient gradients need "
            "either the exact squared-Euclidean path or a kernel-PCA embedding"
        )
    if not spec.differentiable:
        raise ValueError(f"cost kind {spec.describe()!r} is not differentiable")
    lam = embedded.eigenvalues
    vec = embedded.eigenvectors
    keep = lam > 1e-12 * max(float(lam.max(initial=0.0)), 1e-300)
    grads = cost_gradients(spec, measure.points)
    mean_field = np.einsum("k,mkd->md", a, grads)
    centered = -0.5 * (grads - mean_field[:, None, :])
    scaled = np.zeros_like(feature_grad)
    scaled[:, keep] = feature_grad[:, keep] / np.sqrt(lam[keep])[None, :]
    weights_per_point = scaled @ vec.T
    grad = np.einsum("mid,mi->md", centered, weights_per_point)
    return grad, True


@dataclass
class SgwResult:
    """Debiased divergence value with the three solves behind it."""

    value: float
    cross: object
    self_src: object
    self_tgt: object
    notes: list = field(default_factory=list)


def _self_config(measure: EmbeddedMeasure, cfg):
    """Self solves start from the identity-like operator (the covariance)."""
    return replace(cfg, init="gamma", init_gamma=measure.covariance())


def _separability_note(eps: float, src: EmbeddedMeasure, tgt: EmbeddedMeasure) -> str | None:
    t_eps = eps * max(1.0, math.log(1.0 / eps))
    lam_min = min(
        float(covariance_spectrum(src)[-1]), float(covariance_spectrum(tgt)[-1])
    )
    if t_eps > lam_min**2:
        return (
            f"temperature heuristic eps * max(1, ln(1/eps)) = {t_eps:.3g} exceeds the "
            f"squared smallest covariance eigenvalue {lam_min**2:.3g}; the divergence "
            "may not separate these spaces at this eps"
        )
    return None


def sgw(
    src: EmbeddedMeasure,
    tgt: EmbeddedMeasure,
    cfg,
    self_src_result=None,
    self_tgt_result=None,
) -> SgwResult:
    """Debiased divergence: cross solve minus half of each self solve.

    Self terms are solved from the identity-like initialization and may be
    passed in precomputed. When source and target are the same object, a
    single self solve is reused and the value is exactly zero.
    """
    from .solvers import solve_cnt_gw

    notes = []
    note = _separability_note(cfg.eps, src, tgt)
    if note is not None:
        notes.append(note)
        warnings.warn(note, RuntimeWarning, stacklevel=2)
    if src is tgt:
        self_res = self_src_result or self_tgt_result
        if self_res is None:
            self_res = solve_cnt_gw(src, src, _self_config(src, cfg))
        return SgwResult(0.0, cross=self_res, self_src=self_res, self_tgt=self_res, notes=notes)
    cross = solve_cnt_gw(src, tgt, cfg)
    if self_src_result is None:
        self_src_result = solve_cnt_gw(src, src, _self_config(src, cfg))
    if self_tgt_result is None:
        self_tgt_result = solve_cnt_gw(tgt, tgt, _self_config(tgt, cfg))
    value = cross.value - 0.5 * (self_src_result.value + self_tgt_result.value)
    return SgwResult(
        value, cross=cross, self_src=self_src_result, self_tgt=self_tgt_result, notes=notes
    )


@dataclass
class FlowResult:
    """Trajectory of a divergence gradient flow.

    ``positions[t]`` and ``objectives[t]`` correspond: the objective is the
    weighted divergence sum evaluated at that iterate, including the final
    one.
    """

    positions: list
    objectives: list
    step_size: float


def gradient_flow(
    measure: DiscreteMeasure,
    targets,
    cfg,
    steps: int = 50,
    step_size: float = 0.1,
) -> FlowResult:
    """Flow support points down the gradient of a weighted divergence sum.

    ``targets`` is a sequence of ``(lam, EmbeddedMeasure)`` pairs; the
    objective is ``sum_k lam_k SGW(z, tau_k)`` over the flowing cloud z with
    fixed weights, under the squared Euclidean cost. Targets with lam = 0 are
    skipped without solving. The self term of z is solved once per step and
    shared across targets; the targets' own self terms are solved once up
    front. Cross and self solves are warm-started along the trajectory.

    Raises:
        SolverError: if an iterate stops being finite; reduce the step size.
    """
    from .solvers import SolverError, solve_cnt_gw

    lams = [float(lam) for lam, _ in targets]
    taus = [tau for _, tau in targets]
    if any(lam < 0.0 or not math.isfinite(lam) for lam in lams):
        raise ValueError("target weights must be finite and nonnegative")
    active = [k for k, lam in enumerate(lams) if lam > 0.0]
    if not active:
        raise ValueError("at least one target needs a positive weight")
    a = measure.weights
    z = np.array(measure.points)
    tau_self_values = {}
    for k in active:
        res = solve_cnt_gw(taus[k], taus[k], _self_config(taus[k], cfg))
        tau_self_values[k] = res.value
    total_lam = sum(lams[k] for k in active)
    cross_gammas = {k: None for k in active}
    self_gamma = None

    def evaluate(points, with_gradient=True):
        nonlocal self_gamma
        embedded = EmbeddedMeasure(points - (a @ points)[None, :], a)
        self_cfg = (
            _self_config(embedded, cfg)
            if self_gamma is None
            else replace(cfg, init="gamma", init_gamma=self_gamma)
        )
        self_res = solve_cnt_gw(embedded, embedded, self_cfg)
        self_gamma = self_res.gamma
        objective = 0.0
        grad = np.zeros_like(embedded.features) if with_gradient else None
        for k in active:
            cross_cfg = (
                cfg
                if cross_gammas[k] is None
                else replace(cfg, init="gamma", init_gamma=cross_gammas[k])
            )
            cross = solve_cnt_gw(embedded, taus[k], cross_cfg)
            cross_gammas[k] = cross.gamma
            objective += lams[k] * (
                cross.value - 0.5 * (self_res.value + tau_self_values[k])
            )
            if with_gradient:
                gsrc, _ = feature_gradients(embedded, taus[k], cross.gamma, cross.coupling)
                grad += lams[k] * gsrc
        if with_gradient:
            g_self_src, g_self_tgt = feature_gradients(
                embedded, embedded, self_res.gamma, self_res.coupling
            )
            grad -= 0.5 * total_lam * (g_self_src + g_self_tgt)
            # exact chain rule through the weighted centering
            grad = grad - a[:, None] * grad.sum(axis=0)[None, :]
        return objective, grad

    positions = [np.array(z)]
    objectives = []
    for step_index in range(steps):
        objective, grad = evaluate(z)
        objectives.append(objective)
        z = z - step_size * grad
        if not np.all(np.isfinite(z)):
            raise SolverError(
                f"gradient flow produced non-finite positions at step {step_index + 1}; "
                "reduce step_size"
            )
        positions.append(np.array(z))
    final_objective, _ = evaluate(z, with_gradient=False)
    objectives.append(final_objective)
    return FlowResult(positions=positions, objectives=objectives, step_size=step_size)
