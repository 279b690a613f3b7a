"""Per-client hypergradient estimators.

Two routes to the same quantity:

* ``exact_hypergradient`` solves the client's inner Hessian system
  restricted to its active inner coordinates (implicit differentiation
  with a direct solve), then applies the mixed second derivative:
  value = grad_x f - (d^2 g/dx dy) @ z with z = [d^2 g/dy^2]^{-1} grad_y f.

* ``rafbo_hypergradient`` is second-order free: it forward-differences
  the inner descent direction -grad_y g along unit perturbations of the
  active outer coordinates and accumulates vector-vector inner products,
  value = grad_x f + sum_p <delta_p, grad_y f> e_p. No Hessian or
  Jacobian is ever materialized and the only derivative oracle used is
  the lower-level gradient.

``jacobian_column_fd`` returns delta_p, the response of the descent
direction to a unit outer perturbation. The orientation matters: delta
already carries the sign of the inner-optimum response, so on problems
with unit inner curvature it equals the Jacobian column of x -> y*(x)
exactly for every step size, and the two estimators coincide. With
curved cross-coupling the finite difference picks up an O(mu) bias whose
magnitude is bounded by ``hypergrad_error_bound``.

Both evaluations inside a difference share one batch (common random
numbers), so additive gradient noise cancels to first order.

Cost model: gradient evaluations are the atomic unit,
``2 * (d1_active + d2_active)^2`` flops each. The exact route is
additionally charged one gradient-equivalent per Hessian row and per
cross-derivative column (the price of obtaining second derivatives by
differentiating the gradient oracle), the materialization of the
restricted block, the cubic cost of the solve, and the dense
cross-operator application. Under this model the difference route is
strictly cheaper whenever the perturbation set is no larger than the
active inner dimension, with the gap widening as coordinates are
sampled out.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    EmptyMask,
    NonPositiveMu,
    NotPositiveDefinite,
    SingularRestrictedHessian,
)
from .linalg import solve_spd
from .masking import Mask, apply_mask
from .rng import RngStream

EXACT_AID = "exact_aid"
RAFBO = "rafbo"


@dataclass(frozen=True)
class RAFBOConfig:
    """Knobs of the second-order-free estimator.

    ``mu`` is the forward-difference step (kept well above float
    cancellation, well below curvature scale). ``coord_fraction`` is the
    fraction of active outer coordinates sampled into the perturbation
    set; 1.0 (the default) perturbs every active coordinate.
    """

    mu: float = 1e-3
    coord_fraction: float = 1.0

    def __post_init__(self):
        if self.mu <= 0:
            raise NonPositiveMu(f"mu must be positive, got {self.mu}")
        if not (0 < self.coord_fraction <= 1):
            raise ValueError(
                f"coord_fraction must be in (0, 1], got {self.coord_fraction}")


@dataclass(frozen=True)
class PerturbationSet:
    """Ascending active outer coordinates chosen for perturbation."""

    indices: np.ndarray

    def __len__(self) -> int:
        return int(self.indices.shape[0])


@dataclass(frozen=True)
class HypergradEstimate:
    """One client's hypergradient with its cost tally."""

    value: np.ndarray
    estimator: str
    client: int
    round_index: int
    mask_x: Mask
    mask_y: Mask
    flops: int
    grad_evals: int
    p_size: int = 0


def grad_eval_flops(d1_active: int, d2_active: int) -> int:
    """Flop charge for one gradient evaluation on the active submodel."""
    return 2 * (d1_active + d2_active) ** 2


def exact_aid_flops(d1_active: int, d2_active: int) -> int:
    unit = grad_eval_flops(d1_active, d2_active)
    assemble = d2_active ** 2                       # materialize the block
    solve = d2_active ** 3 // 3 + 2 * d2_active ** 2
    cross = 2 * d1_active * d2_active               # dense operator apply
    return (2 + d2_active + d1_active) * unit + assemble + solve + cross \
        + 2 * d1_active


def rafbo_flops(d1_active: int, d2_active: int, p_size: int) -> int:
    unit = grad_eval_flops(d1_active, d2_active)
    return (2 + 2 * p_size) * unit + p_size * (2 * d2_active + 1) + 2 * d1_active


def build_perturbation_set(mask_x: Mask, coord_fraction: float,
                           rng: RngStream | None = None) -> PerturbationSet:
    """Sample the perturbation coordinates from the active outer support.

    With ``coord_fraction == 1`` every active coordinate is used, in
    ascending order; below 1 a ceil(fraction * active) subset is drawn
    uniformly without replacement from ``rng`` and sorted.
    """
    active = mask_x.support()
    if active.size == 0:
        raise EmptyMask("outer mask has no active coordinate")
    if not (0 < coord_fraction <= 1):
        raise ValueError(f"coord_fraction must be in (0, 1], got {coord_fraction}")
    if coord_fraction == 1.0:
        return PerturbationSet(active.astype(np.int64))
    if rng is None:
        raise ValueError("sampling a strict subset requires an rng stream")
    k = math.ceil(coord_fraction * active.size)
    chosen = rng.generator().choice(active, size=k, replace=False)
    chosen.sort()
    return PerturbationSet(chosen.astype(np.int64))


def jacobian_column_fd(problem, i: int, x: np.ndarray, y: np.ndarray,
                       coord: int, mu: float, batch=None,
                       mask_y: Mask | None = None) -> np.ndarray:
    """Forward-difference response of the inner descent direction.

    Returns delta = (-grad_y g(x + mu e_p, y) + grad_y g(x, y)) / mu in
    R^{d2}, masked by ``mask_y`` when given. The same batch is used for
    both evaluations so additive noise cancels exactly. For bilinear
    cross-coupling the difference is exact and independent of mu; curved
    coupling contributes an O(mu) bias.
    """
    if mu <= 0:
        raise NonPositiveMu(f"mu must be positive, got {mu}")
    x_pert = x.copy()
    x_pert[coord] += mu
    delta = (problem.grad_g_y(i, x, y, batch)
             - problem.grad_g_y(i, x_pert, y, batch)) / mu
    if mask_y is not None:
        delta = apply_mask(delta, mask_y)
    return delta


def exact_hypergradient(problem, i: int, x_masked: np.ndarray,
                        y_masked: np.ndarray, mask_x: Mask, mask_y: Mask,
                        batch_f=None, batch_g=None,
                        round_index: int = 0) -> HypergradEstimate:
    """Implicit-differentiation hypergradient with a restricted solve.

    The inner Hessian system is solved on the client's active inner
    coordinates only, treating inactive coordinates as frozen at zero; a
    full-dimension Hessian at masked parameters can be singular off the
    active block. Raises SingularRestrictedHessian when the restricted
    block is not SPD (the mask killed strong convexity there).
    """
    gfx = problem.grad_f_x(i, x_masked, y_masked, batch_f)
    gfy = problem.grad_f_y(i, x_masked, y_masked, batch_f)
    active_y = mask_y.support()
    z = np.zeros(problem.d2)
    if active_y.size:
        hess = problem.hess_yy_g(i, x_masked, y_masked, batch_g)
        block = hess[np.ix_(active_y, active_y)]
        try:
            z[active_y] = solve_spd(block, gfy[active_y])
        except NotPositiveDefinite as exc:
            raise SingularRestrictedHessian(
                f"client {i}: restricted inner Hessian is not SPD "
                f"({active_y.size} active coordinates)") from exc
    correction = problem.cross_xy_g_apply(i, x_masked, y_masked, z, batch_g)
    value = apply_mask(gfx - correction, mask_x)
    return HypergradEstimate(
        value=value, estimator=EXACT_AID, client=i, round_index=round_index,
        mask_x=mask_x, mask_y=mask_y,
        flops=exact_aid_flops(mask_x.active_count, int(active_y.size)),
        grad_evals=2)


def rafbo_hypergradient(problem, i: int, x_masked: np.ndarray,
                        y_masked: np.ndarray, mask_x: Mask, mask_y: Mask,
                        cfg: RAFBOConfig, batch_f=None, batch_g=None,
                        rng: RngStream | None = None,
                        round_index: int = 0) -> HypergradEstimate:
    """Second-order-free hypergradient via coordinate-wise differences.

    value = grad_x f + sum_{p in P} <delta_p, grad_y f> e_p, built from
    2|P| + 2 gradient evaluations and |P| vector-vector inner products.
    """
    pset = build_perturbation_set(mask_x, cfg.coord_fraction, rng)
    gfx = problem.grad_f_x(i, x_masked, y_masked, batch_f)
    gfy = problem.grad_f_y(i, x_masked, y_masked, batch_f)
    value = gfx.copy()
    for p in pset.indices:
        delta = jacobian_column_fd(problem, i, x_masked, y_masked, int(p),
                                   cfg.mu, batch_g, mask_y)
        value[p] += float(delta @ gfy)
    value = apply_mask(value, mask_x)
    return HypergradEstimate(
        value=value, estimator=RAFBO, client=i, round_index=round_index,
        mask_x=mask_x, mask_y=mask_y,
        flops=rafbo_flops(mask_x.active_count, mask_y.active_count, len(pset)),
        grad_evals=2 * len(pset) + 2, p_size=len(pset))


def hypergrad_error_bound(p_star: int, l_g1: float, mu: float,
                          l_f0: float) -> float:
    """Squared bound on the finite-difference estimation error.

    Returns (p_star * l_g1 * mu * l_f0)^2 / 4; homogeneous of degree two
    in mu, zero when mu is zero.
    """
    if min(p_star, l_g1, mu, l_f0) < 0:
        raise ValueError("bound inputs must be nonnegative")
    return (p_star * l_g1 * mu * l_f0) ** 2 / 4.0
