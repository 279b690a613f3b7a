"""Synthetic quadratic bilevel family with closed-form oracles.

Per client ``i`` the lower and upper objectives are

    g_i(x, y) = 1/2 y'A_i y + y'B_i x + c_i'y + (tau/4) ||x||^2 (y'U_i y)
    f_i(x, y) = 1/2 ||y - b_i||^2 + (lam/2) ||x - a_i||^2 + amp * sum_k sin(x_k)

with A_i symmetric positive definite and U_i symmetric positive
semidefinite. With ``tau == 0`` everything is quadratic: the inner optimum
and the full hypergradient have closed forms, which makes the family the
test oracle for every estimator in the simulator. ``tau > 0`` turns on a
quartic coupling term whose inner optimum is still a linear solve but
whose cross derivative is genuinely curved in x, so finite-difference
estimators pick up an O(mu) bias there. ``amp > 0`` adds a bounded smooth
sinusoidal perturbation to the outer objective for non-convex-outer runs;
both flags default to off so acceptance checks run against a problem with
a unique verifiable minimizer.

Heterogeneity enters only through per-client offsets of the linear
targets (c_i, a_i, b_i); curvature blocks are shared. Stochastic
gradients are the exact gradients plus additive zero-mean Gaussian noise
scaled by ``noise_f`` / ``noise_g`` and shrunk by sqrt(batch size), drawn
deterministically from the batch's stream. The noise is independent of
(x, y), so differencing two evaluations under the same batch cancels it
exactly (common random numbers).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidSpec, UnsupportedProblem
from ..linalg import solve_spd, spectral_bounds, spectral_norm, symmetrize
from ..rng import RngStream
from .base import BilevelProblem, ProblemConstants, SampleBatch


@dataclass(frozen=True)
class QuadraticSpec:
    """Matrices and generation parameters of one quadratic instance."""

    a_mats: list          # per-client A_i, d2 x d2 SPD
    b_mats: list          # per-client B_i, d2 x d1
    c_vecs: list          # per-client c_i, d2
    outer_targets: list   # per-client a_i, d1
    inner_targets: list   # per-client b_i, d2
    u_mats: list | None   # per-client U_i for the quartic term, or None
    lam: float            # outer quadratic weight, >= 0
    noise_f: float
    noise_g: float
    hetero: float
    quartic: float        # tau
    sine_amp: float       # amp
    ball_radius: float
    params: dict = field(default_factory=dict)  # generator arguments, for serialization


class QuadraticProblem(BilevelProblem):
    """Bilevel problem backed by a :class:`QuadraticSpec`."""

    def __init__(self, spec: QuadraticSpec):
        for group in (spec.a_mats, spec.b_mats, spec.c_vecs,
                      spec.outer_targets, spec.inner_targets,
                      spec.u_mats or []):
            for arr in group:
                if not np.all(np.isfinite(arr)):
                    raise InvalidSpec("problem data must be finite")
        self.spec = spec
        self.n = len(spec.a_mats)
        self.d2, self.d1 = spec.b_mats[0].shape
        self._a_bar = symmetrize(sum(spec.a_mats) / self.n)
        self._b_bar = sum(spec.b_mats) / self.n
        self._c_bar = sum(spec.c_vecs) / self.n
        self._a_tgt_bar = sum(spec.outer_targets) / self.n
        self._b_tgt_bar = sum(spec.inner_targets) / self.n
        if spec.u_mats is not None:
            self._u_bar = symmetrize(sum(spec.u_mats) / self.n)
        else:
            self._u_bar = None

    # -- noise -------------------------------------------------------------
    def _noise(self, batch: SampleBatch | None, scale: float) -> np.ndarray | None:
        if batch is None or scale == 0.0:
            return None
        joint = batch.stream().normal(self.d1 + self.d2)
        return joint * (scale / np.sqrt(batch.size))

    # -- lower level --------------------------------------------------------
    def _hess_i(self, i: int, x: np.ndarray) -> np.ndarray:
        h = self.spec.a_mats[i]
        if self.spec.quartic:
            h = h + (self.spec.quartic / 2.0) * float(x @ x) * self.spec.u_mats[i]
        return h

    def value_g(self, i, x, y, batch=None):
        self.check_dims(x, y)
        s = self.spec
        val = 0.5 * float(y @ (s.a_mats[i] @ y)) + float(y @ (s.b_mats[i] @ x)) \
            + float(s.c_vecs[i] @ y)
        if s.quartic:
            val += (s.quartic / 4.0) * float(x @ x) * float(y @ (s.u_mats[i] @ y))
        return val

    def grad_g_y(self, i, x, y, batch=None):
        self.check_dims(x, y)
        s = self.spec
        grad = s.a_mats[i] @ y + s.b_mats[i] @ x + s.c_vecs[i]
        if s.quartic:
            grad = grad + (s.quartic / 2.0) * float(x @ x) * (s.u_mats[i] @ y)
        noise = self._noise(batch, s.noise_g)
        if noise is not None:
            grad = grad + noise[: self.d2]
        return grad

    def grad_g_x(self, i, x, y, batch=None):
        self.check_dims(x, y)
        s = self.spec
        grad = s.b_mats[i].T @ y
        if s.quartic:
            grad = grad + (s.quartic / 2.0) * float(y @ (s.u_mats[i] @ y)) * x
        noise = self._noise(batch, s.noise_g)
        if noise is not None:
            grad = grad + noise[self.d2:]
        return grad

    def hess_yy_g(self, i, x, y, batch=None):
        self.check_dims(x, y)
        return self._hess_i(i, x)

    def cross_xy_g_apply(self, i, x, y, v, batch=None):
        self.check_dims(x, y)
        s = self.spec
        out = s.b_mats[i].T @ v
        if s.quartic:
            out = out + s.quartic * float(y @ (s.u_mats[i] @ v)) * x
        return out

    # -- upper level ---------------------------------------------------------
    def value_f(self, i, x, y, batch=None):
        self.check_dims(x, y)
        s = self.spec
        dy = y - s.inner_targets[i]
        dx = x - s.outer_targets[i]
        val = 0.5 * float(dy @ dy) + 0.5 * s.lam * float(dx @ dx)
        if s.sine_amp:
            val += s.sine_amp * float(np.sum(np.sin(x)))
        return val

    def grad_f_x(self, i, x, y, batch=None):
        self.check_dims(x, y)
        s = self.spec
        grad = s.lam * (x - s.outer_targets[i])
        if s.sine_amp:
            grad = grad + s.sine_amp * np.cos(x)
        noise = self._noise(batch, s.noise_f)
        if noise is not None:
            grad = grad + noise[: self.d1]
        return grad

    def grad_f_y(self, i, x, y, batch=None):
        self.check_dims(x, y)
        grad = y - self.spec.inner_targets[i]
        noise = self._noise(batch, self.spec.noise_f)
        if noise is not None:
            grad = grad + noise[self.d1:]
        return grad

    # -- oracles --------------------------------------------------------------
    def has_oracles(self) -> bool:
        return True

    def _hess_bar(self, x: np.ndarray) -> np.ndarray:
        h = self._a_bar
        if self.spec.quartic:
            h = h + (self.spec.quartic / 2.0) * float(x @ x) * self._u_bar
        return h

    def y_star(self, x: np.ndarray) -> np.ndarray:
        """Exact minimizer of the client-average lower objective."""
        return solve_spd(self._hess_bar(x), -(self._b_bar @ x + self._c_bar))

    def jac_y_star(self, x: np.ndarray) -> np.ndarray:
        """d2 x d1 Jacobian of the inner optimum map x -> y*(x)."""
        ys = self.y_star(x)
        rhs = self._b_bar.copy()
        if self.spec.quartic:
            rhs = rhs + self.spec.quartic * np.outer(self._u_bar @ ys, x)
        h = self._hess_bar(x)
        return -np.linalg.solve(h, rhs)

    def grad_phi(self, x: np.ndarray) -> np.ndarray:
        """Exact hypergradient of Phi(x) = mean_i f_i(x, y*(x))."""
        ys = self.y_star(x)
        gx = self.spec.lam * (x - self._a_tgt_bar)
        if self.spec.sine_amp:
            gx = gx + self.spec.sine_amp * np.cos(x)
        gy = ys - self._b_tgt_bar
        return gx + self.jac_y_star(x).T @ gy

    def phi(self, x: np.ndarray) -> float:
        ys = self.y_star(x)
        return float(np.mean([self.value_f(i, x, ys) for i in range(self.n)]))

    def heterogeneity_bounds(self) -> tuple[float, float]:
        """Exact Assumption-style bounds (delta_f^2, delta_g^2).

        The joint gradient spread is independent of the evaluation point
        for this family, so the max over clients at any point is the bound.
        """
        s = self.spec
        dg = max(float(np.sum((c - self._c_bar) ** 2)) for c in s.c_vecs)
        df = max(
            s.lam ** 2 * float(np.sum((a - self._a_tgt_bar) ** 2))
            + float(np.sum((b - self._b_tgt_bar) ** 2))
            for a, b in zip(s.outer_targets, s.inner_targets))
        return df, dg


def make_quadratic(seed: int, n: int, d1: int, d2: int, hetero: float = 0.0,
                   noise_f: float = 0.0, noise_g: float = 0.0,
                   eig_range: tuple[float, float] = (1.0, 1.0), *,
                   lam: float = 0.5, coupling: float = 0.5,
                   quartic: float = 0.0, sine_amp: float = 0.0,
                   target_scale: float = 1.0,
                   ball_radius: float = 10.0) -> QuadraticProblem:
    """Construct a quadratic bilevel instance.

    ``eig_range`` brackets the eigenvalues of every A_i; an equal pair
    (s, s) yields exactly s * I. ``coupling`` sets the spectral norm of the
    shared cross block B. ``hetero`` scales mean-centered per-client
    offsets of the linear targets, so ``hetero == 0`` makes all clients
    identical while the client average is unchanged for any value.
    ``target_scale`` scales the mean linear targets; 0 puts the outer
    optimum exactly at the origin, where masked evaluation is unbiased
    (useful for pruned-training studies).
    """
    if eig_range[0] <= 0:
        raise InvalidSpec(f"eig_range minimum must be positive, got {eig_range[0]}")
    if eig_range[1] < eig_range[0]:
        raise InvalidSpec("eig_range must be (min, max) with min <= max")
    if min(n, d1, d2) < 1:
        raise InvalidSpec("n, d1, d2 must all be >= 1")
    if min(hetero, noise_f, noise_g, lam, quartic, sine_amp) < 0:
        raise InvalidSpec("scales must be nonnegative")

    gen = RngStream(seed, purpose="make-quadratic").generator()

    if eig_range[0] == eig_range[1]:
        a_shared = eig_range[0] * np.eye(d2)
    else:
        raw = gen.standard_normal((d2, d2))
        q, r = np.linalg.qr(raw)
        q = q * np.sign(np.diag(r))  # fix sign convention for determinism
        eigs = gen.uniform(eig_range[0], eig_range[1], size=d2)
        a_shared = symmetrize(q @ np.diag(eigs) @ q.T)

    b_shared = gen.standard_normal((d2, d1))
    norm = spectral_norm(b_shared)
    if norm > 0:
        b_shared = b_shared * (coupling / norm)

    c_bar = target_scale * gen.standard_normal(d2)
    a_tgt_bar = target_scale * gen.standard_normal(d1)
    b_tgt_bar = target_scale * gen.standard_normal(d2)

    def centered(shape):
        offs = gen.standard_normal((n,) + shape)
        return offs - offs.mean(axis=0)

    c_off = centered((d2,))
    a_off = centered((d1,))
    b_off = centered((d2,))

    u_mats = None
    if quartic > 0:
        u_mats = []
        for _ in range(n):
            w = gen.standard_normal((d2, d2))
            u = symmetrize(w @ w.T)
            u_mats.append(u / spectral_norm(u))

    spec = QuadraticSpec(
        a_mats=[a_shared.copy() for _ in range(n)],
        b_mats=[b_shared.copy() for _ in range(n)],
        c_vecs=[c_bar + hetero * c_off[i] for i in range(n)],
        outer_targets=[a_tgt_bar + hetero * a_off[i] for i in range(n)],
        inner_targets=[b_tgt_bar + hetero * b_off[i] for i in range(n)],
        u_mats=u_mats,
        lam=lam, noise_f=noise_f, noise_g=noise_g, hetero=hetero,
        quartic=quartic, sine_amp=sine_amp, ball_radius=ball_radius,
        params={"family": "quadratic", "seed": seed, "n": n, "d1": d1,
                "d2": d2, "hetero": hetero, "noise_f": noise_f,
                "noise_g": noise_g, "eig_range": list(eig_range), "lam": lam,
                "coupling": coupling, "quartic": quartic,
                "sine_amp": sine_amp, "target_scale": target_scale,
                "ball_radius": ball_radius})
    return QuadraticProblem(spec)


def _require_quadratic(problem) -> QuadraticProblem:
    if not isinstance(problem, QuadraticProblem):
        raise UnsupportedProblem(
            f"{type(problem).__name__} has no closed-form inner optimum")
    return problem


def inner_optimum_oracle(problem, x: np.ndarray) -> np.ndarray:
    """Closed-form y*(x) for the quadratic family."""
    return _require_quadratic(problem).y_star(np.asarray(x, dtype=np.float64))


def true_hypergradient_oracle(problem, x: np.ndarray) -> np.ndarray:
    """Exact grad Phi(x) for the quadratic family."""
    return _require_quadratic(problem).grad_phi(np.asarray(x, dtype=np.float64))


def analytic_outer_minimizer(problem) -> np.ndarray:
    """Unique minimizer of Phi for the plain quadratic family.

    Only defined with the quartic and sinusoidal flags off and a strongly
    convex outer objective.
    """
    p = _require_quadratic(problem)
    s = p.spec
    if s.quartic or s.sine_amp:
        raise UnsupportedProblem("minimizer is closed-form only for tau=amp=0")
    resp = -np.linalg.solve(p._a_bar, p._b_bar)     # y*(x) = resp @ x + r
    r = -np.linalg.solve(p._a_bar, p._c_bar)
    lhs = s.lam * np.eye(p.d1) + resp.T @ resp
    rhs = s.lam * p._a_tgt_bar + resp.T @ (p._b_tgt_bar - r)
    return np.linalg.solve(lhs, rhs)


def derive_constants(problem) -> ProblemConstants:
    """Smoothness constants of a quadratic instance over its operating ball.

    ``mu_g`` and the curvature part of ``l_g1`` are exact; the quartic
    contributions and ``l_f0`` are sound upper bounds over the ball of
    radius ``ball_radius`` around the origin (the upper gradient of a
    quadratic is unbounded on all of R^d, so a compact domain is required
    for finite constants).
    """
    p = _require_quadratic(problem)
    s = p.spec
    rho = s.ball_radius

    mu_g = min(spectral_bounds(a)[0] for a in s.a_mats)
    joint = 0.0
    for a, b in zip(s.a_mats, s.b_mats):
        block = np.zeros((p.d1 + p.d2, p.d1 + p.d2))
        block[: p.d2, : p.d2] = a
        block[: p.d2, p.d2:] = b
        block[p.d2:, : p.d2] = b.T
        joint = max(joint, spectral_norm(block))
    u_norm = 0.0
    if s.quartic:
        u_norm = max(spectral_norm(u) for u in s.u_mats)
    l_g1 = joint + 2.0 * s.quartic * u_norm * rho ** 2
    l_g2 = 6.0 * s.quartic * u_norm * rho

    l_f1 = max(s.lam, 1.0) + s.sine_amp
    l_f0 = max(
        np.sqrt(s.lam ** 2 * (rho + np.linalg.norm(a)) ** 2
                + (rho + np.linalg.norm(b)) ** 2)
        for a, b in zip(s.outer_targets, s.inner_targets))
    l_f0 = float(l_f0) + s.sine_amp * np.sqrt(p.d1)

    curvature_ratio = l_g1 / mu_g
    second_order = (l_f0 / mu_g) * (l_g2 + l_g1 * l_g2 / mu_g)
    m_f = l_f1 + curvature_ratio * l_f1 + second_order
    l_f = l_f1 + (l_g1 * (l_f1 + m_f)) / mu_g + second_order
    return ProblemConstants(mu_g=mu_g, l_g1=l_g1, l_g2=l_g2, l_f0=l_f0,
                            l_f1=l_f1, M_f=m_f, L_f=l_f, L_y=l_g1 / mu_g,
                            ball_radius=rho)
