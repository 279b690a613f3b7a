"""Bilevel problem interface and shared value types.

A bilevel problem exposes, per client ``i``, a stochastic upper loss
``f_i(x, y)`` and lower loss ``g_i(x, y)`` together with the derivative
callbacks the training loop and hypergradient estimators need. The lower
loss must be strongly convex in ``y`` for every fixed ``x``.

Stochasticity is mediated by ``SampleBatch``: a batch pins down one
realization of the problem's noise (or one subsample of its data), so
evaluating the same callback twice with the same batch returns identical
values. Passing ``batch=None`` requests the noiseless/full-data value.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np

from ..rng import RngStream


@dataclass(frozen=True)
class SampleBatch:
    """One reproducible stochastic draw for a derivative evaluation.

    ``level`` tags upper ("f") or lower ("g") sampling. ``size`` is the
    number of independent samples averaged into the draw; larger batches
    shrink noise variance by 1/size. ``draw`` distinguishes repeated
    batches within the same (client, round) slot.
    """

    level: str
    seed: int
    client: int = 0
    round_index: int = 0
    draw: int = 0
    size: int = 1

    def __post_init__(self):
        if self.level not in ("f", "g"):
            raise ValueError(f"level must be 'f' or 'g', got {self.level!r}")
        if self.size < 1:
            raise ValueError("batch size must be >= 1")

    def stream(self) -> RngStream:
        return RngStream(self.seed, self.client, self.round_index,
                         f"batch-{self.level}-{self.draw}")


@dataclass(frozen=True)
class ProblemConstants:
    """Smoothness and boundedness constants of a problem instance.

    ``l_f0`` bounds the upper gradient only over an operating ball of
    radius ``ball_radius`` (it is unbounded on all of R^d for quadratic
    objectives). ``L_y == l_g1 / mu_g`` by construction.
    """

    mu_g: float
    l_g1: float
    l_g2: float
    l_f0: float
    l_f1: float
    M_f: float
    L_f: float
    L_y: float
    ball_radius: float = 10.0

    def __post_init__(self):
        values = [self.mu_g, self.l_g1, self.l_g2, self.l_f0, self.l_f1,
                  self.M_f, self.L_f, self.L_y]
        if not all(np.isfinite(v) and v >= 0 for v in values):
            raise ValueError("constants must be finite and nonnegative")


class BilevelProblem(ABC):
    """Per-client access to a distributed bilevel objective.

    Implementations are immutable after construction; every method is a
    pure function of its arguments and safe to call concurrently.
    """

    n: int
    d1: int
    d2: int

    # -- objective values -------------------------------------------------
    @abstractmethod
    def value_f(self, i: int, x: np.ndarray, y: np.ndarray,
                batch: SampleBatch | None = None) -> float: ...

    @abstractmethod
    def value_g(self, i: int, x: np.ndarray, y: np.ndarray,
                batch: SampleBatch | None = None) -> float: ...

    # -- first derivatives ------------------------------------------------
    @abstractmethod
    def grad_f_x(self, i: int, x: np.ndarray, y: np.ndarray,
                 batch: SampleBatch | None = None) -> np.ndarray: ...

    @abstractmethod
    def grad_f_y(self, i: int, x: np.ndarray, y: np.ndarray,
                 batch: SampleBatch | None = None) -> np.ndarray: ...

    @abstractmethod
    def grad_g_y(self, i: int, x: np.ndarray, y: np.ndarray,
                 batch: SampleBatch | None = None) -> np.ndarray: ...

    @abstractmethod
    def grad_g_x(self, i: int, x: np.ndarray, y: np.ndarray,
                 batch: SampleBatch | None = None) -> np.ndarray: ...

    # -- second derivatives (lower level) ----------------------------------
    @abstractmethod
    def hess_yy_g(self, i: int, x: np.ndarray, y: np.ndarray,
                  batch: SampleBatch | None = None) -> np.ndarray:
        """Dense d2 x d2 Hessian of g_i with respect to y."""

    @abstractmethod
    def cross_xy_g_apply(self, i: int, x: np.ndarray, y: np.ndarray,
                         v: np.ndarray,
                         batch: SampleBatch | None = None) -> np.ndarray:
        """Apply the mixed second derivative: returns (d^2 g_i/dx dy) @ v.

        ``v`` lives in R^{d2}; the result lives in R^{d1}. Entry ``s`` is
        the inner product of ``v`` with the derivative of grad_g_y along
        outer coordinate ``s``.
        """

    # -- optional oracle hooks ---------------------------------------------
    def has_oracles(self) -> bool:
        """Whether closed-form y*(x) and grad Phi(x) are available."""
        return False

    def mean_value_f(self, x: np.ndarray, y: np.ndarray) -> float:
        """Client-average upper objective, noiseless."""
        return float(np.mean([self.value_f(i, x, y) for i in range(self.n)]))

    def mean_grad_g_y(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Client-average lower gradient, noiseless, fixed client order."""
        total = np.zeros(self.d2)
        for i in range(self.n):
            total += self.grad_g_y(i, x, y)
        return total / self.n

    def check_dims(self, x: np.ndarray, y: np.ndarray) -> None:
        from ..errors import DimensionMismatch
        if x.shape != (self.d1,):
            raise DimensionMismatch(f"x has shape {x.shape}, want ({self.d1},)")
        if y.shape != (self.d2,):
            raise DimensionMismatch(f"y has shape {y.shape}, want ({self.d2},)")
