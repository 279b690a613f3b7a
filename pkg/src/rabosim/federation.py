"""Round orchestration: masked inner training, parameter-wise aggregation,
hypergradient collection, coverage tracking and cost ledgers.

One round executes, in order: mask generation from the current global
model, submodel extraction, T local inner gradient steps per client,
parameter-wise inner aggregation over covering clients, broadcast of the
aggregated inner model re-masked per client, per-client hypergradient
estimation, and parameter-wise outer aggregation. Coordinates covered by
no client are bit-identical before and after the round at both levels.

Client phases are embarrassingly parallel; the server aggregates in
ascending client order with a fixed left-to-right summation, so results
are independent of the worker count and bit-reproducible across runs.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, DivergenceDetected, InvalidSpec, UnsupportedProblem
from .hypergrad import (
    EXACT_AID,
    RAFBO,
    HypergradEstimate,
    RAFBOConfig,
    exact_hypergradient,
    grad_eval_flops,
    rafbo_hypergradient,
)
from .masking import (
    CoverageTracker,
    Mask,
    MaskPolicy,
    apply_mask,
    coverage,
    generate_mask,
    mask_deviation,
)
from .problems.base import SampleBatch
from .rng import RngStream

DOWNLOAD_MODES = ("masked", "full")
BYTES_PER_COORD = 8  # 64-bit reals on every leg


@dataclass(frozen=True)
class GlobalState:
    """Full-model pair held by the server."""

    x: np.ndarray
    y: np.ndarray
    round_index: int = 0


@dataclass
class RunConfig:
    """All knobs of one training run.

    With ``theory_guard`` set, ``run`` checks the step sizes against the
    instance's smoothness constants: alpha <= 1/(L_f + 4 M_f) and
    beta <= min(1/(2 l_g1), 1/mu_g) are enforced; the lower bound on beta
    (1/mu_g - 1/(2 alpha L_y M_f mu_g)) can conflict with small-step
    schedules, so it is only reported as an advisory note.
    """

    alpha: float
    beta: float
    inner_epochs: int = 1
    rounds: int = 1
    n: int = 1
    estimator: str = EXACT_AID
    rafbo: RAFBOConfig = field(default_factory=RAFBOConfig)
    policy: MaskPolicy = field(default_factory=MaskPolicy)
    capacities: list = field(default_factory=list)
    seed: int = 0
    download_mode: str = "masked"
    theory_guard: bool = False
    batch_size_f: int = 0      # 0 -> deterministic (no batch object)
    batch_size_g: int = 0
    divergence_factor: float = 1e6
    workers: int = 1
    log_masks: bool = False
    x0: np.ndarray | None = None
    y0: np.ndarray | None = None

    def validate(self) -> None:
        if self.alpha <= 0 or self.beta <= 0:
            raise InvalidSpec("alpha and beta must be positive")
        if self.inner_epochs < 1:
            raise InvalidSpec("inner_epochs must be >= 1")
        if self.rounds < 0:
            raise InvalidSpec("rounds must be >= 0")
        if self.n < 1:
            raise InvalidSpec("need at least one client")
        if len(self.capacities) != self.n:
            raise InvalidSpec(
                f"{len(self.capacities)} capacities for {self.n} clients")
        if self.estimator not in (EXACT_AID, RAFBO):
            raise InvalidSpec(f"unknown estimator {self.estimator!r}")
        if self.download_mode not in DOWNLOAD_MODES:
            raise InvalidSpec(f"unknown download mode {self.download_mode!r}")
        if self.workers < 1:
            raise InvalidSpec("workers must be >= 1")
        if min(self.batch_size_f, self.batch_size_g) < 0:
            raise InvalidSpec("batch sizes must be >= 0")


@dataclass
class ClientReport:
    """One client's round output."""

    client: int
    mask_x: Mask
    mask_y: Mask
    g_delta: np.ndarray                      # (y_0 - y_T) / beta, d2
    inner_flops: int
    hypergrad: HypergradEstimate | None = None

    @property
    def compute_flops(self) -> int:
        hyper = self.hypergrad.flops if self.hypergrad is not None else 0
        return self.inner_flops + hyper


@dataclass(frozen=True)
class RoundLog:
    """Post-aggregation metrics of one round.

    Oracle columns hold NaN when the problem exposes no closed forms.
    Byte and flop fields are this round's increments.
    """

    round_index: int
    grad_phi_sq: float
    phi: float
    inner_err_sq: float
    c_star_x_running: int | None
    c_star_y_running: int | None
    bytes_up: int
    bytes_down: int
    flops: int
    mean_w1sq: float
    mean_w2sq: float
    p_star: int | None = None
    masks_x_hex: tuple | None = None
    masks_y_hex: tuple | None = None


CSV_COLUMNS = ("round", "grad_phi_sq", "phi", "inner_err_sq",
               "C_star_x_running", "C_star_y_running", "bytes_up",
               "bytes_down", "flops", "mean_w1sq", "mean_w2sq")


@dataclass
class CostLedger:
    """Cumulative exact-integer cost tallies.

    Bytes per leg are 8 x transferred coordinate count; uploads always
    carry only active coordinates, downloads depend on the mode.
    """

    x_down: int = 0
    y_down: int = 0
    g_up: int = 0
    y_plus_down: int = 0
    h_up: int = 0
    flops_per_client: dict = field(default_factory=dict)

    @property
    def bytes_up(self) -> int:
        return self.g_up + self.h_up

    @property
    def bytes_down(self) -> int:
        return self.x_down + self.y_down + self.y_plus_down

    @property
    def total_flops(self) -> int:
        return sum(self.flops_per_client.values())

    def legs(self) -> dict:
        return {"x_down": self.x_down, "y_down": self.y_down,
                "g_up": self.g_up, "y_plus_down": self.y_plus_down,
                "h_up": self.h_up}


def tally_costs(reports: list[ClientReport], download_mode: str,
                d1: int, d2: int) -> dict:
    """Per-leg byte increments and flop increment for one round."""
    inc = {"x_down": 0, "y_down": 0, "g_up": 0, "y_plus_down": 0, "h_up": 0,
           "flops": {}}
    for rep in reports:
        ax = rep.mask_x.active_count
        ay = rep.mask_y.active_count
        if download_mode == "masked":
            inc["x_down"] += BYTES_PER_COORD * ax
            inc["y_down"] += BYTES_PER_COORD * ay
            inc["y_plus_down"] += BYTES_PER_COORD * ay
        else:
            inc["x_down"] += BYTES_PER_COORD * d1
            inc["y_down"] += BYTES_PER_COORD * d2
            inc["y_plus_down"] += BYTES_PER_COORD * d2
        inc["g_up"] += BYTES_PER_COORD * ay
        inc["h_up"] += BYTES_PER_COORD * ax
        inc["flops"][rep.client] = rep.compute_flops
    return inc


def _apply_costs(ledger: CostLedger, inc: dict) -> None:
    ledger.x_down += inc["x_down"]
    ledger.y_down += inc["y_down"]
    ledger.g_up += inc["g_up"]
    ledger.y_plus_down += inc["y_plus_down"]
    ledger.h_up += inc["h_up"]
    for client, flops in inc["flops"].items():
        ledger.flops_per_client[client] = \
            ledger.flops_per_client.get(client, 0) + flops


def client_inner_loop(problem, i: int, x_i: np.ndarray, y_i0: np.ndarray,
                      mask_y: Mask, beta: float, inner_epochs: int,
                      batches=None, divergence_guard: float | None = None):
    """T masked stochastic gradient steps on y; returns (y_T, G).

    ``batches`` supplies one SampleBatch per epoch (None for noiseless /
    full-data evaluation). G = (y_0 - y_T) / beta summarizes the local
    update as the sum of the masked step gradients, oriented like a
    gradient so the server's ``y - beta * mean(G)`` update replays the
    clients' parameter deltas; its support stays inside the mask.
    Raises DivergenceDetected when ||y|| exceeds the guard.
    """
    if beta <= 0:
        raise InvalidSpec("beta must be positive")
    y = y_i0.copy()
    for t in range(inner_epochs):
        batch = batches[t] if batches is not None else None
        grad = apply_mask(problem.grad_g_y(i, x_i, y, batch), mask_y)
        y = y - beta * grad
        if divergence_guard is not None and np.linalg.norm(y) > divergence_guard:
            raise DivergenceDetected(
                f"client {i}: ||y|| = {np.linalg.norm(y):.3e} exceeded guard "
                f"{divergence_guard:.3e} at inner epoch {t} (beta too large?)")
    return y, (y_i0 - y) / beta


def _sorted_by_client(reports):
    return sorted(reports, key=lambda r: r.client)


def aggregate_inner(y_q: np.ndarray, reports: list[ClientReport],
                    beta: float) -> np.ndarray:
    """Covering-average inner update; uncovered coordinates untouched."""
    d2 = y_q.shape[0]
    counts = np.zeros(d2, dtype=np.int64)
    total = np.zeros(d2)
    for rep in _sorted_by_client(reports):
        if rep.g_delta.shape[0] != d2:
            raise DimensionMismatch("inner report dimension mismatch")
        counts += rep.mask_y.bits
        total += rep.mask_y.bits * rep.g_delta
    y_next = y_q.copy()
    covered = counts > 0
    y_next[covered] = y_q[covered] - beta * (total[covered] / counts[covered])
    return y_next


def aggregate_outer(x_q: np.ndarray, reports: list[ClientReport],
                    alpha: float) -> np.ndarray:
    """Covering-average hypergradient step; uncovered coordinates untouched."""
    d1 = x_q.shape[0]
    counts = np.zeros(d1, dtype=np.int64)
    total = np.zeros(d1)
    for rep in _sorted_by_client(reports):
        if rep.hypergrad is None:
            raise InvalidSpec(f"client {rep.client} report carries no hypergradient")
        if rep.hypergrad.value.shape[0] != d1:
            raise DimensionMismatch("outer report dimension mismatch")
        counts += rep.mask_x.bits
        total += rep.mask_x.bits * rep.hypergrad.value
    x_next = x_q.copy()
    covered = counts > 0
    x_next[covered] = x_q[covered] - alpha * (total[covered] / counts[covered])
    return x_next


def stationarity(problem, x: np.ndarray) -> float:
    """||grad Phi(x)||^2 via the problem's exact hypergradient oracle."""
    if not problem.has_oracles():
        raise UnsupportedProblem(
            f"{type(problem).__name__} exposes no hypergradient oracle")
    grad = problem.grad_phi(np.asarray(x, dtype=np.float64))
    return float(grad @ grad)


def _client_map(fn, n: int, workers: int):
    if workers <= 1:
        return [fn(i) for i in range(n)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(n)))


def _safe_deviation(v: np.ndarray, mask: Mask) -> float:
    if float(v @ v) == 0.0:
        return 0.0
    return mask_deviation(v, mask)


def rabo_round(problem, state: GlobalState, cfg: RunConfig,
               tracker: CoverageTracker | None = None,
               ledger: CostLedger | None = None,
               divergence_guard: float | None = None):
    """Execute one full round; returns (next_state, RoundLog).

    Order follows the double loop: masks, submodels, inner epochs, inner
    aggregation, re-masked broadcast of the aggregated inner model, one
    hypergradient per client, outer aggregation. ``divergence_guard`` is
    an absolute cap on ||y||; ``run`` anchors it to the initial scale so a
    slowly exploding trajectory cannot outrun it.
    """
    tracker = tracker if tracker is not None else CoverageTracker()
    ledger = ledger if ledger is not None else CostLedger()
    q = state.round_index
    guard = divergence_guard if divergence_guard is not None else \
        cfg.divergence_factor * max(1.0, float(np.linalg.norm(state.y)))

    def inner_phase(i: int) -> ClientReport:
        res = cfg.capacities[i]
        mask_x = generate_mask(state.x, res, cfg.policy, i, q, cfg.seed, "x")
        mask_y = generate_mask(state.y, res, cfg.policy, i, q, cfg.seed, "y")
        x_i = apply_mask(state.x, mask_x)
        y_i0 = apply_mask(state.y, mask_y)
        batches = None
        if cfg.batch_size_g > 0:
            batches = [SampleBatch("g", cfg.seed, i, q, draw=t,
                                   size=cfg.batch_size_g)
                       for t in range(cfg.inner_epochs)]
        try:
            y_t, g_delta = client_inner_loop(
                problem, i, x_i, y_i0, mask_y, cfg.beta, cfg.inner_epochs,
                batches, guard)
        except DivergenceDetected as exc:
            raise DivergenceDetected(f"round {q}: {exc}") from exc
        unit = grad_eval_flops(mask_x.active_count, mask_y.active_count)
        flops = cfg.inner_epochs * (unit + 2 * mask_y.active_count)
        return ClientReport(client=i, mask_x=mask_x, mask_y=mask_y,
                            g_delta=g_delta, inner_flops=flops)

    reports = _client_map(inner_phase, cfg.n, cfg.workers)
    y_next = aggregate_inner(state.y, reports, cfg.beta)

    def hyper_phase(i: int) -> HypergradEstimate:
        rep = reports[i]
        x_i = apply_mask(state.x, rep.mask_x)
        y_plus = apply_mask(y_next, rep.mask_y)
        batch_f = (SampleBatch("f", cfg.seed, i, q, draw=0, size=cfg.batch_size_f)
                   if cfg.batch_size_f > 0 else None)
        batch_g = (SampleBatch("g", cfg.seed, i, q, draw=cfg.inner_epochs,
                               size=cfg.batch_size_g)
                   if cfg.batch_size_g > 0 else None)
        if cfg.estimator == EXACT_AID:
            return exact_hypergradient(problem, i, x_i, y_plus, rep.mask_x,
                                       rep.mask_y, batch_f, batch_g,
                                       round_index=q)
        rng = RngStream(cfg.seed, i, q, "perturbation-set")
        return rafbo_hypergradient(problem, i, x_i, y_plus, rep.mask_x,
                                   rep.mask_y, cfg.rafbo, batch_f, batch_g,
                                   rng, round_index=q)

    for rep, est in zip(reports, _client_map(hyper_phase, cfg.n, cfg.workers)):
        rep.hypergrad = est
    x_next = aggregate_outer(state.x, reports, cfg.alpha)

    stats_x = coverage([rep.mask_x for rep in reports], problem.d1)
    stats_y = coverage([rep.mask_y for rep in reports], problem.d2)
    tracker.observe(stats_x, stats_y)
    inc = tally_costs(reports, cfg.download_mode, problem.d1, problem.d2)
    _apply_costs(ledger, inc)

    if problem.has_oracles():
        grad_phi = problem.grad_phi(x_next)
        grad_phi_sq = float(grad_phi @ grad_phi)
        phi = problem.phi(x_next)
        err = y_next - problem.y_star(x_next)
        inner_err_sq = float(err @ err)
    else:
        grad_phi_sq = phi = inner_err_sq = float("nan")

    p_sizes = [rep.hypergrad.p_size for rep in reports
               if rep.hypergrad is not None and rep.hypergrad.p_size]
    log = RoundLog(
        round_index=q,
        grad_phi_sq=grad_phi_sq, phi=phi, inner_err_sq=inner_err_sq,
        c_star_x_running=tracker.c_star_x, c_star_y_running=tracker.c_star_y,
        bytes_up=inc["g_up"] + inc["h_up"],
        bytes_down=inc["x_down"] + inc["y_down"] + inc["y_plus_down"],
        flops=sum(inc["flops"].values()),
        mean_w1sq=float(np.mean([_safe_deviation(state.x, rep.mask_x)
                                 for rep in reports])),
        mean_w2sq=float(np.mean([_safe_deviation(state.y, rep.mask_y)
                                 for rep in reports])),
        p_star=max(p_sizes) if p_sizes else None,
        masks_x_hex=tuple(rep.mask_x.to_hex() for rep in reports)
        if cfg.log_masks else None,
        masks_y_hex=tuple(rep.mask_y.to_hex() for rep in reports)
        if cfg.log_masks else None)
    return GlobalState(x_next, y_next, q + 1), log


@dataclass
class RunResult:
    final_state: GlobalState
    logs: list
    ledger: CostLedger
    coverage: CoverageTracker
    guard_notes: list = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "rounds": len(self.logs),
            "final_round": self.final_state.round_index,
            "final_x": [float(v) for v in self.final_state.x],
            "final_y": [float(v) for v in self.final_state.y],
            "final_grad_phi_sq": self.logs[-1].grad_phi_sq if self.logs else None,
            "final_phi": self.logs[-1].phi if self.logs else None,
            "final_inner_err_sq": self.logs[-1].inner_err_sq if self.logs else None,
            "c_star_x": self.coverage.c_star_x,
            "c_star_y": self.coverage.c_star_y,
            "bytes_up": self.ledger.bytes_up,
            "bytes_down": self.ledger.bytes_down,
            "bytes_per_leg": self.ledger.legs(),
            "total_flops": self.ledger.total_flops,
            "flops_per_client": {str(k): v for k, v in
                                 sorted(self.ledger.flops_per_client.items())},
            "guard_notes": list(self.guard_notes),
        }


def check_theory_guard(cfg: RunConfig, constants) -> list:
    """Enforce step-size upper bounds; report the beta lower bound only."""
    notes = []
    alpha_cap = 1.0 / (constants.L_f + 4.0 * constants.M_f)
    beta_cap = min(1.0 / (2.0 * constants.l_g1), 1.0 / constants.mu_g)
    if cfg.alpha > alpha_cap:
        raise InvalidSpec(
            f"theory guard: alpha {cfg.alpha} > 1/(L_f + 4 M_f) = {alpha_cap:.6g}")
    if cfg.beta > beta_cap:
        raise InvalidSpec(
            f"theory guard: beta {cfg.beta} > min(1/(2 l_g1), 1/mu_g) = {beta_cap:.6g}")
    beta_floor = 1.0 / constants.mu_g - 1.0 / (
        2.0 * cfg.alpha * constants.L_y * constants.M_f * constants.mu_g)
    if cfg.beta < beta_floor:
        notes.append(
            f"advisory: beta {cfg.beta} below theoretical floor {beta_floor:.6g}")
    return notes


def run(problem, cfg: RunConfig) -> RunResult:
    """Execute cfg.rounds rounds of the double loop from the initial state."""
    cfg.validate()
    guard_notes = []
    if cfg.theory_guard:
        from .problems.quadratic import derive_constants
        guard_notes = check_theory_guard(cfg, derive_constants(problem))

    x0 = (np.array(cfg.x0, dtype=np.float64) if cfg.x0 is not None
          else np.zeros(problem.d1))
    y0 = (np.array(cfg.y0, dtype=np.float64) if cfg.y0 is not None
          else np.zeros(problem.d2))
    state = GlobalState(x0, y0, 0)
    tracker = CoverageTracker()
    ledger = CostLedger()
    guard = cfg.divergence_factor * max(1.0, float(np.linalg.norm(y0)),
                                        float(np.linalg.norm(x0)))
    logs = []
    for _ in range(cfg.rounds):
        try:
            state, log = rabo_round(problem, state, cfg, tracker, ledger, guard)
        except DivergenceDetected as exc:
            exc.partial_logs = logs
            raise
        logs.append(log)
    return RunResult(state, logs, ledger, tracker, guard_notes)


def _format_value(value) -> str:
    if value is None:
        return "nan"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def logs_to_csv(logs: list) -> str:
    """Render round logs with the fixed column set, byte-deterministically."""
    lines = [",".join(CSV_COLUMNS)]
    for log in logs:
        row = (log.round_index, log.grad_phi_sq, log.phi, log.inner_err_sq,
               log.c_star_x_running, log.c_star_y_running, log.bytes_up,
               log.bytes_down, log.flops, log.mean_w1sq, log.mean_w2sq)
        lines.append(",".join(_format_value(v) for v in row))
    return "\n".join(lines) + "\n"
