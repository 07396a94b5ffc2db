"""Outer training loop: sample, shadow rewards, truncated Q, truncated gradient, ascent."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .estimation import (
    ExactQEstimator,
    QEstimator,
    StepSchedule,
    TDQEstimator,
    estimate_local_occupancy,
    exact_truncated_q,
    occupancy_mass,
    truncated_gradient,
)
from .mdp import FactoredMDP, sample_batch, trajectory_rng
from .oracle import DEFAULT_LIMITS, ExactEvaluator, OracleError, OracleLimits, expected_truncated_gradient
from .policy import LocalizedPolicy, save_policy
from .utility import LocalUtility, objective_from_occupancy

__all__ = [
    "TrainConfig",
    "IterationMetrics",
    "MetricsLog",
    "TrainResult",
    "TrainingAborted",
    "StationarityReport",
    "train",
    "evaluate_stationarity",
    "stationarity_prefixes",
    "ascent_violations",
]

log = logging.getLogger(__name__)

PROBE_ITERATION_BASE = 1_000_000
TD_STREAM_INDEX = 2**32
MASS_TOL = 1e-12


@dataclass
class TrainConfig:
    T: int = 100
    B: int = 64
    H: int = 30
    H_q: int = 2000
    kappa: int = 1
    eta: float | str = "auto"
    eta_init: float = 8.0
    probe_steps: int = 5
    max_halvings: int = 30
    smoothness: float | None = None
    q_estimator: str = "td"
    gradient: str = "sampled"
    td_h: float = 10.0
    td_k0: float = 100.0
    theta_init: str = "zeros"
    seed: int = 0
    oracle: bool | str = "auto"
    checkpoint_every: int = 0

    def validate(self) -> None:
        if self.T < 0 or self.B < 1 or self.H < 1 or self.H_q < 2:
            raise ValueError("need T >= 0, B >= 1, H >= 1 and H_q >= 2")
        if self.kappa < 0:
            raise ValueError("kappa must be non-negative")
        if self.q_estimator not in ("td", "exact"):
            raise ValueError(f"q_estimator must be 'td' or 'exact', got {self.q_estimator!r}")
        if self.gradient not in ("sampled", "exact"):
            raise ValueError(f"gradient must be 'sampled' or 'exact', got {self.gradient!r}")
        if isinstance(self.eta, str) and self.eta != "auto":
            raise ValueError(f"eta must be a number or 'auto', got {self.eta!r}")
        if not isinstance(self.eta, str) and self.eta < 0:
            raise ValueError("eta must be non-negative")

    def make_q_estimator(self) -> QEstimator:
        if self.q_estimator == "exact":
            return ExactQEstimator()
        return TDQEstimator(self.H_q, StepSchedule(self.td_h, self.td_k0))


@dataclass
class IterationMetrics:
    t: int
    eta: float
    F_exact: float = math.nan
    grad_norm_sq_exact: float = math.nan
    grad_norm_sq_estimated: float = math.nan
    grad_error_sq: float = math.nan
    truncation_error_sq: float = math.nan
    q_sup_delta_max: float = math.nan
    occupancy_mass_error: float = math.nan
    td_coverage_min: float = math.nan
    q_sup_delta: list = field(default_factory=list)
    wall_time: float = field(default=0.0, compare=False)

    @classmethod
    def columns(cls, n_agents: int) -> list[str]:
        base = [f.name for f in fields(cls) if f.name not in ("q_sup_delta", "wall_time")]
        return base + [f"q_sup_delta_{i}" for i in range(n_agents)]

    def as_row(self, n_agents: int) -> list[str]:
        vals = [getattr(self, f.name) for f in fields(self) if f.name not in ("q_sup_delta", "wall_time")]
        deltas = list(self.q_sup_delta) + [math.nan] * (n_agents - len(self.q_sup_delta))
        return [repr(v) if isinstance(v, float) else str(v) for v in vals + deltas]


@dataclass
class MetricsLog:
    """Per-iteration rows plus the objective after the final update."""

    n_agents: int
    rows: list[IterationMetrics] = field(default_factory=list)
    final_objective: float = math.nan

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows], dtype=float)

    def has_oracle(self) -> bool:
        return bool(self.rows) and not np.isnan(self.column("grad_norm_sq_exact")).any()

    def to_csv(self, path) -> None:
        """Write the metrics log. Floats use ``repr`` so the file round-trips exactly."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(IterationMetrics.columns(self.n_agents))
            for r in self.rows:
                w.writerow(r.as_row(self.n_agents))


@dataclass
class StationarityReport:
    lhs: float
    rhs: float
    delta: float
    holds: bool


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class TrainResult:
    policy: LocalizedPolicy
    metrics: MetricsLog
    eta: float
    violations: list[str]
    initial_policy: LocalizedPolicy
    probe: list[dict] = field(default_factory=list)


def _oracle_enabled(cfg: TrainConfig, mdp: FactoredMDP, limits: OracleLimits) -> bool:
    if cfg.oracle == "auto":
        return mdp.n_pairs <= limits.max_global_pairs and mdp.n_pairs * mdp.states.size <= limits.max_transition_entries
    return bool(cfg.oracle)


class _Iteration:
    """One pass of sampling and estimation at fixed parameters."""

    def __init__(self, mdp, utilities, cfg, estimator):
        self.mdp = mdp
        self.utilities = utilities
        self.cfg = cfg
        self.estimator = estimator
        self.mass = occupancy_mass(mdp.gamma, None if cfg.gradient == "exact" else cfg.H)

    def estimate(self, policy: LocalizedPolicy, iteration: int):
        mdp, cfg = self.mdp, self.cfg
        if cfg.gradient == "exact":
            return self._expected(policy)
        batch = sample_batch(mdp, policy, cfg.B, cfg.H, cfg.seed, iteration)
        shapes = list(zip(mdp.state_sizes, mdp.action_sizes))
        lam = [estimate_local_occupancy(batch, i, mdp.gamma, shapes[i]) for i in range(mdp.n_agents)]
        mass_err = max(abs(l.sum() - self.mass) for l in lam)
        rewards = [u.gradient(l) for u, l in zip(self.utilities, lam)]
        rng = trajectory_rng(cfg.seed, iteration, TD_STREAM_INDEX)
        q_tables = self.estimator.estimate(mdp, policy, rewards, cfg.kappa, rng)
        grads = [truncated_gradient(batch, policy, q_tables, i, mdp.gamma) for i in range(mdp.n_agents)]
        return grads, q_tables, lam, rewards, mass_err

    def _expected(self, policy):
        # oracle occupancy, exact truncated Q and the expectation of the estimator
        ev = ExactEvaluator(self.mdp, policy)
        occ, rewards, qs = ev.shadow_q(self.utilities)
        q_tables = {j: exact_truncated_q(qs[j], self.mdp, j, self.cfg.kappa) for j in range(self.mdp.n_agents)}
        grads = expected_truncated_gradient(self.mdp, policy, q_tables, evaluator=ev)
        mass_err = abs(occ.mass - self.mass)
        return grads, q_tables, occ.local, rewards, mass_err


def _exact_quantities(mdp, policy, utilities, kappa):
    ev = ExactEvaluator(mdp, policy)
    occ, rewards, qs = ev.shadow_q(utilities)
    F = objective_from_occupancy(occ.local, utilities)
    weights = occ.joint * np.mean(qs, axis=0)
    grad = [ev.aggregate_score(i, weights) for i in range(mdp.n_agents)]
    q_hat = {j: exact_truncated_q(qs[j], mdp, j, kappa) for j in range(mdp.n_agents)}
    g_hat = expected_truncated_gradient(mdp, policy, q_hat, evaluator=ev)
    return F, grad, g_hat, q_hat


def _sq(vs: Sequence[np.ndarray]) -> float:
    return float(sum(np.sum(v ** 2) for v in vs))


def _probe_step_size(mdp, utilities, cfg, step, policy0) -> tuple[float, list[dict]]:
    """Halve ``eta`` until the per-iteration ascent inequality holds on all probe steps."""
    eta = float(cfg.eta_init)
    history = []
    for _ in range(cfg.max_halvings + 1):
        policy = policy0
        ok = True
        for p in range(cfg.probe_steps):
            F, grad, _, _ = _exact_quantities(mdp, policy, utilities, cfg.kappa)
            g_est, *_ = step.estimate(policy, PROBE_ITERATION_BASE + p)
            delta = _sq([a - b for a, b in zip(grad, g_est)])
            nxt = policy.ascent_step(g_est, eta)
            F_next = _exact_quantities(mdp, nxt, utilities, cfg.kappa)[0]
            required = eta / 4 * _sq(grad) - 3 * eta / 4 * delta
            if F_next - F < required:
                ok = False
                break
            policy = nxt
        history.append({"eta": eta, "accepted": ok})
        if ok:
            return eta, history
        eta /= 2
    return eta, history


def train(
    mdp: FactoredMDP,
    utilities: Sequence[LocalUtility],
    cfg: TrainConfig,
    run_dir: str | Path | None = None,
    initial_policy: LocalizedPolicy | None = None,
    limits: OracleLimits = DEFAULT_LIMITS,
) -> TrainResult:
    """Run ``cfg.T`` iterations of distributed shadow-reward policy gradient ascent.

    With the oracle enabled (small instances) each row of the metrics log
    also carries the exact objective, exact gradient, truncation error and
    the squared gradient-estimation error used by the stationarity bound.
    """
    cfg.validate()
    n = mdp.n_agents
    if len(utilities) != n:
        raise ValueError(f"need {n} utilities, got {len(utilities)}")
    policy = initial_policy or LocalizedPolicy.for_mdp(mdp, cfg.kappa, cfg.theta_init, seed=cfg.seed)
    if policy.kappa != cfg.kappa:
        raise ValueError("initial policy radius does not match cfg.kappa")
    policy0 = policy.copy()
    use_oracle = _oracle_enabled(cfg, mdp, limits)
    if (cfg.q_estimator == "exact" or cfg.gradient == "exact") and not use_oracle:
        raise OracleError("exact estimation needs an instance within the oracle limits")
    step = _Iteration(mdp, utilities, cfg, cfg.make_q_estimator())

    probe: list[dict] = []
    if cfg.eta == "auto":
        if use_oracle and cfg.T > 0:
            eta, probe = _probe_step_size(mdp, utilities, cfg, step, policy0)
        else:
            eta = float(cfg.eta_init)
    else:
        eta = float(cfg.eta)
    if cfg.smoothness:
        eta = min(eta, 1.0 / (4.0 * cfg.smoothness))

    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None and cfg.checkpoint_every:
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)

    metrics = MetricsLog(n)
    violations: list[str] = []
    for t in range(cfg.T):
        start = time.perf_counter()
        grads, q_tables, _, _, mass_err = step.estimate(policy, t)
        row = IterationMetrics(t=t, eta=eta, occupancy_mass_error=float(mass_err))
        if mass_err > MASS_TOL * max(1.0, step.mass):
            violations.append(f"t={t}: occupancy mass error {mass_err:.3e}")
        if not all(np.isfinite(g).all() for g in grads):
            snapshot = {
                "t": t,
                "theta": [th.tolist() for th in policy.theta],
                "grads": [g.tolist() for g in grads],
            }
            if run_dir is not None:
                run_dir.mkdir(parents=True, exist_ok=True)
                (run_dir / "abort_snapshot.json").write_text(json.dumps(snapshot, default=str))
            raise TrainingAborted(f"non-finite gradient estimate at iteration {t}", snapshot)
        row.grad_norm_sq_estimated = _sq(grads)
        row.td_coverage_min = min(q.coverage for q in q_tables.values())
        if use_oracle:
            try:
                F, grad, g_hat, q_hat = _exact_quantities(mdp, policy, utilities, cfg.kappa)
            except OracleError as exc:
                violations.append(f"t={t}: {exc}")
                raise
            row.F_exact = F
            row.grad_norm_sq_exact = _sq(grad)
            row.grad_error_sq = _sq([a - b for a, b in zip(grad, grads)])
            row.truncation_error_sq = _sq([a - b for a, b in zip(grad, g_hat)])
            row.q_sup_delta = [float(np.abs(q_tables[i].values - q_hat[i].values).max()) for i in range(n)]
            row.q_sup_delta_max = max(row.q_sup_delta)
        policy = policy.ascent_step(grads, eta)
        row.wall_time = time.perf_counter() - start
        metrics.rows.append(row)
        if run_dir is not None and cfg.checkpoint_every and (t + 1) % cfg.checkpoint_every == 0:
            save_policy(policy, run_dir / "checkpoints" / f"policy_t{t + 1:06d}.json")

    if use_oracle:
        metrics.final_objective = _exact_quantities(mdp, policy, utilities, cfg.kappa)[0]
        if cfg.smoothness and metrics.rows:
            # the ascent inequality is only guaranteed under the smoothness guard
            violations.extend(f"t={t}: ascent inequality fails" for t in ascent_violations(metrics))
    return TrainResult(policy, metrics, eta, violations, policy0, probe)


def _require_oracle(metrics: MetricsLog) -> None:
    if not metrics.has_oracle():
        raise ValueError("stationarity needs exact-gradient columns; rerun with the oracle enabled")


def evaluate_stationarity(metrics: MetricsLog, eta_schedule: Sequence[float] | None = None) -> StationarityReport:
    """Weighted average of ``||grad F||^2`` and the matching upper bound.

    ``rhs = 4 (F_T - F_0) / sum(eta) + 3 * Delta`` with ``Delta`` the largest
    logged squared gradient-estimation error.
    """
    _require_oracle(metrics)
    eta = metrics.column("eta") if eta_schedule is None else np.asarray(eta_schedule, dtype=float)
    g2 = metrics.column("grad_norm_sq_exact")
    lhs = float(np.sum(eta * g2) / np.sum(eta))
    if math.isnan(metrics.final_objective):
        raise ValueError("metrics log has no final objective")
    delta = float(metrics.column("grad_error_sq").max())
    F0 = metrics.rows[0].F_exact
    rhs = float(4 * (metrics.final_objective - F0) / np.sum(eta) + 3 * delta)
    return StationarityReport(lhs, rhs, delta, lhs <= rhs)


def stationarity_prefixes(metrics: MetricsLog) -> dict[str, np.ndarray]:
    """``lhs``/``rhs`` of the stationarity bound for every prefix length ``T' = 1..T``.

    ``Delta`` for a prefix is the largest squared estimation error inside it.
    """
    _require_oracle(metrics)
    eta = metrics.column("eta")
    g2 = metrics.column("grad_norm_sq_exact")
    F = np.append(metrics.column("F_exact"), metrics.final_objective)
    err = metrics.column("grad_error_sq")
    cum_eta = np.cumsum(eta)
    lhs = np.cumsum(eta * g2) / cum_eta
    delta = np.maximum.accumulate(err)
    rhs = 4 * (F[1:] - F[0]) / cum_eta + 3 * delta
    return {"lhs": lhs, "rhs": rhs, "delta": delta}


def ascent_violations(metrics: MetricsLog, tol: float = 1e-12) -> list[int]:
    """Iterations where ``F(t+1) - F(t) < eta/4 ||grad F||^2 - 3 eta/4 Delta_t``."""
    _require_oracle(metrics)
    eta = metrics.column("eta")
    F = np.append(metrics.column("F_exact"), metrics.final_objective)
    need = eta / 4 * metrics.column("grad_norm_sq_exact") - 3 * eta / 4 * metrics.column("grad_error_sq")
    return [int(t) for t in np.nonzero(np.diff(F) < need - tol * np.maximum(1.0, np.abs(F[:-1])))[0]]
