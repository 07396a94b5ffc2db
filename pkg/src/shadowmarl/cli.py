"""Command line entry point: ``shadowmarl {train,verify-decay,gradient-check,oracle-compare} CONFIG``.

Every subcommand writes into the run directory ``<run_root>/<config-hash>-seed<seed>``.
Exit codes: 0 clean, 1 invariant violation logged, 2 bad invocation or config,
3 (``verify-decay`` only) no decay certificate holds so the bounds cannot be checked.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, load_config
from .estimation import (
    TDQEstimator,
    StepSchedule,
    estimate_local_occupancy,
    exact_truncated_q,
    occupancy_error_bound,
    occupancy_mass,
    truncated_gradient,
)
from .mdp import sample_batch, trajectory_rng
from .oracle import (
    ExactEvaluator,
    OracleError,
    advantage_policy_gradient,
    expected_truncated_gradient,
    finite_difference_gradient,
    influence_matrix,
    measure_decay,
    search_certificate,
    truncation_errors,
    truncation_gradient_bound,
)
from .policy import LocalizedPolicy, load_policy, save_policy
from .trainer import TrainingAborted, ascent_violations, evaluate_stationarity, train

log = logging.getLogger("shadowmarl")

EXIT_OK, EXIT_VIOLATION, EXIT_USAGE, EXIT_UNCERTIFIED = 0, 1, 2, 3


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(_jsonable(payload), indent=2) + "\n")


def _prepare(args) -> tuple[ExperimentConfig, Path]:
    cfg = load_config(args.config)
    run_dir = cfg.run_dir(args.run_root)
    run_dir.mkdir(parents=True, exist_ok=True)
    shutil.copyfile(args.config, run_dir / "config.yaml")
    return cfg, run_dir


def _policy(cfg: ExperimentConfig, mdp, args) -> LocalizedPolicy:
    if getattr(args, "policy", None):
        policy = load_policy(args.policy)
        if not policy.compatible_with(mdp):
            raise ValueError("checkpoint does not match the configured instance")
        return policy
    tc = cfg.train_config()
    return LocalizedPolicy.for_mdp(mdp, tc.kappa, tc.theta_init, seed=tc.seed)


def cmd_train(args) -> int:
    cfg, run_dir = _prepare(args)
    mdp = cfg.build_mdp()
    utilities = cfg.build_utilities(mdp)
    tc = cfg.train_config()
    start = time.perf_counter()
    summary: dict = {"config_hash": cfg.config_hash(), "seed": tc.seed}
    try:
        result = train(mdp, utilities, tc, run_dir=run_dir, limits=cfg.oracle_limits())
    except (TrainingAborted, OracleError) as exc:
        summary.update(status="aborted", error=str(exc))
        _write_json(run_dir / "summary.json", summary)
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_VIOLATION
    metrics = result.metrics
    metrics.to_csv(run_dir / "metrics.tsv")
    save_policy(result.policy, run_dir / "policy_final.json")
    summary.update(
        status="ok" if not result.violations else "violations",
        iterations=len(metrics),
        eta=result.eta,
        step_size_probe=result.probe,
        violations=result.violations,
        wall_time_total=time.perf_counter() - start,
        wall_time_per_iteration=[r.wall_time for r in metrics.rows],
    )
    if metrics.has_oracle() and not math.isnan(metrics.final_objective):
        rep = evaluate_stationarity(metrics)
        summary.update(
            F_initial=metrics.rows[0].F_exact,
            F_final=metrics.final_objective,
            stationarity={"lhs": rep.lhs, "rhs": rep.rhs, "delta": rep.delta, "holds": rep.holds},
            ascent_inequality_failures=ascent_violations(metrics),
        )
    _write_json(run_dir / "summary.json", summary)
    print(f"run directory: {run_dir}")
    if "F_final" in summary:
        print(f"F: {summary['F_initial']:.6g} -> {summary['F_final']:.6g}; "
              f"stationarity lhs {summary['stationarity']['lhs']:.3e} rhs {summary['stationarity']['rhs']:.3e}")
    for v in result.violations:
        print(f"violation: {v}", file=sys.stderr)
    return EXIT_OK if not result.violations else EXIT_VIOLATION


def cmd_verify_decay(args) -> int:
    cfg, run_dir = _prepare(args)
    mdp = cfg.build_mdp()
    utilities = cfg.build_utilities(mdp)
    policy = _policy(cfg, mdp, args)
    limits = cfg.oracle_limits()
    M = influence_matrix(mdp, limits)
    M_f = max(u.grad_bound(mdp.gamma) for u in utilities)
    cert = search_certificate(M, mdp.gamma, M_f)
    kappas = cfg.oracle_option("kappas") or list(range(mdp.graph.diameter + 1))
    decay = measure_decay(mdp, policy, utilities, kappas)
    errs = truncation_errors(mdp, policy, utilities, kappas)
    q_bound = np.array([cert.bound(k) for k in kappas])
    g_bound = np.array([truncation_gradient_bound(cert, k) for k in kappas])
    violations = []
    if cert.holds:
        for col, k in enumerate(kappas):
            for i in range(mdp.n_agents):
                if decay[i, col] > q_bound[col] or errs["q_error"][i, col] > q_bound[col]:
                    violations.append(f"kappa={k} agent={i}: Q decay exceeds bound")
                if errs["gradient_error"][i, col] > g_bound[col]:
                    violations.append(f"kappa={k} agent={i}: gradient truncation error exceeds bound")
    report = {
        "influence_matrix": M.M,
        "certificate": {"beta": cert.beta, "rho": cert.rho, "holds": cert.holds, "c0": cert.c0,
                        "phi0": cert.phi0, "M_f": M_f, "gamma": cert.gamma},
        "kappas": list(kappas),
        "decay": decay,
        "q_truncation_error": errs["q_error"],
        "gradient_truncation_error": errs["gradient_error"],
        "q_bound": q_bound,
        "gradient_bound": g_bound,
        "violations": violations,
    }
    _write_json(run_dir / "verify_decay.json", report)
    print(f"certificate holds: {cert.holds} (beta={cert.beta}, gamma*rho={mdp.gamma * cert.rho:.4f})")
    print(f"report: {run_dir / 'verify_decay.json'}")
    if violations:
        for v in violations:
            print(f"violation: {v}", file=sys.stderr)
        return EXIT_VIOLATION
    return EXIT_OK if cert.holds else EXIT_UNCERTIFIED


def _rel(a: list, b: list) -> float:
    num = math.sqrt(sum(float(np.sum((x - y) ** 2)) for x, y in zip(a, b)))
    den = math.sqrt(sum(float(np.sum(y ** 2)) for y in b))
    return num / max(den, 1e-300)


def cmd_gradient_check(args) -> int:
    cfg, run_dir = _prepare(args)
    mdp = cfg.build_mdp()
    utilities = cfg.build_utilities(mdp)
    base = _policy(cfg, mdp, args)
    h = float(cfg.oracle_option("fd_step", 1e-5))
    tol = float(args.tol)
    rng = np.random.default_rng(cfg.seed)
    rows, violations = [], []
    for k in range(int(cfg.oracle_option("n_random", 5))):
        policy = base if k == 0 else base.from_flat(rng.normal(size=base.flat_params().size))
        ev = ExactEvaluator(mdp, policy, cfg.oracle_limits())
        occ, rewards, qs = ev.shadow_q(utilities)
        exact = [ev.aggregate_score(i, occ.joint * np.mean(qs, axis=0)) for i in range(mdp.n_agents)]
        fd = finite_difference_gradient(mdp, policy, utilities, h)
        adv = advantage_policy_gradient(mdp, policy, rewards)
        row = {"draw": k, "rel_error_fd": _rel(exact, fd), "rel_error_advantage": _rel(exact, adv),
               "grad_norm": math.sqrt(sum(float(np.sum(g ** 2)) for g in exact))}
        rows.append(row)
        if row["rel_error_fd"] > tol:
            violations.append(f"draw {k}: finite-difference relative error {row['rel_error_fd']:.2e} > {tol:g}")
    _write_json(run_dir / "gradient_check.json", {"fd_step": h, "tolerance": tol, "draws": rows,
                                                  "violations": violations})
    for r in rows:
        print(f"draw {r['draw']}: fd {r['rel_error_fd']:.2e}  advantage {r['rel_error_advantage']:.2e}")
    for v in violations:
        print(f"violation: {v}", file=sys.stderr)
    return EXIT_VIOLATION if violations else EXIT_OK


def cmd_oracle_compare(args) -> int:
    cfg, run_dir = _prepare(args)
    mdp = cfg.build_mdp()
    utilities = cfg.build_utilities(mdp)
    policy = _policy(cfg, mdp, args)
    tc = cfg.train_config()
    delta0 = float(args.delta0)
    ev = ExactEvaluator(mdp, policy, cfg.oracle_limits())
    occ, _, qs_exact = ev.shadow_q(utilities)
    exact_grad = [ev.aggregate_score(i, occ.joint * np.mean(qs_exact, axis=0)) for i in range(mdp.n_agents)]
    bound = occupancy_error_bound(mdp.gamma, tc.H, tc.B, delta0)
    mass = occupancy_mass(mdp.gamma, tc.H)
    shapes = list(zip(mdp.state_sizes, mdp.action_sizes))
    estimator = TDQEstimator(tc.H_q, StepSchedule(tc.td_h, tc.td_k0))
    draws, violations = [], []
    for k in range(int(cfg.oracle_option("n_random", 5))):
        batch = sample_batch(mdp, policy, tc.B, tc.H, tc.seed, iteration=k)
        lam = [estimate_local_occupancy(batch, i, mdp.gamma, shapes[i]) for i in range(mdp.n_agents)]
        occ_err = [float(np.linalg.norm(l - occ.local[i])) for i, l in enumerate(lam)]
        mass_err = max(abs(l.sum() - mass) for l in lam)
        rewards = [u.gradient(l) for u, l in zip(utilities, lam)]
        q_td = estimator.estimate(mdp, policy, rewards, tc.kappa, trajectory_rng(tc.seed, k, 2**32))
        q_sampled_r = ev.q_functions(rewards)
        q_hat = {j: exact_truncated_q(q_sampled_r[j], mdp, j, tc.kappa) for j in range(mdp.n_agents)}
        g_est = [truncated_gradient(batch, policy, q_td, i, mdp.gamma) for i in range(mdp.n_agents)]
        g_trunc = expected_truncated_gradient(mdp, policy, q_hat, evaluator=ev)
        draw = {
            "draw": k,
            "occupancy_error": occ_err,
            "occupancy_bound": bound,
            "occupancy_mass_error": mass_err,
            "td_q_sup_error": [float(np.abs(q_td[j].values - q_hat[j].values).max()) for j in range(mdp.n_agents)],
            "td_coverage": [q_td[j].coverage for j in range(mdp.n_agents)],
            "gradient_error_vs_truncated": [float(np.linalg.norm(a - b)) for a, b in zip(g_est, g_trunc)],
            "gradient_error_vs_exact": [float(np.linalg.norm(a - b)) for a, b in zip(g_est, exact_grad)],
        }
        draws.append(draw)
        if mass_err > 1e-12 * max(1.0, mass):
            violations.append(f"draw {k}: occupancy mass error {mass_err:.2e}")
        if max(occ_err) > bound:
            violations.append(f"draw {k}: occupancy error {max(occ_err):.3e} exceeds bound {bound:.3e}")
    _write_json(run_dir / "oracle_compare.json", {"delta0": delta0, "draws": draws, "violations": violations})
    for d in draws:
        print(f"draw {d['draw']}: occupancy {max(d['occupancy_error']):.3e} (bound {bound:.3e})  "
              f"td sup {max(d['td_q_sup_error']):.3e}  grad {max(d['gradient_error_vs_exact']):.3e}")
    for v in violations:
        print(f"violation: {v}", file=sys.stderr)
    return EXIT_VIOLATION if violations else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shadowmarl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("config", help="YAML experiment config")
        p.add_argument("--run-root", default=None, help="parent of the run directory (overrides trainer.run_root)")
        p.set_defaults(func=func)
        return p

    add("train", cmd_train, "run the training loop")
    p = add("verify-decay", cmd_verify_decay, "check Q decay and truncation bounds against the certificate")
    p.add_argument("--policy", help="policy checkpoint to analyse instead of the configured initial policy")
    p = add("gradient-check", cmd_gradient_check, "exact gradient vs finite differences")
    p.add_argument("--policy")
    p.add_argument("--tol", default=1e-5, type=float)
    p = add("oracle-compare", cmd_oracle_compare, "sampled estimators vs exact oracle quantities")
    p.add_argument("--policy")
    p.add_argument("--delta0", default=0.01, type=float)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except (ValueError, TypeError, KeyError, FileNotFoundError, OracleError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
