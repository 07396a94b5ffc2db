"""Experiment config files.

A config is one YAML document with five sections::

    instance:            # the networked MDP
      graph: {name: ring, size: 4}        # or {n: 3, edges: [[0, 1], [1, 2]]}
      generator: spatial                  # spatial | drift
      gamma: 0.8
      state_sizes: 2                      # int (all agents) or list
      action_sizes: 2
      interaction_strength: [1.0, 0.2]    # spatial only
      concentration: 1.0                  # spatial only
      base: 0.02                          # drift only (also push, coupling, n_actions)
      seed: 0
    policy:
      kappa: 1
      init: zeros                         # zeros | uniform
    utilities:                            # one mapping for every agent, or a list
      kind: entropy                       # linear | entropy | distance
      eps: 1.0e-6
      # linear: reward: [[...]] or random: {low: -1, high: 1, seed: 0}
      # distance: target: [[...]] or random: {seed: 0}
    trainer:
      T: 100
      B: 64
      H: 30
      H_q: 2000
      eta: auto                           # number or auto (backtracking probe)
      q_estimator: td                     # td | exact
      gradient: sampled                   # sampled | exact (expected truncated gradient)
      seed: 0
      checkpoint_every: 10
      run_root: runs
    oracle:
      enabled: auto                       # auto | true | false
      max_global_pairs: 200000
      kappas: null                        # radii swept by verify-decay
      fd_step: 1.0e-5                     # gradient-check
      n_random: 5                         # gradient-check / oracle-compare draws

Unknown keys are rejected so typos fail loudly.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .graph import AgentGraph, build_graph, named_graph
from .mdp import FactoredMDP, make_drift_mdp, make_spatial_mdp
from .oracle import OracleLimits
from .trainer import TrainConfig
from .utility import DistanceUtility, EntropyUtility, LinearUtility, LocalUtility

__all__ = ["ExperimentConfig", "load_config", "parse_config"]

SECTIONS = ("instance", "policy", "utilities", "trainer", "oracle")
_INSTANCE_KEYS = {
    "graph", "generator", "gamma", "state_sizes", "action_sizes", "interaction_strength",
    "concentration", "base", "push", "coupling", "n_actions", "seed",
}
_POLICY_KEYS = {"kappa", "init"}
_UTILITY_KEYS = {"kind", "eps", "reward", "target", "random"}
_TRAINER_KEYS = {f.name for f in fields(TrainConfig)} - {"kappa", "theta_init", "oracle"} | {"run_root"}
_ORACLE_KEYS = {f.name for f in fields(OracleLimits)} | {"enabled", "kappas", "fd_step", "n_random"}


def _reject_unknown(section: str, got: dict, allowed: set) -> None:
    extra = set(got) - allowed
    if extra:
        raise ValueError(f"unknown key(s) in [{section}]: {sorted(extra)}")


def _per_agent(value, n: int, name: str) -> list[int]:
    if isinstance(value, (list, tuple)):
        if len(value) != n:
            raise ValueError(f"{name} lists {len(value)} entries for {n} agents")
        return [int(v) for v in value]
    return [int(value)] * n


@dataclass
class ExperimentConfig:
    raw: dict[str, Any]

    @property
    def instance(self) -> dict:
        return self.raw["instance"]

    @property
    def seed(self) -> int:
        return int(self.raw["trainer"].get("seed", 0))

    def config_hash(self) -> str:
        text = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:12]

    def run_dir(self, root: str | Path | None = None) -> Path:
        root = Path(root if root is not None else self.raw["trainer"].get("run_root", "runs"))
        return root / f"{self.config_hash()}-seed{self.seed}"

    def build_graph(self) -> AgentGraph:
        entry = self.instance.get("graph")
        if not isinstance(entry, dict):
            raise ValueError("instance.graph must be a mapping")
        if "name" in entry:
            _reject_unknown("instance.graph", entry, {"name", "size"})
            size = entry["size"]
            return named_graph(entry["name"], tuple(size) if isinstance(size, list) else int(size))
        _reject_unknown("instance.graph", entry, {"n", "edges"})
        return build_graph(int(entry["n"]), [tuple(e) for e in entry.get("edges", [])])

    def build_mdp(self) -> FactoredMDP:
        inst = self.instance
        g = self.build_graph()
        gamma = float(inst.get("gamma", 0.9))
        kind = inst.get("generator", "spatial")
        if kind == "drift":
            return make_drift_mdp(
                g, gamma,
                base=float(inst.get("base", 0.02)),
                push=float(inst.get("push", 0.5)),
                coupling=float(inst.get("coupling", 0.1)),
                n_actions=int(inst.get("n_actions", 2)),
            )
        if kind != "spatial":
            raise ValueError(f"unknown generator {kind!r}")
        return make_spatial_mdp(
            g,
            _per_agent(inst.get("state_sizes", 2), g.n, "state_sizes"),
            _per_agent(inst.get("action_sizes", 2), g.n, "action_sizes"),
            inst.get("interaction_strength", [1.0, 0.2]),
            gamma,
            seed=int(inst.get("seed", 0)),
            concentration=float(inst.get("concentration", 1.0)),
        )

    def build_utilities(self, mdp: FactoredMDP) -> list[LocalUtility]:
        entry = self.raw["utilities"]
        entries = entry if isinstance(entry, list) else [entry] * mdp.n_agents
        if len(entries) != mdp.n_agents:
            raise ValueError(f"utilities lists {len(entries)} entries for {mdp.n_agents} agents")
        return [self._utility(s, i, mdp) for i, s in enumerate(entries)]

    @staticmethod
    def _utility(entry: dict, i: int, mdp: FactoredMDP) -> LocalUtility:
        _reject_unknown("utilities", entry, _UTILITY_KEYS)
        shape = (mdp.state_sizes[i], mdp.action_sizes[i])
        kind = entry.get("kind")
        rand = entry.get("random")
        rng = None
        if rand is not None:
            # each agent gets its own draw from the configured seed
            rng = np.random.default_rng([int(rand.get("seed", 0)), i])
        if kind == "entropy":
            return EntropyUtility(mdp.gamma, float(entry.get("eps", 1e-6)))
        if kind == "linear":
            if rng is not None:
                reward = rng.uniform(float(rand.get("low", -1.0)), float(rand.get("high", 1.0)), shape)
            else:
                reward = np.asarray(entry["reward"], dtype=float)
            return LinearUtility(reward)
        if kind == "distance":
            if rng is not None:
                target = rng.dirichlet(np.ones(shape[0] * shape[1])).reshape(shape) / (1.0 - mdp.gamma)
            else:
                target = np.asarray(entry["target"], dtype=float)
            return DistanceUtility(target)
        raise ValueError(f"unknown utility kind {kind!r}")

    def train_config(self) -> TrainConfig:
        tr = {k: v for k, v in self.raw["trainer"].items() if k != "run_root"}
        pol = self.raw["policy"]
        enabled = self.raw["oracle"].get("enabled", "auto")
        return TrainConfig(kappa=int(pol.get("kappa", 1)), theta_init=pol.get("init", "zeros"), oracle=enabled, **tr)

    def oracle_limits(self) -> OracleLimits:
        names = {f.name for f in fields(OracleLimits)}
        return OracleLimits(**{k: int(v) for k, v in self.raw["oracle"].items() if k in names})

    def oracle_option(self, key: str, default=None):
        return self.raw["oracle"].get(key, default)


def parse_config(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ValueError("config must be a mapping with sections " + ", ".join(SECTIONS))
    _reject_unknown("top level", raw, set(SECTIONS))
    if "instance" not in raw or "utilities" not in raw:
        raise ValueError("config needs at least the instance and utilities sections")
    raw = {s: raw.get(s) if raw.get(s) is not None else {} for s in SECTIONS}
    _reject_unknown("instance", raw["instance"], _INSTANCE_KEYS)
    _reject_unknown("policy", raw["policy"], _POLICY_KEYS)
    _reject_unknown("trainer", raw["trainer"], _TRAINER_KEYS)
    _reject_unknown("oracle", raw["oracle"], _ORACLE_KEYS)
    cfg = ExperimentConfig(raw)
    cfg.train_config().validate()
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config(yaml.safe_load(fh))
