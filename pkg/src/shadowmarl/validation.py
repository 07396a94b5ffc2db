"""Input checks shared by the estimator, the config loader and the CLI."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .mdp import FactoredMDP
from .utility import LocalUtility

__all__ = ["check_mdp", "check_utilities", "check_states", "check_kappa"]


def check_mdp(mdp) -> FactoredMDP:
    if not isinstance(mdp, FactoredMDP):
        raise TypeError(f"expected a FactoredMDP, got {type(mdp).__name__}")
    return mdp


def check_utilities(utilities, mdp: FactoredMDP) -> list[LocalUtility]:
    if isinstance(utilities, LocalUtility):
        utilities = [utilities] * mdp.n_agents
    utilities = list(utilities)
    if len(utilities) != mdp.n_agents:
        raise ValueError(f"need one utility per agent ({mdp.n_agents}), got {len(utilities)}")
    for i, u in enumerate(utilities):
        if not isinstance(u, LocalUtility):
            raise TypeError(f"utility {i} is {type(u).__name__}, not a LocalUtility")
        shape = getattr(u, "shape", None)
        if shape is not None and tuple(shape) != (mdp.state_sizes[i], mdp.action_sizes[i]):
            raise ValueError(f"utility {i} has shape {tuple(shape)}, agent {i} needs "
                             f"{(mdp.state_sizes[i], mdp.action_sizes[i])}")
    return utilities


def check_states(X, state_sizes: Sequence[int]) -> np.ndarray:
    """Return global states as an ``(m, n)`` integer array of local indices.

    Accepts local tuples with shape ``(m, n)`` or a 1-d array of flat
    global indices (agent 0 most significant).
    """
    sizes = np.asarray(state_sizes, dtype=np.int64)
    n = len(sizes)
    arr = np.asarray(X)
    if arr.dtype.kind not in "iu":
        if arr.dtype.kind == "f" and np.all(np.mod(arr, 1) == 0):
            arr = arr.astype(np.int64)
        else:
            raise TypeError("states must be integer indices")
    if arr.ndim == 1:
        total = int(np.prod(sizes))
        if (arr < 0).any() or (arr >= total).any():
            raise ValueError(f"flat state index out of range [0, {total})")
        strides = np.append(np.cumprod(sizes[::-1])[::-1][1:], 1)
        arr = (arr[:, None] // strides) % sizes
    if arr.ndim != 2 or arr.shape[1] != n:
        raise ValueError(f"states must have shape (m, {n})")
    if (arr < 0).any() or (arr >= sizes).any():
        raise ValueError("local state index out of range")
    return arr.astype(np.int64)


def check_kappa(kappa) -> int:
    if isinstance(kappa, bool) or int(kappa) != kappa or kappa < 0:
        raise ValueError(f"kappa must be a non-negative integer, got {kappa!r}")
    return int(kappa)
