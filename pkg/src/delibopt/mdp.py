"""Finite discounted MDPs: representation, exact evaluation, and sampling."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PROB_ATOL = 1e-12


class ValidationError(ValueError):
    """Raised when a table violates its probabilistic invariants."""


class ConvergenceError(RuntimeError):
    """Raised when an iterative solver hits its cap before reaching tolerance."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual={residual:.3e})")
        self.residual = residual


def _check_stochastic(rows: np.ndarray, what: str) -> None:
    if np.any(rows < -PROB_ATOL):
        raise ValidationError(f"{what} has negative entries")
    sums = rows.sum(axis=-1)
    if np.max(np.abs(sums - 1.0), initial=0.0) > PROB_ATOL:
        raise ValidationError(f"{what} rows do not sum to 1")


@dataclass(frozen=True)
class Mdp:
    """Dense finite MDP.

    ``transition[s, a, s']`` is P(s'|s,a); ``reward[s, a]`` is the expected
    reward r(s,a).
    """

    transition: np.ndarray
    reward: np.ndarray
    gamma: float
    initial_dist: np.ndarray = field(default=None)

    def __post_init__(self):
        P = np.array(self.transition, dtype=float)
        R = np.array(self.reward, dtype=float)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ValidationError(f"transition must be (S, A, S), got {P.shape}")
        if R.shape != P.shape[:2]:
            raise ValidationError(f"reward must be {P.shape[:2]}, got {R.shape}")
        if not 0.0 <= self.gamma < 1.0:
            raise ValidationError(f"gamma must lie in [0, 1), got {self.gamma}")
        _check_stochastic(P, "transition")
        if self.initial_dist is None:
            init = np.full(P.shape[0], 1.0 / P.shape[0])
        else:
            init = np.array(self.initial_dist, dtype=float)
        if init.shape != (P.shape[0],):
            raise ValidationError("initial_dist must have one entry per state")
        _check_stochastic(init, "initial_dist")
        for arr in (P, R, init):
            arr.setflags(write=False)
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "reward", R)
        object.__setattr__(self, "initial_dist", init)
        object.__setattr__(self, "gamma", float(self.gamma))

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    def absorbing_states(self) -> np.ndarray:
        """States where every action self-loops with zero reward."""
        idx = np.arange(self.n_states)
        loops = np.all(self.transition[idx, :, idx] == 1.0, axis=1)
        return idx[loops & np.all(self.reward == 0.0, axis=1)]

    def permuted(self, perm) -> "Mdp":
        """Relabel states so that new state ``i`` is old state ``perm[i]``."""
        perm = np.asarray(perm)
        P = self.transition[perm][:, :, perm]
        return Mdp(P, self.reward[perm], self.gamma, self.initial_dist[perm])

    def to_dict(self) -> dict:
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "gamma": self.gamma,
            "transition": self.transition.tolist(),
            "reward": self.reward.tolist(),
            "initial_dist": self.initial_dist.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Mdp":
        mdp = cls(doc["transition"], doc["reward"], doc["gamma"], doc.get("initial_dist"))
        for key, n in (("n_states", mdp.n_states), ("n_actions", mdp.n_actions)):
            if key in doc and doc[key] != n:
                raise ValidationError(f"{key}={doc[key]} disagrees with table shape ({n})")
        return mdp


def load_mdp(path) -> Mdp:
    return Mdp.from_dict(json.loads(Path(path).read_text()))


def save_mdp(mdp: Mdp, path) -> None:
    Path(path).write_text(json.dumps(mdp.to_dict()))


@dataclass(frozen=True)
class StationaryPolicy:
    probs: np.ndarray

    def __post_init__(self):
        probs = np.array(self.probs, dtype=float)
        if probs.ndim != 2:
            raise ValidationError("policy table must be (S, A)")
        _check_stochastic(probs, "policy")
        object.__setattr__(self, "probs", probs)

    @classmethod
    def uniform(cls, mdp: Mdp) -> "StationaryPolicy":
        return cls(np.full((mdp.n_states, mdp.n_actions), 1.0 / mdp.n_actions))

    @classmethod
    def deterministic(cls, actions, n_actions: int) -> "StationaryPolicy":
        actions = np.asarray(actions)
        probs = np.zeros((len(actions), n_actions))
        probs[np.arange(len(actions)), actions] = 1.0
        return cls(probs)


def _policy_kernel(mdp: Mdp, policy: StationaryPolicy):
    if policy.probs.shape != (mdp.n_states, mdp.n_actions):
        raise ValidationError("policy shape does not match the MDP")
    P_pi = np.einsum("sa,sat->st", policy.probs, mdp.transition)
    r_pi = np.einsum("sa,sa->s", policy.probs, mdp.reward)
    return P_pi, r_pi


def policy_evaluation(mdp: Mdp, policy: StationaryPolicy, tol: float = 1e-8,
                      method: str = "solve", max_iter: int = 1_000_000) -> np.ndarray:
    """State values of ``policy``; ``method`` is ``"solve"`` or ``"iterate"``."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    P_pi, r_pi = _policy_kernel(mdp, policy)
    if method == "solve":
        v = np.linalg.solve(np.eye(mdp.n_states) - mdp.gamma * P_pi, r_pi)
    elif method == "iterate":
        v = np.zeros(mdp.n_states)
        for _ in range(max_iter):
            v_new = r_pi + mdp.gamma * P_pi @ v
            delta = np.max(np.abs(v_new - v))
            v = v_new
            if delta <= tol:
                break
        else:
            raise ConvergenceError("policy evaluation did not converge", delta)
    else:
        raise ValueError(f"unknown method {method!r}")
    residual = np.max(np.abs(r_pi + mdp.gamma * P_pi @ v - v))
    if residual > tol:
        raise ConvergenceError("policy evaluation residual above tolerance", residual)
    return v


def bellman_optimality(mdp: Mdp, v: np.ndarray) -> np.ndarray:
    """Action values r + gamma * P v, shape (S, A)."""
    return mdp.reward + mdp.gamma * mdp.transition @ v


def value_iteration(mdp: Mdp, tol: float = 1e-8, max_iter: int = 1_000_000):
    """Optimal values and a greedy deterministic policy (ties to lowest action)."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    v = np.zeros(mdp.n_states)
    for _ in range(max_iter):
        v_new = bellman_optimality(mdp, v).max(axis=1)
        residual = np.max(np.abs(v_new - v))
        v = v_new
        if residual <= tol:
            break
    else:
        raise ConvergenceError("value iteration did not converge", residual)
    greedy = bellman_optimality(mdp, v).argmax(axis=1)
    return v, StationaryPolicy.deterministic(greedy, mdp.n_actions)


def sample_transition(mdp: Mdp, s: int, a: int, rng: np.random.Generator):
    if not (0 <= s < mdp.n_states and 0 <= a < mdp.n_actions):
        raise IndexError(f"state/action ({s}, {a}) out of range")
    row = mdp.transition[s, a]
    s_next = int(np.searchsorted(np.cumsum(row), rng.random(), side="right"))
    return min(s_next, mdp.n_states - 1), float(mdp.reward[s, a])


def chain2(gamma: float = 0.5) -> Mdp:
    """Two-state chain: action 0 ("go") moves 0->1, action 1 ("stay") self-loops.

    Only (0, go) pays 1; state 1 absorbs under both actions.
    """
    P = np.zeros((2, 2, 2))
    P[0, 0, 1] = 1.0
    P[0, 1, 0] = 1.0
    P[1, :, 1] = 1.0
    R = np.array([[1.0, 0.0], [0.0, 0.0]])
    return Mdp(P, R, gamma, [1.0, 0.0])


def random_mdp(n_states: int, n_actions: int, gamma: float, rng: np.random.Generator,
               density: float = 0.5) -> Mdp:
    """Random dense-ish MDP for property tests."""
    mask = rng.random((n_states, n_actions, n_states)) < density
    mask[np.arange(n_states), :, rng.integers(n_states, size=n_states)] = True
    P = rng.random((n_states, n_actions, n_states)) * mask
    P /= P.sum(axis=2, keepdims=True)
    R = rng.normal(size=(n_states, n_actions))
    init = rng.random(n_states)
    return Mdp(P, R, gamma, init / init.sum())
