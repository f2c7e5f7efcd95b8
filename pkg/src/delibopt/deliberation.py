"""Deliberation costs: switching cost, discounted cost values, the cost-transformed
option values, the mixed return/cost objective and eta-optimal policies over options."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .mdp import ConvergenceError, Mdp, ValidationError
from .options import (
    Theta,
    ValueTables,
    _check_shapes,
    _solve_fixed_point,
    augmented_chain,
    expected_option_reward,
    option_action_values,
)


@dataclass(frozen=True)
class DeliberationConfig:
    """Cost settings.

    ``lam`` is the cost discount; ``None`` means "use the MDP's gamma".
    ``cost_fn(s, o, a, s_next, o_next)`` replaces the switching cost. It must accept
    broadcastable integer arrays and return the immediate cost for every combination.
    ``constraint_bound`` is informational only.
    """

    eta: float = 0.0
    lam: float | None = 0.0
    cost_fn: Callable | None = None
    constraint_bound: float | None = None

    def __post_init__(self):
        if self.eta < 0:
            raise ValidationError(f"eta must be >= 0, got {self.eta}")
        if self.lam is not None and not 0.0 <= self.lam < 1.0:
            raise ValidationError(f"lambda must lie in [0, 1), got {self.lam}")

    def cost_discount(self, gamma: float) -> float:
        return gamma if self.lam is None else self.lam

    @property
    def is_switching(self) -> bool:
        return self.cost_fn is None

    @classmethod
    def from_mapping(cls, doc: dict) -> "DeliberationConfig":
        """Build from config keys ``eta`` and ``lambda_mode`` ("zero", "gamma" or a number)."""
        mode = doc.get("lambda_mode", "zero")
        if mode == "zero":
            lam = 0.0
        elif mode == "gamma":
            lam = None
        else:
            try:
                lam = float(mode)
            except (TypeError, ValueError):
                raise ValidationError(f"bad lambda_mode {mode!r}") from None
        return cls(eta=float(doc.get("eta", 0.0)), lam=lam,
                   constraint_bound=doc.get("constraint_bound"))


@dataclass
class CostTables:
    d: np.ndarray   # D^lambda(s, o)
    qc: np.ndarray  # Q^c(s, o)
    ac: np.ndarray  # A^c(s, o)


def switching_cost(theta: Theta, s_next: int, o: int, gamma: float) -> float:
    """Expected immediate cost gamma * beta(s', o) of the Bernoulli switch event."""
    return gamma * float(theta.beta()[o, s_next])


def immediate_cost(mdp: Mdp, theta: Theta, config: DeliberationConfig) -> np.ndarray:
    """Expected one-step cost from each (s, o), shape (S, O)."""
    _check_shapes(mdp, theta)
    pi = theta.pi()
    if config.is_switching:
        # sum_a pi(a|s,o) sum_s' P(s'|s,a) gamma beta(s',o)
        p_next = np.einsum("osa,sat->sot", pi, mdp.transition)
        return mdp.gamma * np.einsum("sot,ot->so", p_next, theta.beta())
    n_s, n_a, n_o = mdp.n_states, mdp.n_actions, theta.n_options
    s, o, a, s2, o2 = np.ix_(range(n_s), range(n_o), range(n_a), range(n_s), range(n_o))
    cost = np.broadcast_to(config.cost_fn(s, o, a, s2, o2), (n_s, n_o, n_a, n_s, n_o))
    beta, mu = theta.beta(), theta.mu()
    switch = beta.T[:, :, None] * mu[:, None, :]
    switch[:, np.arange(n_o), np.arange(n_o)] += 1.0 - beta.T
    # weight[s,o,a,s',o'] = pi(a|s,o) P(s'|s,a) switch[s',o,o']
    weight = np.einsum("osa,sat,toq->soatq", pi, mdp.transition, switch)
    return np.einsum("soatq,soatq->so", weight, cost)


def deliberation_value(mdp: Mdp, theta: Theta, config: DeliberationConfig,
                       tol: float = 1e-8, method: str = "solve") -> np.ndarray:
    """Discounted deliberation cost D^lambda(s, o), shape (S, O)."""
    c = immediate_cost(mdp, theta, config).reshape(-1)
    lam = config.cost_discount(mdp.gamma)
    d = _solve_fixed_point(augmented_chain(mdp, theta), c, lam, tol, method, 1_000_000,
                           "deliberation value")
    return d.reshape(mdp.n_states, theta.n_options)


def transformed_evaluate(mdp: Mdp, theta: Theta, config: DeliberationConfig,
                         tol: float = 1e-8) -> CostTables:
    """Option values for the reward r - eta * cost (discounted by gamma), plus D^lambda."""
    c = immediate_cost(mdp, theta, config)
    r = expected_option_reward(mdp, theta) - config.eta * c
    qc = _solve_fixed_point(augmented_chain(mdp, theta), r.reshape(-1), mdp.gamma, tol,
                            "solve", 0, "transformed evaluation")
    qc = qc.reshape(mdp.n_states, theta.n_options)
    tables = ValueTables.from_q(qc, theta.mu())
    d = deliberation_value(mdp, theta, config, tol)
    return CostTables(d=d, qc=qc, ac=tables.a)


def margin_residual(mdp: Mdp, theta: Theta, qc: np.ndarray, eta: float) -> np.ndarray:
    """Residual of Q^c against its margin form, where the continuation carries A^c + eta."""
    tables = ValueTables.from_q(qc, theta.mu())
    beta = theta.beta().T
    cont = qc - beta * (tables.a + eta)
    backup = np.einsum("osa,sa->so", theta.pi(), mdp.reward) + mdp.gamma * np.einsum(
        "osa,sat,to->so", theta.pi(), mdp.transition, cont)
    return np.abs(backup - qc)


def mixed_objective(alpha: np.ndarray, q: np.ndarray, d: np.ndarray, eta: float) -> float:
    """sum_{s,o} alpha(s,o) (Q(s,o) - eta D(s,o))."""
    alpha, q, d = np.asarray(alpha), np.asarray(q), np.asarray(d)
    if not (alpha.shape == q.shape == d.shape):
        raise ValidationError(f"shape mismatch: alpha {alpha.shape}, q {q.shape}, d {d.shape}")
    if abs(alpha.sum() - 1.0) > 1e-9:
        raise ValidationError("alpha must sum to 1")
    return float(np.sum(alpha * (q - eta * d)))


def start_distribution(mdp: Mdp, theta: Theta) -> np.ndarray:
    """alpha(s, o) = initial_dist(s) * mu(o|s)."""
    return mdp.initial_dist[:, None] * theta.mu()


def _deterministic_mu(choice: np.ndarray, n_options: int) -> np.ndarray:
    scores = np.zeros((len(choice), n_options))
    scores[np.arange(len(choice)), choice] = 1.0
    return scores


def optimize_mu(mdp: Mdp, theta: Theta, config: DeliberationConfig, tol: float = 1e-10,
                max_iter: int = 1000):
    """Policy iteration over deterministic policies over options, options held fixed.

    Returns ``(theta_mu, q)`` where ``theta_mu`` is a one-hot score table (use with
    ``epsilon_mu=0``) and ``q`` the cost-transformed option values under it. Needs
    ``lam == gamma`` (or eta == 0) so that the objective is a single MDP value.
    """
    if config.eta > 0 and config.cost_discount(mdp.gamma) != mdp.gamma:
        raise ValidationError("optimize_mu needs lambda == gamma when eta > 0")
    n_o = theta.n_options
    choice = theta.theta_mu.argmax(axis=1)
    for _ in range(max_iter):
        current = theta.replace(theta_mu=_deterministic_mu(choice, n_o), epsilon_mu=0.0,
                                mu_kind="greedy")
        q = transformed_evaluate(mdp, current, config, tol).qc
        best = q.argmax(axis=1)
        keep = q[np.arange(len(choice)), choice] >= q.max(axis=1) - 1e-12
        new_choice = np.where(keep, choice, best)
        if np.array_equal(new_choice, choice):
            return current.theta_mu, q
        choice = new_choice
    raise ConvergenceError("policy iteration over options did not stabilise", float("nan"))


def expected_duration(kappa: float, gamma: float, eta: float = 1.0):
    """Discounted duration 1/(1 - gamma*kappa) of a constant-continuation option and its
    per-step cost rate eta/d."""
    if not 0.0 <= kappa <= 1.0:
        raise ValidationError(f"kappa must lie in [0, 1], got {kappa}")
    if gamma * kappa >= 1.0:
        raise ValidationError("gamma * kappa must be < 1")
    d = 1.0 / (1.0 - gamma * kappa)
    return d, (1.0 - gamma * kappa) * eta
