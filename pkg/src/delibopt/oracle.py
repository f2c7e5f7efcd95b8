"""Brute-force references for the option evaluators.

Nothing here calls into the option or deliberation evaluators: the augmented MDP is
assembled straight from its definition, values come from plain value iteration or a
dense solve, and Monte-Carlo estimates come from a separate simulator.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, softmax

from .mdp import Mdp, ValidationError


def _option_tables(theta):
    """(pi[o,s,a], beta[o,s], mu[s,o]) computed from the raw parameter blocks."""
    pi = softmax(theta.theta_pi, axis=2)
    beta = expit(theta.theta_beta)
    n_s, n_o = theta.theta_mu.shape
    if theta.mu_kind == "softmax":
        base = softmax(theta.theta_mu, axis=1)
    else:
        base = np.eye(n_o)[np.argmax(theta.theta_mu, axis=1)]
    mu = (1.0 - theta.epsilon_mu) * base + theta.epsilon_mu / n_o
    return pi, beta, mu


@dataclass
class AugmentedMdp:
    """The chain over z = s * n_options + o as a one-action MDP.

    ``mdp.transition[z, 0, z']`` is the policy-marginalised kernel and ``mdp.reward[z, 0]``
    the expected (optionally cost-transformed) one-step reward. ``cost[z]`` is the
    expected immediate switching cost gamma * E[beta(S', o)].
    """

    mdp: Mdp
    cost: np.ndarray
    n_states: int
    n_options: int


def build_augmented_mdp(mdp: Mdp, theta, eta: float = 0.0) -> AugmentedMdp:
    pi, beta, mu = _option_tables(theta)
    n_s, n_o = mdp.n_states, pi.shape[0]
    eye = np.eye(n_o)
    # full[s, o, a, s', o'] = P(s'|s,a) [(1 - beta(s',o)) 1{o'=o} + beta(s',o) mu(o'|s')]
    b = beta[None, :, None, :, None]
    full = mdp.transition[:, None, :, :, None] * (
        (1.0 - b) * eye[None, :, None, None, :] + b * mu[None, None, None, :, :])
    pol = pi.transpose(1, 0, 2)  # (s, o, a)
    kernel = np.sum(pol[:, :, :, None, None] * full, axis=2)
    reward = np.sum(pol * mdp.reward[:, None, :], axis=2)
    # expected cost on (s,o,a): gamma * sum_s' P(s'|s,a) beta(s',o)
    step_cost = mdp.gamma * np.sum(mdp.transition[:, None, :, :] * beta[None, :, None, :], axis=3)
    cost = np.sum(pol * step_cost, axis=2)
    n_z = n_s * n_o
    init = (mdp.initial_dist[:, None] * mu).reshape(-1)
    aug = Mdp(kernel.reshape(n_z, 1, n_z), (reward - eta * cost).reshape(n_z, 1), mdp.gamma, init)
    return AugmentedMdp(aug, cost.reshape(-1), n_s, n_o)


def augmented_value_iteration(mdp: Mdp, theta, eta: float = 0.0, tol: float = 1e-12,
                              max_iter: int = 1_000_000) -> np.ndarray:
    """Fixed point of the augmented Bellman operator by successive approximation, (Z,)."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    aug = build_augmented_mdp(mdp, theta, eta).mdp
    K, r = aug.transition[:, 0, :], aug.reward[:, 0]
    v = np.zeros(len(r))
    for _ in range(max_iter):
        v_new = r + mdp.gamma * (K @ v)
        delta = np.max(np.abs(v_new - v))
        v = v_new
        if delta <= tol:
            break
    return v


def augmented_values(mdp: Mdp, theta, eta: float = 0.0, lam: float | None = None):
    """(Q, D^lambda) over z by dense solves of the brute-force augmented chain."""
    aug = build_augmented_mdp(mdp, theta)
    K = aug.mdp.transition[:, 0, :]
    eye = np.eye(K.shape[0])
    q = np.linalg.solve(eye - mdp.gamma * K, aug.mdp.reward[:, 0])
    lam = mdp.gamma if lam is None else lam
    d = np.linalg.solve(eye - lam * K, aug.cost)
    return q, d


def objective(mdp: Mdp, theta, alpha: np.ndarray, eta: float = 0.0,
              lam: float | None = None) -> float:
    """sum_z alpha(z) (Q(z) - eta D^lambda(z)); ``lam=None`` means lambda = gamma."""
    q, d = augmented_values(mdp, theta, eta, lam)
    return float(np.asarray(alpha).reshape(-1) @ (q - eta * d))


def regime_objectives(mdp: Mdp, theta, alpha: np.ndarray, eta: float) -> np.ndarray:
    """[J, J^{gamma,gamma}, J^{gamma,0}] from one factorisation of the augmented chain."""
    aug = build_augmented_mdp(mdp, theta)
    K = aug.mdp.transition[:, 0, :]
    rhs = np.stack([aug.mdp.reward[:, 0], aug.cost], axis=1)
    q, d_gamma = np.linalg.solve(np.eye(K.shape[0]) - mdp.gamma * K, rhs).T
    alpha = np.asarray(alpha).reshape(-1)
    j = alpha @ q
    return np.array([j, j - eta * (alpha @ d_gamma), j - eta * (alpha @ aug.cost)])


@dataclass
class MonteCarloEstimate:
    mean_return: float
    mean_cost: float
    return_stderr: float
    cost_stderr: float
    bias_bound: float
    n_episodes: int


def _sample_rows(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.cumsum(probs, axis=-1) > u[:, None], axis=1)
    return idx


def monte_carlo_objective(mdp: Mdp, theta, n_episodes: int, horizon: int,
                          rng: np.random.Generator, alpha: np.ndarray | None = None,
                          lam: float | None = None, batch: int = 200_000) -> MonteCarloEstimate:
    """Sample returns and discounted switch counts from Z_0 ~ alpha.

    The cost of a switch at time t+1 is gamma, discounted by lambda^t; with lambda=gamma
    it is the discounted switch count. Truncation at ``horizon`` biases the estimates by
    at most ``bias_bound`` (reported).
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    pi, beta, mu = _option_tables(theta)
    n_s, n_o = mdp.n_states, pi.shape[0]
    lam = mdp.gamma if lam is None else lam
    if alpha is None:
        alpha = mdp.initial_dist[:, None] * mu
    alpha = np.asarray(alpha).reshape(-1)
    returns, costs = [], []
    done = 0
    while done < n_episodes:
        n = min(batch, n_episodes - done)
        z = _sample_rows(np.broadcast_to(alpha, (n, len(alpha))), rng.random(n))
        s, o = z // n_o, z % n_o
        g = np.zeros(n)
        c = np.zeros(n)
        for t in range(horizon):
            a = _sample_rows(pi[o, s], rng.random(n))
            g += mdp.gamma**t * mdp.reward[s, a]
            s = _sample_rows(mdp.transition[s, a], rng.random(n))
            switch = rng.random(n) < beta[o, s]
            c += lam**t * mdp.gamma * switch
            fresh = _sample_rows(mu[s], rng.random(n))
            o = np.where(switch, fresh, o)
        returns.append(g)
        costs.append(c)
        done += n
    g = np.concatenate(returns)
    c = np.concatenate(costs)
    r_max = float(np.max(np.abs(mdp.reward)))
    bias = mdp.gamma**horizon * max(r_max / (1.0 - mdp.gamma), mdp.gamma / (1.0 - lam))
    sd = lambda x: float(np.std(x, ddof=1) / math.sqrt(len(x))) if len(x) > 1 else 0.0
    return MonteCarloEstimate(
        mean_return=math.fsum(g) / len(g),
        mean_cost=math.fsum(c) / len(c),
        return_stderr=sd(g),
        cost_stderr=sd(c),
        bias_bound=bias,
        n_episodes=len(g),
    )


def enumerate_deterministic_mu(mdp: Mdp, theta, eta: float = 0.0, lam: float | None = None,
                               limit: int = 10**6):
    """Evaluate sum_s init(s) (Q - eta D)(s, mu(s)) for every deterministic mu.

    Returns ``(best_choice, best_value, table)`` where ``table`` maps each choice tuple to
    its objective. Options are held fixed; epsilon is ignored (mu is deterministic).
    """
    n_s, n_o = mdp.n_states, theta.theta_mu.shape[1]
    if n_o**n_s > limit:
        raise ValidationError(f"{n_o}^{n_s} deterministic policies exceed the limit {limit}")
    table = {}
    for choice in itertools.product(range(n_o), repeat=n_s):
        scores = np.eye(n_o)[list(choice)]
        det = theta.replace(theta_mu=scores, epsilon_mu=0.0, mu_kind="greedy")
        q, d = augmented_values(mdp, det, eta, lam)
        values = (q - eta * d).reshape(n_s, n_o)[np.arange(n_s), list(choice)]
        table[choice] = float(mdp.initial_dist @ values)
    best = max(table, key=lambda k: (table[k], tuple(-i for i in k)))
    return best, table[best], table
