"""Options over a finite MDP: parameters, augmented chain, intra-option and SMDP evaluation,
and call-and-return / interruption execution.

State-option pairs are flattened as ``z = s * n_options + o``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit, softmax

from .mdp import ConvergenceError, Mdp, ValidationError

PRIMITIVE_LOGIT = 60.0


@dataclass
class Theta:
    """Option parameters.

    theta_pi:   (O, S, A) logits of the intra-option softmax policies.
    theta_beta: (O, S) pre-sigmoid termination parameters.
    theta_mu:   (S, O) scores; the policy over options is epsilon-greedy on them
                (``mu_kind="greedy"``) or an epsilon-mixed softmax (``"softmax"``).
    """

    theta_pi: np.ndarray
    theta_beta: np.ndarray
    theta_mu: np.ndarray
    epsilon_mu: float = 0.1
    mu_kind: str = "greedy"

    def __post_init__(self):
        self.theta_pi = np.asarray(self.theta_pi, dtype=float)
        self.theta_beta = np.asarray(self.theta_beta, dtype=float)
        self.theta_mu = np.asarray(self.theta_mu, dtype=float)
        n_o, n_s, _ = self.theta_pi.shape
        if self.theta_beta.shape != (n_o, n_s) or self.theta_mu.shape != (n_s, n_o):
            raise ValidationError("theta blocks disagree on (options, states)")
        if not 0.0 <= self.epsilon_mu <= 1.0:
            raise ValidationError("epsilon_mu must lie in [0, 1]")
        if self.mu_kind not in ("greedy", "softmax"):
            raise ValidationError(f"unknown mu_kind {self.mu_kind!r}")

    @property
    def n_options(self) -> int:
        return self.theta_pi.shape[0]

    @property
    def n_states(self) -> int:
        return self.theta_pi.shape[1]

    @property
    def n_actions(self) -> int:
        return self.theta_pi.shape[2]

    def pi(self) -> np.ndarray:
        """Intra-option policies, (O, S, A)."""
        return softmax(self.theta_pi, axis=2)

    def beta(self) -> np.ndarray:
        """Termination probabilities, (O, S)."""
        return expit(self.theta_beta)

    def mu(self) -> np.ndarray:
        """Epsilon-soft policy over options, (S, O)."""
        n_o = self.n_options
        if self.mu_kind == "softmax":
            base = softmax(self.theta_mu, axis=1)
        else:
            base = np.zeros_like(self.theta_mu)
            base[np.arange(self.n_states), self.theta_mu.argmax(axis=1)] = 1.0
        return (1.0 - self.epsilon_mu) * base + self.epsilon_mu / n_o

    def copy(self) -> "Theta":
        return Theta(self.theta_pi.copy(), self.theta_beta.copy(), self.theta_mu.copy(),
                     self.epsilon_mu, self.mu_kind)

    def replace(self, **blocks) -> "Theta":
        fields = dict(theta_pi=self.theta_pi, theta_beta=self.theta_beta,
                      theta_mu=self.theta_mu, epsilon_mu=self.epsilon_mu, mu_kind=self.mu_kind)
        fields.update(blocks)
        return Theta(**fields)

    @classmethod
    def random(cls, n_states: int, n_actions: int, n_options: int, rng: np.random.Generator,
               scale: float = 1.0, epsilon_mu: float = 0.1, mu_kind: str = "greedy") -> "Theta":
        return cls(scale * rng.normal(size=(n_options, n_states, n_actions)),
                   scale * rng.normal(size=(n_options, n_states)),
                   rng.normal(size=(n_states, n_options)), epsilon_mu, mu_kind)

    @classmethod
    def zeros(cls, n_states: int, n_actions: int, n_options: int,
              epsilon_mu: float = 0.1) -> "Theta":
        return cls(np.zeros((n_options, n_states, n_actions)), np.zeros((n_options, n_states)),
                   np.zeros((n_states, n_options)), epsilon_mu)

    @classmethod
    def primitive(cls, mdp: Mdp, epsilon_mu: float = 0.0) -> "Theta":
        """One option per action that always picks it and always terminates."""
        n_s, n_a = mdp.n_states, mdp.n_actions
        logits = np.full((n_a, n_s, n_a), -PRIMITIVE_LOGIT)
        logits[np.arange(n_a), :, np.arange(n_a)] = PRIMITIVE_LOGIT
        return cls(logits, np.full((n_a, n_s), PRIMITIVE_LOGIT), np.zeros((n_s, n_a)),
                   epsilon_mu)

    def to_dict(self) -> dict:
        return {
            "theta_pi": self.theta_pi.tolist(),
            "theta_beta": self.theta_beta.tolist(),
            "theta_mu": self.theta_mu.tolist(),
            "epsilon_mu": self.epsilon_mu,
            "mu_kind": self.mu_kind,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Theta":
        return cls(doc["theta_pi"], doc["theta_beta"], doc["theta_mu"],
                   doc.get("epsilon_mu", 0.1), doc.get("mu_kind", "greedy"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "Theta":
        return cls.from_dict(json.loads(Path(path).read_text()))


def flat_index(s, o, n_options: int):
    return s * n_options + o


def unflat_index(z, n_options: int):
    return divmod(z, n_options)


@dataclass
class ValueTables:
    q: np.ndarray  # (S, O)
    v: np.ndarray  # (S,)
    a: np.ndarray  # (S, O)

    @classmethod
    def from_q(cls, q: np.ndarray, mu: np.ndarray) -> "ValueTables":
        v = np.sum(mu * q, axis=1)
        return cls(q, v, q - v[:, None])


def _check_shapes(mdp: Mdp, theta: Theta) -> None:
    if (theta.n_states, theta.n_actions) != (mdp.n_states, mdp.n_actions):
        raise ValidationError("theta does not match the MDP's states/actions")


def augmented_transition(mdp: Mdp, theta: Theta) -> np.ndarray:
    """P~(z'|z,a) as a dense (Z, A, Z) array."""
    _check_shapes(mdp, theta)
    n_s, n_a, n_o = mdp.n_states, mdp.n_actions, theta.n_options
    beta, mu = theta.beta(), theta.mu()
    # switch[s', o, o'] = (1 - beta(s',o)) 1{o'=o} + beta(s',o) mu(o'|s')
    switch = beta.T[:, :, None] * mu[:, None, :]
    switch[:, np.arange(n_o), np.arange(n_o)] += 1.0 - beta.T
    # (s, a, s') x (s', o, o') -> (s, o, a, s', o')
    kernel = np.einsum("ast,tpq->apstq", mdp.transition.transpose(1, 0, 2), switch)
    kernel = kernel.transpose(2, 1, 0, 3, 4)
    return kernel.reshape(n_s * n_o, n_a, n_s * n_o)


def option_action_values(mdp: Mdp, theta: Theta, q: np.ndarray, reward=None) -> np.ndarray:
    """Q~(s,o,a) = r(s,a) + gamma * sum_s' P(s'|s,a) U(s',o), shape (S, O, A).

    ``reward`` may be an (S, O, A) table replacing r(s,a) (cost-transformed rewards).
    """
    tables = ValueTables.from_q(q, theta.mu())
    utility = q - theta.beta().T * tables.a  # U(s',o), (S, O)
    cont = np.einsum("sat,to->soa", mdp.transition, utility)
    base = mdp.reward[:, None, :] if reward is None else reward
    return base + mdp.gamma * cont


def augmented_chain(mdp: Mdp, theta: Theta) -> np.ndarray:
    """Policy-marginalised augmented kernel M[z, z'] = sum_a pi(a|z) P~(z'|z,a)."""
    n_s, n_o = mdp.n_states, theta.n_options
    beta, mu = theta.beta(), theta.mu()
    P_o = np.einsum("osa,sat->sot", theta.pi(), mdp.transition)  # (S, O, S')
    M = np.einsum("sot,ot,tq->sotq", P_o, beta, mu)
    idx = np.arange(n_o)
    M[:, idx, :, idx] += (P_o * (1.0 - beta)[None, :, :]).transpose(1, 0, 2)
    return M.reshape(n_s * n_o, n_s * n_o)


def expected_option_reward(mdp: Mdp, theta: Theta) -> np.ndarray:
    """r(s,o) = sum_a pi(a|s,o) r(s,a), shape (S, O)."""
    return np.einsum("osa,sa->so", theta.pi(), mdp.reward)


def _solve_fixed_point(M: np.ndarray, rhs: np.ndarray, discount: float, tol: float,
                       method: str, max_iter: int, what: str) -> np.ndarray:
    """Solve x = rhs + discount * M x directly or by successive approximation."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    if method == "solve":
        x = np.linalg.solve(np.eye(M.shape[0]) - discount * M, rhs)
    elif method == "iterate":
        x = np.zeros_like(rhs)
        for _ in range(max_iter):
            x_new = rhs + discount * M @ x
            delta = np.max(np.abs(x_new - x))
            x = x_new
            if delta <= tol * (1.0 - discount):
                break
        else:
            raise ConvergenceError(f"{what} did not converge", delta)
    else:
        raise ValueError(f"unknown method {method!r}")
    residual = np.max(np.abs(rhs + discount * M @ x - x))
    if residual > tol:
        raise ConvergenceError(f"{what} residual above tolerance", residual)
    return x


def intra_option_evaluate(mdp: Mdp, theta: Theta, tol: float = 1e-8, method: str = "solve",
                          max_iter: int = 1_000_000) -> ValueTables:
    """Solve the intra-option Bellman equations for Q(s,o)."""
    _check_shapes(mdp, theta)
    M = augmented_chain(mdp, theta)
    r = expected_option_reward(mdp, theta).reshape(-1)
    q = _solve_fixed_point(M, r, mdp.gamma, tol, method, max_iter, "intra-option evaluation")
    return ValueTables.from_q(q.reshape(mdp.n_states, theta.n_options), theta.mu())


def intra_option_residual(mdp: Mdp, theta: Theta, q: np.ndarray) -> np.ndarray:
    """|Q - sum_a pi (r + gamma sum P U)| per (s, o), written in the utility form."""
    q_tilde = option_action_values(mdp, theta, q)
    backup = np.einsum("osa,soa->so", theta.pi(), q_tilde)
    return np.abs(backup - q)


def option_models(mdp: Mdp, theta: Theta, o: int, tol: float = 1e-8):
    """Reward model b_o (S,) and transition model F_o (S, S') of option ``o``.

    ``F[s, s']`` is the discount-weighted probability of terminating in s' when the
    option starts in s (rows are start states).
    """
    _check_shapes(mdp, theta)
    if not 0 <= o < theta.n_options:
        raise IndexError(f"option {o} out of range")
    pi_o, beta_o = theta.pi()[o], theta.beta()[o]
    P_o = np.einsum("sa,sat->st", pi_o, mdp.transition)
    r_o = np.einsum("sa,sa->s", pi_o, mdp.reward)
    cont = P_o * (1.0 - beta_o)[None, :]
    b = _solve_fixed_point(cont, r_o, mdp.gamma, tol, "solve", 0, "reward model")
    F = _solve_fixed_point(cont, mdp.gamma * P_o * beta_o[None, :], mdp.gamma, tol, "solve", 0,
                           "transition model")
    return b, F


def smdp_evaluate(mdp: Mdp, theta: Theta, tol: float = 1e-8) -> np.ndarray:
    """Q(s,o) = b(s,o) + sum_s' F(s,s',o) V(s') from the option models, (S, O)."""
    n_s, n_o = mdp.n_states, theta.n_options
    mu = theta.mu()
    b = np.empty((n_s, n_o))
    G = np.empty((n_s, n_o, n_s, n_o))
    for o in range(n_o):
        b[:, o], F = option_models(mdp, theta, o, tol)
        G[:, o] = F[:, :, None] * mu[None, :, :]
    q = _solve_fixed_point(G.reshape(n_s * n_o, -1), b.reshape(-1), 1.0, tol, "solve", 0,
                           "SMDP evaluation")
    return q.reshape(n_s, n_o)


@dataclass
class Trajectory:
    states: list = field(default_factory=list)
    options: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    switched: list = field(default_factory=list)
    final_state: int | None = None

    def __len__(self) -> int:
        return len(self.states)

    def discounted_return(self, gamma: float) -> float:
        return float(sum(r * gamma**t for t, r in enumerate(self.rewards)))

    def to_dict(self) -> dict:
        return {
            "states": [int(s) for s in self.states],
            "options": [int(o) for o in self.options],
            "actions": [int(a) for a in self.actions],
            "rewards": [float(r) for r in self.rewards],
            "switched": [bool(x) for x in self.switched],
            "final_state": None if self.final_state is None else int(self.final_state),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Trajectory":
        return cls(list(doc["states"]), list(doc["options"]), list(doc.get("actions", [])),
                   list(doc.get("rewards", [])), list(doc["switched"]), doc.get("final_state"))


def _categorical(cdf: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Row-wise inverse-CDF sampling; ``cdf`` is (N, K), ``u`` is (N,)."""
    idx = (u[:, None] >= cdf).sum(axis=1)
    return np.minimum(idx, cdf.shape[1] - 1)


def simulate(mdp: Mdp, theta: Theta, starts, rng: np.random.Generator, horizon: int,
             mode: str = "call-and-return", tables: ValueTables | None = None,
             stop_at_absorbing: bool = True, record: bool = False):
    """Run ``len(starts)`` independent option executions in lock-step.

    Returns the discounted returns (N,) and, when ``record`` is set, arrays of shape
    (N, horizon) for states, options, actions, rewards and switch flags plus the
    per-run lengths. Runs stop once they enter an absorbing state.
    """
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    if mode not in ("call-and-return", "interruption"):
        raise ValueError(f"unknown execution mode {mode!r}")
    _check_shapes(mdp, theta)
    starts = np.asarray(starts, dtype=int)
    n = len(starts)
    pi_cdf = np.cumsum(theta.pi(), axis=2)
    mu_cdf = np.cumsum(theta.mu(), axis=1)
    beta = theta.beta()
    P_cdf = np.cumsum(mdp.transition, axis=2)
    absorbing = np.zeros(mdp.n_states, dtype=bool)
    if stop_at_absorbing:
        absorbing[mdp.absorbing_states()] = True
    interrupt = None
    if mode == "interruption":
        if tables is None:
            tables = intra_option_evaluate(mdp, theta)
        interrupt = tables.a < 0.0  # (S, O)

    s = starts.copy()
    o = _categorical(mu_cdf[s], rng.random(n))
    alive = ~absorbing[s]
    returns = np.zeros(n)
    disc = 1.0
    lengths = np.zeros(n, dtype=int)
    if record:
        hist = {k: np.full((n, horizon), -1, dtype=int) for k in ("s", "o", "a")}
        hist["r"] = np.zeros((n, horizon))
        hist["switched"] = np.zeros((n, horizon), dtype=bool)
    prev_switch = np.zeros(n, dtype=bool)
    for t in range(horizon):
        if not alive.any():
            break
        a = _categorical(pi_cdf[o, s], rng.random(n))
        r = mdp.reward[s, a]
        returns += np.where(alive, disc * r, 0.0)
        if record:
            for key, val in (("s", s), ("o", o), ("a", a), ("r", r), ("switched", prev_switch)):
                hist[key][alive, t] = val[alive]
        lengths += alive
        s_next = _categorical(P_cdf[s, a], rng.random(n))
        term = rng.random(n) < beta[o, s_next]
        if interrupt is not None:
            term |= interrupt[s_next, o]
        o_new = _categorical(mu_cdf[s_next], rng.random(n))
        o = np.where(term, o_new, o)
        prev_switch = term
        s = np.where(alive, s_next, s)
        alive &= ~absorbing[s]
        disc *= mdp.gamma
    if record:
        hist["final_s"] = s
        return returns, hist, lengths
    return returns


def execute(mdp: Mdp, theta: Theta, start: int, rng: np.random.Generator, horizon: int,
            mode: str = "call-and-return", tables: ValueTables | None = None) -> Trajectory:
    """One option-level rollout from ``start``; ``switched[t]`` marks a new option at step t."""
    _, hist, lengths = simulate(mdp, theta, [start], rng, horizon, mode, tables, record=True)
    n = int(lengths[0])
    return Trajectory(
        states=hist["s"][0, :n].tolist(),
        options=hist["o"][0, :n].tolist(),
        actions=hist["a"][0, :n].tolist(),
        rewards=hist["r"][0, :n].tolist(),
        switched=hist["switched"][0, :n].tolist(),
        final_state=int(hist["final_s"][0]),
    )
