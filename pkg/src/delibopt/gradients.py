"""Exact gradients of the option objectives with respect to the option policies and
terminations, plus a central finite-difference checker.

Regimes:
    plain         J = sum alpha Q
    lambda_gamma  J = sum alpha (Q - eta D^gamma) = sum alpha Q^c
    lambda_zero   J = sum alpha (Q - eta D^0)
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg

from .deliberation import DeliberationConfig, transformed_evaluate
from .mdp import Mdp, ValidationError
from .options import (
    Theta,
    _check_shapes,
    augmented_chain,
    intra_option_evaluate,
    option_action_values,
)

REGIMES = ("plain", "lambda_gamma", "lambda_zero")


@dataclass
class GradientReport:
    d_theta_pi: np.ndarray
    d_theta_beta: np.ndarray
    regime: str

    def to_dict(self) -> dict:
        return {"regime": self.regime, "d_theta_pi": self.d_theta_pi.tolist(),
                "d_theta_beta": self.d_theta_beta.tolist()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, doc: dict) -> "GradientReport":
        return cls(np.asarray(doc["d_theta_pi"]), np.asarray(doc["d_theta_beta"]), doc["regime"])


def _check_regime(regime: str) -> None:
    if regime not in REGIMES:
        raise ValidationError(f"unknown regime {regime!r}; expected one of {REGIMES}")


def _check_alpha(alpha: np.ndarray, mdp: Mdp, theta: Theta) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=float)
    if alpha.shape != (mdp.n_states, theta.n_options):
        raise ValidationError(f"alpha must be (S, O), got {alpha.shape}")
    if np.any(alpha < 0) or abs(alpha.sum() - 1.0) > 1e-9:
        raise ValidationError("alpha must be a probability table")
    return alpha


def discounted_occupancy(mdp: Mdp, theta: Theta, alpha: np.ndarray, tol: float = 1e-10,
                         with_actions: bool = False):
    """sum_t gamma^t Pr(Z_t = z) from Z_0 ~ alpha, shape (S, O); optionally also (S, O, A)."""
    _check_shapes(mdp, theta)
    alpha = _check_alpha(alpha, mdp, theta)
    M = augmented_chain(mdp, theta)
    A = np.eye(M.shape[0]) - mdp.gamma * M.T
    occ = np.linalg.solve(A, alpha.reshape(-1))
    residual = np.max(np.abs(A @ occ - alpha.reshape(-1)))
    if residual > tol:
        raise ValidationError(f"occupancy solve residual {residual:.2e} above tolerance")
    occ = occ.reshape(mdp.n_states, theta.n_options)
    if with_actions:
        return occ, occ[:, :, None] * theta.pi().transpose(1, 0, 2)
    return occ


def arrival_measure(mdp: Mdp, theta: Theta, weights: np.ndarray) -> np.ndarray:
    """e(s', o) = sum_s weights(s, o) sum_a pi(a|s,o) P(s'|s,a), returned as (O, S')."""
    return np.einsum("so,osa,sat->ot", weights, theta.pi(), mdp.transition)


def _softmax_chain(occ: np.ndarray, pi: np.ndarray, q_tilde: np.ndarray) -> np.ndarray:
    """occ(s,o) * pi(a|s,o) * (Q~(s,o,a) - sum_b pi(b|s,o) Q~(s,o,b)), as (O, S, A)."""
    pi_soa = pi.transpose(1, 0, 2)
    centred = q_tilde - np.sum(pi_soa * q_tilde, axis=2, keepdims=True)
    return (occ[:, :, None] * pi_soa * centred).transpose(1, 0, 2)


def _switch_cost_per_action(mdp: Mdp, theta: Theta) -> np.ndarray:
    """gamma * sum_s' P(s'|s,a) beta(s',o), shape (S, O, A)."""
    return mdp.gamma * np.einsum("sat,ot->soa", mdp.transition, theta.beta())


def option_policy_gradient(mdp: Mdp, theta: Theta, alpha: np.ndarray,
                           config: DeliberationConfig | None = None,
                           regime: str = "plain") -> np.ndarray:
    """dJ/d theta_pi, shape (O, S, A)."""
    _check_regime(regime)
    eta = 0.0 if config is None or regime == "plain" else config.eta
    occ = discounted_occupancy(mdp, theta, alpha)
    pi = theta.pi()
    if regime == "lambda_gamma" and eta > 0:
        cost = _switch_cost_per_action(mdp, theta)
        reward = mdp.reward[:, None, :] - eta * cost
        qc = transformed_evaluate(mdp, theta, DeliberationConfig(eta=eta, lam=None)).qc
        return _softmax_chain(occ, pi, option_action_values(mdp, theta, qc, reward=reward))
    q = intra_option_evaluate(mdp, theta).q
    grad = _softmax_chain(occ, pi, option_action_values(mdp, theta, q))
    if regime == "lambda_zero" and eta > 0:
        # D^0 = sum_a pi * cost(s,o,a) only sees the first step from alpha
        grad -= eta * _softmax_chain(np.asarray(alpha), pi, _switch_cost_per_action(mdp, theta))
    return grad


def termination_gradient(mdp: Mdp, theta: Theta, alpha: np.ndarray,
                         config: DeliberationConfig | None = None,
                         regime: str = "plain") -> np.ndarray:
    """dJ/d theta_beta for the chosen regime, shape (O, S).

    plain and lambda_gamma take the form gamma * E_occ[-beta' (advantage + margin)].
    For lambda_zero the margin term only sees the first transition out of alpha, since
    D^0 is the immediate cost.
    """
    _check_regime(regime)
    _check_shapes(mdp, theta)
    config = config or DeliberationConfig()
    eta = 0.0 if regime == "plain" else config.eta
    if not config.is_switching and eta > 0:
        raise ValidationError("analytic termination gradients need the switching cost")
    beta = theta.beta()
    dbeta = beta * (1.0 - beta)
    occ = discounted_occupancy(mdp, theta, alpha)
    arrivals = arrival_measure(mdp, theta, occ)
    if regime == "lambda_gamma":
        adv = transformed_evaluate(mdp, theta, DeliberationConfig(eta=eta, lam=None)).ac.T
        return -mdp.gamma * arrivals * dbeta * (adv + eta)
    adv = intra_option_evaluate(mdp, theta).a.T
    grad = -mdp.gamma * arrivals * dbeta * adv
    if regime == "lambda_zero" and eta > 0:
        grad -= mdp.gamma * eta * arrival_measure(mdp, theta, np.asarray(alpha)) * dbeta
    return grad


def margin_termination_gradient(mdp: Mdp, theta: Theta, alpha: np.ndarray, eta: float,
                                advantage: str = "original") -> np.ndarray:
    """gamma * E_occ[-beta'(s',o) (A(s',o) + eta)] with the margin at every visited state.

    ``advantage="original"`` uses A of the base reward (what a critic of the raw reward
    supplies); ``"transformed"`` uses A^c and equals the lambda_gamma gradient.
    """
    beta = theta.beta()
    occ = discounted_occupancy(mdp, theta, alpha)
    arrivals = arrival_measure(mdp, theta, occ)
    if advantage == "original":
        adv = intra_option_evaluate(mdp, theta).a.T
    elif advantage == "transformed":
        adv = transformed_evaluate(mdp, theta, DeliberationConfig(eta=eta, lam=None)).ac.T
    else:
        raise ValidationError(f"unknown advantage {advantage!r}")
    return -mdp.gamma * arrivals * beta * (1.0 - beta) * (adv + eta)


def termination_gradient_exact_bellman(mdp: Mdp, theta: Theta, alpha: np.ndarray,
                                       tol: float = 1e-10,
                                       config: DeliberationConfig | None = None,
                                       regime: str = "plain") -> np.ndarray:
    """dJ/d theta_beta by solving the differentiated Bellman system for dQ/d theta_beta.

    dQ = r_beta + gamma * M dQ, where the "reward" column for parameter (o*, s*) is
    gamma * P_o(s'=s*|s) beta'(s*,o*) (-A(s*,o*)) on rows with o = o*. In the
    lambda_gamma regime the system is that of the cost-transformed MDP, whose reward
    r - eta*gamma*beta also depends on theta_beta.
    """
    _check_regime(regime)
    _check_shapes(mdp, theta)
    alpha = _check_alpha(alpha, mdp, theta)
    config = config or DeliberationConfig()
    eta = 0.0 if regime == "plain" else config.eta
    n_s, n_o = mdp.n_states, theta.n_options
    beta = theta.beta()
    dbeta = beta * (1.0 - beta)
    mu = theta.mu()
    if regime == "lambda_gamma":
        q = transformed_evaluate(mdp, theta, DeliberationConfig(eta=eta, lam=None)).qc
    else:
        q = intra_option_evaluate(mdp, theta).q
    v = np.sum(mu * q, axis=1)
    P_o = np.einsum("osa,sat->sot", theta.pi(), mdp.transition)
    # d/d beta(t,o) of row (s,o): gamma P_o[s,o,t] (V(t) - Q(t,o)), minus the cost slope
    slope = (v[:, None] - q).T  # (O, T)
    if regime == "lambda_gamma":
        slope = slope - eta
    rhs = np.zeros((n_s, n_o, n_o, n_s))
    for o in range(n_o):
        rhs[:, o, o, :] = mdp.gamma * P_o[:, o, :] * (dbeta[o] * slope[o])[None, :]
    rhs = rhs.reshape(n_s * n_o, n_o * n_s)
    M = augmented_chain(mdp, theta)
    lhs = np.eye(n_s * n_o) - mdp.gamma * M
    dq = scipy.linalg.lu_solve(scipy.linalg.lu_factor(lhs), rhs)
    residual = np.max(np.abs(lhs @ dq - rhs))
    if residual > tol:
        raise ValidationError(f"derivative system residual {residual:.2e} above tolerance")
    grad = (alpha.reshape(-1) @ dq).reshape(n_o, n_s)
    if regime == "lambda_zero" and eta > 0:
        # immediate-cost derivative gamma * sum_s alpha(s,o) P_o[s,o,t] beta'(t,o)
        grad -= eta * mdp.gamma * np.einsum("so,sot->ot", alpha, P_o) * dbeta
    return grad


def gradient_report(mdp: Mdp, theta: Theta, alpha: np.ndarray,
                    config: DeliberationConfig | None = None,
                    regime: str = "plain") -> GradientReport:
    return GradientReport(option_policy_gradient(mdp, theta, alpha, config, regime),
                          termination_gradient(mdp, theta, alpha, config, regime), regime)


@dataclass
class FiniteDifferenceReport:
    """Worst relative error over the checked coordinates.

    For vector objectives ``max_rel_error`` is the worst over components and
    ``component_errors`` holds one entry per component.
    """

    max_rel_error: float
    worst_index: tuple
    numeric: np.ndarray = field(repr=False)
    checked: int = 0
    component_errors: tuple = ()


def finite_difference_check(objective: Callable[[Theta], float], theta: Theta,
                            analytic: np.ndarray, block: str = "theta_beta", h: float = 1e-6,
                            coords=None, map_fn=map) -> FiniteDifferenceReport:
    """Compare ``analytic`` with central differences of ``objective`` along ``block``.

    Relative error per coordinate is |fd - analytic| / max(1, |analytic|). The objective
    may return a vector of k values, in which case ``analytic`` stacks k gradients along
    a leading axis. ``coords`` restricts the check to a list of multi-indices; ``map_fn``
    may be a parallel map since coordinates are independent.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    if block not in ("theta_pi", "theta_beta", "theta_mu"):
        raise ValidationError(f"unknown block {block!r}")
    base = getattr(theta, block)
    analytic = np.asarray(analytic, dtype=float)
    vector = analytic.shape != base.shape
    if vector and analytic.shape[1:] != base.shape:
        raise ValidationError(f"analytic gradient shape {analytic.shape} != {base.shape}")
    stacked = analytic if vector else analytic[None]
    if coords is None:
        coords = list(np.ndindex(base.shape))
    coords = [tuple(int(i) for i in c) for c in coords]

    def central(idx):
        plus, minus = base.copy(), base.copy()
        plus[idx] += h
        minus[idx] -= h
        f_plus = np.atleast_1d(objective(theta.replace(**{block: plus})))
        f_minus = np.atleast_1d(objective(theta.replace(**{block: minus})))
        return (f_plus - f_minus) / (2.0 * h)

    numeric = np.full(stacked.shape, np.nan)
    for idx, val in zip(coords, map_fn(central, coords)):
        numeric[(slice(None),) + idx] = val
    per_component = []
    worst_err, worst_idx = 0.0, ()
    for k in range(stacked.shape[0]):
        errs = [abs(numeric[(k,) + i] - stacked[(k,) + i]) / max(1.0, abs(stacked[(k,) + i]))
                for i in coords]
        top = max(errs, default=0.0)
        per_component.append(float(top))
        if errs and top >= worst_err:
            worst_err, worst_idx = float(top), ((k,) if vector else ()) + coords[int(np.argmax(errs))]
    return FiniteDifferenceReport(worst_err, worst_idx, numeric if vector else numeric[0],
                                  len(coords), tuple(per_component))
