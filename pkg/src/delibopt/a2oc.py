"""Asynchronous advantage option-critic on tabular MDPs.

Workers roll out segments of at most ``t_max`` steps against a snapshot of the shared
parameters, compute n-step targets backwards, and add their accumulated deltas to the
shared tables under a lock. The per-segment inner loop is compiled with numba; the
python side handles snapshots, randomness and bookkeeping.
"""

from __future__ import annotations

import math
import queue
import threading
from dataclasses import asdict, dataclass, field

import numba
import numpy as np

from .mdp import Mdp, ValidationError
from .options import Theta

LAMBDA_MODES = ("zero", "gamma")
BASELINES = ("greedy", "soft")


@dataclass
class A2OCConfig:
    eta: float = 0.0
    lambda_mode: str = "zero"
    epsilon: float = 0.1
    entropy_coef: float = 0.001
    lr_q: float = 0.2
    lr_pi: float = 0.5
    lr_beta: float = 5.0
    t_max: int = 20
    t_min: int = 1
    n_workers: int = 1
    total_steps: int = 500_000
    gamma: float | None = None
    seed: int = 0
    n_options: int = 4
    max_episode_steps: int = 2000
    # V(s') inside the termination update: max_o Q ("greedy") or the epsilon-soft mean
    termination_baseline: str = "greedy"

    def __post_init__(self):
        if self.lambda_mode not in LAMBDA_MODES:
            raise ValidationError(f"lambda_mode must be one of {LAMBDA_MODES}")
        if self.termination_baseline not in BASELINES:
            raise ValidationError(f"termination_baseline must be one of {BASELINES}")
        if not 0 <= self.t_min < self.t_max:
            raise ValidationError("need 0 <= t_min < t_max")
        if min(self.lr_q, self.lr_pi, self.lr_beta) <= 0:
            raise ValidationError("learning rates must be positive")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValidationError("epsilon must lie in [0, 1]")
        if self.eta < 0 or self.entropy_coef < 0:
            raise ValidationError("eta and entropy_coef must be >= 0")
        if self.n_workers < 1 or self.total_steps < 1 or self.n_options < 1:
            raise ValidationError("n_workers, total_steps and n_options must be positive")

    @classmethod
    def from_mapping(cls, doc: dict) -> "A2OCConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ValidationError(f"unknown A2OC config keys: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SharedParams:
    theta: Theta
    q: np.ndarray  # critic table w, (S, O)
    step: int = 0
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def snapshot(self):
        with self.lock:
            return self.q.copy(), self.theta.theta_pi.copy(), self.theta.theta_beta.copy()

    def apply(self, dq, dpi, dbeta, steps: int) -> int:
        with self.lock:
            self.q += dq
            self.theta.theta_pi += dpi
            self.theta.theta_beta += dbeta
            self.step += steps
            return self.step

    def greedy_theta(self) -> Theta:
        """Options as learned, with a deterministic argmax-Q policy over options."""
        return Theta(self.theta.theta_pi.copy(), self.theta.theta_beta.copy(), self.q.copy(),
                     epsilon_mu=0.0)


@dataclass
class EpisodeRecord:
    step: int
    episode: int
    ret: float
    mean_termination: float
    switches: int
    active_options: int
    length: int


@dataclass
class TrainMetrics:
    episodes: list = field(default_factory=list)
    option_usage: np.ndarray | None = None
    steps: int = 0

    def late_mean_termination(self, fraction: float = 0.2) -> float:
        """Step-weighted mean of beta over episodes ending in the last ``fraction`` of training."""
        cutoff = self.steps * (1.0 - fraction)
        late = [e for e in self.episodes if e.step >= cutoff]
        n = sum(e.length for e in late)
        if n == 0:
            return float("nan")
        return math.fsum(e.mean_termination * e.length for e in late) / n


# --------------------------------------------------------------------------- kernels


@numba.njit(cache=True)
def _sample(cdf, u):
    n = cdf.shape[0]
    for i in range(n):
        if u < cdf[i]:
            return i
    return n - 1


@numba.njit(cache=True)
def _eps_soft(q_row, eps, u1, u2):
    n = q_row.shape[0]
    if u1 < eps:
        return min(int(u2 * n), n - 1)
    best = 0
    for i in range(1, n):
        if q_row[i] > q_row[best]:
            best = i
    return best


@numba.njit(cache=True)
def _softmax_row(logits, out):
    m = logits.max()
    total = 0.0
    for i in range(logits.shape[0]):
        out[i] = math.exp(logits[i] - m)
        total += out[i]
    for i in range(logits.shape[0]):
        out[i] /= total


@numba.njit(cache=True)
def _baseline(q_row, eps, greedy):
    n = q_row.shape[0]
    best = q_row.max()
    if greedy:
        return best
    return (1.0 - eps) * best + eps * q_row.mean()


@numba.njit(cache=True)
def _collect(P_cdf, R, terminal, q, tpi, tbeta, s, o, pending, ep_step, u,
             eta, charge_cost, eps, gamma, t_max, t_min, max_ep,
             seg_s, seg_o, seg_a, seg_r, seg_rt, seg_next, seg_beta, seg_switch):
    """Roll out one segment. Returns (n, s, o, pending, ep_step, ended, done)."""
    n_a = tpi.shape[2]
    probs = np.empty(n_a)
    n = 0
    k = 0
    done = False
    ended = False
    while True:
        _softmax_row(tpi[o, s], probs)
        cdf = np.cumsum(probs)
        a = _sample(cdf, u[k])
        s2 = _sample(P_cdf[s, a], u[k + 1])
        r = R[s, a]
        rt = r
        if pending and charge_cost:
            rt -= eta
        seg_s[n] = s
        seg_o[n] = o
        seg_a[n] = a
        seg_r[n] = r
        seg_rt[n] = rt
        seg_next[n] = s2
        ep_step += 1
        n += 1
        done = terminal[s2]
        term = False
        if done:
            seg_beta[n - 1] = -1.0
        else:
            b = 1.0 / (1.0 + math.exp(-tbeta[o, s2]))
            seg_beta[n - 1] = b
            term = u[k + 2] < b
            if term:
                o = _eps_soft(q[s2], eps, u[k + 3], u[k + 4])
        seg_switch[n - 1] = term
        pending = term
        s = s2
        k += 5
        if done or ep_step >= max_ep:
            ended = True
            break
        if n == t_max or (n > t_min and term):
            break
    return n, s, o, pending, ep_step, ended, done


@numba.njit(cache=True)
def _accumulate(q, tpi, tbeta, n, bootstrap, seg_s, seg_o, seg_a, seg_rt, seg_next, seg_beta,
                eta, eps, gamma, entropy_coef, lr_q, lr_pi, lr_beta, greedy_baseline,
                dq, dpi, dbeta):
    """Backward n-step targets and the three parameter deltas (added into dq/dpi/dbeta)."""
    n_a = tpi.shape[2]
    probs = np.empty(n_a)
    g = bootstrap
    for k in range(n - 1, -1, -1):
        s = seg_s[k]
        o = seg_o[k]
        a = seg_a[k]
        g = seg_rt[k] + gamma * g
        td = g - q[s, o]
        dq[s, o] += lr_q * td
        _softmax_row(tpi[o, s], probs)
        ent = 0.0
        for j in range(n_a):
            if probs[j] > 0.0:
                ent -= probs[j] * math.log(probs[j])
        for j in range(n_a):
            grad_logp = (1.0 if j == a else 0.0) - probs[j]
            grad_ent = 0.0
            if probs[j] > 0.0:
                grad_ent = -probs[j] * (math.log(probs[j]) + ent)
            dpi[o, s, j] += lr_pi * (grad_logp * td + entropy_coef * grad_ent)
        b = seg_beta[k]
        if b >= 0.0:
            s2 = seg_next[k]
            v2 = _baseline(q[s2], eps, greedy_baseline)
            dbeta[o, s2] -= lr_beta * b * (1.0 - b) * (q[s2, o] - v2 + eta)


# --------------------------------------------------------------------------- python API


class TabularEnv:
    """Episodic wrapper over an Mdp: episodes end on entering an absorbing state."""

    def __init__(self, mdp: Mdp):
        self.mdp = mdp
        self.P_cdf = np.cumsum(mdp.transition, axis=2)
        self.R = np.ascontiguousarray(mdp.reward)
        self.terminal = np.zeros(mdp.n_states, dtype=np.bool_)
        self.terminal[mdp.absorbing_states()] = True
        self.init_cdf = np.cumsum(mdp.initial_dist)

    def reset(self, rng: np.random.Generator) -> int:
        return int(min(np.searchsorted(self.init_cdf, rng.random(), side="right"),
                       self.mdp.n_states - 1))


def epsilon_soft_choice(q_row, epsilon: float, rng: np.random.Generator) -> int:
    """Argmax (lowest index on ties) with probability 1 - epsilon, uniform otherwise."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValidationError("epsilon must lie in [0, 1]")
    q_row = np.asarray(q_row, dtype=float)
    if rng.random() < epsilon:
        return int(rng.integers(len(q_row)))
    return int(np.argmax(q_row))


def n_step_targets(rewards, bootstrap: float, gamma: float) -> np.ndarray:
    """G_k = r_k + gamma * G_{k+1}, with G_n = bootstrap."""
    out = np.empty(len(rewards))
    g = bootstrap
    for k in range(len(rewards) - 1, -1, -1):
        g = rewards[k] + gamma * g
        out[k] = g
    return out


@dataclass
class Segment:
    states: np.ndarray
    options: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray          # raw environment rewards
    stored_rewards: np.ndarray   # rewards used for targets (cost folded in when charged)
    next_states: np.ndarray
    betas: np.ndarray            # beta(s_{k+1}, o_k); -1 where s_{k+1} is terminal
    switched: np.ndarray         # termination fired at s_{k+1}

    def __len__(self):
        return len(self.states)


@dataclass
class WorkerState:
    """Environment state and active option carried across segments."""

    s: int
    o: int
    pending: bool = False
    ep_step: int = 0


class _Buffers:
    def __init__(self, t_max: int):
        self.s = np.zeros(t_max, dtype=np.int64)
        self.o = np.zeros(t_max, dtype=np.int64)
        self.a = np.zeros(t_max, dtype=np.int64)
        self.r = np.zeros(t_max)
        self.rt = np.zeros(t_max)
        self.next = np.zeros(t_max, dtype=np.int64)
        self.beta = np.zeros(t_max)
        self.switch = np.zeros(t_max, dtype=np.bool_)


def collect_segment(env: TabularEnv, q, theta_pi, theta_beta, state: WorkerState,
                    config: A2OCConfig, rng: np.random.Generator, buffers: _Buffers | None = None):
    """Roll out one segment from ``state`` (updated in place).

    Returns ``(segment, ended, done)``: ``ended`` when the episode is over (terminal state
    or step cap), ``done`` only for a terminal state. The cost eta is subtracted from the
    stored reward of the step taken right after a switch when ``lambda_mode="gamma"``.
    """
    buffers = buffers or _Buffers(config.t_max)
    gamma = env.mdp.gamma if config.gamma is None else config.gamma
    u = rng.random(5 * config.t_max)
    n, s, o, pending, ep_step, ended, done = _collect(
        env.P_cdf, env.R, env.terminal, q, theta_pi, theta_beta, state.s, state.o,
        state.pending, state.ep_step, u, config.eta, config.lambda_mode == "gamma",
        config.epsilon, gamma, config.t_max, config.t_min, config.max_episode_steps,
        buffers.s, buffers.o, buffers.a, buffers.r, buffers.rt, buffers.next, buffers.beta,
        buffers.switch)
    state.s, state.o, state.pending, state.ep_step = int(s), int(o), bool(pending), int(ep_step)
    seg = Segment(buffers.s[:n].copy(), buffers.o[:n].copy(), buffers.a[:n].copy(),
                  buffers.r[:n].copy(), buffers.rt[:n].copy(), buffers.next[:n].copy(),
                  buffers.beta[:n].copy(), buffers.switch[:n].copy())
    return seg, bool(ended), bool(done)


def segment_bootstrap(q, s_end: int, done: bool, epsilon: float) -> float:
    """0 at a terminal state, else the epsilon-soft value sum_o mu(o|s) Q(s,o)."""
    if done:
        return 0.0
    row = q[s_end]
    return float((1.0 - epsilon) * row.max() + epsilon * row.mean())


def accumulate_updates(segment: Segment, bootstrap: float, q, theta_pi, theta_beta,
                       config: A2OCConfig, gamma: float):
    """Deltas (dq, dtheta_pi, dtheta_beta) for one segment against a parameter snapshot."""
    dq = np.zeros_like(q)
    dpi = np.zeros_like(theta_pi)
    dbeta = np.zeros_like(theta_beta)
    _accumulate(q, theta_pi, theta_beta, len(segment), bootstrap, segment.states,
                segment.options, segment.actions, segment.stored_rewards, segment.next_states,
                segment.betas, config.eta, config.epsilon, gamma, config.entropy_coef,
                config.lr_q, config.lr_pi, config.lr_beta,
                config.termination_baseline == "greedy", dq, dpi, dbeta)
    return dq, dpi, dbeta


def init_shared(mdp: Mdp, config: A2OCConfig) -> SharedParams:
    theta = Theta.zeros(mdp.n_states, mdp.n_actions, config.n_options, config.epsilon)
    return SharedParams(theta, np.zeros((mdp.n_states, config.n_options)))


def _worker(wid: int, env: TabularEnv, shared: SharedParams, config: A2OCConfig,
            emit, usage: np.ndarray, episode_counter: list, counter_lock: threading.Lock):
    rng = np.random.default_rng([config.seed, wid])
    gamma = env.mdp.gamma if config.gamma is None else config.gamma
    buffers = _Buffers(config.t_max)
    q, tpi, tbeta = shared.snapshot()
    s0 = env.reset(rng)
    state = WorkerState(s0, epsilon_soft_choice(q[s0], config.epsilon, rng))
    ep = dict(ret=0.0, disc=1.0, beta_sum=0.0, beta_n=0, switches=0, used=set(), length=0)
    while True:
        with shared.lock:
            if shared.step >= config.total_steps:
                return
        q, tpi, tbeta = shared.snapshot()
        seg, ended, done = collect_segment(env, q, tpi, tbeta, state, config, rng, buffers)
        bootstrap = segment_bootstrap(q, state.s, done, config.epsilon)
        deltas = accumulate_updates(seg, bootstrap, q, tpi, tbeta, config, gamma)
        step = shared.apply(*deltas, len(seg))
        for k in range(len(seg)):
            ep["ret"] += ep["disc"] * seg.rewards[k]
            ep["disc"] *= gamma
            if seg.betas[k] >= 0:
                ep["beta_sum"] += seg.betas[k]
                ep["beta_n"] += 1
            ep["switches"] += int(seg.switched[k])
            ep["used"].add(int(seg.options[k]))
            usage[wid, seg.options[k]] += 1
        ep["length"] += len(seg)
        if ended:
            with counter_lock:
                episode_counter[0] += 1
                number = episode_counter[0]
            mean_beta = ep["beta_sum"] / ep["beta_n"] if ep["beta_n"] else 0.0
            emit(EpisodeRecord(step, number, ep["ret"], mean_beta, ep["switches"],
                               len(ep["used"]), ep["length"]))
            ep = dict(ret=0.0, disc=1.0, beta_sum=0.0, beta_n=0, switches=0, used=set(),
                      length=0)
            q, _, _ = shared.snapshot()
            s0 = env.reset(rng)
            state = WorkerState(s0, epsilon_soft_choice(q[s0], config.epsilon, rng))


def train(env_factory, config: A2OCConfig, on_episode=None):
    """Run ``config.n_workers`` workers until the global step count reaches total_steps.

    ``env_factory()`` must return an Mdp or TabularEnv; each worker builds its own.
    ``on_episode(record)`` is called from the calling thread, in arrival order.
    Returns ``(shared, metrics)``.
    """
    envs = []
    for _ in range(config.n_workers):
        env = env_factory()
        envs.append(env if isinstance(env, TabularEnv) else TabularEnv(env))
    mdp = envs[0].mdp
    shared = init_shared(mdp, config)
    metrics = TrainMetrics()
    usage = np.zeros((config.n_workers, config.n_options), dtype=np.int64)
    channel: queue.Queue = queue.Queue()
    errors: list = []
    counter, counter_lock = [0], threading.Lock()

    def run(wid):
        try:
            _worker(wid, envs[wid], shared, config, channel.put, usage, counter, counter_lock)
        except BaseException as exc:  # surfaced in the calling thread
            errors.append(exc)
        finally:
            channel.put(None)

    threads = [threading.Thread(target=run, args=(w,), daemon=True)
               for w in range(config.n_workers)]
    for t in threads:
        t.start()
    finished = 0
    while finished < len(threads):
        item = channel.get()
        if item is None:
            finished += 1
            continue
        metrics.episodes.append(item)
        if on_episode is not None:
            on_episode(item)
    for t in threads:
        t.join()
    if errors:
        raise errors[0]
    metrics.option_usage = usage.sum(axis=0)
    metrics.steps = shared.step
    return shared, metrics
