import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from delibopt.mdp import Mdp, StationaryPolicy, ValidationError, policy_evaluation, random_mdp
from delibopt.options import (
    PRIMITIVE_LOGIT,
    Theta,
    ValueTables,
    augmented_chain,
    augmented_transition,
    execute,
    flat_index,
    intra_option_evaluate,
    intra_option_residual,
    option_models,
    simulate,
    smdp_evaluate,
    unflat_index,
)
from delibopt.oracle import augmented_value_iteration

ALWAYS, NEVER = PRIMITIVE_LOGIT, -PRIMITIVE_LOGIT


def with_beta(theta, logit):
    return theta.replace(theta_beta=np.full_like(theta.theta_beta, logit))


def random_theta(seed, n_s, n_a, n_o, **kw):
    return Theta.random(n_s, n_a, n_o, np.random.default_rng(seed), **kw)


def go_option(n_options=1):
    """CHAIN2 options that always pick 'go'."""
    logits = np.zeros((n_options, 2, 2))
    logits[:, :, 0] = ALWAYS
    return Theta(logits, np.full((n_options, 2), NEVER), np.zeros((2, n_options)), 0.0)


# --------------------------------------------------------------- augmented kernel


def test_always_terminate_kernel(rng):
    m = random_mdp(5, 2, 0.9, rng)
    th = with_beta(Theta.random(5, 2, 3, rng), ALWAYS)
    K = augmented_transition(m, th).reshape(5, 3, 2, 5, 3)
    expected = m.transition[:, None, :, :, None] * th.mu()[None, None, None, :, :]
    np.testing.assert_allclose(K, np.broadcast_to(expected, K.shape), atol=1e-15)


def test_never_terminate_kernel(rng):
    m = random_mdp(5, 2, 0.9, rng)
    th = with_beta(Theta.random(5, 2, 3, rng), NEVER)
    K = augmented_transition(m, th).reshape(5, 3, 2, 5, 3)
    expected = m.transition[:, None, :, :, None] * np.eye(3)[None, :, None, None, :]
    np.testing.assert_allclose(K, expected, atol=1e-15)


def test_four_rooms_rows_sum_to_one(four_rooms, four_rooms_theta):
    K = augmented_transition(four_rooms, four_rooms_theta)
    assert np.max(np.abs(K.sum(axis=2) - 1.0)) <= 1e-12
    M = augmented_chain(four_rooms, four_rooms_theta)
    assert np.max(np.abs(M.sum(axis=1) - 1.0)) <= 1e-12


def test_chain_is_policy_marginal_of_kernel(rng):
    m = random_mdp(4, 3, 0.9, rng)
    th = Theta.random(4, 3, 2, rng)
    K = augmented_transition(m, th)
    pi_z = th.pi().transpose(1, 0, 2).reshape(8, 3)
    np.testing.assert_allclose(augmented_chain(m, th), np.einsum("za,zaw->zw", pi_z, K),
                               atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6), st.integers(1, 3), st.integers(1, 4),
       st.floats(0.0, 1.0), st.floats(0.1, 5.0))
def test_kernel_rows_are_distributions(seed, n_s, n_a, n_o, eps, scale):
    rng = np.random.default_rng(seed)
    m = random_mdp(n_s, n_a, 0.9, rng)
    th = Theta.random(n_s, n_a, n_o, rng, scale=scale, epsilon_mu=eps)
    K = augmented_transition(m, th)
    assert np.all(K >= 0)
    assert np.max(np.abs(K.sum(axis=2) - 1.0)) <= 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 12), st.integers(1, 5))
def test_flat_index_bijection(seed, n_s, n_o):
    z = [flat_index(s, o, n_o) for s in range(n_s) for o in range(n_o)]
    assert z == list(range(n_s * n_o))
    assert [unflat_index(i, n_o) for i in z] == [(s, o) for s in range(n_s) for o in range(n_o)]


# --------------------------------------------------------------- evaluation


def test_chain2_go_option(chain):
    tables = intra_option_evaluate(chain, go_option(), tol=1e-12)
    np.testing.assert_allclose(tables.q[:, 0], [1.0, 0.0], atol=1e-12)


def test_single_never_terminating_option_is_flat_policy(rng):
    m = random_mdp(6, 3, 0.9, rng)
    th = with_beta(Theta.random(6, 3, 1, rng), NEVER)
    q = intra_option_evaluate(m, th, tol=1e-11).q[:, 0]
    v = policy_evaluation(m, StationaryPolicy(th.pi()[0]), tol=1e-11)
    assert np.max(np.abs(q - v)) <= 1e-9


def test_four_rooms_matches_oracle(four_rooms, four_rooms_theta):
    q = intra_option_evaluate(four_rooms, four_rooms_theta, tol=1e-10).q
    ref = augmented_value_iteration(four_rooms, four_rooms_theta, tol=1e-12)
    assert np.max(np.abs(q.reshape(-1) - ref)) <= 1e-8


def test_residual_within_tolerance(four_rooms, four_rooms_theta):
    tol = 1e-9
    q = intra_option_evaluate(four_rooms, four_rooms_theta, tol=tol).q
    assert np.max(intra_option_residual(four_rooms, four_rooms_theta, q)) <= tol


def test_iterative_method_agrees(rng):
    m = random_mdp(5, 2, 0.8, rng)
    th = Theta.random(5, 2, 3, rng)
    a = intra_option_evaluate(m, th, tol=1e-11).q
    b = intra_option_evaluate(m, th, tol=1e-11, method="iterate").q
    assert np.max(np.abs(a - b)) <= 1e-9


def test_value_table_invariants(rng):
    m = random_mdp(5, 2, 0.8, rng)
    th = Theta.random(5, 2, 3, rng, mu_kind="softmax")
    t = intra_option_evaluate(m, th)
    np.testing.assert_allclose(t.v, np.sum(th.mu() * t.q, axis=1), atol=1e-14)
    np.testing.assert_allclose(t.a, t.q - t.v[:, None], atol=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6), st.integers(1, 4))
def test_utility_identity(seed, n_s, n_o):
    rng = np.random.default_rng(seed)
    q = rng.normal(size=(n_s, n_o))
    th = Theta.random(n_s, 2, n_o, rng)
    t = ValueTables.from_q(q, th.mu())
    beta = th.beta().T
    lhs = (1 - beta) * q + beta * t.v[:, None]
    np.testing.assert_allclose(lhs, q - beta * t.a, atol=1e-12, rtol=0)


# --------------------------------------------------------------- option models / SMDP


def test_one_step_option_models(rng):
    m = random_mdp(5, 3, 0.9, rng)
    th = with_beta(Theta.random(5, 3, 2, rng), ALWAYS)
    for o in range(2):
        b, F = option_models(m, th, o, tol=1e-12)
        pi = th.pi()[o]
        np.testing.assert_allclose(b, np.sum(pi * m.reward, axis=1), atol=1e-12)
        np.testing.assert_allclose(F, m.gamma * np.einsum("sa,sat->st", pi, m.transition),
                                   atol=1e-12)


def test_zero_reward_option_models(rng):
    m = random_mdp(5, 3, 0.9, rng)
    m = Mdp(m.transition, np.zeros_like(m.reward), m.gamma)
    b, _ = option_models(m, Theta.random(5, 3, 2, rng), 1)
    assert np.all(b == 0.0)


def test_option_models_monte_carlo(chain):
    th = go_option().replace(theta_beta=np.zeros((1, 2)))  # beta = 0.5 everywhere
    b, F = option_models(chain, th, 0, tol=1e-12)
    rng = np.random.default_rng(99)
    n = 1_000_000
    # From state 0 the option pays 1, moves to state 1 and then stays there; it ends
    # after a geometric number of steps, each ending with probability 1/2.
    steps = rng.geometric(0.5, size=n)
    f_samples = chain.gamma ** steps
    b_samples = np.ones(n)
    f_mean, f_sd = f_samples.mean(), f_samples.std(ddof=1) / np.sqrt(n)
    assert abs(F[0, 1] - f_mean) <= 3 * f_sd
    assert F[0, 0] == pytest.approx(0.0, abs=1e-15)
    assert b[0] == pytest.approx(b_samples.mean(), abs=1e-12)


def test_smdp_matches_intra(rng, four_rooms, four_rooms_theta):
    q = smdp_evaluate(four_rooms, four_rooms_theta, tol=1e-10)
    ref = intra_option_evaluate(four_rooms, four_rooms_theta, tol=1e-10).q
    assert np.max(np.abs(q - ref)) <= 1e-7
    oracle = augmented_value_iteration(four_rooms, four_rooms_theta, tol=1e-12)
    assert np.max(np.abs(q.reshape(-1) - oracle)) <= 1e-7


def test_smdp_single_one_step_option_is_flat(rng):
    m = random_mdp(6, 2, 0.9, rng)
    th = with_beta(Theta.random(6, 2, 1, rng), ALWAYS)
    q = smdp_evaluate(m, th, tol=1e-12)[:, 0]
    v = policy_evaluation(m, StationaryPolicy(th.pi()[0]), tol=1e-12)
    assert np.max(np.abs(q - v)) <= 1e-9


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6), st.integers(1, 3), st.integers(1, 3))
def test_three_evaluators_agree(seed, n_s, n_a, n_o):
    rng = np.random.default_rng(seed)
    m = random_mdp(n_s, n_a, 0.9, rng)
    th = Theta.random(n_s, n_a, n_o, rng, scale=2.0)
    q = intra_option_evaluate(m, th, tol=1e-10).q
    assert np.max(np.abs(smdp_evaluate(m, th, tol=1e-10) - q)) <= 1e-7
    assert np.max(np.abs(augmented_value_iteration(m, th).reshape(n_s, n_o) - q)) <= 1e-7


def test_option_index_checked(chain):
    with pytest.raises(IndexError):
        option_models(chain, go_option(), 1)


def test_shape_mismatch_rejected(chain, rng):
    with pytest.raises(ValidationError):
        intra_option_evaluate(chain, Theta.random(3, 2, 1, rng))


# --------------------------------------------------------------- execution


def test_never_terminate_no_switches(four_rooms, rng):
    th = with_beta(Theta.random(104, 4, 3, rng), NEVER)
    traj = execute(four_rooms, th, 0, rng, 300)
    assert not any(traj.switched)
    assert len(set(traj.options)) == 1


def test_always_terminate_switches_every_step(four_rooms, rng):
    th = with_beta(Theta.random(104, 4, 3, rng), ALWAYS)
    traj = execute(four_rooms, th, 0, rng, 300)
    assert len(traj) > 1
    assert traj.switched[0] is False or traj.switched[0] == 0  # the initial pick is not a switch
    assert all(traj.switched[1:])


def test_trajectory_json_round_trip(four_rooms, rng):
    th = Theta.random(104, 4, 2, rng)
    traj = execute(four_rooms, th, 5, rng, 50)
    from delibopt.options import Trajectory
    assert Trajectory.from_dict(traj.to_dict()) == traj
    assert traj.discounted_return(0.99) == pytest.approx(
        sum(r * 0.99**t for t, r in enumerate(traj.rewards)))


def test_execute_rejects_bad_horizon(chain, rng):
    with pytest.raises(ValueError):
        execute(chain, go_option(), 0, rng, 0)


def test_interruption_never_hurts(four_rooms):
    th = Theta.random(104, 4, 4, np.random.default_rng(3), epsilon_mu=0.1)
    starts = np.full(10_000, int(np.argmax(four_rooms.initial_dist)))
    base = simulate(four_rooms, th, starts, np.random.default_rng(1), 700)
    inter = simulate(four_rooms, th, starts, np.random.default_rng(2), 700, mode="interruption")
    sigma = np.sqrt(base.var(ddof=1) / len(base) + inter.var(ddof=1) / len(inter))
    assert inter.mean() >= base.mean() - 3 * sigma


def test_monte_carlo_return_matches_q(four_rooms):
    th = Theta.random(104, 4, 2, np.random.default_rng(4), scale=0.5)
    tables = intra_option_evaluate(four_rooms, th, tol=1e-10)
    s0 = int(np.argmax(four_rooms.initial_dist))
    rng = np.random.default_rng(5)
    g = simulate(four_rooms, th, np.full(10_000, s0), rng, 1000)
    se = g.std(ddof=1) / np.sqrt(len(g))
    assert abs(g.mean() - tables.v[s0]) <= 3 * se + four_rooms.gamma**1000


def test_theta_json_round_trip(tmp_path, rng):
    th = Theta.random(4, 3, 2, rng, epsilon_mu=0.3, mu_kind="softmax")
    th.save(tmp_path / "t.json")
    back = Theta.load(tmp_path / "t.json")
    for name in ("theta_pi", "theta_beta", "theta_mu"):
        np.testing.assert_array_equal(getattr(back, name), getattr(th, name))
    assert back.epsilon_mu == 0.3 and back.mu_kind == "softmax"


def test_theta_validation():
    with pytest.raises(ValidationError):
        Theta(np.zeros((2, 3, 2)), np.zeros((2, 4)), np.zeros((3, 2)))
    with pytest.raises(ValidationError):
        Theta(np.zeros((2, 3, 2)), np.zeros((2, 3)), np.zeros((3, 2)), epsilon_mu=1.5)


def test_policy_tables_are_distributions(rng):
    th = Theta.random(5, 3, 4, rng, scale=10.0)
    assert np.max(np.abs(th.pi().sum(axis=2) - 1)) <= 1e-12
    assert np.all((th.beta() > 0) & (th.beta() < 1))
    assert np.max(np.abs(th.mu().sum(axis=1) - 1)) <= 1e-12
