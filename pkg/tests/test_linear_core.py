import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scq import linear_core as lc


def tabular_spec(n_states, n_actions, rewards, transitions, discount):
    """One-hot features: phi(s,a) = e_{sa}, mu(s') = P(s'|., .) column, theta = r."""
    n = n_states * n_actions
    return lc.LinearMdpSpec(n_states, n_actions, n, np.eye(n), np.asarray(transitions).T,
                            np.asarray(rewards, dtype=float), discount)


def random_tabular(rng, n_states, n_actions, discount=0.9):
    n = n_states * n_actions
    transitions = rng.dirichlet(np.ones(n_states), size=n)
    return tabular_spec(n_states, n_actions, rng.uniform(-1, 1, n), transitions, discount)


def value_iteration_oracle(spec, policy, n_iter=10_000):
    P = spec.features @ spec.transition_measures.T
    r = spec.features @ spec.reward_weights
    S, A = spec.n_states, spec.n_actions
    q = [0.0] * (S * A)
    for _ in range(n_iter):
        v = [sum(policy[s][a] * q[s * A + a] for a in range(A)) for s in range(S)]
        q = [r[i] + spec.discount * sum(P[i][t] * v[t] for t in range(S)) for i in range(S * A)]
    return np.array(q)


def normal_equations_oracle(spec, dist, target, ridge):
    d = spec.feature_dim
    gram = [[0.0] * d for _ in range(d)]
    rhs = [0.0] * d
    for i in range(spec.n_pairs):
        w = dist.weights[i]
        for j in range(d):
            rhs[j] += w * spec.features[i, j] * target[i]
            for k in range(d):
                gram[j][k] += w * spec.features[i, j] * spec.features[i, k]
    for j in range(d):
        gram[j][j] += ridge
    return np.linalg.solve(np.array(gram), np.array(rhs))


@pytest.fixture
def instance7():
    rng = np.random.default_rng(7)
    spec = lc.random_spec(rng, 3, 2, 3)
    dist = lc.random_distribution(rng, 3, 2)
    policy = lc.random_policy(rng, 3, 2)
    return spec, dist, policy


class TestSpec:
    def test_rejects_bad_kernel(self):
        with pytest.raises(ValueError, match="sum to 1"):
            lc.LinearMdpSpec(1, 1, 1, [[1.0]], [[0.5]], [1.0], 0.9)

    def test_rejects_long_features(self):
        with pytest.raises(ValueError, match="norm"):
            lc.LinearMdpSpec(1, 1, 1, [[2.0]], [[0.5]], [1.0], 0.9)

    def test_json_round_trip(self, instance7):
        spec = instance7[0]
        back = lc.LinearMdpSpec.from_json(spec.to_json())
        np.testing.assert_array_equal(back.features, spec.features)
        np.testing.assert_array_equal(back.transition_measures, spec.transition_measures)
        assert set(json.loads(spec.to_json())) == {
            "n_states", "n_actions", "feature_dim", "features",
            "transition_measures", "reward_weights", "discount"}

    @given(st.integers(0, 10_000), st.integers(1, 5), st.integers(1, 4), st.floats(0.1, 1.0))
    @settings(max_examples=40, deadline=None)
    def test_generator_satisfies_invariants(self, seed, n_states, n_actions, frac):
        rng = np.random.default_rng(seed)
        d = max(1, int(frac * n_states * n_actions))
        spec = lc.random_spec(rng, n_states, n_actions, d)
        assert np.all(np.linalg.norm(spec.features, axis=1) <= 1 + 1e-12)
        P = spec.features @ spec.transition_measures.T
        assert P.min() >= -1e-10
        np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-8)


class TestTrueQ:
    def test_zero_discount_returns_reward(self, instance7):
        spec, _, policy = instance7
        spec0 = lc.LinearMdpSpec(**{**spec.__dict__, "discount": 0.0})
        np.testing.assert_array_equal(lc.true_q(spec0, policy), spec.rewards)

    def test_geometric_series(self):
        spec = lc.LinearMdpSpec(1, 1, 1, [[1.0]], [[1.0]], [1.0], 0.9)
        np.testing.assert_allclose(lc.true_q(spec, [[1.0]]), [10.0], rtol=0, atol=1e-12)

    def test_matches_value_iteration(self, instance7):
        spec, _, policy = instance7
        q = lc.true_q(spec, policy)
        np.testing.assert_allclose(q, value_iteration_oracle(spec, policy.tolist()), rtol=0, atol=1e-10)
        residual = q - lc.bellman_backup(spec, policy, q)
        assert np.max(np.abs(residual)) <= 1e-10

    def test_ill_conditioned(self, monkeypatch):
        spec = lc.LinearMdpSpec(1, 1, 1, [[1.0]], [[1.0]], [1.0], 0.9)
        monkeypatch.setattr(lc, "MAX_COND", 0.5)
        with pytest.raises(lc.IllConditionedError, match="ill-conditioned Bellman solve"):
            lc.true_q(spec, [[1.0]])


class TestProjection:
    def test_tabular_lstdq_is_exact_backup(self):
        rng = np.random.default_rng(0)
        spec = random_tabular(rng, 3, 2)
        dist = lc.random_distribution(rng, 3, 2)
        policy = lc.random_policy(rng, 3, 2)
        q_prev = rng.normal(size=6)
        w = lc.lstdq_update(spec, dist, policy, q_prev, ridge=0.0)
        np.testing.assert_allclose(spec.features @ w, lc.bellman_backup(spec, policy, q_prev),
                                   rtol=0, atol=1e-10)

    def test_tabular_fixed_point(self):
        rng = np.random.default_rng(1)
        spec = random_tabular(rng, 3, 2)
        dist = lc.random_distribution(rng, 3, 2)
        policy = lc.random_policy(rng, 3, 2)
        q = lc.true_q(spec, policy)
        np.testing.assert_allclose(spec.features @ lc.lstdq_update(spec, dist, policy, q, 0.0), q,
                                   rtol=0, atol=1e-10)

    def test_rank_deficient_matches_normal_equations(self):
        rng = np.random.default_rng(2)
        spec = lc.random_spec(rng, 3, 2, 2)
        dist = lc.random_distribution(rng, 3, 2)
        policy = lc.random_policy(rng, 3, 2)
        q_prev = rng.normal(size=6)
        w = lc.lstdq_update(spec, dist, policy, q_prev, ridge=1e-8)
        target = lc.bellman_backup(spec, policy, q_prev)
        np.testing.assert_allclose(w, normal_equations_oracle(spec, dist, target, 1e-8), atol=1e-6)

    def test_identity_features_project_to_self(self):
        rng = np.random.default_rng(3)
        spec = random_tabular(rng, 2, 3)
        dist = lc.random_distribution(rng, 2, 3)
        v = rng.normal(size=6)
        np.testing.assert_allclose(lc.projection_apply(spec, dist, v, 0.0), v, atol=1e-12)

    def test_range_is_fixed(self):
        rng = np.random.default_rng(4)
        spec = lc.random_spec(rng, 3, 3, 4)
        dist = lc.random_distribution(rng, 3, 3)
        v = spec.features @ rng.normal(size=4)
        np.testing.assert_allclose(lc.projection_apply(spec, dist, v, 0.0), v, atol=1e-9)

    def test_idempotent_seed3(self):
        rng = np.random.default_rng(3)
        spec = lc.random_spec(rng, 4, 3, 6)
        dist = lc.random_distribution(rng, 4, 3)
        v = rng.normal(size=12)
        once = lc.projection_apply(spec, dist, v)
        np.testing.assert_allclose(lc.projection_apply(spec, dist, once), once, atol=1e-8)

    @given(st.integers(0, 100_000), st.sampled_from([0.0, 1e-12]))
    @settings(max_examples=50, deadline=None)
    def test_idempotence_property(self, seed, ridge):
        rng = np.random.default_rng(seed)
        spec = lc.random_spec(rng, 4, 3, 5)
        dist = lc.random_distribution(rng, 4, 3)
        v = rng.normal(size=12)
        once = lc.projection_apply(spec, dist, v, ridge=ridge)
        np.testing.assert_allclose(lc.projection_apply(spec, dist, once, ridge=ridge), once, atol=1e-8)

    @given(st.integers(0, 100_000))
    @settings(max_examples=30, deadline=None)
    def test_ridge_bias_bounded_by_smallest_eigenvalue(self, seed):
        rng = np.random.default_rng(seed)
        spec = lc.random_spec(rng, 4, 3, 5)
        dist = lc.random_distribution(rng, 4, 3)
        v = rng.normal(size=12)
        gram = spec.features.T @ (dist.weights[:, None] * spec.features)
        lam = np.linalg.eigvalsh(gram)[0]
        once = lc.projection_apply(spec, dist, v, ridge=1e-10)
        err = np.max(np.abs(lc.projection_apply(spec, dist, once, ridge=1e-10) - once))
        assert err <= 1e-8 + 10 * 1e-10 / lam * np.max(np.abs(v))

    def test_singular_without_ridge(self):
        rng = np.random.default_rng(5)
        spec = random_tabular(rng, 2, 2)
        weights = np.array([0.5, 0.5, 0.0, 0.0])
        behavior = np.full((2, 2), 0.5)
        dist = lc.DatasetDistribution(weights, behavior)
        with pytest.raises(np.linalg.LinAlgError, match="ridge > 0"):
            lc.projection_apply(spec, dist, np.ones(4), ridge=0.0)

    def test_rejects_negative_ridge(self, instance7):
        spec, dist, _ = instance7
        with pytest.raises(ValueError):
            lc.projection_apply(spec, dist, np.ones(6), ridge=-1.0)


class TestOodPolicy:
    def test_all_false(self):
        pi = np.array([[0.3, 0.7], [0.5, 0.5]])
        np.testing.assert_array_equal(lc.ood_policy(pi, np.zeros((2, 2), bool)), np.zeros((2, 2)))

    def test_all_true(self):
        pi = np.array([[0.3, 0.7], [0.5, 0.5]])
        np.testing.assert_array_equal(lc.ood_policy(pi, np.ones((2, 2), bool)), pi)

    def test_mixed(self):
        pi = np.array([[0.3, 0.7], [0.5, 0.5]])
        mask = np.array([[True, False], [False, True]])
        np.testing.assert_array_equal(lc.ood_policy(pi, mask), [[0.3, 0.0], [0.0, 0.5]])


class TestUpdates:
    def setup_method(self):
        rng = np.random.default_rng(11)
        self.spec = lc.random_spec(rng, 4, 3, 6)
        self.dist = lc.random_distribution(rng, 4, 3)
        self.policy = lc.random_policy(rng, 4, 3)
        self.mask = rng.random((4, 3)) < 0.4
        self.q_prev = rng.normal(size=12)

    def test_scq_alpha_zero_is_lstdq(self):
        args = (self.spec, self.dist, self.policy)
        np.testing.assert_array_equal(
            lc.scq_update(*args, self.mask, self.q_prev, 0.0),
            lc.lstdq_update(*args, self.q_prev))

    def test_scq_empty_mask_is_lstdq(self):
        args = (self.spec, self.dist, self.policy)
        np.testing.assert_allclose(
            lc.scq_update(*args, np.zeros((4, 3), bool), self.q_prev, 3.0),
            lc.lstdq_update(*args, self.q_prev), atol=1e-12)

    def test_cql_alpha_zero_and_behavior_policy(self):
        args = (self.spec, self.dist)
        base = lc.lstdq_update(*args, self.policy, self.q_prev)
        np.testing.assert_array_equal(lc.cql_update(*args, self.policy, self.q_prev, 0.0), base)
        pi_b = self.dist.behavior_policy
        np.testing.assert_allclose(
            lc.cql_update(*args, pi_b, self.q_prev, 2.0),
            lc.lstdq_update(*args, pi_b, self.q_prev), atol=1e-12)

    def test_scq_matches_closed_form(self):
        Phi = self.spec.features
        D = np.diag(self.dist.weights)
        proj = Phi @ np.linalg.solve(Phi.T @ D @ Phi + 1e-10 * np.eye(6), Phi.T @ D)
        target = lc.bellman_backup(self.spec, self.policy, self.q_prev)
        ratio = (self.policy * self.mask / self.dist.behavior_policy).ravel()
        expected = proj @ target - 0.7 * proj @ ratio
        got = Phi @ lc.scq_update(self.spec, self.dist, self.policy, self.mask, self.q_prev, 0.7)
        np.testing.assert_allclose(got, expected, atol=1e-9)

    def test_cql_is_more_pessimistic_than_lstdq_in_state_value(self):
        # f >= 0 per state holds in the tabular case (chi-square-like divergence)
        rng = np.random.default_rng(8)
        spec = random_tabular(rng, 4, 3)
        dist = lc.random_distribution(rng, 4, 3)
        policy = lc.random_policy(rng, 4, 3)
        q_prev = rng.normal(size=12)
        v_cql = lc.state_values(policy, spec.features @ lc.cql_update(spec, dist, policy, q_prev, 1.0))
        v_lstd = lc.state_values(policy, spec.features @ lc.lstdq_update(spec, dist, policy, q_prev))
        f, _, _ = lc.compute_f_terms(spec, dist, policy, np.zeros((4, 3), bool))
        assert np.all(f >= 0)
        assert np.all(v_cql <= v_lstd + 1e-12)
        np.testing.assert_allclose(v_lstd - v_cql, f, atol=1e-9)

    def test_penalty_without_behavior_support(self):
        behavior = np.array([[1.0, 0.0], [0.5, 0.5]])
        dist = lc.DatasetDistribution.from_visitation([0.5, 0.5], behavior)
        spec = random_tabular(np.random.default_rng(0), 2, 2)
        policy = np.full((2, 2), 0.5)
        mask = np.array([[False, True], [False, False]])
        with pytest.raises(ValueError, match="OOD penalty requires behavior support"):
            lc.scq_update(spec, dist, policy, mask, np.zeros(4), 1.0)

    def test_unvisited_unsupported_pair_warns(self):
        behavior = np.array([[0.5, 0.5], [1.0, 0.0]])
        dist = lc.DatasetDistribution.from_visitation([1.0, 0.0], behavior)
        spec = random_tabular(np.random.default_rng(0), 2, 2)
        mask = np.array([[False, False], [False, True]])
        with pytest.warns(RuntimeWarning):
            lc.behavior_ratio(dist, lc.ood_policy(np.full((2, 2), 0.5), mask))

    @given(st.integers(0, 100_000), st.floats(0.0, 5.0), st.floats(0.0, 5.0))
    @settings(max_examples=40, deadline=None)
    def test_monotone_in_alpha(self, seed, a1, a2):
        a1, a2 = sorted((a1, a2))
        inst = lc.theorem1_instance(seed)
        pi = inst.policies[0]
        direction = lc.penalty_direction(inst.spec, inst.dist, lc.ood_policy(pi, inst.mask))
        q1 = inst.spec.features @ lc.scq_update(inst.spec, inst.dist, pi, inst.mask, inst.q_init, a1)
        q2 = inst.spec.features @ lc.scq_update(inst.spec, inst.dist, pi, inst.mask, inst.q_init, a2)
        pos = direction > 0
        assert np.all(q1[pos] >= q2[pos] - 1e-9)


class TestFTerms:
    def test_behavior_policy_empty_mask(self, instance7):
        spec, dist, _ = instance7
        f, f_ood, f_idd = lc.compute_f_terms(spec, dist, dist.behavior_policy, np.zeros((3, 2), bool))
        for term in (f, f_ood, f_idd):
            np.testing.assert_allclose(term, 0.0, atol=1e-12)

    @given(st.integers(0, 100_000))
    @settings(max_examples=60, deadline=None)
    def test_decomposition_identity(self, seed):
        rng = np.random.default_rng(seed)
        spec = lc.random_spec(rng, 4, 3, 6)
        dist = lc.random_distribution(rng, 4, 3)
        policy = lc.random_policy(rng, 4, 3)
        mask = rng.random((4, 3)) < 0.5
        f, f_ood, f_idd = lc.compute_f_terms(spec, dist, policy, mask)
        np.testing.assert_allclose(f - (f_idd + f_ood), 0.0, atol=1e-10)

    def test_f_ood_positive_where_ood_mass(self):
        inst = lc.theorem2_instance(5)
        pi = inst.policies[0]
        _, f_ood, _ = lc.compute_f_terms(inst.spec, inst.dist, pi, inst.mask)
        has_mass = lc.ood_policy(pi, inst.mask).sum(axis=1) > 0
        assert has_mass.all()
        assert np.all(f_ood[has_mass] > 0)

    @given(st.integers(0, 100_000))
    @settings(max_examples=40, deadline=None)
    def test_nonnegative_for_greedy_policies(self, seed):
        inst = lc.theorem2_instance(seed)
        f, _, _ = lc.compute_f_terms(inst.spec, inst.dist, inst.policies[0], inst.mask)
        assert np.all(f >= -1e-10)


class TestAlphaMin:
    def test_zero_when_lstdq_pessimistic(self):
        inst = lc.theorem1_instance(9)
        pi = inst.policies[0]
        q_low = lc.true_q(inst.spec, pi) - 100.0
        lstd = inst.spec.features @ lc.lstdq_update(inst.spec, inst.dist, pi, q_low)
        assert np.all(lstd <= lc.true_q(inst.spec, pi))
        assert lc.alpha_min_pointwise(inst.spec, inst.dist, pi, inst.mask, q_low) == 0.0

    def test_zero_for_tabular_features(self):
        rng = np.random.default_rng(10)
        spec = random_tabular(rng, 3, 2)
        dist = lc.random_distribution(rng, 3, 2)
        policy = lc.random_policy(rng, 3, 2)
        q = lc.true_q(spec, policy)
        assert lc.alpha_min_pointwise(spec, dist, policy, np.ones((3, 2), bool), q) == 0.0

    def test_returned_alpha_gives_pointwise_pessimism(self):
        for seed in range(20):
            inst = lc.theorem1_instance(seed, n_states=4, n_actions=3)
            pi = inst.policies[0]
            alpha = lc.alpha_min_pointwise(inst.spec, inst.dist, pi, inst.mask, inst.q_init)
            q_hat = inst.spec.features @ lc.scq_update(
                inst.spec, inst.dist, pi, inst.mask, inst.q_init, alpha)
            q_true = lc.true_q(inst.spec, pi)
            masked = inst.mask.ravel()
            for i in np.flatnonzero(masked):
                assert q_hat[i] <= q_true[i] + 1e-8

    def test_vanishing_direction_raises(self):
        # seed 0 of the generic family has a nonpositive penalty direction at a masked pair
        for seed in range(50):
            inst = lc.theorem1_instance(seed, separable=False)
            pi = inst.policies[0]
            direction = lc.penalty_direction(inst.spec, inst.dist, lc.ood_policy(pi, inst.mask))
            if inst.mask.any() and np.any(direction[inst.mask.ravel()] <= 0):
                with pytest.raises(lc.PreconditionError, match="penalty direction vanishes"):
                    lc.alpha_min_pointwise(inst.spec, inst.dist, pi, inst.mask, inst.q_init)
                return
        pytest.fail("no generic instance with a vanishing direction in 50 seeds")


class TestTheorem1:
    def test_identity_features(self):
        rng = np.random.default_rng(12)
        spec = random_tabular(rng, 3, 2)
        dist = lc.random_distribution(rng, 3, 2)
        policy = lc.random_policy(rng, 3, 2)
        mask = np.array([[True, False], [False, False], [False, True]])
        rep = lc.verify_theorem1(spec, dist, [policy], mask, 3, ridge=0.0)
        assert rep.epsilon_bound <= 1e-10
        np.testing.assert_allclose(rep.per_pair_gaps.ravel()[~mask.ravel()], 0.0, atol=1e-9)
        assert rep.passed

    def test_empty_mask(self):
        inst = lc.theorem1_instance(3)
        rep = lc.verify_theorem1(inst.spec, inst.dist, inst.policies, np.zeros((4, 3), bool), 5,
                                 q_init=inst.q_init)
        assert rep.passed
        assert rep.alpha_used == 0.0

    def test_ten_seeded_instances(self):
        for seed in range(10):
            inst = lc.theorem1_instance(seed, k_iters=5)
            rep = lc.verify_theorem1(inst.spec, inst.dist, inst.policies, inst.mask, 5, q_init=inst.q_init)
            assert rep.passed, (seed, rep.max_violation)
            masked = inst.mask.ravel()
            if masked.any():
                assert rep.per_pair_gaps.ravel()[masked].max() <= 1e-8

    def test_zero_iterations(self):
        inst = lc.theorem1_instance(0)
        with pytest.raises(ValueError, match="at least one iteration"):
            lc.verify_theorem1(inst.spec, inst.dist, inst.policies, inst.mask, 0)

    def test_generic_features_leak_penalty(self):
        """Without OOD-separable features the unmasked bound can break; the verifier must say so."""
        failures = 0
        for seed in range(40):
            inst = lc.theorem1_instance(seed, separable=False)
            try:
                rep = lc.verify_theorem1(inst.spec, inst.dist, inst.policies, inst.mask, 5,
                                         q_init=inst.q_init)
            except lc.PreconditionError:
                continue
            failures += not rep.passed
        assert failures > 0

    def test_report_serializes(self):
        inst = lc.theorem1_instance(1)
        rep = lc.verify_theorem1(inst.spec, inst.dist, inst.policies, inst.mask, 2, q_init=inst.q_init)
        data = json.loads(rep.to_json())
        assert {"iterations", "max_violation", "per_pair_gaps", "alpha_used",
                "epsilon_bound", "passed"} <= set(data)


class TestTheorem2:
    def test_alpha_zero_equal_values(self):
        inst = lc.theorem2_instance(2)
        pi = inst.policies[0]
        q_true = lc.true_q(inst.spec, pi)
        rep = lc.verify_theorem2(inst.spec, inst.dist, pi, inst.mask, 0.0, q_init=q_true)
        np.testing.assert_allclose(rep.per_pair_gaps[:, 0], 0.0, atol=1e-12)
        assert rep.passed

    def test_mask_all_true(self):
        rng = np.random.default_rng(4)
        spec = random_tabular(rng, 3, 2)
        dist = lc.random_distribution(rng, 3, 2)
        policy = lc.random_policy(rng, 3, 2)
        q_init = lc.true_q(spec, lc.random_policy(rng, 3, 2))
        rep = lc.verify_theorem2(spec, dist, policy, np.ones((3, 2), bool), None, q_init=q_init)
        assert 0 < rep.details["tau"] <= 1
        assert rep.passed

    def test_ten_seeded_instances(self):
        for seed in range(10):
            inst = lc.theorem2_instance(seed)
            rep = lc.verify_theorem2(inst.spec, inst.dist, inst.policies[0], inst.mask, None,
                                     q_init=inst.q_init)
            assert rep.passed, (seed, rep.max_violation)

    def test_precondition(self):
        inst = lc.theorem2_instance(0)
        with pytest.raises(lc.PreconditionError, match="Theorem 2 precondition violated"):
            lc.verify_theorem2(inst.spec, inst.dist, inst.policies[0], np.zeros((4, 3), bool), 1.0)

    def test_tau_bounds(self):
        assert lc.theorem2_tau([-1.0, 2.0], [1.0, 1.0]) == lc.TAU_FLOOR
        assert lc.theorem2_tau([5.0], [1.0]) == 1.0
        assert lc.theorem2_tau([0.5], [1.0]) == 0.5
