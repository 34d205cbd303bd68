"""Exact finite-support linear-MDP machinery.

Everything here works on explicit matrices indexed by state-action pairs
``i = s * n_actions + a``.  The module solves for true Q-functions, applies the
D-weighted feature projection, performs closed-form LSTD-Q / CQL / SCQ updates,
and checks the resulting pessimism guarantees exhaustively.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

PROB_ATOL = 1e-10
KERNEL_NEG_TOL = 1e-10
KERNEL_SUM_TOL = 1e-8
INEQ_SLACK = 1e-8
MAX_COND = 1e12
DEFAULT_RIDGE = 1e-10
TAU_FLOOR = 1e-12


class IllConditionedError(np.linalg.LinAlgError):
    pass


class PreconditionError(ValueError):
    """An input violates a stated precondition of a verification routine."""


@dataclass
class LinearMdpSpec:
    n_states: int
    n_actions: int
    feature_dim: int
    features: np.ndarray
    transition_measures: np.ndarray
    reward_weights: np.ndarray
    discount: float

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float).reshape(
            self.n_states * self.n_actions, self.feature_dim
        )
        self.transition_measures = np.asarray(self.transition_measures, dtype=float).reshape(
            self.n_states, self.feature_dim
        )
        self.reward_weights = np.asarray(self.reward_weights, dtype=float).reshape(self.feature_dim)
        if min(self.n_states, self.n_actions, self.feature_dim) < 1:
            raise ValueError("n_states, n_actions and feature_dim must be positive")
        if not 0.0 <= self.discount < 1.0:
            raise ValueError(f"discount must lie in [0, 1), got {self.discount}")
        norms = np.linalg.norm(self.features, axis=1)
        if np.any(norms > 1.0 + 1e-12):
            raise ValueError(f"feature rows must have norm <= 1 (max {norms.max():.6g})")
        raw = self.features @ self.transition_measures.T
        if raw.min() < -KERNEL_NEG_TOL:
            raise ValueError(f"induced transition kernel has negative entry {raw.min():.3g}")
        sums = raw.sum(axis=1)
        if np.max(np.abs(sums - 1.0)) > KERNEL_SUM_TOL:
            raise ValueError("induced transition rows must sum to 1")

    @property
    def n_pairs(self) -> int:
        return self.n_states * self.n_actions

    @property
    def transitions(self) -> np.ndarray:
        """P[i, s'] for pair i, with round-off negatives clamped to zero."""
        return np.clip(self.features @ self.transition_measures.T, 0.0, None)

    @property
    def rewards(self) -> np.ndarray:
        return self.features @ self.reward_weights

    def to_dict(self) -> dict:
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "feature_dim": self.feature_dim,
            "features": self.features.ravel().tolist(),
            "transition_measures": self.transition_measures.ravel().tolist(),
            "reward_weights": self.reward_weights.tolist(),
            "discount": self.discount,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LinearMdpSpec":
        return cls(**{k: data[k] for k in (
            "n_states", "n_actions", "feature_dim", "features",
            "transition_measures", "reward_weights", "discount")})

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "LinearMdpSpec":
        return cls.from_dict(json.loads(text))


@dataclass
class DatasetDistribution:
    """Sampling weights ``d(s) * pi_beta(a|s)`` and the behavior policy."""

    weights: np.ndarray
    behavior_policy: np.ndarray

    def __post_init__(self):
        self.behavior_policy = _check_policy(self.behavior_policy, "behavior_policy")
        self.weights = np.asarray(self.weights, dtype=float).ravel()
        if self.weights.size != self.behavior_policy.size:
            raise ValueError("weights must have one entry per state-action pair")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > PROB_ATOL:
            raise ValueError("weights must be nonnegative and sum to 1")
        if np.any((self.weights > 0) & (self.behavior_policy.ravel() <= 0)):
            raise ValueError("behavior policy must be positive wherever weight is positive")

    @property
    def state_visitation(self) -> np.ndarray:
        return self.weights.reshape(self.behavior_policy.shape).sum(axis=1)

    @classmethod
    def from_visitation(cls, visitation, behavior_policy) -> "DatasetDistribution":
        visitation = np.asarray(visitation, dtype=float)
        behavior_policy = np.asarray(behavior_policy, dtype=float)
        return cls((visitation[:, None] * behavior_policy).ravel(), behavior_policy)


@dataclass
class VerificationReport:
    iterations: int
    max_violation: float
    per_pair_gaps: np.ndarray
    alpha_used: float
    epsilon_bound: float
    passed: bool
    tolerance: float = INEQ_SLACK
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["per_pair_gaps"] = np.asarray(self.per_pair_gaps).tolist()
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _check_policy(policy, name="policy") -> np.ndarray:
    policy = np.asarray(policy, dtype=float)
    if policy.ndim != 2:
        raise ValueError(f"{name} must be a (n_states, n_actions) matrix")
    if np.any(policy < 0) or np.any(policy > 1):
        raise ValueError(f"{name} entries must lie in [0, 1]")
    if np.max(np.abs(policy.sum(axis=1) - 1.0)) > PROB_ATOL:
        raise ValueError(f"rows of {name} must sum to 1")
    return policy


def _check_shapes(spec: LinearMdpSpec, *mats):
    for m in mats:
        if m is not None and np.shape(m) != (spec.n_states, spec.n_actions):
            raise ValueError(
                f"expected shape {(spec.n_states, spec.n_actions)}, got {np.shape(m)}")


def policy_operator(policy: np.ndarray) -> np.ndarray:
    """Matrix Pi with (Pi q)(s) = sum_a pi(a|s) q(s, a)."""
    n_states, n_actions = policy.shape
    pi_mat = np.zeros((n_states, n_states * n_actions))
    for s in range(n_states):
        pi_mat[s, s * n_actions:(s + 1) * n_actions] = policy[s]
    return pi_mat


def bellman_backup(spec: LinearMdpSpec, policy, q) -> np.ndarray:
    policy = _check_policy(policy)
    _check_shapes(spec, policy)
    v_next = (policy * np.asarray(q, dtype=float).reshape(policy.shape)).sum(axis=1)
    return spec.rewards + spec.discount * spec.transitions @ v_next


def state_values(policy, q) -> np.ndarray:
    policy = np.asarray(policy, dtype=float)
    return (policy * np.asarray(q, dtype=float).reshape(policy.shape)).sum(axis=1)


def true_q(spec: LinearMdpSpec, policy) -> np.ndarray:
    """Exact Q^pi as the solution of (I - gamma P Pi) Q = r."""
    policy = _check_policy(policy)
    _check_shapes(spec, policy)
    system = np.eye(spec.n_pairs) - spec.discount * spec.transitions @ policy_operator(policy)
    if np.linalg.cond(system) > MAX_COND:
        raise IllConditionedError("ill-conditioned Bellman solve")
    q = np.linalg.solve(system, spec.rewards)
    # one refinement step keeps the residual at round-off level
    q += np.linalg.solve(system, spec.rewards - system @ q)
    return q


def _normal_matrix(spec: LinearMdpSpec, dist: DatasetDistribution, ridge: float) -> np.ndarray:
    if ridge < 0:
        raise ValueError("ridge must be nonnegative")
    phi = spec.features
    gram = phi.T @ (dist.weights[:, None] * phi) + ridge * np.eye(spec.feature_dim)
    if np.linalg.cond(gram) > MAX_COND:
        if ridge == 0:
            raise IllConditionedError(
                "normal matrix Phi^T D Phi is not invertible; use ridge > 0")
        raise IllConditionedError("ill-conditioned normal matrix even with ridge")
    return gram


def _weights_for_target(spec, dist, target, ridge) -> np.ndarray:
    gram = _normal_matrix(spec, dist, ridge)
    rhs = spec.features.T @ (dist.weights * np.asarray(target, dtype=float).ravel())
    return np.linalg.solve(gram, rhs)


def projection_apply(spec: LinearMdpSpec, dist: DatasetDistribution, v, ridge: float = DEFAULT_RIDGE) -> np.ndarray:
    """D-weighted least-squares projection of ``v`` onto span(Phi)."""
    return spec.features @ _weights_for_target(spec, dist, v, ridge)


def lstdq_update(spec: LinearMdpSpec, dist: DatasetDistribution, policy, q_prev,
                 ridge: float = DEFAULT_RIDGE) -> np.ndarray:
    """Weights of the projected Bellman backup P_Phi B^pi q_prev."""
    return _weights_for_target(spec, dist, bellman_backup(spec, policy, q_prev), ridge)


def ood_policy(policy, mask) -> np.ndarray:
    """Policy mass restricted to OOD actions, deliberately left unnormalized."""
    policy = np.asarray(policy, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if policy.shape != mask.shape:
        raise ValueError("policy and mask shapes differ")
    return policy * mask


def behavior_ratio(dist: DatasetDistribution, numerator) -> np.ndarray:
    """Entrywise ``numerator / pi_beta`` over supported pairs.

    A nonzero numerator on a pair the behavior policy never takes is only
    tolerated when its state is unvisited (the pair then carries zero weight
    in every projection); anywhere else it is an error.
    """
    numerator = np.asarray(numerator, dtype=float)
    pi_b = dist.behavior_policy
    supported = pi_b > 0
    ratio = np.zeros_like(numerator)
    np.divide(numerator, pi_b, out=ratio, where=supported)
    bad = (~supported) & (np.abs(numerator) > 0)
    if np.any(bad):
        visited = dist.state_visitation > 0
        if np.any(bad & visited[:, None]):
            raise ValueError("OOD penalty requires behavior support")
        warnings.warn("penalty mass on unvisited, unsupported pairs treated as zero",
                      RuntimeWarning, stacklevel=2)
    return ratio.ravel()


def penalty_direction(spec, dist, numerator, ridge=DEFAULT_RIDGE) -> np.ndarray:
    """P_Phi applied to ``numerator / pi_beta``: how a unit of penalty moves each Q(s, a)."""
    return projection_apply(spec, dist, behavior_ratio(dist, numerator), ridge)


def scq_update(spec, dist, policy, mask, q_prev, alpha: float, ridge: float = DEFAULT_RIDGE) -> np.ndarray:
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    w = lstdq_update(spec, dist, policy, q_prev, ridge)
    if alpha == 0:
        return w
    ratio = behavior_ratio(dist, ood_policy(policy, mask))
    return w - alpha * _weights_for_target(spec, dist, ratio, ridge)


def cql_update(spec, dist, policy, q_prev, alpha: float, ridge: float = DEFAULT_RIDGE) -> np.ndarray:
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    policy = _check_policy(policy)
    w = lstdq_update(spec, dist, policy, q_prev, ridge)
    if alpha == 0:
        return w
    ratio = behavior_ratio(dist, policy - dist.behavior_policy)
    return w - alpha * _weights_for_target(spec, dist, ratio, ridge)


def compute_f_terms(spec, dist, policy, mask, ridge: float = DEFAULT_RIDGE):
    """Per-state penalty inner products ``(f, f_ood, f_idd)``."""
    policy = _check_policy(policy)
    mask = np.asarray(mask, dtype=bool)
    _check_shapes(spec, policy, mask)
    pi_ood = ood_policy(policy, mask)
    pi_idd = policy - pi_ood
    pi_b = dist.behavior_policy

    def term(numerator):
        return state_values(policy, penalty_direction(spec, dist, numerator, ridge))

    return term(policy - pi_b), term(pi_ood), term(pi_idd - pi_b)


def alpha_min_pointwise(spec, dist, policy, mask, q_prev, ridge: float = DEFAULT_RIDGE,
                        q_true=None) -> float:
    """Smallest alpha making the SCQ update pessimistic on every masked pair."""
    policy = _check_policy(policy)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return 0.0
    if q_true is None:
        q_true = true_q(spec, policy)
    lstd = spec.features @ lstdq_update(spec, dist, policy, q_prev, ridge)
    direction = penalty_direction(spec, dist, ood_policy(policy, mask), ridge)
    masked = mask.ravel()
    denom = direction[masked]
    if np.any(denom <= 0):
        raise PreconditionError("penalty direction vanishes at OOD pair")
    excess = lstd[masked] - q_true[masked]
    return float(max(np.max(excess / denom), 0.0))


def alpha_min_state_value(spec, dist, policy, q_prev, per_state_penalty, ridge=DEFAULT_RIDGE,
                          v_true=None) -> float:
    """Smallest alpha with V_lstd(s) - alpha * penalty(s) <= V_true(s) at every state.

    ``per_state_penalty`` is f (CQL) or f_ood (SCQ).
    """
    policy = _check_policy(policy)
    if v_true is None:
        v_true = state_values(policy, true_q(spec, policy))
    v_lstd = state_values(policy, spec.features @ lstdq_update(spec, dist, policy, q_prev, ridge))
    excess = v_lstd - v_true
    need = excess > 0
    if np.any(need & (per_state_penalty <= 0)):
        raise PreconditionError("state-value penalty is nonpositive where LSTD-Q overestimates")
    if not need.any():
        return 0.0
    return float(max(np.max(excess[need] / per_state_penalty[need]), 0.0))


def verify_theorem1(spec, dist, policy_sequence: Sequence[np.ndarray], mask, k_iters: int,
                    ridge: float = DEFAULT_RIDGE, q_init=None) -> VerificationReport:
    """Run ``k_iters`` SCQ iterations with the minimal pointwise-pessimistic alpha.

    Iteration ``j`` evaluates ``policy_sequence[j % len]``; the iterate starts
    from ``q_init`` (default: the true Q of the first policy).  The reported
    epsilon is the largest LSTD-Q interpolation error on unmasked pairs.
    """
    if k_iters < 1:
        raise ValueError("at least one iteration")
    policies = [_check_policy(p) for p in policy_sequence]
    if not policies:
        raise ValueError("policy_sequence must be nonempty")
    mask = np.asarray(mask, dtype=bool)
    _check_shapes(spec, policies[0], mask)
    masked = mask.ravel()
    q_hat = true_q(spec, policies[0]) if q_init is None else np.asarray(q_init, dtype=float)

    worst = -np.inf
    eps_max = 0.0
    alphas = []
    gaps = None
    history = []
    for j in range(k_iters):
        pi = policies[j % len(policies)]
        q_true = true_q(spec, pi)
        lstd = spec.features @ lstdq_update(spec, dist, pi, q_hat, ridge)
        alpha = alpha_min_pointwise(spec, dist, pi, mask, q_hat, ridge, q_true=q_true)
        q_hat = spec.features @ scq_update(spec, dist, pi, mask, q_hat, alpha, ridge)
        eps = float(np.max(np.abs(lstd - q_true)[~masked])) if (~masked).any() else 0.0
        gaps = q_hat - q_true
        allowed = np.where(masked, 0.0, eps)
        violation = float(np.max(gaps - allowed))
        worst = max(worst, violation)
        eps_max = max(eps_max, eps)
        alphas.append(alpha)
        history.append({"alpha": alpha, "epsilon": eps, "violation": violation,
                        "masked_max_gap": float(gaps[masked].max()) if masked.any() else None})
    return VerificationReport(
        iterations=k_iters,
        max_violation=worst,
        per_pair_gaps=gaps.reshape(mask.shape),
        alpha_used=float(alphas[-1]),
        epsilon_bound=eps_max,
        passed=bool(worst <= INEQ_SLACK),
        details={"history": history},
    )


def theorem2_tau(f, f_ood) -> float:
    """Largest tau in (0, 1] with f >= tau * f_ood at every state (floored)."""
    f = np.asarray(f, dtype=float)
    f_ood = np.asarray(f_ood, dtype=float)
    if np.any(f_ood <= 0):
        raise PreconditionError("Theorem 2 precondition violated: f_ood <= 0 at some state")
    return float(np.clip(min(1.0, float(np.min(f / f_ood))), TAU_FLOOR, 1.0))


def alpha_cql_for_theorem2(spec, dist, policy, mask, q_prev, ridge: float = DEFAULT_RIDGE) -> dict:
    """Minimal CQL weights under the plain and the strengthened lower-bound conditions.

    ``plain`` makes the CQL state values pessimistic.  ``required`` additionally
    makes ``tau * alpha_cql`` large enough for SCQ's state values to stay below
    the true ones; the comparison in :func:`verify_theorem2` is guaranteed
    only from ``required`` upwards.
    """
    policy = _check_policy(policy)
    f, f_ood, _ = compute_f_terms(spec, dist, policy, mask, ridge)
    tau = theorem2_tau(f, f_ood)
    v_true = state_values(policy, true_q(spec, policy))
    plain = alpha_min_state_value(spec, dist, policy, q_prev, f, ridge, v_true=v_true)
    scq_need = alpha_min_state_value(spec, dist, policy, q_prev, f_ood, ridge, v_true=v_true)
    return {"plain": plain, "required": max(plain, scq_need / tau), "tau": tau}


def verify_theorem2(spec, dist, policy, mask, alpha_cql=None, k_iters: int = 1,
                    ridge: float = DEFAULT_RIDGE, q_init=None) -> VerificationReport:
    """Check ``V_cql <= V_scq <= V_true`` for one CQL and one SCQ update per iteration.

    ``alpha_scq = tau * alpha_cql`` with ``tau = min(1, min_s f / f_ood)``.
    Each iteration starts from the current SCQ iterate (initially ``q_init``,
    default the true Q of ``policy``).  ``alpha_cql=None`` picks the minimal
    value meeting the strengthened precondition afresh at every iteration.
    """
    if k_iters < 1:
        raise ValueError("at least one iteration")
    if alpha_cql is not None and alpha_cql < 0:
        raise ValueError("alpha_cql must be nonnegative")
    policy = _check_policy(policy)
    mask = np.asarray(mask, dtype=bool)
    _check_shapes(spec, policy, mask)
    if np.any(ood_policy(policy, mask).sum(axis=1) <= 0):
        raise PreconditionError("Theorem 2 precondition violated: empty OOD policy at some state")
    f, f_ood, f_idd = compute_f_terms(spec, dist, policy, mask, ridge)
    tau = theorem2_tau(f, f_ood)

    q_true = true_q(spec, policy)
    v_true = state_values(policy, q_true)
    q_hat = q_true.copy() if q_init is None else np.asarray(q_init, dtype=float)
    worst = -np.inf
    gaps = None
    history = []
    for _ in range(k_iters):
        need = alpha_cql_for_theorem2(spec, dist, policy, mask, q_hat, ridge)
        a_cql = need["required"] if alpha_cql is None else float(alpha_cql)
        a_scq = tau * a_cql
        q_cql = spec.features @ cql_update(spec, dist, policy, q_hat, a_cql, ridge)
        q_scq = spec.features @ scq_update(spec, dist, policy, mask, q_hat, a_scq, ridge)
        lower = state_values(policy, q_cql) - state_values(policy, q_scq)
        upper = state_values(policy, q_scq) - v_true
        violation = float(max(lower.max(), upper.max()))
        worst = max(worst, violation)
        gaps = np.stack([lower, upper], axis=1)
        entry = {"alpha_cql": a_cql, "alpha_scq": a_scq,
                 "lower_gap": float(lower.max()), "upper_gap": float(upper.max())}
        entry["alpha_cql_plain"] = need["plain"]
        entry["alpha_cql_required"] = need["required"]
        history.append(entry)
        q_hat = q_scq
    return VerificationReport(
        iterations=k_iters,
        max_violation=worst,
        per_pair_gaps=gaps,
        alpha_used=history[-1]["alpha_scq"],
        epsilon_bound=0.0,
        passed=bool(worst <= INEQ_SLACK),
        details={"tau": tau, "f": f.tolist(), "f_ood": f_ood.tolist(),
                 "f_idd": f_idd.tolist(), "history": history},
    )


def random_spec(rng: np.random.Generator, n_states: int, n_actions: int, feature_dim: int,
                discount: float = 0.9, ood_mask=None, signed_fraction: float = 0.5) -> LinearMdpSpec:
    """Random linear MDP whose induced kernel is valid by construction.

    Features combine a simplex block, paired with measures that are
    distributions over next states, and a signed block paired with zero-sum
    measures scaled so that no transition probability goes negative.  Rows stay
    inside the unit ball.

    With ``ood_mask`` the feature map is OOD-separable: every masked pair owns a
    one-hot coordinate and the unmasked pairs share the remaining
    ``feature_dim - n_masked`` coordinates.
    """
    n_pairs = n_states * n_actions
    if ood_mask is None:
        features, measures = _shared_block(rng, n_pairs, n_states, feature_dim, signed_fraction)
    else:
        masked = np.asarray(ood_mask, dtype=bool).ravel()
        n_masked = int(masked.sum())
        n_shared = feature_dim - n_masked
        if n_masked and n_shared < 1 and (~masked).any():
            raise ValueError("feature_dim must exceed the number of masked pairs")
        features = np.zeros((n_pairs, feature_dim))
        measures = np.zeros((n_states, feature_dim))
        if (~masked).any():
            f_in, m_in = _shared_block(rng, int((~masked).sum()), n_states, n_shared, signed_fraction)
            features[np.ix_(~masked, np.arange(n_shared))] = f_in
            measures[:, :n_shared] = m_in
        features[np.flatnonzero(masked), n_shared + np.arange(n_masked)] = 1.0
        measures[:, n_shared:] = rng.dirichlet(np.ones(n_states), size=n_masked).T
    theta = rng.uniform(-1.0, 1.0, size=feature_dim)
    return LinearMdpSpec(n_states, n_actions, feature_dim, features, measures, theta, discount)


def _shared_block(rng, n_rows, n_states, dim, signed_fraction):
    n_signed = int(round(signed_fraction * dim)) if dim > 1 else 0
    n_simplex = dim - n_signed
    simplex = rng.dirichlet(np.full(n_simplex, 0.5), size=n_rows)
    mu_simplex = rng.dirichlet(np.ones(n_states), size=n_simplex)
    if not n_signed:
        return simplex, mu_simplex.T
    signed = rng.normal(size=(n_rows, n_signed))
    signed /= np.linalg.norm(signed, axis=1, keepdims=True)
    room = np.sqrt(np.clip(1.0 - np.sum(simplex ** 2, axis=1), 0.0, None))
    signed *= (room * rng.uniform(0.2, 1.0, size=n_rows))[:, None]
    mu_signed = rng.normal(size=(n_signed, n_states))
    mu_signed -= mu_signed.mean(axis=1, keepdims=True)
    base = simplex @ mu_simplex
    pert = signed @ mu_signed
    neg = pert < 0
    if np.any(neg):
        mu_signed *= min(1.0, 0.9 * float(np.min(base[neg] / -pert[neg])))
    return np.hstack([simplex, signed]), np.vstack([mu_simplex, mu_signed]).T


def random_policy(rng: np.random.Generator, n_states: int, n_actions: int,
                  temperature: float = 1.0) -> np.ndarray:
    logits = rng.normal(size=(n_states, n_actions)) / temperature
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    return p / p.sum(axis=1, keepdims=True)


def random_distribution(rng: np.random.Generator, n_states: int, n_actions: int) -> DatasetDistribution:
    visitation = rng.dirichlet(np.ones(n_states))
    behavior = random_policy(rng, n_states, n_actions)
    return DatasetDistribution.from_visitation(visitation, behavior)


@dataclass
class VerificationInstance:
    spec: LinearMdpSpec
    dist: DatasetDistribution
    mask: np.ndarray
    policies: list
    q_init: np.ndarray


def _feature_dim(n_pairs: int, d_fraction: float) -> int:
    return max(2, int(round(d_fraction * n_pairs)))


def theorem1_instance(seed: int, n_states: int = 4, n_actions: int = 3, d_fraction: float = 0.5,
                      k_iters: int = 5, separable: bool = True, discount: float = 0.9) -> VerificationInstance:
    """Seeded instance for the pointwise-pessimism check.

    Policies are stochastic, so every masked pair carries OOD mass.  The
    iterate starts at the true Q of an extra random policy, which makes the
    first backups over- or under-shoot.
    """
    rng = np.random.default_rng(seed)
    n_pairs = n_states * n_actions
    d = _feature_dim(n_pairs, d_fraction)
    mask = rng.random((n_states, n_actions)) < 0.3
    flat = np.flatnonzero(mask)
    if separable and flat.size > d - 1:
        keep = rng.choice(flat, size=d - 1, replace=False)
        mask = np.zeros(n_pairs, dtype=bool)
        mask[keep] = True
        mask = mask.reshape(n_states, n_actions)
    spec = random_spec(rng, n_states, n_actions, d, discount, ood_mask=mask if separable else None)
    dist = random_distribution(rng, n_states, n_actions)
    policies = [random_policy(rng, n_states, n_actions) for _ in range(k_iters + 1)]
    return VerificationInstance(spec, dist, mask, policies[1:], true_q(spec, policies[0]))


def theorem2_instance(seed: int, n_states: int = 4, n_actions: int = 3, d_fraction: float = 0.5,
                      separable: bool = True, discount: float = 0.9) -> VerificationInstance:
    """Seeded instance whose deterministic policy picks an OOD action at every state."""
    rng = np.random.default_rng(seed)
    n_pairs = n_states * n_actions
    d = _feature_dim(n_pairs, d_fraction)
    if separable and d <= n_states:
        raise ValueError("d_fraction too small: need more features than states")
    chosen = rng.integers(n_actions, size=n_states)
    mask = np.zeros((n_states, n_actions), dtype=bool)
    mask[np.arange(n_states), chosen] = True
    spare = d - 1 - n_states
    if separable and spare > 0:
        extra = rng.random((n_states, n_actions)) < 0.15
        extra &= ~mask
        idx = np.flatnonzero(extra)[:spare]
        mask.flat[idx] = True
    spec = random_spec(rng, n_states, n_actions, d, discount, ood_mask=mask if separable else None)
    dist = random_distribution(rng, n_states, n_actions)
    policy = np.zeros((n_states, n_actions))
    policy[np.arange(n_states), chosen] = 1.0
    q_init = true_q(spec, random_policy(rng, n_states, n_actions))
    return VerificationInstance(spec, dist, mask, [policy], q_init)
