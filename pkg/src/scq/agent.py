"""Offline actor-critic with a strategically targeted OOD penalty.

One training iteration:

1. one CVAE step on the batch (behavior model),
2. rejection-sample actor actions the CVAE flags as out-of-distribution,
3. critic step on the twin squared Bellman error plus ``alpha`` times the mean
   min-critic value at those OOD actions,
4. actor step against the freshly updated critics (entropy and optional
   behavior-cloning terms), automatic entropy-temperature step,
5. Polyak averaging of the target critics.

All randomness comes from per-component generators spawned from the seed, so
runs are bitwise reproducible and a component that is switched off does not
perturb the random streams of the others.
"""
from __future__ import annotations

import csv
import json
import math
import zlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from . import cvae as cvae_mod
from . import envs, nn

METRIC_COLUMNS = ("iteration", "critic_loss", "actor_loss", "mean_q", "mean_abs_q", "q_data", "delta",
                  "ood_accept_rate", "lam", "alpha_term", "critic_checksum")


@dataclass(frozen=True)
class ScqConfig:
    alpha: float = 1.0
    beta: float = 0.0
    entropy_mode: str = "auto"
    fixed_lambda: float = 0.2
    init_lambda: float = 1.0
    target_entropy: float | None = None
    critic_lr: float = 3e-4
    actor_lr: float = 3e-4
    cvae_lr: float = 1e-3
    batch_size: int = 256
    discount: float = 0.99
    upsilon: float = 5e-3
    ood_sample_budget: int = 10
    warmup_iters: int = 5000
    seed: int = 0
    hidden: int = 400
    n_hidden: int = 2
    cvae_hidden: int = 750
    cvae_kl_weight: float = 0.5
    layer_norm: bool = False
    penalize_fallback: bool = False
    actor_schedule: str = "cosine"
    critic_loss: str = "scq"
    use_ood: bool = True
    dtype: str = "float64"

    def __post_init__(self):
        checks = [
            (self.alpha >= 0, "alpha must be >= 0"),
            (self.beta >= 0, "beta must be >= 0"),
            (self.entropy_mode in ("auto", "fixed"), "entropy_mode must be 'auto' or 'fixed'"),
            (self.fixed_lambda >= 0, "fixed_lambda must be >= 0"),
            (self.init_lambda > 0, "init_lambda must be > 0"),
            (min(self.critic_lr, self.actor_lr, self.cvae_lr) > 0, "learning rates must be > 0"),
            (self.batch_size >= 1, "batch_size must be positive"),
            (0 <= self.discount < 1, "discount must lie in [0, 1)"),
            (0 <= self.upsilon <= 1, "upsilon must lie in [0, 1]"),
            (self.ood_sample_budget >= 1, "ood_sample_budget must be positive"),
            (self.warmup_iters >= 0, "warmup_iters must be >= 0"),
            (self.hidden >= 1 and self.n_hidden >= 1 and self.cvae_hidden >= 1, "layer sizes must be positive"),
            (self.actor_schedule in ("constant", "cosine"), "actor_schedule must be 'constant' or 'cosine'"),
            (self.critic_loss in ("scq", "cql"), "critic_loss must be 'scq' or 'cql'"),
            (self.dtype in ("float32", "float64"), "dtype must be 'float32' or 'float64'"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)

    @classmethod
    def from_dict(cls, d: dict) -> "ScqConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def ood_active(self) -> bool:
        return self.use_ood and self.alpha > 0 and self.critic_loss == "scq"


@dataclass
class OodSampleResult:
    actions: np.ndarray
    found_mask: np.ndarray
    fallback_distances: np.ndarray


@dataclass
class Batch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray


class AgentState:
    """Networks, optimizers, temperature, CVAE and random streams of one run."""

    def __init__(self, config: ScqConfig, state_dim: int, action_dim: int, low, high, n_iterations=1):
        self.config = config
        self.state_dim, self.action_dim = state_dim, action_dim
        dt = np.dtype(config.dtype)
        self.low = np.asarray(low, dtype=dt)
        self.high = np.asarray(high, dtype=dt)
        ss = np.random.SeedSequence(config.seed)
        (init, self.rng_batch, self.rng_cvae, self.rng_ood,
         self.rng_critic, self.rng_actor) = (np.random.default_rng(s) for s in ss.spawn(6))
        h = (config.hidden,) * config.n_hidden
        self.actor = nn.Mlp((state_dim,) + h + (2 * action_dim,), init, dtype=dt)
        self.critic = nn.Mlp((state_dim + action_dim,) + h + (1,), init, n_members=2,
                             layer_norm=config.layer_norm, dtype=dt)
        self.target = self.critic.copy()
        self.log_lambda = np.array([math.log(config.init_lambda)])
        self.actor_opt = nn.AdamState.for_params([self.actor.flat], config.actor_lr)
        self.critic_opt = nn.AdamState.for_params([self.critic.flat], config.critic_lr)
        self.lambda_opt = nn.AdamState.for_params([self.log_lambda], config.actor_lr)
        self.schedule = nn.LrSchedule(config.actor_schedule, config.actor_lr, max(1, n_iterations))
        self.target_entropy = -float(action_dim) if config.target_entropy is None else config.target_entropy
        self.cvae = None
        self.threshold = cvae_mod.OodThreshold()
        if config.ood_active:
            model = cvae_mod.init_cvae(state_dim, action_dim, self.low, self.high, config.cvae_hidden, init, dt)
            self.cvae = cvae_mod.CvaeTrainer(model, config.cvae_lr, config.cvae_kl_weight)
        self.k = 0

    @property
    def lam(self) -> float:
        if self.config.entropy_mode == "fixed":
            return self.config.fixed_lambda
        return float(np.exp(self.log_lambda[0]))

    def policy_head(self, states):
        out, cache = self.actor.forward(states)
        mean, log_std, in_clamp = nn.split_gaussian_head(out)
        return mean, log_std, in_clamp, cache

    def sample_actions(self, states, noise):
        mean, log_std, in_clamp, _ = self.policy_head(states)
        return nn.squashed_gaussian(mean, log_std, noise, self.low, self.high, in_clamp)

    def act(self, states):
        """Deterministic action: squashed actor mean."""
        mean = np.split(self.actor(np.atleast_2d(states)), 2, axis=-1)[0]
        return 0.5 * (self.high + self.low) + 0.5 * (self.high - self.low) * np.tanh(mean)

    def min_q(self, states, actions, target=False):
        net = self.target if target else self.critic
        return net(np.concatenate([states, actions], axis=-1))[..., 0].min(axis=0)


def params_checksum(params) -> int:
    crc = 0
    for p in params:
        crc = zlib.crc32(np.ascontiguousarray(p).tobytes(), crc)
    return crc


# ---------------------------------------------------------------- OOD sampling

def sample_ood_actions(states, agent: AgentState, model, threshold, budget, rng, head=None) -> OodSampleResult:
    """Per state, draw up to ``budget`` actor actions and keep the first flagged OOD.

    Rows with no OOD draw return their maximum-distance draw with
    ``found_mask`` false.  All ``budget`` draws are scored in one batched
    pass; taking the first accepted one matches sequential rejection sampling.
    ``head`` optionally supplies a precomputed ``(mean, log_std)``.
    """
    if budget < 1:
        raise ValueError("budget must be at least 1")
    n, da = len(states), agent.action_dim
    mean, log_std = agent.policy_head(states)[:2] if head is None else head
    std = np.exp(log_std)
    center = 0.5 * (agent.high + agent.low)
    half = 0.5 * (agent.high - agent.low)
    draws = center + half * np.tanh(mean + std * rng.standard_normal((budget, n, da)))
    d = cvae_mod.reconstruction_distance(
        model, np.tile(states, (budget, 1)), draws.reshape(budget * n, da)).reshape(budget, n)
    ok = d >= threshold.delta
    found = ok.any(axis=0)
    pick = np.where(found, np.argmax(ok, axis=0), np.argmax(d, axis=0))
    cols = np.arange(n)
    return OodSampleResult(draws[pick, cols], found, d[pick, cols])


# ---------------------------------------------------------------- losses

def critic_targets(agent: AgentState, batch: Batch, noise, lam=None):
    """``y = r + gamma (1 - done) [min target Q(s', a') - lam log pi(a'|s')]``, a' reparameterized."""
    lam = agent.lam if lam is None else lam
    nxt = agent.sample_actions(batch.next_states, noise)
    q_next = agent.min_q(batch.next_states, nxt.action, target=True)
    return batch.rewards + agent.config.discount * (1.0 - batch.dones) * (q_next - lam * nxt.log_prob)


def _twin_bellman(critic, params, states, actions, y, extra_states=None, extra_actions=None):
    """Forward the critic on dataset pairs (and optional extra pairs) in one pass."""
    x = np.concatenate([states, actions], axis=-1)
    if extra_states is not None and len(extra_states):
        x = np.concatenate([x, np.concatenate([extra_states, extra_actions], axis=-1)])
    out, cache = critic.forward(x, params)
    return out[..., 0], cache


def critic_loss(agent: AgentState, batch: Batch, y, ood: OodSampleResult | None, alpha, params=None):
    """Twin squared Bellman error plus ``alpha`` times mean min-critic value at OOD actions.

    ``y`` is treated as a constant.  Rows whose OOD search failed are skipped
    unless the config asks to penalize fallbacks.  Returns ``(loss, grads, info)``.
    """
    critic = agent.critic
    params = critic.params if params is None else params
    n = len(y)
    rows = np.zeros(0, dtype=int)
    if ood is not None and alpha > 0:
        rows = np.arange(n) if agent.config.penalize_fallback else np.flatnonzero(ood.found_mask)
    extra_s = batch.states[rows] if len(rows) else None
    extra_a = ood.actions[rows] if len(rows) else None
    q, cache = _twin_bellman(critic, params, batch.states, batch.actions, y, extra_s, extra_a)
    resid = q[:, :n] - y
    bellman = 0.5 * float(np.sum(resid * resid)) / n
    grad_q = np.zeros_like(q)
    grad_q[:, :n] = resid / n
    penalty = 0.0
    if len(rows):
        q_ood = q[:, n:]
        pick = np.argmin(q_ood, axis=0)
        m = len(rows)
        penalty = alpha * float(np.mean(q_ood[pick, np.arange(m)]))
        grad_q[pick, n + np.arange(m)] += alpha / m
    grads, _ = critic.backward(cache, grad_q[..., None], params, input_grad=False)
    info = {"bellman": bellman, "alpha_term": penalty, "q_data": float(np.mean(q[:, :n].min(axis=0)))}
    return bellman + penalty, grads, info


def actor_loss(agent: AgentState, states, behavior_actions, noise, lam=None, beta=None, params=None,
               head=None):
    """Mean of ``lam log pi(a|s) - min Q(s, a) + beta |a - a_b|^2`` with ``a`` reparameterized.

    Returns ``(loss, grads, info)``; ``info`` carries the log-probabilities
    needed by the temperature update.  ``head`` may carry an actor forward
    ``(out, cache)`` already computed at ``states`` with the current parameters.
    """
    lam = agent.lam if lam is None else lam
    beta = agent.config.beta if beta is None else beta
    actor = agent.actor
    params = actor.params if params is None else params
    n = len(states)
    out, a_cache = actor.forward(states, params) if head is None else head
    mean, log_std, in_clamp = nn.split_gaussian_head(out)
    sample = nn.squashed_gaussian(mean, log_std, noise, agent.low, agent.high, in_clamp)
    q_all, c_cache = agent.critic.forward(np.concatenate([states, sample.action], axis=-1))
    q_all = q_all[..., 0]
    pick = np.argmin(q_all, axis=0)
    q = q_all[pick, np.arange(n)]
    resid = sample.action - behavior_actions
    loss = float(np.mean(lam * sample.log_prob - q + beta * np.sum(resid * resid, axis=-1)))
    grad_q = np.zeros_like(q_all)
    grad_q[pick, np.arange(n)] = -1.0 / n
    _, grad_x = agent.critic.backward(c_cache, grad_q[..., None], param_grads=False)
    grad_action = grad_x[:, agent.state_dim:] + 2.0 * beta * resid / n
    grad_head = nn.squashed_gaussian_backward(sample, grad_action, np.full(n, lam / n))
    grads, _ = actor.backward(a_cache, grad_head, params, input_grad=False)
    return loss, grads, {"log_prob": sample.log_prob, "q": float(np.mean(q)), "abs_q": float(np.mean(np.abs(q)))}


def cql_critic_loss(agent: AgentState, batch: Batch, y, policy_actions, alpha, params=None):
    """Twin squared Bellman error plus ``alpha`` (mean min Q at policy actions - mean min Q at data)."""
    critic = agent.critic
    params = critic.params if params is None else params
    n = len(y)
    q, cache = _twin_bellman(critic, params, batch.states, batch.actions, y, batch.states, policy_actions)
    resid = q[:, :n] - y
    bellman = 0.5 * float(np.sum(resid * resid)) / n
    grad_q = np.zeros_like(q)
    grad_q[:, :n] = resid / n
    cols = np.arange(n)
    pick_pi = np.argmin(q[:, n:], axis=0)
    pick_d = np.argmin(q[:, :n], axis=0)
    q_pi = q[:, n:][pick_pi, cols]
    q_d = q[:, :n][pick_d, cols]
    penalty = alpha * float(np.mean(q_pi) - np.mean(q_d))
    grad_q[pick_pi, n + cols] += alpha / n
    grad_q[pick_d, cols] -= alpha / n
    grads, _ = critic.backward(cache, grad_q[..., None], params, input_grad=False)
    info = {"bellman": bellman, "alpha_term": penalty, "q_data": float(np.mean(q_d))}
    return bellman + penalty, grads, info


# ---------------------------------------------------------------- training

def draw_batch(data: Batch, size, rng) -> Batch:
    idx = rng.integers(0, len(data.rewards), size)
    return Batch(data.states[idx], data.actions[idx], data.rewards[idx], data.next_states[idx], data.dones[idx])


def as_batch(dataset: envs.Dataset, dtype="float64") -> Batch:
    return Batch(*(np.asarray(c, dtype=dtype) for c in dataset.columns()))


def train_iteration(agent: AgentState, batch: Batch) -> dict:
    """One iteration in the fixed order CVAE, OOD sampling, critic, actor, target update."""
    cfg = agent.config
    penalty_on = cfg.ood_active and agent.k >= cfg.warmup_iters
    delta, accept = math.nan, math.nan
    ood = None
    # the actor is unchanged until its own step, so one forward serves both uses
    head = agent.actor.forward(batch.states)
    if agent.cvae is not None:
        agent.cvae.step(batch.states, batch.actions, agent.rng_cvae)
        if penalty_on:
            model = agent.cvae.model
            mean, log_std, _ = nn.split_gaussian_head(head[0])
            ood = sample_ood_actions(batch.states, agent, model, agent.threshold, cfg.ood_sample_budget,
                                     agent.rng_ood, (mean, log_std))
            accept = float(np.mean(ood.found_mask))
        delta = agent.threshold.delta

    lam = agent.lam
    y = critic_targets(agent, batch, agent.rng_critic.standard_normal(batch.actions.shape), lam)
    if cfg.critic_loss == "cql":
        pi = agent.sample_actions(batch.states, agent.rng_critic.standard_normal(batch.actions.shape)).action
        c_loss, c_grads, c_info = cql_critic_loss(agent, batch, y, pi, cfg.alpha)
    else:
        c_loss, c_grads, c_info = critic_loss(agent, batch, y, ood, cfg.alpha if penalty_on else 0.0)
    nn.adam_step(agent.critic_opt, [agent.critic.flat], [c_grads.flat])
    checksum = params_checksum([agent.critic.flat])

    noise = agent.rng_actor.standard_normal(batch.actions.shape)
    a_loss, a_grads, a_info = actor_loss(agent, batch.states, batch.actions, noise, lam, head=head)
    nn.adam_step(agent.actor_opt, [agent.actor.flat], [a_grads.flat], nn.lr_at(agent.schedule, agent.k))
    if cfg.entropy_mode == "auto":
        g = -float(np.mean(a_info["log_prob"])) - agent.target_entropy
        nn.adam_step(agent.lambda_opt, [agent.log_lambda], [np.array([g])])

    nn.polyak_update([agent.target.flat], [agent.critic.flat], cfg.upsilon)
    agent.k += 1
    return {
        "iteration": agent.k,
        "critic_loss": c_loss,
        "actor_loss": a_loss,
        "mean_q": a_info["q"],
        "mean_abs_q": a_info["abs_q"],
        "q_data": c_info["q_data"],
        "delta": delta,
        "ood_accept_rate": accept,
        "lam": lam,
        "alpha_term": c_info["alpha_term"],
        "critic_checksum": checksum,
    }


def refresh_epoch_threshold(agent: AgentState, data: Batch):
    """Recompute ``delta`` from the frozen current CVAE over the full dataset."""
    if agent.cvae is not None:
        agent.threshold = cvae_mod.refresh_threshold(agent.cvae.model, data.states, data.actions)


def evaluate_policy(agent, spec: envs.EnvSpec, n_episodes: int, seed: int):
    """Mean undiscounted return of the deterministic policy and the per-episode returns."""
    act = agent.act if isinstance(agent, AgentState) else agent
    returns = envs.episode_returns(spec, lambda s, rng: act(s), n_episodes, seed)
    return float(np.mean(returns)), returns


def train(agent: AgentState, data: Batch, n_iterations: int, log_every: int = 1000, callback=None):
    """Run ``n_iterations`` iterations; returns the logged metric rows.

    ``delta`` is refreshed at the start of every epoch (``len(data) /
    batch_size`` iterations).  ``callback(agent, row)`` runs after each log.
    """
    n = len(data.rewards)
    epoch = max(1, n // agent.config.batch_size)
    rows = []
    for _ in range(n_iterations):
        if agent.k % epoch == 0:
            refresh_epoch_threshold(agent, data)
        m = train_iteration(agent, draw_batch(data, agent.config.batch_size, agent.rng_batch))
        if m["iteration"] % log_every == 0:
            rows.append(m)
            if callback is not None:
                callback(agent, m)
    return rows


def format_metric(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_metrics_csv(path, rows, header_comment=None):
    """Fixed column order; floats written with round-trip precision."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh)
        cols = list(rows[0].keys()) if rows else list(METRIC_COLUMNS)
        w.writerow(cols)
        for r in rows:
            w.writerow([format_metric(r[c]) for c in cols])
    tmp.replace(path)


def read_metrics_csv(path):
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    return [{k: float(v) for k, v in row.items()} for row in reader]


def save_agent(path, agent: AgentState):
    tensors = {}
    tensors.update(nn.mlp_tensors("actor", agent.actor))
    tensors.update(nn.mlp_tensors("critic", agent.critic))
    tensors.update(nn.mlp_tensors("target", agent.target))
    tensors["log_lambda"] = agent.log_lambda
    manifest = {"config": agent.config.to_dict(), "iteration": agent.k, "state_dim": agent.state_dim,
                "action_dim": agent.action_dim, "low": agent.low.tolist(), "high": agent.high.tolist(),
                "delta": agent.threshold.delta}
    if agent.cvae is not None:
        tensors.update(nn.mlp_tensors("cvae.encoder", agent.cvae.model.encoder))
        tensors.update(nn.mlp_tensors("cvae.decoder", agent.cvae.model.decoder))
    nn.save_checkpoint(path, manifest, tensors)


def load_agent(path) -> AgentState:
    """Restore networks and threshold (optimizer moments are not stored)."""
    manifest, tensors = nn.load_checkpoint(path)
    cfg = ScqConfig.from_dict(manifest["config"])
    agent = AgentState(cfg, manifest["state_dim"], manifest["action_dim"], manifest["low"], manifest["high"])
    nn.load_mlp_tensors("actor", agent.actor, tensors)
    nn.load_mlp_tensors("critic", agent.critic, tensors)
    nn.load_mlp_tensors("target", agent.target, tensors)
    agent.log_lambda = tensors["log_lambda"].copy()
    if agent.cvae is not None:
        nn.load_mlp_tensors("cvae.encoder", agent.cvae.model.encoder, tensors)
        nn.load_mlp_tensors("cvae.decoder", agent.cvae.model.decoder, tensors)
    agent.threshold = cvae_mod.OodThreshold(delta=manifest["delta"])
    agent.k = manifest["iteration"]
    return agent


class ScqAgent(BaseEstimator):
    """Estimator wrapper: ``fit(dataset)`` trains, ``predict(states)`` returns deterministic actions."""

    def __init__(self, config=None, n_iterations=1000, log_every=100, action_low=-1.0, action_high=1.0):
        self.config = config
        self.n_iterations = n_iterations
        self.log_every = log_every
        self.action_low = action_low
        self.action_high = action_high

    def fit(self, dataset: envs.Dataset, y=None):
        cfg = self.config if self.config is not None else ScqConfig()
        if isinstance(cfg, dict):
            cfg = ScqConfig.from_dict(cfg)
        data = as_batch(dataset)
        da = data.actions.shape[1]
        low = np.broadcast_to(np.asarray(self.action_low, dtype=float), (da,))
        high = np.broadcast_to(np.asarray(self.action_high, dtype=float), (da,))
        self.state_ = AgentState(cfg, data.states.shape[1], da, low, high, self.n_iterations)
        self.metrics_ = train(self.state_, data, self.n_iterations, self.log_every)
        return self

    def predict(self, states):
        check_is_fitted(self, "state_")
        return self.state_.act(check_array(states, dtype=np.float64))

    def evaluate(self, spec: envs.EnvSpec, n_episodes=10, seed=0):
        return evaluate_policy(self.state_, spec, n_episodes, seed)


def dumps_config(cfg: ScqConfig) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True)
