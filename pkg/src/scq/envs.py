"""Toy continuous-control tasks, scripted controllers and offline datasets.

Three environments are provided:

``point-maze``
    2D point with velocity control inside a U-shaped maze on ``[0, 3]^2``.
    A solid block occupies ``x in [0, 2], y in [1, 2]``.  Each step moves the
    point by ``DT * a``; a move whose straight segment would enter the block is
    replaced by the x-only move, then the y-only move, then no move.  Entering
    the goal cell ``x <= 1, y >= 2`` pays reward 1 and ends the episode.

``push-slide``
    4D state ``(px, py, vx, vy)``, 2D force.  ``v' = v + DT * (a - FRICTION * v)
    + noise``, ``p' = p + DT * v'``.  Reward ``-(|p'|^2 + 0.1 |v'|^2 + 0.01 |a|^2)``.
    Never terminates; episodes are cut at the horizon.

``line-bandit``
    One-step task with context ``s ~ U[-1, 1]`` and action ``a in [-1, 1]``.
    With ``u = a - 0.1 s`` the reward has two modes: a narrow bump of height 1
    at ``u = -0.5`` and a ramp ``r = u`` on ``[0, 0.5]`` that ends in a cliff
    (``r = -1`` for ``u > 0.5``).  Medium data sits on the middle of the ramp,
    so a critic that extrapolates the rising trend walks off the cliff.
"""
from __future__ import annotations

import csv
import io
import json
import math
import struct
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

TIERS = ("random", "medium", "expert", "medium-replay-mix", "medium-expert-mix")
ENV_NAMES = ("point-maze", "push-slide", "line-bandit")

DT = 0.1
FRICTION = 0.5
MAZE_SIZE = 3.0
MAZE_BLOCK = (0.0, 2.0, 1.0, 2.0)  # x0, x1, y0, y1
MAZE_START = np.array([0.5, 0.5])
BANDIT_PEAK = (-0.5, 0.12)  # center, width of the height-1 bump
BANDIT_RAMP_END = 0.5
BANDIT_CLIFF = -1.0


@dataclass(frozen=True)
class EnvSpec:
    name: str
    state_dim: int
    action_dim: int
    action_bounds: tuple
    horizon: int
    reward_kind: str
    noise_std: float = 0.0

    def __post_init__(self):
        if self.state_dim < 1 or self.action_dim < 1:
            raise ValueError("state_dim and action_dim must be positive")
        if len(self.action_bounds) != self.action_dim:
            raise ValueError("one (low, high) pair per action dimension required")
        for low, high in self.action_bounds:
            if not low < high:
                raise ValueError(f"action bound low {low} must be below high {high}")
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if self.reward_kind not in ("dense", "sparse"):
            raise ValueError(f"unknown reward kind {self.reward_kind!r}")

    @property
    def low(self):
        return np.array([b[0] for b in self.action_bounds], dtype=float)

    @property
    def high(self):
        return np.array([b[1] for b in self.action_bounds], dtype=float)


def make_env(name: str, noise_std: float = 0.0) -> EnvSpec:
    if name == "point-maze":
        return EnvSpec(name, 2, 2, ((-1.0, 1.0),) * 2, 150, "sparse")
    if name == "push-slide":
        return EnvSpec(name, 4, 2, ((-1.0, 1.0),) * 2, 100, "dense", noise_std)
    if name == "line-bandit":
        return EnvSpec(name, 1, 1, ((-1.0, 1.0),), 1, "dense")
    raise ValueError(f"unknown environment {name!r}; expected one of {ENV_NAMES}")


# ---------------------------------------------------------------- dynamics

def _segment_hits_block(p, q, block=MAZE_BLOCK, shrink=0.0):
    """True where the segment p->q passes through the open block interior."""
    x0, x1, y0, y1 = block
    lo = np.zeros(len(p))
    hi = np.ones(len(p))
    for axis, (a, b) in enumerate(((x0 + shrink, x1 - shrink), (y0 + shrink, y1 - shrink))):
        start = p[:, axis]
        d = q[:, axis] - start
        moving = d != 0
        safe = np.where(moving, d, 1.0)
        with np.errstate(over="ignore"):
            t1 = (a - start) / safe
            t2 = (b - start) / safe
        tmin = np.where(moving, np.minimum(t1, t2), -np.inf)
        tmax = np.where(moving, np.maximum(t1, t2), np.inf)
        inside = (start > a) & (start < b)
        tmin = np.where(moving | inside, tmin, np.inf)
        tmax = np.where(moving | inside, tmax, -np.inf)
        lo = np.maximum(lo, tmin)
        hi = np.minimum(hi, tmax)
    return lo < hi


def _maze_step(states, actions):
    def propose(delta):
        return np.clip(states + delta, 0.0, MAZE_SIZE)

    move = DT * actions
    full = propose(move)
    x_only = propose(move * np.array([1.0, 0.0]))
    y_only = propose(move * np.array([0.0, 1.0]))
    out = states.copy()
    pending = np.ones(len(states), dtype=bool)
    for cand in (full, x_only, y_only):
        ok = pending & ~_segment_hits_block(states, cand)
        out[ok] = cand[ok]
        pending &= ~ok
    at_goal = (out[:, 0] <= 1.0) & (out[:, 1] >= 2.0)
    return out, at_goal.astype(float), at_goal


def _push_step(states, actions, noise):
    p, v = states[:, :2], states[:, 2:]
    v_next = v + DT * (actions - FRICTION * v) + noise
    p_next = p + DT * v_next
    reward = -(np.sum(p_next ** 2, axis=1) + 0.1 * np.sum(v_next ** 2, axis=1)
               + 0.01 * np.sum(actions ** 2, axis=1))
    return np.concatenate([p_next, v_next], axis=1), reward, np.zeros(len(states), dtype=bool)


def bandit_reward(states, actions):
    s = np.asarray(states, dtype=float)[:, 0]
    a = np.asarray(actions, dtype=float)[:, 0]
    u = a - 0.1 * s
    center, width = BANDIT_PEAK
    ramp = np.where(u > BANDIT_RAMP_END, BANDIT_CLIFF, np.maximum(u, 0.0))
    return np.exp(-0.5 * ((u - center) / width) ** 2) + ramp


def _bandit_step(states, actions):
    return states.copy(), bandit_reward(states, actions), np.ones(len(states), dtype=bool)


def step_batch(spec: EnvSpec, states, actions, rng=None):
    """Vectorized transition for a batch of states; actions are clipped to bounds."""
    states = np.asarray(states, dtype=float)
    actions = np.asarray(actions, dtype=float)
    if states.ndim != 2 or states.shape[1] != spec.state_dim:
        raise ValueError(f"states must have shape (n, {spec.state_dim})")
    if actions.shape != (len(states), spec.action_dim):
        raise ValueError(f"actions must have shape ({len(states)}, {spec.action_dim})")
    if np.isnan(states).any() or np.isnan(actions).any():
        raise ValueError("NaN in state or action")
    actions = np.clip(actions, spec.low, spec.high)
    if spec.name == "point-maze":
        return _maze_step(states, actions)
    if spec.name == "push-slide":
        noise = np.zeros((len(states), 2))
        if spec.noise_std > 0:
            if rng is None:
                raise ValueError("a noisy push-slide step needs an rng")
            noise = spec.noise_std * rng.standard_normal((len(states), 2))
        return _push_step(states, actions, noise)
    if spec.name == "line-bandit":
        return _bandit_step(states, actions)
    raise ValueError(f"unknown environment {spec.name!r}")


def env_step(spec: EnvSpec, state, action, rng=None):
    """Single transition. Returns ``(next_state, reward, done)``."""
    nxt, r, d = step_batch(spec, np.asarray(state, dtype=float)[None], np.asarray(action, dtype=float)[None], rng)
    return nxt[0], float(r[0]), bool(d[0])


def maze_free(points) -> np.ndarray:
    pts = np.atleast_2d(points)
    x0, x1, y0, y1 = MAZE_BLOCK
    inside = (pts[:, 0] > x0) & (pts[:, 0] < x1) & (pts[:, 1] > y0) & (pts[:, 1] < y1)
    in_arena = np.all((pts >= 0) & (pts <= MAZE_SIZE), axis=1)
    return in_arena & ~inside


def reset(spec: EnvSpec, rng, n: int, spread: bool = False):
    """Initial states.  ``spread`` draws maze starts anywhere in free space."""
    if spec.name == "point-maze":
        if not spread:
            return MAZE_START + rng.uniform(-0.1, 0.1, size=(n, 2))
        out = np.empty((0, 2))
        while len(out) < n:
            cand = rng.uniform(0.0, MAZE_SIZE, size=(2 * n, 2))
            keep = maze_free(cand) & ~((cand[:, 0] <= 1.0) & (cand[:, 1] >= 2.0))
            out = np.concatenate([out, cand[keep]])
        return out[:n]
    if spec.name == "push-slide":
        return np.concatenate([rng.uniform(-1.0, 1.0, size=(n, 2)), np.zeros((n, 2))], axis=1)
    if spec.name == "line-bandit":
        return rng.uniform(-1.0, 1.0, size=(n, 1))
    raise ValueError(f"unknown environment {spec.name!r}")


# ---------------------------------------------------------------- controllers

def _maze_waypoint(states):
    x, y = states[:, 0], states[:, 1]
    target = np.tile([2.5, 0.5], (len(states), 1))
    target[(x >= 2.0) & (y < 2.0)] = [2.5, 2.5]
    target[y >= 2.0] = [0.5, 2.5]
    return target


def _maze_controller(noise, speed):
    def act(states, rng):
        direction = _maze_waypoint(states) - states
        a = np.clip(5.0 * direction, -speed, speed)
        return a + noise * rng.standard_normal(a.shape)
    return act


def _push_controller(gain, noise):
    def act(states, rng):
        a = -gain * (2.0 * states[:, :2] + 1.5 * states[:, 2:])
        return a + noise * rng.standard_normal(a.shape)
    return act


def _bandit_controller(offset, noise):
    def act(states, rng):
        a = offset + 0.1 * states[:, :1]
        return a + noise * rng.standard_normal(a.shape)
    return act


def _uniform(spec):
    def act(states, rng):
        return rng.uniform(spec.low, spec.high, size=(len(states), spec.action_dim))
    return act


def controller(spec: EnvSpec, tier: str) -> Callable:
    """Scripted behavior policy ``act(states, rng) -> actions`` for a base tier."""
    if tier == "random":
        return _uniform(spec)
    table = {
        ("point-maze", "medium"): _maze_controller(0.3, 0.5),
        ("point-maze", "expert"): _maze_controller(0.1, 1.0),
        ("push-slide", "medium"): _push_controller(0.4, 0.3),
        ("push-slide", "expert"): _push_controller(1.0, 0.05),
        ("line-bandit", "medium"): _bandit_controller(0.25, 0.05),
        ("line-bandit", "expert"): _bandit_controller(BANDIT_PEAK[0], 0.03),
    }
    try:
        return table[(spec.name, tier)]
    except KeyError:
        raise ValueError(f"no scripted {tier!r} controller for {spec.name!r}") from None


# ---------------------------------------------------------------- datasets

class Transition(NamedTuple):
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    done: bool


@dataclass(frozen=True)
class Dataset:
    """Immutable columnar transition store (float32 vectors, bool dones)."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.rewards)
        if n == 0:
            raise ValueError("nonempty dataset required")
        cols = {
            "states": np.asarray(self.states, dtype=np.float32).reshape(n, -1),
            "actions": np.asarray(self.actions, dtype=np.float32).reshape(n, -1),
            "rewards": np.asarray(self.rewards, dtype=np.float32).reshape(n),
            "next_states": np.asarray(self.next_states, dtype=np.float32).reshape(n, -1),
            "dones": np.asarray(self.dones, dtype=bool).reshape(n),
        }
        if cols["states"].shape != cols["next_states"].shape:
            raise ValueError("states and next_states differ in shape")
        for name, col in cols.items():
            if not np.isfinite(col).all():
                raise ValueError(f"non-finite values in {name}")
            col.setflags(write=False)
            object.__setattr__(self, name, col)
        meta = dict(self.metadata)
        meta.update(size=n, state_dim=cols["states"].shape[1], action_dim=cols["actions"].shape[1])
        object.__setattr__(self, "metadata", meta)

    def __len__(self):
        return len(self.rewards)

    def __getitem__(self, i) -> Transition:
        return Transition(self.states[i], self.actions[i], float(self.rewards[i]),
                          self.next_states[i], bool(self.dones[i]))

    def take(self, idx, **meta) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.states[idx], self.actions[idx], self.rewards[idx],
                       self.next_states[idx], self.dones[idx], {**self.metadata, **meta})

    def columns(self):
        return self.states, self.actions, self.rewards, self.next_states, self.dones

    # -- binary format
    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(DATASET_MAGIC)
        buf.write(struct.pack("<I", DATASET_VERSION))
        head = json.dumps(self.metadata, sort_keys=True).encode()
        buf.write(struct.pack("<I", len(head)))
        buf.write(head)
        for col in self.columns():
            raw = col.astype("u1" if col.dtype == bool else "<f4").tobytes()
            buf.write(struct.pack("<Q", len(raw)))
            buf.write(raw)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Dataset":
        if blob[:4] != DATASET_MAGIC:
            raise ValueError("not a dataset file")
        (version,) = struct.unpack_from("<I", blob, 4)
        if version != DATASET_VERSION:
            raise ValueError(f"unsupported dataset version {version}")
        (n_head,) = struct.unpack_from("<I", blob, 8)
        pos = 12 + n_head
        meta = json.loads(blob[12:pos])
        n, ds, da = meta["size"], meta["state_dim"], meta["action_dim"]
        cols = []
        for dtype, shape in (("<f4", (n, ds)), ("<f4", (n, da)), ("<f4", (n,)),
                             ("<f4", (n, ds)), ("u1", (n,))):
            (nbytes,) = struct.unpack_from("<Q", blob, pos)
            pos += 8
            cols.append(np.frombuffer(blob[pos:pos + nbytes], dtype=dtype).reshape(shape))
            pos += nbytes
        return cls(*cols[:4], cols[4].astype(bool), meta)

    def save(self, path):
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(self.to_bytes())
        tmp.replace(path)

    @classmethod
    def load(cls, path) -> "Dataset":
        return cls.from_bytes(Path(path).read_bytes())

    # -- CSV export (float32 values written with round-trip precision)
    def to_csv(self, path):
        ds, da = self.states.shape[1], self.actions.shape[1]
        header = ([f"s{i}" for i in range(ds)] + [f"a{i}" for i in range(da)] + ["r"]
                  + [f"ns{i}" for i in range(ds)] + ["done"])
        with open(path, "w", newline="") as fh:
            fh.write("# " + json.dumps(self.metadata, sort_keys=True) + "\n")
            w = csv.writer(fh)
            w.writerow(header)
            for s, a, r, ns, d in zip(*self.columns()):
                vals = [repr(float(v)) for v in (*s, *a, r, *ns)]
                w.writerow(vals[:ds + da + 1] + vals[ds + da + 1:] + [int(d)])

    @classmethod
    def from_csv(cls, path) -> "Dataset":
        with open(path, newline="") as fh:
            meta = json.loads(fh.readline()[2:])
            rows = list(csv.reader(fh))[1:]
        ds, da = meta["state_dim"], meta["action_dim"]
        arr = np.array([[float(v) for v in row] for row in rows], dtype=np.float64)
        return cls(arr[:, :ds], arr[:, ds:ds + da], arr[:, ds + da], arr[:, ds + da + 1:2 * ds + da + 1],
                   arr[:, -1] > 0.5, meta)


DATASET_MAGIC = b"SCQD"
DATASET_VERSION = 1


def rollout(spec: EnvSpec, policy: Callable, n_episodes: int, rng, spread=False):
    """Run ``n_episodes`` episodes in lockstep; returns per-episode transition lists."""
    states = reset(spec, rng, n_episodes, spread)
    alive = np.ones(n_episodes, dtype=bool)
    logs = [[] for _ in range(n_episodes)]
    for _ in range(spec.horizon):
        idx = np.flatnonzero(alive)
        if len(idx) == 0:
            break
        acts = np.clip(policy(states[idx], rng), spec.low, spec.high)
        nxt, rew, done = step_batch(spec, states[idx], acts, rng)
        for j, i in enumerate(idx):
            logs[i].append((states[i].copy(), acts[j], rew[j], nxt[j], done[j]))
        states[idx] = nxt
        alive[idx] = ~done
    return logs


def _episodes_to_columns(episodes):
    flat = [t for ep in episodes for t in ep]
    s, a, r, ns, d = zip(*flat)
    return np.array(s), np.array(a), np.array(r), np.array(ns), np.array(d)


def _collect(spec, policy, n_transitions, rng, spread):
    episodes, count = [], 0
    batch = max(1, min(64, math.ceil(n_transitions / spec.horizon)))
    while count < n_transitions:
        for ep in rollout(spec, policy, batch, rng, spread):
            if count >= n_transitions:
                break
            episodes.append(ep[: n_transitions - count])
            count += len(episodes[-1])
    return episodes


def _tier_episodes(spec, tier, n_transitions, rng):
    spread = spec.name == "point-maze" and tier == "medium"
    return _collect(spec, controller(spec, tier), n_transitions, rng, spread)


def dataset_from_policy(spec: EnvSpec, policy: Callable, n_transitions: int, seed: int,
                        label: str = "custom", spread: bool = False) -> Dataset:
    """Dataset of exactly ``n_transitions`` steps from an arbitrary batched policy."""
    if n_transitions < 1:
        raise ValueError("nonempty dataset required")
    episodes = _collect(spec, policy, n_transitions, np.random.default_rng(seed), spread)
    meta = {"env": spec.name, "behavior": label, "seed": int(seed)}
    return Dataset(*_episodes_to_columns(episodes), meta)


def generate_dataset(spec: EnvSpec, behavior: str, n_transitions: int, seed: int) -> Dataset:
    """Exactly ``n_transitions`` transitions from a scripted tier.

    Mixture tiers interleave whole episodes of their two components, each
    component contributing half of the transitions.
    """
    if behavior not in TIERS:
        raise ValueError(f"unknown behavior label {behavior!r}; expected one of {TIERS}")
    if n_transitions < 1:
        raise ValueError("nonempty dataset required")
    rng = np.random.default_rng(seed)
    if behavior.endswith("-mix"):
        other = "random" if behavior == "medium-replay-mix" else "expert"
        first = _tier_episodes(spec, "medium", n_transitions - n_transitions // 2, rng)
        second = _tier_episodes(spec, other, n_transitions // 2, rng) if n_transitions // 2 else []
        episodes = []
        for k in range(max(len(first), len(second))):
            episodes += first[k:k + 1] + second[k:k + 1]
    else:
        episodes = _tier_episodes(spec, behavior, n_transitions, rng)
    meta = {"env": spec.name, "behavior": behavior, "seed": int(seed)}
    return Dataset(*_episodes_to_columns(episodes), meta)


def subsample(dataset: Dataset, fraction: float, seed: int) -> Dataset:
    """Uniform sample without replacement of ``floor(fraction * N)`` transitions, kept in order."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    k = math.floor(fraction * len(dataset))
    if k < 1:
        raise ValueError("subsample would be empty")
    idx = np.sort(np.random.default_rng(seed).choice(len(dataset), size=k, replace=False))
    return dataset.take(idx, fraction=fraction, subsample_seed=int(seed))


def subsample_indices(n: int, fraction: float, seed: int) -> np.ndarray:
    return np.sort(np.random.default_rng(seed).choice(n, size=math.floor(fraction * n), replace=False))


def maze_transitions_valid(dataset: Dataset, tol: float = 1e-5) -> np.ndarray:
    """Replay check: per transition, True when the move does not enter the maze block."""
    s = dataset.states.astype(float)
    ns = dataset.next_states.astype(float)
    return ~_segment_hits_block(s, ns, shrink=tol) & maze_free(ns)


def empirical_return_scale(dataset: Dataset, discount: float) -> float:
    """Largest absolute discounted return-to-go found in the dataset.

    Episode boundaries are a done flag or a break in state continuity.
    """
    r = dataset.rewards.astype(float)
    cont = np.zeros(len(r), dtype=bool)
    cont[:-1] = ~dataset.dones[:-1] & np.all(dataset.states[1:] == dataset.next_states[:-1], axis=1)
    g = np.zeros(len(r))
    acc = 0.0
    for i in range(len(r) - 1, -1, -1):
        acc = r[i] + (discount * acc if cont[i] else 0.0)
        g[i] = acc
    return float(np.max(np.abs(g)))


# ---------------------------------------------------------------- scoring

@dataclass(frozen=True)
class ScoreScale:
    random_score: float
    expert_score: float

    def __post_init__(self):
        if not self.expert_score > self.random_score:
            raise ValueError("expert_score must exceed random_score")


def normalized_score(scale: ScoreScale, raw):
    return 100.0 * (np.asarray(raw, dtype=float) - scale.random_score) / (scale.expert_score - scale.random_score)


def episode_returns(spec: EnvSpec, policy: Callable, n_episodes: int, seed: int) -> np.ndarray:
    """Undiscounted returns of ``n_episodes`` episodes from the standard start distribution."""
    rng = np.random.default_rng(seed)
    states = reset(spec, rng, n_episodes)
    alive = np.ones(n_episodes, dtype=bool)
    returns = np.zeros(n_episodes)
    for _ in range(spec.horizon):
        idx = np.flatnonzero(alive)
        if len(idx) == 0:
            break
        acts = np.clip(policy(states[idx], rng), spec.low, spec.high)
        nxt, rew, done = step_batch(spec, states[idx], acts, rng)
        returns[idx] += rew
        states[idx] = nxt
        alive[idx] = ~done
    return returns


def compute_score_scale(spec: EnvSpec, n_episodes: int = 100, seed: int = 0) -> ScoreScale:
    rand = episode_returns(spec, controller(spec, "random"), n_episodes, seed).mean()
    expert = episode_returns(spec, controller(spec, "expert"), n_episodes, seed + 1).mean()
    return ScoreScale(float(rand), float(expert))


def load_score_scales() -> dict:
    text = resources.files("scq").joinpath("data/score_scales.json").read_text()
    return {k: ScoreScale(**v) for k, v in json.loads(text).items()}


def score_scale(name: str) -> ScoreScale:
    scales = load_score_scales()
    if name not in scales:
        raise KeyError(f"no stored score scale for {name!r}")
    return scales[name]
