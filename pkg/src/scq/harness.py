"""Experiment orchestration and the ``scq`` command line.

A run is described by an :class:`ExperimentConfig` (strict JSON; unknown keys
are errors).  Every output file embeds the config hash and seed list, and no
output contains timestamps, so identical configs give byte-identical files.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from . import agent as agent_mod
from . import baselines, envs
from . import linear_core as lc

OUTPUT_ROOT_ENV = "SCQ_OUTPUT_ROOT"
EXIT_OK, EXIT_CONFIG, EXIT_VERIFY = 0, 2, 3
RESULT_COLUMNS = ("task", "method", "mean_score", "std_score", "n_seeds", "mean_q", "mean_abs_q")
EVAL_COLUMNS = ("return", "score")


class ConfigError(ValueError):
    """Raised for malformed or inconsistent experiment configuration."""


@dataclass(frozen=True)
class ExperimentConfig:
    env: str = "line-bandit"
    tier: str = "medium"
    fraction: float = 1.0
    kind: str = "scq"
    agent: agent_mod.ScqConfig = field(default_factory=agent_mod.ScqConfig)
    n_iterations: int = 100_000
    eval_every: int = 1000
    n_eval_points: int = 10
    n_eval_episodes: int = 10
    seeds: tuple = (0,)
    dataset_size: int = 50_000
    data_seed: int = 0
    subsample_seed: int = 0
    output_dir: str = "runs"
    generate: bool = True

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.env not in envs.ENV_NAMES:
            raise ConfigError(f"unknown env {self.env!r}")
        if self.tier not in envs.TIERS:
            raise ConfigError(f"unknown tier {self.tier!r}")
        if not 0.0 < self.fraction <= 1.0:
            raise ConfigError("fraction must lie in (0, 1]")
        if self.kind not in baselines.BASELINES:
            raise ConfigError(f"unknown kind {self.kind!r}")
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        for name in ("n_iterations", "eval_every", "n_eval_points", "n_eval_episodes", "dataset_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        d = dict(d)
        try:
            if isinstance(d.get("agent"), dict):
                d["agent"] = agent_mod.ScqConfig.from_dict(d["agent"])
            return cls(**d)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        return d

    def agent_config(self, seed: int) -> agent_mod.ScqConfig:
        return replace(baselines.make_baseline(self.kind, self.agent), seed=int(seed))


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    return ExperimentConfig.from_dict(data)


def config_hash(cfg: ExperimentConfig) -> str:
    """Hash of everything that affects results (output location excluded)."""
    d = cfg.to_dict()
    d.pop("output_dir")
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def run_key(cfg: ExperimentConfig) -> str:
    """Hash identifying one seed's run independent of the other seeds listed."""
    d = cfg.to_dict()
    for k in ("output_dir", "seeds"):
        d.pop(k)
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


# Small-network settings sized for a single CPU core.  Per-task entries follow
# the defaults' structure: maze gets a smaller critic learning rate and a
# behavior-cloning weight; the one-step bandit gets a lower entropy target
# because its one-dimensional policy cannot reach -1 nats inside the log-std clamp.
DESK_AGENT = {"hidden": 64, "batch_size": 128, "cvae_hidden": 64, "dtype": "float32"}
DESK_TASK = {
    "line-bandit": {"alpha": 0.1, "target_entropy": -3.0},
    "point-maze": {"hidden": 32, "alpha": 0.1, "critic_lr": 1e-4, "beta": 0.5},
    "push-slide": {"alpha": 0.1},
}


def desk_config(env: str, kind: str = "scq", **overrides) -> ExperimentConfig:
    """Experiment preset: 50k iterations on a 50k-transition medium dataset."""
    if env not in DESK_TASK:
        raise ConfigError(f"unknown env {env!r}")
    agent = agent_mod.ScqConfig(**{**DESK_AGENT, **DESK_TASK[env]})
    base = dict(env=env, tier="medium", kind=kind, agent=agent, n_iterations=50_000, eval_every=1000,
                dataset_size=50_000)
    return ExperimentConfig(**{**base, **overrides})


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "."))


def resolve_dir(cfg: ExperimentConfig) -> Path:
    p = Path(cfg.output_dir)
    return p if p.is_absolute() else output_root() / p


def run_tag(cfg: ExperimentConfig) -> str:
    return f"{cfg.env}-{cfg.tier}-f{cfg.fraction:g}-{cfg.kind}-{config_hash(cfg)[:8]}"


def _write_text(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


# ---------------------------------------------------------------- aggregation

def mean_std(values):
    """Two-pass mean and population standard deviation (0 for a single value)."""
    x = np.asarray(values, dtype=float)
    if x.size == 0:
        raise ValueError("no values to aggregate")
    m = float(np.sum(x) / x.size)
    return m, float(math.sqrt(np.sum((x - m) ** 2) / x.size))


@dataclass
class ResultTable:
    rows: list = field(default_factory=list)

    def add(self, task, method, scores, mean_q=math.nan, mean_abs_q=math.nan):
        m, s = mean_std(scores)
        self.rows.append({"task": task, "method": method, "mean_score": m, "std_score": s,
                          "n_seeds": len(scores), "mean_q": float(mean_q), "mean_abs_q": float(mean_abs_q)})
        return self

    def extend(self, other: "ResultTable"):
        self.rows.extend(other.rows)
        return self

    def to_csv(self) -> str:
        lines = [",".join(RESULT_COLUMNS)]
        for r in self.rows:
            lines.append(",".join(agent_mod.format_metric(r[c]) if c not in ("task", "method") else r[c]
                                  for c in RESULT_COLUMNS))
        return "\n".join(lines) + "\n"

    def to_markdown(self) -> str:
        out = ["| task | method | score | n |", "|---|---|---|---|"]
        for r in self.rows:
            out.append(f"| {r['task']} | {r['method']} | {r['mean_score']:.1f} ± {r['std_score']:.1f} "
                       f"| {r['n_seeds']} |")
        return "\n".join(out) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "ResultTable":
        lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
        head = lines[0].split(",")
        rows = []
        for ln in lines[1:]:
            r = dict(zip(head, ln.split(",")))
            for k in head:
                if k == "n_seeds":
                    r[k] = int(r[k])
                elif k not in ("task", "method"):
                    r[k] = float(r[k])
            rows.append(r)
        return cls(rows)

    def lookup(self, task, method) -> dict:
        for r in self.rows:
            if r["task"] == task and r["method"] == method:
                return r
        raise KeyError((task, method))


# ---------------------------------------------------------------- runs

def load_dataset(cfg: ExperimentConfig) -> envs.Dataset:
    """Generate (or read from the cache directory) the base dataset, then subsample."""
    spec = envs.make_env(cfg.env)
    cache = resolve_dir(cfg) / "datasets" / f"{cfg.env}-{cfg.tier}-{cfg.dataset_size}-{cfg.data_seed}.scqd"
    if cache.exists():
        data = envs.Dataset.load(cache)
    elif cfg.generate:
        data = envs.generate_dataset(spec, cfg.tier, cfg.dataset_size, cfg.data_seed)
        cache.parent.mkdir(parents=True, exist_ok=True)
        data.save(cache)
    else:
        raise FileNotFoundError(f"dataset {cache} missing and generation disabled")
    if cfg.fraction < 1.0:
        data = envs.subsample(data, cfg.fraction, cfg.subsample_seed)
    return data


def _header(cfg: ExperimentConfig, **extra) -> str:
    meta = {"config_hash": config_hash(cfg), "seeds": list(cfg.seeds), "env": cfg.env, "tier": cfg.tier,
            "fraction": cfg.fraction, "kind": cfg.kind}
    meta.update(extra)
    return json.dumps(meta, sort_keys=True)


def run_seed(cfg: ExperimentConfig, seed: int, data: envs.Dataset | None = None, checkpoint=None) -> dict:
    """Train one seed; evaluate every ``eval_every`` iterations.

    The score is the mean normalized score over the final ``n_eval_points``
    evaluations; ``mean_q`` and ``mean_abs_q`` average the same logged rows.
    ``seconds`` (training wall time) is kept in memory only, never written.
    """
    spec = envs.make_env(cfg.env)
    data = load_dataset(cfg) if data is None else data
    acfg = cfg.agent_config(seed)
    batch = agent_mod.as_batch(data, acfg.dtype)
    state = agent_mod.AgentState(acfg, spec.state_dim, spec.action_dim, spec.low, spec.high, cfg.n_iterations)
    scale = envs.score_scale(cfg.env)
    eval_seed = 10_000 + seed

    def on_log(agent, row):
        ret, _ = agent_mod.evaluate_policy(agent, spec, cfg.n_eval_episodes, eval_seed)
        row["return"] = ret
        row["score"] = float(envs.normalized_score(scale, ret))

    start = time.perf_counter()
    rows = agent_mod.train(state, batch, cfg.n_iterations, cfg.eval_every, on_log)
    seconds = time.perf_counter() - start
    if checkpoint is not None:
        Path(checkpoint).parent.mkdir(parents=True, exist_ok=True)
        agent_mod.save_agent(checkpoint, state)
    tail = rows[-cfg.n_eval_points:]
    if not tail:
        raise ConfigError("n_iterations shorter than eval_every: no evaluations")
    return {
        "seed": seed,
        "score": float(np.mean([r["score"] for r in tail])),
        "mean_q": float(np.mean([r["mean_q"] for r in tail])),
        "mean_abs_q": float(np.mean([r["mean_abs_q"] for r in tail])),
        "rows": rows,
        "seconds": seconds,
        "agent": state,
    }


def _seed_job(args):
    cfg, seed, ckpt = args
    out = run_seed(cfg, seed, checkpoint=ckpt)
    out.pop("agent")
    return out


def run_experiment(cfg: ExperimentConfig, workers: int = 1, cache: dict | None = None,
                   write: bool = True, method: str | None = None) -> ResultTable:
    """Train every seed, write per-seed metrics and the aggregated table.

    ``cache`` (optional, keyed by ``(run_key, seed)``) lets callers share
    identical runs between studies within one process.
    """
    h = run_key(cfg)
    base = resolve_dir(cfg) / run_tag(cfg)
    todo = [s for s in cfg.seeds if cache is None or (h, s) not in cache]
    jobs = [(cfg, s, base / f"seed{s}" / "agent.ckpt" if write else None) for s in todo]
    results = {}
    if todo:
        if workers > 1 and len(todo) > 1:
            with ProcessPoolExecutor(workers) as pool:
                done = list(pool.map(_seed_job, jobs))
        else:
            data = load_dataset(cfg)
            done = []
            for _, s, ckpt in jobs:
                r = run_seed(cfg, s, data, ckpt)
                r.pop("agent")
                done.append(r)
        for r in done:
            results[r["seed"]] = r
            if cache is not None:
                cache[(h, r["seed"])] = r
    for s in cfg.seeds:
        if s not in results:
            results[s] = cache[(h, s)]
    per_seed = [results[s] for s in cfg.seeds]
    table = ResultTable().add(cfg.env, method or cfg.kind, [r["score"] for r in per_seed],
                              np.mean([r["mean_q"] for r in per_seed]),
                              np.mean([r["mean_abs_q"] for r in per_seed]))
    if write:
        for r in per_seed:
            agent_mod.write_metrics_csv(base / f"seed{r['seed']}" / "metrics.csv", r["rows"],
                                        _header(cfg, seed=r["seed"]))
        _write_text(base / "config.json", json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
        _write_text(base / "results.csv", f"# {_header(cfg)}\n" + table.to_csv())
    table.per_seed = per_seed
    return table


def run_alpha_sweep(cfg: ExperimentConfig, alphas, workers: int = 1, cache=None, write=True):
    """One experiment per alpha (duplicates kept).  Returns the table and mean-Q curves."""
    alphas = list(alphas)
    if not alphas:
        raise ConfigError("alphas must be nonempty")
    table, curves = ResultTable(), []
    for a in alphas:
        sub = replace(cfg, agent=replace(cfg.agent, alpha=float(a)))
        t = run_experiment(sub, workers, cache, write, method=f"{cfg.kind}[alpha={a:g}]")
        table.extend(t)
        its = [r["iteration"] for r in t.per_seed[0]["rows"]]
        q = np.mean([[r["mean_q"] for r in p["rows"]] for p in t.per_seed], axis=0)
        curves.append({"alpha": float(a), "iteration": its, "mean_q": q.tolist()})
        if write:
            lines = ["iteration,mean_q"] + [f"{i},{agent_mod.format_metric(v)}" for i, v in zip(its, q)]
            _write_text(resolve_dir(sub) / run_tag(sub) / "q_curve.csv",
                        f"# {_header(sub)}\n" + "\n".join(lines) + "\n")
    if write:
        _write_text(resolve_dir(cfg) / f"alpha-sweep-{config_hash(cfg)[:8]}.csv",
                    f"# {_header(cfg, alphas=alphas)}\n" + table.to_csv())
    return table, curves


FRACTIONS = (1.0, 0.5, 0.3, 0.1)


def run_fraction_study(cfg: ExperimentConfig, fractions=FRACTIONS, methods=("scq", "scq_layernorm"),
                       workers: int = 1, cache=None, write=True) -> ResultTable:
    """SCQ and its layer-norm variant on subsampled datasets; rows are fraction x method."""
    table = ResultTable()
    for frac in fractions:
        for kind in methods:
            sub = replace(cfg, fraction=float(frac), kind=kind)
            table.extend(run_experiment(sub, workers, cache, write, method=f"{kind}@{frac:g}"))
    if write:
        _write_text(resolve_dir(cfg) / f"fraction-study-{config_hash(cfg)[:8]}.csv",
                    f"# {_header(cfg, fractions=list(fractions))}\n" + table.to_csv())
    return table


# ---------------------------------------------------------------- linear verification

def tabular_instance(inst: lc.VerificationInstance) -> lc.VerificationInstance:
    """Same MDP with one-hot features, started at the true Q of a single policy.

    LSTD-Q is then the exact backup and the iterate sits at its fixed point,
    so the interpolation error is zero.
    """
    spec = inst.spec
    n = spec.n_pairs
    tab = lc.LinearMdpSpec(spec.n_states, spec.n_actions, n, np.eye(n), spec.transitions.T,
                           spec.rewards, spec.discount)
    return replace(inst, spec=tab, policies=inst.policies[:1], q_init=None)


def verify_linear(n_instances: int, d_fraction: float = 0.5, k_iters: int = 5, seed: int = 0,
                  one_hot: bool = False) -> dict:
    """Run both linear-MDP verifiers on seeded random instances and summarize.

    Instances whose OOD policy is empty somewhere violate the precondition of
    the value comparison; they are counted separately rather than failed.
    """
    if n_instances < 1:
        raise ValueError("n_instances must be at least 1")
    if k_iters < 1:
        raise ValueError("at least one iteration")
    # one-hot features with full-support data give an invertible Gram matrix
    ridge = 0.0 if one_hot else lc.DEFAULT_RIDGE
    rng = np.random.SeedSequence(seed)
    t1 = {"passed": 0, "failed": 0, "worst_violation": -math.inf, "max_epsilon": 0.0}
    t2 = {"passed": 0, "failed": 0, "precondition_violations": 0, "worst_violation": -math.inf}
    failures = []
    for i, child in enumerate(rng.spawn(n_instances)):
        s = int(child.generate_state(1)[0])
        a = lc.theorem1_instance(s, d_fraction=d_fraction, k_iters=k_iters)
        b = lc.theorem2_instance(s, d_fraction=d_fraction)
        if one_hot:
            a, b = tabular_instance(a), tabular_instance(b)
        r1 = lc.verify_theorem1(a.spec, a.dist, a.policies, a.mask, k_iters, ridge=ridge, q_init=a.q_init)
        t1["passed" if r1.passed else "failed"] += 1
        t1["worst_violation"] = max(t1["worst_violation"], r1.max_violation)
        t1["max_epsilon"] = max(t1["max_epsilon"], r1.epsilon_bound)
        if not r1.passed:
            failures.append({"instance": i, "theorem": 1, "violation": r1.max_violation})
        try:
            r2 = lc.verify_theorem2(b.spec, b.dist, b.policies[0], b.mask, k_iters=k_iters, ridge=ridge,
                                    q_init=b.q_init)
        except lc.PreconditionError:
            t2["precondition_violations"] += 1
            continue
        t2["passed" if r2.passed else "failed"] += 1
        t2["worst_violation"] = max(t2["worst_violation"], r2.max_violation)
        if not r2.passed:
            failures.append({"instance": i, "theorem": 2, "violation": r2.max_violation})
    return {"n_instances": n_instances, "d_fraction": d_fraction, "k_iters": k_iters, "seed": seed,
            "one_hot": one_hot, "ridge": ridge, "tolerance": lc.INEQ_SLACK, "theorem1": t1, "theorem2": t2,
            "failures": failures, "passed": not failures}


# ---------------------------------------------------------------- plots

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def read_metric_file(path):
    """Returns ``(metadata, columns, rows)`` of a metrics CSV written by this module."""
    with open(path) as fh:
        first = fh.readline()
    meta = json.loads(first[1:].strip()) if first.startswith("#") else {}
    rows = agent_mod.read_metrics_csv(path)
    cols = tuple(rows[0].keys()) if rows else ()
    return meta, cols, rows


def emit_plots(paths, out_dir, value="score") -> list:
    """One SVG per task: per method, the across-seed mean with a min-max band.

    All files must share one column set.  Returns the written paths.
    """
    paths = [Path(p) for p in paths]
    if not paths:
        raise ValueError("at least one metric file is required")
    groups, colset, sources = {}, None, {}
    for p in sorted(paths):
        meta, cols, rows = read_metric_file(p)
        if colset is None:
            colset = cols
        elif cols != colset:
            raise ValueError(f"inconsistent column sets: {p}")
        if value not in cols:
            raise ValueError(f"column {value!r} missing from {p}")
        task = meta.get("env", "task")
        method = meta.get("kind", p.parent.name)
        if meta.get("fraction", 1.0) != 1.0:
            method = f"{method}@{meta['fraction']:g}"
        groups.setdefault(task, {}).setdefault(method, []).append(rows)
        sources.setdefault(task, []).append({"config_hash": meta.get("config_hash"), "seed": meta.get("seed"),
                                             "method": method})
    written = []
    out_dir = Path(out_dir)
    for task in sorted(groups):
        svg = render_svg(task, groups[task], value, desc=json.dumps(sources[task], sort_keys=True))
        path = out_dir / f"{task}-{value}.svg"
        _write_text(path, svg)
        written.append(path)
    return written


def _band(runs, value):
    n = min(len(r) for r in runs)
    x = np.array([runs[0][i]["iteration"] for i in range(n)])
    y = np.array([[r[i][value] for i in range(n)] for r in runs])
    return x, y.mean(axis=0), y.min(axis=0), y.max(axis=0)


def render_svg(title, methods: dict, value="score", width=480, height=320, desc=None) -> str:
    """Deterministic SVG: fixed layout, coordinates rounded to 2 decimals."""
    left, right, top, bottom = 60, 20, 30, 45
    series = {m: _band(runs, value) for m, runs in sorted(methods.items())}
    xs = np.concatenate([s[0] for s in series.values()])
    lo = min(float(s[2].min()) for s in series.values())
    hi = max(float(s[3].max()) for s in series.values())
    if hi == lo:
        lo, hi = lo - 1.0, hi + 1.0
    x0, x1 = float(xs.min()), float(xs.max())
    if x1 == x0:
        x1 = x0 + 1.0
    pw, ph = width - left - right, height - top - bottom

    def px(x):
        return left + (x - x0) / (x1 - x0) * pw

    def py(y):
        return top + (hi - y) / (hi - lo) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<desc>{escape(desc or title)}</desc>',
           f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2:.2f}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
           f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
           f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
           f'<text x="{left + pw / 2:.2f}" y="{height - 8}" text-anchor="middle" font-size="11">iterations</text>',
           f'<text x="14" y="{top + ph / 2:.2f}" text-anchor="middle" font-size="11" '
           f'transform="rotate(-90 14 {top + ph / 2:.2f})">normalized {value}</text>']
    for t in np.linspace(lo, hi, 5):
        out.append(f'<text x="{left - 6}" y="{py(t) + 4:.2f}" text-anchor="end" font-size="10">{t:.3g}</text>')
    for t in np.linspace(x0, x1, 5):
        out.append(f'<text x="{px(t):.2f}" y="{top + ph + 16}" text-anchor="middle" font-size="10">{t:.6g}</text>')
    for k, (name, (x, mean, mn, mx)) in enumerate(series.items()):
        color = _PALETTE[k % len(_PALETTE)]
        upper = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x, mx))
        lower = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x[::-1], mn[::-1]))
        out.append(f'<polygon points="{upper} {lower}" fill="{color}" fill-opacity="0.2" stroke="none"/>')
        line = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x, mean))
        out.append(f'<polyline points="{line}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        out.append(f'<text x="{left + 8}" y="{top + 14 + 14 * k}" font-size="11" fill="{color}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------- CLI

def _parse_list(text, cast=float):
    try:
        return [cast(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad list {text!r}") from exc


def _experiment_from_args(args) -> ExperimentConfig:
    if args.config:
        cfg = load_config(args.config)
    elif getattr(args, "desk", False):
        cfg = desk_config(args.env or "line-bandit")
    else:
        cfg = ExperimentConfig()
    over = {}
    for name in ("env", "tier", "fraction", "kind", "n_iterations", "eval_every", "n_eval_episodes",
                 "dataset_size", "data_seed", "output_dir"):
        v = getattr(args, name, None)
        if v is not None:
            over[name] = v
    if getattr(args, "seeds", None):
        over["seeds"] = tuple(_parse_list(args.seeds, int))
    if getattr(args, "alpha", None) is not None:
        over["agent"] = replace(cfg.agent, alpha=args.alpha)
    return ExperimentConfig.from_dict({**{f.name: getattr(cfg, f.name) for f in fields(cfg)}, **over}) \
        if over else cfg


def _add_experiment_flags(p):
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--desk", action="store_true", help="start from the single-core preset for --env")
    p.add_argument("--env", choices=envs.ENV_NAMES)
    p.add_argument("--tier", choices=envs.TIERS)
    p.add_argument("--fraction", type=float)
    p.add_argument("--kind", choices=baselines.BASELINES)
    p.add_argument("--n-iterations", dest="n_iterations", type=int)
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.add_argument("--n-eval-episodes", dest="n_eval_episodes", type=int)
    p.add_argument("--dataset-size", dest="dataset_size", type=int)
    p.add_argument("--data-seed", dest="data_seed", type=int)
    p.add_argument("--seeds", help="comma-separated seed list")
    p.add_argument("--alpha", type=float)
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("--workers", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scq", description="Offline RL with targeted OOD penalties.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a dataset file")
    p.add_argument("--env", choices=envs.ENV_NAMES, required=True)
    p.add_argument("--tier", choices=envs.TIERS, default="medium")
    p.add_argument("--n", type=int, default=50_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fraction", type=float, default=1.0)
    p.add_argument("--out", required=True, help="output path (.csv for CSV, anything else binary)")

    p = sub.add_parser("train", help="train all seeds of an experiment")
    _add_experiment_flags(p)

    p = sub.add_parser("eval", help="evaluate a saved agent checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--env", choices=envs.ENV_NAMES, required=True)
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("verify-linear", help="check both linear-MDP bounds on random instances")
    p.add_argument("--n-instances", type=int, default=50)
    p.add_argument("--d-fraction", type=float, default=0.5)
    p.add_argument("--k-iters", type=int, default=5)
    p.add_argument("--seed", type=int, default=11)
    p.add_argument("--one-hot", action="store_true")
    p.add_argument("--out", help="JSON summary path")

    p = sub.add_parser("sweep-alpha", help="one experiment per alpha")
    _add_experiment_flags(p)
    p.add_argument("--alphas", default="0.1,1,10")

    p = sub.add_parser("fraction-study", help="SCQ vs layer-norm critics on dataset fractions")
    _add_experiment_flags(p)
    p.add_argument("--fractions", default="1.0,0.5,0.3,0.1")

    p = sub.add_parser("report", help="merge result tables into one")
    p.add_argument("results", nargs="+")
    p.add_argument("--markdown", action="store_true")

    p = sub.add_parser("plot", help="SVG learning curves from metric files")
    p.add_argument("metrics", nargs="+")
    p.add_argument("--out-dir", default=".")
    p.add_argument("--value", default="score")
    return parser


def _dispatch(args) -> int:
    if args.command == "gen-data":
        spec = envs.make_env(args.env)
        data = envs.generate_dataset(spec, args.tier, args.n, args.seed)
        if args.fraction < 1.0:
            data = envs.subsample(data, args.fraction, args.seed)
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        if out.suffix == ".csv":
            data.to_csv(out)
        else:
            data.save(out)
        print(f"wrote {len(data)} transitions to {out}")
        return EXIT_OK
    if args.command == "train":
        cfg = _experiment_from_args(args)
        table = run_experiment(cfg, args.workers)
        sys.stdout.write(table.to_csv())
        return EXIT_OK
    if args.command == "eval":
        state = agent_mod.load_agent(args.checkpoint)
        spec = envs.make_env(args.env)
        ret, _ = agent_mod.evaluate_policy(state, spec, args.episodes, args.seed)
        score = float(envs.normalized_score(envs.score_scale(args.env), ret))
        print(json.dumps({"return": ret, "score": score}, sort_keys=True))
        return EXIT_OK
    if args.command == "verify-linear":
        summary = verify_linear(args.n_instances, args.d_fraction, args.k_iters, args.seed, args.one_hot)
        text = json.dumps(summary, indent=2, sort_keys=True) + "\n"
        if args.out:
            _write_text(Path(args.out), text)
        sys.stdout.write(text)
        return EXIT_OK if summary["passed"] else EXIT_VERIFY
    if args.command == "sweep-alpha":
        cfg = _experiment_from_args(args)
        table, _ = run_alpha_sweep(cfg, _parse_list(args.alphas), args.workers)
        sys.stdout.write(table.to_csv())
        return EXIT_OK
    if args.command == "fraction-study":
        cfg = _experiment_from_args(args)
        table = run_fraction_study(cfg, _parse_list(args.fractions), workers=args.workers)
        sys.stdout.write(table.to_csv())
        return EXIT_OK
    if args.command == "report":
        table = ResultTable()
        for p in args.results:
            table.extend(ResultTable.from_csv(Path(p).read_text()))
        sys.stdout.write(table.to_markdown() if args.markdown else table.to_csv())
        return EXIT_OK
    if args.command == "plot":
        for p in emit_plots(args.metrics, args.out_dir, args.value):
            print(p)
        return EXIT_OK
    raise AssertionError(args.command)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _dispatch(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
