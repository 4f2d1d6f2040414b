"""Experiment configuration: one YAML document, validated strictly.

Grammar (every key optional unless marked required)::

    schema_version: 1                 # required
    seed: 0                           # default seed for data, init, shuffles and runs
    output_dir: out                   # relative to the config file's directory
    parallel: 1                       # worker threads for `run`
    tasks:                            # required, at least one
      - name: arith1                  # required, unique
        kind: arith-chain             # required: arith-chain | mcq
        level: 1                      # required: 1..5
        size: 1000                    # required
        seed: 0                       # defaults to the top-level seed
        unique: true                  # false samples with replacement
    models:
      arm:  {d_model, n_layers, n_heads, d_ff, max_len}
      ddlm: {d_model, n_layers, n_heads, d_ff, max_len}
    training:
      arm:       {tasks, epochs, lr, batch_size, roles, eval_limit}
      ddlm:      {tasks, epochs, lr, batch_size, roles, eval_limit, answer_len}
      projector: {tasks, epochs, lr, batch_size, eval_limit, d_hidden, limit}
    sampler: {plan_len: 64, steps: 8}
    pairings:                         # defaults to the seven standard pairings
      - {planner, executor, channel, plan_len, steps, max_answer_tokens, answer_steps, text_plan_limit}
    eval: {tasks, limit}              # held-out split of these tasks
    metrics: {n: 2}

Environment overrides: HYBRIDLM_OUTPUT_DIR (output directory) and
HYBRIDLM_PARALLEL (worker threads). Nothing else is read from the
environment.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError
from .models import ModelConfig
from .pipeline import PairingConfig, standard_pairings
from .sampler import SamplerConfig
from .taskbench import TaskSpec

SCHEMA_VERSION = 1
ROLES = ("plan", "exec", "direct")

_TOP = {"schema_version", "seed", "output_dir", "parallel", "tasks", "models", "training", "sampler",
        "pairings", "eval", "metrics"}
_TASK = {"name", "kind", "level", "size", "seed", "unique"}
_MODEL = {"d_model", "n_layers", "n_heads", "d_ff", "max_len"}
_TRAIN = {
    "arm": {"tasks", "epochs", "lr", "batch_size", "roles", "eval_limit"},
    "ddlm": {"tasks", "epochs", "lr", "batch_size", "roles", "eval_limit", "answer_len"},
    "projector": {"tasks", "epochs", "lr", "batch_size", "eval_limit", "d_hidden", "limit"},
}
_SAMPLER = {"plan_len", "steps"}
_PAIRING = {"planner", "executor", "channel", "plan_len", "steps", "max_answer_tokens", "answer_steps",
            "text_plan_limit"}
_EVAL = {"tasks", "limit"}
_METRICS = {"n"}

TRAIN_DEFAULTS = {
    "arm": {"epochs": 20, "lr": 2e-3, "batch_size": 64, "roles": list(ROLES), "eval_limit": 200},
    "ddlm": {"epochs": 40, "lr": 2e-3, "batch_size": 64, "roles": list(ROLES), "eval_limit": 200, "answer_len": 12},
    "projector": {"epochs": 20, "lr": 1e-3, "batch_size": 32, "eval_limit": 200, "d_hidden": None, "limit": None},
}
MODEL_DEFAULTS = {
    "arm": {"d_model": 96, "n_layers": 4, "n_heads": 4, "d_ff": 384, "max_len": 192},
    "ddlm": {"d_model": 128, "n_layers": 4, "n_heads": 4, "d_ff": 512, "max_len": 192},
}


@dataclass
class TaskEntry:
    name: str
    spec: TaskSpec
    unique: bool = True


@dataclass
class ExperimentConfig:
    path: Path
    seed: int
    output_dir: Path
    parallel: int
    tasks: dict[str, TaskEntry]
    models: dict[str, ModelConfig]
    training: dict[str, dict]
    sampler: SamplerConfig
    pairings: list[PairingConfig]
    eval_tasks: list[str]
    eval_limit: int | None
    metrics_n: int = 2
    raw: dict = field(default_factory=dict)


def _check_keys(d, allowed: set, where: str) -> dict:
    if d is None:
        return {}
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(d).__name__}")
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    return d


def _int(v, where: str, lo: int | None = None) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{where}: expected an integer, got {v!r}")
    if lo is not None and v < lo:
        raise ConfigError(f"{where}: must be >= {lo}, got {v}")
    return v


def _task_names(names, known: dict, where: str) -> list[str]:
    if names is None:
        return list(known)
    if not isinstance(names, list) or not names:
        raise ConfigError(f"{where}: expected a nonempty list of task names")
    for n in names:
        if n not in known:
            raise ConfigError(f"{where}: unknown task {n!r}")
    return list(names)


def parse_config(raw: dict, path: Path, seed: int | None = None, parallel: int | None = None,
                 output_dir: str | None = None, env=None) -> ExperimentConfig:
    env = os.environ if env is None else env
    raw = _check_keys(raw, _TOP, "config")
    if raw.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"config: schema_version must be {SCHEMA_VERSION}, got {raw.get('schema_version')!r}")
    base = path.parent
    seed = _int(raw.get("seed", 0) if seed is None else seed, "seed", 0)

    out = output_dir or env.get("HYBRIDLM_OUTPUT_DIR") or raw.get("output_dir", "out")
    out_path = Path(out)
    if not out_path.is_absolute():
        out_path = base / out_path
    par = parallel if parallel is not None else env.get("HYBRIDLM_PARALLEL", raw.get("parallel", 1))
    try:
        par = int(par)
    except (TypeError, ValueError):
        raise ConfigError(f"parallel: expected an integer, got {par!r}") from None
    if par < 1:
        raise ConfigError("parallel must be >= 1")

    tasks: dict[str, TaskEntry] = {}
    entries = raw.get("tasks")
    if not isinstance(entries, list) or not entries:
        raise ConfigError("tasks: expected a nonempty list")
    for i, t in enumerate(entries):
        t = _check_keys(t, _TASK, f"tasks[{i}]")
        for key in ("name", "kind", "level", "size"):
            if key not in t:
                raise ConfigError(f"tasks[{i}]: missing {key!r}")
        name = str(t["name"])
        if name in tasks:
            raise ConfigError(f"tasks: duplicate name {name!r}")
        spec = TaskSpec(t["kind"], _int(t["level"], f"tasks[{i}].level"), _int(t["size"], f"tasks[{i}].size", 1),
                        _int(t.get("seed", seed), f"tasks[{i}].seed", 0))
        tasks[name] = TaskEntry(name, spec, bool(t.get("unique", True)))

    models = {}
    mraw = _check_keys(raw.get("models"), {"arm", "ddlm"}, "models")
    for role, mode in (("arm", "autoregressive"), ("ddlm", "diffusion")):
        m = {**MODEL_DEFAULTS[role], **_check_keys(mraw.get(role), _MODEL, f"models.{role}")}
        models[role] = ModelConfig(mode=mode, **{k: _int(v, f"models.{role}.{k}", 1) for k, v in m.items()})

    training = {}
    traw = _check_keys(raw.get("training"), set(_TRAIN), "training")
    for target, allowed in _TRAIN.items():
        t = {**TRAIN_DEFAULTS[target], **_check_keys(traw.get(target), allowed, f"training.{target}")}
        t["tasks"] = _task_names(t.get("tasks"), tasks, f"training.{target}.tasks")
        t["epochs"] = _int(t["epochs"], f"training.{target}.epochs", 0)
        t["batch_size"] = _int(t["batch_size"], f"training.{target}.batch_size", 1)
        if not isinstance(t["lr"], (int, float)) or t["lr"] < 0:
            raise ConfigError(f"training.{target}.lr: expected a non-negative number")
        for r in t.get("roles", []):
            if r not in ROLES:
                raise ConfigError(f"training.{target}.roles: unknown role {r!r}")
        training[target] = t

    s = _check_keys(raw.get("sampler"), _SAMPLER, "sampler")
    sampler = SamplerConfig(plan_len=_int(s.get("plan_len", 64), "sampler.plan_len"),
                            steps=_int(s.get("steps", 8), "sampler.steps", 1))

    pairings = []
    praw = raw.get("pairings")
    if praw is None:
        pairings = standard_pairings(sampler.plan_len, sampler.steps)
    else:
        if not isinstance(praw, list) or not praw:
            raise ConfigError("pairings: expected a nonempty list")
        for i, p in enumerate(praw):
            p = dict(_check_keys(p, _PAIRING, f"pairings[{i}]"))
            plan_len = p.pop("plan_len", sampler.plan_len)
            steps = p.pop("steps", sampler.steps)
            try:
                pairings.append(PairingConfig(plan_len=plan_len, sampler=SamplerConfig(plan_len, steps), **p))
            except TypeError as exc:
                raise ConfigError(f"pairings[{i}]: {exc}") from None
    names = [p.name for p in pairings]
    if len(set(names)) != len(names):
        raise ConfigError("pairings: duplicate entries")

    e = _check_keys(raw.get("eval"), _EVAL, "eval")
    eval_tasks = _task_names(e.get("tasks"), tasks, "eval.tasks")
    limit = e.get("limit")
    if limit is not None:
        limit = _int(limit, "eval.limit", 1)
    mets = _check_keys(raw.get("metrics"), _METRICS, "metrics")
    n = _int(mets.get("n", 2), "metrics.n", 2)

    return ExperimentConfig(path, seed, out_path, par, tasks, models, training, sampler, pairings,
                            eval_tasks, limit, n, raw)


def load_config(path, **overrides) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from None
    return parse_config(raw, path, **overrides)
