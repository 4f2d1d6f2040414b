"""Synthetic, difficulty-graded reasoning tasks.

Two kinds:

``arith-chain``
    Level L is an integer expression of L+1 operands drawn from [0, 10**L]
    joined by ``+``, ``-`` or ``*`` with the usual precedence. The gold
    answer is the exact integer value. The gold plan lists the reduction
    steps with the final result hidden as ``?``.

``mcq``
    A two-operand expression (operands in [0, 100]) with four numeric
    options, exactly one correct. Level controls how close the three
    distractors sit to the true value. Gold is the option letter; the plan
    gives the units digit and the value rounded to the nearest hundred.
"""

from __future__ import annotations

import ast
import hashlib
import json
import operator
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import ConfigError, GenerationError
from .vocab import DEFAULT_VOCAB, VocabSpec

KINDS = ("arith-chain", "mcq")
LEVELS = (1, 2, 3, 4, 5)
OPS = ("+", "-", "*")
LETTERS = "ABCD"
SCHEMA_VERSION = 1
MAX_RETRIES = 100

# distractor offset range |delta| per mcq level: far apart at level 1, adjacent at 5
MCQ_DELTA = {1: (100, 999), 2: (30, 99), 3: (10, 29), 4: (3, 9), 5: (1, 2)}


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    level: int
    size: int
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown task kind {self.kind!r}; expected one of {KINDS}")
        if self.level not in LEVELS:
            raise ConfigError(f"level must be in 1..5, got {self.level}")
        if self.size < 1:
            raise ConfigError("size must be >= 1")


@dataclass(frozen=True)
class Sample:
    id: str
    kind: str
    level: int
    question: str
    gold: str
    plan: str

    @property
    def stem(self) -> str:
        """Question without the option list (what the planner is shown)."""
        if self.kind == "mcq":
            return self.question.split(" A)")[0]
        return self.question


# -- arithmetic -------------------------------------------------------------------


def _apply(a: int, op: str, b: int) -> int:
    return a + b if op == "+" else a - b if op == "-" else a * b


def reduce_steps(operands: list[int], ops: list[str]) -> tuple[int, list[str]]:
    """Evaluate with precedence, returning the value and one string per step."""
    vals, pending, steps = [operands[0]], [], []
    for op, b in zip(ops, operands[1:]):
        if op == "*":
            a = vals.pop()
            r = a * b
            steps.append(f"{a} * {b} = {r}")
            vals.append(r)
        else:
            pending.append(op)
            vals.append(b)
    acc = vals[0]
    for op, b in zip(pending, vals[1:]):
        r = _apply(acc, op, b)
        steps.append(f"{acc} {op} {b} = {r}")
        acc = r
    return acc, steps


_AST_OPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul}


def evaluate_expression(expr: str) -> int:
    """Independent integer evaluator (Python's parser) used to verify golds."""
    def walk(node):
        if isinstance(node, ast.Expression):
            return walk(node.body)
        if isinstance(node, ast.BinOp) and type(node.op) in _AST_OPS:
            return _AST_OPS[type(node.op)](walk(node.left), walk(node.right))
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, ast.USub):
            return -walk(node.operand)
        if isinstance(node, ast.Constant) and isinstance(node.value, int):
            return node.value
        raise ValueError(f"unsupported expression element: {ast.dump(node)}")

    return walk(ast.parse(expr.rstrip("=?").strip(), mode="eval"))


def _hide_last(steps: list[str]) -> str:
    last = steps[-1].rsplit("=", 1)[0] + "= ?"
    return ". ".join(steps[:-1] + [last])


def _arith_sample(rng: np.random.Generator, level: int) -> tuple[str, str, str]:
    n = level + 1
    hi = 10 ** level
    operands = [int(x) for x in rng.integers(0, hi + 1, size=n)]
    ops = [OPS[int(i)] for i in rng.integers(0, len(OPS), size=n - 1)]
    expr = str(operands[0]) + "".join(f"{o}{b}" for o, b in zip(ops, operands[1:]))
    value, steps = reduce_steps(operands, ops)
    if evaluate_expression(expr) != value:
        raise GenerationError(f"gold mismatch for {expr}: {value} vs {evaluate_expression(expr)}")
    return f"{expr}=", str(value), _hide_last(steps)


def _mcq_sample(rng: np.random.Generator, level: int) -> tuple[str, str, str]:
    a, b = (int(x) for x in rng.integers(0, 101, size=2))
    op = OPS[int(rng.integers(0, len(OPS)))]
    expr = f"{a}{op}{b}"
    value = _apply(a, op, b)
    if evaluate_expression(expr) != value:
        raise GenerationError(f"gold mismatch for {expr}")
    lo, hi = MCQ_DELTA[level]
    options = {value}
    while len(options) < 4:
        delta = int(rng.integers(lo, hi + 1)) * (1 if rng.random() < 0.5 else -1)
        options.add(value + delta)
    opts = sorted(options)
    rng.shuffle(opts)
    letter = LETTERS[opts.index(value)]
    listing = " ".join(f"{LETTERS[i]}){v}" for i, v in enumerate(opts))
    plan = f"UNITS {abs(value) % 10}. NEAR {int(round(value / 100.0)) * 100}."
    return f"{expr}=? {listing}", letter, plan


def generate(spec: TaskSpec, unique: bool = True, vocab: VocabSpec = DEFAULT_VOCAB) -> list[Sample]:
    """Deterministic sample list for ``spec``.

    With ``unique`` (the default) questions are deduplicated by text; a level
    whose question space is smaller than ``spec.size`` then fails after
    ``MAX_RETRIES`` consecutive collisions. ``unique=False`` samples with
    replacement, which is how small levels are inflated to large corpora.
    """
    rng = np.random.default_rng([spec.seed, KINDS.index(spec.kind), spec.level])
    make = _arith_sample if spec.kind == "arith-chain" else _mcq_sample
    seen: set[str] = set()
    out: list[Sample] = []
    retries = 0
    while len(out) < spec.size:
        question, gold, plan = make(rng, spec.level)
        if (unique and question in seen) or not (vocab.can_encode(question) and vocab.can_encode(plan)):
            retries += 1
            if retries >= MAX_RETRIES:
                raise GenerationError(
                    f"gave up after {MAX_RETRIES} retries at {len(out)}/{spec.size} samples "
                    f"({spec.kind} level {spec.level})"
                )
            continue
        retries = 0
        seen.add(question)
        sid = f"{spec.kind}-L{spec.level}-s{spec.seed}-{len(out):05d}"
        out.append(Sample(sid, spec.kind, spec.level, question, gold, plan))
    return out


# -- splits -----------------------------------------------------------------------


def _bucket(key: str, salt: str = "") -> int:
    return int(hashlib.sha256(f"{salt}:{key}".encode()).hexdigest()[:8], 16) % 10


def is_heldout(key, salt: str = "") -> bool:
    """Deterministic 10% held-out membership by hash of a sample id or index."""
    return _bucket(str(key), salt) == 0


def split(samples: Iterable[Sample], salt: str = "") -> tuple[list[Sample], list[Sample]]:
    train, held = [], []
    for s in samples:
        (held if is_heldout(s.id, salt) else train).append(s)
    return train, held


# -- persistence ------------------------------------------------------------------


def sample_to_json(s: Sample) -> str:
    return json.dumps({"schema_version": SCHEMA_VERSION, **asdict(s)}, sort_keys=True)


def dataset_text(samples: Iterable[Sample]) -> str:
    return "".join(sample_to_json(s) + "\n" for s in samples)


def write_dataset(samples: Iterable[Sample], path) -> None:
    Path(path).write_text(dataset_text(samples), encoding="utf-8")


def read_dataset(path) -> list[Sample]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        if d.pop("schema_version", None) != SCHEMA_VERSION:
            raise ConfigError(f"{path}: unsupported dataset schema")
        out.append(Sample(**d))
    return out
