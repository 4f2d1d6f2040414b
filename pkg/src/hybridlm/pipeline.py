"""Planner -> executor orchestration over the text and latent channels.

Every pairing runs one question at a time against read-only backbones, so
samples can be spread over a thread pool without changing any result.

Models consume a compact token layout rather than the full instruction
prompts (the prompts are rendered into every transcript for inspection):

    planner input    [bos] stem [sep]
    executor input   [bos] plan [sep] question

With no planner the plan slot is empty, giving ``[bos, sep, question]``,
which is also what the latent layout degenerates to at plan length 0.

Token accounting: a text plan costs the number of plan tokens the planner
emitted (diffusion canvases count up to their first eos); a latent plan
always costs its fixed plan length. Executor cost is the number of answer
tokens generated.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .errors import ConfigError
from .models import LanguageModel, canvas_text_ids, greedy_generate, pad_canvas
from .projector import Projector, assemble_executor_input, project
from .prompts import render_executor_prompt, render_planner_prompt
from .sampler import SamplerConfig, denoise, denoise_canvas
from .taskbench import Sample
from .vocab import VocabSpec

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
PLANNERS = ("none", "arm", "ddlm")
EXECUTORS = ("arm", "ddlm")
CHANNELS = ("text", "latent")


@dataclass(frozen=True)
class PairingConfig:
    planner: str
    executor: str
    channel: str = "text"
    plan_len: int = 64
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    max_answer_tokens: int = 12
    answer_steps: int = 4
    text_plan_limit: int | None = None

    def __post_init__(self):
        if self.planner not in PLANNERS:
            raise ConfigError(f"planner must be one of {PLANNERS}, got {self.planner!r}")
        if self.executor not in EXECUTORS:
            raise ConfigError(f"executor must be one of {EXECUTORS}, got {self.executor!r}")
        if self.channel not in CHANNELS:
            raise ConfigError(f"channel must be one of {CHANNELS}, got {self.channel!r}")
        if self.channel == "latent" and (self.planner, self.executor) != ("ddlm", "arm"):
            raise ConfigError("the latent channel needs planner=ddlm and executor=arm")
        if self.sampler.plan_len != self.plan_len:
            raise ConfigError(f"sampler plan_len {self.sampler.plan_len} != pairing plan_len {self.plan_len}")
        if self.max_answer_tokens < 1 or not 1 <= self.answer_steps <= self.max_answer_tokens:
            raise ConfigError("need max_answer_tokens >= 1 and 1 <= answer_steps <= max_answer_tokens")
        if self.text_plan_limit is not None and self.text_plan_limit < 0:
            raise ConfigError("text_plan_limit must be non-negative")

    @property
    def name(self) -> str:
        head = self.executor if self.planner == "none" else f"{self.planner}->{self.executor}"
        tag = f"{head}/{self.channel}"
        if self.planner != "none":
            tag += f"/P{self.plan_len}"
        if self.text_plan_limit is not None and self.channel == "text" and self.planner != "none":
            tag += f"/cut{self.text_plan_limit}"
        return tag

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PairingConfig":
        d = dict(d)
        plan_len = d.get("plan_len", 64)
        sampler = d.pop("sampler", None) or {}
        if isinstance(sampler, dict):
            sampler = SamplerConfig(**{"plan_len": plan_len, **sampler})
        return cls(sampler=sampler, **d)


def standard_pairings(plan_len: int = 64, steps: int = 8, **kw) -> list[PairingConfig]:
    """The six text pairings plus the latent one."""
    sampler = SamplerConfig(plan_len=plan_len, steps=steps)
    combos = [("none", "arm", "text"), ("none", "ddlm", "text"), ("arm", "arm", "text"),
              ("ddlm", "arm", "text"), ("arm", "ddlm", "text"), ("ddlm", "ddlm", "text"),
              ("ddlm", "arm", "latent")]
    return [PairingConfig(p, e, c, plan_len, sampler, **kw) for p, e, c in combos]


@dataclass
class Backbones:
    arm: LanguageModel | None = None
    ddlm: LanguageModel | None = None
    projector: Projector | None = None

    def get(self, role: str) -> LanguageModel:
        m = getattr(self, role)
        if m is None:
            raise ConfigError(f"pairing needs a {role} checkpoint")
        return m


# -- model input layouts ------------------------------------------------------------


def planner_input(stem_ids: Sequence[int], vocab: VocabSpec) -> list[int]:
    return [vocab.bos_id, *stem_ids, vocab.sep_id]


def executor_input(plan_ids: Sequence[int], question_ids: Sequence[int], vocab: VocabSpec) -> list[int]:
    return [vocab.bos_id, *plan_ids, vocab.sep_id, *question_ids]


def arm_corpus(samples: Sequence[Sample], vocab: VocabSpec, roles=("plan", "exec", "direct")) -> list[tuple]:
    """(prompt, target) pairs for the autoregressive model.

    ``plan``: stem -> gold plan. ``exec``: gold plan + question -> answer.
    ``direct``: question -> answer with an empty plan slot.
    """
    out = []
    for s in samples:
        q, a = vocab.encode(s.question), vocab.encode(s.gold)
        if "plan" in roles:
            out.append((planner_input(vocab.encode(s.stem), vocab), vocab.encode(s.plan)))
        if "exec" in roles:
            out.append((executor_input(vocab.encode(s.plan), q, vocab), a))
        if "direct" in roles:
            out.append((executor_input([], q, vocab), a))
    return out


def ddlm_corpus(samples: Sequence[Sample], vocab: VocabSpec, plan_len: int = 64, answer_len: int = 12,
                roles=("plan", "exec", "direct")) -> list[tuple]:
    """(prompt, target canvas) pairs for the diffusion model; canvases are eos-padded."""
    out = []
    for s in samples:
        q, a = vocab.encode(s.question), vocab.encode(s.gold)
        if "plan" in roles:
            out.append((planner_input(vocab.encode(s.stem), vocab), pad_canvas(vocab.encode(s.plan), plan_len, vocab)))
        if "exec" in roles:
            out.append((executor_input(vocab.encode(s.plan), q, vocab), pad_canvas(a, answer_len, vocab)))
        if "direct" in roles:
            out.append((executor_input([], q, vocab), pad_canvas(a, answer_len, vocab)))
    return out


# -- answers ------------------------------------------------------------------------

_INT = re.compile(r"-?\d+")
_LETTER = re.compile(r"(?<![A-Za-z])([A-Da-d])(?![A-Za-z])")


def extract_answer(raw: str, kind: str) -> str | None:
    """Normalized answer, or None when nothing can be extracted."""
    if kind == "mcq":
        found = _LETTER.findall(raw)
        return found[-1].upper() if found else None
    found = _INT.findall(raw)
    if not found:
        return None
    return str(int(found[-1]))


def sample_seed(run_seed: int, sample_id: str) -> int:
    digest = hashlib.sha256(f"{run_seed}:{sample_id}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


# -- transcripts --------------------------------------------------------------------


@dataclass
class TranscriptRecord:
    sample_id: str
    kind: str
    level: int
    question: str
    plan: str | None
    plan_kind: str
    answer: str
    extracted: str | None
    gold: str
    correct: bool
    planner_tokens: int
    executor_tokens: int
    truncated: bool
    pairing: dict
    seed: int
    planner_prompt: str | None = None
    executor_prompt: str | None = None
    error: str | None = None
    schema_version: int = SCHEMA_VERSION

    @property
    def total_tokens(self) -> int:
        return self.planner_tokens + self.executor_tokens

    @property
    def unparseable(self) -> bool:
        return self.error is None and self.extracted is None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, ensure_ascii=False)

    @classmethod
    def from_json(cls, line: str) -> "TranscriptRecord":
        d = json.loads(line)
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ConfigError("unsupported transcript schema")
        return cls(**d)


def read_transcripts(path) -> list[TranscriptRecord]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [TranscriptRecord.from_json(line) for line in lines if line.strip()]


def transcripts_text(records: Sequence[TranscriptRecord]) -> str:
    return "".join(r.to_json() + "\n" for r in records)


# -- one sample ---------------------------------------------------------------------


def _latent_ref(hidden: np.ndarray) -> str:
    h = hashlib.sha256(np.ascontiguousarray(hidden, dtype="<f4").tobytes()).hexdigest()[:16]
    return f"latent:{hidden.shape[0]}x{hidden.shape[1]}:{h}"


def _make_plan(pairing: PairingConfig, models: Backbones, stem_ids: list[int], vocab: VocabSpec):
    """Returns (plan ids, planner token count, hidden or None)."""
    prompt = planner_input(stem_ids, vocab)
    if pairing.planner == "arm":
        ids, _ = greedy_generate(models.get("arm"), prompt, pairing.plan_len)
        return ids, len(ids), None
    tokens, hidden, _ = denoise(models.get("ddlm"), prompt, pairing.sampler)
    ids = canvas_text_ids(tokens, vocab)
    if pairing.channel == "latent":
        return ids, pairing.plan_len, hidden
    return ids, len(ids), None


def _fit_plan(plan_ids: list[int], q_ids: list[int], budget: int) -> tuple[list[int], bool]:
    room = budget - len(q_ids) - 2
    if room < 0:
        raise ConfigError(f"question of {len(q_ids)} tokens leaves no room in the executor context")
    if len(plan_ids) > room:
        return plan_ids[:room], True
    return plan_ids, False


def run_sample(pairing: PairingConfig, sample: Sample, models: Backbones, run_seed: int = 0) -> TranscriptRecord:
    exec_model = models.get(pairing.executor)
    vocab = exec_model.vocab
    if pairing.channel == "latent" and models.projector is None:
        raise ConfigError("latent channel needs a trained projector")
    q_ids = vocab.encode(sample.question)
    planner_tokens, plan_text, plan_kind = 0, None, "none"
    planner_prompt = None
    plan_ids: list[int] = []
    hidden = None
    truncated = False

    if pairing.planner != "none":
        planner_prompt = render_planner_prompt(sample.stem)
        plan_ids, planner_tokens, hidden = _make_plan(pairing, models, vocab.encode(sample.stem), vocab)
        if pairing.channel == "text":
            plan_text = vocab.decode(plan_ids)
            plan_ids = vocab.encode(plan_text)
            if pairing.text_plan_limit is not None:
                plan_ids = plan_ids[: pairing.text_plan_limit]
                plan_text = vocab.decode(plan_ids)
            plan_kind = "text"
        else:
            plan_text, plan_kind = _latent_ref(hidden), "latent"

    executor_prompt = None
    answer_budget = pairing.max_answer_tokens
    if pairing.channel == "latent":
        with ad.no_grad():
            x = assemble_executor_input(project(models.projector, hidden), q_ids, exec_model)
        answer_ids, hit_eos = greedy_generate(exec_model, x.data, answer_budget)
        truncated = not hit_eos
    else:
        executor_prompt = render_executor_prompt(plan_text or "", sample.question)
        # the plan gives way so the full answer budget always fits
        plan_ids, cut = _fit_plan(plan_ids, q_ids, exec_model.config.max_len - answer_budget)
        prompt = executor_input(plan_ids, q_ids, vocab)
        if pairing.executor == "arm":
            answer_ids, hit_eos = greedy_generate(exec_model, prompt, answer_budget)
        else:
            canvas, _, _ = denoise_canvas(exec_model, prompt, answer_budget, pairing.answer_steps, keep_trace=False)
            answer_ids = canvas_text_ids(canvas, vocab)
            hit_eos = len(answer_ids) < answer_budget
        truncated = cut or not hit_eos

    answer = vocab.decode(answer_ids)
    extracted = extract_answer(answer, sample.kind)
    return TranscriptRecord(
        sample_id=sample.id, kind=sample.kind, level=sample.level, question=sample.question,
        plan=plan_text, plan_kind=plan_kind, answer=answer, extracted=extracted, gold=sample.gold,
        correct=extracted is not None and extracted == sample.gold,
        planner_tokens=planner_tokens, executor_tokens=len(answer_ids), truncated=truncated,
        pairing=pairing.to_dict(), seed=sample_seed(run_seed, sample.id),
        planner_prompt=planner_prompt, executor_prompt=executor_prompt,
    )


# -- whole runs ---------------------------------------------------------------------


@dataclass
class RunResult:
    pairing: str
    n: int
    n_correct: int
    n_errors: int
    n_unparseable: int
    n_truncated: int
    accuracy: float
    mean_planner_tokens: int
    mean_executor_tokens: int
    mean_planner_tokens_exact: float
    mean_executor_tokens_exact: float
    transcript: str | None = None
    benchmark: str = "all"
    schema_version: int = SCHEMA_VERSION

    @property
    def total_tokens(self) -> int:
        return self.mean_planner_tokens + self.mean_executor_tokens

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "RunResult":
        d = json.loads(line)
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ConfigError("unsupported run-result schema")
        return cls(**d)


def _errored(pairing: PairingConfig, sample: Sample, run_seed: int, exc: Exception) -> TranscriptRecord:
    return TranscriptRecord(
        sample_id=sample.id, kind=sample.kind, level=sample.level, question=sample.question, plan=None,
        plan_kind="none", answer="", extracted=None, gold=sample.gold, correct=False, planner_tokens=0,
        executor_tokens=0, truncated=False, pairing=pairing.to_dict(), seed=sample_seed(run_seed, sample.id),
        error=f"{type(exc).__name__}: {exc}",
    )


def summarize(pairing: PairingConfig | str, records: Sequence[TranscriptRecord], transcript=None,
              benchmark: str = "all") -> RunResult:
    n = len(records)
    planner = float(np.mean([r.planner_tokens for r in records])) if n else 0.0
    executor = float(np.mean([r.executor_tokens for r in records])) if n else 0.0
    correct = sum(r.correct for r in records)
    return RunResult(
        pairing=pairing if isinstance(pairing, str) else pairing.name,
        n=n, n_correct=correct, n_errors=sum(r.error is not None for r in records),
        n_unparseable=sum(r.unparseable for r in records), n_truncated=sum(r.truncated for r in records),
        accuracy=correct / n if n else 0.0,
        mean_planner_tokens=int(round(planner)), mean_executor_tokens=int(round(executor)),
        mean_planner_tokens_exact=planner, mean_executor_tokens_exact=executor,
        transcript=None if transcript is None else str(transcript),
        benchmark=benchmark,
    )


def summarize_by_benchmark(pairing: PairingConfig | str, records: Sequence[TranscriptRecord],
                           transcript=None) -> list[RunResult]:
    """One result per (kind, level) group, sorted by benchmark name."""
    groups: dict[str, list[TranscriptRecord]] = {}
    for r in records:
        groups.setdefault(f"{r.kind}-{r.level}", []).append(r)
    return [summarize(pairing, groups[b], transcript, b) for b in sorted(groups)]


def run_benchmark(
    pairing: PairingConfig,
    dataset: Sequence[Sample],
    models: Backbones,
    parallelism: int = 1,
    run_seed: int = 0,
    transcript_path=None,
) -> tuple[RunResult, list[TranscriptRecord]]:
    """Run every sample; a failing sample is recorded as errored and the run continues."""
    if not dataset:
        raise ConfigError("empty dataset")
    if parallelism < 1:
        raise ConfigError("parallelism must be >= 1")
    models.get(pairing.executor)
    if pairing.planner != "none":
        models.get(pairing.planner)
    if pairing.channel == "latent" and models.projector is None:
        raise ConfigError("latent channel needs a trained projector")
    for name in ("arm", "ddlm"):
        m = getattr(models, name)
        if m is not None:
            m.freeze()

    def one(sample: Sample) -> TranscriptRecord:
        try:
            return run_sample(pairing, sample, models, run_seed)
        except Exception as exc:  # recorded per sample
            log.warning("sample %s failed: %s", sample.id, exc)
            return _errored(pairing, sample, run_seed, exc)

    if parallelism == 1:
        records = [one(s) for s in dataset]
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            records = list(pool.map(one, dataset))
    if transcript_path is not None:
        Path(transcript_path).write_text(transcripts_text(records), encoding="utf-8")
    return summarize(pairing, records, transcript_path), records
