"""Failure attribution, plan repetition metrics and the accuracy/cost frontier.

Metric conventions (fixed so scores compare across runs): tokens are
whitespace-separated, sentences end at ``.``, ``!`` or ``?``, and
percentages are reported to two decimals.
"""

from __future__ import annotations

import csv
import io
import json
import re
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Iterable, Mapping, Sequence

from .errors import AlignmentError, ConfigError

SCHEMA_VERSION = 1
SETUP_KEYS = ("ddlm->arm", "arm->arm", "ddlm->ddlm")
_SENTENCE_END = re.compile(r"[.!?]")


# -- failure attribution ------------------------------------------------------------


@dataclass
class BenchmarkDiagnosis:
    benchmark: str
    incorrect: int
    setup_x: int
    setup_y: int
    planner_issue_pct: float | None
    executor_issue_pct: float | None

    @property
    def error_gap(self) -> float | None:
        if self.planner_issue_pct is None:
            return None
        return abs(self.planner_issue_pct - self.executor_issue_pct)


@dataclass
class DiagnosticReport:
    rows: list[BenchmarkDiagnosis]

    def by_benchmark(self) -> dict[str, BenchmarkDiagnosis]:
        return {r.benchmark: r for r in self.rows}

    def to_lines(self) -> str:
        out = []
        for r in self.rows:
            d = asdict(r)
            d["error_gap"] = r.error_gap
            d["schema_version"] = SCHEMA_VERSION
            out.append(json.dumps(d, sort_keys=True))
        return "".join(line + "\n" for line in out)

    def render(self) -> str:
        rows = [(r.benchmark, fmt_pct(r.planner_issue_pct), fmt_pct(r.executor_issue_pct), fmt_pct(r.error_gap))
                for r in self.rows]
        return render_table(("Benchmark", "Planning failures (%)", "Execution failures (%)", "Error gap (%)"), rows)


def benchmark_name(kind: str, level: int) -> str:
    return f"{kind}-{level}"


def percentage(count: int, incorrect: int) -> float | None:
    """100 * count / incorrect, absent when nothing was incorrect."""
    if incorrect == 0:
        return None
    return 100.0 * count / incorrect


def _index(records, label: str) -> dict:
    out = {}
    for r in records:
        if r.sample_id in out:
            raise AlignmentError(f"{label}: duplicate sample id {r.sample_id}")
        out[r.sample_id] = r
    return out


def diagnose(runs: Mapping[str, Sequence]) -> DiagnosticReport:
    """Setup X / Setup Y attribution over three aligned runs.

    ``runs`` maps "ddlm->arm", "arm->arm" (same executor, planner swapped
    for the autoregressive model) and "ddlm->ddlm" to transcript records
    (anything with sample_id, kind, level, correct and seed). Setup X counts
    samples wrong under ddlm->arm but right once the planner is swapped;
    Setup Y counts samples right under ddlm->ddlm but wrong under ddlm->arm.
    Both are reported as a share of the ddlm->arm failures per benchmark.
    """
    missing = [k for k in SETUP_KEYS if k not in runs]
    if missing:
        raise ConfigError(f"diagnose needs runs for {SETUP_KEYS}; missing {missing}")
    idx = {k: _index(runs[k], k) for k in SETUP_KEYS}
    ref = set(idx["ddlm->arm"])
    problems = []
    for k in SETUP_KEYS[1:]:
        ids = set(idx[k])
        if ids != ref:
            problems.append(f"{k}: missing {sorted(ref - ids)} extra {sorted(ids - ref)}")
    if problems:
        raise AlignmentError("runs cover different samples; " + "; ".join(problems))
    for sid in ref:
        seeds = {idx[k][sid].seed for k in SETUP_KEYS}
        if len(seeds) > 1:
            raise AlignmentError(f"sample {sid} was run with different seeds across setups")

    tallies: dict[str, list[int]] = {}
    for sid in sorted(ref):
        main = idx["ddlm->arm"][sid]
        t = tallies.setdefault(benchmark_name(main.kind, main.level), [0, 0, 0])
        if main.correct:
            continue
        t[0] += 1
        t[1] += bool(idx["arm->arm"][sid].correct)
        t[2] += bool(idx["ddlm->ddlm"][sid].correct)
    rows = [BenchmarkDiagnosis(b, inc, x, y, percentage(x, inc), percentage(y, inc))
            for b, (inc, x, y) in sorted(tallies.items())]
    return DiagnosticReport(rows)


# -- repetition metrics ------------------------------------------------------------


def ngrams(tokens: Sequence[str], n: int) -> list[tuple[str, ...]]:
    return [tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)]


def distinct3(text: str) -> float | None:
    """Unique share of word trigrams, in percent; absent below three tokens."""
    grams = ngrams(text.split(), 3)
    if not grams:
        return None
    return 100.0 * len(set(grams)) / len(grams)


def sentences(text: str) -> list[str]:
    return [s for s in _SENTENCE_END.split(text) if s.strip()]


def repetition4(text: str, min_repeated: int = 1) -> float | None:
    """Percent of sentences holding at least ``min_repeated`` distinct 4-grams seen more than once.

    Every sentence counts in the denominator; sentences under four tokens
    score 0. Absent when no sentence reaches four tokens.
    """
    sents = [s.split() for s in sentences(text)]
    if not any(len(s) >= 4 for s in sents):
        return None
    hits = 0
    for s in sents:
        counts = Counter(ngrams(s, 4))
        hits += sum(c > 1 for c in counts.values()) >= min_repeated
    return 100.0 * hits / len(sents)


def lexical_repetition(corpus: str | Iterable[str], n: int = 2, denominator: str = "types") -> float | None:
    """Percent of 4-grams occurring at least ``n`` times over the corpus.

    ``denominator="types"`` averages over distinct 4-grams; ``"tokens"``
    averages over every 4-gram occurrence instead. 4-grams never span two
    texts. Absent when the corpus holds no 4-gram.
    """
    if n < 2:
        raise ConfigError(f"LR-n needs n >= 2, got {n}")
    if denominator not in ("types", "tokens"):
        raise ConfigError(f"unknown denominator {denominator!r}")
    texts = [corpus] if isinstance(corpus, str) else list(corpus)
    counts: Counter = Counter()
    for t in texts:
        counts.update(ngrams(t.split(), 4))
    if not counts:
        return None
    if denominator == "types":
        return 100.0 * sum(c >= n for c in counts.values()) / len(counts)
    return 100.0 * sum(c for c in counts.values() if c >= n) / sum(counts.values())


@dataclass
class RepetitionReport:
    d3: float | None
    r4: float | None
    lr_n: float | None
    n: int
    texts: int

    def to_json(self) -> str:
        return json.dumps({**asdict(self), "schema_version": SCHEMA_VERSION}, sort_keys=True)

    def render(self) -> str:
        return render_table(("Texts", "D-3", "R-4", f"LR-{self.n}"),
                            [(str(self.texts), fmt_pct(self.d3), fmt_pct(self.r4), fmt_pct(self.lr_n))])


def _mean(values) -> float | None:
    vals = [v for v in values if v is not None]
    return sum(vals) / len(vals) if vals else None


def repetition_report(texts: Sequence[str], n: int = 2) -> RepetitionReport:
    """Per-text D-3 and R-4 averaged over texts; LR-n over the whole corpus."""
    return RepetitionReport(
        d3=_mean(distinct3(t) for t in texts),
        r4=_mean(repetition4(t) for t in texts),
        lr_n=lexical_repetition(texts, n),
        n=n,
        texts=len(texts),
    )


# -- frontier ----------------------------------------------------------------------


@dataclass(frozen=True)
class FrontierPoint:
    name: str
    tokens: float
    accuracy: float


def as_point(r) -> FrontierPoint:
    if isinstance(r, FrontierPoint):
        return r
    return FrontierPoint(r.pairing, r.mean_planner_tokens_exact + r.mean_executor_tokens_exact, r.accuracy)


def dominates(a: FrontierPoint, b: FrontierPoint) -> bool:
    return a.tokens <= b.tokens and a.accuracy >= b.accuracy and (a.tokens < b.tokens or a.accuracy > b.accuracy)


def frontier(results: Sequence) -> list[FrontierPoint]:
    """Pareto points under (fewer tokens, higher accuracy), by tokens ascending."""
    if not results:
        raise ConfigError("frontier needs at least one result")
    pts = sorted((as_point(r) for r in results), key=lambda p: (p.tokens, -p.accuracy, p.name))
    out: list[FrontierPoint] = []
    best = None
    for p in pts:
        # sorted by tokens, so p is dominated iff an earlier point is at least as accurate
        # (strictly fewer tokens) or a same-token point is strictly more accurate
        if best is not None and (best.accuracy > p.accuracy or (best.accuracy == p.accuracy and best.tokens < p.tokens)):
            continue
        out.append(p)
        if best is None or p.accuracy > best.accuracy:
            best = p
    return out


# -- rendering ---------------------------------------------------------------------


def fmt_pct(x: float | None) -> str:
    return "-" if x is None else f"{x:.2f}"


def render_table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    """Aligned plain-text table; first column left-aligned, the rest right-aligned."""
    cols = list(zip(*([tuple(header)] + [tuple(r) for r in rows])))
    widths = [max(len(c) for c in col) for col in cols]

    def line(cells):
        parts = [cells[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(cells[1:], widths[1:])]
        return "  ".join(parts).rstrip()

    rule = "  ".join("-" * w for w in widths)
    return "\n".join([line(header), rule] + [line(r) for r in rows]) + "\n"


def frontier_csv(results: Sequence) -> str:
    pts = [as_point(r) for r in results]
    on = set(frontier(pts))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["pairing", "total_tokens", "accuracy_pct", "on_frontier"])
    for p in sorted(pts, key=lambda p: (p.tokens, p.name)):
        w.writerow([p.name, f"{p.tokens:.2f}", f"{100 * p.accuracy:.2f}", int(p in on)])
    return buf.getvalue()


def accuracy_table(results: Mapping[str, Mapping[str, object]]) -> str:
    """Pairings by benchmarks; ``results[pairing][benchmark]`` is a RunResult."""
    benches = sorted({b for per in results.values() for b in per})
    rows = []
    for name, per in results.items():
        rows.append([name] + [fmt_pct(100 * per[b].accuracy) if b in per else "-" for b in benches])
    return render_table(["Pairing"] + benches, rows)


def cost_table(results: Sequence) -> str:
    rows = []
    for r in results:
        rows.append((r.pairing, fmt_pct(100 * r.accuracy), str(r.mean_planner_tokens), str(r.mean_executor_tokens),
                     str(r.mean_planner_tokens + r.mean_executor_tokens)))
    return render_table(("Pairing", "Accuracy (%)", "Planner tokens", "Executor tokens", "Total"), rows)
