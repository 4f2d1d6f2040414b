"""Command-line entry point.

Output layout under the configured output directory::

    MANIFEST                          sha256 and relative path of every artifact
    data/<task>.jsonl                 generated datasets
    checkpoints/{arm,ddlm}.ckpt       backbones
    checkpoints/projector-P<n>.ckpt   projector for plan length n
    reports/train-<target>.json       training reports
    runs/<run id>/transcripts.jsonl   one record per evaluated sample
    runs/<run id>/results.jsonl       overall result, then one per benchmark
    reports/...                       diagnosis, metrics, frontier, tables

Artifacts are write-once: rewriting identical bytes is a no-op, anything
else is a collision. Only MANIFEST is rewritten as artifacts are added.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import re
import sys
from pathlib import Path

from . import analysis, taskbench
from .config import ExperimentConfig, load_config
from .errors import (AlignmentError, CollisionError, ConfigError, DegenerateLossError, DimensionError,
                     FrozenViolation, GenerationError, LengthError)
from .models import LanguageModel, train_arm, train_ddlm
from .pipeline import (Backbones, PairingConfig, RunResult, arm_corpus, ddlm_corpus, planner_input,
                       read_transcripts, run_benchmark, summarize_by_benchmark, transcripts_text)
from .projector import Projector, build_trainset, train_projector
from .sampler import SamplerConfig

log = logging.getLogger("hybridlm")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_VALIDATION, EXIT_COLLISION = 0, 2, 3, 4, 5
EXIT_HELP = """exit codes:
  0  success
  2  configuration error (bad YAML, unknown keys, invalid values, bad flags)
  3  I/O error (missing input artifact, unreadable or unwritable path)
  4  validation error (misaligned runs, shape or length violations, generation failure)
  5  collision (an output exists with different content)
"""


# -- artifacts -----------------------------------------------------------------------


class Outputs:
    def __init__(self, root: Path):
        self.root = Path(root)

    def path(self, rel: str) -> Path:
        return self.root / rel

    def emit(self, rel: str, data: bytes | str) -> Path:
        blob = data.encode("utf-8") if isinstance(data, str) else data
        target = self.path(rel)
        if target.exists():
            if target.read_bytes() != blob:
                raise CollisionError(f"{target} exists with different content")
            log.info("unchanged %s", rel)
        else:
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_bytes(blob)
            log.info("wrote %s", rel)
        self._manifest()
        return target

    def _manifest(self) -> None:
        lines = []
        for p in sorted(self.root.rglob("*")):
            if p.is_file() and p.name != "MANIFEST":
                rel = p.relative_to(self.root).as_posix()
                lines.append(f"{hashlib.sha256(p.read_bytes()).hexdigest()}  {rel}\n")
        (self.root / "MANIFEST").write_text("".join(lines), encoding="utf-8")

    def require(self, rel: str) -> Path:
        p = self.path(rel)
        if not p.exists():
            raise FileNotFoundError(f"missing artifact {p}; run the producing subcommand first")
        return p


def run_id(pairing: PairingConfig) -> str:
    return re.sub(r"[^A-Za-z0-9]+", "_", pairing.name.replace("->", "-to-")).strip("_")


def _dataset(cfg: ExperimentConfig, out: Outputs, name: str) -> list[taskbench.Sample]:
    return taskbench.read_dataset(out.require(f"data/{name}.jsonl"))


def _train_split(cfg, out, names) -> list[taskbench.Sample]:
    samples = []
    for n in names:
        samples += taskbench.split(_dataset(cfg, out, n))[0]
    return samples


def _eval_split(cfg, out) -> list[taskbench.Sample]:
    samples = []
    for n in cfg.eval_tasks:
        held = taskbench.split(_dataset(cfg, out, n))[1]
        samples += held[: cfg.eval_limit]
    return samples


def _report_json(report) -> str:
    d = report.to_dict()
    d.pop("seconds", None)  # wall-clock varies between runs; logged instead
    return json.dumps(d, sort_keys=True, indent=1) + "\n"


def _projector_rel(plan_len: int) -> str:
    return f"checkpoints/projector-P{plan_len}.ckpt"


# -- subcommands ---------------------------------------------------------------------


def cmd_gen_data(cfg: ExperimentConfig, args) -> int:
    out = Outputs(cfg.output_dir)
    for name, entry in cfg.tasks.items():
        samples = taskbench.generate(entry.spec, unique=entry.unique)
        out.emit(f"data/{name}.jsonl", taskbench.dataset_text(samples))
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig, args) -> int:
    out = Outputs(cfg.output_dir)
    target = args.target
    t = cfg.training[target]
    samples = _train_split(cfg, out, t["tasks"])
    if target == "arm":
        model = LanguageModel(cfg.models["arm"], seed=cfg.seed)
        corpus = arm_corpus(samples, model.vocab, t["roles"])
        report = train_arm(model, corpus, t["epochs"], t["lr"], cfg.seed, t["batch_size"], t["eval_limit"])
        blob = model.state_bytes()
        rel = "checkpoints/arm.ckpt"
    elif target == "ddlm":
        model = LanguageModel(cfg.models["ddlm"], seed=cfg.seed)
        corpus = ddlm_corpus(samples, model.vocab, cfg.sampler.plan_len, t["answer_len"], t["roles"])
        report = train_ddlm(model, corpus, t["epochs"], t["lr"], cfg.seed, t["batch_size"],
                            cfg.sampler.steps, t["eval_limit"])
        blob = model.state_bytes()
        rel = "checkpoints/ddlm.ckpt"
    else:
        arm = LanguageModel.load(out.require("checkpoints/arm.ckpt"))
        ddlm = LanguageModel.load(out.require("checkpoints/ddlm.ckpt")).freeze()
        if t["limit"] is not None:
            samples = samples[: t["limit"]]
        v = ddlm.vocab
        items = [(planner_input(v.encode(s.stem), v), v.encode(s.question), v.encode(s.gold)) for s in samples]
        trainset = build_trainset(ddlm, items, cfg.sampler)
        proj = Projector(ddlm.config.d_model, arm.config.d_model, t["d_hidden"], cfg.sampler.plan_len, seed=cfg.seed)
        report = train_projector(proj, arm, trainset, t["epochs"], t["lr"], cfg.seed, t["batch_size"], t["eval_limit"])
        blob = proj.state_bytes()
        rel = _projector_rel(cfg.sampler.plan_len)
        target = f"projector-P{cfg.sampler.plan_len}"
    log.info("%s trained in %.1fs cpu; held-out exact match %s", target, report.seconds, report.heldout_exact_match)
    out.emit(rel, blob)
    out.emit(f"reports/train-{target}.json", _report_json(report))
    return EXIT_OK


def _select_pairings(cfg: ExperimentConfig, names) -> list[PairingConfig]:
    if not names:
        return cfg.pairings
    by = {p.name: p for p in cfg.pairings}
    by.update({run_id(p): p for p in cfg.pairings})
    missing = [n for n in names if n not in by]
    if missing:
        raise ConfigError(f"unknown pairing(s) {missing}; configured: {sorted(p.name for p in cfg.pairings)}")
    return [by[n] for n in names]


def _backbones(out: Outputs, pairings) -> Backbones:
    roles = {r for p in pairings for r in (p.planner, p.executor) if r != "none"}
    b = Backbones()
    for role in sorted(roles):
        setattr(b, role, LanguageModel.load(out.require(f"checkpoints/{role}.ckpt")).freeze())
    return b


def cmd_run(cfg: ExperimentConfig, args) -> int:
    out = Outputs(cfg.output_dir)
    pairings = _select_pairings(cfg, args.pairing)
    dataset = _eval_split(cfg, out)
    if not dataset:
        raise ConfigError("evaluation split is empty; enlarge the eval tasks")
    models = _backbones(out, pairings)
    for p in pairings:
        rid = run_id(p)
        if p.channel == "latent":
            models.projector = Projector.load(out.require(_projector_rel(p.plan_len)))
        rel = f"runs/{rid}/transcripts.jsonl"
        overall, records = run_benchmark(p, dataset, models, cfg.parallel, cfg.seed)
        overall.transcript = rel
        results = [overall] + summarize_by_benchmark(p, records, rel)
        out.emit(rel, transcripts_text(records))
        out.emit(f"runs/{rid}/results.jsonl", "".join(r.to_json() + "\n" for r in results))
        print(f"{rid}\taccuracy={100 * overall.accuracy:.2f}\tplanner_tokens={overall.mean_planner_tokens}"
              f"\texecutor_tokens={overall.mean_executor_tokens}\terrors={overall.n_errors}")
    return EXIT_OK


def _load_results(out: Outputs, rid: str) -> list[RunResult]:
    lines = out.require(f"runs/{rid}/results.jsonl").read_text(encoding="utf-8").splitlines()
    return [RunResult.from_json(line) for line in lines if line.strip()]


def cmd_diagnose(cfg: ExperimentConfig, args) -> int:
    out = Outputs(cfg.output_dir)
    P = cfg.sampler.plan_len
    sampler = SamplerConfig(P, cfg.sampler.steps)
    defaults = {
        "ddlm->arm": args.ddlm_arm or run_id(PairingConfig("ddlm", "arm", "text", P, sampler)),
        "arm->arm": args.arm_arm or run_id(PairingConfig("arm", "arm", "text", P, sampler)),
        "ddlm->ddlm": args.ddlm_ddlm or run_id(PairingConfig("ddlm", "ddlm", "text", P, sampler)),
    }
    runs = {k: read_transcripts(out.require(f"runs/{rid}/transcripts.jsonl")) for k, rid in defaults.items()}
    report = analysis.diagnose(runs)
    out.emit("reports/diagnosis.jsonl", report.to_lines())
    out.emit("reports/diagnosis.txt", report.render())
    sys.stdout.write(report.render())
    return EXIT_OK


def cmd_metrics(cfg: ExperimentConfig, args) -> int:
    out = Outputs(cfg.output_dir)
    src = Path(args.transcript)
    if not src.exists():
        candidate = out.path(f"runs/{args.transcript}/transcripts.jsonl")
        if not candidate.exists():
            raise FileNotFoundError(f"no transcript file or run named {args.transcript!r}")
        src = candidate
    records = read_transcripts(src)
    texts = [r.plan for r in records if r.plan_kind == "text" and r.plan]
    if not texts:
        log.warning("%s holds no nonempty text plans; every metric is absent", src)
    report = analysis.repetition_report(texts, args.n or cfg.metrics_n)
    name = src.parent.name if src.name == "transcripts.jsonl" else src.stem
    out.emit(f"reports/metrics-{name}.json", report.to_json() + "\n")
    out.emit(f"reports/metrics-{name}.txt", report.render())
    sys.stdout.write(report.render())
    return EXIT_OK


def cmd_report(cfg: ExperimentConfig, args) -> int:
    from .plotting import frontier_svg

    out = Outputs(cfg.output_dir)
    rids = args.runs
    if not rids and out.path("runs").exists():
        rids = sorted(p.name for p in out.path("runs").iterdir() if (p / "results.jsonl").exists())
    if not rids:
        raise FileNotFoundError("no runs to report on")
    overall, per_bench = [], {}
    for rid in rids:
        results = _load_results(out, rid)
        overall.append(results[0])
        per_bench[results[0].pairing] = {r.benchmark: r for r in results[1:]}
    points = analysis.frontier(overall)
    out.emit("reports/frontier.csv", analysis.frontier_csv(overall))
    out.emit("reports/frontier.svg", frontier_svg(overall))
    out.emit("reports/table-accuracy.txt", analysis.accuracy_table(per_bench))
    out.emit("reports/table-cost.txt", analysis.cost_table(overall))
    summary = [json.dumps({"schema_version": 1, "pairing": p.name, "total_tokens": round(p.tokens, 2),
                           "accuracy_pct": round(100 * p.accuracy, 2)}, sort_keys=True) for p in points]
    out.emit("reports/frontier.jsonl", "".join(s + "\n" for s in summary))
    sys.stdout.write(analysis.cost_table(overall))
    return EXIT_OK


# -- entry ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", required=True, help="experiment YAML file")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--parallel", type=int, help="worker threads (also HYBRIDLM_PARALLEL)")
    common.add_argument("--output-dir", help="output directory (also HYBRIDLM_OUTPUT_DIR)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="hybridlm", description="Diffusion planner / autoregressive executor "
                                     "experiments at desk scale.", epilog=EXIT_HELP,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate datasets").set_defaults(fn=cmd_gen_data)
    p = sub.add_parser("train", parents=[common], help="train a backbone or the projector")
    p.add_argument("target", choices=("arm", "ddlm", "projector"))
    p.set_defaults(fn=cmd_train)
    p = sub.add_parser("run", parents=[common], help="evaluate pairings on the held-out split")
    p.add_argument("--pairing", action="append", help="pairing name or run id (repeatable; default all)")
    p.set_defaults(fn=cmd_run)
    p = sub.add_parser("diagnose", parents=[common], help="planner vs executor failure attribution")
    p.add_argument("--ddlm-arm", help="run id of the diffusion-planned, autoregressive-executed run")
    p.add_argument("--arm-arm", help="run id with the planner swapped for the autoregressive model")
    p.add_argument("--ddlm-ddlm", help="run id with the diffusion model as executor")
    p.set_defaults(fn=cmd_diagnose)
    p = sub.add_parser("metrics", parents=[common], help="repetition metrics over a run's text plans")
    p.add_argument("transcript", help="transcript file or run id")
    p.add_argument("-n", type=int, help="LR-n threshold (default from config)")
    p.set_defaults(fn=cmd_metrics)
    p = sub.add_parser("report", parents=[common], help="frontier CSV/SVG and summary tables")
    p.add_argument("runs", nargs="*", help="run ids (default: every run in the output directory)")
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, seed=args.seed, parallel=args.parallel, output_dir=args.output_dir)
        return args.fn(cfg, args)
    except CollisionError as exc:
        log.error("%s", exc)
        return EXIT_COLLISION
    except ConfigError as exc:
        log.error("config: %s", exc)
        return EXIT_CONFIG
    except (AlignmentError, DimensionError, LengthError, GenerationError, FrozenViolation,
            DegenerateLossError) as exc:
        log.error("validation: %s", exc)
        return EXIT_VALIDATION
    except OSError as exc:
        log.error("io: %s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
