"""Fixed-length, fixed-step iterative denoising.

A canvas of mask tokens is appended to the prompt. At every step the model
scores all positions; among still-masked positions the most confident ones
(max softmax probability, ties to the lower position) are committed, the
per-step counts following a balanced linear schedule. Committed tokens are
never revisited. One extra forward pass on the finished canvas supplies the
final-layer hidden states used as latents, so a run always costs
``steps + 1`` forward passes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, LengthError

PLAN_LENGTHS = (64, 128, 256)
STRATEGIES = ("low-confidence",)


@dataclass(frozen=True)
class SamplerConfig:
    plan_len: int = 64
    steps: int = 8
    remask_strategy: str = "low-confidence"
    seed: int = 0

    def __post_init__(self):
        if self.plan_len not in PLAN_LENGTHS:
            raise ConfigError(f"plan_len must be one of {PLAN_LENGTHS}, got {self.plan_len}")
        if not 1 <= self.steps <= self.plan_len:
            raise ConfigError(f"steps must be in [1, plan_len], got {self.steps}")
        if self.remask_strategy not in STRATEGIES:
            raise ConfigError(f"unknown remask strategy {self.remask_strategy!r}")


@dataclass
class StepSnapshot:
    step: int
    positions: list[int]
    tokens: list[int]
    confidences: list[float]
    still_masked: list[int]


@dataclass
class DenoiseTrace:
    steps: list[StepSnapshot] = field(default_factory=list)
    forward_passes: int = 0

    def to_lines(self) -> str:
        """One JSON record per step; confidences in 5-decimal fixed point."""
        lines = []
        for s in self.steps:
            conf = "[" + ", ".join(f"{c:.5f}" for c in s.confidences) + "]"
            lines.append(
                '{"step": %d, "positions": %s, "tokens": %s, "confidences": %s}'
                % (s.step, json.dumps(s.positions), json.dumps(s.tokens), conf)
            )
        return "".join(line + "\n" for line in lines)

    def dump(self, path) -> None:
        Path(path).write_text(self.to_lines(), encoding="utf-8")


def unmask_schedule(plan_len: int, steps: int) -> list[int]:
    """Balanced partition of ``plan_len`` into ``steps`` counts, larger counts first."""
    if steps < 1 or steps > plan_len:
        raise ConfigError(f"need 1 <= steps <= plan_len, got steps={steps}, plan_len={plan_len}")
    base, rem = divmod(plan_len, steps)
    return [base + 1] * rem + [base] * (steps - rem)


def denoise_canvas(model, prompt, length: int, steps: int, keep_trace: bool = True):
    """Denoise a ``length``-token canvas after ``prompt``.

    Returns (tokens, hidden, trace): the filled canvas as a list of ids, the
    final-layer hidden states of the canvas positions as a (length, d_model)
    array, and the step trace.
    """
    vocab = model.vocab
    prompt = [int(t) for t in np.asarray(prompt, dtype=np.int64).reshape(-1)]
    total = len(prompt) + length
    if total > model.config.max_len:
        raise LengthError(f"prompt ({len(prompt)}) + canvas ({length}) exceeds max_len {model.config.max_len}")
    counts = unmask_schedule(length, steps)
    seq = np.array(prompt + [vocab.mask_id] * length, dtype=np.int64)
    start = len(prompt)
    masked = np.ones(length, dtype=bool)
    trace = DenoiseTrace()

    with ad.no_grad():
        for step, k in enumerate(counts):
            logits, _ = model.forward(seq[None, :])
            trace.forward_passes += 1
            z = np.array(logits.data[0, start:], dtype=np.float64)
            z[:, vocab.mask_id] = -np.inf
            z -= z.max(axis=-1, keepdims=True)
            probs = np.exp(z)
            probs /= probs.sum(axis=-1, keepdims=True)
            pred = probs.argmax(axis=-1)
            conf = probs.max(axis=-1)

            cand = np.flatnonzero(masked)
            order = cand[np.lexsort((cand, -conf[cand]))]
            pick = np.sort(order[:k])
            seq[start + pick] = pred[pick]
            masked[pick] = False
            if keep_trace:
                trace.steps.append(
                    StepSnapshot(step, pick.tolist(), pred[pick].tolist(), conf[pick].tolist(),
                                 np.flatnonzero(masked).tolist())
                )
        _, hidden = model.forward(seq[None, :])
        trace.forward_passes += 1
    return seq[start:].tolist(), np.array(hidden.data[0, start:]), trace


def denoise(model, prompt, cfg: SamplerConfig):
    """Plan of ``cfg.plan_len`` tokens plus its latents; see ``denoise_canvas``."""
    if getattr(model.config, "mode", "diffusion") != "diffusion":
        raise ConfigError("denoise needs a diffusion-mode model")
    return denoise_canvas(model, prompt, cfg.plan_len, cfg.steps)
