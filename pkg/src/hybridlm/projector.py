"""Latent bridge from diffusion hidden states to the executor's embedding space.

``project`` is affine -> GELU -> affine, applied row-wise. The executor
input is laid out as ``[bos, projected plan rows, sep, question]`` so that
feeding the token embeddings of a text plan in place of the projected rows
reproduces the text-channel input exactly.

Training keeps both backbones frozen: plan latents are produced once by
the frozen sampler, and gradients flow through the frozen executor only
as far as the four projector tensors.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .autodiff import Tensor
from .errors import ConfigError, DimensionError, FrozenViolation, LengthError
from .models import LanguageModel, TrainingReport, _batches, _pad_batch, _split_indices, greedy_decode
from .sampler import SamplerConfig, denoise

log = logging.getLogger(__name__)

LAYOUT = ("bos", "plan", "sep", "question")


class Projector:
    def __init__(self, d_ddlm: int, d_arm: int, d_hidden: int | None = None, plan_len: int = 64,
                 seed: int = 0, params: dict | None = None):
        self.d_ddlm = d_ddlm
        self.d_arm = d_arm
        self.d_hidden = d_hidden or 4 * max(d_ddlm, d_arm)
        self.plan_len = plan_len
        if params is None:
            rng = np.random.default_rng(seed)
            params = {
                "W1": Tensor(rng.normal(0.0, 1.0 / np.sqrt(d_ddlm), (d_ddlm, self.d_hidden)), requires_grad=True),
                "b1": Tensor(np.zeros(self.d_hidden), requires_grad=True),
                "W2": Tensor(rng.normal(0.0, 0.02, (self.d_hidden, d_arm)), requires_grad=True),
                "b2": Tensor(np.zeros(d_arm), requires_grad=True),
            }
        self.params: dict[str, Tensor] = params

    @property
    def W1(self) -> Tensor:
        return self.params["W1"]

    @property
    def b1(self) -> Tensor:
        return self.params["b1"]

    @property
    def W2(self) -> Tensor:
        return self.params["W2"]

    @property
    def b2(self) -> Tensor:
        return self.params["b2"]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def astype(self, dtype) -> "Projector":
        params = {k: Tensor(v.data.astype(dtype), requires_grad=True, dtype=dtype) for k, v in self.params.items()}
        return Projector(self.d_ddlm, self.d_arm, self.d_hidden, self.plan_len, params=params)

    def _header(self) -> dict:
        return {"kind": "projector", "d_ddlm": self.d_ddlm, "d_hidden": self.d_hidden,
                "d_arm": self.d_arm, "plan_len": self.plan_len, "layout": list(LAYOUT)}

    def state_bytes(self) -> bytes:
        return checkpoint.dumps(self._header(), {k: v.data for k, v in self.params.items()})

    def save(self, path) -> bytes:
        return checkpoint.save(path, self._header(), {k: v.data for k, v in self.params.items()})

    @classmethod
    def load(cls, path) -> "Projector":
        header, tensors = checkpoint.load(path)
        if header.get("kind") != "projector":
            raise ConfigError(f"checkpoint holds {header.get('kind')!r}, not a projector")
        params = {k: Tensor(v, requires_grad=True) for k, v in tensors.items()}
        return cls(header["d_ddlm"], header["d_arm"], header["d_hidden"], header["plan_len"], params=params)


def project(p: Projector, plan_hidden) -> Tensor:
    h = plan_hidden if isinstance(plan_hidden, Tensor) else Tensor(plan_hidden, dtype=np.asarray(plan_hidden).dtype)
    if h.shape[-1] != p.d_ddlm:
        raise DimensionError(f"plan hidden width {h.shape[-1]} does not match projector input width {p.d_ddlm}")
    return ad.gelu(h @ p.W1 + p.b1) @ p.W2 + p.b2


def _special_rows(arm: LanguageModel, ids) -> Tensor:
    with ad.no_grad():
        return arm.embed_tokens(np.asarray(ids, dtype=np.int64))


def assemble_executor_input(projected: Tensor, question: Sequence[int], arm: LanguageModel) -> Tensor:
    """Rows ``[bos, projected..., sep, question...]`` in the executor's embedding width."""
    P = projected.shape[0]
    q = [int(t) for t in question]
    if P + len(q) + 2 > arm.config.max_len:
        raise LengthError(f"plan ({P}) + question ({len(q)}) + 2 exceeds executor max_len {arm.config.max_len}")
    if projected.shape[-1] != arm.config.d_model:
        raise DimensionError(f"projected width {projected.shape[-1]} != executor d_model {arm.config.d_model}")
    vocab = arm.vocab
    bos = _special_rows(arm, [vocab.bos_id])
    sep_q = _special_rows(arm, [vocab.sep_id] + q)
    return ad.concat([bos, projected, sep_q], axis=0)


@dataclass
class ProjectorRecord:
    question: list[int]
    plan_hidden: np.ndarray
    gold_answer: list[int]
    plan_len: int


def build_trainset(ddlm: LanguageModel, items, cfg: SamplerConfig) -> list[ProjectorRecord]:
    """Run the frozen sampler once per (planner prompt, question ids, answer ids) triple."""
    out = []
    for planner_prompt, question, answer in items:
        if not answer:
            raise ConfigError("gold answer must be nonempty")
        _, hidden, _ = denoise(ddlm, planner_prompt, cfg)
        out.append(ProjectorRecord(list(question), hidden, list(answer), cfg.plan_len))
    return out


def _assert_frozen(arm: LanguageModel) -> None:
    for name, t in arm.params.items():
        if t.requires_grad or (t.grad is not None and np.any(t.grad != 0)):
            raise FrozenViolation(f"executor parameter {name} is trainable or carries a gradient")


def projector_loss(p: Projector, arm: LanguageModel, records: Sequence[ProjectorRecord]) -> Tensor:
    """Teacher-forced cross-entropy of the frozen executor on gold answers."""
    vocab = arm.vocab
    P = records[0].plan_len
    if any(r.plan_len != P or r.plan_hidden.shape[0] != P for r in records):
        raise ConfigError("all records in a batch must share one plan length")
    B = len(records)
    hidden = np.stack([r.plan_hidden for r in records]).astype(p.W1.dtype, copy=False)
    projected = project(p, hidden)  # (B, P, d_arm)

    tails = [[vocab.sep_id] + r.question + r.gold_answer for r in records]
    tail_ids, tail_valid = _pad_batch(tails, vocab.pad_id)
    with ad.no_grad():
        bos = arm.embed_tokens(np.full((B, 1), vocab.bos_id))
        tail = arm.embed_tokens(tail_ids)
    x = ad.concat([bos, projected, tail], axis=1)
    L = x.shape[1]
    if L > arm.config.max_len:
        raise LengthError(f"assembled input length {L} exceeds executor max_len {arm.config.max_len}")
    key_mask = np.concatenate([np.ones((B, 1 + P), dtype=bool), tail_valid], axis=1)

    targets = np.full((B, L), vocab.pad_id, dtype=np.int64)
    mask = np.zeros((B, L), dtype=bool)
    for i, r in enumerate(records):
        answer = r.gold_answer + [vocab.eos_id]
        first = 1 + P + 1 + len(r.question) - 1  # position whose output is the first answer token
        targets[i, first : first + len(answer)] = answer
        mask[i, first : first + len(answer)] = True
    logits, _ = arm.forward(x, key_mask=key_mask)
    return ad.softmax_cross_entropy(logits, targets, mask)


def decode_with_projector(p: Projector, arm: LanguageModel, record: ProjectorRecord, max_new: int) -> list[int]:
    with ad.no_grad():
        x = assemble_executor_input(project(p, record.plan_hidden), record.question, arm)
    return greedy_decode(arm, x.data, max_new)


def train_projector(
    p: Projector,
    arm: LanguageModel,
    trainset: Sequence[ProjectorRecord],
    epochs: int,
    lr: float,
    seed: int = 0,
    batch_size: int = 32,
    eval_limit: int | None = None,
) -> TrainingReport:
    if not trainset:
        raise ConfigError("empty projector training set")
    if lr < 0:
        raise ConfigError(f"learning rate must be non-negative, got {lr}")
    started = time.process_time()
    arm.freeze()
    _assert_frozen(arm)
    train_idx, held_idx = _split_indices(len(trainset))
    train = [trainset[i] for i in train_idx]
    lengths = np.array([len(r.question) + len(r.gold_answer) for r in train])
    rng = np.random.default_rng(seed)
    params = p.parameters()
    opt = ad.adam_init(params)

    def mean_loss() -> float:
        total = 0.0
        with ad.no_grad():
            for i in range(0, len(train), batch_size):
                chunk = train[i : i + batch_size]
                total += projector_loss(p, arm, chunk).item() * len(chunk)
        return total / len(train)

    initial = mean_loss()
    losses = []
    for epoch in range(epochs):
        total = 0.0
        for batch in _batches(rng.permutation(len(train)), lengths, batch_size):
            recs = [train[j] for j in batch]
            loss = projector_loss(p, arm, recs)
            if lr > 0:
                for t in params:
                    t.grad = None
                loss.backward()
                _assert_frozen(arm)
                ad.adam_step(params, [t.grad for t in params], opt, lr)
            total += loss.item() * len(recs)
        losses.append(total / len(train))
        log.info("projector epoch %d loss %.4f", epoch + 1, losses[-1])
    for t in params:
        t.grad = None
    final = mean_loss()

    held = [trainset[i] for i in held_idx][:eval_limit]
    em = None
    if held:
        em = sum(decode_with_projector(p, arm, r, len(r.gold_answer) + 4) == r.gold_answer for r in held) / len(held)
    return TrainingReport(losses, initial, final, em, len(train), len(held_idx), epochs, lr, seed,
                          time.process_time() - started)
