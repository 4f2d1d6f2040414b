"""Tiny pre-LN transformer shared by the autoregressive model and the diffusion denoiser.

Both modes use the same parameter layout. Autoregressive mode applies a
causal attention mask and trains on next-token prediction over answer
positions; diffusion mode attends bidirectionally and trains to recover
masked answer tokens.
"""

from __future__ import annotations

import hashlib
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .autodiff import Tensor
from .errors import ConfigError, LengthError
from .taskbench import is_heldout
from .vocab import DEFAULT_VOCAB, VocabSpec

log = logging.getLogger(__name__)

MODES = ("autoregressive", "diffusion")
NEG_INF = -1e9


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 512
    max_len: int = 192
    mode: str = "autoregressive"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        for name in ("d_model", "n_layers", "n_heads", "d_ff", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")


@dataclass
class TrainingReport:
    losses: list[float]
    initial_loss: float
    final_loss: float
    heldout_exact_match: float | None
    n_train: int
    n_heldout: int
    epochs: int
    lr: float
    seed: int
    seconds: float = 0.0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


class LanguageModel:
    def __init__(self, config: ModelConfig, vocab: VocabSpec = DEFAULT_VOCAB, seed: int = 0, params=None):
        self.config = config
        self.vocab = vocab
        if params is None:
            params = _init_params(config, vocab.size, seed)
        self.params: dict[str, Tensor] = params

    # -- parameters ----------------------------------------------------------------

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def freeze(self) -> "LanguageModel":
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        return self

    def unfreeze(self) -> "LanguageModel":
        for p in self.params.values():
            p.requires_grad = True
        return self

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def astype(self, dtype) -> "LanguageModel":
        params = {k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad, dtype=dtype) for k, v in self.params.items()}
        return LanguageModel(self.config, self.vocab, params=params)

    def copy(self) -> "LanguageModel":
        return self.astype(np.float32)

    def state_bytes(self) -> bytes:
        return checkpoint.dumps(self._header(), {k: v.data for k, v in self.params.items()})

    def fingerprint(self) -> str:
        return hashlib.sha256(self.state_bytes()).hexdigest()

    def _header(self) -> dict:
        return {"kind": "language_model", "config": asdict(self.config), "vocab": self.vocab.to_dict()}

    def save(self, path) -> bytes:
        return checkpoint.save(path, self._header(), {k: v.data for k, v in self.params.items()})

    @classmethod
    def load(cls, path) -> "LanguageModel":
        header, tensors = checkpoint.load(path)
        return cls._from_container(header, tensors)

    @classmethod
    def _from_container(cls, header, tensors) -> "LanguageModel":
        if header.get("kind") != "language_model":
            raise ConfigError(f"checkpoint holds {header.get('kind')!r}, not a language model")
        cfg = ModelConfig(**header["config"])
        vocab = VocabSpec.from_dict(header["vocab"])
        return cls(cfg, vocab, params={k: Tensor(v) for k, v in tensors.items()})

    # -- forward -------------------------------------------------------------------

    def embed_tokens(self, ids) -> Tensor:
        return ad.take_rows(self.params["tok_emb"], np.asarray(ids, dtype=np.int64))

    def forward(self, x, key_mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
        """Batched forward.

        ``x`` is either an integer array (B, L) of token ids or a float
        Tensor/array (B, L, d_model) of input embeddings, in which case the
        token lookup is skipped and positional embeddings are still added.
        ``key_mask`` (B, L) marks real positions; padding keys are ignored.
        Returns (logits (B, L, V), final hidden (B, L, d_model)).
        """
        cfg, p = self.config, self.params
        if isinstance(x, Tensor) or (isinstance(x, np.ndarray) and np.issubdtype(x.dtype, np.floating)):
            h = x if isinstance(x, Tensor) else Tensor(x, dtype=x.dtype)
            if h.ndim != 3 or h.shape[-1] != cfg.d_model:
                raise ConfigError(f"embedding input must be (B, L, {cfg.d_model}), got {h.shape}")
        else:
            ids = np.asarray(x, dtype=np.int64)
            if ids.ndim != 2:
                raise ConfigError(f"token input must be (B, L), got shape {ids.shape}")
            h = self.embed_tokens(ids)
        B, L = h.shape[0], h.shape[1]
        if L > cfg.max_len:
            raise LengthError(f"sequence length {L} exceeds max_len {cfg.max_len}")
        h = h + p["pos_emb"][:L]

        bias = np.zeros((1, 1, L, L), dtype=h.dtype)
        if cfg.mode == "autoregressive":
            bias = bias + np.triu(np.full((L, L), NEG_INF, dtype=h.dtype), k=1)
        if key_mask is not None:
            km = np.asarray(key_mask, dtype=bool)
            bias = bias + np.where(km, 0.0, NEG_INF).astype(h.dtype)[:, None, None, :]

        H = cfg.n_heads
        dh = cfg.d_model // H
        scale = 1.0 / math.sqrt(dh)
        for i in range(cfg.n_layers):
            pre = f"blocks.{i}."
            a = ad.layer_norm(h, p[pre + "ln1.g"], p[pre + "ln1.b"])
            q = (a @ p[pre + "attn.wq"] + p[pre + "attn.bq"]).reshape(B, L, H, dh).transpose(0, 2, 1, 3)
            k = (a @ p[pre + "attn.wk"] + p[pre + "attn.bk"]).reshape(B, L, H, dh).transpose(0, 2, 3, 1)
            v = (a @ p[pre + "attn.wv"] + p[pre + "attn.bv"]).reshape(B, L, H, dh).transpose(0, 2, 1, 3)
            att = ad.softmax((q @ k) * scale + bias)
            o = (att @ v).transpose(0, 2, 1, 3).reshape(B, L, cfg.d_model)
            h = h + (o @ p[pre + "attn.wo"] + p[pre + "attn.bo"])
            f = ad.layer_norm(h, p[pre + "ln2.g"], p[pre + "ln2.b"])
            f = ad.gelu(f @ p[pre + "ff.w1"] + p[pre + "ff.b1"])
            h = h + (f @ p[pre + "ff.w2"] + p[pre + "ff.b2"])
        hidden = ad.layer_norm(h, p["lnf.g"], p["lnf.b"])
        logits = hidden @ p["head.w"] + p["head.b"]
        return logits, hidden


def _init_params(cfg: ModelConfig, vocab_size: int, seed: int) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    d, f = cfg.d_model, cfg.d_ff
    std = 0.02
    out_std = std / math.sqrt(2 * cfg.n_layers)

    def normal(shape, s=std):
        return Tensor(rng.normal(0.0, s, size=shape), requires_grad=True)

    def const(shape, value):
        return Tensor(np.full(shape, value), requires_grad=True)

    params = {"tok_emb": normal((vocab_size, d)), "pos_emb": normal((cfg.max_len, d))}
    for i in range(cfg.n_layers):
        pre = f"blocks.{i}."
        params[pre + "ln1.g"] = const(d, 1.0)
        params[pre + "ln1.b"] = const(d, 0.0)
        for name in ("wq", "wk", "wv"):
            params[pre + f"attn.{name}"] = normal((d, d))
            params[pre + f"attn.b{name[1]}"] = const(d, 0.0)
        params[pre + "attn.wo"] = normal((d, d), out_std)
        params[pre + "attn.bo"] = const(d, 0.0)
        params[pre + "ln2.g"] = const(d, 1.0)
        params[pre + "ln2.b"] = const(d, 0.0)
        params[pre + "ff.w1"] = normal((d, f))
        params[pre + "ff.b1"] = const(f, 0.0)
        params[pre + "ff.w2"] = normal((f, d), out_std)
        params[pre + "ff.b2"] = const(d, 0.0)
    params["lnf.g"] = const(d, 1.0)
    params["lnf.b"] = const(d, 0.0)
    params["head.w"] = normal((d, vocab_size))
    params["head.b"] = const(vocab_size, 0.0)
    return params


# -- single-sequence API -------------------------------------------------------------


def _is_embedding(x) -> bool:
    if isinstance(x, Tensor):
        return x.ndim == 2
    arr = np.asarray(x)
    return arr.ndim == 2 and np.issubdtype(arr.dtype, np.floating)


def forward_hidden(model: LanguageModel, seq) -> tuple[Tensor, Tensor]:
    """Logits (L, V) and final hidden states (L, d_model) for one sequence.

    ``seq`` is a token id sequence, or an (L, d_model) embedding matrix
    injected in place of the token lookup.
    """
    if _is_embedding(seq):
        emb = seq if isinstance(seq, Tensor) else Tensor(seq, dtype=np.asarray(seq).dtype)
        x = emb.reshape(1, emb.shape[0], emb.shape[1])
    else:
        ids = np.asarray(seq, dtype=np.int64).reshape(1, -1)
        if ids.shape[1] == 0:
            raise LengthError("empty input sequence")
        x = ids
    logits, hidden = model.forward(x)
    return logits[0], hidden[0]


def greedy_generate(model: LanguageModel, prompt, max_new: int) -> tuple[list[int], bool]:
    """Argmax continuation; returns (tokens without eos, whether eos was produced).

    Stops at eos, after ``max_new`` tokens, or when the sequence would exceed
    max_len. Ties go to the lowest token id.
    """
    if model.config.mode != "autoregressive":
        raise ConfigError("greedy decoding needs an autoregressive model")
    eos = model.vocab.eos_id
    out: list[int] = []
    embedded = _is_embedding(prompt)
    with ad.no_grad():
        if embedded:
            base = prompt.data if isinstance(prompt, Tensor) else np.asarray(prompt)
        else:
            base_ids = [int(t) for t in np.asarray(prompt, dtype=np.int64).reshape(-1)]
        for _ in range(max_new):
            if embedded:
                gen = model.embed_tokens(np.asarray(out, dtype=np.int64)).data if out else base[:0]
                seq = np.concatenate([base, gen.astype(base.dtype)], axis=0)
            else:
                seq = base_ids + out
            if len(seq) > model.config.max_len:
                break
            logits, _ = forward_hidden(model, seq)
            nxt = int(np.argmax(logits.data[-1]))
            if nxt == eos:
                return out, True
            out.append(nxt)
    return out, False


def greedy_decode(model: LanguageModel, prompt, max_new: int) -> list[int]:
    """Argmax continuation until eos or ``max_new`` tokens; eos is not returned."""
    return greedy_generate(model, prompt, max_new)[0]


# -- batching ----------------------------------------------------------------------


def _pad_batch(seqs: Sequence[Sequence[int]], pad_id: int) -> tuple[np.ndarray, np.ndarray]:
    L = max(len(s) for s in seqs)
    ids = np.full((len(seqs), L), pad_id, dtype=np.int64)
    valid = np.zeros((len(seqs), L), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        valid[i, : len(s)] = True
    return ids, valid


def _batches(order: np.ndarray, lengths: np.ndarray, batch_size: int) -> list[np.ndarray]:
    """Group an already-shuffled order into batches of similar length."""
    chunk = batch_size * 16
    out = []
    for start in range(0, len(order), chunk):
        block = order[start : start + chunk]
        block = block[np.argsort(lengths[block], kind="stable")]
        out.extend(block[i : i + batch_size] for i in range(0, len(block), batch_size))
    return out


def _split_indices(n: int) -> tuple[list[int], list[int]]:
    train = [i for i in range(n) if not is_heldout(i)]
    held = [i for i in range(n) if is_heldout(i)]
    if not train:
        raise ConfigError("corpus too small: no training samples after the 90/10 split")
    return train, held


def _check_corpus(corpus) -> None:
    if not corpus:
        raise ConfigError("empty training corpus")


def _check_lr(lr: float) -> None:
    if lr < 0:
        raise ConfigError(f"learning rate must be non-negative, got {lr}")


CLIP_NORM = 1.0
WARMUP_FRACTION = 0.05


def _step(model: LanguageModel, loss: Tensor, opt: ad.AdamState, lr: float, scale: float = 1.0) -> None:
    """Backprop, clip, update; lr == 0 evaluates without touching parameters."""
    if lr == 0:
        return
    model.zero_grad()
    loss.backward()
    params = model.parameters()
    grads, _ = ad.clip_by_global_norm([p.grad for p in params], CLIP_NORM)
    ad.adam_step(params, grads, opt, lr * scale)


def _schedule(n_batches: int, epochs: int):
    total = n_batches * epochs
    warmup = int(WARMUP_FRACTION * total)
    return lambda step: ad.warmup_cosine(step, total, warmup)


# -- autoregressive training -----------------------------------------------------------


def _ar_example(prompt, answer, eos: int) -> tuple[list[int], list[int], list[bool]]:
    seq = list(prompt) + list(answer) + [eos]
    inputs, targets = seq[:-1], seq[1:]
    loss_mask = [i >= len(prompt) - 1 for i in range(len(inputs))]
    return inputs, targets, loss_mask


def ar_loss(model: LanguageModel, examples) -> Tensor:
    """Mean next-token cross-entropy over answer positions of a batch.

    ``examples`` holds (prompt, answer) token sequences; eos is appended to
    each answer and prompt positions are excluded from the loss.
    """
    vocab = model.vocab
    rows = [_ar_example(p, a, vocab.eos_id) for p, a in examples]
    ids, valid = _pad_batch([r[0] for r in rows], vocab.pad_id)
    targets = np.full(ids.shape, vocab.pad_id, dtype=np.int64)
    mask = np.zeros(ids.shape, dtype=bool)
    for i, (inp, tgt, lm) in enumerate(rows):
        targets[i, : len(tgt)] = tgt
        mask[i, : len(lm)] = lm
    logits, _ = model.forward(ids, key_mask=valid)
    return ad.softmax_cross_entropy(logits, targets, mask)


def _mean_loss(loss_fn, items, batch_size) -> float:
    total, count = 0.0, 0
    with ad.no_grad():
        for i in range(0, len(items), batch_size):
            chunk = items[i : i + batch_size]
            total += loss_fn(chunk) * len(chunk)
            count += len(chunk)
    return total / count


def train_arm(
    model: LanguageModel,
    corpus: Sequence[tuple[Sequence[int], Sequence[int]]],
    epochs: int,
    lr: float,
    seed: int = 0,
    batch_size: int = 64,
    eval_limit: int | None = None,
    max_new: int | None = None,
) -> TrainingReport:
    """Next-token training on answer positions, then greedy exact match on the held-out 10%."""
    _check_corpus(corpus)
    _check_lr(lr)
    if model.config.mode != "autoregressive":
        raise ConfigError("train_arm needs an autoregressive model")
    started = time.process_time()
    model.unfreeze()
    train_idx, held_idx = _split_indices(len(corpus))
    train = [corpus[i] for i in train_idx]
    lengths = np.array([len(p) + len(a) for p, a in train])
    rng = np.random.default_rng(seed)
    opt = ad.adam_init(model.parameters())
    sched = _schedule(math.ceil(len(train) / batch_size), epochs)

    def eval_loss(chunk):
        return ar_loss(model, chunk).item()

    initial = _mean_loss(eval_loss, train, batch_size)
    losses = []
    for epoch in range(epochs):
        order = rng.permutation(len(train))
        total = 0.0
        for batch in _batches(order, lengths, batch_size):
            loss = ar_loss(model, [train[j] for j in batch])
            _step(model, loss, opt, lr, sched(opt.step))
            total += loss.item() * len(batch)
        losses.append(total / len(train))
        log.info("arm epoch %d loss %.4f", epoch + 1, losses[-1])
    model.zero_grad()
    final = _mean_loss(eval_loss, train, batch_size)

    held = [corpus[i] for i in held_idx][:eval_limit]
    em = None
    if held:
        hits = 0
        for p, a in held:
            limit = max_new if max_new is not None else len(a) + 4
            hits += greedy_decode(model, p, limit) == list(a)
        em = hits / len(held)
    return TrainingReport(losses, initial, final, em, len(train), len(held_idx), epochs, lr, seed,
                          time.process_time() - started)


# -- diffusion training ------------------------------------------------------------------


def draw_mask(rng: np.random.Generator, n: int, t: float, max_redraws: int = 100) -> np.ndarray:
    """Bernoulli(t) mask over n target positions, never empty.

    An empty draw is redrawn; after ``max_redraws`` empty draws a single
    uniformly chosen position is masked.
    """
    for _ in range(max_redraws):
        m = rng.random(n) < t
        if m.any():
            return m
    m = np.zeros(n, dtype=bool)
    m[int(rng.integers(n))] = True
    return m


def diffusion_loss(model: LanguageModel, examples, rng: np.random.Generator, t: float | None = None) -> Tensor:
    """Masked-diffusion objective on a batch of (prompt, target canvas) pairs.

    Per example a ratio t ~ U(0, 1] is drawn (or forced via ``t``), each
    canvas token is replaced by the mask id with probability t, and the
    cross-entropy of masked positions is weighted by 1/t and normalised by
    the total number of canvas positions in the batch.
    """
    vocab = model.vocab
    seqs, targets_l, masks_l, weights_l = [], [], [], []
    n_target = 0
    for prompt, target in examples:
        prompt, target = list(prompt), list(target)
        ti = (1.0 - rng.random()) if t is None else float(t)
        m = draw_mask(rng, len(target), ti)
        noised = [vocab.mask_id if mi else tok for tok, mi in zip(target, m)]
        seqs.append(prompt + noised)
        targets_l.append([vocab.pad_id] * len(prompt) + target)
        masks_l.append([False] * len(prompt) + list(m))
        weights_l.append(1.0 / ti)
        n_target += len(target)
    ids, valid = _pad_batch(seqs, vocab.pad_id)
    targets = np.full(ids.shape, vocab.pad_id, dtype=np.int64)
    mask = np.zeros(ids.shape, dtype=bool)
    weights = np.zeros(ids.shape, dtype=np.float32)
    for i in range(len(seqs)):
        n = len(targets_l[i])
        targets[i, :n] = targets_l[i]
        mask[i, :n] = masks_l[i]
        weights[i, :n] = weights_l[i]
    logits, _ = model.forward(ids, key_mask=valid)
    return ad.softmax_cross_entropy(logits, targets, mask, weights=weights, denom=n_target)


def pad_canvas(tokens: Sequence[int], length: int, vocab: VocabSpec = DEFAULT_VOCAB) -> list[int]:
    """Target canvas: tokens, then eos filling the rest (truncated to ``length``)."""
    toks = list(tokens)[:length]
    return toks + [vocab.eos_id] * (length - len(toks))


def canvas_text_ids(canvas: Sequence[int], vocab: VocabSpec = DEFAULT_VOCAB) -> list[int]:
    """Token ids before the first eos."""
    out = []
    for t in canvas:
        if int(t) == vocab.eos_id:
            break
        out.append(int(t))
    return out


def train_ddlm(
    model: LanguageModel,
    corpus: Sequence[tuple[Sequence[int], Sequence[int]]],
    epochs: int,
    lr: float,
    seed: int = 0,
    batch_size: int = 64,
    eval_steps: int = 8,
    eval_limit: int | None = None,
) -> TrainingReport:
    """Masked-diffusion training; held-out exact match uses ``eval_steps``-step sampling.

    Corpus items are (prompt, target canvas); build canvases with ``pad_canvas``.
    """
    from .sampler import denoise_canvas

    _check_corpus(corpus)
    _check_lr(lr)
    if model.config.mode != "diffusion":
        raise ConfigError("train_ddlm needs a diffusion model")
    started = time.process_time()
    model.unfreeze()
    train_idx, held_idx = _split_indices(len(corpus))
    train = [corpus[i] for i in train_idx]
    lengths = np.array([len(p) + len(t) for p, t in train])
    rng = np.random.default_rng(seed)
    opt = ad.adam_init(model.parameters())
    sched = _schedule(math.ceil(len(train) / batch_size), epochs)

    def eval_loss(chunk):
        return diffusion_loss(model, chunk, np.random.default_rng([seed, 7919])).item()

    initial = _mean_loss(eval_loss, train, batch_size)
    losses = []
    for epoch in range(epochs):
        order = rng.permutation(len(train))
        total = 0.0
        for batch in _batches(order, lengths, batch_size):
            loss = diffusion_loss(model, [train[j] for j in batch], rng)
            _step(model, loss, opt, lr, sched(opt.step))
            total += loss.item() * len(batch)
        losses.append(total / len(train))
        log.info("ddlm epoch %d loss %.4f", epoch + 1, losses[-1])
    model.zero_grad()
    final = _mean_loss(eval_loss, train, batch_size)

    held = [corpus[i] for i in held_idx][:eval_limit]
    em = None
    if held:
        hits = 0
        for p, target in held:
            steps = min(eval_steps, len(target))
            tokens, _, _ = denoise_canvas(model, p, len(target), steps)
            hits += canvas_text_ids(tokens, model.vocab) == canvas_text_ids(target, model.vocab)
        em = hits / len(held)
    return TrainingReport(losses, initial, final, em, len(train), len(held_idx), epochs, lr, seed,
                          time.process_time() - started)
