"""Fixed character-level vocabulary shared by every model and task."""

from __future__ import annotations

import string
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

RESERVED = ("[PAD]", "[BOS]", "[EOS]", "[SEP]", "[MASK]")
CHARS = tuple(string.digits) + tuple(string.ascii_uppercase) + tuple(" .,;:=+-*?!()[]/")


@dataclass(frozen=True)
class VocabSpec:
    tokens: tuple[str, ...] = RESERVED + CHARS
    pad_id: int = 0
    bos_id: int = 1
    eos_id: int = 2
    sep_id: int = 3
    mask_id: int = 4
    _index: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        reserved = self.reserved_ids
        if len(set(reserved)) != len(reserved):
            raise ConfigError(f"reserved ids must be distinct: {reserved}")
        if max(reserved) >= len(self.tokens) or min(reserved) < 0:
            raise ConfigError("reserved ids must index into the token list")
        if len(set(self.tokens)) != len(self.tokens):
            raise ConfigError("duplicate symbols in vocabulary")
        object.__setattr__(self, "_index", {s: i for i, s in enumerate(self.tokens)})

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def reserved_ids(self) -> tuple[int, ...]:
        return (self.pad_id, self.bos_id, self.eos_id, self.sep_id, self.mask_id)

    def can_encode(self, text: str) -> bool:
        reserved = {self.tokens[i] for i in self.reserved_ids}
        return all(ch in self._index and ch not in reserved for ch in text)

    def encode(self, text: str) -> list[int]:
        try:
            return [self._index[ch] for ch in text]
        except KeyError as exc:
            raise ConfigError(f"symbol {exc.args[0]!r} is not in the vocabulary") from None

    def decode(self, ids, strip_special: bool = True) -> str:
        special = set(self.reserved_ids)
        out = []
        for i in np.asarray(ids, dtype=np.int64).reshape(-1):
            i = int(i)
            if strip_special and i in special:
                continue
            out.append(self.tokens[i])
        return "".join(out)

    def to_dict(self) -> dict:
        return {
            "tokens": list(self.tokens),
            "pad_id": self.pad_id,
            "bos_id": self.bos_id,
            "eos_id": self.eos_id,
            "sep_id": self.sep_id,
            "mask_id": self.mask_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VocabSpec":
        return cls(
            tokens=tuple(d["tokens"]),
            pad_id=d["pad_id"],
            bos_id=d["bos_id"],
            eos_id=d["eos_id"],
            sep_id=d["sep_id"],
            mask_id=d["mask_id"],
        )


DEFAULT_VOCAB = VocabSpec()
