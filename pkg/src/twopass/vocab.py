from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

BLANK = "<b>"
EOS = "</s>"


@dataclass(frozen=True)
class Vocab:
    """Token inventory shared by both passes.

    ``tokens[blank_id]`` is the transducer blank and ``tokens[eos_id]`` the
    end-of-query token whose emission closes the microphone.
    """

    tokens: tuple[str, ...]
    blank_id: int = 0
    eos_id: int = 1
    _index: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        n = len(self.tokens)
        if not (0 <= self.blank_id < n and 0 <= self.eos_id < n):
            raise ValueError("blank_id and eos_id must be valid token ids")
        if self.blank_id == self.eos_id:
            raise ValueError("blank_id must differ from eos_id")
        if len(set(self.tokens)) != n:
            raise ValueError("duplicate tokens in vocab")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    @classmethod
    def build(cls, words) -> "Vocab":
        seen = [BLANK, EOS]
        for w in words:
            if w not in seen:
                seen.append(w)
        return cls(tuple(seen), 0, 1)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def id(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise KeyError(f"token {token!r} not in vocab") from None

    def encode(self, words) -> list[int]:
        return [self.id(w) for w in words]

    def decode(self, ids) -> list[str]:
        return [self.tokens[i] for i in ids]

    @property
    def label_ids(self) -> list[int]:
        """All ids except blank."""
        return [i for i in range(len(self.tokens)) if i != self.blank_id]

    def digest(self) -> str:
        h = hashlib.sha1("\n".join(self.tokens).encode("utf-8"))
        h.update(f"|{self.blank_id}|{self.eos_id}".encode())
        return h.hexdigest()[:16]
