"""Caption normalization, vocabulary and frequency-derived loss weights."""
from __future__ import annotations

import csv
import json
import unicodedata
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

from .errors import FormatError, InvalidCaption, OutOfVocabulary

EOS = "<eos>"
CAPTION_COLUMNS = ("file_name",) + tuple(f"caption_{i}" for i in range(1, 6))


def normalize_caption(raw: str) -> list[str]:
    """Lower-case, drop punctuation, split on whitespace and append ``<eos>``.

    >>> normalize_caption("A dog barks.")
    ['a', 'dog', 'barks', '<eos>']
    """
    # punctuation inside words ("dog's") is removed rather than split on
    words = "".join(
        "" if unicodedata.category(ch).startswith("P") else ch for ch in raw.lower()
    ).split()
    if not words:
        raise InvalidCaption(f"caption {raw!r} is empty after normalization")
    return words + [EOS]


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    frequency: Mapping[str, int]

    def __post_init__(self):
        if self.tokens.count(EOS) != 1:
            raise FormatError("vocabulary must contain <eos> exactly once")
        if len(set(self.tokens)) != len(self.tokens):
            raise FormatError("vocabulary tokens must be unique")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self) -> int:
        return len(self.tokens)

    def index_of(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise OutOfVocabulary(token) from None

    def __contains__(self, token: str) -> bool:
        return token in self._index

    @property
    def eos_index(self) -> int:
        return self._index[EOS]

    def to_json(self, beta: float | None = None) -> str:
        doc: dict = {"tokens": [{"token": t, "frequency": int(self.frequency[t])} for t in self.tokens]}
        if beta is not None:
            doc["beta"] = beta
        return json.dumps(doc, ensure_ascii=False, indent=1)

    def save(self, path, beta: float | None = None) -> None:
        Path(path).write_text(self.to_json(beta) + "\n", encoding="utf-8")

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        doc = json.loads(text)
        try:
            entries = doc["tokens"]
            tokens = tuple(e["token"] for e in entries)
            freq = {e["token"]: int(e["frequency"]) for e in entries}
        except (KeyError, TypeError) as exc:
            raise FormatError(f"malformed vocabulary file: {exc}") from None
        return cls(tokens, freq)

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def build_vocab(captions: Iterable[str]) -> Vocabulary:
    """Sorted vocabulary over all normalized captions, counting the appended eos."""
    counts: Counter[str] = Counter()
    n = 0
    for c in captions:
        counts.update(normalize_caption(c))
        n += 1
    if n == 0:
        raise InvalidCaption("cannot build a vocabulary from zero captions")
    tokens = tuple(sorted(counts))
    return Vocabulary(tokens, dict(counts))


def encode_caption(tokens: Iterable[str], vocab: Vocabulary) -> list[int]:
    """Map tokens to indices; the result always ends with the eos index."""
    out = [vocab.index_of(t) for t in tokens]
    if not out or out[-1] != vocab.eos_index:
        out.append(vocab.eos_index)
    return out


def decode_indices(indices: Iterable[int], vocab: Vocabulary, strip_eos: bool = False) -> list[str]:
    words = [vocab.tokens[i] for i in indices]
    if strip_eos:
        words = [w for w in words if w != EOS]
    return words


@dataclass(frozen=True)
class WeightTable:
    phi: tuple[float, ...]
    beta: float

    def __getitem__(self, index: int) -> float:
        return self.phi[index]

    def __len__(self) -> int:
        return len(self.phi)


def token_weights(vocab: Vocabulary, beta: float = 0.5) -> WeightTable:
    """``phi(w) = max(beta, min_frequency / frequency(w))``."""
    if not 0.0 < beta <= 1.0:
        raise ValueError(f"beta must lie in (0, 1], got {beta}")
    fmin = min(vocab.frequency[t] for t in vocab.tokens)
    return WeightTable(tuple(max(beta, fmin / vocab.frequency[t]) for t in vocab.tokens), beta)


def uniform_weights(vocab_size: int) -> WeightTable:
    return WeightTable((1.0,) * vocab_size, 1.0)


def read_captions_csv(path) -> dict[str, list[str]]:
    """Read the five-caption CSV layout into ``file_name -> [captions]`` (file order kept)."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"captions file not found: {path}")
    out: dict[str, list[str]] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = tuple(reader.fieldnames or ())
        if not header or header[0] != "file_name" or not any(h.startswith("caption_") for h in header):
            raise FormatError(f"{path}: expected header {','.join(CAPTION_COLUMNS)}, got {header}")
        cols = [h for h in header if h.startswith("caption_")]
        for row in reader:
            caps = [row[c] for c in cols if row.get(c) and row[c].strip()]
            out.setdefault(row["file_name"], []).extend(caps)
    return out
