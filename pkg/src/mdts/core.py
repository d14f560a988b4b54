"""Domain types shared across the package.

Designs are always handled as sequences of integer token ids over a
:class:`Vocabulary`, one token per character. Discrete tasks decode to a
symbol string; numeric tasks decode to a tuple of reals serialized with two
decimals and ``", "`` separators.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from typing import Sequence, Union

from mdts.errors import ConfigError, EncodingError

MASK = -1
DNA = ("A", "C", "G", "T")
NUMERIC_SYMBOLS = tuple("0123456789") + ("-", ".", " ", ",")

Decoded = Union[str, tuple]

_NUMBER = re.compile(r"-?\d+(?:\.\d+)?")


@dataclass(frozen=True)
class Vocabulary:
    kind: str
    tokens: tuple
    mask_sentinel: int = MASK
    # numeric only: pad every field to this many characters so designs share one length
    field_width: int | None = None

    def __post_init__(self):
        if self.kind not in ("discrete-alphabet", "numeric-string"):
            raise ValueError(f"unknown vocabulary kind {self.kind!r}")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")
        if 0 <= self.mask_sentinel < len(self.tokens):
            raise ValueError("mask sentinel collides with a token id")
        if self.kind == "discrete-alphabet" and len(self.tokens) < 2:
            raise ValueError("discrete alphabets need at least two symbols")

    @classmethod
    def discrete(cls, symbols: Sequence[str] = DNA) -> "Vocabulary":
        return cls("discrete-alphabet", tuple(symbols))

    @classmethod
    def numeric(cls, field_width: int | None = None) -> "Vocabulary":
        return cls("numeric-string", NUMERIC_SYMBOLS, field_width=field_width)

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def is_numeric(self) -> bool:
        return self.kind == "numeric-string"

    def index(self, symbol: str) -> int:
        try:
            return self.tokens.index(symbol)
        except ValueError:
            raise EncodingError(f"symbol {symbol!r} not in alphabet {self.tokens}") from None

    def ids(self, text: str) -> tuple:
        return tuple(self.index(ch) for ch in text)

    def text(self, token_ids: Sequence[int], mask_char: str = "?") -> str:
        return "".join(mask_char if i == self.mask_sentinel else self.tokens[i] for i in token_ids)


def round2(x: float) -> float:
    """Round to two decimals, half away from zero."""
    q = Decimal(repr(float(x))).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP)
    return float(q) + 0.0  # normalizes -0.0


def format_number(x: float, width: int | None = None) -> str:
    s = f"{round2(x):.2f}"
    if s == "-0.00":
        s = "0.00"
    return s.rjust(width) if width else s


@dataclass(frozen=True)
class Design:
    tokens: tuple
    decoded: Decoded

    @property
    def key(self) -> Decoded:
        return self.decoded

    def __len__(self):
        return len(self.tokens)


@dataclass(frozen=True)
class Invalid:
    """A completion that does not parse into a design. Falsy."""

    reason: str

    def __bool__(self):
        return False


def encode(decoded: Decoded, vocabulary: Vocabulary) -> Design:
    if vocabulary.is_numeric:
        values = tuple(decoded)
        if not values:
            raise EncodingError("numeric design must have at least one value")
        if not all(math.isfinite(float(v)) for v in values):
            raise EncodingError("numeric design contains a non-finite value")
        rounded = tuple(round2(v) for v in values)
        text = ", ".join(format_number(v, vocabulary.field_width) for v in rounded)
        return Design(vocabulary.ids(text), rounded)
    text = "".join(decoded)
    if not text:
        raise EncodingError("discrete design must be non-empty")
    return Design(vocabulary.ids(text), text)


def parse_numeric(text: str, expected_dims: int) -> tuple | Invalid:
    fields = text.split(",")
    if len(fields) != expected_dims:
        return Invalid(f"expected {expected_dims} values, got {len(fields)}")
    values = []
    for f in fields:
        f = f.strip(" ")
        if not _NUMBER.fullmatch(f):
            return Invalid(f"malformed number {f!r}")
        v = float(f)
        if not math.isfinite(v):
            return Invalid(f"non-finite value {f!r}")
        values.append(round2(v))
    return tuple(values)


def validate(tokens: Sequence[int], vocabulary: Vocabulary, expected_dims: int | None = None) -> Design | Invalid:
    """Turn a fully unmasked token sequence into a :class:`Design`.

    Numeric sequences must parse into exactly ``expected_dims`` finite numbers;
    the returned design is re-serialized in canonical form. Discrete sequences
    are always valid. Never raises on malformed content.
    """
    tokens = tuple(int(i) for i in tokens)
    if any(i == vocabulary.mask_sentinel for i in tokens):
        return Invalid("design still contains masked positions")
    if any(i < 0 or i >= vocabulary.size for i in tokens):
        return Invalid("token id out of range")
    text = vocabulary.text(tokens)
    if not vocabulary.is_numeric:
        return Design(tokens, text)
    if expected_dims is None:
        raise ValueError("numeric validation needs expected_dims")
    values = parse_numeric(text, expected_dims)
    if isinstance(values, Invalid):
        return values
    return encode(values, vocabulary)


def decode(tokens: Sequence[int], vocabulary: Vocabulary, expected_dims: int | None = None) -> Decoded:
    if vocabulary.is_numeric and expected_dims is None:
        expected_dims = vocabulary.text(tokens).count(",") + 1
    result = validate(tokens, vocabulary, expected_dims)
    if isinstance(result, Invalid):
        raise EncodingError(result.reason)
    return result.decoded


def design_text(design: Design) -> str:
    if isinstance(design.decoded, str):
        return design.decoded
    return ", ".join(format_number(v) for v in design.decoded)


@dataclass(frozen=True)
class MaskedDesign:
    tokens: tuple
    t: float
    mask_sentinel: int = MASK

    def __post_init__(self):
        if not 0.0 <= self.t <= 1.0:
            raise ValueError(f"timestep {self.t} outside [0, 1]")
        n = self.n_masked
        if self.t == 1.0 and n != len(self.tokens):
            raise ValueError("t = 1 requires every position masked")
        if self.t == 0.0 and n != 0:
            raise ValueError("t = 0 requires no masked positions")

    @classmethod
    def fully_masked(cls, length: int, mask_sentinel: int = MASK) -> "MaskedDesign":
        return cls((mask_sentinel,) * length, 1.0, mask_sentinel)

    @property
    def mask(self) -> tuple:
        return tuple(i == self.mask_sentinel for i in self.tokens)

    @property
    def masked_positions(self) -> tuple:
        return tuple(i for i, tok in enumerate(self.tokens) if tok == self.mask_sentinel)

    @property
    def n_masked(self) -> int:
        return sum(1 for tok in self.tokens if tok == self.mask_sentinel)

    def __len__(self):
        return len(self.tokens)


@dataclass(frozen=True)
class OfflineDataset:
    entries: tuple

    def __post_init__(self):
        if not self.entries:
            raise ValueError("offline dataset must be non-empty")
        lengths = {len(d.tokens) for d, _ in self.entries}
        if len(lengths) != 1:
            raise ValueError("offline designs must share one length")

    @property
    def designs(self) -> list:
        return [d for d, _ in self.entries]

    @property
    def scores(self) -> list:
        return [float(y) for _, y in self.entries]

    @property
    def f_best(self) -> float:
        return max(self.scores)

    @property
    def length(self) -> int:
        return len(self.entries[0][0].tokens)

    def __len__(self):
        return len(self.entries)


@dataclass(frozen=True)
class EpisodeConfig:
    depth: int = 4
    branching: int = 5
    iterations: int = 16
    rollouts: int = 5
    omega: float = 1.0
    temperature: float = 1.0
    top_k: int = 128
    seed: int = 0
    resample_attempts: int = 8

    def __post_init__(self):
        for name in ("depth", "branching", "iterations", "rollouts", "top_k", "resample_attempts"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if not self.temperature > 0:
            raise ConfigError("temperature must be > 0")
        if not math.isfinite(self.omega):
            raise ConfigError("omega must be finite")
