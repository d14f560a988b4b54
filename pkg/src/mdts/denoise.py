"""Forward masking, single reverse steps and full unrolls.

A reverse step from ``t`` to ``s`` fills every masked position, then puts
``floor((s/t)·L + 1/2)`` of the just-filled positions back under the mask,
choosing the least confident ones (ties: lower index first). Tokens committed
in earlier steps are never remasked.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from mdts.core import Design, Invalid, MaskedDesign, Vocabulary, validate

_M64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _M64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _M64
    return x ^ (x >> 31)


def mix_seed(*parts: int) -> int:
    """Deterministic 64-bit seed derived from a tuple of integers."""
    h = 0
    for p in parts:
        h = _splitmix64(h ^ (int(p) & _M64))
    return h


@dataclass(frozen=True)
class Schedule:
    depth: int

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("schedule depth must be >= 1")

    @property
    def timesteps(self) -> tuple:
        D = self.depth
        return tuple((D - k) / D for k in range(D + 1))

    @property
    def dt(self) -> float:
        return 1.0 / self.depth

    def index(self, t: float) -> int:
        for k, tk in enumerate(self.timesteps):
            if math.isclose(t, tk, rel_tol=0, abs_tol=1e-12):
                return k
        raise ValueError(f"timestep {t} is not on a depth-{self.depth} schedule")

    def next(self, t: float) -> float:
        return self.timesteps[self.index(t) + 1]


def forward_mask(design: Design, t: float, rng_seed: int, mask_sentinel: int = -1) -> MaskedDesign:
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    rng = np.random.default_rng(rng_seed)
    hit = rng.random(len(design.tokens)) < t
    if t == 1.0:
        hit[:] = True
    tokens = tuple(mask_sentinel if h else tok for h, tok in zip(hit, design.tokens))
    return MaskedDesign(tokens, float(t), mask_sentinel)


def remask_count(t: float, s: float, length: int, n_filled: int | None = None) -> int:
    ratio = Fraction(s).limit_denominator(10**6) / Fraction(t).limit_denominator(10**6)
    m = math.floor(ratio * length + Fraction(1, 2))
    upper = length if n_filled is None else n_filled
    return max(0, min(m, upper))


def geometric_mean(values) -> float:
    if not values:
        return 1.0
    if len(set(values)) == 1:
        return float(values[0])
    return math.exp(math.fsum(math.log(v) for v in values) / len(values))


@dataclass(frozen=True)
class StepResult:
    child: MaskedDesign
    committed_positions: tuple
    committed_confidences: tuple
    step_prior: float
    design: Design | None = None  # set when the child is fully unmasked
    fill_calls: int = 1


def reverse_step(node: MaskedDesign, predictor, prompt, s: float, vocabulary: Vocabulary,
                 expected_dims: int | None, rng_seed: int, attempts: int = 8,
                 temperature: float = 1.0, step_index: int = 0) -> StepResult | Invalid:
    t = node.t
    if not 0.0 <= s < t <= 1.0:
        raise ValueError(f"need 0 <= s < t <= 1, got s={s}, t={t}")
    fill = None
    candidate = None
    calls = 0
    for attempt in range(attempts):
        calls += 1
        fill = predictor.fill(prompt, node, vocabulary, temperature, mix_seed(rng_seed, step_index, attempt))
        if vocabulary.is_numeric or s == 0.0:
            candidate = validate(fill.completed_tokens, vocabulary, expected_dims)
            if not candidate:
                continue
        break
    else:
        return Invalid(f"{attempts} completions failed validation: {candidate.reason}")

    positions = fill.positions
    m = remask_count(t, s, len(node.tokens), len(positions))
    order = sorted(range(len(positions)), key=lambda r: (fill.confidences[r], positions[r]))
    remasked = set(order[:m])
    tokens = list(fill.completed_tokens)
    for r in remasked:
        tokens[positions[r]] = node.mask_sentinel
    kept = [r for r in range(len(positions)) if r not in remasked]
    committed = tuple(positions[r] for r in kept)
    conf = tuple(fill.confidences[r] for r in kept)
    prior = geometric_mean(conf)
    child = MaskedDesign(tuple(tokens), float(s), node.mask_sentinel)
    design = candidate if s == 0.0 else None
    return StepResult(child, committed, conf, prior, design, calls)


def unroll(node: MaskedDesign, predictor, prompt, schedule: Schedule, vocabulary: Vocabulary,
           expected_dims: int | None, rng_seed: int, attempts: int = 8,
           temperature: float = 1.0) -> Design | Invalid:
    """Denoise ``node`` down to t = 0 along the remaining schedule."""
    k = schedule.index(node.t)
    if k == schedule.depth:
        return validate(node.tokens, vocabulary, expected_dims)
    steps = schedule.timesteps
    current = node
    for step_index in range(k, schedule.depth):
        res = reverse_step(current, predictor, prompt, steps[step_index + 1], vocabulary,
                           expected_dims, rng_seed, attempts, temperature, step_index)
        if not res:
            return res
        current = res.child
    return res.design
