"""Mask predictors: p(token at each masked position | partially masked design).

Every predictor exposes ``fill``, which samples all masked positions at once
from temperature-scaled distributions restricted to the task alphabet. The
built-ins are:

* ``UniformPredictor``: flat over the alphabet.
* ``EmpiricalPredictor``: per-position categorical fit on the offline set,
  optionally conditioned on the nearest unmasked left neighbour.
* ``OraclePosteriorPredictor``: exact marginals of exp(beta * oracle) over
  every completion consistent with the unmasked tokens (test oracle).
* ``RemotePredictor``: JSON-over-HTTP client for a hosted diffusion LLM.

``build_prompt`` renders the in-context prompt that the remote service sees.
"""

from __future__ import annotations

import itertools
import logging
import math
import socket
import threading
import time
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence
from urllib.parse import urlparse

import numpy as np
import requests

from mdts.core import Design, MaskedDesign, OfflineDataset, Vocabulary, format_number, round2
from mdts.errors import MalformedResponseError, SpaceTooLargeError, TransportError

log = logging.getLogger(__name__)

MAX_ENUMERATION = 10**6
MIN_TEMPERATURE = 1e-6
REMOTE_MASK = "<M>"


# ---------------------------------------------------------------- prompts

@dataclass(frozen=True)
class PromptBundle:
    task_description: str
    dataset_block: str
    instruction: str
    include_description: bool = True

    def render(self) -> str:
        parts = [self.dataset_block, self.instruction]
        if self.include_description:
            parts.insert(0, self.task_description)
        return "\n\n".join(parts) + "\n"


def format_score(y: float) -> str:
    # trailing zeros trimmed: 0.0, 0.44, -386.9
    return repr(round2(y))


def dna_prompt_fragments(length: int, factor: str, alphabet: Sequence[str]) -> dict:
    letters = ", ".join(alphabet)
    return dict(
        description_text=(
            "You are a helpful optimization assistant that will help us generate a new "
            f"length-{length} optimal DNA sequence with maximum binding affinity with a "
            f"particular transcription factor {factor}.\n\n"
            "You are given the following existing DNA sequences and their corresponding "
            "binding affinities:"
        ),
        instruction_text=(
            "Please propose a new DNA sequence that is different from the existing DNA "
            "sequences and has higher binding affinity than the existing DNA sequences.\n"
            f"The DNA sequences should be in the format of {letters}.\n"
            "The new DNA sequence should be different from the existing DNA sequences in "
            "at least 1 position."
        ),
        design_label="DNA Sequence",
        score_label="Binding Affinity",
    )


def numeric_prompt_fragments(dims: int, bounds: tuple, objective: str) -> dict:
    lo, hi = bounds
    return dict(
        description_text=(
            "You are a helpful optimization assistant that will help us generate a new design. "
            f"The goal is to maximize the performance score of a {objective} design problem.\n\n"
            f"For each design, we have the following information, that is the {dims} continuous "
            f"values of the design parameters, each between {format_number(lo)} and {format_number(hi)}.\n\n"
            "You are given the following existing designs and their corresponding performance scores:"
        ),
        instruction_text=(
            "Please propose a new design to maximize the performance score.\n"
            "Each feature should be a float number.\n"
            "Each number should be rounded to two decimal places."
        ),
        design_label="Design",
        score_label="Performance Score",
    )


def format_row(design: Design, score: float, design_label: str, score_label: str) -> str:
    if isinstance(design.decoded, str):
        body = repr(list(design.decoded))
    else:
        body = "[" + ", ".join(format_number(v) for v in design.decoded) + "]"
    return f"{design_label}: {body}, {score_label}: {format_score(score)}"


def build_prompt(task, dataset: OfflineDataset, include_description: bool = True) -> PromptBundle:
    """Render the in-context prompt for ``task`` with rows in offline order."""
    rows = [format_row(d, y, task.design_label, task.score_label) for d, y in dataset.entries]
    return PromptBundle(task.description_text, "\n".join(rows), task.instruction_text, include_description)


# ---------------------------------------------------------------- fill

@dataclass(frozen=True)
class FillResult:
    completed_tokens: tuple
    positions: tuple
    position_probs: np.ndarray
    confidences: tuple


def tempered(P: np.ndarray, temperature: float) -> np.ndarray:
    P = np.asarray(P, dtype=float)
    if temperature == 1.0:
        return P / P.sum(axis=1, keepdims=True)
    T = max(float(temperature), MIN_TEMPERATURE)
    with np.errstate(divide="ignore"):
        logits = np.log(P) / T
    logits -= logits.max(axis=1, keepdims=True)
    W = np.exp(logits)
    return W / W.sum(axis=1, keepdims=True)


def sample_rows(P: np.ndarray, u: np.ndarray) -> np.ndarray:
    cum = np.cumsum(P, axis=1)
    return np.argmax(cum > (u * cum[:, -1])[:, None], axis=1)


class MaskPredictor:
    kind = "abstract"

    def distributions(self, prompt: PromptBundle | None, masked: MaskedDesign, vocabulary: Vocabulary) -> np.ndarray:
        """Rows of probabilities over the alphabet, one per masked position (ascending)."""
        raise NotImplementedError

    def fill(self, prompt, masked: MaskedDesign, vocabulary: Vocabulary,
             temperature: float = 1.0, rng_seed: int = 0) -> FillResult:
        if not temperature > 0:
            raise ValueError("temperature must be > 0")
        positions = masked.masked_positions
        if not positions:
            return FillResult(tuple(masked.tokens), (), np.zeros((0, vocabulary.size)), ())
        P = tempered(self.distributions(prompt, masked, vocabulary), temperature)
        rng = np.random.default_rng(rng_seed)
        picks = sample_rows(P, rng.random(len(positions)))
        tokens = list(masked.tokens)
        for pos, tok in zip(positions, picks):
            tokens[pos] = int(tok)
        conf = tuple(float(P[i, tok]) for i, tok in enumerate(picks))
        return FillResult(tuple(tokens), positions, P, conf)


class UniformPredictor(MaskPredictor):
    kind = "uniform"

    def distributions(self, prompt, masked, vocabulary):
        m = masked.n_masked
        return np.full((m, vocabulary.size), 1.0 / vocabulary.size)


class EmpiricalPredictor(MaskPredictor):
    """Add-alpha smoothed per-position categorical fit on offline token strings."""

    kind = "empirical"

    def __init__(self, designs: Sequence[Design], vocabulary_size: int, order: int = 0, smoothing: float = 1.0):
        if order not in (0, 1):
            raise ValueError("order must be 0 or 1")
        X = np.array([d.tokens for d in designs], dtype=int)
        self.order = order
        self.smoothing = float(smoothing)
        self.k = vocabulary_size
        n, L = X.shape
        self.n = n
        self.counts = np.zeros((L, self.k))
        for i in range(L):
            self.counts[i] = np.bincount(X[:, i], minlength=self.k)
        self.pair_counts = None
        if order == 1:
            # pair_counts[j, i, a, b] = #(x_j = a and x_i = b)
            self.pair_counts = np.zeros((L, L, self.k, self.k))
            for row in X:
                self.pair_counts[np.arange(L)[:, None], np.arange(L)[None, :], row[:, None], row[None, :]] += 1

    @classmethod
    def fit(cls, dataset: OfflineDataset, vocabulary: Vocabulary, order: int = 0, smoothing: float = 1.0):
        return cls(dataset.designs, vocabulary.size, order, smoothing)

    def distributions(self, prompt, masked, vocabulary):
        a = self.smoothing
        rows = []
        tokens = masked.tokens
        for i in masked.masked_positions:
            left = next((j for j in range(i - 1, -1, -1) if tokens[j] != masked.mask_sentinel), None)
            if self.order == 1 and left is not None:
                c = self.pair_counts[left, i, tokens[left]]
            else:
                c = self.counts[i]
            rows.append((c + a) / (c.sum() + a * self.k))
        return np.array(rows)


class OraclePosteriorPredictor(MaskPredictor):
    """Exact marginals of exp(beta * oracle(x)) over consistent completions.

    Needs either a full score table of shape ``(k,) * L`` or an oracle callable
    over token tuples, in which case the conditional slice is enumerated.
    """

    kind = "oracle-posterior"

    def __init__(self, table: np.ndarray | None = None, oracle: Callable | None = None,
                 vocabulary_size: int | None = None, beta: float = 5.0):
        if table is None and oracle is None:
            raise ValueError("need a score table or an oracle")
        if table is not None and table.size > MAX_ENUMERATION:
            raise SpaceTooLargeError(f"score table has {table.size} entries")
        self.table = table
        self.oracle = oracle
        self.k = table.shape[0] if table is not None else vocabulary_size
        self.beta = float(beta)

    def _slice(self, masked: MaskedDesign) -> np.ndarray:
        positions = masked.masked_positions
        if self.table is not None:
            index = tuple(slice(None) if tok == masked.mask_sentinel else tok for tok in masked.tokens)
            return np.asarray(self.table[index], dtype=float)
        m = len(positions)
        if self.k**m > MAX_ENUMERATION:
            raise SpaceTooLargeError(f"{self.k}^{m} completions exceed {MAX_ENUMERATION}")
        out = np.empty((self.k,) * m)
        tokens = list(masked.tokens)
        for combo in itertools.product(range(self.k), repeat=m):
            for p, tok in zip(positions, combo):
                tokens[p] = tok
            out[combo] = self.oracle(tuple(tokens))
        return out

    def distributions(self, prompt, masked, vocabulary):
        sub = self._slice(masked)
        m = sub.ndim
        if math.isinf(self.beta):
            w = (sub == sub.max()).astype(float)
        else:
            w = np.exp(self.beta * (sub - sub.max()))
        total = w.sum()
        rows = []
        for ax in range(m):
            others = tuple(a for a in range(m) if a != ax)
            rows.append(w.sum(axis=others) / total)
        return np.array(rows).reshape(m, self.k)


# ---------------------------------------------------------------- remote

class RemotePredictor(MaskPredictor):
    """Client for the ``POST /v1/fill`` mask-fill protocol.

    Characters and alphabet-level distributions travel over the wire; the
    server owns tokenization. Transport failures are retried, schema
    violations are not.
    """

    kind = "remote"

    def __init__(self, url: str, timeout: float = 30.0, retries: int = 3, max_in_flight: int = 4,
                 deferred_connect: bool = False, backoff: float = 0.05, session=None):
        self.url = url.rstrip("/")
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.session = session or requests.Session()
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self.transport_attempts = 0
        self._lock = threading.Lock()
        if not deferred_connect:
            self._probe()

    @property
    def endpoint(self) -> str:
        return self.url + "/v1/fill"

    def _probe(self):
        parts = urlparse(self.url)
        port = parts.port or (443 if parts.scheme == "https" else 80)
        try:
            socket.create_connection((parts.hostname, port), timeout=self.timeout).close()
        except OSError as exc:
            raise TransportError(f"remote predictor at {self.url} unreachable: {exc}") from exc

    def _post(self, body: dict) -> dict:
        last = None
        for attempt in range(self.retries + 1):
            with self._lock:
                self.transport_attempts += 1
            try:
                with self._slots:
                    resp = self.session.post(self.endpoint, json=body, timeout=self.timeout)
                if 200 <= resp.status_code < 300:
                    try:
                        return resp.json()
                    except ValueError as exc:
                        raise MalformedResponseError(f"response is not JSON: {exc}") from exc
                last = f"HTTP {resp.status_code}"
            except requests.RequestException as exc:
                last = str(exc)
            log.warning("remote fill attempt %d failed: %s", attempt + 1, last)
            if attempt < self.retries:
                time.sleep(self.backoff * 2**attempt)
        raise TransportError(f"remote fill failed after {self.retries + 1} attempts: {last}")

    def request_body(self, prompt, masked, vocabulary, temperature, seed) -> dict:
        return {
            "prompt": prompt.render() if prompt is not None else "",
            "tokens": [REMOTE_MASK if t == masked.mask_sentinel else vocabulary.tokens[t] for t in masked.tokens],
            "alphabet": list(vocabulary.tokens),
            "temperature": float(temperature),
            "seed": int(seed),
        }

    def parse_response(self, data, masked: MaskedDesign, vocabulary: Vocabulary) -> FillResult:
        try:
            out_tokens = data["tokens"]
            probs = np.asarray(data["probs"], dtype=float)
            conf = [float(c) for c in data["confidences"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedResponseError(f"bad response schema: {exc}") from exc
        positions = masked.masked_positions
        if not isinstance(out_tokens, list) or len(out_tokens) != len(masked.tokens):
            raise MalformedResponseError("response changed the sequence length")
        ids = []
        for i, (sym, orig) in enumerate(zip(out_tokens, masked.tokens)):
            if sym not in vocabulary.tokens:
                raise MalformedResponseError(f"position {i}: symbol {sym!r} outside the alphabet")
            tok = vocabulary.tokens.index(sym)
            if orig != masked.mask_sentinel and tok != orig:
                raise MalformedResponseError(f"position {i} was unmasked but changed")
            ids.append(tok)
        m = len(positions)
        if m == 0 and probs.size == 0:
            probs = np.zeros((0, vocabulary.size))
        if probs.shape != (m, vocabulary.size) or len(conf) != m:
            raise MalformedResponseError(f"expected {m} probability rows of width {vocabulary.size}")
        if np.any(probs < 0) or not np.all(np.isfinite(probs)) or np.any(np.abs(probs.sum(axis=1) - 1) > 1e-6):
            raise MalformedResponseError("probability rows must be non-negative and sum to 1")
        probs = probs / probs.sum(axis=1, keepdims=True) if m else probs
        for r, pos in enumerate(positions):
            if abs(probs[r, ids[pos]] - conf[r]) > 1e-6:
                raise MalformedResponseError(f"confidence at position {pos} disagrees with probs")
        conf = tuple(float(probs[r, ids[pos]]) for r, pos in enumerate(positions))
        return FillResult(tuple(ids), positions, probs, conf)

    def fill(self, prompt, masked, vocabulary, temperature=1.0, rng_seed=0):
        if not temperature > 0:
            raise ValueError("temperature must be > 0")
        body = self.request_body(prompt, masked, vocabulary, temperature, rng_seed)
        return self.parse_response(self._post(body), masked, vocabulary)

    def distributions(self, prompt, masked, vocabulary):
        return self.fill(prompt, masked, vocabulary, 1.0, 0).position_probs


# ---------------------------------------------------------------- wiring

@dataclass(frozen=True)
class PredictorSpec:
    kind: str = "empirical"
    order: int = 0
    smoothing: float = 1.0
    beta: float = 5.0
    url: str | None = None
    timeout: float = 30.0
    retries: int = 3
    max_in_flight: int = 4
    deferred_connect: bool = False

    def __post_init__(self):
        if self.kind not in ("uniform", "empirical", "oracle-posterior", "remote"):
            raise ValueError(f"unknown predictor kind {self.kind!r}")
        if self.kind == "remote" and not self.url:
            raise ValueError("remote predictor needs a url")


def make_predictor(spec: PredictorSpec, task, dataset: OfflineDataset) -> MaskPredictor:
    if spec.kind == "uniform":
        return UniformPredictor()
    if spec.kind == "empirical":
        return EmpiricalPredictor.fit(dataset, task.vocabulary, spec.order, spec.smoothing)
    if spec.kind == "oracle-posterior":
        if getattr(task, "score_table", None) is None:
            raise SpaceTooLargeError(f"task {task.name} has no enumerable score table")
        return OraclePosteriorPredictor(task.score_table, beta=spec.beta)
    return RemotePredictor(spec.url, spec.timeout, spec.retries, spec.max_in_flight, spec.deferred_connect)


class CallCounter:
    """Wraps a predictor and counts ``fill`` calls."""

    def __init__(self, inner: MaskPredictor):
        self.inner = inner
        self.calls = 0
        self._lock = threading.Lock()

    @property
    def kind(self):
        return self.inner.kind

    def fill(self, *args, **kwargs) -> FillResult:
        with self._lock:
            self.calls += 1
        return self.inner.fill(*args, **kwargs)

    def distributions(self, *args, **kwargs):
        return self.inner.distributions(*args, **kwargs)


# ---------------------------------------------------------------- masked CE

def masked_ce_term(predictor, x0: Design, masked: MaskedDesign, vocabulary: Vocabulary, prompt=None) -> float:
    positions = masked.masked_positions
    if not positions:
        return 0.0
    P = predictor.distributions(prompt, masked, vocabulary)
    p_true = P[np.arange(len(positions)), [x0.tokens[i] for i in positions]]
    if np.any(p_true <= 0):
        return math.inf
    return float(-np.log(p_true).sum() / masked.t)


def masked_ce_loss(predictor, corpus: Sequence[Design], trials: int, rng_seed: int,
                   vocabulary: Vocabulary, prompt=None) -> float:
    """Monte-Carlo estimate of the masked cross-entropy over ``corpus``.

    Returns ``inf`` (with a warning) as soon as a true token gets zero probability.
    """
    from mdts.denoise import forward_mask

    if not corpus:
        raise ValueError("corpus must be non-empty")
    rng = np.random.default_rng(rng_seed)
    total = 0.0
    for _ in range(trials):
        x0 = corpus[int(rng.integers(len(corpus)))]
        t = float(rng.uniform(0.0, 1.0))
        if t == 0.0:
            continue
        masked = forward_mask(x0, t, int(rng.integers(2**63)))
        term = masked_ce_term(predictor, x0, masked, vocabulary, prompt)
        if math.isinf(term):
            warnings.warn("true token had zero probability; masked CE is infinite", RuntimeWarning)
            return math.inf
        total += term
    return total / trials
