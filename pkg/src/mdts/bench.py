"""Synthetic tasks with exact oracles, the evaluation protocol and baselines.

``tfb-synth-L`` is a DNA landscape made of a position weight matrix plus a
sparse set of seeded pairwise couplings; the whole space is enumerated once,
so normalization bounds and the global optimum are exact. The numeric tasks
are a shifted sphere and a negated Rastrigin whose maximum (0) sits at a
seeded centre on the two-decimal grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata

from mdts.core import DNA, Design, EpisodeConfig, MaskedDesign, OfflineDataset, Vocabulary, encode, format_number, validate
from mdts.denoise import Schedule, mix_seed, unroll
from mdts.errors import SpaceTooLargeError, UnsupportedTaskError
from mdts.predictor import CallCounter, MAX_ENUMERATION, build_prompt, dna_prompt_fragments, numeric_prompt_fragments
from mdts.search import Archive
from mdts.surrogate import GPModel, design_ei, ei_from_moments, fit, predict_many

DIRECT_STREAM = 0x44495245
FACTORS = {8: "SIX6 REF R1", 10: "Pho4"}


@dataclass(eq=False)
class TaskSpec:
    name: str
    vocabulary: Vocabulary
    length: int
    dims: int | None
    oracle: Callable[[Design], float]
    y_min: float
    y_max: float
    description_text: str
    instruction_text: str
    design_label: str
    score_label: str
    params: dict = field(default_factory=dict)
    score_table: np.ndarray | None = None
    optimum: Design | None = None
    bounds: tuple | None = None
    center: np.ndarray | None = None

    def __post_init__(self):
        if not self.y_min < self.y_max:
            raise ValueError("normalization bounds must satisfy y_min < y_max")

    @property
    def is_numeric(self) -> bool:
        return self.dims is not None


def make_tfb_synth(L: int = 8, alphabet: Sequence[str] = DNA, oracle_seed: int = 0,
                   pair_density: float = 0.3, pair_scale: float = 0.5, factor: str | None = None) -> TaskSpec:
    vocab = Vocabulary.discrete(alphabet)
    k = vocab.size
    if k**L > MAX_ENUMERATION:
        raise SpaceTooLargeError(f"{k}^{L} designs exceed the enumeration limit {MAX_ENUMERATION}")
    rng = np.random.default_rng(oracle_seed)
    pwm = rng.normal(size=(L, k))
    table = np.zeros((k,) * L)
    for i in range(L):
        shape = [1] * L
        shape[i] = k
        table += pwm[i].reshape(shape)
    for i in range(L):
        for j in range(i + 1, L):
            if rng.random() < pair_density:
                coupling = rng.normal(scale=pair_scale, size=(k, k))
                shape = [1] * L
                shape[i] = shape[j] = k
                table += coupling.reshape(shape)
    best = np.unravel_index(int(np.argmax(table)), table.shape)
    optimum = Design(tuple(int(i) for i in best), vocab.text(best))
    frag = dna_prompt_fragments(L, factor or FACTORS.get(L, "SYNTH-TF"), alphabet)
    params = dict(kind="tfb-synth", L=L, alphabet="".join(alphabet), oracle_seed=oracle_seed,
                  pair_density=pair_density, pair_scale=pair_scale)

    def oracle(design: Design) -> float:
        return float(table[tuple(design.tokens)])

    return TaskSpec(f"tfb-synth-{L}", vocab, L, None, oracle, float(table.min()), float(table.max()),
                    params=params, score_table=table, optimum=optimum, **frag)


def _rastrigin_term(z):
    return z**2 - 10.0 * np.cos(2.0 * np.pi * z)


def make_numeric_synth(d: int, bounds: tuple = (-5.0, 5.0), kind: str = "sphere", seed: int = 0) -> TaskSpec:
    if d < 1:
        raise ValueError("need d >= 1")
    if kind not in ("sphere", "rastrigin-negated"):
        raise ValueError(f"unknown numeric task kind {kind!r}")
    lo, hi = (float(b) for b in bounds)
    rng = np.random.default_rng(seed)
    span = hi - lo
    center = np.round(rng.uniform(lo + 0.25 * span, hi - 0.25 * span, size=d), 2)
    width = max(len(format_number(lo)), len(format_number(hi)))
    vocab = Vocabulary.numeric(field_width=width)
    length = d * width + 2 * (d - 1)

    if kind == "sphere":
        y_min = -float(np.sum(np.maximum((lo - center) ** 2, (hi - center) ** 2)))

        def oracle(design: Design) -> float:
            x = np.asarray(design.decoded, dtype=float)
            return -float(np.sum((x - center) ** 2))
    else:
        # worst value per dimension over the two-decimal grid designs actually live on
        grid = np.arange(round(lo * 100), round(hi * 100) + 1) / 100.0
        worst = [float(np.max(_rastrigin_term(grid - c))) for c in center]
        y_min = -(10.0 * d + sum(worst))

        def oracle(design: Design) -> float:
            z = np.asarray(design.decoded, dtype=float) - center
            return -float(10.0 * d + np.sum(_rastrigin_term(z)))

    frag = numeric_prompt_fragments(d, (lo, hi), kind)
    params = dict(kind=kind, d=d, bounds=[lo, hi], seed=seed)
    optimum = encode(tuple(center), vocab)
    return TaskSpec(f"numeric-{kind}-{d}", vocab, length, d, oracle, y_min, 0.0,
                    params=params, optimum=optimum, bounds=(lo, hi), center=center, **frag)


def sample_offline(task: TaskSpec, N: int = 10, seed: int = 0) -> OfflineDataset:
    if N < 1:
        raise ValueError("need N >= 1")
    rng = np.random.default_rng(seed)
    if task.is_numeric:
        lo, hi = task.bounds
        designs = [encode(tuple(row), task.vocabulary) for row in rng.uniform(lo, hi, size=(N, task.dims))]
    else:
        designs = [validate(row, task.vocabulary) for row in rng.integers(task.vocabulary.size, size=(N, task.length))]
    return OfflineDataset(tuple((d, task.oracle(d)) for d in designs))


def normalize(y: float, task: TaskSpec) -> float:
    return (y - task.y_min) / (task.y_max - task.y_min)


# ---------------------------------------------------------------- gradient baselines

@dataclass
class GradAscentResult:
    designs: list
    initial_values: np.ndarray
    final_values: np.ndarray


def surrogate_objective(gp: GPModel, objective: str, f_best: float) -> Callable[[np.ndarray], np.ndarray]:
    fz = gp.featurizer

    def f(X: np.ndarray) -> np.ndarray:
        mu, sigma = predict_many(gp, (np.atleast_2d(X) - fz.mean) / fz.std)
        if objective == "mean":
            return mu
        return np.array([ei_from_moments(float(m), float(s), f_best) for m, s in zip(mu, sigma)])

    if objective not in ("mean", "ei"):
        raise ValueError(f"unknown objective {objective!r}")
    return f


def _round_rows(X: np.ndarray) -> np.ndarray:
    sign = np.sign(X)
    return sign * np.floor(np.abs(X) * 100.0 + 0.5 + 1e-9) / 100.0


def grad_ascent(dataset: OfflineDataset, task: TaskSpec, gp: GPModel, objective: str = "mean",
                steps: int = 100, step_size: float | None = None, K: int = 128, seed: int = 0,
                h: float = 1e-3, max_halvings: int = 10) -> GradAscentResult:
    """Finite-difference ascent of the GP mean or EI from tiled offline starts.

    Each iteration tries a normalized-gradient step of ``step_size`` and halves
    it until the surrogate does not decrease; a start whose step cannot be
    accepted stops. The best two-decimal point seen along each path is kept.
    """
    if not task.is_numeric:
        raise UnsupportedTaskError("gradient baselines need a numeric task")
    lo, hi = task.bounds
    if step_size is None:
        step_size = 0.05 * (hi - lo)
    f = surrogate_objective(gp, objective, dataset.f_best)
    base = np.array([d.decoded for d in dataset.designs], dtype=float)
    if steps == 0:
        X = base
    else:
        rng = np.random.default_rng(seed)
        reps = math.ceil(K / len(base))
        starts = [base]
        for _ in range(reps - 1):
            noise = rng.normal(scale=0.1 * (hi - lo), size=base.shape)
            starts.append(np.clip(_round_rows(base + noise), lo, hi))
        X = np.concatenate(starts)[:K]
    X = X.copy()
    F = f(X)
    initial = F.copy()
    best_X, best_F = X.copy(), F.copy()
    d = X.shape[1]
    active = np.ones(len(X), dtype=bool)
    eye = np.eye(d) * h
    for _ in range(steps):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        probes = np.concatenate([X[idx][:, None, :] + eye[None], X[idx][:, None, :] - eye[None]], axis=1)
        vals = f(probes.reshape(-1, d)).reshape(len(idx), 2 * d)
        G = (vals[:, :d] - vals[:, d:]) / (2 * h)
        gn = np.linalg.norm(G, axis=1)
        moving = gn > 0
        active[idx[~moving]] = False
        idx, G, gn = idx[moving], G[moving], gn[moving]
        eta = np.full(len(idx), float(step_size))
        pending = np.ones(len(idx), dtype=bool)
        for _ in range(max_halvings):
            if not pending.any():
                break
            p = np.flatnonzero(pending)
            cand = np.clip(X[idx[p]] + eta[p, None] * G[p] / gn[p, None], lo, hi)
            fc = f(cand)
            ok = fc >= F[idx[p]]
            X[idx[p[ok]]] = cand[ok]
            F[idx[p[ok]]] = fc[ok]
            pending[p[ok]] = False
            eta[p[~ok]] /= 2.0
        active[idx[pending]] = False
        R = np.clip(_round_rows(X), lo, hi)
        FR = f(R)
        better = FR > best_F
        best_X[better] = R[better]
        best_F[better] = FR[better]
    designs = [encode(tuple(row), task.vocabulary) for row in best_X]
    return GradAscentResult(designs, initial, best_F)


def grad_ascent_baseline(dataset, task, gp, objective="mean", steps=100, step_size=None, K=128, seed=0) -> list:
    return grad_ascent(dataset, task, gp, objective, steps, step_size, K, seed).designs


# ---------------------------------------------------------------- w/o tree search

@dataclass
class DirectSamplingResult:
    candidates: list
    fill_calls: int
    n_unrolls: int
    archive: Archive


def direct_sampling_ablation(dataset: OfflineDataset, task: TaskSpec, predictor, config: EpisodeConfig,
                             gp: GPModel | None = None, call_budget: int | None = None,
                             include_description: bool = True) -> DirectSamplingResult:
    """Independent full unrolls from the fully masked design, ranked by EI.

    Without ``call_budget`` this performs iterations·branching·rollouts unrolls;
    with it, as many unrolls as fit the predictor-call budget (rounded).
    """
    gp = gp or fit(dataset, task.vocabulary)
    prompt = build_prompt(task, dataset, include_description)
    counter = CallCounter(predictor)
    schedule = Schedule(config.depth)
    if call_budget is None:
        n = config.iterations * config.branching * config.rollouts
    else:
        n = max(1, (call_budget + config.depth // 2) // config.depth)
    root = MaskedDesign.fully_masked(task.length)
    archive = Archive()
    for i in range(n):
        out = unroll(root, counter, prompt, schedule, task.vocabulary, task.dims,
                     mix_seed(config.seed, DIRECT_STREAM, i), config.resample_attempts, config.temperature)
        if out and out.key not in archive:
            archive.insert(out, design_ei(gp, [out], dataset.f_best)[0], ((), i))
    return DirectSamplingResult(archive.top(config.top_k), counter.calls, n, archive)


# ---------------------------------------------------------------- protocol

@dataclass
class MethodSummary:
    method: str
    seeds: list
    max_scores: list
    median_scores: list

    @property
    def max_mean(self) -> float:
        return float(np.mean(self.max_scores))

    @property
    def max_std(self) -> float:
        return float(np.std(self.max_scores, ddof=1)) if len(self.max_scores) > 1 else 0.0

    @property
    def median_mean(self) -> float:
        return float(np.mean(self.median_scores))

    @property
    def median_std(self) -> float:
        return float(np.std(self.median_scores, ddof=1)) if len(self.median_scores) > 1 else 0.0


@dataclass
class EvalReport:
    task: str
    methods: list
    rank_max: dict
    rank_median: dict
    offline_best: float | None = None

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "offline_best": self.offline_best,
            "methods": [
                {"method": m.method, "seeds": m.seeds, "max": m.max_scores, "median": m.median_scores,
                 "max_mean": m.max_mean, "max_std": m.max_std,
                 "median_mean": m.median_mean, "median_std": m.median_std,
                 "rank_max": self.rank_max[m.method], "rank_median": self.rank_median[m.method]}
                for m in self.methods
            ],
        }

    def render(self) -> str:
        head = f"{'Method':<16} {'Max (100th)':>17} {'Median (50th)':>17} {'Rank max':>9} {'Rank med':>9}"
        lines = [f"Task: {self.task}", head, "-" * len(head)]
        if self.offline_best is not None:
            lines.append(f"{'D(best)':<16} {self.offline_best:>17.3f} {'':>17} {'-':>9} {'-':>9}")
        for m in self.methods:
            lines.append(
                f"{m.method:<16} {m.max_mean:>9.3f} ± {m.max_std:.3f} {m.median_mean:>9.3f} ± {m.median_std:.3f}"
                f" {self.rank_max[m.method]:>9.1f} {self.rank_median[m.method]:>9.1f}"
            )
        return "\n".join(lines) + "\n"


def score_candidates(task: TaskSpec, designs: Sequence[Design]) -> list:
    return [(d, task.oracle(d), normalize(task.oracle(d), task)) for d in designs]


def summarize(task_name: str, normalized: dict, offline_best: float | None = None) -> EvalReport:
    """``normalized[method][seed]`` holds the normalized scores of that run's candidates."""
    summaries = []
    for method, by_seed in normalized.items():
        seeds = sorted(by_seed)
        summaries.append(MethodSummary(
            method, seeds,
            [float(np.max(by_seed[s])) for s in seeds],
            [float(np.median(by_seed[s])) for s in seeds],
        ))
    ranks_max = rankdata([-m.max_mean for m in summaries], method="average")
    ranks_med = rankdata([-m.median_mean for m in summaries], method="average")
    return EvalReport(
        task_name, summaries,
        {m.method: float(r) for m, r in zip(summaries, ranks_max)},
        {m.method: float(r) for m, r in zip(summaries, ranks_med)},
        offline_best,
    )


def evaluate_methods(task: TaskSpec, methods: dict, seeds: Sequence[int], K: int = 128,
                     offline_best: float | None = None) -> EvalReport:
    """Run every ``methods[name](seed) -> designs`` and oracle-score the first K candidates."""
    if not seeds:
        raise ValueError("need at least one seed")
    normalized = {}
    for name, method in methods.items():
        normalized[name] = {}
        for seed in seeds:
            designs = list(method(seed))[:K]
            normalized[name][seed] = [n for _, _, n in score_candidates(task, designs)]
    return summarize(task.name, normalized, offline_best)
