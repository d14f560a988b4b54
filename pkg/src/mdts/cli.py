"""Command-line entry points: ``run``, ``report``, ``sweep`` and ``dump-prompt``.

Configuration is a flat JSON object with dotted keys (``episode.depth``,
``predictor.kind``...). Any key can be overridden on the command line as
``--episode.depth=6``. Every random choice derives from one root seed per run
through named sub-streams, so the offline sample and the episode can be
re-seeded independently.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import datetime
import hashlib
import json
import logging
import os
import re
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path

from mdts.bench import (
    DirectSamplingResult,
    TaskSpec,
    direct_sampling_ablation,
    grad_ascent_baseline,
    make_numeric_synth,
    make_tfb_synth,
    normalize,
    sample_offline,
    summarize,
)
from mdts.core import Design, EpisodeConfig, OfflineDataset, encode
from mdts.denoise import mix_seed
from mdts.errors import ConfigError, MDTSError
from mdts.predictor import PredictorSpec, build_prompt, make_predictor
from mdts.search import run_episode, tree_to_dict
from mdts.surrogate import fit

log = logging.getLogger("mdts")

STREAMS = {"offline": 0x4F46464C, "episode": 0x45504953, "sweep": 0x53574550}
METHODS = ("mdts", "no-mdts", "grad-mean", "grad-ei", "offline")
SWEEP_AXES = {
    "depth": ("episode.depth", (1, 2, 4, 6, 8)),
    "branching": ("episode.branching", (1, 3, 5, 7, 9)),
    "offline_size": ("task.offline_size", (2, 5, 10, 20)),
}

DEFAULTS = {
    "task.name": "tfb-synth-8",
    "task.oracle_seed": 0,
    "task.offline_size": 10,
    "task.bounds": [-5.0, 5.0],
    "predictor.kind": "empirical",
    "predictor.order": 0,
    "predictor.smoothing": 1.0,
    "predictor.beta": 5.0,
    "predictor.url": None,
    "predictor.timeout": 30.0,
    "predictor.retries": 3,
    "predictor.max_in_flight": 4,
    "predictor.deferred_connect": False,
    "episode.depth": 4,
    "episode.branching": 5,
    "episode.iterations": 16,
    "episode.rollouts": 5,
    "episode.omega": 1.0,
    "episode.temperature": 1.0,
    "episode.top_k": 128,
    "episode.resample_attempts": 8,
    "grad.steps": 100,
    "grad.step_size": None,
    "run.method": "mdts",
    "run.no_template": False,
    "run.seeds": [0],
    "run.out": "runs",
    "run.jobs": 1,
    "sweep.depth": [1, 2, 4, 6, 8],
    "sweep.branching": [1, 3, 5, 7, 9],
    "sweep.offline_size": [2, 5, 10, 20],
}


def stream_seed(root: int, name: str) -> int:
    return mix_seed(root, STREAMS[name])


# ---------------------------------------------------------------- config

@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: dict(DEFAULTS))
    source: str | None = None

    def __getitem__(self, key):
        return self.values[key]

    def with_overrides(self, overrides: dict) -> "RunConfig":
        values = dict(self.values)
        for key, value in overrides.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = value
        cfg = RunConfig(values, self.source)
        cfg.check()
        return cfg

    def episode(self, seed: int) -> EpisodeConfig:
        kw = {k.split(".", 1)[1]: v for k, v in self.values.items() if k.startswith("episode.")}
        return EpisodeConfig(seed=seed, **kw)

    def predictor_spec(self) -> PredictorSpec:
        kw = {k.split(".", 1)[1]: v for k, v in self.values.items() if k.startswith("predictor.")}
        url = os.environ.get("MDTS_REMOTE_URL")
        if url:
            kw["url"] = url
        try:
            return PredictorSpec(**kw)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def check(self) -> None:
        if self["run.method"] not in METHODS:
            raise ConfigError(f"run.method must be one of {', '.join(METHODS)}, got {self['run.method']!r}")
        seeds = self["run.seeds"]
        if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
            raise ConfigError("run.seeds must be a non-empty list of integers")
        if not isinstance(self["task.offline_size"], int) or self["task.offline_size"] < 1:
            raise ConfigError("task.offline_size must be a positive integer")
        if not isinstance(self["run.jobs"], int) or self["run.jobs"] < 1:
            raise ConfigError("run.jobs must be a positive integer")
        for axis, (_, tested) in SWEEP_AXES.items():
            values = self[f"sweep.{axis}"]
            if not isinstance(values, list) or not all(isinstance(v, int) and v > 0 for v in values):
                raise ConfigError(f"sweep.{axis} must be a list of positive integers")
            extra = sorted(set(values) - set(tested))
            if extra:
                warnings.warn(f"sweep.{axis} values {extra} lie outside the tested range {list(tested)}")
        self.episode(0)
        self.predictor_spec()
        parse_task_name(self["task.name"])


def _key_line(text: str, key: str) -> int | None:
    for n, line in enumerate(text.splitlines(), 1):
        if f'"{key}"' in line:
            return n
    return None


def load_config(path: str | None) -> RunConfig:
    """Read a JSON config; errors carry ``file:line`` positions."""
    if path is None:
        return RunConfig()
    text = Path(path).read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}:1: top level must be a JSON object")
    values = dict(DEFAULTS)
    for key, value in raw.items():
        if key not in DEFAULTS:
            line = _key_line(text, key)
            raise ConfigError(f"{path}:{line}: unknown config key {key!r}")
        values[key] = value
    cfg = RunConfig(values, path)
    try:
        cfg.check()
    except (ConfigError, ValueError) as exc:
        bad = next((k for k in raw if k.split(".")[-1] in str(exc) or k in str(exc)), None)
        line = _key_line(text, bad) if bad else 1
        raise ConfigError(f"{path}:{line}: {exc}") from None
    return cfg


def parse_overrides(extra: list) -> dict:
    """``--a.b=value`` pairs; values are parsed as JSON when possible."""
    out = {}
    for arg in extra:
        m = re.fullmatch(r"--([\w.]+)=(.*)", arg)
        if not m or "." not in m.group(1):
            raise ConfigError(f"unrecognized argument {arg!r} (overrides look like --section.key=value)")
        key, raw = m.groups()
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


# ---------------------------------------------------------------- tasks

def parse_task_name(name: str) -> tuple:
    m = re.fullmatch(r"tfb-synth-(\d+)", name)
    if m:
        return ("tfb-synth", int(m.group(1)))
    m = re.fullmatch(r"numeric-(sphere|rastrigin-negated)-(\d+)", name)
    if m:
        return (m.group(1), int(m.group(2)))
    raise ConfigError(f"unknown task {name!r} (expected tfb-synth-L or numeric-{{sphere,rastrigin-negated}}-d)")


def make_task(cfg: RunConfig) -> TaskSpec:
    kind, size = parse_task_name(cfg["task.name"])
    if kind == "tfb-synth":
        return make_tfb_synth(size, oracle_seed=cfg["task.oracle_seed"])
    return make_numeric_synth(size, tuple(cfg["task.bounds"]), kind, cfg["task.oracle_seed"])


def manifest_hash(cfg: RunConfig) -> str:
    """Hash of everything that fixes the evaluation inputs, not the method."""
    payload = {k: cfg[k] for k in ("task.name", "task.oracle_seed", "task.offline_size", "task.bounds")}
    payload["run.seeds"] = sorted(cfg["run.seeds"])
    blob = json.dumps(payload, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------- one seed

@dataclass
class SeedResult:
    seed: int
    method: str
    dataset: OfflineDataset
    designs: list
    log: list | None = None
    tree: dict | None = None
    counters: dict = field(default_factory=dict)


def run_seed(cfg: RunConfig, seed: int, task: TaskSpec | None = None) -> SeedResult:
    task = task or make_task(cfg)
    method = cfg["run.method"]
    dataset = sample_offline(task, cfg["task.offline_size"], stream_seed(seed, "offline"))
    if method == "offline":
        return SeedResult(seed, method, dataset, dataset.designs)
    if method in ("grad-mean", "grad-ei"):
        gp = fit(dataset, task.vocabulary)
        designs = grad_ascent_baseline(dataset, task, gp, method.split("-")[1], cfg["grad.steps"],
                                       cfg["grad.step_size"], cfg["episode.top_k"], stream_seed(seed, "episode"))
        return SeedResult(seed, method, dataset, designs)

    episode = cfg.episode(stream_seed(seed, "episode"))
    predictor = make_predictor(cfg.predictor_spec(), task, dataset)
    include = not cfg["run.no_template"]
    result = run_episode(dataset, task, episode, predictor, include)
    tree = tree_to_dict(result.root, task.vocabulary)
    if method == "mdts":
        designs = [e.design for e in result.candidates]
        return SeedResult(seed, method, dataset, designs, result.log, tree, {"fill_calls": result.fill_calls})
    abl: DirectSamplingResult = direct_sampling_ablation(dataset, task, predictor, episode, result.gp,
                                                         result.fill_calls, include)
    counters = {"mdts_fill_calls": result.fill_calls, "ablation_fill_calls": abl.fill_calls,
                "ablation_unrolls": abl.n_unrolls}
    return SeedResult(seed, method, dataset, [e.design for e in abl.candidates], counters=counters)


def design_json(design: Design):
    return design.decoded if isinstance(design.decoded, str) else list(design.decoded)


def candidate_lines(res: SeedResult, task: TaskSpec, mhash: str, cfg: RunConfig) -> list:
    header = {"type": "header", "manifest_hash": mhash, "task": task.name, "task_params": task.params,
              "method": res.method, "seed": res.seed, "no_template": cfg["run.no_template"],
              "offline_best": res.dataset.f_best,
              "offline_best_normalized": normalize(res.dataset.f_best, task)}
    lines = [json.dumps(header, sort_keys=True)]
    for d in res.designs:
        y = task.oracle(d)
        lines.append(json.dumps({"design": design_json(d), "raw_score": y, "normalized_score": normalize(y, task),
                                 "method": res.method, "seed": res.seed}, sort_keys=True))
    return lines


def write_seed(res: SeedResult, task: TaskSpec, cfg: RunConfig, out: Path, mhash: str) -> None:
    d = out / f"seed_{res.seed}"
    d.mkdir(parents=True, exist_ok=True)
    (d / "candidates.jsonl").write_text("\n".join(candidate_lines(res, task, mhash, cfg)) + "\n")
    if res.log is not None:
        with open(d / "episode_log.jsonl", "w") as fh:
            for record in res.log:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
    if res.tree is not None:
        (d / "tree.json").write_text(json.dumps(res.tree, indent=1) + "\n")


def _seed_job(values: dict, seed: int) -> SeedResult:
    return run_seed(RunConfig(values), seed)


def execute(cfg: RunConfig) -> tuple[dict, dict]:
    """Run every seed; returns ({seed: SeedResult}, {seed: error message})."""
    seeds = cfg["run.seeds"]
    done, failed = {}, {}
    if cfg["run.jobs"] > 1 and len(seeds) > 1:
        with concurrent.futures.ProcessPoolExecutor(cfg["run.jobs"]) as pool:
            futures = {pool.submit(_seed_job, cfg.values, s): s for s in seeds}
            for fut in concurrent.futures.as_completed(futures):
                s = futures[fut]
                try:
                    done[s] = fut.result()
                except Exception as exc:  # noqa: BLE001 - reported per seed
                    failed[s] = f"{type(exc).__name__}: {exc}"
    else:
        task = make_task(cfg)
        for s in seeds:
            try:
                done[s] = run_seed(cfg, s, task)
            except Exception as exc:  # noqa: BLE001
                failed[s] = f"{type(exc).__name__}: {exc}"
    return dict(sorted(done.items())), dict(sorted(failed.items()))


# ---------------------------------------------------------------- verbs

def cmd_run(cfg: RunConfig) -> int:
    task = make_task(cfg)
    out = Path(cfg["run.out"])
    out.mkdir(parents=True, exist_ok=True)
    mhash = manifest_hash(cfg)
    done, failed = execute(cfg)
    for res in done.values():
        write_seed(res, task, cfg, out, mhash)
    manifest = {
        "created": datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds"),
        "manifest_hash": mhash,
        "config": cfg.values,
        "task_params": task.params,
        "completed_seeds": sorted(done),
        "failed_seeds": {str(k): v for k, v in failed.items()},
        "counters": {str(s): r.counters for s, r in done.items()},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    for res in done.values():
        if not res.designs:
            print(f"seed {res.seed}: {res.method} produced no valid candidates")
            continue
        best = max(normalize(task.oracle(d), task) for d in res.designs)
        print(f"seed {res.seed}: {res.method} best normalized {best:.4f} ({len(res.designs)} candidates)")
    if failed:
        for s, msg in failed.items():
            print(f"seed {s} failed: {msg}", file=sys.stderr)
        print(f"failed seeds: {', '.join(str(s) for s in failed)}", file=sys.stderr)
        return 1
    return 0


def read_candidates(path: str) -> tuple[dict, list]:
    text = Path(path).read_text()
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ConfigError(f"{path}: candidate file is empty")
    try:
        header = json.loads(lines[0])
        rows = [json.loads(ln) for ln in lines[1:]]
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON line ({exc.msg})") from None
    if header.get("type") != "header":
        raise ConfigError(f"{path}:1: missing header record")
    if not rows:
        raise ConfigError(f"{path}: candidate file has no candidates")
    return header, rows


def task_from_params(params: dict) -> TaskSpec:
    if params["kind"] == "tfb-synth":
        return make_tfb_synth(params["L"], tuple(params["alphabet"]), params["oracle_seed"],
                              params["pair_density"], params["pair_scale"])
    return make_numeric_synth(params["d"], tuple(params["bounds"]), params["kind"], params["seed"])


def build_report(paths: list):
    """Re-score candidate files with the task oracle and summarize them."""
    headers = {}
    rows_by = {}
    for p in paths:
        header, rows = read_candidates(p)
        headers[p] = header
        rows_by[p] = rows
    hashes = {h["manifest_hash"] for h in headers.values()}
    if len(hashes) > 1:
        listing = ", ".join(f"{p} ({h['manifest_hash']})" for p, h in headers.items())
        raise ConfigError(f"candidate files come from different manifests: {listing}")
    tasks = {h["task"] for h in headers.values()}
    if len(tasks) > 1:
        raise ConfigError(f"candidate files reference different tasks: {sorted(tasks)}")
    first = next(iter(headers.values()))
    task = task_from_params(first["task_params"])
    normalized: dict = {}
    offline = {}
    for p, header in headers.items():
        scores = []
        for row in rows_by[p]:
            d = encode(row["design"] if isinstance(row["design"], str) else tuple(row["design"]), task.vocabulary)
            scores.append(normalize(task.oracle(d), task))
        normalized.setdefault(header["method"], {})[header["seed"]] = scores
        offline[header["seed"]] = header["offline_best_normalized"]
    offline_best = sum(offline.values()) / len(offline)
    return summarize(task.name, normalized, offline_best)


def cmd_report(paths: list, out: str | None) -> int:
    report = build_report(paths)
    text = report.render()
    print(text, end="")
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        Path(out, "report.json").write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n")
        Path(out, "report.txt").write_text(text)
    return 0


def sweep(cfg: RunConfig, axis: str) -> dict:
    """Mean best normalized score per setting, relative to the configured default."""
    key, _ = SWEEP_AXES[axis]
    default = cfg[key]
    settings = list(cfg[f"sweep.{axis}"])
    if default not in settings:
        settings.append(default)
    task = make_task(cfg)
    scores = {}
    failed = {}
    for value in settings:
        sub = cfg.with_overrides({key: value, "run.method": "mdts"})
        done, bad = execute(sub)
        if bad:
            failed[value] = bad
        bests = [max(normalize(task.oracle(d), task) for d in r.designs) for r in done.values() if r.designs]
        scores[value] = sum(bests) / len(bests) if bests else float("nan")
    base = scores[default]
    relative = {v: scores[v] / base for v in settings}
    return {"axis": axis, "key": key, "default": default, "seeds": cfg["run.seeds"],
            "mean_best": scores, "relative": relative, "failed": failed}


def cmd_sweep(cfg: RunConfig, axis: str) -> int:
    summary = sweep(cfg, axis)
    out = Path(cfg["run.out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / f"sweep_{axis}.json").write_text(json.dumps(summary, indent=1, sort_keys=True, default=str) + "\n")
    print(f"{axis:>12} {'mean best':>10} {'relative':>9}")
    for v in summary["mean_best"]:
        mark = " (default)" if v == summary["default"] else ""
        print(f"{v:>12} {summary['mean_best'][v]:>10.4f} {summary['relative'][v]:>9.4f}{mark}")
    if summary["failed"]:
        for v, bad in summary["failed"].items():
            print(f"{axis}={v}: failed seeds {', '.join(str(s) for s in bad)}", file=sys.stderr)
        return 1
    return 0


def parse_row(text: str, task: TaskSpec) -> tuple:
    """``GGCCGGCC:0.0`` or ``0.11,0.14:-880.46``."""
    design_part, sep, score_part = text.rpartition(":")
    if not sep:
        raise ConfigError(f"row {text!r} must look like DESIGN:SCORE")
    try:
        score = float(score_part)
    except ValueError:
        raise ConfigError(f"row {text!r}: score {score_part!r} is not a number") from None
    try:
        if task.is_numeric:
            design = encode(tuple(float(v) for v in design_part.split(",")), task.vocabulary)
            if len(design.decoded) != task.dims:
                raise ConfigError(f"row {text!r}: expected {task.dims} values")
        else:
            design = encode(design_part, task.vocabulary)
            if len(design) != task.length:
                raise ConfigError(f"row {text!r}: expected length {task.length}")
    except (ValueError, MDTSError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"row {text!r}: {exc}") from None
    return design, score


def render_prompt(cfg: RunConfig, rows: list | None, seed: int = 0) -> str:
    task = make_task(cfg)
    if rows:
        dataset = OfflineDataset(tuple(parse_row(r, task) for r in rows))
    else:
        dataset = sample_offline(task, cfg["task.offline_size"], stream_seed(seed, "offline"))
    return build_prompt(task, dataset, not cfg["run.no_template"]).render()


# ---------------------------------------------------------------- argparse

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config with dotted keys")
    p.add_argument("--task", help="tfb-synth-L or numeric-{sphere,rastrigin-negated}-d")
    p.add_argument("--no-template", action="store_true", help="drop the task description from the prompt")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mdts", description="Masked diffusion tree search for offline design.")
    sub = parser.add_subparsers(dest="verb", required=True)

    run = sub.add_parser("run", help="run episodes or baselines per seed")
    _common(run)
    run.add_argument("--predictor", choices=["uniform", "empirical", "oracle-posterior", "remote"])
    run.add_argument("--seed", type=int, action="append", dest="seeds", help="repeatable")
    run.add_argument("--seeds", type=int, nargs="+", dest="seed_list")
    run.add_argument("--method", choices=METHODS)
    run.add_argument("--no-mdts", action="store_true", help="direct sampling without the tree, same call budget")
    run.add_argument("--out")
    run.add_argument("--jobs", type=int)

    rep = sub.add_parser("report", help="summarize candidate files")
    rep.add_argument("files", nargs="+")
    rep.add_argument("--out")
    rep.add_argument("-v", "--verbose", action="store_true")

    sw = sub.add_parser("sweep", help="sensitivity sweep along one axis")
    _common(sw)
    sw.add_argument("axis", choices=sorted(SWEEP_AXES))
    sw.add_argument("--predictor", choices=["uniform", "empirical", "oracle-posterior", "remote"])
    sw.add_argument("--seeds", type=int, nargs="+", dest="seed_list")
    sw.add_argument("--out")
    sw.add_argument("--jobs", type=int)

    dp = sub.add_parser("dump-prompt", help="print the rendered prompt")
    _common(dp)
    dp.add_argument("--row", action="append", dest="rows", help="DESIGN:SCORE, repeatable")
    dp.add_argument("--seed", type=int, default=0, help="offline sample seed when no rows are given")
    return parser


def _flag_overrides(args) -> dict:
    o = {}
    if getattr(args, "task", None):
        o["task.name"] = args.task
    if getattr(args, "no_template", False):
        o["run.no_template"] = True
    if getattr(args, "predictor", None):
        o["predictor.kind"] = args.predictor
    seeds = (getattr(args, "seeds", None) or []) + (getattr(args, "seed_list", None) or [])
    if seeds and args.verb != "dump-prompt":
        o["run.seeds"] = seeds
    if getattr(args, "method", None):
        o["run.method"] = args.method
    if getattr(args, "no_mdts", False):
        o["run.method"] = "no-mdts"
    if getattr(args, "out", None) and args.verb != "report":
        o["run.out"] = args.out
    if getattr(args, "jobs", None):
        o["run.jobs"] = args.jobs
    return o


def main(argv: list | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.verb == "report":
            if extra:
                raise ConfigError(f"unrecognized arguments: {' '.join(extra)}")
            return cmd_report(args.files, args.out)
        cfg = load_config(args.config)
        overrides = parse_overrides(extra)
        overrides.update(_flag_overrides(args))
        cfg = cfg.with_overrides(overrides)
        if args.verb == "run":
            return cmd_run(cfg)
        if args.verb == "sweep":
            return cmd_sweep(cfg, args.axis)
        print(render_prompt(cfg, args.rows, args.seed), end="")
        return 0
    except (ConfigError, MDTSError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
