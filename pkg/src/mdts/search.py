"""Masked diffusion tree search.

Nodes are partially masked designs on a uniform schedule; an action is one
reverse step. Every iteration selects a node by UCT, expands it with
``branching`` reverse steps, scores each new child by the mean expected
improvement of ``rollouts`` unrolls, and routes that reward to all ancestors.

Bookkeeping conventions:

* a freshly evaluated child starts at N = 1, V = r;
* unvisited children score +inf, ties broken by prior then index;
* subtrees with nothing left to expand (all leaves at t = 0 or invalid) are
  skipped by selection; the episode ends early if the root is exhausted.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any

from mdts.core import Design, EpisodeConfig, MaskedDesign, OfflineDataset, design_text
from mdts.denoise import Schedule, mix_seed, reverse_step, unroll
from mdts.predictor import CallCounter, PromptBundle, build_prompt
from mdts.surrogate import GPModel, design_ei, fit

ROOT_STREAM = 0x524F4F54
EVAL_STREAM = 0x4556414C


@dataclass(eq=False)
class TreeNode:
    id: int
    state: MaskedDesign
    prior: float = 1.0
    depth: int = 0
    node_seed: int = 0
    parent: TreeNode | None = None
    N: int = 0
    V: float = 0.0
    children: list = field(default_factory=list)
    expanded: bool = False
    terminal_invalid: bool = False
    exhausted: bool = False
    design: Design | None = None
    reward_history: list = field(default_factory=list)

    @property
    def t(self) -> float:
        return self.state.t

    @property
    def is_terminal(self) -> bool:
        return self.state.t == 0.0 or self.terminal_invalid

    def ancestors(self):
        node = self.parent
        while node is not None:
            yield node
            node = node.parent

    def path(self) -> list:
        return [a.id for a in reversed(list(self.ancestors()))] + [self.id]

    def walk(self):
        stack = [self]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(reversed(node.children))


@dataclass
class ArchiveEntry:
    design: Design
    ei: float
    provenance: tuple
    order: int


class Archive:
    """Every valid fully denoised design seen during the episode, keyed by decoded value."""

    def __init__(self):
        self._entries: dict = {}

    def insert(self, design: Design, ei: float, provenance: tuple) -> bool:
        if design.key in self._entries:
            return False
        self._entries[design.key] = ArchiveEntry(design, float(ei), provenance, len(self._entries))
        return True

    def __len__(self):
        return len(self._entries)

    def __contains__(self, key):
        return key in self._entries

    def __iter__(self):
        return iter(self._entries.values())

    def top(self, k: int) -> list:
        ranked = sorted(self._entries.values(), key=lambda e: (-e.ei, e.order))
        return ranked[:k]

    @property
    def best_ei(self) -> float:
        return max((e.ei for e in self._entries.values()), default=0.0)


@dataclass
class SearchContext:
    """Everything a reverse step needs besides the node and seed."""

    predictor: Any
    prompt: PromptBundle | None
    vocabulary: Any
    expected_dims: int | None
    schedule: Schedule
    attempts: int = 8
    temperature: float = 1.0


def uct_score(child: TreeNode, parent: TreeNode, omega: float) -> float:
    if child.N == 0:
        return math.inf
    return child.V + omega * child.prior * math.sqrt(math.log(parent.N) / child.N)


def best_child(node: TreeNode, omega: float) -> TreeNode | None:
    best, best_key = None, None
    for i, child in enumerate(node.children):
        if child.exhausted:
            continue
        score = uct_score(child, node, omega)
        key = (score, child.prior if math.isinf(score) else 0.0, -i)
        if best_key is None or key > best_key:
            best, best_key = child, key
    return best


def select(root: TreeNode, omega: float) -> TreeNode:
    node = root
    while node.expanded and not node.is_terminal:
        nxt = best_child(node, omega)
        if nxt is None:
            break
        node = nxt
    return node


def expand(node: TreeNode, ctx: SearchContext, branching: int, next_id) -> list:
    """Run ``branching`` reverse steps from ``node``; each valid step becomes a child.

    Identical states from different seeds stay separate siblings, since their
    descendants are sampled from different streams.
    """
    if node.t <= 0.0 or node.expanded:
        raise ValueError("only unexpanded nodes with t > 0 can be expanded")
    k = ctx.schedule.index(node.t)
    s = ctx.schedule.timesteps[k + 1]
    children = []
    for b in range(branching):
        seed = mix_seed(node.node_seed, b)
        res = reverse_step(node.state, ctx.predictor, ctx.prompt, s, ctx.vocabulary, ctx.expected_dims,
                           seed, ctx.attempts, ctx.temperature, k)
        if not res:
            continue
        children.append(TreeNode(next_id(), res.child, res.step_prior, node.depth + 1, seed, node, design=res.design))
    node.expanded = True
    node.children = children
    return children


def evaluate(child: TreeNode, ctx: SearchContext, rollouts: int, gp: GPModel, f_best: float,
             archive: Archive) -> float:
    if child.t == 0.0:
        designs = [(0, child.design)] if child.design else []
    else:
        designs = []
        for j in range(rollouts):
            out = unroll(child.state, ctx.predictor, ctx.prompt, ctx.schedule, ctx.vocabulary,
                         ctx.expected_dims, mix_seed(child.node_seed, EVAL_STREAM, j), ctx.attempts,
                         ctx.temperature)
            if out:
                designs.append((j, out))
    if not designs:
        r = 0.0
    else:
        eis = design_ei(gp, [d for _, d in designs], f_best)
        path = tuple(child.path())
        for (j, d), ei in zip(designs, eis):
            archive.insert(d, ei, (path, j))
        r = math.fsum(eis) / len(eis)
    child.N = 1
    child.V = r
    child.reward_history.append(r)
    return r


def backpropagate(child: TreeNode, r: float) -> None:
    for node in child.ancestors():
        n_old = node.N
        node.N = n_old + 1
        node.V = (node.V * n_old + r) / node.N
        node.reward_history.append(r)


def credit_self(node: TreeNode, r: float) -> None:
    n_old = node.N
    node.N = n_old + 1
    node.V = (node.V * n_old + r) / node.N
    node.reward_history.append(r)


def refresh_exhausted(node: TreeNode) -> None:
    while node is not None:
        node.exhausted = node.is_terminal or (node.expanded and all(c.exhausted for c in node.children))
        node = node.parent


@dataclass
class EpisodeResult:
    candidates: list
    archive: Archive
    root: TreeNode
    log: list
    fill_calls: int
    gp: GPModel
    prompt: PromptBundle

    @property
    def max_depth(self) -> int:
        return max(n.depth for n in self.root.walk())

    @property
    def n_nodes(self) -> int:
        return sum(1 for _ in self.root.walk())


def run_episode(dataset: OfflineDataset, task, config: EpisodeConfig, predictor,
                include_description: bool = True) -> EpisodeResult:
    gp = fit(dataset, task.vocabulary)
    prompt = build_prompt(task, dataset, include_description)
    counter = CallCounter(predictor)
    schedule = Schedule(config.depth)
    ctx = SearchContext(counter, prompt, task.vocabulary, task.dims, schedule,
                        config.resample_attempts, config.temperature)
    f_best = dataset.f_best
    archive = Archive()
    ids = iter(range(1, 1 << 62))
    root = TreeNode(0, MaskedDesign.fully_masked(task.length), 1.0, 0, mix_seed(config.seed, ROOT_STREAM))
    log = []

    for it in range(config.iterations):
        if root.exhausted:
            break
        node = select(root, config.omega)
        record = {"iteration": it, "selected": node.id, "path": node.path(), "t": node.t,
                  "children": [], "events": []}
        children = expand(node, ctx, config.branching, lambda: next(ids))
        for child in children:
            record["children"].append({"id": child.id, "parent_id": node.id, "t": child.t,
                                       "masked": task.vocabulary.text(child.state.tokens),
                                       "prior": child.prior})
        if not children:
            node.terminal_invalid = True
            credit_self(node, 0.0)
            backpropagate(node, 0.0)
            record["events"].append({"node": node.id, "reward": 0.0, "kind": "invalid-expansion"})
        for child in children:
            r = evaluate(child, ctx, config.rollouts, gp, f_best, archive)
            backpropagate(child, r)
            record["events"].append({"node": child.id, "reward": r, "kind": "evaluation"})
            refresh_exhausted(child)
        refresh_exhausted(node)
        record["fill_calls"] = counter.calls
        record["archive_size"] = len(archive)
        record["best_ei"] = archive.best_ei
        log.append(record)

    return EpisodeResult(archive.top(config.top_k), archive, root, log, counter.calls, gp, prompt)


def replay_log(log: list) -> dict:
    """Rebuild every node's (N, V) from the reward events of an episode log."""
    parent = {0: None}
    stats = {0: (0, 0.0)}
    for record in log:
        for ch in record["children"]:
            parent[ch["id"]] = ch["parent_id"]
            stats[ch["id"]] = (0, 0.0)
        for ev in record["events"]:
            node = ev["node"]
            while node is not None:
                n, v = stats[node]
                stats[node] = (n + 1, (v * n + ev["reward"]) / (n + 1))
                node = parent[node]
    return stats


def tree_to_dict(root: TreeNode, vocabulary) -> dict:
    nodes = []
    for n in root.walk():
        nodes.append({
            "id": n.id,
            "parent_id": n.parent.id if n.parent is not None else None,
            "t": n.t,
            "masked_string": vocabulary.text(n.state.tokens),
            "N": n.N,
            "V": n.V,
            "p": n.prior,
            "reward_history": list(n.reward_history),
        })
    nodes.sort(key=lambda d: d["id"])
    return {"nodes": nodes}


def dump_tree(root: TreeNode, vocabulary, path) -> None:
    with open(path, "w") as fh:
        json.dump(tree_to_dict(root, vocabulary), fh, indent=1)
        fh.write("\n")


def candidate_texts(result: EpisodeResult) -> list:
    return [design_text(e.design) for e in result.candidates]
