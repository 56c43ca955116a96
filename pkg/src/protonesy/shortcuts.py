"""Counting deterministic optima (reasoning shortcuts) of a concept map.

A candidate is a map ``alpha`` from ground-truth classes to predicted
classes. It is an optimum when it fixes every supervised class and keeps
``beta(alpha(g)) == beta(g)`` on every supported tuple ``g``. Every optimum
other than the identity is a shortcut.

Maps range over the classes that occur in the support; classes that never
occur do not multiply the count.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .knowledge import ConceptSpace
from .tasks import parse_combination_text

SHARED = "shared"
PER_GROUP = "per_group"
CATALOGUE_LIMIT = 10**4
MAX_NODES = 10**9


class SearchBudgetExceeded(RuntimeError):
    pass


@dataclass
class GroundTruthTask:
    space: ConceptSpace
    support: list[tuple[int, ...]]
    beta: Callable[[tuple[int, ...]], object]
    supervised: list[set[int]] = field(default_factory=list)
    map_mode: str = SHARED

    def __post_init__(self):
        self.support = [tuple(int(x) for x in g) for g in self.support]
        if not self.supervised:
            self.supervised = [set() for _ in range(self.space.k)]
        self.supervised = [set(int(c) for c in s) for s in self.supervised]
        if len(self.supervised) != self.space.k:
            raise ValueError("one supervised set per concept group is required")
        if self.map_mode not in (SHARED, PER_GROUP):
            raise ValueError(f"unknown map mode {self.map_mode!r}")
        if self.map_mode == SHARED and len(set(self.space.sizes)) != 1:
            raise ValueError("shared maps need groups of equal cardinality")
        for g in self.support:
            if len(g) != self.space.k:
                raise ValueError(f"support tuple {g} has the wrong arity")
            for i, c in enumerate(g):
                self.space.check_atom(i, c)
            self.beta(g)

    def variable(self, group: int, cls: int):
        return cls if self.map_mode == SHARED else (group, cls)

    def variables(self) -> list:
        seen = []
        for g in self.support:
            for i, c in enumerate(g):
                v = self.variable(i, c)
                if v not in seen:
                    seen.append(v)
        return seen

    def domain(self, var) -> list[int]:
        if self.map_mode == SHARED:
            pinned = any(var in s for s in self.supervised)
            return [var] if pinned else list(range(self.space.sizes[0]))
        i, c = var
        return [c] if c in self.supervised[i] else list(range(self.space.sizes[i]))

    def identity(self) -> dict:
        return {v: (v if self.map_mode == SHARED else v[1]) for v in self.variables()}


@dataclass
class ShortcutCensus:
    optima_count: int
    shortcut_count: int
    identity_is_optimum: bool
    catalogue: list[dict] | None
    nodes: int = 0

    def to_json(self, task: GroundTruthTask) -> dict:
        out = {
            "optima_count": self.optima_count,
            "shortcut_count": self.shortcut_count,
            "identity_is_optimum": self.identity_is_optimum,
            "map_mode": task.map_mode,
            "nodes": self.nodes,
        }
        if self.catalogue is not None:
            out["catalogue"] = [alpha_to_json(a, task) for a in self.catalogue]
        return out


def alpha_to_json(alpha: dict, task: GroundTruthTask):
    if task.map_mode == SHARED:
        return {str(k): v for k, v in sorted(alpha.items())}
    groups = [{} for _ in range(task.space.k)]
    for (i, c), v in sorted(alpha.items()):
        groups[i][str(c)] = v
    return groups


def _constraints(task: GroundTruthTask):
    return [(tuple(task.variable(i, c) for i, c in enumerate(g)), task.beta(g)) for g in task.support]


def count_optima(task: GroundTruthTask, catalogue_limit: int = CATALOGUE_LIMIT,
                 max_nodes: int = MAX_NODES) -> ShortcutCensus:
    """Exact optimum count by backtracking with forward checking."""
    variables = task.variables()
    cons = _constraints(task)
    beta = task.beta
    by_var = {v: [] for v in variables}
    for ci, (vs, _) in enumerate(cons):
        for v in set(vs):
            by_var[v].append(ci)

    found: list[dict] = []
    count = 0
    nodes = 0
    alpha: dict = {}

    def propagate(var, domains):
        # prune the last free variable of each touched constraint
        new = dict(domains)
        queue = [var]
        while queue:
            v = queue.pop()
            for ci in by_var[v]:
                vs, y = cons[ci]
                free = [u for u in set(vs) if u not in alpha]
                if not free:
                    if beta(tuple(alpha[u] for u in vs)) != y:
                        return None
                elif len(free) == 1:
                    u = free[0]
                    keep = []
                    for val in new[u]:
                        alpha[u] = val
                        if beta(tuple(alpha[w] for w in vs)) == y:
                            keep.append(val)
                        del alpha[u]
                    if not keep:
                        return None
                    if len(keep) < len(new[u]):
                        new[u] = keep
        return new

    def search(domains):
        nonlocal count, nodes
        free = [v for v in variables if v not in alpha]
        if not free:
            count += 1
            if len(found) <= catalogue_limit:
                found.append(dict(alpha))
            return
        v = min(free, key=lambda u: len(domains[u]))
        for val in domains[v]:
            nodes += 1
            if nodes > max_nodes:
                raise SearchBudgetExceeded(f"search exceeded {max_nodes} nodes")
            alpha[v] = val
            pruned = propagate(v, domains)
            if pruned is not None:
                search(pruned)
            del alpha[v]

    search({v: task.domain(v) for v in variables})
    identity_ok = _is_optimum(task.identity(), task, cons)
    catalogue = None
    if count <= catalogue_limit:
        catalogue = sorted(found, key=lambda a: [a[v] for v in variables])
    return ShortcutCensus(count, count - 1 if identity_ok else count, identity_ok, catalogue, nodes)


def _is_optimum(alpha: dict, task: GroundTruthTask, cons=None) -> bool:
    cons = cons if cons is not None else _constraints(task)
    for v, val in alpha.items():
        if len(task.domain(v)) == 1 and task.domain(v)[0] != val:
            return False
    return all(task.beta(tuple(alpha[u] for u in vs)) == y for vs, y in cons)


def count_optima_naive(task: GroundTruthTask, limit: int = 10**6) -> int:
    """Count by trying every map in the pinned search space."""
    variables = task.variables()
    domains = [task.domain(v) for v in variables]
    size = int(np.prod([len(d) for d in domains], dtype=object))
    if size > limit:
        raise SearchBudgetExceeded(f"naive space of {size} maps exceeds {limit}")
    cons = _constraints(task)
    n = 0
    for vals in itertools.product(*domains):
        alpha = dict(zip(variables, vals))
        if all(task.beta(tuple(alpha[u] for u in vs)) == y for vs, y in cons):
            n += 1
    return n


def _as_alpha(alpha, task: GroundTruthTask) -> dict:
    if task.map_mode == SHARED:
        if not isinstance(alpha, dict):
            alpha = dict(enumerate(alpha))
        return {int(k): int(v) for k, v in alpha.items()}
    out = {}
    for i, m in enumerate(alpha):
        items = m.items() if isinstance(m, dict) else enumerate(m)
        for k, v in items:
            out[(i, int(k))] = int(v)
    return out


def is_shortcut(alpha, task: GroundTruthTask) -> bool:
    """Whether ``alpha`` is a non-identity optimum of the task."""
    a = _as_alpha(alpha, task)
    variables = task.variables()
    missing = [v for v in variables if v not in a]
    if missing:
        raise ValueError(f"map is partial: no image for {missing}")
    a = {v: a[v] for v in variables}
    if a == task.identity():
        return False
    return _is_optimum(a, task)


@dataclass
class OptimumReport:
    kind: str  # "identity", "shortcut", "not_optimal" or "stochastic"
    alpha: dict | None
    catalogue_index: int | None
    purity: float


def empirical_optimum_check(pred_concepts, true_concepts, task: GroundTruthTask,
                            census: ShortcutCensus | None = None,
                            determinism: float = 0.9) -> OptimumReport:
    """Read the concept map a trained model realises off its predictions.

    The map sends each true class to its most frequent prediction. If any
    class sends less than ``determinism`` of its instances there, the model
    is reported as stochastic.
    """
    pred = np.asarray(pred_concepts, dtype=np.int64)
    true = np.asarray(true_concepts, dtype=np.int64)
    if pred.shape != true.shape:
        raise ValueError("predictions and truths are not aligned")
    alpha = {}
    purity = 1.0
    for v in task.variables():
        if task.map_mode == SHARED:
            mask = true == v
            preds = pred[mask]
        else:
            i, c = v
            mask = true[:, i] == c
            preds = pred[mask, i]
        if preds.size == 0:
            continue
        counts = np.bincount(preds)
        alpha[v] = int(np.argmax(counts))
        purity = min(purity, float(counts.max() / preds.size))
    if purity < determinism:
        return OptimumReport("stochastic", alpha, None, purity)
    if alpha == task.identity():
        return OptimumReport("identity", alpha, None, purity)
    census = census or count_optima(task)
    if census.catalogue is not None:
        for idx, a in enumerate(census.catalogue):
            if a == alpha:
                return OptimumReport("shortcut", alpha, idx, purity)
        return OptimumReport("not_optimal", alpha, None, purity)
    kind = "shortcut" if len(alpha) == len(task.variables()) and _is_optimum(alpha, task) else "not_optimal"
    return OptimumReport(kind, alpha, None, purity)


# ---------------------------------------------------------------------------
# Task spec files
# ---------------------------------------------------------------------------


def _sum(g):
    return sum(g)


def _table_beta(rows) -> Callable:
    table = {tuple(int(x) for x in r[:-1]): r[-1] for r in rows}

    def beta(g):
        return table.get(tuple(g))

    return beta


def task_from_dict(spec: dict, base_dir: Path | None = None) -> GroundTruthTask:
    space = ConceptSpace(spec["sizes"])
    if "support" in spec:
        support = [tuple(g) for g in spec["support"]]
    elif "support_file" in spec:
        name = spec["support_file"]
        local = (base_dir / name) if base_dir is not None else None
        if local is not None and local.exists():
            text = local.read_text()
        else:
            text = resources.files("protonesy").joinpath(f"data/{name}").read_text()
        support = parse_combination_text(text)
    else:
        raise ValueError("task spec needs 'support' or 'support_file'")
    beta_spec = spec.get("beta", "sum")
    if beta_spec == "sum":
        beta = _sum
    elif isinstance(beta_spec, dict) and "table" in beta_spec:
        beta = _table_beta(beta_spec["table"])
    else:
        raise ValueError(f"unsupported label function {beta_spec!r}")
    supervised = [set(s) for s in spec.get("supervised", [[] for _ in space.sizes])]
    return GroundTruthTask(space, support, beta, supervised, spec.get("map_mode", SHARED))


def load_task_spec(path) -> GroundTruthTask:
    path = Path(path)
    return task_from_dict(json.loads(path.read_text()), path.parent)


def bundled_task(name: str = "mnist_even_odd") -> GroundTruthTask:
    text = resources.files("protonesy").joinpath(f"data/{name}_task.json").read_text()
    return task_from_dict(json.loads(text))


def bundled_task_path(name: str = "mnist_even_odd"):
    return resources.files("protonesy").joinpath(f"data/{name}_task.json")
