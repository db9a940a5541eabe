"""Per-layer rank selection under an activation-memory budget.

Calibration measures, for every fine-tuned conv layer and every
explained-variance threshold, how far the weight gradient computed from
the HOSVD-truncated activation drifts from the exact one (Frobenius norm).
Selection then picks one threshold per layer, minimizing the summed drift
subject to the summed Tucker storage fitting the budget.
"""
import csv
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import layers as L
from . import model as M
from .decomposition import RankVector, hosvd_variance, stored_elements
from .tensor import Shape4

DEFAULT_THRESHOLDS = (0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
CSV_HEADER = ["layer", "eps", "perplexity", "r1", "r2", "r3", "r4", "mem_elements"]


class InfeasibleBudget(ValueError):
    """The budget is below the smallest achievable activation memory."""

    def __init__(self, budget, minimal):
        self.budget = budget
        self.minimal = minimal
        super().__init__(
            f"budget {budget} elements is infeasible; minimal achievable memory is "
            f"{minimal} elements")


def check_thresholds(eps):
    eps = tuple(float(e) for e in eps)
    if not eps or any(not 0.0 < e <= 1.0 for e in eps):
        raise ValueError(f"thresholds must lie in (0, 1], got {eps}")
    if any(b <= a for a, b in zip(eps, eps[1:])):
        raise ValueError(f"thresholds must be strictly increasing, got {eps}")
    return eps


@dataclass
class PerplexityTable:
    layers: list
    eps: tuple
    p: np.ndarray
    ranks: np.ndarray
    mem: np.ndarray
    layer_shapes: list
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.eps = tuple(float(e) for e in self.eps)
        self.p = np.asarray(self.p, dtype=np.float64)
        self.ranks = np.asarray(self.ranks, dtype=np.int64)
        self.mem = np.asarray(self.mem, dtype=np.int64)
        n, e = len(self.layers), len(self.eps)
        if self.p.shape != (n, e) or self.mem.shape != (n, e) or self.ranks.shape != (n, e, 4):
            raise ValueError("perplexity table arrays do not match layers x thresholds")

    @classmethod
    def from_ranks(cls, layers, eps, p, ranks, layer_shapes, meta=None):
        """Build a table, deriving every memory cell from its ranks."""
        ranks = np.asarray(ranks, dtype=np.int64)
        mem = [[stored_elements(ranks[i, j], layer_shapes[i]) for j in range(len(eps))]
               for i in range(len(layers))]
        return cls(list(layers), tuple(eps), p, ranks, mem,
                   [Shape4(*s) for s in layer_shapes], dict(meta or {}))

    def to_csv(self, path):
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_HEADER)
            for i, name in enumerate(self.layers):
                for j, e in enumerate(self.eps):
                    w.writerow([name, repr(e), repr(float(self.p[i, j])),
                                *map(int, self.ranks[i, j]), int(self.mem[i, j])])
        meta = dict(self.meta)
        for name, s in zip(self.layers, self.layer_shapes):
            meta[f"shape.{name}"] = "x".join(map(str, s))
        write_kv(path.with_suffix(path.suffix + ".manifest"), meta)

    @classmethod
    def from_csv(cls, path):
        path = Path(path)
        with path.open(newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0] != CSV_HEADER:
            raise ValueError(f"{path}: expected header {','.join(CSV_HEADER)}")
        layers, eps, cells = [], [], {}
        for row in rows[1:]:
            name, e = row[0], float(row[1])
            if name not in layers:
                layers.append(name)
            if e not in eps:
                eps.append(e)
            cells[name, e] = (float(row[2]), [int(x) for x in row[3:7]], int(row[7]))
        meta = read_kv(path.with_suffix(path.suffix + ".manifest"))
        shapes = [Shape4(*(int(x) for x in meta.pop(f"shape.{n}").split("x"))) for n in layers]
        eps = sorted(eps)
        try:
            p = [[cells[n, e][0] for e in eps] for n in layers]
            ranks = [[cells[n, e][1] for e in eps] for n in layers]
            mem = [[cells[n, e][2] for e in eps] for n in layers]
        except KeyError as exc:
            raise ValueError(f"{path}: missing table cell {exc}") from None
        table = cls(layers, tuple(eps), p, ranks, mem, shapes, meta)
        for i, s in enumerate(shapes):
            for j in range(len(eps)):
                if table.mem[i, j] != stored_elements(table.ranks[i, j], s):
                    raise ValueError(f"{path}: mem_elements inconsistent with ranks "
                                     f"for {layers[i]} eps={eps[j]}")
        return table


@dataclass
class SelectionResult:
    layers: list
    indices: tuple
    eps: tuple
    ranks: dict
    perplexity: float
    memory: int
    budget: int

    def write(self, path):
        kv = {"budget": self.budget, "total_perplexity": repr(self.perplexity),
              "total_memory": self.memory, "layers": ",".join(self.layers)}
        for name, j, e in zip(self.layers, self.indices, self.eps):
            kv[f"{name}.index"] = j
            kv[f"{name}.eps"] = repr(e)
            kv[f"{name}.ranks"] = ",".join(map(str, self.ranks[name]))
        write_kv(path, kv)

    @classmethod
    def read(cls, path):
        kv = read_kv(path)
        try:
            names = [n for n in kv["layers"].split(",") if n]
            return cls(
                names,
                tuple(int(kv[f"{n}.index"]) for n in names),
                tuple(float(kv[f"{n}.eps"]) for n in names),
                {n: RankVector(*(int(x) for x in kv[f"{n}.ranks"].split(","))) for n in names},
                float(kv["total_perplexity"]),
                int(kv["total_memory"]),
                int(kv["budget"]),
            )
        except KeyError as exc:
            raise ValueError(f"{path}: missing key {exc}") from None


def write_kv(path, kv):
    with Path(path).open("w") as fh:
        for k, v in kv.items():
            fh.write(f"{k} = {v}\n")


def read_kv(path):
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected 'key = value'")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def measure_perplexity(model, params, x, y, thresholds=DEFAULT_THRESHOLDS, trainable=None,
                       meta=None):
    """Gradient error of HOSVD truncation for every (conv layer, threshold).

    One forward and one backward pass with dense activations give the exact
    weight gradient and the output gradient of each fine-tuned conv layer;
    the estimate reuses that output gradient with the truncated input, so
    each entry isolates its own layer's compression error.
    """
    thresholds = check_thresholds(thresholds)
    if trainable is None:
        trainable = M.fine_tuned(model, len(M.conv_layers(model)))
    x64 = np.asarray(x, dtype=np.float64)
    p64 = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    logits, tape = M.forward(model, p64, x64, trainable)
    loss, grad_logits, _ = M.softmax_cross_entropy(logits, y)
    if not math.isfinite(loss):
        raise FloatingPointError(f"non-finite calibration loss {loss}")
    grads, grad_outs = M.backward(model, p64, tape, grad_logits, trainable,
                                  return_grad_outs=True)
    convs = [l for l in M.conv_layers(model) if l.name in trainable]
    p, ranks, shapes = [], [], []
    for layer in convs:
        exact = grads[f"{layer.name}.weight"]
        if not np.all(np.isfinite(exact)):
            raise FloatingPointError(f"non-finite gradient in {layer.name}")
        act = tape.stored[layer.name]
        row_p, row_r = [], []
        for e in thresholds:
            f, r = hosvd_variance(act, e)
            est = L.conv_backward_weight_lowrank(f, grad_outs[layer.name], layer.spec)
            row_p.append(float(np.linalg.norm(exact - est)))
            row_r.append(tuple(r))
        p.append(row_p)
        ranks.append(row_r)
        shapes.append(Shape4.of(act.shape))
    info = {"batch_size": x.shape[0], "model_hash": M.params_hash(params)}
    info.update(meta or {})
    return PerplexityTable.from_ranks([l.name for l in convs], thresholds, p, ranks,
                                      shapes, info)


def _result(table, idx, budget):
    idx = tuple(int(j) for j in idx)
    total_p = 0.0
    total_m = 0
    for i, j in enumerate(idx):
        total_p += table.p[i, j]
        total_m += int(table.mem[i, j])
    return SelectionResult(
        list(table.layers), idx, tuple(table.eps[j] for j in idx),
        {n: RankVector(*map(int, table.ranks[i, j]))
         for i, (n, j) in enumerate(zip(table.layers, idx))},
        float(total_p), total_m, int(budget))


def minimal_memory(table):
    return int(table.mem.min(axis=1).sum())


def select_ranks(table, budget):
    """Optimal threshold per layer by depth-first branch and bound.

    Layers are assigned in order, thresholds tried in index order. A branch
    is cut when its memory plus the cheapest memory of the remaining layers
    exceeds the budget, or when its perplexity plus the row minima of the
    remaining layers already exceeds the best complete assignment. Ties keep
    the lexicographically smallest index vector.

    Raises:
        InfeasibleBudget: when even the smallest-memory cells do not fit.
    """
    budget = int(budget)
    n, e = table.p.shape
    mem = table.mem.tolist()
    p = table.p.tolist()
    min_mem_tail = [0] * (n + 1)
    min_p_tail = [0.0] * (n + 1)
    for i in range(n - 1, -1, -1):
        min_mem_tail[i] = min_mem_tail[i + 1] + min(mem[i])
        min_p_tail[i] = min_p_tail[i + 1] + min(p[i])
    if min_mem_tail[0] > budget:
        raise InfeasibleBudget(budget, min_mem_tail[0])

    best = [math.inf, None]
    idx = [0] * n

    def visit(i, acc_p, acc_m):
        if i == n:
            if acc_p < best[0]:
                best[0], best[1] = acc_p, tuple(idx)
            return
        for j in range(e):
            m = acc_m + mem[i][j]
            if m + min_mem_tail[i + 1] > budget:
                continue
            q = acc_p + p[i][j]
            bound = q + min_p_tail[i + 1]
            if bound > best[0] + 1e-12 * abs(best[0]):
                continue
            idx[i] = j
            visit(i + 1, q, m)

    visit(0, 0.0, 0)
    res = _result(table, best[1], budget)
    assert res.memory <= budget
    return res


def brute_force_select(table, budget, limit=10**7):
    """Exhaustive search over all threshold combinations; test oracle."""
    n, e = table.p.shape
    if e ** n > limit:
        raise ValueError(f"{e}^{n} combinations exceed the enumeration limit {limit}")
    minimal = minimal_memory(table)
    if minimal > budget:
        raise InfeasibleBudget(int(budget), minimal)
    best_p, best_idx = math.inf, None
    for idx in itertools.product(range(e), repeat=n):
        m = 0
        acc = 0.0
        for i, j in enumerate(idx):
            m += int(table.mem[i, j])
            acc += float(table.p[i, j])
        if m <= budget and acc < best_p:
            best_p, best_idx = acc, idx
    return _result(table, best_idx, budget)
