"""Self-checks run by ``asi verify``.

Each suite compares a fast path against an independent oracle on seeded
random cases and returns a :class:`SuiteResult`. The generators are public
so the test suite can share them.
"""
import time
from dataclasses import dataclass

import numpy as np

from . import kernels, macs
from .cost import LayerCostInputs, flops_asi_backward, flops_vanilla
from .decomposition import asi_compress, hosvd_fixed, hosvd_variance, reconstruct, stored_elements
from .layers import (
    ConvSpec,
    conv_backward_bias,
    conv_backward_input,
    conv_backward_weight,
    conv_backward_weight_lowrank,
    conv_forward,
    fc_backward,
    fc_forward,
)
from .selection import PerplexityTable, brute_force_select, minimal_memory, select_ranks
from .tensor import mode_product, unfold


@dataclass
class SuiteResult:
    name: str
    passed: bool
    cases: int
    detail: str
    seconds: float = 0.0

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name} cases={self.cases} {self.detail} ({self.seconds:.2f}s)"


# generators

def decaying_tensor(seed, shape=(4, 4, 8, 8), decay=0.6, noise=0.01):
    """Random Tucker tensor whose per-mode spectra fall off geometrically."""
    rng = np.random.default_rng(seed)
    t = rng.standard_normal(shape)
    for m, d in enumerate(shape, start=1):
        q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        t = mode_product(t, q * decay ** np.arange(d), m)
    return t + noise * rng.standard_normal(shape)


def random_table(seed, n_layers=4, n_eps=6, tie_prone=False):
    """Perplexity table whose rows fall in perplexity and rise in memory."""
    rng = np.random.default_rng(seed)
    shapes = [tuple(int(v) for v in rng.integers(2, 9, size=4)) for _ in range(n_layers)]
    p, ranks = [], []
    for s in shapes:
        caps = [min(d, int(np.prod(s)) // d) for d in s]
        row = sorted((tuple(int(rng.integers(1, c + 1)) for c in caps) for _ in range(n_eps)),
                     key=lambda r: stored_elements(r, s))
        ranks.append(row)
        vals = rng.integers(0, 4, size=n_eps) / 4 if tie_prone else rng.random(n_eps)
        p.append(np.sort(vals)[::-1])
    eps = tuple(np.linspace(0.4, 0.9, n_eps))
    return PerplexityTable.from_ranks([f"conv{i}" for i in range(n_layers)], eps, p, ranks, shapes)


def random_conv_case(rng, max_bc=8, max_hw=16, max_rank=4, kernels_=(1, 3)):
    """Stride-1 'same' conv shape plus a feasible rank vector."""
    b, c, cp = (int(v) for v in rng.integers(1, max_bc + 1, size=3))
    h, w = (int(v) for v in rng.integers(1, max_hw + 1, size=2))
    d = int(rng.choice(kernels_))
    shape = (b, c, h, w)
    n = b * c * h * w
    ranks = tuple(int(rng.integers(1, min(max_rank, s, n // s) + 1)) for s in shape)
    return shape, ConvSpec(c, cp, d, 1, d // 2), ranks


def numeric_grad(f, x, h=1e-6):
    """Central finite differences of scalar ``f`` at ``x`` (float64)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    """Max-abs error relative to the max-abs of the reference ``b``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


# suites

def svd_oracle(n=100, seed=0):
    """HOSVD truncation bound, fixed-rank core energy, ASI convergence."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        shape = tuple(int(v) for v in rng.integers(1, 7, size=4))
        t = rng.standard_normal(shape)
        f, r = hosvd_variance(t, float(rng.uniform(0.1, 1.0)))
        bound = 0.0
        for m in range(1, 5):
            s = np.linalg.svd(unfold(t, m), compute_uv=False)
            bound += float(np.sum(s[r[m - 1]:] ** 2))
        err = float(np.sum((reconstruct(f) - t) ** 2))
        if err > bound * (1 + 1e-9) + 1e-10:
            return False, n, f"truncation bound violated on shape {shape}: {err} > {bound}"
        worst = max(worst, err / bound if bound else 0.0)
    t = rng.standard_normal((4, 5, 6, 7))
    core = t
    for m in range(1, 5):
        u = np.linalg.svd(unfold(t, m), full_matrices=False)[0][:, :2]
        core = mode_product(core, u.T, m)
    fixed = hosvd_fixed(t, (2, 2, 2, 2))
    if abs(np.sum(fixed.core ** 2) - np.sum(core ** 2)) > 1e-8:
        return False, n, "fixed-rank core energy differs from per-mode SVD"
    t = decaying_tensor(seed)
    target = float(np.sum(hosvd_fixed(t, (2, 2, 2, 2)).core ** 2))
    cache = None
    for _ in range(20):
        f, cache = asi_compress(t, (2, 2, 2, 2), cache, rng_seed=seed)
    gap = abs(float(np.sum(f.core ** 2)) - target) / target
    if gap >= 0.01:
        return False, n, f"ASI energy gap after 20 steps {gap:.3g} >= 1%"
    return True, n, f"max err/bound={worst:.3f} asi_gap={gap:.2e}"


def selection_oracle(n=100, seed=0):
    """Branch and bound against exhaustive search on random 4x6 tables."""
    for k in range(n):
        table = random_table(seed + k, tie_prone=bool(k % 2))
        lo, hi = minimal_memory(table), int(table.mem.max(axis=1).sum())
        budget = int(np.random.default_rng([seed, k]).integers(lo, hi + 1))
        fast, slow = select_ranks(table, budget), brute_force_select(table, budget)
        if fast.indices != slow.indices or fast.perplexity != slow.perplexity:
            return False, n, f"instance {k}: {fast.indices} vs {slow.indices}"
        mem = sum(int(table.mem[i, j]) for i, j in enumerate(fast.indices))
        if mem > budget or mem != fast.memory:
            return False, n, f"instance {k}: memory {mem} vs budget {budget}"
    return True, n, "objective and assignment identical"


def gradient_oracle(n=100, fd_cases=6, seed=0, tol=1e-3):
    """Low-rank weight gradient vs reconstruct-then-dense; finite differences."""
    rng = np.random.default_rng(seed)
    worst_lr = 0.0
    for _ in range(n):
        shape, spec, r = random_conv_case(rng)
        x = rng.standard_normal(shape)
        g = rng.standard_normal(spec.out_shape(shape))
        f, _ = asi_compress(x, r, None, int(rng.integers(1 << 30)))
        e = rel_err(conv_backward_weight_lowrank(f, g, spec),
                    conv_backward_weight(reconstruct(f), g, spec))
        worst_lr = max(worst_lr, e)
        if e >= 1e-5:
            return False, n, f"low-rank gradient off by {e:.2e} on {shape} {r}"
    worst_fd = 0.0
    for _ in range(fd_cases):
        b, c, cp = (int(v) for v in rng.integers(1, 4, size=3))
        hw = int(rng.integers(3, 6))
        k = int(rng.choice((1, 3)))
        spec = ConvSpec(c, cp, k, int(rng.integers(1, 3)), int(rng.integers(0, k // 2 + 1)))
        x = rng.standard_normal((b, c, hw, hw))
        w = rng.standard_normal(spec.weight_shape)
        bias = rng.standard_normal(cp)
        g = rng.standard_normal(spec.out_shape(x.shape))
        loss = lambda x_, w_, b_: float(np.sum(conv_forward(x_, w_, spec, b_) * g))
        checks = [
            (conv_backward_weight(x, g, spec), numeric_grad(lambda v: loss(x, v, bias), w)),
            (conv_backward_input(w, g, spec, x.shape), numeric_grad(lambda v: loss(v, w, bias), x)),
            (conv_backward_bias(g), numeric_grad(lambda v: loss(x, w, v), bias)),
        ]
        xf = rng.standard_normal((b, c * 2))
        wf = rng.standard_normal((cp, c * 2))
        bf = rng.standard_normal(cp)
        gf = rng.standard_normal((b, cp))
        lf = lambda x_, w_, b_: float(np.sum(fc_forward(x_, w_, b_) * gf))
        dw, dx, db = fc_backward(xf, wf, gf)
        checks += [
            (dw, numeric_grad(lambda v: lf(xf, v, bf), wf)),
            (dx, numeric_grad(lambda v: lf(v, wf, bf), xf)),
            (db, numeric_grad(lambda v: lf(xf, wf, v), bf)),
        ]
        for got, want in checks:
            e = rel_err(got, want)
            worst_fd = max(worst_fd, e)
            if e >= tol:
                return False, n + fd_cases, f"finite-difference error {e:.2e} with {spec}"
    return True, n + fd_cases, f"lowrank max rel={worst_lr:.1e} fd max rel={worst_fd:.1e}"


def counter_oracle(n=50, seed=0):
    """Instrumented MAC counts equal the closed-form FLOP formulas."""
    rng = np.random.default_rng(seed)
    for k in range(n):
        shape, spec, r = random_conv_case(rng)
        x = rng.standard_normal(shape)
        w = rng.standard_normal(spec.weight_shape)
        g = rng.standard_normal(spec.out_shape(shape))
        f, _ = asi_compress(x, r, None, k)
        with macs.counting() as c:
            conv_forward(x, w, spec)
            conv_backward_weight(x, g, spec)
            conv_backward_weight_lowrank(f, g, spec)
        inp = LayerCostInputs(shape, spec, r)
        fwd, bwd = flops_vanilla(inp)
        got = (c["conv_forward"], c["conv_backward_weight"], c["conv_backward_weight_lowrank"])
        want = (fwd, bwd, flops_asi_backward(inp))
        if got != want:
            return False, n, f"case {k} {shape} {r}: counted {got}, formula {want}"
    return True, n, "forward, dense backward and low-rank backward exact"


def backend_oracle(n=20, seed=0):
    """Compiled and pure-Python kernels agree."""
    impls = kernels.backends()
    if len(impls) < 2:
        return True, 0, f"only the {kernels.BACKEND} backend is available"
    rng = np.random.default_rng(seed)
    (_, a), (_, b) = impls.items()
    for _ in range(n):
        bsz, c = (int(v) for v in rng.integers(1, 4, size=2))
        h, w = (int(v) for v in rng.integers(1, 9, size=2))
        k, s, p = int(rng.choice((1, 2, 3))), int(rng.integers(1, 3)), int(rng.integers(0, 2))
        if h + 2 * p < k or w + 2 * p < k:
            continue
        x = rng.standard_normal((bsz, c, h, w))
        ca, cb = kernels.im2col(x, k, k, s, p, impl=a), kernels.im2col(x, k, k, s, p, impl=b)
        if not np.array_equal(ca, cb):
            return False, n, "im2col differs between backends"
        ia = kernels.col2im(ca, x.shape, k, k, s, p, impl=a)
        ib = kernels.col2im(ca, x.shape, k, k, s, p, impl=b)
        if np.max(np.abs(ia - ib)) > 1e-12:
            return False, n, "col2im differs between backends"
        q = rng.standard_normal((h * w + 3, min(3, h * w + 3)))
        qa, qb = q.copy(), q.copy()
        kernels.mgs(qa, 0, 1e-10, impl=a)
        kernels.mgs(qb, 0, 1e-10, impl=b)
        if np.max(np.abs(qa - qb)) > 1e-10:
            return False, n, "orthogonalization differs between backends"
    return True, n, "im2col, col2im and orthogonalization agree"


SUITES = {
    "svd-oracle": svd_oracle,
    "brute-force-selection": selection_oracle,
    "finite-differences": gradient_oracle,
    "counter-equality": counter_oracle,
    "kernel-backends": backend_oracle,
}


def run_suites(names=None):
    """Run the named suites (all by default) and return their results in order."""
    out = []
    for name in names or SUITES:
        t0 = time.perf_counter()
        try:
            ok, cases, detail = SUITES[name]()
        except Exception as exc:  # a crash is a failure, reported not raised
            ok, cases, detail = False, 0, f"{type(exc).__name__}: {exc}"
        out.append(SuiteResult(name, ok, cases, detail, time.perf_counter() - t0))
    return out
