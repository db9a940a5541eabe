"""Closed-form FLOP and memory accounting for vanilla, HOSVD and ASI training.

One multiply-accumulate is one FLOP. All counts are exact Python integers;
only the two ratios are floats.
"""
import math
from dataclasses import dataclass, field
from typing import Optional

from .decomposition import RankVector, check_ranks, stored_elements
from .layers import ConvSpec
from .tensor import Shape4


@dataclass(frozen=True)
class LayerCostInputs:
    shape: Shape4
    conv: ConvSpec
    ranks: RankVector

    def __post_init__(self):
        object.__setattr__(self, "shape", Shape4.of(self.shape))
        object.__setattr__(self, "ranks", RankVector(*self.ranks))
        self.conv.out_shape(self.shape)

    @property
    def out_shape(self):
        return self.conv.out_shape(self.shape)


def _positive(*xs):
    for x in xs:
        if int(x) != x or x < 1:
            raise ValueError(f"expected positive integers, got {xs}")


def flops_siw(a, b, r):
    """One warm-started subspace-iteration step on an a x b matrix at rank r."""
    _positive(a, b, r)
    if r > min(a, b):
        raise ValueError(f"rank {r} exceeds min({a}, {b})")
    return 2 * a * b * r + r ** 3


def flops_hosvd(s):
    """Per-step overhead of a full HOSVD: sum over modes of max(d, P)² · min(d, P)."""
    s = Shape4.of(s)
    n = s.size
    total = 0
    for d in s:
        p = n // d
        total += max(d, p) ** 2 * min(d, p)
    return total


def flops_asi_overhead(s, r):
    """Sum over modes of 2·d·d'·r_m + r_m³."""
    s = Shape4.of(s)
    r = check_ranks(r, s)
    n = s.size
    return sum(2 * d * (n // d) * rm + rm ** 3 for d, rm in zip(s, r))


def _stride_one(inp):
    if inp.conv.stride != 1:
        raise ValueError("the closed-form costs assume stride 1")


def flops_asi_backward(inp):
    """Weight-gradient cost from Tucker factors."""
    _stride_one(inp)
    b, c, h, w = inp.shape
    _, cp, ho, wo = inp.out_shape
    r1, r2, r3, r4 = inp.ranks
    d = inp.conv.kernel
    return (r1 * b * cp * ho * wo + r1 * r2 * r3 * r4 * h + r1 * r2 * r4 * h * w
            + r1 * r2 * cp * ho * wo * d * d + r2 * cp * c * d * d)


def flops_vanilla(inp):
    """(forward, backward) MACs of a dense conv layer: D²CC'BHW and D²CC'BH'W'."""
    _stride_one(inp)
    b, c, h, w = inp.shape
    _, cp, ho, wo = inp.out_shape
    d2 = inp.conv.kernel ** 2
    return d2 * c * cp * b * h * w, d2 * c * cp * b * ho * wo


def speedup_ratio(inp):
    """Vanilla over ASI FLOPs for one training step of the layer."""
    fwd, bwd = flops_vanilla(inp)
    asi = fwd + flops_asi_overhead(inp.shape, inp.ranks) + flops_asi_backward(inp)
    return (fwd + bwd) / asi


def compression_ratio(s, r):
    """Dense element count over Tucker-stored element count."""
    s = Shape4.of(s)
    return s.size / stored_elements(r, s)


REGIMES = ("vanilla", "hosvd", "asi")


@dataclass
class LayerCost:
    layer: str
    regime: str
    forward_flops: int
    backward_flops: int
    compression_overhead_flops: int
    stored_activation_elements: int
    speedup_ratio: float
    compression_ratio: float


@dataclass
class CostReport:
    regime: str
    layers: list = field(default_factory=list)

    FIELDS = ("forward_flops", "backward_flops", "compression_overhead_flops",
              "stored_activation_elements", "speedup_ratio", "compression_ratio")

    def totals(self):
        """Summed counts; ratios recomputed from the summed FLOPs and storage."""
        fwd = sum(x.forward_flops for x in self.layers)
        bwd = sum(x.backward_flops for x in self.layers)
        ovh = sum(x.compression_overhead_flops for x in self.layers)
        mem = sum(x.stored_activation_elements for x in self.layers)
        dense = sum(x.stored_activation_elements * x.compression_ratio for x in self.layers)
        vanilla = sum(x.speedup_ratio * (x.forward_flops + x.backward_flops
                                         + x.compression_overhead_flops)
                      for x in self.layers)
        step = fwd + bwd + ovh
        return LayerCost("total", self.regime, fwd, bwd, ovh, mem,
                         vanilla / step if step else math.nan,
                         dense / mem if mem else math.nan)


def layer_cost(name, inp, regime):
    """Cost of one layer under ``regime``; ``inp.ranks`` are ignored for vanilla."""
    fwd, bwd = flops_vanilla(inp)
    dense = inp.shape.size
    if regime == "vanilla":
        return LayerCost(name, regime, fwd, bwd, 0, dense, 1.0, 1.0)
    low_bwd = flops_asi_backward(inp)
    if regime == "hosvd":
        ovh = flops_hosvd(inp.shape)
    elif regime == "asi":
        ovh = flops_asi_overhead(inp.shape, inp.ranks)
    else:
        raise ValueError(f"unknown regime {regime!r}")
    mem = stored_elements(inp.ranks, inp.shape)
    return LayerCost(name, regime, fwd, low_bwd, ovh, mem,
                     (fwd + bwd) / (fwd + ovh + low_bwd), dense / mem)


def cost_report(layers, regime, ranks: Optional[dict] = None):
    """Build a :class:`CostReport` for ``layers``: a list of (name, shape, ConvSpec).

    ``ranks`` maps layer name to RankVector for the compressed regimes.
    """
    rep = CostReport(regime)
    for name, shape, spec in layers:
        r = (ranks or {}).get(name, (1, 1, 1, 1))
        rep.layers.append(layer_cost(name, LayerCostInputs(shape, spec, r), regime))
    return rep
