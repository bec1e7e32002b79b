"""Chain of residual MLP levels updated at geometrically spaced frequencies.

Level l applies its buffered update every `chunk[l]` steps and keeps its
weights bit-frozen in between; `chunk=None` means the level never ticks (a
static feed-forward block).  Three wirings: "sequential" and "nested" compose
the levels, "independent" blends per-level reads with learnable weights.  The
nested wiring additionally restores a level to its init snapshot whenever the
next-slower level applies, so each fast level restarts its context.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tape, Tensor

VARIANTS = ("sequential", "nested", "independent")


@dataclass
class CmsLevel:
    w1: np.ndarray
    w2: np.ndarray
    chunk: int | None
    eta: float
    acc1: np.ndarray = field(default=None)
    acc2: np.ndarray = field(default=None)
    snap1: np.ndarray = field(default=None)
    snap2: np.ndarray = field(default=None)
    applied: int = 0

    def __post_init__(self):
        if self.w1.shape[1] != self.w2.shape[0] or self.w1.shape[0] != self.w2.shape[1]:
            raise T.ShapeError(f"level weights must be (d,h) and (h,d), got {self.w1.shape} and {self.w2.shape}")
        if self.chunk is not None and self.chunk < 1:
            raise ValueError(f"chunk size must be >= 1 or None, got {self.chunk}")
        if self.acc1 is None:
            self.acc1 = np.zeros_like(self.w1)
            self.acc2 = np.zeros_like(self.w2)
        if self.snap1 is None:
            self.snap1 = self.w1.copy()
            self.snap2 = self.w2.copy()

    @property
    def dim(self) -> int:
        return self.w1.shape[0]

    def read(self, x: np.ndarray) -> np.ndarray:
        return x + self.w1 @ T._silu(self.w2 @ x)


class CmsChain:
    def __init__(self, levels: list[CmsLevel], variant: str = "sequential", agg_weights=None):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        if not levels:
            raise ValueError("a chain needs at least one level")
        dims = {lv.dim for lv in levels}
        if len(dims) != 1:
            raise T.ShapeError(f"levels disagree on width: {sorted(dims)}")
        finite = [lv.chunk for lv in levels if lv.chunk is not None]
        for a, b in zip(levels, levels[1:]):
            ca = a.chunk if a.chunk is not None else math.inf
            cb = b.chunk if b.chunk is not None else math.inf
            if ca >= cb:
                raise ValueError("levels must be ordered by strictly ascending chunk size")
        if finite:
            cmax = max(finite)
            for c in finite:
                if cmax % c != 0:
                    raise ValueError(f"chunk {c} does not divide the largest chunk {cmax}")
        self.levels = levels
        self.variant = variant
        if variant == "independent":
            if agg_weights is None:
                agg_weights = np.ones(len(levels)) / len(levels)
            agg_weights = np.asarray(agg_weights, dtype=float)
            if agg_weights.shape != (len(levels),) or not np.all(np.isfinite(agg_weights)):
                raise ValueError("aggregation weights must be one finite scalar per level")
        self.agg_weights = agg_weights
        self.last_step = 0

    @property
    def dim(self) -> int:
        return self.levels[0].dim


def make_chain(
    dim: int,
    hidden: int,
    chunks: list[int | None],
    variant: str = "sequential",
    eta: float | list[float] = 0.01,
    seed: int = 0,
    init_scale: float = 0.1,
) -> CmsChain:
    rng = np.random.default_rng(seed)
    etas = eta if isinstance(eta, (list, tuple)) else [eta] * len(chunks)
    levels = []
    for c, e in zip(chunks, etas):
        w1 = init_scale * rng.normal(size=(dim, hidden)) / np.sqrt(hidden)
        w2 = rng.normal(size=(hidden, dim)) / np.sqrt(dim)
        levels.append(CmsLevel(w1, w2, c, e))
    return CmsChain(levels, variant=variant)


def cms_forward(chain: CmsChain, x) -> Tensor:
    """Read the chain at its current weights; works on a vector or (d,L) columns."""
    v = T.as_array(x)
    if v.shape[0] != chain.dim:
        raise T.ShapeError(f"input width {v.shape[0]} does not match chain width {chain.dim}")
    if chain.variant == "independent":
        out = np.zeros_like(v)
        for w, lv in zip(chain.agg_weights, chain.levels):
            out = out + w * lv.read(v)
        return Tensor(out)
    for lv in chain.levels:
        v = lv.read(v)
    return Tensor(v)


def forward_nodes(chain: CmsChain, tape: Tape, x, prefix: str = "cms."):
    """Tape-graph forward registering every level's weights (and aggregation
    weights) as named parameters, so one backward yields all per-level
    gradients."""
    x = x if isinstance(x, T.Node) else tape.constant(T.as_array(x))
    reads = []
    cur = x
    for i, lv in enumerate(chain.levels):
        w1 = tape.param(f"{prefix}level{i}.w1", lv.w1)
        w2 = tape.param(f"{prefix}level{i}.w2", lv.w2)
        src = x if chain.variant == "independent" else cur
        read = T.add(src, T.matmul(w1, T.silu(T.matmul(w2, src))))
        reads.append(read)
        cur = read
    if chain.variant != "independent":
        return cur
    agg = tape.param(f"{prefix}agg", chain.agg_weights)
    out = None
    for i, read in enumerate(reads):
        term = T.mul(T.element(agg, i), read)
        out = term if out is None else T.add(out, term)
    return out


def forward_with_nodes(chain: CmsChain, level_nodes: list[tuple], x, agg_node=None):
    """Graph forward against pre-registered weight nodes (one registration, many reads)."""
    reads = []
    cur = x
    for (w1, w2) in level_nodes:
        src = x if chain.variant == "independent" else cur
        read = T.add(src, T.matmul(w1, T.silu(T.matmul(w2, src))))
        reads.append(read)
        cur = read
    if chain.variant != "independent":
        return cur
    out = None
    for i, read in enumerate(reads):
        term = T.mul(T.element(agg_node, i), read)
        out = term if out is None else T.add(out, term)
    return out


def cms_accumulate(chain: CmsChain, grads: list[tuple]) -> None:
    """Buffer one step's per-level gradients, scaled by each level's inner rate."""
    if len(grads) != len(chain.levels):
        raise ValueError(f"got {len(grads)} gradient pairs for {len(chain.levels)} levels")
    for lv, (g1, g2) in zip(chain.levels, grads):
        g1, g2 = T.as_array(g1), T.as_array(g2)
        if g1.shape != lv.w1.shape or g2.shape != lv.w2.shape:
            raise T.ShapeError(
                f"gradient shapes {g1.shape}/{g2.shape} do not match level weights {lv.w1.shape}/{lv.w2.shape}"
            )
        lv.acc1 = lv.acc1 + lv.eta * g1
        lv.acc2 = lv.acc2 + lv.eta * g2


def cms_tick(chain: CmsChain, i: int) -> list[int]:
    """Apply buffered updates for every level whose boundary divides step i.

    Returns the indices of levels that applied.  Nested chains then restore
    each level to its snapshot whenever the next-slower level applied.
    """
    if i <= chain.last_step:
        raise ValueError(f"tick steps must strictly increase, got {i} after {chain.last_step}")
    chain.last_step = i
    applied = []
    for idx, lv in enumerate(chain.levels):
        if lv.chunk is not None and i % lv.chunk == 0:
            lv.w1 = lv.w1 - lv.acc1
            lv.w2 = lv.w2 - lv.acc2
            lv.acc1 = np.zeros_like(lv.acc1)
            lv.acc2 = np.zeros_like(lv.acc2)
            lv.applied += 1
            applied.append(idx)
    if chain.variant == "nested":
        for idx in range(len(chain.levels) - 1):
            if idx + 1 in applied:
                lv = chain.levels[idx]
                lv.w1 = lv.snap1.copy()
                lv.w2 = lv.snap2.copy()
                lv.acc1 = np.zeros_like(lv.acc1)
                lv.acc2 = np.zeros_like(lv.acc2)
    return applied


def state_dict(chain: CmsChain) -> dict[str, Tensor]:
    out = {}
    for i, lv in enumerate(chain.levels):
        out[f"level{i}.w1"] = Tensor(lv.w1)
        out[f"level{i}.w2"] = Tensor(lv.w2)
    if chain.variant == "independent":
        out["agg"] = Tensor(chain.agg_weights)
    return out


def init_cms_from_checkpoint(chain: CmsChain, named: dict[str, Tensor]) -> CmsChain:
    """Load level weights (and snapshots) from a name->tensor mapping."""
    for i, lv in enumerate(chain.levels):
        for attr, snap_attr, key in (("w1", "snap1", f"level{i}.w1"), ("w2", "snap2", f"level{i}.w2")):
            if key not in named:
                raise KeyError(f"checkpoint is missing tensor {key!r}")
            arr = T.as_array(named[key])
            if arr.shape != getattr(lv, attr).shape:
                raise T.ShapeError(
                    f"checkpoint tensor {key!r} has shape {arr.shape}, level expects {getattr(lv, attr).shape}"
                )
            setattr(lv, attr, arr.copy())
            setattr(lv, snap_attr, arr.copy())
    if chain.variant == "independent" and "agg" in named:
        arr = T.as_array(named["agg"])
        if arr.shape != chain.agg_weights.shape:
            raise T.ShapeError(f"checkpoint tensor 'agg' has shape {arr.shape}, expected {chain.agg_weights.shape}")
        chain.agg_weights = arr.copy()
    return chain
