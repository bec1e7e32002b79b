"""Self-modifying fast-weight block: a family of memories that generate their
own training targets and update by a decaying proximal rule.

The family holds five fast memories (key, value, learning-rate gate, retention
gate, storage) plus one static query projection.  Every token: read the output
from the storage memory *before* any update, generate per-slot targets by
reading each memory at the value vector, then update every adaptive memory.

Chunked processing freezes the memories "as of the chunk start" for all
element computations (keys, values, gates, targets, outputs, and the gradient
terms), which makes within-chunk element work order-independent; only the
decay recurrence is folded sequentially.  A chunk of 1 recovers exact
token-by-token stepping.

Linear-memory update with the retention factor (objective `l2`):
    M_t = M_{t-1} (a_t I - e_t k_t k_t^T) - e_t (M_b k_t - vhat_t) k_t^T
where M_b is the chunk-boundary state.  Without retention the update is a
plain decay-plus-gradient step.  MLP memories always use the weight-space
variant of the same objective.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .memory import LINEAR, MLP2, Memory, UnsupportedCombination
from .tensor import Node, Tape, Tensor

SLOTS = ("k", "v", "eta", "alpha", "mem")


@dataclass(frozen=True)
class SrtConfig:
    dim: int
    hidden: int = 0  # 0 -> same as dim
    kinds: dict = field(default_factory=lambda: {"k": LINEAR, "v": LINEAR, "eta": LINEAR, "alpha": LINEAR, "mem": MLP2})
    objective: str = "l2"  # inner objective: "l2" or "dot"
    chunk: int = 8
    retention: bool = True  # apply the (a*I - e*k k^T) factor on linear memories
    self_values: bool = True  # targets read from each memory; False stores v_t directly
    normalize_q: bool = True
    normalize_k: bool = True
    normalize_v: bool = True  # stability: unit-norm values break the quadratic self-target loop
    update_slots: tuple = SLOTS
    fixed_eta: Optional[float] = None
    fixed_alpha: Optional[float] = None
    eta_bias: float = -2.0  # pre-softplus shift, keeps early inner steps small
    alpha_bias: float = 3.0  # pre-sigmoid shift, keeps early retention high
    conv: bool = False  # window-4 depthwise causal conv before k/v reads

    def __post_init__(self):
        if self.objective not in ("l2", "dot"):
            raise ValueError(f"inner objective must be 'l2' or 'dot', got {self.objective!r}")
        unknown = set(self.update_slots) - set(SLOTS) - {"q"}
        if unknown:
            raise ValueError(f"unknown update slots {sorted(unknown)}")

    @property
    def width(self) -> int:
        return self.hidden or self.dim


@dataclass(frozen=True)
class SrtState:
    """Fast weights plus the meta-learned snapshots they restart from."""

    config: SrtConfig
    weights: dict
    inits: dict
    wq: np.ndarray
    conv_kernel: Optional[np.ndarray] = None

    def memory(self, slot: str) -> Memory:
        w = self.weights[slot]
        return Memory.linear(w[0]) if self.config.kinds[slot] == LINEAR else Memory.mlp2(*w)


def init_srt(config: SrtConfig, seed: int = 0) -> SrtState:
    rng = np.random.default_rng(seed)
    d, h = config.dim, config.width
    weights = {}
    for slot in SLOTS:
        kind = config.kinds[slot]
        if kind == LINEAR:
            if slot in ("eta", "alpha", "mem"):
                weights[slot] = (np.zeros((d, d)),)  # gates at their bias points, storage empty
            else:
                weights[slot] = (np.eye(d),)
        elif kind == MLP2:
            w1 = 0.1 * rng.normal(size=(d, h)) / np.sqrt(h)
            w2 = rng.normal(size=(h, d)) / np.sqrt(d)
            weights[slot] = (w1, w2)
        else:
            raise ValueError(f"unknown memory kind {kind!r} for slot {slot!r}")
    wq = np.eye(d) + 0.1 * rng.normal(size=(d, d)) / np.sqrt(d)
    kernel = None
    if config.conv:
        kernel = np.zeros((d, 4))
        kernel[:, -1] = 1.0  # identity at init: conv output == input
    inits = {slot: tuple(w.copy() for w in ws) for slot, ws in weights.items()}
    return SrtState(config, weights, inits, wq, kernel)


def reset(state: SrtState) -> SrtState:
    """Per-sequence restart: fast weights return to the snapshots bit-exactly."""
    return replace(state, weights={slot: tuple(w.copy() for w in ws) for slot, ws in state.inits.items()})


def _read(weights: Sequence[Node], kind: str, x: Node) -> Node:
    if kind == LINEAR:
        return T.matmul(weights[0], x)
    w1, w2 = weights
    return T.add(x, T.matmul(w1, T.silu(T.matmul(w2, x))))


def _safe_normalize(v: Node) -> Node:
    # a zero read stays zero (degenerate null-memory case); nonzero goes to unit norm
    if np.linalg.norm(v.value) == 0.0:
        return v
    return T.l2_normalize(v)


def _update_linear(cfg: SrtConfig, cur: Node, boundary: Node, k: Node, vhat: Node, eta: Node, alpha: Node) -> Node:
    if cfg.objective == "l2":
        resid = T.sub(T.matmul(boundary, k), vhat)
        if cfg.retention:
            # a*M - e*(M k + (M_b k - vhat)) k^T  ==  M(a I - e k k^T) - e grad
            w = T.add(T.matmul(cur, k), resid)
        else:
            w = resid
        return T.sub(T.mul(alpha, cur), T.mul(eta, T.outer(w, k)))
    # dot objective: gradient is -vhat k^T
    if cfg.retention:
        w = T.sub(T.matmul(cur, k), vhat)
        return T.sub(T.mul(alpha, cur), T.mul(eta, T.outer(w, k)))
    return T.add(T.mul(alpha, cur), T.mul(eta, T.outer(vhat, k)))


def _update_mlp2(cfg: SrtConfig, cur: tuple, boundary: tuple, k: Node, vhat: Node, eta: Node, alpha: Node) -> tuple:
    w1c, w2c = cur
    w1b, w2b = boundary
    z = T.matmul(w2b, k)
    h = T.silu(z)
    if cfg.objective == "l2":
        r = T.sub(T.add(k, T.matmul(w1b, h)), vhat)
    else:
        r = T.neg(vhat)
    g1 = T.outer(r, h)
    g2 = T.outer(T.mul(T.matmul(T.transpose(w1b), r), T.silu_grad(z)), k)
    new_w1 = T.sub(T.mul(alpha, w1c), T.mul(eta, g1))
    new_w2 = T.sub(T.mul(alpha, w2c), T.mul(eta, g2))
    return (new_w1, new_w2)


def srt_forward_nodes(
    tape: Tape,
    cfg: SrtConfig,
    weights: dict,
    wq: Node,
    x: Node,
    chunk: Optional[int] = None,
    conv_kernel: Optional[Node] = None,
    element_order: Optional[Sequence[int]] = None,
):
    """Graph-level forward over a (d,L) token matrix.

    `weights` maps slot -> tuple of weight nodes (params for meta-training,
    constants for plain evaluation).  Returns (Y node, final weight nodes).
    `element_order` permutes the within-chunk element computations; outputs are
    positional, so any order must give identical results.
    """
    d, L = x.value.shape
    if d != cfg.dim:
        raise T.ShapeError(f"token width {d} does not match configured width {cfg.dim}")
    chunk = chunk or cfg.chunk
    if chunk < 1:
        raise ValueError(f"chunk size must be >= 1, got {chunk}")

    xkv = T.causal_depthwise_conv(x, conv_kernel) if conv_kernel is not None else x
    cur = dict(weights)
    outputs: list = [None] * L

    for start in range(0, L, chunk):
        stop = min(start + chunk, L)
        boundary = dict(cur)
        idx = list(range(start, stop))
        order = idx if element_order is None else [idx[i] for i in element_order[: stop - start]]

        elems: dict[int, dict] = {}
        for t in order:
            x_t = T.column(x, t)
            xkv_t = T.column(xkv, t) if conv_kernel is not None else x_t
            q_t = T.matmul(wq, x_t)
            if cfg.normalize_q:
                q_t = _safe_normalize(q_t)
            k_t = _read(boundary["k"], cfg.kinds["k"], xkv_t)
            if cfg.normalize_k:
                k_t = _safe_normalize(k_t)
            v_t = _read(boundary["v"], cfg.kinds["v"], xkv_t)
            if cfg.normalize_v:
                v_t = _safe_normalize(v_t)
            if cfg.fixed_eta is not None:
                eta_t = tape.constant(cfg.fixed_eta)
            else:
                eta_t = T.softplus(T.add(T.mean_all(_read(boundary["eta"], cfg.kinds["eta"], x_t)), cfg.eta_bias))
            if cfg.fixed_alpha is not None:
                alpha_t = tape.constant(cfg.fixed_alpha)
            else:
                alpha_t = T.sigmoid(T.add(T.mean_all(_read(boundary["alpha"], cfg.kinds["alpha"], x_t)), cfg.alpha_bias))
            y_t = _read(boundary["mem"], cfg.kinds["mem"], q_t)
            vhat = {}
            for slot in SLOTS:
                if slot not in cfg.update_slots:
                    continue
                vhat[slot] = _read(boundary[slot], cfg.kinds[slot], v_t) if cfg.self_values else v_t
            elems[t] = dict(k=k_t, vhat=vhat, eta=eta_t, alpha=alpha_t)
            outputs[t] = y_t

        for t in idx:  # decay recurrence folds in token order regardless of element order
            e = elems[t]
            for slot in SLOTS:
                if slot not in cfg.update_slots:
                    continue
                if cfg.kinds[slot] == LINEAR:
                    cur[slot] = (
                        _update_linear(cfg, cur[slot][0], boundary[slot][0], e["k"], e["vhat"][slot], e["eta"], e["alpha"]),
                    )
                else:
                    cur[slot] = _update_mlp2(cfg, cur[slot], boundary[slot], e["k"], e["vhat"][slot], e["eta"], e["alpha"])

    return T.stack_columns(outputs), cur


def _as_nodes(tape: Tape, state: SrtState):
    weights = {slot: tuple(tape.constant(w) for w in ws) for slot, ws in state.weights.items()}
    wq = tape.constant(state.wq)
    kernel = tape.constant(state.conv_kernel) if state.conv_kernel is not None else None
    return weights, wq, kernel


def _extract(state: SrtState, nodes: dict) -> SrtState:
    return replace(state, weights={slot: tuple(np.array(n.value) for n in ns) for slot, ns in nodes.items()})


def srt_step(state: SrtState, x: Tensor):
    """One token: output read with the pre-update memories, then all updates."""
    if x.shape != (state.config.dim,):
        raise T.ShapeError(f"token shape {x.shape} does not match width {state.config.dim}")
    tape = Tape()
    weights, wq, kernel = _as_nodes(tape, state)
    xn = tape.constant(x.data.reshape(-1, 1))
    y, new_weights = srt_forward_nodes(tape, state.config, weights, wq, xn, chunk=1, conv_kernel=kernel)
    return Tensor(y.value[:, 0]), _extract(state, new_weights)


def srt_chunked_forward(state: SrtState, xs: Tensor, chunk: Optional[int] = None, element_order=None):
    """Chunk-wise forward over a (d,L) matrix; returns (Y, advanced state)."""
    tape = Tape()
    weights, wq, kernel = _as_nodes(tape, state)
    y, new_weights = srt_forward_nodes(
        tape, state.config, weights, wq, tape.constant(xs.data), chunk=chunk, conv_kernel=kernel, element_order=element_order
    )
    return Tensor(y.value), _extract(state, new_weights)


def srt_linear_recurrence(objective: str, memory: Memory, k: Tensor, vhat: Tensor, eta: float, alpha: float) -> Memory:
    """Closed-form retention-factor step for linear memories (value level)."""
    if memory.kind != LINEAR:
        raise UnsupportedCombination("closed-form recurrence applies to linear memories only")
    m = memory.matrix.data
    kv, vv = k.data, vhat.data
    retain = alpha * np.eye(m.shape[1]) - eta * np.outer(kv, kv)
    if objective == "l2":
        grad = np.outer(m @ kv - vv, kv)
    elif objective == "dot":
        grad = -np.outer(vv, kv)
    else:
        raise ValueError(f"objective must be 'l2' or 'dot', got {objective!r}")
    return Memory.linear(m @ retain - eta * grad)


def linear_attention_config(dim: int, chunk: int = 1) -> SrtConfig:
    """Degenerate configuration whose storage trajectory is plain linear attention.

    Key/value memories frozen at identity reads, gates pinned to (eta, alpha)
    = (1, 1), no self-generated targets, no retention factor, dot objective:
    the storage update collapses to M <- M + v k^T.
    """
    return SrtConfig(
        dim=dim,
        kinds={"k": LINEAR, "v": LINEAR, "eta": LINEAR, "alpha": LINEAR, "mem": LINEAR},
        objective="dot",
        chunk=chunk,
        retention=False,
        self_values=False,
        normalize_q=False,
        normalize_k=False,
        normalize_v=False,
        update_slots=("mem",),
        fixed_eta=1.0,
        fixed_alpha=1.0,
    )
