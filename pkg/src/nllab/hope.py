"""Token model assembling the self-modifying core with a multi-frequency MLP tail.

A block normalizes its input, runs the core (self-modifying fast weights,
causal softmax attention, or a plain linear-attention baseline), normalizes
again, and feeds the multi-frequency MLP chain.  Fast state is sequence-local:
every sequence restarts from the meta-learned snapshots, which live in the
model's parameter dict and receive gradients through the full in-context
recurrence (no truncation).

Chain weights update through the buffered-frequency rule: gradients (or a
substituted optimizer's step direction) accumulate per level and apply only
when the token counter crosses the level's boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import cms as cms_mod
from . import optim
from . import tensor as T
from .cms import CmsChain, cms_accumulate, cms_tick, make_chain
from .memory import LINEAR
from .srt import SLOTS, SrtConfig, init_srt, srt_forward_nodes
from .tensor import Node, Tape, Tensor

CORES = ("srt", "attention", "linear_attention")


class DivergenceError(RuntimeError):
    def __init__(self, step: int, log: list):
        super().__init__(f"training diverged (non-finite loss) at step {step}")
        self.step = step
        self.log = log


@dataclass(frozen=True)
class HopeConfig:
    vocab: int
    dim: int = 32
    blocks: int = 1
    num_classes: int = 0  # 0 -> next-token model; >0 -> sequence classifier head
    core: str = "srt"
    objective: str = "l2"
    chunk: int = 8
    mem_hidden: int = 0
    retention: bool = True  # ablation hook: plain decay+gradient inner rule when off
    frozen_slots: tuple = ()  # ablation hook: slots without in-context updates ("q" accepted, no-op)
    conv: bool = False
    use_cms: bool = True
    cms_chunks: tuple = (1, 4)  # boundaries in training steps of the token counter
    cms_variant: str = "sequential"
    cms_hidden: int = 0
    cms_lr: float = 0.05
    cms_optimizer: str = "sgd"
    eta_bias: float = -2.0
    alpha_bias: float = 3.0
    fixed_eta: Optional[float] = None
    fixed_alpha: Optional[float] = None
    fast_weight_penalty: float = 0.01  # keeps meta-learning away from explosive fast-weight regimes
    tie_readout: bool = False  # next-token head reads logits through the embedding table

    def __post_init__(self):
        if self.core not in CORES:
            raise ValueError(f"unknown core {self.core!r}; expected one of {CORES}")

    def srt_config(self) -> SrtConfig:
        update = tuple(s for s in SLOTS if s not in self.frozen_slots)
        return SrtConfig(
            dim=self.dim,
            hidden=self.mem_hidden,
            objective=self.objective,
            chunk=self.chunk,
            retention=self.retention,
            update_slots=update,
            conv=self.conv,
            eta_bias=self.eta_bias,
            alpha_bias=self.alpha_bias,
            fixed_eta=self.fixed_eta,
            fixed_alpha=self.fixed_alpha,
        )


class HopeModel:
    """Parameter dict + per-block chain state; all methods deterministic."""

    def __init__(self, config: HopeConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        d = config.dim
        self.params: dict[str, np.ndarray] = {}
        self.params["emb"] = rng.normal(size=(config.vocab, d)) / np.sqrt(d)
        if config.tie_readout and config.num_classes:
            raise ValueError("tie_readout applies to the next-token head only")
        if not config.tie_readout:
            out_rows = config.num_classes if config.num_classes else config.vocab
            self.params["readout"] = np.zeros((out_rows, d))
        self.srt_cfg = config.srt_config()
        self.chains: list[Optional[CmsChain]] = []
        self.cms_opt_states: list[list] = []
        for b in range(config.blocks):
            # unit-norm columns at init keep the fast-weight recurrence in its
            # stable regime; the gains are learnable
            self.params[f"b{b}.norm1"] = np.ones(d) / np.sqrt(d)
            self.params[f"b{b}.norm2"] = np.ones(d) / np.sqrt(d)
            if config.core == "srt":
                state = init_srt(self.srt_cfg, seed=int(rng.integers(0, 2**31)))
                for slot in SLOTS:
                    for j, w in enumerate(state.inits[slot]):
                        self.params[f"b{b}.srt.{slot}.{j}"] = w.copy()
                self.params[f"b{b}.wq"] = state.wq.copy()
                if config.conv:
                    self.params[f"b{b}.conv"] = state.conv_kernel.copy()
            else:
                for name in ("wq", "wk", "wv"):
                    self.params[f"b{b}.{name}"] = rng.normal(size=(d, d)) / np.sqrt(d)
            if config.use_cms:
                # with a substituted level optimizer the buffered quantity is the
                # optimizer's own step direction, so the level rate stays 1
                level_eta = config.cms_lr if config.cms_optimizer == "sgd" else 1.0
                chain = make_chain(
                    d,
                    config.cms_hidden or d,
                    list(config.cms_chunks),
                    variant=config.cms_variant,
                    eta=level_eta,
                    seed=int(rng.integers(0, 2**31)),
                )
                self.chains.append(chain)
                if config.cms_optimizer != "sgd":
                    states = []
                    for lv in chain.levels:
                        states.append(
                            (
                                optim.init_state(config.cms_optimizer, lv.w1.shape),
                                optim.init_state(config.cms_optimizer, lv.w2.shape),
                            )
                        )
                    self.cms_opt_states.append(states)
                else:
                    self.cms_opt_states.append([])
            else:
                self.chains.append(None)
                self.cms_opt_states.append([])
        self.token_count = 0

    # ------------------------------------------------------------------
    # graph construction

    def _register(self, tape: Tape) -> dict[str, Node]:
        nodes = {name: tape.param(name, value) for name, value in self.params.items()}
        for b, chain in enumerate(self.chains):
            if chain is None:
                continue
            for i, lv in enumerate(chain.levels):
                nodes[f"b{b}.cms.level{i}.w1"] = tape.param(f"b{b}.cms.level{i}.w1", lv.w1)
                nodes[f"b{b}.cms.level{i}.w2"] = tape.param(f"b{b}.cms.level{i}.w2", lv.w2)
            if chain.variant == "independent":
                nodes[f"b{b}.cms.agg"] = tape.param(f"b{b}.cms.agg", chain.agg_weights)
        return nodes

    def _rms(self, x: Node, gain: Node) -> Node:
        m = T.mean_axis0(T.mul(x, x))
        r = T.reciprocal(T.sqrt(T.add(m, 1e-6)))
        return T.scale_rows(T.scale_columns(x, r), gain)

    def _block(self, tape: Tape, nodes: dict, b: int, x: Node, collect_penalty=None) -> Node:
        cfg = self.config
        xn = self._rms(x, nodes[f"b{b}.norm1"])
        if cfg.core == "srt":
            weights = {
                slot: (
                    (nodes[f"b{b}.srt.{slot}.0"],)
                    if self.srt_cfg.kinds[slot] == LINEAR
                    else (nodes[f"b{b}.srt.{slot}.0"], nodes[f"b{b}.srt.{slot}.1"])
                )
                for slot in SLOTS
            }
            kernel = nodes.get(f"b{b}.conv")
            out, final = srt_forward_nodes(tape, self.srt_cfg, weights, nodes[f"b{b}.wq"], xn, conv_kernel=kernel)
            if collect_penalty is not None:
                for ws in final.values():
                    for w in ws:
                        collect_penalty.append(T.mean_all(T.mul(w, w)))
        elif cfg.core == "attention":
            q = T.l2_normalize_columns(T.matmul(nodes[f"b{b}.wq"], xn))
            k = T.l2_normalize_columns(T.matmul(nodes[f"b{b}.wk"], xn))
            v = T.matmul(nodes[f"b{b}.wv"], xn)
            scores = T.mul(T.matmul(T.transpose(k), q), math.sqrt(cfg.dim))
            out = T.matmul(v, T.causal_softmax_columns(scores))
        else:  # linear attention baseline: prefix-sum fast weight, post-update read
            q = T.l2_normalize_columns(T.matmul(nodes[f"b{b}.wq"], xn))
            k = T.l2_normalize_columns(T.matmul(nodes[f"b{b}.wk"], xn))
            v = T.matmul(nodes[f"b{b}.wv"], xn)
            mem = tape.constant(np.zeros((cfg.dim, cfg.dim)))
            cols = []
            for t in range(xn.value.shape[1]):
                mem = T.add(mem, T.outer(T.column(v, t), T.column(k, t)))
                cols.append(T.mul(1.0 / (t + 1), T.matmul(mem, T.column(q, t))))
            out = T.stack_columns(cols)
        if not cfg.use_cms:
            return out
        chain = self.chains[b]
        on = self._rms(out, nodes[f"b{b}.norm2"])
        level_nodes = [
            (nodes[f"b{b}.cms.level{i}.w1"], nodes[f"b{b}.cms.level{i}.w2"]) for i in range(len(chain.levels))
        ]
        return cms_mod.forward_with_nodes(chain, level_nodes, on, agg_node=nodes.get(f"b{b}.cms.agg"))

    def _sequence_logits(self, tape: Tape, nodes: dict, tokens: Sequence[int], collect_penalty=None) -> Node:
        x = T.embedding(nodes["emb"], list(tokens))
        for b in range(self.config.blocks):
            x = self._block(tape, nodes, b, x, collect_penalty=collect_penalty)
        return x  # hidden states; readout applied by the loss/predict heads

    def build_loss(self, tape: Tape, batch: Sequence[dict], with_penalty: bool = False) -> Node:
        """Mean loss over a batch of samples ({"tokens", "label"} dicts).

        `with_penalty` adds the fast-weight norm regularizer (training only;
        the plain loss surface stays the task loss).
        """
        nodes = self._register(tape)
        losses = []
        penalties = [] if (with_penalty and self.config.core == "srt" and self.config.fast_weight_penalty > 0) else None
        for sample in batch:
            tokens = sample["tokens"]
            h = self._sequence_logits(tape, nodes, tokens, collect_penalty=penalties)
            if self.config.num_classes:
                prefix = sample.get("prefix_labels")
                if prefix is not None:
                    logits = T.matmul(nodes["readout"], h)
                    losses.append(T.cross_entropy_columns(logits, [int(p) for p in prefix]))
                else:
                    logits = T.matmul(nodes["readout"], T.column(h, len(tokens) - 1))
                    losses.append(T.cross_entropy(logits, int(sample["label"])))
            else:
                if len(tokens) < 2:
                    raise ValueError("next-token loss needs sequences of length >= 2")
                head = nodes["emb"] if self.config.tie_readout else nodes["readout"]
                logits = T.matmul(head, T.slice_columns(h, 0, len(tokens) - 1))
                losses.append(T.cross_entropy_columns(logits, list(tokens[1:])))
        total = losses[0]
        for extra in losses[1:]:
            total = T.add(total, extra)
        total = T.mul(1.0 / len(losses), total)
        if penalties:
            reg = penalties[0]
            for extra in penalties[1:]:
                reg = T.add(reg, extra)
            total = T.add(total, T.mul(self.config.fast_weight_penalty / len(penalties), reg))
        return total

    # ------------------------------------------------------------------
    # value-level heads

    def hidden_states(self, tokens: Sequence[int]) -> np.ndarray:
        tape = Tape()
        nodes = self._register(tape)
        return self._sequence_logits(tape, nodes, tokens).value

    def predict(self, tokens: Sequence[int]) -> int:
        h = self.hidden_states(tokens)
        head = self.params["emb"] if self.config.tie_readout else self.params["readout"]
        logits = head @ h[:, -1]
        return int(np.argmax(logits))

    def loss(self, tokens: Sequence[int], label=None) -> float:
        tape = Tape()
        sample = {"tokens": tokens, "label": label}
        return float(self.build_loss(tape, [sample]).value)

    # ------------------------------------------------------------------
    # parameter access (checkpointing, finite differences)

    def named_parameters(self) -> dict[str, np.ndarray]:
        out = dict(self.params)
        for b, chain in enumerate(self.chains):
            if chain is None:
                continue
            for key, tensor in cms_mod.state_dict(chain).items():
                out[f"b{b}.cms.{key}"] = tensor.data
        return out

    def set_parameter(self, name: str, value: np.ndarray) -> None:
        value = np.asarray(value, dtype=float)
        if name in self.params:
            if value.shape != self.params[name].shape:
                raise T.ShapeError(f"parameter {name!r} has shape {self.params[name].shape}, got {value.shape}")
            self.params[name] = value.copy()
            return
        for b, chain in enumerate(self.chains):
            prefix = f"b{b}.cms."
            if chain is not None and name.startswith(prefix):
                key = name[len(prefix) :]
                if key == "agg":
                    chain.agg_weights = value.copy()
                    return
                level, attr = key.split(".")
                idx = int(level.removeprefix("level"))
                setattr(chain.levels[idx], attr, value.copy())
                return
        raise KeyError(f"unknown parameter {name!r}")


def hope_block_forward(model: HopeModel, x: Tensor, block: int = 0) -> Tensor:
    """One block applied to explicit (d,L) token representations; pure read."""
    tape = Tape()
    nodes = model._register(tape)
    return Tensor(model._block(tape, nodes, block, tape.constant(x.data)).value)


def model_loss(model: HopeModel, tokens: Sequence[int]) -> float:
    """Mean next-token cross-entropy over positions 1..L-1."""
    if model.config.num_classes:
        raise ValueError("model_loss is the next-token head; this model is a classifier")
    if any(t < 0 or t >= model.config.vocab for t in tokens):
        raise ValueError("token id out of range")
    return model.loss(tokens)


def _global_grad_norm(grads: dict) -> float:
    total = 0.0
    for g in grads.values():
        total += float((g.data * g.data).sum())
    return math.sqrt(total)


def train(
    model: HopeModel,
    samples: Sequence[dict],
    opt_kind: str = "adam",
    steps: int = 200,
    seed: int = 0,
    batch_size: int = 4,
    eval_every: int = 0,
    eval_fn=None,
    opt_hp: Optional[dict] = None,
    clip_norm: float = 1.0,
) -> list[dict]:
    """Deterministic training loop; returns one log record per step.

    Non-chain parameters follow the outer optimizer.  Chain level weights
    follow the buffered-frequency rule: their directions accumulate and apply
    only at token-counter boundaries.
    """
    opt_hp = dict(opt_hp or {})
    if opt_kind == "adam" and not opt_hp:
        opt_hp = dict(eta=0.01, beta1=0.9, beta2=0.999, eps=1e-8, ema=True, bias_correction=True, weight_decay=0.01)
    rng = np.random.default_rng(seed)
    opt_states: dict[str, optim.OptimizerState] = {}
    log: list[dict] = []
    clip = clip_norm if clip_norm and clip_norm > 0 else None

    for step_idx in range(1, steps + 1):
        idx = rng.integers(0, len(samples), size=batch_size)
        batch = [samples[int(i)] for i in idx]
        try:
            tape = Tape()
            loss_node = model.build_loss(tape, batch, with_penalty=True)
            loss = float(loss_node.value)
            if not math.isfinite(loss):
                raise T.NonFiniteError("non-finite loss")
            grads = tape.backward(loss_node)
        except T.NonFiniteError as exc:
            log.append({"step": step_idx, "event": "diverged", "detail": str(exc)})
            raise DivergenceError(step_idx, log) from exc

        gnorm = _global_grad_norm(grads)
        if clip is not None and gnorm > clip:
            scale = clip / gnorm
            grads = {k: Tensor(v.data * scale) for k, v in grads.items()}

        for name in sorted(model.params):
            g = grads[name]
            if name not in opt_states:
                opt_states[name] = optim.init_state(opt_kind, model.params[name].shape, **opt_hp)
            new_p, opt_states[name] = optim.step(opt_kind, opt_states[name], Tensor(model.params[name]), g)
            model.params[name] = new_p.data

        tokens_used = sum(len(s["tokens"]) for s in batch)
        for b, chain in enumerate(model.chains):
            if chain is None:
                continue
            pairs = []
            for i, lv in enumerate(chain.levels):
                g1 = grads[f"b{b}.cms.level{i}.w1"].data
                g2 = grads[f"b{b}.cms.level{i}.w2"].data
                if model.config.cms_optimizer == "sgd":
                    pairs.append((g1, g2))
                else:
                    st1, st2 = model.cms_opt_states[b][i]
                    p1, st1 = optim.step(model.config.cms_optimizer, st1, Tensor(lv.w1), Tensor(g1))
                    p2, st2 = optim.step(model.config.cms_optimizer, st2, Tensor(lv.w2), Tensor(g2))
                    model.cms_opt_states[b][i] = (st1, st2)
                    pairs.append((lv.w1 - p1.data, lv.w2 - p2.data))
            cms_accumulate(chain, pairs)
            if chain.variant == "independent":
                gagg = grads[f"b{b}.cms.agg"]
                if "cms_agg" + str(b) not in opt_states:
                    opt_states["cms_agg" + str(b)] = optim.init_state(opt_kind, chain.agg_weights.shape, **opt_hp)
                new_agg, opt_states["cms_agg" + str(b)] = optim.step(
                    opt_kind, opt_states["cms_agg" + str(b)], Tensor(chain.agg_weights), gagg
                )
                chain.agg_weights = new_agg.data

        for tick in range(model.token_count + 1, model.token_count + tokens_used + 1):
            for chain in model.chains:
                if chain is not None:
                    cms_tick(chain, tick)
        model.token_count += tokens_used

        record = {"step": step_idx, "loss": loss, "grad_norm": gnorm}
        if eval_every and eval_fn and step_idx % eval_every == 0:
            record.update(eval_fn(model))
        log.append(record)
    return log
