"""Command-line entry points: verify, train, eval, bench-optim, emit-plots."""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import bench, checkpoint, verify
from .config import ConfigError, load_config, write_json_atomic
from .hope import DivergenceError, HopeConfig, HopeModel, train
from .runlog import emit_plot_series, read_runlog, write_runlog
from .seeding import derive_seed
from .tasks import LANGUAGE_KINDS, RECALL_KINDS, TaskSpec, evaluate, generate, vocabulary


def build_task_spec(cfg: dict, seed_name: str = "data") -> TaskSpec:
    task = cfg["task"]
    return TaskSpec(
        task["kind"],
        seed=derive_seed(cfg["seed"], seed_name, task["seed"]),
        bin0=tuple(task["bin0"]),
        bin1=tuple(task["bin1"]),
        params=dict(task["params"]),
    )


def build_model(cfg: dict) -> HopeModel:
    task_kind = cfg["task"]["kind"]
    m = cfg["model"]
    vocab = m["vocab"] or len(vocabulary(task_kind))
    if task_kind in LANGUAGE_KINDS:
        num_classes = m["num_classes"] or 2
    elif task_kind in RECALL_KINDS:
        num_classes = m["num_classes"] or vocab
    else:
        num_classes = m["num_classes"]
    hope_cfg = HopeConfig(
        vocab=vocab,
        dim=m["dim"],
        blocks=m["blocks"],
        num_classes=num_classes,
        core=m["core"],
        objective=m["objective"],
        chunk=m["chunk"],
        mem_hidden=m["mem_hidden"],
        retention=m["retention"],
        frozen_slots=tuple(m["frozen_slots"]),
        conv=m["conv"],
        use_cms=m["use_cms"],
        cms_chunks=tuple(m["cms_chunks"]),
        cms_variant=m["cms_variant"],
        cms_hidden=m["cms_hidden"],
        cms_lr=m["cms_lr"],
        cms_optimizer=m["cms_optimizer"],
        eta_bias=m["eta_bias"],
        alpha_bias=m["alpha_bias"],
        fixed_eta=m["fixed_eta"],
        fixed_alpha=m["fixed_alpha"],
        fast_weight_penalty=m["fast_weight_penalty"],
        tie_readout=m["tie_readout"],
    )
    return HopeModel(hope_cfg, seed=derive_seed(cfg["seed"], "init"))


def _eval_metrics(model: HopeModel, cfg: dict, eval_data) -> dict:
    if model.config.num_classes:
        metrics = evaluate(model, eval_data)
        return {k: v for k, v in metrics.items() if not (isinstance(v, float) and np.isnan(v))}
    losses = [model.loss(s["tokens"]) for s in eval_data[:16]]
    return {"loss_eval": float(np.mean(losses))}


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out_dir = cfg["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    write_json_atomic(os.path.join(out_dir, "config.json"), cfg)

    train_data = generate(build_task_spec(cfg, "data"), cfg["train"]["train_samples"])
    eval_spec = TaskSpec(
        cfg["task"]["kind"],
        seed=cfg["train"]["eval_seed"],
        bin0=tuple(cfg["task"]["bin0"]),
        bin1=tuple(cfg["task"]["bin1"]),
        params={**cfg["task"]["params"], "bin1_fraction": cfg["train"]["eval_bin1_fraction"]},
    )
    eval_data = generate(eval_spec, cfg["train"]["eval_samples"])
    model = build_model(cfg)

    records = [{"step": 0, **_eval_metrics(model, cfg, eval_data)}]
    try:
        log = train(
            model,
            train_data,
            opt_kind=cfg["train"]["optimizer"],
            steps=cfg["train"]["steps"],
            seed=derive_seed(cfg["seed"], "shuffle"),
            batch_size=cfg["train"]["batch_size"],
            eval_every=cfg["train"]["eval_every"],
            eval_fn=lambda m: _eval_metrics(m, cfg, eval_data),
            opt_hp=cfg["train"]["opt_hp"],
            clip_norm=cfg["train"]["clip_norm"],
        )
        records.extend({"step": r["step"], **{k: v for k, v in r.items() if k != "step"}} for r in log)
        failed = False
    except DivergenceError as exc:
        records.extend(exc.log)
        failed = True

    write_runlog(os.path.join(out_dir, "runlog.jsonl"), records)
    checkpoint.save(os.path.join(out_dir, "checkpoint.nlck"), model.named_parameters())
    print(f"wrote {out_dir}/runlog.jsonl and {out_dir}/checkpoint.nlck ({len(records)} records)")
    return 1 if failed else 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    model = build_model(cfg)
    tensors = checkpoint.load(args.checkpoint)
    for name, value in tensors.items():
        model.set_parameter(name, value)
    eval_spec = TaskSpec(
        cfg["task"]["kind"],
        seed=cfg["train"]["eval_seed"],
        bin0=tuple(cfg["task"]["bin0"]),
        bin1=tuple(cfg["task"]["bin1"]),
        params={**cfg["task"]["params"], "bin1_fraction": cfg["train"]["eval_bin1_fraction"]},
    )
    eval_data = generate(eval_spec, cfg["train"]["eval_samples"])
    print(json.dumps(_eval_metrics(model, cfg, eval_data), indent=2, sort_keys=True))
    return 0


def cmd_bench_optim(args) -> int:
    cfg = load_config(args.config)
    out_dir = cfg["out_dir"]
    kind = cfg["task"]["kind"]
    bench.run_contribution_report(out_dir)
    if kind == "toy_psi":
        results = bench.run_psi_benchmark(out_dir)
        for name, r in results.items():
            print(f"{name}: steps_to_threshold={r['steps_to_threshold']} final={r['final_value']:.3e}")
    elif kind == "orthogonal_continual":
        report = bench.run_orthogonal_benchmark(out_dir, seeds=10)
        for name, vals in report["per_seed"].items():
            print(f"{name}: mean forgetting {np.mean(vals):.3e}")
        print(f"wins vs momentum: {report['wins_vs_momentum']}")
    else:
        print(f"bench-optim expects task kind toy_psi or orthogonal_continual, got {kind!r}", file=sys.stderr)
        return 2
    print(f"wrote CSV series under {out_dir}")
    return 0


def cmd_emit_plots(args) -> int:
    records = read_runlog(args.runlog)
    written = emit_plot_series(records, args.out)
    for path in written:
        print(path)
    return 0


def cmd_verify(args) -> int:
    faults = set(args.inject_fault or [])
    results = verify.run_checks(pattern=args.filter, faults=faults, out_dir=args.out)
    if not results:
        print(f"no checks match filter {args.filter!r}", file=sys.stderr)
        return 2
    width = max(len(r.name) for r in results)
    failed = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status}  {r.name:<{width}}  measured={r.measured:.3e}  {r.detail}")
        failed += 0 if r.passed else 1
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 0 if failed == 0 else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="nllab", description="desk-scale nested-optimization laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="run registered oracle/invariant checks")
    p.add_argument("--filter", help="substring filter on check names")
    p.add_argument("--out", help="directory for emitted CSV artifacts")
    p.add_argument(
        "--inject-fault",
        action="append",
        choices=["hebbian-sign"],
        help="deliberately corrupt a check (negative control for the harness)",
    )
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("train", help="train a model from a run config")
    p.add_argument("config")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("config")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench-optim", help="optimizer benchmarks (toy objective / continual stream)")
    p.add_argument("config")
    p.set_defaults(fn=cmd_bench_optim)

    p = sub.add_parser("emit-plots", help="turn a runlog into per-metric CSV series")
    p.add_argument("runlog")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_emit_plots)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, FileNotFoundError, checkpoint.CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
