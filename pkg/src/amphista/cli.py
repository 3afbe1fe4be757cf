"""Command-line interface.

Subcommands: train, generate, bench, ablate, node-sweep, head-acc, selfcheck.
All outputs except the ``*_timing.csv`` sidecars are byte-determined by
(config, seed); the process exits nonzero when a hard invariant (greedy
losslessness, determinism) is violated.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path



from .bench import (
    AblationConfig,
    LosslessnessError,
    RunConfig,
    ablation_direction,
    build_drafter,
    build_model,
    node_sweep,
    run_ablation_suite,
    run_prompt_set,
    selfcheck,
    timed_tokens_per_sec,
    train_system,
    write_ablation_csv,
    write_ablation_timing_csv,
    write_event_log,
    write_head_accuracy_csv,
    write_metrics_csv,
    write_node_sweep_csv,
    write_node_sweep_timing_csv,
    write_timing_csv,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .configfile import coerce_dataclass, dump_config, load_config
from .corpus import CorpusSpec, detokenize, make_corpus, make_prompts, tokenize
from .drafter import DrafterConfig, variant_config
from .model import ModelConfig
from .training import TrainConfig


def _load_raw(path: str | None) -> dict[str, str]:
    return load_config(path) if path else {}


def _build_configs(args):
    raw = _load_raw(args.config)
    model_cfg = coerce_dataclass(ModelConfig, raw)
    drafter_cfg = coerce_dataclass(DrafterConfig, raw)
    train_cfg = coerce_dataclass(TrainConfig, raw, seed=args.seed)
    corpus_spec = coerce_dataclass(CorpusSpec, raw, prefix="corpus_")
    run_cfg = coerce_dataclass(
        RunConfig,
        raw,
        seed=args.seed,
        mode=args.mode,
        temperature=args.temperature,
        topology=args.topology,
        max_new_tokens=getattr(args, "max_new_tokens", None),
    )
    return raw, model_cfg, drafter_cfg, train_cfg, corpus_spec, run_cfg


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _variant_for_mode(mode: str, base: DrafterConfig) -> DrafterConfig:
    if mode in ("ar", "oracle"):
        return base
    if mode == "vanilla_chain":
        return variant_config("amphista", base)
    return variant_config(mode, base)


def _build_system(args, model_cfg, drafter_cfg, run_cfg):
    model = build_model(model_cfg, run_cfg.seed)
    model.freeze()
    drafter = build_drafter(_variant_for_mode(run_cfg.mode, drafter_cfg), model, run_cfg.seed)
    if args.ckpt:
        state = load_checkpoint(args.ckpt)
        model.load_state_dict(state, prefix="target.")
        drafter.load_state_dict(state, prefix="drafter.")
    return model, drafter


def cmd_train(args) -> int:
    raw, model_cfg, drafter_cfg, train_cfg, corpus_spec, run_cfg = _build_configs(args)
    out = _outdir(args)
    target_epochs = int(raw.get("target_epochs", "8"))
    seed = train_cfg.seed

    corpus = make_corpus(corpus_spec, seed)
    model, drafter, report, target_report = train_system(
        model_cfg,
        _variant_for_mode(run_cfg.mode, drafter_cfg),
        train_cfg,
        corpus,
        seed,
        target_epochs=target_epochs,
    )

    state = model.state_dict(prefix="target.")
    state.update(drafter.state_dict(prefix="drafter."))
    save_checkpoint(out / "checkpoint.bin", state)
    report.to_csv(out / "train_report.csv")
    dump_config(
        [
            ("", model_cfg),
            ("", _variant_for_mode(run_cfg.mode, drafter_cfg)),
            ("", train_cfg),
            ("corpus_", corpus_spec),
        ],
        out / "config_used.cfg",
    )

    final = report.final
    print(f"target pretraining loss: {target_report.losses[-1]:.4f}")
    print(
        f"drafter epochs={train_cfg.epochs} final total loss {final.total_loss:.4f} "
        f"(alignment {final.alignment_loss:.4f}, lm {final.lm_loss:.4f})"
    )
    print("head top-1 accuracy:", " ".join(f"{a:.3f}" for a in final.head_top1))
    if not report.head_accuracy_monotone:
        print("note: head accuracy is not monotone in head index on this run")
    print(f"wrote {out / 'checkpoint.bin'} and {out / 'train_report.csv'}")
    return 0


def cmd_generate(args) -> int:
    _, model_cfg, drafter_cfg, _, corpus_spec, run_cfg = _build_configs(args)
    out = _outdir(args)
    model, drafter = _build_system(args, model_cfg, drafter_cfg, run_cfg)

    if args.prompt is not None:
        prompt = tokenize(args.prompt)
    else:
        prompt = make_prompts(corpus_spec, run_cfg.seed, 1, run_cfg.prompt_len)[0]
    if not prompt:
        print("error: empty prompt", file=sys.stderr)
        return 1

    try:
        report, results = run_prompt_set(model, drafter, run_cfg, [prompt])
    except LosslessnessError as err:
        print(f"LOSSLESSNESS VIOLATION: {err}", file=sys.stderr)
        return 1
    write_event_log(out / "events.log", run_cfg, results)
    write_metrics_csv(out / "generate.csv", [report])
    text = detokenize(results[0].tokens).decode("utf-8", errors="backslashreplace")
    print(f"prompt tokens: {len(prompt)}  new tokens: {len(results[0].tokens)}")
    print(f"tokens/step: {report.tokens_per_step:.3f}  (mode={run_cfg.mode})")
    print("output:", text)
    return 0


def cmd_bench(args) -> int:
    _, model_cfg, drafter_cfg, _, corpus_spec, run_cfg = _build_configs(args)
    out = _outdir(args)
    model, drafter = _build_system(args, model_cfg, drafter_cfg, run_cfg)
    prompts = make_prompts(corpus_spec, run_cfg.seed, run_cfg.n_prompts, run_cfg.prompt_len)

    ar_run = replace(run_cfg, mode="ar")
    ar_report, ar_results = run_prompt_set(model, None, ar_run, prompts)
    try:
        report, results = run_prompt_set(model, drafter, run_cfg, prompts)
    except LosslessnessError as err:
        print(f"LOSSLESSNESS VIOLATION: {err}", file=sys.stderr)
        return 1

    ar_rate = timed_tokens_per_sec(model, None, ar_run, prompts, run_cfg.timing_reps)
    rate = timed_tokens_per_sec(model, drafter, run_cfg, prompts, run_cfg.timing_reps)
    ar_report.tokens_per_sec = ar_report.ar_tokens_per_sec = ar_rate
    ar_report.speedup_vs_ar = 1.0
    report.tokens_per_sec, report.ar_tokens_per_sec = rate, ar_rate
    report.speedup_vs_ar = rate / ar_rate

    write_metrics_csv(out / "bench.csv", [ar_report, report])
    write_timing_csv(out / "bench_timing.csv", [ar_report, report])
    write_event_log(out / "events_ar.log", ar_run, ar_results)
    write_event_log(out / f"events_{run_cfg.mode}.log", run_cfg, results)
    print(
        f"ar: 1.000 tokens/step | {run_cfg.mode}: {report.tokens_per_step:.3f} tokens/step, "
        f"speed-up x{report.speedup_vs_ar:.2f} (lossless={report.lossless})"
    )
    print(f"wrote {out / 'bench.csv'} (+ timing sidecar, event logs)")
    return 0


def cmd_ablate(args) -> int:
    raw, model_cfg, drafter_cfg, train_cfg, corpus_spec, run_cfg = _build_configs(args)
    out = _outdir(args)
    ablation = coerce_dataclass(AblationConfig, raw, prefix="ablation_")
    if args.seed is not None:
        ablation = replace(ablation, seeds=tuple(args.seed + i for i in range(len(ablation.seeds))))
    rows = run_ablation_suite(model_cfg, drafter_cfg, train_cfg, corpus_spec, ablation)
    write_ablation_csv(out / "ablation.csv", rows)
    write_ablation_timing_csv(out / "ablation_timing.csv", rows)
    ok, per_seed = ablation_direction(rows)
    print(f"ablation over seeds {ablation.seeds}: ranked by mean tokens/step")
    for rank, row in enumerate(rows, 1):
        print(f"  {rank}. {row.variant:22s} {row.mean_tokens_per_step:.3f}")
    verdict = "PASS" if ok else "WARN"
    print(f"direction check (full >= w/o auto-embedding, full >= medusa): {verdict} {per_seed}")
    print(f"wrote {out / 'ablation.csv'}")
    return 0


def cmd_node_sweep(args) -> int:
    raw, model_cfg, drafter_cfg, train_cfg, corpus_spec, run_cfg = _build_configs(args)
    out = _outdir(args)
    seed = run_cfg.seed
    budgets = [int(b) for b in args.budgets.split(",")]

    if args.ckpt:
        model = build_model(model_cfg, seed)
        state = load_checkpoint(args.ckpt)
        model.load_state_dict(state, prefix="target.")
        model.freeze()
        drafter = build_drafter(drafter_cfg, model, seed)
        drafter.load_state_dict(state, prefix="drafter.")
    else:
        corpus = make_corpus(corpus_spec, seed)
        target_epochs = int(raw.get("target_epochs", "8"))
        model, drafter, _, _ = train_system(
            model_cfg, drafter_cfg, train_cfg, corpus, seed, target_epochs=target_epochs
        )

    prompts = make_prompts(corpus_spec, seed, run_cfg.n_prompts, run_cfg.prompt_len)
    rows = node_sweep(
        model,
        drafter,
        budgets,
        prompts,
        max_new_tokens=run_cfg.max_new_tokens,
        seed=seed,
    )
    write_node_sweep_csv(out / "node_sweep.csv", rows)
    write_node_sweep_timing_csv(out / "node_sweep_timing.csv", rows)
    for r in rows:
        print(f"  nodes={r.nodes:3d}  tokens/step={r.tokens_per_step:.3f}")
    print(f"wrote {out / 'node_sweep.csv'}")
    return 0


def cmd_head_acc(args) -> int:
    _, model_cfg, drafter_cfg, _, corpus_spec, run_cfg = _build_configs(args)
    out = _outdir(args)
    model, drafter = _build_system(args, model_cfg, drafter_cfg, run_cfg)
    eval_corpus = make_corpus(corpus_spec, run_cfg.seed + 7919, name="eval")
    tables = write_head_accuracy_csv(out / "head_accuracy.csv", model, drafter, eval_corpus)
    for k in range(len(tables[0])):
        print(f"  head {k + 1}: top-1 {tables[0][k]:.3f}  top-5 {tables[1][k]:.3f}")
    print(f"wrote {out / 'head_accuracy.csv'}")
    return 0


def cmd_selfcheck(args) -> int:
    checks = selfcheck(seed=args.seed if args.seed is not None else 0)
    failed = False
    for name, ok, detail in checks:
        print(f"  [{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        failed = failed or not ok
    return 1 if failed else 0


def _add_shared_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--seed", type=int, default=None, help="master seed (overrides config)")
    p.add_argument("--out", default="runs/out", help="output directory")
    p.add_argument("--mode", default=None, help="ar | amphista | variant name | vanilla_chain | oracle")
    p.add_argument("--temperature", type=float, default=None)
    p.add_argument("--topology", default=None, help="preset name or topology file")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="amphista", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="pretrain the target, then train the drafter")
    _add_shared_flags(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("generate", help="decode one prompt and report metrics")
    _add_shared_flags(p)
    p.add_argument("--ckpt", help="checkpoint from `train`")
    p.add_argument("--prompt", help="prompt text (default: synthetic)")
    p.add_argument("--max-new-tokens", type=int, dest="max_new_tokens")
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("bench", help="AR vs speculative decoding on a prompt set")
    _add_shared_flags(p)
    p.add_argument("--ckpt", help="checkpoint from `train`")
    p.add_argument("--max-new-tokens", type=int, dest="max_new_tokens")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("ablate", help="train and compare the ablation variants")
    _add_shared_flags(p)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("node-sweep", help="tokens/step across draft-tree sizes")
    _add_shared_flags(p)
    p.add_argument("--ckpt", help="checkpoint from `train`")
    p.add_argument("--budgets", default="22,35,45,64", help="comma-separated node budgets")
    p.set_defaults(fn=cmd_node_sweep)

    p = sub.add_parser("head-acc", help="per-head top-1/top-5 accuracy table")
    _add_shared_flags(p)
    p.add_argument("--ckpt", help="checkpoint from `train`")
    p.set_defaults(fn=cmd_head_acc)

    p = sub.add_parser("selfcheck", help="run the hard-invariant checks")
    _add_shared_flags(p)
    p.set_defaults(fn=cmd_selfcheck)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
