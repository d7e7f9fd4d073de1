"""Command-line entry points for the full workflow: data synthesis,
alignment pretraining, the two training stages, evaluation, and the
ablation and strategy benches."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

import torch

from .checkpoint import (
    CheckpointState,
    load_checkpoint,
    load_into_module,
    module_arrays,
    save_checkpoint,
)
from .config import (
    RunConfig,
    config_to_dict,
    load_config,
    save_config,
)
from .corpus import generate_synthetic, load_dataset
from .encoder import EncoderStack, pretrain_alignment
from .errors import ConfigError, DataError, NumericalAbort
from .evalkit import write_eval_json
from .peft import attach_strategy, strategy_from_descriptor
from .recommender import RecModel
from .trainkit import (
    AblationContext,
    TrainConfig,
    live_eval,
    named_strategy,
    peft_bench,
    run_ablation_suite,
    train_joint,
    train_stage1,
    train_stage2,
)

logger = logging.getLogger(__name__)

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _resolved_config(args) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        config = dataclasses.replace(config, seed=args.seed)
    if getattr(args, "mode", None) is not None:
        config = dataclasses.replace(config, mode=args.mode)
    if getattr(args, "strategy", None) is not None:
        config = dataclasses.replace(config, strategy=args.strategy)
    # the run seed drives every stage
    config.train = dataclasses.replace(config.train, seed=config.seed)
    return config


def _out_dir(args, command: str, seed: int) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        out = Path("runs") / f"{command}-{stamp}-seed{seed}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require_data(args):
    if not args.data:
        raise ConfigError("--data is required (run `ptmrec synth` first)")
    return load_dataset(args.data)


def _load_stack(config: RunConfig, path: str) -> EncoderStack:
    state = load_checkpoint(path)
    if state.stage != "pretrain":
        raise ConfigError(f"{path} holds a {state.stage!r} checkpoint, expected the encoder stack")
    stack = EncoderStack(config.encoder, seed=state.seed)
    load_into_module(state, stack, "stack")
    return stack.freeze()


def _load_stage1_model(config: RunConfig, corpus, path: str) -> RecModel:
    state = load_checkpoint(path)
    if state.stage != "stage1":
        raise ConfigError(f"{path} holds a {state.stage!r} checkpoint, expected stage 1")
    model = RecModel(corpus.num_users, corpus.num_items, d=config.train.embed_dim,
                     d_proj=config.encoder.d_proj, seed=config.seed)
    load_into_module(state, model, "rec")
    return model


def _metrics_line(metrics: dict) -> str:
    return "  ".join(f"{k}={v:.4f}" for k, v in sorted(metrics.items()))


def _format_table(rows: list[dict], columns: list[str]) -> str:
    cells = [[str(row.get(c, "")) for c in columns] for row in rows]
    widths = [max(len(c), *(len(r[i]) for r in cells)) for i, c in enumerate(columns)]
    def fmt(values):
        return "  ".join(v.ljust(w) for v, w in zip(values, widths))
    lines = [fmt(columns), fmt(["-" * w for w in widths])]
    lines += [fmt(r) for r in cells]
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    config = _resolved_config(args)
    out = _out_dir(args, "synth", config.seed)
    generate_synthetic(config.synth, config.seed, out, config.split_ratios)
    # report what actually landed on disk, not what was intended
    corpus, bundles = load_dataset(out)
    counts = {
        "train": sum(len(x) for x in corpus.train),
        "val": sum(len(x) for x in corpus.val),
        "test": sum(len(x) for x in corpus.test),
    }
    print(f"dataset written to {out}")
    print(f"users={corpus.num_users} items={corpus.num_items}")
    print(f"interactions train={counts['train']} val={counts['val']} test={counts['test']}")
    print(f"tokens rows={bundles.num_items} "
          f"patches shape=({bundles.num_items}, {bundles.patch_count}, {bundles.patch_dim})")
    return 0


def cmd_pretrain(args) -> int:
    config = _resolved_config(args)
    corpus, bundles = _require_data(args)
    out = _out_dir(args, "pretrain", config.seed)
    stack = EncoderStack(config.encoder, seed=config.seed)
    report = pretrain_alignment(
        stack, bundles,
        epochs=config.train.stage0_epochs,
        batch_size=config.train.stage0_batch_size,
        lr=config.train.lr,
        seed=config.seed,
    )
    state = CheckpointState(
        arrays=module_arrays(stack, "stack"),
        config={"encoder": dataclasses.asdict(config.encoder)},
        seed=config.seed,
        stage="pretrain",
    )
    path = save_checkpoint(state, out / "stack.ckpt")
    (out / "pretrain.json").write_text(json.dumps(report, indent=1))
    final = report["final_loss"]
    print(f"alignment pretraining: {report['epochs']} epochs, "
          f"final loss {final:.4f}" if final is not None else "alignment pretraining: 0 epochs")
    print(f"encoder stack written to {path}")
    return 0


def cmd_stage1(args) -> int:
    config = _resolved_config(args)
    corpus, bundles = _require_data(args)
    out = _out_dir(args, "stage1", config.seed)
    stack = _load_stack(config, args.stack)
    model, report = train_stage1(corpus, stack, bundles, config.train, out_dir=out)
    result = live_eval(stack, model, bundles, corpus, "val", config.train.eval_ks)
    write_eval_json(out / "eval-val.json", result, config.seed, report.checkpoint)
    print(f"stage 1: best epoch {report.best_epoch} after {len(report.epoch_losses)} epochs")
    print(f"val: {_metrics_line(result.metrics)}")
    print(f"checkpoint: {report.checkpoint}")
    return 0


def cmd_stage2(args) -> int:
    config = _resolved_config(args)
    corpus, bundles = _require_data(args)
    out = _out_dir(args, "stage2", config.seed)
    stack = _load_stack(config, args.stack)
    model = _load_stage1_model(config, corpus, args.stage1)
    strategy = named_strategy(config.strategy, config.encoder, config.train, config.seed)
    view = attach_strategy(stack, strategy, seed=config.seed)
    _, report = train_stage2(corpus, stack, bundles, model, view, config.train, out_dir=out)
    result = live_eval(view, model, bundles, corpus, "val", config.train.eval_ks)
    write_eval_json(out / "eval-val.json", result, config.seed, report.checkpoint)
    print(f"stage 2 ({config.strategy}): best epoch {report.best_epoch} "
          f"after {len(report.epoch_losses)} epochs")
    print(f"val: {_metrics_line(result.metrics)}")
    print(f"checkpoint: {report.checkpoint}")
    return 0


def cmd_eval(args) -> int:
    config = _resolved_config(args)
    corpus, bundles = _require_data(args)
    out = _out_dir(args, "eval", config.seed)
    state = load_checkpoint(args.checkpoint)
    if state.stage == "stage1":
        if not args.stack:
            raise ConfigError("evaluating a stage-1 checkpoint needs --stack")
        encoder = _load_stack(config, args.stack)
        model = _load_stage1_model(config, corpus, args.checkpoint)
    elif state.stage == "stage2":
        stack = EncoderStack(config.encoder, seed=state.seed).freeze()
        encoder = strategy_from_descriptor(stack, state.peft, seed=state.seed)
        load_into_module(state, encoder, "peft")
        model = RecModel(corpus.num_users, corpus.num_items, d=config.train.embed_dim,
                         d_proj=config.encoder.d_proj, seed=state.seed)
        load_into_module(state, model, "rec")
    else:
        raise ConfigError(f"cannot score a {state.stage!r} checkpoint")
    result = live_eval(encoder, model, bundles, corpus, args.split, config.train.eval_ks)
    path = out / f"eval-{args.split}.json"
    write_eval_json(path, result, state.seed, str(args.checkpoint))
    print(f"{args.split}: {_metrics_line(result.metrics)}")
    print(f"written to {path}")
    return 0


def cmd_ablate(args) -> int:
    config = _resolved_config(args)
    out = _out_dir(args, "ablate", config.seed)
    if args.data:
        corpus, bundles = load_dataset(args.data)
    else:
        corpus, bundles = generate_synthetic(config.synth, config.seed, out / "data",
                                             config.split_ratios)
    ctx = AblationContext(corpus, bundles, config.train,
                          encoder_config=config.encoder, out_dir=out)
    suite = run_ablation_suite(ctx, seeds=config.seeds)
    rows = []
    for mode, means in suite["mean_test_metrics"].items():
        rows.append({"mode": mode, **{k: f"{v:.4f}" for k, v in sorted(means.items())}})
    columns = ["mode"] + sorted(next(iter(suite["mean_test_metrics"].values())))
    print(f"test metrics, mean over seeds {suite['seeds']}")
    print(_format_table(rows, columns))
    total = len(suite["seeds"])
    for name, count in suite["comparisons"].items():
        print(f"{name}: {count}/{total} seeds")
    print(f"details: {out / 'ablation.json'}")
    return 0


def cmd_peft_bench(args) -> int:
    config = _resolved_config(args)
    out = _out_dir(args, "peft-bench", config.seed)
    if args.data:
        corpus, bundles = load_dataset(args.data)
    else:
        corpus, bundles = generate_synthetic(config.synth, config.seed, out / "data",
                                             config.split_ratios)
    stack = EncoderStack(config.encoder, seed=config.seed)
    pretrain_alignment(stack, bundles, epochs=config.train.stage0_epochs,
                       batch_size=config.train.stage0_batch_size,
                       lr=config.train.lr, seed=config.seed)
    model, _ = train_stage1(corpus, stack, bundles, config.train,
                            out_dir=out / "stage1")
    rows = peft_bench(corpus, stack, bundles, model, config.train, out_dir=out)
    shown = [
        {**row, "seconds_per_epoch": f"{row['seconds_per_epoch']:.2f}",
         **{k: f"{v:.4f}" for k, v in row.items() if k.startswith(("recall@", "ndcg@"))}}
        for row in rows
    ]
    columns = ["strategy", "trainable_params", "seconds_per_epoch",
               *sorted(k for k in rows[0] if k.startswith("recall@"))]
    print(_format_table(shown, columns))
    print(f"details: {out / 'peft_bench.json'}")
    return 0


def cmd_print_config(args) -> int:
    config = _resolved_config(args)
    print(json.dumps(config_to_dict(config), indent=2))
    return 0


def cmd_pipeline(args) -> int:
    config = _resolved_config(args)
    out = _out_dir(args, "pipeline", config.seed)
    save_config(config, out / "config.json")
    if args.data:
        corpus, bundles = load_dataset(args.data)
        data_dir = Path(args.data)
    else:
        data_dir = out / "data"
        corpus, bundles = generate_synthetic(config.synth, config.seed, data_dir,
                                             config.split_ratios)
    print(f"data: {data_dir} ({corpus.num_users} users, {corpus.num_items} items)")

    stack = EncoderStack(config.encoder, seed=config.seed)
    pre = pretrain_alignment(stack, bundles, epochs=config.train.stage0_epochs,
                             batch_size=config.train.stage0_batch_size,
                             lr=config.train.lr, seed=config.seed)
    save_checkpoint(
        CheckpointState(arrays=module_arrays(stack, "stack"),
                        config={"encoder": dataclasses.asdict(config.encoder)},
                        seed=config.seed, stage="pretrain"),
        out / "stack.ckpt",
    )
    if pre["final_loss"] is not None:
        print(f"stage 0: {pre['epochs']} epochs, alignment loss "
              f"{pre['initial_loss']:.4f} -> {pre['final_loss']:.4f}")

    if config.mode == "clip_prompt_joint":
        model, view, report = train_joint(corpus, stack, bundles, config.train,
                                          out_dir=out / "joint")
        encoder = view
        print(f"joint: best epoch {report.best_epoch} "
              f"val {_metrics_line(report.best_val) if report.best_val else 'n/a'}")
    else:
        model, s1_report = train_stage1(corpus, stack, bundles, config.train,
                                        out_dir=out / "stage1")
        print(f"stage 1: best epoch {s1_report.best_epoch}  "
              f"val {_metrics_line({k: v for k, v in s1_report.best_val.items() if k != 'epoch'})}")
        encoder = stack
        if config.mode in ("ptmrec", "ptmrec_no_kt"):
            lam = config.train.transfer_weight if config.mode == "ptmrec" else 0.0
            if config.mode == "ptmrec" and lam <= 0:
                raise ConfigError("ptmrec mode needs transfer_weight > 0")
            train_cfg = dataclasses.replace(config.train, transfer_weight=lam)
            strategy = named_strategy(config.strategy, config.encoder, train_cfg,
                                      config.seed)
            view = attach_strategy(stack, strategy, seed=config.seed)
            _, s2_report = train_stage2(corpus, stack, bundles, model, view,
                                        train_cfg, out_dir=out / "stage2")
            print(f"stage 2 ({config.strategy}): best epoch {s2_report.best_epoch}  "
                  f"val {_metrics_line({k: v for k, v in s2_report.best_val.items() if k != 'epoch'})}")
            metric = train_cfg.early_stop_metric
            incumbent = s1_report.best_val.get(metric, float("-inf"))
            if s2_report.best_val.get(metric, float("-inf")) > incumbent:
                encoder = view
            else:
                print("stage 2 did not out-validate stage 1; deploying the stage-1 model")

    result = live_eval(encoder, model, bundles, corpus, "test", config.train.eval_ks)
    write_eval_json(out / "eval-test.json", result, config.seed, None)
    print(f"test ({config.mode}): {_metrics_line(result.metrics)}")
    print(f"artifacts: {out}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ptmrec",
        description="Two-stage parameter-efficient multimodal recommendation workbench.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output directory (default: runs/<command>-<stamp>)")
        if data:
            p.add_argument("--data", help="dataset directory")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p, data=False)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="align the toy encoders and freeze them")
    common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("stage1", help="train the recommender on cached modal features")
    common(p)
    p.add_argument("--stack", required=True, help="pretrained encoder checkpoint")
    p.set_defaults(func=cmd_stage1)

    p = sub.add_parser("stage2", help="knowledge-guided parameter-efficient tuning")
    common(p)
    p.add_argument("--stack", required=True, help="pretrained encoder checkpoint")
    p.add_argument("--stage1", required=True, help="stage-1 best checkpoint")
    p.add_argument("--strategy", choices=("frozen", "prompt", "lora", "adapter"))
    p.set_defaults(func=cmd_stage2)

    p = sub.add_parser("eval", help="score a checkpoint on a held-out split")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--stack", help="needed for stage-1 checkpoints")
    p.add_argument("--split", choices=("val", "test"), default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="compare the four training modes over seeds")
    common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("peft-bench", help="compare prompt vs LoRA vs adapter tuning")
    common(p)
    p.set_defaults(func=cmd_peft_bench)

    p = sub.add_parser("print-config", help="show the effective configuration")
    common(p, data=False)
    p.add_argument("--mode", choices=("clip_frozen", "clip_prompt_joint",
                                      "ptmrec_no_kt", "ptmrec"))
    p.add_argument("--strategy", choices=("frozen", "prompt", "lora", "adapter"))
    p.set_defaults(func=cmd_print_config)

    p = sub.add_parser("pipeline", help="synth, pretrain, both stages, and a test eval")
    common(p)
    p.add_argument("--mode", choices=("clip_frozen", "clip_prompt_joint",
                                      "ptmrec_no_kt", "ptmrec"))
    p.add_argument("--strategy", choices=("frozen", "prompt", "lora", "adapter"))
    p.set_defaults(func=cmd_pipeline)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    torch.set_num_threads(int(os.environ.get("PTMREC_THREADS", "1")))
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except NumericalAbort as err:
        print(f"numerical abort: {err}", file=sys.stderr)
        if err.last_checkpoint:
            print(f"last good checkpoint: {err.last_checkpoint}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
