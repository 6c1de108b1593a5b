# -*- coding: UTF-8 -*-

from datetime import datetime
import os
import sys
import json
import logging
import argparse
import torch

sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from helpers import Checkpoint
from helpers import analysis
from helpers.BaseReader import BaseReader
from helpers.BaseRunner import BaseRunner, TrainConfig, bench_inference
from helpers.convert import conversion_report, mha_to_grouped
from models.BaseModel import BaseModel
from models.ViT import PRESETS, ViT, ViTConfig
from utils import layers, tensor_ops, utils
from utils.constants import *
from utils.exceptions import TrainingDivergedError, ValidationError

EXCLUDE = ["config", "handler", "verbose", "run_dir", "command"]


def parse_global_args(parser):
    parser.add_argument(
        "--verbose", type=int, default=logging.INFO, help="Logging Level, 0, 10, ..., 50"
    )
    parser.add_argument("--run-dir", type=str, default="", help="Directory for run.log and JSON-lines streams")
    parser.add_argument("--config", type=str, default="", help="JSON file of flag defaults")
    parser.add_argument("--seed", type=int, default=0, help="Random seed of numpy and pytorch")
    parser.add_argument("--precision", type=int, default=32, choices=[32, 64], help="Floating point bits")
    parser.add_argument(
        "--variant", type=layers.normalize_variant, default=None,
        help="mha | mqa | gqa | kdgqa | dgqa-diff | dgqa-ema | pgqa",
    )
    parser.add_argument("--kv-heads", type=int, default=None, help="Key-value heads G")
    parser.add_argument("--window", type=int, default=DEFAULT_WINDOW, help="DGQA reallocation window W")
    parser.add_argument("--alpha", type=float, default=DEFAULT_ALPHA, help="DGQA EMA coefficient")
    parser.add_argument(
        "--noise-at-inference", type=int, default=1, help="Whether PGQA perturbs maps outside training"
    )
    return parser


def build_parser():
    common = parse_global_args(argparse.ArgumentParser(add_help=False))
    parser = argparse.ArgumentParser(description="Grouped-query attention lab")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, handler in [("train", cmd_train), ("finetune", cmd_finetune)]:
        p = sub.add_parser(name, parents=[common])
        BaseReader.parse_data_args(p)
        BaseRunner.parse_runner_args(p)
        ViT.parse_model_args(p)
        p.set_defaults(handler=handler)

    p = sub.add_parser("convert", parents=[common])
    BaseModel.parse_model_args(p)
    p.set_defaults(handler=cmd_convert)

    p = sub.add_parser("eval", parents=[common])
    BaseReader.parse_data_args(p)
    BaseModel.parse_model_args(p)
    p.add_argument("--eval-batch-size", type=int, default=256, help="Batch size during evaluation.")
    p.set_defaults(handler=cmd_eval)

    for name, handler in [
        ("sweep-kv", cmd_sweep_kv),
        ("sweep-nonuniform", cmd_sweep_nonuniform),
        ("sweep-lr", cmd_sweep_lr),
    ]:
        p = sub.add_parser(name, parents=[common])
        BaseReader.parse_data_args(p)
        BaseRunner.parse_runner_args(p)
        ViT.parse_model_args(p)
        p.set_defaults(handler=handler)
    sub.choices["sweep-kv"].add_argument("--gs", type=str, default="1,2,4,8", help="Comma-separated G values")
    sub.choices["sweep-nonuniform"].add_argument("--field", type=str, default="depth", choices=["depth", "d_model"])
    sub.choices["sweep-nonuniform"].add_argument("--values", type=str, default="1,2,4", help="Comma-separated values")
    sub.choices["sweep-lr"].add_argument("--lrs", type=str, default="1e-3,3e-4,1e-4,1e-5", help="Comma-separated rates")

    p = sub.add_parser("analyze", parents=[common])
    p.add_argument("kind", choices=["heads", "alloc", "blend"])
    BaseReader.parse_data_args(p)
    BaseModel.parse_model_args(p)
    p.add_argument("--layer", type=int, default=-1, help="Encoder layer for heads (default: last)")
    p.add_argument("--n-images", type=int, default=64, help="Images fed for head similarity")
    p.add_argument("--log", type=str, default="", help="allocations.jsonl for alloc")
    p.add_argument("--heads", type=int, default=None, help="H for alloc when no checkpoint is given")
    p.add_argument("--dgqa", type=str, default="", help="Similarity CSV of the dgqa model")
    p.add_argument("--gqa", type=str, default="", help="Similarity CSV of the gqa model")
    p.add_argument("--mha", type=str, default="", help="Similarity CSV of the mha model")
    p.set_defaults(handler=cmd_analyze)

    p = sub.add_parser("bench", parents=[common])
    ViT.parse_model_args(p)
    p.add_argument("--variants", type=str, default="gqa,kdgqa,dgqa-ema,pgqa", help="Comma-separated variants")
    p.add_argument("--batch", type=int, default=288, help="Images per forward pass")
    p.add_argument("--repeats", type=int, default=20, help="Timed passes per variant")
    p.add_argument("--warmup", type=int, default=3, help="Untimed passes per variant")
    p.add_argument(
        "--train-mode", action="store_true", help="Time in train mode so DGQA windows fire and PGQA draws noise"
    )
    p.add_argument("--channels", type=int, default=3, help="Input channels of a fresh model")
    p.add_argument("--num-classes", type=int, default=10, help="Classes of a fresh model")
    p.set_defaults(handler=cmd_bench)
    return parser, sub.choices


def parse_args(argv=None):
    parser, subcommands = build_parser()
    args, _ = parser.parse_known_args(argv)
    if args.config:
        with open(args.config) as f:
            config = {k.replace("-", "_"): v for k, v in json.load(f).items()}
        subparser = subcommands[args.command]
        known = {a.dest for a in subparser._actions}
        unknown = sorted(set(config) - known)
        if unknown:
            raise ValidationError("unknown config keys: {}".format(", ".join(unknown)))
        if "variant" in config:
            config["variant"] = layers.normalize_variant(config["variant"])
        subparser.set_defaults(**config)
    return parser.parse_args(argv)


"""
Shared plumbing
"""


def attention_config(args, n_heads: int, head_dim: int) -> layers.AttentionVariantConfig:
    variant = args.variant or GQA
    G = args.kv_heads
    if G is None:
        G = n_heads if variant == MHA else 1 if variant == MQA else max(1, n_heads // 2)
    return layers.AttentionVariantConfig(
        variant=variant,
        n_heads=n_heads,
        n_kv_heads=G,
        head_dim=head_dim,
        window=args.window,
        alpha=args.alpha,
        seed=args.seed,
        noise_at_inference=bool(args.noise_at_inference),
    )


def fresh_config(args, corpus) -> ViTConfig:
    preset = PRESETS[args.preset]
    d_model = args.d_model or preset["d_model"]
    n_heads = args.heads or preset["n_heads"]
    if d_model % n_heads != 0:
        raise ValidationError("d_model {} is not divisible by {} heads".format(d_model, n_heads))
    return ViT.config_from_args(args, attention_config(args, n_heads, d_model // n_heads), corpus)


def cli_config(args) -> dict:
    return {k: v for k, v in vars(args).items() if k not in ("handler",)}


def load_checkpoint(args):
    if not args.in_path:
        raise ValidationError("--in is required for {}".format(args.command))
    ckpt = Checkpoint.load(args.in_path)
    model = ViT.from_checkpoint(ckpt)
    Checkpoint.restore_rng(ckpt)
    logging.info("Load model from " + args.in_path)
    return ckpt, model


def maybe_switch_variant(args, model: ViT):
    current = model.config.attention.variant
    if args.variant is None or args.variant == current:
        return
    model.set_variant(
        args.variant,
        window=args.window,
        alpha=args.alpha,
        seed=args.seed,
        noise_at_inference=bool(args.noise_at_inference),
    )


def emit(result: dict):
    print(json.dumps(result, sort_keys=True, default=str))
    sys.stdout.flush()


def write_table(df, path: str, args) -> str:
    utils.check_dir(path)
    df.to_csv(path, index=False)
    with open(path + ".config.json", "w") as f:
        json.dump(cli_config(args), f, sort_keys=True, indent=2)
    logging.info("Wrote {} rows to {}".format(len(df), path))
    return path


def default_out(args, name: str) -> str:
    return args.out or os.path.join(args.run_dir, name)


"""
Subcommands
"""


def run_training(args, phase: str) -> dict:
    start_step, ckpt = 0, None
    if args.in_path:
        ckpt, model = load_checkpoint(args)
        start_step = int(ckpt.metadata.get("step", 0))
        maybe_switch_variant(args, model)
        args.image_size = model.config.image_size
        corpus = BaseReader(args)
    else:
        if phase == FINETUNE:
            raise ValidationError("finetune needs --in <checkpoint>")
        corpus = BaseReader(args)
        model = ViT(fresh_config(args, corpus))
    model.to(torch.get_default_dtype())
    logging.info(model)
    logging.info("#params: {}".format(model.count_variables()))

    runner = BaseRunner(BaseRunner.config_from_args(args, phase), run_dir=args.run_dir)
    optimizer = runner.build_optimizer(model)
    if ckpt is not None and phase == UPTRAIN:
        Checkpoint.restore_optimizer(optimizer, model, ckpt)
    logging.info("Test Before Training: " + runner.print_res(model, corpus.data_dict["test"], start_step))

    out = default_out(args, "model.gqac")
    meta = dict(train_config=runner.config.to_dict(), seed=args.seed, cli_config=cli_config(args))
    try:
        metrics, optimizer = runner.train(model, corpus.data_dict["train"], optimizer, start_step)
    except TrainingDivergedError as e:
        model.save_model(out, optimizer, step=e.metrics.end_step, **meta)
        raise
    model.save_model(out, optimizer, step=metrics.end_step, **meta)

    result = runner.evaluate(model, corpus.data_dict["test"], step=metrics.end_step)
    logging.info(os.linesep + "Test After Training: " + utils.format_metric(result))
    report = {
        "phase": phase,
        "variant": metrics.variant,
        "steps": metrics.steps,
        "end_step": metrics.end_step,
        "first_loss": metrics.losses[0] if metrics.losses else None,
        "final_loss": metrics.losses[-1] if metrics.losses else None,
        "allocation_events": metrics.allocation_events,
        "accuracy": result["accuracy"],
        "loss": result["loss"],
        "out": out,
        "config": cli_config(args),
    }
    with open(os.path.join(args.run_dir, "report.json"), "w") as f:
        json.dump({**report, "metrics": metrics.to_dict()}, f, sort_keys=True, default=str)
    return report


def cmd_train(args) -> dict:
    return run_training(args, UPTRAIN)


def cmd_finetune(args) -> dict:
    return run_training(args, FINETUNE)


def cmd_convert(args) -> dict:
    ckpt, model = load_checkpoint(args)
    if args.kv_heads is None:
        raise ValidationError("convert needs --kv-heads")
    converted = mha_to_grouped(model, args.kv_heads, args.variant or GQA)
    report = conversion_report(model, converted)
    out = default_out(args, "converted.gqac")
    converted.save_model(
        out,
        step=int(ckpt.metadata.get("step", 0)),
        seed=int(ckpt.metadata.get("seed", args.seed)),
        train_config=ckpt.metadata.get("train", {}),
        cli_config=cli_config(args),
        extra={"conversion": report},
    )
    return {**report, "out": out}


def cmd_eval(args) -> dict:
    ckpt, model = load_checkpoint(args)
    args.image_size = model.config.image_size
    args.num_classes = model.config.num_classes
    corpus = BaseReader(args)
    runner = BaseRunner(TrainConfig(seed=args.seed, eval_batch_size=args.eval_batch_size))
    step = int(ckpt.metadata.get("step", 0))
    result = runner.evaluate(model, corpus.data_dict["test"], step=step)
    return {**result, "step": step, "variant": model.config.attention.variant}


def _sweep_setup(args):
    corpus = BaseReader(args)
    base_cfg = fresh_config(args, corpus)
    train_cfg = BaseRunner.config_from_args(args, UPTRAIN)
    return corpus, base_cfg, train_cfg


def cmd_sweep_kv(args) -> dict:
    corpus, base_cfg, train_cfg = _sweep_setup(args)
    gs = [int(g) for g in args.gs.split(",") if g.strip()]
    df = analysis.kv_sweep(base_cfg, gs, train_cfg, corpus.data_dict["train"], corpus.data_dict["test"])
    out = write_table(df, default_out(args, "kv_sweep.csv"), args)
    return {"out": out, "rows": df.to_dict("records")}


def cmd_sweep_nonuniform(args) -> dict:
    if args.variant is None:
        args.variant = DGQA_EMA
    corpus, base_cfg, train_cfg = _sweep_setup(args)
    values = [int(v) for v in args.values.split(",") if v.strip()]
    df = analysis.nonuniform_sweep(base_cfg, args.field, values, train_cfg, corpus.data_dict["train"])
    out = write_table(df, default_out(args, "nonuniform_sweep.csv"), args)
    return {"out": out, "rows": df.to_dict("records")}


def cmd_sweep_lr(args) -> dict:
    corpus, base_cfg, train_cfg = _sweep_setup(args)
    lrs = [float(v) for v in args.lrs.split(",") if v.strip()]
    df = analysis.lr_sweep(base_cfg, lrs, train_cfg, corpus.data_dict["train"], corpus.data_dict["test"])
    out = write_table(df, default_out(args, "lr_sweep.csv"), args)
    return {"out": out, "rows": df.to_dict("records")}


def cmd_analyze(args) -> dict:
    if args.kind == "heads":
        ckpt, model = load_checkpoint(args)
        args.image_size = model.config.image_size
        args.num_classes = model.config.num_classes
        corpus = BaseReader(args)
        model.eval()
        images = corpus.data_dict["test"].images[: args.n_images].to(torch.get_default_dtype())
        step = int(ckpt.metadata.get("step", 0))
        heads = model.head_outputs(images, layer=args.layer, step=step)
        layer = args.layer % model.config.depth
        sim = analysis.head_similarity(heads, model.config.attention.variant, layer)
        out = default_out(args, "heads_layer{}.csv".format(layer))
        sim.to_csv(out)
        intra, inter = sim.intra_inter_means(model.attentions()[layer].last_alloc)
        return {"out": out, "layer": layer, "zero_heads": sim.zero_heads, "intra_group": intra, "inter_group": inter}

    if args.kind == "alloc":
        if not args.log:
            raise ValidationError("analyze alloc needs --log <allocations.jsonl>")
        if args.in_path:
            _, model = load_checkpoint(args)
            H, G = model.config.n_heads, model.config.n_kv_heads
        else:
            if args.heads is None or args.kv_heads is None:
                raise ValidationError("analyze alloc needs --in or both --heads and --kv-heads")
            H, G = args.heads, args.kv_heads
        hist = analysis.AllocationHistory.from_jsonl(args.log)
        report = {
            "events": len(hist),
            "nonuniform_fraction": analysis.nonuniform_fraction(hist, H, G),
            "by_layer": analysis.nonuniform_by_layer(hist, H, G).to_dict("records"),
            "group_sizes": analysis.allocation_counts(hist).to_dict("records"),
            "mean_importance_spread": float(analysis.importance_spread(hist)["spread"].mean()),
        }
    else:
        if not (args.dgqa and args.gqa and args.mha):
            raise ValidationError("analyze blend needs --dgqa, --gqa and --mha CSV matrices")
        import pandas as pd

        mats = [
            analysis.SimilarityMatrix(pd.read_csv(path, index_col=0).values)
            for path in (args.dgqa, args.gqa, args.mha)
        ]
        lam, residual = analysis.similarity_blend_residual(*mats)
        report = {"lambda": lam, "residual": residual}

    out = default_out(args, "{}.json".format(args.kind))
    utils.check_dir(out)
    with open(out, "w") as f:
        json.dump({**report, "config": cli_config(args)}, f, sort_keys=True, indent=2, default=str)
    return {**report, "out": out}


def cmd_bench(args) -> dict:
    if args.in_path:
        _, model = load_checkpoint(args)
    else:
        shape = argparse.Namespace(
            image_size=args.image_size or 32, channels=args.channels, num_classes=args.num_classes
        )
        model = ViT(fresh_config(args, shape))
    model.to(torch.get_default_dtype())
    cfg = model.config
    images = torch.rand(
        args.batch, cfg.channels, cfg.image_size, cfg.image_size, generator=utils.make_generator(args.seed)
    )
    variants = [v for v in args.variants.split(",") if v.strip()]
    df = bench_inference(
        model, variants, images, repeats=args.repeats, warmup=args.warmup, training=args.train_mode
    )
    logging.info(os.linesep + df.to_string())
    out = write_table(df, default_out(args, "bench.csv"), args)
    return {"out": out, "rows": df.to_dict("records")}


def setup_logging(args):
    if args.run_dir == "":
        timestamp = datetime.now().strftime("%Y%m%d%H%M%S") + str(datetime.now().microsecond).zfill(6)
        name = "__".join([args.command, str(args.variant or GQA), str(args.seed), timestamp])
        args.run_dir = os.path.join("runs", name)
    os.makedirs(args.run_dir, exist_ok=True)
    logging.basicConfig(filename=os.path.join(args.run_dir, "run.log"), level=args.verbose, force=True)
    logging.getLogger().addHandler(logging.StreamHandler(sys.stderr))


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except (ValueError, OSError) as e:
        print("error: {}".format(e), file=sys.stderr)
        return 2
    setup_logging(args)
    logging.info("-" * 45 + " BEGIN: " + utils.get_time() + " " + "-" * 45)
    logging.info(utils.format_arg_str(args, exclude_lst=EXCLUDE))

    utils.init_seed(args.seed)
    tensor_ops.set_precision(args.precision)
    code = 0
    try:
        emit(args.handler(args))
    except TrainingDivergedError as e:
        logging.error("{}; the last good state was saved".format(e))
        code = 1
    except (ValueError, OSError) as e:
        logging.error("{}: {}".format(type(e).__name__, e))
        code = 2
    logging.info(os.linesep + "-" * 45 + " END: " + utils.get_time() + " " + "-" * 45)
    return code


if __name__ == "__main__":
    sys.exit(main())
