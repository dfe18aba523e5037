"""Command line entry point: ``pointcmp <command> [options]``.

Every :class:`RunConfig` field is also a flag (``--mask-ratio 0.5``); values
are resolved as defaults < ``--config`` file < flags.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, read_key_values
from .data import DatasetError, generate_synthetic_dataset, write_dataset

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3

logger = logging.getLogger("pointcmp")

_GLOBAL_FIELDS = {"seed", "deterministic"}


def _add_config_flags(parser: argparse.ArgumentParser):
    group = parser.add_argument_group("run configuration")
    for f in dataclasses.fields(RunConfig):
        if f.name in _GLOBAL_FIELDS:
            continue
        group.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}", metavar=f.type.upper(),
                           default=None, help=f"default: {f.default}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value file with RunConfig fields")
    common.add_argument("--seed", default=None, help="random seed (default 0)")
    common.add_argument("--out-dir", type=Path, default=Path("runs"), help="directory for outputs")
    common.add_argument("--deterministic", dest="deterministic", action="store_true", default=None,
                        help="single-threaded deterministic kernels (default)")
    common.add_argument("--no-deterministic", dest="deterministic", action="store_false")
    common.add_argument("-v", "--verbose", action="store_true")
    _add_config_flags(common)

    parser = argparse.ArgumentParser(prog="pointcmp", description="Contrastive mask prediction on point cloud videos.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset")
    p.add_argument("--out", type=Path, help="dataset path (default: OUT_DIR/data.pcv)")

    p = sub.add_parser("pretrain", parents=[common], help="self-supervised pretraining")
    p.add_argument("--data", type=Path, required=True)

    for name, text in (("probe", "linear probe on a frozen encoder"), ("finetune", "end-to-end fine-tuning")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--data", type=Path, required=True)
        p.add_argument("--checkpoint", type=Path, help="omit to start from a random initialisation")

    p = sub.add_parser("export-embeddings", parents=[common], help="global token per video")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out", type=Path, help="default: OUT_DIR/embeddings.txt")

    p = sub.add_parser("sim-hist", parents=[common], help="cosine similarities of sample pairs")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out", type=Path, help="default: OUT_DIR/similarities.csv")

    p = sub.add_parser("ablate", parents=[common], help="pretrain + probe every ablation row")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--rows", nargs="*", help="subset of rows (default: all)")
    p.add_argument("--seeds", type=int, nargs="*", default=[0, 1, 2])
    p.add_argument("--out", type=Path, help="default: OUT_DIR/ablation.tsv")
    return parser


def resolve_config(args, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    if args.config is not None:
        if not args.config.is_file():
            raise ConfigError(f"config file not found: {args.config}")
        cfg = cfg.with_strings(read_key_values(args.config.read_text()))
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    if args.seed is not None:
        overrides["seed"] = args.seed
    cfg = cfg.with_strings(overrides)
    if args.deterministic is not None:
        cfg = cfg.replace(deterministic=args.deterministic)
    return cfg.validate()


def _checkpoint_config(args):
    from .train import Checkpoint

    if getattr(args, "checkpoint", None) is None:
        return None, resolve_config(args)
    if not args.checkpoint.is_file():
        raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
    ckpt = Checkpoint.load(args.checkpoint)
    cfg = resolve_config(args, ckpt.run_config())
    model = ckpt.build_model()
    model.cfg = cfg
    return model, cfg


def run(args) -> int:
    from . import train

    out_dir: Path = args.out_dir
    if args.command == "gen-data":
        cfg = resolve_config(args)
        out = args.out or out_dir / "data.pcv"
        out.parent.mkdir(parents=True, exist_ok=True)
        spec = cfg.synthetic_spec()
        write_dataset(generate_synthetic_dataset(spec), out, spec.num_classes,
                      generator=dataclasses.asdict(spec))
        print(f"wrote {spec.num_classes * spec.videos_per_class} videos to {out}")
        return EXIT_OK

    _require(args.data)
    if args.command == "pretrain":
        cfg = resolve_config(args)
        result = train.pretrain(cfg, args.data, out_dir)
        last = result.metrics[-1] if result.metrics else {}
        print(f"checkpoint {out_dir / 'checkpoint.pt'} final loss {last.get('loss_total', float('nan')):.4f}")
        return EXIT_OK

    if args.command in ("probe", "finetune"):
        model, cfg = _checkpoint_config(args)
        if model is None:
            train.seed_everything(cfg.seed, cfg.deterministic)
            model = train.PointCMP(cfg)
        fn = train.linear_probe if args.command == "probe" else train.finetune
        acc = fn(model, args.data, cfg=cfg, seed=cfg.seed)
        print(f"{args.command} accuracy {acc:.4f}")
        return EXIT_OK

    model, cfg = _checkpoint_config(args)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.command == "export-embeddings":
        out = args.out or out_dir / "embeddings.txt"
        n = train.export_embeddings(model, args.data, out)
        print(f"wrote {n} embeddings to {out}")
    elif args.command == "sim-hist":
        out = args.out or out_dir / "similarities.csv"
        cols = train.similarity_histogram(model, args.data, out, seed=cfg.seed)
        print(" ".join(f"{k}={v.mean():.4f}" for k, v in cols.items()))
    elif args.command == "ablate":
        out = args.out or out_dir / "ablation.tsv"
        grid = train.ablation_grid()
        unknown = set(args.rows or ()) - set(grid)
        if unknown:
            raise ConfigError(f"unknown ablation rows: {sorted(unknown)}")
        results = train.run_ablation_suite(cfg, args.data, out, rows=args.rows or None, seeds=args.seeds)
        sys.stdout.write(train.format_ablation_table(results))
    return EXIT_OK


def _require(path: Path):
    if not path.is_file():
        raise FileNotFoundError(f"dataset not found: {path}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
