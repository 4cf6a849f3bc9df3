"""Command-line entry point.

Subcommands: ``preprocess``, ``train``, ``evaluate``, ``ablate``,
``figures``. Every flag mirrors a config key; precedence is flag > config
file > default. Exit codes: 0 success, 1 usage error, 2 data error,
3 training divergence. Timestamps are confined to ``run_meta.txt`` so all
other artifacts regenerate bit-identically.
"""

from __future__ import annotations

import argparse
import os
import shlex
import sys
import time
from pathlib import Path

import torch

from . import evaluation
from .dataio import (
    DatasetManifest,
    PairedSlabs,
    preprocess_volumes,
    to_model_space,
    to_uint8,
)
from .errors import ConfigError, DataError, DivergenceError
from .metrics import LpipsBackend
from .runconfig import RUN_ROOT_ENV, RunConfig
from .training import Trainer, load_checkpoint


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_config_flags(p: _Parser) -> None:
    p.add_argument("--config", help="flat dotted-key config file")
    p.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override any config key (repeatable)",
    )


# Dedicated flags and the config keys they shadow.
_TRAIN_FLAGS = {
    "epochs": "train.epochs",
    "batch_size": "train.batch_size",
    "seed": "train.seed",
    "resolution": "train.resolution",
    "lr_g": "train.lr_g",
    "lr_d": "train.lr_d",
    "checkpoint_every": "train.checkpoint_every",
    "encoder": "generator.encoder",
    "decoder": "generator.decoder",
    "depth": "generator.depth",
    "base_channels": "generator.base_channels",
    "lambda1": "loss.lambda1",
    "lambda2": "loss.lambda2",
    "gan_mode": "loss.gan_mode",
    "few_shot": "data.few_shot_cap",
    "source_modality": "data.source_modality",
    "target_modality": "data.target_modality",
}


def _add_train_flags(p: _Parser) -> None:
    p.add_argument("--data", help="slab tree root containing manifest.txt")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--resolution", type=int, choices=(128, 256))
    p.add_argument("--lr-g", dest="lr_g", type=float)
    p.add_argument("--lr-d", dest="lr_d", type=float)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--encoder", choices=("plain_residual", "se_residual"))
    p.add_argument("--decoder", choices=("unet", "unetpp"))
    p.add_argument("--depth", type=int)
    p.add_argument("--base-channels", dest="base_channels", type=int)
    p.add_argument("--lambda1", type=float)
    p.add_argument("--lambda2", type=float)
    p.add_argument("--gan-mode", dest="gan_mode", choices=("bce", "lsgan"))
    p.add_argument("--few-shot", dest="few_shot", type=int)
    p.add_argument("--source-modality", dest="source_modality")
    p.add_argument("--target-modality", dest="target_modality")


def build_parser() -> _Parser:
    parser = _Parser(prog="mritranslate", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="volumes -> paired 2.5D slab tree")
    _add_config_flags(p)
    p.add_argument("--volumes", required=True, help="root of NIfTI volumes")
    p.add_argument("--out", required=True, help="output slab tree root")
    p.add_argument("--split", type=float, help="train fraction (default 0.8)")
    p.add_argument("--seed", type=int)
    p.add_argument("--few-shot", dest="few_shot", type=int)
    p.add_argument(
        "--pattern",
        action="append",
        default=[],
        metavar="TAG=REGEX",
        help="modality filename pattern (repeatable)",
    )
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train one generator/discriminator pair")
    _add_config_flags(p)
    _add_train_flags(p)
    p.add_argument("--run", help="run directory (default under run root)")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on a manifest's test side")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--resolution", type=int, choices=(128, 256))
    p.add_argument("--out", help="report directory (default <checkpoint dir>/eval)")
    p.add_argument("--lpips-backend", dest="lpips_backend")
    p.add_argument("--save-images", dest="save_images", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="run the 2x2 encoder/decoder grid")
    _add_config_flags(p)
    _add_train_flags(p)
    p.add_argument("--out", required=True, help="ablation output directory")
    p.add_argument(
        "--dry-run",
        dest="dry_run",
        action="store_true",
        help="evaluate untrained models (plumbing probe)",
    )
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("figures", help="error heatmaps and feature-map panels")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resolution", type=int, choices=(128, 256))
    p.add_argument("--sample", help="sample id (default: first test sample)")
    p.add_argument(
        "--kind", choices=("heatmap", "features", "both"), default="both"
    )
    p.add_argument("--nodes", help="comma-separated node ids, e.g. x1_0,x2_0")
    p.set_defaults(func=cmd_figures)
    return parser


def _merged_config(args, flag_map=None) -> RunConfig:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    cfg = RunConfig.load(args.config, overrides)
    for attr, key in (flag_map or {}).items():
        value = getattr(args, attr, None)
        if value is not None:
            cfg.set(key, value)
    return cfg


def cmd_preprocess(args) -> int:
    cfg = _merged_config(args)
    if args.split is not None:
        cfg.set("data.split_ratio", args.split)
    if args.seed is not None:
        cfg.set("data.seed", args.seed)
    if args.few_shot is not None:
        cfg.set("data.few_shot_cap", args.few_shot)
    for item in args.pattern:
        if "=" not in item:
            raise UsageError(f"--pattern expects TAG=REGEX, got {item!r}")
        tag, regex = item.split("=", 1)
        cfg.patterns[tag.strip()] = regex.strip()
    result = preprocess_volumes(
        args.volumes,
        args.out,
        ratio=cfg.get("data.split_ratio"),
        seed=cfg.get("data.seed"),
        few_shot_cap=cfg.get("data.few_shot_cap"),
        patterns=cfg.patterns,
    )
    print(f"manifest: {result.manifest_path}")
    print(
        f"patients: {len(result.manifest.train_ids)} train / "
        f"{len(result.manifest.test_ids)} test; slabs written: {result.n_slabs}"
    )
    if result.anomalies:
        print(f"warnings: {len(result.anomalies)} volume(s) skipped, see anomalies.log")
    return 0


def _run_root() -> Path:
    return Path(os.environ.get(RUN_ROOT_ENV, "runs"))


def cmd_train(args) -> int:
    cfg = _merged_config(args, _TRAIN_FLAGS)
    slab_root = args.data or cfg.get("data.slab_root")
    if not slab_root:
        raise UsageError("no slab root given (use --data or data.slab_root)")
    manifest = DatasetManifest.read(Path(slab_root) / "manifest.txt")
    manifest = manifest.with_cap(cfg.get("data.few_shot_cap"))
    task = cfg.task()
    if args.resume:
        trainer = load_checkpoint(args.resume)
        run_dir = Path(args.run) if args.run else Path(args.resume).parent.parent
    else:
        trainer = Trainer(
            cfg.generator_config(),
            cfg.discriminator_config(),
            cfg.train_config(),
            task=task,
        )
        run_dir = Path(args.run) if args.run else _run_root() / (
            f"{task[0]}2{task[1]}_r{cfg.get('train.resolution')}_"
            f"{cfg.get('generator.encoder')}_{cfg.get('generator.decoder')}_"
            f"seed{cfg.get('train.seed')}"
        )
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.write(run_dir / "config.txt")
    (run_dir / "run_meta.txt").write_text(
        f"created: {time.strftime('%Y-%m-%dT%H:%M:%S')}\n"
    )
    checkpoint = trainer.train(slab_root, manifest, run_dir)
    last = (run_dir / "train_log.csv").read_text().strip().splitlines()[-1]
    print(f"final step losses ({','.join(last.split(',')[1:])})")
    print(f"checkpoint: {checkpoint}")
    return 0


def _backend_from(cfg: RunConfig, flag_value) -> LpipsBackend | None:
    command = flag_value or cfg.get("eval.lpips_backend")
    if not command:
        return None
    return LpipsBackend(shlex.split(command))


def cmd_evaluate(args) -> int:
    cfg = _merged_config(args)
    out_dir = Path(args.out) if args.out else Path(args.checkpoint).parent / "eval"
    report = evaluation.evaluate_checkpoint(
        args.checkpoint,
        args.manifest,
        resolution=args.resolution or cfg.get("eval.resolution"),
        out_dir=out_dir,
        lpips_backend=_backend_from(cfg, args.lpips_backend),
        save_images=args.save_images or cfg.get("eval.save_images"),
    )
    print(f"reports: {out_dir / 'report_per_sample.csv'}, {out_dir / 'report_aggregate.csv'}")
    for name, stat in report.aggregate.items():
        if stat.mean is None:
            print(f"{name}: unavailable")
        else:
            print(f"{name}: {stat.mean:.4f} +/- {stat.std:.4f} (n={stat.n})")
    return 0


def cmd_ablate(args) -> int:
    cfg = _merged_config(args, _TRAIN_FLAGS)
    slab_root = args.data or cfg.get("data.slab_root")
    if not slab_root:
        raise UsageError("no slab root given (use --data or data.slab_root)")
    manifest = DatasetManifest.read(Path(slab_root) / "manifest.txt")
    manifest = manifest.with_cap(cfg.get("data.few_shot_cap"))
    table = evaluation.run_ablation(
        slab_root,
        manifest,
        args.out,
        base_gen=cfg.generator_config(),
        disc_config=cfg.discriminator_config(),
        train_config=cfg.train_config(),
        task=cfg.task(),
        dry_run=args.dry_run,
        lpips_backend=_backend_from(cfg, None),
    )
    print(f"ablation table: {table}")
    return 0


def cmd_figures(args) -> int:
    cfg = _merged_config(args)
    trainer = load_checkpoint(args.checkpoint)
    trainer.generator.eval()
    manifest = DatasetManifest.read(args.manifest)
    resolution = args.resolution or trainer.config.resolution
    pairs = PairedSlabs(
        Path(args.manifest).parent, manifest, trainer.task, "test", resolution
    )
    if len(pairs) == 0:
        raise DataError(f"manifest {args.manifest} has no test samples")
    pid = args.sample or pairs.ids[0]
    if pid not in pairs.ids:
        raise DataError(f"sample {pid} is not in the manifest's test side")
    src, tgt = pairs.load_pair_uint8(pid)
    sample = to_model_space(src).unsqueeze(0)
    out = Path(args.out)
    written = []
    if args.kind in ("heatmap", "both"):
        with torch.no_grad():
            gen = trainer.generator(sample)
        written.append(
            evaluation.render_error_heatmap(
                src, tgt, to_uint8(gen[0]), out / f"error_{pid}.png"
            )
        )
    if args.kind in ("features", "both"):
        depth = trainer.gen_config.depth
        if args.nodes:
            panels = {"nodes": [n.strip() for n in args.nodes.split(",")]}
        else:
            panels = {
                "encoder": [f"x{i}_0" for i in range(1, depth + 1)],
            }
            if trainer.gen_config.decoder == "unetpp":
                panels["decoder"] = [f"x0_{j}" for j in range(1, depth + 1)]
        for name, nodes in panels.items():
            written.append(
                evaluation.render_feature_panels(
                    trainer.generator, sample, nodes, out / f"features_{name}_{pid}.png"
                )
            )
    for path in written:
        print(f"figure: {path}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (UsageError, ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 3


def entry() -> None:
    sys.exit(main())
