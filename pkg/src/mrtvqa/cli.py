"""Command-line experiment runner.

Subcommands: gen, pretrain, train, ablate, eval, gradcheck.
Exit codes: 0 success, 1 configuration error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; the contract here is exit 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        sys.exit(1)


def _apply_threads(n):
    if n is None:
        return
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(limits=n)
    except ImportError:
        import os

        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(n)


def build_parser():
    p = _Parser(prog="mrtvqa", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", type=str, default=None)
        sp.add_argument("--threads", type=int, default=None)

    g = sub.add_parser("gen", help="build dataset shards")
    g.add_argument("--config", type=str, default=None, help="genconfig key=value file")
    g.add_argument("--mode", choices=("v1", "v2"), default=None)
    g.add_argument("--scenes", type=int, default=None, help="override train scene count")
    common(g)

    pt = sub.add_parser("pretrain", help="contrastive encoder pretraining")
    pt.add_argument("--data", type=str, required=True, help="dataset directory")
    pt.add_argument("--policy", choices=("2d", "3d", "2d+3d"), default="2d+3d")
    pt.add_argument("--tau", type=float, default=0.1)
    pt.add_argument("--batch", type=int, default=128)
    pt.add_argument("--epochs", type=int, default=20)
    common(pt)

    tr = sub.add_parser("train", help="train a VQA model")
    tr.add_argument("--config", type=str, required=True, help="[model]/[train]/[data] file")
    tr.add_argument("--run-id", type=str, default=None)
    common(tr)

    ab = sub.add_parser("ablate", help="run an ablation matrix")
    ab.add_argument("--data", type=str, required=True)
    ab.add_argument("--table", choices=("table1", "table3"), default="table1")
    ab.add_argument("--seeds", type=int, default=3)
    ab.add_argument("--epochs", type=int, default=5)
    ab.add_argument("--top-k", type=int, default=None)
    common(ab)

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("--checkpoint", type=str, required=True)
    ev.add_argument("--data", type=str, required=True)
    ev.add_argument("--split", choices=("train", "val", "test"), default="val")
    common(ev)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    gc.add_argument("--seeds", type=int, default=20)
    common(gc)
    return p


def _cmd_gen(args):
    from .shards import DatasetConfig, build_dataset

    if args.config:
        cfg = DatasetConfig.from_file(args.config)
    else:
        cfg = DatasetConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.mode is not None:
        cfg.mode = args.mode
    if args.scenes is not None:
        cfg.scenes_train = args.scenes
    out = Path(args.out or "data")
    stats = build_dataset(cfg.validate(), out, log=print)
    print(f"dataset written to {out} ({stats['wall_seconds']}s)")
    return 0


def _cmd_pretrain(args):
    from .contrastive import AugmentationPolicy, pretrain
    from .data import view_bank
    from .shards import read_shard

    data = Path(args.data)
    train_bank = view_bank(read_shard(data / "train.mrts"))
    val_bank = view_bank(read_shard(data / "val.mrts"))
    policy = AugmentationPolicy(variant=args.policy)
    result = pretrain(
        train_bank,
        val_bank,
        policy,
        tau=args.tau,
        batch=args.batch,
        epochs=args.epochs,
        seed=args.seed or 0,
        out_dir=args.out or "pretrain",
        log=print,
    )
    print(f"best validation NCE accuracy: {result.best_accuracy:.4f}")
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def _cmd_train(args):
    from .config import load_train_config
    from .training import train_vqa

    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    if args.run_id is not None:
        overrides["run_id"] = args.run_id
    cfg = load_train_config(args.config, overrides)
    record = train_vqa(cfg, log=print)
    print(
        f"best val acc {record.best_val_acc:.4f} (epoch {record.best_epoch}); "
        f"test acc {record.test_acc:.4f}"
    )
    return 0


def _cmd_ablate(args):
    from .ablation import run_ablation, table1_cells, table3_cells

    cells = table1_cells() if args.table == "table1" else table3_cells()
    out = Path(args.out or f"ablation_{args.table}")
    result = run_ablation(
        args.data,
        out,
        cells,
        seeds=tuple(range(args.seeds)),
        epochs=args.epochs,
        top_k=args.top_k,
        log=print,
    )
    print((out / "ablation_summary.txt").read_text())
    return 0 if not result["failures"] else 2


def _cmd_eval(args):
    from .data import VqaData
    from .training import evaluate, load_model_for_eval

    data = VqaData.from_shard(Path(args.data) / f"{args.split}.mrts")
    model, side = load_model_for_eval(args.checkpoint, data)
    report = evaluate(model, data, canonical_only=side.get("canonical_only", False))
    print(json.dumps(report, indent=2))
    return 0


def _cmd_gradcheck(args):
    from .gradcheck import run_gradient_suite

    ok, _ = run_gradient_suite(n_seeds=args.seeds, log=print)
    if not ok:
        print("gradient suite FAILED")
        return 3
    print("gradient suite passed")
    return 0


_COMMANDS = {
    "gen": _cmd_gen,
    "pretrain": _cmd_pretrain,
    "train": _cmd_train,
    "ablate": _cmd_ablate,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    _apply_threads(getattr(args, "threads", None))

    from .model import ConfigError
    from .shards import ShardError
    from .checkpoint import CheckpointFormatError
    from .training import CompatibilityError
    from .vocab import VocabError

    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, ValueError) as e:
        if isinstance(e, (ShardError, CheckpointFormatError, CompatibilityError, VocabError)):
            print(f"data error: {e}", file=sys.stderr)
            return 2
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except (FloatingPointError, ArithmeticError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
