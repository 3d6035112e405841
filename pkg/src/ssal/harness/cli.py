"""Command-line entry point.

Exit codes: 0 success, 1 configuration or runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from ..alloop import (
    LabelGuard,
    PoolError,
    PoolState,
    aggregate_trials,
    evaluate,
    run_active_learning,
    select_batch,
    train_cycle,
)
from ..contrastive import KeyQueuePair
from ..model import CheckpointError, load_checkpoint, save_checkpoint
from ..select import SelectionError
from .config import ConfigError, ExperimentConfig, dump_config, load_config
from .data import IdxError, save_dataset, generate_synthetic
from .gradsuite import run_suite
from .metrics import write_metrics_csv

log = logging.getLogger("ssal")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    # SUPPRESS lets the flags appear before or after the subcommand
    common.add_argument("--config", default=argparse.SUPPRESS, help="experiment YAML file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="trial / dataset seed")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    p = _Parser(prog="ssal", description="Self-supervised active learning at desk scale.", parents=[common])
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    sub.add_parser("gen-data", parents=[common], help="write the synthetic dataset as IDX files")
    sub.add_parser("run", parents=[common], help="full active-learning experiment -> metrics.csv")
    sub.add_parser("train", parents=[common], help="one training stage on the initial labelled set")
    s = sub.add_parser("select", parents=[common], help="choose ids to annotate, one per line")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--labelled", help="file with labelled ids (default: the seed's initial draw)")
    s.add_argument("--budget", type=int, help="ids to choose (default: config budget)")
    s.add_argument("--queues", help="queues.npz written by 'train' (default: next to the checkpoint)")
    e = sub.add_parser("eval", parents=[common], help="test accuracy of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    g = sub.add_parser("grad-check", parents=[common], help="finite-difference check of every operation")
    g.add_argument("--seeds", type=int, default=20)
    return p


def _config(args) -> ExperimentConfig:
    path = getattr(args, "config", None)
    return load_config(path) if path else ExperimentConfig()


def _out_dir(args, cfg: ExperimentConfig) -> Path:
    out = Path(getattr(args, "out", None) or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _seed(args, default: int) -> int:
    seed = getattr(args, "seed", None)
    if seed is not None and not 0 <= seed < 2**64:
        raise ConfigError("--seed must be an unsigned 64-bit integer")
    return default if seed is None else seed


def _read_ids(path) -> np.ndarray:
    text = Path(path).read_text().split()
    try:
        return np.array([int(t) for t in text], dtype=np.int64)
    except ValueError as exc:
        raise ConfigError(f"{path}: ids must be integers") from exc


def save_queues(queues: KeyQueuePair, path) -> None:
    np.savez(path, weak=queues.weak.keys(), strong=queues.strong.keys(), capacity=queues.weak.capacity)


def load_queues(path, dim: int) -> KeyQueuePair:
    with np.load(path) as z:
        pair = KeyQueuePair.create(int(z["capacity"]), dim, z["weak"].dtype)
        pair.enqueue(z["weak"], z["strong"])
    return pair


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    spec = replace(cfg.synthetic, seed=_seed(args, cfg.synthetic.seed))
    out = _out_dir(args, cfg)
    manifest = save_dataset(generate_synthetic(spec), out)
    print(manifest)
    return 0


def cmd_run(args) -> int:
    cfg = _config(args)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(_seed(args, 0))
    out = _out_dir(args, cfg)
    dataset = cfg.load_dataset()
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    (out / "config.yaml").write_text(dump_config(cfg))
    t0 = time.perf_counter()
    results = run_active_learning(dataset, cfg.al, workers=cfg.workers, checkpoint_dir=ckpt_dir)
    rows = [r for res in results for r in res.metrics]
    path = write_metrics_csv(rows, out / "metrics.csv", record_seconds=cfg.record_seconds)
    for agg in aggregate_trials([res.metrics for res in results]):
        print(f"cycle {agg['cycle']} labelled {agg['labelled']}: {agg['mean']:.4f} +/- {agg['std']:.4f}")
    log.info("finished in %.1fs", time.perf_counter() - t0)
    print(path)
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    seed = _seed(args, cfg.al.trials[0])
    out = _out_dir(args, cfg)
    dataset = cfg.load_dataset()
    x = dataset.train_images
    cfg.al.check_pool(len(x))
    pool = PoolState.initial(len(x), cfg.al.initial_labelled, seed)
    guard = LabelGuard(dataset.train_labels)
    guard.reveal(pool.labelled)
    mcfg = replace(cfg.al.model, in_channels=x.shape[1], num_classes=dataset.num_classes)
    model, report = train_cycle(x, pool, guard[pool.labelled], cfg.al, mcfg, seed, 0)
    save_checkpoint(model, out / "model.ckpt")
    save_queues(report.queues, out / "queues.npz")
    (out / "labelled.txt").write_text("".join(f"{i}\n" for i in pool.labelled))
    acc, _ = evaluate(model, dataset.test_images, dataset.test_labels, dataset.num_classes)
    print(f"accuracy {acc:.6f}")
    print(out / "model.ckpt")
    return 0


def cmd_select(args) -> int:
    cfg = _config(args)
    seed = _seed(args, cfg.al.trials[0])
    dataset = cfg.load_dataset()
    n = len(dataset.train_images)
    model = load_checkpoint(args.checkpoint)
    if args.labelled:
        lab = np.unique(_read_ids(args.labelled))
        if lab.size and (lab.min() < 0 or lab.max() >= n):
            raise PoolError(f"labelled ids must lie in [0, {n})")
        pool = PoolState(lab, np.setdiff1d(np.arange(n), lab))
    else:
        pool = PoolState.initial(n, cfg.al.initial_labelled, seed)
    pool.check()
    budget = cfg.al.budget if args.budget is None else args.budget
    qpath = Path(args.queues) if args.queues else Path(args.checkpoint).with_name("queues.npz")
    if qpath.exists():
        queues = load_queues(qpath, model.config.proj_dim)
    else:
        queues = KeyQueuePair.create(cfg.al.train.queue_size, model.config.proj_dim)
    al = replace(cfg.al, budget=budget)
    result = select_batch(model, queues, dataset.train_images, pool, al, seed)
    sys.stdout.write("".join(f"{i}\n" for i in result.ids))
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    dataset = cfg.load_dataset()
    model = load_checkpoint(args.checkpoint)
    acc, per_class = evaluate(model, dataset.test_images, dataset.test_labels, dataset.num_classes)
    print(f"accuracy {acc:.6f}")
    for c, a in enumerate(per_class):
        print(f"class {c} {a:.6f}")
    return 0


def cmd_grad_check(args) -> int:
    t0 = time.perf_counter()
    failed = 0
    for r in run_suite(seeds=args.seeds):
        status = "ok" if r.passed else "FAIL"
        failed += not r.passed
        print(f"{status:4s} {r.name:28s} max rel err {r.max_error:.3e} ({r.seeds} seeds)")
    print(f"{'all passed' if not failed else f'{failed} failed'} in {time.perf_counter() - t0:.1f}s")
    return 1 if failed else 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "run": cmd_run,
    "train": cmd_train,
    "select": cmd_select,
    "eval": cmd_eval,
    "grad-check": cmd_grad_check,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, PoolError, SelectionError, IdxError, CheckpointError, OSError, ValueError) as exc:
        print(f"ssal {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
