"""Command-line trainer and evaluator.

Subcommands: ``train`` (fit a model, write checkpoint + metrics CSV),
``eval`` (score a checkpoint on a dataset split), and ``dump-graph`` (text
listing of the traced computation graph for debugging).
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import data as D
from . import nn
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .graph import bipartition, trace
from .projops import CrossEntropyProx, Margin
from .solve import Method, SolverConfig, StepRecord, train


def _add_dataset_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dataset", required=True,
                   choices=["xor", "two-moons", "mnist", "chartext"])
    p.add_argument("--data-dir", help="directory with MNIST IDX files or a text file")
    p.add_argument("--samples", type=int, default=256,
                   help="sample count for synthetic datasets")
    p.add_argument("--noise", type=float, default=None,
                   help="noise level for synthetic datasets")
    p.add_argument("--seq-len", type=int, default=32, help="chartext window length")
    p.add_argument("--limit-train", type=int, default=None)
    p.add_argument("--limit-test", type=int, default=None)


def _add_model_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--arch", default="mlp", choices=["mlp", "cnn", "rnn"])
    p.add_argument("--hidden", type=int, default=128,
                   help="hidden width (mlp/rnn) or channels (cnn)")
    p.add_argument("--depth", type=int, default=1)
    p.add_argument("--skip", action="store_true",
                   help="concatenate all hidden outputs into the readout")
    p.add_argument("--embed-dim", type=int, default=32, help="rnn embedding size")
    p.add_argument("--quantize-k", type=int, default=None,
                   help="insert a quantization layer with this many levels")
    p.add_argument("--quantize-alpha", type=float, default=1.0)
    p.add_argument("--loss", default="ce", choices=["ce", "margin"])
    p.add_argument("--lambda", dest="lam", type=float, default=5.0,
                   help="cross-entropy prox scale")
    p.add_argument("--margin", type=float, default=1.0)


def _add_solver_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--method", default="dr", choices=["ap", "dr", "cp"])
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--steps-per-batch", type=int, default=50)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--val-every", type=int, default=1000)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--log-every", type=int, default=None)
    p.add_argument("--dr-order", default="target-first",
                   choices=["target-first", "target-last"],
                   help="which partition the reflections hit first (ap/dr only)")
    p.add_argument("--weighted-consensus", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="projnet",
        description="Train neural networks by iterative constraint projection.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="fit a model")
    _add_dataset_args(p_train)
    _add_model_args(p_train)
    _add_solver_args(p_train)
    p_train.add_argument("--out", help="checkpoint path to write")
    p_train.add_argument("--metrics", help="metrics CSV path to write")

    p_eval = sub.add_parser("eval", help="score a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    _add_dataset_args(p_eval)
    p_eval.add_argument("--split", default="test", choices=["train", "val", "test"])
    p_eval.add_argument("--seed", type=int, default=0)

    p_dump = sub.add_parser("dump-graph", help="print the traced graph")
    _add_dataset_args(p_dump)
    _add_model_args(p_dump)
    p_dump.add_argument("--batch-size", type=int, default=2)
    p_dump.add_argument("--seed", type=int, default=0)
    p_dump.add_argument("--bipartition", action="store_true")
    p_dump.add_argument("--out", help="write to file instead of stdout")
    return parser


def _usage_error(parser: argparse.ArgumentParser, msg: str) -> "NoReturn":
    parser.error(msg)  # exits with status 2


def _load_splits(args, parser, flatten: bool, seed: int):
    """Returns (train, val, test) datasets for the requested source."""
    if args.dataset == "xor":
        noise = 0.0 if args.noise is None else args.noise
        ds = D.synthetic_xor(args.samples, noise, seed)
        return D.split_dataset(ds, (0.8, 0.1, 0.1), seed)
    if args.dataset == "two-moons":
        noise = 0.1 if args.noise is None else args.noise
        ds = D.two_moons(args.samples, noise, seed)
        return D.split_dataset(ds, (0.8, 0.1, 0.1), seed)
    if args.dataset == "mnist":
        if not args.data_dir:
            _usage_error(parser, "--data-dir is required for --dataset mnist")
        train_ds, test_ds = D.load_mnist_idx(args.data_dir, flatten=flatten)
        if args.limit_train:
            train_ds = train_ds.subset(np.arange(min(args.limit_train, train_ds.sample_count)))
        if args.limit_test:
            test_ds = test_ds.subset(np.arange(min(args.limit_test, test_ds.sample_count)))
        # one tenth of the training data is reserved for validation
        n = train_ds.sample_count
        order = np.random.default_rng(seed).permutation(n)
        n_val = n // 10
        return train_ds.subset(order[n_val:]), train_ds.subset(order[:n_val]), test_ds
    if args.dataset == "chartext":
        if not args.data_dir:
            _usage_error(parser, "--data-dir is required for --dataset chartext")
        ds = D.char_text(args.data_dir, args.seq_len)
        return D.split_dataset(ds, (0.8, 0.1, 0.1), seed)
    raise AssertionError(args.dataset)


def _build_model(args, parser, train_ds):
    if args.loss == "ce":
        loss = CrossEntropyProx(args.lam)
    else:
        loss = Margin(args.margin)
    if args.arch == "mlp":
        if args.dataset == "chartext":
            _usage_error(parser, "--arch mlp cannot train on chartext; use rnn")
        quant = None
        if args.quantize_k is not None:
            quant = nn.QuantizeLayer(args.quantize_k, args.quantize_alpha)
        return nn.mlp(
            train_ds.x.shape[1], args.hidden, args.depth,
            train_ds.num_classes, loss, skip=args.skip, quantize=quant,
        )
    if args.arch == "cnn":
        if args.dataset not in ("mnist",):
            _usage_error(parser, "--arch cnn requires an image dataset")
        h, w = train_ds.x.shape[1:3]
        return nn.cnn((h, w), train_ds.x.shape[3], args.hidden, args.depth,
                      train_ds.num_classes, loss, skip=args.skip)
    if args.arch == "rnn":
        if args.dataset != "chartext":
            _usage_error(parser, "--arch rnn requires --dataset chartext")
        return nn.Rnn(
            vocab=train_ds.num_classes,
            embed_dim=args.embed_dim,
            hidden=args.hidden,
            num_classes=train_ds.num_classes,
            loss=loss,
            depth=args.depth,
        )
    raise AssertionError(args.arch)


def write_metrics(records: list[StepRecord], path: str | Path) -> None:
    """CSV with the fixed schema step,split,loss,accuracy,residual,elapsed_ms."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["step", "split", "loss", "accuracy", "residual", "elapsed_ms"])
        for r in records:
            w.writerow([r.step, r.split, repr(r.loss), repr(r.accuracy),
                        repr(r.residual), repr(r.elapsed_ms)])


def cmd_train(args, parser) -> int:
    train_ds, val_ds, test_ds = _load_splits(
        args, parser, flatten=(args.arch != "cnn"), seed=args.seed
    )
    model = _build_model(args, parser, train_ds)
    params = model.init_params(args.seed)
    cfg = SolverConfig(
        method=Method(args.method),
        steps_per_batch=args.steps_per_batch,
        lam=args.lam,
        margin=args.margin,
        batch_size=args.batch_size,
        seed=args.seed,
        max_steps=args.max_steps,
        consensus_weighted=args.weighted_consensus,
        reflect_target_partition_first=(args.dr_order == "target-first"),
        workers=args.workers,
        log_every=args.log_every,
    )
    report = train(
        model,
        train_ds,
        cfg,
        params,
        val_data=val_ds if val_ds.sample_count else None,
        val_every=args.val_every,
        patience=args.patience,
    )
    print(f"steps={report.steps}")
    print(f"stopped_early={report.stopped_early}")
    if report.best_val_accuracy is not None:
        print(f"best_val_accuracy={report.best_val_accuracy:.4f}")
    train_acc = model.accuracy(report.params, train_ds.x, train_ds.y)
    print(f"train_accuracy={train_acc:.4f}")
    if test_ds.sample_count:
        test_acc = model.accuracy(report.params, test_ds.x, test_ds.y)
        print(f"test_accuracy={test_acc:.4f}")
    if args.out:
        meta = {"dataset": args.dataset, "train_accuracy": train_acc}
        save_checkpoint(args.out, model, report.params, cfg, args.seed, meta)
        print(f"checkpoint={args.out}")
    if args.metrics:
        write_metrics(report.records, args.metrics)
        print(f"metrics={args.metrics}")
    return 0


def cmd_eval(args, parser) -> int:
    try:
        ck = load_checkpoint(args.checkpoint)
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    model = ck["model"]
    flatten = getattr(model, "arch", "") != "cnn"
    train_ds, val_ds, test_ds = _load_splits(args, parser, flatten=flatten, seed=args.seed)
    ds = {"train": train_ds, "val": val_ds, "test": test_ds}[args.split]
    try:
        acc = model.accuracy(ck["params"], ds.x, ds.y)
        loss = model.batch_loss(ck["params"], ds.x, ds.y)
    except (ValueError, KeyError) as exc:
        print(f"error: checkpoint incompatible with dataset: {exc}", file=sys.stderr)
        return 1
    print(f"split={args.split}")
    print(f"samples={ds.sample_count}")
    print(f"accuracy={acc:.4f}")
    print(f"loss={loss:.6f}")
    return 0


def cmd_dump_graph(args, parser) -> int:
    train_ds, _, _ = _load_splits(args, parser, flatten=(args.arch != "cnn"),
                                  seed=args.seed)
    model = _build_model(args, parser, train_ds)
    params = model.init_params(args.seed)
    idx = np.arange(min(args.batch_size, train_ds.sample_count))
    bx, by = train_ds.batch(idx)
    g = trace(model, params, bx, by)
    if args.bipartition:
        g = bipartition(g)
    text = g.dump_text()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "train":
        return cmd_train(args, parser)
    if args.command == "eval":
        return cmd_eval(args, parser)
    if args.command == "dump-graph":
        return cmd_dump_graph(args, parser)
    raise AssertionError(args.command)


if __name__ == "__main__":
    sys.exit(main())
