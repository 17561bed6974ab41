"""Command-line entry points: pretrain, grid, report, synth.

Exit codes: 0 on success, 1 on usage/config errors, 2 when a grid finished
with some failed runs (details in the store manifest).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .data import gen_corpus, gen_synthetic, save_dataset, tokenize, SyntheticTaskSpec
from .encoder import MlmHyper, mlm_pretrain, save_checkpoint
from .errors import LayerblendError
from .grid import parse_config, run_grid, ResultsStore
from .report import write_reports


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="layerblend",
        description="Fine-tune encoder-layer combinations and compare them "
                    "against the last-layer CLS baseline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="masked-token pretraining of the encoder")
    p.add_argument("--config", required=True, help="experiment config (JSON)")
    p.add_argument("--corpus", required=True, help="text file, one sequence per line")
    p.add_argument("--out", required=True, help="checkpoint file to write")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("grid", help="run the fine-tuning grid from a config")
    p.add_argument("--config", required=True)
    p.add_argument("--ckpt", required=True, help="pretrained checkpoint")
    p.add_argument("--out", required=True, help="results directory")
    p.add_argument("--jobs", type=int, default=1,
                   help="worker processes; 1 guarantees timing-quality wall-clocks")

    p = sub.add_parser("report", help="emit comparison tables from a results store")
    p.add_argument("--results", required=True)
    p.add_argument("--metric", choices=("accuracy", "f1w"), default="accuracy")
    p.add_argument("--out", required=True, help="output path prefix")

    p = sub.add_parser("synth", help="generate synthetic corpora and datasets")
    p.add_argument("--kind", choices=("corpus", "paren3", "swapbug2"), required=True)
    p.add_argument("--out", required=True, help="file (corpus) or directory (tasks)")
    p.add_argument("--count", type=int, default=1000, help="corpus line count")
    p.add_argument("--sizes", default="2000,500,500", help="train,valid,test sizes")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-chars", type=int, default=48)

    return parser


def _cmd_pretrain(args) -> int:
    config = parse_config(args.config)
    lines = Path(args.corpus).read_text(encoding="utf-8").splitlines()
    corpus = [tokenize(line, config.model.max_seq) for line in lines if line.strip()]
    hyper = MlmHyper(
        batch_size=config.train.batch_size,
        learning_rate=config.train.learning_rate,
        epochs=config.train.epochs,
    )
    outcome = mlm_pretrain(corpus, config.model, hyper, args.seed)
    save_checkpoint(outcome.checkpoint, args.out)
    losses = " ".join(f"{x:.4f}" for x in outcome.epoch_losses)
    print(f"pretrained {len(corpus)} sequences for {hyper.epochs} epochs; "
          f"loss per epoch: {losses}")
    print(f"checkpoint written to {args.out}")
    return 0


def _cmd_grid(args) -> int:
    config = parse_config(args.config)
    store = run_grid(config, args.ckpt, args.out, jobs=max(1, args.jobs))
    total = len(config.specs) * len(config.train.seeds)
    failures = store.failures
    print(f"grid complete: {total - len(failures)}/{total} runs in {store.directory}")
    if failures:
        for name, message in sorted(failures.items()):
            print(f"FAILED {name}: {message}", file=sys.stderr)
        return 2
    return 0


def _cmd_report(args) -> int:
    store = ResultsStore.open_existing(args.results)
    paths = write_reports(store, args.metric, args.out)
    for path in paths:
        print(f"wrote {path}")
    return 0


def _cmd_synth(args) -> int:
    if args.kind == "corpus":
        lines = gen_corpus(args.count, args.seed, args.max_chars)
        Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
        print(f"wrote {len(lines)} corpus lines to {args.out}")
        return 0
    sizes = tuple(int(x) for x in args.sizes.split(","))
    spec = SyntheticTaskSpec(task=args.kind, sizes=sizes, seed=args.seed,
                             max_chars=args.max_chars)
    splits = gen_synthetic(spec, max_seq=max(64, args.max_chars + 8))
    save_dataset(splits, args.out)
    print(f"wrote {args.kind} splits {sizes} to {args.out}")
    return 0


_COMMANDS = {
    "pretrain": _cmd_pretrain,
    "grid": _cmd_grid,
    "report": _cmd_report,
    "synth": _cmd_synth,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        return _COMMANDS[args.command](args)
    except LayerblendError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
