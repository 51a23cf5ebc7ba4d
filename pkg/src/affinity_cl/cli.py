"""Command-line interface.

Subcommands: gen-data, train, eval, affinity-report, grad-check, plot.
Exit codes: 0 success, 1 validation error, 2 numerical failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .data import GenConfig, generate_synthetic, load_dataset, split_dataset, write_dataset
from .errors import FormatError, NumericalError, ValidationError
from .losses import gradient_check_report
from .trainer import (TrainConfig, evaluate, load_checkpoint, save_checkpoint,
                      train)

GRAD_CHECK_THRESHOLD = 1e-4


def _load_json(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"malformed JSON in {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ValidationError(f"{path} must contain a JSON object")
    return raw


def cmd_gen_data(args) -> int:
    cfg = GenConfig.from_dict(_load_json(args.config))
    dataset = generate_synthetic(cfg)
    write_dataset(dataset, args.out)
    print(f"wrote {len(dataset)} samples across {dataset.class_count} classes "
          f"to {args.out}")
    return 0


def cmd_train(args) -> int:
    raw = _load_json(args.config)
    if args.seed is not None:
        raw["seed"] = args.seed
    cfg = TrainConfig.from_dict(raw)
    dataset = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    checkpoint, history = train(cfg, dataset, metrics_path=out / "metrics.jsonl")
    save_checkpoint(checkpoint, out / "checkpoint")

    _, eval_split = split_dataset(dataset, cfg.train_fraction, cfg.seed)
    from .trainer import _forward_values  # plotting support, not a public API
    _, embeddings = _forward_values(checkpoint.params, dataset.graph,
                                    eval_split.samples)
    affinity = checkpoint.affinity
    plotdata = {
        "eval_embeddings": embeddings.tolist(),
        "eval_labels": [int(l) for l in eval_split.labels],
        "w": affinity.w.tolist() if affinity is not None else None,
        "families": ([list(f) for f in affinity.families]
                     if affinity is not None else None),
    }
    (out / "plotdata.json").write_text(
        json.dumps(plotdata, sort_keys=True) + "\n", encoding="utf-8")

    tail = history[-1]
    print(f"trained {cfg.epochs} epochs: eval accuracy "
          f"{tail.eval_accuracy:.4f}, family recovery {tail.family_recovery}")
    return 0


def cmd_eval(args) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    cfg = checkpoint.config
    train_split, eval_split = split_dataset(dataset, cfg.train_fraction, cfg.seed)
    split = train_split if args.split == "train" else eval_split
    result = evaluate(checkpoint, split)
    print(json.dumps({
        "split": args.split,
        "accuracy": result.accuracy,
        "per_class_accuracy": result.per_class_accuracy.tolist(),
        "confusion": result.confusion.tolist(),
    }, sort_keys=True))
    return 0


def cmd_affinity_report(args) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    model = checkpoint.affinity
    report = {
        "confusion": checkpoint.confusion.counts.tolist(),
        "total_recorded": checkpoint.confusion.total_recorded,
        "family_size_excludes_anchor": True,
        "neighbor_sets": [list(s) for s in model.neighbor_sets] if model else None,
        "w": model.w.tolist() if model else None,
        "families": [list(f) for f in model.families] if model else None,
        "temperatures": list(model.temperatures) if model else None,
        "k": model.k if model else None,
        "n_a": model.n_a if model else None,
    }
    Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n",
                              encoding="utf-8")
    print(f"wrote affinity report to {args.out}")
    return 0


def cmd_grad_check(args) -> int:
    report = gradient_check_report(trials=args.trials, step=args.step)
    worst = max(report.values())
    for name in sorted(report):
        status = "ok" if report[name] <= GRAD_CHECK_THRESHOLD else "FAIL"
        print(f"{name:6s} max relative error {report[name]:.3e}  [{status}]")
    if worst > GRAD_CHECK_THRESHOLD:
        raise NumericalError(
            f"gradient check failed: max relative error {worst:.3e} "
            f"> {GRAD_CHECK_THRESHOLD}")
    return 0


def cmd_plot(args) -> int:
    from . import plots

    rows = plots.load_metrics_rows(args.metrics)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    plots.plot_loss_curves(rows, out / "loss_curves.svg")
    plots.plot_accuracy_curves(rows, out / "accuracy_curves.svg")
    written = ["loss_curves.svg", "accuracy_curves.svg"]

    # train drops a plotdata.json next to metrics.jsonl; the scatter and
    # heatmap are produced whenever it is present
    aux_path = Path(args.aux) if args.aux else Path(args.metrics).parent / "plotdata.json"
    if aux_path.exists():
        aux = json.loads(aux_path.read_text(encoding="utf-8"))
        if aux.get("eval_embeddings"):
            plots.plot_embedding_scatter(np.asarray(aux["eval_embeddings"]),
                                         aux["eval_labels"],
                                         out / "embedding_pca.svg")
            written.append("embedding_pca.svg")
        if aux.get("w"):
            plots.plot_family_heatmap(np.asarray(aux["w"]),
                                      out / "family_heatmap.svg")
            written.append("family_heatmap.svg")
    else:
        print(f"note: {aux_path} not found; skipping embedding and heatmap plots",
              file=sys.stderr)
    print(f"wrote {', '.join(written)} to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="affinity-cl",
        description="Affinity contrastive learning on synthetic skeleton data.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--config", required=True, help="generator config JSON")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train on a dataset directory")
    p.add_argument("--config", required=True, help="train config JSON")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output run directory")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", choices=("train", "eval"), default="eval")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("affinity-report", help="dump the affinity state as JSON")
    p.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p.add_argument("--out", required=True, help="output JSON file")
    p.set_defaults(func=cmd_affinity_report)

    p = sub.add_parser("grad-check", help="finite-difference gradient checks")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--step", type=float, default=1e-5)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("plot", help="render SVG figures from a metrics file")
    p.add_argument("--metrics", required=True, help="metrics JSONL file")
    p.add_argument("--out", required=True, help="output directory for SVGs")
    p.add_argument("--aux", default=None,
                   help="plotdata.json path (default: next to the metrics file)")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except (FormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
