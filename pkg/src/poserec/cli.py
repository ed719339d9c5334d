"""Command-line entry point: ``poserec <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .dataio import Dataset, SynthSpec, generate_synthetic, load_poses, split_dataset
from .errors import DataError, NumericalError, PoseRecError, UsageError
from .evaluator import (
    DEFAULT_KS,
    EvalReport,
    SWEEP_AXES,
    build_item_index,
    evaluate_model,
    export_embeddings,
    pop_baseline,
    random_baseline,
    recommend,
    sweep,
)
from .trainer import TrainConfig, load_model, micro_gradcheck, read_config_file, sliding_windows, train

log = logging.getLogger("poserec")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> tuple:
    try:
        return tuple(int(x) for x in text.split(",") if x)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _pair(text: str) -> tuple:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    key, value = text.split("=", 1)
    return key.strip(), value.strip()


def _add_data_flags(p, required: bool) -> None:
    p.add_argument("--poses", required=required, help="pose JSON Lines file")
    p.add_argument("--items", required=required, help="binary item file")
    p.add_argument("--labels", required=required, help="label CSV")


def _add_config_flags(p) -> None:
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", dest="overrides", action="append", type=_pair, default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--seed", type=int, help="seed for initialisation, shuffling and mining")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="poserec", description="Pose-driven item recommendation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a planted synthetic dataset")
    p.add_argument("--spec", help="key=value file of generator settings")
    p.add_argument("--set", dest="overrides", action="append", type=_pair, default=[], metavar="KEY=VALUE")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a model on the training split")
    _add_data_flags(p, required=True)
    _add_config_flags(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="evaluate a checkpoint with baselines")
    p.add_argument("--checkpoint", required=True)
    _add_data_flags(p, required=False)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--protocol", choices=("ins", "cat", "both"), default="both")
    p.add_argument("--k", type=_int_list, default=DEFAULT_KS)
    p.add_argument("--seed", type=int, help="seed for the Random baseline")
    p.add_argument("--out", help="directory for report.csv")

    p = sub.add_parser("recommend", help="print the top items for one video")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--video", required=True, help="pose file holding the video")
    p.add_argument("--video-id", help="which video, when the file holds several")
    p.add_argument("--items", help="item file (defaults to the one used in training)")
    p.add_argument("--top", type=int, default=10)

    p = sub.add_parser("sweep", help="retrain along one ablation axis")
    p.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p.add_argument("--values", required=True, help="comma-separated axis values")
    _add_data_flags(p, required=True)
    _add_config_flags(p)
    p.add_argument("--k", type=_int_list, default=DEFAULT_KS)
    p.add_argument("--out", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full loss")
    _add_config_flags(p)
    p.add_argument("--entries", type=int, default=12, help="sampled coordinates per parameter")
    p.add_argument("--factor-dim", type=int, default=768)

    p = sub.add_parser("export-emb", help="write item and prototype embeddings as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--items", help="item file (defaults to the one used in training)")
    p.add_argument("--out", required=True, help="output CSV path")
    return parser


# ---------------------------------------------------------------- helpers


def effective_config(args) -> TrainConfig:
    """Defaults, then the config file, then --set overrides, then --seed."""
    values = read_config_file(args.config) if getattr(args, "config", None) else {}
    values.update(dict(args.overrides))
    if getattr(args, "seed", None) is not None:
        values["seed"] = str(args.seed)
    return TrainConfig.from_mapping(values)


def _write_config(out: Path, config: TrainConfig) -> None:
    (out / "config.txt").write_text("\n".join(config.to_lines()) + "\n")


def _data_paths(args, meta: dict) -> tuple:
    stored = meta.get("data", {})
    paths = []
    for key in ("poses", "items", "labels"):
        value = getattr(args, key, None) or stored.get(key)
        if not value:
            raise UsageError(f"--{key} is required (the checkpoint does not record it)")
        paths.append(value)
    return tuple(paths)


def _splits(dataset: Dataset, config: TrainConfig) -> dict:
    tr, va, te = split_dataset(dataset.videos, seed=config.split_seed)
    return {"train": dataset.subset(tr), "val": dataset.subset(va), "test": dataset.subset(te)}


# ---------------------------------------------------------------- subcommands


def cmd_synth(args) -> int:
    values = read_config_file(args.spec) if args.spec else {}
    values.update(dict(args.overrides))
    if args.seed is not None:
        values["seed"] = str(args.seed)
    spec = SynthSpec.from_mapping(values)
    out = Path(args.out)
    paths = generate_synthetic(spec, out)
    (out / "spec.txt").write_text("".join(f"{k}={v}\n" for k, v in vars(spec).items()))
    for p in paths:
        print(p)
    return EXIT_OK


def cmd_train(args) -> int:
    config = effective_config(args)
    dataset = Dataset.load(args.poses, args.items, args.labels)
    parts = _splits(dataset, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_config(out, config)
    (out / "split.json").write_text(
        json.dumps({k: [v.video_id for v in d.videos] for k, d in parts.items()}, indent=1) + "\n"
    )
    # the sidecar records the data paths so eval and recommend can find them
    data = {k: str(Path(getattr(args, k)).resolve()) for k in ("poses", "items", "labels")}
    result = train(parts["train"], config, val=parts["val"], out_dir=out, meta={"data": data})
    last = result.epoch_log[-1]
    print(f"trained {config.epochs} epochs; val R@{config.val_k}={last['val_recall']:.4f}; checkpoint {result.checkpoint}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, config, meta = load_model(args.checkpoint)
    dataset = Dataset.load(*_data_paths(args, meta))
    parts = _splits(dataset, config)
    target, train_part = parts[args.split], parts["train"]
    seed = config.seed if args.seed is None else args.seed
    protocols = ("ins", "cat") if args.protocol == "both" else (args.protocol,)
    report = EvalReport()
    for protocol in protocols:
        report.extend(evaluate_model(model, target, config, protocol, args.k))
        report.extend(random_baseline(target, protocol, args.k, seed))
        report.extend(pop_baseline(train_part, target, protocol, args.k))
    print(",".join(["protocol", "k", "recall", "ndcg", "model"]))
    for r in report.rows:
        print(f"{r['protocol']},{r['k']},{r['recall']:.4f},{r['ndcg']:.4f},{r['model']}")
    if report.skipped:
        print(f"# {report.skipped} videos skipped (no positives or too short)", file=sys.stderr)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        report.write_csv(out / "report.csv")
    return EXIT_OK


def _load_items_for(args, meta):
    from .dataio import load_items

    path = args.items or meta.get("data", {}).get("items")
    if not path:
        raise UsageError("--items is required (the checkpoint does not record it)")
    return load_items(path)


def cmd_recommend(args) -> int:
    if args.top < 1:
        raise UsageError("--top must be >= 1")
    model, config, meta = load_model(args.checkpoint)
    videos = load_poses(args.video)
    if args.video_id:
        chosen = [v for v in videos if v.video_id == args.video_id]
        if not chosen:
            raise DataError(f"video {args.video_id!r} not found in {args.video}")
    elif len(videos) != 1:
        raise UsageError(f"{args.video} holds {len(videos)} videos; pick one with --video-id")
    else:
        chosen = videos
    windows = sliding_windows(chosen[0], config.window_len, config.window_step)
    if not windows:
        raise DataError(f"video {chosen[0].video_id} is shorter than one window ({config.window_len} frames)")
    index = build_item_index(model, _load_items_for(args, meta), config.mask)
    for rank, (iid, score) in enumerate(recommend(model, np.stack(windows), index, args.top), 1):
        print(f"{rank},{iid},{score:.6f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    config = effective_config(args)
    dataset = Dataset.load(args.poses, args.items, args.labels)
    parts = _splits(dataset, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_config(out, config)
    values = [v for v in args.values.split(",") if v]
    points = sweep(args.axis, values, parts["train"], parts["val"], parts["test"], config, out, args.k)
    for point in points:
        r = point.report.row("ins", args.k[0])
        print(f"{args.axis}={point.value}: ins R@{args.k[0]}={r['recall']:.4f} N@{args.k[0]}={r['ndcg']:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    config = effective_config(args)
    report = micro_gradcheck(config, max_entries=args.entries, factor_dim=args.factor_dim)
    for name, err in report.per_param.items():
        print(f"{name},{err:.3e}")
    print(f"max_rel_error,{report.max_rel_error:.3e}")
    if not report.max_rel_error < 1e-4:
        print(f"gradient check failed for {', '.join(report.failing)}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_export(args) -> int:
    model, config, meta = load_model(args.checkpoint)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    export_embeddings(model, _load_items_for(args, meta), out, config.mask)
    print(out)
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "recommend": cmd_recommend,
    "sweep": cmd_sweep,
    "gradcheck": cmd_gradcheck,
    "export-emb": cmd_export,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"poserec: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"poserec: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"poserec: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"poserec: {exc}", file=sys.stderr)
        return EXIT_DATA
    except PoseRecError as exc:
        print(f"poserec: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
