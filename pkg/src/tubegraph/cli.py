"""Command line: generate, train, detect, eval, gradcheck.

Exit codes: 0 success, 1 usage error, 2 data error, 3 failed check.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from typing import Optional, Sequence

from . import metrics
from .data.checkpoint import load_checkpoint, save_checkpoint
from .data.dataset import (frame_detections, frame_ground_truth, ground_truth_tubes, linked_tube_detections,
                           load_dataset, snippet_activity_labels, video_snippets, write_dataset)
from .data.schema import (DataError, SnippetRecord, VideoDetections, graphs_to_dict, load_detections,
                          metrics_to_dict, read_json, save_detections, write_json)
from .data.synth import ScenarioConfig
from .pipeline import ActivityModel, Config, TrainingError, detect_activities, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3

log = logging.getLogger("tubegraph")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _thresholds(text: str) -> list[float]:
    try:
        vals = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad IoU list {text!r}")
    if not vals or any(not 0 < v <= 1 for v in vals):
        raise argparse.ArgumentTypeError(f"IoU thresholds must lie in (0, 1], got {text!r}")
    return vals


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tubegraph", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--config", help="scenario config JSON (defaults when omitted)")
    g.add_argument("--out", required=True, help="dataset directory")
    g.add_argument("--seed", type=int, help="override the config seed")

    t = sub.add_parser("train", help="train the snippet classifier")
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="model/training config JSON")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", help="per-epoch JSON-lines log")
    t.add_argument("--val-split", choices=["test"], help="track this split and keep its best epoch")

    d = sub.add_parser("detect", help="classify snippets and emit activity segments")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--split", default="test", choices=["train", "test", "all"])
    d.add_argument("--out", required=True)
    d.add_argument("--dump-graphs", metavar="PATH", help="also write every scene graph")

    e = sub.add_parser("eval", help="score detections against ground truth")
    e.add_argument("--task", required=True, choices=["temporal", "frame", "video", "classify"])
    e.add_argument("--data", required=True)
    e.add_argument("--detections", help="detect output (temporal and classify tasks)")
    e.add_argument("--split", default="test", choices=["train", "test", "all"])
    e.add_argument("--iou", type=_thresholds, default=list(metrics.DEFAULT_THRESHOLDS))
    e.add_argument("--lam", type=float, default=1.0, help="IoU weight when linking micro-tubes")
    e.add_argument("--out", help="metrics JSON path")

    c = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    c.add_argument("--seeds", type=int, default=20)
    c.add_argument("--seed", type=int, default=0, help="first seed")
    return p


def _load_config(path: Optional[str]) -> Config:
    if path is None:
        return Config()
    try:
        return Config.from_dict(read_json(path))
    except (TypeError, ValueError) as exc:
        raise DataError(f"{path}: {exc}") from exc


def cmd_generate(args) -> int:
    d = read_json(args.config) if args.config else {}
    if args.seed is not None:
        d["seed"] = args.seed
    cfg = ScenarioConfig.from_dict(d)
    ds = write_dataset(args.out, cfg)
    print(f"wrote {cfg.n_videos} videos ({len(ds.splits['train'])} train, "
          f"{len(ds.splits['test'])} test) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    ds = load_dataset(args.data)
    snippets = ds.snippets("train", cfg.delta)
    val = ds.snippets(args.val_split, cfg.delta) if args.val_split else None
    rows = []
    t0 = time.time()

    def on_epoch(row):
        rows.append(row)
        log.info("epoch %d loss %.5f acc %.4f", row["epoch"], row["loss"], row["train_acc"])

    result = train(snippets, cfg, val, ds.scenario.channels, len(ds.activity_labels), on_epoch)
    meta = {**result.model.meta(), "activity_labels": ds.activity_labels, "epoch": result.best_epoch}
    save_checkpoint(args.out, result.model.state_dict(), meta)
    if args.log:
        with open(args.log, "w", encoding="utf-8") as fh:
            for row in rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
    last = rows[-1] if rows else {"loss": float("nan"), "train_acc": float("nan")}
    print(f"trained {cfg.epochs} epochs on {len(snippets)} snippets in {time.time() - t0:.1f}s: "
          f"loss {last['loss']:.4f}, train acc {last['train_acc']:.4f}; kept epoch {result.best_epoch}")
    return EXIT_OK


def cmd_detect(args) -> int:
    params, meta = load_checkpoint(args.checkpoint)
    model = ActivityModel.from_checkpoint(params, meta)
    ds = load_dataset(args.data)
    if meta.get("activity_labels", ds.activity_labels) != ds.activity_labels:
        raise DataError(f"{args.checkpoint}: activity vocabulary differs from {args.data}")
    videos, graphs = [], {}
    for vid in ds.video_ids(args.split):
        snippets = video_snippets(ds.annotation(vid), ds.detections(vid), ds.scenario, model.config.delta)
        preds, _, segs = detect_activities(snippets, model)
        videos.append(VideoDetections(vid, segs, [
            SnippetRecord(p.snippet_index, p.label, [float(v) for v in p.probabilities], p.node_count)
            for p in preds]))
        if args.dump_graphs:
            _, gs = model.forward(snippets)
            graphs[vid] = [{"snippet": s.index, **g.to_dict()} for s, g in zip(snippets, gs)]
    save_detections(args.out, videos, ds.activity_labels)
    if args.dump_graphs:
        write_json(args.dump_graphs, graphs_to_dict(graphs))
    print(f"wrote {sum(len(v.segments) for v in videos)} segments for {len(videos)} videos to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ds = load_dataset(args.data)
    protocol = {"split": args.split, "iou": args.iou,
                "ap": "non-interpolated, precision at each true positive rank, TP before FP on equal scores",
                "matching": "score-descending, best unused IoU >= threshold; equal-score groups jointly by "
                            "(matches, total IoU), then smallest set of GT indices",
                "mean": "over classes with ground truth"}
    if args.task in ("temporal", "classify"):
        if not args.detections:
            raise UsageError(f"eval --task {args.task} needs --detections")
        videos, _ = load_detections(args.detections)
        protocol["detections"] = args.detections
        wanted = set(ds.video_ids(args.split))
        videos = [v for v in videos if v.video_id in wanted]
        if not videos:
            raise DataError(f"{args.detections}: no videos of split {args.split!r}")
    if args.task == "temporal":
        gt = {v.video_id: ds.annotation(v.video_id).activities for v in videos}
        det = {v.video_id: v.segments for v in videos}
        results = {str(t): metrics.temporal_detection_map(det, gt, t) for t in args.iou}
    elif args.task == "classify":
        pred, true = [], []
        for v in videos:
            labels = snippet_activity_labels(ds.annotation(v.video_id), ds.scenario.snippet_len)
            for s in v.snippets:
                pred.append(s.label)
                true.append(labels[s.index])
        for k in ("iou", "ap", "matching", "mean"):
            protocol.pop(k)
        results = metrics.classification_report(pred, true, range(len(ds.activity_labels)))
    else:
        dets, gts = [], []
        for vid in ds.video_ids(args.split):
            ann, det = ds.annotation(vid), ds.detections(vid)
            if args.task == "frame":
                dets += frame_detections(det)
                gts += frame_ground_truth(ann)
            else:
                dets += linked_tube_detections(det, ds.scenario.snippet_len, lam=args.lam)
                gts += ground_truth_tubes(ann)
        fn = metrics.frame_map if args.task == "frame" else metrics.video_map
        if args.task == "video":
            protocol["lam"] = args.lam
        results = {str(t): fn(dets, gts, t) for t in args.iou}
    if args.out:
        write_json(args.out, metrics_to_dict(args.task, protocol, results))
    if args.task == "classify":
        print(f"accuracy {results['accuracy']:.4f}  macro F1 {results['macro']['f1']:.4f}")
    else:
        print(metrics.format_map_table({args.task: {float(t): r["mAP"] for t, r in results.items()}}))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_suite

    results = run_suite(range(args.seed, args.seed + args.seeds))
    worst: dict[str, float] = {}
    for r in results:
        worst[r.name] = max(worst.get(r.name, 0.0), r.error)
    for name, err in worst.items():
        print(f"{'ok  ' if err < TOLERANCE else 'FAIL'} {name:<34} max rel err {err:.2e}")
    failed = [n for n, e in worst.items() if not e < TOLERANCE]
    print(f"{len(worst) - len(failed)}/{len(worst)} operations pass over {args.seeds} seeds")
    return EXIT_OK if not failed else EXIT_CHECK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "detect": cmd_detect,
            "eval": cmd_eval, "gradcheck": cmd_gradcheck}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"tubegraph: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, TrainingError) as exc:
        print(f"tubegraph: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
