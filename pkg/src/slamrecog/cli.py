"""``slamrecog`` command-line entry point.

Exit codes: 0 on success, 1 for usage errors (bad flags, bad overrides),
2 for data errors (missing or malformed input files).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import pipeline as P
from .config import PipelineConfig, load_config, save_config
from .evalkit import metrics
from .mapio import DataError, load_image, load_model, load_scene

log = logging.getLogger("slamrecog")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ------------------------------------------------------------------ helpers

def _config(args) -> PipelineConfig:
    if args.config is not None:
        if not Path(args.config).is_file():
            raise DataError(f"--config: no such file {args.config}")
        try:
            cfg = load_config(args.config)
        except ValueError as exc:
            raise DataError(str(exc)) from exc
    else:
        cfg = PipelineConfig()
    try:
        cfg = cfg.with_overrides(args.set or [])
        if getattr(args, "workers", None) is not None:
            cfg = cfg.with_overrides([f"workers={args.workers}"])
        if getattr(args, "seed", None) is not None:
            cfg = cfg.with_overrides([f"seed={args.seed}"])
    except ValueError as exc:
        raise UsageError(f"--set: {exc}") from exc
    return cfg


def _scenes(paths: Sequence[str], flag: str = "--scenes"):
    out = []
    for p in paths:
        if not Path(p).is_dir():
            raise DataError(f"{flag}: no such scene directory {p}")
        out.append(load_scene(p))
    return out


def _load_stage(directory: Path, cls, flag: str):
    if not (directory / "manifest.json").is_file():
        raise DataError(f"{flag}: missing model component {directory}")
    return cls.from_container(load_model(directory))


def _model(path: str, need=("pca", "vocab", "classifier")) -> P.PipelineModel:
    from .classifier import OvaClassifier
    from .codebook import Vocabulary
    from .features import PcaModel
    d = Path(path)
    kinds = {"pca": PcaModel, "vocab": Vocabulary, "classifier": OvaClassifier}
    parts = {k: _load_stage(d / k, kinds[k], "--model") if k in need else None for k in kinds}
    return P.PipelineModel(parts["pca"], parts["vocab"], parts["classifier"])


# settings fixed by an upstream stage; a stored model dictates them downstream
FEATURE_KEYS = ("step", "n_scales", "scale_factor", "support", "pca_dim")
VOCAB_KEYS = FEATURE_KEYS + ("vocab_k",)
MODEL_KEYS = VOCAB_KEYS + ("pyramid", "cell_size", "ssr_alpha", "per_block_norm")


def _adopt(cfg: PipelineConfig, args, component: str, keys: Sequence[str]) -> PipelineConfig:
    """Take descriptor-layout settings from a stored component's manifest."""
    model_dir = args.model
    explicit = {pair.split("=", 1)[0].strip() for pair in args.set or []}
    meta = load_model(Path(model_dir) / component).meta
    stored = meta.get("config") or {}
    pairs = []
    for key in keys:
        if key not in stored:
            continue
        val = stored[key]
        text = ",".join(str(v) for v in val) if isinstance(val, list) else repr(val)
        if key in explicit and getattr(cfg, key) != (tuple(val) if isinstance(val, list) else val):
            log.warning("using stored %s=%s from %s/%s", key, text, model_dir, component)
        pairs.append(f"{key}={text}")
    return cfg.with_overrides(pairs)


def _common(p: argparse.ArgumentParser, workers: bool = False) -> None:
    p.add_argument("--config", help="pipeline config file ([pipeline] key = value)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config value; repeatable")
    p.add_argument("--seed", type=int, help="override the config seed")
    if workers:
        p.add_argument("--workers", type=int, help="frame-parallel worker threads")


# ----------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    from .evalkit.synth import SceneSpec, generate_scene, write_scene
    spec = SceneSpec(n_objects=args.objects, n_frames=args.frames, width=args.width,
                     height=args.height, seed=args.seed)
    try:
        spec.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    scene = generate_scene(spec)
    write_scene(scene, args.out)
    print(f"synth: wrote {len(scene.frames)} frames, {len(scene.objects)} objects, "
          f"{len(scene.cloud)} map points, {len(scene.annotations)} boxes to {args.out} (seed {spec.seed})")
    return EXIT_OK


def cmd_train_pca(args) -> int:
    cfg = _config(args)
    pca = P.train_pca(_scenes(args.scenes), cfg)
    P.save_stage(pca, Path(args.model) / "pca", cfg)
    print(f"train-pca: {pca.mean.shape[0]} -> {pca.out_dim} dims, "
          f"retained variance {pca.explained_variance.sum():.4g}, seed {cfg.seed}, wrote {args.model}/pca")
    return EXIT_OK


def cmd_train_vocab(args) -> int:
    cfg = _config(args)
    m = _model(args.model, need=("pca",))
    cfg = _adopt(cfg, args, "pca", FEATURE_KEYS)
    vocab = P.train_vocab(_scenes(args.scenes), m.pca, cfg)
    P.save_stage(vocab, Path(args.model) / "vocab", cfg)
    print(f"train-vocab: K={vocab.k}, {vocab.iterations} iterations, objective {vocab.objective:.6g}, "
          f"seed {cfg.seed}, wrote {args.model}/vocab")
    return EXIT_OK


def cmd_train_clf(args) -> int:
    from .classifier import write_training_log
    cfg = _config(args)
    m = _model(args.model, need=("pca", "vocab"))
    cfg = _adopt(cfg, args, "vocab", VOCAB_KEYS)
    data = P.collect_training(_scenes(args.scenes), m.pca, m.vocab, cfg)
    if len(set(data.labels)) < 2:
        raise DataError("--scenes: training data holds fewer than two classes")
    clf = P.train_classifier(data, cfg)
    P.save_stage(clf, Path(args.model) / "classifier", cfg)
    write_training_log(clf, Path(args.model) / "classifier" / "training_log.csv")
    acc = float(np.mean(np.array(clf.predict(data.X)) == np.array(data.labels)))
    print(f"train-clf: {len(clf.labels)} classes, {len(data.X)} examples, "
          f"training accuracy {acc:.4f}, seed {cfg.seed}, wrote {args.model}/classifier")
    return EXIT_OK


def cmd_propose(args) -> int:
    from .proposals import write_proposals
    cfg = _config(args)
    scene = _scenes([args.scene], "--scene")[0]
    seeds, per_frame = P.propose(scene, cfg)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_proposals(per_frame, args.out)
    n = sum(len(v) for v in per_frame.values())
    nf = max(len(P.frames_of(scene, cfg)), 1)
    print(f"propose: {len(seeds)} seeds, {n} proposals over {nf} frames "
          f"({n / nf:.2f}/frame), wrote {args.out}")
    return EXIT_OK


def _write_jsonl(rows, path) -> None:
    with open(path, "w") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def cmd_recognize(args) -> int:
    from .aggregation import write_predictions
    from .proposals import read_proposals
    cfg = _config(args)
    scene = _scenes([args.scene], "--scene")[0]
    m = _model(args.model)
    cfg = _adopt(cfg, args, "classifier", MODEL_KEYS)
    props = None
    if args.proposals:
        if not Path(args.proposals).is_file():
            raise DataError(f"--proposals: no such file {args.proposals}")
        props = ([], read_proposals(args.proposals))
    res = P.recognize(scene, m, cfg, props)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    preds = res.predictions()
    write_predictions(preds, out / "predictions.json")
    metrics.write_detections(res.detections("multi"), out / "detections.jsonl")
    extra = ""
    if args.per_frame:
        rows = []
        for (fid, sid), probs in sorted(res.probabilities.items()):
            k = int(np.argmax(probs))
            rows.append({"frame_id": fid, "seed_id": sid, "label": res.labels[k],
                         "score": float(probs[k])})
        _write_jsonl(rows, out / "frame_predictions.jsonl")
        metrics.write_detections(res.detections("single"), out / "detections_single.jsonl")
        extra = f", {len(rows)} per-frame predictions"
    print(f"recognize: {len(preds)} seeds labelled{extra}, wrote {out}")
    return EXIT_OK


def _read_detections(path) -> List[metrics.Detection]:
    if not Path(path).is_file():
        raise DataError(f"--detections: no such file {path}")
    try:
        return metrics.read_detections(path)
    except ValueError as exc:
        raise DataError(str(exc)) from exc


def cmd_eval(args) -> int:
    from .proposals import read_proposals
    scene = _scenes([args.scene], "--scene")[0]
    if not scene.annotations:
        raise DataError(f"--scene: {args.scene} has no annotations.jsonl")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    parts = []
    curve = None
    if args.detections:
        dets = _read_detections(args.detections)
        curve = metrics.pr_curve(dets, scene.annotations, args.iou)
        metrics.write_pr_csv(curve, out / "pr.csv")
        parts.append(f"mAP {curve.mAP:.4f}")
    rows = None
    if args.proposals:
        if not Path(args.proposals).is_file():
            raise DataError(f"--proposals: no such file {args.proposals}")
        per_frame = read_proposals(args.proposals)
        boxes = {fid: [p.box for p in ps] for fid, ps in per_frame.items()}
        rows = metrics.recall_at_iou(boxes, scene.annotations)
        metrics.write_recall_csv(rows, out / "recall.csv")
        r50 = next((r["recall"] for r in rows if abs(r["iou"] - 0.5) < 1e-12), rows[0]["recall"])
        parts.append(f"recall@0.5 {r50:.4f} at {rows[0]['proposals_per_frame']:.2f} proposals/frame")
    if not parts:
        raise UsageError("eval needs --detections and/or --proposals")
    if args.plot:
        from .evalkit import plots
        if curve is not None:
            plots.plot_pr(curve, out / "pr.svg")
        if rows is not None:
            plots.plot_recall({"proposals": rows}, out / "recall.svg")
    print("eval: " + ", ".join(parts) + f", wrote {out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .codebook import fit_kmeans
    from .evalkit.synth import SceneSpec, generate_scene
    from .features import apply_pca, fit_pca, subsample
    cfg = _config(args)
    if args.image:
        if not Path(args.image).is_file():
            raise DataError(f"--image: no such file {args.image}")
        image = load_image(args.image)
    else:
        sc = generate_scene(SceneSpec(n_frames=3, width=args.width, height=args.height, seed=cfg.seed))
        image = sc.images[0]
    if args.model:
        m = _model(args.model, need=("pca", "vocab"))
        cfg = _adopt(cfg, args, "vocab", VOCAB_KEYS)
        pca, vocab = m.pca, m.vocab
    else:
        # fit throwaway PCA and vocabulary on the frame itself
        raw = P.raw_features(image, cfg)
        pca = fit_pca(raw.descriptors, cfg.pca_dim)
        phi = subsample(apply_pca(pca, raw).descriptors, 20000, cfg.seed)
        vocab = fit_kmeans(phi, cfg.vocab_k, cfg.seed, 20)
    rows = P.benchmark(image, pca, vocab, cfg, repeats=args.repeats)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["stage", "n_boxes", "total_s", "per_box_s"])
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in r.items()})
    q = {(r["stage"], r["n_boxes"]): r for r in rows}
    ratio = q[("query_random", 1000)]["per_box_s"] / q[("query_random", 10)]["per_box_s"]
    area = q[("query_full", 100)]["per_box_s"] / q[("query_20x20", 100)]["per_box_s"]
    print(f"bench: {image.shape[1]}x{image.shape[0]}, build {q[('build', 0)]['total_s']:.3f} s, "
          f"per-box 1000/10 ratio {ratio:.3f}, full/20x20 ratio {area:.3f}, wrote {args.out}")
    return EXIT_OK


def cmd_config(args) -> int:
    cfg = _config(args)
    save_config(cfg, args.out)
    print(f"config: wrote {args.out}")
    return EXIT_OK


# ------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="slamrecog", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic annotated scene")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--objects", type=int, default=5)
    p.add_argument("--frames", type=int, default=30)
    p.add_argument("--width", type=int, default=320)
    p.add_argument("--height", type=int, default=240)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-pca", help="fit the descriptor PCA")
    p.add_argument("--scenes", nargs="+", required=True)
    p.add_argument("--model", required=True, help="model directory")
    _common(p, workers=True)
    p.set_defaults(func=cmd_train_pca)

    p = sub.add_parser("train-vocab", help="fit the k-means vocabulary")
    p.add_argument("--scenes", nargs="+", required=True)
    p.add_argument("--model", required=True)
    _common(p, workers=True)
    p.set_defaults(func=cmd_train_vocab)

    p = sub.add_parser("train-clf", help="fit the one-vs-all classifier")
    p.add_argument("--scenes", nargs="+", required=True)
    p.add_argument("--model", required=True)
    _common(p, workers=True)
    p.set_defaults(func=cmd_train_clf)

    p = sub.add_parser("propose", help="cluster the map and project proposals")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True, help="proposals JSONL")
    _common(p)
    p.set_defaults(func=cmd_propose)

    p = sub.add_parser("recognize", help="label every object seed in a scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--proposals", help="reuse a proposals JSONL instead of clustering")
    p.add_argument("--per-frame", action="store_true",
                   help="also write independent per-frame (single-view) predictions")
    _common(p, workers=True)
    p.set_defaults(func=cmd_recognize)

    p = sub.add_parser("eval", help="precision/recall and proposal recall tables")
    p.add_argument("--scene", required=True, help="scene with annotations.jsonl")
    p.add_argument("--detections", help="detections JSONL")
    p.add_argument("--proposals", help="proposals JSONL")
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--plot", action="store_true", help="also render SVG curves")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="time table build and box queries")
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--image", help="frame to benchmark (default: a synthetic frame)")
    p.add_argument("--model", help="model directory with pca and vocab")
    p.add_argument("--width", type=int, default=640)
    p.add_argument("--height", type=int, default=480)
    p.add_argument("--repeats", type=int, default=3)
    _common(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("config", help="write the effective config file")
    p.add_argument("--out", required=True)
    _common(p)
    p.set_defaults(func=cmd_config)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"slamrecog: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as exc:
        print(f"slamrecog: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"slamrecog: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
