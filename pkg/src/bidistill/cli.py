"""Command-line entry point: generate -> render -> extract -> distill -> eval."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import formats
from .distill import DistillConfig, DistillError, Mode, run_alignment, write_loss_csv
from .evaluate import (MetricsReport, UNASSIGNED, corpus_iou, coverage, exclude_uncovered,
                       iou_2d_terms, voting_baseline, write_report)
from .geom import PointCloudShape, make_view_ring, render_view
from .student import EncoderConfig, read_features
from .synth import TEMPLATES, generate_corpus
from .teacher import MockTeacherConfig, TeacherKind, dump_predictions, extract_knowledge, \
    load_predictions, mock_vlm_predict

log = logging.getLogger("bidistill")

DEFAULTS = {
    "views": 10,
    "image_size": 224,
    "splat_radius": 3.0,
    "tau": 0.01,
    "epochs": 25,
    "lr": 0.001,
    "batch": 16,
    "mode": "pre",
    "teacher": "mock",
    "teacher_kind": "box",
    "drop_rate": 0.2,
    "flip_rate": 0.15,
    "confidence": "0.5:0.9",
    "box_jitter": 0,
    "seed": 0,
    "count": 20,
    "category": "chair",
    "points": 2048,
    "few_shot_weight": 1.0,
    "no_backward_distill": False,
    "preserve_part_mass": False,
    "exclude_uncovered": False,
    "dump_images": False,
}
_BOOL = {"no_backward_distill", "preserve_part_mass", "exclude_uncovered", "dump_images"}
_TYPES = {"views": int, "image_size": int, "splat_radius": float, "tau": float, "epochs": int,
          "lr": float, "batch": int, "box_jitter": int, "seed": int, "count": int, "points": int,
          "drop_rate": float, "flip_rate": float, "few_shot_weight": float}


class UsageError(Exception):
    pass


def threads() -> int:
    cap = os.environ.get("PARTDISTILL_THREADS")
    n = os.cpu_count() or 1
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise UsageError(f"PARTDISTILL_THREADS must be an integer, got {cap!r}") from None
    return n


def _pmap(fn, items):
    items = list(items)
    n = threads()
    if n == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(n) as pool:
        return list(pool.map(fn, items))


def teacher_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, 1, index]).generate_state(1)[0])


def _confidence(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(v) for v in str(text).split(":"))
    except ValueError:
        raise UsageError(f"--confidence expects LO:HI, got {text!r}") from None
    return lo, hi


def _require_dir(path, what) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise FileNotFoundError(f"{what} directory not found: {p}")
    return p


def _require_file(path, what) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def distill_config(args) -> DistillConfig:
    try:
        return DistillConfig(epochs=args.epochs, lr=args.lr, batch_size_shapes=args.batch,
                             tau=args.tau, mode=Mode(args.mode),
                             backward_distillation=not args.no_backward_distill, seed=args.seed,
                             preserve_part_mass=args.preserve_part_mass,
                             few_shot_weight=args.few_shot_weight if args.few_shot_labels else 0.0)
    except DistillError as exc:
        raise UsageError(str(exc)) from None


def teacher_config(args, seed: int) -> MockTeacherConfig:
    try:
        return MockTeacherConfig(kind=TeacherKind(args.teacher_kind), drop_rate=args.drop_rate,
                                 flip_rate=args.flip_rate,
                                 confidence_range=_confidence(args.confidence),
                                 box_jitter=args.box_jitter, seed=seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def echo_config(args) -> dict:
    keys = sorted(DEFAULTS)
    out = {k: getattr(args, k) for k in keys if hasattr(args, k)}
    if getattr(args, "few_shot_labels", None):
        out["few_shot_labels"] = str(args.few_shot_labels)
    return out


# --- stages -----------------------------------------------------------------

def stage_generate(args, out: Path) -> list[Path]:
    if args.category not in TEMPLATES:
        raise UsageError(f"unknown category {args.category!r}; choose from {sorted(TEMPLATES)}")
    template = replace(TEMPLATES[args.category], points_per_shape=args.points)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for shape in generate_corpus(template, args.count, args.seed):
        path = out / f"{shape.shape_id}.xyzl"
        formats.write_xyzl(shape, path)
        paths.append(path)
    return paths


def stage_render(args, corpus_dir: Path, out: Path) -> list[Path]:
    corpus = formats.read_corpus(_require_dir(corpus_dir, "corpus"))
    cams = make_view_ring(args.views, (args.image_size, args.image_size))
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for shape in corpus:
        views = _pmap(lambda vc: render_view(vc[1], shape, args.splat_radius, view_index=vc[0]),
                      enumerate(cams))
        path = out / f"{shape.shape_id}.views.npz"
        formats.save_views(views, path)
        paths.append(path)
        if args.dump_images:
            for v in views:
                for kind, img, writer in (("depth", formats.depth_image(v), formats.write_pgm),):
                    p = out / f"{shape.shape_id}.v{v.view_index:02d}.{kind}.pgm"
                    writer(img, p)
                    paths.append(p)
                if shape.labels is not None:
                    p = out / f"{shape.shape_id}.v{v.view_index:02d}.gt.ppm"
                    formats.write_ppm(formats.label_image(v, shape.labels), p)
                    paths.append(p)
    return paths


def _prediction_file(args, shape: PointCloudShape, n_shapes: int) -> Path:
    if not args.predictions:
        raise UsageError("--teacher file requires --predictions PATH")
    p = Path(args.predictions)
    if p.is_dir():
        return _require_file(p / f"{shape.shape_id}.ndjson", "prediction file")
    if n_shapes != 1:
        raise UsageError("a single prediction file only fits a one-shape corpus; pass a directory")
    return _require_file(p, "prediction file")


def stage_extract(args, corpus_dir: Path, views_dir: Path, out: Path) -> list[Path]:
    corpus = formats.read_corpus(_require_dir(corpus_dir, "corpus"))
    _require_dir(views_dir, "views")
    out.mkdir(parents=True, exist_ok=True)
    if args.teacher == "file" and not args.predictions:
        raise UsageError("--teacher file requires --predictions PATH")

    def one(item):
        i, shape = item
        views = formats.load_views(_require_file(views_dir / f"{shape.shape_id}.views.npz", "views"))
        written = []
        if args.teacher == "mock":
            preds = mock_vlm_predict(shape, views, teacher_config(args, teacher_seed(args.seed, i)))
            pred_path = out / f"{shape.shape_id}.ndjson"
            dump_predictions(preds, pred_path)
            written.append(pred_path)
        else:
            preds = load_predictions(_prediction_file(args, shape, len(corpus)),
                                     image_size=views[0].image_size, num_parts=shape.num_parts)
        units = extract_knowledge(shape.shape_id, views, preds, shape.num_points)
        path = out / f"{shape.shape_id}.units.npz"
        formats.save_units(units, shape.num_points, shape.num_parts, path)
        return written + [path]

    return [p for ps in _pmap(one, enumerate(corpus)) for p in ps]


def _few_shot(args, corpus) -> dict[str, np.ndarray]:
    if not args.few_shot_labels:
        return {}
    ids = _require_file(args.few_shot_labels, "few-shot label list").read_text().split()
    by_id = {s.shape_id: s for s in corpus}
    out = {}
    for sid in ids:
        if sid not in by_id:
            raise UsageError(f"few-shot shape {sid!r} is not in the corpus")
        if by_id[sid].labels is None:
            raise UsageError(f"few-shot shape {sid!r} has no labels")
        out[sid] = by_id[sid].labels
    return out


def stage_distill(args, corpus_dir: Path, units_dir: Path, out: Path) -> list[Path]:
    corpus = formats.read_corpus(_require_dir(corpus_dir, "corpus"))
    config = distill_config(args)
    if config.mode == Mode.TTA and len(corpus) != 1:
        raise UsageError(f"--mode tta needs a single-shape corpus, found {len(corpus)} shapes")
    _require_dir(units_dir, "units")
    units = {s.shape_id: formats.load_units(_require_file(units_dir / f"{s.shape_id}.units.npz",
                                                          "units"), s.shape_id)
             for s in corpus}
    features = None
    if getattr(args, "features", None):
        fdir = _require_dir(args.features, "features")
        features = {s.shape_id: read_features(_require_file(fdir / f"{s.shape_id}.feat", "features"))
                    for s in corpus}
    result = run_alignment(corpus, units, config, EncoderConfig(), features=features,
                           few_shot_labels=_few_shot(args, corpus))
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "model.npz", out / "loss.csv", out / "alignment.json"]
    result.model.save(paths[0])
    write_loss_csv(result.history, paths[1])
    meta = {"trigger_epoch": result.trigger_epoch, "warnings": result.warnings,
            "part_weights": result.part_weights.tolist()}
    paths[2].write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    for shape in corpus:
        labels = np.argmax(result.final_probs[shape.shape_id], axis=1)
        p = out / f"{shape.shape_id}.pred"
        formats.write_pred(labels, p)
        u = out / f"{shape.shape_id}.units.npz"
        formats.save_units(result.units[shape.shape_id], shape.num_points, shape.num_parts, u)
        paths += [p, u]
    return paths


def stage_eval(args, corpus_dir: Path, views_dir: Path, distill_dir: Path, out: Path) -> list[Path]:
    corpus = formats.read_corpus(_require_dir(corpus_dir, "corpus"))
    _require_dir(distill_dir, "distill output")
    r = corpus[0].num_parts
    preds, gts, base_preds = [], [], []
    view_records = []
    unc_total, unc_right = 0, 0
    m2d, m2d_resc = [], []
    trigger = None
    meta_path = distill_dir / "alignment.json"
    if meta_path.is_file():
        trigger = json.loads(meta_path.read_text()).get("trigger_epoch")
    for shape in corpus:
        if shape.labels is None:
            raise UsageError(f"{shape.shape_id} has no ground-truth labels")
        units = formats.load_units(_require_file(distill_dir / f"{shape.shape_id}.units.npz",
                                                 "units"), shape.shape_id)
        pred = formats.read_pred(_require_file(distill_dir / f"{shape.shape_id}.pred", "predictions"))
        if len(pred) != shape.num_points:
            raise UsageError(f"{shape.shape_id}: prediction length does not match the shape")
        covered = coverage(units, shape.num_points)
        unc = ~covered & (shape.labels >= 0)
        unc_total += int(unc.sum())
        unc_right += int((pred[unc] == shape.labels[unc]).sum())
        if args.exclude_uncovered:
            pred = exclude_uncovered(pred, covered)
        preds.append(pred)
        gts.append(shape.labels)
        base_preds.append(voting_baseline(shape.num_points, units, r))
        vpath = views_dir / f"{shape.shape_id}.views.npz"
        if vpath.is_file():
            views = formats.load_views(vpath)
            rescored = bool(units) and all(u.rescored_confidence is not None for u in units)
            before = iou_2d_terms(views, units, shape.labels, r, False)
            after = iou_2d_terms(views, units, shape.labels, r, True) if rescored else None
            for k, t in enumerate(before):
                rec = {"shape": shape.shape_id, "view": t.view_index, "part": t.part, "iou": t.iou}
                if after is not None:
                    rec["iou_rescored"] = after[k].iou
                view_records.append(rec)
            m2d += [t.iou for t in before if t.iou is not None]
            if after is not None:
                m2d_resc += [t.iou for t in after if t.iou is not None]
    student = corpus_iou(preds, gts, r)
    base = corpus_iou(base_preds, gts, r)
    report = MetricsReport(
        per_part_iou_3d=student.per_part, miou_3d=student.miou,
        part_names=corpus[0].part_names,
        baseline_miou_3d=base.miou, baseline_per_part_iou_3d=base.per_part,
        miou_2d=float(np.mean(m2d)) if m2d else None,
        miou_2d_rescored=float(np.mean(m2d_resc)) if m2d_resc else None,
        per_view_part_iou_2d=view_records or None,
        uncovered_count=unc_total,
        uncovered_accuracy=unc_right / unc_total if unc_total else None,
        exclude_uncovered=bool(args.exclude_uncovered), num_shapes=len(corpus),
        trigger_epoch=trigger, config=echo_config(args), seed=args.seed)
    out.mkdir(parents=True, exist_ok=True)
    path = write_report(report, out / "report.json")
    paths = [path]
    if args.dump_images and vpath.is_file():
        for shape, pred in zip(corpus, preds):
            for v in formats.load_views(views_dir / f"{shape.shape_id}.views.npz"):
                p = out / f"{shape.shape_id}.v{v.view_index:02d}.seg.ppm"
                formats.write_ppm(formats.label_image(v, np.where(pred == UNASSIGNED, -1, pred)), p)
                paths.append(p)
    return paths


def stage_pipeline(args, out: Path) -> list[Path]:
    corpus_dir, views_dir = out / "corpus", out / "views"
    units_dir, distill_dir = out / "units", out / "distill"
    if args.corpus:
        corpus_dir = _require_dir(args.corpus, "corpus")
        paths = []
    else:
        paths = stage_generate(args, corpus_dir)
    if args.mode == "tta" and len(formats.list_corpus(corpus_dir)) != 1:
        raise UsageError("--mode tta needs a single-shape corpus")
    paths += stage_render(args, corpus_dir, views_dir)
    paths += stage_extract(args, corpus_dir, views_dir, units_dir)
    paths += stage_distill(args, corpus_dir, units_dir, distill_dir)
    paths += stage_eval(args, corpus_dir, views_dir, distill_dir, out)
    return paths


# --- argument handling ------------------------------------------------------

def _add_common(p: argparse.ArgumentParser, *groups: str) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--config", help="key = value file; flags override it")
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--out", required=True, help="output directory")
    if "generate" in groups:
        p.add_argument("--count", type=int, default=S)
        p.add_argument("--category", choices=sorted(TEMPLATES), default=S)
        p.add_argument("--points", type=int, default=S)
    if "render" in groups:
        p.add_argument("--views", type=int, default=S)
        p.add_argument("--image-size", type=int, default=S)
        p.add_argument("--splat-radius", type=float, default=S)
        p.add_argument("--dump-images", action="store_true", default=S)
    if "extract" in groups:
        p.add_argument("--teacher", choices=["mock", "file"], default=S)
        p.add_argument("--teacher-kind", choices=["box", "pixel"], default=S)
        p.add_argument("--predictions", default=None)
        p.add_argument("--drop-rate", type=float, default=S)
        p.add_argument("--flip-rate", type=float, default=S)
        p.add_argument("--confidence", default=S, help="LO:HI")
        p.add_argument("--box-jitter", type=int, default=S)
    if "distill" in groups:
        p.add_argument("--tau", type=float, default=S)
        p.add_argument("--epochs", type=int, default=S)
        p.add_argument("--lr", type=float, default=S)
        p.add_argument("--batch", type=int, default=S)
        p.add_argument("--mode", choices=["pre", "tta"], default=S)
        p.add_argument("--no-backward-distill", action="store_true", default=S)
        p.add_argument("--preserve-part-mass", action="store_true", default=S,
                       help="keep per-part confidence mass fixed across re-scoring")
        p.add_argument("--few-shot-labels", default=None)
        p.add_argument("--few-shot-weight", type=float, default=S)
        p.add_argument("--features", default=None, help="directory of <shape_id>.feat files")
    if "eval" in groups:
        p.add_argument("--exclude-uncovered", action="store_true", default=S)
        if "dump" not in groups:
            p.add_argument("--dump-images", action="store_true", default=S)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bidistill", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a procedural .xyzl corpus")
    _add_common(p, "generate")

    p = sub.add_parser("render", help="render multi-view z-buffered splats")
    p.add_argument("--corpus", required=True)
    _add_common(p, "render")

    p = sub.add_parser("extract", help="teacher predictions -> knowledge units")
    p.add_argument("--corpus", required=True)
    p.add_argument("--views-dir", required=True)
    _add_common(p, "extract")

    p = sub.add_parser("distill", help="align the student on knowledge units")
    p.add_argument("--corpus", required=True)
    p.add_argument("--units", required=True)
    _add_common(p, "distill")

    p = sub.add_parser("eval", help="score predictions and write report.json")
    p.add_argument("--corpus", required=True)
    p.add_argument("--views-dir", required=True)
    p.add_argument("--distill-dir", required=True)
    _add_common(p, "eval")

    p = sub.add_parser("pipeline", help="generate, render, extract, distill and eval in one go")
    p.add_argument("--corpus", default=None, help="use an existing corpus instead of generating")
    _add_common(p, "generate", "render", "extract", "distill", "eval", "dump")
    return parser


def resolve(args: argparse.Namespace) -> argparse.Namespace:
    values = dict(DEFAULTS)
    if args.config:
        for key, raw in formats.parse_config_file(_require_file(args.config, "config file")).items():
            if key not in DEFAULTS:
                raise UsageError(f"unknown config key {key!r}")
            if key in _BOOL:
                values[key] = raw.lower() in ("1", "true", "yes", "on")
            else:
                try:
                    values[key] = _TYPES.get(key, str)(raw)
                except ValueError:
                    raise UsageError(f"config key {key!r}: bad value {raw!r}") from None
    values.update({k: v for k, v in vars(args).items() if k in DEFAULTS})
    for k, v in vars(args).items():
        if k not in DEFAULTS:
            values[k] = v
    for key in ("predictions", "few_shot_labels", "features", "corpus"):
        values.setdefault(key, None)
    return argparse.Namespace(**values)


def run(argv=None) -> tuple[int, list[Path]]:
    parser = build_parser()
    raw = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if raw.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = resolve(raw)
        out = Path(args.out)
        cmd = args.command
        if cmd == "generate":
            paths = stage_generate(args, out)
        elif cmd == "render":
            paths = stage_render(args, Path(args.corpus), out)
        elif cmd == "extract":
            paths = stage_extract(args, Path(args.corpus), Path(args.views_dir), out)
        elif cmd == "distill":
            paths = stage_distill(args, Path(args.corpus), Path(args.units), out)
        elif cmd == "eval":
            paths = stage_eval(args, Path(args.corpus), Path(args.views_dir),
                               Path(args.distill_dir), out)
        else:
            paths = stage_pipeline(args, out)
    except UsageError as exc:
        parser.error(str(exc))
    except (FileNotFoundError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1, []
    for p in paths:
        print(p)
    return 0, paths


def main(argv=None) -> int:
    return run(argv)[0]


if __name__ == "__main__":
    sys.exit(main())
