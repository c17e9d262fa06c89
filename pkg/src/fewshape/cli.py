"""Command-line entry point: synth, train, infer, eval, bench, viz.

Failures print one JSON line ``{"error": code, "message": ...}`` to stderr and
exit nonzero.
"""
from __future__ import annotations

import os

# BLAS reads its thread count at import, so this must precede numpy
if os.environ.get("FEWSHAPE_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[_var] = os.environ["FEWSHAPE_THREADS"]

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from .config import ConfigError, RunConfig, parse_budgets  # noqa: E402

EXIT_USAGE = 2
EXIT_FAILURE = 1


class CliError(Exception):
    def __init__(self, code: str, message: str, status: int = EXIT_FAILURE):
        super().__init__(message)
        self.code = code
        self.status = status


# ------------------------------------------------------------------ helpers

def load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "mode", None):
        changes["mode"] = args.mode
        changes["curved"] = args.mode == "bezier"
    if getattr(args, "budgets", None):
        changes["budgets"] = parse_budgets(args.budgets)
    if getattr(args, "adaptive_frac", None) is not None:
        changes["adaptive_fraction"] = args.adaptive_frac
    if getattr(args, "threshold", None) is not None:
        changes["threshold"] = args.threshold
    if getattr(args, "image_size", None) is not None:
        changes["image_size"] = args.image_size
    if getattr(args, "epochs", None) is not None:
        changes["epochs"] = args.epochs
    if getattr(args, "data", None):
        changes["data_dir"] = args.data
    if getattr(args, "out", None):
        changes["out_dir"] = args.out
    return RunConfig.from_dict({**cfg.to_dict(), **changes}) if changes else cfg


def detections_to_records(ids, dets) -> list[dict]:
    recs = []
    for img_id, d in zip(ids, dets):
        rec = {"id": img_id, "scores": [float(s) for s in d.scores],
               "boxes": [dict(zip(("x", "y", "w", "h", "theta"), map(float, b))) for b in d.boxes]}
        if d.beziers is not None:
            rec["beziers"] = [[float(v) for v in b] for b in d.beziers]
        recs.append(rec)
    return recs


def read_detections(path):
    from .pipeline.evaluate import ImageDetections
    out = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        boxes = np.array([[b["x"], b["y"], b["w"], b["h"], b["theta"]] for b in rec["boxes"]]).reshape(-1, 5)
        bz = np.array(rec["beziers"]).reshape(-1, 16) if rec.get("beziers") is not None else None
        out[rec["id"]] = ImageDetections(np.array(rec["scores"], dtype=np.float64), boxes, bz)
    return out


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError(f"{what.replace(' ', '_')}_not_found", f"{what} not found: {p}")
    return p


def _dataset(path):
    from .pipeline.synth import read_dataset
    p = _require(path, "dataset")
    return read_dataset(p)


# ----------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    from .pipeline.synth import generate_split, write_dataset
    from .pipeline.train import scene_config
    cfg = load_config(args)
    sc = scene_config(cfg)
    out = Path(args.out or "data")
    splits = [args.split] if args.split else ["train", "val"]
    for split in splits:
        if args.count is not None:
            count = args.count
        else:
            count = cfg.train_scenes if split == "train" else cfg.val_scenes
        index = out / split / "scenes.jsonl"
        if index.exists() and not args.force:
            raise CliError("exists", f"{index} exists; pass --force to overwrite")
        write_dataset(generate_split(cfg.seed, sc, split, count), out / split, force=args.force)
        print(f"wrote {count} scenes to {out / split}")
    return 0


def cmd_train(args) -> int:
    from .pipeline.train import train
    cfg = load_config(args)
    res = train(cfg, out_dir=cfg.out_dir)
    f = res.val_f[-1] if res.val_f else float("nan")
    print(f"checkpoint={res.checkpoint} sha256={res.checkpoint_sha256} val_F={f:.3f} cpu_s={res.seconds:.1f}")
    return 0


def cmd_infer(args) -> int:
    from .pipeline.infer import infer, load_model
    from .numerics.io import load_tensor
    ckpt = _require(args.checkpoint, "checkpoint")
    model = load_model(ckpt)
    threshold = args.threshold if args.threshold is not None else model.cfg.threshold
    if args.image:
        ids = [Path(args.image).stem]
        images = load_tensor(_require(args.image, "image"))[None]
    else:
        scenes = _dataset(args.data)
        ids = [s.id for s in scenes]
        images = np.stack([s.image for s in scenes])
    dets = infer(images, model, threshold)
    text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in detections_to_records(ids, dets))
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {sum(len(d) for d in dets)} detections for {len(ids)} images to {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_eval(args) -> int:
    from .pipeline.evaluate import evaluate
    scenes = _dataset(args.data)
    dets = read_detections(_require(args.pred, "predictions"))
    gt = {s.id: s.boxes for s in scenes}
    bz = {s.id: s.beziers for s in scenes} if scenes and scenes[0].beziers is not None else None
    rep = evaluate(dets, gt, args.iou, bz)
    if args.out:
        rep.save(args.out)
    print(rep.summary())
    return 0


def cmd_bench(args) -> int:
    from .pipeline.bench import bench_complexity
    rep = bench_complexity(width=args.width, token_counts=tuple(args.tokens))
    for line in rep.lines():
        print(line)
    if args.out:
        Path(args.out).write_text(json.dumps(rep.to_dict(), indent=1) + "\n")
    return 0


def cmd_viz(args) -> int:
    from .pipeline import viz
    out = Path(args.out or "viz")
    out.mkdir(parents=True, exist_ok=True)
    if args.kind == "detections":
        dets = read_detections(_require(args.pred, "predictions"))
        img_id = args.id or sorted(dets)[0]
        d = dets[img_id]
        size = args.size or 128
        viz.write_svg(out / f"{img_id}_det.svg", (size, size), d.boxes, d.beziers, d.scores)
        print(f"wrote {out / (img_id + '_det.svg')}")
        return 0
    scenes = _dataset(args.data)
    scene = scenes[args.index]
    size = scene.image.shape[:2]
    if args.kind == "scene":
        path = out / f"{scene.id}_gt.svg"
        viz.write_svg(path, size, scene.boxes, scene.beziers)
        print(f"wrote {path}")
        return 0
    from .pipeline.infer import load_model
    from .numerics.tensor import no_grad
    model = load_model(_require(args.checkpoint, "checkpoint"))
    with no_grad():
        fwd = model(scene.image)
    for k, s in enumerate(fwd.scores):
        path = out / f"{scene.id}_score{k}.pgm"
        viz.write_pgm(path, s.data[0])
        print(f"wrote {path}")
    return 0


# ------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fewshape", description="sparse-token rotated text detector")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, model_flags: bool = False):
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory or file")
        if model_flags:
            sp.add_argument("--mode", choices=("rbox", "bezier"))
            sp.add_argument("--budgets", help="token budgets n0,n1,n2 (coarsest scale first)")
            sp.add_argument("--adaptive-frac", type=float, dest="adaptive_frac")
            sp.add_argument("--threshold", type=float)

    s = sub.add_parser("synth", help="write a synthetic dataset")
    common(s)
    s.add_argument("--mode", choices=("rbox", "bezier"))
    s.add_argument("--image-size", type=int, dest="image_size")
    s.add_argument("--count", type=int, help="scenes per split")
    s.add_argument("--split", choices=("train", "val", "test"))
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a detector")
    common(s, model_flags=True)
    s.add_argument("--data", help="dataset root holding train/ and val/")
    s.add_argument("--epochs", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="run a checkpoint over images")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", help="dataset split directory")
    s.add_argument("--image", help="single tensor-file image")
    s.add_argument("--threshold", type=float)
    s.add_argument("--out", help="detections JSON-lines file")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", help="score detections against ground truth")
    s.add_argument("--pred", required=True, help="detections JSON-lines file")
    s.add_argument("--data", required=True, help="dataset split directory")
    s.add_argument("--iou", type=float, default=0.5)
    s.add_argument("--out", help="EvalReport JSON")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", help="attention cost table and encoder timings")
    s.add_argument("--width", type=int, default=32)
    s.add_argument("--tokens", type=int, nargs="+", default=[448, 4480, 21504])
    s.add_argument("--out", help="JSON report")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("viz", help="PGM score maps and SVG overlays")
    s.add_argument("kind", choices=("scene", "scores", "detections"))
    s.add_argument("--data", help="dataset split directory")
    s.add_argument("--index", type=int, default=0)
    s.add_argument("--checkpoint")
    s.add_argument("--pred")
    s.add_argument("--id")
    s.add_argument("--size", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_viz)
    return p


def _fail(code: str, message: str, status: int) -> int:
    sys.stderr.write(json.dumps({"error": code, "message": message}) + "\n")
    return status


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        return _fail(exc.code, str(exc), exc.status)
    except ConfigError as exc:
        return _fail("invalid_config", str(exc), EXIT_USAGE)
    except FileNotFoundError as exc:
        msg = str(exc)
        code = "checkpoint_not_found" if "checkpoint not found" in msg else "file_not_found"
        return _fail(code, msg, EXIT_FAILURE)
    except (ValueError, KeyError, OSError, FloatingPointError) as exc:
        return _fail(type(exc).__name__, str(exc).replace("\n", " "), EXIT_FAILURE)


if __name__ == "__main__":
    sys.exit(main())
