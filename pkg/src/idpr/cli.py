"""Command-line interface.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 runtime failure.
"""
import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import load_config
from .errors import ConfigError, DatasetError, IDPRError, ScoreMapFormatError

log = logging.getLogger("idpr")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4


def _config(args):
    cfg = load_config(args.config)
    if getattr(args, "workdir", None):
        cfg["workdir"] = args.workdir
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    if getattr(args, "jobs", None):
        cfg["jobs"] = args.jobs
    return cfg


# -- commands --------------------------------------------------------------

def cmd_synth(args):
    from .data import save_dataset
    from .pipeline import synth_config
    from .synth import synth_stickfigures
    cfg = _config(args)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create output directory {out}: {exc}") from None
    train, negatives = synth_stickfigures(synth_config(cfg, "train"))
    test, _ = synth_stickfigures(synth_config(cfg, "test"))
    try:
        save_dataset(train, out / "train.jsonl", "images_train")
        save_dataset(test, out / "test.jsonl", "images_test")
        save_dataset(negatives, out / "negatives.jsonl", "images_negatives")
    except OSError as exc:
        raise DatasetError(f"cannot write dataset under {out}: {exc}") from None
    print(f"wrote {len(train)} train, {len(test)} test, {len(negatives)} negative images to {out}")


def _stage_command(until):
    def run(args):
        from .pipeline import Pipeline
        status = Pipeline(_config(args)).run(until=until)
        for stage, state in status.items():
            print(f"{stage:<11} {state}")
    return run


def cmd_pipeline(args):
    from .pipeline import Pipeline
    cfg = _config(args)
    pipe = Pipeline(cfg)
    status = pipe.run()
    for stage, state in status.items():
        print(f"{stage:<11} {state}")
    print((Path(cfg["workdir"]) / "report" / "report.txt").read_text(), end="")


def _parse_box(text):
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        vals = []
    if len(vals) != 4:
        raise ConfigError(f"torso box must be x0,y0,x1,y1, got {text!r}")
    return vals


def cmd_infer(args):
    from .classifier import PatchClassifier, compute_score_maps
    from .data import load_dataset, read_image, AnnotatedImage
    from .evidence import SpaceIndex, load_score_maps
    from .inference import RootMask, infer
    from .model import load_model
    from .pipeline import result_record
    try:
        model = load_model(args.model)
    except (OSError, ValueError, KeyError) as exc:
        raise DatasetError(f"cannot load model {args.model}: {exc}") from None
    graph, relations = model.graph, model.relations
    if args.image:
        box = _parse_box(args.torso_box) if args.torso_box else None
        items = [AnnotatedImage(read_image(args.image), None, box, Path(args.image).stem)]
    elif args.images:
        items = load_dataset(args.images)
        if args.torso_box:
            raise ConfigError("--torso-box applies to a single --image only")
    else:
        raise ConfigError("give --image or --images")
    classifier = space = None
    if args.classifier:
        classifier = PatchClassifier.load(args.classifier)
        space = SpaceIndex(graph, relations)
        if classifier.num_classes != space.flat_size:
            raise DatasetError(f"classifier has {classifier.num_classes} outputs but the model "
                               f"graph needs {space.flat_size}")
    elif not args.maps_dir:
        raise ConfigError("give --classifier or --maps-dir (score maps named <id>.idpr)")
    records = []
    overlays = Path(args.overlay_dir) if args.overlay_dir else None
    if overlays:
        overlays.mkdir(parents=True, exist_ok=True)
    for item in items:
        if classifier is not None:
            maps = compute_score_maps(item.image, classifier, graph, space, args.stride)
        else:
            path = Path(args.maps_dir) / f"{item.id}.idpr"
            if not path.exists():
                raise DatasetError(f"missing score maps {path}")
            maps = load_score_maps(path)
        maps.check(graph, relations)
        mask = RootMask.from_box(item.torso_box) if item.torso_box is not None else None
        res = infer(maps, model.weights, relations, graph, mask=mask)
        records.append(result_record(item.id, res))
        if overlays:
            render_overlay(item.image, res, graph, overlays / f"{item.id}.png")
    text = "".join(json.dumps(r) + "\n" for r in records)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def render_overlay(image, result, graph, path, scale=8):
    """Joints as discs, limbs as lines, each labelled with its type index."""
    from PIL import Image, ImageDraw
    gray = np.clip(np.round(np.asarray(image) * 255), 0, 255).astype(np.uint8)
    im = Image.fromarray(gray).convert("RGB")
    im = im.resize((im.width * scale, im.height * scale), Image.NEAREST)
    draw = ImageDraw.Draw(im)
    pts = (result.pose.locations + 0.5) * scale
    for i, j in graph.edges:
        draw.line([tuple(pts[i]), tuple(pts[j])], fill=(0, 200, 255), width=2)
        mid = (pts[i] + pts[j]) / 2
        draw.text(tuple(mid), str(result.types.get((i, j), "")), fill=(255, 255, 0))
    r = max(2, scale // 3)
    for x, y in pts:
        draw.ellipse([x - r, y - r, x + r, y + r], fill=(255, 60, 60))
    im.save(path)


def _read_jsonl(path):
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from None
    out = {}
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            out[str(rec["id"])] = np.asarray(rec["joints"], dtype=np.float64)
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{path}:{n}: bad record ({exc})") from None
    return out


def cmd_eval(args):
    from .metrics import LimbSpec, aggregate_report, buffy_pcp, pdj, strict_pcp
    from .model import PartGraph
    preds = _read_jsonl(args.pred)
    gts = _read_jsonl(args.gt)
    if set(preds) != set(gts):
        missing = sorted(set(gts) - set(preds))[:5]
        extra = sorted(set(preds) - set(gts))[:5]
        raise DatasetError(f"prediction and ground-truth ids differ "
                           f"(missing {missing}, unexpected {extra})")
    ids = sorted(gts)
    if args.graph:
        graph = PartGraph.from_dict(json.loads(Path(args.graph).read_text()))
    else:
        from .synth import stick_skeleton
        graph = stick_skeleton().graph
    names = graph.part_names or tuple(str(i) for i in range(graph.num_parts))
    limbs = [LimbSpec(f"{names[i]}-{names[j]}", i, j) for i, j in graph.edges]
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    unknown = set(metrics) - {"strict-pcp", "buffy-pcp", "pdj"}
    if unknown:
        raise ConfigError(f"unknown metrics {sorted(unknown)}")
    report, text = {}, []
    for name, fn in (("strict-pcp", strict_pcp), ("buffy-pcp", buffy_pcp)):
        if name in metrics:
            agg = aggregate_report([fn(preds[k], gts[k], limbs) for k in ids], limbs, name)
            report[name] = agg["values"]
            text.append(agg["text"])
    csv_text = None
    if "pdj" in metrics:
        thresholds = [float(t) for t in args.thresholds.split(",")]
        a, b = (int(v) for v in args.scale_pair.split(","))
        curve = pdj([preds[k] for k in ids], [gts[k] for k in ids],
                    list(range(graph.num_parts)), thresholds, (a, b), list(names))
        csv_text = curve.to_csv()
        report["pdj"] = {k: v.tolist() for k, v in curve.rates.items()}
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.with_suffix(".json").write_text(json.dumps(report, indent=2))
        out.with_suffix(".txt").write_text("".join(text))
        if csv_text is not None:
            out.with_suffix(".csv").write_text(csv_text)
    sys.stdout.write("".join(text))
    if csv_text is not None and not args.out:
        sys.stdout.write(csv_text)


def cmd_bench(args):
    from .bench import format_bench, run_bench
    from . import _accel

    def ints(text):
        return tuple(int(v) for v in text.split(","))

    with _accel.use_backend(args.backend or _accel.backend()):
        result = run_bench(ints(args.T), ints(args.sides), ints(args.K), args.repeats)
    text = format_bench(result)
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(json.dumps(result, indent=2))


# -- parser ------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="idpr", description="Pose estimation with image dependent pairwise relations.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config file (defaults are used without one)")
        p.add_argument("--jobs", type=int, default=None, help="cap on worker count")
        p.set_defaults(func=func)
        return p

    p = add("synth", cmd_synth, "render a synthetic stick-figure dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)

    for name, until, text in (("cluster-types", "types", "derive relation types"),
                              ("train-evidence", "evidence", "train the patch classifier"),
                              ("score-maps", "score_maps", "compute score maps"),
                              ("train-weights", "weights", "train S-SVM weights")):
        p = add(name, _stage_command(until), f"run the pipeline up to: {text}")
        p.add_argument("--workdir")
        p.add_argument("--seed", type=int)

    p = add("pipeline", cmd_pipeline, "run every stage, resuming from checkpoints")
    p.add_argument("--workdir")
    p.add_argument("--seed", type=int)

    p = add("infer", cmd_infer, "estimate poses with a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--image", help="single grayscale image")
    p.add_argument("--images", help="JSONL dataset")
    p.add_argument("--torso-box", help="x0,y0,x1,y1 window for the root part")
    p.add_argument("--classifier", help="patch classifier (.npz) to compute score maps")
    p.add_argument("--maps-dir", help="directory of precomputed <id>.idpr score maps")
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--out", help="output JSONL (stdout if omitted)")
    p.add_argument("--overlay-dir", help="write PNG overlays here")

    p = add("eval", cmd_eval, "score predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--graph", help="part graph JSON (default: stick figure)")
    p.add_argument("--metrics", default="strict-pcp,buffy-pcp,pdj")
    p.add_argument("--thresholds", default="0.05,0.1,0.15,0.2,0.25,0.3,0.35,0.4,0.45,0.5")
    p.add_argument("--scale-pair", default="0,1", help="parts defining the torso scale")
    p.add_argument("--out", help="report path prefix (.json, .txt, .csv)")

    p = add("bench", cmd_bench, "time inference and check its scaling")
    p.add_argument("--T", default="2,4,8")
    p.add_argument("--sides", default="32,64,128")
    p.add_argument("--K", default="4,8")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--backend", choices=("numba", "numpy"))
    p.add_argument("--out", help="write the raw timings as JSON")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, ScoreMapFormatError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except IDPRError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - report anything else as a runtime failure
        log.debug("unhandled", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
