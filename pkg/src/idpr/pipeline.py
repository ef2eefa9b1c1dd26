"""End-to-end pipeline with per-stage checkpoints.

Stages run in order; each writes its artifacts under the work directory and
then a marker ``checkpoints/<stage>.json`` holding a hash of the config
sections it depends on chained with the hashes of its upstream stages.  A
stage is skipped when its marker matches and its outputs exist, so changing a
config section re-runs that stage and everything downstream of it.
"""
import json
from concurrent.futures import ThreadPoolExecutor
import logging
import time
from pathlib import Path

import numpy as np

from . import classifier as clf_mod
from .config import check_paths, config_hash
from .data import add_midway_parts, augment, load_dataset, save_dataset
from .errors import DatasetError, IDPRError
from .evidence import SpaceIndex, load_score_maps, save_score_maps
from .inference import RootMask, infer
from .metrics import LimbSpec, aggregate_report, buffy_pcp, pdj, strict_pcp
from .model import (Mode, Model, PartGraph, TypeAssignment, Weights, load_model,
                    relations_from_dict, relations_to_dict, save_model)
from .ssvm import (SsvmConfig, WeightLayout, mine_negative_examples, positive_examples,
                   train_weights)
from .synth import SynthConfig, Skeleton, stick_skeleton, synth_stickfigures
from .typelearn import derive_types

log = logging.getLogger(__name__)

STAGES = ("data", "augment", "types", "evidence", "score_maps", "weights", "evaluate")


class StageError(IDPRError, RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def _dump(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True))
    tmp.replace(path)


def base_graph(config):
    if config["paths"]["graph"]:
        try:
            return PartGraph.from_dict(json.loads(Path(config["paths"]["graph"]).read_text()))
        except (OSError, json.JSONDecodeError, KeyError) as exc:
            raise DatasetError(f"cannot read graph spec: {exc}") from None
    return skeleton(config).graph


def skeleton(config):
    sk = config["synth"]["skeleton"]
    return stick_skeleton() if sk is None else Skeleton.from_dict(sk)


def synth_config(config, split):
    s = dict(config["synth"])
    n_train, n_test = s.pop("num_train"), s.pop("num_test")
    n_neg = s.pop("num_negatives")
    s.pop("skeleton")
    # separate seed streams keep the splits disjoint
    seeds = {"train": 0, "test": 1}
    return SynthConfig(num_images=n_train if split == "train" else n_test,
                       num_negatives=n_neg if split == "train" else 0,
                       skeleton=skeleton(config),
                       seed=config["seed"] * 1000 + seeds[split],
                       id_prefix=split, **s)


class Pipeline:
    """Stage runner over a work directory."""

    def __init__(self, config):
        self.config = config
        self.root = Path(config["workdir"])
        self.ckpt = self.root / "checkpoints"
        self.status = {}
        self._hashes = {}

    # -- bookkeeping ---------------------------------------------------------

    def _deps(self, stage):
        c = self.config
        return {
            "data": (c["paths"], c["synth"], c["seed"]),
            "augment": (c["augment"], c["midway_parts"], c["classifier"]["val_fraction"],
                        c["seed"]),
            "types": (c["types"], c["seed"]),
            "evidence": (c["patches"], c["classifier"], c["seed"]),
            "score_maps": (c["patches"]["stride"],),
            "weights": (c["ssvm"], c["modes"], c["seed"]),
            "evaluate": (c["eval"], c["modes"]),
        }[stage]

    def stage_hash(self, stage):
        if stage not in self._hashes:
            n = STAGES.index(stage)
            upstream = self.stage_hash(STAGES[n - 1]) if n else ""
            self._hashes[stage] = config_hash(stage, upstream, self._deps(stage))
        return self._hashes[stage]

    def outputs(self, stage):
        r = self.root
        modes = self.config["modes"]
        return {
            "data": [r / "data" / "train.jsonl", r / "data" / "test.jsonl",
                     r / "data" / "negatives.jsonl"],
            "augment": [r / "augment" / "train.jsonl", r / "augment" / "graph.json"],
            "types": [r / "types" / "relations.json", r / "types" / "assignments.json"],
            "evidence": [r / "evidence" / "classifier.npz"],
            "score_maps": [r / "maps" / "index.json"],
            "weights": [r / "models" / f"{m}.json" for m in modes],
            "evaluate": [r / "report" / "report.json"],
        }[stage]

    def is_done(self, stage):
        marker = self.ckpt / f"{stage}.json"
        if not marker.exists():
            return False
        try:
            saved = json.loads(marker.read_text()).get("hash")
        except json.JSONDecodeError:
            return False
        return saved == self.stage_hash(stage) and all(p.exists() for p in self.outputs(stage))

    def run(self, until=None, force=()):
        """Run every stage up to ``until``; returns ``{stage: "ran"|"skipped"}``."""
        check_paths(self.config)
        self.root.mkdir(parents=True, exist_ok=True)
        for stage in STAGES:
            if stage in force or not self.is_done(stage):
                t0 = time.perf_counter()
                try:
                    getattr(self, f"stage_{stage}")()
                except DatasetError as exc:
                    raise DatasetError(f"stage {stage!r}: {exc}") from exc
                except (IDPRError, OSError, ValueError, KeyError) as exc:
                    raise StageError(stage, exc) from exc
                _dump(self.ckpt / f"{stage}.json",
                      {"stage": stage, "hash": self.stage_hash(stage),
                       "seconds": time.perf_counter() - t0})
                self.status[stage] = "ran"
                log.info("stage %s done in %.1fs", stage, time.perf_counter() - t0)
            else:
                self.status[stage] = "skipped"
            if stage == until:
                break
        return dict(self.status)

    # -- artifact access -----------------------------------------------------

    def dataset(self, split):
        names = {"train": "train", "test": "test", "negatives": "negatives"}
        return load_dataset(self.root / "data" / f"{names[split]}.jsonl")

    def graph(self):
        return PartGraph.from_dict(json.loads((self.root / "augment" / "graph.json").read_text()))

    def relations(self):
        return relations_from_dict(json.loads((self.root / "types" / "relations.json").read_text()))

    def maps(self, key):
        return load_score_maps(self.root / "maps" / f"{key}.idpr")

    def model(self, mode):
        return load_model(self.root / "models" / f"{Mode(mode).value}.json")

    # -- stages --------------------------------------------------------------

    def stage_data(self):
        out = self.root / "data"
        out.mkdir(parents=True, exist_ok=True)
        paths = self.config["paths"]
        if paths["train"]:
            g = base_graph(self.config)
            for split in ("train", "test", "negatives"):
                if not paths[split]:
                    raise DatasetError(f"paths.{split} is required when paths.train is set")
                items = load_dataset(paths[split], None if split == "negatives" else g.num_parts)
                save_dataset(items, out / f"{split}.jsonl", image_dir=f"images_{split}")
            return
        train, negatives = synth_stickfigures(synth_config(self.config, "train"))
        test, _ = synth_stickfigures(synth_config(self.config, "test"))
        save_dataset(train, out / "train.jsonl", image_dir="images_train")
        save_dataset(test, out / "test.jsonl", image_dir="images_test")
        save_dataset(negatives, out / "negatives.jsonl", image_dir="images_negatives")

    def stage_augment(self):
        g = base_graph(self.config)
        a = self.config["augment"]
        base = self.dataset("train")
        # whole figures are held out before augmentation so that no rotated or
        # mirrored copy of a held-out figure leaks into classifier training
        frac = float(self.config["classifier"]["val_fraction"])
        n_hold = int(round(frac * len(base)))
        if len(base) >= 2:
            n_hold = min(max(n_hold, 1), len(base) - 1)
        rng = np.random.default_rng(self.config["seed"])
        held = {base[n].id for n in rng.permutation(len(base))[:n_hold]}
        for item in base:
            item.meta["split"] = "holdout" if item.id in held else "fit"
        items = augment(base, a["rotation_step_deg"], a["flip"], g)
        graph = g
        if self.config["midway_parts"]:
            for item in items:
                item.pose, graph = add_midway_parts(item.pose, g)
        out = self.root / "augment"
        out.mkdir(parents=True, exist_ok=True)
        save_dataset(items, out / "train.jsonl", image_dir="images")
        _dump(out / "graph.json", graph.to_dict())

    def augmented(self, split=None):
        """Augmented positives, optionally only the ``fit`` or ``holdout`` part."""
        items = load_dataset(self.root / "augment" / "train.jsonl")
        return [it for it in items if split is None or it.meta.get("split") == split]

    def stage_types(self):
        graph = self.graph()
        items = self.augmented()
        t = self.config["types"]["T"]
        if isinstance(t, dict):
            t = {tuple(int(v) for v in k.split("-")): int(n) for k, n in t.items()}
        else:
            t = int(t)
        relations, assignments = derive_types([it.pose for it in items], graph, t,
                                              seed=self.config["seed"],
                                              max_iters=self.config["types"]["max_iters"])
        out = self.root / "types"
        _dump(out / "relations.json", relations_to_dict(relations))
        _dump(out / "assignments.json",
              {it.id: {f"{i}-{j}": v for (i, j), v in ty.items()}
               for it, ty in zip(items, assignments)})

    def _assignments(self):
        raw = json.loads((self.root / "types" / "assignments.json").read_text())
        return {k: TypeAssignment({tuple(int(x) for x in e.split("-")): t
                                   for e, t in v.items()}) for k, v in raw.items()}

    def stage_evidence(self):
        graph, relations = self.graph(), self.relations()
        space = SpaceIndex(graph, relations)
        assignments = self._assignments()
        p = self.config["patches"]
        side, n_bg = int(p["side"]), int(p["background_per_image"])

        def patches(items, negatives, seed):
            return clf_mod.labeled_patches(
                items, [assignments[it.id] for it in items], graph, space, side, n_bg,
                negatives, float(p["min_distance"]), seed=seed,
                background_per_negative=p["background_per_negative"])

        fit, held = self.augmented("fit"), self.augmented("holdout")
        negatives = self.dataset("negatives")
        n_val_neg = len(negatives) * len(held) // max(len(held) + len(fit), 1)
        seed = self.config["seed"]
        c = dict(self.config["classifier"])
        c["hidden"] = tuple(c["hidden"])
        classifier = clf_mod.train_patch_classifier(
            patches(fit, negatives[n_val_neg:], seed), space, clf_mod.ClassifierConfig(**c),
            seed=seed, validation=patches(held, negatives[:n_val_neg], seed + 1) or None)
        out = self.root / "evidence"
        out.mkdir(parents=True, exist_ok=True)
        classifier.save(out / "classifier.npz")
        _dump(out / "history.json", [list(h) for h in classifier.history])

    def stage_score_maps(self):
        graph, relations = self.graph(), self.relations()
        space = SpaceIndex(graph, relations)
        classifier = clf_mod.PatchClassifier.load(self.root / "evidence" / "classifier.npz")
        stride = int(self.config["patches"]["stride"])
        out = self.root / "maps"
        out.mkdir(parents=True, exist_ok=True)
        index = {}
        sets = [("augment", self.augmented("holdout")),
                ("test", self.dataset("test")), ("negatives", self.dataset("negatives"))]

        def one(job):
            key, image = job
            stack = clf_mod.compute_score_maps(image, classifier, graph, space, stride)
            save_score_maps(stack, out / f"{key}.idpr")
            return key

        # images are independent; every map goes to its own file, so the
        # output does not depend on the worker count
        jobs = [(f"{split}__{item.id}", item.image) for split, items in sets for item in items]
        with ThreadPoolExecutor(max_workers=max(1, int(self.config["jobs"]))) as pool:
            done = list(pool.map(one, jobs))
        for split, _ in sets:
            index[split] = [k for k in done if k.startswith(split + "__")]
        _dump(out / "index.json", index)

    def _positives(self, graph):
        items = self.augmented("holdout")
        assignments = self._assignments()
        return [(self.maps(f"augment__{it.id}"), it.pose, assignments[it.id]) for it in items]

    def stage_weights(self):
        graph, relations = self.graph(), self.relations()
        s = dict(self.config["ssvm"])
        n_neg, rounds = int(s.pop("negatives")), int(s.pop("rounds"))
        hard = float(s.pop("hard_fraction"))
        cfg = SsvmConfig(seed=self.config["seed"], **s)
        positives = self._positives(graph)
        index = json.loads((self.root / "maps" / "index.json").read_text())
        negative_maps = [self.maps(k) for k in index["negatives"]]
        out = self.root / "models"
        out.mkdir(parents=True, exist_ok=True)
        summary = {}
        for mode in self.config["modes"]:
            weights, history = train_mode(positives, negative_maps, graph, relations,
                                          Mode(mode), cfg, n_neg, rounds, hard,
                                          seed=self.config["seed"])
            save_model(Model(graph, relations, weights, {"mode": mode}), out / f"{mode}.json")
            summary[mode] = history
        _dump(out / "training.json", summary)

    def stage_evaluate(self):
        graph = self.graph()
        test = load_dataset(self.root / "data" / "test.jsonl")
        e = self.config["eval"]
        limbs = eval_limbs(graph, e["limbs"])
        scale_pair = tuple(e["scale_pair"]) if e["scale_pair"] else (0, 1)
        out = self.root / "report"
        out.mkdir(parents=True, exist_ok=True)
        report = {"modes": {}}
        text = []
        for mode in self.config["modes"]:
            model = self.model(mode)
            preds, gts, strict, buffy = [], [], [], []
            records = []
            for item in test:
                maps = self.maps(f"test__{item.id}")
                mask = None
                if e["use_torso_box"] and item.torso_box is not None:
                    mask = RootMask.from_box(item.torso_box)
                res = infer(maps, model.weights, model.relations, graph, mask=mask)
                gt = item.pose
                if self.config["midway_parts"]:
                    gt, _ = add_midway_parts(gt, base_graph(self.config))
                preds.append(res.pose)
                gts.append(gt)
                strict.append(strict_pcp(res.pose, gt, limbs))
                buffy.append(buffy_pcp(res.pose, gt, limbs))
                records.append(result_record(item.id, res))
            (out / f"predictions_{mode}.jsonl").write_text(
                "".join(json.dumps(r) + "\n" for r in records))
            rs = aggregate_report(strict, limbs, f"{mode}")
            rb = aggregate_report(buffy, limbs, f"{mode}")
            curve = pdj(preds, gts, list(range(graph.num_parts)), e["pdj_thresholds"],
                        scale_pair, list(graph.part_names) or None)
            (out / f"pdj_{mode}.csv").write_text(curve.to_csv())
            report["modes"][mode] = {
                "strict_pcp": rs["values"], "buffy_pcp": rb["values"],
                "strict_per_limb": rs["per_limb"],
                "mean_strict_pcp": rs["values"]["Mean"] / 100.0,
                "mean_buffy_pcp": rb["values"]["Mean"] / 100.0,
                "images": len(test),
            }
            header, row = rs["text"].splitlines()
            text = text or [header + "\n"]
            text.append(row + "\n")
        _dump(out / "report.json", report)
        (out / "report.txt").write_text("strict PCP (%)\n" + "".join(text))


def eval_limbs(graph, spec=None):
    if spec:
        return [LimbSpec(d["name"], int(d["p"]), int(d["q"]), d.get("category", ""))
                for d in spec]
    names = graph.part_names or tuple(str(i) for i in range(graph.num_parts))
    return [LimbSpec(f"{names[i]}-{names[j]}", i, j) for i, j in graph.edges]


def result_record(item_id, result):
    return {"id": item_id, "joints": result.pose.locations.tolist(),
            "score": result.score,
            "types": {f"{i}-{j}": t for (i, j), t in sorted(result.types.items())}}


def train_mode(positives, negative_maps, graph, relations, mode, config, num_negatives,
               rounds=1, hard_fraction=0.5, seed=0):
    """Weights for one mode by alternating negative mining and S-SVM training.

    The first round mines against default weights; later rounds mine with the
    weights learnt so far and add the new negatives to the pool.  Mining stops
    early once a round yields no negative inside the margin.
    """
    layout = WeightLayout(graph, relations, mode)
    pos = positive_examples(positives, graph, relations, mode, layout)
    weights = Weights.default(graph, relations, mode)
    negatives, history = [], []
    for r in range(max(1, rounds)):
        new = mine_negative_examples(positives, negative_maps, weights, graph, relations,
                                     num_negatives, seed=seed + 7919 * r,
                                     hard_fraction=hard_fraction, layout=layout)
        vec = layout.to_vector(weights)
        violations = sum(ex.features.dot(vec) > -1.0 for ex in new)
        if r > 0 and violations == 0:
            history.append({"round": r, "violations": 0})
            break
        negatives += new
        weights, result = train_weights(pos + negatives, config, layout, return_result=True)
        history.append({"round": r, "violations": int(violations),
                        "examples": len(pos) + len(negatives), "objective": result.objective})
    return weights, history
