"""Dataset splitting, two-stage inference, and experiment orchestration."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Optional, Sequence

import jsonschema
import numpy as np

from . import grader as G
from . import locator as LOC
from . import metrics as M
from .ingest import GrayImage, read_pgm
from .layers import Network
from .synthgen import (OAI_WEIGHTS, KneeAnnotation, KneeCrop, SyntheticSample, derive_rng, get_profile,
                       knee_crops, prepare_crop, sample_dataset)

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    def __init__(self, problems: Sequence[str]):
        super().__init__("; ".join(problems))
        self.problems = list(problems)


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"{stage} stage failed: {cause}")
        self.stage = stage
        self.cause = cause


# ------------------------------------------------------------------ splitting

@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.7
    val_frac: float = 0.1
    test_frac: float = 0.2
    seed: int = 0
    stratified: bool = False

    def __post_init__(self):
        fracs = (self.train_frac, self.val_frac, self.test_frac)
        if any(f < 0 for f in fracs):
            raise ValueError(f"split fractions must be nonnegative, got {fracs}")
        if abs(sum(fracs) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {sum(fracs)}")


def _allocate(n: int, spec: SplitSpec) -> tuple[int, int, int]:
    # floor for val/test, remainder to train
    n_val = math.floor(n * spec.val_frac + 1e-9)
    n_test = math.floor(n * spec.test_frac + 1e-9)
    return n - n_val - n_test, n_val, n_test


def split_indices(n: int, spec: SplitSpec, labels: Optional[Sequence[int]] = None
                  ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rng = derive_rng(spec.seed, "split")
    if not spec.stratified or labels is None:
        order = rng.permutation(n)
        a, b, _ = _allocate(n, spec)
        return np.sort(order[:a]), np.sort(order[a:a + b]), np.sort(order[a + b:])
    labels = np.asarray(labels)
    parts: list[list[int]] = [[], [], []]
    for label in np.unique(labels):
        members = np.flatnonzero(labels == label)
        members = members[rng.permutation(len(members))]
        a, b, _ = _allocate(len(members), spec)
        for k, chunk in enumerate((members[:a], members[a:a + b], members[a + b:])):
            parts[k].extend(chunk.tolist())
    return tuple(np.sort(np.array(p, dtype=int)) for p in parts)


def split(dataset: Sequence, spec: SplitSpec, labels: Optional[Sequence[int]] = None) -> tuple[list, list, list]:
    """Disjoint, exhaustive (train, val, test) partition of ``dataset``."""
    if labels is None and spec.stratified:
        labels = [getattr(item, "grade", 0) for item in dataset]
    idx = split_indices(len(dataset), spec, labels)
    return tuple([dataset[i] for i in part] for part in idx)


class AccessLog:
    """Records which split each phase of an experiment reads."""

    def __init__(self):
        self.phase = "setup"
        self.events: set[tuple[str, str]] = set()

    def reads(self, split_name: str) -> set[str]:
        return {phase for phase, name in self.events if name == split_name}


class DatasetHandle(Sequence):
    """List-like view of one split that reports every read to an AccessLog."""

    def __init__(self, items: Sequence, name: str, access: AccessLog):
        self._items = list(items)
        self.name = name
        self._log = access

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        self._log.events.add((self._log.phase, self.name))
        return self._items[i]

    def __iter__(self):
        self._log.events.add((self._log.phase, self.name))
        return iter(self._items)


# ------------------------------------------------------------------ inference

@dataclass
class KneeEntry:
    side: str
    box: tuple[float, float, float, float]
    pixel_box: tuple[int, int, int, int]
    grade: int
    raw: Any
    score: float


@dataclass
class KneeReport:
    image_id: str
    knees: list[KneeEntry]
    locator_id: str = ""
    grader_id: str = ""
    grader_head: str = ""

    def knee(self, side: str) -> KneeEntry:
        return next(k for k in self.knees if k.side == side)

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "locator": self.locator_id,
            "grader": self.grader_id,
            "grader_head": self.grader_head,
            "knees": [{
                "side": k.side,
                "box": [float(v) for v in k.box],
                "pixel_box": [int(v) for v in k.pixel_box],
                "grade": int(k.grade),
                "raw": [float(v) for v in k.raw] if isinstance(k.raw, (list, np.ndarray)) else float(k.raw),
                "score": float(k.score),
            } for k in self.knees],
        }


def infer_radiograph(locator_net: Network, grader_net: Network, img: GrayImage, image_id: str = ""
                     ) -> KneeReport:
    """locate -> box_to_pixels -> crop -> min-max normalize -> resize -> predict, per knee."""
    try:
        dets = LOC.locate(locator_net, img)
    except Exception as exc:
        raise StageError("locate", exc) from exc
    entries = []
    for det in dets:
        pb = LOC.box_to_pixels(det.box, img.width, img.height)
        try:
            x = prepare_crop(img, pb)
        except Exception as exc:
            raise StageError("crop", exc) from exc
        try:
            pred = G.predict(grader_net, x)
        except Exception as exc:
            raise StageError("grade", exc) from exc
        raw = pred.raw.tolist() if isinstance(pred.raw, np.ndarray) else pred.raw
        entries.append(KneeEntry(det.side, det.box, pb, pred.grade, raw, det.score))
    return KneeReport(image_id, entries, locator_net.config_hash, grader_net.config_hash, G.head_of(grader_net))


def infer_batch(locator_net: Network, grader_net: Network, images: Sequence[GrayImage]
                ) -> list[tuple[tuple[LOC.Detection, LOC.Detection], np.ndarray, np.ndarray]]:
    """Vectorized variant of :func:`infer_radiograph` for evaluation loops."""
    dets = LOC.locate_batch(locator_net, list(images))
    crops = [prepare_crop(img, LOC.box_to_pixels(d.box, img.width, img.height))
             for img, pair in zip(images, dets) for d in pair]
    raw, grades = G.predict_batch(grader_net, crops) if crops else (np.zeros(0), np.zeros(0, dtype=int))
    return [(pair, raw[2 * i:2 * i + 2], grades[2 * i:2 * i + 2]) for i, pair in enumerate(dets)]


# ------------------------------------------------------------------ dataset directories

def load_dataset_dir(path) -> list[SyntheticSample]:
    """Read a directory written by ``gen``: manifest, PGM images, JSON sidecars, mask PGMs."""
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    out = []
    for entry in manifest["samples"]:
        img = read_pgm(root / entry["image"])
        sidecar = json.loads((root / entry["annotation"]).read_text())
        mask_file = root / entry.get("mask", "")
        labels = read_pgm(mask_file).pixels if entry.get("mask") and mask_file.exists() else None
        knees = {}
        for k in sidecar["knees"]:
            code = 1 if k["side"] == "left" else 2
            mask = labels == code if labels is not None else np.zeros(img.pixels.shape, dtype=bool)
            knees[k["side"]] = KneeAnnotation(k["side"], tuple(k["box"]), mask, k["grade"])
        out.append(SyntheticSample(img, knees["left"], knees["right"], tuple(entry.get("seed", ()))))
    return out


# ------------------------------------------------------------------ experiments

def _load_schema() -> dict:
    return json.loads(resources.files("kneegrade").joinpath("configs/schema.json").read_text())


CONFIG_SCHEMA = _load_schema()


def validate_config(config: dict) -> None:
    validator = jsonschema.Draft7Validator(CONFIG_SCHEMA)
    problems = [f"{'/'.join(map(str, e.path)) or '<root>'}: {e.message}"
                for e in sorted(validator.iter_errors(config), key=lambda e: list(map(str, e.path)))]
    if not problems:
        try:
            get_profile(config["generator"].get("profile", "source"))
            if "target_profile" in config["generator"]:
                get_profile(config["generator"]["target_profile"])
            s = config.get("split", {})
            SplitSpec(s.get("train", 0.7), s.get("val", 0.1), s.get("test", 0.2))
        except (ValueError, TypeError) as exc:
            problems.append(str(exc))
    if problems:
        raise ConfigError(problems)


def bundled_config(name: str) -> dict:
    return json.loads(resources.files("kneegrade").joinpath(f"configs/{name}").read_text())


@dataclass
class ExperimentResult:
    reports: dict[str, M.EvalReport]
    summary: dict
    access: AccessLog
    networks: dict[str, Network] = field(default_factory=dict)


def _grader_config(section: dict, seed: int, head: Optional[str] = None, override: Optional[dict] = None
                   ) -> G.TrainConfig:
    keys = set(G.TrainConfig.__dataclass_fields__) - {"seed"}
    values = {k: v for k, v in section.items() if k in keys}
    if head in section.get("head_lr", {}):
        values["lr"] = section["head_lr"][head]
    values.update({k: v for k, v in (override or {}).items() if k in keys})
    return G.TrainConfig(**values, seed=seed)


def _crop_report(net: Network, crops: Sequence[KneeCrop], label: str, resamples: int, seed: int) -> M.EvalReport:
    _, grades = G.predict_batch(net, list(crops))
    return M.evaluate([c.grade for c in crops], grades, seed=seed, resamples=resamples, label=label)


def run_experiment(config: dict, out_dir=None) -> ExperimentResult:
    """Execute one experiment config end to end; see ``configs/schema.json``."""
    validate_config(config)
    seed = int(config.get("seed", 0))
    kind = config["kind"]
    out = Path(out_dir or config.get("output_dir") or "runs") / config.get("name", kind)
    gen = config["generator"]
    s = config.get("split", {})
    spec = SplitSpec(s.get("train", 0.7), s.get("val", 0.1), s.get("test", 0.2), seed, s.get("stratified", False))
    resamples = int(config.get("metrics", {}).get("bootstrap_resamples", 2000))
    access = AccessLog()
    reports: dict[str, M.EvalReport] = {}
    nets: dict[str, Network] = {}
    summary: dict[str, Any] = {"name": config.get("name", kind), "kind": kind, "seed": seed}

    def source_samples() -> list[SyntheticSample]:
        if "input_dir" in config.get("ingest", {}):
            return load_dataset_dir(config["ingest"]["input_dir"])
        return sample_dataset(gen["n"] // 2 if kind != "pipeline" else gen["n"],
                              gen.get("grade_weights", OAI_WEIGHTS), gen.get("profile", "source"), seed)

    def handles(items, prefix):
        tr, va, te = split(items, spec, [getattr(i, "grade", 0) for i in items])
        return (DatasetHandle(tr, f"{prefix}train", access), DatasetHandle(va, f"{prefix}val", access),
                DatasetHandle(te, f"{prefix}test", access))

    gcfg = config.get("grader", {})
    if kind == "compare_heads":
        crops = knee_crops(source_samples())[:gen["n"]]
        train, val, test = handles(crops, "")
        summary["split_sizes"] = [len(train), len(val), len(test)]
        for head in gcfg.get("heads", list(G.HEADS)):
            access.phase = f"train-{head}"
            # optional warm start: later heads reuse the first head's trained trunk
            init = nets[next(iter(nets))] if gcfg.get("warm_start") and nets else None
            net, hist = G.train_grader(head, train, _grader_config(gcfg, seed, head), val=val, init=init)
            nets[head] = net
            access.phase = "eval"
            reports[head] = _crop_report(net, test, head, resamples, seed)
        summary["neighbor_fraction"] = {h: r.neighbor_fraction for h, r in reports.items()}
        summary["mae"] = {h: r.mae for h, r in reports.items()}

    elif kind == "domain_shift":
        head = gcfg.get("heads", ["regression"])[0]
        src = knee_crops(source_samples())[:gen["n"]]
        tgt_samples = sample_dataset((gen.get("target_n", gen["n"]) + 1) // 2,
                                     gen.get("target_grade_weights", gen.get("grade_weights", OAI_WEIGHTS)),
                                     gen.get("target_profile", "target"), seed + 7919)
        tgt = knee_crops(tgt_samples)[:gen.get("target_n", gen["n"])]
        s_train, s_val, s_test = handles(src, "source-")
        t_train, t_val, t_test = handles(tgt, "target-")
        access.phase = "train"
        net, _ = G.train_grader(head, s_train, _grader_config(gcfg, seed, head), val=s_val)
        access.phase = "eval"
        reports["source_on_source"] = _crop_report(net, s_test, "source_on_source", resamples, seed)
        reports["source_on_target"] = _crop_report(net, t_test, "source_on_target", resamples, seed)
        fcfg = config.get("finetune", {})
        access.phase = "finetune"
        ft_cfg = _grader_config(gcfg, seed, head, override=fcfg)
        tuned, _ = G.fine_tune(net, t_train, ft_cfg, val=t_val)
        access.phase = "eval"
        reports["finetuned_on_target"] = _crop_report(tuned, t_test, "finetuned_on_target", resamples, seed)
        nets.update(source=net, finetuned=tuned)
        summary["mae"] = {k: r.mae for k, r in reports.items()}
        summary["degradation_ratio"] = reports["source_on_target"].mae / max(reports["source_on_source"].mae, 1e-12)
        summary["finetune_ratio"] = reports["finetuned_on_target"].mae / max(reports["source_on_target"].mae, 1e-12)

    elif kind == "pipeline":
        samples = source_samples()
        train, val, test = handles(samples, "")
        summary["split_sizes"] = [len(train), len(val), len(test)]
        lcfg = config.get("locator", {})
        access.phase = "train-locator"
        lkeys = set(LOC.LocatorConfig.__dataclass_fields__)
        loc_net, lhist = LOC.train_locator(list(train), LOC.LocatorConfig(
            **{k: v for k, v in lcfg.items() if k in lkeys and k != "seed"}, seed=seed))
        access.phase = "train-grader"
        head = gcfg.get("heads", ["regression"])[0]
        # jittered boxes so the grader sees crops like the locator's, not only perfect ones
        jitter = float(gcfg.get("crop_jitter", 0.0))
        g_net, _ = G.train_grader(head, knee_crops(list(train), 0, jitter, seed), _grader_config(gcfg, seed, head),
                                  val=knee_crops(list(val), len(train), jitter, seed))
        access.phase = "eval"
        reports["pipeline"], extra = evaluate_pipeline(loc_net, g_net, list(test), resamples, seed)
        summary.update(extra)
        summary["locator_loss"] = [lhist.loss[0], lhist.loss[-1]]
        nets.update(locator=loc_net, grader=g_net)
    else:  # pragma: no cover - schema enumerates kinds
        raise ConfigError([f"unknown kind {kind}"])

    for phase in ("train", "finetune", "train-locator", "train-grader") + tuple(f"train-{h}" for h in G.HEADS):
        if any(name.endswith("test") for p, name in access.events if p == phase):
            raise RuntimeError(f"test split was read during {phase}")
    _persist(out, config, reports, summary, nets)
    return ExperimentResult(reports, summary, access, nets)


def evaluate_pipeline(loc_net: Network, g_net: Network, samples: Sequence[SyntheticSample],
                      resamples: int = 2000, seed: int = 0) -> tuple[M.EvalReport, dict]:
    """End-to-end grading plus localization quality on annotated samples."""
    results = infer_batch(loc_net, g_net, [s.image for s in samples])
    actual, predicted = [], []
    pred_boxes, gt_boxes, dices, pred_sides, gt_sides = [], [], [], [], []
    both_iou = 0
    for s, (dets, _, grades) in zip(samples, results):
        w, h = s.image.width, s.image.height
        ok = True
        for det, grade in zip(dets, grades):
            gt = s.left if det.side == "left" else s.right
            actual.append(gt.grade)
            predicted.append(int(grade))
            pred_boxes.append(det.box)
            gt_boxes.append(gt.box)
            ok &= M.iou(det.box, gt.box) >= 0.5
            dices.append(M.dice(LOC.detection_mask(det, w, h), gt.mask))
            # side accuracy: each detection is matched to the ground-truth knee it overlaps most
            match = max(s.knees, key=lambda k: M.iou(det.box, k.box))
            pred_sides.append(det.side)
            gt_sides.append(match.side)
        both_iou += ok
    loc = M.Localization(M.bbox_mse(pred_boxes, gt_boxes), float(np.mean(dices)),
                         M.side_accuracy(pred_sides, gt_sides), both_iou / len(samples))
    report = M.evaluate(actual, predicted, seed=seed, resamples=resamples, label="pipeline", localization=loc)
    within = float(np.mean(np.abs(np.array(actual) - np.array(predicted)) <= 1))
    report.extra["within_one"] = within
    return report, {"within_one": within, "localization": asdict(loc)}


def _persist(out: Path, config: dict, reports: dict, summary: dict, nets: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True))
    for name, report in reports.items():
        (out / f"report_{name}.json").write_text(report.to_json())
        (out / f"confusion_{name}.csv").write_text(report.confusion_csv())
    for name, net in nets.items():
        net.save(out / f"{name}.ckpt.npz")
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=float))
