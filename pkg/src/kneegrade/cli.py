"""Command-line interface: ``kneegrade <command> [flags]``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Logs go to stderr; results go to files under ``--out`` (default taken from
``$KNEEGRADE_OUT``, else ``./kneegrade-out``).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import grader as G
from . import locator as LOC
from . import pipeline as P
from . import synthgen as S
from .ingest import DicomError, PgmError, load_image
from .layers import CheckpointError, Network

log = logging.getLogger("kneegrade")

OUT_ENV = "KNEEGRADE_OUT"
DEFAULT_OUT = "kneegrade-out"

# documented defaults; every value can be overridden by a flag or a config file
DEFAULTS = {
    "gen.n": 100,
    "gen.profile": "source",
    "train-locator.epochs": 30,
    "train-locator.lr": 0.02,
    "train-grader.head": "regression",
    "train-grader.epochs": 15,
    "train-grader.lr": 0.01,
    "finetune.epochs": 10,
    "finetune.lr_scale": 0.1,
    "split": "0.7,0.1,0.2",
}


class UsageError(Exception):
    """Bad flags or inputs; maps to exit code 2."""


def _weights(text):
    if text is None:
        return None
    try:
        w = [float(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"--grade-weights must be 5 comma-separated numbers, got {text!r}") from None
    if len(w) != 5 or any(v < 0 or not np.isfinite(v) for v in w) or sum(w) <= 0:
        raise UsageError(f"--grade-weights must be 5 nonnegative numbers with a positive sum, got {text!r}")
    return w


def _split_spec(text: str, seed: int) -> P.SplitSpec:
    try:
        fracs = [float(v) for v in text.split(",")]
        return P.SplitSpec(*fracs, seed=seed)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"--split: {exc}") from None


def _load_net(path, what: str) -> Network:
    if not Path(path).is_file():
        raise UsageError(f"{what} checkpoint not found: {path}")
    try:
        return Network.load(path)
    except CheckpointError as exc:
        raise UsageError(f"{what} checkpoint {path}: {exc}") from None


def _load_data(path):
    if not (Path(path) / "manifest.json").is_file():
        raise UsageError(f"{path} is not a dataset directory (no manifest.json)")
    return P.load_dataset_dir(path)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ------------------------------------------------------------------ commands

def cmd_gen(args) -> int:
    weights = _weights(args.grade_weights)
    try:
        profile = json.loads(args.profile) if args.profile.lstrip().startswith("{") else args.profile
        S.get_profile(profile)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"--profile: {exc}") from None
    if args.n < 1:
        raise UsageError("--n must be positive")
    samples = S.sample_dataset(args.n, weights, profile, args.seed)
    S.write_dataset(samples, args.out, seed=args.seed, profile=profile, grade_weights=weights)
    log.info("wrote %d samples to %s", args.n, args.out)
    return 0


def cmd_train_locator(args) -> int:
    samples = _load_data(args.data)
    cfg = LOC.LocatorConfig(epochs=args.epochs, lr=args.lr, seed=args.seed)
    net, hist = LOC.train_locator(samples, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    net.save(out / "locator.ckpt.npz")
    _write_json(out / "locator_history.json", {"loss": hist.loss})
    return 0


def _splits(args):
    samples = _load_data(args.data)
    spec = _split_spec(args.split, args.seed)
    return P.split(S.knee_crops(samples), spec)


def cmd_train_grader(args) -> int:
    train, val, _ = _splits(args)
    cfg = G.TrainConfig(epochs=args.epochs, lr=args.lr, seed=args.seed)
    net, hist = G.train_grader(args.head, train, cfg, val=val or None)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    net.save(out / f"grader_{args.head}.ckpt.npz")
    _write_json(out / f"grader_{args.head}_history.json", vars(hist))
    return 0


def cmd_finetune(args) -> int:
    net = _load_net(args.grader, "grader")
    train, val, _ = _splits(args)
    cfg = G.TrainConfig(epochs=args.epochs, lr=args.lr, seed=args.seed, finetune_lr_scale=args.lr_scale)
    tuned, hist = G.fine_tune(net, train, cfg, val=val or None)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tuned.save(out / "finetuned.ckpt.npz")
    _write_json(out / "finetune_history.json", vars(hist))
    return 0


def cmd_eval(args) -> int:
    g_net = _load_net(args.grader, "grader")
    samples = _load_data(args.data)
    if args.split != "all":
        _, _, samples = P.split(samples, _split_spec(args.split, args.seed))
    if not samples:
        raise UsageError("evaluation split is empty")
    if args.locator:
        report, _ = P.evaluate_pipeline(_load_net(args.locator, "locator"), g_net, samples,
                                        args.resamples, args.seed)
    else:
        crops = S.knee_crops(samples)
        _, grades = G.predict_batch(g_net, crops)
        report = P.M.evaluate([c.grade for c in crops], grades, seed=args.seed, resamples=args.resamples,
                              label="eval")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    (out / "confusion.csv").write_text(report.confusion_csv())
    return 0


def _infer_one(path: Path, loc_net, g_net, single_knee: bool) -> dict:
    try:
        img = load_image(path)
    except (DicomError, PgmError, OSError, ValueError) as exc:
        return {"file": path.name, "error": {"stage": "ingest", "type": type(exc).__name__, "message": str(exc)}}
    try:
        if single_knee:
            pred = G.predict(g_net, S.prepare_crop(img, (0, 0, img.width, img.height)))
            raw = pred.raw.tolist() if isinstance(pred.raw, np.ndarray) else pred.raw
            return {"file": path.name, "report": {"image_id": path.stem, "grader": g_net.config_hash,
                                                  "grader_head": pred.kind,
                                                  "knees": [{"side": None, "grade": pred.grade, "raw": raw}]}}
        rep = P.infer_radiograph(loc_net, g_net, img, image_id=path.stem)
        return {"file": path.name, "report": rep.to_dict()}
    except P.StageError as exc:
        return {"file": path.name, "error": {"stage": exc.stage, "type": type(exc.cause).__name__,
                                             "message": str(exc.cause)}}


def cmd_infer(args) -> int:
    g_net = _load_net(args.grader, "grader")
    try:
        G.head_of(g_net)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    loc_net = None
    if not args.single_knee:
        if not args.locator:
            raise UsageError("--locator is required unless --single-knee is given")
        loc_net = _load_net(args.locator, "locator")
        try:
            LOC._check_net(loc_net, allow_untrained=False)
        except LOC.LocatorError as exc:
            raise UsageError(str(exc)) from None
    src = Path(args.input)
    if src.is_dir():
        files = sorted(p for p in src.iterdir() if p.is_file() and not p.name.startswith(".")
                       and p.suffix.lower() != ".json")
    elif src.exists():
        files = [src]
    else:
        raise UsageError(f"input not found: {src}")
    if not files:
        raise UsageError(f"no input files in {src}")
    with ThreadPoolExecutor(max_workers=max(1, args.threads)) as pool:
        # map() yields in submission order, so output order never depends on timing
        results = list(pool.map(lambda p: _infer_one(p, loc_net, g_net, args.single_knee), files))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    errors = []
    for res in results:
        if "report" in res:
            _write_json(out / f"{Path(res['file']).stem}.report.json", res["report"])
        else:
            errors.append(res)
            log.warning("%s: %s error: %s", res["file"], res["error"]["stage"], res["error"]["message"])
    _write_json(out / "errors.json", errors)
    log.info("%d reports, %d errors", len(results) - len(errors), len(errors))
    return 1 if len(errors) == len(results) else 0


def cmd_experiment(args) -> int:
    path = Path(args.config)
    if not path.is_file():
        raise UsageError(f"config not found: {path}")
    try:
        config = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"config is not valid JSON: {exc}") from None
    if not isinstance(config, dict):
        raise UsageError("config must be a JSON object")
    if args.seed_given:
        config["seed"] = args.seed
    try:
        P.validate_config(config)
    except P.ConfigError as exc:
        raise UsageError("invalid config:\n  " + "\n  ".join(exc.problems)) from None
    result = P.run_experiment(config, args.out)
    json.dump(result.summary, sys.stdout, indent=2, sort_keys=True, default=float)
    sys.stdout.write("\n")
    return 0


# ------------------------------------------------------------------ parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    default_out = os.environ.get(OUT_ENV) or DEFAULT_OUT
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    common.add_argument("--out", default=default_out, help=f"output directory (default ${OUT_ENV} or {DEFAULT_OUT})")
    common.add_argument("--threads", type=int, default=1, help="cap on worker threads")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    parser = _Parser(prog="kneegrade", description="Two-stage knee osteoarthritis grading toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", parents=[common], help="generate a synthetic bilateral dataset")
    p.add_argument("--n", type=int, default=DEFAULTS["gen.n"])
    p.add_argument("--profile", default=DEFAULTS["gen.profile"], help="profile name or JSON object")
    p.add_argument("--grade-weights", default=None, help="5 comma-separated weights (default uniform)")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train-locator", parents=[common], help="train the stage-1 knee locator")
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int, default=DEFAULTS["train-locator.epochs"])
    p.add_argument("--lr", type=float, default=DEFAULTS["train-locator.lr"])
    p.set_defaults(func=cmd_train_locator)

    for name, func in (("train-grader", cmd_train_grader), ("finetune", cmd_finetune)):
        p = sub.add_parser(name, parents=[common], help=f"{name.replace('-', ' ')} on a dataset's train split")
        p.add_argument("--data", required=True)
        p.add_argument("--split", default=DEFAULTS["split"], help="train,val,test fractions")
        p.add_argument("--lr", type=float, default=DEFAULTS["train-grader.lr"])
        if name == "train-grader":
            p.add_argument("--head", choices=G.HEADS, default=DEFAULTS["train-grader.head"])
            p.add_argument("--epochs", type=int, default=DEFAULTS["train-grader.epochs"])
        else:
            p.add_argument("--grader", required=True)
            p.add_argument("--epochs", type=int, default=DEFAULTS["finetune.epochs"])
            p.add_argument("--lr-scale", type=float, default=DEFAULTS["finetune.lr_scale"])
        p.set_defaults(func=func)

    p = sub.add_parser("eval", parents=[common], help="evaluate a grader (optionally with a locator)")
    p.add_argument("--grader", required=True)
    p.add_argument("--locator", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default=DEFAULTS["split"], help="fractions whose test part is scored, or 'all'")
    p.add_argument("--resamples", type=int, default=2000)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", parents=[common], help="grade radiographs (DICOM or PGM, file or directory)")
    p.add_argument("--locator", default=None)
    p.add_argument("--grader", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--single-knee", action="store_true", help="inputs are pre-cropped knees; skip the locator")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("experiment", parents=[common], help="run an experiment config")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.seed_given = args.seed is not None
        args.seed = 0 if args.seed is None else args.seed
        if args.threads < 1:
            raise UsageError("--threads must be at least 1")
    except UsageError as exc:
        print(f"kneegrade: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"kneegrade: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # anything else is a runtime failure
        log.debug("traceback", exc_info=True)
        print(f"kneegrade: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
