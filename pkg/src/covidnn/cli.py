"""Command line entry point: ``covidnn <subcommand> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure (divergence or a failed gradient check).
"""

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional

import numpy as np

from . import data as D
from .estimator import ARCHITECTURES, make_network
from .exceptions import ArchiveError, DataError, DivergenceError, InvalidArchitectureError, InvalidArgumentError
from .gradcheck import run_suite, summarize
from .io import load_model, save_weights
from .metrics import auc, evaluate, roc_points, write_roc_csv
from .tensor import seeded_rng
from .training import SplitData, TrainConfig, multirun, train
from .validation import check_threshold

log = logging.getLogger("covidnn")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class ConfigError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


@dataclass
class RunConfig:
    model: str = "cnn"
    manifest: Optional[str] = None
    output_dir: str = "run"
    pretrained: Optional[str] = None
    from_scratch: bool = False
    threshold: float = 0.5
    modality: str = "xray"
    fc_hidden: int = 32
    input_size: Optional[int] = None
    train_fraction: float = 0.5
    cache_dir: Optional[str] = None
    channel_mean: Optional[list] = None
    train: TrainConfig = field(default_factory=TrainConfig)

    @property
    def image_size(self):
        if self.input_size:
            return self.input_size
        return 227 if self.model == "alexnet" else 224

    def to_dict(self):
        out = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "train"}
        out.update(asdict(self.train))
        return out

    def digest(self):
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


RUN_FIELDS = {f.name: f for f in fields(RunConfig) if f.name != "train"}
TRAIN_FIELDS = set(TrainConfig.field_names())

_TYPES = {
    "model": str, "manifest": str, "output_dir": str, "pretrained": str, "from_scratch": bool,
    "threshold": float, "modality": str, "fc_hidden": int, "input_size": int, "train_fraction": float,
    "cache_dir": str, "channel_mean": list,
    "mini_batch_size": int, "epochs": int, "learning_rate": float, "validation_frequency_iters": int,
    "shuffle_each_epoch": bool, "momentum": float, "seed": int, "num_runs": int, "optimizer": str,
    "freeze_until": str,
}


def _coerce(name, value):
    want = _TYPES[name]
    if value is None:
        return None
    if want is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if want is int and isinstance(value, bool):
        raise ConfigError(f"config field {name!r} must be an integer, got {value!r}")
    if not isinstance(value, want):
        raise ConfigError(f"config field {name!r} must be of type {want.__name__}, got {value!r}")
    return value


def build_run_config(values):
    """Validate a flat ``name -> value`` mapping into a :class:`RunConfig`."""
    run_kw, train_kw = {}, {}
    for name, value in values.items():
        if name in RUN_FIELDS:
            run_kw[name] = _coerce(name, value)
        elif name in TRAIN_FIELDS:
            train_kw[name] = _coerce(name, value)
        else:
            raise ConfigError(f"unknown config field {name!r}")
    try:
        cfg = RunConfig(**run_kw, train=TrainConfig(**train_kw))
    except InvalidArgumentError as exc:
        raise ConfigError(str(exc)) from None
    if cfg.model not in ARCHITECTURES:
        raise ConfigError(f"config field 'model' must be one of {ARCHITECTURES}, got {cfg.model!r}")
    if cfg.model == "alexnet" and not cfg.pretrained and not cfg.from_scratch:
        raise ConfigError("config field 'pretrained': alexnet needs a pretrained archive or --from-scratch")
    if cfg.model == "alexnet" and cfg.pretrained and cfg.from_scratch:
        raise ConfigError("config field 'from_scratch' conflicts with 'pretrained'")
    if cfg.model == "cnn" and cfg.pretrained:
        raise ConfigError("config field 'pretrained' is not allowed for the cnn model")
    if cfg.model == "alexnet" and cfg.input_size not in (None, 227):
        raise ConfigError("config field 'input_size' must be 227 for alexnet")
    if cfg.input_size is not None and cfg.input_size < 5:
        raise ConfigError("config field 'input_size' must be at least 5")
    if cfg.fc_hidden < 2:
        raise ConfigError("config field 'fc_hidden' must be >= 2")
    if cfg.modality not in D.MODALITIES:
        raise ConfigError(f"config field 'modality' must be one of {D.MODALITIES}")
    if not 0 < cfg.train_fraction < 1:
        raise ConfigError("config field 'train_fraction' must lie in (0, 1)")
    if cfg.channel_mean is not None and len(cfg.channel_mean) != 3:
        raise ConfigError("config field 'channel_mean' must hold three numbers")
    try:
        check_threshold(cfg.threshold)
    except InvalidArgumentError as exc:
        raise ConfigError(f"config field 'threshold': {exc}") from None
    if not cfg.manifest:
        raise ConfigError("config field 'manifest' is required")
    return cfg


def load_run_config(path, overrides):
    values = {}
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                values = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(values, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        base = os.path.dirname(os.path.abspath(path))
        for key in ("manifest", "output_dir", "pretrained", "cache_dir"):
            if isinstance(values.get(key), str):
                values[key] = os.path.join(base, values[key])
    values.update({k: v for k, v in overrides.items() if v is not None})
    return build_run_config(values)


# -- data helpers ---------------------------------------------------------------

def _load_checked_manifest(path, modality="xray", size=224):
    manifest = D.read_manifest(path, modality, size)
    problems = D.validate_manifest(manifest)
    if problems:
        for p in problems:
            print(f"{p.kind}: record {p.index} {p.path}: {p.message}", file=sys.stderr)
        raise DataError(f"manifest {path} has {len(problems)} problem(s)")
    return manifest


def _prepare_split(cfg, rng):
    manifest = _load_checked_manifest(cfg.manifest, cfg.modality, cfg.image_size)
    if any(r.split == "unassigned" for r in manifest.records):
        manifest = D.stratified_split(manifest, cfg.train_fraction, rng)
    size = cfg.image_size
    arrays = {}
    for split in ("train", "val", "test"):
        arrays[split] = D.load_split(manifest, split, size, cfg.cache_dir, cfg.channel_mean)
    if not len(arrays["train"][1]) or not len(arrays["val"][1]):
        raise DataError("both the train and the val split must be non-empty")
    test = arrays["test"] if len(arrays["test"][1]) else (None, None)
    return manifest, SplitData(*arrays["train"], *arrays["val"], *test)


def _relocated(manifest, directory):
    """Copy of ``manifest`` whose image paths are relative to ``directory``."""
    root = os.path.abspath(directory)
    records = [replace(r, path=os.path.relpath(manifest.resolve(r), root)) for r in manifest.records]
    return D.DatasetManifest(records, manifest.modality, manifest.target_size, root)


def _write_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- subcommands ----------------------------------------------------------------

def cmd_preprocess(args):
    manifest = _load_checked_manifest(args.manifest, args.modality, args.size)
    os.makedirs(args.out_dir, exist_ok=True)
    failures = []
    for r in manifest.records:
        stem = os.path.join(args.out_dir, D.cache_key(manifest, r, args.size))
        try:
            D.write_cached_tensor(D.load_and_preprocess(r, args.size, manifest.base_dir), stem)
        except DataError as exc:
            failures.append((r.path, str(exc)))
    if failures:
        for path, msg in failures:
            print(f"failed: {path}: {msg}", file=sys.stderr)
        return EXIT_DATA
    D.write_manifest(_relocated(manifest, args.out_dir), os.path.join(args.out_dir, "manifest.csv"))
    print(f"preprocessed {len(manifest.records)} images to {args.out_dir}")
    return EXIT_OK


def cmd_split(args):
    manifest = _load_checked_manifest(args.manifest)
    split = D.stratified_split(manifest, args.train_fraction, seeded_rng(args.seed))
    D.write_manifest(_relocated(split, os.path.dirname(os.path.abspath(args.out))), args.out)
    counts = {s: len(split.select(s)) for s in D.SPLITS}
    print(" ".join(f"{k}={v}" for k, v in counts.items()))
    return EXIT_OK


def _train_overrides(args):
    names = set(RUN_FIELDS) | TRAIN_FIELDS
    return {k: v for k, v in vars(args).items() if k in names and v is not None and v is not False}


def cmd_train(args):
    cfg = load_run_config(args.config, _train_overrides(args))
    rng = seeded_rng(cfg.train.seed)
    manifest, data = _prepare_split(cfg, rng)
    network = make_network(cfg.model, rng, cfg.fc_hidden, cfg.input_size, cfg.pretrained, cfg.from_scratch)
    network, curve = train(
        network, data.train_images, data.train_labels, data.val_images, data.val_labels, cfg.train, rng
    )
    os.makedirs(cfg.output_dir, exist_ok=True)
    save_weights(network, os.path.join(cfg.output_dir, "weights.cvnw"))
    curve.to_csv(os.path.join(cfg.output_dir, "curve.csv"))
    D.write_manifest(_relocated(manifest, cfg.output_dir), os.path.join(cfg.output_dir, "split.csv"))
    points = curve.validation_points()
    _write_json(
        os.path.join(cfg.output_dir, "run.json"),
        {
            "seed": cfg.train.seed,
            "config_sha256": cfg.digest(),
            "config": cfg.to_dict(),
            "iterations": len(curve),
            "n_train": int(len(data.train_labels)),
            "n_val": int(len(data.val_labels)),
            "final_val_accuracy": points[-1].val_accuracy if points else None,
        },
    )
    final = f"{points[-1].val_accuracy:.4f}" if points else "n/a"
    print(f"trained {cfg.model}: {len(curve)} iterations, final validation accuracy {final}")
    return EXIT_OK


def _eval_arrays(args, network):
    manifest = _load_checked_manifest(args.manifest, args.modality, network.spec.input_shape[0])
    images, labels = D.load_split(manifest, args.split, network.spec.input_shape[0], args.cache_dir)
    if not len(labels):
        raise DataError(f"split {args.split!r} of {args.manifest} is empty")
    return images, labels


def cmd_eval(args):
    network = load_model(args.weights)
    images, labels = _eval_arrays(args, network)
    report = evaluate(network, images, labels, check_threshold(args.threshold), args.modality)
    text = report.to_json()
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_predict(args):
    network = load_model(args.weights)
    crop = None
    if args.crop:
        try:
            crop = tuple(int(v) for v in args.crop.split(","))
        except ValueError:
            raise ConfigError("--crop must be x,y,w,h integers") from None
        if len(crop) != 4:
            raise ConfigError("--crop must be x,y,w,h integers")
    size = network.spec.input_shape[:2]
    image = D.preprocess_array(D.decode_image(args.image), size, crop)
    prob = float(network.predict_proba(image[np.newaxis])[0, 1])
    label = int(prob >= check_threshold(args.threshold))
    print(f"{label},{prob:.6g}")
    return EXIT_OK


def cmd_roc(args):
    network = load_model(args.weights)
    images, labels = _eval_arrays(args, network)
    scores = network.predict_proba(images)[:, 1]
    try:
        points = roc_points(scores, labels)
    except InvalidArgumentError as exc:
        raise DataError(str(exc)) from None
    write_roc_csv(points, args.out)
    print(f"auc={auc(points):.6f} points={len(points)}")
    return EXIT_OK


def cmd_multirun(args):
    cfg = load_run_config(args.config, _train_overrides(args))
    _, data = _prepare_split(cfg, seeded_rng(cfg.train.seed))

    def builder(rng):
        return make_network(cfg.model, rng, cfg.fc_hidden, cfg.input_size, cfg.pretrained, cfg.from_scratch)

    result = multirun(builder, data, cfg.train, cfg.threshold, cfg.modality)
    os.makedirs(cfg.output_dir, exist_ok=True)
    for run in result.runs:
        run_dir = os.path.join(cfg.output_dir, f"run_{run.seed}")
        os.makedirs(run_dir, exist_ok=True)
        with open(os.path.join(run_dir, "report.json"), "w", encoding="utf-8") as fh:
            fh.write(run.report.to_json())
        run.curve.to_csv(os.path.join(run_dir, "curve.csv"))
    aggregate = dict(result.aggregate, model=cfg.model, modality=cfg.modality, seeds=[r.seed for r in result.runs])
    _write_json(os.path.join(cfg.output_dir, "aggregate.json"), aggregate)
    print(json.dumps(aggregate, sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(args):
    results = run_suite(range(args.seeds))
    failed = False
    for kind, (ok, worst) in summarize(results).items():
        print(f"{'PASS' if ok else 'FAIL'} {kind} max_rel_error={worst:.3e}")
        failed |= not ok
    if failed:
        for r in results:
            if not r.passed:
                print(f"  {r.kind} [{r.case}] seed={r.seed} {r.target}: {r.max_rel_error:.3e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _add_train_flags(p):
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--model", choices=ARCHITECTURES)
    p.add_argument("--manifest")
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("--pretrained")
    p.add_argument("--from-scratch", dest="from_scratch", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--mini-batch-size", dest="mini_batch_size", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--num-runs", dest="num_runs", type=int)
    p.add_argument("--cache-dir", dest="cache_dir")
    p.add_argument("--input-size", dest="input_size", type=int)


def _add_eval_flags(p):
    p.add_argument("--weights", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test", choices=D.SPLITS)
    p.add_argument("--cache-dir")
    p.add_argument("--modality", default="xray", choices=D.MODALITIES)


def build_parser():
    parser = _Parser(prog="covidnn", description="COVID-19 chest image classification")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("preprocess", help="crop, resize and cache every manifest image")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--size", type=int, choices=(224, 227), default=224)
    p.add_argument("--modality", default="xray", choices=D.MODALITIES)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("split", help="stratified train/val assignment")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--train-fraction", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train one model")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("multirun", help="train and evaluate over consecutive seeds")
    _add_train_flags(p)
    p.set_defaults(func=cmd_multirun)

    p = sub.add_parser("eval", help="accuracy, sensitivity and specificity on a split")
    _add_eval_flags(p)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("roc", help="write ROC points as CSV")
    _add_eval_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_roc)

    p = sub.add_parser("predict", help="classify one image")
    p.add_argument("--weights", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--crop", help="x,y,w,h in source pixels")
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer")
    p.add_argument("--seeds", type=int, default=10)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, InvalidArgumentError, InvalidArchitectureError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ArchiveError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
