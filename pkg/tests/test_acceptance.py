"""End-to-end acceptance checks.

Each test prints one ``PASS``/``FAIL`` line straight to the terminal (even
under output capture) and then asserts. The slow ones train the full-size
224x224 network on synthetic bright-blob/dark-blob images.
"""

import json
import math
import time
from collections import OrderedDict

import numpy as np
import pytest

from covidnn.cli import main
from covidnn.exceptions import BadMagicError, ShapeMismatchError, TruncatedArchiveError
from covidnn.gradcheck import TOLERANCE, run_suite, summarize
from covidnn.io import encode_archive, load_weights, read_archive, read_header, save_weights, verify_pretrained_alexnet
from covidnn.metrics import auc, confusion_matrix, report_from_predictions, roc_points
from covidnn.models import Network, build_alexnet, build_proposed_cnn, replace_last_layers
from covidnn.tensor import seeded_rng
from covidnn.training import TrainConfig, TrainingCurve, accuracy, train

from synthetic import blob_images, write_blob_dataset


@pytest.fixture
def verdict(capsys):
    def emit(number, title, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {number}] {'PASS' if ok else 'FAIL'} {title}: {detail}")
        assert ok, f"criterion {number} ({title}) failed: {detail}"

    return emit


def _recount(y_true, y_pred):
    tp = tn = fp = fn = 0
    for t, p in zip(y_true, y_pred):
        if t == 1:
            tp, fn = (tp + 1, fn) if p == 1 else (tp, fn + 1)
        else:
            tn, fp = (tn + 1, fp) if p == 0 else (tn, fp + 1)
    return tp, tn, fp, fn


def _brute_force_roc(scores, labels):
    pos = sum(labels)
    neg = len(labels) - pos
    points = set()
    for thr in [math.inf, -math.inf, *scores]:
        tp = sum(1 for s, y in zip(scores, labels) if s >= thr and y == 1)
        fp = sum(1 for s, y in zip(scores, labels) if s >= thr and y == 0)
        points.add((fp / neg, tp / pos))
    points = sorted(points)
    return sum((b[0] - a[0]) * (a[1] + b[1]) / 2 for a, b in zip(points, points[1:]))


def test_criterion_1_gradient_oracle(verdict):
    start = time.perf_counter()
    summary = summarize(run_suite(range(10)))
    elapsed = time.perf_counter() - start
    kinds = {"conv", "batchnorm", "relu", "maxpool", "lrn", "fc", "softmax_xent"}
    worst = max(w for _, w in summary.values())
    failed = [k for k, (ok, _) in summary.items() if not ok]
    ok = kinds <= set(summary) and not failed and worst < TOLERANCE and elapsed < 60
    verdict(1, "gradient oracle", ok, f"{len(summary)} layer kinds x 10 seeds, worst rel err {worst:.2e}, "
            f"failed={failed}, {elapsed:.1f} s")


def test_criterion_2_architecture_shapes(verdict):
    rng = np.random.default_rng(0)
    cnn = Network(build_proposed_cnn(), seeded_rng(0))
    cnn.set_mode("train")
    x = rng.uniform(size=(2, 224, 224, 3)).astype(np.float32)
    conv = cnn.forward(x, upto="conv1").shape
    logits = cnn.forward(x).shape
    alex = Network(build_alexnet(), seeded_rng(0))
    alex.set_mode("infer")
    y = rng.uniform(size=(1, 227, 227, 3)).astype(np.float32)
    conv1 = alex.forward(y, upto="conv1").shape
    flat = alex.forward(y, upto="flatten").shape
    out = alex.forward(y).shape
    ok = conv == (2, 224, 224, 16) and logits == (2, 2) and conv1[1:3] == (55, 55) and flat == (1, 9216) \
        and out == (1, 1000)
    verdict(2, "architecture shapes", ok, f"cnn conv1 {conv[1:]}, logits {logits[1:]}; alexnet conv1 {conv1[1:]}, "
            f"flatten {flat[1:]}, logits {out[1:]}")


@pytest.mark.slow
def test_criterion_3_protocol_fidelity(tmp_path, verdict, capsys):
    manifest = write_blob_dataset(tmp_path / "raw", 120, 96, seed=30)
    cache = tmp_path / "cache"
    assert main(["preprocess", "--manifest", manifest, "--out-dir", str(cache), "--size", "224"]) == 0
    config = tmp_path / "run.json"
    config.write_text(json.dumps({
        "model": "cnn", "manifest": "cache/manifest.csv", "cache_dir": "cache", "output_dir": "out",
        "mini_batch_size": 10, "epochs": 20, "validation_frequency_iters": 3, "train_fraction": 0.5, "seed": 1,
    }))
    assert main(["train", "--config", str(config)]) == 0
    curve = TrainingCurve.from_csv(tmp_path / "out" / "curve.csv")
    meta = json.loads((tmp_path / "out" / "run.json").read_text())
    iterations = [r.iteration for r in curve]
    validated = [r.iteration for r in curve if r.val_accuracy is not None]
    ok = (
        meta["n_train"] == 60 and meta["n_val"] == 60
        and iterations == list(range(1, 121))
        and validated == [i for i in iterations if i % 3 == 0]
    )
    verdict(3, "protocol fidelity", ok, f"train/val {meta['n_train']}/{meta['n_val']}, {len(curve)} iterations, "
            f"{len(validated)} validation records at multiples of 3")


@pytest.mark.slow
def test_criterion_4_learning_smoke(tmp_path, verdict, capsys):
    start = time.perf_counter()
    images, labels = blob_images(40, 224, seed=21)
    net = Network(build_proposed_cnn(), seeded_rng(0))
    config = TrainConfig(seed=0)
    net, curve = train(net, images[:20], labels[:20], images[20:], labels[20:], config)
    train_acc = accuracy(net, images[:20], labels[:20])
    val_acc = accuracy(net, images[20:], labels[20:])

    manifest = write_blob_dataset(tmp_path / "blobs", 40, 224, seed=22)
    code = main(["multirun", "--manifest", manifest, "--num-runs", "10", "--seed", "0",
                 "--output-dir", str(tmp_path / "multi")])
    aggregate = json.loads((tmp_path / "multi" / "aggregate.json").read_text())
    mean = aggregate["accuracy"]["mean"]
    elapsed = time.perf_counter() - start
    ok = (
        len(curve) <= 200 and train_acc == 1.0 and val_acc >= 0.95
        and code == 0 and aggregate["runs"] == 10 and mean >= 0.95 and elapsed < 600
    )
    verdict(4, "learning smoke test", ok, f"{len(curve)} iterations, train acc {train_acc:.3f}, val acc "
            f"{val_acc:.3f}; multirun x{aggregate['runs']} mean val acc {mean:.3f} "
            f"(std {aggregate['accuracy']['std']:.3f}); {elapsed:.0f} s")


def test_criterion_5_metric_exactness(verdict):
    y_true = np.array([1] * 25 + [0] * 25)
    y_pred = np.array([1] * 25 + [0] * 23 + [1] * 2)
    report = report_from_predictions(y_true, y_pred)
    c = report.confusion
    fixture_ok = (c.tp, c.fn, c.tn, c.fp) == (25, 0, 23, 2) and (
        report.sensitivity, report.specificity, report.accuracy) == (1.00, 0.92, 0.96)
    rng = np.random.default_rng(5)
    mismatches = 0
    for _ in range(1000):
        n = int(rng.integers(1, 200))
        t = rng.integers(0, 2, n)
        p = rng.integers(0, 2, n)
        c = confusion_matrix(t, p)
        if (c.tp, c.tn, c.fp, c.fn) != _recount(t, p):
            mismatches += 1
    ok = fixture_ok and mismatches == 0
    verdict(5, "metric exactness", ok, f"sensitivity {report.sensitivity}, specificity {report.specificity}, "
            f"accuracy {report.accuracy}; {mismatches} recount mismatches in 1000 fixtures")


def test_criterion_6_roc_properties(verdict):
    rng = np.random.default_rng(6)
    worst = 0.0
    bad = 0
    for _ in range(100):
        n = int(rng.integers(2, 60))
        labels = rng.integers(0, 2, n)
        labels[rng.permutation(n)[:2]] = [0, 1]
        scores = np.round(rng.uniform(size=n), int(rng.integers(1, 4)))
        pts = roc_points(scores, labels)
        coords = [(p.fpr, p.tpr) for p in pts]
        monotone = all(a[0] <= b[0] and a[1] <= b[1] for a, b in zip(coords, coords[1:]))
        if coords[0] != (0.0, 0.0) or coords[-1] != (1.0, 1.0) or not monotone:
            bad += 1
        worst = max(worst, abs(auc(pts) - _brute_force_roc(list(scores), list(labels))))
    ok = bad == 0 and worst <= 1e-12
    verdict(6, "ROC properties", ok, f"{bad} endpoint/monotonicity violations in 100 sets, "
            f"max |AUC - brute force| {worst:.1e}")


def test_criterion_7_serialization(tmp_path, verdict):
    small = Network(build_proposed_cnn(4, 12), seeded_rng(3))
    small.loss_and_grad(np.random.default_rng(0).uniform(size=(4, 12, 12, 3)).astype(np.float32), [0, 1, 0, 1])
    first, second = tmp_path / "a.cvnw", tmp_path / "b.cvnw"
    save_weights(small, first)
    save_weights(load_weights(first, Network(small.spec, initialize=False)), second)
    identical = first.read_bytes() == second.read_bytes()

    raw = first.read_bytes()
    errors = {}
    (tmp_path / "magic.cvnw").write_bytes(b"CVNX" + raw[4:])
    (tmp_path / "short.cvnw").write_bytes(raw[:-7])
    state = OrderedDict(read_archive(first))
    state["fc1.weight"] = np.zeros((12 * 12 * 16, 5), np.float32)
    (tmp_path / "shape.cvnw").write_bytes(encode_archive(state))
    for name, expected in (("magic", BadMagicError), ("short", TruncatedArchiveError), ("shape", ShapeMismatchError)):
        try:
            load_weights(tmp_path / f"{name}.cvnw", Network(small.spec, initialize=False))
            errors[name] = None
        except Exception as exc:  # noqa: BLE001 - recording which error type came back
            errors[name] = type(exc) if type(exc) is expected else None
    distinct = all(errors.values()) and len(set(errors.values())) == 3

    # closed-form count of the default network: conv W,b + BN gamma,beta + fc1 W,b + fc2 W,b
    expected_params = 16 * (5 * 5 * 3) + 16 + 2 * 16 + 802816 * 32 + 32 + 32 * 2 + 2
    path = tmp_path / "cnn.cvnw"
    save_weights(Network(build_proposed_cnn(32), seeded_rng(0)), path)
    _, _, payload = read_header(path)
    ok = identical and distinct and payload == 4 * expected_params
    verdict(7, "serialization", ok, f"round trip identical={identical}; errors "
            f"{ {k: (v.__name__ if v else None) for k, v in errors.items()} }; payload {payload} bytes = 4 x "
            f"{payload // 4} (closed-form count {expected_params})")


def test_criterion_8_transfer_surgery(tmp_path, verdict):
    base = Network(build_alexnet(), seeded_rng(8))
    before = {k: v.copy() for k, v in base.state_dict().items()}
    surgered = replace_last_layers(base, 2, seeded_rng(9))
    after = surgered.state_dict()
    changed = [k for k, v in before.items() if not k.startswith("fc8.") and after[k].tobytes() != v.tobytes()]
    x = np.random.default_rng(1).uniform(size=(1, 227, 227, 3)).astype(np.float32)
    surgered.set_mode("infer")
    logits = surgered.forward(x).shape
    path = tmp_path / "surgered.cvnw"
    save_weights(surgered, path)
    flagged = verify_pretrained_alexnet(path).flagged
    ok = not changed and logits == (1, 2) and set(flagged) == {"fc8.weight", "fc8.bias"}
    verdict(8, "transfer surgery", ok, f"{len(before) - 2} pre-fc8 tensors unchanged (changed={changed}), "
            f"logits {logits[1:]}, flagged {flagged}")


@pytest.mark.slow
def test_criterion_9_determinism(tmp_path, verdict, capsys):
    manifest = write_blob_dataset(tmp_path / "raw", 20, 224, seed=90)
    outputs = []
    for name in ("first", "second"):
        config = tmp_path / f"{name}.json"
        config.write_text(json.dumps({"model": "cnn", "manifest": manifest, "seed": 42, "output_dir": name}))
        assert main(["train", "--config", str(config)]) == 0
        out = tmp_path / name
        outputs.append(((out / "weights.cvnw").read_bytes(), (out / "curve.csv").read_bytes()))
    (w1, c1), (w2, c2) = outputs
    ok = w1 == w2 and c1 == c2
    verdict(9, "determinism", ok, f"weights identical={w1 == w2} ({len(w1)} bytes), curve identical={c1 == c2}")
