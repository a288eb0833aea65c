"""Release gate: the end-to-end checks this package must pass before shipping.

Each test covers one gate criterion at its stated tolerance and runtime
budget, and prints a single ``ACCEPTANCE <n> <name>: PASS`` line with the
headline measurement. Tests are numbered so `pytest -v` reads as the gate
checklist. They are heavier than the unit suites; the whole module is meant
to run in well under an hour on one desktop core.
"""

import json
import math
import os
import time

import numpy as np

from conftest import gradcheck, module_gradcheck, relu_margin
from wastecaps import capsules as C
from wastecaps import cli
from wastecaps import data as D
from wastecaps import experiments as E
from wastecaps import layers as L
from wastecaps import metrics as M
from wastecaps import synthetic as S
from wastecaps import tensor as T


def _report(n, name, detail):
    print(f"ACCEPTANCE {n} {name}: PASS ({detail})")


# ---------------------------------------------------------------------------
# 1. gradient suite


def _margin_safe_vectors(rng, shape, lo=0.1, hi=0.9, gap=5e-3):
    """Capsule-output-like vectors whose norms avoid the hinge thresholds."""
    while True:
        v = rng.uniform(-1.0, 1.0, size=shape)
        norms = np.sqrt((v * v).sum(axis=-1))
        if (np.abs(norms - lo) > gap).all() and (np.abs(norms - hi) > gap).all():
            return v


def test_01_gradient_suite():
    t0 = time.monotonic()
    instances = 20
    worst = {}

    def check(name, fn):
        errs = []
        seed = 0
        done = 0
        while done < instances:
            err = fn(np.random.default_rng((913, seed)))
            seed += 1
            if err is None:  # instance rejected (too close to a kink)
                continue
            errs.append(err)
            done += 1
        worst[name] = max(errs)

    def conv_case(rng):
        k = int(rng.integers(1, 4))
        stride = int(rng.integers(1, 3))
        pad = int(rng.integers(0, 2))
        mod = L.Conv2d(2, 3, k, stride=stride, padding=pad, rng=rng)
        x = rng.uniform(-1, 1, size=(2, 2, 5, 5))
        return module_gradcheck(mod, x)

    def dense_block_case(rng):
        mod = L.DenseBlock(2, 2, 2, rng=rng)
        x = rng.uniform(-1, 1, size=(1, 2, 5, 5))
        m = relu_margin(lambda: mod(T.Tensor(x)))
        if m < 2e-3:
            return None
        return module_gradcheck(mod, x)

    def fc_case(rng):
        mod = L.FullyConnected(int(rng.integers(2, 7)), int(rng.integers(2, 5)), rng=rng)
        x = rng.uniform(-1, 1, size=(3, mod.in_features))
        return module_gradcheck(mod, x)

    def softmax_case(rng):
        x = rng.uniform(-2, 2, size=(int(rng.integers(2, 5)), int(rng.integers(2, 6))))
        return gradcheck(lambda a: T.softmax(a, axis=1), [x])

    def squash_case(rng):
        x = rng.uniform(0.2, 1.0, size=(2, 3, int(rng.integers(2, 5))))
        x *= rng.choice([-1.0, 1.0], size=x.shape)
        return gradcheck(lambda a: C.squash(a), [x])

    def primary_case(rng):
        mod = C.PrimaryCapsules(2, 2, 3, kernel_size=2,
                                stride=int(rng.integers(1, 3)), rng=rng)
        x = rng.uniform(-1, 1, size=(1, 2, 4, 4))
        return module_gradcheck(mod, x)

    def route_case(rng):
        n_in, n_out = int(rng.integers(3, 6)), int(rng.integers(2, 4))
        p = rng.uniform(-0.8, 0.8, size=(2, n_in, 3))
        w = rng.uniform(-0.8, 0.8, size=(n_in, n_out, 2, 3))
        return gradcheck(lambda a, b: C.route(a, b, 3), [p, w])

    def margin_case(rng):
        v = _margin_safe_vectors(rng, (3, 4, 3))
        onehot = np.eye(4)[rng.integers(0, 4, size=3)]
        return gradcheck(lambda a: C.margin_loss(a, T.Tensor(onehot)), [v])

    def xent_case(rng):
        logits = rng.uniform(-2, 2, size=(4, 5))
        onehot = np.eye(5)[rng.integers(0, 5, size=4)]
        return gradcheck(
            lambda a: E.cross_entropy(T.softmax(a, axis=1), T.Tensor(onehot)),
            [logits])

    check("conv2d", conv_case)
    check("dense_block", dense_block_case)
    check("fully_connected", fc_case)
    check("softmax", softmax_case)
    check("squash", squash_case)
    check("primary_capsules", primary_case)
    check("route", route_case)
    check("margin_loss", margin_case)
    check("cross_entropy", xent_case)

    elapsed = time.monotonic() - t0
    overall = max(worst.values())
    assert overall < 1e-3, worst
    assert elapsed < 120.0, f"gradient suite took {elapsed:.0f}s"
    _report(1, "gradient suite",
            f"9 ops x {instances} instances, max rel err {overall:.2e}, {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 2. capsule invariants


def test_02_capsule_invariants():
    t0 = time.monotonic()
    rng = np.random.default_rng(77)

    v = rng.standard_normal((10_000, 6)) * rng.uniform(0.01, 20, size=(10_000, 1))
    out = C.squash(T.Tensor(v)).data
    norms = np.linalg.norm(out, axis=-1)
    assert (norms >= 0).all() and (norms < 1).all()
    vn = np.linalg.norm(v, axis=-1)
    cos = (out * v).sum(axis=-1) / (norms * vn)
    assert np.allclose(cos, 1.0, atol=1e-9), "squash must preserve direction"

    iters_checked = 0
    for trial in range(20):
        r = np.random.default_rng((78, trial))
        n, n_in, n_out = 3, int(r.integers(2, 9)), int(r.integers(2, 6))
        p = r.standard_normal((n, n_in, 4))
        w = r.standard_normal((n_in, n_out, 3, 4))
        _, state = C.route(T.Tensor(p), T.Tensor(w), 3, return_state=True)
        assert len(state["couplings"]) == 3
        for c in state["couplings"]:
            rows = c.sum(axis=2)
            assert np.abs(rows - 1.0).max() < 1e-6
            iters_checked += 1

    p = rng.standard_normal((2, 5, 4))
    zero_w = np.zeros((5, 3, 2, 4))
    out = C.route(T.Tensor(p), T.Tensor(zero_w), 3).data
    assert np.all(out == 0.0), "zero transform must give zero output"

    elapsed = time.monotonic() - t0
    assert elapsed < 30.0
    _report(2, "capsule invariants",
            f"10k squash vectors, {iters_checked} coupling iterations, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 3. metric oracle


def _brute_force_report(counts):
    k = counts.shape[0]
    per = []
    for c in range(k):
        tp = counts[c, c]
        fp = counts[:, c].sum() - tp
        fn = counts[c, :].sum() - tp
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * p * r / (p + r) if p + r else 0.0
        per.append((p, r, f1))
    acc = np.trace(counts) / counts.sum()
    macro = tuple(float(np.mean([row[i] for row in per])) for i in range(3))
    support = counts.sum(axis=1).astype(float)
    weights = support / support.sum()
    weighted = tuple(
        float((np.array([row[i] for row in per]) * weights).sum()) for i in range(3))
    return per, macro, weighted, float(acc)


def test_03_metric_oracle():
    t0 = time.monotonic()
    rng = np.random.default_rng(5150)
    checked = 0
    while checked < 1000:
        k = int(rng.integers(2, 11))
        counts = rng.integers(0, 50, size=(k, k))
        if checked % 5 == 0:  # force degenerate rows/columns regularly
            counts[rng.integers(0, k), :] = 0
        if checked % 7 == 0:
            counts[:, rng.integers(0, k)] = 0
        if counts.sum() == 0:
            continue
        checked += 1
        names = [f"c{i}" for i in range(k)]
        rep = M.compute_report(M.ConfusionMatrix(counts.astype(np.int64), names))
        per, macro, weighted, acc = _brute_force_report(counts)
        for c in range(k):
            assert abs(rep.precision[c] - per[c][0]) < 1e-12
            assert abs(rep.recall[c] - per[c][1]) < 1e-12
            assert abs(rep.f1[c] - per[c][2]) < 1e-12
        assert abs(rep.macro_precision - macro[0]) < 1e-12
        assert abs(rep.macro_recall - macro[1]) < 1e-12
        assert abs(rep.macro_f1 - macro[2]) < 1e-12
        assert abs(rep.weighted_precision - weighted[0]) < 1e-12
        assert abs(rep.weighted_recall - weighted[1]) < 1e-12
        assert abs(rep.weighted_f1 - weighted[2]) < 1e-12
        assert abs(rep.accuracy - acc) < 1e-12

    rep = M.compute_report(M.confusion([0, 0, 1], [0, 1, 1], 2))
    assert rep.macro_f1 == 2.0 / 3.0

    elapsed = time.monotonic() - t0
    assert elapsed < 10.0
    _report(3, "metric oracle", f"1000 matrices within 1e-12, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 4. pipeline invariants


def test_04_pipeline_invariants(tmp_path):
    t0 = time.monotonic()
    root = tmp_path / "corpus"
    S.write_toy_corpus(str(root), per_class=33, seed=11)
    manifest = D.ingest_directory(str(root))
    counts = {c: 0 for c in manifest.classes}
    for e in manifest.entries:
        counts[e.class_name] += 1
    assert all(v >= 30 for v in counts.values())

    split = D.stratified_split(manifest, seed=4)
    for cls in manifest.classes:
        n = counts[cls]
        got = {s: sum(1 for e in split.entries if e.class_name == cls and e.split == s)
               for s in D.SPLITS}
        assert abs(got["train"] - 0.70 * n) <= 1
        assert abs(got["val"] - 0.15 * n) <= 1
        assert abs(got["test"] - 0.15 * n) <= 1

    plan = D.AugmentationPlan(per_class_extra={"gloves": 1, "mask": 2}, rng_seed=0)
    train_samples = D.load_split_samples(split, str(root), "train")
    augmented = D.augment_samples(train_samples, plan, list(split.classes), target=64)

    def label_count(samples, cls):
        idx = split.classes.index(cls)
        return sum(1 for s in samples if s.label == idx)

    for cls, factor in (("gloves", 2), ("mask", 3)):
        before = label_count(train_samples, cls)
        after = label_count(augmented, cls)
        assert after == factor * before, (cls, before, after)

    img = np.full((100, 40, 3), 200, dtype=np.uint8)
    out = D.pad_resize(img, 224)
    assert out.shape == (224, 224, 3)
    scaled_w = int(40 * (224 / 100) + 0.5)
    pad = (224 - scaled_w) // 2
    assert np.all(out[:, :pad] == 0) and np.all(out[:, pad + scaled_w:] == 0)
    assert out[:, pad:pad + scaled_w].max() > 0

    elapsed = time.monotonic() - t0
    assert elapsed < 60.0
    _report(4, "pipeline invariants",
            f"9 classes x >=30 images, 70/15/15 +-1, x2/x3 augmentation, {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 5. capacity: every architecture memorizes 50 samples


MEMO_CONFIGS = {
    "baseline": dict(optimizer="adam", learning_rate=0.01, dropout_rate=0.4,
                     l2_weight=0.00001, batch_size=50),
    "frozen_hybrid": dict(optimizer="adam", learning_rate=0.01, dropout_rate=0.4,
                          l2_weight=0.00001, batch_size=50),
    "unfrozen_hybrid": dict(optimizer="adam", learning_rate=0.01, dropout_rate=0.4,
                            l2_weight=0.00001, batch_size=50),
}


def test_05_capacity_memorization():
    t0 = time.monotonic()
    x, y = S.make_pose_dataset(6, size=32, seed=21)
    x, y = x[:50], y[:50]
    data = (x, np.eye(9, dtype=np.float32)[y])

    losses = {}
    for tag in E.EXPERIMENTS:
        cfg = E.ExperimentConfig(
            experiment=tag, input_size=32, hidden_units=64,
            capsule_channels=8, primary_dim=8, class_dim=16,
            primary_kernel=3, primary_stride=2,
            max_epochs=200, early_stop_patience=200, seed=3,
            **MEMO_CONFIGS[tag])
        result = E.train(cfg, data, data)
        losses[tag] = result.best_val_loss
        assert result.best_val_loss < 0.05, (tag, result.best_val_loss)

    elapsed = time.monotonic() - t0
    assert elapsed < 600.0
    detail = ", ".join(f"{k} {v:.4f}" for k, v in losses.items())
    _report(5, "capacity", f"{detail}, {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 6. ordering experiment


ORDERING_SEEDS = (1, 2, 3)


def test_06_ordering_experiment():
    t0 = time.monotonic()
    splits = S.make_pose_splits(2700, 540, 540, size=64, seed=100)
    xt, yt = splits["train"]
    xv, yv = splits["val"]
    xs, ys = splits["test"]

    def encode(x, y):
        return (x, np.eye(9, dtype=np.float32)[y])

    train_data, val_data = encode(xt, yt), encode(xv, yv)

    xp, yp = S.make_pose_dataset(300, size=64, seed=777, clutter=False)
    extractor = L.build_extractor(rng=np.random.default_rng(0))

    fv = E.extract_gap_features(extractor, xv)
    fs = E.extract_gap_features(extractor, xs)
    untrained_probe = E.linear_probe(fv, yv, fs, ys)
    assert abs(untrained_probe - 1.0 / 9.0) <= 0.05, untrained_probe

    state, _ = E.pretrain_extractor(extractor, (xp, yp), epochs=10,
                                    learning_rate=0.003, batch_size=100, seed=0)
    fv = E.extract_gap_features(extractor, xv)
    fs = E.extract_gap_features(extractor, xs)
    pretrained_probe = E.linear_probe(fv, yv, fs, ys)
    assert pretrained_probe >= 1.0 / 9.0 + 0.30, pretrained_probe

    common = dict(optimizer="adam", dropout_rate=0.4, l2_weight=0.00001,
                  batch_size=100, primary_kernel=3, primary_stride=1,
                  input_size=64, max_epochs=14, early_stop_patience=10)
    arms = {
        "baseline": dict(learning_rate=0.0001, unfrozen_layers=10),
        "frozen_hybrid": dict(learning_rate=0.01),
        "unfrozen_hybrid": dict(learning_rate=0.01, unfrozen_layers=10),
    }

    f1s = {tag: [] for tag in arms}
    for seed in ORDERING_SEEDS:
        for tag, extra in arms.items():
            cfg = E.ExperimentConfig(experiment=tag, seed=seed, **common, **extra)
            result = E.train(cfg, train_data, val_data, extractor_state=state)
            _, rep = E.evaluate(result.model, xs, np.eye(9, dtype=np.float32)[ys],
                                batch_size=100)
            f1s[tag].append(rep.macro_f1)

    for i, seed in enumerate(ORDERING_SEEDS):
        u, f, b = f1s["unfrozen_hybrid"][i], f1s["frozen_hybrid"][i], f1s["baseline"][i]
        assert u - f >= -0.01, (seed, u, f)
        assert u - b >= -0.01, (seed, u, b)

    med = sorted(range(3), key=lambda i: f1s["unfrozen_hybrid"][i])[1]
    u, f, b = (f1s["unfrozen_hybrid"][med], f1s["frozen_hybrid"][med],
               f1s["baseline"][med])
    assert u > f and u > b, ("median seed", u, f, b)

    elapsed = time.monotonic() - t0
    assert elapsed < 3600.0
    _report(6, "ordering experiment",
            f"probe {untrained_probe:.2f}->{pretrained_probe:.2f}, "
            f"median unfrozen {u:.3f} > frozen {f:.3f}, baseline {b:.3f}, "
            f"{elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 7. early stopping window


def _simulated_stop(trace, patience=10, cap=100):
    """Epoch at which a capped training loop leaves, and the best epoch."""
    stopper = E.EarlyStopper(patience)
    last = min(len(trace), cap)
    for epoch in range(1, last + 1):
        if stopper.update(epoch, trace[epoch - 1]):
            return epoch, stopper.best_epoch
    return last, stopper.best_epoch


def test_07_early_stopping_window():
    t0 = time.monotonic()

    trace = [5.0, 4.0, 3.0] + [3.5] * 150
    stop, best = _simulated_stop(trace)
    assert (stop, best) == (13, 3)

    trace = [2.0 - 0.001 * i for i in range(150)]
    stop, best = _simulated_stop(trace)
    assert stop == 100 and best == 100, "must never run past the epoch cap"

    trace = [2.0 - 0.01 * i for i in range(95)] + [5.0] * 60
    stop, best = _simulated_stop(trace)
    assert stop == 100 and best == 95, "a late best epoch must not push past the cap"

    rng = np.random.default_rng(8)
    for _ in range(300):
        trace = list(rng.uniform(0.1, 2.0, size=130))
        stop, best = _simulated_stop(trace)
        seen_best, seen_epoch = math.inf, 0
        expected = None
        for epoch in range(1, 101):
            if trace[epoch - 1] < seen_best:
                seen_best, seen_epoch = trace[epoch - 1], epoch
            if epoch - seen_epoch >= 10:
                expected = epoch
                break
        assert stop == (expected or 100)
        assert best == seen_epoch
        if expected is not None:
            assert stop == seen_epoch + 10

    elapsed = time.monotonic() - t0
    assert elapsed < 5.0
    _report(7, "early stopping", f"303 traces, stop == best+10, cap 100, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 8. CLI determinism


CLI_CONFIG = """\
experiment = frozen_hybrid
input_size = 32
max_epochs = 5
early_stop_patience = 10
batch_size = 50
learning_rate = 0.0001
primary_kernel = 2
capsule_channels = 2
primary_dim = 4
class_dim = 8
hidden_units = 16
seed = 9
"""


def _tree_bytes(root):
    out = {}
    for base, _, files in os.walk(root):
        for f in files:
            p = os.path.join(base, f)
            rel = os.path.relpath(p, root)
            if f.startswith("run_") and f.endswith(".json"):
                continue
            with open(p, "rb") as fh:
                out[rel] = fh.read()
    return out


def _run_manifest_artifacts(path):
    with open(path) as fh:
        return json.load(fh)["artifacts"]


def test_08_cli_determinism(tmp_path):
    t0 = time.monotonic()
    corpus = tmp_path / "raw"
    S.write_toy_corpus(str(corpus), per_class=5, seed=6, size_range=(40, 64))
    cfg_path = tmp_path / "run.cfg"
    cfg_path.write_text(CLI_CONFIG)

    sides = {}
    for side in ("a", "b"):
        prep = tmp_path / side / "prep"
        run = tmp_path / side / "run"
        ev = tmp_path / side / "eval"
        assert cli.main(["prepare", "--data-root", str(corpus), "--out", str(prep),
                         "--seed", "3", "--augment-target", "32"]) == 0
        assert cli.main(["train", "--config", str(cfg_path), "--data-root", str(prep),
                         "--out", str(run)]) == 0
        assert cli.main(["eval", "--checkpoint", str(run / "checkpoint.bin"),
                         "--data-root", str(prep), "--split", "val",
                         "--out", str(ev)]) == 0
        sides[side] = {
            "bytes": _tree_bytes(tmp_path / side),
            "manifests": {
                name: _run_manifest_artifacts(p)
                for name, p in (
                    ("prepare", prep / "run_prepare.json"),
                    ("train", run / "run_train.json"),
                    ("eval", ev / "run_eval_val.json"),
                )
            },
        }

    a, b = sides["a"], sides["b"]
    assert a["bytes"].keys() == b["bytes"].keys()
    diff = [k for k in a["bytes"] if a["bytes"][k] != b["bytes"][k]]
    assert not diff, f"non-deterministic artifacts: {diff}"
    assert a["manifests"] == b["manifests"]

    elapsed = time.monotonic() - t0
    assert elapsed < 300.0
    _report(8, "cli determinism",
            f"{len(a['bytes'])} artifacts byte-identical, "
            f"3 run manifests hash-identical, {elapsed:.0f}s")
