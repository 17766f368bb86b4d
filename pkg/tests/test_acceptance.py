"""Acceptance suite: eight checks covering the exact algebraic reductions,
gradient correctness, the symmetry group, published-number arithmetic,
oracle equivalence of the detection metrics, the desk-scale
semi-supervised experiment, and artifact determinism.

Each test prints one [PASS]/[FAIL] line (visible with ``pytest -s``).
The two experiment tests train 9 small detectors between them and
dominate the runtime; all other checks finish in seconds.
"""

import dataclasses
import itertools
import json
import os
import shutil
import subprocess
import sys
from fractions import Fraction

import numpy as np
import pytest

from focalmix import (
    Box3D,
    Detection,
    DetectorConfig,
    FocalParams,
    GenConfig,
    LabeledScan,
    LevelSpec,
    SSLConfig,
    assign_targets,
    backward,
    build_anchor_grid,
    encode_box,
    evaluate_scans,
    focal_loss,
    forward,
    generate_scan,
    init_model,
    iou3d,
    nms,
    smooth_l1,
    soft_focal_loss,
    train,
)
from focalmix.metrics import (
    CPM_RATES,
    FP,
    TP,
    FrocCurve,
    cpm,
    froc,
    match_detections,
    recall_at_rate,
)
from focalmix.model import conv3d_backward, conv3d_forward
from focalmix.transforms import (
    apply_to_anchor_index,
    apply_to_array,
    compose,
    enumerate_group,
    identity_transform,
    inverse,
)

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
DESK_CONFIG = os.path.join(ROOT, "configs", "desk.json")
SPLIT_BASE = {"labeled": 0, "unlabeled": 100_000, "test": 200_000}
SEEDS = (0, 1, 2)
UNLABELED_COUNTS = (0, 8, 32)


def report(index, ok, detail):
    print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {index}: {detail}")
    assert ok, detail


# --- 1: the soft-target loss reduces to focal loss on hard labels -----


def test_criterion_1_soft_loss_reduces_to_focal_loss():
    rng = np.random.default_rng(10)
    n = 10_000
    worst = 0.0
    p = rng.uniform(1e-3, 1.0 - 1e-3, n)
    y = rng.integers(0, 2, n).astype(np.float64)
    a_neg = rng.uniform(0.01, 0.99, n)
    a_pos = rng.uniform(0.01, 0.99, n)
    gamma = rng.uniform(0.0, 4.0, n)
    for i in range(n):
        params = FocalParams(
            alpha_neg=float(a_neg[i]), alpha_pos=float(a_pos[i]), gamma=float(gamma[i])
        )
        soft, _ = soft_focal_loss(p[i : i + 1], y[i : i + 1], params)
        hard, _ = focal_loss(p[i : i + 1], y[i : i + 1], params)
        worst = max(worst, abs(float(soft[0] - hard[0])))
    report(1, worst < 1e-12, f"max |soft - hard| = {worst:.2e} over {n} draws (< 1e-12)")


# --- 2: analytic gradients match finite differences -------------------


def _central_diff(f, x, h=1e-6):
    return (f(x + h) - f(x - h)) / (2.0 * h)


def test_criterion_2_gradient_suite(tiny_model_config):
    rng = np.random.default_rng(11)
    worst_loss = 0.0
    worst_layer = 0.0

    # Losses: soft focal (away from the |y-p| kink) and smooth L1.
    for _ in range(200):
        p = float(rng.uniform(0.02, 0.98))
        y = float(rng.uniform(0.0, 1.0))
        if abs(p - y) < 1e-3:
            continue
        params = FocalParams(
            alpha_neg=float(rng.uniform(0.05, 0.95)),
            alpha_pos=float(rng.uniform(0.05, 0.95)),
            gamma=float(rng.uniform(0.5, 3.0)),
        )
        _, grad = soft_focal_loss([p], [y], params)
        num = _central_diff(lambda q: soft_focal_loss([q], [y], params)[0][0], p)
        if abs(num) > 1e-4:
            worst_loss = max(worst_loss, abs(grad[0] - num) / abs(num))
    for _ in range(200):
        x = float(rng.uniform(-3.0, 3.0))
        if abs(abs(x) - 1.0) < 1e-3:
            continue
        _, grad = smooth_l1(np.array([[x]]), np.zeros((1, 1)))
        num = _central_diff(
            lambda q: smooth_l1(np.array([[q]]), np.zeros((1, 1)))[0][0], x
        )
        if abs(num) > 1e-4:
            worst_loss = max(worst_loss, abs(grad[0, 0] - num) / abs(num))

    # Standalone convolution, both strides.
    for stride in (1, 2):
        x = rng.standard_normal((2, 4, 4, 4))
        w = rng.standard_normal((3, 2, 3, 3, 3)) * 0.3
        b = rng.standard_normal(3) * 0.1
        proj = rng.standard_normal(conv3d_forward(x, w, b, stride=stride, pad=1)[0].shape)

        def obj():
            out, _ = conv3d_forward(x, w, b, stride=stride, pad=1)
            return float(np.sum(out * proj))

        _, cache = conv3d_forward(x, w, b, stride=stride, pad=1)
        dx, dw, db = conv3d_backward(proj, w, cache)
        for arr, grad in ((x, dx), (w, dw), (b, db)):
            flat, gflat = arr.ravel(), grad.ravel()
            for i in rng.integers(flat.size, size=10):
                orig = flat[i]
                flat[i] = orig + 1e-6
                up = obj()
                flat[i] = orig - 1e-6
                down = obj()
                flat[i] = orig
                num = (up - down) / 2e-6
                if abs(num) > 1e-5:
                    worst_layer = max(worst_layer, abs(gflat[i] - num) / abs(num))

    # The assembled network, every parameter tensor sampled, in float64.
    state = init_model(tiny_model_config, dtype=np.float64)
    for d in (state.params, state.adam_m, state.adam_v):
        for k in d:
            d[k] = d[k].astype(np.float64)
    patch = rng.standard_normal(tiny_model_config.input_patch)
    n_anchors = tiny_model_config.anchor_grid().total_count
    dprobs = rng.standard_normal(n_anchors)
    dreg = rng.standard_normal((n_anchors, 4))

    def net_obj():
        out = forward(state, patch)
        return float(np.sum(out.probs * dprobs) + np.sum(out.reg * dreg))

    grads = backward(state, forward(state, patch), dprobs, dreg)
    for name in sorted(state.params):
        flat = state.params[name].ravel()
        for i in rng.integers(flat.size, size=2):
            orig = flat[i]
            flat[i] = orig + 1e-6
            up = net_obj()
            flat[i] = orig - 1e-6
            down = net_obj()
            flat[i] = orig
            num = (up - down) / 2e-6
            if abs(num) > 1e-5:
                worst_layer = max(
                    worst_layer, abs(grads[name].ravel()[i] - num) / abs(num)
                )

    ok = worst_loss < 1e-4 and worst_layer < 1e-3
    report(
        2,
        ok,
        f"worst relative error: losses {worst_loss:.2e} (< 1e-4), "
        f"layers {worst_layer:.2e} (< 1e-3)",
    )


# --- 3: the cube symmetry group, exhaustively -------------------------


def test_criterion_3_group_suite():
    group = enumerate_group()
    ok = len(group) == 48 and len(set(group)) == 48

    index = {t: i for i, t in enumerate(group)}
    table = [[index[compose(a, b)] for b in group] for a in group]  # closure
    ok = ok and all(index[compose(t, inverse(t))] == index[identity_transform()]
                    for t in group)
    ok = ok and all(
        table[table[i][j]][k] == table[i][table[j][k]]
        for i, j, k in itertools.product(range(48), repeat=3)
    )

    grid = build_anchor_grid((16, 16, 16), [LevelSpec(2, 4.0), LevelSpec(4, 8.0)])
    commutes = True
    for t in group:
        pi = apply_to_anchor_index(t, grid)
        offset = 0
        for li in range(len(grid.levels)):
            g = grid.level_cells(li)[0]
            ids = np.arange(g**3).reshape(g, g, g)
            moved = apply_to_array(t, ids).ravel()
            commutes = commutes and np.array_equal(
                moved, pi[offset : offset + g**3] - offset
            )
            offset += g**3
    ok = ok and commutes
    report(
        3,
        ok,
        "48 distinct elements; closure, associativity (48^3), inverses, and "
        "anchor/volume commutation all exhaustive",
    )


# --- 4: published CPM arithmetic --------------------------------------

PUBLISHED_ROWS = [
    # (recall % at the 7 FP rates), CPM %
    ((46.7, 54.0, 60.6, 68.6, 74.4, 79.1, 82.4), 66.6),
    ((57.6, 64.5, 74.6, 80.5, 87.0, 90.1, 92.1), 78.1),
    ((57.2, 65.7, 71.4, 77.9, 82.6, 85.6, 87.2), 75.4),
    ((64.1, 71.0, 78.7, 85.2, 89.3, 92.3, 93.5), 82.0),
    ((64.9, 73.8, 79.7, 85.2, 89.0, 92.3, 94.5), 82.8),
    ((73.4, 80.9, 84.8, 88.6, 92.3, 94.7, 96.1), 87.2),
]


def test_criterion_4_published_cpm_rows():
    worst = 0.0
    for recalls, published in PUBLISHED_ROWS:
        curve = FrocCurve(
            points=[(rate, r / 100.0) for rate, r in zip(CPM_RATES, recalls)],
            n_scans=1,
            n_lesions=1,
        )
        worst = max(worst, abs(cpm(curve) - published))
    report(4, worst <= 0.1, f"max |cpm - published| = {worst:.3f} over 6 rows (<= 0.1)")


# --- 5: brute-force oracles for the detection metrics -----------------


def _iou_oracle(a, b):
    ca = [Fraction(v).limit_denominator(8) for v in a.center]
    cb = [Fraction(v).limit_denominator(8) for v in b.center]
    ea, eb = Fraction(a.edge).limit_denominator(8), Fraction(b.edge).limit_denominator(8)
    inter = Fraction(1)
    for i in range(3):
        lo = max(ca[i] - ea / 2, cb[i] - eb / 2)
        hi = min(ca[i] + ea / 2, cb[i] + eb / 2)
        if hi <= lo:
            return Fraction(0)
        inter *= hi - lo
    return inter / (ea**3 + eb**3 - inter)


def _assign_oracle(grid, gts):
    n = grid.total_count
    cls = np.zeros(n)
    train = np.ones(n, dtype=bool)
    has = np.zeros(n, dtype=bool)
    reg = np.zeros((n, 4))
    for i in range(n):
        anchor = grid.anchor_box(i)
        if not gts:
            continue
        ious = [iou3d(anchor, g) for g in gts]
        best = int(np.argmax(ious))
        if ious[best] > 0.3:
            cls[i] = 1.0
            has[i] = True
            reg[i] = encode_box(anchor, gts[best])
        elif ious[best] >= 0.1:
            train[i] = False
    return cls, reg, has, train

def _nms_oracle(dets, thr):
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    kept = []
    for i in order:
        if all(iou3d(dets[i].box, dets[j].box) < thr for j in kept):
            kept.append(i)
    return [dets[i] for i in kept]


def test_criterion_5_metric_oracles():
    rng = np.random.default_rng(12)
    checked = {"iou3d": 0, "assign": 0, "nms": 0, "froc": 0, "cpm": 0}
    ok = True

    # iou3d against exact rational arithmetic on eighth-integer boxes.
    for _ in range(600):
        a = Box3D(
            center=tuple(float(v) / 8.0 for v in rng.integers(0, 160, 3)),
            edge=float(rng.integers(4, 80)) / 8.0,
        )
        b = Box3D(
            center=tuple(float(v) / 8.0 for v in rng.integers(0, 160, 3)),
            edge=float(rng.integers(4, 80)) / 8.0,
        )
        ok = ok and abs(iou3d(a, b) - float(_iou_oracle(a, b))) < 1e-9
        checked["iou3d"] += 1

    # assign_targets against a per-anchor python loop.
    grid = build_anchor_grid((8, 8, 8), [LevelSpec(2, 4.0)])
    for _ in range(500):
        gts = [
            Box3D(center=tuple(rng.uniform(1, 7, 3)), edge=float(rng.uniform(2, 6)))
            for _ in range(int(rng.integers(0, 4)))
        ]
        got = assign_targets(grid, gts)
        cls, reg, has, train = _assign_oracle(grid, gts)
        ok = (
            ok
            and np.array_equal(got.cls, cls)
            and np.array_equal(got.has_reg, has)
            and np.array_equal(got.train_mask, train)
            and np.allclose(got.reg, reg, atol=1e-9)
        )
        checked["assign"] += 1

    # nms against quadratic re-scanning, scores drawn with ties.
    for _ in range(500):
        dets = [
            Detection(
                box=Box3D(
                    center=tuple(rng.uniform(0, 20, 3)), edge=float(rng.uniform(2, 6))
                ),
                score=float(rng.integers(1, 10)) / 10.0,
            )
            for _ in range(int(rng.integers(0, 15)))
        ]
        thr = float(rng.uniform(0.05, 0.5))
        ok = ok and nms(dets, thr) == _nms_oracle(dets, thr)
        checked["nms"] += 1

    # froc against per-threshold truncation + rematch, and cpm against an
    # independent interpolation.
    for _ in range(500):
        gts = {
            f"s{i}": [
                Box3D(center=tuple(rng.uniform(5, 25, 3)), edge=float(rng.uniform(4, 8)))
                for _ in range(int(rng.integers(1, 3)))
            ]
            for i in range(int(rng.integers(1, 4)))
        }
        dets = {}
        for sid, lesions in gts.items():
            ds = []
            for _ in range(int(rng.integers(0, 6))):
                if rng.random() < 0.5:
                    base = lesions[int(rng.integers(len(lesions)))].center
                    c = tuple(np.asarray(base) + rng.uniform(-2.5, 2.5, 3))
                else:
                    c = tuple(rng.uniform(5, 25, 3))
                ds.append(
                    Detection(box=Box3D(center=c, edge=4.0), score=float(rng.random()))
                )
            dets[sid] = ds
        curve = froc(match_detections(dets, gts))
        n_lesions = sum(len(v) for v in gts.values())
        for (fps, rec), thr in zip(curve.points, curve.thresholds):
            kept = {s: [d for d in ds if d.score >= thr] for s, ds in dets.items()}
            m = match_detections(kept, gts)
            ok = ok and abs(m.labels.count(FP) / len(gts) - fps) < 1e-9
            ok = ok and abs(m.labels.count(TP) / n_lesions - rec) < 1e-9
        checked["froc"] += 1

        xs = [p[0] for p in curve.points]
        ys = [p[1] for p in curve.points]
        for rate in CPM_RATES:
            oracle = 0.0 if rate < xs[0] else float(np.interp(rate, xs, ys))
            ok = ok and abs(recall_at_rate(curve, rate) - oracle) < 1e-9
        oracle_cpm = 100.0 * np.mean(
            [0.0 if r < xs[0] else float(np.interp(r, xs, ys)) for r in CPM_RATES]
        )
        ok = ok and abs(cpm(curve) - oracle_cpm) < 1e-9
        checked["cpm"] += 1

    report(
        5,
        ok and all(v >= 500 for v in checked.values()),
        "oracle agreement on "
        + ", ".join(f"{k}:{v}" for k, v in checked.items())
        + " randomized instances",
    )


# --- 6 & 7: the desk-scale semi-supervised experiment -----------------


def _load_desk_config():
    with open(DESK_CONFIG) as f:
        doc = json.load(f)
    return (
        GenConfig.from_json_dict(doc["gen"]),
        DetectorConfig.from_json_dict(doc["model"]),
        SSLConfig.from_json_dict(doc["ssl"]),
        FocalParams.from_json_dict(doc["focal"]),
        int(doc["epochs"]),
    )


def _splits(gen, n_labeled, n_unlabeled, n_test):
    labeled = [generate_scan(gen, SPLIT_BASE["labeled"] + i) for i in range(n_labeled)]
    unlabeled = [
        LabeledScan(volume=s.volume, boxes=[], id=s.id)
        for s in (
            generate_scan(gen, SPLIT_BASE["unlabeled"] + i) for i in range(n_unlabeled)
        )
    ]
    test = [generate_scan(gen, SPLIT_BASE["test"] + i) for i in range(n_test)]
    return labeled, unlabeled, test


@pytest.fixture(scope="module")
def experiment():
    """Memoized CPM per (seed, unlabeled) cell; each cell trains on first use.

    Lazy so the supervised-vs-focalmix test pays only for its six runs and
    the monotonicity test adds the remaining three.
    """
    gen0, model0, ssl0, focal, epochs = _load_desk_config()
    splits = {}
    results = {}

    def cell(seed, n_unl):
        if (seed, n_unl) in results:
            return results[(seed, n_unl)]
        if seed not in splits:
            gen = dataclasses.replace(gen0, seed=seed)
            splits[seed] = _splits(gen, 4, max(UNLABELED_COUNTS), 24)
        labeled, unlabeled, test = splits[seed]
        ssl = dataclasses.replace(ssl0, seed=seed)
        model = dataclasses.replace(model0, weight_init_seed=seed)
        if n_unl == 0:
            ssl = dataclasses.replace(
                ssl, unlabeled_per_batch=0, image_mixup=False, object_mixup=False
            )
            pool = []
        else:
            pool = unlabeled[:n_unl]
        state, _ = train(labeled, pool, ssl, model, focal, epochs=epochs)
        _, score = evaluate_scans(state, test)
        results[(seed, n_unl)] = score
        print(f"\n  [experiment] seed={seed} unlabeled={n_unl:2d} CPM={score:.2f}")
        return score

    return cell


@pytest.mark.slow
def test_criterion_6_focalmix_beats_supervised(experiment):
    sup = float(np.median([experiment(s, 0) for s in SEEDS]))
    mix = float(np.median([experiment(s, max(UNLABELED_COUNTS)) for s in SEEDS]))
    gap = mix - sup
    report(
        6,
        gap >= 3.0,
        f"median CPM {mix:.2f} (focalmix, 32 unlabeled) vs {sup:.2f} "
        f"(supervised): gap {gap:+.2f} (>= 3 required)",
    )


@pytest.mark.slow
def test_criterion_7_more_unlabeled_helps(experiment):
    medians = [
        float(np.median([experiment(s, u) for s in SEEDS])) for u in UNLABELED_COUNTS
    ]
    drops = [max(0.0, a - b) for a, b in zip(medians, medians[1:])]
    inversions = [d for d in drops if d > 0.0]
    ok = len(inversions) <= 1 and all(d <= 1.0 for d in inversions)
    report(
        7,
        ok,
        "median CPM over unlabeled "
        + str(list(UNLABELED_COUNTS))
        + " = "
        + str([round(m, 2) for m in medians])
        + " (non-decreasing, one <= 1.0 dip allowed)",
    )


# --- 8: byte-identical artifacts under a fixed seed -------------------

CLI_CONFIG = {
    "gen": {"volume_shape": [24, 24, 24], "seed": 13},
    "model": {"input_patch": [8, 8, 8], "stage_channels": [3, 4, 5], "fpn_channels": 4},
    "ssl": {
        "labeled_per_batch": 2,
        "unlabeled_per_batch": 2,
        "steps_per_epoch": 2,
        "ensemble_size": 2,
        "seed": 13,
    },
    "epochs": 2,
}


def _run_cli_cycle(root):
    env = dict(os.environ, FOCALMIX_THREADS="1", SOURCE_DATE_EPOCH="1700000000")
    cfg = os.path.join(root, "config.json")
    with open(cfg, "w") as f:
        json.dump(CLI_CONFIG, f)
    data = os.path.join(root, "data")
    run = os.path.join(root, "run")
    ev = os.path.join(root, "eval")
    commands = [
        ["gen-data", "--config", cfg, "--out", data, "--count-labeled", "2",
         "--count-unlabeled", "2", "--count-test", "2"],
        ["train", "--config", cfg, "--data", data, "--out", run],
        ["eval", "--checkpoint", os.path.join(run, "checkpoint.ckpt"),
         "--data", data, "--out", ev],
    ]
    for argv in commands:
        proc = subprocess.run(
            [sys.executable, "-m", "focalmix", *argv],
            capture_output=True, text=True, env=env,
        )
        assert proc.returncode == 0, f"{argv[0]} failed: {proc.stderr}"
    with open(os.path.join(data, "dataset.json")) as f:
        scan_id = json.load(f)["splits"]["test"][0]
    proc = subprocess.run(
        [sys.executable, "-m", "focalmix", "predict",
         "--checkpoint", os.path.join(run, "checkpoint.ckpt"),
         "--scan", os.path.join(data, "test", scan_id),
         "--out", os.path.join(root, "detections.jsonl"),
         "--min-score", "0.001"],
        capture_output=True, text=True, env=env,
    )
    assert proc.returncode == 0, f"predict failed: {proc.stderr}"

    artifacts = {}
    for dirpath, _, files in os.walk(root):
        for name in files:
            path = os.path.join(dirpath, name)
            with open(path, "rb") as f:
                artifacts[os.path.relpath(path, root)] = f.read()
    return artifacts


def test_criterion_8_determinism(tmp_path):
    root = str(tmp_path / "cycle")
    os.makedirs(root)
    first = _run_cli_cycle(root)
    shutil.rmtree(root)
    os.makedirs(root)
    second = _run_cli_cycle(root)
    same_names = set(first) == set(second)
    diffs = [k for k in first if same_names and first[k] != second[k]]
    ok = same_names and not diffs
    report(
        8,
        ok,
        f"{len(first)} artifacts byte-identical across repeated runs"
        if ok
        else f"differing artifacts: {diffs or 'name sets differ'}",
    )
