"""Release acceptance suite.

One test per release criterion. Each prints a single pass/fail line so a
``pytest -s tests/test_acceptance.py`` run doubles as the sign-off
checklist. The two ablation tests share one module-scoped five-seed
study (roughly ten minutes on a desktop CPU); everything else is fast.
"""

import json
import math
import time

import numpy as np
import pytest

from lnstation import detect_branch as db
from lnstation import metrics as mx
from lnstation import neural
from lnstation import station_branch as sb
from lnstation.config import ExperimentConfig, config_profile, config_to_dict
from lnstation.detect_branch import DetectorConfig, DetectorModel, cam_attribution
from lnstation.experiment import run_ablation_pair
from lnstation.neural import ParameterSet, Tensor, TrainConfig, finite_diff_check
from lnstation.phantom import (
    PhantomConfig,
    sample_short_axis_mm,
    sample_station_metastasis,
)
from lnstation.runner import run
from lnstation.station_branch import StationBranchConfig, StationModel
from lnstation.voxgrid import Mask3D, connected_components

from oracles import (
    auc_pair_count,
    flood_fill_components,
    froc_recount,
    gcn_double_sum,
    max_f1_exhaustive,
)

PROPOSAL_RECALL = 0.9065
ABLATION_SEEDS = (0, 1, 2, 3, 4)


def _verdict(name: str, failures: list):
    status = "pass" if not failures else "FAIL"
    print(f"[acceptance] {name}: {status}")
    assert not failures, f"{name}: " + "; ".join(failures)


# ---------------------------------------------------------------------------
# gradient correctness


def _primitive_cases():
    """(name, builder) per differentiable primitive; builder(rng) returns
    (params, forward_fn) with shapes drawn for that case."""

    def c_add(rng, ps):
        a = ps.add("a", rng.normal(size=(3, 4)))
        b = ps.add("b", rng.normal(size=(3, 4)))
        return lambda: neural.tsum(neural.add(a, b))

    def c_mul(rng, ps):
        a = ps.add("a", rng.normal(size=(4, 2)))
        b = ps.add("b", rng.normal(size=(4, 2)))
        return lambda: neural.tsum(neural.mul(a, b))

    def c_scale(rng, ps):
        a = ps.add("a", rng.normal(size=(5,)))
        return lambda: neural.tsum(neural.scale(a, -1.7))

    def c_shift(rng, ps):
        a = ps.add("a", rng.normal(size=(5,)))
        return lambda: neural.tsum(neural.mul(neural.shift(a, 0.3), a))

    def c_mul_array(rng, ps):
        a = ps.add("a", rng.normal(size=(6,)))
        arr = rng.normal(size=(6,))
        return lambda: neural.tsum(neural.mul_array(a, arr))

    def c_power(rng, ps):
        a = ps.add("a", rng.uniform(0.5, 2.0, size=(7,)))
        return lambda: neural.tsum(neural.power(a, 2.5))

    def c_log(rng, ps):
        a = ps.add("a", rng.uniform(0.2, 3.0, size=(6,)))
        return lambda: neural.tsum(neural.log(a))

    def c_clip(rng, ps):
        a = ps.add("a", rng.normal(size=(8,)))
        return lambda: neural.tsum(neural.mul(neural.clip(a, -0.5, 0.5), a))

    def c_relu(rng, ps):
        a = ps.add("a", rng.normal(size=(3, 5)))
        return lambda: neural.tsum(neural.mul(neural.relu(a), a))

    def c_sigmoid(rng, ps):
        a = ps.add("a", rng.normal(size=(9,)))
        return lambda: neural.tsum(neural.sigmoid(a))

    def c_tsum(rng, ps):
        a = ps.add("a", rng.normal(size=(2, 3, 4)))
        return lambda: neural.tsum(a)

    def c_tmean(rng, ps):
        a = ps.add("a", rng.normal(size=(4, 6)))
        return lambda: neural.tmean(neural.mul(a, a))

    def c_reshape(rng, ps):
        a = ps.add("a", rng.normal(size=(3, 4)))
        b = ps.add("b", rng.normal(size=(12,)))
        return lambda: neural.tsum(neural.mul(neural.reshape(a, (12,)), b))

    def c_matmul(rng, ps):
        a = ps.add("a", rng.normal(size=(3, 4)))
        b = ps.add("b", rng.normal(size=(4, 2)))
        return lambda: neural.tsum(neural.matmul(a, b))

    def c_transpose(rng, ps):
        a = ps.add("a", rng.normal(size=(3, 4)))
        b = ps.add("b", rng.normal(size=(3, 2)))
        return lambda: neural.tsum(neural.matmul(neural.transpose(a), b))

    def c_linear_vec(rng, ps):
        x = ps.add("x", rng.normal(size=(5,)))
        w = ps.add("w", rng.normal(size=(4, 5)))
        b = ps.add("b", rng.normal(size=(4,)))
        return lambda: neural.tsum(neural.linear(x, w, b))

    def c_linear_batch(rng, ps):
        x = ps.add("x", rng.normal(size=(6, 5)))
        w = ps.add("w", rng.normal(size=(3, 5)))
        b = ps.add("b", rng.normal(size=(3,)))
        return lambda: neural.tsum(neural.linear(x, w, b))

    def c_conv3d(rng, ps):
        x = ps.add("x", rng.normal(size=(2, 5, 5, 5)))
        w = ps.add("w", rng.normal(size=(3, 2, 3, 3, 3)))
        b = ps.add("b", rng.normal(size=(3,)))
        return lambda: neural.tsum(neural.conv3d(x, w, b, stride=2, padding=1))

    def c_global_avg_pool(rng, ps):
        x = ps.add("x", rng.normal(size=(3, 2, 2, 2)))
        return lambda: neural.tsum(neural.mul(neural.global_avg_pool(x), neural.global_avg_pool(x)))

    def c_concat(rng, ps):
        a = ps.add("a", rng.normal(size=(3,)))
        b = ps.add("b", rng.normal(size=(4,)))
        return lambda: neural.tsum(neural.mul(neural.concat([a, b]), neural.concat([a, b])))

    def c_stack_rows(rng, ps):
        rows = [ps.add(f"r{i}", rng.normal(size=(4,))) for i in range(3)]
        return lambda: neural.tsum(neural.mul(neural.stack_rows(rows), neural.stack_rows(rows)))

    def c_row(rng, ps):
        a = ps.add("a", rng.normal(size=(5, 3)))
        return lambda: neural.tsum(neural.mul(neural.row(a, 2), neural.row(a, 2)))

    def c_row_softmax(rng, ps):
        a = ps.add("a", rng.normal(size=(4, 4)))
        m = rng.normal(size=(4, 4))
        return lambda: neural.tsum(neural.mul_array(neural.row_softmax(a), m))

    def c_graph_mix(rng, ps):
        a = ps.add("a", rng.normal(size=(4, 4)))
        phi = ps.add("phi", rng.normal(size=(4, 3)))
        return lambda: neural.tsum(
            neural.mul(neural.graph_mix(neural.row_softmax(a), phi), phi)
        )

    def c_focal(rng, ps):
        z = ps.add("z", rng.normal(size=(10,)))
        y = (rng.random(10) < 0.5).astype(np.float64)
        return lambda: neural.tsum(neural.focal_loss(neural.sigmoid(z), y))

    fns = [
        c_add, c_mul, c_scale, c_shift, c_mul_array, c_power, c_log, c_clip,
        c_relu, c_sigmoid, c_tsum, c_tmean, c_reshape, c_matmul, c_transpose,
        c_linear_vec, c_linear_batch, c_conv3d, c_global_avg_pool, c_concat,
        c_stack_rows, c_row, c_row_softmax, c_graph_mix, c_focal,
    ]
    return [(f.__name__[2:], f) for f in fns]


def _station_loss_case(seed: int):
    cfg = StationBranchConfig(
        patch_size=8, encoder_channels=(2, 3, 4), d_h=4, d_s=6, mlp_hidden=4
    )
    rng = np.random.default_rng(seed)
    model = StationModel(cfg, rng)
    patches = rng.normal(30.0, 80.0, size=(12, 8, 8, 8))
    labels = (rng.random(12) < 0.4).astype(np.float64)

    def forward():
        probs, _ = model.forward(patches)
        return neural.tsum(neural.focal_loss(probs, labels))

    return model.params, forward


def _detector_loss_case(seed: int):
    cfg = DetectorConfig(
        patch_size=8, encoder_channels=(2, 3, 4), appearance_dim=6,
        station_dim=8, head_hidden=4,
    )
    rng = np.random.default_rng(seed)
    model = DetectorModel(cfg, rng)
    patch = rng.normal(30.0, 80.0, size=(8, 8, 8))
    dist = rng.uniform(0.0, 1.5, size=12)
    sf = rng.normal(size=cfg.station_dim)

    def forward():
        prob, _, _ = model.forward(patch, dist, sf)
        return neural.focal_loss(prob, 1.0)

    return model.params, forward


def test_gradients_match_finite_differences():
    t0 = time.monotonic()
    failures = []
    for seed, (name, build) in enumerate(_primitive_cases()):
        ps = ParameterSet()
        forward = build(np.random.default_rng(seed), ps)
        rep = finite_diff_check(forward, ps, tolerance=1e-4)
        if not rep.passed:
            failures.append(f"{name}: max rel err {rep.max_rel_err:.3e}")
    for name, case in (("station branch", _station_loss_case),
                       ("detector branch", _detector_loss_case)):
        params, forward = case(seed=100)
        rep = finite_diff_check(forward, params, tolerance=1e-4, max_coords=150)
        if not rep.passed:
            failures.append(f"{name}: max rel err {rep.max_rel_err:.3e}")
    elapsed = time.monotonic() - t0
    if elapsed >= 120.0:
        failures.append(f"runtime {elapsed:.1f}s >= 120s")
    _verdict("gradient checks", failures)


# ---------------------------------------------------------------------------
# focal loss reductions


def test_focal_loss_reductions():
    failures = []
    ps = np.linspace(0.01, 0.99, 50)
    for y in (0.0, 1.0):
        got = neural.focal_loss(Tensor(ps), np.full(50, y), alpha=0.5, gamma=0.0).data
        ce = -(y * np.log(ps) + (1.0 - y) * np.log(1.0 - ps))
        worst = float(np.max(np.abs(got - 0.5 * ce)))
        if worst >= 1e-12:
            failures.append(f"gamma=0 alpha=0.5 vs half-CE (y={y}): err {worst:.2e}")
    point = float(neural.focal_loss(Tensor(0.5), 1.0, alpha=0.25, gamma=2.0).data)
    expected = 0.25 * 0.25 * math.log(2.0)
    if abs(point - expected) >= 1e-12:
        failures.append(f"point value {point!r} != 0.25*0.25*ln2")
    _verdict("focal loss reductions", failures)


# ---------------------------------------------------------------------------
# metric oracles


def _random_detection_table(rng, n_patients=20):
    truths, cands = [], []
    pids = [f"p{i}" for i in range(n_patients)]
    k = 0
    for pid in pids:
        for _ in range(int(rng.integers(1, 4))):
            region = np.asarray([[k % 16, (k // 16) % 16, k // 256]], dtype=np.intp)
            truths.append(mx.GTInstance(gt_id=f"g{k}", patient_id=pid,
                                        voxels=region, short_axis_mm=8.0))
            if rng.random() < 0.8:
                cands.append(mx.ScoredCandidate(
                    candidate_id=f"c{k}", patient_id=pid,
                    score=float(rng.integers(0, 25)) / 25.0, region=region, label=1))
            k += 1
        for _ in range(int(rng.integers(0, 6))):
            cands.append(mx.ScoredCandidate(
                candidate_id=f"f{k}", patient_id=pid,
                score=float(rng.integers(0, 25)) / 25.0,
                region=np.empty((0, 3), dtype=np.intp), label=0))
            k += 1
    return mx.match_detections(cands, truths, pids, (16, 16, 16))


def test_metrics_match_oracles():
    t0 = time.monotonic()
    failures = []
    rng = np.random.default_rng(7)

    for i in range(200):
        n = int(rng.integers(4, 60))
        labels = np.zeros(n, dtype=int)
        labels[: int(rng.integers(1, n))] = 1
        rng.shuffle(labels)
        scores = np.round(rng.normal(size=n), 1)  # ties occur
        got = mx.auc(labels, scores)
        want = auc_pair_count(labels, scores)
        if abs(got - want) >= 1e-12:
            failures.append(f"auc set {i}: |{got} - {want}| >= 1e-12")
            break

    for i in range(60):
        n = int(rng.integers(4, 40))
        labels = np.zeros(n, dtype=int)
        labels[: int(rng.integers(1, n))] = 1
        rng.shuffle(labels)
        scores = np.round(rng.random(n), 2)
        f1, thr = mx.max_f1(labels, scores)
        f1_o, thr_o = max_f1_exhaustive(labels, scores)
        if f1 != f1_o or thr != thr_o:
            failures.append(f"max_f1 set {i}: ({f1}, {thr}) != ({f1_o}, {thr_o})")
            break

    for i in range(10):
        table = _random_detection_table(rng, n_patients=20)
        points = mx.froc_curve(table).points
        want = froc_recount(table.rows, table.n_gt, table.n_patients)
        if len(points) != len(want) or any(
            p != w for p, w in zip(points, want)
        ):
            failures.append(f"froc table {i}: points differ from recount")
            break

    a = np.zeros((6, 6, 6), dtype=bool)
    a[0, 0, 0] = a[1, 0, 0] = True
    b = np.zeros_like(a)
    b[1, 0, 0] = b[2, 0, 0] = True
    if mx.dsc(a, a) != 1.0:
        failures.append("dsc(self) != 1")
    if mx.dsc(a, b) != 2 * 1 / 4:
        failures.append("dsc half-overlap wrong")
    p = np.zeros((6, 6, 6), dtype=bool)
    p[0, 0, 0] = True
    q = np.zeros_like(p)
    q[3, 4, 0] = True
    if mx.cpd(p, p) != 0.0:
        failures.append("cpd(self) != 0")
    if mx.cpd(p, q) != 5.0:
        failures.append("cpd 3-4-5 wrong")

    elapsed = time.monotonic() - t0
    if elapsed >= 60.0:
        failures.append(f"runtime {elapsed:.1f}s >= 60s")
    _verdict("metric oracles", failures)


# ---------------------------------------------------------------------------
# connected components


def test_connected_components_match_flood_fill():
    failures = []
    rng = np.random.default_rng(11)
    for i in range(50):
        dims = tuple(int(d) for d in rng.integers(3, 17, size=3))
        fill = rng.uniform(0.15, 0.7)
        data = (rng.random(dims) < fill).astype(np.uint8)
        mask = Mask3D(data, (1.0, 1.0, 1.0))
        for conn in (6, 26):
            got = {
                frozenset(map(tuple, comp.voxels))
                for comp in connected_components(mask, 1, connectivity=conn)
            }
            want = flood_fill_components(data == 1, conn)
            if got != want:
                failures.append(f"mask {i} connectivity {conn}: partitions differ")
    _verdict("connected components", failures)


# ---------------------------------------------------------------------------
# GCN layer oracle and permutation equivariance


def test_gcn_layer_and_permutation_equivariance():
    failures = []
    cfg = StationBranchConfig(
        patch_size=8, encoder_channels=(2, 3, 4), d_h=5, d_s=6, mlp_hidden=4
    )
    rng = np.random.default_rng(21)
    model = StationModel(cfg, rng)
    model.params["gcn.adj_logits"].data[:] += rng.normal(0.0, 0.5, size=(12, 12))

    h = Tensor(rng.normal(size=(12, cfg.d_h)))
    phi = neural.linear(h, model.params["gcn.phi1.w"], model.params["gcn.phi1.b"])
    mixed = neural.graph_mix(model.adjacency(), phi)
    want = gcn_double_sum(model.params["gcn.adj_logits"].data, phi.data)
    worst = float(np.max(np.abs(mixed.data - want)))
    if worst >= 1e-12:
        failures.append(f"graph layer vs double sum: err {worst:.2e}")

    patches = rng.normal(30.0, 80.0, size=(12, 8, 8, 8))
    probs, feats = model.forward(patches)
    perm = rng.permutation(12)
    logits = model.params["gcn.adj_logits"].data
    logits[:] = logits[np.ix_(perm, perm)]
    probs_p, feats_p = model.forward(patches[perm])
    if not np.array_equal(probs_p.data, probs.data[perm]):
        failures.append("probabilities not permutation equivariant")
    if not np.array_equal(feats_p.data, feats.data[perm]):
        failures.append("features not permutation equivariant")
    _verdict("gcn layer + equivariance", failures)


# ---------------------------------------------------------------------------
# phantom statistics


def test_phantom_statistics():
    failures = []
    cfg = PhantomConfig()
    rng = np.random.default_rng(31)
    axes = np.asarray(
        [sample_short_axis_mm(cfg, rng, is_metastatic=True) for _ in range(10_000)]
    )
    frac = float(np.mean(axes < 10.0))
    if not 0.67 <= frac <= 0.73:
        failures.append(f"fraction below 10mm {frac:.4f} outside [0.67, 0.73]")

    draws = sample_station_metastasis(cfg, np.random.default_rng(32), size=100_000)
    marginals = draws.mean(axis=0)
    worst = float(np.max(np.abs(marginals - np.asarray(cfg.station_probs))))
    if worst > 0.01:
        failures.append(f"copula marginal error {worst:.4f} > 0.01")
    _verdict("phantom statistics", failures)


# ---------------------------------------------------------------------------
# CAM attribution


def test_cam_sums_to_logit():
    failures = []
    cfg = DetectorConfig(
        patch_size=8, encoder_channels=(2, 3, 4), appearance_dim=6,
        station_dim=8, head_hidden=None,
    )
    for seed in range(5):
        rng = np.random.default_rng(seed)
        model = DetectorModel(cfg, rng)
        patch = rng.normal(30.0, 80.0, size=(8, 8, 8))
        dist = rng.uniform(0.0, 1.5, size=12)
        sf = rng.normal(size=cfg.station_dim)
        out = cam_attribution(model, patch, dist, sf)
        bias = float(model.params["head.fc.b"].data[0])
        gap = abs(float(np.sum(out["contributions"])) - (out["logit"] - bias))
        if gap >= 1e-12:
            failures.append(f"seed {seed}: |sum - (logit - bias)| = {gap:.2e}")
    _verdict("cam attribution", failures)


# ---------------------------------------------------------------------------
# pipeline determinism


def _tiny_experiment_config():
    return ExperimentConfig(
        n_patients=6,
        seed=5,
        phantom=PhantomConfig(dims=(64, 64, 64), spacing=(2.0, 2.0, 2.0)),
        station_model=StationBranchConfig(
            patch_size=10, encoder_channels=(2, 3, 4), d_h=6, d_s=8, mlp_hidden=5
        ),
        detector_model=DetectorConfig(
            patch_size=8, encoder_channels=(2, 3, 4), appearance_dim=6,
            station_dim=8, head_hidden=4,
        ),
        station_train=TrainConfig(epochs=2, batch_size=2, lr=0.003, lr_drop_epochs=()),
        detector_train=TrainConfig(epochs=2, batch_size=8, lr=0.01, lr_drop_epochs=()),
    )


def _run_pipeline(cfg_path, root):
    cohort, runs, out = root / "cohort", root / "runs", root / "eval"
    steps = [
        ["phantom", "generate", "--config", cfg_path, "--out", str(cohort)],
        ["train", "station", "--config", cfg_path, "--cohort", str(cohort),
         "--out", str(runs)],
        ["train", "detector", "--config", cfg_path, "--cohort", str(cohort),
         "--station-checkpoint", str(runs / "station_ckpt"), "--out", str(runs)],
        ["eval", "--config", cfg_path, "--cohort", str(cohort),
         "--station-checkpoint", str(runs / "station_ckpt"),
         "--detector-checkpoint", str(runs / "detector_ckpt"), "--out", str(out)],
    ]
    for argv in steps:
        code = run(argv)
        if code != 0:
            return None
    return (out / "report.json").read_bytes()


def test_pipeline_determinism(tmp_path):
    failures = []
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps(config_to_dict(_tiny_experiment_config())))
    first = _run_pipeline(str(cfg_path), tmp_path / "a")
    second = _run_pipeline(str(cfg_path), tmp_path / "b")
    if first is None or second is None:
        failures.append("pipeline run failed")
    elif first != second:
        failures.append("metrics reports differ between identical runs")
    _verdict("pipeline determinism", failures)


# ---------------------------------------------------------------------------
# ablation study (shared five-seed run)


@pytest.fixture(scope="module")
def ablation_study():
    cfg = config_profile("desk")
    t0 = time.monotonic()
    outcomes = [run_ablation_pair(cfg, seed) for seed in ABLATION_SEEDS]
    return outcomes, time.monotonic() - t0


def test_ablation_improves_detection(ablation_study):
    outcomes, elapsed = ablation_study
    failures = []
    mfroc_full = float(np.mean([o.mfroc_full for o in outcomes]))
    mfroc_app = float(np.mean([o.mfroc_appearance for o in outcomes]))
    auc_gcn = float(np.mean([o.station_auc_gcn for o in outcomes]))
    auc_plain = float(np.mean([o.station_auc_plain for o in outcomes]))
    print(
        f"[acceptance] ablation means over {len(outcomes)} seeds: "
        f"mfroc {mfroc_full:.4f} vs {mfroc_app:.4f}, "
        f"station auc {auc_gcn:.4f} vs {auc_plain:.4f} ({elapsed:.0f}s)"
    )
    if mfroc_full < mfroc_app:
        failures.append(f"mean mfroc full {mfroc_full:.4f} < appearance {mfroc_app:.4f}")
    if auc_gcn < auc_plain:
        failures.append(f"mean station auc gcn {auc_gcn:.4f} < plain {auc_plain:.4f}")
    if elapsed >= 1800.0:
        failures.append(f"study runtime {elapsed:.0f}s >= 1800s")
    _verdict("ablation directions", failures)


def test_froc_bounded_by_proposal_recall(ablation_study):
    outcomes, _ = ablation_study
    failures = []
    for o in outcomes:
        values = (
            list(o.froc_at_full.values())
            + list(o.froc_at_appearance.values())
            + [o.mfroc_full, o.mfroc_appearance]
        )
        for v in values:
            if v > PROPOSAL_RECALL:
                failures.append(f"seed {o.seed}: sensitivity {v:.4f} > {PROPOSAL_RECALL}")
    _verdict("froc recall ceiling", failures)
