"""Acceptance suite: one test per release criterion, each printing a PASS line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines; every tolerance is asserted, so a plain pytest run is equally binding.
"""

import itertools
import math
import time

import numpy as np
import pytest

from nfseg import cli
from nfseg.core import AffineMotionModel, Labeling, decouple_model, to_vector
from nfseg.flowgen import (
    BoxRegion,
    FlowData,
    SceneObject,
    SyntheticScene,
    TimeSurface,
    generate_scene,
    generate_sequence,
    normal_flow_from_time_surface,
)
from nfseg.fitting import fit_linear, fit_nonlinear, residuals_and_jacobian
from nfseg.graph import build_graph
from nfseg.metrics import (
    box_iou,
    clustering_accuracy,
    convex_hull,
    detection_success,
    iou,
    rasterize_label,
)
from nfseg.mrf import EnergyParams, FlowNetwork, alpha_expansion, min_cut
from nfseg.pipeline import (
    PipelineConfig,
    format_config,
    parse_config,
    run_sequence,
    segment_window,
)

import nfseg.mrf as mrf_module

from conftest import edges_admit_empty_circles, synth_cluster, window_from_arrays


def _report(num, name):
    print(f"\nACCEPTANCE {num:02d} {name}: PASS")


def _acceptance_scene():
    """Dominant background plus two moving objects, noise as in criterion 1."""
    return SyntheticScene(
        sensor_width=346, sensor_height=260,
        background=AffineMotionModel(1.0, 0.0, 0.5, 0.0),
        objects=(
            SceneObject(BoxRegion(60, 60, 110, 110), AffineMotionModel(1.0, 0.0, 8.0, 0.0)),
            SceneObject(BoxRegion(220, 150, 280, 210), AffineMotionModel(1.0, 0.0, -6.0, 3.0)),
        ),
        sigma_dir=0.05, sigma_mag=0.02, outlier_fraction=0.05,
    )


def test_criterion_01_model_fit_recovery():
    t0 = time.perf_counter()
    truth = AffineMotionModel(1.02, 0.05, 6.0, 1.0)
    for seed in range(5):
        xy, flow = synth_cluster(truth, 40, seed=seed)
        lin = fit_linear((xy, flow))
        non = fit_nonlinear((xy, flow), AffineMotionModel())
        for got in (lin.model, non.model):
            assert abs(got.rho - truth.rho) < 1e-6
            assert abs(got.theta - truth.theta) < 1e-6
            assert abs(got.t_x - truth.t_x) < 1e-6
            assert abs(got.t_y - truth.t_y) < 1e-6

    errors = []
    for seed in range(100):
        xy, flow = synth_cluster(truth, 60, seed=1000 + seed,
                                 sigma_dir=0.05, sigma_mag=0.02, p_out=0.05)
        initial = fit_linear((xy, flow)).model
        report = fit_nonlinear((xy, flow), initial)
        errors.append(math.hypot(report.model.t_x - truth.t_x,
                                 report.model.t_y - truth.t_y))
    median_err = float(np.median(errors))
    elapsed = time.perf_counter() - t0
    assert median_err <= 0.5
    assert elapsed < 10.0
    _report(1, f"model-fit recovery (median err {median_err:.3f} px, {elapsed:.1f} s)")


def test_criterion_02_min_cut_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    for trial in range(200):
        n = int(rng.integers(4, 13))
        arcs = []
        for u in range(n):
            for v in range(n):
                if u != v and rng.random() < 0.35:
                    arcs.append((u, v, float(rng.random() * 4)))
        net = FlowNetwork.from_arcs(n, 0, n - 1, arcs)
        value, _ = min_cut(net)

        inner = list(range(1, n - 1))
        tails = np.array([a[0] for a in arcs])
        heads = np.array([a[1] for a in arcs])
        caps = np.array([a[2] for a in arcs])
        m = len(inner)
        masks = np.zeros((2**m, n), dtype=bool)
        masks[:, 0] = True
        for b, v in enumerate(inner):
            masks[:, v] = (np.arange(2**m) >> b) & 1
        crossing = masks[:, tails] & ~masks[:, heads]
        best = float((crossing * caps).sum(axis=1).min()) if arcs else 0.0
        assert value == pytest.approx(best, abs=1e-9)
    elapsed = time.perf_counter() - t0
    assert elapsed < 30.0
    _report(2, f"min-cut oracle equivalence (200 networks, {elapsed:.1f} s)")


def _enumerate_optimum(d, edges, lam_p, lam_m):
    n, n_labels = d.shape
    count = n_labels**n
    digits = (np.arange(count)[:, None] // n_labels ** np.arange(n)) % n_labels
    digits = digits.astype(np.int8)
    total = d[np.arange(n), digits].sum(axis=1)
    if edges.size:
        total = total + lam_p * (digits[:, edges[:, 0]] != digits[:, edges[:, 1]]).sum(axis=1)
    active = np.zeros(count)
    for l in range(n_labels):
        active += (digits == l).any(axis=1)
    total = total + lam_m * active
    return float(total.min())


def _expansion_instance(monkey_d, n, labels, lam_p, lam_m, seed, order=None):
    from nfseg.graph import SpatialGraph

    rng = np.random.default_rng(seed)
    edges = np.array(
        [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < 0.35],
        dtype=np.int64,
    ).reshape(-1, 2)
    xy = np.c_[np.arange(n, dtype=float), np.zeros(n)]
    graph = SpatialGraph(n, xy, edges, np.ones(edges.shape[0]), np.arange(n))
    window = window_from_arrays(xy, np.ones((n, 2)), width=max(n, 2), height=2)
    params = EnergyParams(lambda_p=lam_p, lambda_m=lam_m, tau_d=1.0)
    models = {l: AffineMotionModel() for l in range(1, labels + 1)}
    init = Labeling.from_assignment(np.ones(n, dtype=np.int32))
    out, bd = alpha_expansion(init, models, graph, window, params,
                              order=order or list(range(1, labels + 1)), max_sweeps=16)
    return bd.total, edges


def test_criterion_03_expansion_optimality(monkeypatch):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)

    for trial in range(100):
        d = rng.random((10, 2))
        monkeypatch.setattr(mrf_module, "data_term_matrix",
                            lambda w, models, tau, _d=d: _d[:, :len(models)])
        total, edges = _expansion_instance(d, 10, 2, lam_p=0.2, lam_m=0.0, seed=trial)
        best = _enumerate_optimum(d, edges, 0.2, 0.0)
        assert total == pytest.approx(best, abs=1e-9)

    for trial in range(50):
        d = rng.random((12, 3))
        lam_m = float(rng.uniform(0.1, 1.0))
        monkeypatch.setattr(mrf_module, "data_term_matrix",
                            lambda w, models, tau, _d=d: _d[:, :len(models)])
        total, edges = _expansion_instance(d, 12, 3, lam_p=0.2, lam_m=lam_m, seed=500 + trial)
        best = _enumerate_optimum(d, edges, 0.2, lam_m)
        assert best - 1e-9 <= total <= 2 * best + 1e-9
    elapsed = time.perf_counter() - t0
    assert elapsed < 120.0
    _report(3, f"expansion optimality (100 exact + 50 bounded, {elapsed:.1f} s)")


def test_criterion_04_coordinate_descent_monotonicity():
    scene = _acceptance_scene()
    config = PipelineConfig()
    checked = 0
    for seed in range(6):
        window, gt = generate_scene(scene, 0.0, 0.01, 1200, rng_seed=seed,
                                    samples_per_object=400)
        result = segment_window(window, [], config)
        totals = [p.total for p in result.energy_trace]
        assert len(totals) >= 2
        assert all(b <= a + 1e-9 for a, b in zip(totals, totals[1:]))
        checked += 1
    # Tracked windows exercise the predicted-candidate path as well.
    wins = generate_sequence(scene, 3, 0.01, 1200, rng_seed=50, samples_per_object=400)
    stream = FlowData(346, 260,
                      t=np.concatenate([w.t for w, _ in wins]),
                      xy=np.concatenate([w.xy for w, _ in wins]),
                      flow=np.concatenate([w.flow for w, _ in wins]) / 0.01)
    for outcome in run_sequence(stream, config):
        totals = [p.total for p in outcome.result.energy_trace]
        assert all(b <= a + 1e-9 for a, b in zip(totals, totals[1:]))
        checked += 1
    _report(4, f"coordinate-descent monotonicity ({checked} windows)")


def test_criterion_05_end_to_end_segmentation():
    t0 = time.perf_counter()
    scene = _acceptance_scene()
    config = PipelineConfig()
    true_models = [o.model for o in scene.objects]

    accuracies, detection_rates, ious = [], [], []
    translation_errors = {1: [], 2: []}
    for seed in range(20):
        window, gt = generate_scene(scene, 0.0, 0.01, 1200, rng_seed=seed,
                                    samples_per_object=400)
        result = segment_window(window, [], config)
        accuracies.append(clustering_accuracy(result.labeling, gt.source_ids))

        hulls = []
        for label in sorted(result.labeling.active_labels):
            if label == result.background_label:
                continue
            members = result.labeling.members(label)
            if members.size:
                hulls.append(convex_hull(window.xy[members]))
        hits = [any(detection_success(h, box) for h in hulls) for box in gt.object_boxes]
        detection_rates.append(sum(hits) / len(hits))

        pred_mask = np.zeros((260, 346), dtype=bool)
        for label in sorted(result.labeling.active_labels):
            if label != result.background_label:
                pred_mask |= rasterize_label(result, window, label, dilate_r=3)
        gt_mask = np.zeros((260, 346), dtype=bool)
        for obj in scene.objects:
            pts = obj.region.lattice_points(346, 260)
            gt_mask[pts[:, 1], pts[:, 0]] = True
        ious.append(iou(pred_mask, gt_mask))

        for k, truth in enumerate(true_models, start=1):
            counts = {}
            for label in result.labeling.active_labels:
                if label == result.background_label:
                    continue
                counts[label] = int(((result.labeling.assignment == label)
                                     & (gt.source_ids == k)).sum())
            if not counts:
                translation_errors[k].append(np.inf)
                continue
            label = max(counts, key=counts.get)
            m = result.models[label]
            translation_errors[k].append(math.hypot(m.t_x - truth.t_x, m.t_y - truth.t_y))

    elapsed = time.perf_counter() - t0
    med_acc = float(np.median(accuracies))
    med_rate = float(np.median(detection_rates))
    med_iou = float(np.median(ious))
    med_err = {k: float(np.median(v)) for k, v in translation_errors.items()}
    assert med_acc >= 0.95
    assert med_rate == 1.0
    assert med_iou >= 0.55
    assert med_err[1] <= 0.5 and med_err[2] <= 0.5
    assert elapsed < 60.0
    _report(5, (f"end-to-end segmentation (acc {med_acc:.3f}, rate {med_rate:.2f}, "
                f"IoU {med_iou:.2f}, t-err {med_err[1]:.2f}/{med_err[2]:.2f} px, {elapsed:.1f} s)"))


def test_criterion_06_motion_prediction():
    scene = SyntheticScene(
        sensor_width=346, sensor_height=260,
        background=AffineMotionModel(1.0, 0.0, 0.5, 0.2),
        objects=(
            SceneObject(BoxRegion(80, 80, 140, 140), AffineMotionModel(1.0, 0.0, 6.0, 2.0)),
        ),
        sigma_dir=0.05, sigma_mag=0.02, outlier_fraction=0.05,
    )
    wins = generate_sequence(scene, 5, 0.01, 1200, rng_seed=7, samples_per_object=450)
    stream = FlowData(346, 260,
                      t=np.concatenate([w.t for w, _ in wins]),
                      xy=np.concatenate([w.xy for w, _ in wins]),
                      flow=np.concatenate([w.flow for w, _ in wins]) / 0.01)
    config = PipelineConfig()
    outcomes = list(run_sequence(stream, config))
    assert len(outcomes) == 5
    for k, outcome in enumerate(outcomes):
        if k == 0:
            continue
        assert len(outcome.predicted_boxes) >= 1
        true_box = wins[k][1].object_boxes[0]
        best = max(box_iou(pred[0], true_box) for pred in outcome.predicted_boxes)
        assert best >= 0.5

    # Candidate counts: 12 sampled without predictions, 6 with.
    from nfseg.candidates import build_candidates, predict_boxes, grow_imo_boxes

    first = outcomes[0]
    cand_without = build_candidates(first.window, [])
    assert cand_without.count("sampled") == 12

    tracks = grow_imo_boxes(first.result, first.window)
    predicted = predict_boxes(tracks, dt=0.01, window_duration=0.01,
                              sensor_width=346, sensor_height=260)
    cand_with = build_candidates(outcomes[1].window, predicted)
    assert cand_with.count("predicted") >= 1
    assert cand_with.count("sampled") == 6
    _report(6, "motion prediction (box IoU >= 0.5 on windows 2..5; 6/12 sampling)")


BENCH_SPEC = """
sensor_width = 346
sensor_height = 260
windows = 100
window_duration = 0.01
samples_background = 200
samples_per_object = 600
noise.sigma_dir = 0.05
noise.sigma_mag = 0.02
noise.outlier_fraction = 0.02
background.model = 1.0 0.0 0.3 0.1
object.1.region = box 30 20 32 130
object.1.model = 1.0 0.0 0.3 0.1
object.2.region = box 90 90 92 200
object.2.model = 1.0 0.0 0.3 0.1
object.3.region = box 150 15 152 125
object.3.model = 1.0 0.0 0.3 0.1
object.4.region = box 210 100 212 210
object.4.model = 1.0 0.0 0.3 0.1
object.5.region = box 60 160 180 162
object.5.model = 1.0 0.0 0.3 0.1
object.6.region = box 120 50 240 52
object.6.model = 1.0 0.0 0.3 0.1
object.7.region = box 40 40 68 68
object.7.model = 1.0 0.0 2.0 0.5
object.8.region = box 260 30 288 58
object.8.model = 1.0 0.0 -1.8 0.9
"""


def test_criterion_07_throughput(tmp_path, capsys):
    spec = tmp_path / "bench.spec"
    spec.write_text(BENCH_SPEC)
    out = tmp_path / "bench_data"
    assert cli.main(["synth", "--spec", str(spec), "--out", str(out), "--seed", "11"]) == 0
    cfg = tmp_path / "bench.cfg"
    cfg.write_text(format_config(PipelineConfig()))

    rc = cli.main(["bench", "--input", str(out / "flow.nfseg"),
                   "--config", str(cfg), "--reps", "9"])
    assert rc == 0
    lines = capsys.readouterr().out.splitlines()
    stages = {}
    for line in lines:
        parts = line.split()
        if not parts:
            continue
        if line.startswith("Pre-processing"):
            stages["pre"] = float(parts[-2])
        elif line.startswith("Initialization"):
            stages["init"] = float(parts[-2])
        elif line.startswith("Labeling & Fitting"):
            stages["label"] = float(parts[-2])
        elif line.startswith("Subtotal"):
            stages["subtotal"] = float(parts[-2])
        elif line.startswith("sequence:"):
            stages["rate"] = float(parts[-2].lstrip("("))
            stages["windows"] = int(parts[1])
    assert stages["windows"] == 100
    assert stages["subtotal"] <= 33.0, f"segmentation subtotal {stages['subtotal']} ms"
    assert stages["pre"] <= 30.0, f"pre-processing {stages['pre']} ms"
    assert stages["init"] <= 2.0, f"initialization {stages['init']} ms"
    assert stages["rate"] >= 30.0, f"sustained rate {stages['rate']} windows/s"
    _report(7, (f"throughput (pre {stages['pre']:.1f} ms, init {stages['init']:.2f} ms, "
                f"subtotal {stages['subtotal']:.1f} ms, {stages['rate']:.1f} windows/s)"))


def test_criterion_08_time_surface_estimator():
    for v in (1.0, 10.0, 100.0, 1000.0):
        size = 24
        xs, _ = np.meshgrid(np.arange(size, dtype=float), np.arange(size, dtype=float))
        ts = TimeSurface.from_grid(xs / v)
        n = normal_flow_from_time_surface(ts, 12, 12)
        assert abs(n[0] - v) <= 1e-6 * v
        assert abs(n[1]) <= 1e-9 * v
    _report(8, "time-surface estimator (v in {1, 10, 100, 1000} px/s)")


def test_criterion_09_numerical_hygiene():
    # Analytic Jacobian vs central differences at 20 random points.
    rng = np.random.default_rng(9)
    h = 1e-6
    for _ in range(20):
        model = AffineMotionModel(
            rho=float(rng.uniform(0.7, 1.4)),
            theta=float(rng.uniform(-0.9, 0.9)),
            t_x=float(rng.uniform(-8, 8)),
            t_y=float(rng.uniform(-8, 8)),
        )
        xy, flow = synth_cluster(AffineMotionModel(1.0, 0.1, 4.0, 2.0), 8,
                                 seed=int(rng.integers(1e6)))
        _, jac = residuals_and_jacobian(model, (xy, flow))
        p0 = np.array(model.params())
        for col in range(4):
            dp = np.zeros(4)
            dp[col] = h
            rp, _ = residuals_and_jacobian(AffineMotionModel(*(p0 + dp)), (xy, flow))
            rm, _ = residuals_and_jacobian(AffineMotionModel(*(p0 - dp)), (xy, flow))
            num = (rp - rm) / (2 * h)
            denom = np.maximum(np.abs(jac[:, col]), 1e-3)
            assert np.max(np.abs(num - jac[:, col]) / denom) < 1e-4

    # Vector-form round trip within 1e-9.
    for _ in range(200):
        m0 = AffineMotionModel(
            rho=float(rng.uniform(0.2, 4.0)),
            theta=float(rng.uniform(-1.5, 1.5)),
            t_x=float(rng.uniform(-50, 50)),
            t_y=float(rng.uniform(-50, 50)),
        )
        m1 = decouple_model(to_vector(m0))
        assert abs(m1.rho - m0.rho) <= 1e-9 * max(1.0, m0.rho)
        assert abs(m1.theta - m0.theta) <= 1e-9
        assert abs(m1.t_x - m0.t_x) <= 1e-9
        assert abs(m1.t_y - m0.t_y) <= 1e-9

    # Empty-circumcircle brute force over 50 random point sets, n <= 200.
    for trial in range(50):
        n = int(rng.integers(4, 201))
        if trial % 2:
            pts = rng.uniform(0, 345, size=(n, 2))
        else:
            pts = rng.integers(0, 346, size=(n, 2)).astype(float)
        pts = np.unique(pts, axis=0)
        window = window_from_arrays(pts, np.ones((pts.shape[0], 2)),
                                    width=400, height=400)
        g = build_graph(window)
        assert edges_admit_empty_circles(g.node_xy, g.edges)
    _report(9, "numerical hygiene (Jacobian, round trip, circumcircles)")


def test_criterion_10_format_round_trips(tmp_path):
    from nfseg import resultio
    from nfseg.flowgen import read_flow_file, write_flow_file

    # Flow formats.
    rng = np.random.default_rng(10)
    n = 500
    t = np.sort(rng.uniform(0, 0.05, n))
    xy = np.c_[rng.integers(0, 346, n), rng.integers(0, 260, n)].astype(float)
    flow = rng.normal(0, 300, (n, 2))
    data = FlowData(346, 260, t=t, xy=xy, flow=flow)

    text1 = tmp_path / "a.nfseg"
    write_flow_file(text1, data)
    text2 = tmp_path / "b.nfseg"
    write_flow_file(text2, read_flow_file(text1))
    assert text1.read_bytes() == text2.read_bytes()

    bin1 = tmp_path / "a.bin"
    write_flow_file(bin1, data, binary=True)
    bin2 = tmp_path / "b.bin"
    write_flow_file(bin2, read_flow_file(bin1), binary=True)
    assert bin1.read_bytes() == bin2.read_bytes()

    # Result serialization through a real segmentation.
    scene = _acceptance_scene()
    window, _ = generate_scene(scene, 0.0, 0.01, 600, rng_seed=1, samples_per_object=250)
    result = segment_window(window, [], PipelineConfig())
    rec = resultio.WindowRecord.from_result(
        0, 0.0, 0.01, result,
        source_indices=np.arange(len(window)),
        pixels=window.xy.astype(int),
    )
    res1 = tmp_path / "r1"
    resultio.write_results(res1, [rec])
    res2 = tmp_path / "r2"
    resultio.write_results(res2, resultio.read_results(res1))
    assert res1.read_bytes() == res2.read_bytes()

    # Config files.
    cfg = PipelineConfig(lambda_p=0.75, cell_size=3, truncate_fitting=False)
    text = format_config(cfg)
    assert format_config(parse_config(text)) == text
    _report(10, "format round trips (flow text/binary, results, config)")
