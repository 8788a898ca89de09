import numpy as np
import pytest

from nfseg.core import AffineMotionModel
from nfseg.errors import ConfigError, EmptyWindow
from nfseg.flowgen import (
    BoxRegion,
    FlowData,
    SceneObject,
    SyntheticScene,
    generate_scene,
    generate_sequence,
)
from nfseg.graph import build_graph
from nfseg.metrics import box_iou, clustering_accuracy
from nfseg.mrf import alpha_expansion, energy
from nfseg.pipeline import (
    PipelineConfig,
    downsample,
    format_config,
    parse_config,
    run_sequence,
    segment_window,
)

from conftest import synth_cluster, window_from_arrays


def stream_from_windows(windows, width=346, height=260, dt=0.01):
    t = np.concatenate([w.t for w, _ in windows])
    xy = np.concatenate([w.xy for w, _ in windows])
    flow = np.concatenate([w.flow / dt for w, _ in windows])
    return FlowData(width, height, t=t, xy=xy, flow=flow)


class TestDownsample:
    def _obs(self, rows):
        rows = np.asarray(rows, dtype=float)
        return rows[:, 0], rows[:, 1:3], rows[:, 3:5]

    def test_most_recent_per_cell_survives(self):
        config = PipelineConfig(cell_size=2, n_min=0.001)
        t, xy, flow = self._obs([
            [0.001, 10, 10, 100.0, 0.0],
            [0.002, 20, 20, 150.0, 0.0],
            [0.004, 11, 11, 200.0, 0.0],  # same 2x2 cell as the first, later
        ])
        window = downsample((t, xy, flow), config, window_start=0.0,
                            sensor_width=346, sensor_height=260)
        assert len(window) == 2
        assert 0.004 in window.t and 0.002 in window.t
        assert 0.001 not in window.t

    def test_cell_one_keeps_distinct_pixels(self):
        config = PipelineConfig(cell_size=1, n_min=0.001)
        t, xy, flow = self._obs([
            [0.001, 10, 10, 100.0, 0.0],
            [0.002, 11, 11, 100.0, 0.0],
        ])
        window = downsample((t, xy, flow), config, window_start=0.0,
                            sensor_width=346, sensor_height=260)
        assert len(window) == 2

    def test_magnitude_floor_applied_per_window(self):
        config = PipelineConfig(cell_size=1, n_min=0.1, window_duration=0.01)
        # 5 px/s * 0.01 s = 0.05 px < 0.1 floor; 20 px/s -> 0.2 px kept.
        t, xy, flow = self._obs([
            [0.001, 10, 10, 5.0, 0.0],
            [0.002, 20, 20, 20.0, 0.0],
        ])
        window = downsample((t, xy, flow), config, window_start=0.0,
                            sensor_width=346, sensor_height=260)
        assert len(window) == 1
        assert np.allclose(window.flow[0], [0.2, 0.0])

    def test_strided_cap(self):
        n_max = 50
        config = PipelineConfig(cell_size=1, max_observations=n_max, n_min=0.001)
        count = 10 * n_max
        rng = np.random.default_rng(0)
        # all distinct pixels so cell dedup keeps everything
        xs = np.arange(count) % 346
        ys = (np.arange(count) // 346) % 260
        t = np.sort(rng.uniform(0, 0.0099, count))
        xy = np.c_[xs, ys].astype(float)
        flow = np.full((count, 2), 100.0)
        window = downsample((t, xy, flow), config, window_start=0.0,
                            sensor_width=346, sensor_height=260)
        assert n_max / 2 <= len(window) <= n_max

    def test_source_indices_track_input_records(self):
        config = PipelineConfig(cell_size=1, n_min=0.1)
        t, xy, flow = self._obs([
            [0.001, 10, 10, 1.0, 0.0],    # dropped by floor
            [0.002, 20, 20, 100.0, 0.0],
            [0.003, 30, 30, 100.0, 0.0],
        ])
        window = downsample((t, xy, flow), config, window_start=0.0,
                            sensor_width=346, sensor_height=260, source_offset=7)
        assert list(window.source_index) == [8, 9]


class TestConfigFiles:
    def test_round_trip(self):
        cfg = PipelineConfig(lambda_p=0.7, cell_size=3, label_cost_mode="prune")
        text = format_config(cfg)
        back = parse_config(text)
        assert back == cfg
        assert format_config(back) == text

    def test_missing_key_named(self):
        text = format_config(PipelineConfig())
        broken = "\n".join(l for l in text.splitlines() if not l.startswith("lambda_p"))
        with pytest.raises(ConfigError) as err:
            parse_config(broken)
        assert err.value.key == "lambda_p"

    def test_unknown_key_named(self):
        with pytest.raises(ConfigError) as err:
            parse_config(format_config(PipelineConfig()) + "bogus = 3\n")
        assert err.value.key == "bogus"

    def test_duplicate_key_rejected(self):
        text = format_config(PipelineConfig()) + "lambda_p = 0.5\n"
        with pytest.raises(ConfigError):
            parse_config(text)

    def test_bad_value_rejected(self):
        text = format_config(PipelineConfig()).replace("cell_size = 2", "cell_size = two")
        with pytest.raises(ConfigError):
            parse_config(text)

    def test_comments_and_blanks_ignored(self):
        text = "# comment\n\n" + format_config(PipelineConfig())
        parse_config(text)


class TestSegmentWindow:
    def test_empty_window_rejected(self):
        with pytest.raises(EmptyWindow):
            segment_window(window_from_arrays(np.empty((0, 2)), np.empty((0, 2))),
                           [], PipelineConfig())

    def test_single_motion_collapses_to_one_label(self):
        truth = AffineMotionModel(1.0, 0.0, 5.0, 2.0)
        xy, flow = synth_cluster(truth, 400, seed=0)
        window = window_from_arrays(xy, flow)
        result = segment_window(window, [], PipelineConfig())
        assert len(result.labeling.active_labels) == 1
        assert result.imo_boxes == ()
        bd = result.energy_trace[-1]
        assert bd.data < 1e-9

    def test_two_imo_scene_recovers_clusters(self, two_imo_scene):
        window, gt = generate_scene(two_imo_scene, 0.0, 0.01, 1200, rng_seed=0,
                                    samples_per_object=400)
        result = segment_window(window, [], PipelineConfig())
        acc = clustering_accuracy(result.labeling, gt.source_ids)
        assert acc >= 0.95
        assert len(result.imo_boxes) == 2

    def test_energy_trace_monotone(self, two_imo_scene):
        window, gt = generate_scene(two_imo_scene, 0.0, 0.01, 900, rng_seed=1,
                                    samples_per_object=350)
        result = segment_window(window, [], PipelineConfig())
        totals = [p.total for p in result.energy_trace]
        assert all(b <= a + 1e-9 for a, b in zip(totals, totals[1:]))

    def test_final_energy_recomputable(self, two_imo_scene):
        window, gt = generate_scene(two_imo_scene, 0.0, 0.01, 900, rng_seed=2,
                                    samples_per_object=350)
        config = PipelineConfig()
        result = segment_window(window, [], config)
        graph = build_graph(window)
        recomputed = energy(result.labeling, result.models, graph, window,
                            config.energy_params())
        assert result.final_energy == pytest.approx(recomputed.total, rel=1e-6)

    def test_idempotent_at_convergence(self, two_imo_scene):
        window, gt = generate_scene(two_imo_scene, 0.0, 0.01, 900, rng_seed=3,
                                    samples_per_object=350)
        config = PipelineConfig()
        result = segment_window(window, [], config)
        graph = build_graph(window)
        order = sorted(result.labeling.active_labels)
        out, _ = alpha_expansion(result.labeling, result.models, graph, window,
                                 config.energy_params(), order)
        assert np.array_equal(out.assignment, result.labeling.assignment)

    def test_deterministic(self, two_imo_scene):
        window, gt = generate_scene(two_imo_scene, 0.0, 0.01, 900, rng_seed=4,
                                    samples_per_object=350)
        r1 = segment_window(window, [], PipelineConfig())
        r2 = segment_window(window, [], PipelineConfig())
        assert np.array_equal(r1.labeling.assignment, r2.labeling.assignment)
        assert r1.final_energy == r2.final_energy
        assert r1.models == r2.models


class TestRunSequence:
    def test_empty_stream(self):
        stream = FlowData(346, 260, t=np.empty(0), xy=np.empty((0, 2)), flow=np.empty((0, 2)))
        assert list(run_sequence(stream, PipelineConfig())) == []

    def test_single_window_matches_segment_window(self, two_imo_scene):
        window, gt = generate_scene(two_imo_scene, 0.0, 0.01, 900, rng_seed=5,
                                    samples_per_object=350)
        stream = FlowData(346, 260, t=window.t, xy=window.xy, flow=window.flow / 0.01)
        outcomes = list(run_sequence(stream, PipelineConfig()))
        assert len(outcomes) == 1
        direct = segment_window(outcomes[0].window, [], PipelineConfig())
        assert np.array_equal(outcomes[0].result.labeling.assignment,
                              direct.labeling.assignment)

    def test_predicted_boxes_track_the_object(self):
        scene = SyntheticScene(
            sensor_width=346, sensor_height=260,
            background=AffineMotionModel(1.0, 0.0, 0.5, 0.2),
            objects=(
                SceneObject(BoxRegion(80, 80, 140, 140), AffineMotionModel(1.0, 0.0, 6.0, 2.0)),
            ),
            sigma_dir=0.05, sigma_mag=0.02, outlier_fraction=0.05,
        )
        wins = generate_sequence(scene, 4, 0.01, 800, rng_seed=6, samples_per_object=400)
        stream = stream_from_windows(wins)
        outcomes = list(run_sequence(stream, PipelineConfig()))
        for k, outcome in enumerate(outcomes):
            if k == 0:
                assert outcome.predicted_boxes == ()
                continue
            assert len(outcome.predicted_boxes) == 1
            true_box = wins[k][1].object_boxes[0]
            assert box_iou(outcome.predicted_boxes[0][0], true_box) >= 0.5

    def test_gap_expires_tracks_after_two_windows(self, two_imo_scene):
        window, gt = generate_scene(two_imo_scene, 0.0, 0.01, 900, rng_seed=7,
                                    samples_per_object=350)
        # window 0 has content; windows 1 and 2 are empty; window 3 has content
        t = np.concatenate([window.t, window.t + 0.03])
        xy = np.concatenate([window.xy, window.xy])
        flow = np.concatenate([window.flow, window.flow]) / 0.01
        stream = FlowData(346, 260, t=t, xy=xy, flow=flow)
        outcomes = list(run_sequence(stream, PipelineConfig()))
        assert [o.result is None for o in outcomes] == [False, True, True, False]
        # tracks expired during the two-window gap: no predictions at window 3
        assert outcomes[3].predicted_boxes == ()

    def test_single_gap_keeps_tracks(self, two_imo_scene):
        window, gt = generate_scene(two_imo_scene, 0.0, 0.01, 900, rng_seed=8,
                                    samples_per_object=350)
        t = np.concatenate([window.t, window.t + 0.02])
        xy = np.concatenate([window.xy, window.xy])
        flow = np.concatenate([window.flow, window.flow]) / 0.01
        stream = FlowData(346, 260, t=t, xy=xy, flow=flow)
        outcomes = list(run_sequence(stream, PipelineConfig()))
        assert [o.result is None for o in outcomes] == [False, True, False]
        assert len(outcomes[2].predicted_boxes) >= 1
