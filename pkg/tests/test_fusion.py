import itertools
import math
import random

import pytest

from lt3d.detections import Detection2D, Detection3D, GroundTruth3D
from lt3d.evaluation import average_precision
from lt3d.fusion import (PRIOR_GRID, TEMPERATURE_GRID, CalibrationTable, FusionConfig, apply_plan,
                         calibrate_score, mmf_filter, mmlf_fuse, nms_within_class, plan_mmlf,
                         probabilistic_fuse, tune_fusion_calibration, tune_priors_greedy,
                         tune_temperatures_greedy)
from lt3d.geometry import Box2D, Box3D, Camera, CameraIntrinsics, bev_center_distance, look_at_pose, \
    project_box3d_to_image
from lt3d.taxonomy import Taxonomy

TAX = Taxonomy.from_dict({
    "root": "object",
    "coarse": [
        {"name": "vehicle", "children": ["car", "truck"]},
        {"name": "pedestrian", "children": ["adult", "child", "stroller"]},
    ],
    "train_counts": {"car": 90000, "truck": 20000, "adult": 70000, "child": 3000, "stroller": 1000},
})
K = CameraIntrinsics(800.0, 800.0, 800.0, 450.0, 1600, 900)
FRONT = Camera("front", K, look_at_pose((0.0, 0.0, 1.5), 0.0))
RIG = [FRONT]


def box(x, y=0.0):
    return Box3D((x, y, 0.8), 1.0, 1.0, 1.6)


def lidar(x, cls="adult", score=0.5, y=0.0, logit=None, frame="f0"):
    return Detection3D(frame, box(x, y), cls, score, logit)


def rgb_on(det, cls=None, score=0.9, logit=None, shift=0.0):
    b = project_box3d_to_image(det.box, FRONT.pose, K)
    return Detection2D(det.frame_id, "front", Box2D(b.x1 + shift, b.y1, b.x2 + shift, b.y2),
                       cls or det.cls, score, logit)


def logit(p):
    return math.log(p / (1 - p))


class TestScoreAlgebra:
    def test_fuse_examples(self):
        assert probabilistic_fuse(0.8, 0.6, 0.5) == pytest.approx(0.96, abs=1e-15)
        assert probabilistic_fuse(0.9, 0.9, 0.5) == 1.0
        assert probabilistic_fuse(0.9, 0.9, 0.5, clip=False) == pytest.approx(1.62)
        rng = random.Random(0)
        for _ in range(100):
            a, b = rng.random(), rng.random()
            assert probabilistic_fuse(a, b, 1.0) == a * b

    def test_fuse_validation(self):
        with pytest.raises(ValueError):
            probabilistic_fuse(0.5, 0.5, 0.0)
        with pytest.raises(ValueError):
            probabilistic_fuse(1.5, 0.5, 1.0)

    def test_calibrate_examples(self):
        for tau in (0.1, 1.0, 7.0):
            assert calibrate_score(0.0, tau) == 0.5
        assert calibrate_score(2.0, 2.0) == pytest.approx(1 / (1 + math.exp(-1)), abs=1e-6)
        assert calibrate_score(5.0, 1e9) == pytest.approx(0.5, abs=1e-8)
        assert calibrate_score(-800.0, 1.0) == 0.0
        with pytest.raises(ValueError):
            calibrate_score(1.0, 0.0)


class TestMMF:
    def test_empty_rgb(self):
        assert len(mmf_filter([lidar(5)], [])) == 0

    def test_colocated_kept_unchanged(self):
        d = lidar(5, score=0.3)
        out = mmf_filter([d], [lidar(5, score=0.9)])
        assert list(out) == [d]


class TestMMLF:
    def test_no_rgb_downweights_everything(self):
        dets = [lidar(10, "adult", 0.5), lidar(12, "car", 0.8, y=3), lidar(8, "child", 0.123456789)]
        out = mmlf_fuse(dets, [], RIG)
        assert sorted(d.score for d in out) == sorted(0.4 * d.score for d in dets)

    def test_agreeing_pair(self):
        d = lidar(10, "adult", logit=logit(0.6))
        r = rgb_on(d, logit=logit(0.8))
        (out,) = mmlf_fuse([d], [r], RIG,
                           calib_rgb=CalibrationTable("rgb", prior={"adult": 0.5}))
        assert out.box == d.box
        assert out.cls == "adult"
        assert out.score == pytest.approx(0.96, abs=1e-12)

    def test_disagreeing_pair_takes_rgb_label(self):
        d = lidar(10, "adult", logit=logit(0.9))
        r = rgb_on(d, cls="stroller", logit=logit(0.7))
        (out,) = mmlf_fuse([d], [r], RIG)
        assert (out.cls, out.box) == ("stroller", d.box)
        assert out.score == pytest.approx(0.7, abs=1e-12)

    def test_unmatched_rgb_dropped(self):
        d = lidar(10)
        far = Detection2D("f0", "front", Box2D(0, 0, 20, 20), "car", 0.99)
        out = mmlf_fuse([d], [far], RIG)
        assert len(out) == 1 and out[0].score == pytest.approx(0.2)

    def test_unknown_camera(self):
        with pytest.raises(ValueError):
            mmlf_fuse([lidar(10)], [Detection2D("f0", "rear", Box2D(0, 0, 5, 5), "car", 0.5)], RIG)

    def test_plan_reuse_matches_direct_fusion(self):
        dets = [lidar(10, logit=1.0), lidar(15, "car", y=4, logit=-0.5)]
        rgbs = [rgb_on(dets[0], logit=2.0), rgb_on(dets[1], cls="truck", logit=0.3)]
        lid_t = CalibrationTable("lidar", temperature={"adult": 2.0})
        rgb_t = CalibrationTable("rgb", temperature={"truck": 0.5}, prior={"adult": 0.7})
        plan = plan_mmlf(dets, rgbs, RIG)
        assert apply_plan(plan, lid_t, rgb_t) == mmlf_fuse(dets, rgbs, RIG, lid_t, rgb_t)


class TestNMS:
    def test_single(self):
        d = lidar(5)
        assert list(nms_within_class([d], 0.1)) == [d]

    def test_same_class_suppressed(self):
        a, b = lidar(5, score=0.9), lidar(5, score=0.8)
        assert list(nms_within_class([b, a], 0.1)) == [a]

    def test_different_classes_kept(self):
        a, b = lidar(5, "adult", 0.9), lidar(5, "traffic-cone", 0.8)
        assert list(nms_within_class([a, b], 0.1)) == [a, b]


class TestCalibrationTable:
    def test_defaults_and_round_trip(self, tmp_path):
        t = CalibrationTable("m", temperature={"car": 2.0}, prior={"adult": 0.5})
        assert t.tau("truck") == 1.0 and t.p("car") == 1.0
        t.save(tmp_path / "c.json")
        assert CalibrationTable.load(tmp_path / "c.json") == t

    def test_rejects_non_positive(self):
        with pytest.raises(ValueError):
            CalibrationTable("m", temperature={"car": 0.0})


def _gt(x, cls, y=0.0, frame="f0"):
    return GroundTruth3D(frame, box(x, y), cls)


class TestTemperatureTuning:
    def test_flat_objective_keeps_neutral(self):
        # perfectly ranked detections: AP is 1 for every temperature
        gts = [_gt(5 * k, "car") for k in range(5)]
        dets = [lidar(5 * k, "car", logit=3.0 - k) for k in range(5)]
        table = tune_temperatures_greedy(dets, gts, TAX, grid=TEMPERATURE_GRID)
        assert all(v == 1.0 for v in table.temperature.values())

    def test_single_class_matches_exhaustive_grid(self):
        rng = random.Random(4)
        grid = (0.5, 1.0, 2.0)
        for _ in range(30):
            gts = [_gt(rng.uniform(0, 30), "car", rng.uniform(0, 30)) for _ in range(4)]
            dets = [Detection3D("f0", g.box.translated(dx=rng.gauss(0, 1)), "car", 0.5, rng.gauss(0, 2))
                    for g in gts]
            dets += [Detection3D("f0", box(rng.uniform(0, 30), rng.uniform(0, 30)), "car", 0.5, rng.gauss(0, 2))
                     for _ in range(4)]
            table = tune_temperatures_greedy(dets, gts, TAX, grid=grid)

            def ap(tau):
                scored = [d.with_(score=calibrate_score(d.logit, tau)) for d in dets]
                return sum(average_precision(scored, gts, "car", th, 0, TAX).ap
                           for th in (0.5, 1.0, 2.0, 4.0)) / 4

            values = {tau: ap(tau) for tau in grid}
            best = max(values.values())
            expected = 1.0 if values[1.0] == best else min(t for t, v in values.items() if v == best)
            assert table.tau("car") == expected

    def test_visit_order_and_missing_classes(self, caplog):
        gts = [_gt(0, "car")]
        table = tune_temperatures_greedy([lidar(0, "car", logit=1.0)], gts, TAX)
        assert set(table.temperature) <= set(TAX.fine_classes)
        assert "no validation ground truth" in caplog.text


class TestPriorTuning:
    def test_no_matches_means_neutral_priors(self):
        dets = [lidar(10, "adult", logit=0.5), lidar(14, "car", y=3, logit=1.0)]
        gts = [_gt(10, "adult"), _gt(14, "car", y=3)]
        rgb = tune_priors_greedy(dets, [], RIG, gts, TAX, CalibrationTable("lidar"), CalibrationTable("rgb"))
        assert all(v == 1.0 for v in rgb.prior.values())

    def test_single_class_matches_exhaustive_grid(self):
        rng = random.Random(12)
        grid = (0.5, 1.0, 2.0)
        for _ in range(15):
            dets, rgbs, gts = [], [], []
            for k in range(6):
                x, y = 8 + 4 * k, rng.uniform(-3, 3)
                d = Detection3D("f0", box(x, y), "car", 0.5, rng.gauss(0, 2))
                dets.append(d)
                if rng.random() < 0.6:
                    rgbs.append(rgb_on(d, logit=rng.gauss(0, 2)))
                if rng.random() < 0.6:
                    gts.append(_gt(x, "car", y))
            if not gts:
                continue
            rgb_table = tune_priors_greedy(dets, rgbs, RIG, gts, TAX, CalibrationTable("lidar"),
                                           CalibrationTable("rgb"), grid=grid)

            def ap(p):
                fused = mmlf_fuse(dets, rgbs, RIG, CalibrationTable("lidar"),
                                  CalibrationTable("rgb", prior={"car": p}))
                return sum(average_precision(fused, gts, "car", th, 0, TAX).ap
                           for th in (0.5, 1.0, 2.0, 4.0)) / 4

            values = {p: ap(p) for p in grid}
            best = max(values.values())
            expected = 1.0 if values[1.0] == best else min(p for p, v in values.items() if v == best)
            assert rgb_table.p("car") == expected


def test_grids():
    assert len(TEMPERATURE_GRID) == 15 and TEMPERATURE_GRID[0] == 0.25
    assert TEMPERATURE_GRID[-1] == pytest.approx(4.0)
    assert len(PRIOR_GRID) == 11 and PRIOR_GRID[0] == pytest.approx(0.2)


def test_config_validation(tmp_path):
    with pytest.raises(ValueError):
        FusionConfig(iou_threshold=0.0)
    (tmp_path / "c.json").write_text('{"iou_threshold": 0.3}')
    assert FusionConfig.load(tmp_path / "c.json").iou_threshold == 0.3
    (tmp_path / "c.json").write_text('{"bogus": 1}')
    with pytest.raises(ValueError):
        FusionConfig.load(tmp_path / "c.json")


def test_tune_fusion_calibration_keeps_plain_tables_when_already_optimal():
    d = lidar(10, "adult", logit=2.0)
    lid, rgb = tune_fusion_calibration([d], [rgb_on(d, logit=2.0)], RIG, [_gt(10, "adult")], TAX)
    assert all(v == 1.0 for v in itertools.chain(lid.temperature.values(), rgb.temperature.values(),
                                                  rgb.prior.values()))


def test_mmf_distance_sanity():
    a, b = lidar(0), lidar(3, y=4)
    assert bev_center_distance(a.box, b.box) == 5.0
