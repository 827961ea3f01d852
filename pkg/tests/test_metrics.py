"""Scene comparison measures, threshold sweeps, and occlusion scoring."""

import csv
import io
import math

import numpy as np
import pytest

from scenelift.geometry import Camera, OrientedBox, PlacementParams, rot_up
from scenelift.metrics import (EvalScene, angdiff, angle_difference_deg, f1,
                               iou_measure, loc_measure, locang_measure,
                               max_iou_correspondence, measure_report,
                               occlusion_score, sweep, sweep_csv)
from scenelift.scenes import Scene, SceneObject, object_box


def box(center, half=(0.5, 0.5, 0.5), az=0.0):
    return OrientedBox(np.asarray(center, float), np.asarray(half, float), az)


def scene_of(*items, camera=None):
    """items: (center, azimuth) or (center, azimuth, half_extents)."""
    boxes, azs = [], []
    for it in items:
        half = it[2] if len(it) > 2 else (0.5, 0.5, 0.5)
        boxes.append(box(it[0], half, it[1]))
        azs.append(it[1])
    return EvalScene(boxes, np.array(azs), camera)


# Unit cubes offset by 7/13 overlap with IoU exactly 0.3.
IOU_03_OFFSET = 7.0 / 13.0


class TestIouMeasure:
    def test_identical_scenes_score_one(self):
        s = scene_of(((0, 0.5, 0), 0.3), ((2, 0.5, 1), -1.0))
        assert iou_measure(s, s) == pytest.approx(1.0)

    def test_disjoint_scenes_score_zero(self):
        a = scene_of(((0, 0.5, 0), 0.0))
        b = scene_of(((10, 0.5, 0), 0.0))
        assert iou_measure(a, b) == 0.0

    def test_empty_source_scores_zero(self):
        empty = EvalScene([], np.zeros(0))
        full = scene_of(((0, 0.5, 0), 0.0))
        assert iou_measure(empty, full) == 0.0
        assert iou_measure(full, empty) == 0.0

    def test_half_matched_pair_averages_to_half(self):
        result = scene_of(((0, 0.5, 0), 0.0), ((5, 0.5, 0), 0.0))
        gt = scene_of(((0, 0.5, 0), 0.0))
        assert iou_measure(result, gt) == pytest.approx(0.5)

    def test_matches_linear_scan(self):
        rng = np.random.default_rng(12)
        def rand_scene(n):
            return scene_of(*[((rng.uniform(-1, 1), 0.5, rng.uniform(-1, 1)),
                               rng.uniform(-3, 3)) for _ in range(n)])
        a, b = rand_scene(5), rand_scene(5)
        from scenelift.geometry import obb_iou_3d
        want = np.mean([max(obb_iou_3d(sb, tb) for tb in b.boxes) for sb in a.boxes])
        assert iou_measure(a, b) == pytest.approx(want, rel=1e-12)

    def test_correspondence_reports_argmax(self):
        target = scene_of(((0, 0.5, 0), 0.0), ((0.2, 0.5, 0), 0.0))
        idx, iou = max_iou_correspondence(box((0.18, 0.5, 0)), target)
        assert idx == 1
        assert iou > 0.5

    def test_empty_target_correspondence(self):
        idx, iou = max_iou_correspondence(box((0, 0.5, 0)), EvalScene([], np.zeros(0)))
        assert idx is None and iou == 0.0


class TestAngleDifference:
    def test_wraps_to_half_turn(self):
        assert angle_difference_deg(math.radians(350), math.radians(10)) == pytest.approx(20.0)

    def test_plain_gap(self):
        assert angle_difference_deg(0.0, math.radians(30)) == pytest.approx(30.0)

    def test_antipodal_is_180(self):
        assert angle_difference_deg(0.0, math.pi) == pytest.approx(180.0)

    def test_symmetry_fold(self):
        assert angle_difference_deg(0.0, math.radians(170), symmetry_order=2) == pytest.approx(10.0)
        assert angle_difference_deg(0.0, math.radians(90), symmetry_order=4) == pytest.approx(0.0, abs=1e-9)


class TestLocMeasures:
    def test_identical_scenes(self):
        s = scene_of(((0, 0.5, 0), 0.4), ((2, 0.5, 1), 1.2))
        assert loc_measure(s, s) == 1.0
        assert locang_measure(s, s) == 1.0
        assert angdiff(s, s) == pytest.approx(0.0)

    def test_located_but_misoriented(self):
        gt = scene_of(((0, 0.5, 0), 0.0))
        result = scene_of(((IOU_03_OFFSET, 0.5, 0), math.radians(30)))
        assert loc_measure(result, gt) == 1.0  # IoU 0.3 > 0.25
        assert locang_measure(result, gt) == 0.0  # 30 degrees >= 15
        assert angdiff(result, gt) == pytest.approx(30.0)

    def test_location_threshold_is_strict(self):
        gt = scene_of(((0, 0.5, 0), 0.0))
        result = scene_of(((IOU_03_OFFSET, 0.5, 0), 0.0))
        from scenelift.geometry import obb_iou_3d
        exact = obb_iou_3d(result.boxes[0], gt.boxes[0])
        assert loc_measure(result, gt, tau_j=exact) == 0.0
        assert loc_measure(result, gt, tau_j=exact - 1e-9) == 1.0

    def test_angle_threshold_is_strict(self):
        gt = scene_of(((0, 0.5, 0), 0.0))
        at15 = scene_of(((0, 0.5, 0), math.radians(15.0)))
        below = scene_of(((0, 0.5, 0), math.radians(14.9)))
        assert locang_measure(at15, gt) == 0.0
        assert locang_measure(below, gt) == 1.0

    def test_locang_never_exceeds_loc(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            a = scene_of(*[((rng.uniform(-1, 1), 0.5, rng.uniform(-1, 1)),
                            rng.uniform(-3, 3)) for _ in range(4)])
            b = scene_of(*[((rng.uniform(-1, 1), 0.5, rng.uniform(-1, 1)),
                            rng.uniform(-3, 3)) for _ in range(4)])
            assert locang_measure(a, b) <= loc_measure(a, b) + 1e-12

    def test_empty_target_gives_zero_and_nan(self):
        s = scene_of(((0, 0.5, 0), 0.0))
        empty = EvalScene([], np.zeros(0))
        assert loc_measure(s, empty) == 0.0
        assert locang_measure(s, empty) == 0.0
        assert math.isnan(angdiff(s, empty))

    def test_rigid_motion_invariance(self):
        rng = np.random.default_rng(9)
        items_a = [((rng.uniform(-1, 1), 0.5, rng.uniform(-1, 1)), rng.uniform(-3, 3))
                   for _ in range(4)]
        items_b = [((rng.uniform(-1, 1), 0.5, rng.uniform(-1, 1)), rng.uniform(-3, 3))
                   for _ in range(4)]
        phi, shift = 0.8, np.array([3.0, 0.0, -2.0])

        def moved(items):
            rot = rot_up(phi)
            out = []
            for (c, az) in items:
                out.append(((rot @ np.asarray(c) + shift).tolist(), az + phi))
            return scene_of(*out)

        a, b = scene_of(*items_a), scene_of(*items_b)
        am, bm = moved(items_a), moved(items_b)
        assert loc_measure(am, bm) == pytest.approx(loc_measure(a, b), abs=1e-12)
        assert locang_measure(am, bm) == pytest.approx(locang_measure(a, b), abs=1e-12)
        ad1, ad2 = angdiff(a, b), angdiff(am, bm)
        assert (math.isnan(ad1) and math.isnan(ad2)) or ad1 == pytest.approx(ad2, abs=1e-9)


class TestF1:
    def test_zero_cases(self):
        assert f1(0.0, 0.0) == 0.0
        assert f1(0.0, 1.0) == 0.0

    def test_harmonic_mean(self):
        assert f1(1.0, 1.0) == 1.0
        assert f1(0.5, 1.0) == pytest.approx(2.0 / 3.0)


class TestMeasureReport:
    def test_precision_recall_swap(self):
        a = scene_of(((0, 0.5, 0), 0.0), ((3, 0.5, 0), 1.0))
        b = scene_of(((0, 0.5, 0), 0.0))
        ab = measure_report(a, b)
        ba = measure_report(b, a)
        assert ab.iou3d["precision"] == pytest.approx(ba.iou3d["recall"])
        assert ab.loc["precision"] == pytest.approx(ba.loc["recall"])
        assert ab.locang["recall"] == pytest.approx(ba.locang["precision"])

    def test_perfect_match_report(self):
        s = scene_of(((0, 0.5, 0), 0.7))
        rep = measure_report(s, s)
        assert rep.iou3d == {"precision": 1.0, "recall": 1.0, "f1": 1.0}
        assert rep.locang["f1"] == 1.0
        assert rep.angdiff_degrees == pytest.approx(0.0)

    def test_dict_round_trip(self):
        s = scene_of(((0, 0.5, 0), 0.7))
        rep = measure_report(s, s)
        from scenelift.metrics import MeasureReport
        back = MeasureReport.from_dict(rep.to_dict())
        assert back.iou3d == rep.iou3d
        assert back.tau_j == rep.tau_j

    def test_2d_overlap_uses_the_camera(self):
        cam = Camera(np.eye(3), 100.0, np.zeros(3), (200, 200), (200, 200))
        a = scene_of(((0, 0, 4), 0.0), camera=cam)
        # Same footprint center, different depth: projected rectangles
        # overlap even though the volumes are disjoint.
        b = scene_of(((0, 0, 8), 0.0), camera=cam)
        rep = measure_report(a, b)
        assert rep.iou3d["f1"] == 0.0
        assert rep.iou2d["f1"] > 0.0


class TestSweep:
    def graded_scenes(self):
        gt = scene_of(((0, 0.5, 0), 0.0), ((3, 0.5, 0), 0.0), ((6, 0.5, 0), 0.0))
        result = scene_of(
            ((0.05, 0.5, 0), math.radians(2.0)),          # strong overlap, tiny error
            ((3 + IOU_03_OFFSET, 0.5, 0), math.radians(12.0)),  # mid overlap, mid error
            ((6 + 0.8, 0.5, 0), math.radians(28.0)),      # weak overlap, large error
        )
        return [result], [gt]

    def test_stricter_overlap_only_removes_matches(self):
        results, gts = self.graded_scenes()
        rows = sweep(results, gts)
        by_tt = {}
        for row in rows:
            by_tt.setdefault(row["tau_theta_deg"], []).append(row)
        for tt_rows in by_tt.values():
            tt_rows.sort(key=lambda r: r["tau_j"])
            f1s = [r["locang_f1"] for r in tt_rows]
            assert all(b <= a + 1e-12 for a, b in zip(f1s, f1s[1:]))

    def test_wider_angle_tolerance_only_admits_matches(self):
        results, gts = self.graded_scenes()
        rows = sweep(results, gts)
        by_tj = {}
        for row in rows:
            by_tj.setdefault(row["tau_j"], []).append(row)
        saw_increase = False
        for tj_rows in by_tj.values():
            tj_rows.sort(key=lambda r: r["tau_theta_deg"])
            f1s = [r["locang_f1"] for r in tj_rows]
            assert all(b >= a - 1e-12 for a, b in zip(f1s, f1s[1:]))
            saw_increase = saw_increase or f1s[-1] > f1s[0] + 1e-9
        # The graded errors must actually exercise the direction.
        assert saw_increase

    def test_grid_covers_all_combinations(self):
        results, gts = self.graded_scenes()
        rows = sweep(results, gts, tau_j_values=(0.25, 0.5), tau_theta_deg_values=(10.0, 20.0))
        assert len(rows) == 4
        assert {(r["tau_j"], r["tau_theta_deg"]) for r in rows} == {
            (0.25, 10.0), (0.25, 20.0), (0.5, 10.0), (0.5, 20.0)}

    def test_misaligned_inputs_rejected(self):
        results, gts = self.graded_scenes()
        with pytest.raises(ValueError):
            sweep(results, gts + gts)

    def test_csv_round_trips_values_exactly(self):
        results, gts = self.graded_scenes()
        rows = sweep(results, gts, tau_j_values=(0.25,), tau_theta_deg_values=(15.0,))
        text = sweep_csv(rows)
        reader = csv.DictReader(io.StringIO(text))
        parsed = list(reader)
        assert len(parsed) == 1
        assert float(parsed[0]["locang_f1"]) == rows[0]["locang_f1"]
        assert reader.fieldnames == ["tau_j", "tau_theta_deg", "locang_precision",
                                     "locang_recall", "locang_f1"]


def straight_camera():
    return Camera(np.eye(3), 100.0, np.zeros(3), (200, 200), (200, 200))


def occlusion_oracle(scene, blockers, grid_n):
    """Independent ray-marching visibility check.

    Same definition as the production scorer, computed with its own
    slab test and plain loops over boxes.
    """
    cam = scene.camera
    w, h = cam.image_size
    pix = [( (i + 0.5) * w / grid_n, (j + 0.5) * h / grid_n)
           for j in range(grid_n) for i in range(grid_n)]
    dirs = []
    for u, v in pix:
        d = np.array([(u - 0.5 * w) / cam.focal_length,
                      (v - 0.5 * h) / cam.focal_length, 1.0])
        dirs.append(cam.rotation.T @ d)

    def entry_depth(box, d):
        rot = rot_up(box.azimuth)
        o = rot.T @ (cam.position - box.center)
        dd = rot.T @ d
        tmin, tmax = 0.0, np.inf
        for ax in range(3):
            if abs(dd[ax]) < 1e-12:
                if abs(o[ax]) > box.half_extents[ax]:
                    return None
                continue
            t1 = (-box.half_extents[ax] - o[ax]) / dd[ax]
            t2 = (box.half_extents[ax] - o[ax]) / dd[ax]
            tmin = max(tmin, min(t1, t2))
            tmax = min(tmax, max(t1, t2))
        return tmin if tmax >= tmin else None

    all_boxes = list(scene.boxes) + list(blockers)
    scores = []
    for i, target in enumerate(scene.boxes):
        n_hit = n_front = 0
        for d in dirs:
            t = entry_depth(target, d)
            if t is None:
                continue
            n_hit += 1
            others = [entry_depth(b, d) for b in all_boxes]
            nearest = min(o for o in others if o is not None)
            if t <= nearest + 1e-12:
                n_front += 1
        scores.append(1.0 if n_hit == 0 else 1.0 - n_front / n_hit)
    return np.array(scores)


class TestOcclusion:
    def test_single_object_is_unoccluded(self):
        scene = scene_of(((0, 0, 5), 0.0), camera=straight_camera())
        scores, hist = occlusion_score(scene)
        assert scores[0] == 0.0
        assert hist.tolist() == [1, 0, 0, 0]

    def test_object_fully_behind_a_larger_one(self):
        scene = EvalScene([box((0, 0, 3), (1, 1, 0.5)), box((0, 0, 6), (0.5, 0.5, 0.5))],
                          np.zeros(2), straight_camera())
        scores, hist = occlusion_score(scene)
        assert scores[0] == 0.0
        assert scores[1] == 1.0
        assert hist.tolist() == [1, 0, 0, 1]

    def test_half_covered_object(self):
        # Blocker spans exactly the left half of the target's projected
        # extent (rays crossing depth 2.5 at x in [-0.5, 0]).
        target = box((0, 0, 5), (1, 1, 0.1))
        blocker = box((-0.25, 0, 2.5), (0.25, 1.0, 0.05))
        scene = EvalScene([target], np.zeros(1), straight_camera())
        scores, _ = occlusion_score(scene, grid_n=512, blockers=[blocker])
        assert abs(scores[0] - 0.5) <= 0.01

    def test_matches_independent_ray_oracle(self):
        rng = np.random.default_rng(26)
        boxes = [box((rng.uniform(-1, 1), rng.uniform(-0.5, 0.5), rng.uniform(3, 7)),
                     rng.uniform(0.3, 0.9, 3), rng.uniform(-3, 3)) for _ in range(3)]
        blockers = [box((rng.uniform(-1, 1), 0.0, 2.0), (0.4, 0.4, 0.2))]
        scene = EvalScene(boxes, np.zeros(3), straight_camera())
        scores, _ = occlusion_score(scene, grid_n=24, blockers=blockers)
        want = occlusion_oracle(scene, blockers, 24)
        assert np.allclose(scores, want, atol=1e-12)

    def test_object_outside_the_view_counts_as_occluded(self):
        scene = EvalScene([box((0, 0, -5))], np.zeros(1), straight_camera())
        scores, _ = occlusion_score(scene)
        assert scores[0] == 1.0

    def test_histogram_bins_by_left_edge(self):
        # Scores 0.0 and ~0.5 land in the first and third bins.
        target = box((0, 0, 5), (1, 1, 0.1))
        blocker_scene = EvalScene([target, box((-0.25, 0, 2.5), (0.25, 1.0, 0.05))],
                                  np.zeros(2), straight_camera())
        scores, hist = occlusion_score(blocker_scene, grid_n=128)
        assert hist.sum() == 2
        assert hist[2] == 1  # the half-covered target
        assert hist[0] == 1  # the unobstructed blocker

    def test_validation(self):
        scene = scene_of(((0, 0, 5), 0.0), camera=straight_camera())
        with pytest.raises(ValueError):
            occlusion_score(scene, grid_n=4)
        no_cam = scene_of(((0, 0, 5), 0.0))
        with pytest.raises(ValueError):
            occlusion_score(no_cam)


class TestEvalSceneFromScene:
    def test_embedded_boxes_win(self, template):
        params = PlacementParams(np.array([0.0, 4.0]), 0.3, 1.0, np.zeros(template.k))
        custom = box((9, 9, 9))
        scene = Scene([SceneObject(params, "m", custom)], None)
        ev = EvalScene.from_scene(scene)
        assert ev.boxes[0] is custom
        assert ev.azimuths[0] == pytest.approx(0.3)

    def test_template_fills_missing_boxes(self, template):
        params = PlacementParams(np.array([0.0, 4.0]), 0.3, 1.0, np.zeros(template.k))
        scene = Scene([SceneObject(params, None, None)], None)
        ev = EvalScene.from_scene(scene, template)
        want = object_box(template, params)
        assert np.allclose(ev.boxes[0].center, want.center)
        assert np.allclose(ev.boxes[0].half_extents, want.half_extents)

    def test_missing_box_without_template_rejected(self, template):
        params = PlacementParams(np.array([0.0, 4.0]), 0.3, 1.0, np.zeros(template.k))
        scene = Scene([SceneObject(params, None, None)], None)
        with pytest.raises(ValueError):
            EvalScene.from_scene(scene)

    def test_misaligned_lengths_rejected(self):
        with pytest.raises(ValueError):
            EvalScene([box((0, 0, 0))], np.zeros(2))
