"""Scene comparison measures and occlusion scoring.

All measures are directional: a call with (result, gt) yields a
precision-style number and (gt, result) the recall-style counterpart.
Correspondence between objects is always by best 3D box overlap, and
the 2D variant works on axis-aligned rectangles around the projected
box corners.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .geometry import Camera, OrientedBox, obb_iou_3d, project_points, rot_up
from .scenes import Scene, object_box
from .template import TemplateModel

TAU_J_DEFAULT = 0.25
TAU_THETA_DEG_DEFAULT = 15.0
OCCLUSION_BINS_DEFAULT = (0.0, 0.25, 0.5, 0.75)
SWEEP_TAU_J = (0.05, 0.15, 0.25, 0.35, 0.45, 0.55, 0.65, 0.75, 0.85)
SWEEP_TAU_THETA_DEG = (5.0, 10.0, 15.0, 20.0, 25.0, 30.0)


@dataclass
class EvalScene:
    """Boxes plus orientations, the inputs every measure consumes."""

    boxes: list
    azimuths: np.ndarray
    camera: Camera = None

    def __post_init__(self):
        self.azimuths = np.asarray(self.azimuths, dtype=float)
        if len(self.boxes) != len(self.azimuths):
            raise ValueError("boxes and azimuths must align")
        for b in self.boxes:
            if not (np.all(np.isfinite(b.center)) and np.all(np.isfinite(b.half_extents))):
                raise ValueError("boxes must be finite")

    def __len__(self) -> int:
        return len(self.boxes)

    @classmethod
    def from_scene(cls, scene: Scene, template: TemplateModel = None) -> "EvalScene":
        """Build from a stored scene, deriving boxes when absent.

        Objects without an embedded box need the template to compute
        one from their placement parameters.
        """
        boxes, azimuths = [], []
        for obj in scene.objects:
            if obj.box is not None:
                boxes.append(obj.box)
            elif template is not None:
                boxes.append(object_box(template, obj.params))
            else:
                raise ValueError("scene object has no box and no template was given")
            azimuths.append(obj.params.azimuth)
        return cls(boxes, np.array(azimuths), scene.camera)


def _projected_rect(box: OrientedBox, camera: Camera):
    """Axis-aligned rectangle around the projected box corners.

    Returns (xmin, ymin, xmax, ymax) in map coordinates, or None when
    any corner falls behind the camera.
    """
    coords, ok = project_points(camera, box.corners())
    if not np.all(ok):
        return None
    return (float(coords[:, 0].min()), float(coords[:, 1].min()),
            float(coords[:, 0].max()), float(coords[:, 1].max()))


def _rect_iou(a, b) -> float:
    if a is None or b is None:
        return 0.0
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    union = area_a + area_b - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def max_iou_correspondence(box: OrientedBox, target: EvalScene, space: str = "3d"):
    """Best-overlap target for one box: (target index, iou).

    Empty targets give (None, 0.0). Ties resolve to the first index.
    space selects volumetric box overlap or projected-rectangle
    overlap; the 2d variant needs the target scene's camera.
    """
    if len(target) == 0:
        return None, 0.0
    if space == "3d":
        ious = [obb_iou_3d(box, tb) for tb in target.boxes]
    elif space == "2d":
        if target.camera is None:
            raise ValueError("2d overlap needs a camera")
        rect = _projected_rect(box, target.camera)
        ious = [_rect_iou(rect, _projected_rect(tb, target.camera)) for tb in target.boxes]
    else:
        raise ValueError(f"unknown space {space!r}")
    idx = int(np.argmax(ious))
    return idx, float(ious[idx])


def iou_measure(source: EvalScene, target: EvalScene, space: str = "3d") -> float:
    """Mean best overlap of source objects against the target scene.

    (result, gt) reads as precision, (gt, result) as recall. An empty
    source yields 0.0.
    """
    if len(source) == 0:
        return 0.0
    return float(np.mean([max_iou_correspondence(b, target, space)[1] for b in source.boxes]))


def angle_difference_deg(a: float, b: float, symmetry_order: int = 1) -> float:
    """Absolute azimuth gap in degrees, folded by rotational symmetry.

    Order 1 wraps to [0, 180]; order s folds modulo 360/s degrees.
    """
    period = 2.0 * math.pi / symmetry_order
    d = (a - b + 0.5 * period) % period - 0.5 * period
    return abs(math.degrees(d))


def loc_measure(source: EvalScene, target: EvalScene, tau_j: float = TAU_J_DEFAULT) -> float:
    """Fraction of source objects whose best 3D overlap clears tau_j."""
    if len(source) == 0:
        return 0.0
    hits = sum(1 for b in source.boxes
               if max_iou_correspondence(b, target)[1] > tau_j)
    return hits / len(source)


def locang_measure(source: EvalScene, target: EvalScene,
                   tau_j: float = TAU_J_DEFAULT,
                   tau_theta_deg: float = TAU_THETA_DEG_DEFAULT,
                   symmetry_order: int = 1) -> float:
    """Fraction located within tau_j whose orientation is within tau_theta."""
    if len(source) == 0:
        return 0.0
    hits = 0
    for i, b in enumerate(source.boxes):
        j, iou = max_iou_correspondence(b, target)
        if j is None or iou <= tau_j:
            continue
        if angle_difference_deg(source.azimuths[i], target.azimuths[j], symmetry_order) < tau_theta_deg:
            hits += 1
    return hits / len(source)


def angdiff(source: EvalScene, target: EvalScene, tau_j: float = TAU_J_DEFAULT,
            symmetry_order: int = 1) -> float:
    """Mean angle error in degrees over correctly located source objects.

    NaN when nothing clears the location threshold.
    """
    diffs = []
    for i, b in enumerate(source.boxes):
        j, iou = max_iou_correspondence(b, target)
        if j is None or iou <= tau_j:
            continue
        diffs.append(angle_difference_deg(source.azimuths[i], target.azimuths[j], symmetry_order))
    if not diffs:
        return float("nan")
    return float(np.mean(diffs))


def f1(precision: float, recall: float) -> float:
    if precision + recall <= 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


@dataclass
class MeasureReport:
    """Every directional measure for one (result, gt) scene pair."""

    iou3d: dict
    iou2d: dict
    loc: dict
    locang: dict
    angdiff_degrees: float
    tau_j: float
    tau_theta_deg: float

    def to_dict(self) -> dict:
        return {
            "iou3d": dict(self.iou3d),
            "iou2d": dict(self.iou2d),
            "loc": dict(self.loc),
            "locang": dict(self.locang),
            "angdiff_degrees": self.angdiff_degrees,
            "tau_j": self.tau_j,
            "tau_theta_deg": self.tau_theta_deg,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MeasureReport":
        return cls(d["iou3d"], d["iou2d"], d["loc"], d["locang"],
                   d["angdiff_degrees"], d["tau_j"], d["tau_theta_deg"])


def _prf(precision: float, recall: float) -> dict:
    return {"precision": precision, "recall": recall, "f1": f1(precision, recall)}


def measure_report(result: EvalScene, gt: EvalScene,
                   tau_j: float = TAU_J_DEFAULT,
                   tau_theta_deg: float = TAU_THETA_DEG_DEFAULT,
                   symmetry_order: int = 1) -> MeasureReport:
    """Full comparison of a recovered scene against ground truth.

    Precision-style entries score (result, gt), recall-style entries
    (gt, result). The angle error is reported in the recall direction
    (how well each true object's orientation was recovered).
    """
    can_2d = result.camera is not None or gt.camera is not None
    cam_scene_r = result if result.camera is not None else gt
    iou2d = {"precision": 0.0, "recall": 0.0, "f1": 0.0}
    if can_2d:
        shared = cam_scene_r.camera
        res2 = EvalScene(result.boxes, result.azimuths, shared)
        gt2 = EvalScene(gt.boxes, gt.azimuths, shared)
        iou2d = _prf(iou_measure(res2, gt2, "2d"), iou_measure(gt2, res2, "2d"))
    return MeasureReport(
        iou3d=_prf(iou_measure(result, gt), iou_measure(gt, result)),
        iou2d=iou2d,
        loc=_prf(loc_measure(result, gt, tau_j), loc_measure(gt, result, tau_j)),
        locang=_prf(locang_measure(result, gt, tau_j, tau_theta_deg, symmetry_order),
                    locang_measure(gt, result, tau_j, tau_theta_deg, symmetry_order)),
        angdiff_degrees=angdiff(gt, result, tau_j, symmetry_order),
        tau_j=tau_j,
        tau_theta_deg=tau_theta_deg,
    )


def sweep(results, gts, tau_j_values=SWEEP_TAU_J,
          tau_theta_deg_values=SWEEP_TAU_THETA_DEG, symmetry_order: int = 1):
    """Location-and-angle scores over a threshold grid.

    results and gts are aligned lists of scenes; each grid row carries
    the mean per-scene precision, recall, and F1. Raising tau_j only
    removes matches, so F1 cannot increase along that axis; raising
    tau_theta only admits more matches, so F1 cannot decrease along it.
    """
    if len(results) != len(gts):
        raise ValueError("results and gts must align")
    rows = []
    for tj in tau_j_values:
        for tt in tau_theta_deg_values:
            ps, rs, fs = [], [], []
            for res, gt in zip(results, gts):
                p = locang_measure(res, gt, tj, tt, symmetry_order)
                r = locang_measure(gt, res, tj, tt, symmetry_order)
                ps.append(p)
                rs.append(r)
                fs.append(f1(p, r))
            rows.append({
                "tau_j": float(tj),
                "tau_theta_deg": float(tt),
                "locang_precision": float(np.mean(ps)),
                "locang_recall": float(np.mean(rs)),
                "locang_f1": float(np.mean(fs)),
            })
    return rows


def sweep_csv(rows) -> str:
    buf = io.StringIO()
    fields = ["tau_j", "tau_theta_deg", "locang_precision", "locang_recall", "locang_f1"]
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: repr(row[k]) for k in fields})
    return buf.getvalue()


def _ray_box_depths(origins, directions, box: OrientedBox):
    """Entry depth of each ray into the box, NaN where it misses.

    Slab test in the box frame; rays start outside or inside, entry
    depth is clamped to 0 for origins inside the box.
    """
    rot = rot_up(box.azimuth)
    o = (origins - box.center) @ rot  # row-vector times R = R^T applied
    d = directions @ rot
    h = box.half_extents
    tmin = np.zeros(len(o))
    tmax = np.full(len(o), np.inf)
    ok = np.ones(len(o), dtype=bool)
    for axis in range(3):
        da = d[:, axis]
        oa = o[:, axis]
        parallel = np.abs(da) < 1e-12
        ok &= ~(parallel & (np.abs(oa) > h[axis]))
        safe = np.where(parallel, 1.0, da)
        t1 = (-h[axis] - oa) / safe
        t2 = (h[axis] - oa) / safe
        lo = np.where(parallel, -np.inf, np.minimum(t1, t2))
        hi = np.where(parallel, np.inf, np.maximum(t1, t2))
        tmin = np.maximum(tmin, lo)
        tmax = np.minimum(tmax, hi)
    ok &= tmax >= tmin
    return np.where(ok, tmin, np.nan)


def occlusion_score(scene: EvalScene, grid_n: int = 64, blockers=(),
                    bins=OCCLUSION_BINS_DEFAULT):
    """Per-object occlusion ratios plus a scene-level histogram.

    Rays go from the camera through an evenly spaced grid_n x grid_n
    grid of image-plane cells. An object's visibility is the share of
    rays hitting it on which it is the nearest hit among all boxes
    (blockers included); occlusion is one minus that, and objects no
    ray touches count as fully occluded. The histogram counts objects
    by bin left edges.
    """
    if grid_n < 8:
        raise ValueError("grid must be at least 8x8")
    if scene.camera is None:
        raise ValueError("occlusion scoring needs a camera")
    cam = scene.camera
    w, h = cam.image_size
    us = (np.arange(grid_n) + 0.5) * (w / grid_n)
    vs = (np.arange(grid_n) + 0.5) * (h / grid_n)
    uu, vv = np.meshgrid(us, vs)
    d_cam = np.stack([(uu.ravel() - 0.5 * w) / cam.focal_length,
                      (vv.ravel() - 0.5 * h) / cam.focal_length,
                      np.ones(grid_n * grid_n)], axis=1)
    directions = d_cam @ cam.rotation  # rows are camera axes, so this is R^T d
    origins = np.broadcast_to(cam.position, directions.shape)

    all_boxes = list(scene.boxes) + list(blockers)
    if not all_boxes:
        return np.zeros(0), np.zeros(len(bins), dtype=int)
    depths = np.stack([_ray_box_depths(origins, directions, b) for b in all_boxes])
    nearest = np.min(np.where(np.isnan(depths), np.inf, depths), axis=0)

    scores = np.ones(len(scene))
    for i in range(len(scene)):
        hit = ~np.isnan(depths[i])
        n_hit = int(hit.sum())
        if n_hit == 0:
            continue
        n_front = int(np.sum(hit & (depths[i] <= nearest + 1e-12)))
        scores[i] = 1.0 - n_front / n_hit
    edges = np.asarray(bins, dtype=float)
    which = np.clip(np.searchsorted(edges, scores, side="right") - 1, 0, len(edges) - 1)
    hist = np.bincount(which.astype(int), minlength=len(edges))
    return scores, hist.astype(int)
