"""Synthetic chair corpus, scene generation, experiments, and tuning.

Everything here is deterministic given its seed. Chairs are 8-keypoint
stick figures (4 leg tips, 2 seat corners, 2 back-top corners, front
toward local -z); arrangements place them in rows, facing pairs, rings
around a table, or loose scatters, always intersection-free and inside
the default camera's view.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import (Camera, OrientedBox, PlacementParams, obb_intersects,
                       place_keypoints, project_points, rot2)
from .keypoint_maps import KeypointMapStack, flatten_locations, occlude, render_maps
from .metrics import (EvalScene, TAU_J_DEFAULT, TAU_THETA_DEG_DEFAULT,
                      measure_report, occlusion_score)
from .scene_stats import DELTA_R_DEFAULT, PairwiseGmm, extract_pairs, fit_gmm
from .scene_stats import evaluation_count as _gmm_eval_count
from .scenes import Scene, SceneObject, object_box
from .selection import Hyper, infer_scene
from .template import KeypointSet, TemplateModel, build_template, instantiate

CHAIR_N_KEYPOINTS = 8
LAYOUTS = ("row", "facing_pairs", "ring_around_table", "random_scatter")
DEFAULT_EYE = (0.0, 1.8, 0.0)
DEFAULT_TARGET = (0.0, 0.5, 4.0)
DEFAULT_FOCAL = 380.0


def make_chair_keypoints(width: float = 0.46, depth: float = 0.46,
                         seat_height: float = 0.45, back_height: float = 0.9) -> np.ndarray:
    """Canonical chair keypoints, front toward -z, legs on the ground."""
    w, d = 0.5 * width, 0.5 * depth
    return np.array([
        [-w, 0.0, -d], [w, 0.0, -d], [-w, 0.0, d], [w, 0.0, d],
        [-w, seat_height, d], [w, seat_height, d],
        [-w, back_height, d], [w, back_height, d],
    ])


def sample_chair_database(n: int = 40, seed: int = 0, jitter: float = 0.004):
    """Random chair keypoint sets spanning plausible furniture dimensions."""
    rng = np.random.default_rng(seed)
    sets = []
    for i in range(n):
        pts = make_chair_keypoints(
            width=rng.uniform(0.38, 0.55),
            depth=rng.uniform(0.38, 0.55),
            seat_height=rng.uniform(0.40, 0.50),
            back_height=rng.uniform(0.75, 1.05),
        )
        noise = rng.normal(0.0, jitter, pts.shape)
        noise[:4, 1] = 0.0  # leg tips must stay exactly on the ground
        sets.append(KeypointSet(f"chair_{i:03d}", pts + noise))
    return sets


def default_camera(map_size: int = 64, image_size: int = 512) -> Camera:
    """Eye-height camera looking slightly down into the scene area."""
    focal = DEFAULT_FOCAL * (image_size / 512.0)
    return Camera.looking_at(DEFAULT_EYE, DEFAULT_TARGET, focal,
                             (image_size, image_size), (map_size, map_size))


def default_sigma(camera: Camera) -> float:
    """Lobe width scales with map resolution: one cell per 64 cells of grid."""
    return camera.map_size[0] / 64.0


def scene_keypoint_entries(scene: Scene, template: TemplateModel, camera: Camera = None):
    """Per-object (type, map position) entries for every visible keypoint."""
    camera = camera or scene.camera
    out = []
    for obj in scene.objects:
        pts = place_keypoints(instantiate(template, obj.params.deform), obj.params)
        coords, ok = project_points(camera, pts)
        out.append([(t, coords[t].copy()) for t in range(len(pts)) if ok[t]])
    return out


def render_scene_maps(scene: Scene, template: TemplateModel, camera: Camera = None,
                      sigma: float = None, drop_fraction: float = 0.0,
                      seed: int = 0, drop_object: int = None) -> KeypointMapStack:
    """Ground-truth keypoint maps for a scene, optionally degraded.

    drop_fraction removes that share of keypoints before rendering;
    with drop_object set only that object is degraded, everything else
    stays clean.
    """
    camera = camera or scene.camera
    entries = scene_keypoint_entries(scene, template, camera)
    if drop_fraction > 0.0:
        if drop_object is None:
            entries = occlude(entries, drop_fraction, seed)
        else:
            entries[drop_object] = occlude([entries[drop_object]], drop_fraction, seed)[0]
    locs = flatten_locations(entries, template.n_keypoints)
    w, h = camera.map_size
    return render_maps(locs, sigma if sigma is not None else default_sigma(camera), w, h)


@dataclass
class ArrangementSpec:
    """Recipe for one family of synthetic arrangements."""

    layout: str = "random_scatter"
    count_min: int = 1
    count_max: int = 6
    spacing: float = 1.0
    spacing_jitter: float = 0.05
    azimuth_jitter: float = 0.1
    deform_shrink: float = 0.5
    scale_jitter: float = 0.0
    anchor: tuple = (0.0, 4.0)
    anchor_jitter: float = 0.4
    depth_range: tuple = None
    seed: int = 0

    def __post_init__(self):
        if self.layout not in LAYOUTS:
            raise ValueError(f"unknown layout {self.layout!r}")
        if not (1 <= self.count_min <= self.count_max):
            raise ValueError("count range must be nonempty and at least 1")
        if self.spacing <= 0:
            raise ValueError("spacing must be positive")
        if self.depth_range is not None:
            lo, hi = self.depth_range
            if not 0.0 < lo < hi:
                raise ValueError("depth_range must be 0 < near < far")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["anchor"] = list(self.anchor)
        if self.depth_range is not None:
            d["depth_range"] = list(self.depth_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArrangementSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        kwargs = {k: v for k, v in d.items() if k in known}
        if "anchor" in kwargs:
            kwargs["anchor"] = tuple(kwargs["anchor"])
        if kwargs.get("depth_range") is not None:
            kwargs["depth_range"] = tuple(kwargs["depth_range"])
        return cls(**kwargs)


def _front_dir(azimuth: float) -> np.ndarray:
    # Local -z mapped to world (x, z).
    return rot2(azimuth) @ np.array([0.0, -1.0])


def _azimuth_facing(direction) -> float:
    return math.atan2(-direction[0], -direction[1])


def _sample_placement(translation, azimuth, template, spec, rng) -> PlacementParams:
    stds = np.sqrt(template.eigenvalues) * spec.deform_shrink
    deform = rng.normal(0.0, 1.0, template.k) * stds
    scale = 1.0 + (rng.uniform(-spec.scale_jitter, spec.scale_jitter)
                   if spec.scale_jitter > 0 else 0.0)
    return PlacementParams(np.asarray(translation, dtype=float), azimuth, scale, deform)


def _draw_arrangement(spec, count, template, rng, s_jit, a_jit, anch_jit):
    """One candidate arrangement; may be invalid, caller re-draws."""
    def jit(scale=1.0):
        return rng.uniform(-1.0, 1.0) * scale

    anchor = np.asarray(spec.anchor, dtype=float) + rng.uniform(-anch_jit, anch_jit, 2)
    base_az = rng.uniform(-math.pi, math.pi)
    placements = []
    occluders = []

    if spec.layout == "row":
        right = rot2(base_az) @ np.array([1.0, 0.0])
        for i in range(count):
            offset = (i - 0.5 * (count - 1)) * spec.spacing + jit(s_jit)
            placements.append(_sample_placement(anchor + offset * right,
                                                base_az + jit(a_jit), template, spec, rng))
    elif spec.layout == "facing_pairs":
        n_pairs = max(1, count // 2)
        axis = rot2(base_az) @ np.array([1.0, 0.0])
        gap = spec.spacing + 0.9
        for k in range(n_pairs):
            center = anchor + (k - 0.5 * (n_pairs - 1)) * gap * axis
            face_az = base_az + jit(a_jit)
            front = _front_dir(face_az)
            half = 0.5 * (spec.spacing + jit(s_jit))
            placements.append(_sample_placement(center - half * front, face_az,
                                                template, spec, rng))
            placements.append(_sample_placement(center + half * front, face_az + math.pi,
                                                template, spec, rng))
    elif spec.layout == "ring_around_table":
        radius = max(spec.spacing, 1.1)
        for i in range(count):
            ang = base_az + 2.0 * math.pi * i / count + jit(a_jit)
            pos = anchor + (radius + jit(s_jit)) * np.array([math.cos(ang), math.sin(ang)])
            toward = anchor - pos
            az = _azimuth_facing(toward / np.linalg.norm(toward)) + jit(a_jit)
            placements.append(_sample_placement(pos, az, template, spec, rng))
        occluders.append(OrientedBox(np.array([anchor[0], 0.36, anchor[1]]),
                                     np.array([0.45, 0.36, 0.45]), base_az))
    else:  # random_scatter
        radius = min(0.5 + 0.3 * count, 1.6)
        for i in range(count):
            pos = anchor + rng.uniform(-radius, radius, 2)
            placements.append(_sample_placement(pos, rng.uniform(-math.pi, math.pi),
                                                template, spec, rng))
    return placements, occluders


def _in_frustum(params: PlacementParams, template: TemplateModel, camera: Camera) -> bool:
    pts = place_keypoints(instantiate(template, params.deform), params)
    coords, ok = project_points(camera, pts)
    if not np.all(ok):
        return False
    w, h = camera.map_size
    return bool(np.all(coords[:, 0] >= 1.0) and np.all(coords[:, 0] <= w - 2.0)
                and np.all(coords[:, 1] >= 1.0) and np.all(coords[:, 1] <= h - 2.0))


def validate_scene(scene: Scene, template: TemplateModel, check_frustum: bool = True) -> bool:
    """True when no boxes intersect and every object projects on-grid."""
    boxes = [obj.box if obj.box is not None else object_box(template, obj.params)
             for obj in scene.objects]
    all_boxes = boxes + list(scene.occluders)
    for i in range(len(all_boxes)):
        for j in range(i + 1, len(all_boxes)):
            if obb_intersects(all_boxes[i], all_boxes[j], shrink=1.0):
                return False
    if check_frustum and scene.camera is not None:
        for obj in scene.objects:
            if not _in_frustum(obj.params, template, scene.camera):
                return False
    return True


def _depths_ok(placements, camera: Camera, depth_range) -> bool:
    if depth_range is None:
        return True
    lo, hi = depth_range
    for p in placements:
        world = np.array([p.translation[0], 0.0, p.translation[1]])
        z = float((camera.rotation @ (world - camera.position))[2])
        if not lo <= z <= hi:
            return False
    return True


def _generate_one(spec: ArrangementSpec, template: TemplateModel,
                  camera: Camera, rng) -> Scene:
    count = int(rng.integers(spec.count_min, spec.count_max + 1))
    s_jit, a_jit, anch_jit = spec.spacing_jitter, spec.azimuth_jitter, spec.anchor_jitter
    for _round in range(8):
        for _attempt in range(1000):
            placements, occluders = _draw_arrangement(spec, count, template, rng,
                                                      s_jit, a_jit, anch_jit)
            if not _depths_ok(placements, camera, spec.depth_range):
                continue
            objects = [SceneObject(p, None, object_box(template, p)) for p in placements]
            scene = Scene(objects, camera, occluders)
            if validate_scene(scene, template):
                return scene
        s_jit, a_jit, anch_jit = 0.5 * s_jit, 0.5 * a_jit, 0.5 * anch_jit
    raise RuntimeError(f"could not place a valid {spec.layout} arrangement of {count}")


def generate_scenes(spec: ArrangementSpec, n: int, template: TemplateModel,
                    camera: Camera = None):
    """n intersection-free, in-view scenes; bit-identical per seed."""
    if n < 1:
        raise ValueError("need at least one scene")
    camera = camera or default_camera()
    seq = np.random.SeedSequence(spec.seed)
    return [_generate_one(spec, template, camera, np.random.default_rng(child))
            for child in seq.spawn(n)]


def train_scene_gmm(scenes, n_components: int = 5, seed: int = 0,
                    delta_r: float = DELTA_R_DEFAULT) -> PairwiseGmm:
    """Fit co-occurrence statistics to ground-truth scenes.

    The component count backs off when the corpus yields too few close
    pairs to support it.
    """
    layouts = [[(o.params.translation, o.params.azimuth) for o in s.objects]
               for s in scenes]
    pairs = extract_pairs(layouts, delta_r)
    k = n_components
    while k > 1 and len(pairs) < 10 * k:
        k -= 1
    return fit_gmm(pairs, k, seed, delta_r)


@dataclass
class ExperimentConfig:
    """Everything one ablation experiment depends on."""

    spec: ArrangementSpec = field(default_factory=ArrangementSpec)
    hyper: Hyper = field(default_factory=Hyper)
    drop_fractions: tuple = (0.0, 0.65)
    drop_target: str = "all"
    scenes_per_bin: int = 20
    train_scenes: int = 60
    database_size: int = 40
    map_size: int = 64
    image_size: int = 512
    sigma: float = None
    conditions: tuple = ("full", "no_pairwise", "single_iteration")
    variance_threshold: float = 0.85
    delta_r: float = DELTA_R_DEFAULT
    tau_j: float = TAU_J_DEFAULT
    tau_theta_deg: float = TAU_THETA_DEG_DEFAULT
    seed: int = 0

    def __post_init__(self):
        if self.drop_target not in ("all", "one"):
            raise ValueError("drop_target must be 'all' or 'one'")
        for f in self.drop_fractions:
            lo, hi = (f, f) if np.isscalar(f) else f
            if not (0.0 <= lo <= hi <= 1.0):
                raise ValueError("drop fractions must lie in [0, 1]")
        bad = [c for c in self.conditions if c not in ("full", "no_pairwise", "single_iteration")]
        if bad:
            raise ValueError(f"unknown conditions {bad}")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "drop_target", "scenes_per_bin", "train_scenes", "database_size",
            "map_size", "image_size", "sigma", "variance_threshold", "delta_r",
            "tau_j", "tau_theta_deg", "seed")}
        d["spec"] = self.spec.to_dict()
        d["hyper"] = self.hyper.to_dict()
        d["drop_fractions"] = [list(f) if not np.isscalar(f) else f for f in self.drop_fractions]
        d["conditions"] = list(self.conditions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        kwargs = {k: v for k, v in d.items() if k in known}
        if "spec" in kwargs:
            kwargs["spec"] = ArrangementSpec.from_dict(kwargs["spec"])
        if "hyper" in kwargs:
            kwargs["hyper"] = Hyper.from_dict(kwargs["hyper"])
        if "drop_fractions" in kwargs:
            kwargs["drop_fractions"] = tuple(
                tuple(f) if isinstance(f, (list, tuple)) else f
                for f in kwargs["drop_fractions"])
        if "conditions" in kwargs:
            kwargs["conditions"] = tuple(kwargs["conditions"])
        return cls(**kwargs)


def _flat_measures(report) -> dict:
    out = {}
    for group in ("iou3d", "iou2d", "loc", "locang"):
        for key, val in getattr(report, group).items():
            out[f"{group}_{key}"] = float(val)
    out["angdiff_degrees"] = float(report.angdiff_degrees)
    return out


def _aggregate(rows) -> dict:
    keys = sorted(rows[0])
    agg = {}
    for k in keys:
        vals = np.array([r[k] for r in rows], dtype=float)
        good = vals[~np.isnan(vals)]
        if len(good) == 0:
            agg[k] = {"mean": float("nan"), "std": float("nan")}
        else:
            agg[k] = {"mean": float(np.mean(good)), "std": float(np.std(good))}
    return agg


def _condition_run(condition: str, maps, camera, template, gmm, hyper: Hyper):
    if condition == "full":
        return infer_scene(maps, camera, template, gmm, hyper)
    if condition == "no_pairwise":
        before = _gmm_eval_count()
        result = infer_scene(maps, camera, template, gmm, hyper, use_pairwise=False)
        if _gmm_eval_count() != before:
            raise AssertionError("no_pairwise condition touched the statistics model")
        return result
    if condition == "single_iteration":
        return infer_scene(maps, camera, template, gmm,
                           dataclasses.replace(hyper, max_iterations=1))
    raise ValueError(f"unknown condition {condition!r}")


def run_experiment(config: ExperimentConfig) -> dict:
    """Generate, degrade, infer, and evaluate across occlusion bins.

    Returns a JSON-ready report: per bin and condition, mean and
    standard deviation of every scene measure. Byte-identical across
    runs with the same config.
    """
    seeds = np.random.SeedSequence(config.seed).generate_state(8 + len(config.drop_fractions))
    database = sample_chair_database(config.database_size, int(seeds[0]))
    template = build_template(database, config.variance_threshold)
    camera = default_camera(config.map_size, config.image_size)

    train_spec = dataclasses.replace(config.spec, seed=int(seeds[1]))
    train = generate_scenes(train_spec, config.train_scenes, template, camera)
    gmm = train_scene_gmm(train, seed=int(seeds[2]), delta_r=config.delta_r)

    bins = []
    for b, frac_spec in enumerate(config.drop_fractions):
        bin_seed = int(seeds[8 + b])
        spec_b = dataclasses.replace(config.spec, seed=bin_seed)
        scenes = generate_scenes(spec_b, config.scenes_per_bin, template, camera)
        rng = np.random.default_rng([bin_seed, 1])
        lo, hi = (frac_spec, frac_spec) if np.isscalar(frac_spec) else frac_spec

        rows = {c: [] for c in config.conditions}
        occ = []
        for j, scene in enumerate(scenes):
            frac = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
            target = (len(scene.objects) // 2) if config.drop_target == "one" else None
            maps = render_scene_maps(scene, template, camera, config.sigma,
                                     drop_fraction=frac, seed=int(rng.integers(2 ** 31)),
                                     drop_object=target)
            gt_eval = EvalScene.from_scene(scene, template)
            scores, _ = occlusion_score(gt_eval, blockers=scene.occluders)
            occ.append(float(np.mean(scores)) if len(scores) else 0.0)
            for cond in config.conditions:
                result = _condition_run(cond, maps, camera, template, gmm, config.hyper)
                rep = measure_report(EvalScene.from_scene(result, template), gt_eval,
                                     config.tau_j, config.tau_theta_deg)
                rows[cond].append(_flat_measures(rep))

        bins.append({
            "drop_fraction": list(frac_spec) if not np.isscalar(frac_spec) else float(frac_spec),
            "n_scenes": len(scenes),
            "occlusion_mean": float(np.mean(occ)),
            "conditions": {c: {"measures": _aggregate(rows[c])} for c in config.conditions},
        })
    return {"config": config.to_dict(), "bins": bins}


def experiment_csv(report: dict) -> str:
    """Flat CSV view of an experiment report."""
    import csv
    import io
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["drop_fraction", "condition", "measure", "mean", "std"])
    for bin_row in report["bins"]:
        frac = bin_row["drop_fraction"]
        frac_label = "-".join(repr(v) for v in frac) if isinstance(frac, list) else repr(frac)
        for cond, payload in sorted(bin_row["conditions"].items()):
            for measure, stats in sorted(payload["measures"].items()):
                writer.writerow([frac_label, cond, measure,
                                 repr(stats["mean"]), repr(stats["std"])])
    return buf.getvalue()


TUNE_RANGES = {
    "tau_m": (0.05, 0.5),
    "tau_u": (0.05, 0.5),
    "alpha": (0.05, 1.0),
    "beta": (0.05, 1.0),
}


def default_tune_objective(seed: int = 0, n_scenes: int = 10, map_size: int = 64):
    """Held-out closed-loop objective: mean located-and-oriented F1."""
    from .metrics import f1, locang_measure

    seeds = np.random.SeedSequence(seed).generate_state(4)
    database = sample_chair_database(40, int(seeds[0]))
    template = build_template(database)
    camera = default_camera(map_size)
    spec = ArrangementSpec(layout="random_scatter", count_min=2, count_max=4,
                           seed=int(seeds[1]))
    scenes = generate_scenes(spec, n_scenes, template, camera)
    maps_list = [render_scene_maps(s, template, camera) for s in scenes]
    train = generate_scenes(dataclasses.replace(spec, seed=int(seeds[2])),
                            40, template, camera)
    gmm = train_scene_gmm(train, seed=int(seeds[3]))
    gts = [EvalScene.from_scene(s, template) for s in scenes]

    def objective(hyper: Hyper) -> float:
        scores = []
        for maps, gt in zip(maps_list, gts):
            result = EvalScene.from_scene(
                infer_scene(maps, camera, template, gmm, hyper), template)
            scores.append(f1(locang_measure(result, gt), locang_measure(gt, result)))
        return float(np.mean(scores))

    return objective


def tune(budget: int, seed: int = 0, objective=None, ranges=None):
    """Uniform random search over the pipeline thresholds.

    Returns (best Hyper, trial log). Ties keep the earliest trial. The
    objective maps a Hyper to a score to maximize; by default a small
    held-out closed-loop scene set is built and scored.
    """
    if budget < 1:
        raise ValueError("budget must be at least 1")
    ranges = dict(TUNE_RANGES, **(ranges or {}))
    if objective is None:
        objective = default_tune_objective(seed)
    rng = np.random.default_rng(seed)
    trials = []
    best = 0
    for t in range(budget):
        hyper = Hyper(
            tau_m=float(rng.uniform(*ranges["tau_m"])),
            tau_u=float(rng.uniform(*ranges["tau_u"])),
            alpha=float(rng.uniform(*ranges["alpha"])),
            beta=float(rng.uniform(*ranges["beta"])),
        )
        score = float(objective(hyper))
        trials.append({"trial": t, "hyper": hyper.to_dict(), "objective": score})
        if score > trials[best]["objective"]:
            best = t
    return Hyper.from_dict(trials[best]["hyper"]), trials
