"""Recover 3D object arrangements from 2D keypoint probability maps.

The pipeline extracts keypoint locations from per-type probability
maps, fits a deformable 3D template to anchor pairs with a two-stage
nonlinear least-squares solve, scores candidates against the maps and
against learned pairwise co-occurrence statistics, and selects the
final arrangement by minimizing a binary labeling energy, iterating
with previously selected objects held fixed.
"""

from .geometry import Camera, OrientedBox, PlacementParams, obb_iou_3d, project
from .template import (DegenerateDatabaseError, KeypointSet, TemplateModel,
                       build_template, instantiate, load_database, save_database)
from .keypoint_maps import (KeypointLocations, KeypointMapStack, MapFormatError,
                            extract_locations, occlude, read_kpm, render_maps,
                            write_kpm)
from .scene_stats import (InsufficientSamplesError, PairwiseGmm, RelativePose,
                          extract_pairs, fit_gmm, maxmix_nll, pair_energy,
                          relative_pose)
from .fitting import (AnchorPair, FitProblem, FitResult, Prior, fit_initial,
                      fit_refine, propose_pairs)
from .selection import (Candidate, Hyper, SelectionProblem, build_problem,
                        infer_scene, solve, unary_energy)
from .scenes import Scene, SceneObject, attach_boxes, object_box
from .metrics import (EvalScene, MeasureReport, angdiff, iou_measure,
                      loc_measure, locang_measure, max_iou_correspondence,
                      measure_report, occlusion_score, sweep, sweep_csv)
from .harness import (ArrangementSpec, ExperimentConfig, default_camera,
                      generate_scenes, render_scene_maps, run_experiment,
                      sample_chair_database, train_scene_gmm, tune,
                      validate_scene)

__version__ = "0.1.0"

__all__ = [
    "AnchorPair", "ArrangementSpec", "Camera", "Candidate",
    "DegenerateDatabaseError", "EvalScene", "ExperimentConfig", "FitProblem",
    "FitResult", "Hyper", "InsufficientSamplesError", "KeypointLocations",
    "KeypointMapStack", "KeypointSet", "MapFormatError", "MeasureReport",
    "OrientedBox", "PairwiseGmm", "PlacementParams", "Prior", "RelativePose",
    "Scene", "SceneObject", "SelectionProblem", "TemplateModel", "angdiff",
    "attach_boxes", "build_problem", "build_template", "default_camera",
    "extract_locations", "extract_pairs", "fit_gmm", "fit_initial",
    "fit_refine", "generate_scenes", "infer_scene", "instantiate",
    "iou_measure", "load_database", "loc_measure", "locang_measure",
    "max_iou_correspondence", "maxmix_nll", "measure_report", "obb_iou_3d",
    "object_box", "occlude", "occlusion_score", "pair_energy", "project",
    "propose_pairs", "read_kpm", "relative_pose", "render_maps",
    "render_scene_maps", "run_experiment", "sample_chair_database",
    "save_database", "solve", "sweep", "sweep_csv", "train_scene_gmm",
    "tune", "unary_energy", "validate_scene", "write_kpm",
]
