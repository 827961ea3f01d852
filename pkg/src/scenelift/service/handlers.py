"""Request-scale operations shared by the HTTP service and the CLI.

Each handler takes already-decoded payload dicts, rebuilds domain
objects (raising ValueError on malformed input), runs one pipeline
operation, and returns JSON-ready results.
"""

from __future__ import annotations

import base64
import dataclasses

import numpy as np

from ..geometry import Camera
from ..harness import render_scene_maps, train_scene_gmm
from ..keypoint_maps import (KeypointMapStack, extract_locations, kpm_from_bytes,
                             kpm_to_bytes)
from ..metrics import EvalScene, measure_report, sweep, sweep_csv
from ..scene_stats import PairwiseGmm
from ..scenes import Scene
from ..selection import Hyper, infer_scene
from ..template import TemplateModel


def decode_kpm(kpm_base64: str) -> KeypointMapStack:
    try:
        raw = base64.b64decode(kpm_base64, validate=True)
    except Exception as exc:
        raise ValueError(f"kpm payload is not valid base64: {exc}") from exc
    return kpm_from_bytes(raw)


def encode_kpm(stack: KeypointMapStack) -> str:
    return base64.b64encode(kpm_to_bytes(stack)).decode("ascii")


def handle_render_maps(scene: dict, template: dict, sigma=None,
                       drop_fraction: float = 0.0, drop_object=None,
                       seed: int = 0) -> KeypointMapStack:
    scene_obj = Scene.from_dict(scene)
    if scene_obj.camera is None:
        raise ValueError("scene has no camera")
    tmpl = TemplateModel.from_dict(template)
    if drop_object is not None and not (0 <= drop_object < len(scene_obj.objects)):
        raise ValueError(f"drop_object {drop_object} out of range")
    return render_scene_maps(scene_obj, tmpl, sigma=sigma,
                             drop_fraction=drop_fraction, seed=seed,
                             drop_object=drop_object)


def handle_extract(stack: KeypointMapStack, tau_m: float) -> dict:
    locs = extract_locations(stack, tau_m)
    return {
        "positions": [p.tolist() for p in locs.positions],
        "peaks": [p.tolist() for p in locs.peaks],
    }


def handle_infer(stack: KeypointMapStack, camera: dict, template: dict,
                 gmm: dict = None, hyper: dict = None, use_pairwise: bool = True,
                 single_iteration: bool = False, want_trace: bool = False):
    cam = Camera.from_dict(camera)
    tmpl = TemplateModel.from_dict(template)
    stats = PairwiseGmm.from_dict(gmm) if gmm else None
    hyp = Hyper.from_dict(hyper or {})
    if single_iteration:
        hyp = dataclasses.replace(hyp, max_iterations=1)
    trace = [] if want_trace else None
    scene = infer_scene(stack, cam, tmpl, stats, hyp,
                        use_pairwise=use_pairwise, trace=trace)
    return scene, trace


def _eval_scene(payload: dict, template: dict) -> EvalScene:
    tmpl = TemplateModel.from_dict(template) if template else None
    return EvalScene.from_scene(Scene.from_dict(payload), tmpl)


def handle_evaluate(result: dict, gt: dict, template: dict = None,
                    tau_j: float = 0.25, tau_theta_deg: float = 15.0,
                    want_sweep: bool = False) -> dict:
    res = _eval_scene(result, template)
    ref = _eval_scene(gt, template)
    if want_sweep:
        rows = sweep([res], [ref])
        return {"sweep": rows, "sweep_csv": sweep_csv(rows)}
    return {"report": measure_report(res, ref, tau_j, tau_theta_deg).to_dict()}


def handle_fit_gmm(scenes: list, n_components: int = 5, seed: int = 0,
                   delta_r: float = 1.5) -> dict:
    parsed = [Scene.from_dict(s) for s in scenes]
    n_pairs = sum(
        1
        for s in parsed
        for i, a in enumerate(s.objects)
        for j, b in enumerate(s.objects)
        if i != j and np.linalg.norm(a.params.translation - b.params.translation) <= delta_r
    )
    gmm = train_scene_gmm(parsed, n_components, seed, delta_r)
    return {"gmm": gmm.to_dict(), "n_samples": n_pairs}
