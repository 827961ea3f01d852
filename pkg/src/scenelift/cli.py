"""Command line surface for the pipeline.

Every subcommand runs in-process by default. The request-scale ones
(render-maps, fit-gmm, infer, evaluate) also accept --server URL to run
against a running service instead; batch commands (gen-*, experiment,
tune) always run locally.

Exit codes: 0 success, 2 for bad inputs or validation failures, 1 for
internal errors.
"""

from __future__ import annotations

import argparse
import base64
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .geometry import Camera
from .harness import (ArrangementSpec, ExperimentConfig, default_camera,
                      experiment_csv, generate_scenes, run_experiment,
                      sample_chair_database, tune)
from .keypoint_maps import kpm_from_bytes, read_kpm, write_kpm
from .service import handlers
from .template import TemplateModel, build_template, save_database

_REQUEST_TIMEOUT = 600.0


class _ServerError(RuntimeError):
    """The service answered with a 5xx or could not be reached."""


def _load_json(path):
    with open(path) as fh:
        return json.load(fh)


def _write_text(path, text: str):
    if path is None:
        sys.stdout.write(text)
        if not text.endswith("\n"):
            sys.stdout.write("\n")
    else:
        Path(path).write_text(text)


def _dump_json(payload, path):
    _write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _config_dict(args) -> dict:
    if getattr(args, "config", None):
        loaded = _load_json(args.config)
        if not isinstance(loaded, dict):
            raise ValueError("--config must contain a JSON object")
        return loaded
    return {}


def _post(server: str, path: str, payload: dict) -> dict:
    import httpx
    try:
        resp = httpx.post(server.rstrip("/") + path, json=payload,
                          timeout=_REQUEST_TIMEOUT)
    except httpx.HTTPError as exc:
        raise _ServerError(f"request to {server} failed: {exc}") from exc
    if resp.status_code >= 500:
        raise _ServerError(f"server error {resp.status_code}: {resp.text}")
    if resp.status_code >= 400:
        detail = resp.json().get("detail", resp.text) if resp.headers.get(
            "content-type", "").startswith("application/json") else resp.text
        raise ValueError(f"server rejected request: {detail}")
    return resp.json()


def _camera_from_file(path) -> dict:
    d = _load_json(path)
    if "rotation" in d:
        return d
    if "camera" in d and d["camera"]:
        return d["camera"]
    raise ValueError(f"{path} holds neither a camera nor a scene with one")


def cmd_gen_templates(args) -> int:
    cfg = _config_dict(args)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    n = args.n if args.n is not None else int(cfg.get("n", 40))
    thr = args.variance_threshold if args.variance_threshold is not None \
        else float(cfg.get("variance_threshold", 0.85))
    database = sample_chair_database(n, seed)
    template = build_template(database, thr)
    out = args.out or "template.json"
    template.save(out)
    if args.database_out:
        save_database(database, args.database_out)
    print(f"template with {template.k} modes over {template.n_keypoints} keypoints -> {out}")
    return 0


def cmd_gen_scenes(args) -> int:
    cfg = _config_dict(args)
    template = TemplateModel.load(args.template)
    spec_fields = {k: v for k, v in cfg.items()
                   if k in {f.name for f in dataclasses.fields(ArrangementSpec)}}
    for name in ("layout", "count_min", "count_max", "spacing", "spacing_jitter",
                 "azimuth_jitter", "deform_shrink", "scale_jitter"):
        val = getattr(args, name, None)
        if val is not None:
            spec_fields[name] = val
    if args.seed is not None:
        spec_fields["seed"] = args.seed
    spec = ArrangementSpec(**spec_fields)
    camera = (Camera.from_dict(_camera_from_file(args.camera)) if args.camera
              else default_camera(args.map_size, args.image_size))
    scenes = generate_scenes(spec, args.n, template, camera)
    out_dir = Path(args.out or "scenes")
    out_dir.mkdir(parents=True, exist_ok=True)
    camera.save(out_dir / "camera.json")
    for i, scene in enumerate(scenes):
        scene.save(out_dir / f"scene_{i:04d}.json")
    print(f"{len(scenes)} {spec.layout} scenes -> {out_dir}")
    return 0


def cmd_render_maps(args) -> int:
    scene = _load_json(args.scene)
    template = _load_json(args.template)
    if args.out is None:
        raise ValueError("render-maps needs --out for the binary map stack")
    if args.server:
        resp = _post(args.server, "/maps/render", {
            "scene": scene, "template": template, "sigma": args.sigma,
            "drop_fraction": args.drop_fraction, "drop_object": args.drop_object,
            "seed": args.seed or 0,
        })
        stack = kpm_from_bytes(base64.b64decode(resp["kpm_base64"]))
    else:
        stack = handlers.handle_render_maps(scene, template, args.sigma,
                                            args.drop_fraction, args.drop_object,
                                            args.seed or 0)
    write_kpm(stack, args.out)
    print(f"{stack.n_types} channels at {stack.width}x{stack.height} -> {args.out}")
    return 0


def cmd_fit_gmm(args) -> int:
    scenes = [_load_json(p) for p in args.scenes]
    if args.server:
        resp = _post(args.server, "/gmm/fit", {
            "scenes": scenes, "n_components": args.components,
            "seed": args.seed or 0, "delta_r": args.delta_r,
        })
    else:
        resp = handlers.handle_fit_gmm(scenes, args.components, args.seed or 0,
                                       args.delta_r)
    out = args.out or "gmm.json"
    _dump_json(resp["gmm"], out)
    print(f"{len(resp['gmm']['components'])} components from {resp['n_samples']} pairs -> {out}")
    return 0


def cmd_infer(args) -> int:
    cfg = _config_dict(args)
    hyper = cfg.get("hyper", cfg)
    camera = _camera_from_file(args.camera)
    template = _load_json(args.template)
    gmm = _load_json(args.gmm) if args.gmm else None
    if args.server:
        with open(args.maps, "rb") as fh:
            payload_kpm = base64.b64encode(fh.read()).decode("ascii")
        resp = _post(args.server, "/infer", {
            "kpm_base64": payload_kpm, "camera": camera, "template": template,
            "gmm": gmm, "hyper": hyper, "use_pairwise": not args.no_pairwise,
            "single_iteration": args.single_iteration, "trace": args.fit_trace,
        })
        out_payload = resp["scene"]
        trace = resp.get("trace")
    else:
        stack = read_kpm(args.maps)
        scene, trace = handlers.handle_infer(stack, camera, template, gmm, hyper,
                                             not args.no_pairwise,
                                             args.single_iteration, args.fit_trace)
        out_payload = scene.to_dict()
    if args.fit_trace and trace is not None:
        out_payload["trace"] = trace
    _dump_json(out_payload, args.out)
    if args.out:
        print(f"{len(out_payload['objects'])} objects -> {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    result = _load_json(args.result)
    gt = _load_json(args.gt)
    template = _load_json(args.template) if args.template else None
    if args.server:
        resp = _post(args.server, "/evaluate", {
            "result": result, "gt": gt, "template": template,
            "tau_j": args.tau_j, "tau_theta_deg": args.tau_theta,
            "sweep": args.sweep,
        })
    else:
        resp = handlers.handle_evaluate(result, gt, template, args.tau_j,
                                        args.tau_theta, args.sweep)
    if args.sweep:
        _write_text(args.out, resp["sweep_csv"])
    else:
        _dump_json(resp["report"], args.out)
    return 0


def cmd_experiment(args) -> int:
    cfg = _config_dict(args)
    config = ExperimentConfig.from_dict(cfg)
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    report = run_experiment(config)
    _dump_json(report, args.out)
    if args.csv:
        Path(args.csv).write_text(experiment_csv(report))
    return 0


def cmd_tune(args) -> int:
    cfg = _config_dict(args)
    ranges = cfg.get("ranges")
    best, trials = tune(args.budget, args.seed or 0, ranges=ranges)
    _dump_json({"best": best.to_dict(), "trials": trials}, args.out)
    return 0


def cmd_kpm_info(args) -> int:
    stack = read_kpm(args.file)
    info = {
        "n_types": stack.n_types,
        "width": stack.width,
        "height": stack.height,
        "sigma": float(stack.sigma),
        "channel_max": [float(c.max()) for c in stack.channels],
        "active_cells": int(np.count_nonzero(stack.channels)),
    }
    _dump_json(info, args.out)
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app
    print(f"listening on http://{args.host}:{args.port}", flush=True)
    uvicorn.run(create_app(), host=args.host, port=args.port, log_level="warning")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scenelift",
        description="Recover 3D object arrangements from 2D keypoint maps.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="RNG seed")
    common.add_argument("--out", default=None, help="output path (default: stdout for JSON)")
    common.add_argument("--config", default=None, help="JSON config file")

    p = sub.add_parser("gen-templates", parents=[common],
                       help="sample a chair database and build the deformable template")
    p.add_argument("--n", type=int, default=None, help="database size (default 40)")
    p.add_argument("--variance-threshold", type=float, default=None)
    p.add_argument("--database-out", default=None, help="also save the raw keypoint sets")
    p.set_defaults(func=cmd_gen_templates)

    p = sub.add_parser("gen-scenes", parents=[common],
                       help="generate ground-truth arrangements")
    p.add_argument("--template", required=True)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--layout", choices=("row", "facing_pairs", "ring_around_table",
                                        "random_scatter"), default=None)
    p.add_argument("--count-min", type=int, default=None, dest="count_min")
    p.add_argument("--count-max", type=int, default=None, dest="count_max")
    p.add_argument("--spacing", type=float, default=None)
    p.add_argument("--spacing-jitter", type=float, default=None, dest="spacing_jitter")
    p.add_argument("--azimuth-jitter", type=float, default=None, dest="azimuth_jitter")
    p.add_argument("--deform-shrink", type=float, default=None, dest="deform_shrink")
    p.add_argument("--scale-jitter", type=float, default=None, dest="scale_jitter")
    p.add_argument("--camera", default=None, help="camera JSON (default: built-in camera)")
    p.add_argument("--map-size", type=int, default=64)
    p.add_argument("--image-size", type=int, default=512)
    p.set_defaults(func=cmd_gen_scenes)

    p = sub.add_parser("render-maps", parents=[common],
                       help="render (optionally degraded) keypoint maps for a scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--template", required=True)
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--drop-fraction", type=float, default=0.0)
    p.add_argument("--drop-object", type=int, default=None)
    p.add_argument("--server", default=None, help="route through a running service")
    p.set_defaults(func=cmd_render_maps)

    p = sub.add_parser("fit-gmm", parents=[common],
                       help="fit pairwise co-occurrence statistics to scenes")
    p.add_argument("--scenes", nargs="+", required=True)
    p.add_argument("--components", type=int, default=5)
    p.add_argument("--delta-r", type=float, default=1.5)
    p.add_argument("--server", default=None)
    p.set_defaults(func=cmd_fit_gmm)

    p = sub.add_parser("infer", parents=[common],
                       help="recover a scene from a keypoint map stack")
    p.add_argument("--maps", required=True, help=".kpm map stack")
    p.add_argument("--camera", required=True, help="camera JSON (or scene JSON with one)")
    p.add_argument("--template", required=True)
    p.add_argument("--gmm", default=None)
    p.add_argument("--no-pairwise", action="store_true",
                   help="ablation: never consult the statistics model")
    p.add_argument("--single-iteration", action="store_true",
                   help="ablation: stop after the first selection round")
    p.add_argument("--fit-trace", action="store_true",
                   help="include per-iteration candidate counts in the output")
    p.add_argument("--server", default=None)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", parents=[common],
                       help="compare a recovered scene against ground truth")
    p.add_argument("--result", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--template", default=None,
                   help="needed when scenes do not embed boxes")
    p.add_argument("--tau-j", type=float, default=0.25, dest="tau_j")
    p.add_argument("--tau-theta", type=float, default=15.0, dest="tau_theta")
    p.add_argument("--sweep", action="store_true", help="emit the threshold grid as CSV")
    p.add_argument("--server", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("experiment", parents=[common],
                       help="run the occlusion-binned ablation experiment")
    p.add_argument("--csv", default=None, help="also write a flat CSV")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("tune", parents=[common],
                       help="random-search the pipeline thresholds")
    p.add_argument("--budget", type=int, required=True)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("kpm-info", parents=[common],
                       help="describe a binary map stack")
    p.add_argument("file")
    p.set_defaults(func=cmd_kpm_info)

    p = sub.add_parser("serve", parents=[common], help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except _ServerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
