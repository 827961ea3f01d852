"""FastAPI application exposing the request-scale pipeline operations.

Artifacts (template, statistics model) can be stored once per server
and reused by later requests that omit them. Every malformed domain
payload maps to a 400 with the constructor's message.
"""

from __future__ import annotations

from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import JSONResponse

from .. import __version__
from ..scene_stats import PairwiseGmm
from ..template import TemplateModel
from . import handlers, schemas

_ARTIFACT_KINDS = ("template", "gmm")


def create_app() -> FastAPI:
    app = FastAPI(title="scenelift", version=__version__)
    artifacts = {}

    @app.exception_handler(ValueError)
    async def _value_error(request: Request, exc: ValueError):
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    def _required(kind: str, given):
        if given is not None:
            return given
        if kind in artifacts:
            return artifacts[kind]
        raise HTTPException(status_code=409,
                            detail=f"no {kind} in request and none stored; PUT /artifacts/{kind} first")

    @app.get("/health", response_model=schemas.HealthResponse)
    async def health():
        return schemas.HealthResponse(status="ok", version=__version__)

    @app.put("/artifacts/{kind}", response_model=schemas.ArtifactResponse)
    async def put_artifact(kind: str, payload: dict):
        if kind not in _ARTIFACT_KINDS:
            raise HTTPException(status_code=404, detail=f"unknown artifact kind {kind!r}")
        # Parse once so a broken artifact is rejected at upload time.
        if kind == "template":
            TemplateModel.from_dict(payload)
        else:
            PairwiseGmm.from_dict(payload)
        artifacts[kind] = payload
        return schemas.ArtifactResponse(kind=kind, stored=True)

    @app.get("/artifacts/{kind}")
    async def get_artifact(kind: str):
        if kind not in _ARTIFACT_KINDS:
            raise HTTPException(status_code=404, detail=f"unknown artifact kind {kind!r}")
        if kind not in artifacts:
            raise HTTPException(status_code=404, detail=f"no {kind} stored")
        return artifacts[kind]

    @app.post("/maps/render", response_model=schemas.MapsResponse)
    async def render(req: schemas.RenderMapsRequest):
        stack = handlers.handle_render_maps(
            req.scene, _required("template", req.template), req.sigma,
            req.drop_fraction, req.drop_object, req.seed)
        return schemas.MapsResponse(kpm_base64=handlers.encode_kpm(stack),
                                    n_types=stack.n_types, width=stack.width,
                                    height=stack.height, sigma=stack.sigma)

    @app.post("/maps/extract", response_model=schemas.ExtractResponse)
    async def extract(req: schemas.ExtractRequest):
        stack = handlers.decode_kpm(req.kpm_base64)
        return schemas.ExtractResponse(**handlers.handle_extract(stack, req.tau_m))

    @app.post("/infer", response_model=schemas.InferResponse)
    async def infer(req: schemas.InferRequest):
        stack = handlers.decode_kpm(req.kpm_base64)
        gmm = req.gmm if req.gmm is not None else artifacts.get("gmm")
        scene, trace = handlers.handle_infer(
            stack, req.camera, _required("template", req.template), gmm,
            req.hyper, req.use_pairwise, req.single_iteration, req.trace)
        return schemas.InferResponse(scene=scene.to_dict(), trace=trace)

    @app.post("/evaluate", response_model=schemas.EvaluateResponse)
    async def evaluate(req: schemas.EvaluateRequest):
        template = req.template if req.template is not None else artifacts.get("template")
        out = handlers.handle_evaluate(req.result, req.gt, template,
                                       req.tau_j, req.tau_theta_deg, req.sweep)
        return schemas.EvaluateResponse(**out)

    @app.post("/gmm/fit", response_model=schemas.GmmResponse)
    async def gmm_fit(req: schemas.FitGmmRequest):
        out = handlers.handle_fit_gmm(req.scenes, req.n_components, req.seed, req.delta_r)
        return schemas.GmmResponse(**out)

    return app
