"""Request and response bodies for the HTTP service.

Domain payloads (scenes, cameras, templates, mixtures) travel as their
canonical JSON dicts and are validated by the domain constructors;
map stacks travel as base64 of the binary container format.
"""

from __future__ import annotations

from typing import Optional

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: str
    version: str


class ArtifactResponse(BaseModel):
    kind: str
    stored: bool


class RenderMapsRequest(BaseModel):
    scene: dict
    template: Optional[dict] = None
    sigma: Optional[float] = Field(default=None, gt=0)
    drop_fraction: float = Field(default=0.0, ge=0.0, le=1.0)
    drop_object: Optional[int] = None
    seed: int = 0


class MapsResponse(BaseModel):
    kpm_base64: str
    n_types: int
    width: int
    height: int
    sigma: float


class ExtractRequest(BaseModel):
    kpm_base64: str
    tau_m: float = Field(default=0.25, gt=0.0, lt=1.0)


class ExtractResponse(BaseModel):
    # positions[t] is a list of [x, y]; peaks[t] the matching map values.
    positions: list
    peaks: list


class InferRequest(BaseModel):
    kpm_base64: str
    camera: dict
    template: Optional[dict] = None
    gmm: Optional[dict] = None
    hyper: dict = Field(default_factory=dict)
    use_pairwise: bool = True
    single_iteration: bool = False
    trace: bool = False


class InferResponse(BaseModel):
    scene: dict
    trace: Optional[list] = None


class EvaluateRequest(BaseModel):
    result: dict
    gt: dict
    template: Optional[dict] = None
    tau_j: float = Field(default=0.25, gt=0.0, lt=1.0)
    tau_theta_deg: float = Field(default=15.0, gt=0.0)
    sweep: bool = False


class EvaluateResponse(BaseModel):
    report: Optional[dict] = None
    sweep: Optional[list] = None
    sweep_csv: Optional[str] = None


class FitGmmRequest(BaseModel):
    scenes: list
    n_components: int = Field(default=5, ge=1)
    seed: int = 0
    delta_r: float = Field(default=1.5, gt=0.0)


class GmmResponse(BaseModel):
    gmm: dict
    n_samples: int
