"""Scene containers and their JSON form.

A scene is a flat list of placed objects plus the camera that observed
it. Ring layouts may add non-object occluder boxes; those never render
keypoints but block visibility rays.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import Camera, OrientedBox, PlacementParams, place_keypoints
from .template import TemplateModel, instantiate


@dataclass
class SceneObject:
    params: PlacementParams
    model_id: str = None
    box: OrientedBox = None

    def to_dict(self) -> dict:
        d = self.params.to_dict()
        d["model_id"] = self.model_id
        if self.box is not None:
            d["box"] = self.box.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneObject":
        box = OrientedBox.from_dict(d["box"]) if d.get("box") else None
        return cls(PlacementParams.from_dict(d), d.get("model_id"), box)


@dataclass
class Scene:
    objects: list
    camera: Camera = None
    occluders: list = field(default_factory=list)
    iterations_used: int = None

    def to_dict(self) -> dict:
        d = {"objects": [o.to_dict() for o in self.objects]}
        if self.camera is not None:
            d["camera"] = self.camera.to_dict()
        if self.occluders:
            d["occluders"] = [b.to_dict() for b in self.occluders]
        if self.iterations_used is not None:
            d["iterations_used"] = int(self.iterations_used)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        return cls(
            [SceneObject.from_dict(o) for o in d["objects"]],
            Camera.from_dict(d["camera"]) if d.get("camera") else None,
            [OrientedBox.from_dict(b) for b in d.get("occluders", [])],
            d.get("iterations_used"),
        )

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "Scene":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def object_box(template: TemplateModel, params: PlacementParams,
               min_half_extent: float = 1e-3) -> OrientedBox:
    """Tight up-aligned box around an object's deformed keypoints.

    Extents come from the canonical deformed layout scaled by the
    object's scale; degenerate axes are widened to min_half_extent.
    """
    pts = instantiate(template, params.deform) * params.scale
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    half = np.maximum(0.5 * (hi - lo), min_half_extent)
    center_local = 0.5 * (hi + lo)
    center_world = place_keypoints(center_local[None, :] / params.scale, params)[0]
    return OrientedBox(center_world, half, params.azimuth)


def attach_boxes(scene: Scene, template: TemplateModel) -> Scene:
    for obj in scene.objects:
        if obj.box is None:
            obj.box = object_box(template, obj.params)
    return scene
