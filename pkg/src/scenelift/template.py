"""Deformable keypoint templates built from a database of exemplars.

A template is the mean keypoint layout of a database plus the leading
principal modes of its variation. Instantiating a deform vector gives
a concrete keypoint set in the canonical pose: centered on the ground
origin, front toward -z, resting on y = 0.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


class DegenerateDatabaseError(ValueError):
    """All database entries are identical, so no modes can be extracted."""


@dataclass(frozen=True)
class KeypointSet:
    """One exemplar: an id and its (N_k, 3) canonical keypoints.

    Chair sets use the fixed semantic order: four leg tips, two
    seat-back corners, two back-top corners.
    """

    id: str
    keypoints: np.ndarray

    def __post_init__(self):
        pts = np.array(self.keypoints, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError("keypoints must have shape (N_k, 3)")
        if pts[:, 1].min() < -1e-9:
            raise ValueError("keypoints must not dip below the ground plane")
        if pts[:, 1].min() > 1e-6:
            raise ValueError("the lowest keypoint must touch the ground plane")
        pts.flags.writeable = False
        object.__setattr__(self, "keypoints", pts)
        object.__setattr__(self, "id", str(self.id))


@dataclass(frozen=True)
class TemplateModel:
    """PCA shape model over flattened keypoint coordinates.

    Attributes:
        mean: (3 * N_k,) flattened mean layout.
        eigenvectors: (k, 3 * N_k), unit rows, descending eigenvalue order.
        eigenvalues: (k,) positive variances of the kept modes.
        variance_fraction: explained-variance ratio of the kept modes.
        db_ids / db_projections: cached PCA coordinates of every
            database member, aligned by index.
        database: the source exemplars when available (templates loaded
            from the JSON schema carry projections only).
    """

    mean: np.ndarray
    eigenvectors: np.ndarray
    eigenvalues: np.ndarray
    variance_fraction: float
    db_ids: list
    db_projections: np.ndarray
    database: list = field(default=None, repr=False)

    @property
    def k(self) -> int:
        return int(self.eigenvalues.shape[0])

    @property
    def n_keypoints(self) -> int:
        return int(self.mean.shape[0] // 3)

    def to_dict(self) -> dict:
        return {
            "mean": [float(v) for v in self.mean],
            "eigenvectors": [[float(v) for v in row] for row in self.eigenvectors],
            "eigenvalues": [float(v) for v in self.eigenvalues],
            "k": self.k,
            "database_projections": [
                {"id": i, "projection": [float(v) for v in p]}
                for i, p in zip(self.db_ids, self.db_projections)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TemplateModel":
        eigenvalues = np.array(d["eigenvalues"], dtype=float)
        eigenvectors = np.array(d["eigenvectors"], dtype=float).reshape(len(eigenvalues), -1)
        entries = d["database_projections"]
        ids = [e["id"] for e in entries]
        projections = np.array([e["projection"] for e in entries], dtype=float).reshape(len(entries), len(eigenvalues))
        frac = float(d.get("variance_fraction", float("nan")))
        return cls(np.array(d["mean"], dtype=float), eigenvectors, eigenvalues, frac, ids, projections)

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "TemplateModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def build_template(database, variance_threshold: float = 0.85) -> TemplateModel:
    """Fit the PCA template to a database of keypoint sets.

    Keeps the smallest number of modes whose cumulative explained
    variance exceeds `variance_threshold` (at least one). Covariance is
    unbiased (n - 1 divisor) and the modes are not whitened.
    """
    database = list(database)
    if len(database) < 2:
        raise ValueError("need at least two keypoint sets")
    n_kp = database[0].keypoints.shape[0]
    for s in database:
        if s.keypoints.shape[0] != n_kp:
            raise ValueError("all keypoint sets must have the same keypoint count")
    x = np.stack([s.keypoints.reshape(-1) for s in database])
    mean = x.mean(axis=0)
    xc = x - mean
    total = float(np.sum(xc * xc) / (len(database) - 1))
    if total < 1e-18:
        raise DegenerateDatabaseError("all keypoint sets are identical")
    _, svals, vt = np.linalg.svd(xc, full_matrices=False)
    eigenvalues = svals ** 2 / (len(database) - 1)
    cum = np.cumsum(eigenvalues) / total
    k = int(np.searchsorted(cum, variance_threshold, side="right")) + 1
    k = max(1, min(k, len(eigenvalues)))
    vecs = vt[:k].copy()
    # Deterministic sign: largest-magnitude entry of each mode is positive.
    for row in vecs:
        j = int(np.argmax(np.abs(row)))
        if row[j] < 0:
            row *= -1.0
    projections = xc @ vecs.T
    return TemplateModel(
        mean=mean,
        eigenvectors=vecs,
        eigenvalues=eigenvalues[:k].copy(),
        variance_fraction=float(cum[k - 1]),
        db_ids=[s.id for s in database],
        db_projections=projections,
        database=database,
    )


def instantiate(model: TemplateModel, deform) -> np.ndarray:
    """Keypoints (N_k, 3) for a deform vector; exactly linear in it."""
    deform = np.asarray(deform, dtype=float)
    if deform.shape != (model.k,):
        raise ValueError(f"deform must have shape ({model.k},)")
    flat = model.mean + deform @ model.eigenvectors
    return flat.reshape(model.n_keypoints, 3)


def project_deform(model: TemplateModel, keypoints) -> np.ndarray:
    """PCA coordinates of a keypoint layout (the pseudo-inverse of instantiate)."""
    flat = np.asarray(keypoints, dtype=float).reshape(-1)
    return model.eigenvectors @ (flat - model.mean)


def nearest_model(model: TemplateModel, deform) -> str:
    """Id of the database member closest to `deform` in PCA coordinates.

    Exact distance ties resolve to the lexicographically smallest id.
    """
    deform = np.asarray(deform, dtype=float)
    d2 = np.sum((model.db_projections - deform) ** 2, axis=1)
    best = d2.min()
    tied = [model.db_ids[i] for i in np.flatnonzero(d2 == best)]
    return min(tied)


def save_database(database, path):
    with open(path, "w") as fh:
        json.dump(
            [{"id": s.id, "keypoints": [[float(v) for v in p] for p in s.keypoints]} for s in database],
            fh, indent=2, sort_keys=True,
        )


def load_database(path):
    with open(path) as fh:
        raw = json.load(fh)
    return [KeypointSet(e["id"], np.array(e["keypoints"], dtype=float)) for e in raw]
