"""Pairwise co-occurrence statistics of placed objects.

Relative poses between nearby objects, expressed in the first object's
local ground frame, are modeled with a full-covariance Gaussian mixture
over (dt_x, dt_z, dtheta). The angular residual is always wrapped to
[-pi, pi), both when evaluating densities and inside EM updates.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .geometry import rot2, wrap_angle

DELTA_R_DEFAULT = 1.5
COVARIANCE_BIAS = 0.01
WEIGHT_FLOOR = 1e-6
LOGIT_EPS = 1e-9
_LL_TOL = 1e-7
_MAX_EM_ITERS = 500
_EM_COV_FLOOR = 1e-6
_TWO_PI_POW = (2.0 * math.pi) ** 1.5


class InsufficientSamplesError(ValueError):
    """Fewer than 10 samples per requested mixture component."""


_EVALUATIONS = [0]  # density/NLL evaluations, for asserting ablations stay off


def evaluation_count() -> int:
    """How many times any mixture density or NLL has been evaluated."""
    return _EVALUATIONS[0]


def reset_evaluation_count() -> None:
    _EVALUATIONS[0] = 0


@dataclass(frozen=True)
class RelativePose:
    """Pose of one object in another object's local ground frame."""

    delta_t: np.ndarray
    delta_theta: float

    def __post_init__(self):
        dt = np.array(self.delta_t, dtype=float).reshape(2)
        dt.flags.writeable = False
        object.__setattr__(self, "delta_t", dt)
        object.__setattr__(self, "delta_theta", float(wrap_angle(self.delta_theta)))

    def as_vector(self) -> np.ndarray:
        return np.array([self.delta_t[0], self.delta_t[1], self.delta_theta])


def relative_pose(t_ref, theta_ref, t_other, theta_other) -> RelativePose:
    """Relative pose of (t_other, theta_other) in the reference frame."""
    d = np.asarray(t_other, dtype=float) - np.asarray(t_ref, dtype=float)
    return RelativePose(rot2(-theta_ref) @ d, theta_other - theta_ref)


def extract_pairs(scenes, delta_r: float = DELTA_R_DEFAULT) -> np.ndarray:
    """Training samples (n, 3) from ordered object pairs within delta_r.

    scenes: iterable of lists of (translation (2,), azimuth) tuples.
    Both orderings of every close pair are emitted, so learned
    statistics are direction balanced.
    """
    rows = []
    for scene in scenes:
        objs = [(np.asarray(t, dtype=float), float(a)) for t, a in scene]
        for i, (ti, ai) in enumerate(objs):
            for j, (tj, aj) in enumerate(objs):
                if i == j:
                    continue
                if np.linalg.norm(tj - ti) <= delta_r:
                    rows.append(relative_pose(ti, ai, tj, aj).as_vector())
    return np.array(rows, dtype=float).reshape(len(rows), 3)


def _wrap_residuals(x, mean):
    r = x - mean
    r[:, 2] = wrap_angle(r[:, 2])
    return r


def _log_gauss(x, mean, cov):
    """Log N(x | mean, cov) with the angular residual wrapped."""
    r = _wrap_residuals(x, mean)
    chol = np.linalg.cholesky(cov)
    z = np.linalg.solve(chol, r.T)
    quad = np.sum(z * z, axis=0)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return -0.5 * (quad + logdet + 3.0 * math.log(2.0 * math.pi))


@dataclass
class PairwiseGmm:
    """Gaussian mixture over relative poses within a radius delta_r."""

    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    delta_r: float = DELTA_R_DEFAULT

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        self.means = np.asarray(self.means, dtype=float).reshape(len(self.weights), 3)
        self.covariances = np.asarray(self.covariances, dtype=float).reshape(len(self.weights), 3, 3)
        self.delta_r = float(self.delta_r)
        if abs(self.weights.sum() - 1.0) > 1e-6 or np.any(self.weights < 0):
            raise ValueError("weights must be nonnegative and sum to 1")

    @property
    def n_components(self) -> int:
        return len(self.weights)

    def component_etas(self) -> np.ndarray:
        """Peak heights eta_k = (2 pi)^(-3/2) det(cov_k)^(-1/2)."""
        dets = np.linalg.det(self.covariances)
        return 1.0 / (_TWO_PI_POW * np.sqrt(dets))

    def to_dict(self) -> dict:
        return {
            "delta_r": self.delta_r,
            "components": [
                {
                    "weight": float(w),
                    "mean": [float(v) for v in m],
                    "covariance": [float(v) for v in c.reshape(-1)],
                }
                for w, m, c in zip(self.weights, self.means, self.covariances)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PairwiseGmm":
        comps = d["components"]
        return cls(
            np.array([c["weight"] for c in comps]),
            np.array([c["mean"] for c in comps]),
            np.array([np.array(c["covariance"]).reshape(3, 3) for c in comps]),
            float(d["delta_r"]),
        )

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "PairwiseGmm":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def density(gmm: PairwiseGmm, pose) -> float:
    """Mixture density at a relative pose (vector or RelativePose)."""
    x = pose.as_vector() if isinstance(pose, RelativePose) else np.asarray(pose, dtype=float)
    return float(density_many(gmm, x.reshape(1, 3))[0])


def density_many(gmm: PairwiseGmm, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(-1, 3)
    _EVALUATIONS[0] += len(x)
    log_probs = np.stack([
        math.log(max(w, 1e-300)) + _log_gauss(x, m, c)
        for w, m, c in zip(gmm.weights, gmm.means, gmm.covariances)
    ])
    top = log_probs.max(axis=0)
    return np.exp(top) * np.sum(np.exp(log_probs - top), axis=0)


def maxmix_nll(gmm: PairwiseGmm, pose):
    """Max-Mixture negative log-likelihood and its active component.

    -log max_k w_k N(pose | mu_k, cov_k), computed as
    min_k 0.5 quad_k - log(w_k eta_k). Returns (value, k_star).
    """
    x = pose.as_vector() if isinstance(pose, RelativePose) else np.asarray(pose, dtype=float)
    x = x.reshape(1, 3)
    _EVALUATIONS[0] += 1
    etas = gmm.component_etas()
    scores = np.empty(gmm.n_components)
    for k in range(gmm.n_components):
        r = _wrap_residuals(x.copy(), gmm.means[k])[0]
        quad = float(r @ np.linalg.solve(gmm.covariances[k], r))
        scores[k] = 0.5 * quad - math.log(gmm.weights[k] * etas[k])
    k_star = int(np.argmin(scores))
    return float(scores[k_star]), k_star


def pair_energy(gmm: PairwiseGmm, pose, beta: float) -> float:
    """Pairwise co-occurrence energy -logit(density(pose)^beta).

    The powered density is clamped to [eps, 1 - eps] before the logit,
    bounding energies to roughly +/-20.7.
    """
    p = density(gmm, pose) ** beta
    p = min(max(p, LOGIT_EPS), 1.0 - LOGIT_EPS)
    return float(-math.log(p / (1.0 - p)))


def _kmeans_pp_centers(x: np.ndarray, k: int, rng) -> np.ndarray:
    n = len(x)
    centers = [x[int(rng.integers(n))]]
    for _ in range(k - 1):
        d2 = np.min(np.stack([np.sum(_wrap_residuals(x.copy(), c) ** 2, axis=1) for c in centers]), axis=0)
        total = d2.sum()
        if total <= 0:
            centers.append(x[int(rng.integers(n))])
            continue
        centers.append(x[int(rng.choice(n, p=d2 / total))])
    return np.stack(centers)


def _em(x: np.ndarray, n_components: int, rng):
    n = len(x)
    means = _kmeans_pp_centers(x, n_components, rng)
    base = np.cov(x.T) if n > 1 else np.zeros((3, 3))
    base = np.atleast_2d(base) + _EM_COV_FLOOR * np.eye(3)
    covs = np.repeat(base[None], n_components, axis=0)
    weights = np.full(n_components, 1.0 / n_components)

    # The angle coordinate is updated with a wrapped (circular) mean, which
    # is not the exact M-step of any Gaussian mixture, so the likelihood is
    # not guaranteed monotone near the +/-pi seam. Keep the best iterate
    # instead of trusting the final one.
    prev_ll = -np.inf
    best_ll = -np.inf
    best = (weights, means, covs)
    for _ in range(_MAX_EM_ITERS):
        log_probs = np.stack([
            np.log(max(weights[k], 1e-300)) + _log_gauss(x, means[k], covs[k])
            for k in range(n_components)
        ])
        top = log_probs.max(axis=0)
        lse = top + np.log(np.sum(np.exp(log_probs - top), axis=0))
        ll = float(lse.sum())
        if ll > best_ll:
            best_ll = ll
            best = (weights.copy(), means.copy(), covs.copy())
        if abs(ll - prev_ll) < _LL_TOL:
            break
        prev_ll = ll
        resp = np.exp(log_probs - lse)

        nk = resp.sum(axis=1)
        weights = nk / n
        for k in range(n_components):
            w = resp[k]
            if nk[k] < 1e-12:
                continue
            mu = means[k].copy()
            r = _wrap_residuals(x.copy(), mu)
            mu = mu + (w @ r) / nk[k]
            mu[2] = wrap_angle(mu[2])
            rc = _wrap_residuals(x.copy(), mu)
            cov = (w[:, None] * rc).T @ rc / nk[k]
            covs[k] = cov + _EM_COV_FLOOR * np.eye(3)
            means[k] = mu
    weights, means, covs = best
    return weights, means, covs, best_ll


def fit_gmm(samples: np.ndarray, n_components: int = 5, seed: int = 0,
            delta_r: float = DELTA_R_DEFAULT) -> PairwiseGmm:
    """EM fit of the relative-pose mixture.

    Requires at least 10 samples per component. A 0.01 diagonal bias is
    added to the fitted covariances once EM finishes, since training
    corpora tend to be axis-aligned. Components whose weight collapses
    below 1e-6 are removed and EM restarts once with the reduced count;
    a second collapse is dropped and renormalized.
    """
    x = np.asarray(samples, dtype=float).reshape(-1, 3)
    if len(x) < 10 * n_components:
        raise InsufficientSamplesError(
            f"{len(x)} samples for {n_components} components (need {10 * n_components})")
    rng = np.random.default_rng(seed)
    weights, means, covs, _ = _em(x, n_components, rng)
    alive = weights >= WEIGHT_FLOOR
    if not np.all(alive):
        retry = int(alive.sum())
        weights, means, covs, _ = _em(x, max(retry, 1), rng)
        alive = weights >= WEIGHT_FLOOR
        if not np.all(alive):
            weights, means, covs = weights[alive], means[alive], covs[alive]
            weights = weights / weights.sum()
    # Aligned corpora give near-singular fitted covariances; regularize
    # the finished fit, not the EM iterates.
    covs = covs + COVARIANCE_BIAS * np.eye(3)
    return PairwiseGmm(weights, means, covs, delta_r)
