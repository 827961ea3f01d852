"""Template-to-map fitting.

Stage one anchors a template on a pair of detected keypoints of
different types and solves for pose, scale, and shape under quadratic
regularization. Stage two refines all keypoints against the map stack
directly, optionally with a Max-Mixture relative-pose prior toward
already placed objects.

Parameter vector layout everywhere: [t_x, t_z, theta, s, p_1 .. p_k].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import scene_stats, solver
from .geometry import MIN_PROJECTION_DEPTH, Camera, PlacementParams, rot2, wrap_angle
from .keypoint_maps import KeypointLocations, KeypointMapStack, _sample_batch
from .scene_stats import PairwiseGmm
from .template import TemplateModel

AZIMUTH_SEEDS = tuple(i * math.pi / 4.0 for i in range(8))
ALPHA_1 = 1.0
ALPHA_2 = 1.0
_FALLBACK_DEPTH = 4.0
_SQRT_HALF = math.sqrt(0.5)


@dataclass(frozen=True)
class AnchorPair:
    """Two detected keypoints of distinct types that seed one fit."""

    type_u: int
    pos_u: np.ndarray
    type_v: int
    pos_v: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "pos_u", np.asarray(self.pos_u, dtype=float).reshape(2))
        object.__setattr__(self, "pos_v", np.asarray(self.pos_v, dtype=float).reshape(2))
        if self.type_u == self.type_v:
            raise ValueError("anchor keypoints must have distinct types")


@dataclass(frozen=True)
class Prior:
    """Relative-pose pull toward fixed objects within delta_r."""

    gmm: PairwiseGmm
    fixed: np.ndarray  # (F, 3) rows (t_x, t_z, theta)
    delta_r: float

    def __post_init__(self):
        object.__setattr__(self, "fixed", np.asarray(self.fixed, dtype=float).reshape(-1, 3))


@dataclass
class FitProblem:
    camera: Camera
    template: TemplateModel
    anchor: AnchorPair = None
    maps: KeypointMapStack = None
    alpha1: float = ALPHA_1
    alpha2: float = ALPHA_2
    prior: Prior = None


@dataclass
class FitResult:
    params: PlacementParams
    residual: float
    converged: bool
    iterations: int
    map_mean: float = float("nan")


def propose_pairs(locations: KeypointLocations, max_cell_distance: float = None):
    """All cross-type anchor pairs, optionally pruned by map distance.

    Every combination of detections from two different types yields one
    pair; detections of the same type are never paired together. Order
    is deterministic: by type pair, then detection indices.
    """
    pairs = []
    for ti in range(locations.n_types):
        for tj in range(ti + 1, locations.n_types):
            for pu in locations.positions[ti]:
                for pv in locations.positions[tj]:
                    if max_cell_distance is not None:
                        if np.linalg.norm(pu - pv) > max_cell_distance:
                            continue
                    pairs.append(AnchorPair(ti, pu, tj, pv))
    return pairs


class _Engine:
    """Precomputed camera/template constants for batched reprojection."""

    def __init__(self, camera: Camera, template: TemplateModel):
        self.camera = camera
        self.rc = camera.rotation
        self.pos = camera.position
        self.f = camera.focal_length
        self.cx = 0.5 * camera.image_size[0]
        self.cy = 0.5 * camera.image_size[1]
        self.sx, self.sy = camera.scale_factors()
        self.mean_pts = template.mean.reshape(-1, 3)
        self.modes = template.eigenvectors.reshape(template.k, -1, 3)
        self.k = template.k
        self.n_dim = 4 + template.k

    def _world_points(self, x, types):
        p = x[:, 4:]
        s = x[:, 3]
        theta = x[:, 2]
        mean_sel = self.mean_pts[types]
        modes_sel = self.modes[:, types, :]
        kpts = mean_sel + np.einsum("bk,kbmi->bmi", p, modes_sel)
        c, sn = np.cos(theta), np.sin(theta)
        zero = np.zeros_like(c)
        one = np.ones_like(c)
        rup = np.stack([
            np.stack([c, zero, sn], axis=-1),
            np.stack([zero, one, zero], axis=-1),
            np.stack([-sn, zero, c], axis=-1),
        ], axis=1)
        sk = s[:, None, None] * kpts
        t3 = np.stack([x[:, 0], np.zeros(len(x)), x[:, 1]], axis=-1)
        world = np.einsum("bij,bmj->bmi", rup, sk) + t3[:, None, :]
        return world, kpts, rup, c, sn

    def project(self, x, types):
        """Map coordinates (B, M, 2) and a per-problem validity flag."""
        world, _, _, _, _ = self._world_points(x, types)
        cam = np.einsum("ij,bmj->bmi", self.rc, world - self.pos)
        depth = cam[..., 2]
        valid = np.all(depth > MIN_PROJECTION_DEPTH, axis=1)
        dz = np.where(depth > MIN_PROJECTION_DEPTH, depth, 1.0)
        u = (self.cx + self.f * cam[..., 0] / dz) * self.sx
        v = (self.cy + self.f * cam[..., 1] / dz) * self.sy
        return np.stack([u, v], axis=-1), valid

    def project_jac(self, x, types):
        """Projection plus its Jacobian (B, M, 2, n_dim)."""
        world, kpts, rup, c, sn = self._world_points(x, types)
        b, m = world.shape[0], world.shape[1]
        s = x[:, 3]
        cam = np.einsum("ij,bmj->bmi", self.rc, world - self.pos)
        depth = cam[..., 2]
        valid = np.all(depth > MIN_PROJECTION_DEPTH, axis=1)
        dz = np.where(depth > MIN_PROJECTION_DEPTH, depth, 1.0)

        zero = np.zeros_like(c)
        drup = np.stack([
            np.stack([-sn, zero, c], axis=-1),
            np.stack([zero, zero, zero], axis=-1),
            np.stack([-c, zero, -sn], axis=-1),
        ], axis=1)

        dw = np.zeros((b, m, 3, self.n_dim))
        dw[:, :, 0, 0] = 1.0
        dw[:, :, 2, 1] = 1.0
        sk = s[:, None, None] * kpts
        dw[:, :, :, 2] = np.einsum("bij,bmj->bmi", drup, sk)
        dw[:, :, :, 3] = np.einsum("bij,bmj->bmi", rup, kpts)
        modes_sel = self.modes[:, types, :]
        dw[:, :, :, 4:] = np.einsum("bij,kbmj->bmik", rup, s[None, :, None, None] * modes_sel)

        dcam = np.einsum("ij,bmjn->bmin", self.rc, dw)
        cx_, cy_ = cam[..., 0], cam[..., 1]
        ju = self.sx * self.f * (dcam[:, :, 0, :] * dz[..., None] - cx_[..., None] * dcam[:, :, 2, :]) / (dz ** 2)[..., None]
        jv = self.sy * self.f * (dcam[:, :, 1, :] * dz[..., None] - cy_[..., None] * dcam[:, :, 2, :]) / (dz ** 2)[..., None]
        u = (self.cx + self.f * cx_ / dz) * self.sx
        v = (self.cy + self.f * cy_ / dz) * self.sy
        return np.stack([u, v], axis=-1), np.stack([ju, jv], axis=2), valid


def _reg_rows(x, alpha1, alpha2):
    s = x[:, 3]
    p = x[:, 4:]
    return np.concatenate([
        (math.sqrt(alpha1) * (s - 1.0))[:, None],
        math.sqrt(alpha2) * p,
    ], axis=1)


def _reg_jac(b, n_dim, alpha1, alpha2):
    k = n_dim - 4
    j = np.zeros((b, 1 + k, n_dim))
    j[:, 0, 3] = math.sqrt(alpha1)
    j[:, 1:, 4:] = math.sqrt(alpha2) * np.eye(k)
    return j


class _PriorTerm:
    """Max-Mixture rows for a fixed active set of placed objects.

    Component selection happens afresh at every evaluation point; the
    selected component contributes scaled whitened residual rows (so
    that ||rows||^2 equals half the Mahalanobis quadratic) plus the
    component's -log(w eta) as an additive objective constant.
    """

    def __init__(self, prior: Prior, active: np.ndarray):
        gmm = prior.gmm
        self.fixed = prior.fixed
        self.active = active.astype(float)  # (B, F)
        self.rot = np.stack([rot2(-th) for th in prior.fixed[:, 2]])  # (F, 2, 2)
        self.mu = gmm.means
        self.prec = np.stack([np.linalg.inv(c) for c in gmm.covariances])
        self.whiten = np.stack([np.linalg.inv(np.linalg.cholesky(c)) for c in gmm.covariances])
        etas = gmm.component_etas()
        self.nll_const = -np.log(gmm.weights * etas)
        self.n_fixed = len(prior.fixed)

    def _delta(self, x, idx):
        t = x[:, :2]
        d = t[:, None, :] - self.fixed[None, :, :2]
        dt = np.einsum("fij,bfj->bfi", self.rot, d)
        dth = wrap_angle(x[:, 2][:, None] - self.fixed[None, :, 2])
        return np.concatenate([dt, dth[..., None]], axis=2)  # (B, F, 3)

    def _select(self, delta):
        y = delta[:, :, None, :] - self.mu[None, None, :, :]  # (B, F, K, 3)
        y = y.copy()
        y[..., 2] = wrap_angle(y[..., 2])
        quad = 0.5 * np.einsum("bfki,kij,bfkj->bfk", y, self.prec, y)
        scores = quad + self.nll_const[None, None, :]
        kstar = np.argmin(scores, axis=2)  # (B, F)
        take = np.take_along_axis(y, kstar[..., None, None], axis=2)[:, :, 0, :]
        return kstar, take

    def residual_rows(self, x, idx):
        act = self.active[idx]
        delta = self._delta(x, idx)
        scene_stats._EVALUATIONS[0] += int(np.sum(act > 0))
        kstar, y = self._select(delta)
        w = self.whiten[kstar]  # (B, F, 3, 3)
        rows = _SQRT_HALF * np.einsum("bfij,bfj->bfi", w, y)
        rows = rows * act[..., None]
        const = np.sum(self.nll_const[kstar] * act, axis=1)
        return rows.reshape(len(x), -1), const

    def jacobian_rows(self, x, idx, n_dim):
        act = self.active[idx]
        delta = self._delta(x, idx)
        kstar, _ = self._select(delta)
        d = np.zeros((self.n_fixed, 3, n_dim))
        d[:, 0:2, 0] = self.rot[:, :, 0]
        d[:, 0:2, 1] = self.rot[:, :, 1]
        d[:, 2, 2] = 1.0
        w = self.whiten[kstar]
        rows = _SQRT_HALF * np.einsum("bfij,fjn->bfin", w, d)
        rows = rows * act[..., None, None]
        return rows.reshape(len(x), 3 * self.n_fixed, n_dim)


def make_stage1_functions(camera, template, anchor: AnchorPair,
                          alpha1: float = ALPHA_1, alpha2: float = ALPHA_2):
    """Single-problem residual and Jacobian callables for stage one.

    Residual layout: 4 reprojection rows, then sqrt(alpha1) (s - 1),
    then sqrt(alpha2) p. Infeasible points yield NaN residuals.
    """
    eng = _Engine(camera, template)
    types = np.array([[anchor.type_u, anchor.type_v]])
    obs = np.stack([anchor.pos_u, anchor.pos_v])[None]

    def residual(x):
        z, valid = eng.project(x.reshape(1, -1), types)
        r = np.concatenate([(z - obs).reshape(1, 4), _reg_rows(x.reshape(1, -1), alpha1, alpha2)], axis=1)
        if not valid[0]:
            r[:] = np.nan
        return r[0]

    def jacobian(x):
        _, jz, _ = eng.project_jac(x.reshape(1, -1), types)
        return np.concatenate([jz.reshape(1, 4, eng.n_dim), _reg_jac(1, eng.n_dim, alpha1, alpha2)], axis=1)[0]

    return residual, jacobian


def make_stage2_functions(camera, template, maps: KeypointMapStack,
                          alpha1: float = ALPHA_1, alpha2: float = ALPHA_2,
                          prior: Prior = None, init_translation=None):
    """Single-problem residual/Jacobian callables for stage two.

    When a prior is given, its active fixed set is decided by distance
    from init_translation and then held for the whole solve. Returns
    (residual_fn, jacobian_fn, const_fn) where const_fn(x) is the
    additive objective constant of the selected mixture components.
    """
    eng = _Engine(camera, template)
    n = template.n_keypoints
    types = np.arange(n)[None, :]
    term = None
    if prior is not None and len(prior.fixed):
        if init_translation is None:
            raise ValueError("prior requires init_translation to fix its active set")
        dist = np.linalg.norm(prior.fixed[:, :2] - np.asarray(init_translation)[None, :], axis=1)
        active = (dist <= prior.delta_r)[None, :]
        term = _PriorTerm(prior, active)

    def residual(x):
        xb = x.reshape(1, -1)
        z, valid = eng.project(xb, types)
        m, _ = _sample_batch(maps.channels, types, z)
        parts = [1.0 - m, _reg_rows(xb, alpha1, alpha2)]
        if term is not None:
            rows, _ = term.residual_rows(xb, np.array([0]))
            parts.append(rows)
        r = np.concatenate(parts, axis=1)
        if not valid[0]:
            r[:] = np.nan
        return r[0]

    def jacobian(x):
        xb = x.reshape(1, -1)
        z, jz, _ = eng.project_jac(xb, types)
        _, grad = _sample_batch(maps.channels, types, z)
        jmap = -np.einsum("bmi,bmin->bmn", grad, jz)
        parts = [jmap, _reg_jac(1, eng.n_dim, alpha1, alpha2)]
        if term is not None:
            parts.append(term.jacobian_rows(xb, np.array([0]), eng.n_dim))
        return np.concatenate(parts, axis=1)[0]

    def const(x):
        if term is None:
            return 0.0
        _, c = term.residual_rows(x.reshape(1, -1), np.array([0]))
        return float(c[0])

    return residual, jacobian, const


def _backproject_init(camera: Camera, pos_map, height: float):
    """Ground-frame point where the pixel ray reaches a given height."""
    sx, sy = camera.scale_factors()
    u = pos_map[0] / sx - 0.5 * camera.image_size[0]
    v = pos_map[1] / sy - 0.5 * camera.image_size[1]
    dir_cam = np.array([u / camera.focal_length, v / camera.focal_length, 1.0])
    dir_world = camera.rotation.T @ dir_cam
    dy = dir_world[1]
    t_ray = (height - camera.position[1]) / dy if abs(dy) > 1e-9 else -1.0
    if not (t_ray > 0.1):
        t_ray = _FALLBACK_DEPTH / np.linalg.norm(dir_world)
    return camera.position + t_ray * dir_world


def fit_initial_batch(camera: Camera, template: TemplateModel, anchors,
                      alpha1: float = ALPHA_1, alpha2: float = ALPHA_2):
    """Stage-one fits for many anchor pairs at once.

    Each pair is solved from 8 azimuth seeds; the lowest-objective seed
    wins. Returns (params (P, 4+k), objective (P,), converged (P,),
    iterations (P,)) with objective in the plain sum-of-squares
    convention (inf when every seed failed).
    """
    eng = _Engine(camera, template)
    n_dim = eng.n_dim
    n_pairs = len(anchors)
    n_seeds = len(AZIMUTH_SEEDS)
    if n_pairs == 0:
        return (np.zeros((0, n_dim)), np.zeros(0), np.zeros(0, dtype=bool), np.zeros(0, dtype=int))

    types = np.zeros((n_pairs * n_seeds, 2), dtype=int)
    obs = np.zeros((n_pairs * n_seeds, 2, 2))
    x0 = np.zeros((n_pairs * n_seeds, n_dim))
    for i, a in enumerate(anchors):
        h = eng.mean_pts[a.type_u][1]
        ground = _backproject_init(camera, a.pos_u, h)
        for j, theta in enumerate(AZIMUTH_SEEDS):
            row = i * n_seeds + j
            types[row] = (a.type_u, a.type_v)
            obs[row, 0] = a.pos_u
            obs[row, 1] = a.pos_v
            rk = (math.cos(theta) * eng.mean_pts[a.type_u][0]
                  + math.sin(theta) * eng.mean_pts[a.type_u][2])
            rkz = (-math.sin(theta) * eng.mean_pts[a.type_u][0]
                   + math.cos(theta) * eng.mean_pts[a.type_u][2])
            x0[row, 0] = ground[0] - rk
            x0[row, 1] = ground[2] - rkz
            x0[row, 2] = theta
            x0[row, 3] = 1.0

    def rfn(xs, idx):
        z, valid = eng.project(xs, types[idx])
        r = np.concatenate([(z - obs[idx]).reshape(len(xs), 4),
                            _reg_rows(xs, alpha1, alpha2)], axis=1)
        return r, np.zeros(len(xs)), valid

    def jfn(xs, idx):
        _, jz, _ = eng.project_jac(xs, types[idx])
        return np.concatenate([jz.reshape(len(xs), 4, n_dim),
                               _reg_jac(len(xs), n_dim, alpha1, alpha2)], axis=1)

    x, f, conv, iters = solver.lm_batch(rfn, jfn, x0)
    plain = np.where(np.isfinite(f), 2.0 * f, np.inf)

    plain_by_pair = plain.reshape(n_pairs, n_seeds)
    best = np.argmin(plain_by_pair, axis=1)
    rows = np.arange(n_pairs) * n_seeds + best
    return x[rows], plain[rows], conv[rows], iters[rows]


def fit_refine_batch(camera: Camera, template: TemplateModel, maps: KeypointMapStack,
                     inits: np.ndarray, alpha1: float = ALPHA_1, alpha2: float = ALPHA_2,
                     prior: Prior = None):
    """Stage-two refinement of many candidates against the map stack.

    Returns (params (B, n), objective (B,), converged (B,),
    iterations (B,), map_mean (B,)). Objective is the plain sum
    including regularizers and, when a prior applies, the full
    Max-Mixture negative log-likelihood of the selected components.
    """
    eng = _Engine(camera, template)
    n_dim = eng.n_dim
    inits = np.asarray(inits, dtype=float).reshape(-1, n_dim)
    b = len(inits)
    if b == 0:
        z = np.zeros(0)
        return np.zeros((0, n_dim)), z, z.astype(bool), z.astype(int), z
    n = template.n_keypoints
    types = np.broadcast_to(np.arange(n), (b, n))

    term = None
    if prior is not None and len(prior.fixed):
        dist = np.linalg.norm(inits[:, None, :2] - prior.fixed[None, :, :2], axis=2)
        term = _PriorTerm(prior, dist <= prior.delta_r)

    def rfn(xs, idx):
        z, valid = eng.project(xs, types[: len(xs)])
        m, _ = _sample_batch(maps.channels, types[: len(xs)], z)
        parts = [1.0 - m, _reg_rows(xs, alpha1, alpha2)]
        const = np.zeros(len(xs))
        if term is not None:
            rows, const = term.residual_rows(xs, idx)
            parts.append(rows)
        return np.concatenate(parts, axis=1), 0.5 * const, valid

    def jfn(xs, idx):
        z, jz, _ = eng.project_jac(xs, types[: len(xs)])
        _, grad = _sample_batch(maps.channels, types[: len(xs)], z)
        jmap = -np.einsum("bmi,bmin->bmn", grad, jz)
        parts = [jmap, _reg_jac(len(xs), n_dim, alpha1, alpha2)]
        if term is not None:
            parts.append(term.jacobian_rows(xs, idx, n_dim))
        return np.concatenate(parts, axis=1)

    x, f, conv, iters = solver.lm_batch(rfn, jfn, inits)
    plain = np.where(np.isfinite(f), 2.0 * f, np.inf)

    z, valid = eng.project(x, types)
    m, _ = _sample_batch(maps.channels, types, z)
    map_mean = np.where(valid, np.mean((1.0 - m) ** 2, axis=1), np.inf)
    return x, plain, conv, iters, map_mean


def _params_from_vector(x) -> PlacementParams:
    return PlacementParams(x[:2], x[2], max(x[3], 1e-9), x[4:])


def fit_initial(problem: FitProblem) -> FitResult:
    """Stage-one fit of one anchor pair (8 azimuth seeds, best kept)."""
    x, f, conv, iters = fit_initial_batch(problem.camera, problem.template,
                                          [problem.anchor], problem.alpha1, problem.alpha2)
    if not np.isfinite(f[0]):
        return FitResult(_params_from_vector(x[0]), float("inf"), False, int(iters[0]))
    return FitResult(_params_from_vector(x[0]), float(f[0]), bool(conv[0]), int(iters[0]))


def fit_refine(problem: FitProblem, init: PlacementParams) -> FitResult:
    """Stage-two map refinement from a stage-one result."""
    x, f, conv, iters, mm = fit_refine_batch(
        problem.camera, problem.template, problem.maps,
        init.as_vector()[None, :], problem.alpha1, problem.alpha2, problem.prior)
    if not np.isfinite(f[0]):
        return FitResult(init, float("inf"), False, int(iters[0]), float("inf"))
    return FitResult(_params_from_vector(x[0]), float(f[0]), bool(conv[0]),
                     int(iters[0]), float(mm[0]))
