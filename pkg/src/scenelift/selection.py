"""Candidate scoring and subset selection, plus the full inference loop.

Each accepted fit becomes a candidate with a unary energy measuring map
agreement. Pairs of nearby candidates carry co-occurrence energies from
the scene statistics, intersecting pairs are forbidden outright, and
the best candidate subset minimizes the resulting binary labeling
energy. Inference alternates fitting, selection, and prior-conditioned
refitting until no new object is accepted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .fitting import Prior, fit_initial_batch, fit_refine_batch, propose_pairs
from .geometry import (Camera, OrientedBox, PlacementParams, obb_intersects,
                       obb_iou_3d, place_keypoints, project_points, wrap_angle)
from .keypoint_maps import KeypointMapStack, extract_locations, render_maps
from .scene_stats import LOGIT_EPS, PairwiseGmm, density, relative_pose, pair_energy
from .scenes import Scene, SceneObject, object_box
from .template import TemplateModel, instantiate, nearest_model

DEDUPE_IOU = 0.7
DEDUPE_AZIMUTH = math.radians(15.0)
EXACT_SOLVE_LIMIT = 20
_SCALE_BOUNDS = (0.05, 20.0)
# Deform coefficients are bounded per mode at this many database standard
# deviations. The quadratic deform penalty alone is too weak to stop the
# optimizer from leaving the shape family entirely (e.g. flattening a
# chair until a 180-degree flip mirrors onto two neighbors' keypoints).
DEFORM_BOUND_SIGMA = 3.5
_CLAIM_RADIUS_CELLS = 2.0


class ZeroSupportError(ValueError):
    """A candidate's rendered keypoints have no on-grid support."""


_HYPER_FIELDS = ("tau_m", "tau_u", "alpha", "beta", "alpha1", "alpha2",
                 "max_iterations", "pair_distance_frac")


@dataclass
class Hyper:
    """Pipeline thresholds and weights.

    pair_distance_frac bounds anchor pairs to that fraction of the map
    width; pairs wider than any one object would be are never worth
    fitting. None disables the pruning.
    """

    tau_m: float = 0.25
    tau_u: float = 0.21
    alpha: float = 0.61
    beta: float = 0.14
    alpha1: float = 1.0
    alpha2: float = 1.0
    max_iterations: int = 4
    pair_distance_frac: float = 0.45

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in _HYPER_FIELDS}

    @classmethod
    def from_dict(cls, d: dict) -> "Hyper":
        return cls(**{k: d[k] for k in _HYPER_FIELDS if k in d})


@dataclass
class Candidate:
    params: PlacementParams
    fit_residual: float
    box: OrientedBox
    rendered_unary: float = None


@dataclass
class SelectionProblem:
    """Binary labeling energy over candidates.

    unary[i] may be +inf for candidates discarded during construction
    (zero support or collision with a fixed object); such variables are
    never selected. pairwise is a dict {(i, j): energy} with i < j, and
    forbidden a set of (i, j) pairs that cannot both be selected.
    """

    candidates: list
    unary: np.ndarray
    pairwise: dict
    forbidden: set

    def energy(self, selected) -> float:
        sel = sorted(selected)
        for a in range(len(sel)):
            for b in range(a + 1, len(sel)):
                if (sel[a], sel[b]) in self.forbidden:
                    return math.inf
        total = 0.0
        for i in sel:
            total += self.unary[i]
        for a in range(len(sel)):
            for b in range(a + 1, len(sel)):
                total += self.pairwise.get((sel[a], sel[b]), 0.0)
        return total


def _logit_energy(value: float) -> float:
    p = min(max(value, LOGIT_EPS), 1.0 - LOGIT_EPS)
    return -math.log(p / (1.0 - p))


def render_candidate_maps(candidate_params: PlacementParams, camera: Camera,
                          template: TemplateModel, sigma: float,
                          width: int, height: int) -> KeypointMapStack:
    """Render a candidate's keypoints exactly like ground-truth maps."""
    pts = place_keypoints(instantiate(template, candidate_params.deform), candidate_params)
    coords, ok = project_points(camera, pts)
    locs = [coords[i:i + 1] if ok[i] else np.zeros((0, 2)) for i in range(len(pts))]
    return render_maps(locs, sigma, width, height)


def unary_energy(candidate: Candidate, maps: KeypointMapStack, alpha: float,
                 camera: Camera, template: TemplateModel) -> float:
    """Map-agreement energy -logit(u^alpha).

    u compares the candidate's rendered map stack n against the input
    stack m as ||n (.) m||_F / ||n (.) n||_F over all channels, which
    ignores map support belonging to other objects. u is clamped before
    the logit since overlapping input lobes can push it past 1.
    """
    rendered = render_candidate_maps(candidate.params, camera, template,
                                     maps.sigma, maps.width, maps.height)
    n = rendered.channels.astype(np.float64)
    m = maps.channels.astype(np.float64)
    den = math.sqrt(float(np.sum((n * n) ** 2)))
    if den == 0.0:
        raise ZeroSupportError("candidate renders no on-grid keypoint support")
    num = math.sqrt(float(np.sum((n * m) ** 2)))
    return _logit_energy((num / den) ** alpha)


def build_problem(candidates, maps: KeypointMapStack, gmm: PairwiseGmm,
                  alpha: float, beta: float, fixed=(), *,
                  camera: Camera = None, template: TemplateModel = None) -> SelectionProblem:
    """Assemble the labeling energy for a candidate set.

    Unaries are the map-agreement energies; with fixed objects present,
    each candidate also pays/collects the co-occurrence term toward
    every fixed object within the statistics radius. Pairwise energies
    apply between candidates whose centers fall within that radius, and
    intersecting pairs (after the conservative shrink) are forbidden.
    Candidates that intersect a fixed object or have no rendered
    support get +inf unary.
    """
    fixed = list(fixed)
    boxes = [f.box for f in fixed]
    n = len(candidates)
    unary = np.zeros(n)
    delta_r = gmm.delta_r if gmm is not None else 1.5
    for i, cand in enumerate(candidates):
        try:
            if cand.rendered_unary is None:
                cand.rendered_unary = unary_energy(cand, maps, alpha, camera, template)
        except ZeroSupportError:
            unary[i] = math.inf
            continue
        unary[i] = cand.rendered_unary
        if any(obb_intersects(cand.box, fb) for fb in boxes):
            unary[i] = math.inf
            continue
        if gmm is not None:
            for fobj in fixed:
                if np.linalg.norm(cand.params.translation - fobj.params.translation) > delta_r:
                    continue
                rel = relative_pose(fobj.params.translation, fobj.params.azimuth,
                                    cand.params.translation, cand.params.azimuth)
                unary[i] += _logit_energy(density(gmm, rel) ** beta)

    pairwise = {}
    forbidden = set()
    for i in range(n):
        if not np.isfinite(unary[i]):
            continue
        for j in range(i + 1, n):
            if not np.isfinite(unary[j]):
                continue
            if obb_intersects(candidates[i].box, candidates[j].box):
                forbidden.add((i, j))
                continue
            if gmm is None:
                continue
            d = np.linalg.norm(candidates[i].params.translation - candidates[j].params.translation)
            if d <= delta_r:
                rel = relative_pose(candidates[i].params.translation, candidates[i].params.azimuth,
                                    candidates[j].params.translation, candidates[j].params.azimuth)
                pairwise[(i, j)] = pair_energy(gmm, rel, beta)
    return SelectionProblem(list(candidates), unary, pairwise, forbidden)


def _solve_exact(problem: SelectionProblem, order) -> list:
    """Depth-first branch and bound, select-first so ties keep low indices."""
    n = len(order)
    neg_pair = {}
    for (i, j), v in problem.pairwise.items():
        if v < 0:
            neg_pair.setdefault(i, []).append((j, v))
            neg_pair.setdefault(j, []).append((i, v))

    best_set = []
    best_energy = 0.0

    unary = problem.unary
    pairwise = problem.pairwise
    forbidden = problem.forbidden

    def bound(pos, selected):
        # Optimistic completion: undecided negative unaries plus every
        # still-available negative pairwise involving an undecided var.
        opt = 0.0
        undecided = order[pos:]
        avail = set(undecided) | set(selected)
        for i in undecided:
            opt += min(0.0, unary[i])
        seen = set()
        for i in undecided:
            for j, v in neg_pair.get(i, ()):
                key = (min(i, j), max(i, j))
                if key in seen or j not in avail:
                    continue
                seen.add(key)
                opt += v
        return opt

    def dfs(pos, selected, energy):
        nonlocal best_set, best_energy
        if energy + bound(pos, selected) > best_energy + 1e-12:
            return
        if pos == n:
            if energy < best_energy - 1e-15:
                exact = problem.energy(selected)
                if exact < best_energy:
                    best_energy = exact
                    best_set = list(selected)
            return
        i = order[pos]
        blocked = any((min(i, j), max(i, j)) in forbidden for j in selected)
        if not blocked and np.isfinite(unary[i]):
            delta = unary[i] + sum(pairwise.get((min(i, j), max(i, j)), 0.0) for j in selected)
            selected.append(i)
            dfs(pos + 1, selected, energy + delta)
            selected.pop()
        dfs(pos + 1, selected, energy)

    dfs(0, [], 0.0)
    return sorted(best_set)


def _solve_greedy(problem: SelectionProblem, order) -> list:
    unary = problem.unary
    pairwise = problem.pairwise
    forbidden = problem.forbidden

    def pair(i, j):
        return pairwise.get((min(i, j), max(i, j)), 0.0)

    def allowed(i, sel):
        return all((min(i, j), max(i, j)) not in forbidden for j in sel)

    selected = []
    while True:
        best_gain, best_i = -1e-12, None
        for i in order:
            if i in selected or not np.isfinite(unary[i]) or not allowed(i, selected):
                continue
            gain = unary[i] + sum(pair(i, j) for j in selected)
            if gain < best_gain:
                best_gain, best_i = gain, i
        if best_i is None:
            break
        selected.append(best_i)

    improved = True
    while improved:
        improved = False
        for i in order:  # single flips
            if i in selected:
                delta = -(unary[i] + sum(pair(i, j) for j in selected if j != i))
            else:
                if not np.isfinite(unary[i]) or not allowed(i, selected):
                    continue
                delta = unary[i] + sum(pair(i, j) for j in selected)
            if delta < -1e-12:
                if i in selected:
                    selected.remove(i)
                else:
                    selected.append(i)
                improved = True
        for a in list(selected):  # swaps
            for b in order:
                if b in selected or not np.isfinite(unary[b]):
                    continue
                rest = [j for j in selected if j != a]
                if not allowed(b, rest):
                    continue
                delta = (unary[b] + sum(pair(b, j) for j in rest)
                         - unary[a] - sum(pair(a, j) for j in rest))
                if delta < -1e-12:
                    selected.remove(a)
                    selected.append(b)
                    improved = True
                    break
    return sorted(selected)


def solve(problem: SelectionProblem) -> list:
    """Minimize the labeling energy; exact for small problems.

    Up to 20 selectable candidates are solved by branch and bound,
    larger problems by greedy insertion refined with single flips and
    swaps. The empty set is always a feasible baseline, so the returned
    energy never exceeds zero. Ties prefer lower candidate indices.
    """
    order = [i for i in range(len(problem.candidates)) if np.isfinite(problem.unary[i])]
    if len(order) <= EXACT_SOLVE_LIMIT:
        return _solve_exact(problem, order)
    return _solve_greedy(problem, order)


def dedupe_candidates(cands: list) -> list:
    """Merge near-duplicates, keeping the lower-residual member.

    Two candidates duplicate one another when their boxes overlap with
    IoU above 0.7 and their azimuths differ by less than 15 degrees.
    """
    ranked = sorted(range(len(cands)), key=lambda i: (cands[i].fit_residual, i))
    kept = []
    for i in ranked:
        dup = False
        for j in kept:
            if abs(wrap_angle(cands[i].params.azimuth - cands[j].params.azimuth)) < DEDUPE_AZIMUTH \
                    and obb_iou_3d(cands[i].box, cands[j].box) > DEDUPE_IOU:
                dup = True
                break
        if not dup:
            kept.append(i)
    return [cands[i] for i in sorted(kept)]


def _dedupe_stage1(params: np.ndarray, objectives: np.ndarray):
    """Collapse stage-one results that would refine identically.

    Buckets poses on a fine grid (2 cm, 2 degrees, 2% scale) and keeps
    the best objective per bucket; purely a cost saver ahead of the
    expensive map refinement.
    """
    buckets = {}
    for i in range(len(params)):
        if not np.isfinite(objectives[i]):
            continue
        x = params[i]
        key = (round(x[0] / 0.02), round(x[1] / 0.02),
               round(wrap_angle(x[2]) / math.radians(2.0)), round(x[3] / 0.02))
        cur = buckets.get(key)
        if cur is None or objectives[i] < objectives[cur]:
            buckets[key] = i
    return sorted(buckets.values())


def _deform_in_family(deform: np.ndarray, limits: np.ndarray) -> bool:
    return bool(np.all(np.abs(deform) <= limits))


def _claimed_mask(locations, fixed, camera, template, radius=_CLAIM_RADIUS_CELLS):
    """Per-type boolean lists marking detections explained by fixed objects."""
    claimed = [np.zeros(len(p), dtype=bool) for p in locations.positions]
    for fobj in fixed:
        pts = place_keypoints(instantiate(template, fobj.params.deform), fobj.params)
        coords, ok = project_points(camera, pts)
        for t in range(min(len(pts), len(claimed))):
            if not ok[t] or len(locations.positions[t]) == 0:
                continue
            d = np.linalg.norm(locations.positions[t] - coords[t], axis=1)
            claimed[t] |= d <= radius
    return claimed


def infer_scene(maps: KeypointMapStack, camera: Camera, template: TemplateModel,
                gmm: PairwiseGmm = None, hyper: Hyper = None, *,
                use_pairwise: bool = True, trace=None) -> Scene:
    """Recover a scene from a keypoint map stack.

    Iterates candidate fitting, subset selection, and prior-conditioned
    refitting. Newly selected objects become fixed; fixed objects are
    never removed. Terminates when an iteration adds nothing or after
    hyper.max_iterations. With use_pairwise False the statistics model
    is never consulted (no pairwise energies, no fitting prior).
    """
    hyper = hyper or Hyper()
    if maps.n_types != template.n_keypoints:
        raise ValueError(f"map stack has {maps.n_types} channels, template expects {template.n_keypoints}")
    stats = gmm if use_pairwise else None
    delta_r = stats.delta_r if stats is not None else 1.5
    deform_limits = DEFORM_BOUND_SIGMA * np.sqrt(np.maximum(template.eigenvalues, 0.0))
    locations = extract_locations(maps, hyper.tau_m)

    fixed = []
    iterations_used = 0
    for iteration in range(hyper.max_iterations):
        iterations_used = iteration + 1
        if fixed:
            claimed = _claimed_mask(locations, fixed, camera, template)
        else:
            claimed = [np.zeros(len(p), dtype=bool) for p in locations.positions]

        max_dist = (hyper.pair_distance_frac * max(maps.width, maps.height)
                    if hyper.pair_distance_frac else None)
        pairs = []
        for pr in propose_pairs(locations, max_dist):
            iu = _loc_index(locations, pr.type_u, pr.pos_u)
            iv = _loc_index(locations, pr.type_v, pr.pos_v)
            if claimed[pr.type_u][iu] and claimed[pr.type_v][iv]:
                continue
            pairs.append(pr)
        if not pairs:
            break

        x1, f1, _, _ = fit_initial_batch(camera, template, pairs, hyper.alpha1, hyper.alpha2)
        keep = _dedupe_stage1(x1, f1)
        keep = [i for i in keep
                if _SCALE_BOUNDS[0] < x1[i][3] < _SCALE_BOUNDS[1]
                and _deform_in_family(x1[i][4:], deform_limits)]
        if not keep:
            break
        inits = x1[keep]

        prior = None
        if stats is not None and fixed:
            fx = np.array([[f.params.translation[0], f.params.translation[1], f.params.azimuth]
                           for f in fixed])
            prior = Prior(stats, fx, delta_r)
        x2, f2, conv2, _, _ = fit_refine_batch(camera, template, maps, inits,
                                               hyper.alpha1, hyper.alpha2, prior)

        cands = []
        n_k = template.n_keypoints
        for i in range(len(x2)):
            if not (np.isfinite(f2[i]) and conv2[i]):
                continue
            if not (_SCALE_BOUNDS[0] < x2[i][3] < _SCALE_BOUNDS[1]):
                continue
            if not _deform_in_family(x2[i][4:], deform_limits):
                continue
            if f2[i] / n_k >= hyper.tau_u:
                continue
            params = PlacementParams(x2[i][:2], x2[i][2], x2[i][3], x2[i][4:])
            cands.append(Candidate(params, float(f2[i]), object_box(template, params)))
        if trace is not None:
            trace.append({"iteration": iteration + 1, "pairs": len(pairs),
                          "refined": len(x2), "accepted": len(cands)})
        if not cands:
            break
        cands = dedupe_candidates(cands)

        problem = build_problem(cands, maps, stats, hyper.alpha, hyper.beta, fixed,
                                camera=camera, template=template)
        chosen = solve(problem)
        if not chosen:
            break
        for i in chosen:
            fixed.append(SceneObject(cands[i].params,
                                     nearest_model(template, cands[i].params.deform),
                                     cands[i].box))

    return Scene(list(fixed), camera, iterations_used=iterations_used)


def _loc_index(locations, type_idx, pos):
    d = np.linalg.norm(locations.positions[type_idx] - pos, axis=1)
    return int(np.argmin(d))
