"""Damped least-squares minimization.

The public entry point is `lm_minimize`, a plain Levenberg-Marquardt
loop over a single problem. Internally the same engine runs many
problems in lockstep (`lm_batch`); each problem keeps its own damping
and stopping state, so batching changes nothing about the per-problem
trajectory.

Objective convention: 0.5 * ||r||^2 plus an optional additive constant
supplied by the residual callback (used for prior terms whose selected
component carries a normalization offset).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAX_ITERATIONS = 100
STEP_TOL = 1e-8
GRAD_TOL = 1e-10
LAMBDA_INIT = 1e-3
LAMBDA_MIN = 1e-12
LAMBDA_MAX = 1e15


@dataclass
class LMResult:
    x: np.ndarray
    objective: float
    converged: bool
    iterations: int


def lm_batch(residual_fn, jacobian_fn, x0: np.ndarray, *,
             max_iterations: int = MAX_ITERATIONS, step_tol: float = STEP_TOL,
             grad_tol: float = GRAD_TOL, lam0: float = LAMBDA_INIT,
             trace=None):
    """Run independent LM problems in lockstep.

    residual_fn(X, idx) -> (R (b, m), const (b,), valid (b,)) evaluated
    at rows X for the problems listed in idx. jacobian_fn(X, idx) ->
    J (b, m, n). Problems whose initial evaluation is invalid finish
    immediately as non-converged with infinite objective.

    Returns (X, objective (B,), converged (B,) bool, iterations (B,)).
    Damping: x10 on a rejected step, /10 on an accepted one.
    """
    x = np.array(x0, dtype=float)
    n_prob, n_dim = x.shape
    all_idx = np.arange(n_prob)

    r, const, valid = residual_fn(x, all_idx)
    f = 0.5 * np.sum(r * r, axis=1) + const
    bad = ~valid | ~np.isfinite(f)
    f = np.where(bad, np.inf, f)

    jac = np.zeros((n_prob, r.shape[1], n_dim))
    if np.any(~bad):
        jac[~bad] = jacobian_fn(x[~bad], all_idx[~bad])

    lam = np.full(n_prob, lam0)
    done = bad.copy()
    converged = np.zeros(n_prob, dtype=bool)
    iters = np.zeros(n_prob, dtype=int)
    eye = np.eye(n_dim)

    for _ in range(max_iterations):
        active = np.flatnonzero(~done)
        if active.size == 0:
            break
        ja = jac[active]
        ra = r[active]
        g = np.einsum("bmn,bm->bn", ja, ra)
        gnorm = np.linalg.norm(g, axis=1)
        hit_grad = gnorm < grad_tol
        if np.any(hit_grad):
            ids = active[hit_grad]
            done[ids] = True
            converged[ids] = True
            active = active[~hit_grad]
            if active.size == 0:
                continue
            ja, ra, g = ja[~hit_grad], ra[~hit_grad], g[~hit_grad]
        h = np.einsum("bmn,bmk->bnk", ja, ja)
        h = h + lam[active][:, None, None] * eye
        try:
            step = np.linalg.solve(h, -g[..., None])[..., 0]
        except np.linalg.LinAlgError:
            # Exceedingly rare; bump damping everywhere still active.
            lam[active] = np.minimum(lam[active] * 10.0, LAMBDA_MAX)
            iters[active] += 1
            continue
        snorm = np.linalg.norm(step, axis=1)
        hit_step = snorm < step_tol
        if np.any(hit_step):
            ids = active[hit_step]
            done[ids] = True
            converged[ids] = True
            active = active[~hit_step]
            if active.size == 0:
                continue
            step = step[~hit_step]
        iters[active] += 1
        x_trial = x[active] + step
        r_t, c_t, v_t = residual_fn(x_trial, active)
        f_t = 0.5 * np.sum(r_t * r_t, axis=1) + c_t
        accept = v_t & np.isfinite(f_t) & (f_t < f[active])
        acc_ids = active[accept]
        if acc_ids.size:
            x[acc_ids] = x_trial[accept]
            r[acc_ids] = r_t[accept]
            f[acc_ids] = f_t[accept]
            lam[acc_ids] = np.maximum(lam[acc_ids] / 10.0, LAMBDA_MIN)
            jac[acc_ids] = jacobian_fn(x[acc_ids], acc_ids)
            if trace is not None:
                for i, pid in enumerate(acc_ids):
                    trace.append({"problem": int(pid), "iteration": int(iters[pid]),
                                  "objective": float(f[pid])})
        rej_ids = active[~accept]
        if rej_ids.size:
            lam[rej_ids] = lam[rej_ids] * 10.0
            overflow = rej_ids[lam[rej_ids] > LAMBDA_MAX]
            if overflow.size:
                done[overflow] = True

    return x, f, converged, iters


def lm_minimize(residual_fn, jacobian_fn, x0, *, max_iterations: int = MAX_ITERATIONS,
                step_tol: float = STEP_TOL, grad_tol: float = GRAD_TOL,
                lam0: float = LAMBDA_INIT, trace=None) -> LMResult:
    """Minimize 0.5 * ||residual_fn(x)||^2 starting from x0.

    Stops when the proposed step norm drops below step_tol, the
    gradient norm below grad_tol, or after max_iterations. Raises
    ValueError when the initial residual is not finite.
    """
    x0 = np.asarray(x0, dtype=float).reshape(1, -1)

    def rfn(xs, _idx):
        out = np.stack([np.asarray(residual_fn(row), dtype=float) for row in xs])
        valid = np.isfinite(out).all(axis=1)
        return np.where(np.isfinite(out), out, 0.0), np.zeros(len(xs)), valid

    def jfn(xs, _idx):
        return np.stack([np.asarray(jacobian_fn(row), dtype=float) for row in xs])

    r0 = np.asarray(residual_fn(x0[0]), dtype=float)
    if not np.all(np.isfinite(r0)):
        raise ValueError("residual is not finite at the initial point")

    x, f, conv, iters = lm_batch(rfn, jfn, x0, max_iterations=max_iterations,
                                 step_tol=step_tol, grad_tol=grad_tol, lam0=lam0,
                                 trace=trace)
    return LMResult(x[0], float(f[0]), bool(conv[0]), int(iters[0]))
