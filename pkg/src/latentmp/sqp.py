"""Maximize a smooth objective under a single scalar inequality constraint.

Sequential quadratic programming specialized to one constraint: a damped
BFGS model of the Lagrangian, a closed-form QP step (the single multiplier
makes the active-set decision a scalar test), a backtracking line search
on an l1 merit function with a second-order correction against the
Maratos effect, and a final restoration polish so the returned point
never violates the constraint beyond a slack proportional to the bound.
Deterministic: identical problems give identical reports.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

Status = str  # one of "converged", "max_iter", "failed"


@dataclass
class NlpProblem:
    """maximize objective(x) subject to constraint(x) <= bound, from x0.

    Both callables return (value, gradient) and must be deterministic and
    finite on finite inputs.
    """

    dim: int
    objective: Callable[[np.ndarray], tuple[float, np.ndarray]]
    constraint: Callable[[np.ndarray], tuple[float, np.ndarray]]
    bound: float
    x0: np.ndarray


@dataclass
class SolveOptions:
    max_iters: int = 200
    kkt_tol: float = 1e-6
    step_tol: float = 1e-10
    feas_rel: float = 1e-9
    max_backtracks: int = 40
    armijo: float = 1e-4
    verbose: bool = False


@dataclass
class SolveReport:
    x_star: np.ndarray
    iterations: int
    kkt_residual: float
    status: Status
    multiplier: float = 0.0
    objective_value: float = np.nan
    constraint_value: float = np.nan
    message: str = ""


def _qp_step(B: np.ndarray, g_phi: np.ndarray, gc: np.ndarray, c0: float):
    """Minimize 0.5 d'Bd + g_phi'd s.t. c0 + gc'd <= 0; scalar multiplier."""
    try:
        Binv_g = np.linalg.solve(B, g_phi)
        Binv_gc = np.linalg.solve(B, gc)
    except np.linalg.LinAlgError:
        Binv_g, Binv_gc = g_phi.copy(), gc.copy()
    d = -Binv_g
    lam = 0.0
    if float(gc @ gc) > 1e-300 and c0 + gc @ d > 0.0:
        denom = float(gc @ Binv_gc)
        lam = (c0 - float(gc @ Binv_g)) / denom
        if lam > 0.0:
            d = -(Binv_g + lam * Binv_gc)
        else:
            lam = 0.0
    return d, lam


def _kkt_residual(gf, gc, lam, violation):
    """Stationarity + feasibility + complementarity, scaled by gradient size."""
    stat = np.max(np.abs(-gf + lam * gc)) / (1.0 + np.max(np.abs(gf)))
    return max(stat, max(violation, 0.0), abs(lam * violation))


def solve(problem: NlpProblem, opts: SolveOptions | None = None) -> SolveReport:
    opts = opts or SolveOptions()
    x = np.asarray(problem.x0, dtype=float).copy()
    if x.shape != (problem.dim,) or not np.all(np.isfinite(x)):
        return SolveReport(x, 0, np.inf, "failed", message="bad start point")

    def evaluate(xv):
        f, gf = problem.objective(xv)
        c, gc = problem.constraint(xv)
        gf = np.asarray(gf, dtype=float)
        gc = np.asarray(gc, dtype=float)
        ok = (np.isfinite(f) and np.isfinite(c)
              and np.all(np.isfinite(gf)) and np.all(np.isfinite(gc)))
        return float(f), gf, float(c), gc, ok

    def restore(x, f, gf, c, gc, target):
        """Newton steps on the constraint until c - bound <= target."""
        for _ in range(50):
            viol = c - problem.bound
            if viol <= target:
                return x, f, gf, c, gc, True
            gnorm2 = float(gc @ gc)
            if gnorm2 < 1e-300:
                return x, f, gf, c, gc, False
            step = -(viol / gnorm2) * gc
            alpha, moved = 1.0, False
            for _ in range(opts.max_backtracks):
                f2, gf2, c2, gc2, ok = evaluate(x + alpha * step)
                if ok and c2 - problem.bound < viol:
                    x, f, gf, c, gc = x + alpha * step, f2, gf2, c2, gc2
                    moved = True
                    break
                alpha *= 0.5
            if not moved:
                return x, f, gf, c, gc, False
        return x, f, gf, c, gc, c - problem.bound <= target

    f, gf, c, gc, ok = evaluate(x)
    if not ok:
        return SolveReport(x, 0, np.inf, "failed", message="non-finite at start")

    feas_slack = opts.feas_rel * abs(problem.bound)

    if c - problem.bound > feas_slack:
        x, f, gf, c, gc, restored = restore(x, f, gf, c, gc, feas_slack)
        if not restored:
            return SolveReport(x, 0, np.inf, "failed",
                               message="could not restore feasibility at start")

    n = problem.dim
    B = np.eye(n)
    mu_pen = 1.0
    iterations = 0
    stalled = False

    for it in range(1, opts.max_iters + 1):
        iterations = it
        g_phi = -gf                      # minimize phi = -f
        c0 = c - problem.bound
        d, lam = _qp_step(B, g_phi, gc, c0)

        kkt = _kkt_residual(gf, gc, lam, c0)
        if kkt < opts.kkt_tol:
            return SolveReport(x, it, kkt, "converged", lam, f, c)

        step_norm = float(np.max(np.abs(d)))
        if step_norm < opts.step_tol:
            stalled = True
            break

        mu_pen = max(mu_pen, 2.0 * abs(lam) + 1.0)
        merit0 = -f + mu_pen * max(c0, 0.0)
        deriv = float(g_phi @ d) - mu_pen * max(c0, 0.0)

        def merit_of(fv, cv):
            return -fv + mu_pen * max(cv - problem.bound, 0.0)

        accepted = False
        trial = None
        # full step, then one second-order correction, then backtracking
        f1, gf1, c1, gc1, ok1 = evaluate(x + d)
        if ok1 and merit_of(f1, c1) <= merit0 + opts.armijo * deriv:
            trial = (x + d, f1, gf1, c1, gc1, 1.0)
            accepted = True
        elif ok1 and c1 - problem.bound > 0 and float(gc1 @ gc1) > 1e-300:
            corr = -((c1 - problem.bound) / float(gc1 @ gc1)) * gc1
            f2, gf2, c2, gc2, ok2 = evaluate(x + d + corr)
            if ok2 and merit_of(f2, c2) <= merit0 + opts.armijo * deriv:
                trial = (x + d + corr, f2, gf2, c2, gc2, 1.0)
                accepted = True
        if not accepted:
            alpha = 0.5
            for _ in range(opts.max_backtracks):
                f2, gf2, c2, gc2, ok2 = evaluate(x + alpha * d)
                if ok2 and merit_of(f2, c2) <= merit0 + opts.armijo * alpha * deriv:
                    trial = (x + alpha * d, f2, gf2, c2, gc2, alpha)
                    accepted = True
                    break
                alpha *= 0.5
        if not accepted:
            stalled = True
            break

        x_new, f2, gf2, c2, gc2, alpha = trial
        if opts.verbose:
            print(f"  sqp iter {it}: f={f2:.6g} c={c2:.3g} alpha={alpha:.3g} kkt={kkt:.3g}")

        # damped BFGS on the Lagrangian gradient
        s = x_new - x
        y = (-gf2 + lam * gc2) - (-gf + lam * gc)
        Bs = B @ s
        sBs = float(s @ Bs)
        sy = float(s @ y)
        if sBs > 1e-300:
            if sy < 0.2 * sBs:
                tau = 0.8 * sBs / (sBs - sy)
                y = tau * y + (1.0 - tau) * Bs
                sy = float(s @ y)
            if sy > 1e-12 * max(1.0, float(s @ s)):
                B = B + np.outer(y, y) / sy - np.outer(Bs, Bs) / sBs

        x, f, gf, c, gc = x_new, f2, gf2, c2, gc2

    # pull the final iterate back inside the constraint if necessary
    if c - problem.bound > feas_slack:
        x, f, gf, c, gc, restored = restore(x, f, gf, c, gc, feas_slack)
        if not restored:
            return SolveReport(x, iterations, np.inf, "failed",
                               message="final restoration failed")

    _, lam = _qp_step(B, -gf, gc, c - problem.bound)
    kkt = _kkt_residual(gf, gc, lam, c - problem.bound)
    status = "converged" if kkt < opts.kkt_tol else "max_iter"
    msg = "line search stalled" if (stalled and status != "converged") else ""
    return SolveReport(x, iterations, kkt, status, lam, f, c, message=msg)
