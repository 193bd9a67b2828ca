"""Box-constrained nonlinear least squares by projected damped Gauss-Newton."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.linalg as sla

from .model import ModelEvaluationError


@dataclass(frozen=True)
class NLSResult:
    x: np.ndarray
    cost: float              # 0.5 * ||r||^2
    iterations: int
    converged: bool
    status: str
    costs: tuple[float, ...]  # accepted cost after each iteration (non-increasing)


def _projected_gradient(x, g, lb, ub):
    return x - np.clip(x - g, lb, ub)


def nls_solve(fun: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]], x0, lb=None, ub=None,
              frozen=None, gtol: float = 1e-8, xtol: float = 1e-10, max_iter: int = 200) -> NLSResult:
    """Minimize ``0.5 ||r(x)||^2`` over the box ``lb <= x <= ub``.

    ``fun(x)`` returns ``(r, J)``.  Entries flagged in ``frozen`` keep their
    starting value and are removed from the decision vector.  Steps start as
    pure Gauss-Newton and are damped (Levenberg-Marquardt) only when a trial
    point fails to decrease the cost, so accepted costs never increase.
    Trial points where the model cannot be evaluated count as failures.
    """
    x0 = np.asarray(x0, float)
    n = x0.size
    lb = np.full(n, -np.inf) if lb is None else np.broadcast_to(np.asarray(lb, float), (n,)).copy()
    ub = np.full(n, np.inf) if ub is None else np.broadcast_to(np.asarray(ub, float), (n,)).copy()
    if np.any(lb > ub):
        raise ValueError("infeasible box: lower bound above upper bound")
    free = np.ones(n, bool) if frozen is None else ~np.asarray(frozen, bool)

    x = x0.copy()
    x[free] = np.clip(x[free], lb[free], ub[free])
    r, J = fun(x)
    cost = 0.5 * float(r @ r)
    if not np.isfinite(cost):
        raise ModelEvaluationError("residual is not finite at the starting point")
    costs = [cost]
    lam = 0.0
    lbf, ubf = lb[free], ub[free]
    for it in range(1, max_iter + 1):
        Jf = J[:, free]
        g = Jf.T @ r
        xf = x[free]
        pg = _projected_gradient(xf, g, lbf, ubf)
        if np.max(np.abs(pg), initial=0.0) <= gtol:
            return NLSResult(x, cost, it - 1, True, "gradient", tuple(costs))
        # variables held at a bound by the gradient stay fixed this iteration
        act = ((xf <= lbf) & (g > 0)) | ((xf >= ubf) & (g < 0))
        inact = ~act
        H = Jf[:, inact].T @ Jf[:, inact]
        gi = g[inact]
        diag = np.maximum(np.diag(H), 1e-12 * max(1.0, np.max(np.diag(H), initial=1.0)))
        accepted = False
        for _ in range(60):
            try:
                c, low = sla.cho_factor(H + lam * np.diag(diag), check_finite=False)
                p = -sla.cho_solve((c, low), gi, check_finite=False)
            except (np.linalg.LinAlgError, ValueError):
                p = -np.linalg.lstsq(H + lam * np.diag(diag), gi, rcond=None)[0]
            step = np.zeros_like(xf)
            step[inact] = p
            xt = x.copy()
            xt[free] = np.clip(xf + step, lbf, ubf)
            dx = np.max(np.abs(xt - x))
            if dx <= xtol * (1.0 + np.max(np.abs(x[free]), initial=0.0)):
                return NLSResult(x, cost, it, True, "step", tuple(costs))
            try:
                rt, Jt = fun(xt)
                ct = 0.5 * float(rt @ rt)
            except (ModelEvaluationError, FloatingPointError, ValueError):
                ct = np.inf
            if np.isfinite(ct) and ct < cost:
                x, r, J, cost = xt, rt, Jt, ct
                lam = 0.0 if lam < 1e-6 else lam / 10.0
                accepted = True
                break
            lam = 1e-3 if lam == 0.0 else lam * 10.0
        costs.append(cost)
        if not accepted:
            # no representable decrease: stationary up to round-off in the cost
            floor = 1e-7 * np.sqrt(2.0 * cost) * np.linalg.norm(Jf)
            return NLSResult(x, cost, it, bool(np.max(np.abs(pg)) <= max(gtol, floor)), "stalled", tuple(costs))
    return NLSResult(x, cost, max_iter, False, "max-iter", tuple(costs))
