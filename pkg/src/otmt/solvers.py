"""Estimators for the multi-task inverse problem.

Independent baselines (ridge, l1, reweighted l1), structured multi-task
models (group l21, common-plus-specific decompositions) and the
transport-coupled estimators where per-subject coefficient vectors are
tied together through the barycenter of their positive and negative
parts. Coordinate descent inner loops are compiled with numba; cycling
is deterministic (cyclic order, in-place residual updates).
"""

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from . import ot as _ot
from .problem import SignedVector, lambda_max

__all__ = [
    "SolverConfig",
    "SolveResult",
    "solve_mne",
    "solve_lasso",
    "solve_reweighted_lasso",
    "solve_group_lasso",
    "solve_dirty",
    "mwe_coordinate_update",
    "update_sigma",
    "solve_mwe1",
    "solve_mwe05",
]

SUPPORT_TOL = 1e-8  # amplitude below which a source counts as inactive


@dataclass(frozen=True)
class SolverConfig:
    """Hyperparameters shared by the transport-coupled solvers.

    ``lambda_rel`` is mapped through the per-subject null penalty level
    at solve time; ``mu`` weighs the transport coupling; ``mu = 0``
    decouples the problem into independent concomitant l1 solves.
    """

    lambda_rel: float = 0.3
    mu: float = 1.0
    ot: _ot.OtParams | None = None
    sigma0: float = 1e-4
    eta: float = 1e-6
    cd_tol: float = 1e-8
    outer_tol: float = 1e-5
    max_outer: int = 50
    max_reweight: int = 5
    depth_exponent: float = 0.9
    max_sweeps: int = 200

    def __post_init__(self):
        if not 0.0 <= self.lambda_rel <= 1.0:
            raise ValueError("lambda_rel must lie in [0, 1]")
        if self.mu < 0.0:
            raise ValueError("mu must be nonnegative")
        if self.sigma0 <= 0.0:
            raise ValueError("sigma0 must be positive")
        for name in ("eta", "cd_tol", "outer_tol"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")
        if self.max_outer < 1 or self.max_reweight < 1 or self.max_sweeps < 1:
            raise ValueError("iteration caps must be positive")


@dataclass
class SolveResult:
    """Coefficients, noise levels and diagnostics of a multi-task solve."""

    coefficients: list  # S SignedVector
    sigmas: np.ndarray  # (S,)
    barycenter: SignedVector | None
    objective_trace: list
    converged: bool
    iterations: int

    @property
    def coef(self):
        return np.stack([c.values for c in self.coefficients])


# ---------------------------------------------------------------------------
# compiled coordinate descent kernels
# ---------------------------------------------------------------------------


@njit(cache=True)
def _lasso_sweeps(lt, x, r, q, thr, nonneg, sign, max_sweeps, tol):
    """Cyclic soft-threshold updates for (1/2n)||y - sign*L x||^2 + <thr, |x|>.

    ``lt`` is the transposed design (p, n); ``r`` the running residual,
    updated in place. Returns the number of sweeps used.
    """
    p, n = lt.shape
    for sweep in range(max_sweeps):
        mx = 0.0
        for j in range(p):
            qj = q[j]
            if qj <= 0.0:
                continue
            old = x[j]
            acc = 0.0
            for i in range(n):
                acc += lt[j, i] * r[i]
            c = sign * acc / n + qj * old
            tj = thr[j]
            if c > tj:
                new = (c - tj) / qj
            elif (not nonneg) and c < -tj:
                new = (c + tj) / qj
            else:
                new = 0.0
            d = new - old
            if d != 0.0:
                sd = sign * d
                for i in range(n):
                    r[i] -= lt[j, i] * sd
                x[j] = new
                ad = abs(d)
                if ad > mx:
                    mx = ad
        if mx < tol:
            return sweep + 1
    return max_sweeps


@njit(cache=True)
def _mwe_sweeps(lt, x, r, q, m, t_coef, thr, sign, max_sweeps, tol):
    """Cyclic nonnegative updates for the transport-coupled subproblem.

    Minimizes, coordinate by coordinate,

        (1/2n)||r||^2 + t_coef * (sum(x) - <m, log x>) + <thr, x>,  x >= 0

    where each coordinate solves q x^2 + (t_coef + thr - c) x - t_coef m = 0
    for its unique nonnegative root (computed in a cancellation-free
    form). ``m = 0`` coordinates reduce to a soft threshold at
    ``t_coef + thr``.
    """
    p, n = lt.shape
    for sweep in range(max_sweeps):
        mx = 0.0
        for j in range(p):
            qj = q[j]
            old = x[j]
            acc = 0.0
            for i in range(n):
                acc += lt[j, i] * r[i]
            c = sign * acc / n + qj * old
            b = t_coef + thr[j] - c
            tm = t_coef * m[j]
            if qj <= 0.0:
                if tm > 0.0:
                    if b <= 0.0:
                        raise ValueError(
                            "coordinate subproblem is unbounded: zero "
                            "curvature with a nonpositive linear term"
                        )
                    new = tm / b
                else:
                    new = 0.0 if b >= 0.0 else -1.0
                    if new < 0.0:
                        raise ValueError(
                            "coordinate subproblem is unbounded: zero "
                            "curvature with a nonpositive linear term"
                        )
            elif tm > 0.0:
                disc = math.sqrt(b * b + 4.0 * qj * tm)
                if b <= 0.0:
                    new = (disc - b) / (2.0 * qj)
                else:
                    new = 2.0 * tm / (b + disc)
            else:
                new = -b / qj if b < 0.0 else 0.0
            d = new - old
            if d != 0.0:
                sd = sign * d
                for i in range(n):
                    r[i] -= lt[j, i] * sd
                x[j] = new
                ad = abs(d)
                if ad > mx:
                    mx = ad
        if mx < tol:
            return sweep + 1
    return max_sweeps


@njit(cache=True)
def _group_sweeps(lts, coef, res, q, lam, max_sweeps, tol):
    """Block-cyclic row updates for the l21-penalized joint problem.

    ``lts``: (S, p, n) transposed designs; ``coef``: (p, S) updated in
    place; ``res``: (S, n) residuals. Each row update solves its
    stationarity system exactly: the row norm t satisfies
    sum_s (c_s t / (q_s t + lam))^2 = t^2, found by bisection.
    """
    S, p, n = lts.shape
    c = np.empty(S)
    for sweep in range(max_sweeps):
        mx = 0.0
        for j in range(p):
            nc2 = 0.0
            for s in range(S):
                acc = 0.0
                for i in range(n):
                    acc += lts[s, j, i] * res[s, i]
                cs = acc / n + q[s, j] * coef[j, s]
                c[s] = cs
                nc2 += cs * cs
            if math.sqrt(nc2) <= lam:
                for s in range(S):
                    old = coef[j, s]
                    if old != 0.0:
                        for i in range(n):
                            res[s, i] += lts[s, j, i] * old
                        coef[j, s] = 0.0
                        if abs(old) > mx:
                            mx = abs(old)
                continue
            if lam == 0.0:
                for s in range(S):
                    new = c[s] / q[s, j] if q[s, j] > 0.0 else 0.0
                    old = coef[j, s]
                    d = new - old
                    if d != 0.0:
                        for i in range(n):
                            res[s, i] -= lts[s, j, i] * d
                        coef[j, s] = new
                        if abs(d) > mx:
                            mx = abs(d)
                continue
            hi = 1e-12
            for _ in range(300):
                val = 0.0
                for s in range(S):
                    vv = c[s] * hi / (q[s, j] * hi + lam)
                    val += vv * vv
                if val < hi * hi:
                    break
                hi *= 4.0
            lo = 0.0
            for _ in range(130):
                mid = 0.5 * (lo + hi)
                val = 0.0
                for s in range(S):
                    vv = c[s] * mid / (q[s, j] * mid + lam)
                    val += vv * vv
                if val > mid * mid:
                    lo = mid
                else:
                    hi = mid
            t = 0.5 * (lo + hi)
            for s in range(S):
                new = c[s] * t / (q[s, j] * t + lam)
                old = coef[j, s]
                d = new - old
                if d != 0.0:
                    for i in range(n):
                        res[s, i] -= lts[s, j, i] * d
                    coef[j, s] = new
                    if abs(d) > mx:
                        mx = abs(d)
        if mx < tol:
            return sweep + 1
    return max_sweeps


def _transposed(design):
    return np.ascontiguousarray(np.asarray(design, dtype=np.float64).T)


# ---------------------------------------------------------------------------
# independent baselines
# ---------------------------------------------------------------------------


def solve_mne(instance, lam):
    """Per-subject ridge solution via the n x n dual system.

    Minimizes (1/2n)||y - Lx||^2 + lam * ||x||^2; the solution is
    ``L^T (L L^T + 2 n lam I)^{-1} y``, formed in sensor space because
    n << p.
    """
    if lam <= 0.0:
        raise ValueError("ridge penalty must be positive (singular at zero)")
    n = instance.n_sensors
    out = []
    for design, y in instance.subjects():
        gram = design @ design.T
        gram[np.diag_indices_from(gram)] += 2.0 * n * lam
        out.append(design.T @ np.linalg.solve(gram, y))
    return np.stack(out)


def solve_lasso(design, y, lam, weights=None, nonneg=False, cd_tol=1e-8,
                max_sweeps=2000):
    """Single-task l1 solution by cyclic proximal coordinate descent.

    Minimizes (1/2n)||y - Lx||^2 + lam * ||weights * x||_1. The residual
    is maintained incrementally; iteration stops when the largest
    coordinate move in a sweep falls below ``cd_tol``.
    """
    design = np.asarray(design, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if lam < 0.0:
        raise ValueError("lam must be nonnegative")
    n, p = design.shape
    if weights is None:
        weights = np.ones(p)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.min(initial=0.0) < 0.0:
        raise ValueError("weights must be nonnegative")
    lt = _transposed(design)
    q = np.einsum("jn,jn->j", lt, lt) / n
    x = np.zeros(p)
    r = y.copy()
    _lasso_sweeps(lt, x, r, q, lam * weights, nonneg, 1.0, max_sweeps, cd_tol)
    return x


def solve_reweighted_lasso(design, y, lam, eta=1e-6, max_reweight=5,
                           cd_tol=1e-8, max_sweeps=2000,
                           amplitude_weights=None):
    """Iteratively reweighted l1, the surrogate for the l0.5 penalty.

    Alternates a weighted l1 solve with the majorization
    ``w_j = 1 / (2 sqrt(|x_j| + eta))`` until the support is unchanged
    between iterations or ``max_reweight`` rounds are done.
    """
    p = np.asarray(design).shape[1]
    weights = np.ones(p)
    support = None
    x = np.zeros(p)
    for _ in range(max_reweight):
        x = solve_lasso(design, y, lam, weights=weights, cd_tol=cd_tol,
                        max_sweeps=max_sweeps)
        amp = x if amplitude_weights is None else x / amplitude_weights
        new_support = np.abs(amp) > SUPPORT_TOL
        if support is not None and np.array_equal(new_support, support):
            break
        support = new_support
        weights = 1.0 / (2.0 * np.sqrt(np.abs(x) + eta))
    return x


def solve_group_lasso(instance, lam, cd_tol=1e-8, max_sweeps=2000):
    """Joint solve with the row-wise l21 penalty.

    Block coordinate descent over source index j; a row of coefficients
    is zero for all subjects or active for all of them.
    """
    if lam < 0.0:
        raise ValueError("lam must be nonnegative")
    S, n, p = instance.designs.shape
    lts = np.ascontiguousarray(instance.designs.transpose(0, 2, 1))
    q = np.einsum("sjn,sjn->sj", lts, lts) / n
    coef = np.zeros((p, S))
    res = instance.measurements.copy()
    _group_sweeps(lts, coef, res, q, lam, max_sweeps, cd_tol)
    return np.ascontiguousarray(coef.T)


def group_lambda_max(instance):
    """Smallest l21 penalty with an all-zero joint solution."""
    n = instance.n_sensors
    corr = np.einsum("snp,sn->sp", instance.designs, instance.measurements) / n
    return float(np.sqrt((corr**2).sum(axis=0)).max())


def _dirty_objective(instance, common, specific, lam, mu):
    n = instance.n_sensors
    total = common + specific
    res = instance.measurements - np.einsum(
        "snp,sp->sn", instance.designs, total
    )
    data = 0.5 * float((res**2).sum()) / n
    l21 = float(np.sqrt((common**2).sum(axis=0)).sum())
    l1 = float(np.abs(specific).sum())
    return data + mu * l21 + lam * l1


def solve_dirty(instance, lam, mu, cd_tol=1e-8, outer_tol=1e-6,
                max_outer=100, max_sweeps=2000):
    """Common-plus-specific decomposition with l21 + l1 penalties.

    Alternates a full l21 block solve of the common part (specific part
    frozen) and per-subject l1 solves of the specific parts (common part
    frozen), until the relative objective change falls below
    ``outer_tol``. Returns ``(common, specific, trace)``; the estimate
    is ``common + specific``.
    """
    if lam < 0.0 or mu < 0.0:
        raise ValueError("penalties must be nonnegative")
    S, n, p = instance.designs.shape
    lts = np.ascontiguousarray(instance.designs.transpose(0, 2, 1))
    q = np.einsum("sjn,sjn->sj", lts, lts) / n
    common = np.zeros((p, S))
    specific = np.zeros((S, p))
    # one residual array stays consistent with both parts throughout
    res = instance.measurements.copy()
    thr = np.full(p, lam)
    obj = np.inf
    trace = []
    for _ in range(max_outer):
        _group_sweeps(lts, common, res, q, mu, max_sweeps, cd_tol)
        for s in range(S):
            _lasso_sweeps(lts[s], specific[s], res[s], q[s], thr, False, 1.0,
                          max_sweeps, cd_tol)
        new_obj = _dirty_objective(instance, common.T, specific, lam, mu)
        trace.append(new_obj)
        if np.isfinite(obj) and obj - new_obj < outer_tol * max(1.0, abs(obj)):
            break
        obj = new_obj
    return np.ascontiguousarray(common.T), specific, trace


# ---------------------------------------------------------------------------
# transport-coupled solvers
# ---------------------------------------------------------------------------


def update_sigma(residual_norm, n, sigma0):
    """Noise level update: the empirical estimate floored at sigma0."""
    if residual_norm < 0.0:
        raise ValueError("residual_norm must be nonnegative")
    if sigma0 <= 0.0:
        raise ValueError("sigma0 must be positive")
    return max(residual_norm / math.sqrt(n), sigma0)


def mwe_coordinate_update(x, design, y, marginal, coeffs, cd_tol=1e-8,
                          max_sweeps=2000):
    """Solve the nonnegative transport-coupled subproblem for one task.

    Minimizes over x >= 0

        (1/2n)||y - Lx||^2 + t (<x, 1> - <log x, m>) + lam sig ||x||_1

    with ``t = mu * gamma / S`` and ``coeffs = (mu, gamma, S, lam, sig)``,
    by cyclic coordinate descent on the closed-form nonnegative root of
    each coordinate's stationarity quadratic.
    """
    mu, gamma, n_tasks, lam, sig = coeffs
    design = np.asarray(design, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64).copy()
    marginal = np.asarray(marginal, dtype=np.float64)
    if x.min(initial=0.0) < 0.0 or marginal.min(initial=0.0) < 0.0:
        raise ValueError("x and marginal must be nonnegative")
    n, p = design.shape
    lt = _transposed(design)
    q = np.einsum("jn,jn->j", lt, lt) / n
    r = np.ascontiguousarray(y - design @ x)
    t_coef = mu * gamma / n_tasks
    thr = np.full(p, lam * sig)
    _mwe_sweeps(lt, x, r, q, marginal, t_coef, thr, 1.0, max_sweeps, cd_tol)
    return x


class _OtBlock:
    """Scalings, marginals and barycenter of one sign's transport block."""

    def __init__(self, n_subjects, p, kernel):
        self.kernel = kernel
        row = kernel.kernel.sum(axis=1)
        # initial scalings u = v = 1 give plans equal to the kernel, so
        # the first coordinate updates see the kernel row sums
        self.left = np.tile(row, (n_subjects, 1))
        self.right = np.tile(kernel.kernel.sum(axis=0), (n_subjects, 1))
        self.log_u = np.zeros((n_subjects, p))
        self.log_v = np.zeros((n_subjects, p))
        self.bar = np.zeros(p)
        self.state = None

    def refresh(self, x, params):
        state = _ot.barycenter(x, self.kernel, params, state=self.state)
        self.state = state
        self.left = state.left_marginals
        self.right = state.right_marginals
        self.log_u = state.log_u
        self.log_v = state.log_v
        self.bar = state.barycenter
        return state

    def cost(self, s, x_s, gamma):
        return _ot.plan_cost_terms(
            x_s, self.bar, self.left[s], self.right[s],
            self.log_u[s], self.log_v[s], self.kernel, gamma,
        )


def _mwe_objective(instance, pos, neg, sigmas, lams, l1w, mu, blocks, gamma):
    """Joint objective: concomitant data terms + l1 + transport terms."""
    S, n, _ = instance.designs.shape
    total = 0.0
    for s in range(S):
        r = instance.measurements[s] - instance.designs[s] @ (pos[s] - neg[s])
        total += float(r @ r) / (2.0 * n * sigmas[s]) + 0.5 * sigmas[s]
        total += lams[s] * float(np.dot(l1w[s], pos[s] + neg[s]))
    if mu > 0.0:
        for s in range(S):
            total += mu / S * blocks[0].cost(s, pos[s], gamma)
            total += mu / S * blocks[1].cost(s, neg[s], gamma)
    return total


def _resolve_ot(instance, config):
    if instance.metric is None:
        raise ValueError("transport-coupled solvers need a ground metric")
    if config.ot is not None:
        params = config.ot
        with np.errstate(under="ignore"):
            kernel = _ot.OtKernel(
                kernel=np.exp(-instance.metric.costs / params.epsilon),
                metric=instance.metric,
                epsilon=params.epsilon,
            )
        return kernel, params
    kernel = _ot.build_kernel(instance.metric)
    params = _ot.OtParams(
        epsilon=kernel.epsilon, gamma=_ot.default_gamma(instance.metric)
    )
    return kernel, params


def solve_mwe1(instance, config, l1_weights=None, init=None, record="outer"):
    """Alternating minimization of the transport-coupled l1 model.

    Per outer iteration: for every subject, update the positive then the
    negative coefficient part by coordinate descent against the current
    plan marginals, update the noise level; then refresh both transport
    blocks (positive and negative parts) with warm-started barycenter
    solves. Stops when the relative objective decrease falls below
    ``config.outer_tol``.

    ``record="step"`` evaluates the objective after every block update
    instead of once per outer iteration (used by diagnostics; the trace
    is non-increasing either way).
    """
    S, n, p = instance.designs.shape
    kernel, params = _resolve_ot(instance, config)
    gamma = params.gamma
    mu = config.mu

    lts = [np.ascontiguousarray(instance.designs[s].T) for s in range(S)]
    qs = [np.einsum("jn,jn->j", lt, lt) / n for lt in lts]
    ys = instance.measurements

    if np.abs(ys).max() == 0.0:
        # zero data: the zero solution with floored noise is exact
        zero = SignedVector(np.zeros(p), np.zeros(p))
        result = SolveResult(
            coefficients=[zero] * S,
            sigmas=np.full(S, config.sigma0),
            barycenter=zero,
            objective_trace=[0.5 * config.sigma0 * S],
            converged=True,
            iterations=0,
        )
        result._warm = None
        result._lams = np.zeros(S)
        return result

    sig_init = np.linalg.norm(ys, axis=1) / math.sqrt(n)
    lmax = lambda_max(instance)
    # internal l1 levels; multiplied by the running sigma in the updates
    # so that lambda_rel = 1 zeroes the decoupled problem at entry
    lams = np.where(sig_init > 0, config.lambda_rel * lmax
                    / np.where(sig_init > 0, sig_init, 1.0), 0.0)
    if l1_weights is None:
        l1w = np.ones((S, p))
    else:
        l1w = np.asarray(l1_weights, dtype=np.float64)

    if init is None:
        pos = np.zeros((S, p))
        neg = np.zeros((S, p))
        sigmas = np.maximum(sig_init, config.sigma0)
        blocks = (_OtBlock(S, p, kernel), _OtBlock(S, p, kernel))
    else:
        pos, neg, sigmas, blocks = init
        pos = pos.copy()
        neg = neg.copy()
        sigmas = sigmas.copy()

    residuals = np.ascontiguousarray(
        ys - np.einsum("snp,sp->sn", instance.designs, pos - neg)
    )

    trace = []
    note = lambda: trace.append(
        _mwe_objective(instance, pos, neg, sigmas, lams, l1w, mu, blocks,
                       gamma)
    )
    converged = False
    prev_obj = np.inf
    n_outer = 0
    for n_outer in range(1, config.max_outer + 1):
        for s in range(S):
            t_coef = sigmas[s] * mu * gamma / S
            thr = sigmas[s] * lams[s] * l1w[s]
            _mwe_sweeps(lts[s], pos[s], residuals[s], qs[s], blocks[0].left[s],
                        t_coef, thr, 1.0, config.max_sweeps, config.cd_tol)
            if record == "step":
                note()
            _mwe_sweeps(lts[s], neg[s], residuals[s], qs[s], blocks[1].left[s],
                        t_coef, thr, -1.0, config.max_sweeps, config.cd_tol)
            if record == "step":
                note()
            sigmas[s] = update_sigma(
                float(np.linalg.norm(residuals[s])), n, config.sigma0
            )
            if record == "step":
                note()
        if mu > 0.0:
            blocks[0].refresh(pos, params)
            if record == "step":
                note()
            blocks[1].refresh(neg, params)
        obj = _mwe_objective(instance, pos, neg, sigmas, lams, l1w, mu,
                             blocks, gamma)
        trace.append(obj)
        if np.isfinite(prev_obj) and prev_obj - obj < config.outer_tol * max(
            1.0, abs(prev_obj)
        ):
            converged = True
            break
        prev_obj = obj

    coefficients = [SignedVector(pos[s].copy(), neg[s].copy()) for s in range(S)]
    bar = SignedVector(np.maximum(blocks[0].bar, 0.0),
                       np.maximum(blocks[1].bar, 0.0))
    result = SolveResult(
        coefficients=coefficients,
        sigmas=sigmas,
        barycenter=bar,
        objective_trace=trace,
        converged=converged,
        iterations=n_outer,
    )
    result._warm = (pos, neg, sigmas, blocks)  # reused by the reweighted solve
    result._lams = lams
    return result


def solve_mwe05(instance, config, amplitude_weights=None, record="outer"):
    """Reweighted variant: a sequence of weighted l1 solves.

    Each round solves the transport-coupled l1 model with per-coordinate
    weights, then majorizes ``w_j = 1 / (2 sqrt(|x_j| + eta))``. Rounds
    are warm started from the previous solution and stop when the
    support pattern is stable or ``config.max_reweight`` is reached.
    """
    S, n, p = instance.designs.shape
    weights = np.ones((S, p))
    support = None
    init = None
    result = None
    trace = []
    for n_round in range(1, config.max_reweight + 1):
        result = solve_mwe1(instance, config, l1_weights=weights, init=init,
                            record=record)
        coef = result.coef
        # objective with the eta-smoothed square-root penalty
        pen = 0.0
        for s in range(S):
            pen += result._lams[s] * float(
                np.sqrt(np.abs(coef[s]) + config.eta).sum()
            )
        data_ot = result.objective_trace[-1]
        l1_part = 0.0
        for s in range(S):
            l1_part += result._lams[s] * float(
                np.dot(weights[s], np.abs(coef[s]))
            )
        trace.append(data_ot - l1_part + pen)
        amp = coef if amplitude_weights is None else coef / amplitude_weights
        new_support = np.abs(amp) > SUPPORT_TOL
        if support is not None and np.array_equal(new_support, support):
            break
        support = new_support
        weights = 1.0 / (2.0 * np.sqrt(np.abs(coef) + config.eta))
        init = result._warm
    result.objective_trace = trace
    result.iterations = n_round
    return result
