"""Entropy-regularized unbalanced optimal transport.

Distances between nonnegative histograms over a shared ground metric
are computed with generalized Sinkhorn scalings: with kernel
``K = exp(-M / epsilon)`` and exponent ``psi = gamma / (gamma + epsilon)``,
the scaling vectors iterate ``u <- (a / Kv)^psi`` and
``v <- (b / K^T u)^psi`` until convergence, and the transport plan is
``P = diag(u) K diag(v)``. The reported cost is

    <P, M> - epsilon * H(P) + gamma * kl(P 1 | a) + gamma * kl(P^T 1 | b)

i.e. the entropic unbalanced objective with its plan-independent
constant dropped, so that the distance between two empty histograms is
exactly zero. Barycenters of several histograms are computed with the
same scalings plus a geometric-mean style pooling step. Signed vectors
are handled by transporting positive and negative parts independently.

``exact_emd`` solves the balanced linear program (no entropy, hard
marginals) with a successive-shortest-path min-cost flow restricted to
the supports of the inputs; it is the evaluation metric and the oracle
against which the entropic approximations are validated.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .problem import GroundMetric, SignedVector

__all__ = [
    "OtParams",
    "OtKernel",
    "BarycenterState",
    "build_kernel",
    "default_gamma",
    "unbalanced_distance",
    "barycenter",
    "signed_distance",
    "exact_emd",
]

# Scaling magnitudes beyond which the running scalings are absorbed into
# log-domain offsets and the kernel is re-centered.
_ABSORB_HI = 1e150
_ABSORB_LO = 1e-150


@dataclass(frozen=True)
class OtParams:
    """Hyperparameters of the unbalanced transport problem.

    ``epsilon`` is the entropy strength in the units of the metric,
    ``gamma`` the marginal relaxation strength. The scaling exponent
    ``psi = gamma / (gamma + epsilon)`` is derived.
    """

    epsilon: float
    gamma: float
    max_iter: int = 1000
    tol: float = 1e-6

    def __post_init__(self):
        if self.epsilon <= 0.0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.gamma <= 0.0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if self.max_iter < 1:
            raise ValueError("max_iter must be a positive integer")
        if self.tol <= 0.0:
            raise ValueError("tol must be positive")

    @property
    def psi(self):
        return self.gamma / (self.gamma + self.epsilon)


@dataclass(frozen=True)
class OtKernel:
    """Gibbs kernel ``exp(-M / epsilon)`` over a ground metric."""

    kernel: np.ndarray
    metric: GroundMetric
    epsilon: float


def build_kernel(metric, epsilon_rel=0.002):
    """Build the Gibbs kernel with entropy scaled to the metric.

    The absolute entropy strength is ``epsilon_rel`` times the median
    off-diagonal entry of the metric. Entries of ``exp(-M / epsilon)``
    may underflow to zero for distant pairs; NaN or infinity never
    occur.
    """
    if epsilon_rel <= 0.0:
        raise ValueError(f"epsilon_rel must be positive, got {epsilon_rel}")
    costs = metric.costs
    p = costs.shape[0]
    off = costs[~np.eye(p, dtype=bool)]
    med = np.median(off) if off.size else 0.0
    if med <= 0.0:
        raise ValueError("metric has zero median distance; no scale to set epsilon")
    epsilon = epsilon_rel * med
    with np.errstate(under="ignore"):
        kernel = np.exp(-costs / epsilon)
    return OtKernel(kernel=kernel, metric=metric, epsilon=epsilon)


def default_gamma(metric):
    """Marginal relaxation that keeps at least 80% of the mass moving.

    For two unit spikes separated by the largest metric distance d, the
    optimal unbalanced plan transports ``exp(-d / (2 gamma))`` of the
    mass; solving for 0.8 gives ``gamma = -max(M) / (2 log 0.8)``.
    """
    top = metric.costs.max()
    if top <= 0.0:
        raise ValueError("metric is identically zero; gamma has no scale")
    return -top / (2.0 * np.log(0.8))


def _kl(x, y):
    """kl(x, y) = <x, log(x/y)> + <y - x, 1> with 0 log(0/.) = 0."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    pos = x > 0
    if np.any(pos & (y <= 0)):
        return np.inf
    val = float(np.sum(x[pos] * np.log(x[pos] / y[pos])))
    return val + float(np.sum(y) - np.sum(x))


def _check_histogram(a, name):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 1:
        raise ValueError(f"{name} must be a 1-d histogram")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} has non-finite entries")
    if a.min(initial=0.0) < 0.0:
        raise ValueError(f"{name} has negative entries")
    return a


def _masked_log(x):
    with np.errstate(divide="ignore"):
        return np.where(x > 0, np.log(np.where(x > 0, x, 1.0)), -np.inf)


def _lse(scores, axis):
    """logsumexp tolerating all -inf slices (result -inf, no warning)."""
    top = scores.max(axis=axis, keepdims=True)
    safe = np.where(np.isfinite(top), top, 0.0)
    with np.errstate(under="ignore"):
        out = np.log(np.sum(np.exp(scores - safe), axis=axis)) + np.squeeze(
            safe, axis=axis
        )
    return np.where(np.isfinite(np.squeeze(top, axis=axis)), out, -np.inf)


def _scaling_loop_log(log_a, log_b, log_k, psi, max_iter, tol):
    """Batched two-histogram scaling iterations in the log domain.

    ``log_a, log_b``: (B, p) with -inf marking empty bins. ``log_k``:
    (p, p) shared or (B, p, p) per batch entry. ``psi``: scalar or (B,).
    Returns the log scalings ``f, g`` of shape (B, p) and the number of
    iterations used.
    """
    if log_k.ndim == 2:
        log_k = log_k[None, :, :]
    psi = np.atleast_1d(np.asarray(psi, dtype=np.float64))[:, None]
    f = np.where(np.isfinite(log_a), 0.0, -np.inf)
    g = np.where(np.isfinite(log_b), 0.0, -np.inf)
    n_iter = max_iter
    for it in range(1, max_iter + 1):
        log_kv = _lse(log_k + g[:, None, :], axis=2)
        f_new = np.where(np.isfinite(log_a), psi * (log_a - log_kv), -np.inf)
        log_ktu = _lse(log_k + f_new[:, :, None], axis=1)
        g_new = np.where(np.isfinite(log_b), psi * (log_b - log_ktu), -np.inf)
        if np.any(np.isnan(f_new)) or np.any(np.isnan(g_new)):
            raise ValueError(
                "scaling iterations produced NaN; epsilon is likely too "
                "small for this metric, increase it"
            )
        move = 0.0
        fin = np.isfinite(f_new) & np.isfinite(f)
        if np.any(fin):
            move = np.abs(f_new[fin] - f[fin]).max()
        gin = np.isfinite(g_new) & np.isfinite(g)
        if np.any(gin):
            move = max(move, np.abs(g_new[gin] - g[gin]).max())
        f, g = f_new, g_new
        if move < tol:
            n_iter = it
            break
    else:
        warnings.warn(
            f"scaling loop did not reach tol={tol} after {max_iter} "
            "iterations",
            RuntimeWarning,
        )
    return f, g, n_iter


def _plan_cost_from_logs(f, g, log_k, costs, eps, gamma, a, b):
    """Objective and marginals of the plan ``exp(f + log_k + g)``."""
    with np.errstate(under="ignore"):
        log_plan = f[:, None] + log_k + g[None, :]
        plan = np.exp(log_plan)
    row = plan.sum(axis=1)
    col = plan.sum(axis=0)
    transport = float(np.sum(plan * costs))
    mask = plan > 0
    plogp = float(np.sum(plan[mask] * log_plan[mask]))
    cost = (
        transport
        + eps * (plogp - float(plan.sum()))
        + gamma * (_kl(row, a) + _kl(col, b))
    )
    return cost, row, col


def unbalanced_distance(a, b, kernel, params):
    """Entropic unbalanced transport cost between two histograms.

    Runs the two-vector scaling loop in the log domain until the
    max-norm change of the log scalings falls below ``params.tol``,
    then evaluates the objective at ``P = diag(u) K diag(v)``.

    Returns ``(cost, (row_marginals, col_marginals))`` where the
    marginals are the row and column sums of the final plan.
    """
    a = _check_histogram(a, "a")
    b = _check_histogram(b, "b")
    p = kernel.kernel.shape[0]
    if a.shape[0] != p or b.shape[0] != p:
        raise ValueError("histograms do not match the kernel size")
    zero = np.zeros(p)
    sa, sb = a.sum(), b.sum()
    if sa == 0.0 and sb == 0.0:
        return 0.0, (zero, zero.copy())
    gamma = params.gamma
    if sa == 0.0 or sb == 0.0:
        # The plan is forced to zero; only the marginal penalties remain.
        return gamma * (sa + sb), (zero, zero.copy())

    eps = kernel.epsilon
    log_k = -kernel.metric.costs / eps
    f, g, _ = _scaling_loop_log(
        _masked_log(a)[None, :],
        _masked_log(b)[None, :],
        log_k,
        params.psi,
        params.max_iter,
        params.tol,
    )
    cost, row, col = _plan_cost_from_logs(
        f[0], g[0], log_k, kernel.metric.costs, eps, gamma, a, b
    )
    return cost, (row, col)


def signed_distance(a, b, kernel, params):
    """Transport cost between signed vectors.

    Positive parts and negative parts are transported independently and
    the two costs are added.
    """
    cost_pos, _ = unbalanced_distance(a.pos, b.pos, kernel, params)
    cost_neg, _ = unbalanced_distance(a.neg, b.neg, kernel, params)
    return cost_pos + cost_neg


@dataclass
class BarycenterState:
    """Scalings, barycenter and plan marginals of a barycenter solve.

    At convergence ``u = (x / K v)^psi`` and ``v = (bar / K^T u)^psi``
    hold within tolerance, and ``left_marginals[s] = u[s] * (K v[s])``
    are the row sums of the per-input transport plans.
    """

    u: np.ndarray  # (S, p) scalings on the input side
    v: np.ndarray  # (S, p) scalings on the barycenter side
    barycenter: np.ndarray  # (p,)
    left_marginals: np.ndarray  # (S, p)
    right_marginals: np.ndarray  # (S, p)
    log_u: np.ndarray = None
    log_v: np.ndarray = None
    converged: bool = True
    residual: float = 0.0
    n_iter: int = 0


class _ScalingEngine:
    """Batched generalized Sinkhorn over a stack of histogram groups.

    Operates on inputs of shape (B, p) with a group index; within each
    group a shared barycenter is pooled from all members. Scalings are
    kept in the standard domain and absorbed into per-entry log offsets
    whenever they leave [1e-150, 1e150], after which that entry iterates
    against its own re-centered kernel.
    """

    def __init__(self, inputs, kernel, params, n_groups):
        self.x = np.ascontiguousarray(inputs, dtype=np.float64)
        self.b_size, self.p = self.x.shape
        self.n_groups = n_groups
        self.group_size = self.b_size // n_groups
        if self.group_size * n_groups != self.b_size:
            raise ValueError("batch size must be divisible by the group count")
        self.kernel = kernel
        self.params = params
        self.psi = params.psi
        self.log_k = None  # built lazily on first absorption
        self.alpha = np.zeros_like(self.x)
        self.beta = np.zeros_like(self.x)
        self.k_stab = None  # (B, p, p) when any entry is absorbed
        self.mask = self.x > 0
        self.u = np.where(self.mask, 1.0, 0.0)
        self.v = np.ones_like(self.x)
        self.bar = None
        self.log_bar = None

    def warm_start(self, log_u, log_v):
        finite_u = np.isfinite(log_u)
        finite_v = np.isfinite(log_v)
        big = 250.0
        span_u = np.abs(log_u[finite_u]).max(initial=0.0)
        span_v = np.abs(log_v[finite_v]).max(initial=0.0)
        if span_u < big and span_v < big:
            self.u = np.where(finite_u, np.exp(np.where(finite_u, log_u, 0.0)), 0.0)
            self.v = np.where(finite_v, np.exp(np.where(finite_v, log_v, 0.0)), 0.0)
        else:
            self.alpha = np.where(finite_u, log_u, 0.0)
            self.beta = np.where(finite_v, log_v, 0.0)
            self.u = np.where(finite_u, 1.0, 0.0)
            self.v = np.where(finite_v, 1.0, 0.0)
            self._rebuild_kernels(np.arange(self.b_size))
        self.u[~self.mask] = 0.0

    def _rebuild_kernels(self, rows):
        if self.log_k is None:
            self.log_k = -self.kernel.metric.costs / self.kernel.epsilon
        if self.k_stab is None:
            with np.errstate(under="ignore"):
                self.k_stab = np.repeat(
                    np.exp(self.log_k)[None, :, :], self.b_size, axis=0
                )
        with np.errstate(under="ignore"):
            for i in np.atleast_1d(rows):
                self.k_stab[i] = np.exp(
                    self.alpha[i][:, None] + self.beta[i][None, :] + self.log_k
                )

    def _matvec_right(self, w):
        """K v per batch entry (stabilized kernel where absorbed)."""
        if self.k_stab is None:
            return w @ self.kernel.kernel.T
        return np.einsum("bij,bj->bi", self.k_stab, w)

    def _matvec_left(self, w):
        """K^T u per batch entry."""
        if self.k_stab is None:
            return w @ self.kernel.kernel
        return np.einsum("bij,bi->bj", self.k_stab, w)

    def _absorb_if_needed(self):
        absorbed = False
        for arr, off in ((self.u, self.alpha), (self.v, self.beta)):
            pos = arr > 0
            if not np.any(pos):
                continue
            hi = arr.max()
            lo = arr[pos].min()
            if hi > _ABSORB_HI or lo < _ABSORB_LO:
                rows = np.unique(
                    np.nonzero(
                        (arr > _ABSORB_HI).any(axis=1)
                        | ((arr < _ABSORB_LO) & pos).any(axis=1)
                    )[0]
                )
                take = pos[rows]
                off[rows] += np.where(take, np.log(np.where(take, arr[rows], 1.0)), 0.0)
                arr[rows] = np.where(take, 1.0, 0.0)
                self._rebuild_kernels(rows)
                absorbed = True
        return absorbed

    def _damp(self, off):
        if self.k_stab is None:
            return None
        return np.exp((self.psi - 1.0) * off)

    def run(self):
        psi = self.psi
        one_minus = 1.0 - psi
        tol = self.params.tol
        residual = np.inf
        converged = False
        n_iter = 0
        check_ok = True  # residual invalid right after an absorption
        for n_iter in range(1, self.params.max_iter + 1):
            kv = self._matvec_right(self.v)
            with np.errstate(divide="ignore", invalid="ignore", over="ignore", under="ignore"):
                u_new = np.where(self.mask & (kv > 0), (self.x / np.where(kv > 0, kv, 1.0)) ** psi, 0.0)
            damp = self._damp(self.alpha)
            if damp is not None:
                u_new *= damp
            np.minimum(u_new, 1e300, out=u_new)
            if np.any(np.isnan(u_new)):
                raise ValueError(
                    "barycenter scalings produced NaN; increase epsilon"
                )
            if check_ok:
                prev = self.u
                both = (prev > 0) & (u_new > 0)
                if np.any(both):
                    residual = float(np.abs(u_new[both] / prev[both] - 1.0).max())
                else:
                    residual = 0.0
                if np.any((prev > 0) != (u_new > 0)):
                    residual = np.inf
            self.u = u_new
            ktu = self._matvec_left(self.u)
            with np.errstate(under="ignore"):
                w = self.v * ktu
            with np.errstate(divide="ignore"):
                log_w = np.where(w > 0, np.log(np.where(w > 0, w, 1.0)), -np.inf)
            grouped = (one_minus * log_w).reshape(self.n_groups, self.group_size, self.p)
            self.log_bar = (
                logsumexp(grouped, axis=1) - np.log(self.group_size)
            ) / one_minus
            with np.errstate(under="ignore"):
                self.bar = np.exp(self.log_bar)
            bar_b = np.repeat(self.bar, self.group_size, axis=0)
            with np.errstate(divide="ignore", invalid="ignore", over="ignore", under="ignore"):
                v_new = np.where(
                    (bar_b > 0) & (ktu > 0),
                    (bar_b / np.where(ktu > 0, ktu, 1.0)) ** psi,
                    0.0,
                )
            damp = self._damp(self.beta)
            if damp is not None:
                v_new *= damp
            np.minimum(v_new, 1e300, out=v_new)
            if np.any(np.isnan(v_new)):
                raise ValueError(
                    "barycenter scalings produced NaN; increase epsilon"
                )
            self.v = v_new
            check_ok = not self._absorb_if_needed()
            if check_ok and residual < tol:
                converged = True
                break
        return converged, residual, n_iter

    def finish(self):
        kv = self._matvec_right(self.v)
        ktu = self._matvec_left(self.u)
        with np.errstate(under="ignore"):
            left = self.u * kv
            right = self.v * ktu
        with np.errstate(divide="ignore"):
            log_u = np.where(self.u > 0, np.log(np.where(self.u > 0, self.u, 1.0)), -np.inf) + self.alpha
            log_v = np.where(self.v > 0, np.log(np.where(self.v > 0, self.v, 1.0)), -np.inf) + self.beta
        log_u[self.u == 0] = -np.inf
        log_v[self.v == 0] = -np.inf
        return left, right, log_u, log_v


def barycenter(inputs, kernel, params, state=None):
    """Barycenter of S histograms under the unbalanced transport cost.

    Implements the scaling loop: per-input ``u`` updates, pooling
    ``bar = (mean_s (v_s * K^T u_s)^(1-psi))^(1/(1-psi))``, per-input
    ``v`` updates, repeated until the largest relative change of any
    ``u`` falls below ``params.tol``. Non-convergence is reported on
    the returned state, not raised.

    ``state`` may be a previous :class:`BarycenterState` used to warm
    start the scalings.
    """
    x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    for row in x:
        _check_histogram(row, "input")
    if x.shape[1] != kernel.kernel.shape[0]:
        raise ValueError("inputs do not match the kernel size")
    engine = _ScalingEngine(x, kernel, params, n_groups=1)
    if state is not None:
        engine.warm_start(state.log_u, state.log_v)
    if not np.any(x > 0):
        z = np.zeros_like(x)
        return BarycenterState(
            u=z, v=np.ones_like(x), barycenter=np.zeros(x.shape[1]),
            left_marginals=z.copy(), right_marginals=z.copy(),
            log_u=np.full_like(x, -np.inf), log_v=np.zeros_like(x),
            converged=True, residual=0.0, n_iter=0,
        )
    converged, residual, n_iter = engine.run()
    left, right, log_u, log_v = engine.finish()
    with np.errstate(over="ignore", under="ignore"):
        u = np.exp(log_u)
        v = np.exp(log_v)
    return BarycenterState(
        u=u, v=v, barycenter=engine.bar[0], left_marginals=left,
        right_marginals=right, log_u=log_u, log_v=log_v,
        converged=converged, residual=residual, n_iter=n_iter,
    )


def plan_cost_terms(x, bar, left, right, log_u, log_v, kernel, gamma):
    """Unbalanced objective of one plan from its marginals and scalings.

    Uses the identity
    ``<P, M> - eps H(P) = eps (<m_left, log u> + <m_right, log v> - mass)``
    valid for ``P = diag(u) K diag(v)``, so the full plan never has to
    be materialized.
    """
    eps = kernel.epsilon
    mass = float(left.sum())
    lu = float(np.sum(left[left > 0] * log_u[left > 0]))
    rv = float(np.sum(right[right > 0] * log_v[right > 0]))
    return eps * (lu + rv - mass) + gamma * (_kl(left, x) + _kl(right, bar))


def exact_emd(a, b, metric):
    """Balanced optimal transport cost, solved exactly.

    Solves ``min <P, M>`` subject to ``P 1 = a`` and ``P^T 1 = b`` with
    a successive-shortest-path min-cost flow on the bipartite graph of
    the supports of ``a`` and ``b``. Total masses must agree to within
    a 1e-9 relative tolerance; callers normalize their inputs.
    """
    a = _check_histogram(a, "a")
    b = _check_histogram(b, "b")
    costs = metric.costs
    if a.shape[0] != costs.shape[0] or b.shape[0] != costs.shape[0]:
        raise ValueError("histograms do not match the metric size")
    sa, sb = a.sum(), b.sum()
    if sa == 0.0 and sb == 0.0:
        return 0.0
    if abs(sa - sb) > 1e-9 * max(sa, sb):
        raise ValueError(
            f"total masses differ ({sa:.12g} vs {sb:.12g}); normalize both "
            "histograms to a common total before calling exact_emd"
        )
    ia = np.flatnonzero(a > 0)
    ib = np.flatnonzero(b > 0)
    supply = a[ia].copy()
    demand = b[ib].copy() * (sa / sb)
    cost_mat = np.ascontiguousarray(costs[np.ix_(ia, ib)])
    flow, total = _min_cost_transport(cost_mat, supply, demand)
    return total


def _min_cost_transport(cost, supply, demand):
    """Successive shortest paths with potentials on a dense bipartite graph."""
    na, nb = cost.shape
    flow = np.zeros((na, nb))
    pot_a = np.zeros(na)
    pot_b = np.zeros(nb)
    rem_a = supply.copy()
    rem_b = demand.copy()
    total = supply.sum()
    max_pushes = 20 * (na + nb) + 50
    for _ in range(max_pushes):
        if rem_a.max(initial=0.0) <= 0.0:
            break
        dist_a = np.where(rem_a > 0, 0.0, np.inf)
        dist_b = np.full(nb, np.inf)
        done_a = np.zeros(na, dtype=bool)
        done_b = np.zeros(nb, dtype=bool)
        parent_b = np.full(nb, -1, dtype=np.int64)
        parent_a = np.full(na, -1, dtype=np.int64)
        sink = -1
        while True:
            best_a = np.inf
            ia = -1
            if not done_a.all():
                masked = np.where(done_a, np.inf, dist_a)
                ia = int(np.argmin(masked))
                best_a = masked[ia]
            best_b = np.inf
            jb = -1
            if not done_b.all():
                masked = np.where(done_b, np.inf, dist_b)
                jb = int(np.argmin(masked))
                best_b = masked[jb]
            if not np.isfinite(min(best_a, best_b)):
                break
            if best_b <= best_a:
                done_b[jb] = True
                if rem_b[jb] > 0:
                    sink = jb
                    break
                # backward arcs j -> i exist where flow is positive
                carriers = (flow[:, jb] > 0) & ~done_a
                if np.any(carriers):
                    rc = np.maximum(-cost[:, jb] - pot_a + pot_b[jb], 0.0)
                    cand = dist_b[jb] + rc
                    better = carriers & (cand < dist_a)
                    dist_a[better] = cand[better]
                    parent_a[better] = jb
            else:
                done_a[ia] = True
                rc = np.maximum(cost[ia, :] + pot_a[ia] - pot_b, 0.0)
                cand = dist_a[ia] + rc
                better = ~done_b & (cand < dist_b)
                dist_b[better] = cand[better]
                parent_b[better] = ia
        if sink < 0:
            raise RuntimeError("min-cost flow could not reach an open sink")
        d_sink = dist_b[sink]
        pot_a += np.minimum(dist_a, d_sink)
        pot_b += np.minimum(dist_b, d_sink)
        # walk back along parents, collecting the path and its bottleneck
        path = []  # list of (i, j, forward)
        j = sink
        bottleneck = rem_b[sink]
        while True:
            i = parent_b[j]
            path.append((i, j, True))
            jj = parent_a[i]
            if jj < 0:
                break  # i is an active source
            path.append((i, jj, False))
            bottleneck = min(bottleneck, flow[i, jj])
            j = jj
        src = path[-1][0]
        bottleneck = min(bottleneck, rem_a[src])
        for i, j, forward in path:
            if forward:
                flow[i, j] += bottleneck
            else:
                flow[i, j] -= bottleneck
        rem_a[src] -= bottleneck
        rem_b[sink] -= bottleneck
        rem_a[rem_a < total * 1e-15] = 0.0
        rem_b[rem_b < total * 1e-15] = 0.0
    else:
        raise RuntimeError("min-cost flow exceeded its push budget")
    return flow, float(np.sum(flow * cost))
