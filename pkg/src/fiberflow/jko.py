"""One minimizing-movement step of the fibered gradient flow.

Each step solves, over nonnegative mass tensors g[i, i', j] (destination
cell, source cell, species),

    min  sum ( (x_i - x_i')^2 / (2 tau) + V_ij ) g_ii'j + kappa * Hhat(A g)
    s.t. sum_i   g_ii'j = prev_mass_i'j        (source marginal)
         sum_i'j g_ii'j = mu_i dx              (destination X-marginal)

with (A g)_ij = sum_i' g_ii'j the destination coupling masses and
Hhat(p) = sum_ij [ p log(p / (dx nu_j)) - p + dx nu_j ].

Two solvers cover the two regimes.

For kappa > 0 the tensor never needs to be stored: minimizing over g with
the destination fiber masses p_ij = (A g)_ij held fixed leaves, per species,
a 1D monotone transport between p_.j and prev_.j, so the step reduces to a
strictly convex problem in p on the transportation polytope.  Dualizing the
destination X-marginal constraint with a multiplier phi in R^m gives a
smooth concave dual (the per-species subproblems have unique minimizers by
strict convexity of the entropy), which is maximized by L-BFGS.  Each dual
evaluation solves the per-species subproblems exactly in cumulative-mass
variables: writing s_i for the cumulative destination mass up to cell i,
the transport cost is a separable sum of convex piecewise-linear terms
g_i(s_i) and the entropy couples neighbouring s only, so cyclic exact
coordinate minimization (with over-relaxation, compiled per fiber) converges
to machine precision.  The returned step carries a certified duality gap:
the dual value is a rigorous lower bound on the step objective, evaluated
at the feasible primal point, so `dual_residual` bounds the true
suboptimality of the returned iterate.

For kappa = 0 the step is a linear program and is solved by a
Chambolle-Pock primal-dual iteration on the tensor with one dual block per
marginal constraint, diagonally rescaled per block (cell masses are
O(dx/n) while costs and duals are O(1)); the dual step of block b is
sigma d_b^2 and the primal step 1/(ratio ||K_d||) with sigma =
ratio/||K_d||, preserving sigma_b tau_cp ||K_d||^2 <= 1.  An optional
bandwidth truncates the tensor to |i - i'| <= w.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numba import njit
from scipy.optimize import minimize as _scipy_minimize

from .measures import Coupling, EnergySpec, Grid1D, MarginalX, SpeciesSet

__all__ = [
    "StepParams",
    "StepPlan",
    "StepResult",
    "StepState",
    "cp_prox_entropy",
    "cp_operator_norm",
    "jko_step",
    "run_flow",
]

_FEAS_TOL = 1e-6  # precondition tolerance on the incoming coupling


@dataclass(frozen=True)
class StepParams:
    tau: float
    kappa: float
    max_iters: int = 50000
    tol: float = 1e-6
    theta: float = 1.0
    bandwidth: Optional[int] = None
    check_every: int = 25
    step_ratio: float = 10.0  # dual/primal step-size ratio

    def __post_init__(self):
        if self.tau <= 0.0:
            raise ValueError("tau must be positive")
        if self.kappa < 0.0:
            raise ValueError("kappa must be nonnegative")
        if self.tol <= 0.0:
            raise ValueError("tol must be positive")
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError("theta must lie in [0, 1]")
        if self.bandwidth is not None and self.bandwidth < 1:
            raise ValueError("bandwidth must be >= 1 when set")
        if self.step_ratio <= 0.0:
            raise ValueError("step_ratio must be positive")


@dataclass(frozen=True)
class StepPlan:
    """Transport plan in masses.

    Either a tensor ``g`` (dense (m, m, n) or banded (m, 2w+1, n)) or, for
    the fiber-dual solver, the per-species monotone segment chain
    ``chain = (dest, src, seg)`` of arrays shaped (2m, n): segment k of
    species j carries mass seg[k, j] from source cell src[k, j] to
    destination cell dest[k, j].
    """

    g: Optional[np.ndarray] = None
    bandwidth: Optional[int] = None
    chain: Optional[tuple[np.ndarray, np.ndarray, np.ndarray]] = None

    def __post_init__(self):
        if (self.g is None) == (self.chain is None):
            raise ValueError("exactly one of g and chain must be given")

    def source_marginal(self) -> np.ndarray:
        if self.chain is not None:
            dest, src, seg = self.chain
            m = seg.shape[0] // 2
            out = np.zeros((m, seg.shape[1]))
            cols = np.broadcast_to(np.arange(seg.shape[1]), seg.shape)
            np.add.at(out, (src, cols), seg)
            return out
        if self.bandwidth is None:
            return self.g.sum(axis=0)
        return _banded_source_marginal(self.g, self.bandwidth)

    def dest_coupling_masses(self) -> np.ndarray:
        if self.chain is not None:
            dest, src, seg = self.chain
            m = seg.shape[0] // 2
            out = np.zeros((m, seg.shape[1]))
            cols = np.broadcast_to(np.arange(seg.shape[1]), seg.shape)
            np.add.at(out, (dest, cols), seg)
            return out
        return self.g.sum(axis=1)

    def dense(self, m: int) -> np.ndarray:
        """Materialize the (m, m, n) tensor; intended for small instances."""
        if self.chain is not None:
            dest, src, seg = self.chain
            n = seg.shape[1]
            out = np.zeros((m, m, n))
            cols = np.broadcast_to(np.arange(n), seg.shape)
            np.add.at(out, (dest, src, cols), seg)
            return out
        if self.bandwidth is None:
            return self.g
        w = self.bandwidth
        n = self.g.shape[2]
        out = np.zeros((m, m, n))
        for k in range(2 * w + 1):
            off = k - w
            a, b = max(0, off), m + min(0, off)
            if a < b:
                out[np.arange(a, b), np.arange(a, b) - off, :] = \
                    self.g[a:b, k, :]
        return out


@dataclass(frozen=True)
class StepState:
    """Solver state of one step, reusable as the next warm start.

    The fiber-dual solver (kappa > 0) carries the X-marginal multiplier
    ``phi``; the Chambolle-Pock solver (kappa = 0) carries its primal and
    dual iterates.
    """

    g: Optional[np.ndarray] = None
    q1: Optional[np.ndarray] = None
    q2: Optional[np.ndarray] = None
    q3: Optional[np.ndarray] = None
    phi: Optional[np.ndarray] = None


@dataclass(frozen=True)
class StepResult:
    next: Coupling
    plan: StepPlan
    pressure_dual: np.ndarray
    iterations: int
    primal_residual: float
    dual_residual: float
    objective: float
    converged: bool = True
    stalled: bool = False
    message: str = ""
    state: Optional[StepState] = None


def cp_prox_entropy(v: np.ndarray, sigma: float, weights: np.ndarray,
                    kappa: float) -> np.ndarray:
    """Elementwise solve of kappa*log(u/w) + sigma*(u - v) = 0, u > 0.

    Newton iteration on t = log u (the residual is convex and increasing in
    t) with a bisection fallback for entries that fail to reach residual
    1e-12.  The solution is unique by strict monotonicity.
    """
    if sigma <= 0.0:
        raise ValueError("sigma must be positive")
    if kappa <= 0.0:
        raise ValueError("kappa must be positive")
    v = np.asarray(v, dtype=float)
    w = np.broadcast_to(np.asarray(weights, dtype=float), v.shape)
    if np.min(w) <= 0.0:
        raise ValueError("weights must be positive")

    logw = np.log(w)
    # Newton step from u = w as the starting point
    t = logw + sigma * (v - w) / (kappa + sigma * w)
    t = np.minimum(t, 690.0)  # keep exp(t) finite
    for _ in range(80):
        e = np.exp(t)
        phi = kappa * (t - logw) + sigma * (e - v)
        step = phi / (kappa + sigma * e)
        t = np.minimum(t - step, 690.0)
        if np.max(np.abs(step)) < 1e-16:
            break
    u = np.exp(t)
    resid = kappa * (np.log(u) - logw) + sigma * (u - v)
    bad = np.abs(resid) > 1e-12 * np.maximum(1.0, sigma * np.abs(v))
    if np.any(bad):
        u_bad = _prox_entropy_bisect(v[bad], sigma, w[bad], kappa)
        u = u.copy()
        u[bad] = u_bad
    return u


def _prox_entropy_bisect(v, sigma, w, kappa):
    # exp(-745) is the smallest positive double; keep u strictly positive
    lo = np.full_like(v, -745.0)
    hi = np.log(np.maximum(np.maximum(v, w), 1e-300)) + np.abs(v) + 1.0
    hi = np.minimum(hi, 690.0)
    logw = np.log(w)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        phi = kappa * (mid - logw) + sigma * (np.exp(mid) - v)
        lo = np.where(phi < 0.0, mid, lo)
        hi = np.where(phi < 0.0, hi, mid)
    return np.exp(0.5 * (lo + hi))


# ---------------------------------------------------------------------------
# Linear maps.  Dense tensors are (m_dest, m_src, n); banded tensors are
# (m_dest, 2w+1, n) with offset index k meaning source i' = i - (k - w).


def _band_mask(m: int, w: int) -> np.ndarray:
    i = np.arange(m)[:, None]
    k = np.arange(2 * w + 1)[None, :]
    src = i - (k - w)
    return (src >= 0) & (src < m)


def _banded_source_marginal(g: np.ndarray, w: int) -> np.ndarray:
    m, B, n = g.shape
    out = np.zeros((m, n))
    for k in range(B):
        off = k - w
        a = max(0, off)
        b = m + min(0, off)
        if a < b:
            out[a - off:b - off] += g[a:b, k, :]
    return out


def _banded_source_adjoint(q3: np.ndarray, w: int, m: int) -> np.ndarray:
    B = 2 * w + 1
    n = q3.shape[1]
    out = np.zeros((m, B, n))
    for k in range(B):
        off = k - w
        a = max(0, off)
        b = m + min(0, off)
        if a < b:
            out[a:b, k, :] = q3[a - off:b - off]
    return out


class _StepKernel:
    """Cost tensor and linear-map applications for one step geometry."""

    def __init__(self, grid: Grid1D, nu: SpeciesSet, spec: EnergySpec,
                 tau: float, bandwidth: Optional[int]):
        m, n = grid.m, nu.n
        self.m, self.n = m, n
        self.bandwidth = bandwidth
        if bandwidth is None:
            dist2 = (grid.x[:, None] - grid.x[None, :]) ** 2
            self.cost = dist2[:, :, None] / (2.0 * tau) \
                + spec.v_table[:, None, :]
            self.mask = None
            self.shape = (m, m, n)
        else:
            w = bandwidth
            off = (np.arange(2 * w + 1) - w) * grid.dx
            self.mask = _band_mask(m, w)[:, :, None]
            self.cost = np.broadcast_to(
                off[None, :, None] ** 2 / (2.0 * tau), (m, 2 * w + 1, n)
            ) + spec.v_table[:, None, :]
            self.cost = np.where(self.mask, self.cost, 0.0)
            self.shape = (m, 2 * w + 1, n)

    def dest_coupling(self, g: np.ndarray) -> np.ndarray:
        return g.sum(axis=1)

    def mu_marginal(self, g: np.ndarray) -> np.ndarray:
        return g.sum(axis=(1, 2))

    def source_marginal(self, g: np.ndarray) -> np.ndarray:
        if self.bandwidth is None:
            return g.sum(axis=0)
        return _banded_source_marginal(g, self.bandwidth)

    def adjoint(self, q1: Optional[np.ndarray], q2: np.ndarray,
                q3: np.ndarray) -> np.ndarray:
        if self.bandwidth is None:
            out = q2[:, None, None] + q3[None, :, :]
            if q1 is not None:
                out = out + q1[:, None, :]
        else:
            out = _banded_source_adjoint(q3, self.bandwidth, self.m)
            out += q2[:, None, None]
            if q1 is not None:
                out += q1[:, None, :]
        return out

    def project(self, g: np.ndarray) -> np.ndarray:
        """Zero out structurally forbidden entries of a banded tensor."""
        if self.mask is not None:
            g *= self.mask
        return g

    def block_norms_sq(self) -> tuple[float, float, float]:
        """Exact squared norms of the three marginal maps.

        Each map is a collection of disjoint all-ones rows, so its norm is
        the square root of the row length (number of summed entries).
        """
        if self.bandwidth is None:
            return float(self.m), float(self.m * self.n), float(self.m)
        B = 2 * self.bandwidth + 1
        b = min(B, self.m)
        return float(b), float(b * self.n), float(b)


_NORM_CACHE: dict[tuple[int, int, Optional[int]], float] = {}


def cp_operator_norm(m: int, n: int, bandwidth: Optional[int] = None,
                     iters: int = 50, seed: int = 0) -> float:
    """Upper estimate of ||K|| for K = (A, B, C) by power iteration.

    50 power steps on K^T K from a fixed random start, times a 1.01 safety
    factor.  Results are cached per (m, n, bandwidth).
    """
    key = (m, n, bandwidth)
    if iters == 50 and seed == 0 and key in _NORM_CACHE:
        return _NORM_CACHE[key]
    grid = Grid1D(m)
    nu = SpeciesSet(y=(np.arange(n) + 0.5) / n, mass=np.full(n, 1.0 / n))
    spec = EnergySpec(kappa=1.0, potential="table",
                      v_table=np.zeros((m, n)), dv_table=np.zeros((m, n)))
    kern = _StepKernel(grid, nu, spec, tau=1.0, bandwidth=bandwidth)
    rng = np.random.default_rng(seed)
    g = rng.standard_normal(kern.shape)
    kern.project(g)
    lam = 1.0
    for _ in range(iters):
        h = kern.adjoint(kern.dest_coupling(g), kern.mu_marginal(g),
                         kern.source_marginal(g))
        kern.project(h)
        lam = float(np.sqrt(np.sum(h * h)))
        if lam == 0.0:
            return 1.01 * np.sqrt(3.0)
        g = h / lam
    result = 1.01 * float(np.sqrt(lam))
    if iters == 50 and seed == 0:
        _NORM_CACHE[key] = result
    return result


def _entropy_hat(p: np.ndarray, w: np.ndarray) -> float:
    """Hhat(p) = sum p log(p/w) - p + w with 0 log 0 = 0."""
    w = np.broadcast_to(w, p.shape)
    pos = p > 1e-300
    out = float(np.sum(w[~pos] - p[~pos]))
    pp, ww = p[pos], w[pos]
    out += float(np.sum(pp * np.log(pp / ww) - pp + ww))
    return out


def _rescale_marginals(r: np.ndarray, mu: MarginalX, nu: SpeciesSet,
                       dx: float, sweeps: int = 60,
                       tol: float = 1e-14) -> np.ndarray:
    """Alternating row/column scaling onto the two marginal identities.

    Valid for strictly positive densities; converges geometrically from a
    nearly feasible input and leaves an exactly feasible one to roundoff.
    """
    r = r.copy()
    for _ in range(sweeps):
        r *= (mu.density / (r @ nu.mass))[:, None]
        col = r.sum(axis=0) * dx
        r /= col[None, :]
        rx = np.max(np.abs(r @ nu.mass - mu.density))
        if rx <= tol:
            break
    return r


# ---------------------------------------------------------------------------
# Fiber-dual solver (kappa > 0).


def _fiber_transport(p: np.ndarray, q: np.ndarray, x: np.ndarray,
                     tau: float):
    """Monotone 1D transport between fiber masses p and q, per species.

    Returns per-species costs sum (x_i - x_i')^2 seg / (2 tau), the
    Kantorovich potentials (psi_p on the p side, psi_q on the q side,
    normalized by psi_q = 0 at the first support cell and completed by
    c-transform where a species' chain is disconnected), and the segment
    chain (dest, src, seg) of the merged cumulative-mass levels.
    """
    mm, nn = p.shape
    cp = np.cumsum(p, axis=0)
    cq = np.cumsum(q, axis=0)
    lev = np.sort(np.concatenate([cp, cq], axis=0), axis=0)
    lo = np.concatenate([np.zeros((1, nn)), lev[:-1]], axis=0)
    mids = 0.5 * (lo + lev)
    seg = lev - lo
    ip = (cp[None, :, :] < mids[:, None, :]).sum(axis=1)
    iq = (cq[None, :, :] < mids[:, None, :]).sum(axis=1)
    ip = np.minimum(ip, mm - 1)
    iq = np.minimum(iq, mm - 1)
    diff = x[ip] - x[iq]
    c_k = diff * diff / (2.0 * tau)
    costs = np.sum(seg * c_k, axis=0)
    psi_p = np.full((mm, nn), np.nan)
    psi_q = np.full((mm, nn), np.nan)
    cols = np.arange(nn)
    psi_q[iq[0], cols] = 0.0
    psi_p[ip[0], cols] = c_k[0]
    for k in range(1, 2 * mm):
        i_k, j_k = ip[k], iq[k]
        pq = psi_q[j_k, cols]
        pp = psi_p[i_k, cols]
        new_pp = np.where(np.isnan(pp) & ~np.isnan(pq), c_k[k] - pq, pp)
        psi_p[i_k, cols] = new_pp
        pq2 = np.where(np.isnan(pq) & ~np.isnan(new_pp), c_k[k] - new_pp, pq)
        psi_q[j_k, cols] = pq2
    for arr, other in ((psi_p, psi_q), (psi_q, psi_p)):
        miss = np.isnan(arr)
        if miss.any():
            for j in np.nonzero(miss.any(axis=0))[0]:
                known = ~np.isnan(other[:, j])
                cc = (x[:, None] - x[known][None, :]) ** 2 / (2.0 * tau) \
                    - other[known, j][None, :]
                fill = cc.min(axis=1)
                gap = np.isnan(arr[:, j])
                arr[gap, j] = fill[gap]
    return costs, psi_p, psi_q, (ip, iq, seg)


@njit(cache=True)
def _chain_sor(s, cumq, nu_tot, c, w, xg, dx, tau, kappa, omega, rel_tol,
               max_sweeps):
    """Exact cyclic coordinate minimization in cumulative-mass variables.

    For each species j the cut levels s[:, j] (cumulative destination
    masses at interior cell boundaries) minimize a sum of convex
    piecewise-linear transport terms plus the entropic coupling of
    neighbouring cells.  Each coordinate update solves its strictly convex
    1D problem in closed form piece by piece; omega over-relaxes the
    update.  Cyclic coordinate moves alone can stall at a corner of the
    ordering constraints where consecutive cuts coincide (an empty cell
    whose boundary has to slide), so converged sweeps alternate with exact
    joint shifts of such glued blocks until both passes are stationary.
    Returns the number of sweeps used per species.
    """
    mm, nn = w.shape
    sweeps_used = np.zeros(nn, dtype=np.int64)
    for j in range(nn):
        nuj = nu_tot[j]
        tol_j = rel_tol * nuj
        glue = 1e-7 * nuj
        total = 0
        om = omega
        for _outer in range(100):
            # ---- cyclic coordinate sweeps ----
            converged = False
            while total < max_sweeps:
                # Over-relaxation can cycle on the piecewise-linear part;
                # fall back to plain Gauss-Seidel (monotone descent) if the
                # fast setting has not converged after a generous budget.
                if total == 1500:
                    om = 1.0
                total += 1
                delta = 0.0
                for i in range(mm - 1):
                    lo = s[i - 1, j] if i > 0 else 0.0
                    hi = s[i + 1, j] if i < mm - 2 else nuj
                    d_cost = c[i, j] - c[i + 1, j]
                    wi = w[i, j]
                    wi1 = w[i + 1, j]
                    xs = xg[i] + xg[i + 1]
                    cur = s[i, j]
                    k = np.searchsorted(cumq[:, j], cur)
                    if k > mm - 1:
                        k = mm - 1
                    bnd_lo = lo + (hi - lo) * 1e-14
                    bnd_hi = hi - (hi - lo) * 1e-14
                    for _rep in range(60):
                        g = -dx * (xs - 2.0 * xg[k]) / (2.0 * tau)
                        e = -(g + d_cost) / kappa
                        if e > 700.0:
                            e = 700.0
                        elif e < -700.0:
                            e = -700.0
                        ratio = (wi / wi1) * np.exp(e)
                        cand = (lo + hi * ratio) / (1.0 + ratio)
                        t_lo = cumq[k - 1, j] if k > 0 else 0.0
                        t_hi = cumq[k, j]
                        cl = cand
                        if cl < t_lo:
                            cl = t_lo
                        elif cl > t_hi:
                            cl = t_hi
                        if cl < bnd_lo:
                            cl = bnd_lo
                        elif cl > bnd_hi:
                            cl = bnd_hi
                        cur = cl
                        if cand > t_hi and k < mm - 1:
                            k += 1
                        elif cand < t_lo and k > 0:
                            k -= 1
                        else:
                            break
                    prop = s[i, j] + om * (cur - s[i, j])
                    if prop < bnd_lo:
                        prop = bnd_lo
                    elif prop > bnd_hi:
                        prop = bnd_hi
                    d = abs(prop - s[i, j])
                    if d > delta:
                        delta = d
                    s[i, j] = prop
                if delta < tol_j:
                    converged = True
                    break
            # ---- glued-block shifts ----
            moved = 0.0
            i = 0
            while i < mm - 1:
                b = i
                while b + 1 < mm - 1 and s[b + 1, j] - s[b, j] <= glue:
                    b += 1
                if b > i:
                    s_lo = s[i - 1, j] if i > 0 else 0.0
                    s_hi = s[b + 1, j] if b + 1 < mm - 1 else nuj
                    # shift range keeping the two boundary gaps positive
                    d_lo = s_lo - s[i, j]
                    d_hi = s_hi - s[b, j]
                    span = d_hi - d_lo
                    a_lo = d_lo + 1e-15 * span
                    a_hi = d_hi - 1e-15 * span
                    if a_hi > a_lo:
                        d_cost = c[i, j] - c[b + 1, j]
                        wi = w[i, j]
                        wb = w[b + 1, j]
                        for _bis in range(80):
                            mid = 0.5 * (a_lo + a_hi)
                            # transport slope summed over the block's cuts
                            h = d_cost
                            for k2 in range(i, b + 1):
                                sk = s[k2, j] + mid
                                kk = np.searchsorted(cumq[:, j], sk)
                                if kk > mm - 1:
                                    kk = mm - 1
                                h -= dx * (xg[k2] + xg[k2 + 1]
                                           - 2.0 * xg[kk]) / (2.0 * tau)
                            p_lo = s[i, j] + mid - s_lo
                            p_hi = s_hi - s[b, j] - mid
                            h += kappa * (np.log(p_lo / wi)
                                          - np.log(p_hi / wb))
                            if h < 0.0:
                                a_lo = mid
                            else:
                                a_hi = mid
                        shift = 0.5 * (a_lo + a_hi)
                        if abs(shift) > 0.0:
                            for k2 in range(i, b + 1):
                                s[k2, j] += shift
                            if abs(shift) > moved:
                                moved = abs(shift)
                i = b + 1
            if (converged and moved < tol_j) or total >= max_sweeps:
                break
        sweeps_used[j] = total
    return sweeps_used


class _FiberDual:
    """Smooth dual of one step in the X-marginal multiplier phi."""

    def __init__(self, prev_mass: np.ndarray, mu_mass: np.ndarray,
                 w_ref: np.ndarray, v_table: np.ndarray, grid: Grid1D,
                 tau: float, kappa: float, rel_tol: float = 1e-9,
                 max_sweeps: int = 20000):
        self.prev_mass = prev_mass
        self.mu_mass = mu_mass
        self.w = np.ascontiguousarray(np.broadcast_to(w_ref, v_table.shape))
        self.lw = np.log(self.w)
        self.v = v_table
        self.x = grid.x
        self.dx = grid.dx
        self.tau = tau
        self.kappa = kappa
        self.rel_tol = rel_tol
        self.max_sweeps = max_sweeps
        self.cumq = np.ascontiguousarray(np.cumsum(prev_mass, axis=0))
        self.nu_tot = self.cumq[-1].copy()
        s0 = np.clip(self.cumq[:-1, :], 1e-300, None)
        s0 = np.minimum(s0, self.nu_tot[None, :] * (1.0 - 1e-12))
        np.maximum.accumulate(s0, axis=0, out=s0)
        self.s = np.ascontiguousarray(s0)
        self.nfev = 0
        self.total_sweeps = 0

    def masses(self) -> np.ndarray:
        m = self.w.shape[0]
        full = np.vstack([np.zeros(self.s.shape[1]), self.s,
                          self.nu_tot[None, :]])
        return np.diff(full, axis=0)

    def objective(self, p: np.ndarray) -> float:
        """Primal step objective at fiber masses p."""
        costs, _, _, _ = _fiber_transport(p, self.prev_mass, self.x,
                                          self.tau)
        ent = self.kappa * _entropy_hat(p, self.w)
        return float(costs.sum()) + float(np.sum(self.v * p)) + ent

    def __call__(self, phi: np.ndarray):
        """Negated dual value and gradient at phi (for minimization)."""
        self.nfev += 1
        c = np.ascontiguousarray(self.v + phi[:, None])
        sweeps = _chain_sor(self.s, self.cumq, self.nu_tot, c, self.w,
                            self.x, self.dx, self.tau, self.kappa, 1.8,
                            self.rel_tol, self.max_sweeps)
        self.total_sweeps += int(sweeps.sum())
        p = self.masses()
        costs, _, _, _ = _fiber_transport(p, self.prev_mass, self.x,
                                          self.tau)
        pos = p > 1e-300
        ent = float(np.sum(p[pos] * (np.log(p[pos]) - self.lw[pos])))
        d = float(costs.sum()) + float(np.sum(c * p)) + self.kappa * ent
        value = d - float(np.dot(phi, self.mu_mass))
        grad = p.sum(axis=1) - self.mu_mass
        return -value, -grad


def _jko_step_fiber_dual(prev: Coupling, mu: MarginalX, nu: SpeciesSet,
                         grid: Grid1D, spec: EnergySpec, params: StepParams,
                         warm: Optional[StepState]) -> StepResult:
    m, n = grid.m, nu.n
    prev_mass = prev.masses(grid, nu)
    mu_mass = mu.density * grid.dx
    w_ref = grid.dx * nu.mass[None, :]

    if warm is not None and warm.phi is not None:
        phi0 = np.asarray(warm.phi, dtype=float).copy()
    else:
        from .diagnostics import pressure_solve
        phi0 = -pressure_solve(prev, mu, grid, spec, nu).pi

    gtol = max(1e-12, 1e-9 * float(np.max(mu_mass)))
    iterations = 0
    phi = None
    r_next = None
    objective = np.inf
    best_dual = -np.inf
    gap_rel = np.inf
    # A poor multiplier start can leave the inner chain solver in a slow
    # regime; the certified gap detects this, and a restart from zero is
    # cheap insurance.  The best feasible primal and the best dual lower
    # bound certify each other across attempts.
    for start in (phi0, np.zeros(m)):
        dual = _FiberDual(prev_mass, mu_mass, w_ref, spec.v_table, grid,
                          params.tau, params.kappa)
        res = _scipy_minimize(dual, start, jac=True, method="L-BFGS-B",
                              options=dict(maxfun=params.max_iters,
                                           maxiter=params.max_iters,
                                           maxcor=25, ftol=1e-18, gtol=gtol))
        iterations += dual.nfev
        if -float(res.fun) > best_dual:
            best_dual = -float(res.fun)
            phi = np.asarray(res.x, dtype=float)
        # feasible primal: project subproblem masses onto both marginals
        p_raw = dual.masses()
        r_a = _rescale_marginals(np.maximum(p_raw, 1e-300) / w_ref, mu, nu,
                                 grid.dx)
        obj_a = dual.objective(r_a * w_ref)
        if obj_a < objective:
            objective = obj_a
            r_next = r_a
        gap_rel = (objective - best_dual) / max(1.0, abs(objective))
        if gap_rel <= params.tol:
            break
    p_feas = r_next * w_ref

    coupling = Coupling(r_next)
    rx, ry = coupling.marginal_residuals(grid, mu, nu)
    primal_res = max(rx, ry)
    converged = bool(primal_res <= params.tol and gap_rel <= params.tol)

    _, _, _, chain_idx = _fiber_transport(p_feas, prev_mass, grid.x,
                                          params.tau)
    pressure = -phi - float(np.sum(-phi * mu.density) * grid.dx)

    message = ""
    if not converged:
        message = (f"certified duality gap {gap_rel:.3g} or marginal "
                   f"residual {primal_res:.3g} above tol {params.tol:g} "
                   f"after {iterations} dual evaluations")

    return StepResult(
        next=coupling,
        plan=StepPlan(chain=chain_idx),
        pressure_dual=pressure,
        iterations=iterations,
        primal_residual=primal_res,
        dual_residual=max(gap_rel, 0.0),
        objective=objective,
        converged=converged,
        stalled=False,
        message=message,
        state=StepState(phi=phi),
    )


def _certify_stationary_lp(prev: Coupling, mu: MarginalX, nu: SpeciesSet,
                           grid: Grid1D, spec: EnergySpec,
                           params: StepParams) -> Optional[StepResult]:
    """Exact optimality certificate for the no-move plan of a kappa=0 step.

    Without entropy the step is a linear program, and ``prev`` itself is
    optimal iff the dual pair (Pi, Psi) closes the duality gap, where Pi is
    the multiplier a stationary step must produce (the pressure equation of
    ``prev``) and Psi its c-transform.  Returns the certified result when
    the relative gap is within ``params.tol``, else None so the iterative
    solver takes over.
    """
    from .diagnostics import pressure_solve
    pi = pressure_solve(prev, mu, grid, spec, nu).pi
    prev_mass = prev.masses(grid, nu)
    mu_mass = mu.density * grid.dx
    x = grid.x
    reduced = (x[:, None] - x[None, :]) ** 2 / (2.0 * params.tau) \
        - pi[:, None]
    psi = np.empty((grid.m, nu.n))
    for j in range(nu.n):
        psi[:, j] = np.min(reduced + spec.v_table[:, j][:, None], axis=0)
    primal = float(np.sum(spec.v_table * prev_mass))
    dual = float(np.sum(pi * mu_mass)) + float(np.sum(psi * prev_mass))
    gap_rel = (primal - dual) / max(1.0, abs(primal))
    if gap_rel > params.tol:
        return None
    rx, ry = prev.marginal_residuals(grid, mu, nu)
    _, _, _, chain_idx = _fiber_transport(prev_mass, prev_mass, grid.x,
                                          params.tau)
    return StepResult(
        next=prev,
        plan=StepPlan(chain=chain_idx),
        pressure_dual=pi,
        iterations=0,
        primal_residual=max(rx, ry),
        dual_residual=max(gap_rel, 0.0),
        objective=primal,
        converged=True,
        state=None,
    )


def jko_step(prev: Coupling, mu: MarginalX, nu: SpeciesSet, grid: Grid1D,
             spec: EnergySpec, params: StepParams,
             warm: Optional[StepState] = None) -> StepResult:
    """Solve one minimizing-movement step from ``prev``.

    Returns the new coupling together with the transport plan, the
    zero-mu-mean pressure recovered from the multiplier of the X-marginal
    constraint, and convergence diagnostics.  Non-convergence within
    ``max_iters`` is reported through the ``converged``/``stalled`` flags
    rather than raised.  ``warm``, when given, seeds the primal and dual
    iterates (typically with the final state of the preceding step).
    """
    rx, ry = prev.marginal_residuals(grid, mu, nu)
    if rx > _FEAS_TOL or ry > _FEAS_TOL:
        raise ValueError(
            f"infeasible previous coupling: residuals x={rx:g}, y={ry:g}")
    if params.kappa != spec.kappa:
        raise ValueError("params.kappa must match the energy spec")

    if params.kappa > 0.0:
        return _jko_step_fiber_dual(prev, mu, nu, grid, spec, params, warm)

    fast = _certify_stationary_lp(prev, mu, nu, grid, spec, params)
    if fast is not None:
        return fast

    m, n = grid.m, nu.n
    kern = _StepKernel(grid, nu, spec, params.tau, params.bandwidth)
    prev_mass = prev.masses(grid, nu)
    mu_mass = mu.density * grid.dx
    w_ref = grid.dx * nu.mass[None, :]  # reference weights dx nu_j
    with_entropy = params.kappa > 0.0

    # Per-block dual rescaling by the target scale, then steps obeying
    # sigma_b tau_cp ||K_d||^2 <= 1 with the exact block norms.
    d1 = 1.0 / float(np.max(w_ref))
    d2 = 1.0 / float(np.max(mu_mass))
    d3 = 1.0 / float(np.max(prev_mass))
    nA2, nB2, nC2 = kern.block_norms_sq()
    norm_d = np.sqrt((d1 * d1 * nA2 if with_entropy else 0.0)
                     + d2 * d2 * nB2 + d3 * d3 * nC2)
    alpha = params.step_ratio
    sig = alpha / norm_d
    tau_cp = 1.0 / (alpha * norm_d)
    s1 = sig * d1 * d1
    s2 = sig * d2 * d2
    s3 = sig * d3 * d3

    if warm is not None:
        g = np.asarray(warm.g, dtype=float).copy()
        if g.shape != kern.shape:
            raise ValueError("warm start has incompatible shape")
        kern.project(g)
        q1 = None if not with_entropy else np.array(warm.q1, dtype=float)
        q2 = np.array(warm.q2, dtype=float)
        q3 = np.array(warm.q3, dtype=float)
    else:
        # primal warm start: keep mass in place (diagonal support)
        g = np.zeros(kern.shape)
        if params.bandwidth is None:
            idx = np.arange(m)
            g[idx, idx, :] = prev_mass
        else:
            g[:, params.bandwidth, :] = prev_mass
        # dual warm start from the KKT structure of a stationary step: the
        # entropy dual is kappa log r, the mu-constraint dual the (negated)
        # pressure of prev, and the source dual closes the identity on the
        # diagonal support.  Near-stationary steps then converge quickly.
        from .diagnostics import pressure_solve
        q1 = None
        if with_entropy:
            q1 = params.kappa * np.log(np.maximum(prev.r, 1e-300))
        q2 = -pressure_solve(prev, mu, grid, spec, nu).pi
        q3 = -(spec.v_table + q2[:, None])
        if q1 is not None:
            q3 = q3 - q1
    g_bar = g.copy()

    u_pos = kern.dest_coupling(g)  # strictly positive at convergence
    obj_hist: list[float] = []
    res_hist: list[float] = []
    it = 0
    primal_res = np.inf
    dual_res = np.inf
    converged = False
    stalled = False

    def objective(gt: np.ndarray) -> float:
        val = float(np.sum(kern.cost * gt))
        if with_entropy:
            val += params.kappa * _entropy_hat(kern.dest_coupling(gt), w_ref)
        return val

    scale_x = float(np.max(mu_mass))
    scale_s = float(np.max(prev_mass))

    while it < params.max_iters:
        it += 1
        # dual ascent on the extrapolated primal
        if with_entropy:
            v1 = q1 + s1 * kern.dest_coupling(g_bar)
            u_pos = cp_prox_entropy(v1 / s1, s1, w_ref, params.kappa)
            q1 = v1 - s1 * u_pos
        q2 = q2 + s2 * (kern.mu_marginal(g_bar) - mu_mass)
        q3 = q3 + s3 * (kern.source_marginal(g_bar) - prev_mass)
        # primal descent with nonnegativity
        g_new = g - tau_cp * (kern.adjoint(q1, q2, q3) + kern.cost)
        np.maximum(g_new, 0.0, out=g_new)
        kern.project(g_new)
        g_bar = g_new + params.theta * (g_new - g)
        g = g_new

        if it % params.check_every == 0 or it == params.max_iters:
            rx = float(np.max(np.abs(kern.mu_marginal(g) - mu_mass))) \
                / scale_x
            rs = float(np.max(np.abs(kern.source_marginal(g) - prev_mass))) \
                / scale_s
            primal_res = max(rx, rs)
            obj = objective(g)
            obj_hist.append(obj)
            res_hist.append(primal_res)
            window = max(1, 100 // params.check_every)
            if len(obj_hist) > window:
                dual_res = abs(obj_hist[-1] - obj_hist[-1 - window]) \
                    / max(1.0, abs(obj))
            if primal_res <= params.tol and dual_res <= params.tol:
                converged = True
                break
            # residual stall: no relative progress over a long window
            long_w = max(2, 4000 // params.check_every)
            if len(res_hist) > long_w:
                past = res_hist[-1 - long_w]
                if past > 0 and (past - primal_res) / past < 1e-3 \
                        and primal_res > 10 * params.tol:
                    stalled = True
                    break

    r_next = _next_density(kern, g, u_pos, w_ref, with_entropy)
    if with_entropy:
        r_next = _rescale_marginals(r_next, mu, nu, grid.dx)
    pressure = -q2.copy()
    pressure -= float(np.sum(pressure * mu.density) * grid.dx)

    message = ""
    if not converged:
        if stalled and params.bandwidth is not None:
            message = (f"residual stalled at {primal_res:.3g}; the bandwidth "
                       f"{params.bandwidth} may be too small to carry the "
                       "required displacement, consider widening it")
        elif stalled:
            message = f"residual stalled at {primal_res:.3g}"
        else:
            message = (f"no convergence in {params.max_iters} iterations, "
                       f"residual {primal_res:.3g}")

    return StepResult(
        next=Coupling(np.maximum(r_next, 0.0)),
        plan=StepPlan(g=g, bandwidth=params.bandwidth),
        pressure_dual=pressure,
        iterations=it,
        primal_residual=primal_res,
        dual_residual=dual_res,
        objective=objective(g),
        converged=converged,
        stalled=stalled,
        message=message,
        state=StepState(g=g, q1=q1, q2=q2, q3=q3),
    )


def _next_density(kern: _StepKernel, g: np.ndarray, u_pos: np.ndarray,
                  w_ref: np.ndarray, with_entropy: bool) -> np.ndarray:
    """Density of the new iterate w.r.t. dx (x) nu.

    For kappa > 0 the entropy-prox output is used: it agrees with the plan
    marginal at convergence and is strictly positive, matching the strict
    positivity of the exact minimizer.
    """
    if with_entropy:
        return u_pos / w_ref
    return kern.dest_coupling(g) / w_ref


def run_flow(init: Coupling, steps: int, mu: MarginalX, nu: SpeciesSet,
             grid: Grid1D, spec: EnergySpec,
             params: StepParams) -> list[StepResult]:
    """Iterate ``jko_step``; iterate k lives on the interval [k tau, (k+1) tau).

    Each step is warm-started from the final primal/dual state of the
    previous one.  Aborts after a non-convergent step, returning the prefix
    including the flagged result.
    """
    if steps < 1:
        raise ValueError("need at least one step")
    results: list[StepResult] = []
    current = init
    warm: Optional[StepState] = None
    for _ in range(steps):
        res = jko_step(current, mu, nu, grid, spec, params, warm=warm)
        results.append(res)
        if not res.converged:
            break
        current = res.next
        warm = res.state
    return results
