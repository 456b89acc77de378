"""Dense ADMM solver for convex QPs

    minimize    1/2 x'Px + c'x
    subject to  l <= Ax <= u

using the operator-splitting iteration popularized by OSQP: Ruiz
equilibration, a cached Cholesky factor of the reduced KKT matrix,
over-relaxation, adaptive step size, a primal-infeasibility certificate
and active-set polishing of solved problems. Sized for the handful of variables a single arm needs, so
everything is dense.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from numba import njit

RHO_MIN = 1e-6
RHO_MAX = 1e6
RHO_EQ_SCALE = 1e3
RHO_ADAPT_INTERVAL = 25
RHO_ADAPT_TOL = 5.0
PSD_REPAIR_SIGMA = 1e-8
INF = 1e20


class QPStatus(enum.IntEnum):
    SOLVED = 1
    MAX_ITERATIONS = 2
    PRIMAL_INFEASIBLE = 3

    def __str__(self) -> str:
        return self.name.lower()


@dataclass(frozen=True)
class QPSettings:
    eps_abs: float = 1e-6
    eps_rel: float = 1e-6
    max_iter: int = 4000
    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    adaptive_rho: bool = True
    scaling_iter: int = 10
    eps_pinf: float = 1e-6
    polish: bool = True
    polish_refine_iter: int = 3


@dataclass(frozen=True)
class QPProblem:
    P: np.ndarray
    c: np.ndarray
    A: np.ndarray
    l: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        P = np.atleast_2d(np.asarray(self.P, dtype=float))
        c = np.asarray(self.c, dtype=float).reshape(-1)
        n = c.size
        A = np.asarray(self.A, dtype=float).reshape(-1, n) if np.size(self.A) else np.zeros((0, n))
        l = np.asarray(self.l, dtype=float).reshape(-1)
        u = np.asarray(self.u, dtype=float).reshape(-1)
        if P.shape != (n, n):
            raise ValueError(f"P must be {n}x{n}, got {P.shape}")
        if np.abs(P - P.T).max(initial=0.0) > 1e-10:
            raise ValueError("P must be symmetric")
        if l.shape != (A.shape[0],) or u.shape != (A.shape[0],):
            raise ValueError("l and u must have one entry per row of A")
        if np.any(l > u):
            raise ValueError("need l <= u")
        for name, val in (("P", P), ("c", c), ("A", A), ("l", l), ("u", u)):
            object.__setattr__(self, name, np.ascontiguousarray(val))

    @property
    def n(self) -> int:
        return self.c.size

    @property
    def m(self) -> int:
        return self.A.shape[0]

    def objective(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ self.P @ x + self.c @ x)

    def violation(self, x) -> float:
        Ax = self.A @ x
        return float(np.max(np.concatenate(([0.0], Ax - self.u, self.l - Ax))))


@dataclass
class QPSolution:
    x: np.ndarray
    y: np.ndarray
    status: QPStatus
    iterations: int
    primal_residual: float
    dual_residual: float
    rho: float = 0.1
    polished: bool = False

    @property
    def solved(self) -> bool:
        return self.status == QPStatus.SOLVED


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------

@njit(cache=True)
def _inf_norm(v):
    out = 0.0
    for k in range(v.size):
        a = abs(v[k])
        if a > out:
            out = a
    return out


@njit(cache=True)
def _ruiz(P, c, A, iters):
    n = P.shape[0]
    m = A.shape[0]
    D = np.ones(n)
    E = np.ones(m)
    Ps = P.copy()
    cs_vec = c.copy()
    As = A.copy()
    cost = 1.0
    for _ in range(iters):
        dD = np.empty(n)
        for j in range(n):
            nrm = 0.0
            for i in range(n):
                nrm = max(nrm, abs(Ps[i, j]))
            for i in range(m):
                nrm = max(nrm, abs(As[i, j]))
            if nrm < 1e-4:
                nrm = 1.0
            dD[j] = 1.0 / np.sqrt(min(nrm, 1e4))
        dE = np.empty(m)
        for i in range(m):
            nrm = 0.0
            for j in range(n):
                nrm = max(nrm, abs(As[i, j]))
            if nrm < 1e-4:
                nrm = 1.0
            dE[i] = 1.0 / np.sqrt(min(nrm, 1e4))
        for i in range(n):
            for j in range(n):
                Ps[i, j] *= dD[i] * dD[j]
            cs_vec[i] *= dD[i]
        for i in range(m):
            for j in range(n):
                As[i, j] *= dE[i] * dD[j]
        D *= dD
        E *= dE
        # cost scaling
        mean_col = 0.0
        for j in range(n):
            nrm = 0.0
            for i in range(n):
                nrm = max(nrm, abs(Ps[i, j]))
            mean_col += nrm
        mean_col /= n
        g = max(mean_col, _inf_norm(cs_vec))
        if g < 1e-4:
            g = 1.0
        g = 1.0 / min(g, 1e4)
        Ps *= g
        cs_vec *= g
        cost *= g
    return Ps, cs_vec, As, D, E, cost


@njit(cache=True)
def _rho_vector(l, u, rho):
    m = l.size
    r = np.empty(m)
    for i in range(m):
        if l[i] <= -INF and u[i] >= INF:
            r[i] = RHO_MIN
        elif u[i] - l[i] < 1e-12:
            r[i] = RHO_EQ_SCALE * rho
        else:
            r[i] = rho
    return r


@njit(cache=True)
def _factor(P, A, rho_vec, sigma):
    K = P + sigma * np.eye(P.shape[0]) + A.T @ (A * rho_vec[:, None])
    return np.linalg.cholesky(K)


@njit(cache=True)
def _chol_solve(L, b):
    y = np.linalg.solve(L, b)
    return np.linalg.solve(L.T, y)


@njit(cache=True)
def _admm(P, c, A, l, u, x0, y0, rho, sigma, alpha, eps_abs, eps_rel, max_iter,
          adaptive, scaling_iter, eps_pinf):
    n = P.shape[0]
    m = A.shape[0]
    # positive-semidefiniteness repair
    wmin = np.linalg.eigvalsh(P)[0]
    if wmin < 0.0:
        P = P + (PSD_REPAIR_SIGMA - wmin) * np.eye(n)
    l = np.maximum(l, -INF)
    u = np.minimum(u, INF)

    Ps, cs, As, D, E, cost = _ruiz(P, c, A, scaling_iter)
    ls = l * E
    us = u * E
    for i in range(m):
        if l[i] <= -INF:
            ls[i] = -INF
        if u[i] >= INF:
            us[i] = INF

    x = x0 / D
    y = y0 * cost / E
    z = np.minimum(np.maximum(As @ x, ls), us)

    rho_vec = _rho_vector(l, u, rho)
    L = _factor(Ps, As, rho_vec, sigma)

    status = 2
    it = 0
    r_prim = np.inf
    r_dual = np.inf
    Dinv = 1.0 / D
    Einv = 1.0 / E
    for it in range(1, max_iter + 1):
        rhs = sigma * x - cs + As.T @ (rho_vec * z - y)
        xt = _chol_solve(L, rhs)
        zt = As @ xt
        x_new = alpha * xt + (1.0 - alpha) * x
        z_relax = alpha * zt + (1.0 - alpha) * z
        z_new = np.minimum(np.maximum(z_relax + y / rho_vec, ls), us)
        y_new = y + rho_vec * (z_relax - z_new)
        dy = y_new - y
        x = x_new
        z = z_new
        y = y_new

        Ax = As @ x
        Px = Ps @ x
        Aty = As.T @ y
        r_prim = _inf_norm(Einv * (Ax - z))
        r_dual = _inf_norm(Dinv * (Px + cs + Aty)) / cost
        ax_n = max(_inf_norm(Einv * Ax), _inf_norm(Einv * z))
        du_n = max(_inf_norm(Dinv * Px), _inf_norm(Dinv * Aty), _inf_norm(Dinv * cs)) / cost
        eps_p = eps_abs + eps_rel * ax_n
        eps_d = eps_abs + eps_rel * du_n
        if r_prim <= eps_p and r_dual <= eps_d:
            status = 1
            break

        if m > 0:
            dy_u = E * dy / cost
            dy_n = _inf_norm(dy_u)
            if dy_n > 1e-30:
                Atdy = A.T @ dy_u
                if _inf_norm(Atdy) <= eps_pinf * dy_n:
                    s = 0.0
                    for i in range(m):
                        if dy_u[i] > 0.0:
                            s += u[i] * dy_u[i]
                        else:
                            s += l[i] * dy_u[i]
                    if s < -eps_pinf * dy_n:
                        status = 3
                        break

        if adaptive and it % RHO_ADAPT_INTERVAL == 0:
            num = r_prim / max(ax_n, 1e-30)
            den = r_dual / max(du_n, 1e-30)
            if den > 0.0 and num > 0.0:
                rho_new = rho * np.sqrt(num / den)
                rho_new = min(max(rho_new, RHO_MIN), RHO_MAX)
                if rho_new > RHO_ADAPT_TOL * rho or rho_new < rho / RHO_ADAPT_TOL:
                    rho = rho_new
                    rho_vec = _rho_vector(l, u, rho)
                    L = _factor(Ps, As, rho_vec, sigma)

    x_out = D * x
    y_out = E * y / cost
    return x_out, y_out, status, it, r_prim, r_dual, rho


POLISH_DELTA = 1e-7


@njit(cache=True)
def _residuals(P, c, A, l, u, x, y):
    Ax = A @ x
    rp = 0.0
    for i in range(A.shape[0]):
        rp = max(rp, Ax[i] - u[i], l[i] - Ax[i])
    return rp, _inf_norm(P @ x + c + A.T @ y)


@njit(cache=True)
def _polish_kernel(P, c, A, l, u, x, y, refine_iter):
    n = P.shape[0]
    m = A.shape[0]
    Ax = A @ x
    side = np.zeros(m, dtype=np.int64)  # -1 lower, +1 upper, 0 inactive
    k = 0
    for i in range(m):
        if u[i] < INF and u[i] - Ax[i] < y[i]:
            side[i] = 1
        elif l[i] > -INF and Ax[i] - l[i] < -y[i]:
            side[i] = -1
        if side[i] != 0:
            k += 1
    rows = np.empty(k, dtype=np.int64)
    r = np.empty(k)
    b = np.empty(k)
    j = 0
    for i in range(m):
        if side[i] != 0:
            rows[j] = i
            r[j] = np.sqrt(np.sum(A[i] * A[i]))
            if r[j] == 0.0:
                return False, x, y
            # unit-norm rows keep the KKT matrix balanced
            b[j] = (u[i] if side[i] > 0 else l[i]) / r[j]
            j += 1
    K = np.zeros((n + k, n + k))
    K[:n, :n] = P
    for j in range(k):
        a = A[rows[j]] / r[j]
        K[:n, n + j] = a
        K[n + j, :n] = a
    Kreg = K.copy()
    for i in range(n):
        Kreg[i, i] += POLISH_DELTA
    for j in range(k):
        Kreg[n + j, n + j] -= POLISH_DELTA
    rhs = np.empty(n + k)
    rhs[:n] = -c
    rhs[n:] = b
    sol = np.linalg.solve(Kreg, rhs)
    for _ in range(refine_iter):
        sol = sol + np.linalg.solve(Kreg, rhs - K @ sol)
    if not np.all(np.isfinite(sol)):
        return False, x, y
    yp = np.zeros(m)
    for j in range(k):
        i = rows[j]
        lam = sol[n + j] / r[j]
        # multipliers must point out of the bound they hold (equality rows are free)
        if u[i] - l[i] >= 1e-12 and lam * side[i] < 0.0:
            return False, x, y
        yp[i] = lam
    return True, sol[:n].copy(), yp


def _polish(P, c, A, l, u, x, y, refine_iter):
    """Re-solve the equality-constrained QP on the active set ADMM found.

    Rows are taken as active at the lower (upper) bound when the multiplier
    outweighs the slack, as in OSQP. The regularized KKT system is solved
    directly and refined against the exact one. Returns (x, y) or None if
    the guessed active set was inconsistent.
    """
    try:
        ok, xp, yp = _polish_kernel(P, c, A, l, u, x, y, refine_iter)
    except np.linalg.LinAlgError:
        return None
    return (xp, yp) if ok else None


# ---------------------------------------------------------------------------
# public API
# ---------------------------------------------------------------------------

@dataclass
class QPSolver:
    """Stateful solver that warm-starts each solve from the previous one.

    A solver instance belongs to one caller; use separate instances for
    concurrent problems.
    """

    settings: QPSettings = field(default_factory=QPSettings)
    warm_start: bool = True
    _x: np.ndarray | None = field(default=None, repr=False)
    _y: np.ndarray | None = field(default=None, repr=False)
    _rho: float | None = field(default=None, repr=False)

    def reset(self) -> None:
        self._x = self._y = self._rho = None

    def solve(self, problem: QPProblem) -> QPSolution:
        s = self.settings
        n, m = problem.n, problem.m
        use_prev = (self.warm_start and self._x is not None and self._x.size == n
                    and self._y.size == m)
        x0 = self._x if use_prev else np.zeros(n)
        y0 = self._y if use_prev else np.zeros(m)
        rho = self._rho if (use_prev and self._rho is not None) else s.rho
        x, y, status, it, rp, rd, rho = _admm(
            problem.P, problem.c, problem.A, problem.l, problem.u, x0, y0, rho,
            s.sigma, s.alpha, s.eps_abs, s.eps_rel, s.max_iter, s.adaptive_rho,
            s.scaling_iter, s.eps_pinf)
        sol = QPSolution(x, y, QPStatus(status), int(it), float(rp), float(rd), float(rho))
        if sol.status == QPStatus.SOLVED and s.polish:
            self._try_polish(problem, sol)
        if sol.status == QPStatus.SOLVED:
            self._x, self._y, self._rho = x, y, rho
        else:
            self.reset()
        return sol

    def _try_polish(self, problem: QPProblem, sol: QPSolution) -> None:
        """Replace the ADMM iterate when polishing does not worsen either residual."""
        P, c, A, l, u = problem.P, problem.c, problem.A, problem.l, problem.u
        out = _polish(P, c, A, l, u, sol.x, sol.y, self.settings.polish_refine_iter)
        if out is None:
            return
        xp, yp = out
        rp0, rd0 = _residuals(P, c, A, l, u, sol.x, sol.y)
        rp1, rd1 = _residuals(P, c, A, l, u, xp, yp)
        if rp1 <= max(rp0, 1e-12) and rd1 <= max(rd0, 1e-12):
            sol.x, sol.y = xp, yp
            sol.primal_residual, sol.dual_residual = rp1, rd1
            sol.polished = True


def solve(problem: QPProblem, settings: QPSettings | None = None) -> QPSolution:
    """One-shot cold-started solve."""
    return QPSolver(settings or QPSettings(), warm_start=False).solve(problem)
