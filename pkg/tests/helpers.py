"""Independent reference computations shared by the tests."""
import numpy as np

from armctl.qp import QPSettings


def se3_hat(omega, v):
    S = np.zeros((4, 4))
    wx, wy, wz = omega
    S[:3, :3] = [[0, -wz, wy], [wz, 0, -wx], [-wy, wx, 0]]
    S[:3, 3] = v
    return S


def series_expm(X, terms=30):
    """Truncated Taylor series of the matrix exponential."""
    out = np.eye(X.shape[0])
    term = np.eye(X.shape[0])
    for k in range(1, terms + 1):
        term = term @ X / k
        out = out + term
    return out


def fk_series(model, q):
    T = np.eye(4)
    for ax, th in zip(model.axes, q):
        T = T @ series_expm(se3_hat(ax.omega, ax.v) * th)
    return T @ model.home.as_matrix()


def rotvec_from_matrix(R):
    """Axis-angle vector of a rotation matrix (angle < pi)."""
    c = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    angle = np.arccos(c)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if angle < 1e-12:
        return 0.5 * w
    return w * angle / (2.0 * np.sin(angle))


def box_qp_oracle(P, c, lo, hi):
    """Exact minimizer of a strictly convex QP over a box by enumerating
    every assignment of each coordinate to {free, lower, upper}."""
    import itertools
    n = len(c)
    best, best_x = None, None
    for pat in itertools.product(range(3), repeat=n):
        pat = np.array(pat)
        x = np.zeros(n)
        fixed = pat > 0
        x[pat == 1] = lo[pat == 1]
        x[pat == 2] = hi[pat == 2]
        if np.any(~np.isfinite(x[fixed])):
            continue
        free = ~fixed
        if free.any():
            x[free] = np.linalg.solve(P[np.ix_(free, free)],
                                      -(c[free] + P[np.ix_(free, fixed)] @ x[fixed]))
        if np.all(x >= lo - 1e-12) and np.all(x <= hi + 1e-12):
            val = 0.5 * x @ P @ x + c @ x
            if best is None or val < best:
                best, best_x = val, x
    return best_x


def random_box_qp(rng, n=7):
    """Random PD problem with three stacked scaled identities (3n box rows)."""
    B = rng.normal(size=(n, n))
    P = B.T @ B + 0.1 * np.eye(n)
    c = rng.normal(size=n) * 3
    s = rng.uniform(0.2, 3.0, size=3 * n)
    A = np.vstack([np.diag(s[:n]), np.diag(s[n:2 * n]), np.diag(s[2 * n:])])
    lo = -rng.uniform(0.1, 1.0, 3 * n)
    hi = rng.uniform(0.1, 1.0, 3 * n)
    x_lo = np.max((lo / s).reshape(3, n), axis=0)
    x_hi = np.min((hi / s).reshape(3, n), axis=0)
    return P, c, A, lo, hi, x_lo, x_hi


def polish_active_set(prob, y, tol=1e-9):
    """Exact argmin from the active set an approximate solve identified.

    Rows with a nonzero multiplier are held at the bound their sign points
    to; the resulting equality-constrained KKT system is solved directly.
    Returns (x, lam, rows) so callers can check primal and dual feasibility.
    """
    P, c, A = prob.P, prob.c, prob.A
    scale = max(1.0, np.abs(y).max())
    up = np.flatnonzero(y > tol * scale)
    lo = np.flatnonzero(y < -tol * scale)
    rows = np.concatenate((up, lo))
    b = np.concatenate((prob.u[up], prob.l[lo]))
    # unit-norm active rows keep the KKT matrix well conditioned
    r = np.linalg.norm(A[rows], axis=1)
    Aa, b = A[rows] / r[:, None], b / r
    n, k = P.shape[0], rows.size
    K = np.zeros((n + k, n + k))
    K[:n, :n] = P
    K[:n, n:] = Aa.T
    K[n:, :n] = Aa
    rhs = np.concatenate((-c, b))
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    lam = np.zeros(A.shape[0])
    lam[rows] = sol[n:] / r
    return sol[:n], lam, rows


def kkt_ok(prob, sol, s=QPSettings()):
    Ax = prob.A @ sol.x
    viol = prob.violation(sol.x)
    stat = prob.P @ sol.x + prob.c + prob.A.T @ sol.y
    scale_p = max(np.abs(Ax).max(initial=0), 1.0)
    scale_d = max(np.abs(prob.P @ sol.x).max(), np.abs(prob.A.T @ sol.y).max(initial=0),
                  np.abs(prob.c).max(), 1.0)
    # small slack for the unscaling between solver and problem coordinates
    return viol <= 10 * (s.eps_abs + s.eps_rel * scale_p) and \
        np.abs(stat).max() <= 10 * (s.eps_abs + s.eps_rel * scale_d)
