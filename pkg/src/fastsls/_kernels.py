"""Compiled inner loops.

Index conventions: response-type arrays are laid out ``[j, k]`` (disturbance
index first) so that each column ``j`` is contiguous in ``k``.
"""
import numpy as np
from numba import njit

# ---------------------------------------------------------------------------
# small dense helpers
# ---------------------------------------------------------------------------


@njit(cache=True)
def _chol(H):
    """Lower Cholesky factor; raises LinAlgError if H is not positive definite."""
    return np.linalg.cholesky(H)


@njit(cache=True)
def _cho_solve(L, rhs):
    """Solve (L L') X = rhs for a 2-d right-hand side."""
    n = L.shape[0]
    Y = rhs.copy()
    for c in range(Y.shape[1]):
        for i in range(n):
            acc = Y[i, c]
            for t in range(i):
                acc -= L[i, t] * Y[t, c]
            Y[i, c] = acc / L[i, i]
        for i in range(n - 1, -1, -1):
            acc = Y[i, c]
            for t in range(i + 1, n):
                acc -= L[t, i] * Y[t, c]
            Y[i, c] = acc / L[i, i]
    return Y


@njit(cache=True)
def _cho_solve_vec(L, rhs):
    n = L.shape[0]
    y = rhs.copy()
    for i in range(n):
        acc = y[i]
        for t in range(i):
            acc -= L[i, t] * y[t]
        y[i] = acc / L[i, i]
    for i in range(n - 1, -1, -1):
        acc = y[i]
        for t in range(i + 1, n):
            acc -= L[t, i] * y[t]
        y[i] = acc / L[i, i]
    return y


# ---------------------------------------------------------------------------
# controller subproblem
# ---------------------------------------------------------------------------


@njit(cache=True)
def cost_blocks_column(j, Gx, Gu, Gf, eta, eta_f, Q_reg, R_reg, P_reg, Cx, Cu, Cux):
    """Fill eta-weighted blocks for column j; Cx[N] holds the terminal block.

    Gx (N, nc, nx), Gu (N, nc, nu), Gf (nf, nx); eta (N, nc) rows k; eta_f (nf,).
    Outputs Cx (N+1, nx, nx), Cu (N, nu, nu), Cux (N, nu, nx).
    """
    N = Gx.shape[0]
    nc = Gx.shape[1]
    for k in range(j + 1, N):
        e = eta[k].reshape((nc, 1))
        WGx = Gx[k] * e
        WGu = Gu[k] * e
        Cx[k] = Gx[k].T @ WGx + Q_reg
        Cu[k] = Gu[k].T @ WGu + R_reg
        Cux[k] = Gu[k].T @ WGx
    nf = Gf.shape[0]
    Cx[N] = Gf.T @ (Gf * eta_f.reshape((nf, 1))) + P_reg


@njit(cache=True)
def riccati_column(j, A, B, Cx, Cu, Cux, K, S):
    """Backward recursion for column j; returns the number of recursion steps."""
    N = A.shape[0]
    S[N] = Cx[N]
    steps = 0
    for k in range(N - 1, j, -1):
        Sn = S[k + 1]
        BtS = B[k].T @ Sn
        H = Cu[k] + BtS @ B[k]
        F = Cux[k] + BtS @ A[k]
        L = _chol(H)
        Kk = -_cho_solve(L, F)
        Sk = Cx[k] + A[k].T @ Sn @ A[k] + F.T @ Kk
        S[k] = 0.5 * (Sk + Sk.T)
        K[k] = Kk
        steps += 1
    return steps


@njit(cache=True)
def forward_column(j, A, B, E, K, phi_x, phi_u):
    """Phi_x[j+1] = E[j]; Phi_u[k] = K[k] Phi_x[k]; Phi_x[k+1] = A Phi_x + B Phi_u."""
    N = A.shape[0]
    phi_x[j + 1] = E[j]
    for k in range(j + 1, N):
        phi_u[k] = K[k] @ phi_x[k]
        phi_x[k + 1] = A[k] @ phi_x[k] + B[k] @ phi_u[k]


@njit(cache=True)
def beta_column(j, Gx, Gu, Gf, phi_x, phi_u, beta, beta_f):
    """Squared row norms of G (Phi_x; Phi_u) for k = j+1..N-1 and the terminal rows."""
    N = Gx.shape[0]
    for k in range(j + 1, N):
        Z = Gx[k] @ phi_x[k] + Gu[k] @ phi_u[k]
        for i in range(Z.shape[0]):
            acc = 0.0
            for t in range(Z.shape[1]):
                acc += Z[i, t] * Z[i, t]
            beta[k, i] = acc
    Zf = Gf @ phi_x[N]
    for i in range(Zf.shape[0]):
        acc = 0.0
        for t in range(Zf.shape[1]):
            acc += Zf[i, t] * Zf[i, t]
        beta_f[i] = acc


@njit(cache=True)
def cost_blocks_all(Gx, Gu, Gf, eta, eta_f, Q_reg, R_reg, P_reg, Cx, Cu, Cux):
    for j in range(Gx.shape[0]):
        cost_blocks_column(j, Gx, Gu, Gf, eta[j], eta_f[j], Q_reg, R_reg, P_reg, Cx[j], Cu[j], Cux[j])


@njit(cache=True)
def riccati_forward_all(A, B, E, Cx, Cu, Cux, K, S, phi_x, phi_u):
    steps = 0
    for j in range(A.shape[0]):
        steps += riccati_column(j, A, B, Cx[j], Cu[j], Cux[j], K[j], S[j])
        forward_column(j, A, B, E, K[j], phi_x[j], phi_u[j])
    return steps


@njit(cache=True)
def beta_all(Gx, Gu, Gf, phi_x, phi_u, beta, beta_f):
    for j in range(Gx.shape[0]):
        beta_column(j, Gx, Gu, Gf, phi_x[j], phi_u[j], beta[j], beta_f[j])


# ---------------------------------------------------------------------------
# structured interior-point method for the nominal QP
# ---------------------------------------------------------------------------
#
#   min  sum_k x'Qx + u'Ru + q_k'x + r_k'u + x_N'P x_N + p'x_N
#   s.t. x_{k+1} = A_k x_k + B_k u_k + c_k,  x_0 fixed
#        Gx_k x_k + Gu_k u_k + d_k <= 0,  Gf x_N + df <= 0
#
# with d = b + hct.  Multipliers: lam_k for the dynamics written as
# A x + B u + c - x_{k+1} = 0, mu >= 0 for the inequalities.

SOLVED = 0
MAX_ITER = 1
INFEASIBLE = 2


@njit(cache=True)
def qp_residuals(A, B, c, Q, R, P, q, r, p, Gx, Gu, d, Gf, df,
                 x, u, lam, mu, muf, s, sf, rx, ru, re, ri, rif):
    N = A.shape[0]
    for k in range(N):
        ru[k] = 2.0 * (R @ u[k]) + r[k] + B[k].T @ lam[k] + Gu[k].T @ mu[k]
        if k > 0:
            rx[k] = 2.0 * (Q @ x[k]) + q[k] + A[k].T @ lam[k] - lam[k - 1] + Gx[k].T @ mu[k]
        re[k] = A[k] @ x[k] + B[k] @ u[k] + c[k] - x[k + 1]
        ri[k] = Gx[k] @ x[k] + Gu[k] @ u[k] + d[k] + s[k]
    rx[0] = 0.0
    rx[N] = 2.0 * (P @ x[N]) + p - lam[N - 1] + Gf.T @ muf
    rif[:] = Gf @ x[N] + df + sf


@njit(cache=True)
def qp_factor(A, B, Q, R, P, Gx, Gu, Gf, D, Df, Pm, K, Luu):
    N = A.shape[0]
    nc = Gx.shape[1]
    nf = Gf.shape[0]
    PN = 2.0 * P + Gf.T @ (Gf * Df.reshape((nf, 1)))
    Pm[N] = 0.5 * (PN + PN.T)
    for k in range(N - 1, -1, -1):
        dk = D[k].reshape((nc, 1))
        WGx = Gx[k] * dk
        Wxx = 2.0 * Q + Gx[k].T @ WGx
        Wuu = 2.0 * R + Gu[k].T @ (Gu[k] * dk)
        Wux = Gu[k].T @ WGx
        Sn = Pm[k + 1]
        BtS = B[k].T @ Sn
        Huu = Wuu + BtS @ B[k]
        Hux = Wux + BtS @ A[k]
        L = _chol(0.5 * (Huu + Huu.T))
        Luu[k] = L
        Kk = -_cho_solve(L, Hux)
        K[k] = Kk
        # Joseph form: a sum of PSD terms, so large barrier weights cannot
        # cancel it into indefiniteness as Wxx + A'SA + Hux'K can
        Acl = A[k] + B[k] @ Kk
        WK = Wux.T @ Kk
        Pk = Wxx + WK + WK.T + Kk.T @ Wuu @ Kk + Acl.T @ Sn @ Acl
        Pm[k] = 0.5 * (Pk + Pk.T)


@njit(cache=True)
def qp_lq_solve(A, B, Pm, K, Luu, gx, gu, re, dx, du, dlam):
    N = A.shape[0]
    nx = A.shape[1]
    pv = np.empty((N + 1, nx))
    kff = np.empty_like(du)
    pv[N] = gx[N]
    for k in range(N - 1, -1, -1):
        t = Pm[k + 1] @ re[k] + pv[k + 1]
        hu = gu[k] + B[k].T @ t
        kff[k] = -_cho_solve_vec(Luu[k], hu)
        pv[k] = gx[k] + A[k].T @ t + K[k].T @ hu
    dx[0] = 0.0
    for k in range(N):
        du[k] = K[k] @ dx[k] + kff[k]
        dx[k + 1] = A[k] @ dx[k] + B[k] @ du[k] + re[k]
        dlam[k] = Pm[k + 1] @ dx[k + 1] + pv[k + 1]


@njit(cache=True)
def _newton(A, B, Gx, Gu, Gf, Pm, K, Luu, rx, ru, re, ri, rif, rc, rcf,
            mu, muf, s, sf, dx, du, dlam, dmu, dmuf, ds, dsf):
    N = A.shape[0]
    tmp = (mu * ri - rc) / s
    tmpf = (muf * rif - rcf) / sf
    gx = np.empty_like(rx)
    gu = np.empty_like(ru)
    for k in range(N):
        gu[k] = ru[k] + Gu[k].T @ tmp[k]
        gx[k] = rx[k] + Gx[k].T @ tmp[k]
    gx[N] = rx[N] + Gf.T @ tmpf
    qp_lq_solve(A, B, Pm, K, Luu, gx, gu, re, dx, du, dlam)
    for k in range(N):
        ds[k] = -ri[k] - (Gx[k] @ dx[k] + Gu[k] @ du[k])
    dsf[:] = -rif - Gf @ dx[N]
    dmu[:] = (-rc - mu * ds) / s
    dmuf[:] = (-rcf - muf * dsf) / sf


@njit(cache=True)
def _max_step(v, dv):
    a = np.inf
    flat_v = v.ravel()
    flat_d = dv.ravel()
    for i in range(flat_v.size):
        if flat_d[i] < 0.0:
            cand = -flat_v[i] / flat_d[i]
            if cand < a:
                a = cand
    return a


@njit(cache=True)
def _step_length(mu, muf, s, sf, dmu, dmuf, ds, dsf):
    a = min(_max_step(mu, dmu), _max_step(muf, dmuf), _max_step(s, ds), _max_step(sf, dsf))
    return a


@njit(cache=True)
def _maxabs(a):
    m = 0.0
    for v in a.ravel():
        if abs(v) > m:
            m = abs(v)
    return m


@njit(cache=True)
def qp_ipm(A, B, c, Q, R, P, q, r, p, Gx, Gu, d, Gf, df,
           x, u, lam, mu, muf, s, sf, tol_feas, tol_comp, max_iter, stall_limit):
    """Mehrotra predictor-corrector.  Iterates are updated in place.

    Returns (status, iterations, stationarity, feasibility, max complementarity).
    """
    N = A.shape[0]
    nx = A.shape[1]
    nu = B.shape[2]
    nc = Gx.shape[1]
    nf = Gf.shape[0]
    m = N * nc + nf

    rx = np.zeros((N + 1, nx))
    ru = np.zeros((N, nu))
    re = np.zeros((N, nx))
    ri = np.zeros((N, nc))
    rif = np.zeros(nf)
    Pm = np.zeros((N + 1, nx, nx))
    K = np.zeros((N, nu, nx))
    Luu = np.zeros((N, nu, nu))
    dx = np.zeros((N + 1, nx))
    du = np.zeros((N, nu))
    dlam = np.zeros((N, nx))
    dmu = np.zeros((N, nc))
    dmuf = np.zeros(nf)
    ds = np.zeros((N, nc))
    dsf = np.zeros(nf)
    dx2 = np.zeros((N + 1, nx))
    du2 = np.zeros((N, nu))
    dlam2 = np.zeros((N, nx))
    dmu2 = np.zeros((N, nc))
    dmuf2 = np.zeros(nf)
    ds2 = np.zeros((N, nc))
    dsf2 = np.zeros(nf)

    best_inf = np.inf
    stall = 0
    stat = 0.0
    feas = 0.0
    comp = 0.0
    for it in range(max_iter + 1):
        qp_residuals(A, B, c, Q, R, P, q, r, p, Gx, Gu, d, Gf, df,
                     x, u, lam, mu, muf, s, sf, rx, ru, re, ri, rif)
        stat = max(_maxabs(rx), _maxabs(ru))
        feas = max(_maxabs(re), _maxabs(ri), _maxabs(rif))
        comp = 0.0
        if m > 0:
            comp = max(_maxabs(mu * s), _maxabs(muf * sf))
        if stat <= tol_feas and feas <= tol_feas and comp <= tol_comp:
            return SOLVED, it, stat, feas, comp
        if it == max_iter:
            break
        # infeasibility: primal residual fails to shrink by 1% for stall_limit iterations
        if feas > tol_feas and feas > 0.99 * best_inf:
            stall += 1
            if stall >= stall_limit:
                return INFEASIBLE, it, stat, feas, comp
        else:
            stall = 0
        if feas < best_inf:
            best_inf = feas
        if m > 0 and (_maxabs(mu) > 1e14 or _maxabs(muf) > 1e14):
            return INFEASIBLE, it, stat, feas, comp

        nu_gap = 0.0
        if m > 0:
            nu_gap = (np.sum(mu * s) + np.sum(muf * sf)) / m
        D = mu / s
        Df = muf / sf
        qp_factor(A, B, Q, R, P, Gx, Gu, Gf, D, Df, Pm, K, Luu)

        # predictor
        rc = mu * s
        rcf = muf * sf
        _newton(A, B, Gx, Gu, Gf, Pm, K, Luu, rx, ru, re, ri, rif, rc, rcf,
                mu, muf, s, sf, dx, du, dlam, dmu, dmuf, ds, dsf)
        a_aff = min(1.0, _step_length(mu, muf, s, sf, dmu, dmuf, ds, dsf))
        sigma = 0.0
        if m > 0:
            nu_aff = (np.sum((mu + a_aff * dmu) * (s + a_aff * ds))
                      + np.sum((muf + a_aff * dmuf) * (sf + a_aff * dsf))) / m
            sigma = (nu_aff / nu_gap) ** 3 if nu_gap > 0 else 0.0
            if sigma > 1.0:
                sigma = 1.0

        # corrector
        rc = mu * s + dmu * ds - sigma * nu_gap
        rcf = muf * sf + dmuf * dsf - sigma * nu_gap
        _newton(A, B, Gx, Gu, Gf, Pm, K, Luu, rx, ru, re, ri, rif, rc, rcf,
                mu, muf, s, sf, dx2, du2, dlam2, dmu2, dmuf2, ds2, dsf2)
        amax = _step_length(mu, muf, s, sf, dmu2, dmuf2, ds2, dsf2)
        a = min(1.0, 0.995 * amax)

        x += a * dx2
        u += a * du2
        lam += a * dlam2
        mu += a * dmu2
        muf += a * dmuf2
        s += a * ds2
        sf += a * dsf2
    return MAX_ITER, max_iter, stat, feas, comp
