# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled reach update and tridiagonal solve.

Arithmetic mirrors ``_kernels_py``; keep the two in sync.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, pow, fabs

cnp.import_array()


cdef inline void _hll(double hL, double uL, double hR, double uR, double width,
                      double g, double h_tol, double* F0, double* F1) noexcept nogil:
    cdef bint dryL = hL <= h_tol
    cdef bint dryR = hR <= h_tol
    cdef double cL, cR, sL, sR, AL, AR, QL, QR, FL0, FR0, FL1, FR1, denom
    if dryL and dryR:
        F0[0] = 0.0
        F1[0] = 0.0
        return
    cL = sqrt(g * hL)
    cR = sqrt(g * hR)
    if dryL:
        sL = uR - 2.0 * cR
        sR = uR + cR
    elif dryR:
        sL = uL - cL
        sR = uL + 2.0 * cL
    else:
        sL = uL - cL if uL - cL < uR - cR else uR - cR
        sR = uL + cL if uL + cL > uR + cR else uR + cR
    AL = 0.0 if dryL else width * hL
    AR = 0.0 if dryR else width * hR
    QL = AL * uL
    QR = AR * uR
    FL0 = QL
    FR0 = QR
    FL1 = 0.0 if dryL else QL * uL + 0.5 * g * width * hL * hL
    FR1 = 0.0 if dryR else QR * uR + 0.5 * g * width * hR * hR
    if sL >= 0.0:
        F0[0] = FL0
        F1[0] = FL1
    elif sR <= 0.0:
        F0[0] = FR0
        F1[0] = FR1
    else:
        denom = sR - sL
        F0[0] = (sR * FL0 - sL * FR0 + sL * sR * (AR - AL)) / denom
        F1[0] = (sR * FL1 - sL * FR1 + sL * sR * (QR - QL)) / denom


def reach_step(A_in, Q_in, zb_in, double width, double dx, double dt, double g,
               double dry_tol, double manning):
    cdef const double[::1] A = np.ascontiguousarray(A_in, dtype=np.float64)
    cdef const double[::1] Q = np.ascontiguousarray(Q_in, dtype=np.float64)
    cdef const double[::1] zb = np.ascontiguousarray(zb_in, dtype=np.float64)
    cdef Py_ssize_t n = A.shape[0]
    cdef Py_ssize_t k, i
    cdef double h_tol = dry_tol / width
    cdef double half_gw = 0.5 * g * width
    cdef double lam = dt / dx
    cdef double w43 = pow(width, 4.0 / 3.0)
    cdef double hl, hr, ul, ur, zl, zr, zmax, hls, hrs, F0, F1, fric
    out_A = np.empty(n)
    out_Q = np.empty(n)
    F0a = np.empty(n + 1)
    Fm = np.empty(n + 1)
    Fp = np.empty(n + 1)
    u_arr = np.empty(n)
    cdef double[::1] An = out_A
    cdef double[::1] Qn = out_Q
    cdef double[::1] f0 = F0a
    cdef double[::1] fm = Fm
    cdef double[::1] fp = Fp
    cdef double[::1] u = u_arr

    with nogil:
        for i in range(n):
            u[i] = Q[i] / A[i] if A[i] > dry_tol else 0.0
        for k in range(n + 1):
            if k == 0:
                hl = A[0] / width
                ul = -u[0]
                zl = zb[0]
            else:
                hl = A[k - 1] / width
                ul = u[k - 1]
                zl = zb[k - 1]
            if k == n:
                hr = A[n - 1] / width
                ur = -u[n - 1]
                zr = zb[n - 1]
            else:
                hr = A[k] / width
                ur = u[k]
                zr = zb[k]
            zmax = zl if zl > zr else zr
            hls = hl + zl - zmax
            if hls < 0.0:
                hls = 0.0
            hrs = hr + zr - zmax
            if hrs < 0.0:
                hrs = 0.0
            _hll(hls, ul, hrs, ur, width, g, h_tol, &F0, &F1)
            if k == 0 or k == n:
                F0 = 0.0
            f0[k] = F0
            fm[k] = F1 + half_gw * (hl * hl - hls * hls)
            fp[k] = F1 + half_gw * (hr * hr - hrs * hrs)
        for i in range(n):
            An[i] = A[i] - lam * (f0[i + 1] - f0[i])
            Qn[i] = Q[i] - lam * (fm[i + 1] - fp[i])
            if An[i] > dry_tol:
                if manning > 0.0:
                    fric = dt * g * manning * manning * fabs(Qn[i]) * w43 / pow(An[i], 7.0 / 3.0)
                    Qn[i] = Qn[i] / (1.0 + fric)
            else:
                Qn[i] = 0.0
    return out_A, out_Q


def thomas_solve(lower_in, diag_in, upper_in, rhs_in):
    cdef const double[::1] a = np.ascontiguousarray(lower_in, dtype=np.float64)
    cdef const double[::1] b = np.ascontiguousarray(diag_in, dtype=np.float64)
    cdef const double[::1] c = np.ascontiguousarray(upper_in, dtype=np.float64)
    cdef const double[::1] r = np.ascontiguousarray(rhs_in, dtype=np.float64)
    cdef Py_ssize_t n = b.shape[0]
    cdef Py_ssize_t i
    cdef double beta
    cp_arr = np.empty(n)
    dp_arr = np.empty(n)
    x_arr = np.empty(n)
    cdef double[::1] cp = cp_arr
    cdef double[::1] dp = dp_arr
    cdef double[::1] x = x_arr
    with nogil:
        beta = b[0]
        cp[0] = c[0] / beta if n > 1 else 0.0
        dp[0] = r[0] / beta
        for i in range(1, n):
            beta = b[i] - a[i] * cp[i - 1]
            cp[i] = c[i] / beta if i < n - 1 else 0.0
            dp[i] = (r[i] - a[i] * dp[i - 1]) / beta
        x[n - 1] = dp[n - 1]
        for i in range(n - 2, -1, -1):
            x[i] = dp[i] - cp[i] * x[i + 1]
    return x_arr
