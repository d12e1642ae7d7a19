"""Pure-numpy reach update, used when the compiled kernel is unavailable.

Must stay arithmetically in step with ``_kernels.pyx``; the backend tests
compare the two to round-off.
"""
import numpy as np
from scipy.linalg import solve_banded


def hll_flux_arrays(hL, uL, hR, uR, width, g, h_tol):
    """Vectorised HLL flux between reconstructed depths/velocities.

    Returns (mass_flux, momentum_flux) arrays in channel units (m^3/s,
    m^4/s^2) for a rectangular channel of the given width.
    """
    dryL = hL <= h_tol
    dryR = hR <= h_tol
    cL = np.sqrt(g * hL)
    cR = np.sqrt(g * hR)
    sL = np.minimum(uL - cL, uR - cR)
    sR = np.maximum(uL + cL, uR + cR)
    sL = np.where(dryL, uR - 2.0 * cR, sL)
    sR = np.where(dryL, uR + cR, sR)
    sL = np.where(dryR & ~dryL, uL - cL, sL)
    sR = np.where(dryR & ~dryL, uL + 2.0 * cL, sR)

    AL = np.where(dryL, 0.0, width * hL)
    AR = np.where(dryR, 0.0, width * hR)
    QL = AL * uL
    QR = AR * uR
    FL0 = QL
    FR0 = QR
    FL1 = np.where(dryL, 0.0, QL * uL + 0.5 * g * width * hL * hL)
    FR1 = np.where(dryR, 0.0, QR * uR + 0.5 * g * width * hR * hR)

    denom = sR - sL
    safe = np.where(denom > 0.0, denom, 1.0)
    H0 = (sR * FL0 - sL * FR0 + sL * sR * (AR - AL)) / safe
    H1 = (sR * FL1 - sL * FR1 + sL * sR * (QR - QL)) / safe

    F0 = np.where(sL >= 0.0, FL0, np.where(sR <= 0.0, FR0, H0))
    F1 = np.where(sL >= 0.0, FL1, np.where(sR <= 0.0, FR1, H1))
    both_dry = dryL & dryR
    F0 = np.where(both_dry, 0.0, F0)
    F1 = np.where(both_dry, 0.0, F1)
    return F0, F1


def reach_step(A, Q, zb, width, dx, dt, g, dry_tol, manning):
    """One first-order step of a walled reach.

    Hydrostatic reconstruction + HLL + semi-implicit Manning friction.
    Returns new (A, Q) arrays; wall boundaries on both ends.
    """
    A = np.asarray(A, dtype=float)
    Q = np.asarray(Q, dtype=float)
    zb = np.asarray(zb, dtype=float)
    n = A.shape[0]
    h_tol = dry_tol / width
    wet = A > dry_tol
    h = A / width
    u = np.where(wet, Q / np.where(wet, A, 1.0), 0.0)

    # interface k sits between cell k-1 and cell k, k = 0..n; ends mirror
    hl = np.empty(n + 1)
    hr = np.empty(n + 1)
    ul = np.empty(n + 1)
    ur = np.empty(n + 1)
    zl = np.empty(n + 1)
    zr = np.empty(n + 1)
    hl[1:] = h
    hl[0] = h[0]
    ul[1:] = u
    ul[0] = -u[0]
    zl[1:] = zb
    zl[0] = zb[0]
    hr[:-1] = h
    hr[-1] = h[-1]
    ur[:-1] = u
    ur[-1] = -u[-1]
    zr[:-1] = zb
    zr[-1] = zb[-1]

    zmax = np.maximum(zl, zr)
    hls = np.maximum(0.0, hl + zl - zmax)
    hrs = np.maximum(0.0, hr + zr - zmax)

    F0, F1 = hll_flux_arrays(hls, ul, hrs, ur, width, g, h_tol)
    F0[0] = 0.0
    F0[-1] = 0.0

    half_gw = 0.5 * g * width
    # flux seen by the cell on the left / right of each interface
    Fm1 = F1 + half_gw * (hl * hl - hls * hls)
    Fp1 = F1 + half_gw * (hr * hr - hrs * hrs)

    lam = dt / dx
    A_new = A - lam * (F0[1:] - F0[:-1])
    Q_new = Q - lam * (Fm1[1:] - Fp1[:-1])

    wet_new = A_new > dry_tol
    if manning > 0.0:
        Asafe = np.where(wet_new, A_new, 1.0)
        k = dt * g * manning * manning * np.abs(Q_new) * width ** (4.0 / 3.0) / Asafe ** (7.0 / 3.0)
        Q_new = Q_new / (1.0 + k)
    Q_new = np.where(wet_new, Q_new, 0.0)
    return A_new, Q_new


def thomas_solve(lower, diag, upper, rhs):
    """Tridiagonal solve; ``lower[0]`` and ``upper[-1]`` are ignored."""
    n = diag.shape[0]
    ab = np.zeros((3, n))
    ab[0, 1:] = upper[:-1]
    ab[1] = diag
    ab[2, :-1] = lower[1:]
    return solve_banded((1, 1), ab, rhs)
