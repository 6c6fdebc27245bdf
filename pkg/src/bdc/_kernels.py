"""Compiled RK4 integrator for batches of bilinear DCMs with Balloon haemodynamics.

State layout per region: z, s, ln f, ln v, ln q.
"""

import math

import numba
import numpy as np


@numba.njit(cache=True, nogil=True, error_model="numpy")
def _deriv(x, jeff, drive, n, kappa, gamma_h, tau, inv_alpha, e0, dx):
    for i in range(n):
        acc = drive[i]
        for j in range(n):
            acc += jeff[i, j] * x[j]
        dx[i] = acc
    ln1me0 = math.log(1.0 - e0)
    for i in range(n):
        z = x[i]
        s = x[n + i]
        f = math.exp(x[2 * n + i])
        v = math.exp(x[3 * n + i])
        q = math.exp(x[4 * n + i])
        dx[n + i] = z - kappa[i] * s - gamma_h * (f - 1.0)
        dx[2 * n + i] = s / f
        vpow = math.exp(x[3 * n + i] * inv_alpha)
        dx[3 * n + i] = (f - vpow) / (tau[i] * v)
        extraction = (1.0 - math.exp(ln1me0 / f)) / e0
        dx[4 * n + i] = (f * extraction - vpow * q / v) / (tau[i] * q)


@numba.njit(cache=True, nogil=True, error_model="numpy")
def integrate_batch(a_off, a_self, b, c, transit, decay, epsilon, u, dt, n_steps, consts):
    """Integrate ``B`` parameter sets; returns BOLD at every grid point.

    Parameters
    ----------
    a_off : (B, n, n) off-diagonal coupling (diagonal ignored)
    a_self : (B, n) log-scaling of self-connections
    b : (B, m, n, n) modulatory matrices; diagonal acts inside the exponent
    c : (B, n, m) driving input weights
    transit, decay, epsilon : (B, n) haemodynamic log-scalings
    u : (m, >= n_steps) piecewise-constant inputs
    consts : (kappa0, gamma_h, tau0, alpha, E0, V0, TE, nu0, r0)

    Returns
    -------
    y : (B, n_steps + 1, n) observed signal; rows after a blow-up are NaN.
    """
    nb = a_off.shape[0]
    n = a_off.shape[1]
    m = u.shape[0]
    kappa0, gamma_h, tau0, alpha, e0, v0, te, nu0, r0 = (
        consts[0], consts[1], consts[2], consts[3], consts[4],
        consts[5], consts[6], consts[7], consts[8],
    )
    inv_alpha = 1.0 / alpha
    k1 = 4.3 * nu0 * e0 * te
    y = np.full((nb, n_steps + 1, n), np.nan)
    x = np.zeros(5 * n)
    xt = np.zeros(5 * n)
    k_1 = np.zeros(5 * n)
    k_2 = np.zeros(5 * n)
    k_3 = np.zeros(5 * n)
    k_4 = np.zeros(5 * n)
    jeff = np.zeros((n, n))
    drive = np.zeros(n)
    kappa = np.zeros(n)
    tau = np.zeros(n)
    k2 = np.zeros(n)
    k3 = np.zeros(n)
    for bi in range(nb):
        for i in range(n):
            kappa[i] = kappa0 * math.exp(decay[bi, i])
            tau[i] = tau0 * math.exp(transit[bi, i])
            eps = math.exp(epsilon[bi, i])
            k2[i] = eps * r0 * e0 * te
            k3[i] = 1.0 - eps
        for i in range(5 * n):
            x[i] = 0.0
        for i in range(n):
            y[bi, 0, i] = 0.0
        for step in range(n_steps):
            for i in range(n):
                for j in range(n):
                    jeff[i, j] = a_off[bi, i, j]
                expo = a_self[bi, i]
                dr = 0.0
                for k in range(m):
                    uk = u[k, step]
                    if uk != 0.0:
                        for j in range(n):
                            if j != i:
                                jeff[i, j] += uk * b[bi, k, i, j]
                        expo += uk * b[bi, k, i, i]
                        dr += c[bi, i, k] * uk
                jeff[i, i] = -0.5 * math.exp(expo)
                drive[i] = dr
            _deriv(x, jeff, drive, n, kappa, gamma_h, tau, inv_alpha, e0, k_1)
            for i in range(5 * n):
                xt[i] = x[i] + 0.5 * dt * k_1[i]
            _deriv(xt, jeff, drive, n, kappa, gamma_h, tau, inv_alpha, e0, k_2)
            for i in range(5 * n):
                xt[i] = x[i] + 0.5 * dt * k_2[i]
            _deriv(xt, jeff, drive, n, kappa, gamma_h, tau, inv_alpha, e0, k_3)
            for i in range(5 * n):
                xt[i] = x[i] + dt * k_3[i]
            _deriv(xt, jeff, drive, n, kappa, gamma_h, tau, inv_alpha, e0, k_4)
            finite = True
            for i in range(5 * n):
                x[i] += dt / 6.0 * (k_1[i] + 2.0 * k_2[i] + 2.0 * k_3[i] + k_4[i])
                if not math.isfinite(x[i]):
                    finite = False
            if not finite:
                break
            for i in range(n):
                v = math.exp(x[3 * n + i])
                q = math.exp(x[4 * n + i])
                y[bi, step + 1, i] = v0 * (
                    k1 * (1.0 - q) + k2[i] * (1.0 - q / v) + k3[i] * (1.0 - v)
                )
                if not math.isfinite(y[bi, step + 1, i]):
                    finite = False
            if not finite:
                for i in range(n):
                    y[bi, step + 1, i] = np.nan
                break
    return y
