"""Vectorized numpy evaluation of EAM energies and forces over a pair list.

Mirrors ``_eam_kernel.pyx`` line for line in arithmetic; used when the
compiled extension is unavailable.
"""

from __future__ import annotations

import numpy as np


def eam_batch(pos, shifts, pair_i, pair_j, types, F_c, rho_c, rphi_c, drho, dr, rcut, nrho, nr):
    """Energies ``(B,)`` and forces ``(B, N, 3)`` for a batch of configurations.

    ``shifts`` are Cartesian image offsets per pair; pairs are a half list.
    Returns ``(E, F, rmin)`` where ``rmin`` is the smallest pair distance seen.
    """
    B, N, _ = pos.shape
    vec = pos[:, pair_j, :] + shifts[None] - pos[:, pair_i, :]
    r = np.sqrt(np.einsum("bpk,bpk->bp", vec, vec))
    rmin = float(r.min()) if r.size else np.inf
    rmax_tab = (nr - 1) * dr
    live = (r < rcut) & (r < rmax_tab)
    ti = types[pair_i]
    tj = types[pair_j]
    rs = np.where(live, r, dr)
    idx = np.clip(np.floor(rs / dr).astype(np.intp), 0, nr - 2)
    t = rs - idx * dr

    def ev(coef, a, b):
        c = coef[a[None, :], b[None, :], idx]
        val = ((c[..., 0] * t + c[..., 1]) * t + c[..., 2]) * t + c[..., 3]
        der = (3.0 * c[..., 0] * t + 2.0 * c[..., 1]) * t + c[..., 2]
        return np.where(live, val, 0.0), np.where(live, der, 0.0)

    rho_ij, drho_ij = ev(rho_c, ti, tj)  # density at i from j
    rho_ji, drho_ji = ev(rho_c, tj, ti)
    rp, drp = ev(rphi_c, ti, tj)
    phi = rp / rs
    dphi = (drp - phi) / rs

    dens = np.zeros((B, N))
    for b in range(B):
        dens[b] = np.bincount(pair_i, rho_ij[b], minlength=N) + np.bincount(pair_j, rho_ji[b], minlength=N)

    k = np.clip(np.floor(dens / drho).astype(np.intp), 0, nrho - 2)
    beyond = dens >= (nrho - 1) * drho
    tt = np.where(beyond, drho, dens - k * drho)
    c = F_c[types[None, :], k]
    Fval = ((c[..., 0] * tt + c[..., 1]) * tt + c[..., 2]) * tt + c[..., 3]
    Fder = (3.0 * c[..., 0] * tt + 2.0 * c[..., 1]) * tt + c[..., 2]
    Fval = np.where(beyond, Fval + Fder * (dens - (nrho - 1) * drho), Fval)

    E = Fval.sum(axis=1) + np.where(live, phi, 0.0).sum(axis=1)
    dEdr = Fder[:, pair_i] * drho_ij + Fder[:, pair_j] * drho_ji + np.where(live, dphi, 0.0)
    fvec = (dEdr / np.where(live, r, 1.0))[..., None] * vec
    F = np.zeros((B, N, 3))
    for b in range(B):
        for d in range(3):
            F[b, :, d] = np.bincount(pair_i, fvec[b, :, d], minlength=N) - np.bincount(pair_j, fvec[b, :, d], minlength=N)
    return E, F, rmin
