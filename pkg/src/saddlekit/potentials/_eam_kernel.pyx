# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled EAM energy/force loop over a half pair list (batched over configurations)."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, floor

cnp.import_array()


cdef inline void _cubic(const double[:] c, double t, double *val, double *der) noexcept nogil:
    val[0] = ((c[0] * t + c[1]) * t + c[2]) * t + c[3]
    der[0] = (3.0 * c[0] * t + 2.0 * c[1]) * t + c[2]


def eam_batch(double[:, :, ::1] pos, double[:, ::1] shifts, cnp.intp_t[::1] pair_i,
              cnp.intp_t[::1] pair_j, cnp.intp_t[::1] types, double[:, :, ::1] F_c,
              double[:, :, :, ::1] rho_c, double[:, :, :, ::1] rphi_c, double drho, double dr,
              double rcut, Py_ssize_t nrho, Py_ssize_t nr):
    cdef Py_ssize_t B = pos.shape[0], N = pos.shape[1], P = pair_i.shape[0]
    cdef Py_ssize_t b, p, i, j, a, k, ti, tj
    cdef double rmax_tab = (nr - 1) * dr, rho_top = (nrho - 1) * drho
    cdef double vx, vy, vz, r, t, v1, d1, v2, d2, v3, d3, phi, dphi, dEdr, rho, rmin = 1e300
    E_out = np.zeros(B)
    F_out = np.zeros((B, N, 3))
    dens_arr = np.zeros(N)
    fder_arr = np.zeros(N)
    cdef double[::1] E = E_out
    cdef double[:, :, ::1] F = F_out
    cdef double[::1] dens = dens_arr
    cdef double[::1] fder = fder_arr
    with nogil:
        for b in range(B):
            for a in range(N):
                dens[a] = 0.0
            for p in range(P):
                i = pair_i[p]
                j = pair_j[p]
                vx = pos[b, j, 0] + shifts[p, 0] - pos[b, i, 0]
                vy = pos[b, j, 1] + shifts[p, 1] - pos[b, i, 1]
                vz = pos[b, j, 2] + shifts[p, 2] - pos[b, i, 2]
                r = sqrt(vx * vx + vy * vy + vz * vz)
                if r < rmin:
                    rmin = r
                if r >= rcut or r >= rmax_tab:
                    continue
                k = <Py_ssize_t> floor(r / dr)
                if k > nr - 2:
                    k = nr - 2
                t = r - k * dr
                _cubic(rho_c[types[i], types[j], k], t, &v1, &d1)
                _cubic(rho_c[types[j], types[i], k], t, &v2, &d2)
                dens[i] += v1
                dens[j] += v2
            for a in range(N):
                rho = dens[a]
                k = <Py_ssize_t> floor(rho / drho)
                if k < 0:
                    k = 0
                if k > nrho - 2:
                    k = nrho - 2
                if rho >= rho_top:
                    _cubic(F_c[types[a], k], drho, &v1, &d1)
                    v1 = v1 + d1 * (rho - rho_top)
                else:
                    _cubic(F_c[types[a], k], rho - k * drho, &v1, &d1)
                E[b] += v1
                fder[a] = d1
            for p in range(P):
                i = pair_i[p]
                j = pair_j[p]
                vx = pos[b, j, 0] + shifts[p, 0] - pos[b, i, 0]
                vy = pos[b, j, 1] + shifts[p, 1] - pos[b, i, 1]
                vz = pos[b, j, 2] + shifts[p, 2] - pos[b, i, 2]
                r = sqrt(vx * vx + vy * vy + vz * vz)
                if r >= rcut or r >= rmax_tab:
                    continue
                k = <Py_ssize_t> floor(r / dr)
                if k > nr - 2:
                    k = nr - 2
                t = r - k * dr
                ti = types[i]
                tj = types[j]
                _cubic(rho_c[ti, tj, k], t, &v1, &d1)
                _cubic(rho_c[tj, ti, k], t, &v2, &d2)
                _cubic(rphi_c[ti, tj, k], t, &v3, &d3)
                phi = v3 / r
                dphi = (d3 - phi) / r
                E[b] += phi
                dEdr = (fder[i] * d1 + fder[j] * d2 + dphi) / r
                F[b, i, 0] += dEdr * vx
                F[b, i, 1] += dEdr * vy
                F[b, i, 2] += dEdr * vz
                F[b, j, 0] -= dEdr * vx
                F[b, j, 1] -= dEdr * vy
                F[b, j, 2] -= dEdr * vz
    return E_out, F_out, (rmin if P > 0 else np.inf)
