"""Uncertainty-aware Dimer.

Per-state operations (:func:`hvp_estimate`, :func:`adapt_dimer_length`,
:func:`dimer_rotate`, :func:`dimer_translate`, :func:`dimer_residual`,
:func:`handoff`) act on a :class:`DimerState`. :func:`run_dimer_batch`
advances one dimer per seed in lockstep through the same array kernels.

Noise for seed ``s`` at iteration ``k`` is keyed by ``(s, k, 0)`` with the
tags ``TAG_DIMER_PLUS``, ``TAG_DIMER_MINUS`` and ``TAG_DIMER_CENTER``, so the
standard and weighted variants see identical draws.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from . import rng
from .covariance import Dense, to_dense
from .errors import ContractError, NumericalError
from .neb import hj_tangents
from .potentials.oracle import StochasticForceOracle, sample_force

__all__ = [
    "DIMER_VARIANTS",
    "DimerParams",
    "DimerState",
    "DimerProblem",
    "DimerResult",
    "householder_basis",
    "hvp_estimate",
    "hvp_from_members",
    "adapt_dimer_length",
    "dimer_rotate",
    "dimer_translate",
    "dimer_residual",
    "handoff_ratio",
    "handoff",
    "run_dimer_batch",
]

DIMER_VARIANTS = ("std", "ua")


@dataclass(frozen=True)
class DimerParams:
    """Dimer settings; defaults are the planar benchmark values."""

    alpha: float = 0.035
    beta: float = 0.018
    lam: float = 0.018
    lam_H: float = 0.030
    trust_radius: float = 0.035
    theta_max: float = 0.18
    h: float = 0.055
    eta_H: float = math.inf
    h_min: float = 1e-3
    h_max: float = 0.5
    eta_hand: float = 1.0
    epsilon: float = 1e-12
    variant: str = "ua"
    normalize_trace: bool = True
    success_radius: float = 0.08

    def __post_init__(self):
        if self.variant not in DIMER_VARIANTS:
            raise ContractError(f"unknown Dimer variant {self.variant!r}; expected one of {DIMER_VARIANTS}")
        for name in ("alpha", "beta", "lam", "lam_H", "trust_radius", "theta_max", "h", "h_min", "h_max", "eta_H", "eta_hand", "epsilon"):
            if not getattr(self, name) > 0:
                raise ContractError(f"{name} must be positive")
        if self.theta_max > math.pi / 2:
            raise ContractError("theta_max must not exceed pi/2")
        if not self.h_min <= self.h <= self.h_max:
            raise ContractError("need h_min <= h <= h_max")

    @property
    def rho_beta(self) -> float:
        return self.beta / self.alpha

    @property
    def weighted(self) -> bool:
        return self.variant == "ua"


@dataclass
class DimerState:
    x: np.ndarray
    v: np.ndarray
    h: float
    iteration: int = 0

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        v = np.asarray(self.v, dtype=float)
        nv = np.linalg.norm(v)
        if nv == 0:
            raise ContractError("dimer direction must be nonzero")
        self.v = v / nv
        if self.h <= 0:
            raise ContractError("dimer length must be positive")


# ---------------------------------------------------------------------------
# array kernels shared by the per-state and batched paths


def householder_basis(v):
    """Orthonormal basis of the complement of unit ``v``, shape ``(..., d, d-1)``.

    Built from the Householder reflector that maps ``v`` to ``-sign(v_0) e_0``;
    its remaining columns span ``v``-perp.
    """
    v = np.asarray(v, dtype=float)
    d = v.shape[-1]
    s = np.where(v[..., 0] >= 0, 1.0, -1.0)
    w = v.copy()
    w[..., 0] += s
    ww = np.einsum("...i,...i->...", w, w)
    H = np.eye(d) - 2.0 * w[..., :, None] * w[..., None, :] / ww[..., None, None]
    return H[..., :, 1:]


def _rotate_arrays(v, Hv, S_Hv, params: DimerParams, weighted: bool, fallback=None):
    """Retracted rotation with trust angle; arrays ``(..., d)`` and ``(..., d, d)``."""
    r = Hv - v * np.einsum("...i,...i->...", v, Hv)[..., None]
    if weighted:
        B = householder_basis(v)
        d1 = B.shape[-1]
        A = np.einsum("...ji,...jk,...kl->...il", B, S_Hv, B) + params.lam_H * np.eye(d1)
        rt = np.einsum("...ji,...j->...i", B, r)
        if params.normalize_trace:
            C = np.linalg.inv(A)
            C = C * (d1 / np.trace(C, axis1=-2, axis2=-1))[..., None, None]
            dt = np.einsum("...ij,...j->...i", C, rt)
        else:
            dt = np.linalg.solve(A, rt[..., None])[..., 0]
        dv = -params.beta * np.einsum("...ij,...j->...i", B, dt)
        if fallback is not None:
            dv = np.where(np.asarray(fallback)[..., None], -params.beta * r, dv)
    else:
        dv = -params.beta * r
    norm = np.linalg.norm(dv, axis=-1)
    cap = math.tan(params.theta_max)
    scale = np.where(norm > cap, cap / np.where(norm > 0, norm, 1.0), 1.0)
    dv = dv * scale[..., None]
    vn = v + dv
    return vn / np.linalg.norm(vn, axis=-1)[..., None]


def _metric(S, lam, normalize):
    d = S.shape[-1]
    G = np.linalg.inv(S + lam * np.eye(d))
    if normalize:
        G = G * (d / np.trace(G, axis1=-2, axis2=-1))[..., None, None]
    return G


def _translate_arrays(v, force, sigma, params: DimerParams, weighted: bool, penalty=None):
    g = -force
    refl = -g + 2.0 * v * np.einsum("...i,...i->...", v, g)[..., None]
    if weighted:
        G = _metric(sigma, params.lam, params.normalize_trace)
        refl = np.einsum("...ij,...j->...i", G, refl)
    step = params.alpha * refl
    if penalty is not None:
        step = step - params.alpha * penalty
    norm = np.linalg.norm(step, axis=-1)
    scale = np.where(norm > params.trust_radius, params.trust_radius / np.where(norm > 0, norm, 1.0), 1.0)
    return step * scale[..., None]


# ---------------------------------------------------------------------------
# per-state operations


def hvp_estimate(
    oracle: StochasticForceOracle,
    x,
    v,
    h: float,
    stream_key: Tuple[int, int],
    cross: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, Dense]:
    """Centered-difference Hessian-vector product and its covariance.

    ``Hv = -(F(x+hv) - F(x-hv)) / (2h)`` from one query per endpoint and
    ``Sigma_Hv = (Sigma_+ + Sigma_-) / (4 h^2)``. When the paired
    cross-covariance ``cross`` is supplied, ``(cross + cross^T) / (4 h^2)``
    is subtracted.
    """
    if h <= 0:
        raise ContractError("dimer length h must be positive")
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    seed, iteration = stream_key
    Fp, Sp = sample_force(oracle, x + h * v, (seed, iteration, 0), rng.TAG_DIMER_PLUS)
    Fm, Sm = sample_force(oracle, x - h * v, (seed, iteration, 0), rng.TAG_DIMER_MINUS)
    Hv = -(Fp - Fm) / (2.0 * h)
    S = (to_dense(Sp) + to_dense(Sm)) / (4.0 * h * h)
    if cross is not None:
        cross = np.asarray(cross, dtype=float)
        S = S - (cross + cross.T) / (4.0 * h * h)
    return Hv, Dense(S)


def hvp_from_members(F_plus, F_minus, h: float, s_H: float = 1.0, floor: float = 0.0) -> Tuple[np.ndarray, Dense]:
    """Member route: per-member centered differences, their mean and calibrated covariance.

    ``F_plus`` and ``F_minus`` are ``(M, d)`` member forces at ``x +- h v``.
    """
    Fp = np.asarray(F_plus, dtype=float)
    Fm = np.asarray(F_minus, dtype=float)
    if Fp.shape != Fm.shape or Fp.ndim != 2 or Fp.shape[0] < 2:
        raise ContractError("member forces must be matching (M, d) arrays with M >= 2")
    if h <= 0:
        raise ContractError("dimer length h must be positive")
    H = -(Fp - Fm) / (2.0 * h)
    mean = H.mean(axis=0)
    D = H - mean
    S = s_H**2 * (D.T @ D) / (H.shape[0] - 1) + floor**2 * np.eye(H.shape[1])
    return mean, Dense(S)


def _noise_ratio(v, Hv, S_Hv, eps):
    P = np.eye(v.shape[0]) - np.outer(v, v)
    num = float(np.trace(P @ S_Hv @ P))
    r = P @ Hv
    return num / (float(r @ r) + eps)


def adapt_dimer_length(state: DimerState, Hv, Sigma_Hv, params: DimerParams) -> Tuple[float, bool]:
    """Smallest doubling of ``h`` meeting the HVP noise-ratio bound.

    The ratio at a larger ``h`` is predicted from the ``h^-2`` law with the
    endpoint covariance frozen. Returns ``(h_new, fallback)``; ``fallback``
    is set when the bound fails even at ``h_max``.
    """
    S = to_dense(Sigma_Hv) if not isinstance(Sigma_Hv, np.ndarray) else Sigma_Hv
    ratio = _noise_ratio(state.v, np.asarray(Hv, dtype=float), S, params.epsilon)
    h = state.h
    if ratio <= params.eta_H:
        return h, False
    while h < params.h_max:
        h_next = min(2.0 * h, params.h_max)
        ratio *= (h / h_next) ** 2
        h = h_next
        if ratio <= params.eta_H:
            return h, False
    return h, True


def dimer_rotate(state: DimerState, Hv, Sigma_Hv, params: DimerParams, fallback: bool = False) -> np.ndarray:
    """Covariance-weighted rotation on the sphere with trust angle and retraction.

    The tangent system ``(P S P + lam_H P)`` is solved in a Householder basis
    of ``v``-perp. The standard variant and the fallback mode use ``C = P``.
    """
    S = to_dense(Sigma_Hv) if not isinstance(Sigma_Hv, np.ndarray) else Sigma_Hv
    weighted = params.weighted and not fallback
    return _rotate_arrays(state.v, np.asarray(Hv, dtype=float), S, params, weighted)


def dimer_translate(state: DimerState, force_sample, sigma, params: DimerParams, penalty_grad=None) -> np.ndarray:
    """New center after the metric reflected-gradient step, capped at the trust radius."""
    S = to_dense(sigma) if not isinstance(sigma, np.ndarray) else sigma
    step = _translate_arrays(state.v, np.asarray(force_sample, dtype=float), S, params, params.weighted, penalty_grad)
    if not np.all(np.isfinite(step)):
        raise NumericalError("non-finite Dimer translation step")
    return state.x + step


def dimer_residual(x, v, mean_potential, fd_step: float = 1e-5) -> float:
    """``|P_v H v|^2 + |R_v grad E|^2`` on the mean potential.

    ``H v`` is a deterministic central difference of the mean gradient.
    """
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    v = v / np.linalg.norm(v)
    g = mean_potential.gradient(x)
    Hv = (mean_potential.gradient(x + fd_step * v) - mean_potential.gradient(x - fd_step * v)) / (2.0 * fd_step)
    r = Hv - v * (v @ Hv)
    refl = -g + 2.0 * v * (v @ g)
    return float(r @ r + refl @ refl)


def handoff_ratio(g, tau, G, Sigma, epsilon: float = 1e-12, probes: int = 0, seed: int = 0) -> float:
    """Signal-to-noise ratio of the path-normal residual at the handoff image.

    Numerator ``|Q G g|``; denominator ``sqrt(tr(Q G Sigma G Q^T))`` with
    ``Q = I - G tau tau^T / (tau^T G tau)``. The trace is exact when
    ``probes == 0`` and a Rademacher estimate otherwise.
    """
    g = np.asarray(g, dtype=float)
    tau = np.asarray(tau, dtype=float)
    G = np.asarray(G, dtype=float)
    Sigma = np.asarray(Sigma, dtype=float)
    d = g.shape[0]
    Gt = G @ tau
    Q = np.eye(d) - np.outer(Gt, tau) / float(tau @ Gt)
    M = Q @ G
    num = float(np.linalg.norm(M @ g))
    if probes == 0:
        tr = float(np.trace(M @ Sigma @ M.T))
    else:
        Z = np.stack([rng.rademacher(seed, 0, j, d) for j in range(probes)])
        W = Z @ M  # rows z^T M
        tr = float(np.mean(np.einsum("pi,ij,pj->p", W, Sigma, W)))
    return num / (math.sqrt(max(tr, 0.0)) + epsilon)


def handoff(
    images,
    climbing: int,
    oracle: StochasticForceOracle,
    params: DimerParams,
    neb_trust_radius: float,
    stream_key: Tuple[int, int] = (0, 0),
    probes: int = 0,
) -> Tuple[bool, DimerState, float]:
    """Seed a Dimer run from the climbing image ``climbing`` (1-based) of a band.

    Returns ``(accept, state, ratio)``. The state starts at the image with
    the normalized local tangent as direction.
    """
    X = np.asarray(images, dtype=float)
    c = int(climbing)
    if not 1 <= c <= X.shape[0] - 2:
        raise ContractError("climbing index must be interior")
    E = np.array([oracle.mean.energy(X[j]) for j in (c - 1, c, c + 1)])
    tau = hj_tangents(X[c - 1:c + 2], E)[0]
    F, S = sample_force(oracle, X[c], (stream_key[0], stream_key[1], c))
    Sd = to_dense(S)
    G = _metric(Sd, params.lam, params.normalize_trace)
    ratio = handoff_ratio(-F, tau, G, Sd, params.epsilon, probes, seed=stream_key[0])
    trust = min(neb_trust_radius, 2.0 * float(np.linalg.norm(X[c] - X[c - 1])))
    state = DimerState(X[c].copy(), tau, params.h)
    return ratio <= params.eta_hand, state, trust


# ---------------------------------------------------------------------------
# batched engine


@dataclass
class DimerProblem:
    """``energy_gradient`` maps ``(..., d)`` to ``(E, grad)``; ``sigma`` maps to dense ``(..., d, d)``."""

    x0: np.ndarray
    v0: np.ndarray
    energy_gradient: Callable
    sigma: Callable
    noise_sqrt: Callable
    noise_multiplier: float = 1.0
    saddle: Optional[np.ndarray] = None
    hessian: Optional[Callable] = None


@dataclass
class DimerResult:
    variant: str
    seeds: np.ndarray
    refl_residual: np.ndarray  # (S, K+1) |R_v grad E|^2 on the mean potential
    distance: np.ndarray  # (S, K+1) distance to the reference saddle (nan if unknown)
    final_x: np.ndarray
    final_v: np.ndarray
    success: np.ndarray  # (S,) bool
    oracle_calls: int = 0
    h_trace: np.ndarray = field(default_factory=lambda: np.zeros(0))


def run_dimer_batch(problem: DimerProblem, params: DimerParams, seeds: Sequence[int], iterations: int) -> DimerResult:
    """Advance one dimer per seed for ``iterations`` rotate-then-translate steps.

    Each iteration queries the two endpoints for the rotation and a fresh
    center sample for the translation (three oracle calls).
    """
    seeds = np.asarray(seeds, dtype=np.uint64)
    S = seeds.shape[0]
    d = int(np.asarray(problem.x0).shape[-1])
    m = float(problem.noise_multiplier)
    m2 = m * m
    x = np.broadcast_to(np.asarray(problem.x0, dtype=float), (S, d)).copy()
    v0 = np.asarray(problem.v0, dtype=float)
    v = np.broadcast_to(v0 / np.linalg.norm(v0), (S, d)).copy()
    h = np.full(S, params.h)
    adaptive = math.isfinite(params.eta_H)
    refl = np.empty((S, iterations + 1))
    dist = np.full((S, iterations + 1), np.nan)
    saddle = None if problem.saddle is None else np.asarray(problem.saddle, dtype=float)

    def sample(points, k, tag):
        _, g = problem.energy_gradient(points)
        sig = problem.sigma(points)
        if m == 0.0:
            return -g, m2 * sig
        xi = rng.normals(seeds, k, 0, d, tag=tag)
        return -g + m * np.einsum("...ij,...j->...i", problem.noise_sqrt(sig), xi), m2 * sig

    def record(k):
        _, g = problem.energy_gradient(x)
        r = -g + 2.0 * v * np.einsum("...i,...i->...", v, g)[..., None]
        refl[:, k] = np.einsum("...i,...i->...", r, r)
        if saddle is not None:
            dist[:, k] = np.linalg.norm(x - saddle, axis=-1)

    record(0)
    for k in range(iterations):
        hh = h[:, None]
        Fp, Sp = sample(x + hh * v, k, rng.TAG_DIMER_PLUS)
        Fm, Sm = sample(x - hh * v, k, rng.TAG_DIMER_MINUS)
        Hv = -(Fp - Fm) / (2.0 * hh)
        S_Hv = (Sp + Sm) / (4.0 * (h * h)[:, None, None])
        fallback = None
        if adaptive:
            fallback = np.zeros(S, dtype=bool)
            for row in range(S):
                st = DimerState(x[row], v[row], float(h[row]), k)
                h[row], fallback[row] = adapt_dimer_length(st, Hv[row], S_Hv[row], params)
        v = _rotate_arrays(v, Hv, S_Hv, params, params.weighted, fallback)
        Fc, Sc = sample(x, k, rng.TAG_DIMER_CENTER)
        step = _translate_arrays(v, Fc, Sc, params, params.weighted)
        if not np.all(np.isfinite(step)):
            raise NumericalError(f"non-finite Dimer step at iteration {k}")
        x = x + step
        record(k + 1)
    if saddle is not None:
        success = dist[:, -1] <= params.success_radius
    else:
        success = np.ones(S, dtype=bool)
    return DimerResult(params.variant, seeds, refl, dist, x, v, success, 3 * S * iterations, h.copy())
