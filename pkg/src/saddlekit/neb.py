"""Uncertainty-aware nudged elastic band.

The module has two layers:

* per-band operations (:func:`hj_tangent`, :func:`oblique_project`,
  :func:`ua_neb_forces`, :func:`neb_step`, :func:`neb_residual`,
  :func:`check_stop_neb`, :func:`al_trigger_eval`) acting on a :class:`Band`;
* a vectorized engine (:func:`run_neb_batch`) that advances one band per seed
  in lockstep. It reuses the same array kernels, so a one-seed batch and the
  per-band path agree.

Metrics are stored as block-diagonal stacks ``(..., nb, b, b)``: one 2x2 block
for planar problems, one 3x3 block per atom for atomistic ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import rng
from .covariance import apply_sigma, lambda_max, to_dense
from .errors import ContractError, NumericalError

__all__ = [
    "VARIANTS",
    "NebParams",
    "Band",
    "NebProblem",
    "NebResult",
    "hj_tangent",
    "hj_tangents",
    "smooth_tangents",
    "oblique_project",
    "metric_blocks",
    "apply_blocks",
    "neb_force_arrays",
    "ua_neb_forces",
    "neb_step",
    "neb_residual",
    "check_stop_neb",
    "al_trigger_eval",
    "reparametrize",
    "linear_band",
    "run_neb_batch",
    "trust_ratio_step",
]

VARIANTS = ("std", "pen", "al", "metric", "diag", "ua")

# variant -> (metric kind, metric spring, penalty allowed, label refresh)
_VARIANT_FLAGS = {
    "std": ("none", False, False, False),
    "pen": ("none", False, True, False),
    "al": ("none", False, False, True),
    "metric": ("full", False, False, False),
    "diag": ("diag", True, True, False),
    "ua": ("full", True, True, False),
}


@dataclass(frozen=True)
class NebParams:
    """Band optimizer settings; defaults are the planar benchmark values."""

    n_images: int = 21
    k_s: float = 2.0
    alpha: float = 0.045
    trust_radius: float = 0.028
    lam: float = 0.006
    gamma0: float = 0.004
    gamma_k0: float = 180.0
    gamma_p: float = 1.25
    omega_tau: float = 0.0
    omega_k0: float = 50.0
    reparam_interval: int = 20
    variant: str = "ua"
    climb_start: Optional[int] = 250
    kappa_E: float = 0.0
    eps_force: float = 1e-3
    eps_spring: float = 1e-3
    eps_unc: float = 1.0
    eta_var: float = math.inf
    eta_rel: float = math.inf
    eta_bar: float = math.inf
    rho_s: float = 1.0
    epsilon: float = 1e-12
    normalize_trace: bool = True
    climb_reselect: int = 1
    al_interval: int = 25
    al_count: int = 2
    diag_penalty: bool = True
    trust_ratio: bool = False
    rho_min: float = 0.1
    mu_psi: float = 0.0

    def __post_init__(self):
        if self.variant not in _VARIANT_FLAGS:
            raise ContractError(f"unknown NEB variant {self.variant!r}; expected one of {VARIANTS}")
        if self.k_s <= 0 or self.alpha <= 0 or self.trust_radius <= 0:
            raise ContractError("k_s, alpha and trust_radius must be positive")
        if self.n_images < 1:
            raise ContractError("need at least one interior image")
        if self.metric_kind != "none" and self.lam <= 0:
            raise ContractError("metric variants need lam > 0")
        if not 0.0 <= self.omega_tau < 1.0:
            raise ContractError("omega_tau must lie in [0, 1)")

    @property
    def metric_kind(self) -> str:
        return _VARIANT_FLAGS[self.variant][0]

    @property
    def metric_spring(self) -> bool:
        return _VARIANT_FLAGS[self.variant][1]

    @property
    def uses_penalty(self) -> bool:
        flag = _VARIANT_FLAGS[self.variant][2]
        if self.variant == "diag":
            flag = self.diag_penalty
        return flag and self.gamma0 > 0

    @property
    def label_refresh(self) -> bool:
        return _VARIANT_FLAGS[self.variant][3]

    def gamma(self, k: int) -> float:
        if not self.uses_penalty:
            return 0.0
        return self.gamma0 * (1.0 + k / self.gamma_k0) ** (-self.gamma_p)

    def omega(self, k: int) -> float:
        if self.omega_tau == 0.0:
            return 0.0
        return self.omega_tau / (1.0 + k / self.omega_k0)


# ---------------------------------------------------------------------------
# array kernels (leading axes are batch axes)


def _unit(v, eps=0.0):
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.where(n > eps, n, 1.0)


def hj_tangents(X, E):
    """Improved (energy-weighted) tangents of all interior images.

    ``X`` is ``(..., n+2, d)`` and ``E`` is ``(..., n+2)``; returns unit
    vectors ``(..., n, d)``.
    """
    tp = X[..., 2:, :] - X[..., 1:-1, :]
    tm = X[..., 1:-1, :] - X[..., :-2, :]
    Ep = E[..., 2:]
    Ei = E[..., 1:-1]
    Em = E[..., :-2]
    dp = np.abs(Ep - Ei)
    dm = np.abs(Em - Ei)
    dmax = np.maximum(dp, dm)[..., None]
    dmin = np.minimum(dp, dm)[..., None]
    mixed = np.where((Ep > Em)[..., None], tp * dmax + tm * dmin, tp * dmin + tm * dmax)
    up = ((Ep > Ei) & (Ei > Em))[..., None]
    down = ((Ep < Ei) & (Ei < Em))[..., None]
    raw = np.where(up, tp, np.where(down, tm, mixed))
    # flat energies give a zero blend; fall back to the secant sum
    n = np.linalg.norm(raw, axis=-1, keepdims=True)
    raw = np.where(n > 0, raw, tp + tm)
    return _unit(raw)


def smooth_tangents(raw, prev, omega: float):
    """Relaxed tangent ``normalize((1 - w) raw + w prev)``; falls back to ``raw`` on cancellation."""
    if prev is None or omega == 0.0:
        return raw
    blend = (1.0 - omega) * raw + omega * prev
    n = np.linalg.norm(blend, axis=-1, keepdims=True)
    return np.where(n > 1e-12, blend / np.where(n > 0, n, 1.0), raw)


def metric_blocks(sigma_blocks, lam: float, kind: str = "full", normalize: bool = True):
    """``G = (Sigma + lam I)^-1`` per block, optionally rescaled to ``tr G = d`` per image.

    ``sigma_blocks`` has shape ``(..., nb, b, b)``; the trace normalization is
    taken over the last two block axes jointly (one configuration).
    """
    S = np.asarray(sigma_blocks, dtype=float)
    b = S.shape[-1]
    if kind == "diag":
        S = S * np.eye(b)
    A = S + lam * np.eye(b)
    if b == 2:
        det = A[..., 0, 0] * A[..., 1, 1] - A[..., 0, 1] * A[..., 1, 0]
        if np.any(det <= 0):
            raise NumericalError("metric block is not positive definite")
        G = np.empty_like(A)
        G[..., 0, 0] = A[..., 1, 1] / det
        G[..., 1, 1] = A[..., 0, 0] / det
        G[..., 0, 1] = -A[..., 0, 1] / det
        G[..., 1, 0] = -A[..., 1, 0] / det
    else:
        G = np.linalg.inv(A)
    if normalize:
        d = S.shape[-3] * b
        tr = np.trace(G, axis1=-2, axis2=-1).sum(axis=-1)
        G = G * (d / tr)[..., None, None, None]
    return G


def apply_blocks(G, z):
    """Block-diagonal product; ``G`` is ``(..., nb, b, b)``, ``z`` is ``(..., nb*b)``."""
    nb, b = G.shape[-3], G.shape[-1]
    zb = z.reshape(z.shape[:-1] + (nb, b))
    return np.einsum("...kij,...kj->...ki", G, zb).reshape(z.shape)


def _dot(a, b):
    return np.einsum("...i,...i->...", a, b)


def _oblique(Gtau, Gz, tau, eps):
    denom = _dot(tau, Gtau)
    if np.any(denom <= eps):
        raise NumericalError("degenerate metric-tangent pairing (tau^T G tau <= epsilon)")
    par = Gtau * (_dot(tau, Gz) / denom)[..., None]
    return Gz - par, par


def oblique_project(G_apply: Callable, tau, z, epsilon: float = 1e-14):
    """Split ``z`` into ``(perp, par)`` with ``par = G tau (tau.z)/(tau.G tau)``.

    ``perp`` is Euclidean-orthogonal to ``tau``; ``perp + par = z``.
    """
    tau = np.asarray(tau, dtype=float)
    z = np.asarray(z, dtype=float)
    Gtau = G_apply(tau)
    denom = float(tau @ Gtau)
    if denom <= epsilon:
        raise NumericalError("degenerate metric-tangent pairing (tau^T G tau <= epsilon)")
    par = Gtau * (float(tau @ z) / denom)
    return z - par, par


def neb_force_arrays(X, tau, ghat, G, params: NebParams, climb=None):
    """Variant-specific band forces.

    Parameters
    ----------
    X : (..., n+2, d) band coordinates
    tau : (..., n, d) unit tangents
    ghat : (..., n, d) gradient samples (minus the sampled force)
    G : (..., n, nb, b, b) metric blocks or None for Euclidean variants
    climb : (...,) int, climbing image position among interior images or -1

    Returns
    -------
    force : (..., n, d)
    normal : (..., n, d) the projected physical part (before spring)
    spacing : (..., n) metric spacing mismatch ``|x_{i+1}-x_i| - |x_i-x_{i-1}|``
    """
    dp = X[..., 2:, :] - X[..., 1:-1, :]
    dm = X[..., 1:-1, :] - X[..., :-2, :]
    euclid = params.metric_kind == "none" or G is None
    if euclid:
        par = tau * _dot(tau, ghat)[..., None]
        normal = -(ghat - par)
        climb_force = -ghat + 2.0 * par
    else:
        Gg = apply_blocks(G, ghat)
        Gt = apply_blocks(G, tau)
        perp, par = _oblique(Gt, Gg, tau, params.epsilon)
        normal = -perp
        climb_force = -Gg + 2.0 * par
    if params.metric_spring and not euclid:
        lp = np.sqrt(np.clip(_dot(dp, apply_blocks(G, dp)), 0.0, None))
        lm = np.sqrt(np.clip(_dot(dm, apply_blocks(G, dm)), 0.0, None))
        scale = 1.0 / np.sqrt(_dot(tau, Gt))
        spacing = lp - lm
        spring = (params.k_s * spacing * scale)[..., None] * tau
    else:
        spacing = np.linalg.norm(dp, axis=-1) - np.linalg.norm(dm, axis=-1)
        spring = (params.k_s * spacing)[..., None] * tau
    force = normal + spring
    if climb is not None:
        climb = np.asarray(climb)
        n = tau.shape[-2]
        sel = (np.arange(n) == climb[..., None])[..., None]
        force = np.where(sel, climb_force, force)
    return force, normal, spacing


def reparametrize(X, pin=None):
    """Redistribute interior images to equal arc length along the polyline.

    ``X`` is ``(n+2, d)``. If ``pin`` (interior index, 1-based within the
    band) is given, that image is held and each side is redistributed
    separately.
    """
    X = np.asarray(X, dtype=float)
    if pin is not None and 0 < pin < X.shape[0] - 1:
        left = reparametrize(X[: pin + 1])
        right = reparametrize(X[pin:])
        return np.concatenate([left, right[1:]], axis=0)
    seg = np.linalg.norm(np.diff(X, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    if s[-1] <= 0:
        return X.copy()
    target = np.linspace(0.0, s[-1], X.shape[0])
    k = np.clip(np.searchsorted(s, target, side="right") - 1, 0, X.shape[0] - 2)
    w = np.where(seg[k] > 0, (target - s[k]) / np.where(seg[k] > 0, seg[k], 1.0), 0.0)
    out = X[k] + w[:, None] * (X[k + 1] - X[k])
    out[0] = X[0]
    out[-1] = X[-1]
    return out


def linear_band(a, b, n_images: int):
    """Straight-line initial band with ``n_images`` interior images."""
    t = np.linspace(0.0, 1.0, n_images + 2)[:, None]
    return (1.0 - t) * np.asarray(a, dtype=float) + t * np.asarray(b, dtype=float)


# ---------------------------------------------------------------------------
# per-band API


@dataclass
class Band:
    """Band state. ``images`` includes both fixed endpoints (``(n+2, d)``)."""

    images: np.ndarray
    energies: Optional[np.ndarray] = None
    tangents: Optional[np.ndarray] = None
    smoothed: Optional[np.ndarray] = None
    metrics: Optional[np.ndarray] = None
    climbing: Optional[int] = None

    def __post_init__(self):
        self.images = np.array(self.images, dtype=float)
        if self.images.ndim != 2 or self.images.shape[0] < 3:
            raise ContractError("a band needs two endpoints and at least one interior image")

    @property
    def n(self) -> int:
        return self.images.shape[0] - 2

    def refresh_energies(self, potential):
        self.energies = np.asarray(potential.energy(self.images), dtype=float)
        return self.energies


def hj_tangent(band: Band, i: int, omega_tau: float = 0.0):
    """Tangent of interior image ``i`` (1-based); updates the band's smoothed-tangent state."""
    if not 1 <= i <= band.n:
        raise ContractError(f"interior index {i} outside 1..{band.n}")
    if band.energies is None:
        raise ContractError("band energies are not cached")
    raw = hj_tangents(band.images[i - 1:i + 2], band.energies[i - 1:i + 2])[0]
    if band.smoothed is None:
        band.smoothed = np.full((band.n, band.images.shape[1]), np.nan)
    prev = band.smoothed[i - 1]
    tau = raw if np.any(np.isnan(prev)) else smooth_tangents(raw, prev, omega_tau)
    band.smoothed[i - 1] = tau
    if band.tangents is None:
        band.tangents = np.zeros((band.n, band.images.shape[1]))
    band.tangents[i - 1] = tau
    return tau


def _sigma_blocks_from_ops(ops, d):
    """Dense covariance operators -> single-block stack ``(n, 1, d, d)``."""
    return np.stack([to_dense(op) for op in ops])[:, None]


def ua_neb_forces(band: Band, oracle, params: NebParams, iteration: int, climbing: Optional[int] = None):
    """Force on every interior image for ``params.variant``.

    Each interior image consumes exactly one oracle call keyed by
    ``(oracle.seed, iteration, image)``. Returns ``(forces, diagnostics)``.
    """
    from .potentials.oracle import sample_force

    n, d = band.n, band.images.shape[1]
    band.refresh_energies(oracle.mean)
    omega = params.omega(iteration)
    tau = np.stack([hj_tangent(band, i, omega) for i in range(1, n + 1)])
    samples, ops = [], []
    for i in range(1, n + 1):
        f, op = sample_force(oracle, band.images[i], (oracle.seed, iteration, i))
        samples.append(f)
        ops.append(op)
    F = np.stack(samples)
    sig = _sigma_blocks_from_ops(ops, d)
    if params.label_refresh and iteration % params.al_interval == 0:
        tr = np.trace(sig[:, 0], axis1=-2, axis2=-1)
        for j in _top_k(tr, params.al_count):
            F[j] = -oracle.mean.gradient(band.images[j + 1])
    G = None if params.metric_kind == "none" else metric_blocks(sig, params.lam, params.metric_kind, params.normalize_trace)
    band.metrics = G
    c = -1 if climbing is None else climbing - 1
    force, normal, spacing = neb_force_arrays(band.images, tau, -F, G, params, np.array(c))
    diag = {
        "normal_norm": np.linalg.norm(normal, axis=-1),
        "spacing": spacing,
        "cov_trace": np.trace(sig[:, 0], axis1=-2, axis2=-1),
        "samples": F,
        "covs": ops,
        "tangents": tau,
    }
    return force, diag


def _top_k(score, k):
    """Indices of the ``k`` largest entries, ties to the smaller index."""
    order = np.lexsort((np.arange(score.shape[-1]), -score))
    return np.sort(order[:k])


def neb_step(band: Band, forces, params: NebParams, iteration: int, penalty_grad=None):
    """Apply ``s_i = alpha (F_i - gamma_k q_i)`` with global trust scaling.

    Reparametrizes to equal arc length every ``params.reparam_interval``
    iterations (counting from 1) and invalidates cached energies/tangents.
    """
    forces = np.asarray(forces, dtype=float)
    step = params.alpha * forces
    g = params.gamma(iteration)
    if g > 0 and penalty_grad is not None:
        step = step - params.alpha * g * np.asarray(penalty_grad, dtype=float)
    if not np.all(np.isfinite(step)):
        raise NumericalError("non-finite NEB step")
    step = _trust_scale(step, params.trust_radius)
    new = band.images.copy()
    new[1:-1] += step
    if params.reparam_interval and (iteration + 1) % params.reparam_interval == 0:
        new = reparametrize(new, band.climbing)
        band.smoothed = None
    band.images = new
    band.energies = None
    band.tangents = None
    return band


def _trust_scale(step, radius):
    norms = np.linalg.norm(step, axis=-1)
    top = norms.max(axis=-1)
    scale = np.where(top > radius, radius / np.where(top > 0, top, 1.0), 1.0)
    return step * scale[..., None, None]


def _band_metrics(band: Band, cov_field, params: NebParams, noise_multiplier: float = 1.0):
    if params.metric_kind == "none" or cov_field is None:
        return None
    ops = [cov_field.sigma_at(x) for x in band.images[1:-1]]
    sig = _sigma_blocks_from_ops(ops, band.images.shape[1]) * noise_multiplier**2
    return metric_blocks(sig, params.lam, params.metric_kind, params.normalize_trace)


def _residual_arrays(X, E, grad, G, rho_s, eps=1e-14):
    tau = hj_tangents(X, E)
    dp = X[..., 2:, :] - X[..., 1:-1, :]
    dm = X[..., 1:-1, :] - X[..., :-2, :]
    if G is None:
        perp = grad - tau * _dot(tau, grad)[..., None]
        lp = np.linalg.norm(dp, axis=-1)
        lm = np.linalg.norm(dm, axis=-1)
    else:
        perp, _ = _oblique(apply_blocks(G, tau), apply_blocks(G, grad), tau, eps)
        lp = np.sqrt(np.clip(_dot(dp, apply_blocks(G, dp)), 0.0, None))
        lm = np.sqrt(np.clip(_dot(dm, apply_blocks(G, dm)), 0.0, None))
    return _dot(perp, perp).sum(axis=-1) + rho_s * ((lp - lm) ** 2).sum(axis=-1), perp, lp - lm


def neb_residual(band: Band, mean_potential, params: NebParams, cov_field=None, noise_multiplier: float = 1.0):
    """Deterministic stationarity measure: squared metric normal gradient plus weighted spacing mismatch.

    The metric comes from ``cov_field`` for metric variants and is the
    identity otherwise. No oracle call is consumed.
    """
    X = band.images
    E, g = mean_potential.energy_gradient(X)
    G = _band_metrics(band, cov_field, params, noise_multiplier)
    R, _, _ = _residual_arrays(X, np.asarray(E), g[1:-1], G, params.rho_s)
    return float(R)


@dataclass(frozen=True)
class StopDecision:
    stop: bool
    force_ok: bool
    spring_ok: bool
    uncertainty_ok: bool
    max_force: float
    max_spacing: float
    max_uncertainty: float

    @property
    def failed(self) -> List[str]:
        names = []
        if not self.force_ok:
            names.append("force")
        if not self.spring_ok:
            names.append("spring")
        if not self.uncertainty_ok:
            names.append("uncertainty")
        return names


def check_stop_neb(band: Band, samples, covs, params: NebParams) -> StopDecision:
    """Covariance-aware stopping test on the last sampled forces and covariances."""
    X = band.images
    F = np.asarray(samples, dtype=float)
    if band.energies is None:
        raise ContractError("band energies are not cached")
    tau = hj_tangents(X, band.energies)
    d = X.shape[1]
    sig = np.stack([to_dense(op) for op in covs])[:, None]
    G = None if params.metric_kind == "none" else metric_blocks(sig, params.lam, params.metric_kind, params.normalize_trace)
    ghat = -F
    if G is None:
        r = ghat - tau * _dot(tau, ghat)[..., None]
        dp = X[2:] - X[1:-1]
        dm = X[1:-1] - X[:-2]
        mismatch = np.abs(np.linalg.norm(dp, axis=-1) - np.linalg.norm(dm, axis=-1))
    else:
        r, _ = _oblique(apply_blocks(G, tau), apply_blocks(G, ghat), tau, params.epsilon)
        dp = X[2:] - X[1:-1]
        dm = X[1:-1] - X[:-2]
        mismatch = np.abs(np.sqrt(_dot(dp, apply_blocks(G, dp))) - np.sqrt(_dot(dm, apply_blocks(G, dm))))
    rn = np.linalg.norm(r, axis=-1)
    unc = np.array([math.sqrt(max(float(ri @ apply_sigma(op, ri)), 0.0)) for ri, op in zip(r, covs)]) / (rn + params.epsilon)
    mf, ms, mu = float(rn.max()), float(mismatch.max()), float(unc.max())
    fo, so, uo = mf <= params.eps_force, ms <= params.eps_spring, mu <= params.eps_unc
    return StopDecision(fo and so and uo, fo, so, uo, mf, ms, mu)


@dataclass(frozen=True)
class TriggerRecord:
    variance: bool
    relative: bool
    barrier: bool
    variance_images: tuple
    relative_images: tuple
    lambda_max: np.ndarray
    ratios: np.ndarray

    @property
    def fired(self) -> bool:
        return self.variance or self.relative or self.barrier


def al_trigger_eval(band: Band, forces, covs, barrier_var: float, params: NebParams) -> TriggerRecord:
    """Three-condition label request test: covariance size, directional noise ratio, barrier variance.

    ``forces`` are the current band forces used as search directions.
    """
    F = np.asarray(forces, dtype=float)
    lmax = np.array([lambda_max(op) for op in covs])
    norms = np.linalg.norm(F, axis=-1)
    dirs = F / (norms + params.epsilon)[:, None]
    ratios = np.array([math.sqrt(max(float(di @ apply_sigma(op, di)), 0.0)) for di, op in zip(dirs, covs)]) / (norms + params.epsilon)
    var_hit = tuple(int(i) + 1 for i in np.flatnonzero(lmax > params.eta_var))
    rel_hit = tuple(int(i) + 1 for i in np.flatnonzero(ratios > params.eta_rel))
    return TriggerRecord(
        variance=bool(var_hit),
        relative=bool(rel_hit),
        barrier=bool(barrier_var > params.eta_bar**2),
        variance_images=var_hit,
        relative_images=rel_hit,
        lambda_max=lmax,
        ratios=ratios,
    )


def trust_ratio_step(band: Band, forces, params: NebParams, iteration: int, radius: float, merit: Callable, penalty_grad=None):
    """Trial step with the acceptance-ratio trust rule.

    ``merit(images) -> float`` is evaluated before and after the trial step;
    the predicted decrease uses a central-difference gradient of ``merit``.
    Returns ``(band, new_radius, accepted, rho)``; a rejected step leaves
    the band unchanged and halves the radius, ``rho > 0.75`` expands it by
    1.5.
    """
    F = np.asarray(forces, dtype=float)
    g = params.gamma(iteration)
    direction = F - (g * np.asarray(penalty_grad) if (g > 0 and penalty_grad is not None) else 0.0)
    step = _trust_scale(params.alpha * direction, radius)
    X0 = band.images
    phi0 = merit(X0)
    grad = np.zeros_like(X0[1:-1])
    h = 1e-6
    for idx in np.ndindex(grad.shape):
        Xp = X0.copy()
        Xp[1 + idx[0], idx[1]] += h
        Xm = X0.copy()
        Xm[1 + idx[0], idx[1]] -= h
        grad[idx] = (merit(Xp) - merit(Xm)) / (2 * h)
    pred = -float(np.sum(grad * step))
    trial = X0.copy()
    trial[1:-1] += step
    actual = phi0 - merit(trial)
    if -pred >= 0:
        # no predicted decrease: reject and contract
        return band, 0.5 * radius, False, -math.inf
    rho = actual / (pred + params.epsilon)
    if rho <= params.rho_min:
        return band, 0.5 * radius, False, rho
    band.images = trial
    band.energies = None
    band.tangents = None
    return band, (1.5 * radius if rho > 0.75 else radius), True, rho


# ---------------------------------------------------------------------------
# batched engine


@dataclass
class NebProblem:
    """Everything the engine needs to know about a band problem.

    ``energy_gradient(X)`` maps ``(..., d)`` to ``(E, grad)``;
    ``sigma_blocks(X)`` maps ``(..., d)`` to the raw covariance blocks
    ``(..., nb, b, b)`` (before the noise multiplier); ``noise_sqrt`` maps
    those blocks to symmetric square roots.
    """

    start: np.ndarray
    end: np.ndarray
    energy_gradient: Callable
    sigma_blocks: Callable
    noise_sqrt: Callable
    noise_multiplier: float = 1.0
    mask: Optional[np.ndarray] = None
    initial_band: Optional[np.ndarray] = None
    logdet_grad: Optional[Callable] = None

    @property
    def dim(self) -> int:
        return int(np.asarray(self.start).shape[-1])


@dataclass
class NebResult:
    variant: str
    seeds: np.ndarray
    barrier: np.ndarray  # (S, K+1) barrier after k updates
    residual: Optional[np.ndarray]  # (S, K+1) or None
    final_band: np.ndarray  # (S, n+2, d)
    climbing: np.ndarray  # (S,) final climbing/highest image index (1-based)
    oracle_calls: np.ndarray  # (K,) calls per iteration summed over seeds
    digests: Dict[int, List[str]] = field(default_factory=dict)
    final_residual: Optional[np.ndarray] = None  # (S,) deterministic residual of the final band


def _penalty_grad(problem: NebProblem, X, lam, m2, h=1e-5):
    if problem.logdet_grad is not None:
        return problem.logdet_grad(X, lam, m2)
    d = X.shape[-1]
    q = np.zeros_like(X)
    b = None
    for j in range(d):
        eps = h * np.maximum(1.0, np.linalg.norm(X, axis=-1))
        Xp = X.copy()
        Xp[..., j] += eps
        Xm = X.copy()
        Xm[..., j] -= eps
        Sp = m2 * problem.sigma_blocks(Xp)
        Sm = m2 * problem.sigma_blocks(Xm)
        b = Sp.shape[-1]
        lp = np.linalg.slogdet(Sp + lam * np.eye(b))[1].sum(axis=-1)
        lm = np.linalg.slogdet(Sm + lam * np.eye(b))[1].sum(axis=-1)
        q[..., j] = (lp - lm) / (2.0 * eps)
    return q


def run_neb_batch(
    problem: NebProblem,
    params: NebParams,
    seeds: Sequence[int],
    iterations: int,
    record_residual: bool = False,
    digest_seeds: Sequence[int] = (),
    residual_metric: str = "own",
) -> NebResult:
    """Advance one band per seed for ``iterations`` steps.

    Noise for image ``i`` at iteration ``k`` of seed ``s`` is keyed by
    ``(s, k, i)``, so every variant sees the same draws. The reported barrier
    is the largest interior mean energy minus the start energy.
    """
    seeds = np.asarray(seeds, dtype=np.uint64)
    S = seeds.shape[0]
    n = params.n_images
    d = problem.dim
    m = float(problem.noise_multiplier)
    m2 = m * m
    mask = None if problem.mask is None else np.asarray(problem.mask, dtype=float)
    base = problem.initial_band if problem.initial_band is not None else linear_band(problem.start, problem.end, n)
    if base.shape != (n + 2, d):
        raise ContractError(f"initial band has shape {base.shape}, expected {(n + 2, d)}")
    X = np.broadcast_to(base, (S, n + 2, d)).copy()
    E_end, _ = problem.energy_gradient(np.stack([X[0, 0], X[0, -1]]))
    E_a, E_b = float(E_end[0]), float(E_end[1])
    image_ids = np.arange(1, n + 1, dtype=np.uint64)
    prev_tau = None
    barrier = np.empty((S, iterations + 1))
    residual = np.empty((S, iterations + 1)) if record_residual else None
    calls = np.zeros(iterations, dtype=np.int64)
    digests: Dict[int, List[str]] = {int(s): [] for s in digest_seeds}
    digest_rows = [int(np.flatnonzero(seeds == np.uint64(s))[0]) for s in digest_seeds if np.any(seeds == np.uint64(s))]
    climb = np.full(S, -1)

    def evaluate(Xc):
        Ei, gi = problem.energy_gradient(Xc[:, 1:-1])
        E = np.concatenate([np.full((S, 1), E_a), Ei, np.full((S, 1), E_b)], axis=1)
        return E, gi

    def resid(Xc, E, gi):
        kind = params.metric_kind if residual_metric == "own" else residual_metric
        if kind != "none":
            G = metric_blocks(m2 * problem.sigma_blocks(Xc[:, 1:-1]), params.lam, kind, params.normalize_trace)
        else:
            G = None
        g = gi if mask is None else gi * mask
        return _residual_arrays(Xc, E, g, G, params.rho_s)[0]

    def record(k, Xc, E, gi):
        barrier[:, k] = E[:, 1:-1].max(axis=1) - E_a
        if record_residual:
            residual[:, k] = resid(Xc, E, gi)

    E, gi = evaluate(X)
    record(0, X, E, gi)
    for k in range(iterations):
        raw = hj_tangents(X, E)
        tau = smooth_tangents(raw, prev_tau, params.omega(k))
        prev_tau = tau
        sig = problem.sigma_blocks(X[:, 1:-1])  # (S, n, nb, b, b)
        xi = rng.normals(seeds[:, None], k, image_ids[None, :], d)
        noise = m * apply_blocks(problem.noise_sqrt(sig), xi) if m != 0.0 else np.zeros_like(xi)
        F = -gi + noise
        calls[k] = S * n
        for r, s in zip(digest_rows, digests):
            digests[s].append(rng.stream_digest(xi[r]))
        if params.label_refresh and k % params.al_interval == 0:
            tr = np.trace(sig, axis1=-2, axis2=-1).sum(axis=-1)
            for row in range(S):
                top = _top_k(tr[row], params.al_count)
                F[row, top] = -gi[row, top]
        if mask is not None:
            F = F * mask
        sig_m = m2 * sig
        G = None if params.metric_kind == "none" else metric_blocks(sig_m, params.lam, params.metric_kind, params.normalize_trace)
        if params.climb_start is not None and k >= params.climb_start:
            since = k - params.climb_start
            if since == 0 or (params.climb_reselect and since % params.climb_reselect == 0):
                climb = np.argmax(E[:, 1:-1], axis=1)
        force, _, _ = neb_force_arrays(X, tau, -F, G, params, climb)
        step = params.alpha * force
        gam = params.gamma(k)
        if gam > 0:
            step = step - params.alpha * gam * _penalty_grad(problem, X[:, 1:-1], params.lam, m2)
        if mask is not None:
            step = step * mask
        if not np.all(np.isfinite(step)):
            raise NumericalError(f"non-finite NEB step at iteration {k}")
        X[:, 1:-1] += _trust_scale(step, params.trust_radius)
        if params.reparam_interval and (k + 1) % params.reparam_interval == 0:
            for row in range(S):
                pin = int(climb[row]) + 1 if climb[row] >= 0 else None
                X[row] = reparametrize(X[row], pin)
            prev_tau = None
        E, gi = evaluate(X)
        record(k + 1, X, E, gi)
    final_c = np.argmax(E[:, 1:-1], axis=1) + 1
    final_res = residual[:, -1].copy() if record_residual else resid(X, E, gi)
    return NebResult(params.variant, seeds, barrier, residual, X, final_c, calls, digests, final_res)
