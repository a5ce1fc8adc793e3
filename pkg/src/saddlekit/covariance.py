"""Force-covariance operators and the reliability metric ``G = (Sigma + lam I)^-1``.

Four operator shapes are supported, all immutable:

``Dense``       full symmetric PSD matrix
``Diagonal``    per-component variances
``BlockLocal``  sum of padded local blocks ``P_l^T B_l P_l`` (overlap allowed)
``LowRank``     ``U C U^T``

Optimizers only ever need products ``Sigma z``, solves ``(Sigma + lam I)^-1 z``
and ``log det(Sigma + lam I)``; nothing here forms a dense inverse unless the
operator is already dense.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.linalg

from . import rng
from .errors import ContractError, ConvergenceError, NumericalError

__all__ = [
    "Dense",
    "Diagonal",
    "BlockLocal",
    "LowRank",
    "MetricParams",
    "apply_sigma",
    "apply_metric",
    "metric_trace",
    "logdet",
    "logdet_grad_dir",
    "ensemble_covariance",
    "calibrate_nll",
    "directional_variance_from_energies",
    "to_dense",
    "diagonal_of",
    "trace_of",
    "sqrt_apply",
    "noise_dim",
    "lambda_max",
    "hutchinson_trace",
]

_PSD_TOL = 1e-10
CG_MAX_ITER = 200
HUTCHINSON_PROBES = 64


@dataclass(frozen=True)
class Dense:
    S: np.ndarray

    def __post_init__(self):
        S = np.array(self.S, dtype=float)
        if S.ndim != 2 or S.shape[0] != S.shape[1]:
            raise ContractError(f"dense covariance must be square, got {S.shape}")
        object.__setattr__(self, "S", 0.5 * (S + S.T))

    @property
    def dim(self) -> int:
        return self.S.shape[0]


@dataclass(frozen=True)
class Diagonal:
    v: np.ndarray

    def __post_init__(self):
        v = np.array(self.v, dtype=float).ravel()
        if np.any(v < -_PSD_TOL):
            raise ContractError("diagonal covariance has negative entries")
        object.__setattr__(self, "v", v)

    @property
    def dim(self) -> int:
        return self.v.shape[0]


@dataclass(frozen=True)
class BlockLocal:
    """``sum_l P_l^T B_l P_l`` on ``R^d``; ``blocks`` is a sequence of ``(indices, B)``."""

    d: int
    blocks: Tuple[Tuple[np.ndarray, np.ndarray], ...]
    _partition: tuple = field(default=(), repr=False, compare=False)

    def __post_init__(self):
        cleaned = []
        for idx, B in self.blocks:
            idx = np.asarray(idx, dtype=np.intp).ravel()
            B = np.array(B, dtype=float)
            if B.shape != (idx.size, idx.size):
                raise ContractError(f"block of size {B.shape} does not match {idx.size} indices")
            if idx.size and (idx.min() < 0 or idx.max() >= self.d):
                raise ContractError("block index out of range")
            cleaned.append((idx, 0.5 * (B + B.T)))
        object.__setattr__(self, "blocks", tuple(cleaned))

    @property
    def dim(self) -> int:
        return self.d

    @property
    def overlapping(self) -> bool:
        seen = np.zeros(self.d, dtype=int)
        for idx, _ in self.blocks:
            seen[idx] += 1
        return bool(np.any(seen > 1))


@dataclass(frozen=True)
class LowRank:
    U: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        U = np.array(self.U, dtype=float)
        C = np.array(self.C, dtype=float)
        if U.ndim != 2 or C.shape != (U.shape[1], U.shape[1]):
            raise ContractError(f"low-rank factors do not match: U {U.shape}, C {C.shape}")
        object.__setattr__(self, "U", U)
        object.__setattr__(self, "C", 0.5 * (C + C.T))

    @property
    def dim(self) -> int:
        return self.U.shape[0]


CovarianceOperator = Union[Dense, Diagonal, BlockLocal, LowRank]


@dataclass(frozen=True)
class MetricParams:
    lam: float = 1e-2
    lam_H: float = 3e-2
    sigma_floor: float = 0.0
    s_cal: float = 1.0
    shrink_rho: float = 0.0
    solve_tol: float = 1e-8
    normalize_trace: bool = False

    def __post_init__(self):
        if self.lam < 0 or self.lam_H < 0 or self.sigma_floor < 0:
            raise ContractError("metric regularizations must be nonnegative")
        if self.s_cal <= 0:
            raise ContractError("s_cal must be positive")
        if not 0.0 <= self.shrink_rho <= 1.0:
            raise ContractError("shrink_rho must lie in [0, 1]")
        if not 0.0 < self.solve_tol <= 1e-2:
            raise ContractError("solve_tol must lie in (0, 1e-2]")


def _check_vec(op, z):
    z = np.asarray(z, dtype=float)
    if z.shape != (op.dim,):
        raise ContractError(f"vector of shape {z.shape} does not match operator dimension {op.dim}")
    return z


def apply_sigma(op: CovarianceOperator, z) -> np.ndarray:
    """Return ``Sigma z``."""
    z = _check_vec(op, z)
    if isinstance(op, Dense):
        return op.S @ z
    if isinstance(op, Diagonal):
        return op.v * z
    if isinstance(op, LowRank):
        return op.U @ (op.C @ (op.U.T @ z))
    if isinstance(op, BlockLocal):
        out = np.zeros(op.d)
        for idx, B in op.blocks:
            np.add.at(out, idx, B @ z[idx])
        return out
    raise TypeError(f"unknown covariance operator {type(op).__name__}")


def to_dense(op: CovarianceOperator) -> np.ndarray:
    if isinstance(op, Dense):
        return op.S.copy()
    if isinstance(op, Diagonal):
        return np.diag(op.v)
    if isinstance(op, LowRank):
        return op.U @ op.C @ op.U.T
    if isinstance(op, BlockLocal):
        S = np.zeros((op.d, op.d))
        for idx, B in op.blocks:
            S[np.ix_(idx, idx)] += B
        return S
    raise TypeError(f"unknown covariance operator {type(op).__name__}")


def diagonal_of(op: CovarianceOperator) -> np.ndarray:
    if isinstance(op, Dense):
        return np.diag(op.S).copy()
    if isinstance(op, Diagonal):
        return op.v.copy()
    if isinstance(op, LowRank):
        return np.einsum("ir,rs,is->i", op.U, op.C, op.U)
    if isinstance(op, BlockLocal):
        out = np.zeros(op.d)
        for idx, B in op.blocks:
            np.add.at(out, idx, np.diag(B))
        return out
    raise TypeError(f"unknown covariance operator {type(op).__name__}")


def trace_of(op: CovarianceOperator) -> float:
    return float(np.sum(diagonal_of(op)))


def noise_dim(op: CovarianceOperator) -> int:
    """Length of the standard-normal vector consumed by :func:`sqrt_apply`."""
    if isinstance(op, LowRank):
        return op.C.shape[0]
    if isinstance(op, BlockLocal):
        return int(sum(idx.size for idx, _ in op.blocks))
    return op.dim


def _psd_sqrt(A):
    w, V = np.linalg.eigh(A)
    if w.size and w.min() < -_PSD_TOL * max(1.0, abs(w).max()):
        raise NumericalError(f"covariance block is not PSD (min eigenvalue {w.min():.3e})")
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def sqrt_apply(op: CovarianceOperator, xi) -> np.ndarray:
    """Map iid N(0, 1) draws ``xi`` to a N(0, Sigma) draw.

    Dense and diagonal operators use the symmetric square root; low-rank and
    block operators use their factor form, which has the same covariance.
    """
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (noise_dim(op),):
        raise ContractError(f"need {noise_dim(op)} normals, got {xi.shape}")
    if isinstance(op, Dense):
        return _psd_sqrt(op.S) @ xi
    if isinstance(op, Diagonal):
        return np.sqrt(np.clip(op.v, 0.0, None)) * xi
    if isinstance(op, LowRank):
        return op.U @ (_psd_sqrt(op.C) @ xi)
    if isinstance(op, BlockLocal):
        out = np.zeros(op.d)
        pos = 0
        for idx, B in op.blocks:
            np.add.at(out, idx, _psd_sqrt(B) @ xi[pos:pos + idx.size])
            pos += idx.size
        return out
    raise TypeError(f"unknown covariance operator {type(op).__name__}")


def _require_lam(lam):
    if not lam > 0:
        raise ContractError(f"metric regularization must be positive, got {lam}")


def _block_partition(op: BlockLocal, lam: float):
    """Block-Jacobi preconditioner pieces for ``Sigma + lam I``.

    Each index is assigned to the first block containing it; uncovered
    indices get singleton groups. The diagonal sub-blocks of the assembled
    matrix are inverted exactly.
    """
    owner = np.full(op.d, -1)
    for b, (idx, _) in enumerate(op.blocks):
        free = idx[owner[idx] < 0]
        owner[free] = b
    groups = [np.flatnonzero(owner == b) for b in range(len(op.blocks))]
    groups = [g for g in groups if g.size]
    groups += [np.array([i]) for i in np.flatnonzero(owner < 0)]
    inverses = []
    for g in groups:
        A = lam * np.eye(g.size)
        pos = {int(i): k for k, i in enumerate(g)}
        for idx, B in op.blocks:
            local = [(k, pos[int(i)]) for k, i in enumerate(idx) if int(i) in pos]
            if not local:
                continue
            src = np.array([a for a, _ in local])
            dst = np.array([b for _, b in local])
            A[np.ix_(dst, dst)] += B[np.ix_(src, src)]
        inverses.append(np.linalg.inv(A))
    return groups, inverses


def _pcg(op: BlockLocal, lam: float, z: np.ndarray, tol: float, eps: float = 1e-30):
    groups, inverses = _block_partition(op, lam)

    def precond(r):
        out = np.empty_like(r)
        for g, Ainv in zip(groups, inverses):
            out[g] = Ainv @ r[g]
        return out

    def A(y):
        return apply_sigma(op, y) + lam * y

    znorm = np.linalg.norm(z)
    y = np.zeros_like(z)
    if znorm == 0.0:
        return y
    r = z.copy()
    s = precond(r)
    p = s.copy()
    rs = r @ s
    for it in range(1, CG_MAX_ITER + 1):
        Ap = A(p)
        step = rs / (p @ Ap)
        y += step * p
        r -= step * Ap
        res = np.linalg.norm(r) / (znorm + eps)
        if res <= tol:
            return y
        s = precond(r)
        rs_new = r @ s
        p = s + (rs_new / rs) * p
        rs = rs_new
    raise ConvergenceError(
        f"block CG did not reach relative residual {tol:g} in {CG_MAX_ITER} iterations (final {res:.3e})",
        residual=res,
        iterations=CG_MAX_ITER,
    )


def _woodbury(op: LowRank, lam: float, z: np.ndarray) -> np.ndarray:
    # (lam I + U C U^T)^-1 z = z/lam - U (lam I_r + C U^T U)^-1 C U^T z / lam
    # (avoids C^-1 so a singular C is fine)
    r = op.C.shape[0]
    K = lam * np.eye(r) + op.C @ (op.U.T @ op.U)
    w = np.linalg.solve(K, op.C @ (op.U.T @ z))
    return (z - op.U @ w) / lam


def _solve(op, lam, z, tol):
    if isinstance(op, Dense):
        try:
            cf = scipy.linalg.cho_factor(op.S + lam * np.eye(op.dim))
        except np.linalg.LinAlgError as exc:
            raise NumericalError("Cholesky factorization of Sigma + lam I failed") from exc
        return scipy.linalg.cho_solve(cf, z)
    if isinstance(op, Diagonal):
        return z / (op.v + lam)
    if isinstance(op, LowRank):
        return _woodbury(op, lam, z)
    if isinstance(op, BlockLocal):
        return _pcg(op, lam, z, tol)
    raise TypeError(f"unknown covariance operator {type(op).__name__}")


def hutchinson_trace(apply: Callable[[np.ndarray], np.ndarray], d: int, probes: int = HUTCHINSON_PROBES, seed: int = 0) -> float:
    """Rademacher estimate of ``tr(A)`` from ``probes`` products ``A z``."""
    Z = rng.rademacher(seed, 0, np.arange(probes), d)
    return float(np.mean([z @ apply(z) for z in Z]))


def metric_trace(op: CovarianceOperator, lam: float, tol: float = 1e-10) -> float:
    """``tr((Sigma + lam I)^-1)``; exact except for overlapping block operators."""
    _require_lam(lam)
    if isinstance(op, Dense):
        w = np.linalg.eigvalsh(op.S)
        return float(np.sum(1.0 / (w + lam)))
    if isinstance(op, Diagonal):
        return float(np.sum(1.0 / (op.v + lam)))
    if isinstance(op, LowRank):
        r = op.C.shape[0]
        UtU = op.U.T @ op.U
        K = lam * np.eye(r) + op.C @ UtU
        return float(op.dim / lam - np.trace(np.linalg.solve(K, op.C @ UtU)) / lam)
    if isinstance(op, BlockLocal):
        if not op.overlapping:
            covered = np.zeros(op.d, dtype=bool)
            total = 0.0
            for idx, B in op.blocks:
                covered[idx] = True
                total += float(np.sum(1.0 / (np.linalg.eigvalsh(B) + lam)))
            return total + float(np.count_nonzero(~covered)) / lam
        return hutchinson_trace(lambda y: _pcg(op, lam, y, tol), op.d)
    raise TypeError(f"unknown covariance operator {type(op).__name__}")


def apply_metric(op: CovarianceOperator, p: MetricParams, z) -> np.ndarray:
    """Return ``y ~ (Sigma + lam I)^-1 z`` to relative residual ``p.solve_tol``.

    With ``p.normalize_trace`` the metric is rescaled so that ``tr(G) = d``.
    """
    z = _check_vec(op, z)
    _require_lam(p.lam)
    y = _solve(op, p.lam, z, p.solve_tol)
    if p.normalize_trace:
        y = y * (op.dim / metric_trace(op, p.lam, p.solve_tol))
    return y


def logdet(op: CovarianceOperator, lam: float) -> float:
    """``log det(Sigma + lam I)``."""
    _require_lam(lam)
    if isinstance(op, Diagonal):
        vals = op.v + lam
        if np.any(vals <= 0):
            raise NumericalError("Sigma + lam I is not positive definite")
        return float(np.sum(np.log(vals)))
    if isinstance(op, LowRank):
        r = op.C.shape[0]
        sign, val = np.linalg.slogdet(np.eye(r) + op.C @ (op.U.T @ op.U) / lam)
        if sign <= 0:
            raise NumericalError("low-rank determinant lemma gave a nonpositive determinant")
        return float(op.dim * math.log(lam) + val)
    if isinstance(op, BlockLocal) and not op.overlapping:
        covered = np.zeros(op.d, dtype=bool)
        total = 0.0
        for idx, B in op.blocks:
            covered[idx] = True
            total += _chol_logdet(B + lam * np.eye(idx.size))
        return total + float(np.count_nonzero(~covered)) * math.log(lam)
    M = to_dense(op)
    return _chol_logdet(M + lam * np.eye(M.shape[0]))


def _chol_logdet(A):
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("Sigma + lam I is not positive definite") from exc
    return float(2.0 * np.sum(np.log(np.diag(L))))


def logdet_grad_dir(field, x, u, lam: float) -> float:
    """Directional derivative ``u . grad log det(Sigma(x) + lam I)`` by central difference."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    eps = 1e-5 * max(1.0, float(np.linalg.norm(x)))
    plus = logdet(field.sigma_at(x + eps * u), lam)
    minus = logdet(field.sigma_at(x - eps * u), lam)
    return (plus - minus) / (2.0 * eps)


def _pattern_mask(pattern, d):
    if pattern is None:
        return np.eye(d, dtype=bool)
    arr = np.asarray(pattern) if not isinstance(pattern, (list, tuple)) else None
    if arr is not None and arr.dtype == bool and arr.shape == (d, d):
        return arr
    mask = np.zeros((d, d), dtype=bool)
    for group in pattern:
        g = np.asarray(group, dtype=np.intp)
        mask[np.ix_(g, g)] = True
    return mask


def ensemble_covariance(samples: Sequence, p: MetricParams, block_pattern=None) -> Dense:
    """Calibrated, optionally shrunk, ensemble force covariance.

    ``s_cal^2 [(1 - rho) S + rho Pi_B S] + sigma_floor^2 I`` where ``S`` is the
    unbiased sample covariance and ``Pi_B`` keeps entries inside
    ``block_pattern`` (a boolean ``d x d`` mask or a list of index groups;
    diagonal when omitted).
    """
    F = np.asarray(samples, dtype=float)
    if F.ndim != 2 or F.shape[0] < 2:
        raise ContractError("ensemble covariance needs at least two samples of equal length")
    M, d = F.shape
    dev = F - F.mean(axis=0)
    S = dev.T @ dev / (M - 1)
    SB = np.where(_pattern_mask(block_pattern, d), S, 0.0)
    out = p.s_cal**2 * ((1.0 - p.shrink_rho) * S + p.shrink_rho * SB) + p.sigma_floor**2 * np.eye(d)
    return Dense(out)


def _golden_section(f, a, b, tol):
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while abs(b - a) > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def calibrate_nll(residuals: Sequence, raw_covs: Sequence, sigma_floor: float) -> float:
    """Scalar ``s_cal`` minimizing the Gaussian negative log-likelihood of the residuals."""
    if len(residuals) == 0 or len(residuals) != len(raw_covs):
        raise ContractError("calibration needs matched, nonempty residual and covariance lists")
    eig = []
    for r, S in zip(residuals, raw_covs):
        w, V = np.linalg.eigh(to_dense(S))
        eig.append((np.clip(w, 0.0, None), (V.T @ np.asarray(r, dtype=float)) ** 2))
    f2 = sigma_floor**2

    def nll(t):
        s2 = math.exp(t)
        total = 0.0
        for w, r2 in eig:
            var = s2 * w + f2
            if np.any(var <= 0):
                return math.inf
            total += float(np.sum(np.log(var) + r2 / var))
        return total

    t = _golden_section(nll, math.log(1e-6), math.log(1e6), 1e-8)
    return math.sqrt(math.exp(t))


def directional_variance_from_energies(member_energies, x, u, eps: float) -> float:
    """Variance across members of the finite-difference force along ``u``."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if eps <= 0:
        raise ContractError("eps must be positive")
    ep = np.asarray(member_energies(x + eps * u), dtype=float)
    em = np.asarray(member_energies(x - eps * u), dtype=float)
    if ep.size < 2:
        raise ContractError("need at least two ensemble members")
    return float(np.var(-(ep - em) / (2.0 * eps), ddof=1))


def lambda_max(op: CovarianceOperator, iters: int = 50, tol: float = 1e-8) -> float:
    """Largest eigenvalue by power iteration from a fixed deterministic start."""
    d = op.dim
    z = np.ones(d) / math.sqrt(d) + 1e-3 * np.arange(d) / max(d, 1)
    z /= np.linalg.norm(z)
    lam = 0.0
    for _ in range(iters):
        y = apply_sigma(op, z)
        ny = np.linalg.norm(y)
        if ny == 0.0:
            return 0.0
        new = float(z @ y)
        z = y / ny
        if abs(new - lam) <= tol * max(1.0, abs(new)):
            lam = new
            break
        lam = new
    return float(z @ apply_sigma(op, z))
