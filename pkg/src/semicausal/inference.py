"""Influence-function standard errors, Wald intervals and the stacked sandwich."""

import math
from dataclasses import dataclass

import numpy as np

from .exceptions import DomainError, InsufficientDataError, PreconditionError, SingularDesignError

# Acklam's rational approximation to the standard normal quantile.
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425

SOLVED_TOL = 1e-6
_COND_LIMIT = 1e12


def normal_quantile(p):
    """Standard normal quantile.

    Acklam's rational approximation (relative error about 1e-9) followed by
    one Halley step against ``erfc``, which brings the result to roughly
    machine precision.
    """
    if not 0.0 < p < 1.0:
        raise DomainError(f"probability must lie in (0, 1), got {p!r}")
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        x = ((((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5])
             / ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0))
    elif p <= 1.0 - _P_LOW:
        q = p - 0.5
        r = q * q
        x = ((((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q
             / (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0))
    else:
        q = math.sqrt(-2.0 * math.log1p(-p))
        x = -((((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5])
              / ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0))
    # residual on the tail containing p, which avoids cancellation near 1
    if p <= 0.5:
        e = 0.5 * math.erfc(-x / math.sqrt(2.0)) - p
    else:
        e = (1.0 - p) - 0.5 * math.erfc(x / math.sqrt(2.0))
    u = e * math.sqrt(2.0 * math.pi) * math.exp(0.5 * x * x)
    return x - u / (1.0 + 0.5 * x * u)


@dataclass(frozen=True)
class ConfidenceInterval:
    level: float
    lower: float
    upper: float

    def __post_init__(self):
        if not 0.0 < self.level < 1.0:
            raise DomainError(f"level must lie in (0, 1), got {self.level!r}")
        if self.lower > self.upper:
            raise DomainError("interval lower bound exceeds upper bound")

    def __contains__(self, value):
        return self.lower <= value <= self.upper

    @property
    def width(self):
        return self.upper - self.lower


def if_standard_error(influence):
    """``sqrt(P_n{phi^2} / n)`` for already-centred influence values.

    No ``n - 1`` correction is applied.
    """
    phi = np.asarray(influence, dtype=float).ravel()
    n = phi.shape[0]
    if n < 2:
        raise InsufficientDataError(f"need at least 2 influence values, got {n}")
    scale = float(np.max(np.abs(phi)))
    if scale == 0.0:
        return 0.0
    u = phi / scale
    return scale * math.sqrt(math.fsum(u * u) / n) / math.sqrt(n)


def wald_interval(psi_hat, se, level=0.95):
    if not 0.0 < level < 1.0:
        raise DomainError(f"level must lie in (0, 1), got {level!r}")
    if se < 0 or not math.isfinite(se):
        raise DomainError(f"standard error must be finite and nonnegative, got {se!r}")
    half = normal_quantile(0.5 * (1.0 + level)) * se
    return ConfidenceInterval(level, psi_hat - half, psi_hat + half)


def numeric_jacobian(estfun, data, theta):
    """Empirical mean Jacobian ``P_n{dm/dtheta^T}`` by central differences.

    The step for coordinate ``j`` is ``1e-6 * (1 + |theta_j|)``.
    """
    theta = np.asarray(theta, dtype=float)
    p = theta.shape[0]
    jac = np.empty((p, p))
    for j in range(p):
        h = 1e-6 * (1.0 + abs(theta[j]))
        up, down = theta.copy(), theta.copy()
        up[j] += h
        down[j] -= h
        jac[:, j] = (np.mean(estfun(data, up), axis=0) - np.mean(estfun(data, down), axis=0)) / (2 * h)
    return jac


def sandwich_stacked(data, estfun, theta_hat, jacobian="numeric"):
    """Per-row influence vectors for the root of stacked estimating equations.

    Parameters
    ----------
    data : Dataset
    estfun : callable
        ``estfun(data, theta) -> (n, p)`` array of estimating-function values.
    theta_hat : array_like, shape (p,)
        Solves ``P_n{m(Z; theta)} = 0``.
    jacobian : "numeric" or callable
        A callable ``jacobian(data, theta) -> (p, p)`` returns the empirical
        mean derivative analytically; ``"numeric"`` uses central differences.

    Returns
    -------
    ndarray, shape (n, p)
        Row ``i`` is ``-P_n{dm/dtheta^T}^{-1} m(Z_i; theta_hat)``, the first
        order expansion of ``theta_hat - theta``.
    """
    theta = np.atleast_1d(np.asarray(theta_hat, dtype=float))
    values = np.asarray(estfun(data, theta), dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    gap = np.max(np.abs(values.mean(axis=0)))
    if gap >= SOLVED_TOL:
        raise PreconditionError(f"estimating equations not solved: max |P_n m| = {gap:.3g}")
    if jacobian == "numeric":
        jac = numeric_jacobian(estfun, data, theta)
    elif callable(jacobian):
        jac = np.atleast_2d(np.asarray(jacobian(data, theta), dtype=float))
    else:
        raise DomainError(f"jacobian must be 'numeric' or a callable, got {jacobian!r}")
    if not np.all(np.isfinite(jac)) or np.linalg.cond(jac) > _COND_LIMIT:
        raise SingularDesignError("empirical Jacobian of the stacked estimating equations is singular")
    return -np.linalg.solve(jac, values.T).T
