"""Closed-form Gaussian machinery for the index-k Kolmogorov diffusion.

The diffusion started at ``x`` is linear Gaussian: at time ``T`` it has mean
``H(T) x`` and covariance ``T D(T) V D(T)``, where ``D(T) = diag(1, T, ..., T^k)``,
``H(T) = D(T) H D(1/T)`` and ``H``, ``V`` have rational entries.  Everything
in this module is a pure function of its inputs.
"""

from dataclasses import dataclass
from fractions import Fraction
from math import comb, factorial
import json

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.special import erf

from ._validation import as_state, check_index, check_positive, leading_zeros

__all__ = [
    "TransitionKernel",
    "Hyperplane",
    "build_kernel",
    "scaling_matrix",
    "flow_matrix",
    "mean_and_covariance",
    "gaussian_density",
    "log_density_ratio",
    "tv_distance",
    "maximal_tail",
    "naive_tv_bounds",
    "agreement_hyperplane",
    "kernel_to_json",
]


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TransitionKernel:
    """Structure matrices of the index-``k`` diffusion.

    Attributes
    ----------
    k : int
        Number of iterated integrals; the state has ``k + 1`` coordinates.
    H : ndarray
        Lower-triangular flow matrix at unit time, ``H[a, b] = 1/(a-b)!``.
    V : ndarray
        Unit-time covariance, ``V[a, b] = C(a+b, a) / (a+b+1)!``.
    L : ndarray
        Cholesky factor of ``V`` with positive diagonal.
    L_inv : ndarray
        Inverse of ``L`` by forward substitution.
    """

    k: int
    H: np.ndarray
    V: np.ndarray
    L: np.ndarray
    L_inv: np.ndarray

    @property
    def dim(self):
        return self.k + 1

    def solve_V(self, b):
        """``V^{-1} b`` via the Cholesky factor."""
        return cho_solve((self.L, True), b)


def _exact_H(k):
    return [[Fraction(1, factorial(a - b)) if a >= b else Fraction(0) for b in range(k + 1)]
            for a in range(k + 1)]


def _exact_V(k):
    return [[Fraction(comb(a + b, a), factorial(a + b + 1)) for b in range(k + 1)]
            for a in range(k + 1)]


def build_kernel(k):
    """Build ``H``, ``V`` and the Cholesky factor ``L`` for index ``k``.

    Entries of ``H`` and ``V`` are formed as exact rationals and rounded once.
    """
    k = check_index(k)
    H = np.array(_exact_H(k), dtype=float)
    V = np.array(_exact_V(k), dtype=float)
    L, lower = cho_factor(V, lower=True)
    L = np.tril(L)
    L_inv = solve_triangular(L, np.eye(k + 1), lower=True)
    return TransitionKernel(k, _frozen(H), _frozen(V), _frozen(L), _frozen(L_inv))


def scaling_matrix(k, t):
    """``D(t) = diag(1, t, ..., t^k)``."""
    return np.diag(float(t) ** np.arange(k + 1))


def flow_matrix(kernel, t):
    """``H(t) = D(t) H D(1/t)``; entry ``(a, b)`` is ``t^(a-b) / (a-b)!``."""
    t = check_positive(t, "t")
    a = np.arange(kernel.dim)
    gap = a[:, None] - a[None, :]
    return np.where(gap >= 0, kernel.H * t ** np.maximum(gap, 0), 0.0)


def mean_and_covariance(kernel, x, T):
    """Mean ``H(T) x`` and covariance ``T D(T) V D(T)`` of the state at time ``T``."""
    T = check_positive(T, "T")
    x = as_state(x, kernel.dim)
    d = T ** np.arange(kernel.dim)
    cov = T * kernel.V * np.outer(d, d)
    return flow_matrix(kernel, T) @ x, cov


def gaussian_density(kernel, x, T, w, log=False):
    """Transition density ``p_T(x, w)``; ``w`` may be a stack of points.

    Evaluated in whitened coordinates ``L^{-1} D(1/T) (w - mean) / sqrt(T)``.
    ``log=True`` returns the log density, which avoids underflow far out.
    """
    mean, _ = mean_and_covariance(kernel, x, T)
    w = np.atleast_2d(np.asarray(w, dtype=float))
    dinv = T ** -np.arange(kernel.dim, dtype=float)
    y = ((w - mean) * dinv) @ kernel.L_inv.T / np.sqrt(T)
    # log det of T D V D = (k+1) log T + 2 * sum(r) log T + 2 log det L
    logdet = (kernel.dim + 2 * np.arange(kernel.dim).sum()) * np.log(T) \
        + 2.0 * np.log(np.diag(kernel.L)).sum()
    logp = -0.5 * (y * y).sum(axis=1) - 0.5 * logdet - 0.5 * kernel.dim * np.log(2 * np.pi)
    out = logp if log else np.exp(logp)
    return out[0] if out.size == 1 else out


def log_density_ratio(kernel, x1, x2, T, w):
    """``log p_T(x1, w) - log p_T(x2, w)`` without forming either density.

    Uses ``-(y1 - y2) . (y1 + y2) / 2`` in whitened coordinates, where
    ``y1 - y2`` comes straight from ``x1 - x2``.  Subtracting two log densities
    instead loses all precision once the starts are many standard deviations
    apart, since both logs are then huge and nearly equal.
    """
    T = check_positive(T, "T")
    x1 = as_state(x1, kernel.dim, "x1")
    x2 = as_state(x2, kernel.dim, "x2")
    m1, _ = mean_and_covariance(kernel, x1, T)
    m2, _ = mean_and_covariance(kernel, x2, T)
    w = np.atleast_2d(np.asarray(w, dtype=float))
    dinv = T ** -np.arange(kernel.dim, dtype=float)
    diff = kernel.L_inv @ (kernel.H @ (dinv * (x2 - x1))) / np.sqrt(T)
    total = ((2.0 * w - m1 - m2) * dinv) @ kernel.L_inv.T / np.sqrt(T)
    out = -0.5 * total @ diff
    return out[0] if out.size == 1 else out


def _whitened_gap(kernel, z, T):
    # ||L^{-1} H D(1/T) z||
    dinv = T ** -np.arange(kernel.dim, dtype=float)
    return np.linalg.norm(kernel.L_inv @ (kernel.H @ (dinv * z)))


def tv_distance(kernel, x1, x2, T):
    """Total variation distance between the time-``T`` laws from ``x1`` and ``x2``.

    Both laws share one covariance, so the distance is ``P(|N(0,1)| <= l)`` with
    ``l = ||L^{-1} H D(1/T) z|| / (2 sqrt(T))``.
    """
    T = check_positive(T, "T")
    z = as_state(x1, kernel.dim, "x1") - as_state(x2, kernel.dim, "x2")
    ell = _whitened_gap(kernel, z, T) / (2.0 * np.sqrt(T))
    return float(erf(ell / np.sqrt(2.0)))


def naive_tv_bounds(kernel, z, T):
    """Elementary sandwich ``sqrt(2/pi) l e^{-l^2/2} <= TV <= sqrt(2/pi) l``."""
    z = as_state(z, kernel.dim, "z")
    ell = _whitened_gap(kernel, z, check_positive(T, "T")) / (2.0 * np.sqrt(T))
    c = np.sqrt(2.0 / np.pi) * ell
    return float(c * np.exp(-ell * ell / 2.0)), float(c)


def maximal_tail(kernel, z, T):
    """Lower bound on ``P(tau > T)`` for any coupling, and its decay order.

    Returns
    -------
    lower_bound : float
        The total variation distance for discrepancy ``z``; a maximal coupling
        attains it.
    order_r : int
        Index of the first nonzero coordinate of ``z``.  The bound decays like
        ``T^-(r + 1/2)``.
    """
    z = as_state(z, kernel.dim, "z")
    r = leading_zeros(z)
    return tv_distance(kernel, z, np.zeros_like(z), T), r


@dataclass(frozen=True)
class Hyperplane:
    normal: np.ndarray
    offset: np.ndarray

    def signed_distance(self, w):
        return (np.asarray(w, dtype=float) - self.offset) @ self.normal


def agreement_hyperplane(kernel, x_plus, x_minus, t):
    """Hyperplane on which the time-``t`` densities from ``x_plus`` and ``x_minus`` agree.

    The normal is proportional to ``(t^k D(1/t)) V^{-1} H (t^k D(1/t)) z``, a
    rescaling of ``Cov^{-1} (mean_plus - mean_minus)`` that stays O(1) in ``t``.
    The hyperplane passes through the midpoint of the two means.
    """
    t = check_positive(t, "t")
    xp = as_state(x_plus, kernel.dim, "x_plus")
    xm = as_state(x_minus, kernel.dim, "x_minus")
    z = xp - xm
    if not np.any(z):
        raise ValueError("x_plus and x_minus coincide; the densities agree everywhere")
    s = t ** (kernel.k - np.arange(kernel.dim, dtype=float))
    n = s * kernel.solve_V(kernel.H @ (s * z))
    n = n / np.linalg.norm(n)
    offset = flow_matrix(kernel, t) @ (0.5 * (xp + xm))
    return Hyperplane(_frozen(n), _frozen(offset))


def kernel_to_json(kernel):
    """JSON text with ``H``, ``V``, ``L`` as row-major arrays at 17 significant digits."""
    def rows(m):
        return "[" + ", ".join("[" + ", ".join(f"{v:.17g}" for v in row) + "]" for row in m) + "]"

    body = ", ".join(f'"{name}": {rows(getattr(kernel, name))}' for name in ("H", "V", "L"))
    text = '{"k": %d, %s}' % (kernel.k, body)
    json.loads(text)  # guard against malformed output
    return text
