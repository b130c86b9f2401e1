"""Finite-look-ahead coupling built on the Karhunen-Loeve expansion.

Time is cut into blocks of length ``T_n = alpha^n``.  On each block the
driving Brownian path is written as ``sum_k sqrt(lambda_k) w_k f_k(t/T)``, and
the mode coefficients ``w_k``, which are Brownian motions in algorithmic time,
are reflection coupled.  The two copies' whitened block-end discrepancies then
differ by a scalar rate-4 Brownian motion along a unit direction that evolves
deterministically.  That leaves a scalar Brownian motion absorbed at zero, run
on a deterministic clock.

Block ``n`` (``n >= 1``) has length ``T_n`` and ends at ``S_n = T_1 + ... + T_n``.
"""

from dataclasses import dataclass, field
import math

import numba
import numpy as np
from scipy.integrate import quad
from scipy.special import erf

from ._validation import as_state, check_positive, leading_zeros
from .gaussian import flow_matrix
from .paths import PathSample

__all__ = [
    "KLBasis",
    "CouplingMatrixE",
    "BlockSchedule",
    "BlockState",
    "iterated_eigenfunction_value",
    "iterated_eigenfunction_table",
    "kl_basis",
    "build_E",
    "transfer_matrix",
    "nu_sequence",
    "block_gain",
    "eigen_coefficients",
    "gain_bounds",
    "block_variances",
    "lookahead_survival_exact",
    "simulate_lookahead_scalar",
    "bounded_horizon_gains",
    "simulate_bounded_horizon",
    "bounded_horizon_survival_exact",
    "comparison_intrinsic_time",
    "LookaheadPathResult",
    "simulate_lookahead_paths",
]

_CLOSED_FORM_MAX_R = 6


def _omega(k_mode):
    return (np.asarray(k_mode, dtype=float) - 0.5) * np.pi


def _closed_form(r, omega, t):
    # r-fold antiderivative of sqrt(2) sin(omega s) with all lower derivatives zero at 0
    t = np.asarray(t, dtype=float)
    omega = np.asarray(omega, dtype=float)
    val = omega ** (-r) * np.sin(omega * t - r * np.pi / 2.0)
    for j in range(r):
        c = round(math.sin((j - r) * math.pi / 2.0))
        if c:
            val = val - c * t**j / math.factorial(j) * omega ** (j - r)
    return math.sqrt(2.0) * val


def _by_quadrature(r, omega, t):
    if r == 0:
        return math.sqrt(2.0) * math.sin(omega * t)
    kern = lambda s: (t - s) ** (r - 1) / math.factorial(r - 1)
    val, _ = quad(kern, 0.0, t, weight="sin", wvar=omega, epsabs=1e-14, epsrel=1e-13)
    return math.sqrt(2.0) * val


def iterated_eigenfunction_value(r, k_mode, t):
    """``f_{r,k}(t)``: the ``r``-fold iterated integral of ``sqrt(2) sin((k - 1/2) pi s)``."""
    if int(r) != r or r < 0:
        raise ValueError("r must be a non-negative integer")
    if int(k_mode) != k_mode or k_mode < 1:
        raise ValueError("k_mode must be a positive integer")
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    if t == 0.0:
        return 0.0  # every iterated integral vanishes at the origin
    omega = float(_omega(k_mode))
    if r <= _CLOSED_FORM_MAX_R:
        return float(_closed_form(int(r), omega, t))
    return _by_quadrature(int(r), omega, float(t))


def iterated_eigenfunction_table(r_max, K, t):
    """Array of shape ``(r_max + 1, K, len(t))`` holding ``f_{r,k}(t)``."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    omega = _omega(np.arange(1, K + 1))[:, None]
    out = np.empty((r_max + 1, K, t.size))
    for r in range(r_max + 1):
        if r <= _CLOSED_FORM_MAX_R:
            out[r] = _closed_form(r, omega, t[None, :])
            out[r][:, t == 0.0] = 0.0
        else:
            for i, om in enumerate(omega[:, 0]):
                out[r, i] = [_by_quadrature(r, om, tt) for tt in t]
    return out


@dataclass(frozen=True, eq=False)
class KLBasis:
    """Truncated eigen-expansion of Brownian motion on ``[0, 1]``.

    ``lambdas[k-1] = 1 / ((k - 1/2)^2 pi^2)`` and ``iterated_values[r, k-1]``
    is ``f_{r,k}(1)``.
    """

    K: int
    lambdas: np.ndarray
    iterated_values: np.ndarray


def kl_basis(index, K):
    if int(K) != K or K < 1:
        raise ValueError("K must be a positive integer")
    lambdas = 1.0 / _omega(np.arange(1, K + 1)) ** 2
    values = iterated_eigenfunction_table(index, int(K), [1.0])[:, :, 0]
    return KLBasis(int(K), lambdas, values)


@dataclass(frozen=True, eq=False)
class CouplingMatrixE:
    """``E[j, k] = sqrt(lambda_k) sum_r (L^-1)[j, r] f_{r,k}(1)``.

    Row ``j`` expresses the ``j``-th whitened endpoint coordinate in terms of
    the mode Brownian motions.  The matrix does not depend on block length.
    """

    entries: np.ndarray
    basis: KLBasis

    def gram(self):
        return self.entries @ self.entries.T


def build_E(kernel, K):
    basis = kl_basis(kernel.k, K)
    entries = (kernel.L_inv @ basis.iterated_values) * np.sqrt(basis.lambdas)
    entries.setflags(write=False)
    return CouplingMatrixE(entries, basis)


@dataclass(frozen=True)
class BlockSchedule:
    """Block lengths ``T_n = alpha^n``; ``alpha = 1`` gives unit blocks."""

    alpha: float

    def __post_init__(self):
        if not self.alpha >= 1.0 or not math.isfinite(self.alpha):
            raise ValueError("alpha must be >= 1")

    def length(self, n):
        return self.alpha ** n

    def end(self, n):
        """``S_n``, the end of block ``n``."""
        n = np.asarray(n, dtype=float)
        if self.alpha == 1.0:
            return n
        a = self.alpha
        return a * (a**n - 1.0) / (a - 1.0)


@dataclass
class BlockState:
    n: int
    nu: np.ndarray
    F: float
    coupled_at: int = None


def transfer_matrix(kernel, alpha):
    """``M = L^-1 H D(1/alpha) L``, which carries the whitened direction between blocks."""
    d = alpha ** -np.arange(kernel.dim, dtype=float)
    return kernel.L_inv @ (kernel.H * d) @ kernel.L


def _check_alpha(alpha):
    alpha = float(alpha)
    if not alpha > 1.0 or not math.isfinite(alpha):
        raise ValueError("alpha must exceed 1")
    return alpha


def _nu0(kernel, z):
    z = as_state(z, kernel.dim, "z")
    leading_zeros(z)
    y = kernel.L_inv @ z
    return y / np.linalg.norm(y), float(np.linalg.norm(y))


def nu_sequence(kernel, z, alpha, n_max):
    """Unit directions ``nu_0, ..., nu_{n_max}``; ``nu_n = M nu_{n-1} / ||M nu_{n-1}||``."""
    alpha = _check_alpha(alpha)
    nu, _ = _nu0(kernel, z)
    M = transfer_matrix(kernel, alpha)
    out = np.empty((int(n_max) + 1, kernel.dim))
    out[0] = nu
    for n in range(1, int(n_max) + 1):
        nu = M @ nu
        nu /= np.linalg.norm(nu)
        out[n] = nu
    return out


def _gains(kernel, z, alpha, n_max):
    # g_n = ||M^n nu_0|| for n = 0..n_max
    nu = nu_sequence(kernel, z, alpha, n_max)
    M = transfer_matrix(kernel, alpha)
    step = np.ones(int(n_max) + 1)
    step[1:] = np.linalg.norm(nu[:-1] @ M.T, axis=1)
    return np.cumprod(step)


def block_gain(kernel, z, alpha, n):
    """``g_n = ||L^-1 (H D(1/alpha))^n L nu_0||``."""
    return float(_gains(kernel, z, _check_alpha(alpha), int(n))[-1])


def eigen_coefficients(kernel, z, alpha):
    """Unit eigenvectors ``e_i`` of ``M`` (eigenvalue ``alpha^-i``) and coefficients of ``nu_0``.

    ``M`` is lower triangular with distinct diagonal ``alpha^-i``, so ``e_i`` has
    zeros above position ``i`` and follows by forward substitution.
    """
    alpha = _check_alpha(alpha)
    M = transfer_matrix(kernel, alpha)
    m = kernel.dim
    vecs = np.zeros((m, m))
    for i in range(m):
        lam = M[i, i]
        v = np.zeros(m)
        v[i] = 1.0
        for a in range(i + 1, m):
            v[a] = M[a, i:a] @ v[i:a] / (lam - M[a, a])
        vecs[:, i] = v / np.linalg.norm(v)
    nu, _ = _nu0(kernel, z)
    gamma = np.linalg.solve(vecs, nu)
    return vecs, gamma


def gain_bounds(kernel, z, alpha, n, form="sum"):
    """Triangle-inequality range for ``g_n`` around ``|gamma_0|``.

    ``form="sum"`` uses the spread ``sum_i |gamma_i| alpha^(-i n)``, which is
    always valid.  ``form="max"`` uses ``max_i |gamma_i| alpha^-n``; the two
    agree for ``k = 1``, but for larger ``k`` the max form can exclude ``g_n``.
    """
    _, gamma = eigen_coefficients(kernel, z, alpha)
    i = np.arange(1, gamma.size)
    if form == "sum":
        spread = float(np.sum(np.abs(gamma[1:]) * alpha ** (-i * float(n))))
    elif form == "max":
        spread = float(np.max(np.abs(gamma[1:]), initial=0.0)) * alpha ** (-float(n))
    else:
        raise ValueError("form must be 'sum' or 'max'")
    return abs(gamma[0]) - spread, abs(gamma[0]) + spread


def block_variances(kernel, z, alpha, n_max):
    """Initial value ``G_0 = ||L^-1 z||`` and per-block variances ``4 T_n / g_n^2``."""
    alpha = _check_alpha(alpha)
    _, G0 = _nu0(kernel, z)
    g = _gains(kernel, z, alpha, n_max)[1:]
    n = np.arange(1, int(n_max) + 1)
    return G0, 4.0 * alpha**n / g**2


def lookahead_survival_exact(kernel, z, alpha, n_max):
    """``P(no coupling by S_n)`` for ``n = 1..n_max``: Brownian survival on the block clock."""
    G0, var = block_variances(kernel, z, alpha, n_max)
    return erf(G0 / np.sqrt(2.0 * np.cumsum(var)))


@numba.njit(nogil=True, cache=True)
def _absorbed_walk(gen, g0, var):
    """First block in which a Brownian motion from ``g0`` reaches 0, or 0 if none.

    Each block draws the endpoint exactly and then applies the bridge crossing
    probability ``exp(-2 g g' / v)``.
    """
    g = g0
    for n in range(var.size):
        v = var[n]
        g1 = g + math.sqrt(v) * gen.standard_normal()
        if g1 <= 0.0:
            return n + 1
        p = math.exp(-2.0 * g * g1 / v)
        if p > 1e-300 and gen.random() < p:
            return n + 1
        g = g1
    return 0


def simulate_lookahead_scalar(kernel, z, alpha, n_max, stream, variances=None):
    """Block in which the look-ahead coupling succeeds, or ``None`` within ``n_max`` blocks.

    ``variances`` may carry a precomputed ``block_variances`` result to skip
    recomputation across replicates.
    """
    if variances is None:
        variances = block_variances(kernel, z, alpha, n_max)
    G0, var = variances
    n = _absorbed_walk(stream.generator, float(G0), np.ascontiguousarray(var))
    return n or None


def bounded_horizon_gains(kernel, z, n_max):
    """``c_n = ||L^-1 H(n) z||`` for ``n = 0..n_max`` with ``H(0) = I``."""
    if kernel.k < 1:
        raise ValueError("bounded-horizon coupling needs k >= 1")
    z = as_state(z, kernel.dim, "z")
    leading_zeros(z)
    n = np.arange(int(n_max) + 1, dtype=float)
    p = np.arange(kernel.dim)
    gap = p[:, None] - p[None, :]
    Hn = np.where(gap >= 0, kernel.H[None] * n[:, None, None] ** np.maximum(gap, 0)[None], 0.0)
    return np.linalg.norm(np.einsum("ij,njk,k->ni", kernel.L_inv, Hn, z), axis=1)


def _bounded_variances(kernel, z, n_max):
    c = bounded_horizon_gains(kernel, z, n_max)
    # Q_n = F_n / c_n starts at 1 and moves by 2 B / c_n over unit algorithmic time
    return 1.0, 4.0 / c[1:] ** 2


def simulate_bounded_horizon(kernel, z, n_max, stream, variances=None):
    """Unit-block look-ahead coupling; block of success or ``None``."""
    if variances is None:
        variances = _bounded_variances(kernel, z, n_max)
    q0, var = variances
    n = _absorbed_walk(stream.generator, q0, np.ascontiguousarray(var))
    return n or None


def bounded_horizon_survival_exact(kernel, z, n_max):
    _, var = _bounded_variances(kernel, z, n_max)
    return erf(1.0 / np.sqrt(2.0 * np.cumsum(var)))


def comparison_intrinsic_time(k, n_max):
    """Partial sum ``sum_{n=1}^{n_max} n^(-2k)``."""
    return math.fsum(n ** (-2.0 * k) for n in range(1, int(n_max) + 1))


@dataclass
class LookaheadPathResult:
    """Coupled paths plus per-block diagnostics.

    ``F_path[n-1]`` is ``||L^-1 D(1/T_n) Z_n||`` from the reconstructed states,
    ``F_scalar[n-1]`` the scalar recursion ``F' + 2 B(T_n ^ sigma)`` driven by
    the same ``B`` realisation, and ``F_prior[n-1]`` the block's starting gap
    ``F' = ||L^-1 H D(1/T_n) Z_{n-1}||``.  ``nu_path`` holds the whitened
    directions of the realised discrepancies.
    """

    path1: PathSample
    path2: PathSample
    coupled_block: int = None
    F_path: np.ndarray = field(default_factory=lambda: np.empty(0))
    F_scalar: np.ndarray = field(default_factory=lambda: np.empty(0))
    F_prior: np.ndarray = field(default_factory=lambda: np.empty(0))
    nu_path: np.ndarray = field(default_factory=lambda: np.empty((0, 0)))
    sigma: np.ndarray = field(default_factory=lambda: np.empty(0))


def _householder_apply(v, x):
    """Apply the reflection that maps the first axis onto unit vector ``v``."""
    u = -v.copy()
    u[0] += 1.0
    uu = u @ u
    if uu < 1e-30:
        return x.copy()
    return x - (2.0 * (u @ x) / uu) * u


def _first_passage_on_grid(stream, T, grid, barrier):
    """Brownian path on ``grid`` steps over ``[0, T]``; stop at ``barrier < 0``.

    Returns ``(crossed, sigma, B_T)``.  Crossings between grid points are drawn
    with the bridge probability.
    """
    dz = T / grid
    sd = math.sqrt(dz)
    b = 0.0
    for j in range(grid):
        b1 = b + sd * stream.normal()
        d0, d1 = b - barrier, b1 - barrier
        hit = d1 <= 0.0
        if not hit:
            p = math.exp(-2.0 * d0 * d1 / dz)
            hit = p > 1e-300 and stream.uniform() < p
        if hit:
            frac = d0 / (d0 - d1) if d1 <= 0.0 else d0 / (d0 + d1)
            rest = T - (j + 1) * dz
            tail = math.sqrt(rest) * stream.normal() if rest > 0 else 0.0
            return True, (j + frac) * dz, b1 + tail
        b = b1
    return False, math.nan, b


def simulate_lookahead_paths(kernel, x1, x2, alpha, K, n_blocks, grid_per_block, stream, E=None):
    """Path-level look-ahead coupling with ``K`` retained modes.

    On each uncoupled block the first column of an orthogonal frame is set to
    the normalised ``E^T eta``, and the frame is completed by a Householder
    reflection.  The first driver is reflected between the copies until it hits
    ``-F'/2`` and the remaining drivers are shared.  Once the copies have
    coupled, later blocks reuse identical noise.
    """
    alpha = float(alpha)
    if not alpha >= 1.0:
        raise ValueError("alpha must be >= 1")
    K = int(K)
    if K < kernel.dim:
        raise ValueError(f"K={K} is below k+1={kernel.dim}; E rows cannot be orthonormal")
    if int(n_blocks) < 1 or int(grid_per_block) < 1:
        raise ValueError("n_blocks and grid_per_block must be positive")
    if E is None or E.entries.shape[1] != K:
        E = build_E(kernel, K)
    x1 = as_state(x1, kernel.dim, "x1").copy()
    x2 = as_state(x2, kernel.dim, "x2").copy()
    G = int(grid_per_block)
    tgrid = np.linspace(0.0, 1.0, G + 1)
    phi = iterated_eigenfunction_table(kernel.k, K, tgrid)  # (k+1, K, G+1)
    sqrt_lam = np.sqrt(E.basis.lambdas)
    powers = np.arange(kernel.dim)

    times = [np.zeros(1)]
    states1, states2 = [x1[None, :]], [x2[None, :]]
    coupled = None if np.any(x1 != x2) else 0
    F_path, F_scalar, F_prior, nus, sigmas = [], [], [], [], []
    t0 = 0.0
    for n in range(1, int(n_blocks) + 1):
        T = alpha**n
        dinv = T ** -powers.astype(float)
        b_rest = math.sqrt(T) * stream.normal(K)
        if coupled is None:
            Z = x1 - x2
            y = kernel.L_inv @ (kernel.H @ (dinv * Z))
            Fp = float(np.linalg.norm(y))
            eta = y / Fp
            v1 = E.entries.T @ eta
            v1 /= np.linalg.norm(v1)
            crossed, sigma, B_T = _first_passage_on_grid(stream, T, G, -0.5 * Fp)
            b1 = b_rest.copy()
            b2 = b_rest.copy()
            b1[0] = B_T
            b2[0] = B_T + Fp if crossed else -B_T
            w1 = _householder_apply(v1, b1)
            w2 = _householder_apply(v1, b2)
        else:
            w1 = w2 = b_rest
            crossed, sigma = False, math.nan

        blocks = []
        for x, w in ((x1, w1), (x2, w2)):
            c = sqrt_lam * w
            stoch = (T ** powers)[:, None] * np.einsum("k,rkj->rj", c, phi)
            det = np.stack([flow_matrix(kernel, T * s) @ x if s > 0 else x for s in tgrid], axis=1)
            blocks.append((det + stoch).T)
        seg1, seg2 = blocks
        times.append(t0 + T * tgrid[1:])
        states1.append(seg1[1:])
        states2.append(seg2[1:])
        t0 += T

        x1 = seg1[-1].copy()
        if coupled is None:
            x2 = seg2[-1].copy()
            y_new = kernel.L_inv @ (dinv * (x1 - x2))
            F_new = float(np.linalg.norm(y_new))
            F_path.append(F_new)
            F_prior.append(Fp)
            F_scalar.append(0.0 if crossed else Fp + 2.0 * B_T)
            nus.append(y_new / F_new if F_new > 0 else np.full(kernel.dim, np.nan))
            sigmas.append(sigma)
            if crossed:
                coupled = n
                x2 = x1.copy()
        else:
            x2 = x1.copy()

    return LookaheadPathResult(
        path1=PathSample(np.concatenate(times), np.concatenate(states1)),
        path2=PathSample(np.concatenate(times), np.concatenate(states2)),
        coupled_block=coupled,
        F_path=np.asarray(F_path),
        F_scalar=np.asarray(F_scalar),
        F_prior=np.asarray(F_prior),
        nu_path=np.asarray(nus).reshape(-1, kernel.dim),
        sigma=np.asarray(sigmas),
    )
