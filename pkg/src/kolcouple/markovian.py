"""Reflection/synchronous couplings of the classical (index-1) diffusion.

Two copies of ``(B, int B dt)`` are tracked through their difference ``(U, V)``.
Under reflection coupling ``U`` is a rate-4 Brownian motion and ``V' = U``; under
synchronous coupling ``U`` is frozen and ``V`` moves ballistically.

Half-cycle ``k`` starts with ``V = 0``.  Reflection runs until ``U`` reaches
``-sign(U_start) 2^-k scale`` or ``V`` returns to zero, then synchronous
coupling runs until ``V = 0``.  So ``|U| <= 2^-k scale`` when half-cycle ``k``
ends.

The reflection phase is stepped with the exact Gaussian transition of
``(U, V)``.  Steps are adaptive: never shorter than ``dt0 4^-k scale^2`` and
grown while the state is far from both stopping sets.  Crossings of the ``U``
threshold between grid points are caught with the Brownian-bridge crossing
probability.  Event times are located by linear interpolation within the
step.
"""

from dataclasses import dataclass
import math

import numba
import numpy as np
from scipy.special import gamma, gammainc

from ._validation import check_positive

__all__ = [
    "area_density",
    "area_tail",
    "area_cdf",
    "CouplingOutcome",
    "simulate_bck",
    "simulate_mu_t",
    "simulate_from",
]

_AREA_CONST = 2.0 ** (1.0 / 3.0) / (3.0 ** (2.0 / 3.0) * gamma(1.0 / 3.0))


def area_density(a, u):
    """Density at ``u`` of the area under a Brownian motion from ``a`` until it hits 0."""
    a = np.asarray(a, dtype=float)
    u = np.asarray(u, dtype=float)
    if np.any(a <= 0) or np.any(u <= 0):
        raise ValueError("area_density needs a > 0 and u > 0")
    return _AREA_CONST * a * u ** (-4.0 / 3.0) * np.exp(-2.0 * a**3 / (9.0 * u))


def area_tail(a, t):
    """``P(area > t)``, a regularised lower incomplete gamma ``P(1/3, 2a^3/(9t))``."""
    a = np.asarray(a, dtype=float)
    t = np.asarray(t, dtype=float)
    if np.any(a <= 0) or np.any(t <= 0):
        raise ValueError("area_tail needs a > 0 and t > 0")
    return gammainc(1.0 / 3.0, 2.0 * a**3 / (9.0 * t))


def area_cdf(a, t):
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    pos = t > 0
    out[pos] = 1.0 - area_tail(a, t[pos])
    return out


# Reflection-phase exit codes.
_U_HIT, _V_HIT, _CENSORED, _STEP_LIMIT = 0, 1, 2, 3
# Run status codes.
COUPLED, CENSORED, STOPPED = 0, 1, 2

_INV_2SQRT3 = 1.0 / (2.0 * math.sqrt(3.0))
_MAX_STEPS = 200_000_000


@numba.njit(nogil=True, cache=True)
def _reflect(gen, u, v, t, thr, h_min, t_max):
    """Reflection phase until U hits ``thr`` or V returns to 0.

    Returns ``(code, u, v, t, min_signed_v)`` where ``min_signed_v`` is the
    smallest value of ``sign * V`` seen at grid points strictly inside the phase.
    """
    side = 1.0 if u > thr else -1.0
    if v != 0.0:
        sv = 1.0 if v > 0.0 else -1.0
    else:
        sv = 1.0 if u > 0.0 else -1.0
    min_sv = np.inf
    for _ in range(_MAX_STEPS):
        remaining = t_max - t
        if remaining <= 0.0:
            return _CENSORED, u, v, t_max, min_sv
        du = side * (u - thr)
        h = (du / 8.0) ** 2  # 4 standard deviations of the rate-4 increment
        if v != 0.0:
            av = abs(v)
            hv = (av / 32.0) ** (2.0 / 3.0)
            if u * v < 0.0:
                hv = min(hv, 0.5 * av / abs(u))
            h = min(h, hv)
        else:
            h = h_min
        if h < h_min:
            h = h_min
        if h > remaining:
            h = remaining
        sq = math.sqrt(h)
        z0 = gen.standard_normal()
        z1 = gen.standard_normal()
        u1 = u + 2.0 * sq * z0
        v1 = v + u * h + 2.0 * h * sq * (0.5 * z0 + _INV_2SQRT3 * z1)

        fu = 2.0
        d1 = side * (u1 - thr)
        if d1 <= 0.0:
            fu = du / (du - d1)
        else:
            p = math.exp(-du * d1 / (2.0 * h))
            if p > 1e-300 and gen.random() < p:
                fu = du / (du + d1)
        fv = 2.0
        if sv * v1 <= 0.0:
            fv = v / (v - v1) if v != 0.0 else 0.0

        if fu <= 1.0 or fv <= 1.0:
            if fu <= fv:
                return _U_HIT, thr, v + fu * (v1 - v), t + fu * h, min_sv
            return _V_HIT, u + fv * (u1 - u), 0.0, t + fv * h, min_sv
        u, v, t = u1, v1, t + h
        if sv * v < min_sv:
            min_sv = sv * v
    return _STEP_LIMIT, u, v, t, min_sv


@numba.njit(nogil=True, cache=True)
def _bck_run(gen, u, t, scale_abs, dt0, t_max, floor, max_cycles, times_out, u_out, minv_out):
    """Half-cycles from ``(u, 0)`` at time ``t``.  Returns ``(status, t, cycles)``."""
    n = 0
    while n < max_cycles:
        k = n + 1
        s = 1.0 if u > 0.0 else -1.0
        thr = -s * scale_abs * 0.5**k
        h_min = dt0 * min(scale_abs * scale_abs * 0.25**k, u * u)
        code, u, v, t, min_sv = _reflect(gen, u, 0.0, t, thr, h_min, t_max)
        if code == _CENSORED or code == _STEP_LIMIT:
            return CENSORED, t_max, n
        if code == _U_HIT and v * s > 0.0:
            # ballistic phase with U frozen at the threshold
            t += abs(v / thr)
            if t > t_max:
                return CENSORED, t_max, n
        if abs(u) > abs(thr):
            u = math.copysign(abs(thr), u)
        times_out[n] = t
        u_out[n] = u
        minv_out[n] = min_sv
        n += 1
        if abs(u) <= floor:
            return COUPLED, t, n
    return STOPPED, t, n


@numba.njit(nogil=True, cache=True)
def _mu_t_run(gen, target_t, dt0, t_max, floor_exp, max_cycles, times_out, u_out, minv_out):
    thr = -4.0 / target_t
    h_min = dt0 * thr * thr
    code, u, v, t, _ = _reflect(gen, 0.0, 1.0, 0.0, thr, h_min, t_max)
    if code == _CENSORED or code == _STEP_LIMIT:
        return CENSORED, t_max, 0, np.nan, np.nan
    t1, v1 = t, v
    if code == _U_HIT and v > 0.0:
        t += v / abs(thr)
        if t > t_max:
            return CENSORED, t_max, 0, t1, v1
    if u == 0.0:
        return COUPLED, t, 0, t1, v1
    scale_abs = abs(u)
    status, t, n = _bck_run(gen, u, t, scale_abs, dt0, t_max, scale_abs * 2.0**-floor_exp,
                            max_cycles, times_out, u_out, minv_out)
    return status, t, n, t1, v1


@numba.njit(nogil=True, cache=True)
def _reduce_to_axis(gen, u, v, dt0, t_max):
    # reflection from a general (u, v) until V first returns to zero
    far = -math.copysign(1e300, v)
    h_min = dt0 * min(u * u, abs(v) ** (2.0 / 3.0))
    code, u, v, t, _ = _reflect(gen, u, v, 0.0, far, h_min, t_max)
    return code, u, t


@dataclass
class CouplingOutcome:
    """Result of one coupled run.

    ``tau`` is the coupling time when ``coupled`` is true and the censoring
    time ``t_max`` otherwise.  ``half_cycle_times`` holds the ends ``S_k`` of
    the completed half-cycles, ``half_cycle_u`` the value of ``U`` there, and
    ``half_cycle_min_v`` the smallest signed ``V`` seen inside each
    reflection phase.  ``stage_one`` is ``(T1', V(T1'))`` for the per-target
    coupling.
    """

    coupled: bool
    tau: float
    t_max: float
    half_cycle_times: np.ndarray
    half_cycle_u: np.ndarray
    half_cycle_min_v: np.ndarray
    stage_one: tuple = None
    stopped: bool = False

    @property
    def censored(self):
        return not self.coupled and not self.stopped


def _buffers(n):
    return np.empty(n), np.empty(n), np.empty(n)


def _outcome(status, t, n, t_max, bufs, stage_one=None):
    times, us, mins = bufs
    return CouplingOutcome(
        coupled=status == COUPLED,
        tau=float(t) if status != CENSORED else float(t_max),
        t_max=float(t_max),
        half_cycle_times=times[:n].copy(),
        half_cycle_u=us[:n].copy(),
        half_cycle_min_v=mins[:n].copy(),
        stage_one=stage_one,
        stopped=status == STOPPED,
    )


def simulate_bck(scale, dt, t_max, stream, max_half_cycles=None, floor_exponent=40):
    """Half-cycle reflection/synchronous coupling from ``(U, V) = (scale, 0)``.

    Parameters
    ----------
    scale : float
        Initial difference of the Brownian coordinates; must be nonzero.
    dt : float
        Base step ``dt0``; half-cycle ``k`` never steps below ``dt0 4^-k scale^2``.
    t_max : float
        Censoring time.
    stream : NoiseStream
    max_half_cycles : int, optional
        Stop after this many half-cycles (``stopped=True`` in the outcome).
    floor_exponent : int
        Declare coupling once ``|U| <= 2^-floor_exponent |scale|`` at a half-cycle end.
    """
    scale = float(scale)
    if scale == 0.0 or not math.isfinite(scale):
        raise ValueError("scale must be nonzero and finite; zero discrepancy is already coupled")
    dt = check_positive(dt, "dt")
    t_max = check_positive(t_max, "t_max")
    cycles = floor_exponent + 1 if max_half_cycles is None else int(max_half_cycles)
    bufs = _buffers(cycles)
    status, t, n = _bck_run(stream.generator, scale, 0.0, abs(scale), dt, t_max,
                            abs(scale) * 2.0**-floor_exponent, cycles, *bufs)
    return _outcome(status, t, n, t_max, bufs)


def simulate_mu_t(target_t, dt, stream, t_max=None, floor_exponent=40):
    """Per-target coupling from ``(U, V) = (0, 1)``.

    Stage one reflects until ``U = -4/target_t`` or ``V = 0``, stage two holds
    ``U`` fixed until ``V = 0``, and stage three runs :func:`simulate_bck` from
    ``(U, 0)``.  The run is censored at ``2 target_t`` unless ``t_max`` is given.
    """
    target_t = check_positive(target_t, "target_t")
    dt = check_positive(dt, "dt")
    t_max = 2.0 * target_t if t_max is None else check_positive(t_max, "t_max")
    bufs = _buffers(floor_exponent + 1)
    status, t, n, t1, v1 = _mu_t_run(stream.generator, target_t, dt, t_max, float(floor_exponent),
                                     floor_exponent + 1, *bufs)
    return _outcome(status, t, n, t_max, bufs, stage_one=(float(t1), float(v1)))


def simulate_from(u, v, dt, t_max, stream, target_t=None):
    """Couple from an arbitrary difference ``(u, v)``.

    ``v = 0`` runs :func:`simulate_bck`.  ``u v != 0`` first reflects until
    ``V`` returns to zero and then continues as from ``(U, 0)``.  ``u = 0``
    runs the per-target recipe rescaled from ``(0, 1)``.  Space scales by
    ``|v|^(1/3)`` and time by ``|v|^(2/3)``.
    """
    u, v = float(u), float(v)
    if u == 0.0 and v == 0.0:
        raise ValueError("zero discrepancy is already coupled")
    t_max = check_positive(t_max, "t_max")
    if v == 0.0:
        return simulate_bck(u, dt, t_max, stream)
    if u == 0.0:
        if target_t is None:
            raise ValueError("starts with u = 0 need target_t")
        c = abs(v) ** (2.0 / 3.0)
        out = simulate_mu_t(target_t / c, dt, stream, t_max=t_max / c)
        out.tau *= c
        out.t_max = t_max
        out.half_cycle_times = out.half_cycle_times * c
        out.half_cycle_u = out.half_cycle_u * math.copysign(abs(v) ** (1.0 / 3.0), v)
        t1, v1 = out.stage_one
        out.stage_one = (t1 * c, v1 * v)
        return out
    code, u1, t1 = _reduce_to_axis(stream.generator, u, v, check_positive(dt, "dt"), t_max)
    if code != _V_HIT or u1 == 0.0:
        empty = np.empty(0)
        return CouplingOutcome(False, t_max, t_max, empty, empty, empty)
    rest = simulate_bck(u1, dt, t_max - t1, stream) if t_max > t1 else None
    if rest is None:
        empty = np.empty(0)
        return CouplingOutcome(False, t_max, t_max, empty, empty, empty)
    rest.tau = rest.tau + t1 if rest.coupled else t_max
    rest.t_max = t_max
    rest.half_cycle_times = np.concatenate([[t1], rest.half_cycle_times + t1])
    rest.half_cycle_u = np.concatenate([[u1], rest.half_cycle_u])
    rest.half_cycle_min_v = np.concatenate([[np.nan], rest.half_cycle_min_v])
    return rest
