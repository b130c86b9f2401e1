"""Sample paths, exact transitions and reproducible noise streams."""

from dataclasses import dataclass, field
import csv
import math

import numpy as np

from ._validation import as_state, check_positive
from .gaussian import flow_matrix

__all__ = [
    "NoiseStream",
    "derive_stream",
    "PathSample",
    "exact_transition",
    "simulate_path_euler",
    "euler_endpoints",
    "write_path_csv",
]


@dataclass
class NoiseStream:
    """Random source owned by one replicate.

    The generator is PCG64 seeded from ``SeedSequence(master_seed,
    spawn_key=(replicate_id,))``, so distinct ``(master_seed, replicate_id)``
    pairs give independent streams and equal pairs replay bit for bit.  Not
    safe to share between threads.
    """

    master_seed: int
    replicate_id: int
    generator: np.random.Generator = field(repr=False)

    def normal(self, size=None):
        return self.generator.standard_normal(size)

    def uniform(self, size=None):
        return self.generator.random(size)


def derive_stream(master_seed, replicate_id):
    if master_seed < 0 or replicate_id < 0:
        raise ValueError("seeds and replicate ids must be non-negative")
    seq = np.random.SeedSequence(int(master_seed), spawn_key=(int(replicate_id),))
    return NoiseStream(int(master_seed), int(replicate_id), np.random.Generator(np.random.PCG64(seq)))


@dataclass
class PathSample:
    times: np.ndarray
    states: np.ndarray  # shape (len(times), k + 1)

    @property
    def end(self):
        return self.states[-1]


def exact_transition(kernel, x, h, stream):
    """One exact step of length ``h``: ``H(h) x + sqrt(h) D(h) L xi``."""
    h = check_positive(h, "h")
    x = as_state(x, kernel.dim)
    xi = stream.normal(kernel.dim)
    d = h ** np.arange(kernel.dim)
    return flow_matrix(kernel, h) @ x + math.sqrt(h) * d * (kernel.L @ xi)


def _grid(T, dt):
    T = check_positive(T, "T")
    dt = check_positive(dt, "dt")
    if dt > T:
        raise ValueError(f"dt={dt} exceeds the horizon T={T}")
    n = int(math.ceil(T / dt - 1e-9))
    return np.linspace(0.0, T, n + 1)


def _trapezoid_step(state, h, dB):
    # Brownian coordinate first, then each integral from its old and new integrand.
    old = state.copy()
    state[..., 0] += dB
    for r in range(1, state.shape[-1]):
        state[..., r] += 0.5 * (old[..., r - 1] + state[..., r - 1]) * h


def simulate_path_euler(kernel, x, T, dt, stream, noise_scale=1.0):
    """Discretised path on a uniform grid with step at most ``dt``.

    The Brownian coordinate takes Gaussian increments; each integral coordinate
    uses the trapezoidal update ``I_r += (I_{r-1,old} + I_{r-1,new}) h / 2``.
    ``noise_scale=0`` switches the noise off and follows the deterministic flow.
    """
    x = as_state(x, kernel.dim)
    times = _grid(T, dt)
    states = np.empty((times.size, kernel.dim))
    states[0] = x
    cur = x.copy()
    steps = np.diff(times)
    noise = stream.normal(steps.size) * np.sqrt(steps) * noise_scale
    for i, h in enumerate(steps):
        _trapezoid_step(cur, h, noise[i])
        states[i + 1] = cur
    return PathSample(times, states)


def euler_endpoints(kernel, x, T, dt, stream, n_paths):
    """End states of ``n_paths`` independent trapezoidal-Euler paths."""
    x = as_state(x, kernel.dim)
    times = _grid(T, dt)
    cur = np.tile(x, (int(n_paths), 1))
    for h in np.diff(times):
        _trapezoid_step(cur, h, stream.normal(cur.shape[0]) * math.sqrt(h))
    return cur


def write_path_csv(path, fileobj):
    """Write a path as CSV with columns ``t, I0, ..., Ik``."""
    writer = csv.writer(fileobj)
    writer.writerow(["t"] + [f"I{r}" for r in range(path.states.shape[1])])
    for t, row in zip(path.times, path.states):
        writer.writerow([f"{t:.17g}"] + [f"{v:.17g}" for v in row])
