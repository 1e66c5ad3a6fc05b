"""Strong simulation of the controlled delay equation.

Explicit Euler-Maruyama on a step grid that divides the delay horizon, so
the history window always aligns with stored nodes and the kernel
quadrature needs no interpolation. Brownian increments come from
counter-based generators keyed on (seed, path index), which makes every
path bit-reproducible and independent across indices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import (
    LiftedState,
    NumericalError,
    ProblemSpec,
    Segment,
    SegmentGrid,
    ValidationError,
    resample_kernel,
    resample_segment,
)


def _philox(seed: int, path_index: int) -> np.random.Generator:
    key = (int(seed) & 0xFFFFFFFFFFFFFFFF) << 64 | (int(path_index) & 0xFFFFFFFFFFFFFFFF)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class BrownianDriver:
    """Counter-based Wiener increment source for one path."""

    seed: int
    path_index: int
    delta: float
    q: int

    def increments(self, n_steps: int) -> np.ndarray:
        """Increment stream, shape (n_steps, q); identical on every call."""
        rng = _philox(self.seed, self.path_index)
        return rng.standard_normal((n_steps, self.q)) * math.sqrt(self.delta)


def batch_increments(seed: int, path_indices, delta: float, q: int,
                     n_steps: int) -> np.ndarray:
    """Stacked increments for several paths, shape (P, n_steps, q)."""
    out = np.empty((len(path_indices), n_steps, q))
    for i, idx in enumerate(path_indices):
        out[i] = BrownianDriver(seed, int(idx), delta, q).increments(n_steps)
    return out


def coarsen_increments(dw: np.ndarray, factor: int) -> np.ndarray:
    """Aggregate fine increments into coarse ones (pairwise sums for factor 2)."""
    steps = dw.shape[-2]
    if steps % factor:
        raise ValidationError(f"{steps} increments not divisible by factor {factor}")
    shape = dw.shape[:-2] + (steps // factor, factor, dw.shape[-1])
    return dw.reshape(shape).sum(axis=-2)


class OpenLoopControl:
    """Piecewise-constant control: one value, or one value per step."""

    def __init__(self, values):
        self.values = np.atleast_1d(np.asarray(values, dtype=float))
        if not np.all(np.isfinite(self.values)):
            raise ValidationError("control values must be finite")

    def resolve(self, k: int, t: float, window: np.ndarray) -> np.ndarray:
        n_paths = window.shape[0]
        if self.values.ndim == 1:
            return np.broadcast_to(self.values, (n_paths, self.values.shape[0]))
        return np.broadcast_to(self.values[k], (n_paths, self.values.shape[1]))


class FeedbackControl:
    """Stationary feedback: a map from the current history window to a control.

    The callback receives (step index, time, window) where window has shape
    (paths, history nodes + 1, n) and covers [t - d, t]; it must return
    controls of shape (paths, p). Evaluation is deterministic by contract.
    """

    def __init__(self, fn):
        self.fn = fn

    def resolve(self, k: int, t: float, window: np.ndarray) -> np.ndarray:
        u = np.asarray(self.fn(k, t, window), dtype=float)
        if u.ndim == 1:
            u = u[:, None]
        return u

    @classmethod
    def from_state_policy(cls, policy, step_grid: SegmentGrid):
        """Adapt a policy defined on lifted states (evaluated path by path)."""

        def fn(k, t, window):
            us = []
            for row in window:
                state = LiftedState(row[-1], Segment(step_grid, row))
                us.append(np.atleast_1d(policy(state)))
            return np.asarray(us, dtype=float)

        return cls(fn)


@dataclass(frozen=True, eq=False)
class SddePath:
    """One realized trajectory on [-d, T] with the applied control path."""

    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    delta: float
    n_history: int
    seed: int
    path_index: int
    segment_grid: SegmentGrid

    @property
    def step_times(self) -> np.ndarray:
        """Times from 0 to T."""
        return self.times[self.n_history:]

    @property
    def step_states(self) -> np.ndarray:
        return self.states[self.n_history:]

    def value_at(self, t: float) -> np.ndarray:
        cols = [np.interp(t, self.times, self.states[:, i])
                for i in range(self.states.shape[1])]
        return np.asarray(cols)


def _steps_of(span: float, delta: float, what: str) -> int:
    steps = span / delta
    rounded = round(steps)
    if rounded < 1 or abs(steps - rounded) > 1e-9 * max(1.0, abs(steps)):
        raise ValidationError(
            f"step {delta} must divide {what}={span} (got {steps} steps)"
        )
    return int(rounded)


def _simulate_batch(spec: ProblemSpec, x: LiftedState, ctrl, T: float,
                    delta: float, increments: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Euler-Maruyama over a batch of paths sharing spec, state, and control.

    Returns (times, states (P, K+1+hist, n), controls (P, n_steps, p)).
    """
    n_hist = _steps_of(spec.d, delta, "d")
    n_steps = _steps_of(T, delta, "T") if T > 0 else 0
    P = increments.shape[0]
    if n_steps and increments.shape[1] < n_steps:
        raise ValidationError(
            f"need {n_steps} increments, driver provided {increments.shape[1]}"
        )
    step_grid = SegmentGrid(spec.d, n_hist)
    a1 = resample_kernel(spec.kernel_drift, step_grid)
    a2 = resample_kernel(spec.kernel_noise, step_grid)
    w = step_grid.weights
    wk1 = w[:, None, None] * a1.values
    wk2 = w[:, None, None] * a2.values

    times = delta * np.arange(-n_hist, n_steps + 1)
    states = np.empty((P, n_hist + n_steps + 1, spec.n))
    init_tail = resample_segment(x.tail, step_grid).values
    states[:, : n_hist + 1] = init_tail[None, :, :]
    states[:, n_hist] = x.head[None, :]
    controls = np.empty((P, n_steps, spec.control_set.shape[1]))

    for k in range(n_steps):
        window = states[:, k : k + n_hist + 1]
        y = states[:, k + n_hist]
        z1 = np.einsum("jhn,pjn->ph", wk1, window)
        z2 = np.einsum("jhn,pjn->ph", wk2, window)
        u = ctrl.resolve(k, k * delta, window)
        controls[:, k] = u
        b = np.asarray(spec.drift(y, z1, u), dtype=float)
        sig = np.asarray(spec.noise(y, z2, u), dtype=float)
        y_next = y + b * delta + np.einsum("pnq,pq->pn", sig, increments[:, k])
        if not np.all(np.isfinite(y_next)):
            raise NumericalError(f"non-finite state at step {k + 1} (t={ (k + 1) * delta:g})")
        states[:, k + n_hist + 1] = y_next
    return times, states, controls


def simulate_sdde(spec: ProblemSpec, x: LiftedState, ctrl, T: float,
                  delta: float, driver: BrownianDriver,
                  increments: np.ndarray | None = None) -> SddePath:
    """Simulate one strong path of the delayed state equation."""
    spec.validate()
    n_steps = _steps_of(T, delta, "T") if T > 0 else 0
    if increments is None:
        increments = driver.increments(n_steps)[None, :, :]
    else:
        increments = np.asarray(increments, dtype=float)[None, :, :]
    times, states, controls = _simulate_batch(spec, x, ctrl, T, delta, increments)
    return SddePath(times=times, states=states[0], controls=controls[0],
                    delta=delta, n_history=_steps_of(spec.d, delta, "d"),
                    seed=driver.seed, path_index=driver.path_index,
                    segment_grid=spec.grid)


def _discounted_cost_batch(states: np.ndarray, controls: np.ndarray,
                           spec: ProblemSpec, n_hist: int, delta: float) -> np.ndarray:
    """Left Riemann sum of the discounted running cost, per path."""
    n_steps = controls.shape[1]
    t = delta * np.arange(n_steps)
    disc = np.exp(-spec.rho * t)
    y = states[:, n_hist : n_hist + n_steps]
    total = np.zeros(states.shape[0])
    for k in range(n_steps):
        total += disc[k] * np.asarray(spec.cost(y[:, k], controls[:, k]), dtype=float)
    return total * delta


def discounted_cost(path: SddePath, spec: ProblemSpec, T: float) -> float:
    """Discounted running cost accumulated over [0, T)."""
    n_steps = _steps_of(T, path.delta, "T") if T > 0 else 0
    if n_steps > path.controls.shape[0]:
        raise ValidationError(f"path covers {path.controls.shape[0]} steps, need {n_steps}")
    return float(_discounted_cost_batch(path.states[None, : path.n_history + n_steps + 1],
                                        path.controls[None, :n_steps],
                                        spec, path.n_history, path.delta)[0])


def mc_cost(spec: ProblemSpec, x: LiftedState, ctrl, T: float, delta: float,
            n_paths: int, seed: int, chunk: int = 256) -> tuple[float, float]:
    """Monte Carlo estimate of the discounted cost: (mean, standard error).

    Paths use independent counter-based streams, so the result is
    deterministic in the seed and independent of the chunk size.
    """
    if n_paths < 2:
        raise ValidationError("mc_cost needs at least 2 paths")
    spec.validate()
    n_steps = _steps_of(T, delta, "T") if T > 0 else 0
    n_hist = _steps_of(spec.d, delta, "d")
    costs: list[float] = []
    for start in range(0, n_paths, chunk):
        idx = np.arange(start, min(start + chunk, n_paths))
        dw = batch_increments(seed, idx, delta, spec.q, n_steps)
        _, states, controls = _simulate_batch(spec, x, ctrl, T, delta, dw)
        costs.extend(_discounted_cost_batch(states, controls, spec, n_hist, delta).tolist())
    mean = math.fsum(costs) / n_paths
    var = math.fsum((c - mean) ** 2 for c in costs) / (n_paths - 1)
    return mean, math.sqrt(var / n_paths)


def truncation_horizon(spec: ProblemSpec, x_norm: float, tol: float,
                       c_lambda: float = 1.0) -> float:
    """Horizon beyond which the discounted tail is below tol.

    Uses the moment bound with rate midway between the discount and its
    admissibility floor; requires the discount to clear the floor. The
    moment-bound prefactor has no closed form and defaults to 1.
    """
    from .hjb import discount_floor

    rho0 = discount_floor(spec.growth_const, spec.cost_growth_exponent)
    if spec.rho <= rho0:
        raise ValidationError(
            f"discount {spec.rho} does not exceed the admissibility floor {rho0:g}"
        )
    lam = (spec.rho + rho0) / 2.0
    gap = spec.rho - lam
    bound0 = c_lambda * (1.0 + x_norm ** spec.cost_growth_exponent) / gap
    if bound0 <= tol:
        return 0.0
    return math.log(bound0 / tol) / gap
