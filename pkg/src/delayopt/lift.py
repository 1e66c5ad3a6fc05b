"""Mild simulation in the lifted space and its agreement with the direct path.

The lifted state evolves by one-step mild Euler: add the drift and noise
increments to the head, then transport the whole state with the explicit
shift semigroup. Agreement with the direct Euler path of the delay equation
is measured pathwise on matched noise, in the head and in the quadrature
distance between the transported tail and the lifted history window.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from .core import (
    LiftedState,
    NumericalError,
    ProblemSpec,
    Segment,
    SegmentGrid,
    resample_kernel,
    resample_segment,
)
from .operators import assemble_gram_operator, minus_one_norm, spectral_decomposition
from .sdde import (
    BrownianDriver,
    SddePath,
    _steps_of,
    batch_increments,
    coarsen_increments,
    simulate_sdde,
)


def with_resolution(spec: ProblemSpec, m: int) -> ProblemSpec:
    """Copy of a problem with the segment grid refined or coarsened to m."""
    grid = SegmentGrid(spec.d, m)
    return dataclasses.replace(
        spec,
        grid=grid,
        kernel_drift=resample_kernel(spec.kernel_drift, grid),
        kernel_noise=resample_kernel(spec.kernel_noise, grid),
        params={**spec.params, "m": m},
    )


@dataclass(frozen=True, eq=False)
class LiftedPath:
    """Lifted trajectory: head and tail tabulated at every step time."""

    times: np.ndarray
    heads: np.ndarray            # (K+1, n)
    tails: np.ndarray            # (K+1, m+1, n)
    grid: SegmentGrid
    delta: float
    seed: int
    path_index: int

    def state(self, k: int) -> LiftedState:
        return LiftedState(self.heads[k], Segment(self.grid, self.tails[k]))


def simulate_mild(spec: ProblemSpec, x: LiftedState, ctrl, T: float, delta: float,
                  driver: BrownianDriver,
                  increments: np.ndarray | None = None) -> LiftedPath:
    """One-step mild Euler for the lifted equation.

    Per step the drift and noise enter the head only; the shift semigroup
    then transports the combined state, which folds the new head value into
    the most recent stretch of history.
    """
    spec.validate()
    n_steps = _steps_of(T, delta, "T") if T > 0 else 0
    _steps_of(spec.d, delta, "d")
    if increments is None:
        increments = driver.increments(n_steps)
    grid = spec.grid
    nodes = grid.nodes
    w = grid.weights
    wk1 = w[:, None, None] * spec.kernel_drift.values
    wk2 = w[:, None, None] * spec.kernel_noise.values

    # shift-by-delta interpolation stencil, reused every step; the tail
    # applies on [-d, 0) and the head takes over at 0
    pos = delta + nodes
    past = pos < 0.0
    idx = np.clip(np.searchsorted(nodes, pos, side="right") - 1, 0, grid.m - 1)
    theta = (pos - nodes[idx]) / grid.h

    heads = np.empty((n_steps + 1, spec.n))
    tails = np.empty((n_steps + 1, grid.m + 1, spec.n))
    heads[0] = x.head
    tails[0] = x.tail.values
    for k in range(n_steps):
        head, tail = heads[k], tails[k]
        z1 = np.einsum("jhn,jn->h", wk1, tail)
        z2 = np.einsum("jhn,jn->h", wk2, tail)
        u = ctrl.resolve(k, k * delta, tail[None, :, :])[0]
        b = np.asarray(spec.drift(head, z1, u), dtype=float)
        sig = np.asarray(spec.noise(head, z2, u), dtype=float)
        head_new = head + b * delta + sig @ increments[k]
        if not np.all(np.isfinite(head_new)):
            raise NumericalError(f"non-finite lifted head at step {k + 1}")
        shifted = (1.0 - theta)[:, None] * tail[idx] + theta[:, None] * tail[idx + 1]
        tails[k + 1] = np.where(past[:, None], shifted, head_new[None, :])
        heads[k + 1] = head_new
    times = delta * np.arange(n_steps + 1)
    return LiftedPath(times=times, heads=heads, tails=tails, grid=grid,
                      delta=delta, seed=driver.seed, path_index=driver.path_index)


def _interp_columns(t_query: np.ndarray, times: np.ndarray, values: np.ndarray) -> np.ndarray:
    return np.column_stack([
        np.interp(t_query, times, values[:, i]) for i in range(values.shape[1])
    ])


def lift_history(path: SddePath, t: float) -> LiftedState:
    """Lift of the direct path at time t: (current value, trailing window).

    The window over [t - d, t] is resampled onto the segment grid of the
    problem the path was simulated from.
    """
    t_lo, t_hi = float(path.times[path.n_history]), float(path.times[-1])
    if t < t_lo - 1e-12 or t > t_hi + 1e-12:
        raise ValueError(f"time {t} outside simulated range [{t_lo}, {t_hi}]")
    grid = path.segment_grid
    head = _interp_columns(np.array([t]), path.times, path.states)[0]
    tail = _interp_columns(t + grid.nodes, path.times, path.states)
    return LiftedState(head, Segment(grid, tail))


@dataclass(frozen=True)
class EquivalenceLevel:
    delta: float
    m: int
    head_mismatch: float
    tail_mismatch: float
    head_scale: float


@dataclass(frozen=True)
class EquivalenceReport:
    """Pathwise lift agreement at a base resolution and after joint halving."""

    base: EquivalenceLevel
    refined: EquivalenceLevel
    head_ratio: float
    tail_ratio: float


def _mismatch(spec: ProblemSpec, path: SddePath, lifted: LiftedPath) -> EquivalenceLevel:
    grid = spec.grid
    n_steps = lifted.heads.shape[0] - 1
    y = path.states[path.n_history:]
    head_mis = float(np.max(np.linalg.norm(lifted.heads - y, axis=1)))
    tail_mis = 0.0
    w = grid.weights
    for k in range(n_steps + 1):
        window = lift_history(path, k * path.delta)
        diff = lifted.tails[k] - window.tail.values
        tail_mis = max(tail_mis, math.sqrt(float(np.sum(w[:, None] * diff * diff))))
    return EquivalenceLevel(delta=path.delta, m=grid.m, head_mismatch=head_mis,
                            tail_mismatch=tail_mis,
                            head_scale=1.0 + float(np.max(np.linalg.norm(y, axis=1))))


def equivalence_report(spec: ProblemSpec, x: LiftedState, ctrl, T: float,
                       delta: float, seed: int) -> EquivalenceReport:
    """Run both simulators on matched noise; report mismatches and halving ratios.

    The refined level uses half the step and double the segment resolution,
    with the coarse increments aggregated from the fine ones so both levels
    see the same Brownian path.
    """
    n_steps = _steps_of(T, delta, "T")
    fine = BrownianDriver(seed, 0, delta / 2, spec.q).increments(2 * n_steps)
    coarse = coarsen_increments(fine, 2)

    driver = BrownianDriver(seed, 0, delta, spec.q)
    path = simulate_sdde(spec, x, ctrl, T, delta, driver, increments=coarse)
    lifted = simulate_mild(spec, x, ctrl, T, delta, driver, increments=coarse)
    base = _mismatch(spec, path, lifted)

    spec_f = with_resolution(spec, 2 * spec.grid.m)
    x_f = LiftedState(x.head, resample_segment(x.tail, spec_f.grid))
    driver_f = BrownianDriver(seed, 0, delta / 2, spec.q)
    path_f = simulate_sdde(spec_f, x_f, ctrl, T, delta / 2, driver_f, increments=fine)
    lifted_f = simulate_mild(spec_f, x_f, ctrl, T, delta / 2, driver_f, increments=fine)
    refined = _mismatch(spec_f, path_f, lifted_f)

    def ratio(a: float, b: float) -> float:
        return a / b if b > 0 else math.inf

    return EquivalenceReport(base=base, refined=refined,
                             head_ratio=ratio(base.head_mismatch, refined.head_mismatch),
                             tail_ratio=ratio(base.tail_mismatch, refined.tail_mismatch))


@dataclass(frozen=True)
class ContractionReport:
    """Monte Carlo two-point spread in the weak norm against its growth bound."""

    lhs: float
    stderr: float
    rhs: float
    rate: float

    @property
    def ok(self) -> bool:
        return self.lhs <= self.rhs + 2.0 * self.stderr


def contraction_probe(spec: ProblemSpec, x: LiftedState, y: LiftedState, ctrl,
                      r: float, n_paths: int, delta: float,
                      seed: int = 0) -> ContractionReport:
    """Estimate mean squared weak-norm spread of matched-noise solution pairs.

    The bound is exp((2C + C^2 |B|) r) times the initial squared weak
    distance, with C the declared coefficient constant and |B| the largest
    Gram eigenvalue.
    """
    from .sdde import _simulate_batch

    spec.validate()
    decomp = spectral_decomposition(assemble_gram_operator(spec.grid, spec.n))
    c = spec.growth_const
    rate = 2.0 * c + c * c * decomp.operator_norm
    d0 = minus_one_norm(x - y)
    rhs = math.exp(rate * r) * d0 * d0

    n_steps = _steps_of(r, delta, "r")
    dw = batch_increments(seed, np.arange(n_paths), delta, spec.q, n_steps)
    _, sx, _ = _simulate_batch(spec, x, ctrl, r, delta, dw)
    _, sy, _ = _simulate_batch(spec, y, ctrl, r, delta, dw)

    n_hist = _steps_of(spec.d, delta, "d")
    times = delta * np.arange(-n_hist, sx.shape[1] - n_hist)
    sq = np.empty(n_paths)
    for i in range(n_paths):
        lx = _lift_from_states(sx[i], times, spec.grid, r)
        ly = _lift_from_states(sy[i], times, spec.grid, r)
        sq[i] = minus_one_norm(lx - ly) ** 2
    lhs = float(np.mean(sq))
    stderr = float(np.std(sq, ddof=1) / math.sqrt(n_paths)) if n_paths > 1 else 0.0
    return ContractionReport(lhs=lhs, stderr=stderr, rhs=rhs, rate=rate)


def _lift_from_states(states: np.ndarray, times: np.ndarray, grid: SegmentGrid,
                      t: float) -> LiftedState:
    head = _interp_columns(np.array([t]), times, states)[0]
    tail = _interp_columns(t + grid.nodes, times, states)
    return LiftedState(head, Segment(grid, tail))
