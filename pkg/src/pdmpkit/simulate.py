"""Event-driven simulation of the minimal process.

Holding times are sampled exactly from the survival function: a unit
exponential is compared against the cumulative hazard along the flow, with
the forced cut-off at the outgoing boundary.  Ensemble density estimates are
histograms of final states; per-path generators are derived from
(seed, path index) so results are reproducible and independent of how paths
are distributed over workers.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import (
    ContinuousAxis,
    GridDensity,
    ModelError,
    OUT_OF_DOMAIN,
    PdmpModel,
    StatePoint,
    advance,
    hazard_integral,
    hitting_time,
    invert_hazard,
)

__all__ = [
    "PathEvent",
    "Path",
    "sample_holding",
    "step",
    "simulate_path",
    "sample_from_density",
    "estimate_density",
]


@dataclass(frozen=True)
class PathEvent:
    """One jump (or terminal marker) of a trajectory."""

    time: float
    cause: str  # "rate-jump" | "boundary-jump" | "censored" | "never"
    pre_state: Optional[StatePoint]
    post_state: Optional[StatePoint]


@dataclass(frozen=True)
class Path:
    """A realized trajectory; between events the state follows the flow."""

    initial: StatePoint
    events: tuple
    final_state: Optional[StatePoint]  # None when censored
    censored: bool = False

    @property
    def jump_count(self) -> int:
        return sum(1 for e in self.events if e.cause in ("rate-jump", "boundary-jump"))

    def states_at_times(self):
        """(time, state) knots: initial state plus each post-jump state."""
        knots = [(0.0, self.initial)]
        knots += [(e.time, e.post_state) for e in self.events if e.post_state is not None]
        return knots


def sample_holding(model: PdmpModel, x: StatePoint, rng: np.random.Generator):
    """Holding time in the current flow segment.

    Returns (sigma, cause) with cause "rate-jump", "boundary-hit", or
    "never" (infinite lifetime with finite total hazard).  A tie between the
    hazard crossing and the boundary hit is classified as a boundary hit,
    since survival drops to zero exactly at the hitting time.
    """
    xi = rng.exponential()
    tp = hitting_time(model, x, "forward")
    if model.inverse_hazard is not None:
        s = model.inverse_hazard(x.coords, x.mode, xi)
        if s >= tp:
            return (tp, "boundary-hit") if np.isfinite(tp) else (math.inf, "never")
        return s, "rate-jump"
    if np.isfinite(tp):
        if hazard_integral(model, x, tp) <= xi:
            return tp, "boundary-hit"
        return invert_hazard(model, x, xi, tp), "rate-jump"
    # open-ended orbit: bracket the crossing by doubling, detect a hazard
    # plateau below xi as an infinite holding time
    t, prev = 1.0, 0.0
    for _ in range(200):
        h = hazard_integral(model, x, t)
        if h >= xi:
            return invert_hazard(model, x, xi, t), "rate-jump"
        if t > 1e6 and h - prev < 1e-12:
            return math.inf, "never"
        prev, t = h, 2.0 * t
    return math.inf, "never"


def step(model: PdmpModel, x: StatePoint, rng: np.random.Generator, t0: float = 0.0) -> PathEvent:
    """Advance one jump from x (at absolute time t0)."""
    sigma, cause = sample_holding(model, x, rng)
    if cause == "never":
        return PathEvent(math.inf, "never", None, None)
    moved = advance(model, x, sigma)
    if cause == "boundary-hit":
        if not isinstance(moved, tuple):
            # hazard root within rounding of the hitting time: clamp
            moved = (moved, "plus")
        pre = moved[0]
        cause_out = "boundary-jump"
    else:
        pre = moved[0] if isinstance(moved, tuple) else moved
        if pre is OUT_OF_DOMAIN:
            raise ModelError(f"flow left the chart before the sampled jump at t={t0 + sigma}")
        cause_out = "rate-jump"
    post = model.jump.sample(pre.coords, pre.mode, rng)
    if not model.in_state_space(post.coords, post.mode):
        raise ModelError(
            f"jump sampler of {model.name!r} left the state space: {pre} -> {post}"
        )
    return PathEvent(t0 + sigma, cause_out, pre, post)


def simulate_path(
    model: PdmpModel,
    x0: StatePoint,
    horizon: float,
    rng: np.random.Generator,
    max_jumps: int = 1_000_000,
) -> Path:
    """Simulate until the horizon or until max_jumps (censoring proxy for a
    possible explosion)."""
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    if max_jumps < 1:
        raise ValueError("max_jumps must be at least 1")
    t, x = 0.0, x0
    events = []
    while True:
        ev = step(model, x, rng, t0=t)
        if ev.cause == "never" or ev.time > horizon:
            final = advance(model, x, horizon - t)
            if isinstance(final, tuple):
                final = final[0]
            if final is OUT_OF_DOMAIN:
                raise ModelError("flow left the chart before the horizon")
            return Path(x0, tuple(events), final, censored=False)
        events.append(ev)
        t, x = ev.time, ev.post_state
        if len(events) >= max_jumps and t < horizon:
            events.append(PathEvent(t, "censored", x, x))
            return Path(x0, tuple(events), None, censored=True)


def sample_from_density(model: PdmpModel, density: GridDensity, rng: np.random.Generator) -> StatePoint:
    """Draw a state from a piecewise-constant density: pick a cell by mass,
    then uniformly within its continuous extent."""
    probs = density.values * density.grid.weights
    total = probs.sum()
    if total <= 0:
        raise ValueError("cannot sample from a zero density")
    cell = rng.choice(probs.size, p=probs / total)
    for block in density.grid.blocks:
        off = density.grid.offsets[block.mode]
        if off <= cell < off + block.n_cells:
            local = np.unravel_index(cell - off, block.shape)
            coords = np.empty(block.dim)
            for k, ax in enumerate(block.axes):
                if isinstance(ax, ContinuousAxis):
                    coords[k] = ax.faces[local[k]] + ax.dx * rng.random()
                else:
                    coords[k] = ax.values[local[k]]
            return StatePoint(coords, block.mode)
    raise AssertionError("unreachable")


def _worker_count() -> int:
    raw = os.environ.get("PDMP_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    return n if n > 0 else (os.cpu_count() or 1)


_CHUNK = 1000  # fixed chunk size keeps the reduction order worker-independent


def estimate_density(
    model: PdmpModel,
    init,
    t: float,
    n_paths: int,
    seed: int,
    max_jumps: int = 100_000,
):
    """Monte Carlo density of X(t): (GridDensity, censored_mass).

    ``init`` is a GridDensity or a StatePoint.  censored_mass counts paths
    censored at max_jumps plus paths whose final state falls outside the
    gridded window — the lost mass of the substochastic evolution.  Results
    are bit-identical for fixed (seed, n_paths, grid) regardless of
    PDMP_THREADS.
    """
    if n_paths < 1:
        raise ValueError("n_paths must be at least 1")
    if model.grid.n_cells == 0:
        raise ValueError("model has an empty interior grid")
    point_init = isinstance(init, StatePoint)

    def run_chunk(bounds):
        i0, i1 = bounds
        counts = np.zeros(model.grid.n_cells, dtype=np.int64)
        censored = 0
        for i in range(i0, i1):
            rng = np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(i,)))
            x0 = init if point_init else sample_from_density(model, init, rng)
            path = simulate_path(model, x0, t, rng, max_jumps=max_jumps)
            if path.censored:
                censored += 1
                continue
            idx = model.grid.locate(path.final_state.coords[None, :], path.final_state.mode)[0]
            if idx < 0:
                censored += 1
            else:
                counts[idx] += 1
        return counts, censored

    chunks = [(i, min(i + _CHUNK, n_paths)) for i in range(0, n_paths, _CHUNK)]
    counts = np.zeros(model.grid.n_cells, dtype=np.int64)
    censored = 0
    n_workers = _worker_count()
    if n_workers == 1 or len(chunks) == 1:
        results = map(run_chunk, chunks)
    else:
        pool = ThreadPoolExecutor(max_workers=n_workers)
        results = pool.map(run_chunk, chunks)
    for c, cen in results:  # fixed order: chunk index
        counts += c
        censored += cen
    if n_workers > 1 and len(chunks) > 1:
        pool.shutdown()
    values = (counts / n_paths) / model.grid.weights
    return GridDensity(model.grid, values), censored / n_paths
