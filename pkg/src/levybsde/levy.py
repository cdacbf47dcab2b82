"""Lévy path simulation with exact jump events.

A path is stored on a time grid ``0 = t_0 < ... < t_N = T`` together with the
exact list of its jumps ``(time, size)``.  Grid values satisfy

    X_t = drift * t + sigma * W_t + (sum of jumps with time <= t)

where ``drift = gamma - (compensator of the kept small jumps)``.  Keeping jumps
as events (instead of binning them per step) makes the jump shift
``X + v 1_[r, T]`` an exact operation.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

from .errors import (
    DirectionError,
    DivergenceError,
    GridError,
    ParameterError,
    RangeError,
    SamplerError,
)

__all__ = [
    "JumpComponent",
    "LevyModel",
    "Path",
    "PathBatch",
    "CameronMartinDirection",
    "ForwardSdeSpec",
    "sample_paths",
    "shift_path",
    "shift_batch",
    "cameron_martin_shift",
    "girsanov_density",
    "simulate_forward",
    "forward_first_variation",
    "uniform_grid",
    "write_batch_csv",
]

_BLOCK = 4096


def _readonly(a):
    a = np.asarray(a)
    a.setflags(write=False)
    return a


def uniform_grid(horizon, n_steps):
    if n_steps < 1:
        raise ParameterError(f"n_steps must be >= 1, got {n_steps}")
    return np.linspace(0.0, float(horizon), int(n_steps) + 1)


@dataclass(frozen=True)
class JumpComponent:
    """Compound-Poisson component with a finite jump-size quadrature.

    ``sizes``/``probs`` describe the jump law (exactly, for discrete laws, or
    as a quadrature rule when ``sampler`` draws from a continuous law).
    Moments and compensators are always taken from the quadrature.
    """

    intensity: float
    sizes: Sequence[float]
    probs: Sequence[float]
    sampler: Callable[[np.random.Generator, int], np.ndarray] | None = None

    def __post_init__(self):
        sizes = np.atleast_1d(np.asarray(self.sizes, dtype=float))
        probs = np.atleast_1d(np.asarray(self.probs, dtype=float))
        object.__setattr__(self, "sizes", _readonly(sizes))
        object.__setattr__(self, "probs", _readonly(probs))
        if sizes.shape != probs.shape or sizes.ndim != 1 or sizes.size == 0:
            raise ParameterError("jump sizes and probs must be 1-d arrays of equal length")
        if not (np.all(np.isfinite(sizes)) and np.all(np.isfinite(probs))):
            raise ParameterError("jump quadrature must be finite")
        if not math.isfinite(self.intensity) or self.intensity < 0:
            raise ParameterError(f"intensity must be finite and >= 0, got {self.intensity}")
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-12:
            raise ParameterError("jump probabilities must be >= 0 and sum to 1")
        if np.any(sizes == 0.0):
            raise ParameterError("a jump of size 0 is not a jump")

    @classmethod
    def symmetric(cls, intensity, size=1.0):
        """Jumps of +-size with equal probability."""
        return cls(intensity, [-size, size], [0.5, 0.5])

    def draw(self, rng, n):
        if self.sampler is None:
            idx = rng.choice(self.sizes.size, size=n, p=self.probs)
            return self.sizes[idx]
        try:
            out = np.asarray(self.sampler(rng, n), dtype=float)
        except Exception as exc:  # user callback
            raise SamplerError(f"jump sampler failed: {exc}") from exc
        if out.shape != (n,) or not np.all(np.isfinite(out)):
            raise SamplerError(f"jump sampler returned shape {out.shape} or non-finite sizes; expected ({n},)")
        return out


@dataclass(frozen=True)
class LevyModel:
    """Lévy triplet (gamma, sigma, nu) on ``[0, horizon]``.

    ``nu`` is a finite sum of compound-Poisson components.  Jumps with
    ``|x| < truncation_epsilon`` are discarded together with their
    compensator, which keeps the mean and drops their variance
    ``sum intensity * E[x^2; |x| < eps]`` (the documented truncation bias).
    """

    gamma: float
    sigma: float
    jumps: tuple[JumpComponent, ...] = ()
    horizon: float = 1.0
    truncation_epsilon: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "jumps", tuple(self.jumps))
        for name in ("gamma", "sigma", "horizon", "truncation_epsilon"):
            if not math.isfinite(getattr(self, name)):
                raise ParameterError(f"{name} must be finite")
        if self.sigma < 0:
            raise ParameterError("sigma must be >= 0")
        if self.horizon <= 0:
            raise ParameterError("horizon must be > 0")
        if self.truncation_epsilon < 0:
            raise ParameterError("truncation_epsilon must be >= 0")
        if self.sigma == 0 and self.total_intensity() == 0:
            raise ParameterError("need sigma > 0 or a jump component with positive intensity")

    def _kept(self, c):
        return np.abs(c.sizes) >= self.truncation_epsilon

    def total_intensity(self):
        return float(sum(c.intensity * c.probs[self._kept(c)].sum() for c in self.jumps))

    def nodes(self):
        """Jump quadrature as ``(marks, nu_weights)``, marks sorted and unique."""
        marks, weights = [], []
        for c in self.jumps:
            keep = self._kept(c)
            marks.append(c.sizes[keep])
            weights.append(c.intensity * c.probs[keep])
        if not marks:
            return np.empty(0), np.empty(0)
        marks = np.concatenate(marks)
        weights = np.concatenate(weights)
        uniq, inv = np.unique(marks, return_inverse=True)
        w = np.zeros(uniq.size)
        np.add.at(w, inv, weights)
        keep = w > 0
        return uniq[keep], w[keep]

    def small_jump_compensator(self):
        """Rate ``int_{eps <= |x| <= 1} x nu(dx)`` removed from the drift."""
        x, w = self.nodes()
        small = np.abs(x) <= 1.0
        return float(np.sum(x[small] * w[small]))

    def mean_rate(self):
        """``E[X_t] / t`` = gamma + int_{|x| > 1} x nu(dx)."""
        x, w = self.nodes()
        big = np.abs(x) > 1.0
        return self.gamma + float(np.sum(x[big] * w[big]))

    def jump_second_moment(self):
        x, w = self.nodes()
        return float(np.sum(x * x * w))

    def variance_rate(self):
        return self.sigma**2 + self.jump_second_moment()

    @property
    def drift(self):
        return self.gamma - self.small_jump_compensator()


def _jump_columns(grid, times):
    # first grid index k with t_k >= time, so the jump is inside (t_{k-1}, t_k]
    return np.searchsorted(grid, times, side="left")


def _build_values(grid, dW, drift, sigma, jump_path, jump_time, jump_size):
    n_paths = dW.shape[0]
    W = np.zeros((n_paths, grid.size))
    np.cumsum(dW, axis=1, out=W[:, 1:])
    inc = np.zeros((n_paths, grid.size))
    if jump_size.size:
        np.add.at(inc, (jump_path, _jump_columns(grid, jump_time)), jump_size)
    return drift * grid[None, :] + sigma * W + np.cumsum(inc, axis=1)


def _node_index(marks, sizes):
    if marks.size == 0 or sizes.size == 0:
        return np.full(sizes.shape, -1, dtype=np.int64)
    pos = np.clip(np.searchsorted(marks, sizes), 0, marks.size - 1)
    return np.where(marks[pos] == sizes, pos, -1).astype(np.int64)


@dataclass(frozen=True, eq=False)
class Path:
    """One trajectory: grid, Brownian increments, exact jumps, grid values."""

    grid: np.ndarray
    brownian_increments: np.ndarray
    jump_times: np.ndarray
    jump_sizes: np.ndarray
    values: np.ndarray
    drift: float
    sigma: float
    marks: np.ndarray = field(default_factory=lambda: np.empty(0))
    mark_weights: np.ndarray = field(default_factory=lambda: np.empty(0))

    @property
    def horizon(self):
        return float(self.grid[-1])

    @property
    def jump_events(self):
        return list(zip(self.jump_times.tolist(), self.jump_sizes.tolist()))

    @property
    def W(self):
        return np.concatenate([[0.0], np.cumsum(self.brownian_increments)])

    def as_batch(self):
        n = self.jump_times.size
        return PathBatch(
            grid=self.grid,
            dW=self.brownian_increments[None, :],
            jump_path=np.zeros(n, dtype=np.int64),
            jump_time=self.jump_times,
            jump_size=self.jump_sizes,
            values=self.values[None, :],
            drift=self.drift,
            sigma=self.sigma,
            marks=self.marks,
            mark_weights=self.mark_weights,
        )


@dataclass(frozen=True, eq=False)
class PathBatch:
    """Immutable batch of paths sharing one grid.

    Jumps are flat arrays sorted by ``(path, time)``.  ``weights`` (summing to
    one) turn the batch into a discrete probability space; ``None`` means
    equally weighted Monte Carlo samples.  ``channel_variance[i, j]`` is
    ``E[dN~_i(j)^2]`` for the compensated count at mark ``j`` in step ``i``;
    it defaults to the Poisson value ``nu_j * dt_i``.  ``brownian_variance[i]``
    is ``E[dW_i^2]`` and defaults to ``dt_i``.
    """

    grid: np.ndarray
    dW: np.ndarray
    jump_path: np.ndarray
    jump_time: np.ndarray
    jump_size: np.ndarray
    values: np.ndarray
    drift: float
    sigma: float
    marks: np.ndarray
    mark_weights: np.ndarray
    weights: np.ndarray | None = None
    channel_variance: np.ndarray | None = None
    brownian_variance: np.ndarray | None = None

    def __post_init__(self):
        for name in ("grid", "dW", "jump_time", "jump_size", "values", "marks", "mark_weights"):
            object.__setattr__(self, name, _readonly(np.asarray(getattr(self, name), dtype=float)))
        object.__setattr__(self, "jump_path", _readonly(np.asarray(self.jump_path, dtype=np.int64)))
        if self.weights is not None:
            object.__setattr__(self, "weights", _readonly(np.asarray(self.weights, dtype=float)))
        if self.channel_variance is not None:
            object.__setattr__(self, "channel_variance", _readonly(np.asarray(self.channel_variance, dtype=float)))
        if self.brownian_variance is not None:
            object.__setattr__(self, "brownian_variance", _readonly(np.asarray(self.brownian_variance, dtype=float)))
        if self.grid[0] != 0.0 or np.any(np.diff(self.grid) <= 0):
            raise GridError("grid must start at 0 and be strictly increasing")
        if self.dW.shape != (self.values.shape[0], self.grid.size - 1):
            raise GridError("dW and values do not match the grid")

    # -- shape helpers ---------------------------------------------------
    @property
    def n_paths(self):
        return self.values.shape[0]

    @property
    def n_steps(self):
        return self.grid.size - 1

    @property
    def horizon(self):
        return float(self.grid[-1])

    @property
    def dt(self):
        return np.diff(self.grid)

    @cached_property
    def jump_node(self):
        return _readonly(_node_index(self.marks, self.jump_size))

    @cached_property
    def W(self):
        W = np.zeros((self.n_paths, self.grid.size))
        np.cumsum(self.dW, axis=1, out=W[:, 1:])
        return _readonly(W)

    @cached_property
    def jump_sum(self):
        """Cumulative sum of jump sizes at each grid point."""
        inc = np.zeros((self.n_paths, self.grid.size))
        if self.jump_size.size:
            np.add.at(inc, (self.jump_path, _jump_columns(self.grid, self.jump_time)), self.jump_size)
        return _readonly(np.cumsum(inc, axis=1))

    @cached_property
    def jump_counts(self):
        """Counts of jumps per (path, step, mark); shape ``(P, N, J)``."""
        J = self.marks.size
        counts = np.zeros((self.n_paths, self.n_steps, J))
        if J and self.jump_size.size:
            step = _jump_columns(self.grid, self.jump_time) - 1
            ok = (self.jump_node >= 0) & (step >= 0)
            np.add.at(counts, (self.jump_path[ok], step[ok], self.jump_node[ok]), 1.0)
        return _readonly(counts)

    @cached_property
    def off_mark_jumps(self):
        step = _jump_columns(self.grid, self.jump_time) - 1
        return int(np.sum((self.jump_node < 0) & (step >= 0)))

    @property
    def channel_mean(self):
        return np.outer(self.dt, self.mark_weights)

    @cached_property
    def compensated_counts(self):
        return _readonly(self.jump_counts - self.channel_mean[None, :, :])

    @property
    def channel_var(self):
        if self.channel_variance is not None:
            return self.channel_variance
        return self.channel_mean

    @property
    def brownian_var(self):
        return self.dt if self.brownian_variance is None else self.brownian_variance

    @property
    def path_weights(self):
        if self.weights is None:
            return np.full(self.n_paths, 1.0 / self.n_paths)
        return self.weights

    def rebuilt_values(self):
        return _build_values(self.grid, self.dW, self.drift, self.sigma,
                             self.jump_path, self.jump_time, self.jump_size)

    def path(self, i):
        sel = self.jump_path == i
        return Path(
            grid=self.grid,
            brownian_increments=self.dW[i],
            jump_times=self.jump_time[sel],
            jump_sizes=self.jump_size[sel],
            values=self.values[i],
            drift=self.drift,
            sigma=self.sigma,
            marks=self.marks,
            mark_weights=self.mark_weights,
        )

    def replace(self, **changes):
        fields = dict(
            grid=self.grid, dW=self.dW, jump_path=self.jump_path, jump_time=self.jump_time,
            jump_size=self.jump_size, values=self.values, drift=self.drift, sigma=self.sigma,
            marks=self.marks, mark_weights=self.mark_weights, weights=self.weights,
            channel_variance=self.channel_variance, brownian_variance=self.brownian_variance,
        )
        fields.update(changes)
        return PathBatch(**fields)

    def coarsen(self, factor):
        """Same paths on every ``factor``-th grid point (common random numbers)."""
        if factor < 1 or self.n_steps % factor:
            raise GridError(f"cannot coarsen {self.n_steps} steps by {factor}")
        if self.channel_variance is not None or self.brownian_variance is not None:
            raise GridError("coarsening a batch with explicit channel variances is undefined")
        P = self.n_paths
        return self.replace(
            grid=self.grid[::factor],
            dW=self.dW.reshape(P, -1, factor).sum(axis=2),
            values=self.values[:, ::factor],
        )

    def subset(self, idx):
        idx = np.asarray(idx)
        remap = np.full(self.n_paths, -1, dtype=np.int64)
        remap[idx] = np.arange(idx.size)
        keep = remap[self.jump_path] >= 0
        w = None
        if self.weights is not None:
            w = self.weights[idx] / self.weights[idx].sum()
        return self.replace(
            dW=self.dW[idx], values=self.values[idx], jump_path=remap[self.jump_path[keep]],
            jump_time=self.jump_time[keep], jump_size=self.jump_size[keep], weights=w,
        )


def _sample_block(model, grid, n, seed, block_id):
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(block_id,)))
    dt = np.diff(grid)
    T = float(grid[-1])
    dW = rng.standard_normal((n, dt.size)) * np.sqrt(dt)[None, :]
    paths, times, sizes = [], [], []
    for comp in model.jumps:
        counts = rng.poisson(comp.intensity * T, size=n)
        total = int(counts.sum())
        t = T * (1.0 - rng.random(total))  # in (0, T]
        x = comp.draw(rng, total)
        keep = np.abs(x) >= model.truncation_epsilon
        paths.append(np.repeat(np.arange(n), counts)[keep])
        times.append(t[keep])
        sizes.append(x[keep])
    if paths:
        p, t, x = np.concatenate(paths), np.concatenate(times), np.concatenate(sizes)
    else:
        p, t, x = np.empty(0, dtype=np.int64), np.empty(0), np.empty(0)
    order = np.lexsort((t, p))
    return dW, p[order], t[order], x[order]


def sample_paths(model: LevyModel, n_steps: int, n_paths: int, seed: int, *,
                 grid=None, workers: int = 1) -> PathBatch:
    """Simulate ``n_paths`` trajectories of ``model``.

    Paths are generated in fixed blocks of 4096, each from its own
    ``SeedSequence(seed, spawn_key=(block,))`` substream, so the result does
    not depend on ``workers``.
    """
    if n_paths < 1:
        raise ParameterError(f"n_paths must be >= 1, got {n_paths}")
    if grid is None:
        grid = uniform_grid(model.horizon, n_steps)
    else:
        grid = np.asarray(grid, dtype=float)
        if grid.size != n_steps + 1 or abs(grid[-1] - model.horizon) > 1e-12 * model.horizon:
            raise GridError("explicit grid must have n_steps + 1 points ending at the horizon")
    sizes = [min(_BLOCK, n_paths - s) for s in range(0, n_paths, _BLOCK)]
    jobs = [(model, grid, n, seed, b) for b, n in enumerate(sizes)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            blocks = list(pool.map(lambda a: _sample_block(*a), jobs))
    else:
        blocks = [_sample_block(*a) for a in jobs]
    offsets = np.cumsum([0] + sizes[:-1])
    dW = np.concatenate([b[0] for b in blocks])
    jp = np.concatenate([b[1] + o for b, o in zip(blocks, offsets)]).astype(np.int64)
    jt = np.concatenate([b[2] for b in blocks])
    jx = np.concatenate([b[3] for b in blocks])
    marks, weights = model.nodes()
    values = _build_values(grid, dW, model.drift, model.sigma, jp, jt, jx)
    return PathBatch(grid=grid, dW=dW, jump_path=jp, jump_time=jt, jump_size=jx, values=values,
                     drift=model.drift, sigma=model.sigma, marks=marks, mark_weights=weights)


def shift_batch(batch: PathBatch, r: float, v: float) -> PathBatch:
    """Every path becomes ``X + v 1_[r, T]``: a jump ``(r, v)`` is inserted."""
    if not 0.0 <= r <= batch.horizon:
        raise RangeError(f"shift time r={r} outside [0, {batch.horizon}]")
    if v == 0:
        raise DirectionError("jump shift needs v != 0")
    P = batch.n_paths
    jp = np.concatenate([batch.jump_path, np.arange(P)])
    jt = np.concatenate([batch.jump_time, np.full(P, float(r))])
    jx = np.concatenate([batch.jump_size, np.full(P, float(v))])
    order = np.lexsort((jt, jp))
    values = batch.values + v * (batch.grid >= r)[None, :]
    return batch.replace(jump_path=jp[order], jump_time=jt[order], jump_size=jx[order], values=values)


def shift_path(path: Path, r: float, v: float) -> Path:
    return shift_batch(path.as_batch(), r, v).path(0)


@dataclass(frozen=True, eq=False)
class CameronMartinDirection:
    """Step function ``h`` (one value per grid cell) and its running integral."""

    grid: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        grid = _readonly(np.asarray(self.grid, dtype=float))
        h = _readonly(np.asarray(self.h, dtype=float))
        if h.shape != (grid.size - 1,):
            raise GridError("h needs one value per grid cell")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "h", h)

    @classmethod
    def constant(cls, grid, c=1.0):
        grid = np.asarray(grid, dtype=float)
        return cls(grid, np.full(grid.size - 1, float(c)))

    @classmethod
    def from_function(cls, grid, fn):
        grid = np.asarray(grid, dtype=float)
        return cls(grid, np.asarray([fn(t) for t in grid[:-1]], dtype=float))

    @property
    def g_h(self):
        return np.concatenate([[0.0], np.cumsum(self.h * np.diff(self.grid))])

    @property
    def norm_sq(self):
        return float(np.sum(self.h**2 * np.diff(self.grid)))

    def pair(self, field):
        """``<field, h>`` for a per-cell field ``(..., N)`` by the grid quadrature."""
        return np.asarray(field) @ (self.h * np.diff(self.grid))


def _check_direction(batch, direction):
    if direction.grid.shape != batch.grid.shape or not np.array_equal(direction.grid, batch.grid):
        raise GridError("Cameron-Martin direction lives on a different grid")


def cameron_martin_shift(batch, direction: CameronMartinDirection, u: float):
    """Brownian part moved to ``W + u g_h``; jumps untouched.

    Accepts a :class:`PathBatch` or a single :class:`Path`.
    """
    if isinstance(batch, Path):
        return cameron_martin_shift(batch.as_batch(), direction, u).path(0)
    _check_direction(batch, direction)
    dW = batch.dW + u * direction.h * batch.dt
    values = batch.values + batch.sigma * u * direction.g_h[None, :]
    return batch.replace(dW=dW, values=values)


def girsanov_density(batch, direction: CameronMartinDirection, convention: str = "shift"):
    """Cameron-Martin density, one value per path.

    ``convention="shift"`` gives ``exp(int h dW - |h|^2 / 2)``, the density of
    the law of ``W + g_h``: ``E[F(W + g_h)] = E[F(W) * density]``.
    ``convention="pullback"`` gives ``exp(-|h|^2 / 2 - int h dW)``, the
    density of the law of ``W - g_h``.  ``int h dW`` is the left-point sum.
    """
    if isinstance(batch, Path):
        return float(girsanov_density(batch.as_batch(), direction, convention)[0])
    _check_direction(batch, direction)
    stoch = batch.dW @ direction.h
    half = 0.5 * direction.norm_sq
    if convention == "shift":
        return np.exp(stoch - half)
    if convention == "pullback":
        return np.exp(-half - stoch)
    raise ParameterError(f"unknown convention {convention!r}")


@dataclass(frozen=True)
class ForwardSdeSpec:
    """``dPsi = b(Psi) dt + sigma_fn(Psi) dW + int beta(Psi-, x) N~(dt, dx)``.

    The optional derivatives are needed only for :func:`forward_first_variation`.
    """

    b: Callable
    sigma_fn: Callable
    beta: Callable
    psi0: float
    beta_bound: float | None = None
    db: Callable | None = None
    dsigma: Callable | None = None
    dbeta: Callable | None = None

    @classmethod
    def zero_jumps(cls, b, sigma_fn, psi0, **kw):
        return cls(b, sigma_fn, lambda psi, x: np.zeros(np.broadcast(psi, x).shape), psi0, **kw)


def _jumps_by_step(batch):
    step = _jump_columns(batch.grid, batch.jump_time) - 1
    order = np.argsort(step, kind="stable")
    bounds = np.searchsorted(step[order], np.arange(batch.n_steps + 1))
    return order, bounds


def _check_beta_bound(spec, psi, x):
    if spec.beta_bound is None or x.size == 0:
        return
    lim = spec.beta_bound * np.minimum(1.0, np.abs(x))
    if np.any(np.abs(spec.beta(psi, x)) > lim * (1 + 1e-12)):
        raise ParameterError("beta violates |beta(psi, x)| <= C_beta (1 ^ |x|) on sampled arguments")


def simulate_forward(spec: ForwardSdeSpec, batch: PathBatch) -> np.ndarray:
    """Euler-Maruyama trajectory of the forward SDE, shape ``(P, N + 1)``.

    Jumps inside a step use the state at the start of the step; the
    compensator integrates ``beta`` against the batch's jump quadrature.
    """
    P, N = batch.n_paths, batch.n_steps
    psi = np.empty((P, N + 1))
    psi[:, 0] = spec.psi0
    order, bounds = _jumps_by_step(batch)
    marks, w = batch.marks, batch.mark_weights
    for i in range(N):
        cur = psi[:, i]
        dt = batch.grid[i + 1] - batch.grid[i]
        nxt = cur + spec.b(cur) * dt + spec.sigma_fn(cur) * batch.dW[:, i]
        if marks.size:
            comp = spec.beta(cur[:, None], marks[None, :]) @ w
            nxt = nxt - comp * dt
        sel = order[bounds[i]:bounds[i + 1]]
        if sel.size:
            p, x = batch.jump_path[sel], batch.jump_size[sel]
            _check_beta_bound(spec, cur[p], x)
            np.add.at(nxt, p, spec.beta(cur[p], x))
        if not np.all(np.isfinite(nxt)):
            raise DivergenceError(i + 1)
        psi[:, i + 1] = nxt
    return psi


def forward_first_variation(spec: ForwardSdeSpec, batch: PathBatch, r_index: int,
                            psi: np.ndarray | None = None) -> np.ndarray:
    """Derivative of the Euler scheme w.r.t. the Brownian increment of step ``r_index``.

    Returns ``D^W_r Psi_t`` for ``r`` in cell ``r_index`` on the grid: zero up to
    ``t_{r_index}``, ``sigma_fn(Psi_{r_index})`` at the next grid point, then
    propagated by the linearised scheme.
    """
    if spec.db is None or spec.dsigma is None or spec.dbeta is None:
        raise ParameterError("first variation needs db, dsigma and dbeta")
    if psi is None:
        psi = simulate_forward(spec, batch)
    P, N = batch.n_paths, batch.n_steps
    D = np.zeros((P, N + 1))
    k = int(r_index)
    D[:, k + 1] = spec.sigma_fn(psi[:, k])
    order, bounds = _jumps_by_step(batch)
    marks, w = batch.marks, batch.mark_weights
    for i in range(k + 1, N):
        cur = psi[:, i]
        dt = batch.grid[i + 1] - batch.grid[i]
        jac = 1.0 + spec.db(cur) * dt + spec.dsigma(cur) * batch.dW[:, i]
        if marks.size:
            jac = jac - (spec.dbeta(cur[:, None], marks[None, :]) @ w) * dt
        sel = order[bounds[i]:bounds[i + 1]]
        if sel.size:
            p = batch.jump_path[sel]
            np.add.at(jac, p, spec.dbeta(cur[p], batch.jump_size[sel]))
        D[:, i + 1] = jac * D[:, i]
    return D


def write_batch_csv(batch: PathBatch, fh, metadata: dict | None = None):
    """One row per path per grid point: path_id, t, X, W, jump_sum."""
    for key, val in (metadata or {}).items():
        fh.write(f"# {key}: {val}\n")
    fh.write("# columns: path_id, t, X (process value), W (Brownian motion), jump_sum (cumulative jumps)\n")
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(["path_id", "t", "X", "W", "jump_sum"])
    W, J = batch.W, batch.jump_sum
    for p in range(batch.n_paths):
        for k, t in enumerate(batch.grid):
            writer.writerow([p, repr(float(t)), repr(float(batch.values[p, k])),
                             repr(float(W[p, k])), repr(float(J[p, k]))])
