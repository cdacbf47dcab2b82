"""Independent ground truth for the Monte Carlo machinery.

* :class:`TreeModel` / :func:`tree_backward`: a finite outcome tree (two-point
  Brownian step and one Bernoulli jump indicator per node and step) on which
  conditional expectations are exact finite sums.
* :func:`closed_form_linear`: explicit solution of the linear driver
  ``f = alpha y`` for ``xi = X_T`` or a constant.
* :func:`gronwall_check`: verifies ``g_{n+1} <= eps + C_n + g_n / 2`` on a
  recorded gap sequence and the resulting bound.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .bsde import BsdeSolution, Generator, StepState, TerminalFunctional, _fixed_point
from .errors import CapabilityError, ParameterError, TreeSizeError
from .levy import LevyModel, PathBatch, _build_values

__all__ = [
    "TreeModel",
    "tree_backward",
    "tree_representation_residual",
    "ClosedFormLinear",
    "closed_form_linear",
    "Verdict",
    "gronwall_check",
]

MAX_OUTCOMES = 100_000


@dataclass(frozen=True, eq=False)
class TreeModel:
    """Recombination-free outcome tree.

    Every step draws ``eps = +-1`` (probability 1/2 each) and, for each jump
    node ``j``, an independent indicator ``B_j ~ Bernoulli(nu_j dt)``.  The
    step increment is ``drift dt + sigma eps a + sum_j x_j B_j``, where
    ``drift`` already contains the small-jump compensator.  The Brownian
    amplitude ``a = sqrt(dt + sum_j x_j^2 p_j^2 / sigma^2)`` absorbs the
    variance lost to the Bernoulli indicators (``p (1 - p)`` instead of
    ``p``), so mean and variance per step match the Lévy model exactly when
    ``sigma > 0``; with ``sigma = 0`` the amplitude is ``sqrt(dt)``.
    """

    n_steps: int
    horizon: float
    drift: float
    sigma: float
    marks: np.ndarray
    weights: np.ndarray
    max_outcomes: int = MAX_OUTCOMES

    def __post_init__(self):
        marks = np.asarray(self.marks, dtype=float)
        weights = np.asarray(self.weights, dtype=float)
        object.__setattr__(self, "marks", marks)
        object.__setattr__(self, "weights", weights)
        if self.n_steps < 1 or self.horizon <= 0:
            raise ParameterError("tree needs n_steps >= 1 and horizon > 0")
        if marks.shape != weights.shape or np.any(weights < 0):
            raise ParameterError("tree marks and weights must match and be >= 0")
        if np.any(weights * self.dt >= 1):
            raise ParameterError("jump probability nu_j dt must be < 1; use more steps")
        if self.n_outcomes > self.max_outcomes:
            raise TreeSizeError(f"{self.n_outcomes} outcomes exceed the budget of {self.max_outcomes}")

    @classmethod
    def from_model(cls, model: LevyModel, n_steps: int, max_outcomes: int = MAX_OUTCOMES):
        marks, weights = model.nodes()
        return cls(n_steps, model.horizon, model.drift, model.sigma, marks, weights, max_outcomes)

    @property
    def dt(self):
        return self.horizon / self.n_steps

    @property
    def grid(self):
        return np.linspace(0.0, self.horizon, self.n_steps + 1)

    @property
    def jump_probs(self):
        return self.weights * self.dt

    @property
    def brownian_step(self):
        extra = float(np.sum(self.marks**2 * self.jump_probs**2))
        if self.sigma > 0:
            return math.sqrt(self.dt + extra / self.sigma**2)
        return math.sqrt(self.dt)

    @property
    def branching(self):
        return 2 ** (1 + self.marks.size)

    @property
    def n_outcomes(self):
        return self.branching**self.n_steps

    def step_outcomes(self):
        """Per-step outcomes: ``eps`` (K,), indicators ``B`` (K, J) and probabilities (K,)."""
        J = self.marks.size
        rows = list(itertools.product([1.0, -1.0], *([[0.0, 1.0]] * J)))
        table = np.array(rows, dtype=float).reshape(len(rows), 1 + J)
        eps, B = table[:, 0], table[:, 1:]
        p = self.jump_probs
        prob = 0.5 * np.prod(np.where(B == 1.0, p, 1.0 - p), axis=1) if J else np.full(2, 0.5)
        return eps, B, prob

    def step_moments(self):
        """Mean and variance of one step's increment of ``X``."""
        eps, B, prob = self.step_outcomes()
        inc = self.drift * self.dt + self.sigma * eps * self.brownian_step + B @ self.marks
        mean = math.fsum(prob * inc)
        return mean, math.fsum(prob * (inc - mean) ** 2)

    def as_batch(self) -> PathBatch:
        """Every leaf as a weighted path; jumps sit at the right end of their step."""
        eps, B, prob = self.step_outcomes()
        K, N, J = eps.size, self.n_steps, self.marks.size
        idx = np.array(list(itertools.product(range(K), repeat=N)), dtype=np.int64).reshape(-1, N)
        grid = self.grid
        dW = eps[idx] * self.brownian_step
        leaf_prob = np.prod(prob[idx], axis=1)
        total = math.fsum(leaf_prob)
        if abs(total - 1.0) > 1e-12:
            raise ParameterError(f"tree probabilities sum to {total!r}")
        weights = leaf_prob / total
        counts = B[idx]  # (L, N, J)
        leaf, step, node = np.nonzero(counts)
        jp = leaf.astype(np.int64)
        jt = grid[step + 1]
        jx = self.marks[node] if J else np.zeros(0)
        values = _build_values(grid, dW, self.drift, self.sigma, jp, jt, jx)
        p = self.jump_probs
        chan_var = np.tile(p * (1.0 - p), (N, 1))
        return PathBatch(grid=grid, dW=dW, jump_path=jp, jump_time=jt, jump_size=jx, values=values,
                         drift=self.drift, sigma=self.sigma, marks=self.marks,
                         mark_weights=self.weights, weights=weights, channel_variance=chan_var,
                         brownian_variance=np.full(N, self.brownian_step**2))


def _level_view(a, i, K, N):
    """Collapse leaf-indexed array ``a`` to the ``K**i`` nodes of level ``i``."""
    return a.reshape(K**i, K ** (N - i), *a.shape[1:])[:, 0]


def tree_backward(tree: TreeModel, xi: TerminalFunctional, gen: Generator, tol=1e-14,
                  max_iter=500) -> BsdeSolution:
    """Exact backward induction on the outcome tree.

    Conditional expectations are probability-weighted sums over the ``K``
    children of each node; ``Z`` and ``U`` are exact covariances of the
    next value with ``dW`` and with ``B_j - p_j``, normalised by their
    variances.  The result is laid out leaf-wise on ``tree.as_batch()``.
    """
    batch = tree.as_batch()
    eps, B, prob = tree.step_outcomes()
    K, N, J = eps.size, tree.n_steps, tree.marks.size
    dt, a = tree.dt, tree.brownian_step
    p = tree.jump_probs
    dN = B - p  # (K, J)
    gw = tree.weights * gen.g1_values(tree.marks)
    L = batch.n_paths
    Y = np.zeros((L, N + 1))
    Z = np.zeros((L, N))
    U = np.zeros((L, N, J))
    nxt = np.asarray(xi(batch), dtype=float)  # level N values, one per leaf
    Y[:, N] = nxt
    inner = [()] * N
    for i in range(N - 1, -1, -1):
        children = nxt.reshape(K**i, K)
        ey = children @ prob
        R = children - ey[:, None]
        z = (R * eps[None, :]) @ prob / a
        if tree.sigma == 0:
            z = np.zeros_like(z)
        u = np.column_stack([(R * dN[None, :, j]) @ prob / (p[j] * (1 - p[j])) for j in range(J)]) \
            if J else np.zeros((K**i, 0))
        x = _level_view(batch.values[:, i], i, K, N)
        state = StepState(i, float(tree.grid[i]), x)
        w = gen.g(u) @ gw if J else np.zeros_like(ey)
        y, inner[i] = _fixed_point(lambda y: ey + dt * gen.f(state, state.t, y, z, w), ey, tol, max_iter)
        rep = K ** (N - i)
        Y[:, i] = np.repeat(y, rep)
        Z[:, i] = np.repeat(z, rep)
        U[:, i, :] = np.repeat(u, rep, axis=0)
        nxt = y
    return BsdeSolution(Y, Z, U, batch.grid, batch.marks, batch.mark_weights, batch.path_weights,
                        inner_residuals=tuple(inner), basis_spec="exact tree enumeration",
                        sigma=tree.sigma)


def tree_representation_residual(tree: TreeModel, sol: BsdeSolution):
    """Largest gaps between ``(Z_k, U_k)`` and the conditional means of discrete derivatives.

    On the tree the derivative of ``Y_{k+1}`` in the step-``k`` Brownian
    direction is ``(Y(eps=+1) - Y(eps=-1)) / (2 a)`` and in jump
    direction ``j`` it is ``Y(B_j=1) - Y(B_j=0)``, both computed by flipping
    one coin of the leaf path.  Their step-``k`` conditional means are
    compared with the stored controls.  Returns ``(residual_Z, residual_U)``
    as maximum absolute differences.
    """
    eps, B, prob = tree.step_outcomes()
    K, N, J = eps.size, tree.n_steps, tree.marks.size
    a = tree.brownian_step
    res_z = res_u = 0.0
    # outcome index of a (eps, B) combination: flip one coordinate
    table = np.column_stack([eps, B])
    lookup = {tuple(row): n for n, row in enumerate(table)}

    def flipped(col, value):
        out = np.empty(K, dtype=np.int64)
        for n, row in enumerate(table):
            alt = row.copy()
            alt[col] = value
            out[n] = lookup[tuple(alt)]
        return out

    up, down = flipped(0, 1.0), flipped(0, -1.0)
    for k in range(N):
        y_next = _level_view(sol.Y[:, k + 1], k + 1, K, N).reshape(K**k, K)
        dz = (y_next[:, up] - y_next[:, down]) / (2 * a)  # same value for every child
        proj = dz @ prob
        z = _level_view(sol.Z[:, k], k, K, N)
        res_z = max(res_z, float(np.max(np.abs(proj - z))) if tree.sigma > 0 else 0.0)
        u = _level_view(sol.U[:, k, :], k, K, N)
        for j in range(J):
            du = y_next[:, flipped(1 + j, 1.0)] - y_next[:, flipped(1 + j, 0.0)]
            res_u = max(res_u, float(np.max(np.abs(du @ prob - u[:, j]))))
    return res_z, res_u


@dataclass(frozen=True)
class ClosedFormLinear:
    """Solution of ``Y_t = xi + int_t^T alpha Y ds - int Z dW - int int U dN~``."""

    alpha: float
    horizon: float
    sigma: float
    mean_rate: float
    kind: str
    constant: float = 1.0

    def _e(self, t):
        return np.exp(self.alpha * (self.horizon - np.asarray(t, dtype=float)))

    def Y(self, t, x):
        t = np.asarray(t, dtype=float)
        if self.kind == "constant":
            return self.constant * self._e(t) * np.ones_like(np.asarray(x, dtype=float))
        return self._e(t) * (np.asarray(x, dtype=float) + self.mean_rate * (self.horizon - t))

    def Z(self, t):
        return 0.0 * self._e(t) if self.kind == "constant" else self.sigma * self._e(t)

    def U(self, t, mark):
        return 0.0 * self._e(t) * mark if self.kind == "constant" else mark * self._e(t)

    def D(self, t, r, v):
        """``D_{r,v} Y_t`` (``v = 0``: mark-0 channel); zero for ``t < r``."""
        if self.kind == "constant":
            return 0.0 * self._e(t)
        amp = 1.0 if v == 0 else v
        return np.where(np.asarray(t) >= r, amp * self._e(t), 0.0)

    def Y0(self, x0=0.0):
        return float(self.Y(0.0, x0))

    def on_batch(self, batch: PathBatch):
        """``(Y, Z, U)`` arrays on a batch's grid; ``Z`` and ``U`` at step starts."""
        t = batch.grid
        Y = self.Y(t[None, :], batch.values)
        Z = np.broadcast_to(self.Z(t[:-1]), (batch.n_paths, batch.n_steps)).copy()
        U = np.broadcast_to(self.U(t[:-1, None], batch.marks[None, :]),
                            (batch.n_paths, batch.n_steps, batch.marks.size)).copy()
        return Y, Z, U


def closed_form_linear(model: LevyModel, alpha: float, xi_kind: str = "X_T", constant: float = 1.0):
    """Closed form for ``f = alpha y`` with ``xi = X_T`` or a constant."""
    if xi_kind not in ("X_T", "constant"):
        raise CapabilityError(f"no closed form for terminal kind {xi_kind!r}")
    return ClosedFormLinear(float(alpha), model.horizon, model.sigma, model.mean_rate(), xi_kind,
                            float(constant))


@dataclass(frozen=True)
class Verdict:
    passed: bool
    hypothesis_ok: bool
    failed_at: int | None
    max_gap: float
    bound: float
    tail_max: float
    tail_bound: float
    message: str


def gronwall_check(gaps: Sequence[float], epsilon: float, c_terms: Sequence[float] | None = None,
                   slack: float = 0.0, rtol: float = 1e-12) -> Verdict:
    """Check ``g_{n+1} <= eps + C_n + g_n / 2`` on ``gaps = (g_0, g_1, ...)`` with ``g_0 = 0``.

    With ``C == 0`` the conclusion is ``g_n <= 2 eps`` for every ``n``.
    Otherwise the limsup is read as the maximum over the final quarter of the
    record and compared with ``2 eps + 2 max_tail C + slack``, where
    ``max_tail C`` is the largest ``C_n`` feeding that quarter (the fixed point
    of ``b = eps + C + b / 2`` is ``2 eps + 2 C``).
    """
    g = np.asarray(gaps, dtype=float)
    if g.ndim != 1 or g.size == 0 or np.any(g < 0) or g[0] != 0:
        raise ParameterError("gaps must be a nonnegative sequence starting at g_0 = 0")
    n = g.size
    C = np.zeros(n - 1) if c_terms is None else np.asarray(c_terms, dtype=float)
    if C.size < n - 1:
        C = np.concatenate([C, np.zeros(n - 1 - C.size)])
    C = C[: n - 1]
    rhs = epsilon + C + 0.5 * g[:-1]
    bad = np.flatnonzero(g[1:] > rhs * (1 + rtol) + rtol * epsilon)
    start = (3 * n) // 4
    tail = g[start:]
    tail_max = float(tail.max())
    if bad.size:
        k = int(bad[0])
        return Verdict(False, False, k, float(g.max()), math.nan, tail_max, math.nan,
                       f"hypothesis fails at n={k}: g_{k + 1}={g[k + 1]:.3e} > "
                       f"eps + C_{k} + g_{k}/2 = {rhs[k]:.3e} (Picard map not contracting)")
    if not np.any(C):
        bound = 2 * epsilon
        ok = bool(np.all(g <= bound * (1 + rtol)))
        return Verdict(ok, True, None, float(g.max()), bound, tail_max, bound,
                       f"C = 0: max g_n = {g.max():.3e} vs 2 eps = {bound:.3e}")
    tail_c = float(C[max(start - 1, 0):].max()) if C.size else 0.0
    tail_bound = 2 * epsilon + 2 * tail_c + slack
    ok = tail_max <= tail_bound * (1 + rtol)
    return Verdict(bool(ok), True, None, float(g.max()), math.nan, tail_max, tail_bound,
                   f"limsup read as max over the final quarter (n >= {start}): "
                   f"{tail_max:.3e} vs 2 eps + 2 max tail C + slack = {tail_bound:.3e}")
