"""Malliavin derivatives of path functionals and of BSDE solutions.

Three routes are available:

* jump directions ``D_{r,v}``, ``v != 0``: the exact pathwise difference
  ``xi(X + v 1_[r,T]) - xi(X)``;
* the Brownian direction: Cameron-Martin finite differences paired with an
  analytic ``D^W`` field;
* the derivative BSDE, solved with the same backward machinery as the base
  equation.

Convention: ``D_{r,0}`` is the mark-0 chaos channel of ``M = sigma dW delta_0 + N~``.
The derivative with respect to the Brownian path is ``D^W = sigma * D_{.,0}``,
and the ``dW`` integrand ``Z`` of a BSDE equals ``sigma`` times its channel.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .bsde import (
    BsdeSolution,
    Generator,
    SchemeParams,
    TerminalFunctional,
    _backward,
    _features_for,
    _gen_driver,
    make_fit,
    solve_bsde,
)
from .errors import CapabilityError, CoverageError, DirectionError, RangeError
from .levy import (
    CameronMartinDirection,
    ForwardSdeSpec,
    Path,
    PathBatch,
    cameron_martin_shift,
    forward_first_variation,
    shift_batch,
    simulate_forward,
)

__all__ = [
    "CHANNEL_CONVENTION",
    "MalliavinField",
    "DerivativeProblem",
    "FdResult",
    "RepresentationReport",
    "jump_derivative",
    "brownian_fd_derivative",
    "base_index",
    "build_derivative_problem",
    "solve_derivative_bsde",
    "shifted_resolve_difference",
    "derivative_fields",
    "chain_rule_brownian",
    "representation_residual",
    "representation_report",
    "d12_norm_estimate",
]

CHANNEL_CONVENTION = "D_{r,0} is the mark-0 chaos channel; dW integrand = sigma * channel"


@dataclass(frozen=True, eq=False)
class MalliavinField:
    """Derivatives at a set of base points ``(r, v)``.

    ``values[(r, v)]`` is a per-path array for a scalar functional or a
    :class:`BsdeSolution` (``start_index`` marking the first grid time ``>= r``)
    for a BSDE.
    """

    base_points: tuple
    values: dict
    sigma: float = 1.0
    convention: str = CHANNEL_CONVENTION

    def __getitem__(self, point):
        try:
            return self.values[point]
        except KeyError:
            raise CoverageError(f"no derivative stored for base point {point}") from None

    def channels(self):
        return sorted({v for _, v in self.base_points})

    def check_locality(self):
        """Every stored BSDE field vanishes on grid times before its base time."""
        for point in self.base_points:
            sol = self.values[point]
            if isinstance(sol, BsdeSolution):
                m = sol.start_index
                if np.any(sol.Y[:, :m]) or np.any(sol.Z[:, :m]) or np.any(sol.U[:, :m]):
                    return False
        return True


@dataclass(frozen=True, eq=False)
class DerivativeProblem:
    """Terminal value and driver of the BSDE for ``(D_{r,v}Y, D_{r,v}Z, D_{r,v}U)``."""

    r: float
    v: float
    start_index: int
    terminal: np.ndarray
    driver: Callable
    lipschitz: float | None
    base: BsdeSolution
    forward: np.ndarray | None = None


def _as_batch(paths):
    return (paths.as_batch(), True) if isinstance(paths, Path) else (paths, False)


def jump_derivative(xi: TerminalFunctional, paths, r: float, v: float):
    """``D_{r,v} xi = xi(X + v 1_[r,T]) - xi(X)`` per path (a float for a single path)."""
    if v == 0:
        raise DirectionError("v = 0 is the Brownian channel; use brownian_fd_derivative")
    batch, single = _as_batch(paths)
    out = xi(shift_batch(batch, r, v)) - xi(batch)
    return float(out[0]) if single else out


@dataclass(frozen=True, eq=False)
class FdResult:
    """Finite-difference quotients ``(xi(rho_{uh}) - xi) / u``, one row per ``u``."""

    u: np.ndarray
    quotients: np.ndarray
    pairing: np.ndarray | None = None

    def errors(self):
        """Root-mean-square distance of each quotient row to the analytic pairing."""
        if self.pairing is None:
            raise CapabilityError("no analytic derivative was supplied")
        return np.sqrt(np.mean((self.quotients - self.pairing) ** 2, axis=-1))


def brownian_fd_derivative(xi, paths, direction: CameronMartinDirection, u: Sequence[float],
                           analytic: Callable | None = None) -> FdResult:
    """Cameron-Martin difference quotients of ``xi`` along ``h``.

    ``xi`` is a :class:`TerminalFunctional` or any callable on a batch.
    ``analytic(batch)`` may return the ``D^W xi`` field per grid cell,
    shape ``(P, N)``; its pairing with ``h`` is returned alongside.
    """
    batch, single = _as_batch(paths)
    u = np.asarray(u, dtype=float)
    if np.any(u == 0):
        raise RangeError("finite-difference steps must be nonzero")
    base = np.asarray(xi(batch), dtype=float)
    q = np.array([(np.asarray(xi(cameron_martin_shift(batch, direction, s))) - base) / s for s in u])
    pairing = None
    if analytic is not None:
        pairing = direction.pair(np.asarray(analytic(batch), dtype=float))
    if single:
        q = q[:, 0]
        pairing = None if pairing is None else pairing[0]
    return FdResult(u, q, pairing)


def base_index(grid, r):
    """First grid index ``m`` with ``t_m >= r`` (right limit of a càdlàg grid path)."""
    if not 0.0 <= r <= grid[-1]:
        raise RangeError(f"base time r={r} outside [0, {grid[-1]}]")
    return int(np.searchsorted(grid, r - 1e-12 * max(1.0, grid[-1]), side="left"))


def _states(batch, forward):
    from .bsde import _state

    return lambda i: _state(batch, i, forward)


def build_derivative_problem(base: BsdeSolution, xi: TerminalFunctional, gen: Generator,
                             r: float, v: float, batch: PathBatch,
                             forward_spec: ForwardSdeSpec | None = None) -> DerivativeProblem:
    """Terminal ``D_{r,v} xi`` and driver ``F_{r,v}`` along the base solution.

    ``v != 0``: ``F = f_g(shifted path, Y + y, Z + z, U + u) - f_g(path, Y, Z, U)``.
    ``v = 0``: ``F = (D_{r,0} f)(Y, Z, U) + f_y y + f_z z + f_w [g'(U) u]_nu``,
    where ``D_{r,0} f = f_x 1{s >= r} + f_psi D_{r,0} Psi`` (zero for
    deterministic drivers).
    """
    m = base_index(batch.grid, r)
    forward = None if forward_spec is None else simulate_forward(forward_spec, batch)
    L = gen.lipschitz_fg(batch.marks, batch.mark_weights)
    gw = np.asarray(batch.mark_weights) * gen.g1_values(batch.marks)
    base_driver = _gen_driver(gen, batch)
    if v != 0:
        shifted = shift_batch(batch, r, v)
        terminal = xi(shifted) - xi(batch)
        fwd_shift = None if forward_spec is None else simulate_forward(forward_spec, shifted)
        state_base, state_shift = _states(batch, forward), _states(shifted, fwd_shift)

        def driver(i, state, y, z, u):
            Yi, Zi, Ui = base.Y[:, i], base.Z[:, i], base.U[:, i, :]
            return (base_driver(i, state_shift(i), Yi + y, Zi + z, Ui + u)
                    - base_driver(i, state_base(i), Yi, Zi, Ui))

        return DerivativeProblem(r, v, m, terminal, driver, L, base, forward)

    if xi.brownian_derivative is None:
        raise CapabilityError(f"terminal functional {xi.name!r} has no Brownian derivative")
    if gen.df_dy is None or gen.df_dz is None or gen.df_dw is None or gen.dg is None:
        raise CapabilityError(f"generator {gen.name!r} lacks partial derivatives for the Brownian channel")
    k = max(m - 1, 0)
    terminal = np.asarray(xi.brownian_derivative(batch, k), dtype=float)
    dpsi = None
    if forward_spec is not None and gen.df_dpsi is not None:
        dpsi = forward_first_variation(forward_spec, batch, k, forward) / batch.sigma
    states = _states(batch, forward)

    def driver(i, state, y, z, u):
        s = states(i)
        Yi, Zi, Ui = base.Y[:, i], base.Z[:, i], base.U[:, i, :]
        w = gen.g(Ui) @ gw if gw.size else np.zeros_like(Yi)
        args = (s, s.t, Yi, Zi, w)
        out = gen.df_dy(*args) * y + gen.df_dz(*args) * z
        if gw.size:
            out = out + gen.df_dw(*args) * ((gen.dg(Ui) * u) @ gw)
        if gen.df_dx is not None and i >= m:
            out = out + gen.df_dx(*args)
        if dpsi is not None:
            out = out + gen.df_dpsi(*args) * dpsi[:, i]
        return out

    return DerivativeProblem(r, v, m, terminal, driver, L, base, forward)


def solve_derivative_bsde(prob: DerivativeProblem, batch: PathBatch,
                          scheme: SchemeParams | None = None) -> BsdeSolution:
    """Backward solve of the derivative equation on grid indices ``>= start_index``.

    Values before the base time are exactly zero.
    """
    scheme = scheme or SchemeParams()
    features = _features_for(batch, prob.forward)
    Y, Z, U, _, inner = _backward(batch, prob.terminal, prob.driver, scheme, features,
                                  prob.lipschitz, start=prob.start_index, keep_fits=False)
    return BsdeSolution(Y, Z, U, batch.grid, batch.marks, batch.mark_weights, batch.path_weights,
                        inner_residuals=inner, basis_spec=scheme.describe(),
                        start_index=prob.start_index, sigma=batch.sigma, driver=prob.driver)


def shifted_resolve_difference(base: BsdeSolution, xi, gen, batch: PathBatch, r: float, v: float,
                               scheme: SchemeParams | None = None,
                               forward_spec: ForwardSdeSpec | None = None) -> BsdeSolution:
    """Re-solve on ``X + v 1_[r,T]`` and subtract ``base``; zeroed before the base time."""
    shifted = shift_batch(batch, r, v)
    fwd = None if forward_spec is None else simulate_forward(forward_spec, shifted)
    other = solve_bsde(xi, gen, shifted, scheme, fwd)
    m = base_index(batch.grid, r)
    Y, Z, U = other.Y - base.Y, other.Z - base.Z, other.U - base.U
    Y[:, :m] = 0.0
    Z[:, :m] = 0.0
    U[:, :m] = 0.0
    return BsdeSolution(Y, Z, U, batch.grid, batch.marks, batch.mark_weights, batch.path_weights,
                        basis_spec=other.basis_spec, start_index=m, sigma=batch.sigma)


def derivative_fields(base: BsdeSolution, xi, gen, batch: PathBatch, base_points,
                      scheme: SchemeParams | None = None,
                      forward_spec: ForwardSdeSpec | None = None) -> MalliavinField:
    """Derivative-BSDE solutions at every base point ``(r, v)``."""
    values = {}
    for r, v in base_points:
        prob = build_derivative_problem(base, xi, gen, r, v, batch, forward_spec)
        values[(r, v)] = solve_derivative_bsde(prob, batch, scheme)
    return MalliavinField(tuple(base_points), values, batch.sigma)


def chain_rule_brownian(F: Callable, dF_dy: Callable | None, DF: Callable | None,
                        G_values: Sequence[np.ndarray], G_fields: Sequence[np.ndarray]):
    """``D^W F(., G) = (D^W F)(., G) + sum_k dF/dy_k(., G) D^W G_k`` per grid cell.

    ``F(y)`` and ``dF_dy(y)`` take ``y`` of shape ``(P, d)``; ``dF_dy`` returns
    ``(P, d)``.  ``DF(y)`` returns the ``(P, N)`` path derivative of ``F`` with
    ``y`` frozen, or ``None`` if ``F`` does not depend on the path.
    ``G_fields[k]`` is the ``(P, N)`` field ``D^W G_k``.
    """
    if dF_dy is None:
        raise CapabilityError("chain rule needs the partial derivatives of F in y")
    y = np.column_stack([np.asarray(g, dtype=float) for g in G_values])
    grads = np.asarray(dF_dy(y), dtype=float).reshape(y.shape)
    out = sum(grads[:, k:k + 1] * np.asarray(G_fields[k], dtype=float) for k in range(y.shape[1]))
    if DF is not None:
        out = out + np.asarray(DF(y), dtype=float)
    return out


@dataclass(frozen=True)
class RepresentationRow:
    r: float
    v: float
    step: int
    residual: float
    n: int
    tolerance: float

    @property
    def passed(self):
        return bool(self.residual <= self.tolerance)


@dataclass(frozen=True, eq=False)
class RepresentationReport:
    rows: tuple
    aggregate: dict = field(default_factory=dict)
    tolerance: float = 0.1

    @property
    def passed(self):
        return all(val <= self.tolerance for val in self.aggregate.values())

    def to_csv(self, fh, metadata: dict | None = None):
        for key, val in (metadata or {}).items():
            fh.write(f"# {key}: {val}\n")
        fh.write("# columns: r (base time), v (0 = Brownian channel), residual (relative L2 to Z or U), "
                 "n (sample size), tolerance, verdict\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["r", "v", "residual", "n", "tolerance", "verdict"])
        for row in self.rows:
            writer.writerow([repr(row.r), repr(row.v), repr(row.residual), row.n, repr(row.tolerance),
                             "PASS" if row.passed else "FAIL"])


def _point_residual(base, sol, r, v, batch, fit):
    m = base_index(batch.grid, r)
    proj, _ = fit.project(sol.Y[:, m])
    if v == 0:
        est, target = batch.sigma * proj, base.Z[:, m - 1]
    else:
        hit = np.flatnonzero(base.marks == v)
        if hit.size == 0:
            raise CoverageError(f"no U channel for jump node {v}")
        est, target = proj, base.U[:, m - 1, hit[0]]
    w = batch.path_weights
    return float(w @ (est - target) ** 2), float(w @ target**2)


def _residual_report(base, points, solve, batch, scheme, tolerance, forward):
    feats = _features_for(batch, forward)
    rows, pooled, fits = [], {}, {}
    for r, v in points:
        m = base_index(batch.grid, r)
        if m == 0:
            raise RangeError("base time must lie strictly after 0 to have a prior step")
        k = m - 1
        if k not in fits:
            fits[k] = make_fit(feats(k), batch.path_weights, scheme)
        num, den = _point_residual(base, solve(r, v), r, v, batch, fits[k])
        rel = math.sqrt(num / den) if den > 0 else math.sqrt(num)
        rows.append(RepresentationRow(float(r), float(v), k, rel, batch.n_paths, tolerance))
        a, b = pooled.get(v, (0.0, 0.0))
        pooled[v] = (a + num, b + den)
    aggregate = {v: math.sqrt(a / b) if b > 0 else math.sqrt(a) for v, (a, b) in pooled.items()}
    return RepresentationReport(tuple(rows), aggregate, tolerance)


def representation_residual(base: BsdeSolution, fields: MalliavinField, batch: PathBatch,
                            scheme: SchemeParams | None = None, tolerance: float = 0.1,
                            forward: np.ndarray | None = None) -> RepresentationReport:
    """Compare the predictable projection of ``D_{r,v} Y_{r+}`` with ``Z`` and ``U(v)``.

    For ``r`` in cell ``(t_k, t_{k+1}]`` the right limit is the derivative
    field at ``t_{k+1}``; its projection is a regression on the step-``k``
    features.  For ``v = 0`` the projection is multiplied by ``sigma`` before
    comparison with ``Z_k``.  Residuals are relative L2 over the batch, and
    ``aggregate`` pools them over all base points of a channel.
    """
    scheme = scheme or SchemeParams()
    return _residual_report(base, fields.base_points, lambda r, v: fields[(r, v)], batch, scheme,
                            tolerance, forward)


def representation_report(base: BsdeSolution, xi, gen, batch: PathBatch, base_points,
                          scheme: SchemeParams | None = None, tolerance: float = 0.1,
                          forward_spec: ForwardSdeSpec | None = None) -> RepresentationReport:
    """Same as :func:`representation_residual`, solving one base point at a time.

    Memory stays at one derivative solution regardless of the number of base points.
    """
    scheme = scheme or SchemeParams()
    forward = None if forward_spec is None else simulate_forward(forward_spec, batch)

    def solve(r, v):
        prob = build_derivative_problem(base, xi, gen, r, v, batch, forward_spec)
        sol = solve_derivative_bsde(prob, batch, scheme)
        m = sol.start_index
        if np.any(sol.Y[:, :m]) or np.any(sol.Z[:, :m]) or np.any(sol.U[:, :m]):
            raise AssertionError("derivative field is nonzero before its base time")
        return sol

    return _residual_report(base, base_points, solve, batch, scheme, tolerance, forward)


def d12_norm_estimate(xi: TerminalFunctional, batch: PathBatch, steps: Sequence[int] | None = None):
    """Monte Carlo ``E xi^2 + int int E (D_{r,v} xi)^2 m(dr, dv)``.

    The time integral is a left-cell quadrature with ``r = t_{k+1}`` standing
    for cell ``k``; ``steps`` restricts it to a sub-grid (rescaled).
    Returns ``(estimate, standard_error_of_E_xi^2)``.
    """
    w = batch.path_weights
    x = xi(batch)
    total = float(w @ x**2)
    se = float(np.sqrt(w @ (x**2 - total) ** 2 / max(batch.n_paths - 1, 1)))
    N = batch.n_steps
    steps = list(range(N)) if steps is None else list(steps)
    scale = N / len(steps)
    for k in steps:
        dt = batch.grid[k + 1] - batch.grid[k]
        r = float(batch.grid[k + 1])
        acc = 0.0
        if batch.sigma > 0:
            if xi.brownian_derivative is None:
                raise CapabilityError(f"{xi.name!r} has no Brownian derivative")
            acc += batch.sigma**2 * float(w @ np.asarray(xi.brownian_derivative(batch, k)) ** 2)
        for x_j, nu_j in zip(batch.marks, batch.mark_weights):
            acc += nu_j * float(w @ jump_derivative(xi, batch, r, x_j) ** 2)
        total += scale * dt * acc
    return total, se
