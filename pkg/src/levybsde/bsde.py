"""Backward scheme for Lévy-driven BSDEs

    Y_t = xi + int_t^T f(X, s, Y_s, Z_s, [g(U_s)]_nu) ds - int_t^T Z dW - int_t^T int U N~(ds, dx)

on a :class:`~levybsde.levy.PathBatch`.  Conditional expectations are
least-squares projections on a basis of the step-``i`` features (``X_{t_i}``
and, when present, a forward state ``Psi_{t_i}``).  One step reads

    Z_i    = E_i[(Y_{i+1} - E_i Y_{i+1}) dW_i] / E[dW_i^2]
    U_i(j) = E_i[(Y_{i+1} - E_i Y_{i+1}) dN~_i(j)] / E[dN~_i(j)^2]
    Y_i    = E_i[Y_{i+1}] + dt_i f(t_i, Y_i, Z_i, [g(U_i)]_nu)      (inner Picard in Y_i)

``Z`` is stored as the ``dW`` integrand; the mark-0 chaos channel is ``Z / sigma``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from itertools import combinations_with_replacement
from typing import Callable

import numpy as np
from numpy.polynomial import Polynomial

from .errors import (
    BasisError,
    ContractionError,
    ParameterError,
    RegressionConditioningWarning,
    ShapeError,
)
from .levy import PathBatch

__all__ = [
    "StepState",
    "Generator",
    "TerminalFunctional",
    "SchemeParams",
    "BsdeSolution",
    "StabilityReport",
    "g_nu_functional",
    "solve_bsde",
    "picard_step",
    "picard_iterate",
    "stability_gap",
    "g_alpha",
    "truncate_g_alpha",
    "TruncatedGAlpha",
    "utility_generator",
    "make_features",
    "make_fit",
]


@dataclass(frozen=True, eq=False)
class StepState:
    """What the driver may know about the path at grid index ``index``."""

    index: int
    t: float
    x: np.ndarray
    psi: np.ndarray | None = None


def _ones(x):
    return np.ones_like(np.asarray(x, dtype=float))


def _identity(u):
    return u


@dataclass(frozen=True)
class Generator:
    """Driver ``f(state, t, y, z, w)`` with jump aggregate ``w = [g(u)]_nu``.

    ``lipschitz_g=None`` marks a ``g`` without a global Lipschitz bound (the
    raw exponential-utility term); the a-priori contraction check is then
    skipped and only the runtime convergence check applies.
    """

    f: Callable
    g: Callable = _identity
    dg: Callable | None = lambda u: np.ones_like(u)
    g1: Callable = _ones
    lipschitz_f: float = 0.0
    lipschitz_g: float | None = 1.0
    df_dy: Callable | None = None
    df_dz: Callable | None = None
    df_dw: Callable | None = None
    df_dx: Callable | None = None
    df_dpsi: Callable | None = None
    path_dependent: bool = False
    gamma_bound: Callable | None = None
    name: str = "f"

    @classmethod
    def zero(cls):
        z = lambda s, t, y, z, w: np.zeros_like(y)
        return cls(z, df_dy=z, df_dz=z, df_dw=z, name="zero")

    @classmethod
    def linear(cls, alpha):
        """``f = alpha * y``."""
        zero = lambda s, t, y, z, w: np.zeros_like(y)
        return cls(
            lambda s, t, y, z, w: alpha * y,
            lipschitz_f=abs(alpha),
            df_dy=lambda s, t, y, z, w: np.full_like(y, alpha),
            df_dz=zero,
            df_dw=zero,
            name=f"linear({alpha})",
        )

    @property
    def deterministic(self):
        return not self.path_dependent

    def g1_values(self, marks):
        return np.asarray(self.g1(np.asarray(marks, dtype=float)), dtype=float)

    def g1_norm(self, marks, weights):
        return math.sqrt(float(np.sum(weights * self.g1_values(marks) ** 2)))

    def lipschitz_fg(self, marks, weights):
        """``L_f (1 + L_g |g1|_{L2(nu)})``, or ``None`` when ``g`` has no global bound."""
        if self.lipschitz_g is None:
            return None
        return self.lipschitz_f * (1.0 + self.lipschitz_g * self.g1_norm(marks, weights))

    def check_lipschitz(self, rng, n_probe=2000, scale=10.0, state=None):
        """Largest observed ``|f(eta) - f(eta~)| / |eta - eta~|`` and ``|g'|`` on random probes."""
        if state is None:
            state = StepState(0, 0.0, rng.normal(size=n_probe))
        a = rng.uniform(-scale, scale, size=(3, n_probe))
        b = a + rng.normal(scale=rng.uniform(1e-3, scale, size=n_probe), size=(3, n_probe))
        t = 0.0
        fa = self.f(state, t, a[0], a[1], a[2])
        fb = self.f(state, t, b[0], b[1], b[2])
        ratio = np.abs(fa - fb) / np.linalg.norm(a - b, axis=0)
        u = np.linspace(-scale, scale, 4001)
        dg = np.abs(self.dg(u)) if self.dg is not None else np.array([np.nan])
        return float(ratio.max()), float(dg.max())


@dataclass(frozen=True)
class TerminalFunctional:
    """Terminal condition ``xi = g_xi(X)`` evaluated on a batch.

    ``brownian_derivative(batch, k)`` returns the mark-0 chaos channel
    ``D_{r,0} xi`` for ``r`` in grid cell ``(t_k, t_{k+1}]``.
    """

    evaluate: Callable[[PathBatch], np.ndarray]
    brownian_derivative: Callable[[PathBatch, int], np.ndarray] | None = None
    terminal_only: bool = False
    phi: Callable | None = None
    dphi: Callable | None = None
    name: str = "xi"

    def __call__(self, batch):
        return np.asarray(self.evaluate(batch), dtype=float)

    @classmethod
    def of_terminal(cls, phi, dphi=None, name="phi(X_T)"):
        """Smooth function of ``X_T``; its Brownian channel is ``phi'(X_T)``."""
        deriv = None
        if dphi is not None:
            deriv = lambda b, k: dphi(b.values[:, -1])
        return cls(lambda b: phi(b.values[:, -1]), deriv, True, phi, dphi, name)

    @classmethod
    def identity(cls):
        return cls.of_terminal(lambda x: x, np.ones_like, name="X_T")

    @classmethod
    def constant(cls, c):
        return cls.of_terminal(lambda x: np.full_like(x, c), np.zeros_like, name=f"const({c})")

    @classmethod
    def brownian_terminal(cls):
        """``xi = W_T``; channel derivative ``1 / sigma``."""
        return cls(lambda b: b.W[:, -1], lambda b, k: np.full(b.n_paths, 1.0 / b.sigma), name="W_T")

    @classmethod
    def running_max(cls):
        """``xi = max_k X_{t_k}``; channel derivative ``1{argmax > k}``."""

        def deriv(b, k):
            return (np.argmax(b.values, axis=1) >= k + 1).astype(float)

        return cls(lambda b: b.values.max(axis=1), deriv, name="max X")


@dataclass(frozen=True)
class SchemeParams:
    """Numerical knobs of the backward scheme.

    ``basis`` is ``"polynomial"`` (total degree ``basis_degree`` in
    standardised features), ``"hat"`` (piecewise-linear hats on ``hat_cells``
    quantile cells per feature, flat beyond the data) or ``"indicator"`` (one
    column per distinct feature value, exact on finite state spaces).  ``picard_weight`` is the ``beta``
    in the ``exp(beta t)``-weighted norm used for global Picard gaps.
    """

    basis: str = "polynomial"
    basis_degree: int = 3
    picard_tol: float = 1e-10
    max_picard: int = 50
    cond_warn: float = 1e8
    picard_weight: float = 0.0
    hat_cells: int = 16

    def __post_init__(self):
        if self.basis not in ("polynomial", "hat", "indicator"):
            raise ParameterError(f"unknown basis {self.basis!r}")
        if self.basis_degree < 0 or self.hat_cells < 1 or self.picard_tol <= 0 or self.max_picard < 1:
            raise ParameterError("invalid scheme parameters")

    def describe(self):
        if self.basis == "indicator":
            return "indicator(features)"
        if self.basis == "hat":
            return f"hat(cells={self.hat_cells}, quantile knots)"
        return f"polynomial(degree={self.basis_degree}, standardised features)"


# -- regression ---------------------------------------------------------------


def _poly_design(z, degree):
    P, d = z.shape
    cols = [np.ones(P)]
    for deg in range(1, degree + 1):
        for combo in combinations_with_replacement(range(d), deg):
            cols.append(np.prod(z[:, list(combo)], axis=1))
    return np.column_stack(cols)


class _LsqFit:
    """Weighted minimum-norm least squares on a fixed design ``A = design(feats)``."""

    def __init__(self, feats, w, design, cond_warn):
        self.design = design
        self.A = A = design(feats)
        self.sw = np.sqrt(w)
        try:
            U, s, Vt = np.linalg.svd(A * self.sw[:, None], full_matrices=False)
        except np.linalg.LinAlgError as exc:
            raise BasisError(f"regression design could not be factorised: {exc}") from exc
        if not np.all(np.isfinite(s)) or s.size == 0 or s[0] == 0:
            raise BasisError("regression design is singular")
        r = int(np.sum(s > s[0] * 1e-12))
        self.cond = float(s[0] / s[r - 1])
        if self.cond > cond_warn:
            warnings.warn(f"regression condition number {self.cond:.3g} exceeds {cond_warn:.3g}",
                          RegressionConditioningWarning, stacklevel=4)
        self.U, self.s, self.Vt = U[:, :r], s[:r], Vt[:r]

    def coef(self, targets):
        return self.Vt.T @ ((self.U.T @ (self.sw[:, None] * targets)) / self.s[:, None])

    def project(self, targets):
        targets = np.asarray(targets, dtype=float)
        flat = targets.reshape(targets.shape[0], -1)
        c = self.coef(flat)
        return (self.A @ c).reshape(targets.shape), c

    def predict(self, feats, c):
        return self.design(np.atleast_2d(feats)) @ c


def _poly_fit(feats, w, degree, cond_warn):
    mean = w @ feats
    std = np.sqrt(w @ (feats - mean) ** 2)
    scale = np.where(std > 1e-13 * (1.0 + np.abs(mean)), std, np.inf)
    return _LsqFit(feats, w, lambda f: _poly_design((f - mean) / scale, degree), cond_warn)


def _weighted_quantiles(x, w, levels):
    order = np.argsort(x, kind="stable")
    cum = np.cumsum(w[order])
    pos = np.searchsorted(cum, levels * cum[-1], side="left").clip(0, x.size - 1)
    return x[order][pos]


def _hat_fit(feats, w, cells, cond_warn):
    """Piecewise-linear hats on weighted-quantile knots, constant beyond the end knots."""
    levels = np.linspace(0.0, 1.0, cells + 1)
    knots = [np.unique(_weighted_quantiles(feats[:, k], w, levels)) for k in range(feats.shape[1])]

    def design(f):
        cols = []
        for k, kn in enumerate(knots):
            eye = np.eye(kn.size)
            cols += [np.interp(f[:, k], kn, eye[m]) for m in range(kn.size)]
        return np.column_stack(cols)

    return _LsqFit(feats, w, design, cond_warn)


class _IndicatorFit:
    def __init__(self, feats, w, decimals=9):
        keys = np.round(feats, decimals) + 0.0
        self.decimals = decimals
        self.keys, self.inv = np.unique(keys, axis=0, return_inverse=True)
        self.inv = self.inv.reshape(-1)
        self.w = w
        self.mass = np.bincount(self.inv, weights=w, minlength=len(self.keys))
        self.cond = 1.0

    def project(self, targets):
        targets = np.asarray(targets, dtype=float)
        flat = targets.reshape(targets.shape[0], -1)
        c = np.column_stack([
            np.bincount(self.inv, weights=self.w * flat[:, k], minlength=len(self.keys)) / self.mass
            for k in range(flat.shape[1])
        ])
        return c[self.inv].reshape(targets.shape), c

    def predict(self, feats, c):
        lookup = {tuple(k): i for i, k in enumerate(self.keys)}
        keys = np.round(np.atleast_2d(feats), self.decimals) + 0.0
        out = np.full((keys.shape[0], c.shape[1]), np.nan)
        for n, k in enumerate(keys):
            i = lookup.get(tuple(k))
            if i is not None:
                out[n] = c[i]
        return out


def make_fit(feats, weights, scheme: SchemeParams):
    feats = np.asarray(feats, dtype=float)
    if feats.ndim == 1:
        feats = feats[:, None]
    if scheme.basis == "indicator":
        return _IndicatorFit(feats, weights)
    if scheme.basis == "hat":
        return _hat_fit(feats, weights, scheme.hat_cells, scheme.cond_warn)
    return _poly_fit(feats, weights, scheme.basis_degree, scheme.cond_warn)


def make_features(batch: PathBatch, forward: np.ndarray | None = None):
    """Step-``i`` regression features: ``X_{t_i}`` and optionally ``Psi_{t_i}``."""

    def features(i):
        if forward is None:
            return batch.values[:, i][:, None]
        return np.column_stack([batch.values[:, i], forward[:, i]])

    return features


def _state(batch, i, forward=None):
    return StepState(i, float(batch.grid[i]), batch.values[:, i],
                     None if forward is None else forward[:, i])


# -- solution containers -----------------------------------------------------


@dataclass(frozen=True, eq=False)
class BsdeSolution:
    """``Y`` is ``(P, N+1)``, ``Z`` is ``(P, N)``, ``U`` is ``(P, N, J)``.

    ``start_index > 0`` marks a derivative solution that is identically zero
    on grid indices below it.
    """

    Y: np.ndarray
    Z: np.ndarray
    U: np.ndarray
    grid: np.ndarray
    marks: np.ndarray
    mark_weights: np.ndarray
    path_weights: np.ndarray
    picard_gaps: tuple = ()
    inner_residuals: tuple = ()
    basis_spec: str = ""
    start_index: int = 0
    sigma: float = 1.0
    fits: tuple = field(default=(), repr=False)
    driver: Callable | None = field(default=None, repr=False)

    @property
    def n_steps(self):
        return self.grid.size - 1

    @property
    def Y0(self):
        return float(self.path_weights @ self.Y[:, self.start_index])

    @property
    def Z_channel(self):
        return self.Z / self.sigma

    def mean(self, a):
        return np.tensordot(self.path_weights, a, axes=1)

    @classmethod
    def zeros(cls, batch: PathBatch):
        P, N, J = batch.n_paths, batch.n_steps, batch.marks.size
        return cls(np.zeros((P, N + 1)), np.zeros((P, N)), np.zeros((P, N, J)), batch.grid,
                   batch.marks, batch.mark_weights, batch.path_weights, sigma=batch.sigma)

    def value_at(self, i, feats, state):
        """Re-evaluate ``Y_i`` at new step-``i`` features with the stored regression fits."""
        fit, cy, czu = self.fits[i]
        feats = np.atleast_2d(np.asarray(feats, dtype=float).T).T
        ey = fit.predict(feats, cy)[:, 0]
        zu = fit.predict(feats, czu)
        dt = self.grid[i + 1] - self.grid[i]
        y, _ = _fixed_point(lambda y: ey + dt * self.driver(i, state, y, zu[:, 0], zu[:, 1:]),
                            ey, 1e-13, 200)
        return y

    def to_csv(self, fh, metadata: dict | None = None):
        import csv

        for key, val in (metadata or {}).items():
            fh.write(f"# {key}: {val}\n")
        fh.write("# columns: path_id, t, Y, Z (dW integrand; blank at t_N), U_<mark> per jump node\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path_id", "t", "Y", "Z"] + [f"U_{x:g}" for x in self.marks])
        P, N = self.Y.shape[0], self.n_steps
        for p in range(P):
            for k in range(N + 1):
                row = [p, repr(float(self.grid[k])), repr(float(self.Y[p, k]))]
                if k < N:
                    row += [repr(float(self.Z[p, k]))] + [repr(float(u)) for u in self.U[p, k]]
                else:
                    row += [""] * (1 + self.marks.size)
                writer.writerow(row)


def g_nu_functional(gen: Generator, u_values, marks, nu_weights):
    """``[g(u)]_nu = sum_j nu_j g(u_j) g1(x_j)`` over the last axis of ``u_values``."""
    u = np.asarray(u_values, dtype=float)
    marks = np.asarray(marks, dtype=float)
    if u.shape[-1] != marks.size or marks.shape != np.shape(nu_weights):
        raise ShapeError(f"u has {u.shape[-1]} node values, quadrature has {marks.size} nodes")
    return gen.g(u) @ (np.asarray(nu_weights) * gen.g1_values(marks))


# -- backward recursion ------------------------------------------------------


def _fixed_point(step, y0, tol, max_iter):
    y = y0
    residuals = []
    for _ in range(max_iter):
        y_new = step(y)
        res = float(np.max(np.abs(y_new - y))) if y.size else 0.0
        residuals.append(res)
        y = y_new
        if not np.isfinite(res):
            break
        if res <= tol:
            return y, residuals
    raise ContractionError(
        f"inner Picard iteration did not reach tol {tol:g} in {max_iter} steps "
        f"(last residuals {residuals[-3:]}); use a smaller time step"
    )


def _precheck(batch, L, tol_factor=1.0):
    if L is None:
        return
    worst = float(np.max(batch.dt)) * L
    if worst >= tol_factor:
        raise ContractionError(
            f"dt * L_f (1 + L_g |g1|) = {worst:.3g} >= 1: inner Picard map is not a contraction; "
            "use a smaller time step"
        )


def _fits(batch, scheme, features, start=0):
    w = batch.path_weights
    return [make_fit(features(i), w, scheme) if i >= start else None for i in range(batch.n_steps)]


def _control_targets(batch, i, R):
    cols = [R * batch.dW[:, i] / batch.brownian_var[i]]
    var = batch.channel_var
    dN = batch.compensated_counts
    for j in range(batch.marks.size):
        cols.append(R * dN[:, i, j] / var[i, j])
    return np.column_stack(cols)


def _backward(batch, terminal, driver, scheme, features, lipschitz, start=0, fits=None,
              prev=None, keep_fits=True):
    """Shared backward loop.

    ``driver(i, state, y, z, u)`` is evaluated implicitly in ``y`` unless
    ``prev`` is given, in which case it is evaluated explicitly at the
    previous global iterate (one global Picard step).
    """
    P, N, J = batch.n_paths, batch.n_steps, batch.marks.size
    if prev is None:
        _precheck(batch, lipschitz)
    Y = np.zeros((P, N + 1))
    Z = np.zeros((P, N))
    U = np.zeros((P, N, J))
    Y[:, N] = terminal
    stored = [None] * N
    inner = [()] * N
    for i in range(N - 1, start - 1, -1):
        fit = fits[i] if fits is not None else make_fit(features(i), batch.path_weights, scheme)
        ey, cy = fit.project(Y[:, i + 1])
        zu, czu = fit.project(_control_targets(batch, i, Y[:, i + 1] - ey))
        if batch.sigma == 0:
            zu[:, 0] = 0.0
        Z[:, i] = zu[:, 0]
        U[:, i, :] = zu[:, 1:]
        if keep_fits:
            stored[i] = (fit, cy, czu)
        state = _state(batch, i, getattr(features, "forward", None))
        dt = batch.grid[i + 1] - batch.grid[i]
        if prev is not None:
            Y[:, i] = ey + dt * driver(i, state, prev.Y[:, i], prev.Z[:, i], prev.U[:, i, :])
        else:
            Y[:, i], inner[i] = _fixed_point(
                lambda y: ey + dt * driver(i, state, y, Z[:, i], U[:, i, :]),
                ey, scheme.picard_tol, scheme.max_picard)
        if not np.all(np.isfinite(Y[:, i])):
            raise ContractionError(f"non-finite Y at step {i}")
    return Y, Z, U, tuple(stored) if keep_fits else (), tuple(inner)


def _gen_driver(gen, batch, forward=None):
    gw = np.asarray(batch.mark_weights) * gen.g1_values(batch.marks)

    def driver(i, state, y, z, u):
        return gen.f(state, state.t, y, z, gen.g(u) @ gw if gw.size else np.zeros_like(y))

    return driver


def _features_for(batch, forward):
    feats = make_features(batch, forward)
    feats.forward = forward
    return feats


def solve_bsde(xi: TerminalFunctional, gen: Generator, batch: PathBatch,
               scheme: SchemeParams | None = None, forward: np.ndarray | None = None) -> BsdeSolution:
    """Solve the BSDE backward on ``batch`` (see module docstring for the step)."""
    scheme = scheme or SchemeParams()
    if batch.n_paths < 1:
        raise ParameterError("empty batch")
    if batch.marks.size and batch.off_mark_jumps:
        raise ParameterError("BSDE jump channels need every jump on a quadrature node")
    terminal = xi(batch)
    driver = _gen_driver(gen, batch, forward)
    L = gen.lipschitz_fg(batch.marks, batch.mark_weights)
    features = _features_for(batch, forward)
    Y, Z, U, fits, inner = _backward(batch, terminal, driver, scheme, features, L)
    return BsdeSolution(Y, Z, U, batch.grid, batch.marks, batch.mark_weights, batch.path_weights,
                        inner_residuals=inner, basis_spec=scheme.describe(), sigma=batch.sigma,
                        fits=fits, driver=driver)


def weighted_gap(a: BsdeSolution, b: BsdeSolution, beta=0.0):
    """``sqrt(E sum_i dt e^{beta t_i} (dY^2 + dZ^2 + sum_j nu_j dU_j^2))``."""
    dt = np.diff(a.grid)
    wt = dt * np.exp(beta * a.grid[:-1])
    dY = (a.Y[:, :-1] - b.Y[:, :-1]) ** 2
    dZ = (a.Z - b.Z) ** 2
    dU = ((a.U - b.U) ** 2) @ a.mark_weights if a.marks.size else 0.0
    per_path = (dY + dZ + dU) @ wt
    return math.sqrt(float(a.path_weights @ per_path))


def picard_step(prev: BsdeSolution, xi: TerminalFunctional, gen: Generator, batch: PathBatch,
                scheme: SchemeParams | None = None, forward=None, fits=None) -> BsdeSolution:
    """One global Picard iteration ``Y^{n+1}_t = E_t[xi + int_t^T f_g(Y^n, Z^n, U^n) ds]``.

    The generator is frozen at ``prev``; the conditional expectation is taken
    by nested step regressions, and ``(Z, U)`` are re-extracted from the new
    ``Y``.  The new gap (in the ``picard_weight``-weighted norm) is appended to
    ``picard_gaps``.
    """
    scheme = scheme or SchemeParams()
    driver = _gen_driver(gen, batch, forward)
    features = _features_for(batch, forward)
    Y, Z, U, stored, _ = _backward(batch, xi(batch), driver, scheme, features, None,
                                   fits=fits, prev=prev)
    new = BsdeSolution(Y, Z, U, batch.grid, batch.marks, batch.mark_weights, batch.path_weights,
                       basis_spec=scheme.describe(), sigma=batch.sigma, fits=stored, driver=driver)
    gap = weighted_gap(new, prev, scheme.picard_weight)
    return replace(new, picard_gaps=prev.picard_gaps + (gap,))


def picard_iterate(xi, gen, batch, scheme: SchemeParams | None = None, forward=None,
                   max_iter=None, start: BsdeSolution | None = None) -> BsdeSolution:
    """Global Picard from ``(0, 0, 0)`` until the gap falls below ``picard_tol``."""
    scheme = scheme or SchemeParams()
    sol = start or BsdeSolution.zeros(batch)
    fits = _fits(batch, scheme, _features_for(batch, forward))
    for _ in range(max_iter or scheme.max_picard):
        sol = picard_step(sol, xi, gen, batch, scheme, forward, fits=fits)
        if sol.picard_gaps[-1] <= scheme.picard_tol:
            return sol
    raise ContractionError(f"global Picard did not converge; gaps {sol.picard_gaps[-5:]}")


# -- stability ----------------------------------------------------------------


@dataclass(frozen=True)
class StabilityReport:
    lhs: float
    rhs: float
    terminal_gap: float
    generator_gap: float
    y_sup: float
    z_l2: float
    u_l2: float

    @property
    def ratio(self):
        return self.lhs / self.rhs if self.rhs > 0 else (0.0 if self.lhs == 0 else math.inf)


def stability_gap(sol: BsdeSolution, sol_prime: BsdeSolution, data_gap: float = 0.0) -> StabilityReport:
    """Empirical sides of the stability estimate.

    LHS: ``E sup_t |dY|^2 + E int |dZ|^2 dt + E int int |dU|^2 nu(dx) dt``.
    RHS bracket: ``E |xi - xi'|^2 + data_gap`` where ``data_gap`` is the
    generator-difference integral supplied by the caller (0 for equal drivers).
    """
    if sol.Y.shape != sol_prime.Y.shape or not np.array_equal(sol.grid, sol_prime.grid):
        raise ShapeError("solutions live on different batches")
    w, dt = sol.path_weights, np.diff(sol.grid)
    dY = sol.Y - sol_prime.Y
    y_sup = float(w @ np.max(dY**2, axis=1))
    z_l2 = float(w @ (((sol.Z - sol_prime.Z) ** 2) @ dt))
    u_l2 = float(w @ ((((sol.U - sol_prime.U) ** 2) @ sol.mark_weights) @ dt)) if sol.marks.size else 0.0
    term = float(w @ dY[:, -1] ** 2)
    return StabilityReport(y_sup + z_l2 + u_l2, term + data_gap, term, data_gap, y_sup, z_l2, u_l2)


# -- exponential-utility jump term ----------------------------------------------


def g_alpha(alpha):
    """``g(x) = (e^{alpha x} - alpha x - 1) / alpha`` with its first two derivatives."""
    if alpha <= 0:
        raise ParameterError("alpha must be > 0")
    g = lambda x: np.expm1(alpha * np.asarray(x, dtype=float)) / alpha - np.asarray(x, dtype=float)
    dg = lambda x: np.expm1(alpha * np.asarray(x, dtype=float))
    d2g = lambda x: alpha * np.exp(alpha * np.asarray(x, dtype=float))
    return g, dg, d2g


# quintic Hermite basis on [0, 1] carrying value/slope/curvature at 0 and zeros at 1
_H0 = Polynomial([1, 0, 0, -10, 15, -6])
_H1 = Polynomial([0, 1, 0, -6, 8, -3])
_H2 = Polynomial([0, 0, 0.5, -1.5, 1.5, -0.5])


class TruncatedGAlpha:
    """C^2 function equal to ``g^alpha`` on ``[-2K, 2K]`` and zero outside ``(-3K, 3K)``.

    The collars ``[2K, 3K]`` and ``[-3K, -2K]`` carry quintic Hermite blends
    that match value, slope and curvature at the seams and vanish to second
    order at ``+-3K``.
    """

    def __init__(self, alpha, bound):
        if alpha <= 0 or bound <= 0:
            raise ParameterError("alpha and bound must be > 0")
        self.alpha, self.bound = float(alpha), float(bound)
        self._g, self._dg, self._d2g = g_alpha(alpha)
        K, h = self.bound, self.bound
        # right collar in s = (x - 2K) / K, left collar in s = (-2K - x) / K
        self._right = (float(self._g(2 * K)) * _H0 + float(self._dg(2 * K)) * h * _H1
                       + float(self._d2g(2 * K)) * h * h * _H2)
        self._left = (float(self._g(-2 * K)) * _H0 - float(self._dg(-2 * K)) * h * _H1
                      + float(self._d2g(-2 * K)) * h * h * _H2)
        self.lipschitz = self._lipschitz()

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        K = self.bound
        out = np.where(np.abs(x) <= 2 * K, self._g(np.clip(x, -2 * K, 2 * K)), 0.0)
        right = (x > 2 * K) & (x < 3 * K)
        left = (x < -2 * K) & (x > -3 * K)
        out = np.where(right, self._right((x - 2 * K) / K), out)
        out = np.where(left, self._left((-2 * K - x) / K), out)
        return out

    def derivative(self, x):
        x = np.asarray(x, dtype=float)
        K = self.bound
        out = np.where(np.abs(x) <= 2 * K, self._dg(np.clip(x, -2 * K, 2 * K)), 0.0)
        right = (x > 2 * K) & (x < 3 * K)
        left = (x < -2 * K) & (x > -3 * K)
        out = np.where(right, self._right.deriv()((x - 2 * K) / K) / K, out)
        out = np.where(left, -self._left.deriv()((-2 * K - x) / K) / K, out)
        return out

    def _lipschitz(self):
        K = self.bound
        best = max(abs(float(self._dg(2 * K))), abs(float(self._dg(-2 * K))))
        for poly in (self._right, self._left):
            d1, d2 = poly.deriv(), poly.deriv(2)
            cand = [0.0, 1.0] + [r.real for r in d2.roots() if abs(r.imag) < 1e-12 and 0 <= r.real <= 1]
            best = max(best, max(abs(d1(s)) / K for s in cand))
        return best


def truncate_g_alpha(alpha, bound):
    return TruncatedGAlpha(alpha, bound)


def utility_generator(alpha, base: Callable | None = None, base_lipschitz=0.0, truncation: float | None = None,
                      base_partials: tuple | None = None):
    """Driver ``base(state, t, y, z) + [g(U)]_nu`` with ``g = g^alpha`` (``g1 = 1``).

    With ``truncation=K`` the jump term uses :func:`truncate_g_alpha` and
    the generator is globally Lipschitz; without it ``lipschitz_g`` is ``None``.
    """
    if truncation is None:
        g, dg, _ = g_alpha(alpha)
        lg = None
    else:
        tg = truncate_g_alpha(alpha, truncation)
        g, dg, lg = tg, tg.derivative, tg.lipschitz
    base = base or (lambda s, t, y, z: np.zeros_like(y))
    f = lambda s, t, y, z, w: base(s, t, y, z) + w
    kw = {}
    if base_partials is not None:
        dy, dz = base_partials
        kw = dict(df_dy=lambda s, t, y, z, w: dy(s, t, y, z),
                  df_dz=lambda s, t, y, z, w: dz(s, t, y, z),
                  df_dw=lambda s, t, y, z, w: np.ones_like(y))
    return Generator(f, g=g, dg=dg, lipschitz_f=max(1.0, base_lipschitz) * math.sqrt(2.0),
                     lipschitz_g=lg, name=f"utility(alpha={alpha}, K={truncation})", **kw)
