"""Experiment recipes shared by the command line runner and the acceptance tests.

Each recipe receives an :class:`ExperimentContext` (model, scheme, sizes,
seed, parameters, tolerances) and returns an :class:`ExperimentResult`
holding pass/fail :class:`Check` records and detail tables.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import bsde, chaos, levy, malliavin, oracles
from .bsde import Generator, SchemeParams, TerminalFunctional
from .levy import LevyModel

__all__ = ["Check", "ExperimentResult", "ExperimentContext", "Recipe", "RECIPES", "z_check"]

Z_MAX = 3.0


@dataclass(frozen=True)
class Check:
    """One verdict: ``lower <= value <= tolerance``.

    Statistical checks store the z-score as ``value`` with ``tolerance = 3``
    and keep the estimate, its target and standard error alongside.
    """

    name: str
    value: float
    tolerance: float
    lower: float | None = None
    se: float | None = None
    estimate: float | None = None
    target: float | None = None

    @property
    def passed(self):
        ok = math.isfinite(self.value) and self.value <= self.tolerance
        return bool(ok and (self.lower is None or self.value >= self.lower))

    @property
    def statistical(self):
        return self.se is not None


def z_check(name, estimate, target, se):
    z = abs(estimate - target) / se if se > 0 else (0.0 if estimate == target else math.inf)
    return Check(name, float(z), Z_MAX, se=float(se), estimate=float(estimate), target=float(target))


@dataclass(frozen=True)
class ExperimentResult:
    name: str
    recipe: str
    checks: tuple
    tables: dict = field(default_factory=dict)  # table name -> (header, rows)

    @property
    def passed(self):
        return all(c.passed for c in self.checks)


@dataclass(frozen=True)
class ExperimentContext:
    name: str
    model: LevyModel
    scheme: SchemeParams
    steps: int
    paths: int
    seed: int
    params: dict
    tol: dict

    def batch(self, steps=None, paths=None, stream=0, model=None):
        return levy.sample_paths(model or self.model, steps or self.steps, paths or self.paths,
                                 self.seed + 7919 * stream)


@dataclass(frozen=True)
class Recipe:
    func: Callable
    description: str
    params: dict
    tolerances: tuple


RECIPES: dict = {}


def recipe(description, tolerances=(), **params):
    def register(func):
        RECIPES[func.__name__] = Recipe(func, description, params, tuple(tolerances))
        return func

    return register


def _mse_se(samples):
    n = samples.size
    return float(np.std(samples, ddof=1) / math.sqrt(n))


def nonlinear_generator():
    """``f = sin(y) + z / 2 + w / 2`` with ``g`` the identity."""
    return Generator(
        lambda s, t, y, z, w: np.sin(y) + 0.5 * z + 0.5 * w,
        lipschitz_f=math.sqrt(1.5),
        df_dy=lambda s, t, y, z, w: np.cos(y),
        df_dz=lambda s, t, y, z, w: np.full_like(y, 0.5),
        df_dw=lambda s, t, y, z, w: np.full_like(y, 0.5),
        name="sin(y) + z/2 + w/2",
    )


def sine_terminal():
    return TerminalFunctional.of_terminal(np.sin, np.cos, name="sin(X_T)")


def _base_points(grid, marks, count, channels):
    """``count`` base points cycling through ``channels`` at right cell ends spread over the grid."""
    N = grid.size - 1
    steps = np.unique(np.linspace(0, N - 2, count).round().astype(int))
    pts = []
    for n, k in enumerate(np.linspace(0, N - 2, count).round().astype(int)):
        pts.append((float(grid[k + 1]), float(channels[n % len(channels)])))
    return pts, steps


# 1 ---------------------------------------------------------------------------
@recipe("jump-direction derivative of exp(X_T) against its closed form",
        tolerances=("rel_error",), base_points=20)
def jump_derivative_exactness(ctx: ExperimentContext):
    batch = ctx.batch()
    xi = TerminalFunctional.of_terminal(np.exp, np.exp, name="exp(X_T)")
    T = ctx.model.horizon
    sizes = [0.5, -0.3, 1.0, -1.0, 2.0]
    rows, worst = [], 0.0
    for n in range(ctx.params["base_points"]):
        r = T * (n + 0.5) / ctx.params["base_points"]
        v = sizes[n % len(sizes)]
        d = malliavin.jump_derivative(xi, batch, r, v)
        exact = np.exp(batch.values[:, -1]) * np.expm1(v)
        err = float(np.max(np.abs(d - exact) / np.abs(exact)))
        worst = max(worst, err)
        rows.append([r, v, err])
    checks = (Check("max relative error", worst, ctx.tol["rel_error"]),)
    return checks, {"base_points": (["r", "v", "max_rel_error"], rows)}


# 2 ---------------------------------------------------------------------------
def _kernels(grid, spec):
    T = grid[-1]
    half = float(grid[(grid.size - 1) // 2])
    quarter = float(grid[(grid.size - 1) // 4])
    marks = tuple(spec.marks)
    x0 = marks[0] if marks else 0.0
    k1 = [
        chaos.Kernel1.indicator(chaos.Box(0.0, half, (0.0,) + marks[:1]), spec),
        chaos.Kernel1.from_function(grid, spec, lambda t, x: math.cos(2 * math.pi * t) + 0.5 * x),
        chaos.Kernel1.from_function(grid[::2], spec, lambda t, x: (t - 0.5) * (1 + x * x) + (x == 0)),
    ]
    every = (0.0,) + marks
    k2 = [
        chaos.Kernel2(((1.0, chaos.Box(0.0, half, (0.0,)), chaos.Box(half, T, every)),), spec),
        chaos.Kernel2(((1.0, chaos.Box(0.0, quarter, every), chaos.Box(quarter, T, (0.0,))),
                       (-0.5, chaos.Box(half, T, (x0,)), chaos.Box(0.0, half, every))), spec),
        chaos.Kernel2(((2.0, chaos.Box(0.0, T, (0.0,)), chaos.Box(0.0, T, marks)),
                       (0.5, chaos.Box(quarter, half, marks), chaos.Box(half, T, marks))), spec),
    ]
    return k1, k2


@recipe("isometry and orthogonality of first and second multiple integrals")
def isometry(ctx: ExperimentContext):
    batch = ctx.batch()
    spec = chaos.MeasureSpec.from_model(ctx.model)
    k1, k2 = _kernels(batch.grid, spec)
    checks, rows = [], []
    for n, (f, g) in enumerate(zip(k1, k2), start=1):
        i1 = chaos.integrate_M1(f, batch, ctx.model)
        i2 = chaos.integrate_M2(g, batch, ctx.model)
        for label, sample, target in (
            (f"kernel {n}: E I1(f)^2 = |f|^2", i1**2, chaos.m_integral(f)),
            (f"kernel {n}: E I1(f) I2(g) = 0", i1 * i2, 0.0),
            (f"kernel {n}: E I2(g)^2 = 2 |g~|^2", i2**2, 2 * chaos.symmetrized_norm_sq(g)),
        ):
            c = z_check(label, float(sample.mean()), target, _mse_se(sample))
            checks.append(c)
            rows.append([label, c.estimate, c.target, c.se, c.value])
    return tuple(checks), {"moments": (["quantity", "estimate", "target", "se", "z"], rows)}


# 3 ---------------------------------------------------------------------------
@recipe("Cameron-Martin shift against the Girsanov density", h=0.5)
def girsanov(ctx: ExperimentContext):
    batch = ctx.batch()
    direction = levy.CameronMartinDirection.constant(batch.grid, ctx.params["h"])
    shifted = levy.cameron_martin_shift(batch, direction, 1.0)
    dens = levy.girsanov_density(batch, direction, "shift")
    funcs = {"X_T": lambda b: b.values[:, -1], "X_T^2": lambda b: b.values[:, -1] ** 2,
             "sup X": lambda b: b.values.max(axis=1)}
    checks, rows = [], []
    for label, fn in funcs.items():
        a, b = fn(shifted), fn(batch) * dens
        d = a - b
        c = z_check(f"E[{label} after shift] = E[{label} * density]", float(d.mean()), 0.0, _mse_se(d))
        checks.append(c)
        rows.append([label, float(a.mean()), float(b.mean()), c.se, c.value])
    return tuple(checks), {"estimates": (["functional", "shift_mean", "density_mean", "se_diff", "z"], rows)}


# 4 ---------------------------------------------------------------------------
@recipe("martingale BSDE xi = X_T, f = 0", tolerances=("z_rel", "u_rel"))
def martingale_bsde(ctx: ExperimentContext):
    batch = ctx.batch()
    sol = bsde.solve_bsde(TerminalFunctional.identity(), Generator.zero(), batch, ctx.scheme)
    target = ctx.model.horizon * ctx.model.mean_rate()
    xi = batch.values[:, -1]
    checks = [z_check("Y_0 = T mean_rate", sol.Y0, target, _mse_se(xi))]
    sigma = ctx.model.sigma
    z_err = math.sqrt(float(np.mean((sol.Z - sigma) ** 2))) / sigma
    checks.append(Check("|Z - sigma| / sigma (L2)", z_err, ctx.tol["z_rel"]))
    rows = [["Z", sigma, z_err]]
    for j, x in enumerate(batch.marks):
        u_err = math.sqrt(float(np.mean((sol.U[:, :, j] - x) ** 2))) / abs(x)
        checks.append(Check(f"|U({x:g}) - {x:g}| / |{x:g}| (L2)", u_err, ctx.tol["u_rel"]))
        rows.append([f"U({x:g})", float(x), u_err])
    rows.append(["Y_0", target, sol.Y0])
    return tuple(checks), {"controls": (["quantity", "target", "relative_l2_error_or_value"], rows)}


# 5 ---------------------------------------------------------------------------
@recipe("linear driver f = alpha y against the closed form, with a time-step sweep",
        tolerances=("rel", "ratio_low", "ratio_high"), alpha=0.5, sweep_levels=[5, 10, 20])
def linear_driver(ctx: ExperimentContext):
    alpha = ctx.params["alpha"]
    gen, xi = Generator.linear(alpha), TerminalFunctional.identity()
    cf = oracles.closed_form_linear(ctx.model, alpha)
    batch = ctx.batch()
    sol = bsde.solve_bsde(xi, gen, batch, ctx.scheme)
    T = ctx.model.horizon
    target = cf.Y0()
    se = math.exp(alpha * T) * _mse_se(batch.values[:, -1])
    allowed = max(Z_MAX * se, ctx.tol["rel"] * abs(target))
    checks = [Check("|Y_0 - closed form| <= max(3 SE, rel |target|)", abs(sol.Y0 - target), allowed,
                    estimate=sol.Y0, target=target)]
    levels = sorted(ctx.params["sweep_levels"])
    fine = ctx.batch(steps=levels[-1], stream=1)
    sample_target = math.exp(alpha * T) * float(fine.values[:, -1].mean())
    rows, errors = [], []
    for n in levels:
        y0 = bsde.solve_bsde(xi, gen, fine.coarsen(levels[-1] // n), ctx.scheme).Y0
        errors.append(y0 - sample_target)
        rows.append([n, T / n, y0, sample_target, errors[-1], ""])
    for k in range(1, len(levels)):
        ratio = errors[k - 1] / errors[k]
        rows[k][-1] = ratio
        checks.append(Check(f"error ratio N={levels[k - 1]} -> {levels[k]}", ratio, ctx.tol["ratio_high"],
                            lower=ctx.tol["ratio_low"]))
    header = ["steps", "dt", "Y_0", "sample_closed_form", "error", "ratio_to_previous"]
    return tuple(checks), {"sweep": (header, rows)}


# 6 ---------------------------------------------------------------------------
@recipe("regression solver on the enumerated tree against exact backward induction",
        tolerances=("abs",), tree_steps=4)
def tree_equivalence(ctx: ExperimentContext):
    tree = oracles.TreeModel.from_model(ctx.model, ctx.params["tree_steps"])
    gen, xi = nonlinear_generator(), sine_terminal()
    exact = oracles.tree_backward(tree, xi, gen)
    scheme = SchemeParams(basis="indicator", picard_tol=1e-14, max_picard=200)
    reg = bsde.solve_bsde(xi, gen, tree.as_batch(), scheme)
    diffs = {"Y_0": abs(exact.Y0 - reg.Y0),
             "Z_0": float(np.max(np.abs(exact.Z[:, 0] - reg.Z[:, 0]))),
             "U_0": float(np.max(np.abs(exact.U[:, 0] - reg.U[:, 0]))) if tree.marks.size else 0.0}
    checks = tuple(Check(f"|{k} regression - {k} tree|", v, ctx.tol["abs"]) for k, v in diffs.items())
    rows = [["Y_0", exact.Y0, reg.Y0, diffs["Y_0"]], ["Z_0", float(exact.Z[0, 0]), float(reg.Z[0, 0]), diffs["Z_0"]]]
    for j, x in enumerate(tree.marks):
        rows.append([f"U_0({x:g})", float(exact.U[0, 0, j]), float(reg.U[0, 0, j]),
                     float(abs(exact.U[0, 0, j] - reg.U[0, 0, j]))])
    return checks, {"values": (["quantity", "tree", "regression", "abs_diff"], rows)}


@recipe("closed form of the linear driver against the tree", tolerances=("rel",), alpha=0.2, tree_steps=4)
def tree_closed_form(ctx: ExperimentContext):
    alpha = ctx.params["alpha"]
    tree = oracles.TreeModel.from_model(ctx.model, ctx.params["tree_steps"])
    cf = oracles.closed_form_linear(ctx.model, alpha)
    sol = oracles.tree_backward(tree, TerminalFunctional.identity(), Generator.linear(alpha))
    t1 = tree.dt
    pairs = [("Y_0", sol.Y0, cf.Y0()), ("Z_0", float(sol.Z[0, 0]), float(cf.Z(t1)))]
    pairs += [(f"U_0({x:g})", float(sol.U[0, 0, j]), float(cf.U(t1, x))) for j, x in enumerate(tree.marks)]
    checks, rows = [], []
    for label, got, want in pairs:
        rel = abs(got - want) / abs(want)
        checks.append(Check(f"{label} tree vs closed form (relative)", rel, ctx.tol["rel"]))
        rows.append([label, got, want, rel])
    return tuple(checks), {"values": (["quantity", "tree", "closed_form", "relative_error"], rows)}


# 7 ---------------------------------------------------------------------------
def _rel_gap(a, b, m):
    num = float(np.sum((a[:, m:] - b[:, m:]) ** 2))
    den = float(np.sum(b[:, m:] ** 2))
    return math.sqrt(num / den) if den > 0 else math.sqrt(num)


@recipe("derivative BSDE against a re-solve on jump-shifted paths", tolerances=("rel_gap",),
        base_points=10)
def derivative_triangle(ctx: ExperimentContext):
    batch = ctx.batch()
    gen, xi = nonlinear_generator(), sine_terminal()
    base = bsde.solve_bsde(xi, gen, batch, ctx.scheme)
    pts, _ = _base_points(batch.grid, batch.marks, ctx.params["base_points"], list(batch.marks))
    rows, num, den = [], 0.0, 0.0
    for r, v in pts:
        d = malliavin.solve_derivative_bsde(
            malliavin.build_derivative_problem(base, xi, gen, r, v, batch), batch, ctx.scheme)
        s = malliavin.shifted_resolve_difference(base, xi, gen, batch, r, v, ctx.scheme)
        m = d.start_index
        gap = _rel_gap(d.Y, s.Y, m)
        num += float(np.sum((d.Y[:, m:] - s.Y[:, m:]) ** 2))
        den += float(np.sum(s.Y[:, m:] ** 2))
        rows.append([r, v, gap, _rel_gap(d.Z, s.Z, m), _rel_gap(d.U.reshape(batch.n_paths, -1),
                                                               s.U.reshape(batch.n_paths, -1),
                                                               m * batch.marks.size)])
    checks = [Check("relative L2 gap, derivative BSDE vs shifted re-solve", math.sqrt(num / den),
                    ctx.tol["rel_gap"])]
    # analytic corner: f = 0, xi = X_T gives D_{r,v} Y_t = v exactly
    flat = bsde.solve_bsde(TerminalFunctional.identity(), Generator.zero(), batch, ctx.scheme)
    worst = 0.0
    for r, v in pts:
        d = malliavin.solve_derivative_bsde(malliavin.build_derivative_problem(
            flat, TerminalFunctional.identity(), Generator.zero(), r, v, batch), batch, ctx.scheme)
        worst = max(worst, float(np.max(np.abs(d.Y[:, d.start_index:] - v))) / abs(v))
    checks.append(Check("f = 0, xi = X_T: derivative BSDE vs analytic v (relative)", worst, ctx.tol["rel_gap"]))
    header = ["r", "v", "rel_gap_Y", "rel_gap_Z", "rel_gap_U"]
    return tuple(checks), {"base_points": (header, rows)}


# 8 ---------------------------------------------------------------------------
@recipe("chain rule for F(y) = W_T y, G = W_T against Cameron-Martin differences",
        tolerances=("ratio_low", "ratio_high"), u=[0.4, 0.2, 0.1, 0.05])
def chain_rule(ctx: ExperimentContext):
    batch = ctx.batch()
    WT = batch.W[:, -1]
    ones = np.ones((batch.n_paths, batch.n_steps))
    field_ = malliavin.chain_rule_brownian(
        F=lambda y: WT * y[:, 0], dF_dy=lambda y: WT[:, None], DF=lambda y: y[:, :1] * ones,
        G_values=[WT], G_fields=[ones])
    direction = levy.CameronMartinDirection.constant(batch.grid, 1.0)
    fd = malliavin.brownian_fd_derivative(lambda b: b.W[:, -1] ** 2, batch, direction, ctx.params["u"],
                                          analytic=lambda b: field_)
    errs = fd.errors()
    rows, checks = [], []
    for k, (u, e) in enumerate(zip(fd.u, errs)):
        ratio = errs[k - 1] / e if k else ""
        rows.append([float(u), float(e), ratio])
        if k:
            checks.append(Check(f"FD error ratio u={fd.u[k - 1]:g} -> {u:g}", float(ratio),
                                ctx.tol["ratio_high"], lower=ctx.tol["ratio_low"]))
    return tuple(checks), {"fd": (["u", "rms_error", "ratio_to_previous"], rows)}


# 9 ---------------------------------------------------------------------------
@recipe("predictable projection of D Y at the right limit against Z and U",
        tolerances=("tree", "mc"), tree_steps=4, base_times=10)
def representation(ctx: ExperimentContext):
    tree = oracles.TreeModel.from_model(ctx.model, ctx.params["tree_steps"])
    tsol = oracles.tree_backward(tree, sine_terminal(), nonlinear_generator())
    rz, ru = oracles.tree_representation_residual(tree, tsol)
    checks = [Check("tree: residual Z", rz, ctx.tol["tree"]), Check("tree: residual U", ru, ctx.tol["tree"])]
    batch = ctx.batch()
    xi, gen = TerminalFunctional.identity(), Generator.zero()
    base = bsde.solve_bsde(xi, gen, batch, ctx.scheme)
    N = batch.n_steps
    steps = np.unique(np.linspace(0, N - 1, ctx.params["base_times"]).round().astype(int))
    channels = [0.0] + [float(x) for x in batch.marks]
    pts = [(float(batch.grid[k + 1]), v) for k in steps for v in channels]
    rep = malliavin.representation_report(base, xi, gen, batch, pts, ctx.scheme, ctx.tol["mc"])
    for v in channels:
        label = "Z" if v == 0 else f"U({v:g})"
        checks.append(Check(f"Monte Carlo: relative residual {label}", rep.aggregate[v], ctx.tol["mc"]))
    rows = [[row.r, row.v, row.residual, row.n, row.tolerance, "PASS" if row.passed else "FAIL"]
            for row in rep.rows]
    return tuple(checks), {"residuals": (["r", "v", "residual", "n", "tolerance", "verdict"], rows)}


# 10 --------------------------------------------------------------------------
@recipe("global Picard gaps against the sequence bound g_{n+1} <= eps + C_n + g_n / 2",
        iterations=24, beta=10.0)
def picard_gronwall(ctx: ExperimentContext):
    batch = ctx.batch()
    gen, xi = nonlinear_generator(), sine_terminal()
    scheme = SchemeParams(basis=ctx.scheme.basis, basis_degree=ctx.scheme.basis_degree,
                          hat_cells=ctx.scheme.hat_cells, picard_tol=ctx.scheme.picard_tol,
                          max_picard=ctx.scheme.max_picard, picard_weight=ctx.params["beta"])
    sol = bsde.BsdeSolution.zeros(batch)
    fits = bsde._fits(batch, scheme, bsde._features_for(batch, None))
    for _ in range(ctx.params["iterations"]):
        sol = bsde.picard_step(sol, xi, gen, batch, scheme, fits=fits)
    gaps = [0.0] + list(sol.picard_gaps)
    eps = scheme.picard_tol
    verdict = oracles.gronwall_check(gaps, eps, c_terms=[gaps[1]])
    direct = bsde.solve_bsde(xi, gen, batch, scheme)
    fixed = float(np.max(np.abs(direct.Y - sol.Y)))
    checks = (
        Check("hypothesis g_{n+1} <= eps + C_n + g_n/2 (violations)", 0.0 if verdict.hypothesis_ok else 1.0, 0.5),
        Check("max gap over final quarter vs 2 eps + 2 max tail C", verdict.tail_max, verdict.tail_bound),
        Check("Picard fixed point vs backward solve (max |dY|)", fixed, 1e3 * eps),
    )
    rows = [[n, g, gaps[n] / gaps[n - 1] if n > 1 and gaps[n - 1] > 0 else ""] for n, g in enumerate(gaps)]
    return checks, {"gaps": (["n", "gap", "ratio_to_previous"], rows)}


# 11 --------------------------------------------------------------------------
@recipe("stability ratio LHS/RHS across terminal perturbation sizes", tolerances=("factor",),
        deltas=[1e-1, 1e-2, 1e-3])
def stability(ctx: ExperimentContext):
    batch = ctx.batch()
    gen, xi = nonlinear_generator(), sine_terminal()
    base = bsde.solve_bsde(xi, gen, batch, ctx.scheme)
    rows, ratios = [], []
    for d in ctx.params["deltas"]:
        pert = TerminalFunctional(
            lambda b, d=d: np.sin(b.values[:, -1]) + d * np.tanh(b.values[:, -1]) * np.cos(b.W[:, -1]))
        rep = bsde.stability_gap(base, bsde.solve_bsde(pert, gen, batch, ctx.scheme))
        ratios.append(rep.ratio)
        rows.append([d, rep.lhs, rep.rhs, rep.ratio, rep.y_sup, rep.z_l2, rep.u_l2])
    spread = max(ratios) / min(ratios)
    checks = (Check("max ratio / min ratio across perturbation sizes", spread, ctx.tol["factor"]),)
    header = ["delta", "lhs", "rhs", "ratio", "sup_Y_gap", "Z_gap", "U_gap"]
    return checks, {"ratios": (header, rows)}


# 12 --------------------------------------------------------------------------
def utility_base(s, t, y, z):
    return 0.5 * np.cos(y) - 0.25 * y + 0.2 * np.sin(z)


@recipe("exponential-utility jump term against its truncation at the sup of Y",
        tolerances=("rel", "u_slack"), alpha=1.0)
def utility_truncation(ctx: ExperimentContext):
    batch = ctx.batch()
    alpha = ctx.params["alpha"]
    xi = TerminalFunctional.of_terminal(np.tanh, lambda x: 1.0 / np.cosh(x) ** 2, name="tanh(X_T)")
    raw = bsde.solve_bsde(xi, bsde.utility_generator(alpha, utility_base, 0.75), batch, ctx.scheme)
    K = float(np.max(np.abs(raw.Y)))
    cut = bsde.solve_bsde(xi, bsde.utility_generator(alpha, utility_base, 0.75, truncation=K), batch,
                          ctx.scheme)
    checks, rows = [], []
    for label in ("Y", "Z", "U"):
        a, b = getattr(raw, label), getattr(cut, label)
        rel = float(np.max(np.abs(a - b))) / max(float(np.max(np.abs(a))), 1e-300)
        checks.append(Check(f"{label}: raw vs truncated (relative sup)", rel, ctx.tol["rel"]))
        rows.append([label, rel])
    u_sup = float(np.max(np.abs(raw.U)))
    checks.append(Check("sup |U| <= 2 sup |Y| + slack", u_sup, 2 * K + ctx.tol["u_slack"]))
    rows += [["sup_Y", K], ["sup_U", u_sup], ["truncated_g_lipschitz", bsde.truncate_g_alpha(alpha, K).lipschitz]]
    return tuple(checks), {"comparison": (["quantity", "value"], rows)}
