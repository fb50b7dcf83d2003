"""Coefficient models, the degenerate generator, and the regularity validator.

A model carries evaluators for a d x d symmetric matrix field a(t,x), a drift
b(t,x), and a killing rate c(t,x) on [0,inf) x closed half-space, together with
a declared regularity budget (delta, K, nu, alpha).  The generator acts on
(gradient, hessian) data as

    A v = (1/2) x_d <a(t,x), H> + b(t,x) . grad v,

so the second-order part vanishes identically on the boundary x_d = 0 and the
inward drift floor b_d(t, x', 0) >= nu > 0 is what carries information off the
boundary.  The validator checks the budget clause by clause on sampled points
and pairs: it can certify a failure (a violated inequality at a concrete
witness) but only ever provides evidence of success.

Evaluators are vectorized: they accept t as a scalar or (n,) array and x as an
(n, d) array, returning (n, d, d), (n, d), (n,) respectively, and must be pure
(safe to call concurrently).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import rng
from .geometry import Region, SpaceTimePoint, _holder_scan

_DOMAIN_VALIDATE = 104
_XD_SPLIT = 2.0  # near/far split of the regularity conditions

MatrixField = Callable[[np.ndarray, np.ndarray], np.ndarray]
VectorField = Callable[[np.ndarray, np.ndarray], np.ndarray]
ScalarField = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class RegularityBudget:
    """Declared constants: ellipticity floor, uniform bound, boundary drift floor, Hölder exponent."""

    delta: float
    K: float
    nu: float
    alpha: float

    def __post_init__(self) -> None:
        if self.delta <= 0 or self.K <= 0 or self.nu <= 0:
            raise ValueError("delta, K, nu must be strictly positive")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")

    def to_json(self) -> dict:
        return {"delta": self.delta, "K": self.K, "nu": self.nu, "alpha": self.alpha}


@dataclass
class CoefficientModel:
    """Evaluable coefficient triple (a, b, c) with a declared regularity budget."""

    d: int
    a: MatrixField
    b: VectorField
    c: ScalarField
    budget: RegularityBudget
    provenance: str = "analytic"
    time_independent: bool = False
    name: str = ""

    def varsigma(self, t, x: np.ndarray) -> np.ndarray:
        """Pointwise square root of a(t, x), batched.

        Cholesky when a is positive definite; otherwise a symmetric
        eigendecomposition root, which also covers semidefinite models
        (e.g. a = 0 for deterministic test configurations).  Eigenvalues
        below a scale-relative negative tolerance are an evaluation error.
        """
        av = np.asarray(self.a(t, x), dtype=float)
        try:
            return np.linalg.cholesky(av)
        except np.linalg.LinAlgError:
            w, v = np.linalg.eigh(av)
            scale = max(float(np.abs(w).max()), 1.0)
            if w.min() < -1e-10 * scale:
                raise ValueError(
                    f"a(t,x) has a negative eigenvalue {w.min():.3e}; not a diffusion matrix")
            return np.einsum("...ik,...k->...ik", v, np.sqrt(np.maximum(w, 0.0)))

    def sigma(self, t, x: np.ndarray) -> np.ndarray:
        """Diffusion matrix sqrt(x_d^+) * varsigma(t, x), batched."""
        xd = np.maximum(x[..., -1], 0.0)
        return np.sqrt(xd)[..., None, None] * self.varsigma(t, x)

    def check_symmetry(self, n_samples: int = 256, t_max: float = 1.0,
                       extent: float = 3.0, seed: int = 0, tol: float = 1e-10) -> None:
        """Sample points and verify a(t,x) is symmetric; raises on violation."""
        ts, xs = _sample_states(self.d, n_samples, t_max, extent, seed)
        av = np.asarray(self.a(ts, xs), dtype=float)
        gap = np.abs(av - np.swapaxes(av, -1, -2)).max()
        if gap > tol * max(1.0, np.abs(av).max()):
            raise ValueError(f"a(t,x) fails symmetry sampling: max asymmetry {gap:.3e}")


def _sample_states(d: int, n: int, t_max: float, extent: float, seed: int,
                   xd_lo: float = 0.0, xd_hi: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    idx = np.arange(n, dtype=np.uint64)
    u = rng.uniforms(seed, _DOMAIN_VALIDATE, idx, 0, d + 1)
    xs = -extent + 2.0 * extent * u[:, :d]
    hi = extent if xd_hi is None else xd_hi
    xs[:, -1] = xd_lo + (hi - xd_lo) * u[:, d - 1] if d >= 1 else xs[:, -1]
    ts = t_max * u[:, d]
    return ts, xs


def apply_generator(
    model: CoefficientModel,
    v_derivs: tuple[np.ndarray, np.ndarray],
    p: SpaceTimePoint,
) -> float:
    """Generator applied to derivative data (grad, hess) at a point.

    Returns (1/2) x_d <a, H>_F + b . grad; at x_d = 0 the hessian term drops
    out regardless of H.
    """
    grad, hess = v_derivs
    grad = np.asarray(grad, dtype=float)
    hess = np.asarray(hess, dtype=float)
    if grad.shape != (model.d,) or hess.shape != (model.d, model.d):
        raise ValueError("derivative shapes must be (d,) and (d, d)")
    if np.abs(hess - hess.T).max() > 1e-10 * max(1.0, np.abs(hess).max()):
        raise ValueError("hessian must be symmetric")
    t, x = p.as_arrays()
    if x.shape != (model.d,):
        raise ValueError(f"point dimension {x.shape[0]} != model dimension {model.d}")
    return float(generator_apply_batch(model, t, x[None, :], grad[None, :], hess[None, :])[0])


def generator_apply_batch(
    model: CoefficientModel, t, x: np.ndarray, grads: np.ndarray, hesss: np.ndarray
) -> np.ndarray:
    """Vectorized generator: (1/2) x_d <a, H> + b . grad over a batch of points."""
    av = model.a(t, x)
    bv = model.b(t, x)
    xd = np.maximum(x[..., -1], 0.0)
    second = 0.5 * xd * np.einsum("...ij,...ij->...", av, hesss)
    first = np.einsum("...i,...i->...", bv, grads)
    return second + first


def sqrt_factorize(a: np.ndarray) -> np.ndarray:
    """Cholesky factor of a symmetric positive-definite matrix.

    Positive definiteness is guarded by a scale-relative pivot floor:
    the smallest pivot must be >= 1e-10 * trace/d.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("input must be a square matrix")
    if np.abs(a - a.T).max() > 1e-10 * max(1.0, np.abs(a).max()):
        raise ValueError("input must be symmetric")
    try:
        ell = np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise ValueError("matrix is not positive definite") from exc
    pivot_floor = 1e-10 * np.trace(a) / a.shape[0]
    if np.min(np.diag(ell)) ** 2 < pivot_floor:
        raise ValueError(
            f"smallest Cholesky pivot {np.min(np.diag(ell))**2:.3e} below floor {pivot_floor:.3e}"
        )
    return ell


def heston_model(
    kappa: float,
    theta: float,
    zeta: float,
    rho: float,
    r: float = 0.0,
    q: float = 0.0,
    with_killing: bool = False,
    budget: RegularityBudget | None = None,
) -> CoefficientModel:
    """The d = 2 log-price / variance model.

        dX_1 = (r - q - x_2/2) dt + sqrt(x_2) dW_1
        dX_2 = kappa (theta - x_2) dt + zeta sqrt(x_2) (rho dW_1 + sqrt(1-rho^2) dW_2)

    stored so that sigma sigma^* = x_2 * a with a = [[1, rho zeta],
    [rho zeta, zeta^2]]; the killing rate is c = -r when enabled.
    """
    if kappa <= 0 or theta <= 0:
        raise ValueError("need kappa > 0 and theta > 0")
    if zeta == 0:
        raise ValueError("need zeta != 0")
    if not -1.0 < rho < 1.0:
        raise ValueError("need rho in (-1, 1)")
    if r < 0:
        raise ValueError("need r >= 0")

    a_const = np.array([[1.0, rho * zeta], [rho * zeta, zeta * zeta]])

    def a_eval(t, x):
        n = np.asarray(x).shape[0]
        out = np.empty((n, 2, 2))
        out[:] = a_const
        return out

    def b_eval(t, x):
        x = np.asarray(x)
        out = np.empty_like(x)
        out[:, 0] = (r - q) - 0.5 * x[:, 1]
        out[:, 1] = kappa * (theta - x[:, 1])
        return out

    c_val = -r if with_killing else 0.0

    def c_eval(t, x):
        return np.full(np.asarray(x).shape[0], c_val)

    if budget is None:
        lam_min = float(np.linalg.eigvalsh(a_const)[0])
        lip = max(kappa, 0.5)
        k_bound = 4.0 * max(
            1.0,
            zeta * zeta,
            1.0 + 2.0 * abs(rho * zeta) + zeta * zeta,
            6.0 * lip,
            abs(r - q) + kappa * theta + r,
        )
        budget = RegularityBudget(delta=0.8 * lam_min, K=k_bound, nu=0.8 * kappa * theta, alpha=0.5)

    return CoefficientModel(
        d=2, a=a_eval, b=b_eval, c=c_eval, budget=budget,
        provenance="analytic", time_independent=True,
        name=f"heston(kappa={kappa},theta={theta},zeta={zeta},rho={rho},r={r},q={q},killing={with_killing})",
    )


@dataclass(frozen=True)
class ConditionCheck:
    """Outcome of one clause: the empirical extremum, its witness, and pass/fail."""

    name: str
    passed: bool
    observed: float
    bound: float
    kind: str  # "min>=bound" or "max<=bound"
    witness: dict | None = None
    details: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "passed": self.passed,
            "observed": self.observed,
            "bound": self.bound,
            "kind": self.kind,
            "witness": self.witness,
            "details": self.details,
        }


@dataclass(frozen=True)
class ValidationReport:
    """Clause-by-clause check of a declared budget, with empirical constants.

    A failed clause is a certificate (the witness violates the inequality);
    a passed clause is sampling evidence only.
    """

    conditions: tuple[ConditionCheck, ...]
    declared: RegularityBudget
    empirical: dict

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.conditions)

    def condition(self, name: str) -> ConditionCheck:
        for c in self.conditions:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_json(self) -> dict:
        return {
            "passed": self.passed,
            "declared_budget": self.declared.to_json(),
            "empirical_budget": self.empirical,
            "clauses": [c.to_json() for c in self.conditions],
            "note": "failures are certified by witnesses; passes are sampling evidence only",
        }


def _point_witness(ts: np.ndarray, xs: np.ndarray, k: int) -> dict:
    return {"t": float(ts[k]), "x": [float(v) for v in xs[k]]}


def validate_coefficients(
    model: CoefficientModel,
    budget: RegularityBudget | None = None,
    t_max: float = 1.0,
    x_prime_extent: float = 3.0,
    xd_far_top: float = 6.0,
    n_samples: int = 4096,
    pair_budget: int = 4096,
    seed: int = 0,
    alphas: Sequence[float] | None = None,
) -> ValidationReport:
    """Check every regularity clause of the declared budget on sampled data.

    The state space splits at x_d = 2: below it the ellipticity/boundedness/
    Hölder conditions are imposed on `a` itself with the cycloidal metric;
    above it they are imposed on the product x_d * a with the parabolic
    metric.  The Hölder exponent is taken from the budget; extra exponents in
    ``alphas`` are scored and reported without affecting pass/fail.
    """
    if budget is None:
        budget = model.budget
    d = model.d
    ext = x_prime_extent
    report_alphas = list(alphas) if alphas is not None else []

    near = Region(0.0, t_max, (-ext,) * (d - 1) + (0.0,), (ext,) * (d - 1) + (_XD_SPLIT,))
    far = Region(0.0, t_max, (-ext,) * (d - 1) + (_XD_SPLIT,), (ext,) * (d - 1) + (xd_far_top,))
    wide = Region(0.0, t_max, (-ext,) * (d - 1) + (0.0,), (ext,) * (d - 1) + (xd_far_top,))

    conditions: list[ConditionCheck] = []

    def sample_region(region: Region, salt: int) -> tuple[np.ndarray, np.ndarray]:
        lo = np.asarray(region.lower)
        hi = np.asarray(region.upper)
        idx = np.arange(n_samples, dtype=np.uint64)
        u = rng.uniforms(seed + salt, _DOMAIN_VALIDATE, idx, 0, d + 1)
        xs = lo + u[:, :d] * (hi - lo)
        ts = region.t0 + u[:, d] * (region.t1 - region.t0)
        return ts, xs

    # clause: c(t,x) <= K everywhere sampled
    ts, xs = sample_region(wide, 1)
    cv = np.asarray(model.c(ts, xs), dtype=float)
    k = int(np.argmax(cv))
    conditions.append(ConditionCheck(
        name="killing_upper_bound", passed=bool(cv[k] <= budget.K),
        observed=float(cv[k]), bound=budget.K, kind="max<=bound",
        witness=_point_witness(ts, xs, k),
    ))

    # clause: b_d(t, x', 0) >= nu on the boundary
    ts, xs = sample_region(near, 2)
    xs = xs.copy()
    xs[:, -1] = 0.0
    bv = np.asarray(model.b(ts, xs), dtype=float)
    k = int(np.argmin(bv[:, -1]))
    conditions.append(ConditionCheck(
        name="boundary_drift_floor", passed=bool(bv[k, -1] >= budget.nu),
        observed=float(bv[k, -1]), bound=budget.nu, kind="min>=bound",
        witness=_point_witness(ts, xs, k),
    ))

    # clause: a elliptic near the boundary (x_d <= 2)
    ts, xs = sample_region(near, 3)
    av = np.asarray(model.a(ts, xs), dtype=float)
    eigs = np.linalg.eigvalsh(av)[:, 0]
    k = int(np.argmin(eigs))
    conditions.append(ConditionCheck(
        name="near_boundary_ellipticity", passed=bool(eigs[k] >= budget.delta),
        observed=float(eigs[k]), bound=budget.delta, kind="min>=bound",
        witness=_point_witness(ts, xs, k),
    ))

    # clause: sup bounds on a_ij, b_i, c near the boundary
    bv = np.asarray(model.b(ts, xs), dtype=float)
    cv = np.asarray(model.c(ts, xs), dtype=float)
    stacked = np.concatenate([np.abs(av).reshape(n_samples, -1),
                              np.abs(bv), np.abs(cv)[:, None]], axis=1)
    flat_k = int(np.argmax(stacked))
    k, comp = divmod(flat_k, stacked.shape[1])
    sup_obs = float(stacked[k, comp])
    conditions.append(ConditionCheck(
        name="near_boundary_sup_bounds", passed=bool(sup_obs <= budget.K),
        observed=sup_obs, bound=budget.K, kind="max<=bound",
        witness=_point_witness(ts, xs, k), details={"component_index": comp},
    ))

    # Hölder clauses: component fields near (cycloidal on a, b, c) and far
    # (parabolic on x_d * a, b, c)
    def component_fields(product_with_xd: bool):
        fields = []
        for i in range(d):
            for j in range(i, d):
                if product_with_xd:
                    fields.append((f"xd*a[{i},{j}]",
                                   lambda t, x, i=i, j=j: x[:, -1] * model.a(t, x)[:, i, j]))
                else:
                    fields.append((f"a[{i},{j}]",
                                   lambda t, x, i=i, j=j: model.a(t, x)[:, i, j]))
        for i in range(d):
            fields.append((f"b[{i}]", lambda t, x, i=i: model.b(t, x)[:, i]))
        fields.append(("c", lambda t, x: model.c(t, x)))
        return fields

    def holder_clause(name: str, region: Region, metric: str, product: bool, salt: int):
        worst = 0.0
        worst_label = None
        worst_witness = None
        per_alpha: dict[str, float] = {}
        for label, f in component_fields(product):
            est, wit = _holder_scan(f, region, budget.alpha, metric, pair_budget, seed + salt)
            if est.seminorm >= worst:
                worst = est.seminorm
                worst_label = label
                worst_witness = wit
            for extra in report_alphas:
                est2, _ = _holder_scan(f, region, extra, metric, pair_budget, seed + salt)
                key = f"alpha={extra}"
                per_alpha[key] = max(per_alpha.get(key, 0.0), est2.seminorm)
        details = {"component": worst_label, "metric": metric}
        if per_alpha:
            details["reported_alphas"] = per_alpha
        conditions.append(ConditionCheck(
            name=name, passed=bool(worst <= budget.K),
            observed=worst, bound=budget.K, kind="max<=bound",
            witness=worst_witness, details=details,
        ))

    holder_clause("near_boundary_holder_cycloidal", near, "cycloidal", False, 4)

    # clause: x_d * a elliptic away from the boundary (x_d >= 2)
    ts, xs = sample_region(far, 5)
    av = np.asarray(model.a(ts, xs), dtype=float)
    eigs = np.linalg.eigvalsh(xs[:, -1][:, None, None] * av)[:, 0]
    k = int(np.argmin(eigs))
    conditions.append(ConditionCheck(
        name="interior_ellipticity", passed=bool(eigs[k] >= budget.delta),
        observed=float(eigs[k]), bound=budget.delta, kind="min>=bound",
        witness=_point_witness(ts, xs, k),
    ))

    holder_clause("interior_holder_parabolic", far, "parabolic", True, 6)

    # clause: linear growth of x_d a, b, c
    ts, xs = sample_region(wide, 7)
    av = np.asarray(model.a(ts, xs), dtype=float)
    bv = np.asarray(model.b(ts, xs), dtype=float)
    cv = np.asarray(model.c(ts, xs), dtype=float)
    total = (np.abs(xs[:, -1][:, None, None] * av).sum(axis=(1, 2))
             + np.abs(bv).sum(axis=1) + np.abs(cv))
    ratio = total / (1.0 + np.linalg.norm(xs, axis=1))
    k = int(np.argmax(ratio))
    conditions.append(ConditionCheck(
        name="linear_growth", passed=bool(ratio[k] <= budget.K),
        observed=float(ratio[k]), bound=budget.K, kind="max<=bound",
        witness=_point_witness(ts, xs, k),
    ))

    by_name = {c.name: c for c in conditions}
    empirical = {
        "delta": min(by_name["near_boundary_ellipticity"].observed,
                     by_name["interior_ellipticity"].observed),
        "K": max(by_name["killing_upper_bound"].observed,
                 by_name["near_boundary_sup_bounds"].observed,
                 by_name["near_boundary_holder_cycloidal"].observed,
                 by_name["interior_holder_parabolic"].observed,
                 by_name["linear_growth"].observed),
        "nu": by_name["boundary_drift_floor"].observed,
        "alpha": budget.alpha,
    }
    return ValidationReport(conditions=tuple(conditions), declared=budget, empirical=empirical)


def strip_generator_term(model: CoefficientModel, part: str) -> CoefficientModel:
    """Deliberately broken copy of a model for negative controls.

    ``part='drift'`` zeroes b; ``part='diffusion'`` zeroes a.  The broken
    model is meant for the checking side of a pipeline (compensators, PDE
    coefficients), so tests that should fail do fail.
    """
    if part == "drift":
        b = lambda t, x: np.zeros_like(np.asarray(x, dtype=float))
        return CoefficientModel(d=model.d, a=model.a, b=b, c=model.c,
                                budget=model.budget, provenance=model.provenance,
                                time_independent=model.time_independent,
                                name=model.name + "|drift-stripped")
    if part == "diffusion":
        def a(t, x):
            n = np.asarray(x).shape[0]
            return np.zeros((n, model.d, model.d))
        return CoefficientModel(d=model.d, a=a, b=model.b, c=model.c,
                                budget=model.budget, provenance=model.provenance,
                                time_independent=model.time_independent,
                                name=model.name + "|diffusion-stripped")
    raise ValueError("part must be 'drift' or 'diffusion'")


def load_gridded_model(csv_path, sidecar_path=None, **build_kwargs) -> CoefficientModel:
    """Load mimicked-coefficient files (CSV + JSON sidecar) as a gridded model."""
    from . import projection

    mc = projection.load_mimicked(csv_path, sidecar_path)
    return projection.build_mimicking_model(mc, **build_kwargs)
