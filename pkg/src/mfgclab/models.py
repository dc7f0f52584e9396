"""Mean-field-game-of-controls problem instances.

A model bundles the drift b(x, a, nu), running cost f(x, a, nu), terminal
cost g(x, mu), the pointwise minimiser phi of the pre-Hamiltonian, and the
fixed point Phi mapping a (state, momentum) law to the consistent
(state, control) law.  Built-in families carry closed-form Hamiltonians and
closed-form derivatives of the reduced Hamiltonian

    Hhat(x, p, rho) = H(x, p, Phi(rho)),

against which a finite-difference fallback is cross-checked.  All built-in
families are one-dimensional in state and control.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .measures import (
    EmpiricalMeasure,
    JointEmpiricalMeasure,
    _trusted_joint,
    first_marginal,
    flow_distance,
)
from .reports import ConditionReport

# Finite-difference steps: relative steps for point variables, absolute-ish
# steps for single-particle perturbations (those carry an extra factor N and
# amplify round-off, hence the larger step).  Second-order point derivatives
# divide by h^2, so they need the quarter-power step to stay below round-off.
FD_STEP_POINT = 1e-5
FD_STEP_SECOND = 1e-4
FD_STEP_PARTICLE = 1e-4


class ModelError(ValueError):
    """Raised for ill-posed model evaluations (bad minimiser, bad family parameters)."""


class FixedPointError(RuntimeError):
    """Raised when the control-law fixed point iteration fails to converge."""

    def __init__(self, message: str, iterations: int, residual: float):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual


# ---------------------------------------------------------------------------
# small polynomial helpers
# ---------------------------------------------------------------------------

def poly_val(coeffs, x):
    return np.polynomial.polynomial.polyval(np.asarray(x, dtype=float), np.asarray(coeffs, dtype=float))


def poly_der(coeffs, order: int = 1) -> np.ndarray:
    return np.polynomial.polynomial.polyder(np.asarray(coeffs, dtype=float), order)


def _poly_closure(coeffs):
    """Specialised evaluator for low-degree polynomials (hot solver path)."""
    c = np.trim_zeros(np.asarray(coeffs, dtype=float), "b")
    if c.size == 0:
        return lambda x: 0.0 * np.asarray(x, dtype=float)
    if c.size == 1:
        a0 = float(c[0])
        return lambda x: a0 + 0.0 * np.asarray(x, dtype=float)
    if c.size == 2:
        a0, a1 = (float(v) for v in c)
        return lambda x: a0 + a1 * np.asarray(x, dtype=float)
    if c.size == 3:
        a0, a1, a2 = (float(v) for v in c)

        def quad(x):
            xv = np.asarray(x, dtype=float)
            return (a2 * xv + a1) * xv + a0

        return quad
    return lambda x: poly_val(c, x)


@dataclass(frozen=True)
class MeanPoly2:
    """Polynomial in the pair of means (m1, m2), total degree <= 2.

    Coefficient order: 1, m1, m2, m1^2, m1*m2, m2^2.
    """

    coeffs: tuple

    def __post_init__(self):
        c = tuple(float(v) for v in self.coeffs)
        if len(c) < 6:
            c = c + (0.0,) * (6 - len(c))
        if len(c) != 6:
            raise ModelError(f"MeanPoly2 takes at most 6 coefficients, got {len(c)}")
        object.__setattr__(self, "coeffs", c)

    def __call__(self, m1, m2):
        c = self.coeffs
        return c[0] + c[1] * m1 + c[2] * m2 + c[3] * m1 * m1 + c[4] * m1 * m2 + c[5] * m2 * m2

    def d_m1(self, m1, m2):
        c = self.coeffs
        return c[1] + 2.0 * c[3] * m1 + c[4] * m2

    def d_m2(self, m1, m2):
        c = self.coeffs
        return c[2] + c[4] * m1 + 2.0 * c[5] * m2

    @classmethod
    def zero(cls) -> "MeanPoly2":
        return cls((0.0,))

    @classmethod
    def linear(cls, const: float = 0.0, m1: float = 0.0, m2: float = 0.0) -> "MeanPoly2":
        return cls((const, m1, m2))


@dataclass(frozen=True)
class QuadraticTerminalCost:
    """g(x, mu) = (xx/2) x^2 + xm * x * E_mu[xi] + x_lin * x + m2 * E_mu[xi]^2."""

    xx: float = 0.0
    xm: float = 0.0
    x_lin: float = 0.0
    m2: float = 0.0

    def __call__(self, x, mu: EmpiricalMeasure):
        xv = np.asarray(x, dtype=float)
        m1 = mu.mean()
        return 0.5 * self.xx * xv**2 + self.xm * xv * m1 + self.x_lin * xv + self.m2 * m1 * m1

    def dx(self, x, mu: EmpiricalMeasure):
        return self.xx * np.asarray(x, dtype=float) + self.xm * mu.mean() + self.x_lin

    def dxx(self) -> float:
        return self.xx

    def dxmu(self) -> float:
        """Cross derivative in (x, measure); constant for this family."""
        return self.xm


@dataclass(frozen=True)
class HatDerivatives:
    """Derivative record of the reduced Hamiltonian at one evaluation point."""

    h_p: float
    h_pp: float
    h_xx: float
    h_xp: float
    h_xrho1: float
    h_xrho2: float
    h_prho1: float
    h_prho2: float


@dataclass(frozen=True)
class HatTable:
    """Vectorised hat-derivatives over the atoms of one (state, momentum) law.

    Per-atom arrays have shape (n,); the measure-derivative entries are
    (n, n) with [i, j] = derivative at base atom i, support atom j.
    """

    h_p: np.ndarray
    h_pp: np.ndarray
    h_xx: np.ndarray
    h_xp: np.ndarray
    h_xrho1: np.ndarray
    h_xrho2: np.ndarray
    h_prho1: np.ndarray
    h_prho2: np.ndarray


@dataclass
class ModelSpec:
    """A mean field game of controls problem instance.

    The point arguments of ``b_eval``, ``f_eval``, ``g_eval`` and ``phi_eval``
    broadcast over numpy arrays; measure arguments are fixed cloud objects.
    Closed-form hooks are optional; generic fallbacks (golden-section
    minimisation, finite differences) cover their absence.
    """

    b_eval: Callable
    f_eval: Callable
    g_eval: Callable
    phi_eval: Callable | None = None
    beta: float = 0.0
    closed_form_tag: str | None = None
    params: dict = field(default_factory=dict)
    a_max: float = 12.0
    h_closed: Callable | None = None
    hat_closed: Callable | None = None      # (x, p, rho, x_t, p_t) -> HatDerivatives
    fixed_point_closed: Callable | None = None  # rho -> JointEmpiricalMeasure
    terminal: QuadraticTerminalCost | None = None


# ---------------------------------------------------------------------------
# core operations
# ---------------------------------------------------------------------------

def _golden_section_min(fun, lo: float, hi: float, iters: int = 90):
    """Vectorised golden-section minimisation of a -> fun(a) on [lo, hi]."""
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    a = lo
    b = hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc = fun(c)
    fd = fun(d)
    a = np.full_like(np.asarray(fc, dtype=float), lo)
    b = np.full_like(a, hi)
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc = fun(c)
    fd = fun(d)
    for _ in range(iters):
        take_left = fc < fd
        b = np.where(take_left, d, b)
        a = np.where(take_left, a, c)
        c = b - invphi * (b - a)
        d = a + invphi * (b - a)
        fc = fun(c)
        fd = fun(d)
    return 0.5 * (a + b)


def minimizer_phi(model: ModelSpec, x, p, nu: JointEmpiricalMeasure):
    """Unique minimiser a* of a -> p*b(x,a,nu) + f(x,a,nu)."""
    if model.phi_eval is not None:
        a_star = np.asarray(model.phi_eval(x, p, nu), dtype=float)
        if not np.all(np.isfinite(a_star)):
            raise ModelError("closed-form minimiser returned non-finite controls")
        return a_star

    xb, pb = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(p, dtype=float))

    def objective(a):
        return pb * model.b_eval(xb, a, nu) + model.f_eval(xb, a, nu)

    a_star = _golden_section_min(objective, -model.a_max, model.a_max)
    if not np.all(np.isfinite(a_star)):
        raise ModelError("numeric minimisation produced non-finite controls")
    edge = 1e-6 * 2.0 * model.a_max
    if np.any(a_star < -model.a_max + edge) or np.any(a_star > model.a_max - edge):
        raise ModelError(
            "minimiser landed on the control bracket boundary; the model is "
            f"unbounded or a_max={model.a_max} is too small"
        )
    return a_star


def hamiltonian(model: ModelSpec, x, p, nu: JointEmpiricalMeasure):
    """H(x, p, nu) = inf_a [p*b(x,a,nu) + f(x,a,nu)], vectorised over x and p."""
    if nu.n < 1:
        raise ModelError("Hamiltonian needs a nonempty interaction law")
    if model.h_closed is not None:
        # closed forms are finite whenever their inputs are; the solver checks
        # the value grid level by level
        return model.h_closed(x, p, nu)
    a_star = minimizer_phi(model, x, p, nu)
    value = np.asarray(p, dtype=float) * model.b_eval(x, a_star, nu) + model.f_eval(x, a_star, nu)
    if not np.all(np.isfinite(value)):
        raise ModelError("Hamiltonian evaluation is non-finite")
    return value


def hamiltonian_dp(model: ModelSpec, x, p, nu: JointEmpiricalMeasure, step: float = FD_STEP_POINT):
    """dH/dp by central differences, vectorised."""
    pv = np.asarray(p, dtype=float)
    h = step * np.maximum(1.0, np.abs(pv))
    return (hamiltonian(model, x, pv + h, nu) - hamiltonian(model, x, pv - h, nu)) / (2.0 * h)


def fixed_point_phi(model: ModelSpec, rho: JointEmpiricalMeasure) -> JointEmpiricalMeasure:
    """Consistent (state, control) law Phi(rho) for a (state, momentum) law rho."""
    if model.fixed_point_closed is None:
        raise ModelError(
            "model does not support the control-law fixed point; use a built-in "
            "family or supply fixed_point_closed"
        )
    nu = model.fixed_point_closed(rho)
    if nu.states is not rho.states and not np.array_equal(nu.states, rho.states):
        raise ModelError("fixed point must preserve the state marginal atoms")
    return nu


def fixed_point_residual(model: ModelSpec, rho: JointEmpiricalMeasure,
                         nu: JointEmpiricalMeasure) -> float:
    """Distance between nu and its image under the consistency map at momenta rho.

    Applies a -> phi(xi, eta, nu) atomwise and measures the control-marginal
    flow distance to nu itself; zero at the fixed point.
    """
    controls = minimizer_phi(model, rho.x, rho.a, nu)
    image = JointEmpiricalMeasure(rho.states, np.asarray(controls)[:, None], rho.weights)
    return flow_distance(image.second_marginal(), nu.second_marginal())


def _contraction_fixed_point(psi, m0: float, tol: float = 1e-12, max_iter: int = 200,
                             damping: float = 1.0) -> float:
    m = float(m0)
    residual = np.inf
    for iteration in range(max_iter):
        value = float(psi(m))
        residual = abs(value - m)
        if not np.isfinite(value):
            raise FixedPointError("scalar fixed-point iteration diverged", iteration, residual)
        if residual <= tol:
            return value
        m = m + damping * (value - m)
    raise FixedPointError(
        f"scalar fixed-point iteration did not reach tol={tol} after {max_iter} "
        "iterations; contraction hypothesis violated",
        max_iter,
        residual,
    )


def hat_hamiltonian(model: ModelSpec, x, p, rho: JointEmpiricalMeasure):
    """Reduced Hamiltonian Hhat(x, p, rho) = H(x, p, Phi(rho))."""
    return hamiltonian(model, x, p, fixed_point_phi(model, rho))


def _perturbed_joint(rho: JointEmpiricalMeasure, j: int, delta: float, component: int) -> JointEmpiricalMeasure:
    states = rho.states.copy()
    seconds = rho.seconds.copy()
    if component == 0:
        states[j, 0] += delta
    else:
        seconds[j, 0] += delta
    return JointEmpiricalMeasure(states, seconds, rho.weights)


def _support_index(rho: JointEmpiricalMeasure, x_t: float, p_t: float) -> int:
    match = np.flatnonzero(
        (np.abs(rho.x - x_t) <= 1e-9 * np.maximum(1.0, np.abs(x_t)))
        & (np.abs(rho.a - p_t) <= 1e-9 * np.maximum(1.0, np.abs(p_t)))
    )
    if match.size == 0:
        raise ModelError("measure-derivative evaluation point is not a support atom of rho")
    return int(match[0])


def _hat_derivatives_fd(model: ModelSpec, x: float, p: float, rho: JointEmpiricalMeasure,
                        x_t: float, p_t: float) -> HatDerivatives:
    if not rho.is_uniform():
        raise ModelError("finite-difference measure derivatives need uniform weights")
    j = _support_index(rho, x_t, p_t)
    n = rho.n

    def hh(xx, pp, rr):
        return float(hat_hamiltonian(model, xx, pp, rr))

    hx = FD_STEP_SECOND * max(1.0, abs(x))
    hp = FD_STEP_SECOND * max(1.0, abs(p))
    h1 = FD_STEP_POINT * max(1.0, abs(p))
    e = FD_STEP_PARTICLE

    base = hh(x, p, rho)
    h_p = (hh(x, p + h1, rho) - hh(x, p - h1, rho)) / (2 * h1)
    h_pp = (hh(x, p + hp, rho) - 2 * base + hh(x, p - hp, rho)) / hp**2
    h_xx = (hh(x + hx, p, rho) - 2 * base + hh(x - hx, p, rho)) / hx**2
    h_xp = (
        hh(x + hx, p + hp, rho) - hh(x + hx, p - hp, rho)
        - hh(x - hx, p + hp, rho) + hh(x - hx, p - hp, rho)
    ) / (4 * hx * hp)

    out = {}
    for name, point_step, comp in (
        ("h_xrho1", hx, 0), ("h_xrho2", hx, 1), ("h_prho1", hp, 0), ("h_prho2", hp, 1),
    ):
        in_p = name.startswith("h_p")
        rp = _perturbed_joint(rho, j, +e, comp)
        rm = _perturbed_joint(rho, j, -e, comp)
        if in_p:
            cross = (
                hh(x, p + point_step, rp) - hh(x, p - point_step, rp)
                - hh(x, p + point_step, rm) + hh(x, p - point_step, rm)
            )
        else:
            cross = (
                hh(x + point_step, p, rp) - hh(x - point_step, p, rp)
                - hh(x + point_step, p, rm) + hh(x - point_step, p, rm)
            )
        out[name] = n * cross / (4 * point_step * e)

    if not all(np.isfinite(v) for v in out.values()):
        raise ModelError("finite-difference hat derivatives are non-finite")
    return HatDerivatives(h_p=h_p, h_pp=h_pp, h_xx=h_xx, h_xp=h_xp, **out)


def hat_derivatives(model: ModelSpec, x: float, p: float, rho: JointEmpiricalMeasure,
                    x_t: float, p_t: float) -> HatDerivatives:
    """Derivatives of Hhat at (x, p, rho), measure entries at support atom (x_t, p_t).

    Closed forms for the built-in families; otherwise central finite
    differences, with single-particle perturbations carrying the factor N of
    the empirical projection of measure derivatives.
    """
    if model.hat_closed is not None:
        return model.hat_closed(float(x), float(p), rho, float(x_t), float(p_t))
    return _hat_derivatives_fd(model, float(x), float(p), rho, float(x_t), float(p_t))


def hat_derivative_table(model: ModelSpec, rho: JointEmpiricalMeasure,
                         xs=None, ps=None) -> HatTable:
    """Hat derivatives over every (base atom, support atom) pair of rho.

    ``xs``/``ps`` override the base evaluation points (defaults: the atoms of
    rho itself, which is the convention used by the quadratic-form conditions
    and the variational dynamics).
    """
    xs = rho.x if xs is None else np.asarray(xs, dtype=float)
    ps = rho.a if ps is None else np.asarray(ps, dtype=float)
    n_base = xs.shape[0]
    n_sup = rho.n
    if model.hat_closed is not None:
        # Built-in families have measure derivatives that depend only on the
        # base point (through x, p) and the moments of rho, not on the
        # individual support atom; evaluate once per base point and broadcast.
        recs = [model.hat_closed(float(xs[i]), float(ps[i]), rho, float(rho.x[0]), float(rho.a[0]))
                for i in range(n_base)]
        def col(name):
            return np.array([getattr(r, name) for r in recs])
        ones = np.ones((n_base, n_sup))
        return HatTable(
            h_p=col("h_p"), h_pp=col("h_pp"), h_xx=col("h_xx"), h_xp=col("h_xp"),
            h_xrho1=col("h_xrho1")[:, None] * ones,
            h_xrho2=col("h_xrho2")[:, None] * ones,
            h_prho1=col("h_prho1")[:, None] * ones,
            h_prho2=col("h_prho2")[:, None] * ones,
        )
    point = np.empty((n_base, 4))
    xr1 = np.empty((n_base, n_sup))
    xr2 = np.empty_like(xr1)
    pr1 = np.empty_like(xr1)
    pr2 = np.empty_like(xr1)
    for i in range(n_base):
        for j in range(n_sup):
            rec = _hat_derivatives_fd(model, float(xs[i]), float(ps[i]), rho,
                                      float(rho.x[j]), float(rho.a[j]))
            if j == 0:
                point[i] = (rec.h_p, rec.h_pp, rec.h_xx, rec.h_xp)
            xr1[i, j] = rec.h_xrho1
            xr2[i, j] = rec.h_xrho2
            pr1[i, j] = rec.h_prho1
            pr2[i, j] = rec.h_prho2
    return HatTable(
        h_p=point[:, 0], h_pp=point[:, 1], h_xx=point[:, 2], h_xp=point[:, 3],
        h_xrho1=xr1, h_xrho2=xr2, h_prho1=pr1, h_prho2=pr2,
    )


def verify_envelope_identities(model: ModelSpec, sample_count: int = 200, seed: int = 0,
                               tol: float = 1e-6, fd_step: float = FD_STEP_POINT,
                               cloud_size: int = 8) -> ConditionReport:
    """Check b(x, phi, nu) = dH/dp and f(x, phi, nu) = H - p*dH/dp on random triples."""
    rng = np.random.default_rng(seed)
    worst = np.inf
    worst_residual = 0.0
    witness = None
    for k in range(sample_count):
        x = float(rng.normal(0.0, 2.0))
        p = float(rng.normal(0.0, 2.0))
        nu = JointEmpiricalMeasure(
            rng.normal(0.0, 1.0, (cloud_size, 1)),
            rng.normal(0.0, 1.0, (cloud_size, 1)),
            np.full(cloud_size, 1.0 / cloud_size),
        )
        a_star = float(minimizer_phi(model, x, p, nu))
        h_val = float(hamiltonian(model, x, p, nu))
        hp = float(hamiltonian_dp(model, x, p, nu, step=fd_step))
        r_drift = abs(float(model.b_eval(x, a_star, nu)) - hp)
        r_cost = abs(float(model.f_eval(x, a_star, nu)) - (h_val - p * hp))
        residual = max(r_drift, r_cost)
        margin = tol - residual
        if margin < worst:
            worst = margin
            worst_residual = residual
            witness = {"sample": k, "x": x, "p": p, "residual": residual}
    passed = worst >= 0.0
    return ConditionReport(
        condition="envelope_identities",
        n_samples=sample_count,
        worst_margin=float(worst),
        passed=passed,
        tolerance=tol,
        witness=None if passed else witness,
        details={"max_residual": worst_residual, "fd_step": fd_step},
    )


# ---------------------------------------------------------------------------
# built-in family: separable drift/cost
# ---------------------------------------------------------------------------

def separable_model(f1_x=(0.0,), q1: float = 0.0,
                    terminal: QuadraticTerminalCost | None = None,
                    a_max: float = 12.0) -> ModelSpec:
    """b = a, f = a^2/2 + f1(x) + q1*x*E_mu[xi]; the control law decouples.

    The minimiser phi = -p depends on nu only through its first marginal, so
    the fixed point is the atomwise map (xi, eta) -> (xi, -eta).
    """
    f1c = np.asarray(f1_x, dtype=float)
    f1_fn = _poly_closure(f1c)
    terminal = terminal if terminal is not None else QuadraticTerminalCost()

    def b_eval(x, a, nu):
        return np.asarray(a, dtype=float) + 0.0 * np.asarray(x, dtype=float)

    def f_eval(x, a, nu):
        xv = np.asarray(x, dtype=float)
        av = np.asarray(a, dtype=float)
        return 0.5 * av**2 + f1_fn(xv) + q1 * xv * nu.state_mean()

    def phi_eval(x, p, nu):
        return -np.asarray(p, dtype=float) + 0.0 * np.asarray(x, dtype=float)

    def h_closed(x, p, nu):
        xv = np.asarray(x, dtype=float)
        pv = np.asarray(p, dtype=float)
        return -0.5 * pv**2 + f1_fn(xv) + q1 * xv * nu.state_mean()

    def fixed_point_closed(rho):
        return _trusted_joint(rho.states, -rho.seconds, rho.weights)

    f1_dd = poly_der(f1c, 2) if f1c.size > 2 else np.zeros(1)

    def hat_closed(x, p, rho, x_t, p_t):
        return HatDerivatives(
            h_p=-p, h_pp=-1.0, h_xx=float(poly_val(f1_dd, x)), h_xp=0.0,
            h_xrho1=q1, h_xrho2=0.0, h_prho1=0.0, h_prho2=0.0,
        )

    params = {"q1": q1, "f1_x": tuple(f1c.tolist())}
    return ModelSpec(
        b_eval=b_eval, f_eval=f_eval, g_eval=terminal, phi_eval=phi_eval,
        closed_form_tag="separable", params=params, a_max=a_max,
        h_closed=h_closed, hat_closed=hat_closed, fixed_point_closed=fixed_point_closed,
        terminal=terminal,
    )


# ---------------------------------------------------------------------------
# built-in family: mean-field coupling through the control law (d = 1)
# ---------------------------------------------------------------------------

def meanfield_model(b0=(1.0, 0.0, 0.0), f0=(0.0, 0.0, 0.0, 0.0),
                    b1_x=(0.0,), b1_mean: MeanPoly2 | None = None,
                    f1_x=(0.0,), q1: float = 0.0, q2: float = 0.0,
                    contraction_eps: float = 1e-3,
                    f0_override: Callable | None = None,
                    terminal: QuadraticTerminalCost | None = None,
                    a_max: float = 12.0) -> ModelSpec:
    """Control-averaged coupling family.

    b(x, a, nu) = -b0(x, mu) a + b1(x, nu),
    f(x, a, nu) = a^2/2 - a f0(x, mu, E_nu[alpha]) + f1(x, nu),

    with b0 = b0_c + b0_x x + b0_m E_mu[xi], f0 = f0_c + f0_x x
    + f0_mu E_mu[xi] + f0_m m, b1 = poly(x) + B(E_nu[xi], E_nu[alpha]) and
    f1 = poly(x) + x (q1 E_nu[xi] + q2 E_nu[alpha]).  The minimiser is
    phi = f0 + p b0 and the control-law fixed point reduces to a scalar
    contraction in m = E_nu[alpha], which requires d f0/dm <= 1 - eps.

    ``f0_override(x, mu_mean, m)`` replaces the affine f0; the contraction
    bound is then sampled rather than exact, and a violation surfaces as a
    FixedPointError at fixed-point time.
    """
    b0_c, b0_x, b0_m = (float(v) for v in b0)
    f0_c, f0_x, f0_mu, f0_m = (float(v) for v in f0)
    if f0_override is None and f0_m > 1.0 - contraction_eps:
        raise ModelError(
            f"contraction bound violated: df0/dm = {f0_m} > 1 - {contraction_eps}"
        )
    b1c = np.asarray(b1_x, dtype=float)
    f1c = np.asarray(f1_x, dtype=float)
    bmean = b1_mean if b1_mean is not None else MeanPoly2.zero()
    terminal = terminal if terminal is not None else QuadraticTerminalCost()

    def b0_fn(x, mu_mean):
        return b0_c + b0_x * np.asarray(x, dtype=float) + b0_m * mu_mean

    def f0_fn(x, mu_mean, m):
        if f0_override is not None:
            return f0_override(x, mu_mean, m)
        return f0_c + f0_x * np.asarray(x, dtype=float) + f0_mu * mu_mean + f0_m * m

    def b1_fn(x, nu):
        return poly_val(b1c, x) + bmean(nu.state_mean(), nu.second_mean())

    def f1_fn(x, nu):
        xv = np.asarray(x, dtype=float)
        return poly_val(f1c, xv) + xv * (q1 * nu.state_mean() + q2 * nu.second_mean())

    def b_eval(x, a, nu):
        return -b0_fn(x, nu.state_mean()) * np.asarray(a, dtype=float) + b1_fn(x, nu)

    def f_eval(x, a, nu):
        av = np.asarray(a, dtype=float)
        return 0.5 * av**2 - av * f0_fn(x, nu.state_mean(), nu.second_mean()) + f1_fn(x, nu)

    def phi_eval(x, p, nu):
        return f0_fn(x, nu.state_mean(), nu.second_mean()) + np.asarray(p, dtype=float) * b0_fn(x, nu.state_mean())

    def h_closed(x, p, nu):
        a_star = phi_eval(x, p, nu)
        return -0.5 * a_star**2 + np.asarray(p, dtype=float) * b1_fn(x, nu) + f1_fn(x, nu)

    def fixed_point_closed(rho):
        mu_mean = rho.state_mean()
        xi = rho.x
        eta = rho.a
        w = rho.weights

        def psi(m):
            return float(w @ (f0_fn(xi, mu_mean, m) + b0_fn(xi, mu_mean) * eta))

        damping = 1.0 if f0_m >= 0.0 else 1.0 / (1.0 - f0_m)
        m_star = _contraction_fixed_point(psi, m0=float(w @ eta), damping=damping)
        controls = f0_fn(xi, mu_mean, m_star) + b0_fn(xi, mu_mean) * eta
        return JointEmpiricalMeasure(rho.states, np.asarray(controls)[:, None], rho.weights)

    params = {
        "b0": (b0_c, b0_x, b0_m), "f0": (f0_c, f0_x, f0_mu, f0_m),
        "b1_x": tuple(b1c.tolist()), "b1_mean": bmean.coeffs,
        "f1_x": tuple(f1c.tolist()), "q1": q1, "q2": q2,
    }
    return ModelSpec(
        b_eval=b_eval, f_eval=f_eval, g_eval=terminal, phi_eval=phi_eval,
        closed_form_tag="meanfield_1d", params=params, a_max=a_max,
        h_closed=h_closed, fixed_point_closed=fixed_point_closed, terminal=terminal,
    )


# ---------------------------------------------------------------------------
# built-in closed-form families (special cases of the control-averaged family)
# ---------------------------------------------------------------------------

def _control_coupled_model(c: float, tag: str, drift_x, drift_x_d1, drift_x_d2,
                           bmean: MeanPoly2, fx, fx_d2, q1: float, q2: float,
                           params: dict, terminal: QuadraticTerminalCost,
                           a_max: float) -> ModelSpec:
    """Shared engine for the families with b = -a + ..., f = a^2/2 - c a E[alpha] + ...

    ``drift_x``/``fx`` are the pure-x parts of the drift and cost,
    ``bmean(m1, m2)`` the mean coupling of the drift, and (q1, q2) the
    coefficients of the x * (mean state, mean control) cost couplings.
    The fixed point has the explicit form alpha = eta + chat * E[eta] with
    chat = c/(1-c), cbar = 1/(1-c).
    """
    if not 0.0 <= c < 1.0:
        raise ModelError(f"control-averaging weight must satisfy 0 <= c < 1, got {c}")
    chat = c / (1.0 - c)
    cbar = 1.0 / (1.0 - c)

    def b_eval(x, a, nu):
        return -np.asarray(a, dtype=float) + drift_x(x) + bmean(nu.state_mean(), nu.second_mean())

    def f_eval(x, a, nu):
        xv = np.asarray(x, dtype=float)
        av = np.asarray(a, dtype=float)
        m1 = nu.state_mean()
        m2 = nu.second_mean()
        return 0.5 * av**2 - c * av * m2 + fx(xv) + xv * (q1 * m1 + q2 * m2)

    def phi_eval(x, p, nu):
        return np.asarray(p, dtype=float) + c * nu.second_mean() + 0.0 * np.asarray(x, dtype=float)

    def h_closed(x, p, nu):
        xv = np.asarray(x, dtype=float)
        pv = np.asarray(p, dtype=float)
        m1 = nu.state_mean()
        m2 = nu.second_mean()
        return (-0.5 * (c * m2 + pv) ** 2 + pv * (drift_x(xv) + bmean(m1, m2))
                + fx(xv) + xv * (q1 * m1 + q2 * m2))

    def fixed_point_closed(rho):
        shift = chat * rho.second_mean()
        return _trusted_joint(rho.states, rho.seconds + shift, rho.weights)

    def hat_closed(x, p, rho, x_t, p_t):
        m1 = rho.state_mean()
        m2 = rho.second_mean()
        return HatDerivatives(
            h_p=float(-(chat * m2 + p) + drift_x(x) + bmean(m1, cbar * m2)),
            h_pp=-1.0,
            h_xx=float(p * drift_x_d2(x) + fx_d2(x)),
            h_xp=float(drift_x_d1(x)),
            h_xrho1=q1,
            h_xrho2=q2 * cbar,
            h_prho1=float(bmean.d_m1(m1, cbar * m2)),
            h_prho2=float(cbar * bmean.d_m2(m1, cbar * m2) - chat),
        )

    params = dict(params)
    params.update({"c": c, "chat": chat, "cbar": cbar, "q1": q1, "q2": q2,
                   "b1_mean": bmean.coeffs})
    return ModelSpec(
        b_eval=b_eval, f_eval=f_eval, g_eval=terminal, phi_eval=phi_eval,
        closed_form_tag=tag, params=params, a_max=a_max,
        h_closed=h_closed, hat_closed=hat_closed, fixed_point_closed=fixed_point_closed,
        terminal=terminal,
    )


def ll_example_model(c1: float, c2: float, c3: float,
                     b1: MeanPoly2 | None = None, b2_x=(0.0,), f1_x=(0.0,),
                     terminal: QuadraticTerminalCost | None = None,
                     a_max: float = 12.0) -> ModelSpec:
    """Family with b = -a + b1(E[xi], E[alpha]) + b2(x) and
    f = a^2/2 - c1 a E[alpha] + c2 x E[xi] + c3 x E[alpha] + f1(x).

    c1 = 0 is admitted (the couplings degenerate gracefully); it gives the
    uncoupled linear-quadratic instance used as the solver oracle.
    """
    b2c = np.asarray(b2_x, dtype=float)
    f1c = np.asarray(f1_x, dtype=float)
    b2_d1 = poly_der(b2c, 1) if b2c.size > 1 else np.zeros(1)
    b2_d2 = poly_der(b2c, 2) if b2c.size > 2 else np.zeros(1)
    f1_d2 = poly_der(f1c, 2) if f1c.size > 2 else np.zeros(1)
    bmean = b1 if b1 is not None else MeanPoly2.zero()
    terminal = terminal if terminal is not None else QuadraticTerminalCost()
    params = {"c1": c1, "c2": c2, "c3": c3, "b2_x": tuple(b2c.tolist()),
              "f1_x": tuple(f1c.tolist())}
    return _control_coupled_model(
        c=c1, tag="ll_example",
        drift_x=_poly_closure(b2c),
        drift_x_d1=_poly_closure(b2_d1),
        drift_x_d2=_poly_closure(b2_d2),
        bmean=bmean,
        fx=_poly_closure(f1c),
        fx_d2=_poly_closure(f1_d2),
        q1=c2, q2=c3, params=params, terminal=terminal, a_max=a_max,
    )


def disp_example_model(c: float, b1: MeanPoly2 | None = None, f1_x=(0.0,),
                       q1: float = 0.0, q2: float = 0.0,
                       terminal: QuadraticTerminalCost | None = None,
                       a_max: float = 12.0) -> ModelSpec:
    """Family with b = -a + b1(E[xi], E[alpha]) and
    f = a^2/2 - c a E[alpha] + f1(x) + x (q1 E[xi] + q2 E[alpha])."""
    f1c = np.asarray(f1_x, dtype=float)
    f1_d2 = poly_der(f1c, 2) if f1c.size > 2 else np.zeros(1)
    bmean = b1 if b1 is not None else MeanPoly2.zero()
    terminal = terminal if terminal is not None else QuadraticTerminalCost()
    zero = lambda x: 0.0 * np.asarray(x, dtype=float)
    params = {"f1_x": tuple(f1c.tolist())}
    return _control_coupled_model(
        c=c, tag="disp_example",
        drift_x=zero, drift_x_d1=zero, drift_x_d2=zero,
        bmean=bmean,
        fx=_poly_closure(f1c),
        fx_d2=_poly_closure(f1_d2),
        q1=q1, q2=q2, params=params, terminal=terminal, a_max=a_max,
    )


def anti_example_model(c: float, gamma: float, l0: float,
                       b1: MeanPoly2 | None = None, f1_x=(0.0,),
                       q1: float = 0.0, q2: float = 0.0,
                       terminal: QuadraticTerminalCost | None = None,
                       a_max: float = 12.0) -> ModelSpec:
    """Family with b = -a - l0 x + b1(E[xi], E[alpha]) and
    f = a^2/2 - c a E[alpha] - (gamma l0 / 2) x^2 + f1(x) + x (q1 E[xi] + q2 E[alpha])."""
    if gamma <= 0 or l0 <= 0:
        raise ModelError("anti-monotone family needs gamma > 0 and l0 > 0")
    f1c = np.asarray(f1_x, dtype=float)
    f1_d2 = poly_der(f1c, 2) if f1c.size > 2 else np.zeros(1)
    bmean = b1 if b1 is not None else MeanPoly2.zero()
    terminal = terminal if terminal is not None else QuadraticTerminalCost()
    params = {"gamma": gamma, "l0": l0, "f1_x": tuple(f1c.tolist())}
    f1_fn = _poly_closure(f1c)
    f1_dd_fn = _poly_closure(f1_d2)
    return _control_coupled_model(
        c=c, tag="anti_example",
        drift_x=lambda x: -l0 * np.asarray(x, dtype=float),
        drift_x_d1=lambda x: -l0 + 0.0 * np.asarray(x, dtype=float),
        drift_x_d2=lambda x: 0.0 * np.asarray(x, dtype=float),
        bmean=bmean,
        fx=lambda x: -0.5 * gamma * l0 * np.asarray(x, dtype=float) ** 2 + f1_fn(x),
        fx_d2=lambda x: -gamma * l0 + f1_dd_fn(x),
        q1=q1, q2=q2, params=params, terminal=terminal, a_max=a_max,
    )
