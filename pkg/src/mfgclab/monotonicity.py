"""Monotonicity functionals evaluated on a value function through the solver.

Three quadratic functionals of a test pair (xi, eta) — the Lasry-Lions form,
the displacement lambda-form, and the anti-monotone form — are evaluated on
V(t, ., mu) for sampled time slices and direction batteries.  The measure
derivative of the value gradient is obtained by directional particle
perturbations and re-solves; access to V is abstracted behind an object with
a ``field(t, mu) -> ValueField`` method whose first slice is V(t, ., mu).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .calculus import value_measure_gradient
from .measures import EmpiricalMeasure
from .reports import MonotonicityReport


class MonotonicityError(ValueError):
    pass


@dataclass(frozen=True)
class TestDirection:
    """A test pair (xi, eta): eta_i is attached to atom x_i, so eta is a
    function of xi by construction."""

    __test__ = False  # not a pytest class despite the name

    xi: np.ndarray
    eta: np.ndarray

    def __post_init__(self):
        xi = np.asarray(self.xi, dtype=float).reshape(-1)
        eta = np.asarray(self.eta, dtype=float).reshape(-1)
        if xi.shape != eta.shape:
            raise MonotonicityError("xi and eta must have matching lengths")
        if not (np.all(np.isfinite(xi)) and np.all(np.isfinite(eta))):
            raise MonotonicityError("test direction has non-finite entries")
        object.__setattr__(self, "xi", xi)
        object.__setattr__(self, "eta", eta)

    @property
    def n(self) -> int:
        return self.xi.shape[0]


@dataclass(frozen=True)
class LambdaVec:
    """Weight vector of the anti-monotone functional; the admissible set is
    l0 > 0, l1 real, l2 > 0, l3 >= 0."""

    l0: float
    l1: float
    l2: float
    l3: float

    def __post_init__(self):
        if not (self.l0 > 0 and self.l2 > 0 and self.l3 >= 0):
            raise MonotonicityError(
                f"lambda vector ({self.l0}, {self.l1}, {self.l2}, {self.l3}) "
                "violates l0 > 0, l2 > 0, l3 >= 0"
            )


def _check_direction(mu: EmpiricalMeasure, direction: TestDirection) -> None:
    if direction.n != mu.n:
        raise MonotonicityError("direction does not match the particle cloud")
    if not np.array_equal(direction.xi, mu.x):
        raise MonotonicityError("direction atoms must coincide with the cloud atoms")


def _ux_solver(access, t: float):
    def solve(_t, mu):
        fld = access.field(t, mu)
        return lambda xq: fld.ux_at(0, xq)

    return solve


def gradient_direction_derivative(access, t: float, mu: EmpiricalMeasure,
                                  direction: TestDirection, fd_eps: float = 1e-3) -> np.ndarray:
    """D_i = (1/N) sum_j d_x d_mu V(t, x_i, mu, x_j) eta_j at every atom."""
    _check_direction(mu, direction)
    return value_measure_gradient(_ux_solver(access, t), mu, direction.eta,
                                  direction.xi, t, fd_eps)


def mon_ll(access, t: float, mu: EmpiricalMeasure, direction: TestDirection,
           fd_eps: float = 1e-3) -> float:
    """Lasry-Lions form: the empirical mean of <eta_i, D_i>."""
    d_vals = gradient_direction_derivative(access, t, mu, direction, fd_eps)
    return float(np.mean(direction.eta * d_vals))


def mon_disp(access, t: float, mu: EmpiricalMeasure, direction: TestDirection,
             lam: float, fd_eps: float = 1e-3) -> float:
    """Displacement lambda-form: Lasry-Lions term plus <Vxx eta, eta> + lam |eta|^2."""
    if lam < 0:
        raise MonotonicityError("displacement parameter lambda must be nonnegative")
    _check_direction(mu, direction)
    base = access.field(t, mu)
    vxx = base.uxx_at(0, direction.xi)
    ll_term = mon_ll(access, t, mu, direction, fd_eps)
    return float(ll_term + np.mean(vxx * direction.eta**2) + lam * np.mean(direction.eta**2))


def mon_anti(access, t: float, mu: EmpiricalMeasure, direction: TestDirection,
             lvec: LambdaVec, fd_eps: float = 1e-3) -> float:
    """Anti-monotone form; the verdict direction is value <= tolerance."""
    _check_direction(mu, direction)
    base = access.field(t, mu)
    vxx = base.uxx_at(0, direction.xi)
    d_vals = gradient_direction_derivative(access, t, mu, direction, fd_eps)
    eta = direction.eta
    return float(np.mean(
        lvec.l0 * vxx * eta**2
        + lvec.l1 * d_vals * eta
        + (vxx * eta) ** 2
        + lvec.l2 * d_vals**2
        - lvec.l3 * eta**2
    ))


def mon_ll_difference_form(access, t: float, cloud1: EmpiricalMeasure,
                           cloud2: EmpiricalMeasure) -> float:
    """Four-value cross difference over a coupled pair of clouds.

    The clouds are coupled by index (same index = same sample); the value is
    the empirical mean of
    V(t, x1_i, mu1) + V(t, x2_i, mu2) - V(t, x1_i, mu2) - V(t, x2_i, mu1),
    a solver-level cross-check of mon_ll that needs no measure differencing.
    """
    if cloud1.n != cloud2.n:
        raise MonotonicityError("coupled clouds must have equal particle counts")
    f1 = access.field(t, cloud1)
    f2 = access.field(t, cloud2)
    x1 = cloud1.x
    x2 = cloud2.x
    return float(np.mean(
        f1.value_at(0, x1) + f2.value_at(0, x2)
        - f2.value_at(0, x1) - f1.value_at(0, x2)
    ))


def direction_battery(mu: EmpiricalMeasure, count: int = 12, seed: int = 0) -> list:
    """Deterministic direction battery over the atoms of mu.

    Polynomial feedbacks eta = psi(x) for psi in {1, x, x^2, x^3}, each in a
    mean-directed and a mean-free variant and with both signs, plus mean-free
    i.i.d. noise directions (the mean-free variant of the constant feedback).
    All directions are normalised to unit root-mean-square.
    """
    xs = mu.x
    rng = np.random.default_rng(seed)
    shapes = []
    ones = np.ones_like(xs)
    noise = rng.standard_normal(xs.shape[0])
    noise = noise - noise.mean()
    candidates = [ones, noise]
    for degree in (1, 2, 3):
        psi = xs**degree
        candidates.append(psi)
        candidates.append(psi - psi.mean())
    extra = 0
    while len(shapes) < count:
        for cand in candidates:
            rms = float(np.sqrt(np.mean(cand**2)))
            if rms < 1e-12:
                continue
            shapes.append(cand / rms)
            shapes.append(-cand / rms)
            if len(shapes) >= count:
                break
        else:
            extra += 1
            fresh = rng.standard_normal(xs.shape[0])
            candidates = [fresh - fresh.mean()]
            if extra > 8:
                raise MonotonicityError("could not assemble the direction battery")
            continue
    return [TestDirection(xs, eta) for eta in shapes[:count]]


def tolerance_scale(dt: float, dx: float, n_particles: int, fd_eps: float,
                    c: float) -> float:
    """Discretisation tolerance: every first-order error source enters linearly."""
    return float(c * (dt + dx**2 + 1.0 / np.sqrt(n_particles) + fd_eps**2))


def monotonicity_sweep(flow, access, kind: str, lam: float = 0.0,
                       lvec: LambdaVec | None = None, slices: int = 5,
                       battery_size: int = 12, fd_eps: float = 1e-3,
                       tolerance: float = 1e-6, seed: int = 0,
                       jobs: int = 1) -> MonotonicityReport:
    """Evaluate one functional over time slices x direction battery.

    Slice times are grid levels of the converged flow, with mu the flow's own
    state law there.  The verdict is min >= -tolerance for the Lasry-Lions
    and displacement kinds, and max <= tolerance for the anti-monotone kind.
    (t, direction) evaluations are independent; with jobs > 1 they run on a
    thread pool and are reduced in fixed index order.
    """
    if kind not in ("ll", "disp", "anti"):
        raise MonotonicityError(f"unknown monotonicity kind {kind!r}")
    if kind == "anti" and lvec is None:
        raise MonotonicityError("anti kind needs a lambda vector")
    grid = flow.grid
    levels = [int(round(q * grid.n_t / (slices - 1))) for q in range(slices)] \
        if slices > 1 else [0]

    def evaluate(k: int, d_idx: int, mu_k, direction) -> dict:
        if kind == "ll":
            value = mon_ll(access, float(grid.ts[k]), mu_k, direction, fd_eps)
        elif kind == "disp":
            value = mon_disp(access, float(grid.ts[k]), mu_k, direction, lam, fd_eps)
        else:
            value = mon_anti(access, float(grid.ts[k]), mu_k, direction, lvec, fd_eps)
        return {"t": float(grid.ts[k]), "level": k, "direction": d_idx, "value": value}

    tasks = []
    for k in sorted(set(levels)):
        mu_k = flow.mu(k)
        for d_idx, direction in enumerate(direction_battery(mu_k, battery_size, seed)):
            tasks.append((k, d_idx, mu_k, direction))
    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            samples = list(pool.map(lambda args: evaluate(*args), tasks))
    else:
        samples = [evaluate(*args) for args in tasks]
    values = np.array([s["value"] for s in samples])
    minimum = float(values.min())
    maximum = float(values.max())
    verdict = (maximum <= tolerance) if kind == "anti" else (minimum >= -tolerance)
    return MonotonicityReport(
        kind=kind,
        samples=samples,
        minimum=minimum,
        tolerance=tolerance,
        verdict=bool(verdict),
        metadata={
            "maximum": maximum,
            "lambda": lam,
            "lambda_vec": None if lvec is None else [lvec.l0, lvec.l1, lvec.l2, lvec.l3],
            "slices": slices,
            "battery_size": battery_size,
            "fd_eps": fd_eps,
            "seed": seed,
        },
    )


def uxx_floor(field, lam: float, x_window: tuple | None = None) -> float:
    """Smallest grid value of d^2 V/dx^2 + lambda; nonnegative when the
    displacement lambda-form is nonnegative over a dense direction family."""
    if x_window is None:
        vals = field.u_xx
    else:
        cols = (field.xs >= x_window[0]) & (field.xs <= x_window[1])
        vals = field.u_xx[:, cols]
    return float(np.min(vals) + lam)
