"""The twisted Monge-Ampère family ``(eps g + rho + i ddbar u)^n = e^u g^n`` and its sweeps.

Equations are solved in log-determinant form,

    F(u) = log det(eps g + rho + ddbar u) - log det g - u = 0,

by damped Newton iteration whose linearisation ``(Delta_{omega_eps} - 1)`` is
inverted with preconditioned GMRES.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as spla
from numpy.polynomial import polynomial as npoly

from . import grid
from .geometry import POSITIVITY_TOL, MetricField, PositivityError, log_det, min_eigenvalue, ricci_form
from .grid import Lattice

logger = logging.getLogger(__name__)

BIG_LIMIT = "BigLimit"
COLLAPSING = "Collapsing"
INDETERMINATE = "Indeterminate"


class NewtonStagnationError(RuntimeError):
    pass


class SolverError(RuntimeError):
    """A solve in a sweep failed; ``epsilon`` names the failing member of the family."""

    def __init__(self, message, epsilon=None):
        super().__init__(message)
        self.epsilon = epsilon


@dataclass(frozen=True)
class SolverOptions:
    tol: float = 1e-10
    max_newton: int = 50
    krylov_rtol: float = 1e-12
    krylov_restart: int = 40
    krylov_maxiter: int = 4
    min_step: float = 2.0**-30
    polish: bool = True


def default_schedule(count: int = 20, start: float = 1.0, ratio: float = 0.5) -> list[float]:
    return [start * ratio**k for k in range(count)]


# --- twists ----------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TwistField:
    """A closed real (1,1)-form ``rho`` playing the role of ``-Ric(omega)``.

    ``rho = lam * background + ddbar potential`` in both modes; the geometric
    mode has ``lam = 0`` and ``potential = log det g``.
    """

    lattice: Lattice
    rho: np.ndarray
    mode: str
    lam: float
    potential: np.ndarray
    background: np.ndarray

    def is_positive(self) -> bool:
        return bool(np.all(min_eigenvalue(self.rho) > POSITIVITY_TOL))


def geometric_twist(metric: MetricField) -> TwistField:
    lat = metric.lattice
    n = metric.n
    pot = log_det(metric.g)
    rho = -ricci_form(metric)
    return TwistField(lat, rho, "geometric", 0.0, pot, np.zeros((n, n)))


def synthetic_twist(metric: MetricField, lam: float, psi=None, background=None) -> TwistField:
    lat = metric.lattice
    n = metric.n
    bg = np.eye(n, dtype=np.complex128) if background is None else np.asarray(background, dtype=np.complex128)
    psi = np.zeros(lat.shape) if psi is None else grid.real_field(lat, psi)
    rho = lam * np.broadcast_to(bg, lat.shape + (n, n)) + grid.complex_hessian(lat, psi)
    return TwistField(lat, rho, "synthetic", float(lam), np.asarray(psi), bg)


def mixed_discriminant(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``D(A, B)`` for 2x2 stacks, so that ``det(sA + tB) = s^2 det A + 2 s t D + t^2 det B``."""
    return 0.5 * (a[..., 0, 0] * b[..., 1, 1] + a[..., 1, 1] * b[..., 0, 0]
                  - a[..., 0, 1] * b[..., 1, 0] - a[..., 1, 0] * b[..., 0, 1]).real


def intersection_numbers(metric: MetricField, twist: TwistField, representative: str = "class") -> list[float]:
    """``[omega]^{n-j} . [rho]^j`` for ``j = 0..n`` by quadrature of wedge densities.

    Parameters
    ----------
    representative : {"class", "pointwise"}
        ``"class"`` integrates against the smooth representative
        ``lam * background`` of the twist class, ``"pointwise"`` against the
        stored field ``rho``. Both give the same numbers in exact arithmetic,
        since the discrete wedge of an exact form against a closed one
        integrates to zero; the pointwise route carries a rounding floor of
        order ``1e-17 * max|rho|^2``, which dominates the total mass when both
        ``eps`` and the class are small.
    """
    lat = metric.lattice
    n = metric.n
    g = metric.g
    if representative == "class":
        rho = twist.lam * np.broadcast_to(twist.background, lat.shape + (n, n))
    elif representative == "pointwise":
        rho = twist.rho
    else:
        raise ValueError(f"unknown representative {representative!r}")
    if n == 1:
        return [grid.integrate(lat, g[..., 0, 0].real), grid.integrate(lat, rho[..., 0, 0].real)]
    return [
        grid.integrate(lat, np.linalg.det(g).real),
        grid.integrate(lat, mixed_discriminant(g, rho)),
        grid.integrate(lat, np.linalg.det(rho).real),
    ]


def cohomological_mass(eps: float, numbers) -> float:
    """``(eps [omega] + [rho])^n`` expanded binomially from intersection numbers."""
    n = len(numbers) - 1
    return float(sum(math.comb(n, j) * eps ** (n - j) * numbers[j] for j in range(n + 1)))


# --- solutions --------------------------------------------------------------------


@dataclass(eq=False)
class Solution:
    """One member of the family.

    ``potential`` is the zero-mean function with
    ``omega_eps = eps g + lam * background + i ddbar potential``; it equals
    ``u + twist.potential`` up to a constant and is kept separately because
    spectral second derivatives of ``u`` itself amplify its rounding error.
    """

    epsilon: float
    u: np.ndarray
    omega_eps: np.ndarray
    residual_sup: float
    newton_iterations: int
    sup_u: float
    inf_u: float
    sup_bound: float | None
    potential: np.ndarray = field(repr=False, default=None)


class _Problem:
    def __init__(self, metric: MetricField, twist: TwistField, eps: float):
        if twist.lattice != metric.lattice:
            raise ValueError("twist and metric live on different lattices")
        self.lat = metric.lattice
        self.n = metric.n
        self.base = eps * metric.g + twist.rho
        self.smooth = eps * metric.g + twist.lam * twist.background
        self.twist_potential = np.asarray(twist.potential, dtype=np.float64)
        self.logdet_g = log_det(metric.g)

    def potential_of(self, u):
        w = u + self.twist_potential
        return w - np.mean(w)

    def omega(self, v):
        return self.smooth + grid.complex_hessian(self.lat, v)

    def residual(self, u, omega):
        return log_det(omega) - self.logdet_g - u

    def positive(self, omega) -> bool:
        lam = min_eigenvalue(omega)
        return bool(np.all(lam > POSITIVITY_TOL))


def weighted_laplacian_coef(lattice: Lattice, inv: np.ndarray, h) -> np.ndarray:
    r"""``g^{i jbar} d_i dbar_j h`` given the stacked inverse matrix ``inv = G^{-1}``."""
    H = grid.complex_hessian(lattice, h)
    return np.einsum("...ji,...ij->...", inv, H).real


def _newton_step(prob: _Problem, omega, F, opts: SolverOptions, rtol: float):
    lat = prob.lat
    inv = np.linalg.inv(omega)
    cbar = inv.reshape(-1, prob.n, prob.n).mean(axis=0)
    shape = lat.shape
    size = lat.size

    def matvec(x):
        h = x.reshape(shape)
        return (weighted_laplacian_coef(lat, inv, h) - h).ravel()

    def precond(x):
        return grid.solve_constant_coefficient(lat, x.reshape(shape), cbar, 1.0).ravel()

    A = spla.LinearOperator((size, size), matvec=matvec, dtype=np.float64)
    Mop = spla.LinearOperator((size, size), matvec=precond, dtype=np.float64)
    delta, info = spla.gmres(
        A, -F.ravel(), M=Mop, rtol=rtol, atol=0.0,
        restart=opts.krylov_restart, maxiter=opts.krylov_maxiter,
    )
    if info < 0:
        raise NewtonStagnationError(f"GMRES breakdown (info={info})")
    return delta.reshape(shape)


def _cold_start(prob: _Problem, twist: TwistField, eps: float):
    n = prob.n
    pot = prob.twist_potential
    shift = eps + max(twist.lam, 0.0)
    if shift > 0:
        # removes the exact part of rho: omega_eps = eps g + lam * background
        u0 = n * math.log(shift) - (pot - pot.mean())
        v0 = np.zeros(prob.lat.shape)
        if prob.positive(prob.omega(v0)):
            return u0, v0
    if prob.positive(prob.base):
        # constant u keeps omega_eps = eps g + rho
        u0 = np.full(prob.lat.shape, float(np.mean(log_det(prob.base) - prob.logdet_g)))
        return u0, prob.potential_of(u0)
    raise PositivityError(f"no positive initial iterate for eps={eps}")


def _initial_iterate(prob, twist, eps, warm_start):
    if warm_start is None:
        return _cold_start(prob, twist, eps)
    if isinstance(warm_start, Solution):
        warm_u = np.asarray(warm_start.u)
        warm_v = warm_start.potential if warm_start.potential is not None else prob.potential_of(warm_u)
    else:
        warm_u = np.asarray(warm_start, dtype=np.float64)
        warm_v = prob.potential_of(warm_u)
    if prob.positive(prob.omega(warm_v)):
        return warm_u, warm_v
    cold_u, cold_v = _cold_start(prob, twist, eps)
    # omega is affine in the potential, so blending toward the cold start restores positivity
    for t in (0.25, 0.5, 0.75, 0.875):
        v0 = (1 - t) * warm_v + t * cold_v
        if prob.positive(prob.omega(v0)):
            return (1 - t) * warm_u + t * cold_u, v0
    return cold_u, cold_v


def solve_ma(
    metric: MetricField,
    twist: TwistField,
    eps: float,
    options: SolverOptions | None = None,
    warm_start=None,
    _allow_zero: bool = False,
) -> Solution:
    """Solve ``(eps omega + rho + i ddbar u)^n = e^u omega^n`` with ``omega_eps > 0``.

    Parameters
    ----------
    metric, twist
        The reference metric ``omega`` and the closed form ``rho``.
    eps
        Positive twist parameter.
    options
        Tolerances; the returned residual satisfies ``residual_sup <= options.tol``.
    warm_start
        Optional initial guess, a :class:`Solution` at a nearby ``eps`` or a
        bare ``u`` array; it is blended toward a cold start if it does not
        give a positive ``omega_eps``.

    Raises
    ------
    NewtonStagnationError
        If the tolerance is not met within ``max_newton`` iterations or the
        line search collapses.
    PositivityError
        If no positive initial iterate can be found.
    """
    if not (eps > 0 or (_allow_zero and eps == 0)):
        raise ValueError(f"eps must be positive, got {eps}")
    opts = options or SolverOptions()
    prob = _Problem(metric, twist, float(eps))
    u, v = _initial_iterate(prob, twist, eps, warm_start)
    omega = prob.omega(v)
    F = prob.residual(u, omega)
    rnorm = grid.sup_norm(F)
    it = 0
    polished = not opts.polish
    while rnorm > opts.tol or not polished:
        polishing = rnorm <= opts.tol
        if it >= opts.max_newton:
            raise NewtonStagnationError(
                f"eps={eps}: residual {rnorm:.3e} after {it} Newton iterations"
            )
        # inexact Newton forcing term; GMRES stalls below the matvec rounding floor
        forcing = min(1e-3, max(opts.krylov_rtol, rnorm))
        delta = _newton_step(prob, omega, F, opts, forcing)
        dfluct = delta - np.mean(delta)
        it += 1
        t = 1.0
        while True:
            v_t = v + t * dfluct
            om_t = prob.omega(v_t)
            if prob.positive(om_t):
                u_t = u + t * delta
                F_t = prob.residual(u_t, om_t)
                r_t = grid.sup_norm(F_t)
                if r_t < rnorm:
                    break
            t *= 0.5
            # a polishing step is a single full-step trial; halving cannot beat the rounding floor
            if polishing or t < opts.min_step:
                t = None
                break
        if polishing:
            polished = True
        if t is None:
            if polishing:
                break
            raise NewtonStagnationError(f"eps={eps}: line search failed at residual {rnorm:.3e}")
        u, v, omega, F, rnorm = u_t, v_t, om_t, F_t, r_t
        logger.debug("eps=%g newton %d residual %.3e step %g", eps, it, rnorm, t)

    u = np.array(u)
    v = np.array(v)
    u.flags.writeable = False
    v.flags.writeable = False
    omega = prob.omega(v)
    if not prob.positive(omega):
        raise PositivityError(f"eps={eps}: omega_eps lost positivity")
    sup_bound = None
    if prob.positive(prob.base):
        sup_bound = float(np.max(log_det(prob.base) - prob.logdet_g))
    return Solution(
        epsilon=float(eps),
        u=u,
        omega_eps=omega,
        residual_sup=grid.sup_norm(prob.residual(u, omega)),
        newton_iterations=it,
        sup_u=float(np.max(u)),
        inf_u=float(np.min(u)),
        sup_bound=sup_bound,
        potential=v,
    )


def solve_limit(metric: MetricField, twist: TwistField, options: SolverOptions | None = None) -> Solution:
    """The ``eps = 0`` equation ``(rho + i ddbar u)^n = e^u omega^n``; needs ``rho > 0`` pointwise."""
    if not twist.is_positive():
        raise ValueError("solve_limit requires a pointwise positive twist form")
    return solve_ma(metric, twist, 0.0, options, _allow_zero=True)


def residual(metric: MetricField, twist: TwistField, eps: float, u, potential=None) -> np.ndarray:
    """``F(u) = log det omega_eps - log det g - u`` recomputed from scratch.

    ``omega_eps`` is rebuilt from ``potential`` when given (see :class:`Solution`),
    otherwise directly as ``eps g + rho + ddbar u``. Determinants are taken
    through eigenvalues, independently of the solver's ``slogdet`` path.
    """
    u = np.asarray(u, dtype=np.float64)
    if potential is None:
        omega = eps * metric.g + twist.rho + grid.complex_hessian(metric.lattice, u)
    else:
        omega = eps * metric.g + twist.lam * twist.background + grid.complex_hessian(metric.lattice, potential)
    lam = np.linalg.eigvalsh(omega)
    with np.errstate(invalid="ignore", divide="ignore"):
        logdet = np.sum(np.log(lam), axis=-1)
    glam = np.linalg.eigvalsh(metric.g)
    return logdet - np.sum(np.log(glam), axis=-1) - u


# --- diagnostics -------------------------------------------------------------------


def generalized_eigenvalues(omega_eps: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Eigenvalues of ``omega_eps`` with respect to ``g`` in closed form (n <= 2), ascending."""
    n = g.shape[-1]
    if n == 1:
        return (omega_eps[..., 0, 0].real / g[..., 0, 0].real)[..., None]
    det_g = np.linalg.det(g).real
    t = np.einsum("...ij,...ji->...", np.linalg.inv(g), omega_eps).real
    d = np.linalg.det(omega_eps).real / det_g
    disc = np.sqrt(np.clip(t * t - 4 * d, 0.0, None))
    big = 0.5 * (t + disc)
    return np.stack([d / big, big], axis=-1)


def trace_diagnostics(sol: Solution, metric: MetricField) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(S, T, lambda_min)`` with ``S = tr_{omega_eps} omega = sum 1/lambda_i`` and ``T = log S``."""
    lam = generalized_eigenvalues(sol.omega_eps, metric.g)
    if np.any(lam[..., 0] <= 0):
        raise PositivityError("omega_eps is not positive")
    if metric.n == 1:
        S = 1.0 / lam[..., 0]
    else:
        # sum of reciprocals = trace / determinant, avoiding cancellation
        S = (lam[..., 0] + lam[..., 1]) / (lam[..., 0] * lam[..., 1])
    return S, np.log(S), lam[..., 0]


def trace_margin(sol: Solution, metric: MetricField) -> np.ndarray:
    """``T_eps + u_eps / n`` pointwise."""
    _, T, _ = trace_diagnostics(sol, metric)
    return T + sol.u / metric.n


def mass(sol: Solution, metric: MetricField) -> float:
    """``int e^{u_eps} omega^n``."""
    return grid.integrate(metric.lattice, np.exp(sol.u) * metric.det())


def mass_determinant_route(sol: Solution, metric: MetricField) -> float:
    """``int omega_eps^n``, equal to :func:`mass` up to the equation residual."""
    return grid.integrate(metric.lattice, np.linalg.det(sol.omega_eps).real)


def weighted_average(lattice: Lattice, weight_log: np.ndarray, values, density) -> float:
    """``int values e^{w} density / int e^{w} density`` computed stably in ``w``.

    The weight is rescaled by its maximum and the values are averaged as
    offsets from their first node, so a constant field is returned exactly.
    """
    values = np.broadcast_to(np.asarray(values, dtype=np.float64), lattice.shape)
    w = np.exp(weight_log - np.max(weight_log)) * density
    base = float(values.flat[0])
    return base + math.fsum((values - base).ravel() * w.ravel()) / math.fsum(w.ravel())


# --- sweeps ---------------------------------------------------------------------------


@dataclass(eq=False)
class SweepEntry:
    epsilon: float
    solution: Solution
    mass: float
    cohomological_mass: float
    min_trace_margin: float
    lambda_min_global: float
    mbar_eps: float
    inf_T: float


@dataclass(eq=False)
class SweepRecord:
    lattice: Lattice
    n: int
    volume: float
    entries: list[SweepEntry] = field(default_factory=list)
    intersection_numbers: list[float] = field(default_factory=list)
    classification: str = INDETERMINATE
    extrapolated_mass0: float = float("nan")
    fit_coefficients: list[float] = field(default_factory=list)
    threshold: float = float("nan")

    @property
    def epsilons(self) -> list[float]:
        return [e.epsilon for e in self.entries]

    def classification_json(self) -> dict:
        return {
            "classification": self.classification,
            "extrapolated_mass0": self.extrapolated_mass0,
            "threshold": self.threshold,
            "fit_coefficients": list(self.fit_coefficients),
        }


def _validate_schedule(schedule) -> list[float]:
    sched = [float(e) for e in schedule]
    if not sched:
        raise ValueError("empty epsilon schedule")
    if any(not (e > 0) for e in sched):
        raise ValueError("epsilon schedule must be positive")
    if any(b >= a for a, b in zip(sched, sched[1:])):
        raise ValueError("epsilon schedule must be strictly decreasing")
    return sched


def make_entry(sol: Solution, metric: MetricField, numbers, M=None) -> SweepEntry:
    lat = metric.lattice
    _, T, lam_min = trace_diagnostics(sol, metric)
    margin = T + sol.u / metric.n
    mbar = 0.0 if M is None else weighted_average(lat, sol.u, np.asarray(M), metric.det())
    return SweepEntry(
        epsilon=sol.epsilon,
        solution=sol,
        mass=mass(sol, metric),
        cohomological_mass=cohomological_mass(sol.epsilon, numbers),
        min_trace_margin=float(np.min(margin)),
        lambda_min_global=float(np.min(lam_min)),
        mbar_eps=mbar,
        inf_T=float(np.min(T)),
    )


def epsilon_sweep(
    metric: MetricField,
    twist: TwistField,
    schedule=None,
    options: SolverOptions | None = None,
    M=None,
    warm: bool = True,
) -> SweepRecord:
    """Solve along a strictly decreasing schedule, warm-starting each solve from the previous one.

    ``M`` (optional) is the weight whose ``e^{u_eps}``-average is recorded as ``mbar_eps``.
    """
    sched = _validate_schedule(default_schedule() if schedule is None else schedule)
    numbers = intersection_numbers(metric, twist)
    rec = SweepRecord(metric.lattice, metric.n, metric.volume(), intersection_numbers=numbers)
    prev = None
    for eps in sched:
        try:
            sol = solve_ma(metric, twist, eps, options, warm_start=prev if warm else None)
        except (NewtonStagnationError, PositivityError) as exc:
            raise SolverError(f"solve failed at eps={eps}: {exc}", epsilon=eps) from exc
        rec.entries.append(make_entry(sol, metric, numbers, M))
        prev = sol
    if len(rec.entries) >= 4:
        classify_sweep(rec)
    return rec


def classify_sweep(record: SweepRecord, threshold: float | None = None) -> str:
    """Fit the degree-n mass polynomial and classify its constant term.

    ``BigLimit`` if the extrapolated ``eps -> 0`` mass exceeds ``threshold``
    (default ``1e-6 * Vol``), ``Collapsing`` below ``threshold / 10``,
    otherwise ``Indeterminate``. The record is updated in place.
    """
    if len(record.entries) < 4:
        raise ValueError(f"classification needs at least 4 sweep entries, got {len(record.entries)}")
    if threshold is None:
        threshold = 1e-6 * record.volume
    eps = np.array(record.epsilons)
    masses = np.array([e.mass for e in record.entries])
    coef = npoly.polyfit(eps, masses, record.n)
    c0 = float(coef[0])
    if c0 > threshold:
        label = BIG_LIMIT
    elif c0 < threshold / 10:
        label = COLLAPSING
    else:
        label = INDETERMINATE
    record.classification = label
    record.extrapolated_mass0 = c0
    # highest degree first, as in numpy.polyval
    record.fit_coefficients = [float(c) for c in coef[::-1]]
    record.threshold = float(threshold)
    return label
