"""Sub/supersolution machinery around the trace quantity ``T_eps``.

Everything here is a verifiable computation on converged members of the
Monge-Ampère family: weighted averages of a curvature weight ``M``, the
weighted Poisson problem ``Delta_{omega_eps} f = M - Mbar_eps``, the
supersolution ``A f + B`` of ``Delta phi = M e^phi - 1``, a comparison check
for that equation, the pointwise differential inequality satisfied by
``T_eps`` and its integrated form.

Checks that are only theorems under curvature hypotheses report their
numbers unconditionally and carry an ``applicable`` flag saying whether a
sign is actually guaranteed for the data at hand.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as spla

from . import grid
from .continuity import (
    SolverError,
    Solution,
    SweepRecord,
    TwistField,
    trace_diagnostics,
    weighted_average,
    weighted_laplacian_coef,
)
from .geometry import MetricField, PositivityError, min_eigenvalue, spectral_minorant
from .grid import Lattice

logger = logging.getLogger(__name__)

CAUCHY_TOL = 1e-4
POISSON_TOL = 1e-9


@dataclass(frozen=True)
class Inapplicable:
    """Returned where the machinery has nothing to say, e.g. a non-positive limit weight."""

    reason: str

    def __bool__(self) -> bool:
        return False


class InapplicableError(ValueError):
    pass


# --- operators and averages --------------------------------------------------------


def weighted_laplacian(lattice: Lattice, omega_eps: np.ndarray, h) -> np.ndarray:
    r"""``g_eps^{i jbar} d_i dbar_j h``, the trace Laplacian of ``omega_eps``.

    Raises
    ------
    PositivityError
        If ``omega_eps`` is singular or indefinite at some node.
    """
    lam = min_eigenvalue(omega_eps)
    if not np.all(lam > 0):
        node = tuple(int(i) for i in np.unravel_index(int(np.argmin(lam)), lattice.shape))
        raise PositivityError(f"omega_eps not positive at node {node}", node, float(np.min(lam)))
    return weighted_laplacian_coef(lattice, np.linalg.inv(omega_eps), h)


def mbar(sol: Solution, M, metric: MetricField) -> float:
    """``int M e^u omega^n / int e^u omega^n``."""
    return weighted_average(metric.lattice, sol.u, M, metric.det())


def normalize_sup(u) -> np.ndarray:
    """``u - max u``, so the supremum is exactly zero."""
    u = np.asarray(u, dtype=np.float64)
    return u - np.max(u)


def mbar_limit(record: SweepRecord, M=None, metric: MetricField | None = None):
    """Estimate ``lim Mbar_eps`` from the tail of a sweep.

    The estimate is the value at the smallest ``eps``; it is accepted when
    the last two values differ by less than ``1e-4``. With ``M`` and
    ``metric`` given the averages are recomputed, otherwise the values stored
    in the record are used.

    Returns
    -------
    float or Inapplicable
        ``Inapplicable`` when the tail has not settled or the estimate is not
        positive.
    """
    if len(record.entries) < 4:
        raise ValueError(f"need at least 4 sweep entries, got {len(record.entries)}")
    if M is not None and metric is not None:
        values = [mbar(e.solution, M, metric) for e in record.entries]
    else:
        values = [e.mbar_eps for e in record.entries]
    last, prev = values[-1], values[-2]
    if abs(last - prev) >= CAUCHY_TOL:
        return Inapplicable(f"tail not settled: |{last:.3g} - {prev:.3g}| >= {CAUCHY_TOL}")
    if last <= 0:
        return Inapplicable(f"limit weight {last:.3g} is not positive")
    return float(last)


# --- weighted Poisson ------------------------------------------------------------------


def _weighted_mean(values, weight) -> float:
    return math.fsum((values * weight).ravel()) / math.fsum(weight.ravel())


def solve_weighted_poisson(
    lattice: Lattice,
    omega_eps: np.ndarray,
    M,
    mbar_eps: float,
    rtol: float = 1e-10,
    restart: int = 60,
    refinements: int = 6,
) -> np.ndarray:
    """``f`` with ``Delta_{omega_eps} f = M - mbar_eps`` and ``min f = 0``.

    The right-hand side is first projected to zero mean against
    ``det omega_eps``, the compatibility condition of the equation; the size
    of that projection is logged. Each refinement pass solves for a
    correction with preconditioned GMRES and recomputes the true residual.

    Raises
    ------
    SolverError
        If the residual still exceeds ``1e-9 * max(1, |rhs|)`` in sup norm
        after the last refinement.
    """
    M = np.broadcast_to(np.asarray(M, dtype=np.float64), lattice.shape)
    rhs = M - mbar_eps
    det = np.linalg.det(omega_eps).real
    shift = _weighted_mean(rhs, det)
    logger.debug("weighted Poisson compatibility projection %.3e", shift)
    rhs_p = rhs - shift
    if not np.any(rhs_p):
        return np.zeros(lattice.shape)
    inv = np.linalg.inv(omega_eps)
    cbar = inv.reshape(-1, lattice.dim_c, lattice.dim_c).mean(axis=0)
    shape, size = lattice.shape, lattice.size

    def apply(h):
        return weighted_laplacian_coef(lattice, inv, h)

    def precond(x):
        return grid.solve_constant_coefficient(lattice, x.reshape(shape), cbar, 0.0).ravel()

    A = spla.LinearOperator((size, size), matvec=lambda x: apply(x.reshape(shape)).ravel(), dtype=np.float64)
    P = spla.LinearOperator((size, size), matvec=precond, dtype=np.float64)
    tol = POISSON_TOL * max(1.0, grid.sup_norm(rhs))
    f = precond(rhs_p.ravel()).reshape(shape)
    for _ in range(refinements):
        r = rhs_p - apply(f)
        res = grid.sup_norm(r)
        if res <= 0.1 * tol:
            break
        delta, info = spla.gmres(A, r.ravel(), M=P, rtol=rtol, atol=0.0, restart=restart, maxiter=2)
        f = f + delta.reshape(shape)
    f = f - np.min(f)
    res = grid.sup_norm(apply(f) - rhs_p)
    if res > tol:
        raise SolverError(f"weighted Poisson residual {res:.3e} above {tol:.3e}")
    return f


# --- supersolution and comparison -------------------------------------------------


def supersolution(f, mbar0: float) -> tuple[float, float, np.ndarray]:
    """``(A, B, A f + B)`` with ``A = 2 / mbar0`` and ``B = log A + 1``.

    Raises
    ------
    InapplicableError
        If ``mbar0`` is not positive.
    """
    if not (mbar0 > 0):
        raise InapplicableError(f"supersolution needs a positive limit weight, got {mbar0}")
    A = 2.0 / mbar0
    B = math.log(A) + 1.0
    return A, B, A * np.asarray(f, dtype=np.float64) + B


def equation_residual(lattice: Lattice, omega_eps, phi, M) -> np.ndarray:
    """``Delta_{omega_eps} phi - (M e^phi - 1)``."""
    return weighted_laplacian(lattice, omega_eps, phi) - (np.asarray(M) * np.exp(phi) - 1.0)


@dataclass
class ComparisonReport:
    is_sub: bool
    is_super: bool
    hypotheses_hold: bool
    ordering_margin: float
    min_sub_residual: float
    max_super_residual: float
    ordering_argmin: tuple
    sub_argmin: tuple
    super_argmax: tuple
    checked: bool
    ordering_holds: bool | None

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


def check_comparison(
    lattice: Lattice, phi_minus, phi_plus, M, omega_eps, tol: float = 1e-8
) -> ComparisonReport:
    """Residual signs and ordering for a candidate sub/supersolution pair.

    ``ordering_holds`` is only set when both residual signs hold and the
    weight satisfies ``M >= 0`` with ``max M > 0``; the comparison principle
    then requires ``phi_minus <= phi_plus``.
    """
    M = np.broadcast_to(np.asarray(M, dtype=np.float64), lattice.shape)
    r_minus = equation_residual(lattice, omega_eps, phi_minus, M)
    r_plus = equation_residual(lattice, omega_eps, phi_plus, M)
    gap = np.asarray(phi_plus) - np.asarray(phi_minus)
    smin, _, sarg, _ = grid.extrema(lattice, r_minus)
    _, pmax, _, parg = grid.extrema(lattice, r_plus)
    gmin, _, garg, _ = grid.extrema(lattice, gap)
    is_sub = smin >= -tol
    is_super = pmax <= tol
    hyp = bool(np.min(M) >= 0 and np.max(M) > 0)
    checked = is_sub and is_super and hyp
    return ComparisonReport(
        is_sub=bool(is_sub),
        is_super=bool(is_super),
        hypotheses_hold=hyp,
        ordering_margin=gmin,
        min_sub_residual=smin,
        max_super_residual=pmax,
        ordering_argmin=garg,
        sub_argmin=sarg,
        super_argmax=parg,
        checked=bool(checked),
        ordering_holds=bool(gmin >= -tol) if checked else None,
    )


def manufactured_pair(lattice: Lattice, omega_eps, rng, amplitude: float = 0.5):
    """A random ``(phi_minus, phi_plus, M)`` bracketing a manufactured solution.

    ``phi*`` is a random trigonometric polynomial scaled so that
    ``|Delta phi*| <= amplitude``, ``M = (1 + Delta phi*) e^{-phi*}`` makes it
    an exact solution, and the pair is ``phi* -/+`` random positive shifts
    plus small random smooth perturbations. Residual signs are not
    guaranteed and must be checked by the caller.
    """
    coords = lattice.coords()

    def trig(modes):
        out = np.zeros(lattice.shape)
        for _ in range(modes):
            k = rng.integers(-2, 3, size=lattice.ndim)
            phase = sum(2 * np.pi * kk * x / L for kk, x, L in zip(k, coords, lattice.periods))
            out = out + rng.normal() * np.cos(phase + rng.uniform(0, 2 * np.pi))
        return out

    def scaled(h, bound):
        lap = grid.sup_norm(weighted_laplacian(lattice, omega_eps, h))
        return h * (bound / lap) if lap > 0 else np.zeros(lattice.shape)

    phi = scaled(trig(4), amplitude)
    M = (1.0 + weighted_laplacian(lattice, omega_eps, phi)) * np.exp(-phi)
    lo, hi = rng.uniform(0.02, 0.3, size=2)
    phi_minus = phi - lo + scaled(trig(2), 0.1 * lo)
    phi_plus = phi + hi + scaled(trig(2), 0.1 * hi)
    return phi_minus, phi_plus, M


# --- differential and integral inequalities ---------------------------------------


def theory_applicable(metric: MetricField, twist: TwistField, M, tol: float = 1e-12) -> bool:
    """Whether the pointwise inequality for ``T_eps`` is guaranteed for this data.

    For a flat background the trace inequality reduces to
    ``Delta T - (eps/n) e^T + 1 >= <rho, omega>_{omega_eps} / tr >= 0``, so it
    holds for any pointwise semi-positive twist and any weight ``M <= 0``.
    """
    M = np.asarray(M, dtype=np.float64)
    return bool(metric.is_flat() and np.all(min_eigenvalue(twist.rho) >= -tol) and np.max(M) <= tol)


@dataclass
class InequalityReport:
    min_residual: float
    argmin: tuple
    applicable: bool
    holds: bool | None

    def to_dict(self) -> dict:
        return {"min_residual": self.min_residual, "argmin": list(self.argmin),
                "applicable": self.applicable, "holds": self.holds}


def diff_inequality_residual(sol: Solution, M, metric: MetricField) -> np.ndarray:
    """``Delta_{omega_eps} T - (M + eps/n) e^T + 1`` pointwise."""
    lat = metric.lattice
    S, T, _ = trace_diagnostics(sol, metric)
    lap = weighted_laplacian(lat, sol.omega_eps, T)
    return lap - (np.asarray(M) + sol.epsilon / metric.n) * S + 1.0


def check_diff_inequality(
    sol: Solution, M, metric: MetricField, twist: TwistField | None = None, tol: float = 1e-6
) -> InequalityReport:
    """Minimum of the trace inequality residual; ``holds`` is set only when applicable.

    ``M`` is the curvature weight ``(n+1)/(2n) kappa``, geometric or synthetic.
    """
    r = diff_inequality_residual(sol, M, metric)
    rmin, _, arg, _ = grid.extrema(metric.lattice, r)
    applicable = twist is not None and theory_applicable(metric, twist, M)
    return InequalityReport(rmin, arg, applicable, bool(rmin >= -tol) if applicable else None)


@dataclass
class GuenanciaReport:
    lhs: float
    rhs: float
    C_eps: float
    min_trace_excess: float
    applicable: bool
    holds: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def guenancia_check(
    sol: Solution, M, metric: MetricField, twist: TwistField | None = None, tol: float = 1e-10
) -> GuenanciaReport:
    """``int M e^T e^u omega^n`` against the mass, and ``C_eps = inf e^{-u/n}``.

    ``min_trace_excess`` is ``min(T + sup u / n)``, the logarithm of
    ``min e^T / C_eps``. ``applicable`` requires the pointwise inequality to
    be guaranteed and ``M >= 0``.
    """
    lat = metric.lattice
    S, T, _ = trace_diagnostics(sol, metric)
    dens = metric.det()
    M = np.broadcast_to(np.asarray(M, dtype=np.float64), lat.shape)
    lhs = grid.integrate(lat, M * S * np.exp(sol.u) * dens)
    rhs = grid.integrate(lat, np.exp(sol.u) * dens)
    sup_u = float(np.max(sol.u))
    C = math.exp(-sup_u / metric.n)
    excess = float(np.min(T + sup_u / metric.n))
    applicable = twist is not None and theory_applicable(metric, twist, M) and bool(np.min(M) >= 0)
    holds = lhs <= rhs + tol * max(1.0, abs(rhs))
    return GuenanciaReport(lhs, rhs, C, excess, applicable, bool(holds))


# --- report --------------------------------------------------------------------------


@dataclass
class KWReport:
    epsilon: float
    mbar_eps: float
    mbar0: float | None
    mbar0_status: str
    f: np.ndarray = field(repr=False)
    A: float | None
    B: float | None
    phi_plus: np.ndarray | None = field(repr=False)
    comparison_margin: float | None
    diff_ineq: InequalityReport
    guenancia: GuenanciaReport
    weight: np.ndarray = field(repr=False, default=None)
    weight_kind: str = "given"
    weight_shift: float = 0.0

    @property
    def diff_ineq_min_residual(self) -> float:
        return self.diff_ineq.min_residual

    def to_json(self, dumps: dict | None = None) -> dict:
        """All scalars plus references to dumped fields (``{"f": path, ...}``)."""
        return {
            "epsilon": self.epsilon,
            "mbar_eps": self.mbar_eps,
            "mbar0": self.mbar0,
            "mbar0_status": self.mbar0_status,
            "A": self.A,
            "B": self.B,
            "supersolution_rule": "A = 2/mbar0, B = log(A) + 1",
            "comparison_margin": self.comparison_margin,
            "diff_ineq_min_residual": self.diff_ineq.min_residual,
            "diff_ineq": self.diff_ineq.to_dict(),
            "guenancia": self.guenancia.to_dict(),
            "weight_kind": self.weight_kind,
            "weight_shift": self.weight_shift,
            "dumps": dict(dumps or {}),
        }


def poisson_weight(lattice: Lattice, M) -> tuple[np.ndarray, str, float]:
    """The weight the Poisson and supersolution steps use, its kind and the shift applied.

    A weight that is not resolved by the lattice (a merely Lipschitz
    ``kappa``, say) has spectral content the discrete operator cannot
    produce, so it is replaced by a band-limited minorant.
    """
    M = np.broadcast_to(np.asarray(M, dtype=np.float64), lattice.shape)
    if grid.tail_energy_fraction(lattice, M) <= grid.RESOLVED_TAIL:
        return np.asarray(M), "given", 0.0
    W, shift = spectral_minorant(lattice, M)
    return W, "spectral_minorant", shift


def kw_report(record: SweepRecord, metric: MetricField, twist: TwistField, M, curvature_M=None) -> KWReport:
    """Run the machinery on the smallest-``eps`` member of a sweep.

    The averages, the Poisson solve and the supersolution use
    :func:`poisson_weight` of ``M``. The pointwise and integrated trace
    inequalities involve the curvature of the metric, so they use
    ``curvature_M = (n+1)/(2n) kappa`` when it is given (``M`` may be a
    synthetic stand-in) and ``M`` otherwise.
    """
    lat = metric.lattice
    M = np.broadcast_to(np.asarray(M, dtype=np.float64), lat.shape)
    curvature_M = M if curvature_M is None else np.asarray(curvature_M, dtype=np.float64)
    W, kind, shift = poisson_weight(lat, M)
    sol = record.entries[-1].solution
    mb = mbar(sol, W, metric)
    limit = mbar_limit(record, W, metric) if len(record.entries) >= 4 else Inapplicable("fewer than 4 entries")
    f = solve_weighted_poisson(lat, sol.omega_eps, W, mb)
    _, T, _ = trace_diagnostics(sol, metric)
    if isinstance(limit, Inapplicable):
        A = B = phi_plus = margin = None
        mbar0, status = None, limit.reason
    else:
        A, B, phi_plus = supersolution(f, limit)
        margin = float(np.min(phi_plus - T))
        mbar0, status = limit, "ok"
    return KWReport(
        epsilon=sol.epsilon,
        mbar_eps=mb,
        mbar0=mbar0,
        mbar0_status=status,
        f=f,
        A=A,
        B=B,
        phi_plus=phi_plus,
        comparison_margin=margin,
        diff_ineq=check_diff_inequality(sol, curvature_M, metric, twist),
        guenancia=guenancia_check(sol, curvature_M, metric, twist),
        weight=W,
        weight_kind=kind,
        weight_shift=shift,
    )
