"""Kähler metrics on lattices, Chern curvature, Ricci form and holomorphic sectional curvature.

Index conventions
-----------------
A metric stack ``g[..., i, j]`` stores :math:`g_{i\\bar j}`. The curvature stack
``R[..., i, j, k, l]`` stores

.. math:: R_{i\\bar j k\\bar l} = -\\partial_k\\partial_{\\bar l} g_{i\\bar j}
          + g^{p\\bar q}\\,\\partial_k g_{i\\bar q}\\,\\partial_{\\bar l} g_{p\\bar j},

so that :math:`\\mathrm{Ric}_{k\\bar l} = g^{i\\bar j}R_{i\\bar j k\\bar l}
= -\\partial_k\\partial_{\\bar l}\\log\\det g` and round spheres have positive HSC.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.fft as sfft

from . import grid
from .grid import Lattice

HERMITIAN_TOL = 1e-12
POSITIVITY_TOL = 1e-10
DEFAULT_SAMPLES = 256
DEFAULT_REFINE_STEPS = 10
_CHUNK = 1 << 15


class PositivityError(ValueError):
    """A Hermitian stack failed to be positive definite at some node."""

    def __init__(self, message, node=None, eigenvalue=None):
        super().__init__(message)
        self.node = node
        self.eigenvalue = eigenvalue


# --- small Hermitian helpers ---------------------------------------------------


def min_eigenvalue(stack: np.ndarray) -> np.ndarray:
    """Smallest eigenvalue of each Hermitian matrix in a stack (closed form for n <= 2)."""
    n = stack.shape[-1]
    if n == 1:
        return stack[..., 0, 0].real.copy()
    if n == 2:
        a, d = stack[..., 0, 0].real, stack[..., 1, 1].real
        mean = 0.5 * (a + d)
        rad = np.hypot(0.5 * (a - d), np.abs(stack[..., 0, 1]))
        big = mean + rad
        det = a * d - np.abs(stack[..., 0, 1]) ** 2
        # det / lambda_max avoids cancellation when the spectrum is spread
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(big > 0, det / np.where(big > 0, big, 1.0), mean - rad)
    return np.linalg.eigvalsh(stack)[..., 0]


def check_positive(lattice: Lattice, stack: np.ndarray, what: str = "metric", tol: float = POSITIVITY_TOL) -> float:
    """Raise :class:`PositivityError` unless every node matrix has min eigenvalue > tol."""
    lam = min_eigenvalue(stack)
    if not np.all(np.isfinite(lam)):
        raise PositivityError(f"{what} has non-finite entries")
    lo, _, node, _ = grid.extrema(lattice, lam)
    if lo <= tol:
        raise PositivityError(
            f"{what} not positive definite: min eigenvalue {lo:.3e} at node {node}",
            node=node,
            eigenvalue=lo,
        )
    return lo


def log_det(stack: np.ndarray) -> np.ndarray:
    """``log det`` of a stack of Hermitian positive matrices (closed form for n <= 2)."""
    n = stack.shape[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        if n == 1:
            return np.log(stack[..., 0, 0].real)
        if n == 2:
            det = stack[..., 0, 0].real * stack[..., 1, 1].real - np.abs(stack[..., 0, 1]) ** 2
            return np.log(det)
    sign, ld = np.linalg.slogdet(stack)
    return np.where(sign.real > 0, ld, np.nan)


def hermitian_part(stack: np.ndarray) -> np.ndarray:
    return 0.5 * (stack + np.conj(np.swapaxes(stack, -1, -2)))


# --- metrics -------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MetricField:
    lattice: Lattice
    g: np.ndarray
    provenance: str = "potential"

    def __post_init__(self):
        n = self.lattice.dim_c
        g = np.array(self.lattice.check_field(self.g, "metric"), dtype=np.complex128)
        if g.shape != self.lattice.shape + (n, n):
            raise ValueError(f"metric stack shape {g.shape} does not match lattice")
        asym = np.max(np.abs(g - np.conj(np.swapaxes(g, -1, -2))))
        scale = max(1.0, float(np.max(np.abs(g))))
        if asym > HERMITIAN_TOL * scale:
            raise ValueError(f"metric is not Hermitian (defect {asym:.2e})")
        g = hermitian_part(g)
        check_positive(self.lattice, g, "metric")
        g.flags.writeable = False
        object.__setattr__(self, "g", g)

    @property
    def n(self) -> int:
        return self.lattice.dim_c

    def det(self) -> np.ndarray:
        return np.linalg.det(self.g).real

    def inverse(self) -> np.ndarray:
        return np.linalg.inv(self.g)

    def volume_form(self) -> np.ndarray:
        """Density of omega^n against flat Lebesgue measure (``det g``)."""
        return self.det()

    def volume(self) -> float:
        return grid.integrate(self.lattice, self.det())

    def scaled(self, c: float) -> MetricField:
        return MetricField(self.lattice, c * self.g, self.provenance)

    def is_flat(self, tol: float = 1e-13) -> bool:
        ref = self.g.reshape(-1, self.n, self.n)[0]
        return bool(np.max(np.abs(self.g - ref)) <= tol * max(1.0, float(np.max(np.abs(ref)))))


def flat_metric(lattice: Lattice, background=None) -> MetricField:
    n = lattice.dim_c
    g0 = np.eye(n) if background is None else np.asarray(background, dtype=np.complex128)
    g = np.broadcast_to(g0, lattice.shape + (n, n))
    return MetricField(lattice, g, "flat")


def metric_from_potential(lattice: Lattice, background, phi) -> MetricField:
    """``g = G0 + d dbar phi`` with constant Hermitian positive ``G0``.

    Raises
    ------
    PositivityError
        If the background or the perturbed metric fails positivity; the
        exception carries the worst node and eigenvalue.
    """
    n = lattice.dim_c
    g0 = np.asarray(background, dtype=np.complex128).reshape(n, n)
    lam0 = np.linalg.eigvalsh(hermitian_part(g0))[0]
    if lam0 <= POSITIVITY_TOL:
        raise PositivityError(f"background not positive definite (min eigenvalue {lam0:.3e})", eigenvalue=lam0)
    phi = grid.real_field(lattice, phi)
    g = g0 + grid.complex_hessian(lattice, phi)
    return MetricField(lattice, g, "potential")


def conformal_metric(lattice: Lattice, log_density) -> MetricField:
    if lattice.dim_c != 1:
        raise ValueError("conformal metrics are only defined for dim_c = 1")
    f = grid.real_field(lattice, log_density)
    return MetricField(lattice, np.exp(f)[..., None, None], "conformal")


def product_lattice(l1: Lattice, l2: Lattice) -> Lattice:
    return grid.make_lattice(2, l1.periods + l2.periods, l1.resolution + l2.resolution)


def product_metric(m1: MetricField, m2: MetricField) -> MetricField:
    """Block-diagonal metric ``diag(g1(z1), g2(z2))`` on the product lattice."""
    if m1.n != 1 or m2.n != 1:
        raise ValueError("product_metric needs two dim_c = 1 factors")
    lat = product_lattice(m1.lattice, m2.lattice)
    g = np.zeros(lat.shape + (2, 2), dtype=np.complex128)
    g[..., 0, 0] = m1.g[..., 0, 0][:, :, None, None]
    g[..., 1, 1] = m2.g[..., 0, 0][None, None, :, :]
    return MetricField(lat, g, "product")


# --- curvature -----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CurvatureField:
    lattice: Lattice
    R: np.ndarray

    def hermitian_defect(self) -> float:
        """max |R_{ij̄kl̄} - conj(R_{jīlk̄})| relative to max |R|."""
        swapped = np.conj(np.transpose(self.R, self._perm((1, 0, 3, 2))))
        return _rel(self.R - swapped, self.R)

    def kahler_defect(self) -> float:
        swapped = np.transpose(self.R, self._perm((2, 1, 0, 3)))
        return _rel(self.R - swapped, self.R)

    def _perm(self, tail):
        d = self.lattice.ndim
        return tuple(range(d)) + tuple(d + t for t in tail)


def _rel(diff: np.ndarray, ref: np.ndarray) -> float:
    scale = float(np.max(np.abs(ref)))
    return float(np.max(np.abs(diff))) / scale if scale > 0 else float(np.max(np.abs(diff)))


def chern_curvature(metric: MetricField) -> CurvatureField:
    lat = metric.lattice
    n = metric.n
    g = metric.g
    ginv = metric.inverse()
    coeffs = sfft.fftn(g, axes=lat.axes)

    def apply(sym):
        return sfft.ifftn(sym[(...,) + (None, None)] * coeffs, axes=lat.axes)

    dg = [apply(grid._dz_symbol(lat, k, False)) for k in range(n)]
    # d_{lbar} g_{i jbar} = conj(d_l g_{j ibar}) for Hermitian g
    dbg = [np.conj(np.swapaxes(d, -1, -2)) for d in dg]
    R = np.empty(lat.shape + (n, n, n, n), dtype=np.complex128)
    for k in range(n):
        left = dg[k] @ ginv
        for l in range(n):
            R[..., :, :, k, l] = left @ dbg[l] - apply(grid._ddbar_symbol(lat, k, l))
    return CurvatureField(lat, R)


def ricci_form(metric: MetricField) -> np.ndarray:
    """``Ric_{ij̄} = -d_i dbar_j log det g`` as a Hermitian stack."""
    return -grid.complex_hessian(metric.lattice, log_det(metric.g))


def ricci_contraction(curv: CurvatureField, metric: MetricField) -> np.ndarray:
    """``g^{ij̄} R_{ij̄kl̄}``; equals the Ricci form for Kähler metrics."""
    ginv = metric.inverse()
    # g^{i jbar} = (G^{-1})[j, i]
    return np.einsum("...ji,...ijkl->...kl", ginv, curv.R)


def hsc(curv: CurvatureField, metric: MetricField, node, v) -> float:
    """Holomorphic sectional curvature ``R(v, v̄, v, v̄) / |v|_g^4`` at one node."""
    v = np.asarray(v, dtype=np.complex128).reshape(-1)
    if not np.any(v != 0):
        raise ValueError("hsc needs a nonzero tangent vector")
    node = tuple(node)
    R = curv.R[node]
    G = metric.g[node]
    vb = np.conj(v)
    num = np.einsum("ijkl,i,j,k,l->", R, v, vb, v, vb)
    norm2 = np.einsum("ij,i,j->", G, v, vb).real
    return float(num.real / norm2**2)


def orthonormal_frame(metric: MetricField) -> np.ndarray:
    """Stack ``P`` with ``v = P w`` satisfying ``|v|_g = |w|`` (``P = (L^T)^{-1}``, ``G = L L^H``)."""
    L = np.linalg.cholesky(metric.g)
    return np.linalg.inv(np.swapaxes(L, -1, -2))


def frame_curvature(curv: CurvatureField, P: np.ndarray) -> np.ndarray:
    """Curvature components in the g-orthonormal frame ``P``."""
    n = curv.lattice.dim_c
    out = _frame(curv.R.reshape((-1,) + (n,) * 4), P.reshape(-1, n, n))
    return out.reshape(curv.R.shape)


# --- the curvature extremizer ----------------------------------------------------

_PAULI = np.array(
    [
        [[1, 0], [0, 1]],
        [[0, 1], [1, 0]],
        [[0, -1j], [1j, 0]],
        [[1, 0], [0, -1]],
    ],
    dtype=np.complex128,
)


def fibonacci_sphere(count: int) -> np.ndarray:
    """Deterministic near-uniform points on S^2, shape ``(count, 3)``."""
    i = np.arange(count)
    z = 1.0 - (2.0 * i + 1.0) / count
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    phi = i * np.pi * (3.0 - np.sqrt(5.0))
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)


def bloch_to_spinor(s: np.ndarray) -> np.ndarray:
    """Unit ``w`` in C^2 with ``w^† σ w = s`` (fixed phase: first entry real ≥ 0)."""
    theta = np.arccos(np.clip(s[..., 2], -1.0, 1.0))
    phi = np.arctan2(s[..., 1], s[..., 0])
    return np.stack([np.cos(theta / 2) + 0j, np.sin(theta / 2) * np.exp(1j * phi)], axis=-1)


def hsc_quadratic(Rf: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """HSC on CP^1 as ``c + b·s + s^T A s`` in Bloch coordinates, from frame curvature."""
    K = np.einsum("...abcd,mab,ncd->...mn", Rf, _PAULI, _PAULI).real
    K = 0.5 * (K + np.swapaxes(K, -1, -2))
    c = 0.25 * K[..., 0, 0]
    b = 0.5 * K[..., 0, 1:]
    A = 0.25 * K[..., 1:, 1:]
    return c, b, A


def _quad_eval(c, b, A, s):
    return c + np.einsum("...i,...i->...", b, s) + np.einsum("...i,...ij,...j->...", s, A, s)


def _refine(c, b, A, s, q, steps):
    """Projected gradient ascent on S^2 with an exact great-circle line search."""
    tgrid = np.linspace(0.0, np.pi, 65)
    for _ in range(steps):
        grad = b + 2.0 * np.einsum("...ij,...j->...i", A, s)
        gt = grad - np.einsum("...i,...i->...", grad, s)[..., None] * s
        gn = np.linalg.norm(gt, axis=-1)
        active = gn > 1e-14
        if not np.any(active):
            break
        d = np.where(active[..., None], gt / np.where(active, gn, 1.0)[..., None], 0.0)
        As = np.einsum("...ij,...j->...i", A, s)
        Ad = np.einsum("...ij,...j->...i", A, d)
        sAs = np.einsum("...i,...i->...", s, As)
        dAd = np.einsum("...i,...i->...", d, Ad)
        sAd = np.einsum("...i,...i->...", s, Ad)
        al = c + 0.5 * (sAs + dAd)
        be = np.einsum("...i,...i->...", b, s)
        ga = np.einsum("...i,...i->...", b, d)
        de = 0.5 * (sAs - dAd)
        et = sAd

        def qt(t):
            return al + be * np.cos(t) + ga * np.sin(t) + de * np.cos(2 * t) + et * np.sin(2 * t)

        vals = qt(tgrid[:, None])
        t = tgrid[np.argmax(vals, axis=0)]
        for _ in range(4):
            d1 = -be * np.sin(t) + ga * np.cos(t) - 2 * de * np.sin(2 * t) + 2 * et * np.cos(2 * t)
            d2 = -be * np.cos(t) - ga * np.sin(t) - 4 * de * np.cos(2 * t) - 4 * et * np.sin(2 * t)
            step = np.where(d2 < 0, -d1 / np.where(d2 < 0, d2, -1.0), 0.0)
            tn = t + np.clip(step, -0.1, 0.1)
            better = qt(tn) >= qt(t)
            t = np.where(better, tn, t)
        qn = qt(t)
        accept = active & (qn > q)
        snew = np.cos(t)[..., None] * s + np.sin(t)[..., None] * d
        snew /= np.linalg.norm(snew, axis=-1, keepdims=True)
        s = np.where(accept[..., None], snew, s)
        q = np.where(accept, _quad_eval(c, b, A, s), q)
    return s, q


@dataclass(eq=False)
class CurvatureReport:
    lattice: Lattice
    kappa: np.ndarray
    M: np.ndarray
    directions: np.ndarray
    lipschitz_estimate: float
    argmax_sample_count: int
    sample_max: np.ndarray = field(repr=False, default=None)

    def summary(self) -> dict:
        return {
            "kappa_min": float(np.min(self.kappa)),
            "kappa_max": float(np.max(self.kappa)),
            "M_max": float(np.max(self.M)),
            "lipschitz_estimate": float(self.lipschitz_estimate),
            "argmax_sample_count": int(self.argmax_sample_count),
        }


def kappa_field(
    curv: CurvatureField,
    metric: MetricField,
    samples: int = DEFAULT_SAMPLES,
    refine_steps: int = DEFAULT_REFINE_STEPS,
) -> CurvatureReport:
    """Pointwise ``kappa = -max_v HSC(v)`` with its maximizing directions and ``M = (n+1)/(2n) kappa``.

    For ``n = 1`` there is a single direction. For ``n = 2`` the maximum over
    CP^1 is found by evaluating ``samples`` Fibonacci directions and then
    running ``refine_steps`` projected-gradient steps from the best sample;
    refinement only ever accepts increases, so the result never falls below
    the best sampled value.
    """
    lat = metric.lattice
    n = metric.n
    P = orthonormal_frame(metric)
    if n == 1:
        Rf = curv.R[..., 0, 0, 0, 0].real * np.abs(P[..., 0, 0]) ** 4
        kappa = -Rf
        directions = P[..., :, 0].copy()
        sample_max = Rf
        count = 1
    else:
        flat_nodes = lat.size
        Pn = P.reshape(flat_nodes, 2, 2)
        Rn = curv.R.reshape(flat_nodes, 2, 2, 2, 2)
        pts = fibonacci_sphere(samples)
        qbest = np.empty(flat_nodes)
        qsample = np.empty(flat_nodes)
        sbest = np.empty((flat_nodes, 3))
        for lo in range(0, flat_nodes, _CHUNK):
            sl = slice(lo, min(lo + _CHUNK, flat_nodes))
            Rf = _frame(Rn[sl], Pn[sl])
            c, b, A = hsc_quadratic(Rf)
            vals = c[:, None] + b @ pts.T + np.einsum("pi,nij,pj->np", pts, A, pts)
            idx = np.argmax(vals, axis=1)
            s0 = pts[idx]
            q0 = vals[np.arange(vals.shape[0]), idx]
            s, q = _refine(c, b, A, s0, q0, refine_steps)
            qbest[sl] = q
            qsample[sl] = q0
            sbest[sl] = s
        kappa = -qbest.reshape(lat.shape)
        sample_max = qsample.reshape(lat.shape)
        w = bloch_to_spinor(sbest)
        directions = np.einsum("nij,nj->ni", Pn, w).reshape(lat.shape + (2,))
        count = samples
    M = (n + 1) / (2 * n) * kappa
    return CurvatureReport(
        lattice=lat,
        kappa=kappa,
        M=M,
        directions=directions,
        lipschitz_estimate=lipschitz_estimate(lat, M),
        argmax_sample_count=count,
        sample_max=sample_max,
    )


def _frame(R: np.ndarray, P: np.ndarray) -> np.ndarray:
    Pc = np.conj(P)
    return np.einsum("nijkl,nia,njb,nkc,nld->nabcd", R, P, Pc, P, Pc, optimize=True)


def lipschitz_estimate(lattice: Lattice, values) -> float:
    """Largest Euclidean gradient norm over the nodes.

    A band-limited field uses its exact spectral gradient. Any other field
    (``kappa`` is a pointwise maximum and only Lipschitz) uses forward
    difference quotients: the spectral derivative of a kink overshoots and
    does not settle under refinement, while difference quotients stay below
    the Lipschitz constant and converge to it.
    """
    values = np.asarray(lattice.check_field(values), dtype=np.float64)
    if grid.tail_energy_fraction(lattice, values) <= grid.RESOLVED_TAIL:
        grads = grid.real_gradient(lattice, values)
    else:
        grads = [(np.roll(values, -1, ax) - values) / h for ax, h in enumerate(lattice.spacing)]
    return float(np.sqrt(np.max(sum(gx**2 for gx in grads))))


def periodic_distance(lattice: Lattice, x0) -> np.ndarray:
    """Minimum-image Euclidean distance from node ``x0`` to every node."""
    d2 = np.zeros(lattice.shape)
    for ax, (c, p) in enumerate(zip(lattice.coords(), lattice.periods)):
        delta = np.abs(c - x0[ax] * lattice.spacing[ax])
        delta = np.minimum(delta, p - delta)
        d2 = d2 + delta**2
    return np.sqrt(d2)


def bump(lattice: Lattice, x0, radius: float) -> np.ndarray:
    r = periodic_distance(lattice, x0) / radius
    out = np.zeros(lattice.shape)
    inside = r < 1.0
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - r[inside] ** 2))
    return out


def spectral_minorant(lattice: Lattice, M, keep: float = 1 / 3) -> tuple[np.ndarray, float]:
    """Band-limited ``M~ <= M``: keep modes with ``|k| <= keep * N`` on every axis, then shift down.

    Returns the minorant and the downward shift that was needed.
    """
    M = np.asarray(lattice.check_field(M), dtype=np.float64)
    coeffs = grid._fft(lattice, M)
    mask = np.ones(lattice.shape, dtype=bool)
    for ax, r in enumerate(lattice.resolution):
        idx = np.abs(np.fft.fftfreq(r, d=1.0 / r))
        shape = [1] * lattice.ndim
        shape[ax] = r
        mask = mask & (idx <= keep * r).reshape(shape)
    low = grid._ifft(lattice, np.where(mask, coeffs, 0.0)).real
    shift = max(0.0, float(np.max(low - M)))
    out = low - shift
    # rounding in the subtraction must not push a node above M
    return np.minimum(out, M), shift


def smooth_minorant(lattice: Lattice, M, x0, radius: float | None = None, level: float = 0.5) -> np.ndarray:
    """Smooth nonnegative bump ``M~ <= M`` centred at ``x0`` with ``M~(x0) = level * M(x0)``.

    The radius is halved until the upper bound holds at every node.
    """
    M = np.asarray(lattice.check_field(M), dtype=np.float64)
    x0 = tuple(int(i) for i in x0)
    peak = float(M[x0])
    if not peak > 0:
        raise ValueError(f"smooth_minorant needs M(x0) > 0, got {peak}")
    if not 0 < level <= 1:
        raise ValueError("level must lie in (0, 1]")
    if np.min(M) < 0:
        raise ValueError(f"a nonnegative minorant needs M >= 0 everywhere, min M = {float(np.min(M))!r}")
    if radius is None:
        radius = 0.25 * min(lattice.periods)
    for _ in range(64):
        mt = level * peak * bump(lattice, x0, radius)
        if np.all(mt <= M):
            return mt
        radius *= 0.5
    raise RuntimeError("smooth_minorant failed to fit under M")
