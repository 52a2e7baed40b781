"""Periodic lattices and Fourier-spectral Wirtinger calculus on real 2n-tori.

Real axes are ordered ``(x_1, y_1, ..., x_n, y_n)`` with ``z_a = x_a + i y_a``.
Fields are plain numpy arrays whose leading axes match ``Lattice.shape``;
metric-like stacks carry trailing ``(n, n)`` matrix axes.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import math

import numpy as np
import scipy.fft as sfft

logger = logging.getLogger(__name__)

MIN_RESOLUTION = 8
TAIL_ENERGY_WARNING = 1e-6
# top-octave energy fraction at or below which a field counts as band-limited
RESOLVED_TAIL = 1e-20


class MeanProjectionWarning(UserWarning):
    """Right-hand side of a periodic Poisson problem had a non-negligible mean."""


class ResolutionWarning(UserWarning):
    """Top-octave spectral energy above the adequacy threshold."""


def _is_power_of_two(k: int) -> bool:
    return k > 0 and (k & (k - 1)) == 0


@dataclass(frozen=True)
class Lattice:
    dim_c: int
    periods: tuple[float, ...]
    resolution: tuple[int, ...]

    def __post_init__(self):
        if self.dim_c not in (1, 2):
            raise ValueError(f"dim_c must be 1 or 2, got {self.dim_c}")
        if len(self.periods) != 2 * self.dim_c or len(self.resolution) != 2 * self.dim_c:
            raise ValueError(
                f"need {2 * self.dim_c} periods and resolutions, "
                f"got {len(self.periods)} and {len(self.resolution)}"
            )
        for p in self.periods:
            if not (p > 0 and np.isfinite(p)):
                raise ValueError(f"periods must be positive, got {self.periods}")
        for r in self.resolution:
            if not _is_power_of_two(r) or r < MIN_RESOLUTION:
                raise ValueError(
                    f"resolution {r} is not a power of two >= {MIN_RESOLUTION}"
                )

    @property
    def ndim(self) -> int:
        return 2 * self.dim_c

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.resolution)

    @property
    def size(self) -> int:
        return int(np.prod(self.resolution))

    @property
    def volume(self) -> float:
        return float(np.prod(self.periods))

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple(p / r for p, r in zip(self.periods, self.resolution))

    @property
    def axes(self) -> tuple[int, ...]:
        return tuple(range(self.ndim))

    def coords(self) -> list[np.ndarray]:
        """Node coordinates per real axis, shaped for broadcasting."""
        out = []
        for ax, (p, r) in enumerate(zip(self.periods, self.resolution)):
            shape = [1] * self.ndim
            shape[ax] = r
            out.append((np.arange(r) * (p / r)).reshape(shape))
        return out

    def node_coords(self, node) -> np.ndarray:
        return np.array([i * h for i, h in zip(node, self.spacing)])

    @cached_property
    def _k_full(self) -> list[np.ndarray]:
        ks = []
        for ax, (p, r) in enumerate(zip(self.periods, self.resolution)):
            shape = [1] * self.ndim
            shape[ax] = r
            ks.append((2 * np.pi * sfft.fftfreq(r, d=p / r)).reshape(shape))
        return ks

    @cached_property
    def _k_odd(self) -> list[np.ndarray]:
        # Nyquist mode has no well-defined odd derivative on an even grid
        ks = []
        for k, r in zip(self._k_full, self.resolution):
            k = k.copy()
            k.flat[r // 2] = 0.0
            ks.append(k)
        return ks

    def wavenumbers(self, axis: int, odd: bool = True) -> np.ndarray:
        return (self._k_odd if odd else self._k_full)[axis]

    @cached_property
    def flat_symbol(self) -> np.ndarray:
        """Fourier symbol of sum_a d_{z_a} d_{zbar_a} (a quarter of the real Laplacian)."""
        s = np.zeros(self.shape)
        for k in self._k_odd:
            s = s - 0.25 * k**2
        return s

    def check_field(self, values, name: str = "field") -> np.ndarray:
        arr = np.asarray(values)
        if arr.shape[: self.ndim] != self.shape:
            raise ValueError(f"{name} has shape {arr.shape}, lattice expects {self.shape}")
        return arr


def make_lattice(dim_c: int, periods, resolution) -> Lattice:
    """Build a uniform periodic lattice; see :class:`Lattice` for validation rules."""
    return Lattice(int(dim_c), tuple(float(p) for p in periods), tuple(int(r) for r in resolution))


def real_field(lattice: Lattice, values) -> np.ndarray:
    """Validated read-only float64 copy; broadcastable inputs are expanded to the lattice."""
    arr = np.asarray(values)
    if arr.shape != lattice.shape:
        try:
            arr = np.broadcast_to(arr, lattice.shape)
        except ValueError:
            raise ValueError(f"field has shape {arr.shape}, lattice expects {lattice.shape}") from None
    if np.iscomplexobj(arr):
        if np.any(arr.imag != 0):
            raise ValueError("real field has nonzero imaginary content")
        arr = arr.real
    arr = np.array(arr, dtype=np.float64)
    arr.flags.writeable = False
    return arr


# --- spectral transforms -------------------------------------------------------


def _fft(lattice: Lattice, field: np.ndarray) -> np.ndarray:
    return sfft.fftn(field, axes=lattice.axes)


def _ifft(lattice: Lattice, coeffs: np.ndarray) -> np.ndarray:
    return sfft.ifftn(coeffs, axes=lattice.axes)


def _expand(sym: np.ndarray, field: np.ndarray, lattice: Lattice) -> np.ndarray:
    # broadcast a lattice-shaped symbol over trailing matrix axes
    return sym.reshape(sym.shape + (1,) * (field.ndim - lattice.ndim))


def _dz_symbol(lattice: Lattice, a: int, conjugate: bool) -> np.ndarray:
    kx = lattice.wavenumbers(2 * a)
    ky = lattice.wavenumbers(2 * a + 1)
    # d/dz = (d/dx - i d/dy)/2 ; d/dzbar = (d/dx + i d/dy)/2
    return 0.5 * (1j * kx - ky) if conjugate else 0.5 * (1j * kx + ky)


def _ddbar_symbol(lattice: Lattice, a: int, b: int) -> np.ndarray:
    # every second-derivative symbol is the product of two Nyquist-filtered
    # first-derivative symbols; mixing conventions would break the discrete
    # identity int ddbar(a) ^ ddbar(b) = 0 at the Nyquist modes
    if a == b:
        kx = lattice.wavenumbers(2 * a)
        ky = lattice.wavenumbers(2 * a + 1)
        return -0.25 * (kx**2 + ky**2)
    return _dz_symbol(lattice, a, False) * _dz_symbol(lattice, b, True)


def wirtinger_derivative(lattice: Lattice, field, axis: int, conjugate: bool = False) -> np.ndarray:
    r"""Spectral Wirtinger derivative :math:`\partial_{z_a}` (or :math:`\partial_{\bar z_a}`).

    Exact on band-limited fields. Always returns a complex array.
    """
    if not 0 <= axis < lattice.dim_c:
        raise IndexError(f"complex axis {axis} out of range for dim_c={lattice.dim_c}")
    field = lattice.check_field(field)
    sym = _expand(_dz_symbol(lattice, axis, conjugate), field, lattice)
    return _ifft(lattice, sym * _fft(lattice, field))


def real_gradient(lattice: Lattice, field) -> list[np.ndarray]:
    """Spectral derivatives along each real axis of a real field."""
    coeffs = _fft(lattice, lattice.check_field(field))
    return [
        _ifft(lattice, 1j * _expand(lattice.wavenumbers(ax), coeffs, lattice) * coeffs).real
        for ax in lattice.axes
    ]


def ddbar(lattice: Lattice, field, a: int, b: int) -> np.ndarray:
    r""":math:`\partial_{z_a}\partial_{\bar z_b}` of a field (complex result)."""
    field = lattice.check_field(field)
    sym = _expand(_ddbar_symbol(lattice, a, b), field, lattice)
    return _ifft(lattice, sym * _fft(lattice, field))


def complex_hessian(lattice: Lattice, field) -> np.ndarray:
    r"""Stack ``H[..., a, b] = d_{z_a} d_{zbar_b} field`` of a real scalar field.

    The result is Hermitian at every node exactly (lower triangle is the
    conjugate of the upper one).
    """
    field = lattice.check_field(field)
    n = lattice.dim_c
    # the mean carries no derivative but inflates FFT roundoff in every mode
    coeffs = _fft(lattice, field - np.mean(field))
    out = np.empty(lattice.shape + (n, n), dtype=np.complex128)
    for a in range(n):
        out[..., a, a] = _ifft(lattice, _ddbar_symbol(lattice, a, a) * coeffs).real
        for b in range(a + 1, n):
            h = _ifft(lattice, _ddbar_symbol(lattice, a, b) * coeffs)
            out[..., a, b] = h
            out[..., b, a] = h.conj()
    return out


def flat_laplacian(lattice: Lattice, field) -> np.ndarray:
    r"""Flat :math:`\sum_a \partial_{z_a}\partial_{\bar z_a}`, a quarter of the real Laplacian."""
    field = lattice.check_field(field)
    out = _ifft(lattice, _expand(lattice.flat_symbol, field, lattice) * _fft(lattice, field))
    return out if np.iscomplexobj(field) else out.real


def integrate(lattice: Lattice, density) -> float:
    """Trapezoidal (spectrally accurate) integral over the torus.

    The node sum is compensated so that integrals which vanish exactly, such
    as those of wedge products of exact forms, come out at rounding level of
    the individual terms rather than of their running total.
    """
    density = lattice.check_field(density)
    return math.fsum(np.asarray(density, dtype=float).ravel()) / lattice.size * lattice.volume


def solve_flat_poisson(lattice: Lattice, rhs) -> np.ndarray:
    """Zero-mean ``h`` with ``flat_laplacian(h) = rhs``, inverted mode by mode.

    A right-hand side whose mean exceeds ``1e-10 * max|rhs|`` is projected to
    zero mean and a :class:`MeanProjectionWarning` is emitted. Modes on which
    the filtered symbol vanishes (the mean and pure Nyquist combinations) are
    set to zero in the solution.
    """
    rhs = np.asarray(lattice.check_field(rhs), dtype=np.float64)
    scale = float(np.max(np.abs(rhs))) if rhs.size else 0.0
    if scale == 0.0:
        return np.zeros(lattice.shape)
    mean = float(np.mean(rhs))
    if abs(mean) > 1e-10 * scale:
        warnings.warn(
            f"poisson rhs mean {mean:.3e} projected out (sup {scale:.3e})",
            MeanProjectionWarning,
            stacklevel=2,
        )
    coeffs = _fft(lattice, rhs)
    sym = lattice.flat_symbol
    kernel = sym == 0
    coeffs = np.where(kernel, 0.0, coeffs / np.where(kernel, 1.0, sym))
    return _ifft(lattice, coeffs).real


def solve_constant_coefficient(lattice: Lattice, rhs, coef: np.ndarray, shift: float) -> np.ndarray:
    r"""Solve :math:`(\sum_{ab} A^{ab}\partial_a\partial_{\bar b} - c)h = \mathrm{rhs}` with constant ``A``.

    With ``c = 0`` the operator is singular; modes in its kernel are set to
    zero, which makes the result a pseudo-inverse usable as a preconditioner.
    """
    rhs = lattice.check_field(rhs)
    n = lattice.dim_c
    sym = np.zeros(lattice.shape, dtype=np.complex128)
    for a in range(n):
        for b in range(n):
            sym = sym + coef[a, b] * _ddbar_symbol(lattice, b, a)
    sym = sym - shift
    kernel = np.abs(sym) == 0
    coeffs = _fft(lattice, rhs)
    out = _ifft(lattice, np.where(kernel, 0.0, coeffs / np.where(kernel, 1.0, sym)))
    return out if np.iscomplexobj(rhs) else out.real


def extrema(lattice: Lattice, field) -> tuple[float, float, tuple[int, ...], tuple[int, ...]]:
    """``(min, max, argmin node, argmax node)``; ties resolve to the first node in C order."""
    field = np.asarray(lattice.check_field(field))
    imin = int(np.argmin(field))
    imax = int(np.argmax(field))
    return (
        float(field.flat[imin]),
        float(field.flat[imax]),
        tuple(int(i) for i in np.unravel_index(imin, lattice.shape)),
        tuple(int(i) for i in np.unravel_index(imax, lattice.shape)),
    )


def sup_norm(field) -> float:
    return float(np.max(np.abs(field)))


def tail_energy_fraction(lattice: Lattice, field) -> float:
    """Fraction of spectral energy in the top octave of any axis."""
    coeffs = _fft(lattice, lattice.check_field(field))
    power = np.abs(coeffs) ** 2
    power = power.reshape(lattice.shape + (-1,)).sum(axis=-1)
    total = power.sum()
    if total == 0:
        return 0.0
    mask = np.zeros(lattice.shape, dtype=bool)
    for ax, r in enumerate(lattice.resolution):
        idx = np.abs(sfft.fftfreq(r, d=1.0 / r))
        shape = [1] * lattice.ndim
        shape[ax] = r
        mask = mask | (idx > r // 4).reshape(shape)
    # total energy includes the mean mode, so a constant field reports zero
    return float(power[mask].sum() / total)


def check_resolution(lattice: Lattice, field, name: str = "field") -> float:
    frac = tail_energy_fraction(lattice, field)
    if frac > TAIL_ENERGY_WARNING:
        warnings.warn(f"{name}: top-octave energy fraction {frac:.2e}", ResolutionWarning, stacklevel=2)
    return frac


# --- field dump format ---------------------------------------------------------


def dump_field(path, lattice: Lattice, field, field_name: str) -> Path:
    """Write ``<path>.f64`` (little-endian, C order) plus a ``<path>.json`` sidecar."""
    path = Path(path)
    field = np.asarray(lattice.check_field(field))
    if field.shape != lattice.shape:
        raise ValueError("only scalar fields can be dumped")
    kind = "complex" if np.iscomplexobj(field) else "real"
    dtype = "<c16" if kind == "complex" else "<f8"
    data = np.ascontiguousarray(field, dtype=dtype)
    bin_path = path.with_suffix(".f64")
    bin_path.write_bytes(data.tobytes(order="C"))
    sidecar = {
        "dim_c": lattice.dim_c,
        "periods": list(lattice.periods),
        "resolution": list(lattice.resolution),
        "field_name": field_name,
        "kind": kind,
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, sort_keys=True, indent=2) + "\n")
    return bin_path


def load_field(path) -> tuple[Lattice, np.ndarray, str]:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    lattice = make_lattice(meta["dim_c"], meta["periods"], meta["resolution"])
    dtype = "<c16" if meta["kind"] == "complex" else "<f8"
    raw = np.frombuffer(path.with_suffix(".f64").read_bytes(), dtype=dtype)
    if raw.size != lattice.size:
        raise ValueError(f"{path}: {raw.size} values for {lattice.size} nodes")
    values = raw.reshape(lattice.shape).astype(np.complex128 if meta["kind"] == "complex" else np.float64)
    return lattice, values, meta["field_name"]
