"""Reference computations that share no code with the package."""

import numpy as np


def conformal_semilinear(f, periods, eps, tol=1e-13, max_iter=5000):
    """Solve ``eps e^f + dd(f) + dd(u) = e^{u+f}`` on a periodic 2-torus, ``dd = Laplacian / 4``.

    This is the scalar form of the n = 1 twisted equation for the conformal
    metric ``g = e^f`` with twist ``-Ric(g) = dd(log g)``. Iterates the
    stabilized fixed point ``(dd - c) u_new = e^f (e^u - eps) - dd(f) - c u``
    with ``c = max e^{f+u}``, inverted mode by mode with plain numpy FFTs.
    """
    f = np.asarray(f, dtype=float)
    kx = 2 * np.pi * np.fft.fftfreq(f.shape[0], d=periods[0] / f.shape[0])
    ky = 2 * np.pi * np.fft.fftfreq(f.shape[1], d=periods[1] / f.shape[1])
    sym = -0.25 * (kx[:, None] ** 2 + ky[None, :] ** 2)

    def dd(h):
        return np.fft.ifft2(sym * np.fft.fft2(h)).real

    ddf = dd(f)
    u = np.full(f.shape, np.log(eps))
    for it in range(max_iter):
        c = float(np.max(np.exp(f + u)))
        rhs = np.exp(f) * (np.exp(u) - eps) - ddf - c * u
        new = np.fft.ifft2(np.fft.fft2(rhs) / (sym - c)).real
        step = float(np.max(np.abs(new - u)))
        u = new
        if step < tol:
            return u, it + 1
    raise RuntimeError(f"fixed point did not converge (last step {step:.2e})")


def product_hsc_max(h1, h2):
    """max over t in [0, 1] of ``h1 t^2 + h2 (1 - t)^2`` (HSC of a product in a unit direction)."""
    best = np.maximum(h1, h2)
    s = h1 + h2
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(s < 0, h2 / s, -1.0)
    inside = (t >= 0) & (t <= 1)
    return np.where(inside, np.maximum(best, h1 * h2 / np.where(inside, s, 1.0)), best)
