"""Grids, stencils, and quadrature for cone-adapted sampling.

This module owns the purely combinatorial/numerical pieces shared by the
cone pipeline:

* a product direction grid on the unit sphere (Gauss-Legendre in cos(theta),
  uniform in phi) with solid-angle quadrature weights,
* pole-safe finite-difference stencils in theta (5-point, 4th order, on the
  nonuniform Gauss-Legendre nodes) together with a spectral phi derivative,
* the graded affine-parameter grid along generators and 4th-order
  integration / cumulative-integration / differentiation weights on it.

Angular fields are stored with shape (n_theta, n_phi, ...).  Derivatives in
theta use ghost rows obtained by continuing the grid across the poles: the
parameter points (-theta, phi) and (2*pi - theta, phi) both label the same
sphere point as (theta, phi + pi), so ghost rows are phi-rolled copies of
interior rows.  Each theta-index a sampled component carries flips the sign
of that continuation; callers pass the net sign as ``theta_parity``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * np.pi


# ---------------------------------------------------------------------------
# 1-D nonuniform stencils (shared by the theta and s directions)
# ---------------------------------------------------------------------------

def _stencil_weights(dx: np.ndarray, order: int) -> np.ndarray:
    """Weights w with sum_k w_k f(x0 + dx_k) ~ f^(order)(x0), exact on
    polynomials of degree < len(dx)."""
    m = len(dx)
    scale = np.max(np.abs(dx))
    a = (dx / scale) ** np.arange(m)[:, None]
    rhs = np.zeros(m)
    rhs[order] = 1.0
    from math import factorial

    return np.linalg.solve(a, rhs) * factorial(order) / scale**order


def first_derivative_weights(x: np.ndarray, stencil: int = 5):
    """Per-node first-derivative weights on a nonuniform 1-D grid.

    Returns (weights, index), both (n, stencil); the derivative at node i is
    sum_k weights[i, k] * f[index[i, k]].  Windows are centered where
    possible and one-sided at the ends.
    """
    x = np.asarray(x, dtype=float)
    n = x.size
    if n < stencil:
        raise ValueError(f"need at least {stencil} nodes, got {n}")
    weights = np.zeros((n, stencil))
    index = np.zeros((n, stencil), dtype=np.intp)
    for i in range(n):
        start = min(max(i - stencil // 2, 0), n - stencil)
        cols = np.arange(start, start + stencil)
        index[i] = cols
        weights[i] = _stencil_weights(x[cols] - x[i], order=1)
    return weights, index


def apply_stencil(weights: np.ndarray, index: np.ndarray, f: np.ndarray,
                  axis: int) -> np.ndarray:
    """Apply per-node stencil (weights, index) along the given axis of f."""
    fw = np.moveaxis(f, axis, 0)
    out = np.einsum("ik,ik...->i...", weights, fw[index])
    return np.moveaxis(out, 0, axis)


# ---------------------------------------------------------------------------
# Direction grid on the unit sphere
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DirectionGrid:
    """Product grid on S^2: Gauss-Legendre in cos(theta) x uniform phi.

    weights sum to 4*pi and integrate smooth functions with spectral-grade
    accuracy.  omega holds the Cartesian unit vectors, shape
    (n_theta, n_phi, 3).
    """

    n_theta: int
    n_phi: int
    theta: np.ndarray
    phi: np.ndarray
    weights: np.ndarray
    omega: np.ndarray
    half_phi: int
    ext_source: np.ndarray   # (n_theta + 4,) interior row feeding each ext row
    ext_ghost: np.ndarray    # (n_theta + 4,) True where the row is phi-rolled
    dtheta_weights: np.ndarray  # (n_theta, 5)
    dtheta_index: np.ndarray    # (n_theta, 5) into the extended rows

    def extend_theta(self, f: np.ndarray, theta_parity: int = 1) -> np.ndarray:
        """Continue f across both poles; returns shape (n_theta + 4, n_phi, ...)."""
        rolled = theta_parity * np.roll(f, self.half_phi, axis=1)
        fe = f[self.ext_source]
        ghost = rolled[self.ext_source]
        mask = self.ext_ghost.reshape((-1,) + (1,) * (f.ndim - 1))
        return np.where(mask, ghost, fe)

    def d_theta(self, f: np.ndarray, theta_parity: int = 1) -> np.ndarray:
        """4th-order theta derivative of f (angular axes first)."""
        fe = self.extend_theta(f, theta_parity)
        return np.einsum("ik,ik...->i...", self.dtheta_weights,
                         fe[self.dtheta_index])

    def d_phi(self, f: np.ndarray) -> np.ndarray:
        """Spectral phi derivative of f (angular axes first)."""
        fh = np.fft.rfft(f, axis=1)
        k = np.arange(fh.shape[1])
        shape = [1] * f.ndim
        shape[1] = -1
        fh = fh * (1j * k).reshape(shape)
        if self.n_phi % 2 == 0:
            # the unpaired Nyquist mode has no well-defined odd derivative
            fh[:, -1] = 0.0
        return np.fft.irfft(fh, n=self.n_phi, axis=1)

    def integrate(self, f: np.ndarray) -> np.ndarray:
        """Solid-angle integral over the sphere (angular axes first)."""
        return np.einsum("ij,ij...->...", self.weights, f)


def build_direction_grid(n_theta: int = 32, n_phi: int = 64) -> DirectionGrid:
    if n_phi % 2 != 0:
        raise ValueError("n_phi must be even (pole continuation rolls by pi)")
    if n_theta < 5:
        raise ValueError("n_theta must be at least 5 for the theta stencils")
    x, w_gl = np.polynomial.legendre.leggauss(n_theta)
    theta = np.arccos(x)[::-1].copy()        # ascending in (0, pi)
    w_theta = w_gl[::-1].copy()
    phi = TWO_PI * np.arange(n_phi) / n_phi
    weights = np.outer(w_theta, np.full(n_phi, TWO_PI / n_phi))

    st, ct = np.sin(theta)[:, None], np.cos(theta)[:, None]
    cp, sp = np.cos(phi)[None, :], np.sin(phi)[None, :]
    omega = np.stack([st * cp, st * sp, np.broadcast_to(ct, (n_theta, n_phi))],
                     axis=-1)

    # Extended theta nodes: two ghost rows below 0 and above pi.
    ext_theta = np.concatenate([
        [-theta[1], -theta[0]], theta, [TWO_PI - theta[-1], TWO_PI - theta[-2]],
    ])
    ext_source = np.concatenate([
        [1, 0], np.arange(n_theta), [n_theta - 1, n_theta - 2],
    ]).astype(np.intp)
    ext_ghost = np.zeros(n_theta + 4, dtype=bool)
    ext_ghost[:2] = True
    ext_ghost[-2:] = True

    dtheta_weights = np.zeros((n_theta, 5))
    dtheta_index = np.zeros((n_theta, 5), dtype=np.intp)
    for i in range(n_theta):
        cols = np.arange(i, i + 5)          # centered: ext row i+2 is node i
        dtheta_index[i] = cols
        dtheta_weights[i] = _stencil_weights(ext_theta[cols] - theta[i], order=1)

    return DirectionGrid(
        n_theta=n_theta, n_phi=n_phi, theta=theta, phi=phi, weights=weights,
        omega=omega, half_phi=n_phi // 2, ext_source=ext_source,
        ext_ghost=ext_ghost, dtheta_weights=dtheta_weights,
        dtheta_index=dtheta_index,
    )


# ---------------------------------------------------------------------------
# Affine-parameter grid and quadrature along generators
# ---------------------------------------------------------------------------

def build_s_grid(s_max: float, n_s: int = 400, grading: float = 1.6) -> np.ndarray:
    """Graded nodes s_k = s_max * (k/n)^grading, k = 1..n (vertex excluded)."""
    if s_max <= 0:
        raise ValueError("s_max must be positive")
    k = np.arange(1, n_s + 1, dtype=float)
    return s_max * (k / n_s) ** grading


def _interval_weights(nodes: np.ndarray, a: float, b: float) -> np.ndarray:
    """Quadrature weights on `nodes` integrating polynomials of degree
    < len(nodes) exactly over [a, b]."""
    m = len(nodes)
    c = 0.5 * (a + b)
    scale = max(np.max(np.abs(nodes - c)), 1e-300)
    u = (nodes - c) / scale
    powers = np.arange(1, m + 1)
    mu = (((b - c) / scale) ** powers - ((a - c) / scale) ** powers) / powers
    return np.linalg.solve(u ** np.arange(m)[:, None], mu) * scale


def integration_weights(s: np.ndarray):
    """4th-order weights for integrals from 0 over a graded grid.

    Returns (w, cumulative) with w shape (n,) and cumulative shape (n, n):
    sum_k w[k] f(s_k) ~ integral_0^{s_max} f, and cumulative[i] integrates to
    s_i.  A virtual node at s=0 closes the first window; its weight is
    dropped, so the rule assumes f(0) = 0 (every cone-integrand here vanishes
    at the vertex).
    """
    s = np.asarray(s, dtype=float)
    n = s.size
    t = np.concatenate([[0.0], s])
    contrib = np.zeros((n, n + 1))
    for j in range(n):
        start = min(max(j - 1, 0), n - 3)
        cols = np.arange(start, start + 4)
        contrib[j, cols] = _interval_weights(t[cols], t[j], t[j + 1])
    cumulative = np.cumsum(contrib, axis=0)[:, 1:]
    return cumulative[-1].copy(), cumulative
