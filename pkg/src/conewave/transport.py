"""Transport of vertex data along the cone generators.

The leading field of the representation carries the vertex strength J down
each generator with the flat 1/s decay corrected for focusing:

    A(s) = (B(s) / s) P(s) J,   dB/ds = -(1/2) (tr chi - 2/s) B,  B(0) = 1,

with P the parallel propagator (identity for scalar J).  B is evaluated by
4th-order cumulative quadrature of the expansion deviation, which vanishes
at the vertex; in flat space B = 1 and A = J/s exactly.

The error density collects the tangential terms left over when the wave
operator hits the truncated leading term: the sphere Laplacian of A, the
torsion coupling, the mass aspect, and (for vector data) the curvature
coupling to the transverse null direction,

    E = Lap A + zeta^a Dhat_a A + (1/2) mu A [+ (1/2) R(. , A, L_bar, L)].

Stencil-borne pieces of E are zeroed below the coefficient floor, where the
algebraic pieces are exact and the integrand measure is O(s^2) anyway.  No
affine levels are excluded: the report carries an explicit empty exclusion
list so downstream quadratures state their domain.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import geometry as geo
from . import sphere as sph
from .cone import ConeGrid
from .coefficients import (RicciCoefficientField, angular_covariant_derivative,
                           ricci_coefficients, sphere_laplacian)

__all__ = [
    "TransportedField",
    "expansion_deviation",
    "transported_amplitude",
    "transported_field",
    "transport_residual",
    "error_density",
    "slice_normal",
]

_BLOCK_BYTES = 2.0e8


def expansion_deviation(grid: ConeGrid) -> np.ndarray:
    """tr chi - 2/s, regular through the vertex (limit 0)."""
    s = grid.s
    with np.errstate(divide="ignore", invalid="ignore"):
        y = grid.tr_chi - 2.0 / s
    y[:, :, s == 0.0] = 0.0
    return y


def transported_amplitude(grid: ConeGrid) -> np.ndarray:
    """Focusing correction B of the 1/s decay, by cumulative quadrature."""
    y = expansion_deviation(grid)
    cum = np.einsum("kl,ijl->ijk", grid.w_s_cumulative, y)
    return np.exp(-0.5 * cum)


@dataclass
class TransportedField:
    """Leading transported field of one cone and one vertex datum."""
    grid: ConeGrid
    vertex_data: np.ndarray   # () scalar or (4,) chart components at vertex
    rank: int
    B: np.ndarray             # (nt, np, n_s) focusing correction
    amplitude: np.ndarray     # (nt, np, n_s) B/s, zero-filled at the vertex
    A: np.ndarray             # (nt, np, n_s[, 4]) transported field
    excluded_levels: tuple = ()


def transported_field(grid: ConeGrid, vertex_data) -> TransportedField:
    """Transport a scalar or vector vertex datum along every generator."""
    J = np.asarray(vertex_data, dtype=float)
    if J.ndim not in (0, 1) or (J.ndim == 1 and J.shape != (4,)):
        raise ValueError("vertex data must be a scalar or a 4-vector")
    rank = J.ndim
    B = transported_amplitude(grid)
    s = grid.s
    amplitude = np.divide(B, s, out=np.zeros_like(B),
                          where=s > 0.0)
    if rank == 0:
        A = amplitude * float(J)
    else:
        if grid.propagator is None:
            raise ValueError("vector transport needs the parallel "
                             "propagator; build the cone with "
                             "store_propagator=True")
        A = amplitude[..., None] * np.einsum("ijsmn,n->ijsm",
                                             grid.propagator, J)
    return TransportedField(grid=grid, vertex_data=J, rank=rank, B=B,
                            amplitude=amplitude, A=A)


def transport_residual(grid: ConeGrid, tf: TransportedField) -> np.ndarray:
    """Residual of the transport law in regularized form.

    s A is smooth through the vertex, and the law is equivalent to
    D_s(s A) + (1/2)(tr chi - 2/s)(s A) = 0; the returned residual applies
    along-generator stencils to s A and vanishes to stencil-plus-ODE
    tolerance.  Same shape as A.
    """
    sA = grid.s[:, None] * tf.A if tf.rank == 1 else grid.s * tf.A
    res = sph.apply_stencil(grid.ds_weights, grid.ds_index, sA, axis=2)
    if tf.rank == 1:
        nt_, np_ = sA.shape[:2]
        n_s = grid.s.size
        block = max(1, int(_BLOCK_BYTES / (nt_ * np_ * 64 * 8)))
        for k0 in range(0, n_s, block):
            k1 = min(n_s, k0 + block)
            gam = grid.config.entry.christoffel(grid.x[:, :, k0:k1])
            res[:, :, k0:k1] += np.einsum("ijsmnl,ijsn,ijsl->ijsm", gam,
                                          grid.L[:, :, k0:k1],
                                          sA[:, :, k0:k1])
    y = expansion_deviation(grid)
    res += 0.5 * (y[..., None] * sA if tf.rank == 1 else y * sA)
    return res


def error_density(grid: ConeGrid, coeffs: RicciCoefficientField,
                  tf: TransportedField, return_terms: bool = False):
    """Tangential remainder of the wave operator on the leading term.

    Stencil pieces (Laplacian, torsion coupling) are zeroed below the
    coefficient floor and past the common truncation index; the mass-aspect
    and curvature pieces are algebraic there and kept.  With
    ``return_terms=True`` also returns the dict of the summed pieces
    (angular_laplacian, torsion_coupling, mass_aspect, and for vector data
    curvature_coupling), each on the full grid.
    """
    n_s = grid.s.size
    stencil_ok = np.zeros(n_s, dtype=bool)
    stencil_ok[coeffs.floor_index:coeffs.last_index] = True

    lap = sphere_laplacian(grid, tf.A, coeffs=coeffs)
    dhat = angular_covariant_derivative(grid, tf.A, coeffs=coeffs)
    lap[:, :, ~stencil_ok] = 0.0
    if tf.rank == 0:
        torsion = np.einsum("ijsa,ijsa->ijs", coeffs.zeta, dhat)
    else:
        torsion = np.einsum("ijsa,ijsam->ijsm", coeffs.zeta, dhat)
    torsion[:, :, ~stencil_ok] = 0.0
    mass = (0.5 * coeffs.mu * tf.A if tf.rank == 0
            else 0.5 * coeffs.mu[..., None] * tf.A)
    terms = {"angular_laplacian": lap, "torsion_coupling": torsion,
             "mass_aspect": mass}

    if tf.rank == 1:
        # Curvature coupling: (1/2) g^{mn} R_{nlcd} A^l L_bar^c L^d.
        curv = np.zeros_like(tf.A)
        nt_, np_ = grid.det_M.shape[:2]
        block = max(1, int(_BLOCK_BYTES / (nt_ * np_ * 256 * 8)))
        for k0 in range(0, n_s, block):
            k1 = min(n_s, k0 + block)
            xb = grid.x[:, :, k0:k1]
            R = grid.config.entry.riemann(xb)
            ginv = grid.config.entry.inverse_metric(xb)
            curv[:, :, k0:k1] = 0.5 * np.einsum(
                "ijsmn,ijsnlcd,ijsl,ijsc,ijsd->ijsm", ginv, R,
                tf.A[:, :, k0:k1], coeffs.L_bar[:, :, k0:k1],
                grid.L[:, :, k0:k1])
        terms["curvature_coupling"] = curv

    E = sum(terms.values())
    if return_terms:
        return E, terms
    return E


def slice_normal(entry, x: np.ndarray) -> np.ndarray:
    """Future unit normal of the constant-chart-time slices at x."""
    ginv = entry.inverse_metric(x)
    n = -ginv[..., :, 0]
    return n / np.sqrt(-ginv[..., 0, 0])[..., None]
