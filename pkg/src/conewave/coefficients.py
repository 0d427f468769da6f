"""Connection coefficients of the level spheres foliating a null cone.

The cone module transports an orthonormal screen pair (e1, e2) along each
generator and evolves the Jacobi matrix.  This module adds the transverse
null direction and the angular differential structure of the foliation:

* ``null_conjugate`` solves algebraically for the second null vector L_bar
  with g(L_bar, e_a) = 0, g(L_bar, L) = -2, g(L_bar, L_bar) = 0;
* the level spheres of constant affine parameter are spanned by the angular
  coordinate fields X_A (A in {theta, phi}); their screen block is exact,
  Xi = M . round_basis, while their small component along L is measured with
  centered angular stencils of the sample positions and absorbed into a tilt
  kappa of the sphere-tangent frame, e_tilde_a = e_a + kappa_a L;
* ``ricci_coefficients`` differentiates L and L_bar across neighboring
  generators to form the torsion 1-form zeta, the transverse second
  fundamental form chi_bar, and the mass aspect mu;
* ``angular_covariant_derivative`` and ``sphere_laplacian`` are the
  tangential derivative operators entering the transport error density.

Stencil bookkeeping.  Fields are differenced on the (theta, phi) direction
grid with ghost continuation across the poles; each field carries a parity
under the pole reflection (theta -> -theta, phi -> phi + pi):

* chart components of positions and of spacetime tensors attached to the
  sample point (x, L, L_bar, tensor slots): +1;
* sphere-index components: theta legs flip, phi legs do not (gamma_thth +1,
  gamma_thph -1, gamma_phph +1, sqrt(gamma) -1);
* screen-frame components (kappa_a, zeta_a): -1 per frame index, because
  both screen legs flip across the pole.

All stencil-borne fields are replaced below the coefficient floor
(config.coefficient_floor * s_max) by their vertex asymptotics: the angular
tangent map is O(s) there and inverting it amplifies stencil roundoff
quadratically.  Samples past the common truncation index are zero-filled.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import geometry as geo
from . import sphere as sph
from .cone import ConeGrid

__all__ = [
    "RicciCoefficientField",
    "null_conjugate",
    "ricci_coefficients",
    "mass_aspect",
    "angular_covariant_derivative",
    "sphere_laplacian",
]

# Most temporaries scale with n_samples * 4**k; cap the largest (the Riemann
# tensor, 256 doubles per sample) by slabbing the affine axis.
_BLOCK_BYTES = 2.0e8


def _s_blocks(n_angular: int, n_s: int):
    block = max(1, min(n_s, int(_BLOCK_BYTES / (n_angular * 256 * 8))))
    for k0 in range(0, n_s, block):
        yield k0, min(n_s, k0 + block)


# ---------------------------------------------------------------------------
# transverse null direction
# ---------------------------------------------------------------------------

def null_conjugate(entry, x, L, e1, e2, g=None):
    """Second null direction orthogonal to the screen pair.

    Solved pointwise and algebraically: strip the screen projections off the
    chart time axis, then fix the two coefficients of L_bar = alpha L +
    beta q by g(L_bar, L) = -2 and g(L_bar, L_bar) = 0.  The solution is
    unique and inherits the time orientation of L, so on a backward cone
    both null legs point into the past.  In flat space with L = (-1, omega)
    this returns (-1, -omega).

    Accepts arbitrary leading batch dimensions.
    """
    if g is None:
        g = entry.metric(x)
    t_axis = np.zeros_like(L)
    t_axis[..., 0] = 1.0
    q = t_axis.copy()
    for e in (e1, e2):
        q = q - geo.inner(g, t_axis, e)[..., None] * e
    qL = geo.inner(g, q, L)
    if np.any(np.abs(qL) < 1e-12):
        raise RuntimeError("chart time axis degenerate against a generator")
    qq = geo.inner(g, q, q)
    beta = -2.0 / qL
    alpha = -beta * qq / (2.0 * qL)
    return alpha[..., None] * L + beta[..., None] * q


# ---------------------------------------------------------------------------
# sphere-tangent frame
# ---------------------------------------------------------------------------

@dataclass
class _Tilt:
    """Angular tangent map and the frame tilt relating screen and spheres."""
    Xi: np.ndarray        # (nt, np, S, 2, 2) screen components of X_A
    Xi_inv: np.ndarray    # inverse; zero-filled where degenerate
    kappa: np.ndarray     # (nt, np, S, 2) component of the sphere frame on L
    e_tilde: np.ndarray   # (nt, np, S, 2, 4) sphere-tangent frame
    gamma: np.ndarray     # (nt, np, S, 2, 2) induced metric of the spheres
    gamma_inv: np.ndarray
    sqrt_gamma: np.ndarray
    L_bar_frame: np.ndarray  # (nt, np, S, 4) screen-orthogonal null conjugate
    valid: np.ndarray     # (S,) bool, True where stencil fields are trusted


def _floor_index(grid: ConeGrid) -> int:
    cfg = grid.config
    return int(np.searchsorted(grid.s, cfg.coefficient_floor * cfg.s_max))


def _last_index(grid: ConeGrid) -> int:
    return int(grid.truncation_index.min())


def _check_grid(grid: ConeGrid) -> None:
    if not grid.single_chart:
        raise ValueError(
            "angular differencing mixes neighboring generators and needs "
            "them in one chart; rebuild the cone with a smaller s_max or a "
            "vertex farther from the chart boundary")
    if grid.chart_margin <= 0.0:
        raise ValueError("cone touches its chart boundary")


def _inv2(mat, valid):
    """Inverse of a stacked 2x2 matrix, zero outside the valid s-window."""
    det = mat[..., 0, 0] * mat[..., 1, 1] - mat[..., 0, 1] * mat[..., 1, 0]
    adj = np.empty_like(mat)
    adj[..., 0, 0] = mat[..., 1, 1]
    adj[..., 0, 1] = -mat[..., 0, 1]
    adj[..., 1, 0] = -mat[..., 1, 0]
    adj[..., 1, 1] = mat[..., 0, 0]
    safe = np.where(det != 0.0, det, 1.0)
    out = adj / safe[..., None, None]
    out[:, :, ~valid] = 0.0
    return out


def _frame_tilt(grid: ConeGrid, sl=slice(None), g=None) -> _Tilt:
    """Tangent map of the level spheres on the s-window ``sl``."""
    dg = grid.directions
    x = grid.x[:, :, sl]
    L = grid.L[:, :, sl]
    e1 = grid.e1[:, :, sl]
    e2 = grid.e2[:, :, sl]
    M = grid.M[:, :, sl]
    if g is None:
        g = grid.config.entry.metric(x)

    n_s = grid.s.size
    valid = (np.arange(n_s) >= _floor_index(grid)) \
        & (np.arange(n_s) < _last_index(grid))
    valid = valid[sl]
    if valid.ndim == 0:
        valid = valid[None]

    L_bar = null_conjugate(grid.config.entry, x, L, e1, e2, g=g)
    Xi = np.einsum("ijsbc,ijcA->ijsbA", M, grid.initial.round_basis)
    Xi_inv = _inv2(Xi, valid)

    # Position stencils give the full angular tangent vectors; only their
    # small L component is new information (the screen block is Xi exactly).
    X = np.stack([dg.d_theta(x, 1), dg.d_phi(x)], axis=3)
    gLb = np.einsum("ijsmn,ijsn->ijsm", g, L_bar)
    c = -0.5 * np.einsum("ijsAm,ijsm->ijsA", X, gLb)
    kappa = np.einsum("ijsAb,ijsA->ijsb", Xi_inv, c)
    kappa[:, :, ~valid] = 0.0

    e_stack = np.stack([e1, e2], axis=3)
    e_tilde = e_stack + kappa[..., None] * L[..., None, :]

    gamma = np.einsum("ijsbA,ijsbB->ijsAB", Xi, Xi)
    gamma_inv = _inv2(gamma, valid)
    sqrt_gamma = Xi[..., 0, 0] * Xi[..., 1, 1] - Xi[..., 0, 1] * Xi[..., 1, 0]
    return _Tilt(Xi=Xi, Xi_inv=Xi_inv, kappa=kappa, e_tilde=e_tilde,
                 gamma=gamma, gamma_inv=gamma_inv, sqrt_gamma=sqrt_gamma,
                 L_bar_frame=L_bar, valid=valid)


# ---------------------------------------------------------------------------
# coefficient fields
# ---------------------------------------------------------------------------

@dataclass
class RicciCoefficientField:
    """Connection coefficients of the level-sphere foliation of one cone.

    Stencil-borne fields (zeta, chi_bar, eta_bar, div_zeta, kappa and the
    stencil part of mu) are trusted on s[floor_index:last_index]; below the
    floor they carry their vertex asymptotics (zeta = 0, chi_bar =
    -delta/s, mu = its curvature terms), past the common truncation index
    they are zero.
    """
    grid: ConeGrid
    L_bar: np.ndarray        # (nt, np, S, 4) null conjugate of the spheres
    zeta: np.ndarray         # (nt, np, S, 2) torsion 1-form, frame components
    chi_bar: np.ndarray      # (nt, np, S, 2, 2) transverse expansion tensor
    eta_bar: np.ndarray      # (nt, np, S, 2) transverse tilt (diagnostic)
    mu: np.ndarray           # (nt, np, S) mass aspect
    mu_terms: dict           # named contributions to mu
    div_zeta: np.ndarray     # (nt, np, S) sphere divergence of zeta
    kappa: np.ndarray
    Xi: np.ndarray
    Xi_inv: np.ndarray
    gamma: np.ndarray
    gamma_inv: np.ndarray
    sqrt_gamma: np.ndarray
    e_tilde: np.ndarray
    floor_index: int
    last_index: int

    @property
    def chi_bar_hat(self) -> np.ndarray:
        sym = 0.5 * (self.chi_bar + np.swapaxes(self.chi_bar, -1, -2))
        tr = sym[..., 0, 0] + sym[..., 1, 1]
        return sym - 0.5 * tr[..., None, None] * np.eye(2)


def _curvature_contractions(entry, x, L, L_bar):
    """Ric(L_bar, L) and R(L_bar, L, L_bar, L), slabbed over samples."""
    shp = x.shape[:-1]
    xf = x.reshape(-1, 4)
    Lf = L.reshape(-1, 4)
    Lbf = L_bar.reshape(-1, 4)
    ric_out = np.empty(xf.shape[0])
    riem_out = np.empty(xf.shape[0])
    block = max(1, int(_BLOCK_BYTES / (256 * 8)))
    for a in range(0, xf.shape[0], block):
        b = min(xf.shape[0], a + block)
        R = entry.riemann(xf[a:b])
        ginv = entry.inverse_metric(xf[a:b])
        ric = geo.ricci_from_riemann(ginv, R)
        ric_out[a:b] = np.einsum("nmk,nm,nk->n", ric, Lbf[a:b], Lf[a:b])
        riem_out[a:b] = np.einsum("nabcd,na,nb,nc,nd->n", R, Lbf[a:b],
                                  Lf[a:b], Lbf[a:b], Lf[a:b])
    return ric_out.reshape(shp), riem_out.reshape(shp)


def ricci_coefficients(grid: ConeGrid) -> RicciCoefficientField:
    """Torsion, transverse expansion and mass aspect of the level spheres.

    Requires a single-chart cone (angular stencils mix neighboring
    generators).  Directional derivatives along the sphere-tangent frame
    combine 4th-order theta stencils and spectral phi derivatives of chart
    components with the connection correction, all evaluated in slabs of
    affine levels to bound memory.

    The mass aspect is assembled as

        mu = 2 div zeta - chi_hat : chi_bar_hat + 2 |zeta|^2
             - Ric(L_bar, L) + (1/2) Riem(L_bar, L, L_bar, L)

    in the conventions of the geometry module (fully lowered Riemann,
    Ric_bd = g^ac R_abcd).  The curvature signs are pinned by identity
    closure: the static cylinder (where the Riemann contraction vanishes
    and Ric(L_bar, L) = -2) fixes the Ricci term, and vacuum entries
    (where Ricci vanishes) fix the Riemann term.
    """
    _check_grid(grid)
    entry = grid.config.entry
    dg = grid.directions
    nt_, np_ = grid.det_M.shape[:2]
    n_s = grid.s.size
    k_floor = _floor_index(grid)
    k_last = _last_index(grid)

    g = entry.metric(grid.x)
    tilt = _frame_tilt(grid, g=g)
    valid = tilt.valid

    # Foliation-adapted conjugate null: orthogonal to the level spheres.
    kap = tilt.kappa
    e_stack = np.stack([grid.e1, grid.e2], axis=3)
    L_bar = (tilt.L_bar_frame
             + 2.0 * np.einsum("ijsa,ijsam->ijsm", kap, e_stack)
             + np.einsum("ijsa,ijsa->ijs", kap, kap)[..., None] * grid.L)

    # Parameter derivatives across generators (chart components, parity +1).
    dL = np.stack([dg.d_theta(grid.L, 1), dg.d_phi(grid.L)], axis=3)
    dLb = np.stack([dg.d_theta(L_bar, 1), dg.d_phi(L_bar)], axis=3)
    DL = np.einsum("ijsAa,ijsAm->ijsam", tilt.Xi_inv, dL)
    DLb = np.einsum("ijsAa,ijsAm->ijsam", tilt.Xi_inv, dLb)
    DsLb = sph.apply_stencil(grid.ds_weights, grid.ds_index, L_bar, axis=2)

    # Connection corrections, slabbed.
    for k0, k1 in _s_blocks(nt_ * np_, n_s):
        gam = entry.christoffel(grid.x[:, :, k0:k1])
        Gae = np.einsum("ijsmnl,ijsan->ijsaml", gam, tilt.e_tilde[:, :, k0:k1])
        DL[:, :, k0:k1] += np.einsum("ijsaml,ijsl->ijsam", Gae,
                                     grid.L[:, :, k0:k1])
        DLb[:, :, k0:k1] += np.einsum("ijsaml,ijsl->ijsam", Gae,
                                      L_bar[:, :, k0:k1])
        DsLb[:, :, k0:k1] += np.einsum("ijsmnl,ijsn,ijsl->ijsm", gam,
                                       grid.L[:, :, k0:k1], L_bar[:, :, k0:k1])

    gLb = np.einsum("ijsmn,ijsn->ijsm", g, L_bar)
    ge = np.einsum("ijsmn,ijsbn->ijsbm", g, e_stack)
    zeta = 0.5 * np.einsum("ijsam,ijsm->ijsa", DL, gLb)
    chi_bar = np.einsum("ijsam,ijsbm->ijsab", DLb, ge)
    eta_bar = 0.5 * np.einsum("ijsbm,ijsm->ijsb", ge, DsLb)

    zeta[:, :, ~valid] = 0.0
    eta_bar[:, :, ~valid] = 0.0
    with np.errstate(divide="ignore"):
        fill = -1.0 / np.where(grid.s > 0.0, grid.s, np.inf)
    chi_bar[:, :, ~valid] = 0.0
    chi_bar[:, :, ~valid, 0, 0] = fill[~valid]
    chi_bar[:, :, ~valid, 1, 1] = fill[~valid]
    chi_bar[:, :, k_last:] = 0.0

    # Sphere divergence of zeta in conservative form; the flux components
    # carry parities (+1, -1) as tabulated in the module docstring.
    zeta_A = np.einsum("ijsa,ijsaA->ijsA", zeta, tilt.Xi)
    zeta_up = np.einsum("ijsAB,ijsB->ijsA", tilt.gamma_inv, zeta_A)
    flux_th = tilt.sqrt_gamma * zeta_up[..., 0]
    flux_ph = tilt.sqrt_gamma * zeta_up[..., 1]
    safe = np.where(tilt.sqrt_gamma != 0.0, tilt.sqrt_gamma, 1.0)
    div_zeta = (dg.d_theta(flux_th, 1) + dg.d_phi(flux_ph)) / safe
    div_zeta[:, :, ~valid] = 0.0

    ric_LbL, riem_LbLLbL = _curvature_contractions(entry, grid.x, grid.L,
                                                   L_bar)
    sym = 0.5 * (chi_bar + np.swapaxes(chi_bar, -1, -2))
    tr = sym[..., 0, 0] + sym[..., 1, 1]
    chi_bar_hat = sym - 0.5 * tr[..., None, None] * np.eye(2)
    mu_terms = {
        "div_zeta": 2.0 * div_zeta,
        "shear_cross": -np.einsum("ijsab,ijsab->ijs", grid.hat_chi,
                                  chi_bar_hat),
        "zeta_sq": 2.0 * np.einsum("ijsa,ijsa->ijs", zeta, zeta),
        "ricci": -ric_LbL,
        "riemann": 0.5 * riem_LbLLbL,
    }
    mu = sum(mu_terms.values())
    mu[:, :, k_last:] = 0.0

    return RicciCoefficientField(
        grid=grid, L_bar=L_bar, zeta=zeta, chi_bar=chi_bar, eta_bar=eta_bar,
        mu=mu, mu_terms=mu_terms, div_zeta=div_zeta, kappa=kap, Xi=tilt.Xi,
        Xi_inv=tilt.Xi_inv, gamma=tilt.gamma, gamma_inv=tilt.gamma_inv,
        sqrt_gamma=tilt.sqrt_gamma, e_tilde=tilt.e_tilde,
        floor_index=k_floor, last_index=k_last)


def mass_aspect(obj) -> np.ndarray:
    """Mass aspect of the level spheres: the angular-average source of the
    expansion balance.  Accepts a cone or a precomputed coefficient field."""
    if isinstance(obj, RicciCoefficientField):
        return obj.mu
    return ricci_coefficients(obj).mu


# ---------------------------------------------------------------------------
# tangential derivative operators
# ---------------------------------------------------------------------------

def _resolve_window(grid, field, level):
    """Common (slice, field-with-s-axis, rank) handling for the operators."""
    if level is None:
        sl = slice(None)
        rank = field.ndim - 3
    else:
        sl = slice(level, level + 1)
        field = field[:, :, None]
        rank = field.ndim - 3
    if rank < 0 or rank > 4 or field.shape[3:] != (4,) * rank:
        raise ValueError("field must carry 0..4 chart slots of size 4")
    return sl, field, rank


def _tilt_window(grid, coeffs, sl):
    if coeffs is not None:
        return (coeffs.Xi[:, :, sl], coeffs.Xi_inv[:, :, sl],
                coeffs.e_tilde[:, :, sl], coeffs.gamma[:, :, sl],
                coeffs.gamma_inv[:, :, sl], coeffs.sqrt_gamma[:, :, sl])
    t = _frame_tilt(grid, sl)
    return t.Xi, t.Xi_inv, t.e_tilde, t.gamma, t.gamma_inv, t.sqrt_gamma


def angular_covariant_derivative(grid: ConeGrid, field: np.ndarray,
                                 level: Optional[int] = None,
                                 coeffs: Optional[RicciCoefficientField] = None
                                 ) -> np.ndarray:
    """Covariant derivative along the sphere-tangent frame directions.

    ``field`` holds chart components with 0..4 contravariant slots, shaped
    (nt, np, n_s, 4, ...) or (nt, np, 4, ...) with ``level`` given.  The
    result carries a new frame axis (the two sphere-tangent directions)
    right after the grid axes.  Chart components are differenced across
    generators (4th-order in theta, spectral in phi) and corrected with the
    connection once per slot.
    """
    _check_grid(grid)
    sl, f, rank = _resolve_window(grid, field, level)
    _, Xi_inv, e_tilde, _, _, _ = _tilt_window(grid, coeffs, sl)
    dg = grid.directions

    dA = np.stack([dg.d_theta(f, 1), dg.d_phi(f)], axis=3)
    out = np.einsum("ijsAa,ijsA...->ijsa...", Xi_inv, dA)

    if rank > 0:
        nt_, np_ = f.shape[:2]
        n_win = f.shape[2]
        x = grid.x[:, :, sl]
        for k0, k1 in _s_blocks(nt_ * np_, n_win):
            gam = grid.config.entry.christoffel(x[:, :, k0:k1])
            Gae = np.einsum("ijsmnl,ijsan->ijsaml", gam,
                            e_tilde[:, :, k0:k1])
            for slot in range(rank):
                mv = np.moveaxis(f[:, :, k0:k1], 3 + slot, -1)
                corr = np.einsum("ijsaml,ijs...l->ijsa...m", Gae, mv)
                out[:, :, k0:k1] += np.moveaxis(corr, -1, 4 + slot)
    return out[:, :, 0] if level is not None else out


def sphere_laplacian(grid: ConeGrid, field: np.ndarray,
                     level: Optional[int] = None,
                     coeffs: Optional[RicciCoefficientField] = None
                     ) -> np.ndarray:
    """Laplace-Beltrami operator of the level spheres, slot-covariant.

    Scalars use the induced sphere metric gamma built from the Jacobi map;
    tensor slots are corrected with the spacetime connection along the
    angular tangent vectors, and the sphere indices with the Christoffel
    symbols of gamma obtained by differencing it.  On a flat cone the
    spherical harmonic with one node gives -2/s^2 times itself.
    """
    _check_grid(grid)
    sl, f, rank = _resolve_window(grid, field, level)
    Xi, _, e_tilde, gamma, gamma_inv, sqrt_gamma = _tilt_window(
        grid, coeffs, sl)
    dg = grid.directions
    entry = grid.config.entry
    x = grid.x[:, :, sl]
    L = grid.L[:, :, sl]
    nt_, np_ = f.shape[:2]
    n_win = f.shape[2]

    # Full angular tangent vectors X_A = Xi_{bA} e_tilde_b.
    X = np.einsum("ijsbA,ijsbm->ijsAm", Xi, e_tilde)
    out = np.zeros_like(f)
    b_parity = (-1, 1)

    for k0, k1 in _s_blocks(nt_ * np_, n_win):
        fb = f[:, :, k0:k1]
        Xb = X[:, :, k0:k1]
        gb = gamma[:, :, k0:k1]
        gib = gamma_inv[:, :, k0:k1]

        gam = entry.christoffel(x[:, :, k0:k1]) if rank > 0 else None
        GX = (np.einsum("ijsmnl,ijsAn->ijsAml", gam, Xb)
              if rank > 0 else None)

        # First tangential derivative with slot corrections.
        G = np.stack([dg.d_theta(fb, 1), dg.d_phi(fb)], axis=3)
        if rank > 0:
            for slot in range(rank):
                mv = np.moveaxis(fb, 3 + slot, -1)
                corr = np.einsum("ijsAml,ijs...l->ijsA...m", GX, mv)
                G += np.moveaxis(corr, -1, 4 + slot)

        # Christoffel symbols of the sphere metric from its stencils.
        dg_th = np.empty_like(gb)
        dg_th[..., 0, 0] = dg.d_theta(gb[..., 0, 0], 1)
        dg_th[..., 0, 1] = dg.d_theta(gb[..., 0, 1], -1)
        dg_th[..., 1, 0] = dg_th[..., 0, 1]
        dg_th[..., 1, 1] = dg.d_theta(gb[..., 1, 1], 1)
        dgam = np.stack([dg_th, dg.d_phi(gb)], axis=3)  # [E, A, B]
        chr2 = 0.5 * (np.einsum("ijsCD,ijsADB->ijsCAB", gib, dgam)
                      + np.einsum("ijsCD,ijsBDA->ijsCAB", gib, dgam)
                      - np.einsum("ijsCD,ijsDAB->ijsCAB", gib, dgam))

        acc = np.zeros_like(fb)
        for B in (0, 1):
            GB = G[:, :, :, B]
            dGB = (dg.d_theta(GB, b_parity[B]), dg.d_phi(GB))
            for A in (0, 1):
                term = dGB[A].copy()
                if rank > 0:
                    for slot in range(rank):
                        mv = np.moveaxis(GB, 3 + slot, -1)
                        corr = np.einsum("ijsml,ijs...l->ijs...m",
                                         GX[:, :, :, A], mv)
                        term += np.moveaxis(corr, -1, 3 + slot)
                term -= np.einsum("ijsC,ijsC...->ijs...",
                                  chr2[:, :, :, :, A, B], G)
                w = gib[..., A, B]
                acc += w.reshape(w.shape + (1,) * rank) * term
        out[:, :, k0:k1] = acc
    return out[:, :, 0] if level is not None else out
