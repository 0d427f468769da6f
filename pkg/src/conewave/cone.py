"""Backward null cone of a vertex point.

The cone is built by integrating, for every direction on a product grid over
the celestial sphere of the vertex, the coupled system of

* the null geodesic (position and tangent L),
* parallel transport of a two-vector screen frame (e1, e2) and of the
  vertex observer,
* the 2x2 screen Jacobi matrix M with M(0) = 0, M'(0) = I, governed by
  M'' = -R(e_a, L, e_b, L) M,
* optionally the full parallel propagator (needed for tensor transport).

All generators share one graded affine-parameter grid so that angular
derivatives across neighboring generators are well defined.  The expansion
tr(chi) and shear are read off M' M^{-1} away from the vertex and from the
curvature asymptotics below a floor where M is numerically rank-deficient.
Conjugate points are located from sign changes or near-tangential minima of
det M and refined on a dense re-integration.  For the flat cylinder the
wrap-around self-intersection of the cone is detected from mirror-direction
generator pairs mapped to the fundamental domain.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.integrate import solve_ivp

from . import geometry as geo
from . import sphere as sph

#: state layout per generator: x, L, e1, e2, transported observer, M, M'
_N_BASE = 28
#: with the 4x4 parallel propagator appended
_N_FULL = 44


# ---------------------------------------------------------------------------
# configuration and result types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VertexConfig:
    """Vertex point, observer, and discretization of one backward cone."""

    entry: geo.Spacetime
    point: np.ndarray
    observer: Optional[np.ndarray] = None   # defaults to the chart-time axis
    s_max: float = 1.0
    n_theta: int = 32
    n_phi: int = 64
    n_s: int = 400
    grading: float = 1.6
    rtol: float = 1e-11
    atol: float = 1e-13
    vertex_floor: float = 1e-3              # fraction of s_max
    coefficient_floor: float = 5e-3         # fraction of s_max, for stencil fields
    truncation_margin: int = 2              # grid steps short of a terminal point
    n_chunks: int = 8
    store_propagator: bool = False
    frame_rotation: float = 0.0             # rigid rotation of the screen pair
    workers: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "point", np.asarray(self.point, dtype=float))
        if self.observer is not None:
            object.__setattr__(self, "observer",
                               np.asarray(self.observer, dtype=float))
        if self.s_max <= 0:
            raise ValueError("s_max must be positive")

    def resolved_workers(self) -> int:
        if self.workers is not None:
            return max(1, int(self.workers))
        return max(1, int(os.environ.get("CONEWAVE_WORKERS", "1")))


@dataclass(frozen=True)
class InitialData:
    """Vertex frame and per-direction initial values for the generator ODEs."""

    directions: sph.DirectionGrid
    observer: np.ndarray        # unit timelike T at the vertex, chart 0
    frame: np.ndarray           # spatial orthonormal triad rows E1, E2, E3
    ell: np.ndarray             # (nt, np, 4) past null tangents, g(ell, T) = 1
    screen: np.ndarray          # (nt, np, 2, 4) initial e1, e2
    round_basis: np.ndarray     # (nt, np, 2, 2) d(omega)/d(theta, phi) in the screen
    chart: np.ndarray           # (nt, np) integration chart per generator
    point_by_chart: dict        # chart id -> vertex coordinates in that chart


@dataclass
class GeneratorRecord:
    """Samples of one generator on the common affine grid."""

    omega: np.ndarray
    chart: int
    s: np.ndarray
    x: np.ndarray
    L: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    M: np.ndarray
    Mp: np.ndarray
    det_M: np.ndarray
    tr_chi: np.ndarray
    hat_chi: np.ndarray
    ric_LL: np.ndarray
    propagator: Optional[np.ndarray]
    conjugate_s: Optional[float]
    truncation_index: int
    drift: dict
    config: VertexConfig
    initial_state: np.ndarray = field(repr=False, default=None)
    cut_s: Optional[float] = None  # first wrap meeting on periodic topologies


@dataclass
class ConeGrid:
    """The full backward cone: all generators on common (omega, s) grids."""

    config: VertexConfig
    directions: sph.DirectionGrid
    initial: InitialData
    s: np.ndarray               # (n_s,)
    w_s: np.ndarray             # (n_s,) weights for integrals from 0
    w_s_cumulative: np.ndarray  # (n_s, n_s)
    ds_weights: np.ndarray      # (n_s, 5) first-derivative stencil
    ds_index: np.ndarray        # (n_s, 5)
    y0: np.ndarray              # (nt, np, n_state) generator initial states
    x: np.ndarray               # (nt, np, n_s, 4)
    L: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    M: np.ndarray               # (nt, np, n_s, 2, 2)
    Mp: np.ndarray
    det_M: np.ndarray           # (nt, np, n_s)
    tr_chi: np.ndarray
    hat_chi: np.ndarray         # (nt, np, n_s, 2, 2)
    ric_LL: np.ndarray
    propagator: Optional[np.ndarray]
    conjugate_s: np.ndarray     # (nt, np), nan where none
    truncation_index: np.ndarray  # (nt, np) retained samples are [:index]
    drift: dict
    single_chart: bool
    chart_margin: float         # worst chart-guard slack over all samples
    cut_s: Optional[np.ndarray] = None  # (nt, np) first cut value, periodic
    #                             topologies only; inf on cut-free generators

    @property
    def shape(self):
        return self.det_M.shape

    def generator(self, i: int, j: int) -> GeneratorRecord:
        conj = self.conjugate_s[i, j]
        return GeneratorRecord(
            omega=self.directions.omega[i, j], chart=int(self.initial.chart[i, j]),
            s=self.s, x=self.x[i, j], L=self.L[i, j], e1=self.e1[i, j],
            e2=self.e2[i, j], M=self.M[i, j], Mp=self.Mp[i, j],
            det_M=self.det_M[i, j], tr_chi=self.tr_chi[i, j],
            hat_chi=self.hat_chi[i, j], ric_LL=self.ric_LL[i, j],
            propagator=None if self.propagator is None else self.propagator[i, j],
            conjugate_s=None if np.isnan(conj) else float(conj),
            truncation_index=int(self.truncation_index[i, j]),
            drift=self.drift, config=self.config,
            initial_state=self.y0[i, j],
            cut_s=(None if self.cut_s is None
                   or not np.isfinite(self.cut_s[i, j])
                   else float(self.cut_s[i, j])))

    def retained_mask(self) -> np.ndarray:
        """(nt, np, n_s) mask of samples kept by the truncation policy."""
        return np.arange(self.s.size) < self.truncation_index[..., None]


@dataclass(frozen=True)
class CutReport:
    """Wrap-around diagnostics for cones on the flat cylinder.

    The formula-validity horizon equals the full period: beyond elapsed time
    `a` a generator has wrapped once around and the single-cone picture of
    the representation breaks down; that value is reported as tau_cut
    (matching the predicted meeting time of the +/- periodic-axis pair after
    a full wrap).  The earliest coincidence of two distinct generators in
    the fundamental domain, however, occurs already at half the period, and
    is reported alongside as measured/predicted first_intersection.  Each
    generator meets its mirror partner at s = a / (2 |omega_axis|); the cone
    builder caps the retained samples there (see ConeGrid.cut_s), so every
    downstream integral covers the cone only up to the cut, and the gap to
    the covering-space periodization is an observable rather than a silent
    error.
    """

    cut_detected: bool
    tau_cut: Optional[float]                 # validity depth (= period)
    predicted_first_intersection: Optional[float]
    measured_first_intersection: Optional[float]
    period: Optional[float]
    axis: Optional[int]
    n_candidate_pairs: int = 0


# ---------------------------------------------------------------------------
# initial data
# ---------------------------------------------------------------------------

def _pack_state(point, ell, screen, observer, with_propagator):
    n = _N_FULL if with_propagator else _N_BASE
    y = np.zeros(ell.shape[:-1] + (n,))
    y[..., 0:4] = point
    y[..., 4:8] = ell
    y[..., 8:12] = screen[..., 0, :]
    y[..., 12:16] = screen[..., 1, :]
    y[..., 16:20] = observer
    # M(0) = 0 occupies 20:24; M'(0) = I:
    y[..., 24] = 1.0
    y[..., 27] = 1.0
    if with_propagator:
        y[..., 28:44] = np.eye(4).ravel()
    return y


def initial_null_directions(cfg: VertexConfig) -> InitialData:
    """Past null tangents g(ell, T) = 1 and screen frames for every direction.

    The screen pair (e1, e2) is aligned with the polar/azimuthal unit
    tangents of the direction sphere, so the Jacobi matrix maps direction
    perturbations through the round basis diag(1, sin(theta)).
    """
    entry = cfg.entry
    p = cfg.point
    g_p = entry.metric(p)
    obs = cfg.observer
    if obs is None:
        obs = np.zeros(4)
        obs[0] = 1.0
    T = geo.normalize_observer(g_p, obs)
    E = geo.vertex_frame(g_p, T)            # rows: T, E1, E2, E3

    grid = sph.build_direction_grid(cfg.n_theta, cfg.n_phi)
    th = grid.theta[:, None]
    ph = grid.phi[None, :]
    st, ct = np.sin(th), np.cos(th)
    sp, cp = np.sin(ph), np.cos(ph)
    theta_hat = np.stack([ct * cp, ct * sp, -st * np.ones_like(cp)], axis=-1)
    phi_hat = np.stack([-sp * np.ones_like(st), cp * np.ones_like(st),
                        np.zeros((cfg.n_theta, cfg.n_phi))], axis=-1)

    ell = geo.past_null_vector(T, E, grid.omega)
    e1 = np.einsum("ijk,ka->ija", theta_hat, E)
    e2 = np.einsum("ijk,ka->ija", phi_hat, E)
    screen = np.stack([e1, e2], axis=-2)

    round_basis = np.zeros((cfg.n_theta, cfg.n_phi, 2, 2))
    round_basis[..., 0, 0] = 1.0
    round_basis[..., 1, 1] = st

    if cfg.frame_rotation != 0.0:
        # Rigid rotation of the screen pair.  The angular tangent map picks up
        # the same rotation, so every downstream contraction of the Jacobi
        # matrix with round_basis is unchanged in content.
        ca, sa = np.cos(cfg.frame_rotation), np.sin(cfg.frame_rotation)
        rot = np.array([[ca, sa], [-sa, ca]])
        screen = np.einsum("ab,ijbm->ijam", rot, screen)
        round_basis = np.einsum("ab,ijbA->ijaA", rot, round_basis)

    chart = np.zeros((cfg.n_theta, cfg.n_phi), dtype=int)
    point_by_chart = {0: p}
    if entry.chart_selector_fn is not None:
        chart = entry.chart_selector_fn(p, ell, cfg.s_max)
        if np.any(chart != 0):
            point_by_chart[1] = entry.convert_point(p, 0, 1)
    return InitialData(directions=grid, observer=T, frame=E, ell=ell,
                       screen=screen, round_basis=round_basis, chart=chart,
                       point_by_chart=point_by_chart)


# ---------------------------------------------------------------------------
# the generator ODE system
# ---------------------------------------------------------------------------

def _make_rhs(entry: geo.Spacetime, m: int, with_propagator: bool):
    n = _N_FULL if with_propagator else _N_BASE

    def rhs(_s, y):
        st = y.reshape(m, n)
        x, L = st[:, 0:4], st[:, 4:8]
        out = np.zeros_like(st)
        out[:, 0:4] = L
        if entry.flat:
            tid = np.zeros((m, 2, 2))
        else:
            gam = entry.christoffel(x)

            def transport(v):
                return -np.einsum("kabc,kb,kc->ka", gam, L, v)

            out[:, 4:8] = transport(L)
            out[:, 8:12] = transport(st[:, 8:12])
            out[:, 12:16] = transport(st[:, 12:16])
            out[:, 16:20] = transport(st[:, 16:20])
            riem = entry.riemann(x)
            E = np.stack([st[:, 8:12], st[:, 12:16]], axis=1)
            tid = np.einsum("kabcd,kia,kb,kjc,kd->kij", riem, E, L, E, L)
            if with_propagator:
                P = st[:, 28:44].reshape(m, 4, 4)
                out[:, 28:44] = -np.einsum(
                    "kmab,ka,kbn->kmn", gam, L, P).reshape(m, 16)
        M = st[:, 20:24].reshape(m, 2, 2)
        out[:, 20:24] = st[:, 24:28]
        out[:, 24:28] = -(tid @ M).reshape(m, 4)
        return out.ravel()

    return rhs


def _integrate_states(entry, y0, s_eval, rtol, atol, with_propagator,
                      s_span=None):
    """Integrate a stack of generator states; returns (m, len(s_eval), n)."""
    m = y0.shape[0]
    rhs = _make_rhs(entry, m, with_propagator)
    span = (0.0, float(s_eval[-1])) if s_span is None else s_span
    sol = solve_ivp(rhs, span, y0.ravel(), method="RK45", t_eval=s_eval,
                    rtol=rtol, atol=atol, dense_output=False)
    if not sol.success:
        raise RuntimeError(f"generator integration failed: {sol.message}")
    n = _N_FULL if with_propagator else _N_BASE
    return sol.y.reshape(m, n, -1).transpose(0, 2, 1)


def _chunk_worker(payload):
    entry = geo.get_spacetime(payload["name"], **payload["params"])
    entry.mode = payload["mode"]
    entry.fd_step = payload["fd_step"]
    return _integrate_states(entry, payload["y0"], payload["s_eval"],
                             payload["rtol"], payload["atol"],
                             payload["with_propagator"])


def _chunk_slices(total: int, n_chunks: int):
    size = -(-total // max(1, n_chunks))
    return [slice(k, min(k + size, total)) for k in range(0, total, size)]


# ---------------------------------------------------------------------------
# per-sample derived fields
# ---------------------------------------------------------------------------

def _tidal_and_ricci(entry, x, L, e1, e2):
    """R(e_a, L, e_b, L) and Ric(L, L) at a batch of samples."""
    if entry.flat:
        return (np.zeros(x.shape[:-1] + (2, 2)), np.zeros(x.shape[:-1]))
    riem = entry.riemann(x)
    E = np.stack([e1, e2], axis=-2)
    tid = np.einsum("...abcd,...ia,...b,...jc,...d->...ij", riem, E, L, E, L)
    ric = geo.ricci_from_riemann(np.linalg.inv(entry.metric(x)), riem)
    ric_ll = np.einsum("...ab,...a,...b->...", ric, L, L)
    return tid, ric_ll


def _expansion_fields(entry, s, x, L, e1, e2, M, Mp, floor_s):
    """det M, tr(chi), shear; asymptotics below the vertex floor."""
    det = M[..., 0, 0] * M[..., 1, 1] - M[..., 0, 1] * M[..., 1, 0]
    inv = np.empty_like(M)
    safe = np.where(np.abs(det) > 1e-300, det, 1.0)
    inv[..., 0, 0] = M[..., 1, 1] / safe
    inv[..., 1, 1] = M[..., 0, 0] / safe
    inv[..., 0, 1] = -M[..., 0, 1] / safe
    inv[..., 1, 0] = -M[..., 1, 0] / safe
    q = Mp @ inv
    tr = q[..., 0, 0] + q[..., 1, 1]
    sym = 0.5 * (q + np.swapaxes(q, -1, -2))
    hat = sym.copy()
    hat[..., 0, 0] -= 0.5 * tr
    hat[..., 1, 1] -= 0.5 * tr

    # near-conjugate samples: chi undefined (area density itself stays valid)
    degenerate = np.abs(det) < 1e-9 * s**2
    tr = np.where(degenerate, np.nan, tr)
    hat = np.where(degenerate[..., None, None], np.nan, hat)

    low = s < floor_s
    if np.any(low):
        tid, ric = _tidal_and_ricci(entry, x[..., low, :], L[..., low, :],
                                    e1[..., low, :], e2[..., low, :])
        s_low = s[low]
        tr_low = 2.0 / s_low - (s_low / 3.0) * ric
        hat_low = -(s_low[..., None, None] / 3.0) * _trace_free(tid)
        tr[..., low] = tr_low
        hat[..., low, :, :] = hat_low
    return det, tr, hat


def _trace_free(t):
    out = t.copy()
    half_tr = 0.5 * (t[..., 0, 0] + t[..., 1, 1])
    out[..., 0, 0] -= half_tr
    out[..., 1, 1] -= half_tr
    return out


# ---------------------------------------------------------------------------
# cone assembly
# ---------------------------------------------------------------------------

def build_cone(cfg: VertexConfig) -> ConeGrid:
    """Integrate every generator and assemble the common cone grid."""
    entry = cfg.entry
    init = initial_null_directions(cfg)
    grid = init.directions
    s = sph.build_s_grid(cfg.s_max, cfg.n_s, cfg.grading)
    w_s, w_cum = sph.integration_weights(s)
    dsw, dsi = sph.first_derivative_weights(s)

    n_dir = cfg.n_theta * cfg.n_phi
    ell_flat = init.ell.reshape(n_dir, 4)
    screen_flat = init.screen.reshape(n_dir, 2, 4)
    chart_flat = init.chart.reshape(n_dir)

    # initial states, with per-generator chart conversion where needed
    y0 = np.zeros((n_dir, _N_FULL if cfg.store_propagator else _N_BASE))
    for c in np.unique(chart_flat):
        sel = chart_flat == c
        p_c = init.point_by_chart[int(c)]
        ell_c = ell_flat[sel]
        scr_c = screen_flat[sel]
        obs_c = init.observer
        if c != 0:
            xb = np.broadcast_to(cfg.point, ell_c.shape)
            ell_c = entry.convert_vector(xb, ell_c, 0, int(c))
            scr_c = np.stack(
                [entry.convert_vector(xb, scr_c[:, a], 0, int(c))
                 for a in range(2)], axis=1)
            obs_c = entry.convert_vector(cfg.point, init.observer, 0, int(c))
        y0[sel] = _pack_state(p_c, ell_c, scr_c, obs_c, cfg.store_propagator)

    slices = _chunk_slices(n_dir, cfg.n_chunks)
    workers = cfg.resolved_workers()
    if workers > 1 and len(slices) > 1:
        payloads = [dict(name=entry.name, params=entry.params, mode=entry.mode,
                         fd_step=entry.fd_step, y0=y0[sl], s_eval=s,
                         rtol=cfg.rtol, atol=cfg.atol,
                         with_propagator=cfg.store_propagator)
                    for sl in slices]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_chunk_worker, payloads))
    else:
        parts = [_integrate_states(entry, y0[sl], s, cfg.rtol, cfg.atol,
                                   cfg.store_propagator) for sl in slices]
    Y = np.concatenate(parts, axis=0)       # (n_dir, n_s, n_state)

    shape = (cfg.n_theta, cfg.n_phi, cfg.n_s)
    x = Y[..., 0:4].reshape(shape + (4,))
    L = Y[..., 4:8].reshape(shape + (4,))
    e1 = Y[..., 8:12].reshape(shape + (4,))
    e2 = Y[..., 12:16].reshape(shape + (4,))
    pT = Y[..., 16:20].reshape(shape + (4,))
    M = Y[..., 20:24].reshape(shape + (2, 2))
    Mp = Y[..., 24:28].reshape(shape + (2, 2))
    propagator = (Y[..., 28:44].reshape(shape + (4, 4))
                  if cfg.store_propagator else None)
    del parts, Y  # the strided reshapes above copied; drop the staging

    drift = _drift_diagnostics(entry, x, L, e1, e2, pT)
    ric_LL = _ricci_LL_blocked(entry, x, L)
    det, tr, hat = _expansion_fields(entry, s, x, L, e1, e2, M, Mp,
                                     cfg.vertex_floor * cfg.s_max)

    margin = np.inf
    for c in np.unique(chart_flat):
        sel = (init.chart == c)
        if np.any(sel):
            margin = min(margin, float(np.min(
                entry.chart_guard(x[sel], int(c)))))
    if margin <= 0:
        raise RuntimeError(
            f"chart exit: a generator left the validated region of "
            f"{entry.name} (worst guard slack {margin:.3g}); reduce s_max "
            f"or move the vertex")

    cone = ConeGrid(
        config=cfg, directions=grid, initial=init, s=s, w_s=w_s,
        w_s_cumulative=w_cum, ds_weights=dsw, ds_index=dsi,
        y0=y0.reshape(shape[:2] + (-1,)), x=x, L=L, e1=e1, e2=e2, M=M, Mp=Mp,
        det_M=det, tr_chi=tr, hat_chi=hat, ric_LL=ric_LL,
        propagator=propagator, conjugate_s=np.full(shape[:2], np.nan),
        truncation_index=np.full(shape[:2], cfg.n_s, dtype=int), drift=drift,
        single_chart=bool(np.all(init.chart == init.chart.flat[0])),
        chart_margin=margin)
    _locate_conjugates(cone)
    if entry.topology == "cylinder":
        _truncate_at_torus_cuts(cone)
    return cone


def _truncate_at_torus_cuts(cone: ConeGrid):
    """Cap every generator at its first wrap meeting (covering space).

    On the flat cylinder the generator with direction omega first meets its
    mirror partner (equal transverse components, opposite component along
    the periodic axis) when the axial separation 2 s |omega_axis| closes a
    full period, i.e. at s = a / (2 |omega_axis|); near-equatorial
    generators are cut-free.  Retained samples stop `truncation_margin`
    grid steps before the cut, mirroring the conjugate-point policy.
    """
    cfg = cone.config
    period = float(cfg.entry.params["period"])
    axis = int(cfg.entry.params["axis"])
    w_ax = np.abs(cone.directions.omega[..., axis - 1])
    s_cut = np.where(w_ax > 1e-15,
                     0.5 * period / np.maximum(w_ax, 1e-300), np.inf)
    cone.cut_s = s_cut
    k = np.searchsorted(cone.s, s_cut)
    trunc = np.where(k < cfg.n_s,
                     np.maximum(k - cfg.truncation_margin, 1), cfg.n_s)
    cone.truncation_index = np.minimum(cone.truncation_index,
                                       trunc).astype(int)


def _drift_diagnostics(entry, x, L, e1, e2, pT):
    """Worst-case invariant drifts, metric evaluated in s blocks."""
    null = affine = frame = 0.0
    n_s = x.shape[2]
    block = max(1, int(2.0e8 / (x.shape[0] * x.shape[1] * 16 * 8)))
    for k0 in range(0, n_s, block):
        sl = np.s_[:, :, k0:min(n_s, k0 + block)]
        gm = entry.metric(x[sl])
        gL = np.einsum("...ab,...b->...a", gm, L[sl])
        null = max(null, float(
            np.abs(np.einsum("...a,...a->...", gL, L[sl])).max()))
        affine = max(affine, float(
            np.abs(np.einsum("...a,...a->...", gL, pT[sl]) - 1.0).max()))
        g11 = np.einsum("...ab,...a,...b->...", gm, e1[sl], e1[sl])
        g22 = np.einsum("...ab,...a,...b->...", gm, e2[sl], e2[sl])
        g12 = np.einsum("...ab,...a,...b->...", gm, e1[sl], e2[sl])
        gL1 = np.einsum("...a,...a->...", gL, e1[sl])
        gL2 = np.einsum("...a,...a->...", gL, e2[sl])
        frame = max(frame, float(np.max(
            [np.abs(g11 - 1).max(), np.abs(g22 - 1).max(),
             np.abs(g12).max(), np.abs(gL1).max(), np.abs(gL2).max()])))
    return {"nullness": null, "affine": affine, "frame": frame}


def _ricci_LL_blocked(entry, x, L, block=40):
    """Ric(L, L) at every sample, evaluated in s-blocks to bound memory."""
    if entry.flat:
        return np.zeros(x.shape[:-1])
    out = np.empty(x.shape[:-1])
    n_s = x.shape[2]
    for k0 in range(0, n_s, block):
        sl = slice(k0, min(k0 + block, n_s))
        ric = entry.ricci(x[:, :, sl])
        out[:, :, sl] = np.einsum("...ab,...a,...b->...", ric,
                                  L[:, :, sl], L[:, :, sl])
    return out


# ---------------------------------------------------------------------------
# conjugate points
# ---------------------------------------------------------------------------

def _conjugate_candidates(s, det):
    """Per generator: first node index at a sign change or near-tangential
    minimum of det M, or -1."""
    ns = det.shape[-1]
    sign_change = (det[..., :-1] > 0) & (det[..., 1:] <= 0)
    has_sc = sign_change.any(axis=-1)
    first_sc = np.where(has_sc, sign_change.argmax(axis=-1), ns)

    inner = det[..., 1:-1]
    local_min = (inner < det[..., :-2]) & (inner < det[..., 2:])
    # tangential: the parabola through the minimum and its neighbors dips
    # to a vertex value far below the node value
    prev_d, next_d = det[..., :-2], det[..., 2:]
    with np.errstate(divide="ignore", invalid="ignore"):
        curv = prev_d + next_d - 2 * inner
        vertex_val = inner - np.where(curv > 0,
                                      (next_d - prev_d) ** 2 / (8 * curv),
                                      0.0)
    scale = np.maximum.accumulate(det, axis=-1)[..., 1:-1]
    tangential = local_min & (vertex_val < 0.02 * np.abs(inner)) \
        & (inner < 0.05 * np.maximum(scale, 1e-300))
    has_tg = tangential.any(axis=-1)
    first_tg = np.where(has_tg, tangential.argmax(axis=-1) + 1, ns)

    first = np.minimum(first_sc, first_tg)
    return np.where(first < ns, first, -1)


def _locate_conjugates(cone: ConeGrid):
    cfg = cone.config
    cand = _conjugate_candidates(cone.s, cone.det_M)
    flagged = np.argwhere(cand >= 0)
    if flagged.size == 0:
        return
    s = cone.s
    los, his = [], []
    for i, j in flagged:
        k = cand[i, j]
        los.append(s[max(k - 2, 0)])
        his.append(s[min(k + 2, cfg.n_s - 1)])
    lo, hi = min(los), max(his)
    pad = 0.02 * (hi - lo) + 1e-9
    fine = np.linspace(max(lo - pad, s[0]), min(hi + pad, cfg.s_max), 4001)

    y0 = np.stack([cone.y0[i, j] for i, j in flagged], axis=0)[:, :_N_BASE]
    detf = np.empty((len(flagged), fine.size))
    for sl in _chunk_slices(len(flagged), -(-len(flagged) // 128)):
        Y = _integrate_states(cfg.entry, y0[sl], fine, cfg.rtol, cfg.atol,
                              with_propagator=False)
        Mf = Y[..., 20:24]
        detf[sl] = Mf[..., 0] * Mf[..., 3] - Mf[..., 1] * Mf[..., 2]

    for row, (i, j) in enumerate(flagged):
        s_star = _refine_root_or_min(fine, detf[row])
        if s_star is None:
            continue
        cone.conjugate_s[i, j] = s_star
        # retain samples ending `truncation_margin` grid steps before s*
        k = int(np.searchsorted(s, s_star))
        cone.truncation_index[i, j] = max(k - cfg.truncation_margin, 1)


def _refine_root_or_min(sf, df):
    """First zero (or tangential touch) of the densely sampled det M."""
    neg = np.nonzero((df[:-1] > 0) & (df[1:] <= 0))[0]
    if neg.size:
        k = neg[0]
        # linear bracketing on the dense grid, then local cubic refinement
        window = slice(max(k - 2, 0), min(k + 3, sf.size))
        return _poly_root(sf[window], df[window], sf[k], sf[k + 1])
    k = int(np.argmin(df))
    if k == 0 or k == df.size - 1:
        return None
    window = slice(max(k - 3, 0), min(k + 4, sf.size))
    c = np.polynomial.polynomial.polyfit(sf[window] - sf[k], df[window], 4)
    dc = np.polynomial.polynomial.polyder(c)
    roots = np.polynomial.polynomial.polyroots(dc)
    roots = roots[np.isreal(roots)].real
    roots = roots[(roots > sf[window][0] - sf[k]) & (roots < sf[window][-1] - sf[k])]
    if roots.size == 0:
        return float(sf[k])
    vals = np.polynomial.polynomial.polyval(roots, c)
    best = roots[np.argmin(vals)]
    # accept a tangential touch only if the fitted vertex value is tiny
    # compared to the rise of det M across the fitting window
    rise = np.max(df[window]) - np.min(df[window])
    if np.polynomial.polynomial.polyval(best, c) > 0.05 * max(rise, 1e-300):
        return None
    return float(sf[k] + best)


def _poly_root(sw, dw, lo, hi):
    c = np.polynomial.polynomial.polyfit(sw - lo, dw, min(3, sw.size - 1))
    roots = np.polynomial.polynomial.polyroots(c)
    roots = roots[np.isreal(roots)].real + lo
    roots = roots[(roots >= lo - 1e-12) & (roots <= hi + 1e-12)]
    if roots.size == 0:
        return 0.5 * (lo + hi)
    return float(roots[0])


def integrate_generator(cfg: VertexConfig, ell: np.ndarray,
                        screen: Optional[np.ndarray] = None,
                        chart: int = 0) -> GeneratorRecord:
    """Integrate a single generator given its initial past null tangent.

    `ell` is given in the vertex chart `chart`; the screen pair defaults to
    a Gram-Schmidt completion orthogonal to the observer and the spatial
    direction of `ell`.
    """
    entry = cfg.entry
    p = cfg.point if chart == 0 else entry.convert_point(cfg.point, 0, chart)
    g_p = entry.metric(p)
    obs = cfg.observer
    if obs is None:
        obs = np.zeros(4)
        obs[0] = 1.0
    T = geo.normalize_observer(g_p, obs)
    if screen is None:
        screen = _screen_for(g_p, T, ell)
    s = sph.build_s_grid(cfg.s_max, cfg.n_s, cfg.grading)
    y0 = _pack_state(p, ell, screen, T, cfg.store_propagator)[None, :]
    Y = _integrate_states(entry, y0, s, cfg.rtol, cfg.atol,
                          cfg.store_propagator)[0]
    x, L = Y[:, 0:4], Y[:, 4:8]
    e1, e2, pT = Y[:, 8:12], Y[:, 12:16], Y[:, 16:20]
    M = Y[:, 20:24].reshape(-1, 2, 2)
    Mp = Y[:, 24:28].reshape(-1, 2, 2)
    gm = entry.metric(x)
    drift = _drift_diagnostics(gm, L, e1, e2, pT)
    slack = float(np.min(entry.chart_guard(x, chart)))
    if slack <= 0:
        raise RuntimeError(
            f"chart exit: the generator left the validated region of "
            f"{entry.name} (worst guard slack {slack:.3g})")
    if entry.flat:
        ric_LL = np.zeros(s.size)
    else:
        ric = entry.ricci(x)
        ric_LL = np.einsum("...ab,...a,...b->...", ric, L, L)
    det, tr, hat = _expansion_fields(entry, s, x, L, e1, e2, M, Mp,
                                     cfg.vertex_floor * cfg.s_max)
    rec = GeneratorRecord(
        omega=np.asarray([np.nan] * 3), chart=chart, s=s, x=x, L=L, e1=e1,
        e2=e2, M=M, Mp=Mp, det_M=det, tr_chi=tr, hat_chi=hat, ric_LL=ric_LL,
        propagator=Y[:, 28:44].reshape(-1, 4, 4) if cfg.store_propagator else None,
        conjugate_s=None, truncation_index=cfg.n_s, drift=drift, config=cfg,
        initial_state=y0[0])
    rec.conjugate_s = detect_conjugate(rec)
    if rec.conjugate_s is not None:
        k = int(np.searchsorted(s, rec.conjugate_s))
        rec.truncation_index = max(k - cfg.truncation_margin, 1)
    return rec


def _screen_for(g_p, T, ell):
    """Orthonormal screen pair orthogonal to T and to ell."""
    basis = [T, ell]
    screen = []
    for seed in np.eye(4)[[1, 2, 3, 0]]:
        v = seed.copy()
        v = v - geo.inner(g_p, v, T) / geo.inner(g_p, T, T) * T
        w = ell + geo.inner(g_p, ell, T) * T   # spatial part of ell
        wn = geo.inner(g_p, w, w)
        if wn > 1e-28:
            v = v - geo.inner(g_p, v, w) / wn * w
        for u in screen:
            v = v - geo.inner(g_p, v, u) * u
        nrm = geo.inner(g_p, v, v)
        if nrm > 1e-20:
            screen.append(v / np.sqrt(nrm))
        if len(screen) == 2:
            break
    return np.stack(screen, axis=0)


def detect_conjugate(record: GeneratorRecord) -> Optional[float]:
    """First conjugate parameter of one generator, refined on a dense
    re-integration; None when det M stays positive and bounded away from 0."""
    cand = _conjugate_candidates(record.s, record.det_M[None, None, :])[0, 0]
    if cand < 0:
        return None
    cfg = record.config
    s = record.s
    lo = s[max(cand - 2, 0)]
    hi = s[min(cand + 2, s.size - 1)]
    pad = 0.02 * (hi - lo) + 1e-9
    fine = np.linspace(max(lo - pad, s[0]), min(hi + pad, cfg.s_max), 4001)
    Y = _integrate_states(cfg.entry, record.initial_state[None, :_N_BASE],
                          fine, cfg.rtol, cfg.atol, with_propagator=False)[0]
    M = Y[:, 20:24].reshape(-1, 2, 2)
    det = M[:, 0, 0] * M[:, 1, 1] - M[:, 0, 1] * M[:, 1, 0]
    return _refine_root_or_min(fine, det)


# ---------------------------------------------------------------------------
# structure-equation and area diagnostics
# ---------------------------------------------------------------------------

def raychaudhuri_residual(obj) -> np.ndarray:
    """Residual of d/ds tr(chi) + (tr chi)^2/2 + |shear|^2 + Ric(L, L).

    The expansion is differenced in s through its regular part
    y = tr(chi) - 2/s; the singular parts cancel exactly:
    residual = y' + 2 y / s + y^2 / 2 + |shear|^2 + Ric(L, L).
    Samples where the shear is undefined (near conjugate points) are NaN.
    """
    if isinstance(obj, ConeGrid):
        s, tr, hat, ric = obj.s, obj.tr_chi, obj.hat_chi, obj.ric_LL
        dsw, dsi = obj.ds_weights, obj.ds_index
    else:
        s, tr, hat, ric = obj.s, obj.tr_chi, obj.hat_chi, obj.ric_LL
        dsw, dsi = sph.first_derivative_weights(s)
    y = tr - 2.0 / s
    dy = sph.apply_stencil(dsw, dsi, y, axis=-1)
    shear_sq = np.einsum("...ab,...ab->...", hat, hat)
    return dy + 2.0 * y / s + 0.5 * y * y + shear_sq + ric


def interp_along_s(grid: ConeGrid, values: np.ndarray,
                   targets: np.ndarray) -> np.ndarray:
    """Cubic interpolation of per-sample values at per-generator s targets.

    values: (..., n_s) with the s axis last; targets: (...) matching the
    leading shape.  Uses the 4 nearest nodes of the common grid.
    """
    s = grid.s
    k = np.clip(np.searchsorted(s, targets) - 1, 1, s.size - 3)
    idx = k[..., None] + np.arange(-1, 3)
    sw = s[idx]                              # (..., 4)
    vw = np.take_along_axis(values, idx, axis=-1)
    out = np.zeros(targets.shape)
    for a in range(4):
        la = np.ones_like(targets)
        for b in range(4):
            if b != a:
                la = la * (targets - sw[..., b]) / (sw[..., a] - sw[..., b])
        out = out + la * vw[..., a]
    return out


def area_of_slice(grid: ConeGrid, level: float, kind: str = "s") -> float:
    """Area of the level sphere: the solid-angle quadrature of det M.

    kind="s": level is an affine parameter; snapped to the nearest grid node.
    kind="t": level is a chart time; det M is interpolated along each
    generator at the s where the generator crosses that time.
    """
    if kind == "s":
        k = int(np.argmin(np.abs(grid.s - level)))
        if np.any(grid.truncation_index <= k):
            raise ValueError(f"level s={level} lies beyond the truncation of "
                             f"{int((grid.truncation_index <= k).sum())} generators")
        return float(grid.directions.integrate(grid.det_M[..., k]))
    if kind != "t":
        raise ValueError("kind must be 's' or 't'")
    t = grid.x[..., 0]
    if not np.all((t[..., :1] - level) * (t[..., -1:] - level) <= 0):
        raise ValueError(f"time level {level} is not crossed by every generator")
    # chart time decreases along past generators: locate s with x^0(s) = level
    s_at = np.empty(grid.shape[:2])
    for i in range(t.shape[0]):
        for j in range(t.shape[1]):
            s_at[i, j] = np.interp(level, t[i, j][::-1], grid.s[::-1])
    s_at = _refine_time_crossing(grid, t, s_at, level)
    det_at = interp_along_s(grid, grid.det_M, s_at)
    return float(grid.directions.integrate(det_at))


def _refine_time_crossing(grid, t, s_guess, level, iters=3):
    """Newton refinement of x^0(s) = level using dt/ds = L^0."""
    s_at = s_guess.copy()
    for _ in range(iters):
        t_at = interp_along_s(grid, t, s_at)
        dt = interp_along_s(grid, grid.L[..., 0], s_at)
        s_at = s_at - (t_at - level) / dt
        s_at = np.clip(s_at, grid.s[0], grid.s[-1])
    return s_at


# ---------------------------------------------------------------------------
# cut detection on the flat cylinder
# ---------------------------------------------------------------------------

def detect_cut_torus(grid: ConeGrid, a: float) -> CutReport:
    """Wrap-around diagnostics for the flat cylinder (see CutReport).

    For non-periodic flat space (a = inf) there is nothing to detect.  The
    candidate meetings are mirror-direction pairs (omega, omega') with equal
    transverse components and opposite components along the periodic axis;
    on the uniform phi grid these are exact grid pairs, and their separation
    along the axis is linear in s, so the first coincidence in the
    fundamental domain is located exactly from bracketing nodes.
    """
    entry = grid.config.entry
    if not np.isfinite(a):
        return CutReport(cut_detected=False, tau_cut=None,
                         predicted_first_intersection=None,
                         measured_first_intersection=None, period=None,
                         axis=None)
    if entry.topology != "cylinder":
        raise ValueError("cut detection is implemented for the flat cylinder only")
    period = float(entry.params["period"])
    axis = int(entry.params["axis"])
    if abs(a - period) > 1e-12 * max(1.0, period):
        raise ValueError(f"width {a} does not match the catalog period {period}")

    n_phi = grid.directions.n_phi
    j = np.arange(n_phi)
    # The mirror direction flips the periodic-axis component of omega and
    # keeps the transverse ones.  On this product grid the mirror of a node
    # is again a node: axis = x flips cos(phi) (phi -> pi - phi), axis = y
    # flips sin(phi) (phi -> -phi), axis = z flips cos(theta) (theta row
    # reversal, exact for the symmetric Gauss-Legendre nodes).
    if axis == 1:
        jm = (n_phi // 2 - j) % n_phi
        pairs = [(jj, int(jm[jj])) for jj in range(n_phi) if jj < jm[jj]]
        x1 = np.stack([grid.x[:, jj, :, axis] for jj, _ in pairs], axis=1)
        x2 = np.stack([grid.x[:, jk, :, axis] for _, jk in pairs], axis=1)
    elif axis == 2:
        jm = (-j) % n_phi
        pairs = [(jj, int(jm[jj])) for jj in range(n_phi) if jj < jm[jj]]
        x1 = np.stack([grid.x[:, jj, :, axis] for jj, _ in pairs], axis=1)
        x2 = np.stack([grid.x[:, jk, :, axis] for _, jk in pairs], axis=1)
    else:
        nt = grid.directions.n_theta
        pairs = [(ii, nt - 1 - ii) for ii in range(nt // 2)]
        x1 = np.stack([grid.x[ii, :, :, axis] for ii, _ in pairs], axis=0)
        x2 = np.stack([grid.x[ik, :, :, axis] for _, ik in pairs], axis=0)

    # The pair separation along the axis grows linearly with s; the pair
    # meets in the fundamental domain when it reaches a full period, i.e.
    # when the wrapped separation returns to zero.
    delta = np.abs(x1 - x2)
    wrapped = delta - period * np.round(delta / period)
    # a genuine passage through zero moves by a small step; the branch jump
    # of the wrapping at half-integer periods moves by ~period and is not a
    # meeting
    crossing = ((np.sign(wrapped[..., :-1]) != np.sign(wrapped[..., 1:]))
                & (np.abs(wrapped[..., 1:] - wrapped[..., :-1]) < 0.5 * period)
                & (delta[..., 1:] > 0.4 * period))
    measured = None
    if crossing.any():
        flat_idx = np.argwhere(crossing)
        s_meet = []
        for row in flat_idx:
            k = row[-1]
            sel = tuple(row[:-1])
            d0, d1 = wrapped[sel + (k,)], wrapped[sel + (k + 1,)]
            s_meet.append(grid.s[k] + (grid.s[k + 1] - grid.s[k])
                          * d0 / (d0 - d1))
        measured = float(np.min(s_meet))
    return CutReport(
        cut_detected=measured is not None, tau_cut=period,
        predicted_first_intersection=0.5 * period,
        measured_first_intersection=measured, period=period, axis=axis,
        n_candidate_pairs=len(pairs))
