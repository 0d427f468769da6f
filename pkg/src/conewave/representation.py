"""Assembly of the cone representation identity and its quadratures.

A solution of the curved wave equation with zero data below a cutoff is
reproduced at the cone vertex by pairing the transported leading field A
against the source on the backward cone, up to the tangential error terms:

    4 pi g(psi(p), J_p) = -I[g(A, F)] + I[g(E, psi)],

where I[.] is the cone-surface integral and E is the error density built in
the transport module (angular Laplacian, torsion coupling, mass aspect and,
for vector data, the transverse curvature coupling).  The all-important
global sign is frozen against the flat spherical-means oracle: for the
retarded solution of  box psi = F  (signature -+++) the flat cone value of
(1/4pi) I[g(A,F)] with unit vertex datum equals -psi(p), verified to 7e-11
by independent quadrature.

Two parameterizations of the same surface integral are carried: the affine
form sums density * detM against the affine quadrature weights, and the
time-foliation form rebuilds per-generator weights on the elapsed-chart-time
nodes and divides by the time lapse |dt/ds|.  Their agreement on every term
is a change-of-variables invariant of the assembled identity.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import cone as cn
from . import geometry as geo
from . import transport as tp
from .cone import ConeGrid, VertexConfig
from .coefficients import RicciCoefficientField, ricci_coefficients
from .sphere import apply_stencil

__all__ = [
    "SourceSpec",
    "RepresentationReport",
    "VertexLimitReport",
    "FamilyReport",
    "TruncatedConeWarning",
    "source_from_solution",
    "cone_integral",
    "cone_integral_time_foliation",
    "assemble_identity",
    "vertex_limit_diagnostics",
    "refinement_family",
]

_BLOCK_BYTES = 2.0e8


class TruncatedConeWarning(UserWarning):
    """A density is still alive past the truncation index of cut generators."""


@dataclass(frozen=True)
class SourceSpec:
    """A wave-equation solution/source pair sampled on spacetime points.

    psi and F take chart points of shape (..., 4) and return values of
    shape (...,) for rank 0 or (..., 4) (raised components) for rank 1.
    psi_grad returns the chart partials (..., 4)[mu] or (..., 4, 4)[a, mu]
    and is only needed by the vertex-limit diagnostics.  The support dict
    carries {"t_min", "t_max", "center", "radius"} describing the closure
    of the support; t_min is the zero-data cutoff time.
    """

    psi: Callable
    F: Callable
    rank: int
    psi_grad: Optional[Callable] = None
    support: dict = field(default_factory=dict)
    label: str = ""


def source_from_solution(sol, periodize: Optional[tuple] = None) -> SourceSpec:
    """Adapt a manufactured solution object (duck-typed) to a SourceSpec.

    periodize=(period, axis, k_terms) wraps all callables in a finite sum
    of shifted copies, the closed-form solution on the flat cylinder.
    """
    psi, F, grad = sol.psi, sol.F, sol.psi_grad
    label = f"manufactured(seed={sol.seed}, rank={sol.rank})"
    if periodize is not None:
        period, axis, k_terms = periodize

        def shifted(fn):
            def wrapped(x):
                x = np.asarray(x, dtype=float)
                out = None
                for k in range(-k_terms, k_terms + 1):
                    dx = np.zeros(4)
                    dx[axis] = k * period
                    term = fn(x + dx)
                    out = term if out is None else out + term
                return out
            return wrapped

        psi, F, grad = shifted(psi), shifted(F), shifted(grad)
        label += f" periodized(a={period}, axis={axis})"
    return SourceSpec(psi=psi, F=F, rank=sol.rank, psi_grad=grad,
                      support=dict(sol.support), label=label)


# ---------------------------------------------------------------------------
# cone-surface quadrature, affine form


def _support_past_truncation(grid: ConeGrid, density: np.ndarray) -> bool:
    cut = grid.truncation_index < grid.s.size
    if not np.any(cut):
        return False
    mask = grid.retained_mask()
    vals = np.where(np.isfinite(density), density, 0.0)
    scale = np.max(np.abs(np.where(mask, vals, 0.0)))
    beyond = ~mask & cut[..., None] & (np.abs(vals) > 1e-12 * max(scale, 1e-300))
    return bool(np.any(beyond))


def cone_integral(grid: ConeGrid, density: np.ndarray,
                  warn_truncated: bool = True) -> float:
    """Surface integral sum_w sum_s w_w w_s density detM over retained samples.

    The integrand is extended by its vertex limit 0 (all identity densities
    decay at least like s against detM ~ s^2).  Warns when a generator was
    truncated before s_max while the density is still alive past its
    truncation index: mass is being dropped and the caller's identity will
    not close.
    """
    density = np.asarray(density, dtype=float)
    if density.shape != grid.det_M.shape:
        raise ValueError("density must be a scalar field on the cone grid")
    if warn_truncated and _support_past_truncation(grid, density):
        n_cut = int(np.sum(grid.truncation_index < grid.s.size))
        warnings.warn(
            f"density is alive past the truncation index of {n_cut} cut "
            "generators; the cone integral drops that mass",
            TruncatedConeWarning, stacklevel=2)
    weighted = np.where(grid.retained_mask(), density * grid.det_M, 0.0)
    return float(np.einsum("ij,ijs,s->", grid.directions.weights, weighted,
                           grid.w_s))


# ---------------------------------------------------------------------------
# cone-surface quadrature, time-foliation form


def _window_weights_from_zero(tau: np.ndarray) -> np.ndarray:
    """4th-order integral weights on per-generator increasing nodes.

    tau has shape (..., n) with the integrand extended by 0 at a virtual
    node tau=0; returns weights of the same shape.  Each inter-node window
    is integrated exactly on the cubic through its 4 nearest nodes, the
    same rule the affine grid uses, rebuilt here on the reparameterized
    node positions.
    """
    batch = tau.shape[:-1]
    n = tau.shape[-1]
    if n < 4:
        raise ValueError("need at least 4 nodes along each generator")
    ext = np.concatenate([np.zeros(batch + (1,)), tau], axis=-1)
    w_ext = np.zeros(batch + (n + 1,))
    moments = np.array([2.0, 0.0, 2.0 / 3.0, 0.0])
    for j in range(n):
        start = min(max(j - 1, 0), n - 3)
        nodes = ext[..., start:start + 4]
        a, b = ext[..., j], ext[..., j + 1]
        mid, half = 0.5 * (a + b), 0.5 * (b - a)
        u = (nodes - mid[..., None]) / half[..., None]
        V = u[..., None, :] ** np.arange(4)[:, None]
        rhs = np.broadcast_to(moments[:, None], batch + (4, 1))
        w = np.linalg.solve(V, rhs)[..., 0]
        w_ext[..., start:start + 4] += w * half[..., None]
    return w_ext[..., 1:]


def cone_integral_time_foliation(grid: ConeGrid, density: np.ndarray,
                                 time: Optional[np.ndarray] = None,
                                 time_at_vertex: Optional[float] = None,
                                 warn_truncated: bool = True) -> float:
    """The same surface integral parameterized by a time function.

    Per generator the affine integral is rewritten in tau = t_p - t(s)
    (elapsed time, increasing, 0 at the vertex) with the lapse factor
    ds/dtau; the quadrature weights are rebuilt on the tau nodes.  The
    default time function is the chart time; a caller-supplied sampled one
    must come with its vertex value.  On flat space tau = s exactly and
    the two forms coincide to machine precision; elsewhere the agreement
    is a genuine change-of-variables check.
    """
    density = np.asarray(density, dtype=float)
    if density.shape != grid.det_M.shape:
        raise ValueError("density must be a scalar field on the cone grid")
    if warn_truncated and _support_past_truncation(grid, density):
        n_cut = int(np.sum(grid.truncation_index < grid.s.size))
        warnings.warn(
            f"density is alive past the truncation index of {n_cut} cut "
            "generators; the cone integral drops that mass",
            TruncatedConeWarning, stacklevel=2)

    if time is None:
        t = grid.x[..., 0]
        t_vertex = float(grid.config.point[0])
    else:
        t = np.asarray(time, dtype=float)
        if time_at_vertex is None:
            raise ValueError("a sampled time function needs time_at_vertex")
        t_vertex = float(time_at_vertex)
    tau = t_vertex - t
    mask = grid.retained_mask()
    n_s = grid.s.size

    # continue tau linearly past truncation so the weight build stays
    # monotone; the integrand there is masked to zero anyway
    k_last = np.maximum(grid.truncation_index - 1, 1)
    tau_last = np.take_along_axis(tau, k_last[..., None], axis=2)
    spacing = tau_last - np.take_along_axis(tau, k_last[..., None] - 1, axis=2)
    idx = np.arange(n_s)
    fab = tau_last + (idx - k_last[..., None]) * np.abs(spacing)
    tau_use = np.where(mask, np.where(np.isfinite(tau), tau, 0.0), fab)

    retained_diff = np.diff(tau_use, axis=2)[mask[..., 1:]]
    if tau_use[..., 0].min() <= 0 or retained_diff.min() <= 0:
        raise ValueError("time function is not monotone along every "
                         "generator; cannot reparameterize the cone integral")

    dtau_ds = apply_stencil(grid.ds_weights, grid.ds_index, tau_use, axis=2)
    weights = _window_weights_from_zero(tau_use)
    integrand = np.where(mask, density * grid.det_M / dtau_ds, 0.0)
    return float(np.einsum("ij,ijs,ijs->", grid.directions.weights,
                           integrand, weights))


# ---------------------------------------------------------------------------
# the assembled identity


@dataclass
class RepresentationReport:
    """Value object for one assembled identity."""

    main_term: float
    error_terms: dict            # name -> value (affine form)
    error_term: float            # their sum
    total: float
    reference: float
    residual: float
    residual_rel: float
    terms: dict                  # name -> {s_form, t_form, pair_rel_gap}
    parameterization_gap: float
    rank: int
    vertex_datum: list
    psi_at_vertex: list
    grid_meta: dict
    truncation: dict
    source_label: str
    measured_order: Optional[float] = None
    timings: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in (
            "main_term", "error_terms", "error_term", "total", "reference",
            "residual", "residual_rel", "terms", "parameterization_gap",
            "rank", "vertex_datum", "psi_at_vertex", "grid_meta",
            "truncation", "source_label", "measured_order", "timings")}
        return out


def _pair_density(entry, x, a_field, b_field, rank):
    """g(a, b) on the cone, metric-contracted for rank 1, s-blocked."""
    if rank == 0:
        return a_field * b_field
    out = np.empty(a_field.shape[:-1])
    nt_, np_ = x.shape[:2]
    block = max(1, int(_BLOCK_BYTES / (nt_ * np_ * 16 * 8)))
    for k0 in range(0, x.shape[2], block):
        k1 = min(x.shape[2], k0 + block)
        g = entry.metric(x[:, :, k0:k1])
        out[:, :, k0:k1] = np.einsum("ijsmn,ijsm,ijsn->ijs", g,
                                     a_field[:, :, k0:k1],
                                     b_field[:, :, k0:k1])
    return out


def _sample_source(fn, grid: ConeGrid, rank: int) -> np.ndarray:
    """Evaluate a source callable over the cone in s blocks.

    Curved-entry callables materialize connection tensors per point, so a
    single full-grid call can transiently need tens of times the grid
    footprint; blocking caps that.
    """
    nt_, np_, n_s = grid.det_M.shape
    want = (nt_, np_, n_s) + ((4,) if rank else ())
    vals = np.empty(want)
    block = max(1, int(_BLOCK_BYTES / (nt_ * np_ * 256 * 8)))
    for k0 in range(0, n_s, block):
        k1 = min(n_s, k0 + block)
        part = np.asarray(fn(grid.x[:, :, k0:k1]), dtype=float)
        if part.shape != (nt_, np_, k1 - k0) + want[3:]:
            raise ValueError(f"source callable returned shape {part.shape} "
                             f"on an (nt, np, {k1 - k0}) block; expected "
                             f"trailing shape {want[3:]}")
        vals[:, :, k0:k1] = part
    return np.where(np.isfinite(vals), vals, 0.0)


def assemble_identity(grid: ConeGrid, source: SourceSpec, vertex_datum,
                      coeffs: Optional[RicciCoefficientField] = None,
                      tf: Optional[tp.TransportedField] = None,
                      ) -> RepresentationReport:
    """Evaluate every term of the representation identity on one cone.

    Returns the report with both quadrature parameterizations per term,
    truncation metadata (including the wrap flag on periodic topologies),
    and the residual against 4 pi g(psi(p), J_p).  Raises if the source is
    still alive at the truncation boundary of the cone, which voids the
    zero-data derivation.
    """
    entry = grid.config.entry
    J = np.asarray(vertex_datum, dtype=float)
    t0 = time.perf_counter()
    if tf is None:
        tf = tp.transported_field(grid, J)
    if tf.rank != source.rank:
        raise ValueError("vertex datum rank does not match the source rank")
    if coeffs is None:
        coeffs = ricci_coefficients(grid)
    t_coeff = time.perf_counter()
    _, e_terms = tp.error_density(grid, coeffs, tf, return_terms=True)
    t_density = time.perf_counter()

    psi_vals = _sample_source(source.psi, grid, source.rank)
    f_vals = _sample_source(source.F, grid, source.rank)

    # zero-data support check: the identity derivation needs psi to vanish
    # at the outer rim.  On generators whose truncation is the cone edge
    # itself this is a hard configuration error (enlarge s_max); where a
    # conjugate/cut point shortened the generator the gap is the observable
    # the truncation machinery reports, so it only warns below.
    k_edge = np.minimum(grid.truncation_index, grid.s.size) - 1
    comp = psi_vals if source.rank == 0 else np.linalg.norm(psi_vals, axis=-1)
    edge_vals = np.take_along_axis(comp, k_edge[..., None], axis=2)[..., 0]
    scale = max(float(np.max(np.abs(comp))), 1e-300)
    shell_max = float(np.max(np.abs(edge_vals)))
    untruncated = grid.truncation_index >= grid.s.size
    rim_max = (float(np.max(np.abs(edge_vals[untruncated])))
               if np.any(untruncated) else 0.0)
    if rim_max > 1e-8 * scale:
        raise ValueError(
            "source is alive at the outer rim of the cone "
            f"(|psi| reaches {rim_max:.3e} against a field scale of "
            f"{scale:.3e}); enlarge s_max so the support closes")

    densities = {"main": _pair_density(entry, grid.x, tf.A, f_vals,
                                       source.rank)}
    for name, term_field in e_terms.items():
        densities[name] = _pair_density(entry, grid.x, term_field, psi_vals,
                                        source.rank)

    truncated_support = any(_support_past_truncation(grid, d)
                            for d in densities.values())
    if truncated_support:
        warnings.warn("source mass extends past truncated generators; the "
                      "assembled identity will not close",
                      TruncatedConeWarning, stacklevel=2)

    terms = {}
    for name, d in densities.items():
        s_form = cone_integral(grid, d, warn_truncated=False)
        t_form = cone_integral_time_foliation(grid, d, warn_truncated=False)
        terms[name] = {"s_form": s_form, "t_form": t_form}
    scale_terms = max(abs(v["s_form"]) for v in terms.values())
    for v in terms.values():
        denom = max(abs(v["s_form"]), abs(v["t_form"]), 1e-12 * scale_terms,
                    1e-300)
        v["pair_rel_gap"] = abs(v["s_form"] - v["t_form"]) / denom
    t_quad = time.perf_counter()

    main_term = -terms["main"]["s_form"]
    error_terms = {k: v["s_form"] for k, v in terms.items() if k != "main"}
    error_term = sum(error_terms.values())
    total = main_term + error_term

    point = np.asarray(grid.config.point, dtype=float)
    psi_p = np.asarray(source.psi(point), dtype=float)
    g_p = entry.metric(point)
    if source.rank == 0:
        reference = 4.0 * np.pi * float(psi_p) * float(J)
    else:
        reference = 4.0 * np.pi * float(np.einsum("mn,m,n->", g_p, psi_p, J))
    residual = abs(total - reference)
    residual_rel = residual / max(abs(reference), abs(total), 1e-300)

    cfg = grid.config
    n_trunc = int(np.sum(grid.truncation_index < grid.s.size))
    truncation = {
        "n_truncated_generators": n_trunc,
        "common_last_index": int(grid.truncation_index.min()),
        "support_alive_past_truncation": bool(truncated_support),
        "psi_max_at_boundary": shell_max,
        "cut_flagged": False,
    }
    if entry.topology == "cylinder":
        period = float(entry.params["period"])
        cut = cn.detect_cut_torus(grid, period)
        t_ret = np.where(grid.retained_mask(), grid.x[..., 0], point[0])
        depth = float(point[0] - t_ret.min())
        cut_truncated = (grid.cut_s is not None
                         and bool(np.any(grid.cut_s <= grid.s[-1])))
        truncation["wrap_period"] = period
        truncation["cone_depth"] = depth
        truncation["tau_cut"] = cut.tau_cut
        truncation["first_cut_intersection"] = cut.measured_first_intersection
        truncation["cut_flagged"] = bool(cut_truncated and truncated_support)
        if truncation["cut_flagged"]:
            warnings.warn(
                "source mass extends past the wrap cuts of the cylinder "
                f"cone (validity depth {cut.tau_cut:.3f}, cone depth "
                f"{depth:.3f}); the single-cone value omits the wrapped "
                "contributions", TruncatedConeWarning, stacklevel=2)

    grid_meta = {
        "metric": entry.name, "metric_params": dict(entry.params),
        "vertex": [float(v) for v in point],
        "n_theta": cfg.n_theta, "n_phi": cfg.n_phi, "n_s": cfg.n_s,
        "s_max": cfg.s_max, "grading": cfg.grading,
        "rtol": cfg.rtol, "atol": cfg.atol,
    }
    timings = {"transport_s": t_coeff - t0,
               "error_density_s": t_density - t_coeff,
               "quadrature_s": t_quad - t_density}
    return RepresentationReport(
        main_term=main_term, error_terms=error_terms, error_term=error_term,
        total=total, reference=reference, residual=residual,
        residual_rel=residual_rel, terms=terms,
        parameterization_gap=max(v["pair_rel_gap"] for v in terms.values()),
        rank=source.rank, vertex_datum=np.atleast_1d(J).tolist(),
        psi_at_vertex=np.atleast_1d(psi_p).tolist(), grid_meta=grid_meta,
        truncation=truncation, source_label=source.label, timings=timings)


# ---------------------------------------------------------------------------
# vertex-limit diagnostics


@dataclass
class VertexLimitReport:
    """Sphere-integral series approaching the vertex.

    limit_series carries -(1/2) * int phi^2 trchi g(A, psi) dA per level,
    which tends to -4 pi g(psi(p), J_p); data_series carries
    -int phi g(A, D_T psi) dA, which tends to 0 linearly in s.
    """

    s_levels: np.ndarray
    limit_series: np.ndarray
    limit_reference: float
    limit_gap: np.ndarray
    limit_rate: float
    data_series: np.ndarray
    data_rate: float

    def to_dict(self) -> dict:
        return {"s_levels": self.s_levels.tolist(),
                "limit_series": self.limit_series.tolist(),
                "limit_reference": self.limit_reference,
                "limit_gap": self.limit_gap.tolist(),
                "limit_rate": self.limit_rate,
                "data_series": self.data_series.tolist(),
                "data_rate": self.data_rate}


def _fit_rate(s, gap):
    good = gap > 1e-13 * max(gap.max(), 1e-300)
    if np.count_nonzero(good) < 2:
        return float("nan")
    return float(np.polyfit(np.log(s[good]), np.log(gap[good]), 1)[0])


def vertex_limit_diagnostics(grid: ConeGrid, source: SourceSpec,
                             vertex_datum, n_levels: int = 24,
                             tf: Optional[tp.TransportedField] = None,
                             ) -> VertexLimitReport:
    """Evaluate the two boundary sphere integrals on shrinking levels.

    Uses only ODE-accurate cone data (expansion, area density, transported
    field), no angular stencils, so the levels may go all the way down to
    the first affine node.
    """
    if source.psi_grad is None:
        raise ValueError("vertex-limit diagnostics need source.psi_grad")
    entry = grid.config.entry
    J = np.asarray(vertex_datum, dtype=float)
    if tf is None:
        tf = tp.transported_field(grid, J)

    k_top = int(np.searchsorted(grid.s, 0.5 * grid.config.s_max))
    k_top = min(k_top, int(grid.truncation_index.min()) - 1)
    levels = np.unique(np.geomspace(1, max(k_top, 2), n_levels).astype(int))
    s_lev = grid.s[levels]

    x = grid.x[:, :, levels]
    L = grid.L[:, :, levels]
    det = grid.det_M[:, :, levels]
    trchi = grid.tr_chi[:, :, levels]
    A = tf.A[:, :, levels]
    g = entry.metric(x)
    That = tp.slice_normal(entry, x)
    lapse = 1.0 / np.einsum("ijsmn,ijsm,ijsn->ijs", g, L, That)

    psi = np.asarray(source.psi(x), dtype=float)
    dpsi = np.asarray(source.psi_grad(x), dtype=float)
    if source.rank == 0:
        g_a_psi = A * psi
        d_t_psi = np.einsum("ijsm,ijsm->ijs", That, dpsi)
        g_a_dt = A * d_t_psi
    else:
        g_a_psi = np.einsum("ijsmn,ijsm,ijsn->ijs", g, A, psi)
        gam = entry.christoffel(x)
        d_t_psi = np.einsum("ijsm,ijsam->ijsa", That, dpsi) \
            + np.einsum("ijsm,ijsaml,ijsl->ijsa", That, gam, psi)
        g_a_dt = np.einsum("ijsmn,ijsm,ijsn->ijs", g, A, d_t_psi)

    w = grid.directions.weights
    limit_series = -0.5 * np.einsum("ij,ijs->s", w,
                                    lapse ** 2 * trchi * g_a_psi * det)
    data_series = -np.einsum("ij,ijs->s", w, lapse * g_a_dt * det)

    point = np.asarray(grid.config.point, dtype=float)
    psi_p = np.asarray(source.psi(point), dtype=float)
    g_p = entry.metric(point)
    if source.rank == 0:
        ref = -4.0 * np.pi * float(psi_p) * float(J)
    else:
        ref = -4.0 * np.pi * float(np.einsum("mn,m,n->", g_p, psi_p, J))

    gap = np.abs(limit_series - ref)
    return VertexLimitReport(
        s_levels=s_lev, limit_series=limit_series, limit_reference=ref,
        limit_gap=gap, limit_rate=_fit_rate(s_lev, gap),
        data_series=data_series,
        data_rate=_fit_rate(s_lev, np.abs(data_series)))


# ---------------------------------------------------------------------------
# refinement families


@dataclass
class FamilyReport:
    """A simultaneous-refinement convergence study of one identity."""

    reports: list
    h_values: np.ndarray         # 1 / n_theta per level
    residuals: np.ndarray
    measured_order: float

    def rows(self):
        for rep, h, r in zip(self.reports, self.h_values, self.residuals):
            gm = rep.grid_meta
            yield {"n_theta": gm["n_theta"], "n_phi": gm["n_phi"],
                   "n_s": gm["n_s"], "h": h, "residual": r,
                   "residual_rel": rep.residual_rel}

    def write_csv(self, path):
        rows = list(self.rows())
        cols = list(rows[0].keys())
        with open(path, "w") as fh:
            fh.write(",".join(cols) + "\n")
            for row in rows:
                fh.write(",".join(repr(row[c]) for c in cols) + "\n")


def refinement_family(cfg: VertexConfig, source: SourceSpec, vertex_datum,
                      levels: int = 3, tol_factor: float = 10.0,
                      ) -> FamilyReport:
    """Assemble the identity on a doubling family and fit the residual order.

    Level m doubles both grid directions and divides the ODE tolerances by
    tol_factor relative to level m-1; the fitted order is the slope of
    log residual against log h with h = 1/n_theta.
    """
    reports = []
    for m in range(levels):
        cfg_m = replace(cfg, n_theta=cfg.n_theta * 2 ** m,
                        n_phi=cfg.n_phi * 2 ** m, n_s=cfg.n_s * 2 ** m,
                        rtol=cfg.rtol / tol_factor ** m,
                        atol=cfg.atol / tol_factor ** m)
        grid = cn.build_cone(cfg_m)
        reports.append(assemble_identity(grid, source, vertex_datum))
    h = np.array([1.0 / r.grid_meta["n_theta"] for r in reports])
    res = np.array([max(r.residual, 1e-16) for r in reports])
    order = float(np.polyfit(np.log(h), np.log(res), 1)[0])
    for r in reports:
        r.measured_order = order
    return FamilyReport(reports=reports, h_values=h, residuals=res,
                        measured_order=order)
