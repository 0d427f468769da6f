"""Analytic Lorentzian metric catalog with derived curvature tensors.

All tensors are evaluated in batch: a point array has shape (..., 4) and every
returned tensor carries the same leading batch shape.  Index conventions:

* signature (-,+,+,+), coordinates x^0 = t, x^1..x^3 spatial;
* christoffel(x)[..., a, m, n]   = Gamma^a_{mn} (symmetric in m, n);
* dchristoffel(x)[..., c, a, m, n] = d_c Gamma^a_{mn};
* riemann(x)[..., a, b, c, d]    = R_{abcd} fully lowered.

Curvature sign convention (RIEMANN_CONVENTION below): the package fixes

    R^a_{bcd} = d_c Gamma^a_{db} - d_d Gamma^a_{cb}
                + Gamma^a_{ce} Gamma^e_{db} - Gamma^a_{de} Gamma^e_{cb},
    R_{abcd}  = g_{ae} R^e_{bcd},
    Ric_{bd}  = R^a_{bad},

so round spheres have positive Ricci curvature and the transverse geodesic
deviation (Jacobi) system reads M'' = -R(e, L, e, L) M.  Formulas quoted from
sources using the opposite convention differ by the sign of every curvature
term; the identity assembly fixes those signs once, and the calibration tests
pin them against flat-space and closed-form curved oracles.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

RIEMANN_CONVENTION = "MTW"  # documented constant; see module docstring
SIGNATURE = (-1.0, 1.0, 1.0, 1.0)
FD_STEP_DEFAULT = 1e-4


# ---------------------------------------------------------------------------
# small tensor helpers


def minkowski_metric(x: np.ndarray) -> np.ndarray:
    """Flat metric diag(-1,1,1,1) broadcast over the batch shape of x."""
    g = np.zeros(x.shape[:-1] + (4, 4))
    for i, s in enumerate(SIGNATURE):
        g[..., i, i] = s
    return g


def inner(g: np.ndarray, v: np.ndarray, w: np.ndarray) -> np.ndarray:
    """g(v, w) for batched vectors."""
    return np.einsum("...ab,...a,...b->...", g, v, w)


def lower(g: np.ndarray, v: np.ndarray) -> np.ndarray:
    return np.einsum("...ab,...b->...a", g, v)


def raise_index(g_inv: np.ndarray, w: np.ndarray) -> np.ndarray:
    return np.einsum("...ab,...b->...a", g_inv, w)


def _fd4_partials(fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray,
                  h: float) -> np.ndarray:
    """4th-order central finite-difference partials of a batched field.

    Returns d_c fn(x) with the new derivative axis inserted right after the
    batch axes: shape batch + (4,) + value_shape.
    """
    x = np.asarray(x, dtype=float)
    batch = x.shape[:-1]
    outs = []
    for c in range(4):
        e = np.zeros(4)
        e[c] = h
        f_m2 = fn(x - 2 * e)
        f_m1 = fn(x - e)
        f_p1 = fn(x + e)
        f_p2 = fn(x + 2 * e)
        outs.append((f_m2 - 8 * f_m1 + 8 * f_p1 - f_p2) / (12 * h))
    val_shape = outs[0].shape[len(batch):]
    out = np.empty(batch + (4,) + val_shape)
    for c in range(4):
        out[(Ellipsis, c) + (slice(None),) * len(val_shape)] = outs[c]
    return out


def christoffel_from_metric_derivs(g_inv: np.ndarray,
                                   dg: np.ndarray) -> np.ndarray:
    """Gamma^a_{mn} from inverse metric and dg[..., c, m, n] = d_c g_{mn}."""
    # Gamma_{l mn} = (d_m g_{nl} + d_n g_{ml} - d_l g_{mn}) / 2
    gamma_l = 0.5 * (np.einsum("...mnl->...lmn", dg)
                     + np.einsum("...nml->...lmn", dg) - dg)
    return np.einsum("...al,...lmn->...amn", g_inv, gamma_l)


def riemann_from_christoffel(g: np.ndarray, gamma: np.ndarray,
                             dgamma: np.ndarray) -> np.ndarray:
    """Fully lowered R_{abcd} assembled from Gamma and its partials."""
    # R^a_{bcd} = d_c Gamma^a_{db} - d_d Gamma^a_{cb}
    #             + Gamma^a_{ce} Gamma^e_{db} - Gamma^a_{de} Gamma^e_{cb}
    r_up = (np.einsum("...cadb->...abcd", dgamma)
            - np.einsum("...dacb->...abcd", dgamma)
            + np.einsum("...ace,...edb->...abcd", gamma, gamma)
            - np.einsum("...ade,...ecb->...abcd", gamma, gamma))
    return np.einsum("...ae,...ebcd->...abcd", g, r_up)


def ricci_from_riemann(g_inv: np.ndarray, riemann: np.ndarray) -> np.ndarray:
    """Ric_{bd} = g^{ac} R_{abcd}."""
    return np.einsum("...ac,...abcd->...bd", g_inv, riemann)


# ---------------------------------------------------------------------------
# spacetime catalog


@dataclass(frozen=True)
class SpacetimePoint:
    """A point given by four chart coordinates plus the chart id."""

    coords: np.ndarray
    chart: int = 0

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=float)
        if c.shape != (4,) or not np.all(np.isfinite(c)):
            raise ValueError("coords must be 4 finite reals")
        object.__setattr__(self, "coords", c)


class Spacetime:
    """One catalog metric: batched tensor evaluation plus chart utilities.

    `mode` selects closed-form derivative formulas (when the entry provides
    them) or nested 4th-order finite differences of the metric.  Both modes
    are available for every entry so they can be cross-checked.
    """

    def __init__(self, name, params, metric_fn, christoffel_fn=None,
                 dchristoffel_fn=None, riemann_fn=None, mode="closed_form",
                 fd_step=FD_STEP_DEFAULT, n_charts=1, chart_guard_fn=None,
                 canonicalize_fn=None, chart_point_map=None,
                 chart_vector_map=None, chart_selector_fn=None,
                 topology="trivial", flat=False, vacuum=False,
                 default_vertex=None):
        if mode == "closed_form" and christoffel_fn is None:
            raise ValueError(f"{name}: no closed-form derivatives available")
        self.name = name
        self.params = dict(params)
        self._metric_fn = metric_fn
        self._christoffel_fn = christoffel_fn
        self._dchristoffel_fn = dchristoffel_fn
        self._riemann_fn = riemann_fn
        self.mode = mode
        self.fd_step = float(fd_step)
        self.n_charts = n_charts
        self._chart_guard_fn = chart_guard_fn
        self._canonicalize_fn = canonicalize_fn
        self._chart_point_map = chart_point_map
        self._chart_vector_map = chart_vector_map
        self.chart_selector_fn = chart_selector_fn
        self.topology = topology
        self.flat = flat
        self.vacuum = vacuum
        self.default_vertex = (np.zeros(4) if default_vertex is None
                               else np.asarray(default_vertex, dtype=float))

    # -- tensors ------------------------------------------------------------

    def metric(self, x: np.ndarray) -> np.ndarray:
        return self._metric_fn(np.asarray(x, dtype=float))

    def inverse_metric(self, x: np.ndarray) -> np.ndarray:
        return np.linalg.inv(self.metric(x))

    def christoffel(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.mode == "closed_form":
            return self._christoffel_fn(x)
        dg = _fd4_partials(self._metric_fn, x, self.fd_step)
        return christoffel_from_metric_derivs(np.linalg.inv(self.metric(x)), dg)

    def dchristoffel(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.mode == "closed_form" and self._dchristoffel_fn is not None:
            return self._dchristoffel_fn(x)
        return _fd4_partials(self.christoffel, x, self.fd_step)

    def riemann(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.flat:
            return np.zeros(x.shape[:-1] + (4, 4, 4, 4))
        if self.mode == "closed_form" and self._riemann_fn is not None:
            return self._riemann_fn(x)
        return riemann_from_christoffel(self.metric(x), self.christoffel(x),
                                        self.dchristoffel(x))

    def ricci(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.flat:
            return np.zeros(x.shape[:-1] + (4, 4))
        return ricci_from_riemann(self.inverse_metric(x), self.riemann(x))

    # -- charts -------------------------------------------------------------

    def chart_guard(self, x: np.ndarray, chart: int = 0) -> np.ndarray:
        """Positive slack inside the chart's validated region, <= 0 outside."""
        if self._chart_guard_fn is None:
            return np.full(np.asarray(x).shape[:-1], np.inf)
        return self._chart_guard_fn(np.asarray(x, dtype=float), chart)

    def canonicalize(self, x: np.ndarray) -> np.ndarray:
        """Map coordinates into the fundamental domain (quotient topologies)."""
        if self._canonicalize_fn is None:
            return np.asarray(x, dtype=float)
        return self._canonicalize_fn(np.asarray(x, dtype=float))

    def convert_point(self, x: np.ndarray, src: int, dst: int) -> np.ndarray:
        if src == dst:
            return np.asarray(x, dtype=float)
        if self._chart_point_map is None:
            raise ValueError(f"{self.name} has a single chart")
        return self._chart_point_map(np.asarray(x, dtype=float), src, dst)

    def convert_vector(self, x: np.ndarray, v: np.ndarray, src: int,
                       dst: int) -> np.ndarray:
        if src == dst:
            return np.asarray(v, dtype=float)
        if self._chart_vector_map is None:
            raise ValueError(f"{self.name} has a single chart")
        return self._chart_vector_map(np.asarray(x, dtype=float),
                                      np.asarray(v, dtype=float), src, dst)

    def describe(self) -> dict:
        return {"name": self.name, "params": self.params, "mode": self.mode,
                "n_charts": self.n_charts, "topology": self.topology}


@dataclass(frozen=True)
class MetricEval:
    """All derived tensors of one metric at one batch of points."""

    g: np.ndarray
    g_inv: np.ndarray
    gamma: np.ndarray
    riemann: np.ndarray
    ricci: np.ndarray


def eval_metric(entry: Spacetime, x) -> MetricEval:
    """Evaluate metric, inverse, Christoffels, Riemann and Ricci at x."""
    if isinstance(x, SpacetimePoint):
        x = x.coords
    x = np.asarray(x, dtype=float)
    if np.any(entry.chart_guard(x) <= 0):
        raise ValueError(f"point outside validated chart region of {entry.name}")
    g = entry.metric(x)
    eigs = np.linalg.eigvalsh(g)
    if not (np.all(eigs[..., 0] < 0) and np.all(eigs[..., 1:] > 0)):
        raise ValueError(f"{entry.name}: metric is not Lorentzian at the point")
    return MetricEval(g=g, g_inv=np.linalg.inv(g), gamma=entry.christoffel(x),
                      riemann=entry.riemann(x), ricci=entry.ricci(x))


def covariant_derivative_along(entry: Spacetime, x, v, tensor, rank=None,
                               variance=None, step=1e-5):
    """v^a D_a T at x for a tensor field T of rank 0..4.

    `tensor` is either a callable point -> components or a constant component
    array.  `variance` is a string of 'u'/'d' per slot (default all 'u');
    partial derivatives of the field are taken with 4th-order central
    differences of step `step`, then corrected with the Christoffel terms.
    """
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    n_batch = x.ndim - 1
    if callable(tensor):
        fn = tensor
        t0 = np.asarray(fn(x), dtype=float)
    else:
        const = np.asarray(tensor, dtype=float)  # pure slot components

        def fn(y, _t=const):
            return np.broadcast_to(_t, y.shape[:-1] + _t.shape)

        t0 = np.asarray(fn(x), dtype=float)
    r = t0.ndim - n_batch
    if rank is not None and rank != r:
        raise ValueError(f"component array has rank {r}, expected {rank}")
    if r < 0 or r > 4:
        raise ValueError("supported ranks are 0..4")
    if variance is None:
        variance = "u" * r
    dT = _fd4_partials(fn, x, step)  # batch + (c,) + slots
    idx = "abcd"[:r]
    res = np.einsum(f"...c{idx},...c->...{idx}", dT, v)
    if r == 0:
        return res
    gamma = entry.christoffel(x)
    vg = np.einsum("...c,...mcn->...mn", v, gamma)  # v^c Gamma^m_{cn}
    for slot, var in enumerate(variance):
        pre, s, post = idx[:slot], idx[slot], idx[slot + 1:]
        if var == "u":
            res = res + np.einsum(f"...{s}e,...{pre}e{post}->...{idx}", vg, t0)
        else:
            res = res - np.einsum(f"...e{s},...{pre}e{post}->...{idx}", vg, t0)
    return res


# ---------------------------------------------------------------------------
# catalog entries


def _flat_christoffel(x):
    return np.zeros(x.shape[:-1] + (4, 4, 4))


def _flat_dchristoffel(x):
    return np.zeros(x.shape[:-1] + (4, 4, 4, 4))


def make_minkowski() -> Spacetime:
    return Spacetime("minkowski", {}, minkowski_metric, _flat_christoffel,
                     _flat_dchristoffel, flat=True, vacuum=True,
                     default_vertex=[1.0, 0.0, 0.0, 0.0])


def make_flat_cylinder(period: float = 1.0, axis: int = 3) -> Spacetime:
    """Flat metric on R^3 x S^1: x^axis is identified modulo `period`."""
    if not (1 <= axis <= 3):
        raise ValueError("periodic axis must be spatial (1..3)")
    a = float(period)

    def canonicalize(x):
        y = np.array(x, dtype=float)
        y[..., axis] = (y[..., axis] + 0.5 * a) % a - 0.5 * a
        return y

    st = Spacetime("flat_cylinder", {"period": a, "axis": axis},
                   minkowski_metric, _flat_christoffel, _flat_dchristoffel,
                   canonicalize_fn=canonicalize, topology="cylinder",
                   flat=True, vacuum=True,
                   default_vertex=[0.8, 0.0, 0.0, 0.0])
    return st


# -- Einstein static universe R x S^3 ---------------------------------------


def _es_metric(radius):
    a2 = radius * radius

    def metric(x):
        chi, th = x[..., 1], x[..., 2]
        g = np.zeros(x.shape[:-1] + (4, 4))
        g[..., 0, 0] = -1.0
        g[..., 1, 1] = a2
        g[..., 2, 2] = a2 * np.sin(chi) ** 2
        g[..., 3, 3] = a2 * (np.sin(chi) * np.sin(th)) ** 2
        return g

    return metric


def _es_christoffel(x):
    chi, th = x[..., 1], x[..., 2]
    sc, cc = np.sin(chi), np.cos(chi)
    st, ct = np.sin(th), np.cos(th)
    G = np.zeros(x.shape[:-1] + (4, 4, 4))
    G[..., 1, 2, 2] = -sc * cc
    G[..., 1, 3, 3] = -sc * cc * st ** 2
    G[..., 2, 1, 2] = G[..., 2, 2, 1] = cc / sc
    G[..., 2, 3, 3] = -st * ct
    G[..., 3, 1, 3] = G[..., 3, 3, 1] = cc / sc
    G[..., 3, 2, 3] = G[..., 3, 3, 2] = ct / st
    return G


def _es_dchristoffel(x):
    chi, th = x[..., 1], x[..., 2]
    sc, cc = np.sin(chi), np.cos(chi)
    st, ct = np.sin(th), np.cos(th)
    D = np.zeros(x.shape[:-1] + (4, 4, 4, 4))
    cos2c = cc * cc - sc * sc
    cos2t = ct * ct - st * st
    D[..., 1, 1, 2, 2] = -cos2c
    D[..., 1, 1, 3, 3] = -cos2c * st ** 2
    D[..., 2, 1, 3, 3] = -sc * cc * 2 * st * ct
    D[..., 1, 2, 1, 2] = D[..., 1, 2, 2, 1] = -1.0 / sc ** 2
    D[..., 2, 2, 3, 3] = -cos2t
    D[..., 1, 3, 1, 3] = D[..., 1, 3, 3, 1] = -1.0 / sc ** 2
    D[..., 2, 3, 2, 3] = D[..., 2, 3, 3, 2] = -1.0 / st ** 2
    return D


def _es_chart_to_sphere(q):
    """(chi, theta, phi) -> unit vector in R^4."""
    chi, th, ph = q[..., 0], q[..., 1], q[..., 2]
    sc, st = np.sin(chi), np.sin(th)
    return np.stack([np.cos(chi), sc * np.cos(th), sc * st * np.cos(ph),
                     sc * st * np.sin(ph)], axis=-1)


def _es_sphere_to_chart(u):
    chi = np.arccos(np.clip(u[..., 0], -1.0, 1.0))
    sc = np.sqrt(np.maximum(1.0 - u[..., 0] ** 2, 1e-300))
    th = np.arccos(np.clip(u[..., 1] / sc, -1.0, 1.0))
    ph = np.arctan2(u[..., 3], u[..., 2])
    return np.stack([chi, th, ph], axis=-1)


def _es_jacobian(q):
    """Columns d(unit vector)/d(chi,theta,phi), shape (...,4,3)."""
    chi, th, ph = q[..., 0], q[..., 1], q[..., 2]
    sc, cc = np.sin(chi), np.cos(chi)
    st, ct = np.sin(th), np.cos(th)
    sp, cp = np.sin(ph), np.cos(ph)
    J = np.zeros(q.shape[:-1] + (4, 3))
    J[..., 0, 0] = -sc
    J[..., 1, 0] = cc * ct
    J[..., 2, 0] = cc * st * cp
    J[..., 3, 0] = cc * st * sp
    J[..., 1, 1] = -sc * st
    J[..., 2, 1] = sc * ct * cp
    J[..., 3, 1] = sc * ct * sp
    J[..., 2, 2] = -sc * st * sp
    J[..., 3, 2] = sc * st * cp
    return J


# chart 1 is chart 0 composed with this SO(4) rotation of the embedding:
# (u0,u1,u2,u3) -> (u2,u3,u0,u1).  Its coordinate-singular circle {u0=u1=0}
# is everywhere at distance pi/2 from chart 0's singular circle {u2=u3=0},
# so every great circle stays >= pi/4 away from one of the two.
_ES_ROT = np.array([[0.0, 0.0, 1.0, 0.0],
                    [0.0, 0.0, 0.0, 1.0],
                    [1.0, 0.0, 0.0, 0.0],
                    [0.0, 1.0, 0.0, 0.0]])


def _es_point_map(x, src, dst):
    q = x[..., 1:]
    u = _es_chart_to_sphere(q)
    if src == 1:
        u = u @ _ES_ROT.T
    if dst == 1:
        u = u @ _ES_ROT
    out = np.array(x, dtype=float)
    out[..., 1:] = _es_sphere_to_chart(u)
    return out


def _es_vector_map(x, v, src, dst):
    q = x[..., 1:]
    Js = _es_jacobian(q)
    du = np.einsum("...ac,...c->...a", Js, v[..., 1:])
    u = _es_chart_to_sphere(q)
    if src == 1:
        u, du = u @ _ES_ROT.T, du @ _ES_ROT.T
    if dst == 1:
        u, du = u @ _ES_ROT, du @ _ES_ROT
    qd = _es_sphere_to_chart(u)
    Jd = _es_jacobian(qd)
    # solve J v = du in the least-squares sense (J has orthogonal columns)
    JtJ = np.einsum("...ai,...aj->...ij", Jd, Jd)
    Jtdu = np.einsum("...ai,...a->...i", Jd, du)
    out = np.array(v, dtype=float)
    out[..., 1:] = np.linalg.solve(JtJ, Jtdu[..., None])[..., 0]
    return out


def _es_guard(x, chart):
    """Angular distance to the chart's singular circle, minus a margin.

    In its own coordinates every hyperspherical chart is singular on the
    great circle {sin(chi) sin(theta) = 0} = {u2 = u3 = 0} of the embedding,
    so the guard formula is chart-independent.
    """
    u = _es_chart_to_sphere(x[..., 1:])
    dist = np.arcsin(np.clip(np.hypot(u[..., 2], u[..., 3]), 0.0, 1.0))
    # the chart chooser keeps generators at least 0.02 away from the circle;
    # below 0.01 the 1/sin factors in the Christoffels degrade genuinely
    return dist - 0.01


def _es_riemann(metric_fn, a):
    """Closed-form curvature of the round static cylinder R x S^3(a), fully
    lowered: R_abcd = (h_ac h_bd - h_ad h_bc) / a^2, h the spatial metric."""

    def riemann(x):
        h = metric_fn(x).copy()
        h[..., 0, :] = 0.0
        h[..., :, 0] = 0.0
        return (h[..., :, None, :, None] * h[..., None, :, None, :]
                - h[..., :, None, None, :] * h[..., None, :, :, None]) / (a * a)

    return riemann


def make_einstein_static(radius: float = 1.0) -> Spacetime:
    a = float(radius)
    metric_fn = _es_metric(a)
    st = Spacetime("einstein_static", {"radius": a}, metric_fn,
                   _es_christoffel, _es_dchristoffel,
                   riemann_fn=_es_riemann(metric_fn, a), n_charts=2,
                   chart_guard_fn=_es_guard, chart_point_map=_es_point_map,
                   chart_vector_map=_es_vector_map,
                   chart_selector_fn=es_choose_chart,
                   default_vertex=[0.0, np.pi / 2, np.pi / 3, 0.7])
    return st


def es_choose_chart(p0: np.ndarray, ell0: np.ndarray, s_max: float,
                    margin: float = 0.2, hard_floor: float = 0.02,
                    n_arc: int = 256) -> np.ndarray:
    """Per-generator chart assignment for the closed spatial sections.

    The spatial track of a null geodesic is a great-circle arc traversed at a
    constant rate; the assignment samples that arc up to s_max and keeps
    chart 0 when its singular circle stays at least `margin` away from every
    sampled point, otherwise picks whichever chart keeps the larger
    clearance.  The two singular circles satisfy d0 + d1 = pi/2 pointwise, so
    short arcs always have a clean chart; long arcs may run near both circles
    at different parameters, which only degrades step size until the
    clearance drops below `hard_floor`, where the assignment raises.

    p0: vertex coordinates in chart 0, shape (4,).
    ell0: initial null tangents in chart 0, shape (..., 4).
    Returns chart ids of shape ell0.shape[:-1].
    """
    q = p0[1:]
    u = _es_chart_to_sphere(q)                       # (4,)
    J = _es_jacobian(q)                              # (4, 3)
    du = np.einsum("ac,...c->...a", J, ell0[..., 1:])
    du = du - np.einsum("...a,a->...", du, u)[..., None] * u
    speed = np.linalg.norm(du, axis=-1, keepdims=True)
    that = du / np.maximum(speed, 1e-300)
    arc = speed[..., 0] * s_max                      # swept central angle
    alpha = np.linspace(0.0, 1.0, n_arc) * arc[..., None]
    track = (np.cos(alpha)[..., None] * u
             + np.sin(alpha)[..., None] * that[..., None, :])
    d0 = np.arcsin(np.clip(np.hypot(track[..., 2], track[..., 3]), 0.0, 1.0))
    min_d0 = d0.min(axis=-1)
    min_d1 = (0.5 * np.pi - d0).min(axis=-1)
    chart = np.where(min_d0 >= margin, 0, np.where(min_d1 > min_d0, 1, 0))
    clearance = np.where(chart == 0, min_d0, min_d1)
    if np.any(clearance < hard_floor):
        raise RuntimeError(
            f"{int((clearance < hard_floor).sum())} generators approach both "
            f"coordinate-singular circles within {hard_floor} before "
            f"s_max={s_max}; reduce s_max or move the vertex")
    return chart


# -- Schwarzschild exterior ---------------------------------------------------


def _schw_metric(mass):
    M = mass

    def metric(x):
        r, th = x[..., 1], x[..., 2]
        f = 1.0 - 2.0 * M / r
        g = np.zeros(x.shape[:-1] + (4, 4))
        g[..., 0, 0] = -f
        g[..., 1, 1] = 1.0 / f
        g[..., 2, 2] = r ** 2
        g[..., 3, 3] = (r * np.sin(th)) ** 2
        return g

    return metric


def _schw_christoffel_fn(mass):
    M = mass

    def christoffel(x):
        r, th = x[..., 1], x[..., 2]
        f = 1.0 - 2.0 * M / r
        st, ct = np.sin(th), np.cos(th)
        G = np.zeros(x.shape[:-1] + (4, 4, 4))
        G[..., 0, 0, 1] = G[..., 0, 1, 0] = M / (r ** 2 * f)
        G[..., 1, 0, 0] = f * M / r ** 2
        G[..., 1, 1, 1] = -M / (r ** 2 * f)
        G[..., 1, 2, 2] = -r * f
        G[..., 1, 3, 3] = -r * f * st ** 2
        G[..., 2, 1, 2] = G[..., 2, 2, 1] = 1.0 / r
        G[..., 2, 3, 3] = -st * ct
        G[..., 3, 1, 3] = G[..., 3, 3, 1] = 1.0 / r
        G[..., 3, 2, 3] = G[..., 3, 3, 2] = ct / st
        return G

    return christoffel


def _schw_dchristoffel_fn(mass):
    M = mass

    def dchristoffel(x):
        r, th = x[..., 1], x[..., 2]
        f = 1.0 - 2.0 * M / r
        st, ct = np.sin(th), np.cos(th)
        cos2t = ct * ct - st * st
        rr = r * r - 2.0 * M * r
        D = np.zeros(x.shape[:-1] + (4, 4, 4, 4))
        dttr = -2.0 * M * (r - M) / rr ** 2  # d_r [M / (r^2 f)]
        D[..., 1, 0, 0, 1] = D[..., 1, 0, 1, 0] = dttr
        D[..., 1, 1, 0, 0] = (2.0 * M / r ** 3) * (3.0 * M / r - 1.0)
        D[..., 1, 1, 1, 1] = -dttr
        D[..., 1, 1, 2, 2] = -1.0
        D[..., 1, 1, 3, 3] = -st ** 2
        D[..., 2, 1, 3, 3] = -r * f * 2 * st * ct
        D[..., 1, 2, 1, 2] = D[..., 1, 2, 2, 1] = -1.0 / r ** 2
        D[..., 2, 2, 3, 3] = -cos2t
        D[..., 1, 3, 1, 3] = D[..., 1, 3, 3, 1] = -1.0 / r ** 2
        D[..., 2, 3, 2, 3] = D[..., 2, 3, 3, 2] = -1.0 / st ** 2
        return D

    return dchristoffel


def make_schwarzschild(mass: float = 1.0) -> Spacetime:
    M = float(mass)

    def guard(x, chart):
        r, th = x[..., 1], x[..., 2]
        return np.minimum.reduce([(r - 2.5 * M) / M, th - 0.15,
                                  np.pi - 0.15 - th])

    return Spacetime("schwarzschild", {"mass": M}, _schw_metric(M),
                     _schw_christoffel_fn(M), _schw_dchristoffel_fn(M),
                     chart_guard_fn=guard, vacuum=True,
                     default_vertex=[0.0, 10.0 * M, np.pi / 3, 0.2])


# -- compactly supported analytic perturbation of the flat metric -------------


def _bump_u(u):
    """exp(u/(u-1)) for u < 1, else 0; value, d/du, d2/du2."""
    u = np.asarray(u, dtype=float)
    inside = u < 1.0
    um1 = np.where(inside, u - 1.0, -1.0)
    b = np.where(inside, np.exp(u / um1), 0.0)
    p1 = -1.0 / um1 ** 2          # phi'(u) with phi = u/(u-1)
    p2 = 2.0 / um1 ** 3           # phi''(u)
    db = np.where(inside, b * p1, 0.0)
    d2b = np.where(inside, b * (p1 * p1 + p2), 0.0)
    return b, db, d2b


def make_perturbed_minkowski(amplitude: float = 1e-2, center=None,
                             radius: float = 4.0, seed: int = 11,
                             mode: str = "closed_form") -> Spacetime:
    """g = eta + amplitude * bump(x) * (C0 + C1·(x-c)/radius), all analytic.

    The bump is a C-infinity function of the Euclidean 4-distance from
    `center`, supported in the ball of radius `radius`; C0, C1 are seeded
    symmetric coefficient tensors with entries in (-1/2, 1/2).
    """
    eps = float(amplitude)
    R = float(radius)
    c = np.zeros(4) if center is None else np.asarray(center, dtype=float)
    rng = np.random.default_rng(seed)
    C0 = rng.uniform(-0.5, 0.5, (4, 4))
    C0 = 0.5 * (C0 + C0.T)
    C1 = rng.uniform(-0.5, 0.5, (4, 4, 4))
    C1 = 0.5 * (C1 + np.swapaxes(C1, 0, 1))

    def h_parts(x):
        y = (x - c) / R
        u = np.sum(y * y, axis=-1)
        b, db, d2b = _bump_u(u)
        du = 2.0 * y / R                       # d_a u
        P = C0 + np.einsum("mnl,...l->...mn", C1, y)
        dP = C1 / R                            # d_l P_{mn} = C1_{mn l}/R
        return u, b, db, d2b, du, P, dP

    def metric(x):
        x = np.asarray(x, dtype=float)
        _, b, _, _, _, P, _ = h_parts(x)
        return minkowski_metric(x) + eps * b[..., None, None] * P

    def dmetric(x):
        _, b, db, _, du, P, dP = h_parts(x)
        term1 = np.einsum("...c,...mn->...cmn", db[..., None] * du, P)
        term2 = b[..., None, None, None] * np.einsum("mnc->cmn", dP)
        return eps * (term1 + term2)

    def d2metric(x):
        _, b, db, d2b, du, P, dP = h_parts(x)
        dPc = np.einsum("mnc->cmn", dP)
        t1 = np.einsum("...d,...c,...mn->...dcmn", du, du,
                       d2b[..., None, None] * P)
        t2 = (2.0 / (R * R)) * np.einsum("dc,...mn->...dcmn", np.eye(4),
                                         db[..., None, None] * P)
        t3 = np.einsum("...d,...cmn->...dcmn", db[..., None] * du, dPc)
        t4 = np.einsum("...c,...dmn->...dcmn", db[..., None] * du, dPc)
        return eps * (t1 + t2 + t3 + t4)

    def christoffel(x):
        x = np.asarray(x, dtype=float)
        return christoffel_from_metric_derivs(np.linalg.inv(metric(x)),
                                              dmetric(x))

    def dchristoffel(x):
        x = np.asarray(x, dtype=float)
        g_inv = np.linalg.inv(metric(x))
        dg = dmetric(x)
        d2g = d2metric(x)
        # S_{l mn} = (d_m g_{nl} + d_n g_{ml} - d_l g_{mn}) / 2 and d_d S
        S = 0.5 * (np.einsum("...mnl->...lmn", dg)
                   + np.einsum("...nml->...lmn", dg) - dg)
        dS = 0.5 * (np.einsum("...dmnl->...dlmn", d2g)
                    + np.einsum("...dnml->...dlmn", d2g) - d2g)
        dg_inv = -np.einsum("...al,...dlk,...kb->...dab", g_inv, dg, g_inv)
        return (np.einsum("...dal,...lmn->...damn", dg_inv, S)
                + np.einsum("...al,...dlmn->...damn", g_inv, dS))

    return Spacetime("perturbed_minkowski",
                     {"amplitude": eps, "center": list(map(float, c)),
                      "radius": R, "seed": int(seed)},
                     metric, christoffel, dchristoffel, mode=mode,
                     default_vertex=[1.0, 0.1, -0.2, 0.15])


CATALOG = {
    "minkowski": make_minkowski,
    "flat_cylinder": make_flat_cylinder,
    "einstein_static": make_einstein_static,
    "schwarzschild": make_schwarzschild,
    "perturbed_minkowski": make_perturbed_minkowski,
}


def get_spacetime(name: str, **params) -> Spacetime:
    """Instantiate a catalog metric by name."""
    if name not in CATALOG:
        raise KeyError(f"unknown metric '{name}'; have {sorted(CATALOG)}")
    return CATALOG[name](**params)


# ---------------------------------------------------------------------------
# vertex frames


def normalize_observer(g_p: np.ndarray, T: np.ndarray) -> np.ndarray:
    """Scale a timelike vector to g(T,T) = -1."""
    n = inner(g_p, T, T)
    if n >= 0:
        raise ValueError("observer vector is not timelike")
    return T / np.sqrt(-n)


def vertex_frame(g_p: np.ndarray, T: np.ndarray) -> np.ndarray:
    """Spatial orthonormal triad E (3 rows) completing the unit observer T."""
    basis = [T]
    for k in (1, 2, 3, 0):
        v = np.zeros(4)
        v[k] = 1.0
        for b in basis:
            nb = inner(g_p, b, b)
            v = v - (inner(g_p, v, b) / nb) * b
        n = inner(g_p, v, v)
        if n > 1e-12:
            basis.append(v / np.sqrt(n))
        if len(basis) == 4:
            break
    if len(basis) < 4:
        raise ValueError("degenerate frame at vertex")
    return np.stack(basis[1:], axis=0)


def past_null_vector(T: np.ndarray, E: np.ndarray, omega: np.ndarray) -> np.ndarray:
    """ell_omega = -T + omega^i E_i: past-directed null, g(ell, T) = 1."""
    return -T + np.einsum("...i,ia->...a", omega, E)
