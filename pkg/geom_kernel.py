#!/usr/bin/env python3
"""
Geometry Kernel Module

Exact evaluation of cubic Bezier curves and bilinearly blended Coons patches, their
first partial derivatives, surface area elements, unit normals and tessellation into
triangle meshes.

Key Features:
- A Coons patch bounded by four cubic Bezier curves is linear in its 12 control
  points. Every quantity here is computed from the closed-form blending weights
  W(s,t), W_s(s,t), W_t(s,t) (coons_basis), which also give the exact derivative of
  any evaluation with respect to the control points (used by losses.py).
- Batched evaluation: every operation accepts scalar or array parameters.
- Tessellation on a uniform (n+1) x (n+1) parameter grid with winding consistent
  with the patch normal P_s x P_t.

Control-point layout (12 slots, same order as the template file):
    [A, c1_1, c1_2, B, c2_1, c2_2, C, c3_1, c3_2, D, c4_1, c4_2]
    c1 = A..B is P(s,0);  c2 = B..C is P(1,t);
    c3 = C..D is P(1-s,1) (the t=1 edge reversed);  c4 = D..A is P(0,1-t).
Walking c1, c2, c3, c4 visits A -> B -> C -> D -> A, counterclockwise when viewed
from the side the normal points to.

Usage:
    from geom_kernel import CoonsPatch, eval_coons, tessellate
    patch = CoonsPatch(points)            # points: (12, 3)
    p = eval_coons(patch, 0.25, 0.75)
    mesh = tessellate(patch, 32)
"""

import logging
from dataclasses import dataclass

import numpy as np

from mesh_utils import TriangleMesh

logger = logging.getLogger(__name__)

# =============================================================================
# CONSTANTS
# =============================================================================

# Control-point slots of the four boundary curves, each in its own parameter direction
CURVE_SLOTS = (
    (0, 1, 2, 3),    # c1: A -> B
    (3, 4, 5, 6),    # c2: B -> C
    (6, 7, 8, 9),    # c3: C -> D
    (9, 10, 11, 0),  # c4: D -> A
)

# Corner slots A, B, C, D at (s,t) = (0,0), (1,0), (1,1), (0,1)
CORNER_SLOTS = (0, 3, 6, 9)

POINTS_PER_PATCH = 12

# Area element below which a normal is not computed (model units)
EPS_DEGENERATE = 1e-10


class DegenerateNormalError(ValueError):
    """Raised when a normal is requested at a zero-area parameter point."""


# =============================================================================
# DOMAIN TYPES
# =============================================================================

@dataclass(frozen=True)
class BezierCurve:
    """Cubic Bezier curve given by its four control points, shape (4, 3)."""
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.shape != (4, 3):
            raise ValueError(f"BezierCurve needs 4 control points of dimension 3, got shape {pts.shape}")
        object.__setattr__(self, 'points', pts)

    @property
    def p1(self):
        return self.points[0]

    @property
    def p4(self):
        return self.points[3]

    def reversed(self):
        return BezierCurve(self.points[::-1].copy())


@dataclass(frozen=True)
class CoonsPatch:
    """
    Coons patch given by its 12 control points in the boundary-loop slot order.

    Corners are not stored separately: consecutive curves share their endpoint slot,
    so the loop closes by construction.
    """
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.shape != (POINTS_PER_PATCH, 3):
            raise ValueError(f"CoonsPatch needs 12 control points of dimension 3, got shape {pts.shape}")
        object.__setattr__(self, 'points', pts)

    @classmethod
    def from_curves(cls, c1, c2, c3, c4):
        """
        Build a patch from four boundary curves given in loop order.

        Endpoints must coincide exactly (c1.p4 == c2.p1, ...); the shared corner is taken
        from the earlier curve.
        """
        curves = [np.asarray(c.points if isinstance(c, BezierCurve) else c, dtype=float) for c in (c1, c2, c3, c4)]
        for k in range(4):
            nxt = curves[(k + 1) % 4]
            if not np.array_equal(curves[k][3], nxt[0]):
                raise ValueError(f"Boundary loop is open between curve c{k + 1} and c{(k + 1) % 4 + 1}")
        pts = np.empty((POINTS_PER_PATCH, 3))
        for slots, curve in zip(CURVE_SLOTS, curves):
            pts[list(slots[:3])] = curve[:3]
        return cls(pts)


def patch_curves(patch):
    """Return the boundary curves c1..c4 of a patch, each in its own parameter direction."""
    return [BezierCurve(patch.points[list(slots)]) for slots in CURVE_SLOTS]


# =============================================================================
# BERNSTEIN BASIS
# =============================================================================

def bernstein(g):
    """Cubic Bernstein basis at each value of g, shape (N, 4)."""
    g = np.asarray(g, dtype=float).reshape(-1)
    h = 1.0 - g
    return np.stack([h * h * h, 3.0 * g * h * h, 3.0 * g * g * h, g * g * g], axis=1)


def bernstein_deriv(g):
    """Derivative of the cubic Bernstein basis, shape (N, 4)."""
    g = np.asarray(g, dtype=float).reshape(-1)
    h = 1.0 - g
    return np.stack([-3.0 * h * h, 3.0 * h * h - 6.0 * g * h, 6.0 * g * h - 3.0 * g * g, 3.0 * g * g], axis=1)


def _check_unit_interval(name, values):
    values = np.asarray(values, dtype=float)
    if values.size and (np.isnan(values).any() or values.min() < 0.0 or values.max() > 1.0):
        raise ValueError(f"Parameter {name} must lie in [0, 1]")
    return values


def eval_bezier(curve, g):
    """
    Evaluate a cubic Bezier curve.

    Args:
        curve: BezierCurve
        g: Scalar or array of curve parameters in [0, 1]

    Returns:
        np.ndarray: (3,) for a scalar parameter, (N, 3) otherwise
    """
    g_arr = _check_unit_interval('gamma', g)
    out = bernstein(g_arr) @ curve.points
    if g_arr.ndim == 0:
        return out[0]
    return out


# =============================================================================
# COONS BLENDING WEIGHTS
# =============================================================================

def coons_basis(s, t):
    """
    Closed-form blending weights of the bilinearly blended Coons patch.

    P(s,t) = (1-t) c1(s) + t c3(1-s) + s c2(t) + (1-s) c4(1-t)
             - [(1-s)(1-t) A + s(1-t) B + s t C + (1-s) t D]

    Args:
        s, t: Parameter arrays in [0, 1] (broadcast against each other)

    Returns:
        tuple: (W, W_s, W_t), each (N, 12), such that P = W @ X, P_s = W_s @ X,
        P_t = W_t @ X for the patch's control points X.
    """
    s, t = np.broadcast_arrays(np.asarray(s, dtype=float), np.asarray(t, dtype=float))
    s = s.reshape(-1)
    t = t.reshape(-1)
    n = s.size
    W = np.zeros((n, POINTS_PER_PATCH))
    Ws = np.zeros((n, POINTS_PER_PATCH))
    Wt = np.zeros((n, POINTS_PER_PATCH))

    bs, dbs = bernstein(s), bernstein_deriv(s)
    bms, dbms = bernstein(1.0 - s), bernstein_deriv(1.0 - s)
    bt, dbt = bernstein(t), bernstein_deriv(t)
    bmt, dbmt = bernstein(1.0 - t), bernstein_deriv(1.0 - t)
    c1, c2, c3, c4 = CURVE_SLOTS

    for j in range(4):
        # (1-t) c1(s)
        W[:, c1[j]] += (1.0 - t) * bs[:, j]
        Ws[:, c1[j]] += (1.0 - t) * dbs[:, j]
        Wt[:, c1[j]] -= bs[:, j]
        # t c3(1-s)
        W[:, c3[j]] += t * bms[:, j]
        Ws[:, c3[j]] -= t * dbms[:, j]
        Wt[:, c3[j]] += bms[:, j]
        # s c2(t)
        W[:, c2[j]] += s * bt[:, j]
        Ws[:, c2[j]] += bt[:, j]
        Wt[:, c2[j]] += s * dbt[:, j]
        # (1-s) c4(1-t)
        W[:, c4[j]] += (1.0 - s) * bmt[:, j]
        Ws[:, c4[j]] -= bmt[:, j]
        Wt[:, c4[j]] -= (1.0 - s) * dbmt[:, j]

    a, b, c, d = CORNER_SLOTS
    W[:, a] -= (1.0 - s) * (1.0 - t)
    Ws[:, a] += 1.0 - t
    Wt[:, a] += 1.0 - s
    W[:, b] -= s * (1.0 - t)
    Ws[:, b] -= 1.0 - t
    Wt[:, b] += s
    W[:, c] -= s * t
    Ws[:, c] -= t
    Wt[:, c] -= s
    W[:, d] -= (1.0 - s) * t
    Ws[:, d] += t
    Wt[:, d] -= 1.0 - s
    return W, Ws, Wt


def combine(W, X):
    """
    Blend control points with weights.

    Args:
        W: (N, 12) weights
        X: (12, 3) control points of one patch, or (N, 12, 3) per-row control points

    Returns:
        np.ndarray: (N, 3)

    Accumulates slot by slot so a row's result does not depend on N.
    """
    if X.ndim == 2:
        out = W[:, 0, None] * X[0]
        for k in range(1, POINTS_PER_PATCH):
            out = out + W[:, k, None] * X[k]
    else:
        out = W[:, 0, None] * X[:, 0]
        for k in range(1, POINTS_PER_PATCH):
            out = out + W[:, k, None] * X[:, k]
    return out


def _shape_result(out, s, t):
    if np.ndim(s) == 0 and np.ndim(t) == 0:
        return out[0]
    return out


# =============================================================================
# PATCH EVALUATION
# =============================================================================

def eval_coons(patch, s, t):
    """Evaluate P(s,t). Returns (3,) for scalar parameters, (N, 3) otherwise."""
    _check_unit_interval('s', s)
    _check_unit_interval('t', t)
    W, _, _ = coons_basis(s, t)
    return _shape_result(combine(W, patch.points), s, t)


def coons_partials(patch, s, t):
    """Exact partial derivatives (dP/ds, dP/dt) of the Coons patch."""
    _check_unit_interval('s', s)
    _check_unit_interval('t', t)
    _, Ws, Wt = coons_basis(s, t)
    return _shape_result(combine(Ws, patch.points), s, t), _shape_result(combine(Wt, patch.points), s, t)


def area_element(patch, s, t):
    """Surface area element |P_s x P_t|; zero at degenerate parameter points."""
    ps, pt = coons_partials(patch, s, t)
    return np.linalg.norm(np.cross(ps, pt), axis=-1)


def coons_normals(patch, s, t):
    """
    Batched unit normals (P_s x P_t normalized).

    Returns:
        tuple: (normals (N, 3), valid (N,) bool). Rows whose area element is at most
        EPS_DEGENERATE are zero and flagged invalid.
    """
    ps, pt = coons_partials(patch, np.atleast_1d(s), np.atleast_1d(t))
    cross = np.cross(ps, pt)
    area = np.linalg.norm(cross, axis=-1)
    valid = area > EPS_DEGENERATE
    normals = np.zeros_like(cross)
    normals[valid] = cross[valid] / area[valid, None]
    return normals, valid


def coons_normal(patch, s, t):
    """
    Unit normal at a single parameter point.

    Raises:
        DegenerateNormalError: if the area element is at most EPS_DEGENERATE
    """
    normals, valid = coons_normals(patch, s, t)
    if not valid[0]:
        raise DegenerateNormalError(f"Degenerate patch point at (s, t) = ({float(s)}, {float(t)})")
    return normals[0]


# =============================================================================
# TESSELLATION
# =============================================================================

def grid_parameters(n):
    """Parameters of the (n+1)^2 grid, vertex index j*(n+1)+i at (i/n, j/n)."""
    ticks = np.arange(n + 1) / n
    ss, tt = np.meshgrid(ticks, ticks, indexing='xy')
    return ss.reshape(-1), tt.reshape(-1)


def grid_faces(n):
    """Triangles of the n x n parameter grid, wound so (v1-v0) x (v2-v0) follows P_s x P_t."""
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing='xy')
    v00 = (j * (n + 1) + i).reshape(-1)
    v10 = v00 + 1
    v01 = v00 + n + 1
    v11 = v01 + 1
    lower = np.stack([v00, v10, v11], axis=1)
    upper = np.stack([v00, v11, v01], axis=1)
    return np.stack([lower, upper], axis=1).reshape(-1, 3)


def tessellate(patch, n):
    """
    Tessellate a patch on a uniform parameter grid.

    Args:
        patch: CoonsPatch
        n: Grid resolution (>= 1)

    Returns:
        TriangleMesh: (n+1)^2 vertices, 2 n^2 triangles
    """
    if n < 1:
        raise ValueError(f"Tessellation resolution must be >= 1, got {n}")
    s, t = grid_parameters(n)
    W, _, _ = coons_basis(s, t)
    return TriangleMesh(combine(W, patch.points), grid_faces(n))
