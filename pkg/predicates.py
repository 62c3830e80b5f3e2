#!/usr/bin/env python3
"""
Exact Geometric Predicates Module

Orientation predicates with a floating-point error filter and an exact rational
fallback, and a triangle-triangle intersection test built only on their signs.

Key Features:
- orient2d / orient3d are vectorized over rows. The float determinant is trusted when
  it exceeds a forward error bound proportional to its permanent; the remaining rows
  are re-evaluated exactly with fractions.Fraction (every double is an exact rational).
- triangles_intersect decides intersection (touching included) of many triangle pairs
  at once. Non-coplanar pairs are resolved from edge-versus-triangle straddle tests;
  coplanar pairs and in-plane edges fall back to exact 2D tests on a projection that
  drops the dominant normal axis.
- Degenerate (collinear) triangles never intersect anything.

Usage:
    from predicates import triangles_intersect
    hits = triangles_intersect(tris_a, tris_b)   # (M, 3, 3) each -> (M,) bool
"""

from fractions import Fraction

import numpy as np

# Relative forward error bounds (slightly above the classical first-stage constants)
ERRBOUND_2D = 1e-15
ERRBOUND_3D = 1e-15

# Nonzero coordinate differences below these magnitudes can underflow in the products
TINY_DIFF_2D = 1e-150
TINY_DIFF_3D = 1e-100


# =============================================================================
# ORIENTATION PREDICATES
# =============================================================================

def _tiny(diffs, limit):
    return ((diffs != 0) & (np.abs(diffs) < limit)).any(axis=1)


def _exact_orient2d(a, b, c):
    ax, ay = (Fraction(float(v)) for v in a)
    bx, by = (Fraction(float(v)) for v in b)
    cx, cy = (Fraction(float(v)) for v in c)
    det = (ax - cx) * (by - cy) - (ay - cy) * (bx - cx)
    return (det > 0) - (det < 0)


def _exact_orient3d(a, b, c, d):
    a, b, c, d = ([Fraction(float(v)) for v in p] for p in (a, b, c, d))
    adx, ady, adz = a[0] - d[0], a[1] - d[1], a[2] - d[2]
    bdx, bdy, bdz = b[0] - d[0], b[1] - d[1], b[2] - d[2]
    cdx, cdy, cdz = c[0] - d[0], c[1] - d[1], c[2] - d[2]
    det = (adx * (bdy * cdz - bdz * cdy)
           + bdx * (cdy * adz - cdz * ady)
           + cdx * (ady * bdz - adz * bdy))
    return (det > 0) - (det < 0)


def orient2d(a, b, c):
    """
    Sign of the 2D orientation of (a, b, c): +1 counterclockwise, -1 clockwise, 0 collinear.

    Args:
        a, b, c: (..., 2) arrays

    Returns:
        np.ndarray of int8 with the broadcast leading shape
    """
    a, b, c = np.broadcast_arrays(*(np.asarray(p, dtype=float) for p in (a, b, c)))
    shape = a.shape[:-1]
    a, b, c = (p.reshape(-1, 2) for p in (a, b, c))
    left = (a[:, 0] - c[:, 0]) * (b[:, 1] - c[:, 1])
    right = (a[:, 1] - c[:, 1]) * (b[:, 0] - c[:, 0])
    det = left - right
    bound = ERRBOUND_2D * (np.abs(left) + np.abs(right))
    out = np.sign(det).astype(np.int8)
    recheck = ((np.abs(det) <= bound) & (bound > 0)) | _tiny(np.hstack([a - c, b - c]), TINY_DIFF_2D)
    for i in np.nonzero(recheck)[0]:
        out[i] = _exact_orient2d(a[i], b[i], c[i])
    return out.reshape(shape)


def orient3d(a, b, c, d):
    """
    Sign of det[a - d, b - d, c - d]: which side of the plane (a, b, c) point d lies on.

    Args:
        a, b, c, d: (..., 3) arrays

    Returns:
        np.ndarray of int8 with the broadcast leading shape; 0 means exactly coplanar
    """
    a, b, c, d = np.broadcast_arrays(*(np.asarray(p, dtype=float) for p in (a, b, c, d)))
    shape = a.shape[:-1]
    a, b, c, d = (p.reshape(-1, 3) for p in (a, b, c, d))
    ad, bd, cd = a - d, b - d, c - d
    m1 = bd[:, 1] * cd[:, 2]
    m2 = bd[:, 2] * cd[:, 1]
    m3 = cd[:, 1] * ad[:, 2]
    m4 = cd[:, 2] * ad[:, 1]
    m5 = ad[:, 1] * bd[:, 2]
    m6 = ad[:, 2] * bd[:, 1]
    det = ad[:, 0] * (m1 - m2) + bd[:, 0] * (m3 - m4) + cd[:, 0] * (m5 - m6)
    permanent = (np.abs(ad[:, 0]) * (np.abs(m1) + np.abs(m2))
                 + np.abs(bd[:, 0]) * (np.abs(m3) + np.abs(m4))
                 + np.abs(cd[:, 0]) * (np.abs(m5) + np.abs(m6)))
    out = np.sign(det).astype(np.int8)
    recheck = ((np.abs(det) <= ERRBOUND_3D * permanent) & (permanent > 0)) \
        | _tiny(np.hstack([ad, bd, cd]), TINY_DIFF_3D)
    for i in np.nonzero(recheck)[0]:
        out[i] = _exact_orient3d(a[i], b[i], c[i], d[i])
    return out.reshape(shape)


# =============================================================================
# 2D TESTS (single instances)
# =============================================================================

def _on_segment_bbox(p, q, r):
    """For collinear p, q, r: True if r lies within the bounding box of segment pq."""
    return (min(p[0], q[0]) <= r[0] <= max(p[0], q[0])) and (min(p[1], q[1]) <= r[1] <= max(p[1], q[1]))


def segments_intersect_2d(p1, p2, q1, q2):
    """Closed 2D segments p1p2 and q1q2 share at least one point."""
    o1, o2, o3, o4 = orient2d(np.array([p1, p1, q1, q1]), np.array([p2, p2, q2, q2]),
                              np.array([q1, q2, p1, p2]))
    if o1 * o2 < 0 and o3 * o4 < 0:
        return True
    if o1 == 0 and _on_segment_bbox(p1, p2, q1):
        return True
    if o2 == 0 and _on_segment_bbox(p1, p2, q2):
        return True
    if o3 == 0 and _on_segment_bbox(q1, q2, p1):
        return True
    if o4 == 0 and _on_segment_bbox(q1, q2, p2):
        return True
    return False


def point_in_triangle_2d(p, a, b, c):
    """Closed 2D triangle (a, b, c) contains p; the triangle may have either winding."""
    o = orient2d(np.array([a, b, c]), np.array([b, c, a]), np.array([p, p, p]))
    return not ((o > 0).any() and (o < 0).any())


def _segment_meets_triangle_2d(p, q, tri):
    if point_in_triangle_2d(p, *tri) or point_in_triangle_2d(q, *tri):
        return True
    return any(segments_intersect_2d(p, q, tri[k], tri[(k + 1) % 3]) for k in range(3))


def _coplanar_triangles_2d(t1, t2):
    for i in range(3):
        for j in range(3):
            if segments_intersect_2d(t1[i], t1[(i + 1) % 3], t2[j], t2[(j + 1) % 3]):
                return True
    return point_in_triangle_2d(t1[0], *t2) or point_in_triangle_2d(t2[0], *t1)


def _projection_axes(tri):
    normal = np.cross(tri[1] - tri[0], tri[2] - tri[0])
    drop = int(np.argmax(np.abs(normal)))
    return [k for k in range(3) if k != drop]


# =============================================================================
# TRIANGLE-TRIANGLE
# =============================================================================

def triangles_degenerate(tris):
    """Exactly collinear triangles, (M, 3, 3) -> (M,) bool."""
    tris = np.asarray(tris, dtype=float)
    flat = np.ones(len(tris), dtype=bool)
    for axes in ((0, 1), (1, 2), (2, 0)):
        p = tris[:, :, axes]
        flat &= orient2d(p[:, 0], p[:, 1], p[:, 2]) == 0
    return flat


def _edge_hits(tri, edges_from, edges_to, side_from, side_to):
    """
    Straddling edges (p, q) of one triangle against triangle (a, b, c), vectorized.

    The edge meets the triangle when its endpoints are not strictly on one side of the
    plane and the line pq passes through the closed triangle.
    """
    straddle = (side_from * side_to <= 0) & ~((side_from == 0) & (side_to == 0))
    hit = np.zeros(len(tri), dtype=bool)
    idx = np.nonzero(straddle)[0]
    if len(idx) == 0:
        return hit
    p, q = edges_from[idx], edges_to[idx]
    a, b, c = tri[idx, 0], tri[idx, 1], tri[idx, 2]
    o1 = orient3d(p, q, a, b)
    o2 = orient3d(p, q, b, c)
    o3 = orient3d(p, q, c, a)
    o = np.stack([o1, o2, o3], axis=1)
    hit[idx] = ~((o > 0).any(axis=1) & (o < 0).any(axis=1))
    return hit


def triangles_intersect(t1, t2):
    """
    Exact closed-triangle intersection for pairs of triangles.

    Args:
        t1, t2: (M, 3, 3) arrays of triangle vertices

    Returns:
        np.ndarray: (M,) bool
    """
    t1 = np.asarray(t1, dtype=float).reshape(-1, 3, 3)
    t2 = np.asarray(t2, dtype=float).reshape(-1, 3, 3)
    m = len(t1)
    result = np.zeros(m, dtype=bool)
    if m == 0:
        return result

    live = ~(triangles_degenerate(t1) | triangles_degenerate(t2))
    # sides of each triangle's vertices relative to the other triangle's plane
    s2 = np.stack([orient3d(t1[:, 0], t1[:, 1], t1[:, 2], t2[:, k]) for k in range(3)], axis=1)
    s1 = np.stack([orient3d(t2[:, 0], t2[:, 1], t2[:, 2], t1[:, k]) for k in range(3)], axis=1)
    separated = ((s2 > 0).all(axis=1) | (s2 < 0).all(axis=1) | (s1 > 0).all(axis=1) | (s1 < 0).all(axis=1))
    live &= ~separated

    coplanar = live & (s2 == 0).all(axis=1)
    general = live & ~coplanar

    for i in np.nonzero(coplanar)[0]:
        axes = _projection_axes(t1[i])
        result[i] = _coplanar_triangles_2d(t1[i][:, axes], t2[i][:, axes])

    gi = np.nonzero(general)[0]
    if len(gi):
        a, b = t1[gi], t2[gi]
        sa, sb = s1[gi], s2[gi]
        hit = np.zeros(len(gi), dtype=bool)
        for k in range(3):
            k1 = (k + 1) % 3
            hit |= _edge_hits(a, b[:, k], b[:, k1], sb[:, k], sb[:, k1])
            hit |= _edge_hits(b, a[:, k], a[:, k1], sa[:, k], sa[:, k1])
        result[gi] = hit

        # edges lying in the other triangle's plane need a 2D test
        for row in np.nonzero(~hit)[0]:
            i = gi[row]
            result[i] = _in_plane_edges_hit(t1[i], t2[i], s1[i], s2[i])
    return result


def _in_plane_edges_hit(tri_a, tri_b, side_a, side_b):
    for tri, other, side in ((tri_a, tri_b, side_b), (tri_b, tri_a, side_a)):
        for k in range(3):
            k1 = (k + 1) % 3
            if side[k] == 0 and side[k1] == 0:
                axes = _projection_axes(tri)
                if _segment_meets_triangle_2d(other[k][axes], other[k1][axes], tri[:, axes]):
                    return True
    return False


def tri_tri_intersect(a, b):
    """Single-pair convenience wrapper around triangles_intersect."""
    return bool(triangles_intersect(np.asarray(a)[None], np.asarray(b)[None])[0])
