#!/usr/bin/env python3
"""
Mesh Utilities Module

Triangle-mesh ingestion and output, area-weighted surface sampling with normals,
exact nearest-neighbour queries and surface-distance evaluation.

Key Components:
- TriangleMesh: indexed triangle soup with derived per-face areas and unit normals
- load_obj / save_obj: ASCII OBJ subset (v, vn ignored, f with v/vt/vn tokens)
- sample_surface: area-proportional face choice + square-root barycentric warp
- SpatialIndex: exact nearest neighbour over a fixed point set (scipy cKDTree),
  ties broken by the lowest sample ordinal
- closest_points_on_mesh / surface_chamfer: exact point-to-surface distances
- normalize_to_box / BoxTransform: uniform rescale used by fitting
- edge_manifold_audit: watertightness check by edge/face multiplicity

Usage:
    from mesh_utils import load_obj, sample_surface, SpatialIndex
    mesh = load_obj('target.obj')
    samples = sample_surface(mesh, 20000, seed=0)
    index = SpatialIndex(samples.positions)
"""

import logging
import os
from collections import Counter
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree

logger = logging.getLogger(__name__)

# Degenerate-face threshold relative to the squared bbox diagonal
EPS_FACE_REL = 1e-12

# Radius slack for gathering every candidate tied with the nearest distance
_TIE_RTOL = 1e-12
_TIE_ATOL = 1e-15


class ObjParseError(ValueError):
    """Malformed OBJ record or out-of-range index."""


# =============================================================================
# TRIANGLE MESH
# =============================================================================

@dataclass
class TriangleMesh:
    """Vertices (V, 3) float and faces (F, 3) int; face areas and normals are derived."""
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if np.isnan(self.vertices).any():
            raise ValueError("Mesh vertices contain NaN coordinates")
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError(f"Mesh face indices out of range for {len(self.vertices)} vertices")

    def _face_cross(self):
        a, b, c = (self.vertices[self.faces[:, k]] for k in range(3))
        return np.cross(b - a, c - a)

    @property
    def face_areas(self):
        return 0.5 * np.linalg.norm(self._face_cross(), axis=1)

    @property
    def face_normals(self):
        """Unit normals; zero rows for degenerate faces."""
        cross = self._face_cross()
        norm = np.linalg.norm(cross, axis=1)
        out = np.zeros_like(cross)
        ok = ~self.degenerate_faces
        out[ok] = cross[ok] / norm[ok, None]
        return out

    @property
    def bbox_diagonal(self):
        if len(self.vertices) == 0:
            return 0.0
        return float(np.linalg.norm(self.vertices.max(axis=0) - self.vertices.min(axis=0)))

    @property
    def degenerate_faces(self):
        eps = EPS_FACE_REL * self.bbox_diagonal ** 2
        return self.face_areas < eps

    @property
    def area(self):
        return float(self.face_areas.sum())

    def transformed(self, scale=1.0, translation=None):
        verts = self.vertices * scale
        if translation is not None:
            verts = verts + np.asarray(translation, dtype=float)
        return TriangleMesh(verts, self.faces.copy())


def mesh_area(mesh):
    return mesh.area


# =============================================================================
# OBJ FILES
# =============================================================================

def _parse_index(token, n_vertices, line_no):
    head = token.split('/', 1)[0]
    try:
        idx = int(head)
    except ValueError:
        raise ObjParseError(f"Line {line_no}: bad face index '{token}'")
    if idx == 0:
        raise ObjParseError(f"Line {line_no}: face index 0 is invalid (OBJ indices are 1-based)")
    if idx < 0:
        idx = n_vertices + idx
    else:
        idx -= 1
    if idx < 0 or idx >= n_vertices:
        raise ObjParseError(f"Line {line_no}: face index '{token}' out of range for {n_vertices} vertices")
    return idx


def load_obj(path):
    """
    Read an ASCII OBJ file.

    Polygons with more than three corners are fan-triangulated around their first
    corner. Records other than v and f are skipped.

    Raises:
        FileNotFoundError: if the file does not exist
        ObjParseError: malformed records or out-of-range indices
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"Mesh file not found: {path}")
    vertices = []
    faces = []
    with open(path, 'r') as f:
        for line_no, raw in enumerate(f, start=1):
            line = raw.split('#', 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            tag = parts[0]
            if tag == 'v':
                if len(parts) < 4:
                    raise ObjParseError(f"Line {line_no}: vertex record needs 3 coordinates")
                try:
                    vertices.append([float(x) for x in parts[1:4]])
                except ValueError:
                    raise ObjParseError(f"Line {line_no}: non-numeric vertex coordinate")
            elif tag == 'f':
                if len(parts) < 4:
                    raise ObjParseError(f"Line {line_no}: face record needs at least 3 corners")
                corners = [_parse_index(tok, len(vertices), line_no) for tok in parts[1:]]
                for k in range(1, len(corners) - 1):
                    faces.append([corners[0], corners[k], corners[k + 1]])
    mesh = TriangleMesh(np.array(vertices, dtype=float).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))
    logger.info(f"Loaded mesh {path}: {len(mesh.vertices)} vertices, {len(mesh.faces)} triangles")
    return mesh


def save_obj(mesh, path):
    """Write v records then 1-based f records; coordinates with 9 significant digits."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, 'w') as f:
        for x, y, z in mesh.vertices:
            f.write(f"v {x:.9g} {y:.9g} {z:.9g}\n")
        for a, b, c in mesh.faces + 1:
            f.write(f"f {a} {b} {c}\n")
    logger.debug(f"Wrote {path}: {len(mesh.vertices)} vertices, {len(mesh.faces)} triangles")


# =============================================================================
# SURFACE SAMPLING
# =============================================================================

class SurfaceSample(NamedTuple):
    position: np.ndarray
    normal: np.ndarray
    source: int


@dataclass
class SurfaceSamples:
    """Array-of-samples container: positions (N, 3), unit normals (N, 3), source face ids (N,)."""
    positions: np.ndarray
    normals: np.ndarray
    source: np.ndarray

    def __len__(self):
        return len(self.positions)

    def __getitem__(self, i):
        return SurfaceSample(self.positions[i], self.normals[i], int(self.source[i]))


def sample_surface(mesh, n, seed):
    """
    Draw n area-uniform samples from a mesh.

    Args:
        mesh: TriangleMesh with at least one non-degenerate face
        n: Number of samples (>= 1)
        seed: Seed for numpy.random.default_rng

    Returns:
        SurfaceSamples with flat (per-face) normals
    """
    if n < 1:
        raise ValueError(f"Sample count must be >= 1, got {n}")
    areas = np.where(mesh.degenerate_faces, 0.0, mesh.face_areas)
    total = areas.sum()
    if len(areas) == 0 or total <= 0:
        raise ValueError("Cannot sample a mesh whose faces are all degenerate")

    rng = np.random.default_rng(seed)
    face_ids = rng.choice(len(areas), size=n, p=areas / total)
    r1 = rng.random(n)
    r2 = rng.random(n)
    sq = np.sqrt(r1)
    wa = 1.0 - sq
    wb = sq * (1.0 - r2)
    wc = sq * r2

    tri = mesh.vertices[mesh.faces[face_ids]]
    positions = wa[:, None] * tri[:, 0] + wb[:, None] * tri[:, 1] + wc[:, None] * tri[:, 2]
    normals = mesh.face_normals[face_ids]
    return SurfaceSamples(positions, normals, face_ids.astype(np.int64))


# =============================================================================
# NEAREST NEIGHBOURS
# =============================================================================

class SpatialIndex:
    """
    Exact nearest-neighbour search over a fixed point set.

    Wraps scipy's cKDTree (exact search with full backtracking). Among equidistant
    candidates the lowest ordinal wins.
    """

    def __init__(self, points, samples=None):
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        if len(points) == 0:
            raise ValueError("Cannot build a spatial index over an empty point set")
        self.points = points
        self.samples = samples
        self._tree = cKDTree(points)

    def __len__(self):
        return len(self.points)

    def query(self, queries):
        """
        Batched nearest-neighbour lookup.

        Returns:
            tuple: (distances (M,), indices (M,))
        """
        queries = np.asarray(queries, dtype=float).reshape(-1, 3)
        k = min(2, len(self.points))
        dist, idx = self._tree.query(queries, k=k)
        if k == 1:
            return dist, idx.astype(np.int64)
        best_dist, best_idx = dist[:, 0].copy(), idx[:, 0].astype(np.int64)

        # Any row whose runner-up is as close as the winner may hide more ties
        slack = np.maximum(best_dist * _TIE_RTOL, _TIE_ATOL)
        for row in np.flatnonzero(dist[:, 1] <= best_dist + slack):
            q = queries[row]
            cand = np.asarray(self._tree.query_ball_point(q, r=best_dist[row] + slack[row]), dtype=np.int64)
            if len(cand) == 0:
                continue
            d2 = ((self.points[cand] - q) ** 2).sum(axis=1)
            best_idx[row] = cand[d2 == d2.min()].min()
        return best_dist, best_idx


def build_index(samples):
    """Spatial index over SurfaceSamples (keeps a reference to the samples)."""
    return SpatialIndex(samples.positions, samples)


def nearest(index, query):
    """Nearest sample to a single 3D query point. Returns (SurfaceSample, distance)."""
    dist, idx = index.query(np.asarray(query, dtype=float)[None, :])
    return index.samples[int(idx[0])], float(dist[0])


# =============================================================================
# EXACT POINT-TO-SURFACE DISTANCE
# =============================================================================

def closest_point_on_triangles(p, a, b, c):
    """
    Closest points on triangles (a, b, c) to points p, all arrays of shape (M, 3).

    Region-based construction: vertex, edge and face regions are resolved in turn.
    """
    def dot(u, v):
        return np.einsum('ij,ij->i', u, v)

    ab, ac, ap = b - a, c - a, p - a
    d1, d2 = dot(ab, ap), dot(ac, ap)
    bp = p - b
    d3, d4 = dot(ab, bp), dot(ac, bp)
    cp = p - c
    d5, d6 = dot(ab, cp), dot(ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    with np.errstate(divide='ignore', invalid='ignore'):
        denom = va + vb + vc
        v_face = np.where(denom != 0, vb / denom, 0.0)
        w_face = np.where(denom != 0, vc / denom, 0.0)
        out = a + ab * v_face[:, None] + ac * w_face[:, None]
        done = np.zeros(len(p), dtype=bool)

        def assign(mask, value):
            nonlocal out, done
            mask = mask & ~done
            out = np.where(mask[:, None], value, out)
            done |= mask

        assign((d1 <= 0) & (d2 <= 0), a)
        assign((d3 >= 0) & (d4 <= d3), b)
        assign((d6 >= 0) & (d5 <= d6), c)
        v_ab = np.where(d1 - d3 != 0, d1 / (d1 - d3), 0.0)
        assign((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + ab * v_ab[:, None])
        w_ac = np.where(d2 - d6 != 0, d2 / (d2 - d6), 0.0)
        assign((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + ac * w_ac[:, None])
        e43, e56 = d4 - d3, d5 - d6
        w_bc = np.where(e43 + e56 != 0, e43 / (e43 + e56), 0.0)
        assign((va <= 0) & (e43 >= 0) & (e56 >= 0), b + (c - b) * w_bc[:, None])
    return out


def closest_points_on_mesh(mesh, points):
    """
    Exact closest surface point for each query point.

    Candidate faces are those whose bounding sphere can beat the nearest-vertex
    distance; all candidates are then tested exactly.

    Returns:
        tuple: (closest (M, 3), distances (M,), face ids (M,))
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    faces = mesh.faces
    tri = mesh.vertices[faces]
    centroids = tri.mean(axis=1)
    radii = np.linalg.norm(tri - centroids[:, None, :], axis=2).max(axis=1)

    if len(faces) == 0:
        raise ValueError("Cannot measure distances to a mesh without faces")
    upper, _ = cKDTree(mesh.vertices[np.unique(faces)]).query(points)
    candidates = cKDTree(centroids).query_ball_point(points, upper + radii.max() + 1e-12)
    counts = np.fromiter((len(c) for c in candidates), dtype=np.int64, count=len(points))
    point_ids = np.repeat(np.arange(len(points)), counts)
    face_ids = np.fromiter((f for c in candidates for f in c), dtype=np.int64, count=int(counts.sum()))

    cp = closest_point_on_triangles(points[point_ids], tri[face_ids, 0], tri[face_ids, 1], tri[face_ids, 2])
    dist = np.linalg.norm(cp - points[point_ids], axis=1)

    # per point, smallest distance then lowest face id
    order = np.lexsort((face_ids, dist, point_ids))
    first = np.ones(len(order), dtype=bool)
    first[1:] = point_ids[order][1:] != point_ids[order][:-1]
    best = order[first]
    return cp[best], dist[best], face_ids[best]


def surface_chamfer(mesh_a, mesh_b, n_samples=20000, seed=0):
    """
    Symmetric surface-to-surface Chamfer distance.

    Mean exact distance from area-uniform samples of each surface to the other surface,
    summed over both directions.
    """
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    seeds = root.spawn(2)
    samples_a = sample_surface(mesh_a, n_samples, seeds[0])
    samples_b = sample_surface(mesh_b, n_samples, seeds[1])
    _, d_ab, _ = closest_points_on_mesh(mesh_b, samples_a.positions)
    _, d_ba, _ = closest_points_on_mesh(mesh_a, samples_b.positions)
    return float(d_ab.mean() + d_ba.mean())


# =============================================================================
# NORMALIZATION AND AUDITS
# =============================================================================

@dataclass(frozen=True)
class BoxTransform:
    """Uniform map x -> scale * x + translation."""
    scale: float
    translation: np.ndarray

    def apply(self, points):
        return np.asarray(points, dtype=float) * self.scale + self.translation

    def invert(self, points):
        return (np.asarray(points, dtype=float) - self.translation) / self.scale

    def to_dict(self):
        return {'scale': float(self.scale), 'translation': [float(x) for x in self.translation]}


def normalize_to_box(points, center, diagonal):
    """
    Uniform scale + translation mapping the bounding box of points onto a box with the
    given centre and diagonal.

    Returns:
        BoxTransform
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    lo, hi = points.min(axis=0), points.max(axis=0)
    current = float(np.linalg.norm(hi - lo))
    if current <= 0:
        raise ValueError("Cannot normalize a point set with zero extent")
    scale = float(diagonal) / current
    translation = np.asarray(center, dtype=float) - scale * (lo + hi) / 2.0
    return BoxTransform(scale, translation)


@dataclass(frozen=True)
class EdgeAudit:
    """Edge counts keyed by the number of faces using the edge."""
    multiplicity: dict
    n_edges: int

    @property
    def watertight(self):
        return self.n_edges > 0 and set(self.multiplicity) == {2}

    @property
    def boundary_edges(self):
        return self.multiplicity.get(1, 0)

    @property
    def nonmanifold_edges(self):
        return sum(count for m, count in self.multiplicity.items() if m > 2)


def edge_manifold_audit(mesh):
    """Count undirected edges by face multiplicity; watertight iff every edge has 2 faces."""
    f = mesh.faces
    edges = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    edges.sort(axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    multiplicity = dict(sorted(Counter(counts.tolist()).items()))
    audit = EdgeAudit(multiplicity, len(counts))
    if not audit.watertight:
        logger.debug(f"Edge audit: {audit.boundary_edges} boundary, {audit.nonmanifold_edges} non-manifold edges")
    return audit
