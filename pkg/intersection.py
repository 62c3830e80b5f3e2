#!/usr/bin/env python3
"""
Intersection Oracle Module

Tessellation-based ground truth for Coons-patch self and pairwise intersection, and
the labelled datasets the intersection classifiers are trained on.

Key Components:
- count_intersections / patch_self_intersects / patches_intersect: tessellate, prune
  candidate triangle pairs (centroid kd-tree + bounding spheres + AABBs), decide the
  survivors with exact predicates (predicates.triangles_intersect)
- generate_dataset: seeded rejection sampling of uniform random control points until
  both classes are equally represented, parallel over draws, accepted in draw order
- normalize_unit_cube (+ backward): the input normalization shared by training,
  inference and the fit loss
- apply_isometry / augment_isometry: label-preserving rotations, reflections and
  parameter-square symmetries (plus patch swap for pairs)
- save_dataset / load_dataset: CXDS binary files with a JSON metadata side-car

Usage:
    from intersection import generate_dataset, save_dataset
    ds = generate_dataset('self', 1000, seed=0, threads=4)
    save_dataset(ds, 'results/self.cxds')
"""

import json
import logging
import os
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from geom_kernel import CORNER_SLOTS, CURVE_SLOTS, POINTS_PER_PATCH, CoonsPatch, tessellate
from predicates import triangles_intersect

logger = logging.getLogger(__name__)

ORACLE_RESOLUTION = 32
KINDS = {'self': 0, 'pair': 1}
DIMS = {'self': 3 * POINTS_PER_PATCH, 'pair': 6 * POINTS_PER_PATCH}

DATASET_MAGIC = b'CXDS'
DATASET_VERSION = 1
_HEADER = struct.Struct('<4sIBQI')

# Candidate triangle pairs handed to the exact test per call
_PAIR_CHUNK = 20000

# Parameter-square symmetries as slot permutations: new[i] = old[perm[i]]
_SHIFTS = [np.array([(i + 3 * k) % POINTS_PER_PATCH for i in range(POINTS_PER_PATCH)]) for k in range(4)]
_REVERSE = np.array([(-i) % POINTS_PER_PATCH for i in range(POINTS_PER_PATCH)])
SQUARE_SYMMETRIES = tuple(_SHIFTS + [shift[_REVERSE] for shift in _SHIFTS])


class DatasetFormatError(ValueError):
    """Malformed dataset file."""


# =============================================================================
# UNIT-CUBE NORMALIZATION
# =============================================================================

def _extent_parts(points):
    bi = np.arange(len(points))
    imin = points.argmin(axis=1)
    imax = points.argmax(axis=1)
    axes = np.arange(3)
    lo = points[bi[:, None], imin, axes[None, :]]
    hi = points[bi[:, None], imax, axes[None, :]]
    dstar = (hi - lo).argmax(axis=1)
    extent = (hi - lo)[bi, dstar]
    extent = np.where(extent > 0, extent, 1.0)
    return bi, imin, imax, lo, dstar, extent


def normalize_unit_cube(points):
    """
    Translate and uniformly scale each point set into the unit cube.

    The per-axis minimum moves to 0 and the largest axis extent becomes 1.

    Args:
        points: (M, 3) or (B, M, 3)
    """
    points = np.asarray(points, dtype=float)
    single = points.ndim == 2
    batch = points[None] if single else points
    _, _, _, lo, _, extent = _extent_parts(batch)
    out = (batch - lo[:, None, :]) / extent[:, None, None]
    return out[0] if single else out


def normalize_unit_cube_backward(points, grad_out):
    """Gradient of sum(grad_out * normalize_unit_cube(points)) with respect to points (B, M, 3)."""
    points = np.asarray(points, dtype=float)
    bi, imin, imax, lo, dstar, extent = _extent_parts(points)
    normalized = (points - lo[:, None, :]) / extent[:, None, None]
    grad = grad_out / extent[:, None, None]
    axes = np.arange(3)
    np.add.at(grad, (bi[:, None], imin, axes[None, :]), -grad_out.sum(axis=1) / extent[:, None])
    scale_term = (grad_out * normalized).sum(axis=(1, 2)) / extent
    np.add.at(grad, (bi, imax[bi, dstar], dstar), -scale_term)
    np.add.at(grad, (bi, imin[bi, dstar], dstar), scale_term)
    return grad


# =============================================================================
# ORACLE
# =============================================================================

def _triangle_bounds(vertices, faces):
    tris = vertices[faces]
    centroids = tris.mean(axis=1)
    radii = np.linalg.norm(tris - centroids[:, None, :], axis=2).max(axis=1)
    return tris, centroids, radii


def _filter_candidates(tris_a, tris_b, cent_a, cent_b, rad_a, rad_b, ia, ib):
    close = np.linalg.norm(cent_a[ia] - cent_b[ib], axis=1) <= rad_a[ia] + rad_b[ib]
    ia, ib = ia[close], ib[close]
    lo_a, hi_a = tris_a[ia].min(axis=1), tris_a[ia].max(axis=1)
    lo_b, hi_b = tris_b[ib].min(axis=1), tris_b[ib].max(axis=1)
    overlap = ((lo_a <= hi_b) & (lo_b <= hi_a)).all(axis=1)
    return ia[overlap], ib[overlap]


def _count_hits(tris_a, tris_b, ia, ib, early_exit):
    count = 0
    for start in range(0, len(ia), _PAIR_CHUNK):
        sl = slice(start, start + _PAIR_CHUNK)
        count += int(triangles_intersect(tris_a[ia[sl]], tris_b[ib[sl]]).sum())
        if early_exit and count:
            break
    return count


def _self_candidates(mesh):
    tris, cent, rad = _triangle_bounds(mesh.vertices, mesh.faces)
    pairs = cKDTree(cent).query_pairs(r=2.0 * rad.max(), output_type='ndarray')
    if len(pairs) == 0:
        return tris, pairs[:, 0], pairs[:, 1]
    ia, ib = pairs[:, 0], pairs[:, 1]
    # triangles sharing a grid vertex are adjacent, not intersecting
    fa, fb = mesh.faces[ia], mesh.faces[ib]
    shares = (fa[:, :, None] == fb[:, None, :]).any(axis=(1, 2))
    ia, ib = ia[~shares], ib[~shares]
    ia, ib = _filter_candidates(tris, tris, cent, cent, rad, rad, ia, ib)
    return tris, ia, ib


def _seam_vertices(patch, other, n):
    """Grid vertices of patch lying on curves or corners it shares bitwise with other."""
    side = n + 1
    seam = set()
    corner_grid = {0: (0, 0), 3: (n, 0), 6: (n, n), 9: (0, n)}
    other_points = {tuple(p) for p in other.points[list(CORNER_SLOTS)]}
    for slot, (i, j) in corner_grid.items():
        if tuple(patch.points[slot]) in other_points:
            seam.add(j * side + i)

    other_curves = []
    for slots in CURVE_SLOTS:
        curve = other.points[list(slots)]
        other_curves.extend([curve, curve[::-1]])
    edge_vertices = (
        [m for m in range(side)],                      # c1: j = 0
        [m * side + n for m in range(side)],           # c2: i = n
        [n * side + m for m in range(side)],           # c3: j = n
        [m * side for m in range(side)],               # c4: i = 0
    )
    for c, slots in enumerate(CURVE_SLOTS):
        curve = patch.points[list(slots)]
        if any(np.array_equal(curve, oc) for oc in other_curves):
            seam.update(edge_vertices[c])
    return np.array(sorted(seam), dtype=np.int64)


def count_intersections(patch, other=None, n=ORACLE_RESOLUTION, early_exit=False, exempt_seams=True):
    """
    Number of intersecting triangle pairs.

    Without other: pairs of non-adjacent triangles (sharing no grid vertex) of the
    patch's own tessellation. With other: triangle pairs across the two tessellations;
    when exempt_seams is set, pairs where both triangles touch a curve or corner the
    patches share (bitwise-equal control points) are skipped.

    Args:
        patch, other: CoonsPatch
        n: Tessellation resolution (>= 4)
        early_exit: Stop after the first chunk containing a hit
    """
    if n < 4:
        raise ValueError(f"Oracle tessellation resolution must be >= 4, got {n}")
    mesh_a = tessellate(patch, n)
    if other is None:
        tris, ia, ib = _self_candidates(mesh_a)
        return _count_hits(tris, tris, ia, ib, early_exit)

    mesh_b = tessellate(other, n)
    tris_a, cent_a, rad_a = _triangle_bounds(mesh_a.vertices, mesh_a.faces)
    tris_b, cent_b, rad_b = _triangle_bounds(mesh_b.vertices, mesh_b.faces)
    r = rad_a.max() + rad_b.max()
    neighbours = cKDTree(cent_a).query_ball_tree(cKDTree(cent_b), r)
    counts = np.fromiter((len(x) for x in neighbours), dtype=np.int64, count=len(neighbours))
    ia = np.repeat(np.arange(len(neighbours)), counts)
    ib = np.fromiter((j for x in neighbours for j in x), dtype=np.int64, count=int(counts.sum()))

    if exempt_seams:
        seam_a = _seam_vertices(patch, other, n)
        seam_b = _seam_vertices(other, patch, n)
        if len(seam_a) and len(seam_b):
            touch_a = np.isin(mesh_a.faces, seam_a).any(axis=1)
            touch_b = np.isin(mesh_b.faces, seam_b).any(axis=1)
            keep = ~(touch_a[ia] & touch_b[ib])
            ia, ib = ia[keep], ib[keep]

    ia, ib = _filter_candidates(tris_a, tris_b, cent_a, cent_b, rad_a, rad_b, ia, ib)
    return _count_hits(tris_a, tris_b, ia, ib, early_exit)


def patch_self_intersects(patch, n=ORACLE_RESOLUTION):
    """True iff two non-adjacent triangles of the tessellation intersect."""
    return count_intersections(patch, None, n, early_exit=True) > 0


def patches_intersect(a, b, n=ORACLE_RESOLUTION, exempt_seams=True):
    """True iff any triangle of a's tessellation meets any of b's (seams exempted)."""
    return count_intersections(a, b, n, early_exit=True, exempt_seams=exempt_seams) > 0


def label_coords(coords, kind, n=ORACLE_RESOLUTION):
    """Oracle label of a flat coordinate vector (36 for self, 72 for pair)."""
    pts = np.asarray(coords, dtype=float).reshape(-1, 3)
    if kind == 'self':
        return int(patch_self_intersects(CoonsPatch(pts), n))
    return int(patches_intersect(CoonsPatch(pts[:POINTS_PER_PATCH]), CoonsPatch(pts[POINTS_PER_PATCH:]), n))


def severity(coords, kind, n=ORACLE_RESOLUTION):
    """Intersecting triangle-pair count of a flat coordinate vector."""
    pts = np.asarray(coords, dtype=float).reshape(-1, 3)
    if kind == 'self':
        return count_intersections(CoonsPatch(pts), None, n)
    return count_intersections(CoonsPatch(pts[:POINTS_PER_PATCH]), CoonsPatch(pts[POINTS_PER_PATCH:]), n)


# =============================================================================
# DATASETS
# =============================================================================

@dataclass
class IntersectionDataset:
    kind: str
    coords: np.ndarray
    labels: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"Unknown dataset kind '{self.kind}', expected 'self' or 'pair'")
        self.coords = np.asarray(self.coords, dtype=float).reshape(-1, DIMS[self.kind])
        self.labels = np.asarray(self.labels, dtype=np.uint8).reshape(-1)
        if len(self.coords) != len(self.labels):
            raise ValueError(f"Dataset has {len(self.coords)} samples but {len(self.labels)} labels")

    @property
    def dim(self):
        return DIMS[self.kind]

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        return IntersectionDataset(self.kind, self.coords[idx], self.labels[idx], dict(self.metadata))


def _draw(kind, seed, index):
    rng = np.random.default_rng([seed, index])
    n_points = DIMS[kind] // 3
    return rng.random((n_points, 3))


def _label_draws(kind, seed, start, stop, n):
    """Worker: label draws [start, stop). Returns (labels, normalized coords)."""
    labels = np.empty(stop - start, dtype=np.uint8)
    coords = np.empty((stop - start, DIMS[kind]))
    for row, index in enumerate(range(start, stop)):
        pts = _draw(kind, seed, index)
        labels[row] = label_coords(pts.reshape(-1), kind, n)
        coords[row] = normalize_unit_cube(pts).reshape(-1)
    return labels, coords


def generate_dataset(kind, count, seed, n=ORACLE_RESOLUTION, threads=1, chunk_size=64):
    """
    Balanced labelled dataset by rejection sampling.

    Draw i uses numpy.random.default_rng([seed, i]): control points i.i.d. uniform in the
    unit cube, labelled by the oracle at resolution n, stored unit-cube normalized. Draws
    are accepted in index order until count // 2 positives and the rest negatives are
    collected, so the result does not depend on threads or chunk_size.

    Returns:
        IntersectionDataset with raw-draw statistics in metadata
    """
    if kind not in KINDS:
        raise ValueError(f"Unknown dataset kind '{kind}', expected 'self' or 'pair'")
    if count < 2:
        raise ValueError(f"Dataset count must be >= 2, got {count}")

    need = {1: count // 2, 0: count - count // 2}
    accepted_coords = []
    accepted_labels = []
    raw_draws = 0
    raw_positive = 0
    next_index = 0
    batch = chunk_size * max(threads, 1)
    executor = ProcessPoolExecutor(max_workers=threads) if threads > 1 else None
    logger.info(f"Generating {count} '{kind}' samples (seed={seed}, n={n}, threads={threads})")
    try:
        while need[0] or need[1]:
            starts = range(next_index, next_index + batch, chunk_size)
            jobs = [(kind, seed, s, s + chunk_size, n) for s in starts]
            if executor is not None:
                results = list(executor.map(_label_draws, *zip(*jobs)))
            else:
                results = [_label_draws(*job) for job in jobs]
            next_index += batch

            for labels, coords in results:
                for label, row in zip(labels, coords):
                    if not (need[0] or need[1]):
                        break
                    raw_draws += 1
                    raw_positive += int(label)
                    if need[int(label)]:
                        need[int(label)] -= 1
                        accepted_labels.append(int(label))
                        accepted_coords.append(row)
            logger.info(f"  {raw_draws} draws, {len(accepted_labels)}/{count} accepted, "
                        f"raw positive rate {raw_positive / max(raw_draws, 1):.3f}")
    finally:
        if executor is not None:
            executor.shutdown()

    metadata = {
        'kind': kind,
        'count': count,
        'seed': seed,
        'resolution': n,
        'raw_draws': raw_draws,
        'raw_positive': raw_positive,
        'raw_prior': raw_positive / raw_draws,
    }
    return IntersectionDataset(kind, np.array(accepted_coords), np.array(accepted_labels, dtype=np.uint8), metadata)


def split_dataset(dataset, holdout=0.1, seed=0):
    """Deterministic (train, held-out) split by a seeded permutation."""
    order = np.random.default_rng(seed).permutation(len(dataset))
    n_hold = max(1, int(round(holdout * len(dataset))))
    return dataset.subset(np.sort(order[n_hold:])), dataset.subset(np.sort(order[:n_hold]))


def _record_dtype(dim):
    return np.dtype([('coords', '<f8', (dim,)), ('label', 'u1')])


def save_dataset(dataset, path):
    """Write a CXDS file plus '<path>.json' metadata."""
    records = np.empty(len(dataset), dtype=_record_dtype(dataset.dim))
    records['coords'] = dataset.coords
    records['label'] = dataset.labels
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'wb') as f:
        f.write(_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, KINDS[dataset.kind], len(dataset), dataset.dim))
        f.write(records.tobytes())
    with open(f"{path}.json", 'w') as f:
        json.dump(dataset.metadata, f, indent=2)
    logger.info(f"Saved {len(dataset)} '{dataset.kind}' samples to {path}")


def load_dataset(path):
    """
    Read a CXDS file (and its metadata side-car when present).

    Raises:
        FileNotFoundError: missing file
        DatasetFormatError: bad magic, version, kind, dimension or size
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"Dataset file not found: {path}")
    with open(path, 'rb') as f:
        head = f.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise DatasetFormatError(f"{path}: truncated header")
        magic, version, kind_code, count, dim = _HEADER.unpack(head)
        if magic != DATASET_MAGIC:
            raise DatasetFormatError(f"{path}: bad magic {magic!r}")
        if version != DATASET_VERSION:
            raise DatasetFormatError(f"{path}: unsupported version {version}")
        kinds = {v: k for k, v in KINDS.items()}
        if kind_code not in kinds:
            raise DatasetFormatError(f"{path}: unknown kind code {kind_code}")
        kind = kinds[kind_code]
        if dim != DIMS[kind]:
            raise DatasetFormatError(f"{path}: dimension {dim} does not match kind '{kind}'")
        body = f.read()
    dtype = _record_dtype(dim)
    if len(body) != count * dtype.itemsize:
        raise DatasetFormatError(f"{path}: expected {count} records, found {len(body) / dtype.itemsize:.1f}")
    records = np.frombuffer(body, dtype=dtype)

    metadata = {}
    if os.path.exists(f"{path}.json"):
        with open(f"{path}.json", 'r') as f:
            metadata = json.load(f)
    return IntersectionDataset(kind, records['coords'].copy(), records['label'].copy(), metadata)


# =============================================================================
# ISOMETRY AUGMENTATION
# =============================================================================

def apply_isometry(coords, kind, rotation=None, reflect=False, permutation=None, swap=False):
    """
    Deterministic isometry of a flat coordinate vector, re-normalized to the unit cube.

    Args:
        coords: (36,) or (72,) coordinates
        kind: 'self' or 'pair'
        rotation: 3x3 rotation matrix (identity when None)
        reflect: Mirror x before rotating
        permutation: One slot permutation (applied to every patch) or one per patch
        swap: Exchange the two patches of a pair
    """
    pts = np.asarray(coords, dtype=float).reshape(-1, POINTS_PER_PATCH, 3).copy()
    if reflect:
        pts[..., 0] *= -1.0
    if rotation is not None:
        pts = pts @ np.asarray(rotation, dtype=float).T
    if permutation is not None:
        perms = np.asarray(permutation).reshape(-1, POINTS_PER_PATCH)
        if len(perms) == 1:
            perms = np.repeat(perms, len(pts), axis=0)
        pts = np.stack([pts[k][perms[k]] for k in range(len(pts))])
    if swap and kind == 'pair':
        pts = pts[::-1]
    return normalize_unit_cube(pts.reshape(-1, 3)).reshape(-1)


def augment_isometry(coords, kind, seed):
    """Random rotation, reflection (p = 0.5), square symmetry per patch and, for pairs, patch swap."""
    rng = np.random.default_rng(seed)
    return augment_batch(np.asarray(coords, dtype=float)[None, :], kind, rng)[0]


def augment_batch(coords, kind, rng):
    """Independent random isometries for every row of coords (B, dim)."""
    batch = len(coords)
    n_patches = DIMS[kind] // (3 * POINTS_PER_PATCH)
    pts = np.asarray(coords, dtype=float).reshape(batch, n_patches, POINTS_PER_PATCH, 3).copy()

    rotations = Rotation.random(batch, rng).as_matrix()
    reflect = rng.random(batch) < 0.5
    pts[reflect, ..., 0] *= -1.0
    pts = np.einsum('bij,bpkj->bpki', rotations, pts)

    choice = rng.integers(len(SQUARE_SYMMETRIES), size=(batch, n_patches))
    perms = np.stack(SQUARE_SYMMETRIES)[choice]
    pts = np.take_along_axis(pts, perms[..., None], axis=2)
    if kind == 'pair':
        swap = rng.random(batch) < 0.5
        pts[swap] = pts[swap][:, ::-1]
    return normalize_unit_cube(pts.reshape(batch, -1, 3)).reshape(batch, -1)


# =============================================================================
# REFERENCE PATCHES
# =============================================================================

def flat_patch_points():
    """Unit square in the z = 0 plane with straight boundary curves, (12, 3) in loop order."""
    loop = [(0, 0), (1, 0), (2, 0), (3, 0), (3, 1), (3, 2), (3, 3), (2, 3), (1, 3), (0, 3), (0, 2), (0, 1)]
    return np.array([[x / 3.0, y / 3.0, 0.0] for x, y in loop])


def folded_patch_points():
    """
    Ruled patch over a looping cubic: the bottom curve (0,0) -> (1,0) with control
    points (1.6, 1) and (-0.6, 1) crosses itself near s = 0.157 / 0.843, and the
    straight vertical sides carry that crossing up to z = 1, so the surface cuts
    through itself along a vertical line.
    """
    bottom = [(0.0, 0.0), (1.6, 1.0), (-0.6, 1.0), (1.0, 0.0)]
    a, b1, b2, b = ([x, y, 0.0] for x, y in bottom)
    c, t2, t1, d = ([x, y, 1.0] for x, y in bottom[::-1])
    return np.array([a, b1, b2, b,
                     [1.0, 0.0, 1.0 / 3.0], [1.0, 0.0, 2.0 / 3.0],
                     c, t2, t1, d,
                     [0.0, 0.0, 2.0 / 3.0], [0.0, 0.0, 1.0 / 3.0]])
