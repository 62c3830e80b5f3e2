#!/usr/bin/env python3
"""
Template Utilities Module

Deformable templates: a fixed patch topology over a shared control-point set plus the
rest-pose coordinates the fit is initialized from and pulled back toward.

Key Components:
- Template / PatchCollection: index topology (K patches x 12 point indices) plus
  coordinates. Patches that share a boundary curve share its four point indices,
  so seams stay closed for any control-point values.
- validate_topology: index-range, distinctness, curve over-sharing, orientation and
  open-curve checks, returned as a report rather than raised.
- build_cube_template: the 6-patch, 12-curve, 32-point cube.
- load_template / save_template: JSON template files (see file_formats/schema_template.md).
- tessellate_collection: welded triangle mesh of a whole collection.

Usage:
    from template_utils import build_cube_template, instantiate, save_template
    cube = build_cube_template(1.0)
    pc = instantiate(cube, cube.points)
    save_template(cube, 'cube.json')
"""

import json
import logging
import os
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from geom_kernel import CURVE_SLOTS, POINTS_PER_PATCH, CoonsPatch, coons_basis, combine, grid_faces, grid_parameters
from mesh_utils import TriangleMesh

logger = logging.getLogger(__name__)

REQUIRED_FIELDS = ('name', 'points', 'patches')


class TemplateSchemaError(ValueError):
    """Malformed template file."""


class TemplateTopologyError(ValueError):
    """Template violates a topological invariant (other than open curves)."""


# =============================================================================
# DATA MODEL
# =============================================================================

@dataclass(frozen=True)
class Template:
    """Rest-pose control points (P, 3), patch topology (K, 12), name and bbox diagonal."""
    name: str
    points: np.ndarray
    patches: np.ndarray
    scale_hint: float

    def __post_init__(self):
        object.__setattr__(self, 'points', np.asarray(self.points, dtype=float).reshape(-1, 3))
        object.__setattr__(self, 'patches', np.asarray(self.patches, dtype=np.int64).reshape(-1, POINTS_PER_PATCH))

    @property
    def n_points(self):
        return len(self.points)

    @property
    def n_patches(self):
        return len(self.patches)

    def __eq__(self, other):
        if not isinstance(other, Template):
            return NotImplemented
        return (self.name == other.name and self.scale_hint == other.scale_hint
                and np.array_equal(self.points, other.points) and np.array_equal(self.patches, other.patches))


@dataclass
class PatchCollection:
    """Current (optimized) control points over a template's topology."""
    points: np.ndarray
    patches: np.ndarray

    @property
    def n_patches(self):
        return len(self.patches)

    def patch(self, k):
        return CoonsPatch(self.points[self.patches[k]])

    def patch_points(self):
        """Control points gathered per patch, shape (K, 12, 3)."""
        return self.points[self.patches]


def instantiate(template, points):
    """
    Bind control-point coordinates to a template's topology.

    Raises:
        ValueError: if points does not have the template's cardinality
    """
    points = np.asarray(points, dtype=float)
    if points.shape != (template.n_points, 3):
        raise ValueError(
            f"Template '{template.name}' has {template.n_points} control points, got array of shape {points.shape}"
        )
    return PatchCollection(points.copy(), template.patches.copy())


def transform_points(points, rotation=None, scale=1.0, translation=None):
    """Apply x -> scale * R x + translation row-wise."""
    out = np.asarray(points, dtype=float)
    if rotation is not None:
        out = out @ np.asarray(rotation, dtype=float).T
    out = out * scale
    if translation is not None:
        out = out + np.asarray(translation, dtype=float)
    return out


def point_multiplicity(template):
    """Number of patches referencing each control point."""
    return np.bincount(template.patches.reshape(-1), minlength=template.n_points)


# =============================================================================
# TOPOLOGY
# =============================================================================

def curve_key(indices):
    """Orientation-free key of a boundary curve given as a 4-tuple of point indices."""
    forward = tuple(int(i) for i in indices)
    return min(forward, forward[::-1])


def shared_curves(template_or_patches):
    """
    Map every boundary curve to the patches using it.

    Returns:
        dict: curve key -> list of (patch index, curve number 0..3, forward flag), where
        forward is True when the patch traverses the curve in key order.
    """
    patches = getattr(template_or_patches, 'patches', template_or_patches)
    table = defaultdict(list)
    for k, row in enumerate(np.asarray(patches)):
        for c, slots in enumerate(CURVE_SLOTS):
            forward = tuple(int(row[s]) for s in slots)
            key = min(forward, forward[::-1])
            table[key].append((k, c, forward == key))
    return dict(table)


def adjacent_patch_pairs(template_or_patches):
    """Unordered patch pairs (i < j) that share at least one control point."""
    patches = np.asarray(getattr(template_or_patches, 'patches', template_or_patches))
    users = defaultdict(set)
    for k, row in enumerate(patches):
        for idx in row:
            users[int(idx)].add(k)
    pairs = set()
    for ks in users.values():
        ks = sorted(ks)
        for a in range(len(ks)):
            for b in range(a + 1, len(ks)):
                pairs.add((ks[a], ks[b]))
    return pairs


@dataclass(frozen=True)
class TopologyIssue:
    kind: str  # index_range | distinct | overshared | orientation_mismatch | open_curve
    message: str
    patches: tuple = ()
    curve: tuple = ()


@dataclass
class ValidationReport:
    issues: list = field(default_factory=list)

    @property
    def ok(self):
        """True for a valid closed template."""
        return not self.issues

    @property
    def errors(self):
        return [i for i in self.issues if i.kind != 'open_curve']

    @property
    def open_curves(self):
        return [i for i in self.issues if i.kind == 'open_curve']

    def count(self, kind):
        return sum(1 for i in self.issues if i.kind == kind)


def validate_topology(template):
    """
    Check the index topology of a template.

    Returns:
        ValidationReport: empty for a valid closed template. Open curves are reported
        with kind 'open_curve' and are not errors on their own.
    """
    report = ValidationReport()
    n_points = len(template.points)
    usable = []
    for k, row in enumerate(template.patches):
        if row.min() < 0 or row.max() >= n_points:
            report.issues.append(TopologyIssue(
                'index_range', f"Patch {k} references indices outside [0, {n_points})", patches=(k,)))
            continue
        if len(set(row.tolist())) != POINTS_PER_PATCH:
            report.issues.append(TopologyIssue(
                'distinct', f"Patch {k} does not reference 12 distinct points", patches=(k,)))
            continue
        usable.append(k)

    table = shared_curves(template.patches[usable]) if usable else {}
    for key, uses in table.items():
        owners = tuple(usable[k] for k, _, _ in uses)
        if len(uses) > 2:
            report.issues.append(TopologyIssue(
                'overshared', f"Curve {key} is shared by {len(uses)} patches {owners}", patches=owners, curve=key))
        elif len(uses) == 2 and uses[0][2] == uses[1][2]:
            report.issues.append(TopologyIssue(
                'orientation_mismatch',
                f"Curve {key} is traversed in the same direction by patches {owners}",
                patches=owners, curve=key))
        elif len(uses) == 1:
            report.issues.append(TopologyIssue(
                'open_curve', f"Curve {key} of patch {owners[0]} is not shared", patches=owners, curve=key))
    return report


# =============================================================================
# CUBE TEMPLATE
# =============================================================================

# Corners as sign triples; faces list (A, B, C, D) so that (B - A) x (D - A) points outward
_CUBE_FACES = (
    ((1, -1, -1), (1, 1, -1), (1, 1, 1), (1, -1, 1)),        # +x
    ((-1, -1, -1), (-1, -1, 1), (-1, 1, 1), (-1, 1, -1)),    # -x
    ((-1, 1, -1), (-1, 1, 1), (1, 1, 1), (1, 1, -1)),        # +y
    ((-1, -1, -1), (1, -1, -1), (1, -1, 1), (-1, -1, 1)),    # -y
    ((-1, -1, 1), (1, -1, 1), (1, 1, 1), (-1, 1, 1)),        # +z
    ((-1, -1, -1), (-1, 1, -1), (1, 1, -1), (1, -1, -1)),    # -z
)


def _corner_code(signs):
    return sum(1 << axis for axis, sgn in enumerate(signs) if sgn > 0)


def build_cube_template(side=1.0):
    """
    Axis-aligned cube of the given side centred at the origin.

    6 patches, 12 shared curves, 32 control points: 8 corners followed by the two
    interior points of each edge, placed at 1/3 and 2/3 from the lower-coded corner.
    """
    if not side > 0:
        raise ValueError(f"Cube side must be > 0, got {side}")
    h = side / 2.0
    points = [[h if code & (1 << axis) else -h for axis in range(3)] for code in range(8)]

    edge_points = {}
    for p in range(8):
        for axis in range(3):
            q = p | (1 << axis)
            if q == p:
                continue
            a, b = np.array(points[p]), np.array(points[q])
            edge_points[(p, q)] = (len(points), len(points) + 1)
            points.append((a + (b - a) / 3.0).tolist())
            points.append((a + 2.0 * (b - a) / 3.0).tolist())

    def interior(p, q):
        if p < q:
            return list(edge_points[(p, q)])
        return list(edge_points[(q, p)][::-1])

    patches = []
    for face in _CUBE_FACES:
        a, b, c, d = (_corner_code(signs) for signs in face)
        patches.append([a, *interior(a, b), b, *interior(b, c), c, *interior(c, d), d, *interior(d, a)])

    return Template(name='cube', points=np.array(points), patches=np.array(patches),
                    scale_hint=float(side * np.sqrt(3.0)))


# =============================================================================
# TEMPLATE FILES
# =============================================================================

def _format_float(value):
    return format(float(value), '.17g')


def save_template(template, path):
    """Write a template as JSON. Coordinates and scale_hint use 17 significant digits."""
    points = np.asarray(template.points, dtype=float)
    if not (np.isfinite(points).all() and np.isfinite(template.scale_hint)):
        raise ValueError(f"Template '{template.name}' has non-finite coordinates and cannot be saved")
    rows = ',\n'.join(f"  [{', '.join(_format_float(x) for x in p)}]" for p in points)
    patches = ',\n'.join(f"  {json.dumps([int(i) for i in row])}" for row in template.patches)
    text = (f'{{\n "name": {json.dumps(template.name)},\n'
            f' "scale_hint": {_format_float(template.scale_hint)},\n'
            f' "points": [\n{rows}\n ],\n'
            f' "patches": [\n{patches}\n ]\n}}\n')
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, 'w') as f:
        f.write(text)
    logger.debug(f"Saved template '{template.name}' ({template.n_patches} patches) to {path}")


def _bbox_diagonal(points):
    if len(points) == 0:
        return 0.0
    return float(np.linalg.norm(points.max(axis=0) - points.min(axis=0)))


def template_from_document(doc):
    """Build and validate a Template from a parsed JSON document."""
    if not isinstance(doc, dict):
        raise TemplateSchemaError("Template document must be an object")
    missing = [k for k in REQUIRED_FIELDS if k not in doc]
    if missing:
        raise TemplateSchemaError(f"Template document is missing field(s): {', '.join(missing)}")

    try:
        points = np.array(doc['points'], dtype=float)
    except (TypeError, ValueError) as e:
        raise TemplateSchemaError(f"Template points are not numeric: {e}") from e
    if points.ndim != 2 or points.shape[1] != 3:
        raise TemplateSchemaError(f"Template points must be a list of [x, y, z], got shape {points.shape}")
    if not np.isfinite(points).all():
        raise TemplateSchemaError("Template points contain non-finite coordinates")

    rows = doc['patches']
    if not isinstance(rows, list) or not rows:
        raise TemplateSchemaError("Template patches must be a non-empty list")
    for k, row in enumerate(rows):
        if not isinstance(row, list) or len(row) != POINTS_PER_PATCH:
            size = len(row) if isinstance(row, list) else type(row).__name__
            raise TemplateSchemaError(f"Patch {k} must list exactly 12 point indices, got {size}")
        if not all(isinstance(i, int) and not isinstance(i, bool) for i in row):
            raise TemplateSchemaError(f"Patch {k} contains non-integer indices")

    scale_hint = doc.get('scale_hint')
    template = Template(
        name=str(doc['name']),
        points=points,
        patches=np.array(rows, dtype=np.int64),
        scale_hint=float(scale_hint) if scale_hint is not None else _bbox_diagonal(points),
    )

    report = validate_topology(template)
    if report.errors:
        details = '; '.join(i.message for i in report.errors)
        raise TemplateTopologyError(f"Template '{template.name}' is invalid: {details}")
    for issue in report.open_curves:
        logger.warning(f"Template '{template.name}': {issue.message}")
    return template


def load_template(path):
    """
    Load a JSON template file and validate its topology.

    Raises:
        FileNotFoundError: if the file does not exist
        TemplateSchemaError: malformed document
        TemplateTopologyError: invariant violations other than open curves
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"Template file not found: {path}")
    with open(path, 'r') as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise TemplateSchemaError(f"Template file {path} is not valid JSON: {e}") from e
    template = template_from_document(doc)
    logger.info(f"Loaded template '{template.name}': {template.n_patches} patches, {template.n_points} points")
    return template


# =============================================================================
# WELDED TESSELLATION
# =============================================================================

def _boundary_keys(row, n):
    """
    Weld keys of the boundary grid vertices of one patch.

    Corners are keyed by control-point index, other boundary vertices by
    (curve key, position along the curve in key order).
    """
    keys = {}
    side = n + 1
    corners = ((0, 0, 0), (n, 0, 3), (n, n, 6), (0, n, 9))
    for i, j, slot in corners:
        keys[j * side + i] = ('p', int(row[slot]))

    # (curve number, local vertex for curve position m)
    walkers = (
        (0, lambda m: 0 * side + m),
        (1, lambda m: m * side + n),
        (2, lambda m: n * side + (n - m)),
        (3, lambda m: (n - m) * side + 0),
    )
    for c, local in walkers:
        forward = tuple(int(row[s]) for s in CURVE_SLOTS[c])
        key = min(forward, forward[::-1])
        for m in range(1, n):
            pos = m if forward == key else n - m
            keys[local(m)] = ('c', key, pos)
    return keys


def tessellate_collection(pc, n):
    """
    Tessellate every patch at resolution n and weld shared seams by index.

    Args:
        pc: PatchCollection
        n: Grid resolution per patch (>= 1)

    Returns:
        TriangleMesh: closed templates give an edge-manifold mesh for any control points
    """
    if n < 1:
        raise ValueError(f"Tessellation resolution must be >= 1, got {n}")
    s, t = grid_parameters(n)
    W, _, _ = coons_basis(s, t)
    faces_local = grid_faces(n)

    vertices = []
    registry = {}
    faces = []
    for k, row in enumerate(pc.patches):
        grid = combine(W, pc.points[row])
        boundary = _boundary_keys(row, n)
        remap = np.empty(len(grid), dtype=np.int64)
        for local in range(len(grid)):
            key = boundary.get(local, ('i', k, local))
            idx = registry.get(key)
            if idx is None:
                idx = len(vertices)
                registry[key] = idx
                vertices.append(grid[local])
            remap[local] = idx
        faces.append(remap[faces_local])

    mesh = TriangleMesh(np.array(vertices), np.concatenate(faces))
    logger.debug(f"Welded tessellation: {len(mesh.vertices)} vertices, {len(mesh.faces)} triangles")
    return mesh
