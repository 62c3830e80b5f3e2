#!/usr/bin/env python3
"""
Loss Module

Every term of the fitting objective together with its exact gradient with respect to
all shared control points:

    total = w_ch * chamfer + w_normal * normal + w_template * template
            + w_self_x * self_x + w_pair_x * pair_x

Key Features:
- Area-weighted Chamfer distance: parameter-domain samples are importance-weighted by
  the area element |P_s x P_t| and self-normalized, so the patch-to-mesh direction
  estimates a surface average rather than a parameter-domain average.
- Normal alignment 1 - <n_target, n_patch>^2 (sign-invariant), area-weighted.
- Template pull toward the rest pose with weight gamma^(t/s).
- Learned self / pairwise intersection penalties from frozen MLP classifiers.
- Gradients: Coons patches are linear in their control points, so every per-sample
  derivative with respect to P, P_s and P_t is scattered back through the blending
  weights of geom_kernel.coons_basis. Nearest-neighbour assignments are held fixed
  inside one evaluation.

Patch samples are allocated round-robin over patches (patch id = ordinal mod K) with
uniform (s, t); one draw per seed is shared by the Chamfer and normal terms.
"""

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from geom_kernel import EPS_DEGENERATE, POINTS_PER_PATCH, coons_basis, combine
from intersection import normalize_unit_cube, normalize_unit_cube_backward
from intersection_mlp import mlp_predict
from mesh_utils import SpatialIndex
from template_utils import point_multiplicity

logger = logging.getLogger(__name__)

# Distances below this contribute no gradient
EPS_DISTANCE = 1e-12

CHAMFER_DISTANCES = ('euclidean', 'squared')
NORMALIZATIONS = ('global', 'per_patch')
CHAMFER_DIRECTIONS = ('both', 'patch_to_mesh', 'mesh_to_patch')


# =============================================================================
# DOMAIN TYPES
# =============================================================================

@dataclass(frozen=True)
class LossWeights:
    chamfer: float = 1.0
    normal: float = 0.05
    template: float = 1.0
    self_x: float = 0.01
    pair_x: float = 0.01

    def __post_init__(self):
        negative = [name for name, value in asdict(self).items() if value < 0]
        if negative:
            raise ValueError(f"Loss weights must be >= 0: {', '.join(negative)}")


@dataclass(frozen=True)
class DecaySchedule:
    """Template-loss decay gamma^(t/s)."""
    gamma: float = 0.4
    s: float = 600.0
    t: int = 0

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"Decay gamma must lie in (0, 1), got {self.gamma}")
        if not self.s > 0:
            raise ValueError(f"Decay s must be > 0, got {self.s}")
        if self.t < 0:
            raise ValueError(f"Decay counter must be >= 0, got {self.t}")

    @property
    def weight(self):
        return self.gamma ** (self.t / self.s)

    def at(self, t):
        return DecaySchedule(self.gamma, self.s, t)


@dataclass
class LossBreakdown:
    chamfer: float = 0.0
    normal: float = 0.0
    template: float = 0.0
    self_x: float = 0.0
    pair_x: float = 0.0
    total: float = 0.0
    gradient: np.ndarray = field(default=None, repr=False)
    grad_max: float = 0.0

    def record(self, iteration=None):
        """Flat dict of the scalar fields, for history logs."""
        row = {} if iteration is None else {'iter': iteration}
        row.update({k: getattr(self, k) for k in ('chamfer', 'normal', 'template', 'self_x', 'pair_x', 'total',
                                                  'grad_max')})
        return row

    def is_finite(self):
        return bool(np.isfinite(self.total)) and (self.gradient is None or bool(np.isfinite(self.gradient).all()))


@dataclass
class PatchSamples:
    """Per-iteration Monte-Carlo samples of the parameter domain."""
    patch_ids: np.ndarray
    s: np.ndarray
    t: np.ndarray
    W: np.ndarray
    Ws: np.ndarray
    Wt: np.ndarray

    def __len__(self):
        return len(self.patch_ids)


@dataclass
class _Geometry:
    positions: np.ndarray
    ps: np.ndarray
    pt: np.ndarray
    cross: np.ndarray
    area: np.ndarray
    unit_cross: np.ndarray
    valid: np.ndarray


# =============================================================================
# SAMPLING AND GRADIENT PLUMBING
# =============================================================================

def sample_patch_points(pc, n, seed):
    """Draw n parameter samples, round-robin over patches, uniform (s, t)."""
    if n < 1:
        raise ValueError(f"Patch sample count must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    s = rng.random(n)
    t = rng.random(n)
    W, Ws, Wt = coons_basis(s, t)
    return PatchSamples(np.arange(n) % pc.n_patches, s, t, W, Ws, Wt)


def _patch_geometry(pc, samples):
    X = pc.patch_points()[samples.patch_ids]
    positions = combine(samples.W, X)
    ps = combine(samples.Ws, X)
    pt = combine(samples.Wt, X)
    cross = np.cross(ps, pt)
    area = np.linalg.norm(cross, axis=1)
    valid = area > EPS_DEGENERATE
    unit_cross = np.zeros_like(cross)
    unit_cross[valid] = cross[valid] / area[valid, None]
    return _Geometry(positions, ps, pt, cross, area, unit_cross, valid)


def _scatter(pc, samples, g_p=None, g_ps=None, g_pt=None):
    """Chain per-sample derivatives w.r.t. P, P_s, P_t back to the shared control points."""
    grad = np.zeros_like(pc.points)
    rows = pc.patches[samples.patch_ids]
    for k in range(POINTS_PER_PATCH):
        contrib = np.zeros((len(samples), 3))
        if g_p is not None:
            contrib += samples.W[:, k, None] * g_p
        if g_ps is not None:
            contrib += samples.Ws[:, k, None] * g_ps
        if g_pt is not None:
            contrib += samples.Wt[:, k, None] * g_pt
        np.add.at(grad, rows[:, k], contrib)
    return grad


def _area_gradient(geom, g_area):
    """Derivative of |P_s x P_t| pushed onto (P_s, P_t) given dL/d(area) per sample."""
    g_cross = g_area[:, None] * geom.unit_cross
    return np.cross(geom.pt, g_cross), np.cross(g_cross, geom.ps)


def _distances(diff, distance):
    if distance == 'squared':
        d = np.einsum('ij,ij->i', diff, diff)
        return d, 2.0 * diff
    d = np.linalg.norm(diff, axis=1)
    unit = np.zeros_like(diff)
    far = d >= EPS_DISTANCE
    unit[far] = diff[far] / d[far, None]
    return d, unit


def _check_options(distance, normalization):
    if distance not in CHAMFER_DISTANCES:
        raise ValueError(f"Unknown chamfer distance '{distance}', expected one of {CHAMFER_DISTANCES}")
    if normalization not in NORMALIZATIONS:
        raise ValueError(f"Unknown normalization '{normalization}', expected one of {NORMALIZATIONS}")


# =============================================================================
# CHAMFER
# =============================================================================

def _area_weighted_mean(values, area, patch_ids, n_patches, normalization):
    """
    Self-normalized area-weighted mean and its derivatives.

    Returns:
        tuple: (value, dvalue/dvalues (N,), dvalue/darea (N,))
    """
    if normalization == 'global':
        total_area = area.sum()
        if total_area <= 0:
            raise ValueError("All patch samples are degenerate (zero total area element)")
        value = float(np.dot(area, values) / total_area)
        return value, area / total_area, (values - value) / total_area

    patch_area = np.bincount(patch_ids, weights=area, minlength=n_patches)
    if not (patch_area > 0).any():
        raise ValueError("All patch samples are degenerate (zero total area element)")
    patch_sum = np.bincount(patch_ids, weights=area * values, minlength=n_patches)
    safe = np.where(patch_area > 0, patch_area, 1.0)
    patch_mean = np.where(patch_area > 0, patch_sum / safe, 0.0)
    denom = safe[patch_ids]
    live = patch_area[patch_ids] > 0
    d_values = np.where(live, area / denom, 0.0)
    d_area = np.where(live, (values - patch_mean[patch_ids]) / denom, 0.0)
    return float(patch_mean.sum()), d_values, d_area


def _chamfer_from_samples(pc, samples, geom, target_index, target_samples, distance, normalization, directions):
    value = 0.0
    g_p = np.zeros_like(geom.positions)
    g_ps = np.zeros_like(geom.ps)
    g_pt = np.zeros_like(geom.pt)

    if directions in ('both', 'patch_to_mesh'):
        _, nn = target_index.query(geom.positions)
        d, d_grad = _distances(geom.positions - target_index.points[nn], distance)
        term, d_values, d_area = _area_weighted_mean(d, geom.area, samples.patch_ids, pc.n_patches, normalization)
        value += term
        g_p += d_values[:, None] * d_grad
        a_ps, a_pt = _area_gradient(geom, d_area)
        g_ps += a_ps
        g_pt += a_pt

    if directions in ('both', 'mesh_to_patch'):
        targets = target_samples.positions
        _, nn = SpatialIndex(geom.positions).query(targets)
        d, d_grad = _distances(geom.positions[nn] - targets, distance)
        value += float(d.mean())
        np.add.at(g_p, nn, d_grad / len(targets))

    return value, _scatter(pc, samples, g_p, g_ps, g_pt)


def chamfer_loss(pc, target_index, target_samples, n_patch_samples, seed,
                 distance='euclidean', normalization='global', directions='both'):
    """
    Area-weighted symmetric Chamfer distance between a patch collection and a target.

    Args:
        pc: PatchCollection
        target_index: SpatialIndex over the target sample positions
        target_samples: SurfaceSamples of the target mesh
        n_patch_samples: Parameter samples drawn across all patches
        seed: Sampling seed
        distance: 'euclidean' (unsquared) or 'squared'
        normalization: 'global' (one shared area normalizer) or 'per_patch'
        directions: 'both', 'patch_to_mesh' or 'mesh_to_patch'

    Returns:
        tuple: (value, gradient (P, 3))
    """
    _check_options(distance, normalization)
    if directions not in CHAMFER_DIRECTIONS:
        raise ValueError(f"Unknown chamfer direction '{directions}', expected one of {CHAMFER_DIRECTIONS}")
    samples = sample_patch_points(pc, n_patch_samples, seed)
    geom = _patch_geometry(pc, samples)
    return _chamfer_from_samples(pc, samples, geom, target_index, target_samples, distance, normalization,
                                 directions)


# =============================================================================
# NORMAL ALIGNMENT
# =============================================================================

def _normal_from_samples(pc, samples, geom, target_index):
    if target_index.samples is None:
        raise ValueError("Normal loss needs a spatial index built over surface samples (mesh_utils.build_index)")
    valid = geom.valid
    if not valid.any():
        raise ValueError("All patch samples are degenerate (no valid normals)")
    skipped = int((~valid).sum())
    if skipped:
        logger.debug(f"Normal loss skipped {skipped} degenerate patch samples")

    _, nn = target_index.query(geom.positions)
    m = target_index.samples.normals[nn]
    n = geom.unit_cross
    dot = np.einsum('ij,ij->i', m, n)
    f = np.where(valid, 1.0 - dot * dot, 0.0)
    area = np.where(valid, geom.area, 0.0)
    total_area = area.sum()
    value = float(np.dot(area, f) / total_area)

    # d/dc of area-weighted mean: tangential part of dL/dn plus the area-weight term
    g_n = -2.0 * dot[:, None] * m
    tangential = g_n - np.einsum('ij,ij->i', g_n, n)[:, None] * n
    g_cross = (tangential + (f - value)[:, None] * n) / total_area
    g_cross[~valid] = 0.0
    g_ps = np.cross(geom.pt, g_cross)
    g_pt = np.cross(g_cross, geom.ps)
    return value, _scatter(pc, samples, g_ps=g_ps, g_pt=g_pt)


def normal_loss(pc, target_index, n_patch_samples, seed):
    """
    Area-weighted mean of 1 - <n_target, n_patch>^2 over patch samples.

    The target normal is that of the nearest target sample (Euclidean). Degenerate
    patch samples are skipped and excluded from the normalizer.

    Returns:
        tuple: (value in [0, 1], gradient (P, 3))
    """
    samples = sample_patch_points(pc, n_patch_samples, seed)
    geom = _patch_geometry(pc, samples)
    return _normal_from_samples(pc, samples, geom, target_index)


# =============================================================================
# TEMPLATE PULL
# =============================================================================

def template_loss(pc, template, sched):
    """
    gamma^(t/s) * sum over control points of multiplicity * |p - T|^2.

    The multiplicity counts the patches referencing each point, so the sum equals the
    per-patch sum over each patch's 12 control points.
    """
    if pc.points.shape != template.points.shape:
        raise ValueError(
            f"Control-point count mismatch: collection has {len(pc.points)}, template has {len(template.points)}"
        )
    weight = sched.weight
    mult = point_multiplicity(template).astype(float)
    diff = pc.points - template.points
    value = weight * float(np.dot(mult, np.einsum('ij,ij->i', diff, diff)))
    return value, 2.0 * weight * mult[:, None] * diff


# =============================================================================
# INTERSECTION PENALTIES
# =============================================================================

def _score_point_sets(clf, point_sets):
    """Classifier scores of unit-cube normalized point sets (B, M, 3) and d(sum)/d(points)."""
    normalized = normalize_unit_cube(point_sets)
    scores, grad_in = mlp_predict(clf, normalized.reshape(len(point_sets), -1), with_grad=True)
    grad_points = normalize_unit_cube_backward(point_sets, grad_in.reshape(point_sets.shape))
    return scores, grad_points


def ordered_patch_pairs(pc, include_adjacent_pairs=False):
    """Ordered pairs (i, j), i != j; pairs sharing a control point are dropped unless requested."""
    pairs = []
    sets = [set(row.tolist()) for row in pc.patches]
    for i in range(pc.n_patches):
        for j in range(pc.n_patches):
            if i == j:
                continue
            if not include_adjacent_pairs and sets[i] & sets[j]:
                continue
            pairs.append((i, j))
    return pairs


def self_intersection_loss(pc, clf):
    """Sum of self-intersection scores over patches, with its gradient."""
    if clf.input_dim != 3 * POINTS_PER_PATCH:
        raise ValueError(f"Self-intersection classifier expects {clf.input_dim} inputs, patches give 36")
    grad = np.zeros_like(pc.points)
    scores, g = _score_point_sets(clf, pc.patch_points())
    np.add.at(grad, pc.patches.reshape(-1), g.reshape(-1, 3))
    return float(scores.sum()), grad


def pair_intersection_loss(pc, clf, include_adjacent_pairs=False):
    """Sum of pair-intersection scores over ordered patch pairs, with its gradient."""
    if clf.input_dim != 6 * POINTS_PER_PATCH:
        raise ValueError(f"Pair-intersection classifier expects {clf.input_dim} inputs, pairs give 72")
    grad = np.zeros_like(pc.points)
    pairs = ordered_patch_pairs(pc, include_adjacent_pairs)
    if not pairs:
        return 0.0, grad
    X = pc.patch_points()
    first = np.array([i for i, _ in pairs])
    second = np.array([j for _, j in pairs])
    scores, g = _score_point_sets(clf, np.concatenate([X[first], X[second]], axis=1))
    np.add.at(grad, pc.patches[first].reshape(-1), g[:, :POINTS_PER_PATCH].reshape(-1, 3))
    np.add.at(grad, pc.patches[second].reshape(-1), g[:, POINTS_PER_PATCH:].reshape(-1, 3))
    return float(scores.sum()), grad


def intersection_losses(pc, self_clf, pair_clf, include_adjacent_pairs=False):
    """
    Learned self- and pairwise-intersection penalties.

    Args:
        pc: PatchCollection
        self_clf: Classifier over one patch (36 inputs), or None to skip
        pair_clf: Classifier over an ordered pair (72 inputs), or None to skip
        include_adjacent_pairs: Score pairs that share control points as well

    Returns:
        tuple: (self value, pair value, gradient (P, 3)) where the gradient is that of
        self value + pair value
    """
    self_value, self_grad = ((0.0, np.zeros_like(pc.points)) if self_clf is None
                             else self_intersection_loss(pc, self_clf))
    pair_value, pair_grad = ((0.0, np.zeros_like(pc.points)) if pair_clf is None
                             else pair_intersection_loss(pc, pair_clf, include_adjacent_pairs))
    return self_value, pair_value, self_grad + pair_grad


# =============================================================================
# TOTAL
# =============================================================================

def total_loss(pc, target_index, target_samples, template, weights, sched, n_patch_samples, seed,
               self_clf=None, pair_clf=None, distance='euclidean', normalization='global',
               include_adjacent_pairs=False):
    """
    Weighted sum of all terms with its gradient.

    The Chamfer and normal terms share one draw of patch samples, identical to the
    draw their standalone functions make for the same seed.

    Returns:
        LossBreakdown
    """
    _check_options(distance, normalization)
    samples = sample_patch_points(pc, n_patch_samples, seed)
    geom = _patch_geometry(pc, samples)

    chamfer, g_ch = _chamfer_from_samples(pc, samples, geom, target_index, target_samples, distance,
                                          normalization, 'both')
    normal, g_n = _normal_from_samples(pc, samples, geom, target_index)
    template_value, g_t = template_loss(pc, template, sched)
    self_x, pair_x = 0.0, 0.0
    gradient = weights.chamfer * g_ch + weights.normal * g_n + weights.template * g_t
    if self_clf is not None:
        self_x, g_self = self_intersection_loss(pc, self_clf)
        gradient = gradient + weights.self_x * g_self
    if pair_clf is not None:
        pair_x, g_pair = pair_intersection_loss(pc, pair_clf, include_adjacent_pairs)
        gradient = gradient + weights.pair_x * g_pair

    total = (weights.chamfer * chamfer + weights.normal * normal + weights.template * template_value
             + weights.self_x * self_x + weights.pair_x * pair_x)
    grad_max = float(np.linalg.norm(gradient, axis=1).max()) if len(gradient) else 0.0
    return LossBreakdown(chamfer, normal, template_value, self_x, pair_x, float(total), gradient, grad_max)
