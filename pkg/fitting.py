#!/usr/bin/env python3
"""
Fitting Module

Gradient-based fitting of a template's shared control points to a target triangle mesh
under the total loss (losses.total_loss), optimized with Adam.

Key Features:
- Target mesh uniformly rescaled and centred onto the template's box before fitting;
  the inverse map is applied to the returned control points
- Fresh Monte-Carlo patch samples every iteration (seed derived from the run seed and
  the iteration index); template decay counter t = iteration index
- Best-by-total-loss iterate returned; a non-finite loss stops the run and keeps the
  last finite state (status 'diverged')
- export_fit writes the fitted template file and a welded OBJ tessellation

Usage:
    from fitting import FitConfig, fit_template, export_fit
    result = fit_template(template, target_mesh, FitConfig(iterations=2000))
    export_fit(result, template, 'results/fit', tess_n=16)
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from config import config
from intersection_mlp import MLPClassifier, load_classifier
from losses import CHAMFER_DISTANCES, NORMALIZATIONS, DecaySchedule, LossWeights, total_loss
from mesh_utils import (
    BoxTransform,
    TriangleMesh,
    build_index,
    normalize_to_box,
    sample_surface,
    save_obj,
    surface_chamfer,
)
from optim_utils import Adam
from template_utils import Template, instantiate, save_template, tessellate_collection

logger = logging.getLogger(__name__)

STATUS_CONVERGED = 'converged'
STATUS_DIVERGED = 'diverged'


@dataclass
class FitConfig:
    iterations: int = 2000
    step_size: float = 1e-4
    alpha_chamfer: float = 1.0
    alpha_normal: float = 0.05
    alpha_template: float = 1.0
    alpha_self_x: float = 0.01
    alpha_pair_x: float = 0.01
    gamma: float = 0.4
    decay_s: float = 600.0
    patch_samples: int = 5000
    target_samples: int = 20000
    seed: int = 0
    use_intersection: bool = False
    self_classifier: str = ''
    pair_classifier: str = ''
    include_adjacent_pairs: bool = False
    normalize_target: bool = True
    chamfer_distance: str = 'euclidean'
    normalization: str = 'global'
    log_every: int = 100
    eval_samples: int = 20000
    eval_resolution: int = 16

    @property
    def weights(self):
        return LossWeights(self.alpha_chamfer, self.alpha_normal, self.alpha_template, self.alpha_self_x,
                           self.alpha_pair_x)

    @property
    def schedule(self):
        return DecaySchedule(self.gamma, self.decay_s, 0)

    def validate(self):
        problems = []
        if self.iterations < 0:
            problems.append(f"iterations must be >= 0 (got {self.iterations})")
        if not self.step_size > 0:
            problems.append(f"step_size must be > 0 (got {self.step_size})")
        for name in ('patch_samples', 'target_samples', 'eval_samples', 'eval_resolution', 'log_every'):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1 (got {getattr(self, name)})")
        if self.chamfer_distance not in CHAMFER_DISTANCES:
            problems.append(f"chamfer_distance must be one of {CHAMFER_DISTANCES}")
        if self.normalization not in NORMALIZATIONS:
            problems.append(f"normalization must be one of {NORMALIZATIONS}")
        negative = [name for name in ('alpha_chamfer', 'alpha_normal', 'alpha_template', 'alpha_self_x',
                                      'alpha_pair_x') if getattr(self, name) < 0]
        if negative:
            problems.append(f"loss weights must be >= 0 ({', '.join(negative)})")
        if not 0.0 < self.gamma < 1.0:
            problems.append(f"gamma must lie in (0, 1) (got {self.gamma})")
        if not self.decay_s > 0:
            problems.append(f"decay_s must be > 0 (got {self.decay_s})")
        if problems:
            raise ValueError("Invalid fit configuration: " + "; ".join(problems))


@dataclass
class FitResult:
    points: np.ndarray
    fit_points: np.ndarray
    transform: BoxTransform
    history: list = field(default_factory=list)
    best_iteration: int = 0
    final_breakdown: object = None
    surface_chamfer: float = float('nan')
    status: str = STATUS_CONVERGED
    wall_clock: float = 0.0

    @property
    def converged(self):
        return self.status == STATUS_CONVERGED

    @property
    def iterations_run(self):
        return len(self.history)


def load_fit_classifiers(cfg: FitConfig) -> Tuple[Optional[MLPClassifier], Optional[MLPClassifier]]:
    """Frozen (self, pair) classifiers when intersection losses are enabled, else (None, None)."""
    if not cfg.use_intersection:
        return None, None
    self_path, pair_path = config.validate_classifier_config(cfg.self_classifier or None,
                                                             cfg.pair_classifier or None)
    return load_classifier(self_path), load_classifier(pair_path)


def template_transform(template: Template, target: TriangleMesh, normalize: bool) -> BoxTransform:
    """Map from the target's frame onto the template's box (identity when normalize is off)."""
    if not normalize:
        return BoxTransform(1.0, np.zeros(3))
    lo, hi = template.points.min(axis=0), template.points.max(axis=0)
    return normalize_to_box(target.vertices[np.unique(target.faces)], (lo + hi) / 2.0, template.scale_hint)


def fit_template(template: Template, target: TriangleMesh, cfg: FitConfig,
                 self_clf: Optional[MLPClassifier] = None,
                 pair_clf: Optional[MLPClassifier] = None) -> FitResult:
    """
    Fit a template's control points to a target mesh.

    Args:
        template: Validated Template (rest pose = initialization)
        target: TriangleMesh
        cfg: FitConfig
        self_clf, pair_clf: Frozen classifiers; loaded from cfg paths when
            cfg.use_intersection is set and they are not given

    Returns:
        FitResult
    """
    cfg.validate()
    started = time.time()
    if cfg.use_intersection and (self_clf is None or pair_clf is None):
        self_clf, pair_clf = load_fit_classifiers(cfg)
    if not cfg.use_intersection:
        self_clf, pair_clf = None, None

    transform = template_transform(template, target, cfg.normalize_target)
    target_fit = target.transformed(transform.scale, transform.translation)
    target_seed, eval_seed = np.random.SeedSequence(cfg.seed).spawn(2)
    samples = sample_surface(target_fit, cfg.target_samples, target_seed)
    index = build_index(samples)
    logger.info(f"Fitting template '{template.name}' ({template.n_patches} patches) to target with "
                f"{len(target.faces)} faces; scale={transform.scale:.6g}, iterations={cfg.iterations}")

    pc = instantiate(template, template.points)
    weights, schedule = cfg.weights, cfg.schedule
    opt = Adam(lr=cfg.step_size)

    def evaluate(points, iteration):
        pc.points = points
        return total_loss(pc, index, samples, template, weights, schedule.at(iteration), cfg.patch_samples,
                          [cfg.seed, iteration], self_clf, pair_clf, cfg.chamfer_distance, cfg.normalization,
                          cfg.include_adjacent_pairs)

    history = []
    status = STATUS_CONVERGED
    points = template.points.copy()
    best_points, best_total, best_iteration, best_breakdown = points.copy(), np.inf, 0, None

    for it in range(cfg.iterations):
        breakdown = evaluate(points, it)
        if not breakdown.is_finite():
            status = STATUS_DIVERGED
            logger.error(f"Non-finite loss at iteration {it}; stopping with the last finite state")
            break
        history.append(breakdown)
        if breakdown.total < best_total:
            best_points, best_total, best_iteration, best_breakdown = points.copy(), breakdown.total, it, breakdown

        stepped = points.copy()
        opt.step({'points': stepped}, {'points': breakdown.gradient})
        if not np.isfinite(stepped).all():
            status = STATUS_DIVERGED
            logger.error(f"Non-finite control points after iteration {it}; stopping with the last finite state")
            break
        points = stepped

        if (it + 1) % cfg.log_every == 0 or it == 0:
            logger.info(f"iter {it:5d}: total={breakdown.total:.6g} chamfer={breakdown.chamfer:.6g} "
                        f"normal={breakdown.normal:.6g} template={breakdown.template:.6g} "
                        f"grad_max={breakdown.grad_max:.3g}")

    if status == STATUS_DIVERGED:
        final_points = points
        final_breakdown = history[-1] if history else None
        final_iteration = len(history) - 1 if history else 0
    elif history:
        final_points, final_breakdown, final_iteration = best_points, best_breakdown, best_iteration
    else:
        final_points, final_iteration = template.points.copy(), 0
        final_breakdown = evaluate(final_points.copy(), 0)

    pc.points = final_points.copy()
    fitted_mesh = tessellate_collection(pc, cfg.eval_resolution)
    chamfer = surface_chamfer(fitted_mesh, target_fit, cfg.eval_samples, eval_seed)

    result = FitResult(
        points=transform.invert(final_points),
        fit_points=final_points.copy(),
        transform=transform,
        history=history,
        best_iteration=final_iteration,
        final_breakdown=final_breakdown,
        surface_chamfer=chamfer,
        status=status,
        wall_clock=time.time() - started,
    )
    logger.info(f"Fit {status}: best iteration {final_iteration}, surface chamfer {chamfer:.3e}, "
                f"{result.wall_clock:.1f}s")
    return result


def export_fit(result: FitResult, template: Template, prefix: str, tess_n: int = 16) -> Dict[str, str]:
    """
    Write '<prefix>_template.json' (fitted control points, template format) and
    '<prefix>.obj' (welded tessellation at tess_n).

    Returns:
        dict: {'template': path, 'obj': path}
    """
    fitted = Template(name=f"{template.name}_fit", points=result.points, patches=template.patches,
                      scale_hint=float(np.linalg.norm(result.points.max(axis=0) - result.points.min(axis=0))))
    template_path = f"{prefix}_template.json"
    obj_path = f"{prefix}.obj"
    save_template(fitted, template_path)
    mesh = tessellate_collection(instantiate(fitted, fitted.points), tess_n)
    save_obj(mesh, obj_path)
    logger.info(f"Exported fit to {template_path} and {obj_path} ({len(mesh.faces)} triangles)")
    return {'template': template_path, 'obj': obj_path}
