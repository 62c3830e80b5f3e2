#!/usr/bin/env python3
"""
Main Template Fitting Pipeline Orchestrator

Single entry point for the patch-template toolkit: fitting templates to meshes,
building the intersection classifiers' training data, training and probing the
classifiers, and producing augmented sketch bitmaps.

Key Features:
- fit: fit a template to an OBJ mesh; writes the fitted template, a welded OBJ, the
  per-iteration history log and the effective configuration (exit 2 on divergence)
- gen-intersect-data: balanced self/pair intersection dataset from the exact oracle
- train-mlp: train an intersection classifier on a dataset file
- augment: split/truncate/remove augmentation of contour drawings rasterized at
  several stroke widths, with a provenance manifest
- tessellate: welded, watertight OBJ export of a template
- eval-loss: print the loss breakdown of a template instance against a mesh
- build-template: write the built-in cube template
- score-interp: classifier scores along a flat-to-folded patch interpolation

Configuration comes from dataclass defaults, a JSON --config file,
PATCHFIT_<SECTION>__<FIELD> environment variables and --set overrides, in that order;
--seed and --threads win over all of them.

Usage Examples:
    # Cube template and a fit against a cube mesh
    python main_pipeline.py build-template --output results/cube.json
    python main_pipeline.py fit --template results/cube.json --mesh cube.obj --out results/fit

    # Classifier data and training
    python main_pipeline.py gen-intersect-data --kind self --count 10000 --output results/self.cxds
    python main_pipeline.py train-mlp --dataset results/self.cxds --output results/self.cxml

    # Sketch augmentation with three stroke widths
    python main_pipeline.py augment --input drawings/ --out results/sketches --set render.widths=1,2,3
"""

import argparse
import logging
import os
import sys
import time
import traceback
from typing import List, Optional

import numpy as np
import pandas as pd
from dotenv import load_dotenv

# Load environment variables from the project root
# This assumes the .env file is in the project root directory
load_dotenv()


# =============================================================================
# IMPORTS
# =============================================================================
from augment import batch_augment
from config import config
from fitting import STATUS_DIVERGED, export_fit, fit_template, load_fit_classifiers, template_transform
from intersection import flat_patch_points, folded_patch_points, generate_dataset, load_dataset, save_dataset
from intersection_mlp import (
    TrainingDivergedError,
    evaluate_classifier,
    interpolation_scores,
    load_classifier,
    mlp_train,
    save_classifier,
)
from losses import total_loss
from mesh_utils import build_index, edge_manifold_audit, load_obj, sample_surface, save_obj
from reports import format_breakdown, save_json_report, write_history, write_manifest
from run_config import RunConfig, describe_fields, resolve_run_config, write_effective_config
from template_utils import build_cube_template, instantiate, load_template, save_template, tessellate_collection

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_DIVERGED = 2


# =============================================================================
# CONFIGURATION
# =============================================================================
def setup_logging(log_level: str = "INFO", log_file: Optional[str] = None) -> logging.Logger:
    """
    Setup logging configuration for the pipeline.

    Args:
        log_level: Logging level (DEBUG, INFO, WARNING, ERROR). Default: INFO.
        log_file: Log file path. Default: config.LOG_FILE.

    Returns:
        logging.Logger: Configured logger instance.
    """
    global logger
    logging.basicConfig(
        level=getattr(logging, log_level.upper()),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[
            logging.StreamHandler(sys.stdout),
            logging.FileHandler(log_file or config.LOG_FILE)
        ],
        force=True,
    )
    logger = logging.getLogger(__name__)
    return logger


# =============================================================================
# PIPELINE STATISTICS
# =============================================================================
class RunStats:
    """Track subcommand execution statistics"""

    def __init__(self, command: str):
        self.command = command
        self.start_time = time.time()
        self.end_time = None
        self.success = False
        self.exit_code = EXIT_FAILED
        self.outputs = []
        self.metrics = {}
        self.errors = []

    def finish(self, exit_code: int) -> int:
        self.end_time = time.time()
        self.exit_code = exit_code
        self.success = exit_code == EXIT_OK
        return exit_code

    def log_summary(self, logger: logging.Logger) -> None:
        """Log execution summary"""
        duration = (self.end_time or time.time()) - self.start_time

        logger.info("=" * 70)
        logger.info(f"PATCHFIT {self.command.upper()} SUMMARY")
        logger.info("=" * 70)
        logger.info(f"Execution time: {duration:.2f} seconds")
        logger.info(f"Status: {'SUCCESS' if self.success else 'FAILED'} (exit code {self.exit_code})")
        for name, value in self.metrics.items():
            logger.info(f"{name}: {value}")
        for path in self.outputs:
            logger.info(f"Wrote {path}")

        if self.errors:
            logger.error("Errors encountered:")
            for error in self.errors:
                logger.error(f"  - {error}")

        logger.info("=" * 70)


# =============================================================================
# SUBCOMMANDS
# =============================================================================
def _out_dir(args: argparse.Namespace, default_name: str) -> str:
    return args.out or os.path.join(config.RESULTS_DIR, default_name)


def cmd_fit(args: argparse.Namespace, run: RunConfig, stats: RunStats) -> int:
    """Fit a template to a mesh; exit 2 when the loss became non-finite."""
    template = load_template(args.template)
    target = load_obj(args.mesh)
    out_dir = _out_dir(args, 'fit')
    os.makedirs(out_dir, exist_ok=True)
    self_clf, pair_clf = load_fit_classifiers(run.fit)
    stats.outputs.append(write_effective_config(run, out_dir))

    result = fit_template(template, target, run.fit, self_clf, pair_clf)
    exported = export_fit(result, template, os.path.join(out_dir, args.prefix), tess_n=args.tess)
    stats.outputs.extend([exported['template'], exported['obj']])
    stats.outputs.append(write_history(result.history, os.path.join(out_dir, 'history.tsv')))

    stats.metrics.update({
        'Status': result.status,
        'Iterations run': result.iterations_run,
        'Best iteration': result.best_iteration,
        'Surface chamfer (fit frame)': f"{result.surface_chamfer:.6g}",
    })
    if result.final_breakdown is not None:
        stats.metrics['Final total loss'] = f"{result.final_breakdown.total:.6g}"
    return EXIT_DIVERGED if result.status == STATUS_DIVERGED else EXIT_OK


def cmd_gen_intersect_data(args: argparse.Namespace, run: RunConfig, stats: RunStats) -> int:
    """Generate a balanced intersection dataset with the exact oracle."""
    ds_cfg = run.dataset
    output = args.output or os.path.join(_out_dir(args, 'datasets'), f"intersect_{ds_cfg.kind}.cxds")
    dataset = generate_dataset(ds_cfg.kind, ds_cfg.count, run.run.seed, ds_cfg.resolution, run.run.threads,
                               ds_cfg.chunk_size)
    save_dataset(dataset, output)
    stats.outputs.extend([output, f"{output}.json"])
    stats.metrics.update({
        'Samples': len(dataset),
        'Raw draws': dataset.metadata['raw_draws'],
        'Raw positive prior': f"{dataset.metadata['raw_prior']:.4f}",
    })
    return EXIT_OK


def cmd_train_mlp(args: argparse.Namespace, run: RunConfig, stats: RunStats) -> int:
    """Train an intersection classifier on a dataset file."""
    dataset = load_dataset(args.dataset)
    tr = run.train
    output = args.output or os.path.join(_out_dir(args, 'classifiers'), f"{dataset.kind}.cxml")
    try:
        clf, report = mlp_train(dataset, tr.epochs, run.run.seed, tr.batch_size, tr.lr, tr.keep_prob,
                                tr.hidden_widths, tr.holdout, tr.augment)
    except TrainingDivergedError as e:
        stats.errors.append(str(e))
        logger.error(str(e))
        return EXIT_DIVERGED
    save_classifier(clf, output)
    stats.outputs.append(output)

    report_path = f"{output}.report.json"
    evaluation = evaluate_classifier(clf, dataset, augment=True, seed=run.run.seed)
    save_json_report({
        'kind': report.kind,
        'train_size': report.train_size,
        'holdout_size': report.holdout_size,
        'train_accuracy': report.train_accuracy,
        'holdout_accuracy': report.holdout_accuracy,
        'degenerate': report.degenerate,
        'augmented_accuracy': evaluation['accuracy'],
        'history': report.history,
    }, report_path)
    stats.outputs.append(report_path)
    stats.metrics.update({
        'Train accuracy': f"{report.train_accuracy:.4f}",
        'Held-out accuracy': f"{report.holdout_accuracy:.4f}",
    })
    return EXIT_OK


def cmd_augment(args: argparse.Namespace, run: RunConfig, stats: RunStats) -> int:
    """Augment and rasterize a directory of drawings."""
    out_dir = _out_dir(args, 'sketches')
    rows = batch_augment(args.input, out_dir, run.augment, run.render.widths, run.render.copies, run.run.seed,
                         run.render.out_size, run.run.threads, config.TEXTURE_COMMAND)
    stats.outputs.append(write_manifest(rows, os.path.join(out_dir, 'manifest.tsv')))
    stats.outputs.append(write_effective_config(run, out_dir))
    stats.metrics['Bitmaps written'] = len(rows)
    return EXIT_OK


def cmd_tessellate(args: argparse.Namespace, run: RunConfig, stats: RunStats) -> int:
    """Write a welded OBJ tessellation of a template and audit its edges."""
    template = load_template(args.template)
    mesh = tessellate_collection(instantiate(template, template.points), args.n)
    output = args.output or os.path.join(_out_dir(args, 'meshes'), f"{template.name}_n{args.n}.obj")
    save_obj(mesh, output)
    audit = edge_manifold_audit(mesh)
    stats.outputs.append(output)
    stats.metrics.update({
        'Vertices': len(mesh.vertices),
        'Triangles': len(mesh.faces),
        'Watertight': audit.watertight,
    })
    if not audit.watertight:
        logger.warning(f"Tessellation is not watertight: {audit.boundary_edges} boundary edges, "
                       f"{audit.nonmanifold_edges} non-manifold edges")
    return EXIT_OK


def cmd_eval_loss(args: argparse.Namespace, run: RunConfig, stats: RunStats) -> int:
    """Print the loss breakdown of a template instance against a mesh."""
    template = load_template(args.template)
    target = load_obj(args.mesh)
    fit_cfg = run.fit
    fit_cfg.validate()
    transform = template_transform(template, target, fit_cfg.normalize_target)
    target_fit = target.transformed(transform.scale, transform.translation)
    if args.instance:
        instance = load_template(args.instance)
        points = transform.apply(instance.points)
    else:
        points = template.points.copy()
    pc = instantiate(template, points)
    self_clf, pair_clf = load_fit_classifiers(fit_cfg)

    target_seed, _ = np.random.SeedSequence(fit_cfg.seed).spawn(2)
    samples = sample_surface(target_fit, fit_cfg.target_samples, target_seed)
    breakdown = total_loss(pc, build_index(samples), samples, template, fit_cfg.weights,
                           fit_cfg.schedule.at(args.decay_t), fit_cfg.patch_samples, [fit_cfg.seed, 0],
                           self_clf, pair_clf, fit_cfg.chamfer_distance, fit_cfg.normalization,
                           fit_cfg.include_adjacent_pairs)
    print(format_breakdown(breakdown))
    stats.metrics['Total loss'] = f"{breakdown.total:.9g}"
    return EXIT_OK


def cmd_build_template(args: argparse.Namespace, run: RunConfig, stats: RunStats) -> int:
    """Write the built-in cube template."""
    template = build_cube_template(args.side)
    output = args.output or os.path.join(config.RESULTS_DIR, 'cube_template.json')
    save_template(template, output)
    stats.outputs.append(output)
    stats.metrics['Patches'] = template.n_patches
    return EXIT_OK


def cmd_score_interp(args: argparse.Namespace, run: RunConfig, stats: RunStats) -> int:
    """Self-intersection classifier scores from a flat patch to a folded one."""
    clf = load_classifier(args.classifier)
    start = load_template(args.start).points if args.start else flat_patch_points()
    end = load_template(args.end).points if args.end else folded_patch_points()
    ts, scores, rho = interpolation_scores(clf, start, end, args.steps)
    out_dir = _out_dir(args, 'interp')
    os.makedirs(out_dir, exist_ok=True)
    output = os.path.join(out_dir, 'interp_scores.tsv')
    pd.DataFrame({'t': ts, 'score': scores}).to_csv(output, sep='\t', index=False, float_format='%.9g')
    stats.outputs.append(output)
    stats.metrics['Spearman rho'] = f"{rho:.4f}"
    return EXIT_OK


COMMANDS = {
    'fit': cmd_fit,
    'gen-intersect-data': cmd_gen_intersect_data,
    'train-mlp': cmd_train_mlp,
    'augment': cmd_augment,
    'tessellate': cmd_tessellate,
    'eval-loss': cmd_eval_loss,
    'build-template': cmd_build_template,
    'score-interp': cmd_score_interp,
}


# =============================================================================
# ARGUMENT PARSING
# =============================================================================
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None, metavar="PATH",
                        help="JSON run configuration (sections: run, fit, augment, render, dataset, train)")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.FIELD=VALUE",
                        help="Override one configuration field; repeatable")
    common.add_argument("--seed", type=int, default=None, help="Run seed (overrides run.seed and fit.seed)")
    common.add_argument("--threads", type=int, default=None,
                        help=f"Worker cap (default: logical cores, currently {config.THREADS})")
    common.add_argument("--out", type=str, default=None, metavar="DIR",
                        help=f"Output directory (default: under {config.RESULTS_DIR}/)")
    common.add_argument("--log-level", type=str, default=config.LOG_LEVEL.upper(),
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                        help="Logging verbosity level (default: INFO)")

    epilog = (
        "Configuration fields and defaults:\n"
        f"{describe_fields()}\n\n"
        "Every field can also be set through PATCHFIT_<SECTION>__<FIELD>, e.g.\n"
        "  PATCHFIT_FIT__ITERATIONS=500\n\n"
        "Examples:\n"
        "  python main_pipeline.py build-template --output results/cube.json\n"
        "  python main_pipeline.py fit --template results/cube.json --mesh cube.obj --seed 1\n"
        "  python main_pipeline.py gen-intersect-data --kind pair --count 1000 --threads 8\n"
        "  python main_pipeline.py augment --input drawings --set augment.split_prob=0.5\n"
    )
    parser = argparse.ArgumentParser(
        description="Coons-patch template fitting toolkit",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=epilog,
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, help_text):
        return sub.add_parser(name, parents=[common], help=help_text, epilog=epilog,
                              formatter_class=argparse.RawDescriptionHelpFormatter)

    # ========== Fitting ==========
    p = add("fit", "Fit a template to a triangle mesh")
    p.add_argument("--template", required=True, help="Template JSON file")
    p.add_argument("--mesh", required=True, help="Target OBJ mesh")
    p.add_argument("--prefix", default="fit", help="Output file prefix inside --out (default: fit)")
    p.add_argument("--tess", type=int, default=16, help="Tessellation resolution of the OBJ export (default: 16)")

    p = add("eval-loss", "Print the loss breakdown of a template instance against a mesh")
    p.add_argument("--template", required=True, help="Template JSON file (topology and rest pose)")
    p.add_argument("--mesh", required=True, help="Target OBJ mesh")
    p.add_argument("--instance", default=None,
                   help="Template JSON whose points (target frame) are evaluated; default: the rest pose")
    p.add_argument("--decay-t", type=int, default=0, help="Template-loss decay counter (default: 0)")

    # ========== Templates and meshes ==========
    p = add("build-template", "Write the built-in cube template")
    p.add_argument("--side", type=float, default=1.0, help="Cube side length (default: 1.0)")
    p.add_argument("--output", default=None, help="Output template JSON")

    p = add("tessellate", "Write a welded OBJ tessellation of a template")
    p.add_argument("--template", required=True, help="Template JSON file")
    p.add_argument("--n", type=int, default=16, help="Grid resolution per patch (default: 16)")
    p.add_argument("--output", default=None, help="Output OBJ path")

    # ========== Intersection classifiers ==========
    p = add("gen-intersect-data", "Generate a balanced intersection dataset")
    p.add_argument("--kind", choices=["self", "pair"], default=None, help="Shortcut for dataset.kind")
    p.add_argument("--count", type=int, default=None, help="Shortcut for dataset.count")
    p.add_argument("--output", default=None, help="Output dataset file")

    p = add("train-mlp", "Train an intersection classifier")
    p.add_argument("--dataset", required=True, help="Dataset file from gen-intersect-data")
    p.add_argument("--output", default=None, help="Output classifier file")

    p = add("score-interp", "Classifier scores along a patch interpolation")
    p.add_argument("--classifier", required=True, help="Self-intersection classifier file")
    p.add_argument("--start", default=None, help="Template JSON with a single patch (default: flat square)")
    p.add_argument("--end", default=None, help="Template JSON with a single patch (default: folded patch)")
    p.add_argument("--steps", type=int, default=50, help="Interpolation steps (default: 50)")

    # ========== Sketch augmentation ==========
    p = add("augment", "Augment and rasterize contour drawings")
    p.add_argument("--input", required=True, help="Directory of .json / .svg drawings")

    return parser


def _shortcut_overrides(args: argparse.Namespace) -> List[str]:
    overrides = list(args.set)
    if getattr(args, 'kind', None):
        overrides.append(f"dataset.kind={args.kind}")
    if getattr(args, 'count', None) is not None:
        overrides.append(f"dataset.count={args.count}")
    return overrides


def run_command(argv: Optional[List[str]] = None) -> int:
    """
    Parse arguments, run one subcommand and return its exit code.

    Exit codes: 0 success, 1 invalid input or I/O failure, 2 numerical divergence.
    """
    args = build_parser().parse_args(argv)
    logger = setup_logging(args.log_level)
    stats = RunStats(args.command)
    try:
        config.validate_execution_config()
        run = resolve_run_config(args.config, _shortcut_overrides(args), args.seed, args.threads)
        code = COMMANDS[args.command](args, run, stats)
    except (ValueError, FileNotFoundError, OSError) as e:
        logger.error(f"{args.command} failed: {e}")
        stats.errors.append(str(e))
        code = EXIT_FAILED
    except Exception as e:
        logger.error(f"{args.command} failed unexpectedly: {e}\n{traceback.format_exc()}")
        stats.errors.append(str(e))
        code = EXIT_FAILED
    stats.finish(code)
    stats.log_summary(logger)
    return code


def main() -> None:
    """Main entry point for command-line execution."""
    sys.exit(run_command())


if __name__ == "__main__":
    main()
