#!/usr/bin/env python3
"""
Sketch Augmentation Module

Stochastic augmentation of vectorized contour drawings and their rasterization into
sketch-like grayscale bitmaps at several stroke widths.

Key Components:
- augment_contours: random splits (gap at a uniform arc-length position), endpoint
  truncations and removal of short curves, deterministic per seed
- rasterize: anti-aliased round-capped polyline stroking, dark ink on white, fitted
  into a square output with padding (Pillow)
- load_drawing / save_drawing (JSON) and import_svg (path, polyline, polygon, line)
- batch_augment: per-input, per-copy, per-width PNG bitmaps plus a TSV provenance
  manifest; replay_manifest_row reproduces a single bitmap
- Optional texture hook: an external command run on every written PNG

Usage:
    from augment import AugmentParams, batch_augment
    manifest = batch_augment('drawings/', 'results/sketches', AugmentParams(), widths=[1, 2, 3],
                             count=5, seed=0)
"""

import json
import logging
import os
import re
import shlex
import subprocess
import xml.etree.ElementTree as etree
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

# Canvas size the min_length threshold is expressed for
REFERENCE_CANVAS = 512.0

# Maximum deviation allowed when flattening curved SVG segments (pixels)
FLATTEN_TOLERANCE = 0.25

TRUNCATION_MODES = ('endpoint', 'curve')
DRAWING_SUFFIXES = ('.json', '.svg')

FLOAT_RE = re.compile(r"[-+]?(?:(?:\d*\.\d+)|(?:\d+\.?))(?:[Ee][+-]?\d+)?")
PATH_TOKEN_RE = re.compile(r"[MmZzLlHhVvCcSsQqTtAa]|" + FLOAT_RE.pattern)


# =============================================================================
# DOMAIN TYPES
# =============================================================================

@dataclass
class VectorDrawing:
    """Open polylines (k, 2) in pixel coordinates on a width x height canvas."""
    curves: list
    width: int
    height: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"Canvas must be at least 1x1, got {self.width}x{self.height}")
        cleaned = []
        for k, curve in enumerate(self.curves):
            pts = np.asarray(curve, dtype=float).reshape(-1, 2)
            if len(pts) < 2:
                raise ValueError(f"Curve {k} has {len(pts)} point(s); curves need at least 2")
            pts = np.clip(pts, 0.0, [float(self.width), float(self.height)])
            cleaned.append(pts)
        self.curves = cleaned

    @property
    def total_length(self):
        return float(sum(arc_length(c) for c in self.curves))


@dataclass(frozen=True)
class AugmentParams:
    split_prob: float = 0.3
    max_splits: int = 10
    trunc_prob: float = 0.2
    trunc_min: float = 0.02
    trunc_max: float = 0.10
    min_length: float = 8.0
    gap: float = 4.0
    trunc_mode: str = 'endpoint'

    def __post_init__(self):
        problems = []
        for name in ('split_prob', 'trunc_prob'):
            if not 0.0 <= getattr(self, name) <= 1.0:
                problems.append(f"{name} must lie in [0, 1]")
        if self.max_splits < 0:
            problems.append("max_splits must be >= 0")
        if not 0.0 <= self.trunc_min <= self.trunc_max < 0.5:
            problems.append("truncation range must satisfy 0 <= trunc_min <= trunc_max < 0.5")
        if self.min_length < 0 or self.gap < 0:
            problems.append("min_length and gap must be >= 0")
        if self.trunc_mode not in TRUNCATION_MODES:
            problems.append(f"trunc_mode must be one of {TRUNCATION_MODES}")
        if problems:
            raise ValueError("Invalid augmentation parameters: " + "; ".join(problems))


@dataclass
class AugmentStats:
    splits: int = 0
    endpoints_considered: int = 0
    endpoints_truncated: int = 0
    removed: int = 0
    gap_length: float = 0.0
    truncated_length: float = 0.0
    removed_length: float = 0.0
    empty: bool = False


# =============================================================================
# POLYLINE GEOMETRY
# =============================================================================

def _cumulative(poly):
    seg = np.linalg.norm(np.diff(poly, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(seg)])


def arc_length(poly):
    return float(_cumulative(poly)[-1])


def _point_at(poly, cum, s):
    k = int(np.clip(np.searchsorted(cum, s, side='right') - 1, 0, len(poly) - 2))
    span = cum[k + 1] - cum[k]
    u = 0.0 if span <= 0 else (s - cum[k]) / span
    return poly[k] + u * (poly[k + 1] - poly[k])


def sub_polyline(poly, start, stop):
    """Portion of a polyline between arc lengths start < stop, or None when empty."""
    cum = _cumulative(poly)
    start = max(0.0, start)
    stop = min(cum[-1], stop)
    if stop - start <= 0:
        return None
    inner = poly[(cum > start) & (cum < stop)]
    return np.vstack([_point_at(poly, cum, start), inner, _point_at(poly, cum, stop)])


def split_curve(poly, position, gap):
    """
    Split a polyline at a fraction of its arc length, leaving a gap of the given width.

    Returns:
        tuple: (left, right); a side is None when the gap consumes it
    """
    length = arc_length(poly)
    cut = position * length
    return sub_polyline(poly, 0.0, cut - gap / 2.0), sub_polyline(poly, cut + gap / 2.0, length)


# =============================================================================
# AUGMENTATION
# =============================================================================

def _length(poly):
    return 0.0 if poly is None else arc_length(poly)


def augment_contours_tracked(drawing, params, seed):
    """
    Augment a drawing and report what was done.

    Steps, all driven by numpy.random.default_rng(seed):
    1. max_splits independent trials; each succeeds with split_prob and splits a
       uniformly chosen curve at a uniform arc-length position, leaving a gap.
    2. Truncation: per endpoint (or per curve, both endpoints) with trunc_prob, by a
       uniform fraction in [trunc_min, trunc_max] of the curve's length.
    3. Curves shorter than min_length (scaled from a 512 px canvas) are removed.

    Returns:
        tuple: (VectorDrawing, AugmentStats)
    """
    rng = np.random.default_rng(seed)
    stats = AugmentStats()
    curves = [c.copy() for c in drawing.curves]

    for _ in range(params.max_splits):
        if rng.random() >= params.split_prob or not curves:
            continue
        k = int(rng.integers(len(curves)))
        position = rng.random()
        original = arc_length(curves[k])
        left, right = split_curve(curves[k], position, params.gap)
        stats.splits += 1
        stats.gap_length += original - _length(left) - _length(right)
        pieces = [p for p in (left, right) if p is not None]
        stats.removed += 2 - len(pieces)
        curves[k:k + 1] = pieces

    truncated = []
    for curve in curves:
        length = arc_length(curve)
        if params.trunc_mode == 'endpoint':
            hits = [rng.random() < params.trunc_prob, rng.random() < params.trunc_prob]
        else:
            both = rng.random() < params.trunc_prob
            hits = [both, both]
        cuts = [rng.uniform(params.trunc_min, params.trunc_max) * length if hit else 0.0 for hit in hits]
        stats.endpoints_considered += 2
        stats.endpoints_truncated += sum(hits)
        if any(hits):
            piece = sub_polyline(curve, cuts[0], length - cuts[1])
            stats.truncated_length += length - _length(piece)
            if piece is None:
                stats.removed += 1
                continue
            curve = piece
        truncated.append(curve)

    threshold = params.min_length * max(drawing.width, drawing.height) / REFERENCE_CANVAS
    kept = []
    for curve in truncated:
        length = arc_length(curve)
        if length < threshold:
            stats.removed += 1
            stats.removed_length += length
        else:
            kept.append(curve)

    if not kept:
        stats.empty = True
        logger.warning("Augmentation removed every curve; returning an empty drawing")
    return VectorDrawing(kept, drawing.width, drawing.height), stats


def augment_contours(drawing, params, seed):
    """Augmented copy of a drawing (see augment_contours_tracked)."""
    return augment_contours_tracked(drawing, params, seed)[0]


# =============================================================================
# RASTERIZATION
# =============================================================================

def _stroke_segment(ink, p0, p1, half):
    h, w = ink.shape
    reach = half + 1.0
    x0 = max(int(np.floor(min(p0[0], p1[0]) - reach)), 0)
    x1 = min(int(np.ceil(max(p0[0], p1[0]) + reach)), w)
    y0 = max(int(np.floor(min(p0[1], p1[1]) - reach)), 0)
    y1 = min(int(np.ceil(max(p0[1], p1[1]) + reach)), h)
    if x0 >= x1 or y0 >= y1:
        return
    xs = np.arange(x0, x1) + 0.5
    ys = np.arange(y0, y1) + 0.5
    px, py = np.meshgrid(xs, ys)
    d = p1 - p0
    dd = float(d @ d)
    if dd > 0:
        u = np.clip(((px - p0[0]) * d[0] + (py - p0[1]) * d[1]) / dd, 0.0, 1.0)
    else:
        u = np.zeros_like(px)
    dist = np.hypot(px - (p0[0] + u * d[0]), py - (p0[1] + u * d[1]))
    coverage = np.clip(half + 0.5 - dist, 0.0, 1.0)
    np.maximum(ink[y0:y1, x0:x1], coverage, out=ink[y0:y1, x0:x1])


def rasterize(drawing, stroke_width, out_size):
    """
    Stroke every curve with round caps and return an 8-bit grayscale image.

    The canvas is rendered at its own resolution, then fitted into an out_size square
    preserving aspect ratio, padded with white.

    Returns:
        PIL.Image.Image in mode 'L'
    """
    if stroke_width < 1:
        raise ValueError(f"Stroke width must be >= 1, got {stroke_width}")
    if out_size < 16:
        raise ValueError(f"Output size must be >= 16, got {out_size}")
    ink = np.zeros((drawing.height, drawing.width))
    half = stroke_width / 2.0
    for curve in drawing.curves:
        for p0, p1 in zip(curve[:-1], curve[1:]):
            _stroke_segment(ink, p0, p1, half)
    image = Image.fromarray(np.round(255.0 * (1.0 - ink)).astype(np.uint8), mode='L')

    if drawing.width == out_size and drawing.height == out_size:
        return image
    scale = out_size / max(drawing.width, drawing.height)
    size = (max(1, round(drawing.width * scale)), max(1, round(drawing.height * scale)))
    resized = image.resize(size, Image.LANCZOS)
    canvas = Image.new('L', (out_size, out_size), 255)
    canvas.paste(resized, ((out_size - size[0]) // 2, (out_size - size[1]) // 2))
    return canvas


def ink_coverage(image):
    """Total ink of a grayscale image in pixel units (white = 0, black = 1)."""
    return float((255.0 - np.asarray(image, dtype=float)).sum() / 255.0)


# =============================================================================
# DRAWING FILES
# =============================================================================

def save_drawing(drawing, path):
    doc = {'canvas': [drawing.width, drawing.height],
           'curves': [[[float(x), float(y)] for x, y in c] for c in drawing.curves]}
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'w') as f:
        json.dump(doc, f)


def load_drawing(path):
    """
    Read a drawing from JSON ({"canvas": [w, h], "curves": [[[x, y], ...], ...]}) or SVG.

    Raises:
        FileNotFoundError: missing file
        ValueError: malformed document
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"Drawing file not found: {path}")
    if path.lower().endswith('.svg'):
        return import_svg(path)
    with open(path, 'r') as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ValueError(f"Drawing file {path} is not valid JSON: {e}") from e
    if not isinstance(doc, dict) or 'canvas' not in doc or 'curves' not in doc:
        raise ValueError(f"Drawing file {path} needs 'canvas' and 'curves' fields")
    width, height = (int(v) for v in doc['canvas'])
    return VectorDrawing([np.array(c, dtype=float) for c in doc['curves']], width, height)


def _bezier3_flatten(points, tolerance=FLATTEN_TOLERANCE):
    """
    Flatten a cubic (4, 2) into polyline vertices after its start point.

    Subdivides at t = 0.5 until the deviation bound
    1/16 (max(ux^2, vx^2) + max(uy^2, vy^2)) falls below tolerance^2, with
    u = 3 b1 - 2 b0 - b3 and v = 3 b2 - b0 - 2 b3.
    """
    out = []
    stack = [np.asarray(points, dtype=float)]
    limit = 16.0 * tolerance * tolerance
    while stack:
        b = stack.pop()
        u = 3.0 * b[1] - 2.0 * b[0] - b[3]
        v = 3.0 * b[2] - b[0] - 2.0 * b[3]
        if np.maximum(u * u, v * v).sum() <= limit:
            out.append(b[3])
            continue
        ab, bc, cd = (b[0] + b[1]) / 2, (b[1] + b[2]) / 2, (b[2] + b[3]) / 2
        abc, bcd = (ab + bc) / 2, (bc + cd) / 2
        mid = (abc + bcd) / 2
        stack.append(np.array([mid, bcd, cd, b[3]]))
        stack.append(np.array([b[0], ab, abc, mid]))
    return out


def parse_path(d):
    """
    Polylines from an SVG path string (M L H V C S Q T Z, absolute and relative).

    Arc segments are not supported: the pen moves to the arc endpoint and a warning is
    logged.
    """
    tokens = PATH_TOKEN_RE.findall(d)
    polylines = []
    current = []
    pos = np.zeros(2)
    start = np.zeros(2)
    last_cubic = None
    last_quad = None
    cmd = None
    i = 0

    def numbers(count):
        nonlocal i
        vals = tokens[i:i + count]
        if len(vals) < count or any(v.isalpha() for v in vals):
            raise ValueError(f"Path command '{cmd}' is missing arguments")
        i += count
        return [float(v) for v in vals]

    def flush():
        nonlocal current
        if len(current) >= 2:
            polylines.append(np.array(current))
        current = []

    while i < len(tokens):
        if tokens[i].isalpha():
            cmd = tokens[i]
            i += 1
            if cmd in 'Zz':
                if current:
                    current.append(start.copy())
                flush()
                pos = start.copy()
                last_cubic = last_quad = None
                continue
        elif cmd is None:
            raise ValueError("Path data must start with a command")
        relative = cmd.islower()
        base = pos if relative else np.zeros(2)
        op = cmd.upper()

        if op == 'M':
            flush()
            pos = base + numbers(2)
            start = pos.copy()
            current = [pos.copy()]
            cmd = 'l' if relative else 'L'
            last_cubic = last_quad = None
            continue
        if not current:
            current = [pos.copy()]
        if op == 'L':
            pos = base + numbers(2)
            current.append(pos.copy())
            last_cubic = last_quad = None
        elif op == 'H':
            x = numbers(1)[0]
            pos = np.array([pos[0] + x if relative else x, pos[1]])
            current.append(pos.copy())
            last_cubic = last_quad = None
        elif op == 'V':
            y = numbers(1)[0]
            pos = np.array([pos[0], pos[1] + y if relative else y])
            current.append(pos.copy())
            last_cubic = last_quad = None
        elif op in 'CS':
            if op == 'C':
                c1 = base + numbers(2)
            else:
                c1 = 2 * pos - last_cubic if last_cubic is not None else pos.copy()
            c2 = base + numbers(2)
            end = base + numbers(2)
            current.extend(_bezier3_flatten([pos, c1, c2, end]))
            last_cubic, last_quad = c2, None
            pos = end
        elif op in 'QT':
            if op == 'Q':
                q = base + numbers(2)
            else:
                q = 2 * pos - last_quad if last_quad is not None else pos.copy()
            end = base + numbers(2)
            # quadratic as an exact cubic
            current.extend(_bezier3_flatten([pos, pos + 2.0 / 3.0 * (q - pos), end + 2.0 / 3.0 * (q - end), end]))
            last_quad, last_cubic = q, None
            pos = end
        elif op == 'A':
            args = numbers(7)
            logger.warning("SVG arc segment skipped")
            flush()
            pos = base + args[5:7]
            current = [pos.copy()]
            last_cubic = last_quad = None
        else:
            raise ValueError(f"Unsupported path command '{cmd}'")
    flush()
    return polylines


def _points_attr(value):
    vals = [float(v) for v in FLOAT_RE.findall(value or '')]
    return np.array(vals[:len(vals) // 2 * 2]).reshape(-1, 2)


def _length_attr(value):
    if value is None:
        return None
    match = FLOAT_RE.match(value.strip())
    return float(match.group()) if match else None


def import_svg(path):
    """
    Minimal SVG importer for contour drawings made of paths and polylines.

    Reads path, polyline, polygon and line elements; transforms and styles are ignored.
    The canvas comes from width/height, else from the viewBox.
    """
    try:
        root = etree.parse(path).getroot()
    except etree.ParseError as e:
        raise ValueError(f"SVG file {path} could not be parsed: {e}") from e
    width, height = _length_attr(root.get('width')), _length_attr(root.get('height'))
    if (width is None or height is None) and root.get('viewBox'):
        vb = [float(v) for v in FLOAT_RE.findall(root.get('viewBox'))]
        if len(vb) == 4:
            width, height = vb[2], vb[3]
    if not width or not height:
        raise ValueError(f"SVG file {path} has no usable width/height or viewBox")

    curves = []
    for elem in root.iter():
        tag = elem.tag.rsplit('}', 1)[-1]
        if tag == 'path':
            curves.extend(parse_path(elem.get('d', '')))
        elif tag in ('polyline', 'polygon'):
            pts = _points_attr(elem.get('points'))
            if tag == 'polygon' and len(pts):
                pts = np.vstack([pts, pts[:1]])
            if len(pts) >= 2:
                curves.append(pts)
        elif tag == 'line':
            pts = np.array([[float(elem.get('x1', 0)), float(elem.get('y1', 0))],
                            [float(elem.get('x2', 0)), float(elem.get('y2', 0))]])
            curves.append(pts)
    logger.debug(f"Imported {len(curves)} curves from {path}")
    return VectorDrawing(curves, int(np.ceil(width)), int(np.ceil(height)))


# =============================================================================
# BATCH AUGMENTATION
# =============================================================================

def item_seed(seed, file_index, copy):
    """Integer seed of one augmented copy."""
    return int(np.random.SeedSequence([seed, file_index, copy]).generate_state(1, dtype=np.uint64)[0])


def output_name(source, copy, width):
    """Bitmap file name <stem>_<extension>_<copy>_w<width>.png."""
    stem, ext = os.path.splitext(os.path.basename(source))
    return f"{stem}_{ext.lstrip('.').lower()}_{copy:03d}_w{width}.png"


def run_texture_hook(command, png_path):
    """Run '<command> <png path>'; failures are logged, never raised."""
    try:
        proc = subprocess.run([*shlex.split(command), png_path], capture_output=True, text=True, check=False)
    except OSError as e:
        logger.warning(f"Texture hook could not start for {png_path}: {e}")
        return False
    if proc.returncode != 0:
        logger.warning(f"Texture hook exited with {proc.returncode} for {png_path}: {proc.stderr.strip()}")
        return False
    return True


@dataclass
class _InputJob:
    path: str
    file_index: int
    params: AugmentParams
    widths: list
    count: int
    seed: int
    out_size: int
    out_dir: str
    texture_command: str = None


def _process_input(job):
    try:
        drawing = load_drawing(job.path)
    except (ValueError, OSError) as e:
        logger.warning(f"Skipping unreadable input {job.path}: {e}")
        return []
    params_json = json.dumps(asdict(job.params), sort_keys=True)
    rows = []
    for copy in range(job.count):
        seed = item_seed(job.seed, job.file_index, copy)
        augmented, stats = augment_contours_tracked(drawing, job.params, seed)
        for width in job.widths:
            name = output_name(job.path, copy, width)
            out_path = os.path.join(job.out_dir, name)
            rasterize(augmented, width, job.out_size).save(out_path, format='PNG')
            if job.texture_command:
                run_texture_hook(job.texture_command, out_path)
            rows.append({
                'output': name,
                'source': os.path.basename(job.path),
                'file_index': job.file_index,
                'copy': copy,
                'width': width,
                'item_seed': seed,
                'out_size': job.out_size,
                'splits': stats.splits,
                'removed': stats.removed,
                'params': params_json,
            })
    return rows


def list_drawings(input_dir):
    """Drawing files of a directory in sorted order (their position is the file index)."""
    if not os.path.isdir(input_dir):
        raise FileNotFoundError(f"Input directory not found: {input_dir}")
    return sorted(os.path.join(input_dir, f) for f in os.listdir(input_dir)
                  if f.lower().endswith(DRAWING_SUFFIXES))


def batch_augment(input_dir, out_dir, params, widths, count, seed, out_size=256, threads=1, texture_command=None):
    """
    Augment and rasterize every drawing of a directory.

    Args:
        input_dir: Directory of .json / .svg drawings
        out_dir: Destination for PNG bitmaps
        params: AugmentParams
        widths: Stroke widths; each copy is rasterized once per width
        count: Augmented copies per input
        seed: Run seed; copy k of input i uses item_seed(seed, i, k)
        out_size: Square output size in pixels
        threads: Inputs processed concurrently
        texture_command: Optional external texture command

    Returns:
        list of manifest rows (dicts), in input order
    """
    if count < 1:
        raise ValueError(f"Copies per input must be >= 1, got {count}")
    if not widths:
        raise ValueError("At least one stroke width is required")
    os.makedirs(out_dir, exist_ok=True)
    jobs = [_InputJob(path, i, params, list(widths), count, seed, out_size, out_dir, texture_command)
            for i, path in enumerate(list_drawings(input_dir))]
    logger.info(f"Augmenting {len(jobs)} drawings x {count} copies x {len(widths)} widths")
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            results = list(executor.map(_process_input, jobs))
    else:
        results = [_process_input(job) for job in jobs]
    return [row for rows in results for row in rows]


def replay_manifest_row(row, input_dir):
    """Re-create the bitmap of one manifest row from its source drawing and seed."""
    params = AugmentParams(**json.loads(row['params']))
    drawing = load_drawing(os.path.join(input_dir, row['source']))
    augmented = augment_contours(drawing, params, int(row['item_seed']))
    return rasterize(augmented, int(row['width']), int(row['out_size']))
