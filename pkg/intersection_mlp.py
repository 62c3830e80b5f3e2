#!/usr/bin/env python3
"""
Intersection Classifier Module

Fully connected binary classifiers that score how strongly one Coons patch (36 inputs)
or an ordered pair of patches (72 inputs) intersects, trained on oracle-labelled
datasets and used, frozen, as differentiable penalties during fitting.

Key Features:
- Architecture: input -> 1024 -> 1024 -> 1024 -> 512 -> 256 -> 128 -> 1, rectifier
  hidden layers, logistic output; He initialization
- Training: binary cross-entropy on logits, Adam (step 1e-4), inverted dropout with
  keep probability 0.85 on hidden layers (training only), random isometry
  augmentation per batch, deterministic 90/10 held-out split
- Inference: deterministic scores with exact input gradients on demand
- CXML classifier files (see file_formats/schema_classifier.md)

Usage:
    from intersection_mlp import mlp_train, mlp_predict, save_classifier
    clf, report = mlp_train(dataset, epochs=50, seed=0)
    scores = mlp_predict(clf, coords)
"""

import logging
import os
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import spearmanr

from intersection import DIMS, augment_batch, normalize_unit_cube, severity, split_dataset
from optim_utils import Adam

logger = logging.getLogger(__name__)

DEFAULT_HIDDEN = (1024, 1024, 1024, 512, 256, 128)
KEEP_PROB = 0.85

# Output bias of a classifier trained on a single-class dataset
DEGENERATE_BIAS = 10.0

CLASSIFIER_MAGIC = b'CXML'
_COUNT = struct.Struct('<I')
# Header flag bits
FLAG_DEGENERATE = 0x1


class ClassifierFormatError(ValueError):
    """Malformed classifier file."""


class TrainingDivergedError(RuntimeError):
    """Training loss became NaN or infinite."""


# =============================================================================
# MODEL
# =============================================================================

@dataclass
class MLPClassifier:
    """Weights (in, out) and biases (out,) per layer; the last layer has one output."""
    weights: list
    biases: list
    degenerate: bool = False

    @property
    def widths(self):
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def input_dim(self):
        return self.weights[0].shape[0]

    def parameters(self):
        params = {}
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            params[f"W{k}"] = w
            params[f"b{k}"] = b
        return params


def init_classifier(input_dim, hidden_widths=DEFAULT_HIDDEN, seed=0):
    """He-initialized classifier with zero biases."""
    rng = np.random.default_rng(seed)
    widths = [input_dim, *hidden_widths, 1]
    weights = [rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
               for fan_in, fan_out in zip(widths[:-1], widths[1:])]
    biases = [np.zeros(fan_out) for fan_out in widths[1:]]
    return MLPClassifier(weights, biases)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _forward(clf, X, rng=None, keep=1.0):
    """Logits (B,) plus the activations and dropout masks needed for backprop."""
    activations = [X]
    masks = []
    h = X
    last = len(clf.weights) - 1
    for k, (w, b) in enumerate(zip(clf.weights, clf.biases)):
        z = h @ w + b
        if k == last:
            return z[:, 0], activations, masks
        h = np.maximum(z, 0.0)
        if rng is not None and keep < 1.0:
            mask = (rng.random(h.shape) < keep) / keep
            h = h * mask
        else:
            mask = None
        masks.append(mask)
        activations.append(h)


def _backward(clf, activations, masks, g_logits, need_params=True):
    """Backpropagate dL/dlogits; returns (parameter grads dict, dL/dinput)."""
    grads = {}
    g = g_logits[:, None]
    for k in range(len(clf.weights) - 1, -1, -1):
        h_in = activations[k]
        if need_params:
            grads[f"W{k}"] = h_in.T @ g
            grads[f"b{k}"] = g.sum(axis=0)
        g = g @ clf.weights[k].T
        if k > 0:
            if masks[k - 1] is not None:
                g = g * masks[k - 1]
            g = g * (h_in > 0)
    return grads, g


def mlp_predict(clf, coords, with_grad=False):
    """
    Deterministic scores in [0, 1].

    Args:
        clf: MLPClassifier
        coords: (D,) or (B, D) unit-cube normalized inputs
        with_grad: Also return d score / d input

    Returns:
        scores, or (scores, gradients) with matching leading shape
    """
    coords = np.asarray(coords, dtype=float)
    single = coords.ndim == 1
    X = coords[None, :] if single else coords
    if X.shape[1] != clf.input_dim:
        raise ValueError(f"Classifier expects {clf.input_dim} inputs, got {X.shape[1]}")
    logits, activations, masks = _forward(clf, X)
    scores = _sigmoid(logits)
    if not with_grad:
        return scores[0] if single else scores
    _, g_in = _backward(clf, activations, masks, scores * (1.0 - scores), need_params=False)
    if single:
        return scores[0], g_in[0]
    return scores, g_in


# =============================================================================
# TRAINING
# =============================================================================

@dataclass
class TrainReport:
    kind: str
    train_size: int
    holdout_size: int
    train_accuracy: float = 0.0
    holdout_accuracy: float = 0.0
    degenerate: bool = False
    history: list = field(default_factory=list)


def _bce_with_logits(z, y):
    return float(np.mean(np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))))


def accuracy(clf, coords, labels):
    if len(labels) == 0:
        return 0.0
    return float(np.mean((mlp_predict(clf, coords) >= 0.5) == (labels == 1)))


def _degenerate_classifier(input_dim, hidden_widths, label):
    clf = init_classifier(input_dim, hidden_widths)
    for w, b in zip(clf.weights, clf.biases):
        w[...] = 0.0
        b[...] = 0.0
    clf.biases[-1][...] = DEGENERATE_BIAS if label else -DEGENERATE_BIAS
    clf.degenerate = True
    return clf


def mlp_train(dataset, epochs=50, seed=0, batch_size=256, lr=1e-4, keep_prob=KEEP_PROB,
              hidden_widths=DEFAULT_HIDDEN, holdout=0.1, augment=True):
    """
    Train a classifier on an IntersectionDataset.

    Returns:
        tuple: (MLPClassifier, TrainReport)

    Raises:
        TrainingDivergedError: if the batch loss becomes non-finite
    """
    if epochs < 0:
        raise ValueError(f"Epoch count must be >= 0, got {epochs}")
    train, held = split_dataset(dataset, holdout, seed)
    report = TrainReport(dataset.kind, len(train), len(held))

    if len(np.unique(dataset.labels)) < 2:
        label = int(dataset.labels[0])
        logger.warning(f"Dataset has a single class (label {label}); returning a constant classifier")
        clf = _degenerate_classifier(dataset.dim, hidden_widths, label)
        report.degenerate = True
        report.train_accuracy = accuracy(clf, train.coords, train.labels)
        report.holdout_accuracy = accuracy(clf, held.coords, held.labels)
        return clf, report

    seeds = np.random.SeedSequence(seed).spawn(3)
    clf = init_classifier(dataset.dim, hidden_widths, seeds[0])
    rng = np.random.default_rng(seeds[1])
    aug_rng = np.random.default_rng(seeds[2])
    opt = Adam(lr=lr)
    params = clf.parameters()
    y_all = train.labels.astype(float)

    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(train))
        losses = []
        for b, start in enumerate(range(0, len(order), batch_size)):
            idx = order[start:start + batch_size]
            X = train.coords[idx]
            if augment:
                X = augment_batch(X, dataset.kind, aug_rng)
            y = y_all[idx]
            logits, activations, masks = _forward(clf, X, rng, keep_prob)
            loss = _bce_with_logits(logits, y)
            if not np.isfinite(loss):
                largest = max(float(np.abs(w).max()) for w in clf.weights)
                raise TrainingDivergedError(
                    f"Training diverged at epoch {epoch}, batch {b}: loss={loss}, lr={lr}, "
                    f"max |weight|={largest:.3e}, logits range=[{np.nanmin(logits):.3e}, {np.nanmax(logits):.3e}]"
                )
            grads, _ = _backward(clf, activations, masks, (_sigmoid(logits) - y) / len(idx))
            opt.step(params, grads)
            losses.append(loss)

        train_acc = accuracy(clf, train.coords, train.labels)
        held_acc = accuracy(clf, held.coords, held.labels)
        report.history.append({'epoch': epoch, 'loss': float(np.mean(losses)), 'train_accuracy': train_acc,
                               'holdout_accuracy': held_acc})
        logger.info(f"Epoch {epoch}/{epochs}: loss={np.mean(losses):.4f} train_acc={train_acc:.4f} "
                    f"holdout_acc={held_acc:.4f}")

    report.train_accuracy = accuracy(clf, train.coords, train.labels)
    report.holdout_accuracy = accuracy(clf, held.coords, held.labels)
    return clf, report


# =============================================================================
# EVALUATION
# =============================================================================

def evaluate_classifier(clf, dataset, augment=False, seed=0, severity_resolution=None):
    """
    Accuracy and confusion counts on a dataset.

    With augment, every sample is first passed through a random isometry. With
    severity_resolution, the oracle's intersecting-pair counts are averaged over
    false negatives and true positives (logged, never asserted).
    """
    coords = dataset.coords
    if augment:
        coords = augment_batch(coords, dataset.kind, np.random.default_rng(seed))
    predicted = (mlp_predict(clf, coords) >= 0.5).astype(np.uint8)
    labels = dataset.labels
    result = {
        'accuracy': float(np.mean(predicted == labels)) if len(labels) else 0.0,
        'tp': int(((predicted == 1) & (labels == 1)).sum()),
        'tn': int(((predicted == 0) & (labels == 0)).sum()),
        'fp': int(((predicted == 1) & (labels == 0)).sum()),
        'fn': int(((predicted == 0) & (labels == 1)).sum()),
    }
    if severity_resolution:
        for name, mask in (('fn', (predicted == 0) & (labels == 1)), ('tp', (predicted == 1) & (labels == 1))):
            counts = [severity(c, dataset.kind, severity_resolution) for c in coords[mask]]
            result[f"mean_severity_{name}"] = float(np.mean(counts)) if counts else None
        logger.info(f"Mean intersecting pairs: false negatives {result['mean_severity_fn']}, "
                    f"true positives {result['mean_severity_tp']}")
    return result


def interpolation_scores(clf, start, end, steps=50):
    """
    Scores along a linear interpolation of control points from start to end.

    Returns:
        tuple: (parameters (steps,), scores (steps,), Spearman rank correlation)
    """
    start = np.asarray(start, dtype=float).reshape(-1, 3)
    end = np.asarray(end, dtype=float).reshape(-1, 3)
    ts = np.linspace(0.0, 1.0, steps)
    frames = np.stack([normalize_unit_cube((1.0 - t) * start + t * end).reshape(-1) for t in ts])
    scores = mlp_predict(clf, frames)
    rho, _ = spearmanr(ts, scores)
    return ts, scores, float(rho)


# =============================================================================
# CLASSIFIER FILES
# =============================================================================

def save_classifier(clf, path):
    """CXML: magic, u32 layer count, u32 flags, u32 widths, then per layer row-major f8 weights and biases."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    widths = clf.widths
    with open(path, 'wb') as f:
        f.write(CLASSIFIER_MAGIC)
        f.write(_COUNT.pack(len(clf.weights)))
        f.write(_COUNT.pack(FLAG_DEGENERATE if clf.degenerate else 0))
        f.write(struct.pack(f"<{len(widths)}I", *widths))
        for w, b in zip(clf.weights, clf.biases):
            f.write(np.ascontiguousarray(w, dtype='<f8').tobytes())
            f.write(np.ascontiguousarray(b, dtype='<f8').tobytes())
    logger.info(f"Saved classifier {widths} to {path}" + (" (constant)" if clf.degenerate else ""))


def load_classifier(path):
    """
    Read a CXML classifier file.

    Raises:
        FileNotFoundError: missing file
        ClassifierFormatError: bad magic, inconsistent widths or truncated payload
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"Classifier file not found: {path}")
    with open(path, 'rb') as f:
        data = f.read()
    if data[:4] != CLASSIFIER_MAGIC:
        raise ClassifierFormatError(f"{path}: bad magic {data[:4]!r}")
    if len(data) < 12:
        raise ClassifierFormatError(f"{path}: truncated header")
    (layers,) = _COUNT.unpack_from(data, 4)
    (flags,) = _COUNT.unpack_from(data, 8)
    if flags & ~FLAG_DEGENERATE:
        raise ClassifierFormatError(f"{path}: unknown flags {flags:#x}")
    offset = 12
    if layers < 1 or len(data) < offset + 4 * (layers + 1):
        raise ClassifierFormatError(f"{path}: invalid layer count {layers}")
    widths = list(struct.unpack_from(f"<{layers + 1}I", data, offset))
    offset += 4 * (layers + 1)
    if widths[-1] != 1 or widths[0] not in DIMS.values():
        raise ClassifierFormatError(f"{path}: unexpected widths {widths}")

    expected = offset + 8 * sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))
    if len(data) != expected:
        raise ClassifierFormatError(f"{path}: payload size {len(data)} does not match widths {widths}")
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        w = np.frombuffer(data, dtype='<f8', count=fan_in * fan_out, offset=offset).reshape(fan_in, fan_out)
        offset += 8 * fan_in * fan_out
        b = np.frombuffer(data, dtype='<f8', count=fan_out, offset=offset)
        offset += 8 * fan_out
        weights.append(w.astype(float))
        biases.append(b.astype(float))
    logger.info(f"Loaded classifier {widths} from {path}")
    return MLPClassifier(weights, biases, degenerate=bool(flags & FLAG_DEGENERATE))
