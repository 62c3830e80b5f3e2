#!/usr/bin/env python3
"""
Run Report Module

Tabular and JSON artifacts written by the pipeline subcommands.

Key Features:
- Fitting history logs (one row per iteration, tab-separated) via pandas
- Augmentation provenance manifests (one row per bitmap, tab-separated)
- JSON reports (effective configuration, evaluation summaries)
- Human-readable loss breakdown formatting for the console
"""

import json
import logging
import os
from typing import Any, Dict, List

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

# =============================================================================
# CONSTANTS
# =============================================================================

HISTORY_COLUMNS = ['iter', 'chamfer', 'normal', 'template', 'self_x', 'pair_x', 'total', 'grad_max']
MANIFEST_COLUMNS = ['output', 'source', 'file_index', 'copy', 'width', 'item_seed', 'out_size', 'splits',
                    'removed', 'params']


def _ensure_parent(path):
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


# =============================================================================
# HISTORY LOGS
# =============================================================================

def history_frame(history) -> pd.DataFrame:
    """LossBreakdown records as a DataFrame with the history log columns."""
    rows = [breakdown.record(i) for i, breakdown in enumerate(history)]
    return pd.DataFrame(rows, columns=HISTORY_COLUMNS)


def write_history(history, path: str) -> str:
    """
    Save a fitting history as a tab-separated log.

    Args:
        history: Sequence of LossBreakdown, one per iteration
        path: Output file

    Returns:
        str: The written path
    """
    _ensure_parent(path)
    history_frame(history).to_csv(path, sep='\t', index=False, float_format='%.9g')
    logger.info(f"Wrote {len(history)} history rows to {path}")
    return path


def read_history(path: str) -> pd.DataFrame:
    if not os.path.exists(path):
        raise FileNotFoundError(f"History log not found: {path}")
    frame = pd.read_csv(path, sep='\t')
    missing = [c for c in HISTORY_COLUMNS if c not in frame.columns]
    if missing:
        raise ValueError(f"History log {path} is missing columns: {', '.join(missing)}")
    return frame


# =============================================================================
# MANIFESTS
# =============================================================================

def write_manifest(rows: List[Dict[str, Any]], path: str) -> str:
    """Save augmentation provenance rows as a tab-separated manifest."""
    _ensure_parent(path)
    pd.DataFrame(rows, columns=MANIFEST_COLUMNS).to_csv(path, sep='\t', index=False)
    logger.info(f"Wrote manifest with {len(rows)} rows to {path}")
    return path


def read_manifest(path: str) -> List[Dict[str, Any]]:
    if not os.path.exists(path):
        raise FileNotFoundError(f"Manifest not found: {path}")
    frame = pd.read_csv(path, sep='\t', dtype={'item_seed': 'uint64'}, keep_default_na=False)
    return frame.to_dict(orient='records')


# =============================================================================
# JSON REPORTS
# =============================================================================

def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    return value


def save_json_report(d: Dict[str, Any], path: str) -> str:
    """
    Save a dictionary as an indented JSON file.

    Note:
        Numpy scalars and arrays are converted to plain Python values.
    """
    _ensure_parent(path)
    with open(path, 'w') as f:
        json.dump(_jsonable(d), f, indent=2, sort_keys=True)
    logger.debug(f"Wrote JSON report {path}")
    return path


def load_json_report(path: str) -> Dict[str, Any]:
    """Load a JSON report, or an empty dict if the file doesn't exist."""
    if not os.path.exists(path):
        return {}
    try:
        with open(path, 'r') as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        logger.warning(f"Error loading report {path}: {e}")
        return {}


# =============================================================================
# CONSOLE FORMATTING
# =============================================================================

def format_breakdown(breakdown) -> str:
    """One line per loss term, aligned."""
    record = breakdown.record(0)
    lines = [f"{name:>10s}: {record[name]:.9g}" for name in HISTORY_COLUMNS[1:]]
    return "\n".join(lines)
