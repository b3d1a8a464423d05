"""CSV emission with fixed schemas (see FORMATS.md)."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, is_dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

RECALL_COLUMNS = ("n_probe", "recall_at_1", "mean_buckets", "mean_candidates")
THM1_COLUMNS = ("bin", "cos_lo", "cos_hi", "recall_at_1", "count")
THM2_COLUMNS = ("p_norm", "trials", "ks_orth_stat", "ks_orth_p", "ks_orth_pass",
                "ks_par_stat", "ks_par_p", "ks_par_pass", "dispersion", "tails_ok")
THM2_TAIL_COLUMNS = ("p_norm", "r", "empirical_tail", "bound", "exact_tail", "sigma", "passed")
VORONOI_COLUMNS = ("radius", "mismatch", "count")
COMPARE_COLUMNS = ("seed", "clustering", "n_probe", "recall_at_1", "in_modal_recall_at_1",
                   "mean_buckets", "mean_candidates")
SEARCH_COLUMNS = ("query", "rank", "id", "similarity")


def fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if math.isnan(v):
            return "nan"
        return f"{v:.6g}"
    return str(value)


def _as_row(obj) -> Mapping:
    if hasattr(obj, "row"):
        return obj.row()
    if is_dataclass(obj):
        return asdict(obj)
    return obj


def emit_csv(rows: Iterable, path, columns: Sequence[str] = RECALL_COLUMNS) -> None:
    """UTF-8 CSV with a header row and floats at 6 significant digits."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for obj in rows:
            row = _as_row(obj)
            writer.writerow([fmt(row[c]) for c in columns])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    return obj


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n", encoding="utf-8")
