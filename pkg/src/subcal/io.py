"""CSV ingestion and emission for physical datasets."""

from __future__ import annotations

import csv
import warnings
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import IngestionError
from .models import PhysicalData


def load_csv(path, x_cols: Sequence[str], y_col: str) -> PhysicalData:
    """Read observations from a headered CSV file.

    Rows with missing columns or non-numeric values are skipped; a warning
    reports how many.  A file yielding zero usable rows raises
    :class:`~subcal.errors.IngestionError`.
    """
    path = Path(path)
    xs, ys = [], []
    skipped = 0
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise IngestionError(f"{path} has no header row")
        missing = [c for c in (*x_cols, y_col) if c not in reader.fieldnames]
        if missing:
            raise IngestionError(f"{path} lacks required columns {missing}")
        for row in reader:
            try:
                vals = [float(row[c]) for c in x_cols]
                target = float(row[y_col])
            except (TypeError, ValueError):
                skipped += 1
                continue
            if not all(np.isfinite(v) for v in vals) or not np.isfinite(target):
                skipped += 1
                continue
            xs.append(vals)
            ys.append(target)
    if not xs:
        raise IngestionError(f"{path} produced no usable rows ({skipped} skipped)")
    if skipped:
        warnings.warn(f"{path}: skipped {skipped} malformed row(s)")
    return PhysicalData(x=np.asarray(xs, dtype=float), y=np.asarray(ys, dtype=float))


def write_csv(data: PhysicalData, path, x_cols: Sequence[str], y_col: str) -> None:
    """Write observations with 17 significant digits so values round-trip exactly."""
    path = Path(path)
    if len(x_cols) != data.x.shape[1]:
        raise ValueError(f"{len(x_cols)} column names for {data.x.shape[1]} input columns")
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([*x_cols, y_col])
        for xi, yi in zip(data.x, data.y):
            writer.writerow([f"{v:.17g}" for v in xi] + [f"{yi:.17g}"])
