"""
Tabular and image exports for run directories: CSVs through pandas and
8-bit binary PGM images for heatmaps and reconstruction dumps.
"""
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from schemas import METRICS_CSV_COLUMNS, LossRecord, MetricsReport

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def _prepare(path: PathLike) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    return out


def write_frame(df: pd.DataFrame, path: PathLike) -> Path:
    out = _prepare(path)
    df.to_csv(out, index=False)
    logger.debug(f"Wrote {len(df)} rows to {out}")
    return out


def write_loss_trace(trace: Sequence[LossRecord], path: PathLike) -> Path:
    df = pd.DataFrame([r.model_dump() for r in trace], columns=["step", "lr", "loss"])
    return write_frame(df, path)


def read_loss_trace(path: PathLike) -> List[LossRecord]:
    df = pd.read_csv(path)
    return [LossRecord(step=int(row.step), lr=float(row.lr), loss=float(row.loss)) for row in df.itertuples()]


def write_metrics(reports: Iterable[MetricsReport], path: PathLike) -> Path:
    df = pd.DataFrame([r.to_row() for r in reports], columns=METRICS_CSV_COLUMNS)
    return write_frame(df, path)


def write_report_text(report: MetricsReport, path: PathLike) -> Path:
    out = _prepare(path)
    out.write_text(report.to_text(), encoding="utf-8")
    return out


def write_rows(rows: Sequence[Dict[str, Any]], path: PathLike, columns: Optional[Sequence[str]] = None) -> Path:
    return write_frame(pd.DataFrame(list(rows), columns=columns), path)


def write_matrix(matrix: np.ndarray, path: PathLike, row_prefix: str = "q", col_prefix: str = "k") -> Path:
    """One CSV row per query token, one column per key token."""
    matrix = np.asarray(matrix)
    df = pd.DataFrame(matrix, columns=[f"{col_prefix}{j}" for j in range(matrix.shape[1])])
    df.insert(0, "row", [f"{row_prefix}{i}" for i in range(matrix.shape[0])])
    return write_frame(df, path)


def to_gray(image: np.ndarray) -> np.ndarray:
    """Min-max scale a 2-D array to uint8; constant images map to 0."""
    image = np.asarray(image, dtype=np.float64)
    lo, hi = float(image.min()), float(image.max())
    if hi <= lo:
        return np.zeros(image.shape, dtype=np.uint8)
    return np.round(255.0 * (image - lo) / (hi - lo)).astype(np.uint8)


def write_pgm(image: np.ndarray, path: PathLike, scale: int = 1) -> Path:
    """Binary (P5) 8-bit PGM; `scale` repeats every pixel for readability."""
    gray = to_gray(image)
    if gray.ndim != 2:
        raise ValueError(f"PGM needs a 2-D image, got shape {gray.shape}")
    if scale > 1:
        gray = np.kron(gray, np.ones((scale, scale), dtype=np.uint8))
    out = _prepare(path)
    height, width = gray.shape
    with open(out, "wb") as handle:
        handle.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        handle.write(gray.tobytes())
    return out


def read_pgm(path: PathLike) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path} is not a binary PGM")
    width, height = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(height, width)
