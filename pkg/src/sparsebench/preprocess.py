"""Dataset -> dense design matrix.

Numerical variables are z-scored with statistics from the training rows only;
categoricals are one-hot encoded. Absent cells impute to the training mean
(0 after z-scoring) or to an all-zero one-hot block.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .codebook import CATEGORICAL, NUMERICAL, UnknownFactor
from .dataio import PRESENT, Dataset

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ColumnMeta:
    variable: str
    factor: str
    kind: str
    level: str | None = None
    indicator: bool = False


@dataclass
class DesignMatrix:
    values: np.ndarray
    column_meta: list[ColumnMeta]
    row_sparsity: np.ndarray
    scaler_params: dict[str, tuple[float, float]]
    factors: list[str]
    warnings: list[str] = field(default_factory=list)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def layout_digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for m in self.column_meta:
            h.update(f"{m.variable}|{m.factor}|{m.kind}|{m.level}|{m.indicator}\n".encode())
        return h.hexdigest()[:16]

    def factor_slices(self) -> list[np.ndarray]:
        """Column index arrays, one per factor in codebook order."""
        return [np.asarray(columns_for_factor(self, f), dtype=int) for f in self.factors]


@dataclass(frozen=True)
class PreprocessConfig:
    sd_convention: str = "population"
    missing_indicators: bool = False

    def __post_init__(self):
        if self.sd_convention not in ("population", "sample"):
            raise ValueError("sd_convention must be 'population' or 'sample'")


def fit_scaler(train: Dataset, config: PreprocessConfig = PreprocessConfig()):
    """Per-numerical-variable (mean, sd) from present training cells.

    Returns ``(params, warnings)``; variables with fewer than two present
    values are left out of ``params`` and reported in ``warnings``.
    """
    ddof = 0 if config.sd_convention == "population" else 1
    params: dict[str, tuple[float, float]] = {}
    warnings: list[str] = []
    for j, var in enumerate(train.variables):
        if var.kind != NUMERICAL:
            continue
        col = train.values[train.states[:, j] == PRESENT, j]
        if col.size < 2:
            warnings.append(f"dropped {var.id}: {col.size} present training values")
            continue
        mean = float(col.mean())
        sd = float(col.std(ddof=ddof))
        # constant column: keep it, it centres to all zeros
        params[var.id] = (mean, sd if sd > 0 else 1.0)
    return params, warnings


def transform(ds: Dataset, params: dict, config: PreprocessConfig = PreprocessConfig(),
              warnings: list[str] | None = None) -> DesignMatrix:
    blocks, meta = [], []
    present = ds.states == PRESENT
    for j, var in enumerate(ds.variables):
        if var.kind == CATEGORICAL:
            onehot = np.zeros((ds.n_rows, len(var.levels)))
            rows = np.flatnonzero(present[:, j])
            onehot[rows, ds.values[rows, j].astype(int)] = 1.0
            blocks.append(onehot)
            meta.extend(ColumnMeta(var.id, var.factor, CATEGORICAL, lvl) for lvl in var.levels)
        else:
            if var.id not in params:
                continue
            mean, sd = params[var.id]
            col = np.where(present[:, j], (ds.values[:, j] - mean) / sd, 0.0)
            blocks.append(col[:, None])
            meta.append(ColumnMeta(var.id, var.factor, NUMERICAL))
        if config.missing_indicators:
            blocks.append((~present[:, j]).astype(float)[:, None])
            meta.append(ColumnMeta(var.id, var.factor, var.kind, None, indicator=True))
    values = np.hstack(blocks) if blocks else np.zeros((ds.n_rows, 0))
    return DesignMatrix(
        values=values,
        column_meta=meta,
        row_sparsity=ds.sparsity_per_row(),
        scaler_params=dict(params),
        factors=ds.codebook.factor_names,
        warnings=list(warnings or []),
    )


def fit_transform(train: Dataset, apply: Dataset, config: PreprocessConfig = PreprocessConfig()):
    """Fit scaling on ``train`` only and encode both row sets with one layout."""
    if train.codebook.factors != apply.codebook.factors or [v.id for v in train.variables] != [
        v.id for v in apply.variables
    ]:
        raise ValueError("train and apply rows must share a codebook")
    params, warnings = fit_scaler(train, config)
    for w in warnings:
        log.warning(w)
    return transform(train, params, config, warnings), transform(apply, params, config, warnings)


def columns_for_factor(dm: DesignMatrix, factor: str) -> list[int]:
    if factor not in dm.factors:
        raise UnknownFactor(factor)
    return [i for i, m in enumerate(dm.column_meta) if m.factor == factor]


def export_design_matrix(dm: DesignMatrix, csv_path, sidecar_path) -> None:
    names = [
        m.variable + ("=" + m.level if m.level is not None else "") + ("#missing" if m.indicator else "")
        for m in dm.column_meta
    ]
    with Path(csv_path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for row in dm.values:
            w.writerow([repr(float(x)) for x in row])
    sidecar = {
        "columns": [
            {"variable": m.variable, "factor": m.factor, "kind": m.kind, "level": m.level, "indicator": m.indicator}
            for m in dm.column_meta
        ],
        "scaler_params": {k: {"mean": v[0], "sd": v[1]} for k, v in dm.scaler_params.items()},
        "factors": dm.factors,
        "row_sparsity": [int(x) for x in dm.row_sparsity],
        "warnings": dm.warnings,
    }
    Path(sidecar_path).write_text(json.dumps(sidecar, indent=2), encoding="utf-8")
