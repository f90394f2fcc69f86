"""Participant data: ingestion, sparsity accounting and a synthetic generator.

Cells are stored as two aligned ``participants x variables`` arrays: ``states``
(one of PRESENT/MISSING/INVALID/INAPPLICABLE) and ``values`` (the number or the
level index; NaN whenever the state is not PRESENT).
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .codebook import CATEGORICAL, Codebook, VariableSpec

log = logging.getLogger(__name__)

PRESENT, MISSING, INVALID, INAPPLICABLE = 0, 1, 2, 3
STATE_NAMES = {PRESENT: "Present", MISSING: "Missing", INVALID: "Invalid", INAPPLICABLE: "Inapplicable"}
OUTCOME_PREFIX = "outcome:"
ID_COLUMN = "participant_id"


class IngestError(ValueError):
    pass


@dataclass(frozen=True)
class Cell:
    state: int
    value: float | int | None = None

    @property
    def present(self) -> bool:
        return self.state == PRESENT

    def __repr__(self) -> str:
        if self.state == PRESENT:
            return f"Present({self.value!r})"
        return STATE_NAMES[self.state]


@dataclass
class Dataset:
    codebook: Codebook
    participant_ids: tuple[str, ...]
    values: np.ndarray
    states: np.ndarray
    outcomes: dict[str, np.ndarray] = field(default_factory=dict)
    zero_variance: tuple[str, ...] = ()
    ground_truth: dict | None = None

    def __post_init__(self):
        self.participant_ids = tuple(self.participant_ids)
        n, v = len(self.participant_ids), len(self.variables)
        if self.values.shape != (n, v) or self.states.shape != (n, v):
            raise ValueError(f"grid must be {n}x{v}, got values {self.values.shape}, states {self.states.shape}")
        if len(set(self.participant_ids)) != n:
            raise ValueError("participant ids must be unique")
        present = self.states == PRESENT
        if not np.all(np.isfinite(self.values[present])):
            raise ValueError("present cells must hold finite values")
        if np.any(~np.isnan(self.values[~present])):
            raise ValueError("absent cells must hold NaN")
        for j, var in enumerate(self.variables):
            if var.kind == CATEGORICAL:
                col = self.values[present[:, j], j]
                if np.any((col < 0) | (col >= len(var.levels)) | (col != np.round(col))):
                    raise ValueError(f"{var.id}: level index out of range")
        for name, y in self.outcomes.items():
            if y.shape != (n,):
                raise ValueError(f"outcome {name!r} has shape {y.shape}, expected ({n},)")

    @property
    def variables(self) -> list[VariableSpec]:
        return self.codebook.included()

    @property
    def n_rows(self) -> int:
        return len(self.participant_ids)

    def cell(self, i: int, j: int) -> Cell:
        state = int(self.states[i, j])
        if state != PRESENT:
            return Cell(state)
        value = self.values[i, j]
        if self.variables[j].kind == CATEGORICAL:
            return Cell(state, int(value))
        return Cell(state, float(value))

    def sparsity(self) -> int:
        return int(np.count_nonzero(self.states != PRESENT))

    def sparsity_per_row(self) -> np.ndarray:
        return np.count_nonzero(self.states != PRESENT, axis=1)

    def take(self, rows) -> "Dataset":
        """Row subset (order as given)."""
        rows = np.asarray(rows, dtype=int)
        return Dataset(
            self.codebook,
            tuple(self.participant_ids[i] for i in rows),
            self.values[rows],
            self.states[rows],
            {k: y[rows] for k, y in self.outcomes.items()},
            self.zero_variance,
            None,
        )

    def without_projects(self, projects: Sequence[str]) -> "Dataset":
        """Drop every predictor column whose variable belongs to one of ``projects``."""
        drop = [v.id for v in self.variables if v.project in set(projects)]
        if not drop:
            return self
        keep = np.array([v.project not in set(projects) for v in self.variables], dtype=bool)
        return Dataset(
            self.codebook.with_excluded(drop),
            self.participant_ids,
            self.values[:, keep],
            self.states[:, keep],
            dict(self.outcomes),
            self.zero_variance,
            self.ground_truth,
        )


def sparsity(ds: Dataset) -> int:
    return ds.sparsity()


def sparsity_per_row(ds: Dataset) -> list[int]:
    return [int(x) for x in ds.sparsity_per_row()]


# -- CSV ingestion ----------------------------------------------------------

def _classify(token: str, var: VariableSpec, sentinels: dict, where: str) -> tuple[int, float]:
    if token == sentinels["missing"]:
        return MISSING, math.nan
    if token == sentinels["invalid"]:
        return INVALID, math.nan
    if token == sentinels["inapplicable"]:
        return INAPPLICABLE, math.nan
    if var.kind == CATEGORICAL:
        try:
            return PRESENT, float(var.levels.index(token))
        except ValueError:
            raise IngestError(f"{where}: {token!r} is not a level of {var.id} nor a sentinel") from None
    try:
        value = float(token)
    except ValueError:
        raise IngestError(f"{where}: unparseable numeric token {token!r} for {var.id}") from None
    if not math.isfinite(value):
        raise IngestError(f"{where}: non-finite value {token!r} for {var.id}")
    return PRESENT, value


def zero_variance_columns(values: np.ndarray, states: np.ndarray) -> np.ndarray:
    """Boolean mask of columns with fewer than two distinct present values."""
    flags = np.zeros(values.shape[1], dtype=bool)
    for j in range(values.shape[1]):
        col = values[states[:, j] == PRESENT, j]
        flags[j] = col.size == 0 or np.all(col == col[0])
    return flags


def ingest(cb: Codebook, data_path) -> Dataset:
    """Read a participant CSV against ``cb``.

    Zero-variance variables are demoted to ``included=False`` in the returned
    dataset's codebook and their ids listed in ``Dataset.zero_variance``.
    """
    path = Path(data_path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestError(f"{path}: empty file") from None
        rows = list(reader)

    if not header or header[0] != ID_COLUMN:
        raise IngestError(f"{path}: first column must be {ID_COLUMN!r}")
    if len(set(header)) != len(header):
        raise IngestError(f"{path}: duplicated header column")
    outcome_cols = [h for h in header[1:] if h.startswith(OUTCOME_PREFIX)]
    var_cols = [h for h in header[1:] if not h.startswith(OUTCOME_PREFIX)]
    expected = [v.id for v in cb.included()]
    if set(var_cols) != set(expected):
        missing = sorted(set(expected) - set(var_cols))
        extra = sorted(set(var_cols) - set(expected))
        raise IngestError(f"{path}: header/codebook mismatch (missing {missing[:5]}, unexpected {extra[:5]})")

    position = {h: k for k, h in enumerate(header)}
    variables = cb.included()
    n, v = len(rows), len(variables)
    values = np.full((n, v), np.nan)
    states = np.zeros((n, v), dtype=np.int8)
    outcomes = {h[len(OUTCOME_PREFIX):]: np.full(n, np.nan) for h in outcome_cols}
    ids = []
    for i, row in enumerate(rows):
        lineno = i + 2
        if len(row) != len(header):
            raise IngestError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}")
        ids.append(row[0])
        for j, var in enumerate(variables):
            states[i, j], values[i, j] = _classify(
                row[position[var.id]], var, cb.sentinels, f"{path}: line {lineno}"
            )
        for h in outcome_cols:
            token = row[position[h]]
            if token == "":
                continue
            try:
                y = float(token)
            except ValueError:
                raise IngestError(f"{path}: line {lineno}: bad outcome value {token!r} in {h}") from None
            if not math.isfinite(y):
                raise IngestError(f"{path}: line {lineno}: non-finite outcome in {h}")
            outcomes[h[len(OUTCOME_PREFIX):]][i] = y

    flags = zero_variance_columns(values, states)
    dropped = tuple(var.id for var, f in zip(variables, flags) if f)
    if dropped:
        log.warning("excluding %d zero-variance variables: %s", len(dropped), ", ".join(dropped[:10]))
    keep = ~flags
    return Dataset(
        cb.with_excluded(dropped),
        tuple(ids),
        values[:, keep],
        states[:, keep],
        outcomes,
        dropped,
    )


def _format_number(x: float) -> str:
    return repr(float(x))


def write_dataset_csv(ds: Dataset, path) -> None:
    """Export in the ingestible CSV layout (round-trips through ``ingest``)."""
    sent = ds.codebook.sentinels
    token_for = {MISSING: sent["missing"], INVALID: sent["invalid"], INAPPLICABLE: sent["inapplicable"]}
    variables = ds.variables
    names = sorted(ds.outcomes)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([ID_COLUMN] + [v.id for v in variables] + [OUTCOME_PREFIX + k for k in names])
        for i, pid in enumerate(ds.participant_ids):
            row = [pid]
            for j, var in enumerate(variables):
                s = ds.states[i, j]
                if s != PRESENT:
                    row.append(token_for[int(s)])
                elif var.kind == CATEGORICAL:
                    row.append(var.levels[int(ds.values[i, j])])
                else:
                    row.append(_format_number(ds.values[i, j]))
            for k in names:
                y = ds.outcomes[k][i]
                row.append("" if np.isnan(y) else _format_number(y))
            w.writerow(row)


# -- synthetic generator ---------------------------------------------------

MEASURES = ("EF", "EM")
BASE_SCORE = 5.0


@dataclass(frozen=True)
class SynthConfig:
    """Generator settings.

    ``missing_rate`` is the MCAR per-cell absence probability; a tuple gives a
    mixture, each participant drawing one rate from it uniformly.
    ``block_missing_rate`` is the per (participant, factor) probability that a
    whole factor block is Inapplicable.
    """

    n_participants: int = 200
    factor_latents: int = 2
    noise_sd: float = 0.5
    missing_rate: float | tuple[float, ...] = 0.0
    block_missing_rate: float = 0.0
    outcome_fn: str = "Linear"
    seed: int = 0
    n_signal_factors: int = 4
    outcome_noise_sd: float | None = None
    attrition: float = 0.0
    project_correlation: float = 0.3
    sentinel_mix: tuple[float, float, float] = (0.6, 0.1, 0.3)

    def __post_init__(self):
        rates = self.missing_rates
        if isinstance(self.n_participants, bool) or not isinstance(self.n_participants, int) or self.n_participants < 2:
            raise ConfigError("n_participants", "must be an integer >= 2")
        if not isinstance(self.factor_latents, int) or self.factor_latents < 1:
            raise ConfigError("factor_latents", "must be a positive integer")
        if not self.noise_sd >= 0:
            raise ConfigError("noise_sd", "must be >= 0")
        if not rates or any(not 0.0 <= r <= 1.0 for r in rates):
            raise ConfigError("missing_rate", "must lie in [0, 1]")
        if not 0.0 <= self.block_missing_rate <= 1.0:
            raise ConfigError("block_missing_rate", "must lie in [0, 1]")
        if not 0.0 <= self.attrition < 1.0:
            raise ConfigError("attrition", "must lie in [0, 1)")
        if self.outcome_fn not in ("Linear", "Nonlinear"):
            raise ConfigError("outcome_fn", "must be 'Linear' or 'Nonlinear'")
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2**64:
            raise ConfigError("seed", "must be a 64-bit unsigned integer")
        if self.n_signal_factors < 1:
            raise ConfigError("n_signal_factors", "must be >= 1")
        if not 0.0 <= self.project_correlation < 1.0:
            raise ConfigError("project_correlation", "must lie in [0, 1)")
        mix = self.sentinel_mix
        if len(mix) != 3 or any(m < 0 for m in mix) or not math.isclose(sum(mix), 1.0):
            raise ConfigError("sentinel_mix", "must be three non-negative weights summing to 1")

    @property
    def missing_rates(self) -> tuple[float, ...]:
        r = self.missing_rate
        return tuple(float(x) for x in r) if isinstance(r, (tuple, list)) else (float(r),)

    @classmethod
    def from_dict(cls, doc: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown field")
        doc = dict(doc)
        for key in ("missing_rate", "sentinel_mix"):
            if isinstance(doc.get(key), list):
                doc[key] = tuple(doc[key])
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError("config", str(exc)) from exc

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        for key in ("missing_rate", "sentinel_mix"):
            if isinstance(out[key], tuple):
                out[key] = list(out[key])
        return out


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"{field_name}: {message}")


def _outcome_terms(rng, signal: list[str], k: int, nonlinear: bool, scale: float) -> dict:
    linear = {f: (scale * rng.normal(size=k) / math.sqrt(len(signal) * k)).tolist() for f in signal}
    terms = {"linear": linear, "interactions": [], "squares": []}
    if nonlinear:
        for a, b in zip(signal, signal[1:] + signal[:1]):
            if a != b:
                terms["interactions"].append([a, b, float(scale * rng.choice([-1.0, 1.0]) * 0.8)])
        for f in signal[::2]:
            terms["squares"].append([f, float(scale * rng.choice([-1.0, 1.0]) * 0.5)])
    return terms


def evaluate_outcome_terms(terms: dict, latents: dict[str, np.ndarray]) -> np.ndarray:
    """Noise-free value of an outcome component given factor latents.

    linear:       sum_f  z_f . w_f
    interactions: sum    c * z_a[:, 0] * z_b[:, 0]
    squares:      sum    c * (z_f[:, 0]**2 - 1)
    """
    n = next(iter(latents.values())).shape[0]
    g = np.zeros(n)
    for f, w in terms["linear"].items():
        g += latents[f] @ np.asarray(w)
    for a, b, c in terms["interactions"]:
        g += c * latents[a][:, 0] * latents[b][:, 0]
    for f, c in terms["squares"]:
        g += c * (latents[f][:, 0] ** 2 - 1.0)
    return g


def generate_synthetic(cb: Codebook, cfg: SynthConfig) -> Dataset:
    """Draw a dataset with planted factor structure.

    Non-cognitive factor latents mix a per-project shared component with a
    factor-specific one. EF/EM scores at M2 are functions of the latents of a
    few signal factors; M3 scores subtract a decline term driven by a second
    set of terms. Cognitive-project factors measure the M2 scores: their first
    latent is the standardized M2 score of EF or EM (alternating).

    The returned dataset carries ``ground_truth`` with everything needed to
    recompute outcomes and clean cell values.
    """
    rng = np.random.default_rng(cfg.seed)
    n, k = cfg.n_participants, cfg.factor_latents
    factors = cb.factor_names
    projects = dict(cb.factors)
    cognitive = [f for f in factors if projects[f] == "Cognitive"]
    others = [f for f in factors if projects[f] != "Cognitive"]
    if not others:
        raise ConfigError("codebook", "needs at least one non-cognitive factor")

    rho = cfg.project_correlation
    shared = {p: rng.normal(size=(n, k)) for p in ("Survey", "DailyDiary", "Biomarkers")}
    latents: dict[str, np.ndarray] = {}
    for f in others:
        latents[f] = math.sqrt(rho) * shared[projects[f]] + math.sqrt(1 - rho) * rng.normal(size=(n, k))

    n_sig = min(cfg.n_signal_factors, len(others))
    signal = [others[i] for i in sorted(rng.choice(len(others), size=n_sig, replace=False))]
    nonlinear = cfg.outcome_fn == "Nonlinear"
    out_sd = cfg.noise_sd if cfg.outcome_noise_sd is None else cfg.outcome_noise_sd
    score_terms = {m: _outcome_terms(rng, signal, k, nonlinear, 1.0) for m in MEASURES}
    decline_terms = {m: _outcome_terms(rng, signal, k, nonlinear, 0.4) for m in MEASURES}

    clean_outcomes: dict[str, np.ndarray] = {}
    noisy: dict[str, np.ndarray] = {}
    for m in MEASURES:
        m2 = BASE_SCORE + evaluate_outcome_terms(score_terms[m], latents)
        decline = 0.5 + evaluate_outcome_terms(decline_terms[m], latents)
        clean_outcomes[f"{m}_M2"] = m2
        clean_outcomes[f"{m}_M3"] = m2 - decline
        noisy[f"{m}_M2"] = np.maximum(m2 + out_sd * rng.normal(size=n), 0.0)
        noisy[f"{m}_M3"] = np.maximum(noisy[f"{m}_M2"] - decline + out_sd * rng.normal(size=n), 0.0)
    for t in ("M2", "M3"):
        clean_outcomes[f"COMP_{t}"] = 0.5 * (clean_outcomes[f"EF_{t}"] + clean_outcomes[f"EM_{t}"])
        noisy[f"COMP_{t}"] = 0.5 * (noisy[f"EF_{t}"] + noisy[f"EM_{t}"])

    for idx, f in enumerate(cognitive):
        score = noisy[f"{MEASURES[idx % 2]}_M2"]
        sd = score.std()
        z = np.empty((n, k))
        z[:, 0] = (score - score.mean()) / (sd if sd > 0 else 1.0)
        z[:, 1:] = rng.normal(size=(n, k - 1))
        latents[f] = z

    variables = cb.included()
    clean = np.empty((n, len(variables)))
    params: dict[str, dict] = {}
    for j, var in enumerate(variables):
        z = latents[var.factor]
        if var.kind == CATEGORICAL:
            L = len(var.levels)
            weights = rng.normal(size=(k, L)) * 1.5
            logits = z @ weights + cfg.noise_sd * rng.gumbel(size=(n, L))
            clean[:, j] = np.argmax(logits, axis=1)
            params[var.id] = {"weights": weights.tolist()}
        else:
            loading = rng.normal(size=k)
            offset = float(rng.normal() * 2.0)
            clean[:, j] = z @ loading + offset + cfg.noise_sd * rng.normal(size=n)
            params[var.id] = {"loading": loading.tolist(), "offset": offset}

    states = np.zeros(clean.shape, dtype=np.int8)
    rates = np.asarray(cfg.missing_rates)
    row_rate = rates[rng.integers(len(rates), size=n)] if len(rates) > 1 else np.full(n, rates[0])
    mcar = rng.random(clean.shape) < row_rate[:, None]
    kinds = rng.choice([MISSING, INVALID, INAPPLICABLE], size=clean.shape, p=list(cfg.sentinel_mix))
    states[mcar] = kinds[mcar]
    if cfg.block_missing_rate > 0:
        col_factor = np.array([factors.index(v.factor) for v in variables])
        blocks = rng.random((n, len(factors))) < cfg.block_missing_rate
        states[blocks[:, col_factor]] = INAPPLICABLE
    values = np.where(states == PRESENT, clean, np.nan)

    outcomes = {name: y.copy() for name, y in noisy.items()}
    if cfg.attrition > 0:
        gone = rng.random(n) < cfg.attrition
        for name in outcomes:
            if name.endswith("_M3"):
                outcomes[name][gone] = np.nan

    truth = {
        "config": cfg.to_dict(),
        "signal_factors": signal,
        "score_terms": score_terms,
        "decline_terms": decline_terms,
        "base_score": BASE_SCORE,
        "latents": latents,
        "variable_params": params,
        "clean_values": clean,
        "clean_outcomes": clean_outcomes,
        "row_missing_rate": row_rate,
    }
    ids = tuple(f"P{i:06d}" for i in range(n))
    return Dataset(cb, ids, values, states, outcomes, (), truth)


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def write_ground_truth(ds: Dataset, path) -> None:
    if ds.ground_truth is None:
        raise ValueError("dataset has no generator ground truth")
    doc = _jsonable(ds.ground_truth)
    doc["participant_ids"] = list(ds.participant_ids)
    doc["variable_ids"] = [v.id for v in ds.variables]
    Path(path).write_text(json.dumps(doc), encoding="utf-8")
