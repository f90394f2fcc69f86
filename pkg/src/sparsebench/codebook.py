"""Variable schema and the project -> factor -> variable hierarchy.

A codebook is a JSON document::

    {"factors":   [{"name": ..., "project": ...}, ...],
     "variables": [{"id": ..., "project": ..., "factor": ..., "kind": ...,
                    "levels": [...], "included": true}, ...]}

with an optional top-level ``"sentinels"`` object overriding the CSV tokens
used for absent cells.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

PROJECTS = ("Survey", "Cognitive", "DailyDiary", "Biomarkers")
NUMERICAL = "Numerical"
CATEGORICAL = "Categorical"
KINDS = (NUMERICAL, CATEGORICAL)

DEFAULT_SENTINELS = {"missing": "", "invalid": "INVALID", "inapplicable": "INAPP"}

_FACTOR_KEYS = {"name", "project"}
_VARIABLE_KEYS = {"id", "project", "factor", "kind", "levels", "included"}
_TOP_KEYS = {"factors", "variables", "sentinels"}


class CodebookError(ValueError):
    """Base class for schema violations."""


class CodebookParseError(CodebookError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{message}")


class DuplicateVariableId(CodebookError):
    def __init__(self, var_id: str):
        self.var_id = var_id
        super().__init__(f"DuplicateVariableId({var_id!r})")


class UnknownProject(CodebookError):
    pass


class UnknownFactor(CodebookError, KeyError):
    def __init__(self, factor: str):
        self.factor = factor
        ValueError.__init__(self, f"unknown factor {factor!r}")

    def __str__(self) -> str:
        return self.args[0]


class TooFewLevels(CodebookError):
    pass


@dataclass(frozen=True)
class VariableSpec:
    id: str
    project: str
    factor: str
    kind: str
    levels: tuple[str, ...] = ()
    included: bool = True

    @property
    def is_categorical(self) -> bool:
        return self.kind == CATEGORICAL

    def to_json(self) -> dict:
        out = {"id": self.id, "project": self.project, "factor": self.factor, "kind": self.kind}
        if self.levels:
            out["levels"] = list(self.levels)
        out["included"] = self.included
        return out


@dataclass(frozen=True)
class Codebook:
    variables: tuple[VariableSpec, ...]
    factors: tuple[tuple[str, str], ...]
    sentinels: dict = field(default_factory=lambda: dict(DEFAULT_SENTINELS))

    def __post_init__(self):
        _validate(self)

    # -- queries -----------------------------------------------------------
    @property
    def factor_names(self) -> list[str]:
        return [name for name, _ in self.factors]

    def project_of(self, factor: str) -> str:
        for name, project in self.factors:
            if name == factor:
                return project
        raise UnknownFactor(factor)

    def included(self) -> list[VariableSpec]:
        return [v for v in self.variables if v.included]

    def variable(self, var_id: str) -> VariableSpec:
        for v in self.variables:
            if v.id == var_id:
                return v
        raise KeyError(var_id)

    def kind_counts(self, included_only: bool = True) -> tuple[int, int]:
        """Return ``(n_categorical, n_numerical)``."""
        pool = self.included() if included_only else self.variables
        n_cat = sum(1 for v in pool if v.kind == CATEGORICAL)
        return n_cat, len(pool) - n_cat

    def factor_count(self) -> int:
        return len(self.factors)

    def with_excluded(self, var_ids: Iterable[str]) -> "Codebook":
        """Copy of the codebook with the given variables demoted to included=False."""
        drop = set(var_ids)
        variables = tuple(replace(v, included=False) if v.id in drop else v for v in self.variables)
        return Codebook(variables, self.factors, dict(self.sentinels))

    def to_json(self) -> dict:
        doc = {
            "factors": [{"name": n, "project": p} for n, p in self.factors],
            "variables": [v.to_json() for v in self.variables],
        }
        if self.sentinels != DEFAULT_SENTINELS:
            doc["sentinels"] = dict(self.sentinels)
        return doc


def _validate(cb: Codebook) -> None:
    factor_project: dict[str, str] = {}
    for name, project in cb.factors:
        if project not in PROJECTS:
            raise UnknownProject(f"factor {name!r} references unknown project {project!r}")
        if name in factor_project:
            raise CodebookError(f"factor {name!r} listed twice")
        factor_project[name] = project

    seen: set[str] = set()
    for v in cb.variables:
        if v.id in seen:
            raise DuplicateVariableId(v.id)
        seen.add(v.id)
        if v.kind not in KINDS:
            raise CodebookError(f"variable {v.id!r}: unknown kind {v.kind!r}")
        if v.factor not in factor_project:
            raise UnknownFactor(v.factor)
        if v.project != factor_project[v.factor]:
            raise CodebookError(
                f"variable {v.id!r}: project {v.project!r} disagrees with factor "
                f"{v.factor!r} ({factor_project[v.factor]!r})"
            )
        if v.kind == CATEGORICAL:
            if len(v.levels) < 2:
                raise TooFewLevels(f"categorical variable {v.id!r} needs >=2 levels, has {len(v.levels)}")
            if len(set(v.levels)) != len(v.levels):
                raise CodebookError(f"variable {v.id!r}: repeated level")
        elif v.levels:
            raise CodebookError(f"numerical variable {v.id!r} must not declare levels")

    tokens = [cb.sentinels.get(k) for k in ("missing", "invalid", "inapplicable")]
    if set(cb.sentinels) != set(DEFAULT_SENTINELS) or any(not isinstance(t, str) for t in tokens):
        raise CodebookError("sentinels must map missing/invalid/inapplicable to strings")
    if len(set(tokens)) != 3:
        raise CodebookError("sentinel tokens must be distinct")


def factor_variables(cb: Codebook, factor: str) -> list[VariableSpec]:
    """Included variables of ``factor`` in codebook order."""
    cb.project_of(factor)
    return [v for v in cb.variables if v.factor == factor and v.included]


# -- file I/O --------------------------------------------------------------

def _check_keys(obj, allowed: set, required: set, what: str):
    if not isinstance(obj, dict):
        raise CodebookParseError(f"{what} must be an object")
    unknown = set(obj) - allowed
    if unknown:
        raise CodebookParseError(f"{what}: unknown keys {sorted(unknown)}")
    missing = required - set(obj)
    if missing:
        raise CodebookParseError(f"{what}: missing keys {sorted(missing)}")


def codebook_from_json(doc: dict) -> Codebook:
    _check_keys(doc, _TOP_KEYS, {"factors", "variables"}, "codebook")
    factors = []
    for i, f in enumerate(doc["factors"]):
        _check_keys(f, _FACTOR_KEYS, _FACTOR_KEYS, f"factors[{i}]")
        factors.append((f["name"], f["project"]))
    variables = []
    for i, v in enumerate(doc["variables"]):
        _check_keys(v, _VARIABLE_KEYS, _VARIABLE_KEYS - {"levels"}, f"variables[{i}]")
        if not isinstance(v["included"], bool):
            raise CodebookParseError(f"variables[{i}].included must be a boolean")
        variables.append(
            VariableSpec(
                id=str(v["id"]),
                project=v["project"],
                factor=v["factor"],
                kind=v["kind"],
                levels=tuple(str(x) for x in v.get("levels", ())),
                included=v["included"],
            )
        )
    sentinels = dict(DEFAULT_SENTINELS)
    sentinels.update(doc.get("sentinels", {}))
    return Codebook(tuple(variables), tuple(factors), sentinels)


def load_codebook(path) -> Codebook:
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CodebookParseError(exc.msg, line=exc.lineno) from exc
    return codebook_from_json(doc)


def dumps_codebook(cb: Codebook) -> str:
    return json.dumps(cb.to_json(), indent=2, ensure_ascii=False) + "\n"


def save_codebook(cb: Codebook, path) -> None:
    Path(path).write_text(dumps_codebook(cb), encoding="utf-8")


# -- reference schemas -----------------------------------------------------

# (categorical, numerical) variable counts per factor, grouped by project.
MIDUS_FACTOR_COUNTS: dict[str, list[tuple[str, int, int]]] = {
    "Survey": [
        ("Administration", 3, 3),
        ("Caregiving", 20, 5),
        ("Children", 16, 8),
        ("Community Involvement", 30, 59),
        ("Discrimination", 21, 13),
        ("Education, Occupation, and Marital Status", 71, 29),
        ("Finances", 34, 35),
        ("Health", 231, 43),
        ("Health Insurance", 42, 0),
        ("Health Questions for Women", 53, 4),
        ("Household Roster and Children", 256, 68),
        ("Life Overall", 0, 6),
        ("Life Satisfaction", 10, 0),
        ("Living Arrangements", 11, 2),
        ("Marriage or Close Relationship", 36, 21),
        ("Parent's Health", 6, 4),
        ("Personal Beliefs", 310, 95),
        ("Race and Ethnicity", 71, 0),
        ("Religion and Spirituality", 48, 8),
        ("Sexuality", 6, 6),
        ("Social Networks", 52, 7),
        ("Work", 108, 31),
        ("Your Health", 294, 55),
        ("Your Neighborhood", 16, 4),
    ],
    # The 10 BTACT scores, split by subtest.
    "Cognitive": [
        ("Backward Counting", 0, 1),
        ("Category Fluency", 0, 1),
        ("Delayed Word List Recall", 0, 1),
        ("Digits Backward", 0, 1),
        ("Immediate Word List Recall", 0, 1),
        ("Number Series", 0, 2),
        ("Stop and Go Switch Task - Composite Scores", 0, 3),
    ],
    "DailyDiary": [
        ("Affect", 27, 0),
        ("Assistance", 52, 4),
        ("Cortisol", 4, 4),
        ("Daily Discrimination", 21, 0),
        ("Daily Medications", 10, 0),
        ("Daily Stressors", 129, 14),
        ("Disability Assistance", 26, 2),
        ("Emotional Support", 51, 4),
        ("Health Behaviors", 2, 0),
        ("Physical Symptoms", 56, 0),
        ("Positive Events", 20, 10),
        ("Scale Variables", 13, 9),
        ("Time use", 13, 16),
        ("Week Summary", 35, 0),
        ("Work Behaviors", 8, 0),
    ],
    "Biomarkers": [
        ("Actigraphy", 128, 217),
        ("Assay Data", 1, 62),
        ("Medical History", 493, 94),
        ("Medication Chart", 204, 81),
        ("Musculoskeletal", 6, 17),
        ("Physical Exam", 263, 42),
        ("Pittsburgh Sleep Questionnaire (PSQ)", 22, 10),
        ("Psychophysiology Protocol", 32, 153),
        ("Self-Administrated Questionnaire (SAQ)", 405, 43),
    ],
}


def build_codebook(
    counts: dict[str, list[tuple[str, int, int]]],
    levels_for=lambda factor, j: 3,
) -> Codebook:
    """Construct a codebook from per-factor (categorical, numerical) counts.

    Variable ids are ``<project initial><factor index>_<c|n><j>``; categorical
    level counts come from ``levels_for(factor, j)``.
    """
    factors, variables = [], []
    idx = 0
    for project in PROJECTS:
        for name, n_cat, n_num in counts.get(project, []):
            factors.append((name, project))
            prefix = f"{project[0]}{idx:02d}"
            for j in range(n_num):
                variables.append(VariableSpec(f"{prefix}_n{j}", project, name, NUMERICAL))
            for j in range(n_cat):
                n_levels = levels_for(name, j)
                variables.append(
                    VariableSpec(
                        f"{prefix}_c{j}", project, name, CATEGORICAL,
                        tuple(f"L{k}" for k in range(n_levels)),
                    )
                )
            idx += 1
    return Codebook(tuple(variables), tuple(factors))


def midus_codebook(levels_for=lambda factor, j: 3) -> Codebook:
    """55-factor codebook with the per-factor variable counts of the MIDUS aggregate."""
    return build_codebook(MIDUS_FACTOR_COUNTS, levels_for)


def synthetic_codebook(
    n_factors: int = 55,
    numerical_per_factor: int = 3,
    categorical_per_factor: int = 1,
    n_levels: int = 3,
    n_cognitive: int = 3,
) -> Codebook:
    """Small uniform codebook: ``n_cognitive`` Cognitive factors, the rest spread
    round-robin over Survey, DailyDiary and Biomarkers."""
    if n_factors < 1 or not 0 <= n_cognitive <= n_factors:
        raise ValueError("need n_factors >= 1 and 0 <= n_cognitive <= n_factors")
    others = ("Survey", "DailyDiary", "Biomarkers")
    counts: dict[str, list] = {p: [] for p in PROJECTS}
    for i in range(n_cognitive):
        counts["Cognitive"].append((f"F{i:02d}", 0, max(numerical_per_factor, 1)))
    for i in range(n_cognitive, n_factors):
        counts[others[(i - n_cognitive) % 3]].append(
            (f"F{i:02d}", categorical_per_factor, numerical_per_factor)
        )
    return build_codebook(counts, lambda f, j: n_levels)
