import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sparsebench.codebook import CATEGORICAL, NUMERICAL, Codebook, VariableSpec, codebook_from_json, synthetic_codebook
from sparsebench.dataio import (
    INAPPLICABLE, INVALID, MISSING, PRESENT, ConfigError, Dataset, IngestError, SynthConfig,
    evaluate_outcome_terms, generate_synthetic, ingest, sparsity, sparsity_per_row, write_dataset_csv,
    write_ground_truth,
)

CB = {
    "factors": [{"name": "A", "project": "Survey"}, {"name": "B", "project": "DailyDiary"}],
    "variables": [
        {"id": "a1", "project": "Survey", "factor": "A", "kind": "Numerical", "included": True},
        {"id": "a2", "project": "Survey", "factor": "A", "kind": "Categorical", "levels": ["x", "y"],
         "included": True},
        {"id": "b1", "project": "DailyDiary", "factor": "B", "kind": "Numerical", "included": True},
        {"id": "b2", "project": "DailyDiary", "factor": "B", "kind": "Numerical", "included": True},
    ],
}


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


HEADER = ["participant_id", "a1", "a2", "b1", "b2", "outcome:EF_M2"]


def test_sparsity_three_by_four(tmp_path):
    cb = codebook_from_json(CB)
    rows = [["p1", "1.5", "x", "", "2"], ["p2", "2.5", "y", "3", "4"], ["p3", "", "x", "5", "6"]]
    rows = [r + ["10"] for r in rows]
    ds = ingest(cb, write_csv(tmp_path / "d.csv", HEADER, rows))
    assert sparsity(ds) == 2
    assert sparsity_per_row(ds) == [1, 0, 1]
    assert ds.cell(0, 2).state == MISSING
    assert ds.cell(1, 1).value == 1
    assert repr(ds.cell(0, 0)) == "Present(1.5)"


def test_sentinel_classes(tmp_path):
    cb = codebook_from_json(CB)
    rows = [["p1", "INVALID", "INAPP", "", "1", "3"], ["p2", "2", "x", "4", "2", ""],
            ["p3", "3", "y", "5", "3", "4.5"]]
    ds = ingest(cb, write_csv(tmp_path / "d.csv", HEADER, rows))
    assert [ds.cell(0, j).state for j in range(4)] == [INVALID, INAPPLICABLE, MISSING, PRESENT]
    assert np.isnan(ds.outcomes["EF_M2"][1])
    assert ds.outcomes["EF_M2"][2] == 4.5


def test_zero_variance_demoted(tmp_path):
    cb = codebook_from_json(CB)
    rows = [["p1", "1", "x", "7", "1", "0"], ["p2", "2", "y", "7", "2", "0"], ["p3", "3", "x", "", "3", "0"]]
    ds = ingest(cb, write_csv(tmp_path / "d.csv", HEADER, rows))
    assert ds.zero_variance == ("b1",)
    assert [v.id for v in ds.variables] == ["a1", "a2", "b2"]
    assert not ds.codebook.variable("b1").included
    assert ds.values.shape == (3, 3)


@pytest.mark.parametrize("token,var", [("abc", "a1"), ("z", "a2"), ("nan", "a1")])
def test_bad_tokens_are_hard_errors(tmp_path, token, var):
    cb = codebook_from_json(CB)
    row = {"a1": "1", "a2": "x", "b1": "1", "b2": "1"}
    row[var] = token
    rows = [["p1", row["a1"], row["a2"], row["b1"], row["b2"], "1"]]
    with pytest.raises(IngestError, match="line 2"):
        ingest(cb, write_csv(tmp_path / "d.csv", HEADER, rows))


def test_header_mismatch(tmp_path):
    cb = codebook_from_json(CB)
    with pytest.raises(IngestError, match="mismatch"):
        ingest(cb, write_csv(tmp_path / "d.csv", ["participant_id", "a1", "a2", "b1"], [["p", "1", "x", "1"]]))
    with pytest.raises(IngestError, match="first column"):
        ingest(cb, write_csv(tmp_path / "e.csv", ["id", "a1", "a2", "b1", "b2"], [["p", "1", "x", "1", "1"]]))


def test_custom_sentinels(tmp_path):
    doc = json.loads(json.dumps(CB))
    doc["sentinels"] = {"missing": "NA", "invalid": "-9", "inapplicable": "-8"}
    cb = codebook_from_json(doc)
    rows = [["p1", "-9", "NA", "-8", "1", "1"], ["p2", "2", "x", "4", "2", "1"], ["p3", "3", "y", "5", "", "1"]]
    with pytest.raises(IngestError):
        ingest(cb, write_csv(tmp_path / "d.csv", HEADER, rows))  # "" is no longer a sentinel
    rows[2][4] = "3"
    ds = ingest(cb, write_csv(tmp_path / "d.csv", HEADER, rows))
    assert [ds.cell(0, j).state for j in range(3)] == [INVALID, MISSING, INAPPLICABLE]


def test_fully_present_rows():
    cb = Codebook(tuple(VariableSpec(f"v{j}", "Survey", "A", NUMERICAL) for j in range(3)), (("A", "Survey"),))
    ds = Dataset(cb, ("a", "b"), np.ones((2, 3)), np.zeros((2, 3), dtype=np.int8))
    assert sparsity_per_row(ds) == [0, 0]


def test_row_all_missing():
    cb = Codebook(tuple(VariableSpec(f"v{j}", "Survey", "A", NUMERICAL) for j in range(5)), (("A", "Survey"),))
    states = np.zeros((2, 5), dtype=np.int8)
    states[1] = MISSING
    values = np.where(states == PRESENT, 1.0, np.nan)
    assert sparsity_per_row(Dataset(cb, ("a", "b"), values, states)) == [0, 5]


def test_mcar_row_sparsity_matches_mask():
    cb = synthetic_codebook(n_factors=10, numerical_per_factor=5, categorical_per_factor=0, n_cognitive=0)
    ds = generate_synthetic(cb, SynthConfig(n_participants=100, missing_rate=0.2, seed=3))
    assert ds.values.shape == (100, 50)
    counted = [sum(1 for j in range(50) if not np.isfinite(ds.values[i, j])) for i in range(100)]
    assert sparsity_per_row(ds) == counted
    assert abs(np.mean(counted) - 10) < 1.0


def test_comp_m2_shaped_sparsity():
    # 881 participants x 8542 predictors with 3,459,284 absent cells
    n, p, target = 881, 8542, 3_459_284
    cb = Codebook(tuple(VariableSpec(f"v{j}", "Survey", "A", NUMERICAL) for j in range(p)), (("A", "Survey"),))
    states = np.zeros(n * p, dtype=np.int8)
    idx = np.random.default_rng(0).choice(n * p, size=target, replace=False)
    states[idx] = np.array([MISSING, INVALID, INAPPLICABLE], dtype=np.int8)[idx % 3]
    states = states.reshape(n, p)
    values = np.where(states == PRESENT, 0.0, np.nan)
    ds = Dataset(cb, tuple(f"p{i}" for i in range(n)), values, states)
    assert sparsity(ds) == 3_459_284
    assert sum(sparsity_per_row(ds)) == 3_459_284


def test_generator_deterministic():
    cb = synthetic_codebook(n_factors=8)
    cfg = SynthConfig(n_participants=40, missing_rate=0.3, block_missing_rate=0.1, seed=7, outcome_fn="Nonlinear")
    a, b = generate_synthetic(cb, cfg), generate_synthetic(cb, cfg)
    np.testing.assert_array_equal(a.values, b.values)
    np.testing.assert_array_equal(a.states, b.states)
    for k in a.outcomes:
        np.testing.assert_array_equal(a.outcomes[k], b.outcomes[k])


def test_generator_no_missing():
    ds = generate_synthetic(synthetic_codebook(n_factors=6), SynthConfig(n_participants=30, seed=1))
    assert sparsity(ds) == 0


def test_linear_outcome_reproducible_from_latents():
    cb = synthetic_codebook(n_factors=10)
    ds = generate_synthetic(cb, SynthConfig(n_participants=50, noise_sd=0.0, seed=11))
    gt = ds.ground_truth
    for m in ("EF", "EM"):
        expect = gt["base_score"] + evaluate_outcome_terms(gt["score_terms"][m], gt["latents"])
        np.testing.assert_allclose(ds.outcomes[f"{m}_M2"], np.maximum(expect, 0), rtol=0, atol=1e-12)
        decline = 0.5 + evaluate_outcome_terms(gt["decline_terms"][m], gt["latents"])
        np.testing.assert_allclose(gt["clean_outcomes"][f"{m}_M3"], expect - decline, atol=1e-12)
    comp = 0.5 * (ds.outcomes["EF_M2"] + ds.outcomes["EM_M2"])
    np.testing.assert_allclose(ds.outcomes["COMP_M2"], comp, atol=1e-12)


def test_ols_recovers_noiseless_linear_outcome():
    from sparsebench.linear_models import fit_ols

    cb = synthetic_codebook(n_factors=6, numerical_per_factor=3, categorical_per_factor=0, n_cognitive=0)
    ds = generate_synthetic(cb, SynthConfig(n_participants=60, noise_sd=0.0, factor_latents=1, seed=5))
    # noiseless numerical variables are affine in the latents, so outcomes are linear in X
    y = ds.outcomes["EF_M2"]
    fit = fit_ols(ds.values, y)
    assert np.sqrt(np.mean((fit.predict(ds.values) - y) ** 2)) < 1e-8


def test_masking_keeps_clean_values():
    cb = synthetic_codebook(n_factors=5)
    ds = generate_synthetic(cb, SynthConfig(n_participants=30, missing_rate=0.4, seed=2))
    present = ds.states == PRESENT
    np.testing.assert_array_equal(ds.values[present], ds.ground_truth["clean_values"][present])
    assert (~present).any()


def test_mixture_missing_rate_varies_rows():
    cb = synthetic_codebook(n_factors=20)
    ds = generate_synthetic(cb, SynthConfig(n_participants=300, missing_rate=(0.2, 0.5, 0.8), seed=0))
    rates = ds.ground_truth["row_missing_rate"]
    assert set(np.round(rates, 3)) == {0.2, 0.5, 0.8}
    frac = ds.sparsity_per_row() / ds.values.shape[1]
    for r in (0.2, 0.5, 0.8):
        assert abs(frac[rates == r].mean() - r) < 0.03


def test_block_missing_is_inapplicable():
    cb = synthetic_codebook(n_factors=6)
    ds = generate_synthetic(cb, SynthConfig(n_participants=200, block_missing_rate=0.3, seed=4))
    assert np.all(np.isin(ds.states, [PRESENT, INAPPLICABLE]))
    factor_of = np.array([v.factor for v in ds.variables])
    for f in set(factor_of):
        block = ds.states[:, factor_of == f]
        assert np.all((block == INAPPLICABLE).all(axis=1) | (block == PRESENT).all(axis=1))


def test_attrition_blanks_m3():
    cb = synthetic_codebook(n_factors=5)
    ds = generate_synthetic(cb, SynthConfig(n_participants=200, attrition=0.25, seed=9))
    assert not np.isnan(ds.outcomes["EF_M2"]).any()
    gone = np.isnan(ds.outcomes["EF_M3"])
    assert 20 < gone.sum() < 80
    np.testing.assert_array_equal(gone, np.isnan(ds.outcomes["COMP_M3"]))


@pytest.mark.parametrize("field,value", [
    ("missing_rate", 1.5), ("n_participants", 1), ("noise_sd", -1.0), ("outcome_fn", "Cubic"),
    ("seed", -3), ("block_missing_rate", 2.0),
])
def test_config_errors_name_field(field, value):
    with pytest.raises(ConfigError) as exc:
        SynthConfig(**{field: value})
    assert exc.value.field == field
    assert field in str(exc.value)


def test_config_dict_round_trip():
    cfg = SynthConfig(missing_rate=(0.2, 0.5), seed=3)
    assert SynthConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    with pytest.raises(ConfigError):
        SynthConfig.from_dict({"colour": 1})


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**32), rate=st.floats(0, 0.9), block=st.floats(0, 0.5))
def test_export_ingest_idempotent(tmp_path_factory, seed, rate, block):
    cb = synthetic_codebook(n_factors=5, n_cognitive=1)
    ds = generate_synthetic(cb, SynthConfig(n_participants=25, missing_rate=rate, block_missing_rate=block, seed=seed))
    path = tmp_path_factory.mktemp("rt") / "d.csv"
    write_dataset_csv(ds, path)
    back = ingest(cb, path)
    keep = [j for j, v in enumerate(ds.variables) if v.id not in back.zero_variance]
    np.testing.assert_array_equal(back.states, ds.states[:, keep])
    np.testing.assert_array_equal(back.values, ds.values[:, keep])
    assert back.participant_ids == ds.participant_ids
    for k in ds.outcomes:
        np.testing.assert_array_equal(back.outcomes[k], ds.outcomes[k])
    assert sparsity(back) == sum(sparsity_per_row(back))


def test_ground_truth_sidecar(tmp_path):
    ds = generate_synthetic(synthetic_codebook(n_factors=4), SynthConfig(n_participants=10, seed=1))
    write_ground_truth(ds, tmp_path / "gt.json")
    doc = json.loads((tmp_path / "gt.json").read_text())
    assert set(doc["latents"]) == set(ds.codebook.factor_names)
    assert doc["config"]["seed"] == 1


def test_take_and_without_projects():
    cb = synthetic_codebook(n_factors=6, n_cognitive=2)
    ds = generate_synthetic(cb, SynthConfig(n_participants=20, seed=0))
    sub = ds.take([3, 1])
    assert sub.participant_ids == (ds.participant_ids[3], ds.participant_ids[1])
    no_cog = ds.without_projects(["Cognitive"])
    assert all(v.project != "Cognitive" for v in no_cog.variables)
    assert no_cog.values.shape[1] == ds.values.shape[1] - 6
    assert any(v.kind == CATEGORICAL for v in no_cog.variables)


def test_dataset_invariants():
    cb = Codebook((VariableSpec("c", "Survey", "A", CATEGORICAL, ("u", "v")),), (("A", "Survey"),))
    with pytest.raises(ValueError):
        Dataset(cb, ("a",), np.array([[2.0]]), np.zeros((1, 1), dtype=np.int8))
    with pytest.raises(ValueError):
        Dataset(cb, ("a", "b"), np.zeros((1, 1)), np.zeros((1, 1), dtype=np.int8))
