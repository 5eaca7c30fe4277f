"""Suite runner: row matrix, seed pairing, isolation, and the
similarity-vs-gain analysis."""

from __future__ import annotations

import numpy as np
import pytest

import ocarm.experiments as experiments
from ocarm.configs import config_hash
from ocarm.errors import ConfigurationError, InsufficientDataError, UndefinedMetricError
from ocarm.experiments import (
    DISTILLED_ROWS,
    ROW_NAMES,
    MatrixRow,
    SuiteResult,
    TrainParams,
    alignment_gain_analysis,
    model_configs_for,
    oracle_auc,
    ordering_verdicts,
    run_suite,
)

from conftest import small_gen

SMALL_OVERRIDES = dict(
    d_emb=16, d_cat=4, d_repr=8, K=2,
    backbone_hidden=(16, 8), content_mlp_hidden=16, tower_hidden=16,
)


def small_params(**kw) -> TrainParams:
    base = dict(
        epochs_stage1=1, epochs_stage2=1, batch_size=64,
        model_overrides=dict(SMALL_OVERRIDES),
    )
    base.update(kw)
    return TrainParams(**base)


# ---------------------------------------------------------------------------
# row configs


def test_row_configs_cover_the_matrix(gen_config):
    cfgs = model_configs_for(gen_config)
    assert set(cfgs) == set(ROW_NAMES)
    assert cfgs["Base"].content_encoder == "none"
    assert cfgs["Base"].user_encoder == "none"
    assert (cfgs["V1_MLP_MLP"].content_encoder, cfgs["V1_MLP_MLP"].user_encoder) == ("mlp", "mlp")
    assert (cfgs["V2_HAE_MLP"].content_encoder, cfgs["V2_HAE_MLP"].user_encoder) == ("hae", "mlp")
    assert (cfgs["Full"].content_encoder, cfgs["Full"].user_encoder) == ("hae", "sfe")


def test_upper_bound_is_the_full_config(gen_config):
    cfgs = model_configs_for(gen_config)
    # same config object: the upper bound row evaluates the stage-1 teacher
    assert cfgs["Stage1_UpperBound"] is cfgs["Full"]
    assert config_hash(cfgs["Stage1_UpperBound"]) == config_hash(cfgs["Full"])


def test_joint_row_disables_distillation(gen_config):
    cfgs = model_configs_for(gen_config)
    assert cfgs["Stage2_Only"].teacher_pretrained is False
    assert cfgs["Stage2_Only"].stop_gradient is False
    assert cfgs["Full"].teacher_pretrained is True
    assert cfgs["Full"].stop_gradient is True


def test_row_configs_accept_overrides(gen_config):
    cfgs = model_configs_for(gen_config, {"d_emb": 8})
    assert all(c.d_emb == 8 for c in cfgs.values())


# ---------------------------------------------------------------------------
# suite run (one shared tiny run; structure is checked from many angles)


@pytest.fixture(scope="module")
def tiny_suite():
    gen = small_gen(n_users=80)
    reports, artifacts = [], []

    suite = run_suite(
        gen,
        seeds=(0, 1, 2),
        params=small_params(),
        report_sink=lambda name, seed, rep: reports.append((name, seed, rep)),
        artifact_sink=lambda name, seed, model, log: artifacts.append((name, seed, model, log)),
    )
    return suite, reports, artifacts


def test_suite_runs_every_row_per_seed(tiny_suite):
    suite, _, _ = tiny_suite
    seen = {(r.name, r.seed) for r in suite.rows}
    assert seen == {(n, s) for n in ROW_NAMES for s in (0, 1, 2)}
    assert all(r.error is None for r in suite.rows)


def test_only_the_upper_bound_is_leaked(tiny_suite):
    suite, _, _ = tiny_suite
    for row in suite.rows:
        assert row.leaked == (row.name == "Stage1_UpperBound")


def test_similarity_lives_on_distilled_rows(tiny_suite):
    suite, _, _ = tiny_suite
    for row in suite.rows:
        if row.name in DISTILLED_ROWS:
            assert set(row.similarity) == set(row.auc)
            assert all(-1.0 <= v <= 1.0 for v in row.similarity.values())
        else:
            assert row.similarity == {}


def test_aggregate_matches_recomputation(tiny_suite):
    suite, _, _ = tiny_suite
    for name in ROW_NAMES:
        agg = suite.aggregate(name)
        for t, stats in agg.items():
            vals = np.array([r.auc[t] for r in suite.rows_named(name)])
            assert stats["auc_mean"] == pytest.approx(vals.mean())
            assert stats["auc_std"] == pytest.approx(vals.std(ddof=1))
            assert stats["n_seeds"] == 3


def test_deltas_pair_by_seed(tiny_suite):
    suite, _, _ = tiny_suite
    base = {r.seed: r for r in suite.rows_named("Base")}
    deltas = suite.deltas_vs_base("Full")
    full = suite.rows_named("Full")
    for t, vals in deltas.items():
        want = [r.auc[t] - base[r.seed].auc[t] for r in full]
        assert vals == pytest.approx(want)


def test_sinks_see_every_successful_row(tiny_suite):
    suite, reports, artifacts = tiny_suite
    assert {(n, s) for n, s, _ in reports} == {(r.name, r.seed) for r in suite.rows}
    assert len(artifacts) == len(suite.rows)
    for name, seed, model, log in artifacts:
        assert model.config.content_encoder in ("hae", "mlp", "none")
        assert len(log) >= 1


def test_suite_analysis_has_one_point_per_variant_seed(tiny_suite):
    suite, _, _ = tiny_suite
    analysis = suite.alignment_analysis
    assert set(analysis) == {"LT1", "LT7"}
    for stats in analysis.values():
        keys = {(p["variant"], p["seed"]) for p in stats["points"]}
        assert keys == {(v, s) for v in DISTILLED_ROWS for s in (0, 1, 2)}
        assert -1.0 <= stats["spearman"] <= 1.0


def test_unknown_row_is_rejected(gen_config):
    with pytest.raises(ConfigurationError, match="unknown rows"):
        run_suite(gen_config, seeds=(0,), rows=("Base", "NoSuchRow"))


def test_teachers_are_shared_across_rows(monkeypatch):
    gen = small_gen(n_users=60)
    calls = []
    real_train = experiments.train

    def counting_train(cfg, records, train_cfg, **kw):
        calls.append((train_cfg.stage, cfg.content_encoder))
        return real_train(cfg, records, train_cfg, **kw)

    monkeypatch.setattr(experiments, "train", counting_train)
    run_suite(gen, seeds=(0,), params=small_params(), with_analysis=False)
    # stage 1: Base once, one hae teacher (upper bound + Full + V2 share it),
    # one mlp teacher (V1); stage 2: three distilled rows + the joint row
    assert sorted(c for c in calls if c[0] == 1) == [(1, "hae"), (1, "mlp"), (1, "none")]
    assert len([c for c in calls if c[0] == 2]) == 4


def test_failing_row_is_isolated(monkeypatch):
    gen = small_gen(n_users=60)
    real_train = experiments.train

    def flaky_train(cfg, records, train_cfg, **kw):
        if cfg.content_encoder == "mlp":
            raise RuntimeError("boom")
        return real_train(cfg, records, train_cfg, **kw)

    monkeypatch.setattr(experiments, "train", flaky_train)
    suite = run_suite(gen, seeds=(0,), params=small_params())
    by_name = {r.name: r for r in suite.rows}
    assert "RuntimeError: boom" in by_name["V1_MLP_MLP"].error
    for name in ROW_NAMES:
        if name != "V1_MLP_MLP":
            assert by_name[name].error is None, name
    # two surviving variants x one seed = 2 points: not enough to rank
    assert "error" in suite.alignment_analysis


# ---------------------------------------------------------------------------
# alignment analysis on hand-built rows


def _row(name, seed, sim, delta, base=0.7):
    return MatrixRow(
        name=name, seed=seed,
        auc={"LT1": base + delta}, similarity={"LT1": sim},
    )


def _base_row(seed, base=0.7):
    return MatrixRow(name="Base", seed=seed, auc={"LT1": base})


def test_analysis_monotone_points_score_one():
    rows = [_base_row(0)]
    for i, name in enumerate(DISTILLED_ROWS):
        rows.append(_row(name, 0, sim=0.2 + 0.1 * i, delta=0.01 + 0.01 * i))
    out = alignment_gain_analysis(rows)
    assert out["LT1"]["spearman"] == pytest.approx(1.0)
    assert len(out["LT1"]["points"]) == 3


def test_analysis_antitone_points_score_minus_one():
    rows = [_base_row(0)]
    for i, name in enumerate(DISTILLED_ROWS):
        rows.append(_row(name, 0, sim=0.9 - 0.1 * i, delta=0.01 + 0.01 * i))
    assert alignment_gain_analysis(rows)["LT1"]["spearman"] == pytest.approx(-1.0)


def test_analysis_ties_use_average_ranks():
    rows = [_base_row(0)]
    sims = (0.5, 0.5, 0.8)
    deltas = (0.01, 0.02, 0.03)
    for name, s, d in zip(DISTILLED_ROWS, sims, deltas):
        rows.append(_row(name, 0, sim=s, delta=d))
    # ranks (1.5, 1.5, 3) against (1, 2, 3): Pearson of ranks = sqrt(3)/2
    out = alignment_gain_analysis(rows)
    assert out["LT1"]["spearman"] == pytest.approx(np.sqrt(3.0) / 2.0)


def test_analysis_needs_three_points():
    rows = [_base_row(0), _row("Full", 0, 0.5, 0.01), _row("V1_MLP_MLP", 0, 0.4, 0.005)]
    with pytest.raises(InsufficientDataError, match="need at least 3"):
        alignment_gain_analysis(rows)


def test_analysis_skips_rows_without_a_base_seed():
    rows = [_base_row(0)]
    for i, name in enumerate(DISTILLED_ROWS):
        rows.append(_row(name, 0, 0.4 + 0.1 * i, 0.01 * (i + 1)))
    rows.append(_row("Full", 7, 0.99, 0.09))   # seed 7 has no Base run
    out = alignment_gain_analysis(rows)
    assert {p["seed"] for p in out["LT1"]["points"]} == {0}


def test_analysis_skips_failed_rows():
    rows = [_base_row(0)]
    for i, name in enumerate(DISTILLED_ROWS):
        rows.append(_row(name, 0, 0.4 + 0.1 * i, 0.01 * (i + 1)))
    bad = _row("Full", 1, 0.9, 0.05)
    bad.error = "RuntimeError: boom"
    rows.append(bad)
    rows.append(_base_row(1))
    out = alignment_gain_analysis(rows)
    assert all(p["seed"] == 0 for p in out["LT1"]["points"])


def test_analysis_rejects_constant_input():
    rows = [_base_row(0)]
    for name in DISTILLED_ROWS:
        rows.append(_row(name, 0, sim=0.5, delta=0.01))
    with pytest.raises(UndefinedMetricError, match="constant"):
        alignment_gain_analysis(rows)


def test_analysis_with_no_points_raises():
    with pytest.raises(InsufficientDataError):
        alignment_gain_analysis([_base_row(0)])


# ---------------------------------------------------------------------------
# ordering verdicts


def _verdict_suite(v1=0.005, v2=0.010, full=0.020, upper=0.05, joint=-0.04):
    rows = []
    for seed in (0, 1):
        base = {"LT1": 0.70, "LT7": 0.60}
        rows.append(MatrixRow(name="Base", seed=seed, auc=dict(base)))
        for name, gain in (
            ("Stage1_UpperBound", upper), ("Full", full),
            ("Stage2_Only", joint), ("V1_MLP_MLP", v1), ("V2_HAE_MLP", v2),
        ):
            rows.append(MatrixRow(
                name=name, seed=seed,
                auc={t: v + gain for t, v in base.items()},
            ))
    return SuiteResult(rows=rows)


def test_verdicts_all_pass_on_ordered_ladder():
    verdicts = ordering_verdicts(_verdict_suite())
    for t in ("LT1", "LT7"):
        assert verdicts[t] == {
            "upper_exceeds_full": True,
            "full_exceeds_base": True,
            "joint_below_full": True,
            "ladder_ordered": True,
        }


def test_verdicts_catch_inverted_ladder():
    verdicts = ordering_verdicts(_verdict_suite(v1=0.012, v2=0.010))
    assert verdicts["LT1"]["ladder_ordered"] is False
    assert verdicts["LT1"]["full_exceeds_base"] is True


def test_verdicts_apply_margins():
    # upper bound must clear Full by the margin, not merely exceed it
    verdicts = ordering_verdicts(_verdict_suite(full=0.020, upper=0.021))
    assert verdicts["LT1"]["upper_exceeds_full"] is False
    verdicts = ordering_verdicts(_verdict_suite(full=0.004))
    assert verdicts["LT1"]["full_exceeds_base"] is False


def test_verdicts_read_the_analysis():
    suite = _verdict_suite()
    suite.alignment_analysis = {
        "LT1": {"spearman": 0.8}, "LT7": {"spearman": -0.2},
    }
    verdicts = ordering_verdicts(suite)
    assert verdicts["LT1"]["alignment_spearman_positive"] is True
    assert verdicts["LT7"]["alignment_spearman_positive"] is False


def test_verdicts_require_base():
    rows = [MatrixRow(name="Full", seed=0, auc={"LT1": 0.7})]
    with pytest.raises(InsufficientDataError, match="Base"):
        ordering_verdicts(SuiteResult(rows=rows))


def test_verdicts_ignore_failed_seeds():
    suite = _verdict_suite()
    bad = MatrixRow(name="Full", seed=2, auc={}, error="boom")
    suite.rows.append(bad)
    verdicts = ordering_verdicts(suite)   # must not crash on the empty auc
    assert verdicts["LT1"]["full_exceeds_base"] is True


# ---------------------------------------------------------------------------
# oracle reference


def test_oracle_auc_is_deterministic_and_bounded(small_datasets, gen_config):
    _, test = small_datasets
    a = oracle_auc(gen_config, test.records, n_mc=60, max_records=60)
    b = oracle_auc(gen_config, test.records, n_mc=60, max_records=60)
    assert a == b
    assert set(a) == {"LT1", "LT7"}
    for v in a.values():
        assert 0.0 <= v <= 1.0
