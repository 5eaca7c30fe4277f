"""Experiment matrix: baseline, leaked upper bound, distilled student,
joint-training ablation, and the encoder-capability ladder.

One suite run generates a dataset per seed, trains every requested row
on the same data, and evaluates on the held-out users.  Rows fail in
isolation: an exception in one row is recorded on that row and the rest
of the matrix still runs.
"""

from __future__ import annotations

import dataclasses
import time
import traceback
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.stats import spearmanr

from .configs import GenConfig, ModelConfig, TrainConfig, config_hash
from .datagen import GenContext, UserJourneyRecord, build_catalog, generate_dataset, oracle_score
from .errors import (
    ConfigurationError,
    ContractError,
    InsufficientDataError,
    UndefinedMetricError,
)
from .metrics import (
    EvalReport,
    binarized_labels,
    evaluate,
    mean_alignment_similarity,
    rank_auc,
)
from .trainer import TrainResult, predict, train

#: evaluation rows understood by run_suite, in ladder order
ROW_NAMES = ("Base", "Stage1_UpperBound", "Full", "Stage2_Only", "V1_MLP_MLP", "V2_HAE_MLP")

#: rows trained by distillation against a frozen teacher; these carry the
#: (similarity, gain) points of the alignment analysis
DISTILLED_ROWS = ("Full", "V1_MLP_MLP", "V2_HAE_MLP")

#: margins of the headline comparisons, applied to seed-mean AUC
UPPER_MARGIN = 0.003
FULL_MARGIN = 0.005

#: rows whose evaluation reads the privileged onboarding input
LEAKED_ROWS = frozenset({"Stage1_UpperBound"})


@dataclass
class TrainParams:
    """Budget/shape shared by all rows of a suite run."""

    epochs_stage1: int = 2
    epochs_stage2: int = 2
    batch_size: int = 256
    step_size: float = 1e-3
    precision: str = "float32"
    eval_every: int = 200
    model_overrides: dict = field(default_factory=dict)


@dataclass
class MatrixRow:
    """One (row, seed) evaluation outcome."""

    name: str
    seed: int
    auc: dict[str, float] = field(default_factory=dict)
    gauc: dict[str, float] = field(default_factory=dict)
    similarity: dict[str, float] = field(default_factory=dict)
    leaked: bool = False
    config_hash: str = ""
    seconds: float = 0.0
    error: str | None = None


@dataclass
class SuiteResult:
    rows: list[MatrixRow]
    alignment_analysis: dict[str, dict] | None = None
    runtime_seconds: float = 0.0

    def rows_named(self, name: str) -> list[MatrixRow]:
        return [r for r in self.rows if r.name == name and r.error is None]

    def aggregate(self, name: str) -> dict[str, dict[str, float]]:
        """Per-task mean/stdev of AUC over the seeds of one row."""
        rows = self.rows_named(name)
        if not rows:
            raise InsufficientDataError(f"no successful rows named {name!r}")
        tasks = rows[0].auc.keys()
        out = {}
        for t in tasks:
            vals = np.array([r.auc[t] for r in rows])
            out[t] = {
                "auc_mean": float(vals.mean()),
                "auc_std": float(vals.std(ddof=1)) if len(vals) > 1 else 0.0,
                "n_seeds": len(vals),
            }
        return out

    def deltas_vs_base(self, name: str) -> dict[str, list[float]]:
        """Per-task AUC gains of a row over the same-seed Base row."""
        base_by_seed = {r.seed: r for r in self.rows_named("Base")}
        out: dict[str, list[float]] = {}
        for row in self.rows_named(name):
            if row.seed not in base_by_seed:
                continue
            base = base_by_seed[row.seed]
            for t, v in row.auc.items():
                out.setdefault(t, []).append(v - base.auc[t])
        if not out:
            raise InsufficientDataError(
                f"no seed has both {name!r} and 'Base' rows to compare"
            )
        return out


def model_configs_for(gen: GenConfig, overrides: Mapping | None = None) -> dict[str, ModelConfig]:
    """Model configs per row; Full reuses the stage-1 teacher config object."""
    ov = dict(overrides or {})
    full = ModelConfig.for_gen(gen, content_encoder="hae", user_encoder="sfe", **ov)
    return {
        "Base": ModelConfig.for_gen(gen, content_encoder="none", user_encoder="none", **ov),
        "Stage1_UpperBound": full,
        "Full": full,
        "Stage2_Only": ModelConfig.for_gen(
            gen, content_encoder="hae", user_encoder="sfe",
            teacher_pretrained=False, stop_gradient=False, **ov,
        ),
        "V1_MLP_MLP": ModelConfig.for_gen(gen, content_encoder="mlp", user_encoder="mlp", **ov),
        "V2_HAE_MLP": ModelConfig.for_gen(gen, content_encoder="hae", user_encoder="mlp", **ov),
    }


def _train_cfg(params: TrainParams, stage: int, seed: int) -> TrainConfig:
    return TrainConfig(
        stage=stage,
        epochs=params.epochs_stage1 if stage == 1 else params.epochs_stage2,
        batch_size=params.batch_size,
        step_size=params.step_size,
        seed=seed,
        eval_every=params.eval_every,
        precision=params.precision,
    )


def alignment_gain_analysis(matrix_rows: Sequence[MatrixRow]) -> dict[str, dict]:
    """Relate teacher-student similarity to AUC gain across distilled rows.

    Each distilled (variant, seed) row becomes one point: its mean
    alignment similarity against its AUC gain over the same-seed Base
    row.  Returns, per task, the plot-ready point list and the Spearman
    rank correlation (tie-aware, average ranks) between the two.
    """
    base_by_seed = {
        r.seed: r for r in matrix_rows if r.name == "Base" and r.error is None
    }
    points: dict[str, list[dict]] = {}
    for row in matrix_rows:
        if row.error is not None or row.name == "Base" or not row.similarity:
            continue
        base = base_by_seed.get(row.seed)
        if base is None:
            continue
        for t, sim in row.similarity.items():
            if t not in row.auc or t not in base.auc:
                continue
            points.setdefault(t, []).append(
                {
                    "variant": row.name,
                    "seed": row.seed,
                    "similarity": float(sim),
                    "delta_auc": float(row.auc[t] - base.auc[t]),
                }
            )
    if not points:
        raise InsufficientDataError(
            "no (variant, seed) rows carry both similarity and a Base row to diff"
        )
    out = {}
    for t, pts in sorted(points.items()):
        if len(pts) < 3:
            raise InsufficientDataError(
                f"task {t}: only {len(pts)} similarity points; need at least 3"
            )
        sims = [p["similarity"] for p in pts]
        gains = [p["delta_auc"] for p in pts]
        if len(set(sims)) == 1 or len(set(gains)) == 1:
            raise UndefinedMetricError(
                f"task {t}: rank correlation is undefined on constant input"
            )
        rho, pval = spearmanr(sims, gains)
        out[t] = {"points": pts, "spearman": float(rho), "p_value": float(pval)}
    return out


def run_suite(
    gen_config: GenConfig,
    *,
    seeds: Sequence[int] = (0, 1, 2),
    params: TrainParams | None = None,
    rows: Sequence[str] = ROW_NAMES,
    with_analysis: bool = True,
    on_event: Callable[[str], None] | None = None,
    report_sink: Callable[[str, int, EvalReport], None] | None = None,
    artifact_sink: Callable[[str, int, object, list], None] | None = None,
) -> SuiteResult:
    """Train and evaluate the requested rows for every seed.

    ``report_sink(name, seed, report)`` receives each successful row's
    evaluation report; ``artifact_sink(name, seed, model, loss_log)``
    additionally receives the trained model and its training-loss log
    (the CLI uses both to write run directories).
    """
    params = params or TrainParams()
    unknown = set(rows) - set(ROW_NAMES)
    if unknown:
        raise ConfigurationError(f"unknown rows {sorted(unknown)}; known: {ROW_NAMES}")
    say = on_event or (lambda msg: None)
    t_start = time.monotonic()

    result_rows: list[MatrixRow] = []

    for seed in seeds:
        gen = dataclasses.replace(gen_config, seed=seed)
        say(f"seed {seed}: generating dataset")
        train_ds, test_ds = generate_dataset(gen)
        configs = model_configs_for(gen, params.model_overrides)

        teachers: dict[str, TrainResult] = {}

        def need_teacher(kind: str) -> TrainResult:
            """Train (or reuse) the stage-1 teacher of the given encoder kind."""
            if kind not in teachers:
                cfg = configs["Full"] if kind == "hae" else configs["V1_MLP_MLP"]
                say(f"seed {seed}: training stage-1 {kind} teacher")
                teachers[kind] = train(
                    cfg, train_ds.records, _train_cfg(params, 1, seed)
                )
            return teachers[kind]

        def run_row(name: str):
            t0 = time.monotonic()
            row = MatrixRow(name=name, seed=seed, leaked=name in LEAKED_ROWS)
            try:
                cfg = configs[name]
                row.config_hash = config_hash(cfg)
                if name == "Base":
                    fit = train(cfg, train_ds.records, _train_cfg(params, 1, seed))
                elif name == "Stage1_UpperBound":
                    fit = need_teacher("hae")
                elif name == "Stage2_Only":
                    say(f"seed {seed}: training joint (no-distillation) model")
                    fit = train(cfg, train_ds.records, _train_cfg(params, 2, seed))
                else:
                    teacher = need_teacher("mlp" if name == "V1_MLP_MLP" else "hae")
                    say(f"seed {seed}: training stage-2 row {name}")
                    fit = train(
                        cfg, train_ds.records, _train_cfg(params, 2, seed),
                        teacher_source=teacher.model,
                    )
                model = fit.model

                scores = predict(model, test_ds.records, use_teacher=row.leaked)
                report = evaluate(
                    model, test_ds.records, leaked=row.leaked, scores=scores,
                    extra={"row": name, "seed": seed},
                )
                for t, m in report.task_metrics.items():
                    row.auc[t] = m["auc"]
                    row.gauc[t] = m["gauc"]
                if with_analysis and name in DISTILLED_ROWS:
                    row.similarity = mean_alignment_similarity(model, test_ds.records)
                    report.alignment = dict(row.similarity)
                if report_sink is not None:
                    report_sink(name, seed, report)
                if artifact_sink is not None:
                    artifact_sink(name, seed, model, fit.loss_log)
            except Exception as exc:  # noqa: BLE001 - row isolation is the contract
                row.error = f"{type(exc).__name__}: {exc}"
                say(f"seed {seed}: row {name} failed: {row.error}")
                say(traceback.format_exc(limit=3))
            row.seconds = time.monotonic() - t0
            result_rows.append(row)

        for name in ROW_NAMES:
            if name in rows:
                run_row(name)
        say(f"seed {seed}: done")

    analysis = None
    if with_analysis:
        try:
            analysis = alignment_gain_analysis(result_rows)
        except (InsufficientDataError, UndefinedMetricError) as exc:
            analysis = {"error": str(exc)}

    return SuiteResult(
        rows=result_rows,
        alignment_analysis=analysis,
        runtime_seconds=time.monotonic() - t_start,
    )


def ordering_verdicts(result: SuiteResult) -> dict[str, dict[str, bool]]:
    """Pass/fail of the headline orderings per task, from seed-mean AUCs.

    Emits only the checks whose rows are present in the result:
    ``upper_exceeds_full`` (margin ``UPPER_MARGIN``), ``full_exceeds_base``
    (margin ``FULL_MARGIN``), ``joint_below_full`` (the no-distillation
    run must trail), ``ladder_ordered`` (0 < gain(V1) < gain(V2) <
    gain(Full)), and ``alignment_spearman_positive``.
    """
    means: dict[str, dict[str, float]] = {}
    for name in ROW_NAMES:
        rows = [r for r in result.rows if r.name == name and r.error is None]
        if rows:
            means[name] = {
                t: float(np.mean([r.auc[t] for r in rows]))
                for t in rows[0].auc
            }
    if "Base" not in means:
        raise InsufficientDataError("verdicts need a successful Base row")
    tasks = sorted(means["Base"])
    out: dict[str, dict[str, bool]] = {t: {} for t in tasks}
    for t in tasks:
        v = out[t]
        if "Stage1_UpperBound" in means and "Full" in means:
            v["upper_exceeds_full"] = (
                means["Stage1_UpperBound"][t] >= means["Full"][t] + UPPER_MARGIN
            )
        if "Full" in means:
            v["full_exceeds_base"] = (
                means["Full"][t] >= means["Base"][t] + FULL_MARGIN
            )
        if "Stage2_Only" in means and "Full" in means:
            v["joint_below_full"] = means["Stage2_Only"][t] < means["Full"][t]
        if all(n in means for n in DISTILLED_ROWS):
            g = {n: means[n][t] - means["Base"][t] for n in DISTILLED_ROWS}
            v["ladder_ordered"] = (
                0.0 < g["V1_MLP_MLP"] < g["V2_HAE_MLP"] < g["Full"]
            )
        analysis = result.alignment_analysis or {}
        if t in analysis and "spearman" in analysis[t]:
            v["alignment_spearman_positive"] = analysis[t]["spearman"] > 0.0
    return out


def oracle_auc(
    gen_config: GenConfig,
    records: Sequence[UserJourneyRecord],
    *,
    n_mc: int = 300,
    max_records: int = 4000,
    seed: int = 0,
) -> dict[str, float]:
    """AUC of the latent-aware reference predictor on (a sample of) records.

    No learned model can beat this on average: it conditions on the true
    user latents and the true hazard state after each task's window.
    """
    rng = np.random.default_rng([gen_config.seed, 91, seed])
    if len(records) > max_records:
        idx = rng.choice(len(records), size=max_records, replace=False)
        records = [records[i] for i in sorted(idx)]
    catalog = build_catalog(gen_config, gen_config.seed)
    ctx = GenContext.build(gen_config, catalog)
    tasks = list(gen_config.task_horizons)
    scores = {t: np.empty(len(records)) for t in tasks}
    for i, rec in enumerate(records):
        s = oracle_score(rec, catalog, gen_config, n_mc=n_mc, rng=rng, context=ctx)
        for t in tasks:
            scores[t][i] = s[t]
    return {
        t: rank_auc(binarized_labels(records, t), scores[t]) for t in tasks
    }
