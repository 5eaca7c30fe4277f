"""Command-line entry point: data generation, training, evaluation, and
the experiment matrix, with a manifest written per run directory.

Commands
--------
gen-data            write train/test dataset files from a generator config
train               run one training stage, write checkpoint + loss log
eval                score a checkpoint on a dataset, write an EvalReport
matrix              run the multi-seed experiment suite into a run tree
analyze-alignment   similarity-vs-gain statistics from a matrix run

Relative ``--out-dir`` paths resolve against ``$OCARM_RUN_ROOT`` when it
is set.  Dataset and checkpoint files are byte-stable across reruns;
manifests carry the timestamps.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .configs import (
    GenConfig,
    ModelConfig,
    TrainConfig,
    config_from_dict,
    config_hash,
    load_config,
    save_config,
)
from .datagen import deserialize_dataset, generate_dataset, serialize_dataset
from .errors import (
    ConfigurationError,
    InputError,
    OcarmError,
    SchemaError,
)
from .experiments import (
    ROW_NAMES,
    TrainParams,
    alignment_gain_analysis,
    MatrixRow,
    ordering_verdicts,
    run_suite,
)
from .metrics import EvalReport, evaluate
from .trainer import LossRecord, load_checkpoint, save_checkpoint, train

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

#: errors that indicate bad input rather than a failed computation
_USAGE_ERRORS = (ConfigurationError, InputError, SchemaError)


def _utc_now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


@dataclass
class RunManifest:
    """What a command ran and what it left behind."""

    command: str
    configs: dict[str, dict] = field(default_factory=dict)  # name -> path + hash
    seed: int | None = None
    started_utc: str = ""
    ended_utc: str = ""
    artifacts: dict[str, str] = field(default_factory=dict)
    exit_status: int = 0

    def add_config(self, name: str, path: str | Path, cfg) -> None:
        self.configs[name] = {"path": str(path), "hash": config_hash(cfg)}

    def add_artifact(self, name: str, path: str | Path) -> None:
        self.artifacts[name] = str(path)

    def write(self, out_dir: Path) -> Path:
        """Atomically write manifest.json; on success every artifact must exist."""
        if self.exit_status == 0:
            missing = [p for p in self.artifacts.values() if not Path(p).exists()]
            if missing:
                raise OcarmError(f"artifacts missing at run end: {missing}")
        self.ended_utc = _utc_now()
        path = out_dir / "manifest.json"
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(
            json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
        os.replace(tmp, path)
        return path


def resolve_out_dir(raw: str) -> Path:
    """Create and return the run directory, honouring OCARM_RUN_ROOT."""
    path = Path(raw)
    root = os.environ.get("OCARM_RUN_ROOT")
    if root and not path.is_absolute():
        path = Path(root) / path
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_loss_log(path: Path, loss_log: Sequence[LossRecord]) -> None:
    with path.open("w", encoding="utf-8") as fh:
        for rec in loss_log:
            fh.write(json.dumps(dataclasses.asdict(rec), sort_keys=True))
            fh.write("\n")


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args: argparse.Namespace) -> int:
    cfg = load_config(GenConfig, args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
        cfg.validate()
    out = resolve_out_dir(args.out_dir)
    manifest = RunManifest(command="gen-data", seed=cfg.seed, started_utc=_utc_now())
    manifest.add_config("gen", args.config, cfg)

    train_ds, test_ds = generate_dataset(cfg)
    train_path, test_path = out / "train.jsonl", out / "test.jsonl"
    serialize_dataset(train_ds, train_path)
    serialize_dataset(test_ds, test_path)
    snapshot = out / "gen_config.json"
    save_config(cfg, snapshot)

    manifest.add_artifact("train", train_path)
    manifest.add_artifact("test", test_path)
    manifest.add_artifact("gen_config", snapshot)
    manifest.write(out)
    print(f"wrote {len(train_ds)} train / {len(test_ds)} test records to {out}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    model_cfg = load_config(ModelConfig, args.model_config)
    train_cfg = load_config(TrainConfig, args.train_config)
    if train_cfg.stage != args.stage:
        train_cfg = dataclasses.replace(train_cfg, stage=args.stage)
        train_cfg.validate()

    teacher = None
    needs_teacher = args.stage == 2 and model_cfg.teacher_pretrained
    if needs_teacher and not args.teacher_ckpt:
        raise ConfigurationError(
            "stage 2 with teacher_pretrained=true needs --teacher-ckpt "
            "(a stage-1 checkpoint to distill from)"
        )
    if args.teacher_ckpt and not needs_teacher:
        raise ConfigurationError(
            "--teacher-ckpt only applies to stage 2 with teacher_pretrained=true"
        )
    if args.teacher_ckpt:
        teacher, tmeta = load_checkpoint(args.teacher_ckpt)
        if tmeta.get("stage") != 1:
            raise ConfigurationError(
                f"teacher checkpoint {args.teacher_ckpt} is tagged "
                f"stage={tmeta.get('stage')!r}; the teacher must be a stage-1 run"
            )

    data_path = Path(args.data_dir) / "train.jsonl"
    if not data_path.exists():
        raise InputError(f"no train.jsonl under {args.data_dir}")
    dataset = deserialize_dataset(data_path)

    out = resolve_out_dir(args.out_dir)
    manifest = RunManifest(command="train", seed=train_cfg.seed, started_utc=_utc_now())
    manifest.add_config("model", args.model_config, model_cfg)
    manifest.add_config("train", args.train_config, train_cfg)

    result = train(model_cfg, dataset.records, train_cfg, teacher_source=teacher)

    ckpt_path = out / "checkpoint.ckpt"
    save_checkpoint(
        ckpt_path,
        result.model,
        meta={
            "stage": train_cfg.stage,
            "seed": train_cfg.seed,
            "steps": result.steps,
            "train_config_hash": config_hash(train_cfg),
            "data": str(data_path),
        },
    )
    loss_path = out / "loss_log.jsonl"
    _write_loss_log(loss_path, result.loss_log)
    save_config(model_cfg, out / "model_config.json")
    save_config(train_cfg, out / "train_config.json")

    manifest.add_artifact("checkpoint", ckpt_path)
    manifest.add_artifact("loss_log", loss_path)
    manifest.write(out)
    final = result.final_loss
    print(f"stage {train_cfg.stage} done: {result.steps} steps"
          + (f", final loss {final:.4f}" if final is not None else ""))
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    model, meta = load_checkpoint(args.ckpt)
    stage = meta.get("stage")
    if stage == 1 and not args.allow_leakage:
        raise ConfigurationError(
            f"{args.ckpt} is a stage-1 teacher: scoring it reads the "
            "privileged onboarding content, which is unavailable at decision "
            "time.  Pass --allow-leakage only for upper-bound analysis."
        )
    if args.allow_leakage and stage != 1:
        raise ConfigurationError(
            "--allow-leakage applies only to stage-1 teacher checkpoints; "
            f"{args.ckpt} is tagged stage={stage!r}"
        )
    dataset = deserialize_dataset(args.data)
    report = evaluate(
        model,
        dataset.records,
        leaked=bool(args.allow_leakage),
        extra={"checkpoint": str(args.ckpt), "stage": stage},
    )
    report_path = Path(args.report)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report.save(report_path)
    for t, m in sorted(report.task_metrics.items()):
        print(f"{t}: auc={m['auc']:.4f} gauc={m['gauc']:.4f}")
    if report.leaked_evaluation:
        print("leaked-evaluation: true")
    return EXIT_OK


def _parse_seeds(raw: str) -> tuple[int, ...]:
    try:
        seeds = tuple(int(s) for s in raw.split(",") if s.strip() != "")
    except ValueError as exc:
        raise ConfigurationError(f"--seeds must be comma-separated integers, got {raw!r}") from exc
    if not seeds:
        raise ConfigurationError("--seeds must name at least one seed")
    return seeds


def _load_composite(path: str | Path) -> tuple[GenConfig, TrainParams, list[str]]:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(data, dict) or "gen" not in data:
        raise ConfigurationError(f"{path}: composite config needs a 'gen' section")
    gen = config_from_dict(GenConfig, data["gen"])
    train_section = data.get("train", {})
    known = {f.name for f in dataclasses.fields(TrainParams)}
    unknown = set(train_section) - known
    if unknown:
        raise ConfigurationError(
            f"{path}: unknown train fields {sorted(unknown)}; known: {sorted(known)}"
        )
    params = TrainParams(**train_section)
    if "model" in data:
        model_known = {f.name for f in dataclasses.fields(ModelConfig)}
        bad = set(data["model"]) - model_known
        if bad:
            raise ConfigurationError(
                f"{path}: unknown model override fields {sorted(bad)}"
            )
        params.model_overrides = dict(data["model"])
    rows = data.get("rows", list(ROW_NAMES))
    if not isinstance(rows, list) or not all(isinstance(r, str) for r in rows):
        raise ConfigurationError(f"{path}: 'rows' must be a list of row names")
    return gen, params, rows


def cmd_matrix(args: argparse.Namespace) -> int:
    gen, params, rows = _load_composite(args.config)
    seeds = _parse_seeds(args.seeds)
    out = resolve_out_dir(args.out_dir)
    manifest = RunManifest(command="matrix", started_utc=_utc_now())
    manifest.add_config("composite", args.config, gen)

    def run_dir(name: str, seed: int) -> Path:
        d = out / "runs" / name / f"seed{seed}"
        d.mkdir(parents=True, exist_ok=True)
        return d

    def report_sink(name: str, seed: int, report: EvalReport) -> None:
        report.save(run_dir(name, seed) / "report.json")

    def artifact_sink(name: str, seed: int, model, loss_log) -> None:
        d = run_dir(name, seed)
        save_checkpoint(
            d / "checkpoint.ckpt", model,
            meta={"stage": 1 if name in ("Base", "Stage1_UpperBound") else 2,
                  "row": name, "seed": seed},
        )
        _write_loss_log(d / "loss_log.jsonl", loss_log)
        save_config(model.config, d / "model_config.json")

    say = print if args.verbose else (lambda msg: None)
    suite = run_suite(
        gen, seeds=seeds, params=params, rows=rows,
        on_event=say, report_sink=report_sink, artifact_sink=artifact_sink,
    )

    rows_path = out / "rows.jsonl"
    with rows_path.open("w", encoding="utf-8") as fh:
        for row in suite.rows:
            fh.write(json.dumps(dataclasses.asdict(row), sort_keys=True))
            fh.write("\n")

    try:
        verdicts = ordering_verdicts(suite)
    except OcarmError as exc:
        verdicts = {"error": str(exc)}
    # wall-clock numbers stay out of the aggregate so deterministic reruns
    # reproduce it byte for byte (they live in rows.jsonl and the manifest)
    aggregate = {
        "seeds": list(seeds),
        "rows": {},
        "deltas_vs_base": {},
        "verdicts": verdicts,
        "alignment": suite.alignment_analysis,
    }
    for name in ROW_NAMES:
        if suite.rows_named(name):
            aggregate["rows"][name] = suite.aggregate(name)
            if name != "Base":
                try:
                    aggregate["deltas_vs_base"][name] = suite.deltas_vs_base(name)
                except OcarmError:
                    pass
    agg_path = out / "aggregate.json"
    agg_path.write_text(json.dumps(aggregate, indent=2, sort_keys=True) + "\n",
                        encoding="utf-8")

    point_paths = []
    analysis = suite.alignment_analysis or {}
    for task, stats in sorted(analysis.items()):
        if not isinstance(stats, dict) or "points" not in stats:
            continue
        p = out / f"alignment_points_{task}.jsonl"
        with p.open("w", encoding="utf-8") as fh:
            for pt in stats["points"]:
                fh.write(json.dumps(pt, sort_keys=True))
                fh.write("\n")
        point_paths.append(p)

    failed = [r for r in suite.rows if r.error is not None]
    manifest.add_artifact("rows", rows_path)
    manifest.add_artifact("aggregate", agg_path)
    for p in point_paths:
        manifest.add_artifact(p.stem, p)
    manifest.exit_status = EXIT_FAILURE if failed else EXIT_OK
    manifest.write(out)

    for name in ROW_NAMES:
        done = suite.rows_named(name)
        if done:
            per_task = aggregate["rows"][name]
            stats = " ".join(
                f"{t}={v['auc_mean']:.4f}" for t, v in sorted(per_task.items())
            )
            print(f"{name:18s} {stats}  ({len(done)} seeds)")
    for row in failed:
        print(f"FAILED {row.name} seed {row.seed}: {row.error}", file=sys.stderr)
    print(f"aggregate report: {agg_path}")
    return EXIT_FAILURE if failed else EXIT_OK


def cmd_analyze_alignment(args: argparse.Namespace) -> int:
    rows_path = Path(args.run_dir) / "rows.jsonl"
    if not rows_path.exists():
        raise InputError(f"no rows.jsonl under {args.run_dir}; run the matrix command first")
    rows = []
    with rows_path.open("r", encoding="utf-8") as fh:
        for i, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rows.append(MatrixRow(**json.loads(line)))
            except (json.JSONDecodeError, TypeError) as exc:
                raise InputError(f"{rows_path}: line {i}: bad row record: {exc}") from exc
    analysis = alignment_gain_analysis(rows)
    report_path = Path(args.report)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.write_text(json.dumps(analysis, indent=2, sort_keys=True) + "\n",
                           encoding="utf-8")
    for task, stats in sorted(analysis.items()):
        print(f"{task}: spearman={stats['spearman']:+.3f} over {len(stats['points'])} points"
              f" (p={stats['p_value']:.3g})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ocarm",
        description="Two-stage retention model over onboarding content: "
                    "data generation, training, evaluation, experiments.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate train/test dataset files")
    p.add_argument("--config", required=True, help="generator config (JSON)")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--data-dir", required=True, help="directory holding train.jsonl")
    p.add_argument("--model-config", required=True)
    p.add_argument("--train-config", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--teacher-ckpt", default=None,
                   help="stage-1 checkpoint to distill from (stage 2)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="dataset file (.jsonl)")
    p.add_argument("--report", required=True, help="where to write the report JSON")
    p.add_argument("--allow-leakage", action="store_true",
                   help="permit scoring a stage-1 teacher through the "
                        "privileged content path (upper-bound analysis only)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("matrix", help="run the multi-seed experiment suite")
    p.add_argument("--config", required=True, help="composite config with a 'gen' section")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seeds", default="0,1,2", help="comma-separated seed list")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_matrix)

    p = sub.add_parser("analyze-alignment",
                       help="similarity-vs-gain statistics from a matrix run")
    p.add_argument("--run-dir", required=True, help="matrix output directory")
    p.add_argument("--report", required=True, help="where to write the analysis JSON")
    p.set_defaults(func=cmd_analyze_alignment)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except _USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OcarmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
