"""Ranking metrics and evaluation reports.

AUC is the Mann-Whitney statistic computed from tie-averaged ranks;
grouped AUC averages per-group AUCs weighted by group size, skipping
groups that contain only one class.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .configs import config_hash
from .datagen import UserJourneyRecord
from .errors import ContractError, InputError, UndefinedMetricError
from .model import RetentionModel, pack_records
from .trainer import predict


def rank_auc(labels: np.ndarray, scores: np.ndarray) -> float:
    """P(score of a positive > score of a negative), ties counted half.

    ``labels`` is boolean (or 0/1); raises UndefinedMetricError when only
    one class is present.
    """
    labels = np.asarray(labels).astype(bool)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.shape != scores.shape or labels.ndim != 1:
        raise InputError(
            f"labels {labels.shape} and scores {scores.shape} must be equal-length vectors"
        )
    if not np.isfinite(scores).all():
        raise InputError("scores contain non-finite values")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(
            f"AUC undefined: {n_pos} positives, {n_neg} negatives"
        )
    ranks = rankdata(scores, method="average")
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def grouped_auc(
    labels: np.ndarray, scores: np.ndarray, groups: np.ndarray
) -> tuple[float, int]:
    """Size-weighted mean of per-group AUCs; returns (gauc, groups_used).

    Groups with a single class are skipped; raises UndefinedMetricError
    when no group has both classes.
    """
    labels = np.asarray(labels).astype(bool)
    scores = np.asarray(scores, dtype=np.float64)
    groups = np.asarray(groups)
    if not (labels.shape == scores.shape == groups.shape):
        raise InputError("labels, scores, and groups must have identical shapes")
    total_w = 0.0
    acc = 0.0
    used = 0
    order = np.argsort(groups, kind="stable")
    sorted_groups = groups[order]
    boundaries = np.flatnonzero(
        np.r_[True, sorted_groups[1:] != sorted_groups[:-1], True]
    )
    for a, b in zip(boundaries[:-1], boundaries[1:]):
        idx = order[a:b]
        lab = labels[idx]
        if lab.all() or not lab.any():
            continue
        w = float(b - a)
        acc += w * rank_auc(lab, scores[idx])
        total_w += w
        used += 1
    if used == 0:
        raise UndefinedMetricError("no group contains both classes")
    return acc / total_w, used


def binarized_labels(
    records: Sequence[UserJourneyRecord], task: str
) -> np.ndarray:
    """Positive iff the task's revisit count is greater than zero."""
    out = np.zeros(len(records), dtype=bool)
    for i, r in enumerate(records):
        if task not in r.label_counts:
            raise InputError(f"record {r.user_id} has no label for task {task!r}")
        out[i] = r.label_counts[task] > 0
    return out


def mean_alignment_similarity(
    model: RetentionModel,
    records: Sequence[UserJourneyRecord],
    *,
    batch_size: int = 2048,
) -> dict[str, float]:
    """Average cosine(e_u, e_c) per task over records."""
    per_task = alignment_similarities(model, records, batch_size=batch_size)
    return {t: float(v.mean()) for t, v in per_task.items()}


def alignment_similarities(
    model: RetentionModel,
    records: Sequence[UserJourneyRecord],
    *,
    batch_size: int = 2048,
) -> dict[str, np.ndarray]:
    """Per-record cosine(e_u, e_c) per task."""
    import torch

    if model.content_encoder is None or model.user_encoder is None:
        raise ContractError(
            "alignment similarity needs both a content and a user encoder"
        )
    dtype = next(model.parameters()).dtype
    out: dict[str, list[np.ndarray]] = {t: [] for t in model.task_names}
    with torch.no_grad():
        for start in range(0, len(records), batch_size):
            chunk = records[start : start + batch_size]
            batch, onb = pack_records(chunk, model.config, with_labels=False, dtype=dtype)
            e_u = model.student_reprs(batch)
            e_c = model.teacher_reprs(batch, onb)
            for t in model.task_names:
                cos = torch.nn.functional.cosine_similarity(e_u[t], e_c[t], dim=-1, eps=1e-8)
                out[t].append(cos.cpu().numpy())
    return {t: np.concatenate(v) for t, v in out.items()}


@dataclass
class EvalReport:
    """Structured evaluation result; serializes to deterministic JSON."""

    task_metrics: dict[str, dict[str, float]]
    n_records: int
    model_config_hash: str
    leaked_evaluation: bool
    alignment: dict[str, float] | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "task_metrics": self.task_metrics,
                "n_records": self.n_records,
                "model_config_hash": self.model_config_hash,
                "leaked_evaluation": self.leaked_evaluation,
                "alignment": self.alignment,
                "extra": self.extra,
            },
            sort_keys=True,
            indent=2,
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "EvalReport":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(
            task_metrics=data["task_metrics"],
            n_records=data["n_records"],
            model_config_hash=data["model_config_hash"],
            leaked_evaluation=data["leaked_evaluation"],
            alignment=data.get("alignment"),
            extra=data.get("extra", {}),
        )


def evaluate(
    model: RetentionModel,
    records: Sequence[UserJourneyRecord],
    *,
    leaked: bool = False,
    with_alignment: bool = False,
    extra: Mapping | None = None,
    batch_size: int = 2048,
    scores: Mapping[str, np.ndarray] | None = None,
) -> EvalReport:
    """Score records and compute per-task AUC/GAUC.

    ``leaked=True`` routes scoring through the teacher path reading the
    onboarding content — only valid for upper-bound analyses.  Callers
    that already hold per-task scores can pass them to skip the forward
    pass (they must come from the path implied by ``leaked``).
    """
    if not records:
        raise InputError("evaluate needs at least one record")
    if scores is None:
        scores = predict(model, records, use_teacher=leaked, batch_size=batch_size)
    groups = np.array([r.user_id for r in records])
    task_metrics: dict[str, dict[str, float]] = {}
    for t in model.task_names:
        lab = binarized_labels(records, t)
        m: dict[str, float] = {
            "n_pos": int(lab.sum()),
            "n_neg": int((~lab).sum()),
        }
        m["auc"] = rank_auc(lab, scores[t])
        try:
            gauc, used = grouped_auc(lab, scores[t], groups)
            m["gauc"] = gauc
            m["gauc_groups"] = used
        except UndefinedMetricError:
            m["gauc"] = float("nan")
            m["gauc_groups"] = 0
        task_metrics[t] = m
    alignment = None
    if with_alignment:
        alignment = mean_alignment_similarity(model, records, batch_size=batch_size)
    return EvalReport(
        task_metrics=task_metrics,
        n_records=len(records),
        model_config_hash=config_hash(model.config),
        leaked_evaluation=leaked,
        alignment=alignment,
        extra=dict(extra or {}),
    )
