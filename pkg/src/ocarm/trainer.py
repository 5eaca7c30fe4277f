"""Two-stage training loop and byte-stable checkpoints.

Stage 1 fits the content (teacher) path with leaked onboarding input;
stage 2 re-initializes the deployable model, copies the teacher groups
in frozen, and fits the student path with the alignment loss.  The
joint ablation (``teacher_pretrained=False`` + ``stop_gradient=False``)
trains everything in one pass instead.

Checkpoints are written as a single JSON header line followed by the
raw little-endian parameter bytes and guarded by a SHA-256 payload
digest, so a rerun of the same config produces a byte-identical file.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .configs import ModelConfig, TrainConfig, config_from_dict, config_to_dict
from .datagen import UserJourneyRecord
from .errors import (
    CheckpointIncompatibleError,
    CheckpointIntegrityError,
    ContractError,
    NumericError,
)
from .model import FeatureBatch, OnboardingBatch, RetentionModel, build_model, pack_records

_SHUFFLE_STREAM = 17

#: groups copied from the stage-1 model and held fixed during stage 2: the
#: content branch plus the shared embedding tables it reads.
TEACHER_GROUPS = ("embeddings", "hae", "hae_proj")


@dataclass
class LossRecord:
    step: int
    epoch: int
    total: float
    bce: float | None = None
    align: float | None = None


@dataclass
class TrainResult:
    model: RetentionModel
    loss_log: list[LossRecord] = field(default_factory=list)
    steps: int = 0

    @property
    def final_loss(self) -> float | None:
        return self.loss_log[-1].total if self.loss_log else None


def _dtype(precision: str) -> torch.dtype:
    return torch.float64 if precision == "float64" else torch.float32


def slice_batch(
    batch: FeatureBatch, onb: OnboardingBatch | None, idx: torch.Tensor
) -> tuple[FeatureBatch, OnboardingBatch | None]:
    sub = FeatureBatch(
        profile_cat=batch.profile_cat[idx],
        profile_dense=batch.profile_dense[idx],
        hist_ids=batch.hist_ids[idx],
        hist_mask=batch.hist_mask[idx],
        ad_ids=batch.ad_ids[idx],
        ad_mask=batch.ad_mask[idx],
        labels=None if batch.labels is None else batch.labels[idx],
        user_ids=None if batch.user_ids is None else batch.user_ids[idx],
    )
    sub_onb = None
    if onb is not None:
        sub_onb = OnboardingBatch(day_ids=onb.day_ids[idx], day_mask=onb.day_mask[idx])
    return sub, sub_onb


def copy_parameter_groups(
    dst: RetentionModel, src: RetentionModel, groups: Sequence[str]
) -> None:
    """Copy named parameter groups bitwise from src into dst."""
    src_groups = src.parameter_groups()
    dst_groups = dst.parameter_groups()
    for g in groups:
        sp, dp = src_groups[g], dst_groups[g]
        if len(sp) != len(dp):
            raise CheckpointIncompatibleError(
                f"group {g!r} has {len(sp)} tensors in the source model but "
                f"{len(dp)} in the target (encoder configs differ?)"
            )
        with torch.no_grad():
            for s, d in zip(sp, dp):
                if s.shape != d.shape:
                    raise CheckpointIncompatibleError(
                        f"group {g!r}: shape {tuple(s.shape)} does not fit {tuple(d.shape)}"
                    )
                d.copy_(s.to(d.dtype))


def _freeze(model: RetentionModel, groups: Sequence[str]) -> list[torch.nn.Parameter]:
    """Set requires_grad per group; returns the still-trainable parameters."""
    frozen = set(groups)
    trainable: list[torch.nn.Parameter] = []
    for name, params in model.parameter_groups().items():
        for p in params:
            p.requires_grad_(name not in frozen)
            if name not in frozen:
                trainable.append(p)
    return trainable


def train(
    model_config: ModelConfig,
    records: Sequence[UserJourneyRecord],
    train_config: TrainConfig,
    teacher_source: RetentionModel | None = None,
    on_step: Callable[[LossRecord], None] | None = None,
) -> TrainResult:
    """Run one training stage and return the fitted model plus loss log.

    Stage 1 optimizes the teacher path (embeddings, content encoder and
    its per-task heads, backbone); ``teacher_source`` must be omitted.
    Stage 2 starts from fresh weights, copies the teacher groups
    (embeddings and content branch) over from ``teacher_source``,
    freezes them, and optimizes the student path against alignment
    targets recomputed each step through the frozen branch.  With
    ``teacher_pretrained=False`` no source is given and all groups train
    jointly against the model's own content branch.
    """
    model_config.validate()
    train_config.validate()
    torch.set_num_threads(1)
    dtype = _dtype(train_config.precision)

    if train_config.stage == 1:
        if teacher_source is not None:
            raise ContractError("stage 1 does not take a teacher model")
        model = build_model(model_config, train_config.seed, dtype=dtype)
        freeze = set(train_config.freeze_groups) | {"sfe", "task_towers"}
    else:
        if model_config.user_encoder == "none":
            raise ContractError("stage 2 requires a user encoder")
        model = build_model(model_config, train_config.seed, dtype=dtype)
        if model_config.teacher_pretrained:
            if teacher_source is None:
                raise ContractError(
                    "stage 2 with teacher_pretrained=True needs a stage-1 model"
                )
            copy_parameter_groups(model, teacher_source, TEACHER_GROUPS)
            freeze = set(train_config.freeze_groups) | set(TEACHER_GROUPS)
        else:
            if teacher_source is not None:
                raise ContractError(
                    "teacher_pretrained=False trains the teacher jointly; "
                    "a source model would be ignored"
                )
            freeze = set(train_config.freeze_groups)

    trainable = _freeze(model, sorted(freeze))
    if not trainable:
        raise ContractError("all parameter groups are frozen; nothing to train")
    opt = torch.optim.Adam(trainable, lr=train_config.step_size)

    need_onboarding = model.content_encoder is not None
    batch, onb = pack_records(records, model_config, with_onboarding=need_onboarding,
                              dtype=dtype)

    result = TrainResult(model=model)
    n = len(records)
    step = 0
    for epoch in range(train_config.epochs):
        order = np.random.default_rng(
            [train_config.seed, _SHUFFLE_STREAM, epoch]
        ).permutation(n)
        for start in range(0, n, train_config.batch_size):
            idx = torch.as_tensor(order[start : start + train_config.batch_size])
            sub, sub_onb = slice_batch(batch, onb, idx)
            opt.zero_grad(set_to_none=True)
            if train_config.stage == 1:
                loss = model.loss_stage1(sub, sub_onb)
                rec = LossRecord(step, epoch, float(loss.detach()))
            else:
                loss, bce, align = model.loss_stage2(sub, sub_onb)
                rec = LossRecord(
                    step, epoch, float(loss.detach()), float(bce.detach()), float(align.detach())
                )
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite loss at step {step}: {rec}")
            loss.backward()
            opt.step()
            if step % train_config.eval_every == 0:
                result.loss_log.append(rec)
                if on_step is not None:
                    on_step(rec)
            step += 1
    if train_config.epochs > 0:
        # always log the closing loss
        if not result.loss_log or result.loss_log[-1].step != step - 1:
            result.loss_log.append(rec)
    result.steps = step
    model.eval()
    return result


def predict(
    model: RetentionModel,
    records: Sequence[UserJourneyRecord],
    *,
    use_teacher: bool = False,
    batch_size: int = 2048,
) -> dict[str, np.ndarray]:
    """Score records in batches; returns per-task probability arrays.

    ``use_teacher=True`` scores through the content (teacher) path,
    which reads the privileged onboarding input — evaluation-only.
    """
    dtype = next(model.parameters()).dtype
    out: dict[str, list[np.ndarray]] = {t: [] for t in model.task_names}
    with torch.no_grad():
        for start in range(0, len(records), batch_size):
            chunk = records[start : start + batch_size]
            batch, onb = pack_records(
                chunk, model.config, with_onboarding=use_teacher, with_labels=False,
                dtype=dtype,
            )
            if use_teacher:
                aux = model.teacher_reprs(batch, onb)
                logits = model.backbone_logits(batch, aux)
                probs = {t: torch.sigmoid(v) for t, v in logits.items()}
            else:
                probs = model.infer(batch)
            for t, v in probs.items():
                out[t].append(v.cpu().numpy())
    return {t: np.concatenate(v) for t, v in out.items()}


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_FORMAT = "ocarm-checkpoint-v1"


def _np_dtype_tag(t: torch.dtype) -> str:
    return {"torch.float32": "<f4", "torch.float64": "<f8"}[str(t)]


def save_checkpoint(
    path: str | Path,
    model: RetentionModel,
    *,
    meta: dict | None = None,
) -> None:
    """Write model weights as one JSON header line plus raw array bytes."""
    path = Path(path)
    arrays = []
    blobs = []
    for name, p in model.named_parameters():
        arr = p.detach().cpu().numpy().astype(_np_dtype_tag(p.dtype), copy=False)
        blob = np.ascontiguousarray(arr).tobytes()
        arrays.append(
            {
                "name": name,
                "dtype": _np_dtype_tag(p.dtype),
                "shape": list(p.shape),
                "nbytes": len(blob),
            }
        )
        blobs.append(blob)
    payload = b"".join(blobs)
    header = {
        "format": _FORMAT,
        "model_config": config_to_dict(model.config),
        "arrays": arrays,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "meta": meta or {},
    }
    with path.open("wb") as fh:
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode())
        fh.write(b"\n")
        fh.write(payload)


def load_checkpoint(
    path: str | Path, expected_config: ModelConfig | None = None
) -> tuple[RetentionModel, dict]:
    """Rebuild a model from a checkpoint file; returns (model, meta)."""
    path = Path(path)
    with path.open("rb") as fh:
        header_line = fh.readline()
        payload = fh.read()
    try:
        header = json.loads(header_line)
    except json.JSONDecodeError as exc:
        raise CheckpointIntegrityError(f"{path}: header is not valid JSON: {exc.msg}") from exc
    if header.get("format") != _FORMAT:
        raise CheckpointIntegrityError(
            f"{path}: unknown checkpoint format {header.get('format')!r}"
        )
    digest = hashlib.sha256(payload).hexdigest()
    if digest != header["payload_sha256"]:
        raise CheckpointIntegrityError(
            f"{path}: payload checksum mismatch (file corrupted or truncated)"
        )
    config = config_from_dict(ModelConfig, header["model_config"])
    if expected_config is not None:
        want = config_to_dict(expected_config)
        got = config_to_dict(config)
        diffs = [k for k in want if want[k] != got[k]]
        if diffs:
            detail = ", ".join(f"{k}: expected {want[k]!r}, found {got[k]!r}" for k in diffs)
            raise CheckpointIncompatibleError(f"{path}: config mismatch: {detail}")

    dtype = torch.float64 if any(a["dtype"] == "<f8" for a in header["arrays"]) else torch.float32
    model = build_model(config, seed=0, dtype=dtype)
    params = dict(model.named_parameters())
    offset = 0
    with torch.no_grad():
        for spec_entry in header["arrays"]:
            name = spec_entry["name"]
            if name not in params:
                raise CheckpointIncompatibleError(
                    f"{path}: checkpoint tensor {name!r} has no slot in the model"
                )
            p = params.pop(name)
            want_shape = tuple(spec_entry["shape"])
            if tuple(p.shape) != want_shape:
                raise CheckpointIncompatibleError(
                    f"{path}: tensor {name!r} has shape {want_shape}, model expects {tuple(p.shape)}"
                )
            blob = payload[offset : offset + spec_entry["nbytes"]]
            if len(blob) != spec_entry["nbytes"]:
                raise CheckpointIntegrityError(f"{path}: payload ends inside tensor {name!r}")
            arr = np.frombuffer(blob, dtype=spec_entry["dtype"]).reshape(want_shape)
            p.copy_(torch.from_numpy(arr.copy()).to(p.dtype))
            offset += spec_entry["nbytes"]
    if params:
        missing = sorted(params)
        raise CheckpointIncompatibleError(
            f"{path}: checkpoint is missing tensors {missing[:3]}"
            + ("..." if len(missing) > 3 else "")
        )
    model.eval()
    return model, header.get("meta", {})
