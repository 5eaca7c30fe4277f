"""Model components for onboarding-aware retention prediction.

Two encoders feed a shared gated backbone:

* a content encoder (teacher) that reads the onboarding day-by-day item
  record through intra-day cross-attention and inter-day causal
  self-attention, and
* a user encoder (student) that compresses observable history/ad
  sequences with a small set of learned query tokens.

The teacher is trained with deliberately leaked onboarding content; the
student is then aligned to the frozen teacher representation and is the
only encoder consulted at inference time.

All attention ops canonicalize their inputs to the fixed caps from the
model config before any kernel runs, and masked slots are zeroed by
construction.  This makes padding amount, masked-slot contents, and
future-day contents provably irrelevant to the output bytes, not just
approximately so.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .configs import ModelConfig, PARAM_GROUPS
from .datagen import UserJourneyRecord
from .errors import ConfigurationError, ContractError, InputError, NumericError

_NEG_INF = float("-inf")


# ---------------------------------------------------------------------------
# batching / featurization
# ---------------------------------------------------------------------------


@dataclass
class FeatureBatch:
    """Observable per-record features, padded to config caps.

    Integer id tensors use -1 for padding; the boolean masks are the
    source of truth for validity.
    """

    profile_cat: Tensor          # (B, n_cat) long
    profile_dense: Tensor        # (B, T) float
    hist_ids: Tensor             # (B, L_h) long, -1 pad
    hist_mask: Tensor            # (B, L_h) bool
    ad_ids: Tensor               # (B, L_a) long
    ad_mask: Tensor              # (B, L_a) bool
    labels: Tensor | None = None       # (B, n_tasks) float in [0, 1]
    user_ids: Tensor | None = None     # (B,) long

    def __len__(self) -> int:
        return int(self.profile_cat.shape[0])

    def to(self, dtype: torch.dtype) -> "FeatureBatch":
        return FeatureBatch(
            profile_cat=self.profile_cat,
            profile_dense=self.profile_dense.to(dtype),
            hist_ids=self.hist_ids,
            hist_mask=self.hist_mask,
            ad_ids=self.ad_ids,
            ad_mask=self.ad_mask,
            labels=None if self.labels is None else self.labels.to(dtype),
            user_ids=self.user_ids,
        )


@dataclass
class OnboardingBatch:
    """Privileged onboarding content: per-day item ids, padded to N."""

    day_ids: Tensor              # (B, D, N) long, -1 pad
    day_mask: Tensor             # (B, D, N) bool

    def __len__(self) -> int:
        return int(self.day_ids.shape[0])


def _pad_ids(seqs: Sequence[np.ndarray], cap: int, *, name: str, vocab: int) -> tuple[Tensor, Tensor]:
    out = np.full((len(seqs), cap), -1, dtype=np.int64)
    for i, s in enumerate(seqs):
        s = np.asarray(s, dtype=np.int64)
        if s.size and (s.min() < 0 or s.max() >= vocab):
            bad = int(s.min()) if s.min() < 0 else int(s.max())
            raise InputError(
                f"{name} contains item id {bad} outside vocabulary of size {vocab}"
            )
        s = s[:cap]  # keep the first entries when over cap
        out[i, : len(s)] = s
    ids = torch.from_numpy(out)
    return ids, ids >= 0


def pack_records(
    records: Sequence[UserJourneyRecord],
    config: ModelConfig,
    *,
    with_onboarding: bool = True,
    with_labels: bool = True,
    dtype: torch.dtype = torch.float32,
) -> tuple[FeatureBatch, OnboardingBatch | None]:
    """Pack journey records into padded tensors.

    Sequences longer than the config caps keep their first entries; day
    lists beyond ``config.D`` days raise, since the day axis is
    positional.
    """
    if not records:
        raise InputError("pack_records requires at least one record")
    n_cat = len(config.profile_cat_sizes)
    prof_cat = np.zeros((len(records), n_cat), dtype=np.int64)
    prof_dense = np.zeros((len(records), config.n_topics), dtype=np.float64)
    for i, r in enumerate(records):
        if len(r.profile_cat) != n_cat:
            raise InputError(
                f"profile_cat has {len(r.profile_cat)} fields, expected {n_cat}"
            )
        for j, (v, size) in enumerate(zip(r.profile_cat, config.profile_cat_sizes)):
            if not 0 <= v < size:
                raise InputError(
                    f"profile_cat[{j}] value {v} outside table of size {size}"
                )
            prof_cat[i, j] = v
        dense = np.asarray(r.profile_dense, dtype=np.float64)
        if dense.shape != (config.n_topics,):
            raise InputError(
                f"profile_dense has shape {dense.shape}, expected ({config.n_topics},)"
            )
        prof_dense[i] = dense

    hist_ids, hist_mask = _pad_ids(
        [r.hist_seq for r in records], config.L_h, name="hist_seq", vocab=config.vocab_size
    )
    ad_ids, ad_mask = _pad_ids(
        [r.ad_seq for r in records], config.L_a, name="ad_seq", vocab=config.vocab_size
    )

    labels = None
    if with_labels:
        tasks = [t for t, _ in config.tasks]
        lab = np.zeros((len(records), len(tasks)), dtype=np.float64)
        for i, r in enumerate(records):
            for j, t in enumerate(tasks):
                if t not in r.labels:
                    raise InputError(f"record {r.user_id} is missing label for task {t}")
                lab[i, j] = r.labels[t]
        labels = torch.from_numpy(lab).to(dtype)

    batch = FeatureBatch(
        profile_cat=torch.from_numpy(prof_cat),
        profile_dense=torch.from_numpy(prof_dense).to(dtype),
        hist_ids=hist_ids,
        hist_mask=hist_mask,
        ad_ids=ad_ids,
        ad_mask=ad_mask,
        labels=labels,
        user_ids=torch.tensor([r.user_id for r in records], dtype=torch.int64),
    )

    onb = None
    if with_onboarding:
        day_ids = np.full((len(records), config.D, config.N), -1, dtype=np.int64)
        for i, r in enumerate(records):
            if len(r.onboarding) > config.D:
                raise InputError(
                    f"record {r.user_id} has {len(r.onboarding)} onboarding days, cap is {config.D}"
                )
            for d, items in enumerate(r.onboarding):
                items = np.asarray(items, dtype=np.int64)
                if items.size and (items.min() < 0 or items.max() >= config.vocab_size):
                    bad = int(items.min()) if items.min() < 0 else int(items.max())
                    raise InputError(
                        f"onboarding day {d + 1} contains item id {bad} outside "
                        f"vocabulary of size {config.vocab_size}"
                    )
                items = items[: config.N]
                day_ids[i, d, : len(items)] = items
        ids = torch.from_numpy(day_ids)
        onb = OnboardingBatch(day_ids=ids, day_mask=ids >= 0)
    return batch, onb


# ---------------------------------------------------------------------------
# exact-masking primitives
# ---------------------------------------------------------------------------


def canonicalize_kv(h: Tensor, mask: Tensor, cap: int) -> tuple[Tensor, Tensor]:
    """Trim or zero-pad a key/value bank to exactly ``cap`` slots.

    Masked slots are overwritten with zeros, so the returned tensors are
    a pure function of the valid entries.  Valid entries beyond the cap
    are a contract violation.
    """
    if h.shape[:-1] != mask.shape:
        raise ContractError(f"mask shape {tuple(mask.shape)} does not match values {tuple(h.shape)}")
    n = h.shape[-2]
    if n > cap:
        if bool(mask[..., cap:].any()):
            raise ContractError(f"valid entries beyond cap {cap} (bank has {n} slots)")
        h = h[..., :cap, :]
        mask = mask[..., :cap]
    elif n < cap:
        pad_shape = list(h.shape)
        pad_shape[-2] = cap - n
        h = torch.cat([h, h.new_zeros(pad_shape)], dim=-2)
        mask = torch.cat([mask, mask.new_zeros(pad_shape[:-1], dtype=torch.bool)], dim=-1)
    return h * mask.unsqueeze(-1).to(h.dtype), mask


def masked_softmax(scores: Tensor, mask: Tensor, dim: int = -1) -> Tensor:
    """Softmax over the valid slots; masked slots get exact zeros.

    Requires at least one valid slot along ``dim`` (callers substitute a
    placeholder token for fully-empty banks before reaching here).
    """
    neg = torch.where(mask, scores, scores.new_full((), _NEG_INF))
    m = neg.amax(dim=dim, keepdim=True).detach()
    safe = torch.where(mask, scores, m)      # keeps exp() finite everywhere
    e = torch.exp(safe - m)
    e = torch.where(mask, e, e.new_zeros(()))
    return e / e.sum(dim=dim, keepdim=True)


class CrossAttention(nn.Module):
    """Multi-head cross-attention of a query bank over a masked kv bank."""

    def __init__(self, q_dim: int, kv_dim: int, d_model: int, n_heads: int):
        super().__init__()
        if d_model % n_heads:
            raise ConfigurationError(f"d_model {d_model} not divisible by n_heads {n_heads}")
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.w_q = nn.Linear(q_dim, d_model)
        self.w_k = nn.Linear(kv_dim, d_model)
        self.w_v = nn.Linear(kv_dim, d_model)
        self.w_o = nn.Linear(d_model, d_model)

    def forward(self, q_in: Tensor, kv: Tensor, mask: Tensor) -> Tensor:
        # q_in (B, Q, q_dim); kv (B, n, kv_dim); mask (B, n) with kv
        # already canonicalized (fixed n, masked rows zeroed).
        b, nq, _ = q_in.shape
        q = self.w_q(q_in).view(b, nq, self.n_heads, self.d_head)
        k = self.w_k(kv).view(b, kv.shape[1], self.n_heads, self.d_head)
        v = self.w_v(kv).view(b, kv.shape[1], self.n_heads, self.d_head)
        scores = torch.einsum("bqhd,bnhd->bhqn", q, k) / math.sqrt(self.d_head)
        w = masked_softmax(scores, mask[:, None, None, :], dim=-1)
        ctx = torch.einsum("bhqn,bnhd->bqhd", w, v)
        return self.w_o(ctx.reshape(b, nq, -1))


# ---------------------------------------------------------------------------
# embeddings (shared lookup tables)
# ---------------------------------------------------------------------------


class EmbeddingBank(nn.Module):
    """Item table plus profile embeddings; builds x_u and sequence banks."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.item = nn.Embedding(config.vocab_size, config.d_emb)
        self.cats = nn.ModuleList(
            nn.Embedding(size, config.d_cat) for size in config.profile_cat_sizes
        )
        self.dense_proj = nn.Linear(config.n_topics, config.d_emb)
        nn.init.normal_(self.item.weight, std=0.05)
        for c in self.cats:
            nn.init.normal_(c.weight, std=0.05)

    def profile(self, batch: FeatureBatch) -> Tensor:
        parts = [emb(batch.profile_cat[:, j]) for j, emb in enumerate(self.cats)]
        parts.append(self.dense_proj(batch.profile_dense))
        return torch.cat(parts, dim=-1)            # (B, x_u_dim)

    def items(self, ids: Tensor, mask: Tensor) -> Tensor:
        """Embed item ids; padded slots come out exactly zero."""
        h = self.item(ids.clamp(min=0))
        return h * mask.unsqueeze(-1).to(h.dtype)


def masked_mean(h: Tensor, mask: Tensor) -> Tensor:
    """Mean over valid slots; an all-empty bank pools to zeros."""
    s = (h * mask.unsqueeze(-1).to(h.dtype)).sum(dim=-2)
    n = mask.to(h.dtype).sum(dim=-1, keepdim=True).clamp(min=1.0)
    return s / n


# ---------------------------------------------------------------------------
# content encoder (teacher)
# ---------------------------------------------------------------------------


class HierarchicalContentEncoder(nn.Module):
    """Intra-day cross-attention + inter-day causal self-attention.

    The profile embedding queries each day's item bank to get one vector
    per day; a causal self-attention layer with day-position embeddings
    then mixes earlier days into later ones, never the reverse.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.d_emb
        self.day_attn = CrossAttention(config.x_u_dim, d, d, config.n_heads)
        self.empty_day = nn.Parameter(torch.randn(d) * 0.02)
        self.day_pos = nn.Parameter(torch.randn(config.D, d) * 0.02)
        self.ln = nn.LayerNorm(d)
        self.n_heads = config.n_heads
        self.d_head = d // config.n_heads
        self.w_q = nn.Linear(d, d)
        self.w_k = nn.Linear(d, d)
        self.w_v = nn.Linear(d, d)
        self.w_o = nn.Linear(d, d)

    def day_compress(self, x_u: Tensor, h_days: Tensor, mask: Tensor) -> Tensor:
        """Compress each day's items to one vector. (B, D, N, d) -> (B, D, d)."""
        b, nd, _, d = h_days.shape
        h_flat = h_days.reshape(b * nd, -1, d)
        m_flat = mask.reshape(b * nd, -1)
        h_flat, m_flat = canonicalize_kv(h_flat, m_flat, self.config.N)
        # empty days attend to a learned placeholder in slot 0
        empty = ~m_flat.any(dim=-1)
        if bool(empty.any()):
            ph = self.empty_day.to(h_flat.dtype).expand(b * nd, -1)
            h_flat = h_flat.clone()
            h_flat[:, 0, :] = torch.where(empty.unsqueeze(-1), ph, h_flat[:, 0, :])
            m_flat = m_flat.clone()
            m_flat[:, 0] |= empty
        q = x_u.unsqueeze(1).expand(b, nd, -1).reshape(b * nd, 1, -1)
        out = self.day_attn(q, h_flat, m_flat)      # (B*D, 1, d)
        return out.view(b, nd, d)

    def day_compress_single(self, x_u: Tensor, h_day: Tensor, mask: Tensor) -> Tensor:
        """One-day convenience wrapper: (B, n, d) -> (B, d)."""
        return self.day_compress(x_u, h_day.unsqueeze(1), mask.unsqueeze(1)).squeeze(1)

    def causal_mix(self, s: Tensor) -> Tensor:
        """Causal self-attention over day vectors. (B, D, d) -> (B, D, d).

        Row r is computed from rows 0..r only: keys/values for later days
        are never sliced into the computation, so causality is exact.
        """
        b, nd, d = s.shape
        if nd != self.config.D:
            raise ContractError(f"expected {self.config.D} day vectors, got {nd}")
        u = s + self.day_pos.to(s.dtype)
        y = self.ln(u)
        q = self.w_q(y).view(b, nd, self.n_heads, self.d_head)
        k = self.w_k(y).view(b, nd, self.n_heads, self.d_head)
        v = self.w_v(y).view(b, nd, self.n_heads, self.d_head)
        rows = []
        for r in range(nd):
            kr, vr = k[:, : r + 1], v[:, : r + 1]
            scores = torch.einsum("bhd,bjhd->bhj", q[:, r], kr) / math.sqrt(self.d_head)
            w = torch.softmax(scores, dim=-1)
            rows.append(torch.einsum("bhj,bjhd->bhd", w, vr).reshape(b, d))
        ctx = torch.stack(rows, dim=1)
        return u + self.w_o(ctx)

    def forward(self, x_u: Tensor, onb_emb: Tensor, onb_mask: Tensor) -> Tensor:
        s = self.day_compress(x_u, onb_emb, onb_mask)
        return self.causal_mix(s)                   # (B, D, d)


class MlpContentEncoder(nn.Module):
    """Ablation teacher: per-day mean pooling, no attention, no profile."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config

    def forward(self, x_u: Tensor, onb_emb: Tensor, onb_mask: Tensor) -> Tensor:
        # (B, D, N, d) -> (B, D, d) day means; empty days stay zero
        return masked_mean(onb_emb, onb_mask)


class TaskProjections(nn.Module):
    """Per-task MLP heads mapping a trunk vector to the shared repr space."""

    def __init__(self, in_dim: int, hidden: int, d_repr: int, tasks: Sequence[str]):
        super().__init__()
        self.heads = nn.ModuleDict(
            {
                t: nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(), nn.Linear(hidden, d_repr))
                for t in tasks
            }
        )

    def forward(self, x: Tensor, task: str) -> Tensor:
        return self.heads[task](x)


# ---------------------------------------------------------------------------
# user encoder (student)
# ---------------------------------------------------------------------------


class QueryCompressor(nn.Module):
    """K learned query tokens cross-attending to a conditioned sequence."""

    def __init__(self, config: ModelConfig, cap: int):
        super().__init__()
        d = config.d_emb
        self.cap = cap
        self.queries = nn.Parameter(torch.randn(config.K, d) * 0.02)
        self.attn = CrossAttention(d, d + config.x_u_dim, d, config.n_heads)
        self.empty_token = nn.Parameter(torch.randn(d) * 0.02)

    def forward(self, h_cond: Tensor, mask: Tensor, x_u: Tensor) -> Tensor:
        b = h_cond.shape[0]
        h_cond, mask = canonicalize_kv(h_cond, mask, self.cap)
        empty = ~mask.any(dim=-1)
        if bool(empty.any()):
            # an all-empty sequence attends to [placeholder; x_u]
            ph = torch.cat([self.empty_token.to(h_cond.dtype).expand(b, -1), x_u], dim=-1)
            h_cond = h_cond.clone()
            h_cond[:, 0, :] = torch.where(empty.unsqueeze(-1), ph, h_cond[:, 0, :])
            mask = mask.clone()
            mask[:, 0] |= empty
        q = self.queries.to(h_cond.dtype).unsqueeze(0).expand(b, -1, -1)
        return self.attn(q, h_cond, mask)            # (B, K, d)


def condition_rows(seq_emb: Tensor, mask: Tensor, x_u: Tensor) -> Tensor:
    """Append the profile embedding to every valid sequence row.

    Masked rows are zeroed in both halves so the conditioned bank stays a
    pure function of the valid entries.
    """
    b, n, _ = seq_emb.shape
    xu = x_u.unsqueeze(1).expand(b, n, -1)
    h = torch.cat([seq_emb, xu], dim=-1)
    return h * mask.unsqueeze(-1).to(h.dtype)


class SequentialUserEncoder(nn.Module):
    """Profile-conditioned query compression of history and ad sequences."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.hist = QueryCompressor(config, config.L_h)
        self.ads = QueryCompressor(config, config.L_a)

    def forward(
        self, x_u: Tensor, hist_emb: Tensor, hist_mask: Tensor, ad_emb: Tensor, ad_mask: Tensor
    ) -> Tensor:
        s_h = self.hist(condition_rows(hist_emb, hist_mask, x_u), hist_mask, x_u)
        s_a = self.ads(condition_rows(ad_emb, ad_mask, x_u), ad_mask, x_u)
        b = x_u.shape[0]
        return torch.cat([x_u, s_h.reshape(b, -1), s_a.reshape(b, -1)], dim=-1)


class MlpUserEncoder(nn.Module):
    """Ablation student: mean-pooled sequences concatenated with the profile."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config

    def forward(
        self, x_u: Tensor, hist_emb: Tensor, hist_mask: Tensor, ad_emb: Tensor, ad_mask: Tensor
    ) -> Tensor:
        return torch.cat(
            [x_u, masked_mean(hist_emb, hist_mask), masked_mean(ad_emb, ad_mask)], dim=-1
        )


# ---------------------------------------------------------------------------
# gated backbone
# ---------------------------------------------------------------------------


class GatedBackbone(nn.Module):
    """MLP whose hidden activations are gated by the profile embedding.

    Each hidden layer h is scaled elementwise by 2*sigmoid(G x_u + c),
    which sits in (0, 2) and equals 1 at a zero gate pre-activation.
    Per-task linear heads emit logits.
    """

    def __init__(self, in_dim: int, x_u_dim: int, hidden: Sequence[int], tasks: Sequence[str]):
        super().__init__()
        self.layers = nn.ModuleList()
        self.gates = nn.ModuleList()
        prev = in_dim
        for h in hidden:
            self.layers.append(nn.Linear(prev, h))
            self.gates.append(nn.Linear(x_u_dim, h))
            prev = h
        self.heads = nn.ModuleDict({t: nn.Linear(prev, 1) for t in tasks})

    def forward(self, x: Tensor, x_u: Tensor, task: str) -> Tensor:
        for layer, gate in zip(self.layers, self.gates):
            x = torch.relu(layer(x)) * (2.0 * torch.sigmoid(gate(x_u)))
        return self.heads[task](x).squeeze(-1)       # (B,) logit


# ---------------------------------------------------------------------------
# full model
# ---------------------------------------------------------------------------


@dataclass
class ForwardTrace:
    """Optional capture of intermediate tensors for inspection/tests."""

    x_u: Tensor | None = None
    day_vectors: Tensor | None = None      # teacher s (B, D, d)
    mixed_days: Tensor | None = None       # teacher s-tilde (B, D, d)
    teacher_reprs: dict[str, Tensor] = field(default_factory=dict)
    student_reprs: dict[str, Tensor] = field(default_factory=dict)
    logits: dict[str, Tensor] = field(default_factory=dict)


class RetentionModel(nn.Module):
    """Teacher/student retention model over a shared embedding bank.

    Parameter groups (used by the trainer for freezing/optimizing):
    ``embeddings`` (lookup tables), ``hae`` (content-encoder trunk),
    ``hae_proj`` (teacher per-task heads), ``sfe`` (user-encoder trunk),
    ``task_towers`` (student per-task heads), ``backbone``.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.task_names = tuple(t for t, _ in config.tasks)
        self.task_horizons = dict(config.tasks)
        self.embeddings = EmbeddingBank(config)

        d = config.d_emb
        if config.content_encoder == "hae":
            self.content_encoder: nn.Module | None = HierarchicalContentEncoder(config)
            proj_in = d
        elif config.content_encoder == "mlp":
            self.content_encoder = MlpContentEncoder(config)
            proj_in = d * config.D
        elif config.content_encoder == "none":
            self.content_encoder = None
            proj_in = 0
        else:  # pragma: no cover - config.validate() rejects this
            raise ConfigurationError(f"unknown content_encoder {config.content_encoder!r}")
        self.content_proj = (
            TaskProjections(proj_in, config.content_mlp_hidden, config.d_repr, self.task_names)
            if self.content_encoder is not None
            else None
        )

        if config.user_encoder == "sfe":
            self.user_encoder: nn.Module | None = SequentialUserEncoder(config)
            tower_in = config.x_u_dim + 2 * config.K * d
        elif config.user_encoder == "mlp":
            self.user_encoder = MlpUserEncoder(config)
            tower_in = config.x_u_dim + 2 * d
        elif config.user_encoder == "none":
            self.user_encoder = None
            tower_in = 0
        else:  # pragma: no cover
            raise ConfigurationError(f"unknown user_encoder {config.user_encoder!r}")
        self.task_towers = (
            TaskProjections(tower_in, config.tower_hidden, config.d_repr, self.task_names)
            if self.user_encoder is not None
            else None
        )

        # The backbone scores [x_u; aux] where aux is e_c (stage 1), e_u
        # (stage 2) or a zero vector (no-encoder baseline).  Sequence
        # information can only reach the score through the aux slot.
        self._aux_dim = config.d_repr
        backbone_in = config.x_u_dim + config.d_repr
        self.backbone = GatedBackbone(
            backbone_in, config.x_u_dim, config.backbone_hidden, self.task_names
        )

    # -- parameter groups ---------------------------------------------------

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        groups: dict[str, list[nn.Parameter]] = {g: [] for g in PARAM_GROUPS}
        groups["embeddings"] = list(self.embeddings.parameters())
        if self.content_encoder is not None:
            groups["hae"] = list(self.content_encoder.parameters())
            groups["hae_proj"] = list(self.content_proj.parameters())
        if self.user_encoder is not None:
            groups["sfe"] = list(self.user_encoder.parameters())
            groups["task_towers"] = list(self.task_towers.parameters())
        groups["backbone"] = list(self.backbone.parameters())
        return groups

    # -- encoders -------------------------------------------------------------

    def profile_embedding(self, batch: FeatureBatch) -> Tensor:
        return self.embeddings.profile(batch)

    def teacher_reprs(
        self, batch: FeatureBatch, onb: OnboardingBatch, trace: ForwardTrace | None = None
    ) -> dict[str, Tensor]:
        """Per-task content representations e_c read from the onboarding.

        Task with horizon d reads the day-d mixed vector (attention
        teacher) or the day means up to d (MLP teacher), so each task
        only ever sees content from days 1..d.
        """
        if self.content_encoder is None:
            raise ContractError("model has no content encoder configured")
        x_u = self.profile_embedding(batch)
        onb_emb = self.embeddings.items(onb.day_ids, onb.day_mask)
        out: dict[str, Tensor] = {}
        if isinstance(self.content_encoder, HierarchicalContentEncoder):
            s = self.content_encoder.day_compress(x_u, onb_emb, onb.day_mask)
            mixed = self.content_encoder.causal_mix(s)
            if trace is not None:
                trace.day_vectors, trace.mixed_days = s, mixed
            for t in self.task_names:
                d = self.task_horizons[t]
                out[t] = self.content_proj(mixed[:, d - 1], t)
        else:
            means = self.content_encoder(x_u, onb_emb, onb.day_mask)   # (B, D, d)
            day_idx = torch.arange(self.config.D, device=means.device)
            for t in self.task_names:
                d = self.task_horizons[t]
                keep = (day_idx < d).view(1, -1, 1)
                visible = torch.where(keep, means, means.new_zeros(()))
                out[t] = self.content_proj(visible.reshape(len(batch), -1), t)
        if trace is not None:
            trace.x_u = x_u
            trace.teacher_reprs = out
        return out

    def student_reprs(self, batch: FeatureBatch, trace: ForwardTrace | None = None) -> dict[str, Tensor]:
        """Per-task user representations e_u from observable features only."""
        if self.user_encoder is None:
            raise ContractError("model has no user encoder configured")
        x_u = self.profile_embedding(batch)
        h = self.embeddings.items(batch.hist_ids, batch.hist_mask)
        a = self.embeddings.items(batch.ad_ids, batch.ad_mask)
        trunk = self.user_encoder(x_u, h, batch.hist_mask, a, batch.ad_mask)
        out = {t: self.task_towers(trunk, t) for t in self.task_names}
        if trace is not None:
            trace.x_u = x_u
            trace.student_reprs = out
        return out

    # -- scoring --------------------------------------------------------------

    def backbone_logits(
        self, batch: FeatureBatch, aux: Mapping[str, Tensor] | None
    ) -> dict[str, Tensor]:
        x_u = self.profile_embedding(batch)
        out: dict[str, Tensor] = {}
        zero_aux: Tensor | None = None
        for t in self.task_names:
            if aux is None:
                if zero_aux is None:
                    zero_aux = x_u.new_zeros(len(x_u), self._aux_dim)
                vec = zero_aux
            elif t not in aux:
                raise ContractError(f"missing auxiliary representation for task {t}")
            else:
                vec = aux[t]
            out[t] = self.backbone(torch.cat([x_u, vec], dim=-1), x_u, t)
        return out

    def infer(self, batch: FeatureBatch) -> dict[str, Tensor]:
        """Deployment-path scores from observable features only."""
        aux = self.student_reprs(batch) if self.user_encoder is not None else None
        logits = self.backbone_logits(batch, aux)
        return {t: torch.sigmoid(v) for t, v in logits.items()}

    # -- losses ---------------------------------------------------------------

    def _check_labels(self, labels: Tensor | None) -> Tensor:
        if labels is None:
            raise ContractError("batch has no labels")
        if not torch.isfinite(labels).all():
            raise NumericError("labels contain non-finite values")
        if bool((labels < 0).any()) or bool((labels > 1).any()):
            raise InputError("labels must lie in [0, 1]")
        return labels

    def _bce(self, logits: dict[str, Tensor], labels: Tensor) -> Tensor:
        losses = []
        for j, t in enumerate(self.task_names):
            logit = logits[t]
            if not torch.isfinite(logit).all():
                raise NumericError(f"non-finite logits for task {t}")
            losses.append(
                nn.functional.binary_cross_entropy_with_logits(logit, labels[:, j])
            )
        return torch.stack(losses).mean()

    def loss_stage1(self, batch: FeatureBatch, onb: OnboardingBatch | None) -> Tensor:
        """Teacher objective: BCE with the (leaked) content repr as aux input.

        Without a content encoder this degrades to plain backbone BCE on
        the observable features (the no-encoder baseline).
        """
        labels = self._check_labels(batch.labels)
        e_c = None
        if self.content_encoder is not None:
            if onb is None:
                raise ContractError("stage-1 loss needs the onboarding batch")
            e_c = self.teacher_reprs(batch, onb)
        return self._bce(self.backbone_logits(batch, e_c), labels)

    def loss_align(
        self,
        e_u: Mapping[str, Tensor],
        e_c: Mapping[str, Tensor],
        *,
        stop_gradient: bool = True,
    ) -> Tensor:
        """Alignment loss between student and teacher reprs, summed over tasks.

        Cosine mode: batch mean of (1 - cos) per task; L2 mode: mean squared
        distance per task.  With ``stop_gradient`` the teacher side is
        detached.
        """
        if set(e_u) != set(e_c):
            raise ContractError(
                f"task mismatch between student {sorted(e_u)} and teacher {sorted(e_c)}"
            )
        terms = []
        for t in sorted(e_u):
            s, c = e_u[t], e_c[t]
            if s.shape != c.shape:
                raise ContractError(
                    f"repr shape mismatch for task {t}: {tuple(s.shape)} vs {tuple(c.shape)}"
                )
            if stop_gradient:
                c = c.detach()
            if self.config.align_metric == "cosine":
                cos = nn.functional.cosine_similarity(s, c, dim=-1, eps=1e-8)
                terms.append((1.0 - cos).mean())
            else:
                terms.append(((s - c) ** 2).sum(dim=-1).mean())
        return torch.stack(terms).sum()

    def loss_stage2(
        self,
        batch: FeatureBatch,
        onb: OnboardingBatch,
        lam: float | None = None,
    ) -> tuple[Tensor, Tensor, Tensor]:
        """Student objective: BCE on observables + lambda * alignment.

        Returns (total, bce, align).  Alignment targets come from this
        model's own content branch (frozen during distillation, so they
        are constant in the distilled setting).  The stop-gradient flag
        on the config controls whether the teacher side of the alignment
        is detached (the joint-training ablation turns it off).
        """
        lam = self.config.lambda_align if lam is None else lam
        if lam < 0:
            raise ConfigurationError(f"lambda_align must be >= 0, got {lam}")
        labels = self._check_labels(batch.labels)
        e_u = self.student_reprs(batch)
        e_c = self.teacher_reprs(batch, onb)
        bce = self._bce(self.backbone_logits(batch, e_u), labels)
        align = self.loss_align(e_u, e_c, stop_gradient=self.config.stop_gradient)
        return bce + lam * align, bce, align


def featurize(
    record: UserJourneyRecord, model: RetentionModel, *, dtype: torch.dtype = torch.float32
) -> dict[str, Tensor]:
    """Embed one record: profile vector plus masked sequence/day banks."""
    batch, onb = pack_records([record], model.config, with_labels=False, dtype=dtype)
    with torch.no_grad():
        out = {
            "x_u": model.profile_embedding(batch)[0],
            "hist_emb": model.embeddings.items(batch.hist_ids, batch.hist_mask)[0],
            "hist_mask": batch.hist_mask[0],
            "ad_emb": model.embeddings.items(batch.ad_ids, batch.ad_mask)[0],
            "ad_mask": batch.ad_mask[0],
            "onboarding_emb": model.embeddings.items(onb.day_ids, onb.day_mask)[0],
            "onboarding_mask": onb.day_mask[0],
        }
    return out


def build_model(config: ModelConfig, seed: int, *, dtype: torch.dtype = torch.float32) -> RetentionModel:
    """Construct a model with seed-determined initial weights."""
    torch.manual_seed(seed)
    model = RetentionModel(config)
    if dtype != torch.float32:
        model = model.to(dtype)
    return model
