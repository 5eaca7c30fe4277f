"""Synthetic user-journey generator with a planted retention mechanism.

Each user owns a latent topic preference z and a stickiness p_stick.
Every conversion event additionally carries a session-intent tilt
z_event drawn around z; the user's preference-driven draws during that
event — acquisition history, ad impressions and the engaged share of
onboarding content — all follow the tilt. Observable features are noisy
functions of these latents. Post-conversion content mixes the engaged
draws with exogenous campaign traffic that follows a shared daily trend
and arrives in day-level bursts: on a campaign day most of the feed is
trend items. The revisit hazard follows a logistic recurrence on the
match between the engaged portion of each day's content and the
enduring z — an off-profile session retains worse. Campaign items are
shown — they pollute the observable record — but do not move the
hazard, and the realized engagement draws, Bernoulli revisits and
campaign-day pattern are the irreducible component that keeps any
bid-time model strictly below a content-aware one.

All randomness is keyed by (seed, stream-tag, user_id) so per-user
generation is order-independent and reproducible.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .configs import GenConfig, config_hash
from .errors import ConfigurationError, DataFormatError, InputError, SchemaError

# rng stream tags; never reuse across purposes
_STREAM_CATALOG = 0
_STREAM_TREND = 1
_STREAM_POPULARITY = 2
_STREAM_USER = 3
_STREAM_SPLIT = 4
_STREAM_ORACLE = 5

RECORD_FIELDS = (
    "user_id", "profile_cat", "profile_dense", "hist_seq", "ad_seq",
    "onboarding", "labels", "label_counts",
)


@dataclass
class Catalog:
    """Item space: every item id in [0, V) belongs to exactly one topic."""

    item_topic: np.ndarray        # (V,) int topic id per item
    topic_vectors: np.ndarray     # (T, T) one-hot rows

    @property
    def n_items(self) -> int:
        return int(self.item_topic.shape[0])

    @property
    def n_topics(self) -> int:
        return int(self.topic_vectors.shape[0])

    def items_by_topic(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.item_topic == t) for t in range(self.n_topics)]


@dataclass
class EventLatents:
    """Generator internals attached to in-memory records (never serialized)."""

    z: np.ndarray          # (T,) topic preference
    p_stick: float
    offset: int            # calendar offset of the event's day 1
    event_index: int
    z_event: np.ndarray | None = None            # (T,) interest tilt of this event
    match_after_day: np.ndarray | None = None   # (sim_days,) hazard state per day


@dataclass(eq=False)
class UserJourneyRecord:
    """One conversion event of one user."""

    user_id: int
    profile_cat: list[int]            # dominant-topic, entropy, activity buckets
    profile_dense: np.ndarray         # (T,) noisy copy of z
    hist_seq: np.ndarray              # item ids, len <= L_h
    ad_seq: np.ndarray                # item ids, len <= L_a
    onboarding: list[np.ndarray]      # D day item lists; empty array = inactive day
    labels: dict[str, float]          # task -> count / horizon
    label_counts: dict[str, int]      # task -> revisit days in (d+1 .. 2d)
    latents: EventLatents | None = field(default=None, repr=False)

    def __eq__(self, other) -> bool:
        if not isinstance(other, UserJourneyRecord):
            return NotImplemented
        return (
            self.user_id == other.user_id
            and self.profile_cat == other.profile_cat
            and np.array_equal(self.profile_dense, other.profile_dense)
            and np.array_equal(self.hist_seq, other.hist_seq)
            and np.array_equal(self.ad_seq, other.ad_seq)
            and len(self.onboarding) == len(other.onboarding)
            and all(np.array_equal(a, b) for a, b in zip(self.onboarding, other.onboarding))
            and self.labels == other.labels
            and self.label_counts == other.label_counts
        )


@dataclass
class Dataset:
    records: list[UserJourneyRecord]
    split_tag: str
    gen_config_hash: str

    def __len__(self) -> int:
        return len(self.records)


@dataclass
class GenContext:
    """Shared exogenous state derived deterministically from the config."""

    catalog: Catalog
    trend: np.ndarray             # (calendar_days, T) per-day topic distribution
    trend_cdf: np.ndarray
    popularity_cdf: np.ndarray    # (V,) cdf of the global item popularity
    topic_item_pad: np.ndarray    # (T, max_per_topic) padded item ids
    topic_counts: np.ndarray      # (T,)
    topic_pop_cdf: np.ndarray     # (T, max_per_topic) within-topic popularity cdf

    @classmethod
    def build(cls, config: GenConfig, catalog: Catalog | None = None) -> "GenContext":
        catalog = catalog if catalog is not None else build_catalog(config, config.seed)
        trend_rng = np.random.default_rng([config.seed, _STREAM_TREND])
        trend = trend_rng.dirichlet(
            [config.trend_concentration] * config.T, size=config.calendar_days
        )
        pop_rng = np.random.default_rng([config.seed, _STREAM_POPULARITY])
        perm = pop_rng.permutation(config.V)
        weights = (1.0 + np.arange(config.V, dtype=np.float64)) ** -2.0
        pop = np.empty(config.V)
        pop[perm] = weights / weights.sum()

        groups = catalog.items_by_topic()
        counts = np.array([len(g) for g in groups], dtype=np.int64)
        pad = np.zeros((config.T, int(counts.max())), dtype=np.int64)
        topic_cdf = np.ones((config.T, int(counts.max())))
        for t, g in enumerate(groups):
            pad[t, : len(g)] = g
            # item choice within a topic follows the same global popularity
            # skew as the ad stream, so a head of frequent items exists
            w = pop[g]
            topic_cdf[t, : len(g)] = np.cumsum(w / w.sum())
        return cls(
            catalog=catalog,
            trend=trend,
            trend_cdf=np.cumsum(trend, axis=1),
            popularity_cdf=np.cumsum(pop),
            topic_item_pad=pad,
            topic_counts=counts,
            topic_pop_cdf=topic_cdf,
        )


def build_catalog(config: GenConfig, seed: int) -> Catalog:
    """Assign topics round-robin over a seeded permutation of item ids."""
    config.validate()
    rng = np.random.default_rng([seed, _STREAM_CATALOG])
    perm = rng.permutation(config.V)
    item_topic = np.empty(config.V, dtype=np.int64)
    item_topic[perm] = np.arange(config.V) % config.T
    return Catalog(item_topic=item_topic, topic_vectors=np.eye(config.T))


def user_rng(config: GenConfig, user_id: int) -> np.random.Generator:
    """Independent per-user stream; parallel and serial generation agree."""
    return np.random.default_rng([config.seed, _STREAM_USER, user_id])


def _sigmoid(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


def _draw_topics(rng, n: int, cdf: np.ndarray) -> np.ndarray:
    return np.searchsorted(cdf, rng.random(n), side="right").clip(max=len(cdf) - 1)


def _items_from_topics(rng, topics: np.ndarray, ctx: GenContext) -> np.ndarray:
    r = rng.random(len(topics))
    cdf_rows = ctx.topic_pop_cdf[topics]
    slot = (r[:, None] >= cdf_rows).sum(axis=1)
    slot = np.minimum(slot, ctx.topic_counts[topics] - 1)
    return ctx.topic_item_pad[topics, slot]


def _bucket(value: float, n_bins: int) -> int:
    return min(int(value * n_bins), n_bins - 1)


def _campaign_split(config: GenConfig) -> tuple[float, float]:
    """Per-day trend-item shares (normal day, campaign day).

    The mean share over days stays 1 - alpha; campaign_weight moves that
    mass onto campaign days. alpha=1 gives (0, 0) and alpha=0 gives (1, 1):
    the burst structure never changes the overall preference/trend mix.
    """
    junk = 1.0 - config.alpha
    q = config.campaign_prob
    if q <= 0.0:
        return junk, 0.0
    j_hi = min(1.0, junk * config.campaign_weight / q)
    j_lo = min(1.0, max(0.0, (junk - q * j_hi) / (1.0 - q)))
    return j_lo, j_hi


def sample_user_journey(
    catalog: Catalog,
    config: GenConfig,
    rng: np.random.Generator,
    user_id: int = 0,
    context: GenContext | None = None,
) -> list[UserJourneyRecord]:
    """Draw one user's latents and all of their conversion events.

    The rng must be the user's own stream (see user_rng); the draw order
    below is part of the determinism contract.
    """
    ctx = context if context is not None else GenContext.build(config, catalog)
    T = config.T

    z = rng.dirichlet([config.z_concentration] * T)
    p_stick = float(rng.beta(*config.stick_beta))
    lo, hi = config.events_per_user
    n_events = int(rng.integers(lo, hi + 1))

    profile_dense = z + rng.normal(0.0, config.profile_noise, T)
    ent = -float(np.sum(z * np.log(np.maximum(z, 1e-300)))) / math.log(T)
    profile_cat = [
        int(np.argmax(z)),
        _bucket(min(ent, 1.0), config.entropy_bins),
        _bucket(p_stick, config.stick_bins),
    ]

    affinity = z[ctx.catalog.item_topic]   # per-item <z, topic one-hot>

    j_lo, j_hi = _campaign_split(config)
    records = []
    for event_index in range(n_events):
        offset = int(rng.integers(0, config.calendar_days - config.sim_days + 1))
        campaign = rng.random(config.sim_days) < config.campaign_prob
        # the session intent behind this conversion: preference-driven draws
        # (acquisition sequences and engaged onboarding items alike) follow
        # the tilt, while retention keeps scoring against the enduring z
        z_event = rng.dirichlet(np.maximum(config.event_concentration * z, 1e-6))
        ze_cdf = np.cumsum(z_event)

        n_hist = int(rng.integers(max(1, config.L_h // 2), config.L_h + 1))
        noise_mask = rng.random(n_hist) < config.hist_noise
        hist = np.empty(n_hist, dtype=np.int64)
        hist[~noise_mask] = _items_from_topics(
            rng, _draw_topics(rng, int((~noise_mask).sum()), ze_cdf), ctx
        )
        hist[noise_mask] = rng.integers(0, config.V, int(noise_mask.sum()))

        n_ad = int(rng.integers(max(1, config.L_a // 2), config.L_a + 1))
        pop_mask = rng.random(n_ad) < config.ad_pop_frac
        ad = np.empty(n_ad, dtype=np.int64)
        ad[~pop_mask] = _items_from_topics(
            rng, _draw_topics(rng, int((~pop_mask).sum()), ze_cdf), ctx
        )
        ad[pop_mask] = np.searchsorted(
            ctx.popularity_cdf, rng.random(int(pop_mask.sum())), side="right"
        ).clip(max=config.V - 1)

        # day-by-day activity recurrence; day 1 (conversion day) is always active
        ilo, ihi = config.items_per_day
        day_items: list[np.ndarray] = []
        active = np.zeros(config.sim_days, dtype=bool)
        active[0] = True
        last_match = 0.0
        match_after_day = np.zeros(config.sim_days)
        for t in range(1, config.sim_days + 1):
            if t > 1:
                hazard = _sigmoid(
                    config.kappa0 + config.kappa1 * last_match + config.kappa2 * p_stick
                )
                active[t - 1] = rng.random() < hazard
            if active[t - 1]:
                n_t = int(rng.integers(ilo, ihi + 1))
                own = rng.random(n_t) >= (j_hi if campaign[t - 1] else j_lo)
                items = np.empty(n_t, dtype=np.int64)
                items[own] = _items_from_topics(
                    rng, _draw_topics(rng, int(own.sum()), ze_cdf), ctx
                )
                # campaign traffic spreads across each topic's catalog
                # instead of concentrating on the organic head, so trend
                # items are one-off impressions
                trend_topics = _draw_topics(
                    rng, int((~own).sum()), np.cumsum(ctx.trend[offset + t - 1])
                )
                slots = (
                    rng.random(len(trend_topics)) * ctx.topic_counts[trend_topics]
                ).astype(np.int64)
                items[~own] = ctx.topic_item_pad[trend_topics, slots]
                # the hazard reads the match of the content the user engages
                # with (their preference-driven draws); campaign impressions
                # are scrolled past, so days of pure campaign traffic leave
                # the match state where it was
                if own.any():
                    last_match = float(affinity[items[own]].mean())
            else:
                items = np.empty(0, dtype=np.int64)
            match_after_day[t - 1] = last_match
            if t <= config.D:
                day_items.append(items)

        label_counts = {}
        labels = {}
        for name, d in config.task_horizons.items():
            count = int(active[d : 2 * d].sum())
            label_counts[name] = count
            labels[name] = count / d

        records.append(
            UserJourneyRecord(
                user_id=user_id,
                profile_cat=list(profile_cat),
                profile_dense=profile_dense.copy(),
                hist_seq=hist,
                ad_seq=ad,
                onboarding=day_items,
                labels=labels,
                label_counts=label_counts,
                latents=EventLatents(
                    z=z, p_stick=p_stick, offset=offset, event_index=event_index,
                    z_event=z_event, match_after_day=match_after_day,
                ),
            )
        )
    return records


def generate_dataset(config: GenConfig) -> tuple[Dataset, Dataset]:
    """Generate the user-disjoint train/test datasets for a config."""
    config.validate()
    n_train = int(round(config.n_users * config.train_frac))
    if n_train < 1 or n_train >= config.n_users:
        raise ConfigurationError(
            f"n_users={config.n_users} with train_frac={config.train_frac} "
            f"leaves an empty split ({n_train} train users)"
        )
    catalog = build_catalog(config, config.seed)
    ctx = GenContext.build(config, catalog)

    split_rng = np.random.default_rng([config.seed, _STREAM_SPLIT])
    order = split_rng.permutation(config.n_users)
    train_users = set(order[:n_train].tolist())

    ghash = config_hash(config)
    train_records: list[UserJourneyRecord] = []
    test_records: list[UserJourneyRecord] = []
    for uid in range(config.n_users):
        recs = sample_user_journey(catalog, config, user_rng(config, uid), uid, ctx)
        (train_records if uid in train_users else test_records).extend(recs)
    return (
        Dataset(train_records, "train", ghash),
        Dataset(test_records, "test", ghash),
    )


# ---------------------------------------------------------------------------
# Serialization: line-delimited JSON records plus a small sidecar meta file.


def _meta_path(path: Path) -> Path:
    return path.with_name(path.name + ".meta.json")


def _record_to_json(rec: UserJourneyRecord) -> dict:
    return {
        "user_id": int(rec.user_id),
        "profile_cat": [int(v) for v in rec.profile_cat],
        "profile_dense": [float(v) for v in rec.profile_dense],
        "hist_seq": [int(v) for v in rec.hist_seq],
        "ad_seq": [int(v) for v in rec.ad_seq],
        "onboarding": [[int(v) for v in day] for day in rec.onboarding],
        "labels": {k: float(v) for k, v in rec.labels.items()},
        "label_counts": {k: int(v) for k, v in rec.label_counts.items()},
    }


def _record_from_json(obj: dict, line_number: int) -> UserJourneyRecord:
    if not isinstance(obj, dict):
        raise SchemaError(f"line {line_number}: record must be an object")
    for fname in RECORD_FIELDS:
        if fname not in obj:
            raise SchemaError(f"line {line_number}: missing field {fname!r}")
    try:
        return UserJourneyRecord(
            user_id=int(obj["user_id"]),
            profile_cat=[int(v) for v in obj["profile_cat"]],
            profile_dense=np.asarray(obj["profile_dense"], dtype=np.float64),
            hist_seq=np.asarray(obj["hist_seq"], dtype=np.int64).reshape(-1),
            ad_seq=np.asarray(obj["ad_seq"], dtype=np.int64).reshape(-1),
            onboarding=[
                np.asarray(day, dtype=np.int64).reshape(-1) for day in obj["onboarding"]
            ],
            labels={str(k): float(v) for k, v in obj["labels"].items()},
            label_counts={str(k): int(v) for k, v in obj["label_counts"].items()},
        )
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"line {line_number}: bad field value: {exc}") from exc


def serialize_dataset(dataset: Dataset, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for rec in dataset.records:
            fh.write(json.dumps(_record_to_json(rec), separators=(",", ":")))
            fh.write("\n")
    _meta_path(path).write_text(
        json.dumps(
            {
                "split_tag": dataset.split_tag,
                "gen_config_hash": dataset.gen_config_hash,
                "n_records": len(dataset.records),
            },
            indent=2,
        )
        + "\n",
        encoding="utf-8",
    )


def deserialize_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    records = []
    with path.open("r", encoding="utf-8") as fh:
        for i, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(
                    f"{path}: line {i}: not valid JSON: {exc.msg}", line_number=i
                ) from exc
            records.append(_record_from_json(obj, i))
    split_tag, ghash = "unknown", ""
    meta = _meta_path(path)
    if meta.exists():
        info = json.loads(meta.read_text(encoding="utf-8"))
        split_tag = info.get("split_tag", split_tag)
        ghash = info.get("gen_config_hash", ghash)
        if "n_records" in info and info["n_records"] != len(records):
            raise DataFormatError(
                f"{path}: expected {info['n_records']} records, found {len(records)} "
                "(file truncated?)",
                line_number=len(records) + 1,
            )
    return Dataset(records, split_tag, ghash)


# ---------------------------------------------------------------------------
# White-box oracle: Bayes-style reference predictor with access to latents.


def _recover_latents(
    record: UserJourneyRecord, catalog: Catalog, config: GenConfig, ctx: GenContext
) -> EventLatents:
    regenerated = sample_user_journey(
        catalog, config, user_rng(config, record.user_id), record.user_id, ctx
    )
    for rec in regenerated:
        if rec == record:
            return rec.latents
    raise InputError(
        f"record of user {record.user_id} was not produced by this config/seed"
    )


def content_topic_histogram(record: UserJourneyRecord, catalog: Catalog) -> np.ndarray:
    """Normalized topic histogram over all onboarding items of a record."""
    T = catalog.n_topics
    hist = np.zeros(T)
    for day in record.onboarding:
        if len(day):
            hist += np.bincount(catalog.item_topic[day], minlength=T)
    total = hist.sum()
    return hist / total if total > 0 else hist


def oracle_score(
    record: UserJourneyRecord,
    catalog: Catalog,
    config: GenConfig,
    n_mc: int,
    rng: np.random.Generator | None = None,
    context: GenContext | None = None,
) -> dict[str, float]:
    """Monte-Carlo estimate of E[label | latents, match state] per task.

    Replays the activity recurrence over each task's label window from
    the true hazard state at the window's start. Conditions on the exact
    engaged-content match (a latent no model can fully recover, since
    preference draws and campaign impressions are unlabeled in the
    record), so it bounds the AUC achievable by any model trained on
    this data.
    """
    if n_mc < 1:
        raise ConfigurationError(f"n_mc must be >= 1, got {n_mc}")
    lat = record.latents
    if lat is None:
        ctx = context if context is not None else GenContext.build(config, catalog)
        lat = _recover_latents(record, catalog, config, ctx)

    if rng is None:
        rng = np.random.default_rng([config.seed, _STREAM_ORACLE, record.user_id])
    z, p_stick = lat.z, lat.p_stick
    ze_cdf = np.cumsum(lat.z_event)   # engaged draws follow the event tilt
    ilo, ihi = config.items_per_day
    j_lo, j_hi = _campaign_split(config)
    out = {}
    for name, d in config.task_horizons.items():
        match = np.full(n_mc, float(lat.match_after_day[d - 1]))
        counts = np.zeros(n_mc, dtype=np.int64)
        for t in range(d + 1, 2 * d + 1):
            hazard = 1.0 / (
                1.0
                + np.exp(-(config.kappa0 + config.kappa1 * match + config.kappa2 * p_stick))
            )
            is_active = rng.random(n_mc) < hazard
            counts += is_active
            n_t = rng.integers(ilo, ihi + 1, size=n_mc)
            campaign = rng.random(n_mc) < config.campaign_prob
            own_frac = np.where(campaign, 1.0 - j_hi, 1.0 - j_lo)
            n_own = rng.binomial(n_t, own_frac)
            topics = np.searchsorted(
                ze_cdf, rng.random((n_mc, ihi)), side="right"
            ).clip(max=config.T - 1)
            aff = z[topics]   # retention still scores against the enduring preference
            keep = np.arange(ihi)[None, :] < n_own[:, None]
            day_match = (aff * keep).sum(axis=1) / np.maximum(n_own, 1)
            # inactive days and days of pure campaign traffic keep the state
            match = np.where(is_active & (n_own > 0), day_match, match)
        out[name] = float(counts.mean()) / d
    return out
