"""Config dataclasses for data generation, model shape, and training.

All three configs are plain dataclasses with JSON file round-trip and a
stable content hash used to fingerprint datasets and checkpoints.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigurationError

TASK_DEFAULTS = (("LT1", 1), ("LT7", 7))


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigurationError(message)


@dataclass
class GenConfig:
    """Knobs of the synthetic journey generator.

    The planted mechanism: a latent topic preference z and a stickiness
    p_stick drive both the observable features (noisily) and the
    post-conversion content draws; revisit hazard follows a logistic
    recurrence on engaged-content match and stickiness.
    """

    # sizes
    V: int = 2000              # item vocabulary
    T: int = 8                 # topics
    D: int = 7                 # onboarding days kept in the record
    N: int = 16                # per-day interaction cap
    L_h: int = 64              # historical sequence cap
    L_a: int = 16              # ad sequence cap
    n_users: int = 75_000      # total users, split train/test by train_frac
    train_frac: float = 0.8
    events_per_user: tuple[int, int] = (2, 3)   # inclusive range
    seed: int = 0

    # mechanism
    alpha: float = 0.7         # user-preference vs campaign-trend share of content draws
    profile_noise: float = 0.5
    kappa0: float = -4.4       # base revisit log-odds
    kappa1: float = 5.0        # content-match coefficient (>0: content drives retention)
    kappa2: float = 1.6        # stickiness coefficient

    # campaign traffic arrives in day-level bursts: on a campaign day most
    # of the feed is trend items, on other days almost none is
    campaign_prob: float = 0.3       # probability that a day is a campaign day
    campaign_weight: float = 0.85    # fraction of trend traffic on campaign days

    # latent / feature distributions
    z_concentration: float = 0.2     # Dirichlet concentration of topic preference
    # each conversion event has its own interest tilt z_event ~ Dir(s * z):
    # larger s keeps events closer to the enduring preference
    event_concentration: float = 6.0
    trend_concentration: float = 0.15
    stick_beta: tuple[float, float] = (2.0, 2.0)
    hist_noise: float = 0.4          # uniform-item fraction in hist_seq
    ad_pop_frac: float = 0.5         # popularity-driven fraction in ad_seq
    items_per_day: tuple[int, int] = (8, 16)    # inclusive range, active days
    calendar_days: int = 60          # length of the shared exogenous trend calendar
    entropy_bins: int = 4
    stick_bins: int = 8

    # label tasks: name -> horizon d (counts over days d+1..2d, label = count/d)
    task_horizons: dict[str, int] = field(
        default_factory=lambda: dict(TASK_DEFAULTS)
    )

    def validate(self) -> None:
        _require(self.T >= 2, f"T must be >= 2, got {self.T}")
        _require(self.V >= self.T, f"V must be >= T, got V={self.V}, T={self.T}")
        _require(0.0 <= self.alpha <= 1.0, f"alpha must be in [0, 1], got {self.alpha}")
        _require(self.kappa1 >= 0.0, f"kappa1 must be >= 0, got {self.kappa1}")
        _require(self.profile_noise >= 0.0,
                 f"profile_noise must be >= 0, got {self.profile_noise}")
        _require(self.N >= 1, f"N must be >= 1, got {self.N}")
        _require(self.L_h >= 1 and self.L_a >= 1,
                 f"sequence caps must be >= 1, got L_h={self.L_h}, L_a={self.L_a}")
        lo, hi = self.events_per_user
        _require(1 <= lo <= hi, f"events_per_user must be a range 1 <= lo <= hi, got {self.events_per_user}")
        ilo, ihi = self.items_per_day
        _require(1 <= ilo <= ihi <= self.N,
                 f"items_per_day must satisfy 1 <= lo <= hi <= N, got {self.items_per_day}")
        _require(0.0 < self.train_frac < 1.0,
                 f"train_frac must be in (0, 1), got {self.train_frac}")
        _require(self.n_users >= 2, f"n_users must be >= 2, got {self.n_users}")
        _require(self.task_horizons, "task_horizons must not be empty")
        for name, d in self.task_horizons.items():
            _require(d >= 1, f"task {name}: horizon must be >= 1, got {d}")
            _require(self.D >= d, f"task {name}: horizon {d} exceeds onboarding day count D={self.D}")
        _require(self.calendar_days >= self.sim_days,
                 f"calendar_days must cover 2*max(horizon)={self.sim_days}, got {self.calendar_days}")
        _require(0.0 <= self.hist_noise <= 1.0,
                 f"hist_noise must be in [0, 1], got {self.hist_noise}")
        _require(0.0 <= self.ad_pop_frac <= 1.0,
                 f"ad_pop_frac must be in [0, 1], got {self.ad_pop_frac}")
        _require(0.0 <= self.campaign_prob < 1.0,
                 f"campaign_prob must be in [0, 1), got {self.campaign_prob}")
        _require(self.event_concentration > 0.0,
                 f"event_concentration must be > 0, got {self.event_concentration}")
        _require(0.0 <= self.campaign_weight <= 1.0,
                 f"campaign_weight must be in [0, 1], got {self.campaign_weight}")

    @property
    def d_max(self) -> int:
        return max(self.task_horizons.values())

    @property
    def sim_days(self) -> int:
        # activity is simulated for twice the longest label horizon
        return 2 * self.d_max


@dataclass
class ModelConfig:
    """Shapes and switches of the two-path retention model."""

    # data schema (must match the generating GenConfig)
    vocab_size: int = 2000
    n_topics: int = 8
    profile_cat_sizes: tuple[int, ...] = (8, 4, 8)   # dominant topic, entropy, activity
    D: int = 7
    N: int = 16
    L_h: int = 64
    L_a: int = 16

    # widths
    d_emb: int = 32
    d_cat: int = 8             # width of each categorical profile embedding
    n_heads: int = 2
    d_repr: int = 16           # width of e_c and e_u per task
    K: int = 4                 # learnable query tokens per sequence type
    backbone_hidden: tuple[int, ...] = (64, 32)
    content_mlp_hidden: int = 64
    tower_hidden: int = 64

    # tasks: (name, horizon d); e_c for task d is read from day d
    tasks: tuple[tuple[str, int], ...] = TASK_DEFAULTS

    # losses / staging
    lambda_align: float = 1.0
    align_metric: str = "cosine"   # or "l2"
    teacher_pretrained: bool = True
    stop_gradient: bool = True
    content_encoder: str = "hae"   # hae | mlp | none
    user_encoder: str = "sfe"      # sfe | mlp | none

    def validate(self) -> None:
        _require(self.K >= 1, f"K must be >= 1, got {self.K}")
        _require(self.n_heads >= 1, f"n_heads must be >= 1, got {self.n_heads}")
        _require(self.d_emb % self.n_heads == 0,
                 f"d_emb ({self.d_emb}) must be divisible by n_heads ({self.n_heads})")
        _require(self.lambda_align >= 0.0,
                 f"lambda_align must be >= 0, got {self.lambda_align}")
        _require(self.align_metric in ("cosine", "l2"),
                 f"align_metric must be 'cosine' or 'l2', got {self.align_metric!r}")
        _require(self.content_encoder in ("hae", "mlp", "none"),
                 f"content_encoder must be hae|mlp|none, got {self.content_encoder!r}")
        _require(self.user_encoder in ("sfe", "mlp", "none"),
                 f"user_encoder must be sfe|mlp|none, got {self.user_encoder!r}")
        _require(self.tasks, "tasks must not be empty")
        for name, d in self.tasks:
            _require(1 <= d <= self.D,
                     f"task {name}: horizon {d} must be within 1..D (D={self.D})")

    @property
    def task_names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.tasks)

    @property
    def x_u_dim(self) -> int:
        return self.d_cat * len(self.profile_cat_sizes) + self.d_emb

    @classmethod
    def for_gen(cls, gen: GenConfig, **overrides) -> "ModelConfig":
        """Model config whose data-schema fields match a generator config."""
        base = dict(
            vocab_size=gen.V,
            n_topics=gen.T,
            profile_cat_sizes=(gen.T, gen.entropy_bins, gen.stick_bins),
            D=gen.D,
            N=gen.N,
            L_h=gen.L_h,
            L_a=gen.L_a,
            tasks=tuple(sorted(gen.task_horizons.items(), key=lambda kv: kv[1])),
        )
        base.update(overrides)
        return cls(**base)


#: parameter groups recognized by the trainer's freeze list
PARAM_GROUPS = ("embeddings", "hae", "hae_proj", "sfe", "task_towers", "backbone")


@dataclass
class TrainConfig:
    """One training run: stage, budget, seeding, freezing, precision."""

    stage: int = 1
    epochs: int = 2
    batch_size: int = 256
    step_size: float = 1e-3
    seed: int = 0
    freeze_groups: tuple[str, ...] = ()
    eval_every: int = 200      # steps between train-loss log records
    precision: str = "float32"  # float64 for the determinism/gradient contracts

    def validate(self) -> None:
        _require(self.stage in (1, 2), f"stage must be 1 or 2, got {self.stage}")
        _require(self.epochs >= 0, f"epochs must be >= 0, got {self.epochs}")
        _require(self.batch_size >= 1, f"batch_size must be >= 1, got {self.batch_size}")
        _require(self.step_size > 0.0, f"step_size must be > 0, got {self.step_size}")
        _require(self.precision in ("float32", "float64"),
                 f"precision must be float32 or float64, got {self.precision!r}")
        unknown = set(self.freeze_groups) - set(PARAM_GROUPS)
        _require(not unknown,
                 f"freeze_groups contains unknown groups {sorted(unknown)}; known: {PARAM_GROUPS}")


# ---------------------------------------------------------------------------
# JSON round-trip and hashing


def _to_jsonable(cfg) -> dict:
    def conv(v):
        if isinstance(v, tuple):
            return [conv(x) for x in v]
        if isinstance(v, list):
            return [conv(x) for x in v]
        if isinstance(v, dict):
            return {k: conv(x) for k, x in v.items()}
        return v

    return {f.name: conv(getattr(cfg, f.name)) for f in dataclasses.fields(cfg)}


def config_to_dict(cfg) -> dict:
    return _to_jsonable(cfg)


_TUPLE_FIELDS = {
    "events_per_user", "items_per_day", "stick_beta", "profile_cat_sizes",
    "backbone_hidden", "freeze_groups",
}
_ALIASES = {"lambda": "lambda_align"}  # accept the bare loss-weight name in files


def config_from_dict(cls, data: dict):
    if not isinstance(data, dict):
        raise ConfigurationError(f"{cls.__name__} section must be an object, got {type(data).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        key = _ALIASES.get(key, key)
        if key not in known:
            raise ConfigurationError(f"unknown {cls.__name__} field {key!r}")
        if key in _TUPLE_FIELDS and isinstance(value, list):
            value = tuple(value)
        if key == "tasks" and isinstance(value, list):
            value = tuple((str(n), int(d)) for n, d in value)
        kwargs[key] = value
    try:
        cfg = cls(**kwargs)
    except TypeError as exc:
        raise ConfigurationError(f"bad {cls.__name__}: {exc}") from exc
    cfg.validate()
    return cfg


def load_config(cls, path: str | Path):
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: not valid JSON: {exc}") from exc
    return config_from_dict(cls, data)


def save_config(cfg, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )


def config_hash(cfg) -> str:
    """Stable 16-hex-digit fingerprint of a config's content."""
    blob = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]
