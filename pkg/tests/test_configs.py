import json

import pytest

from ocarm.configs import (
    GenConfig,
    ModelConfig,
    TrainConfig,
    config_from_dict,
    config_hash,
    config_to_dict,
    load_config,
    save_config,
)
from ocarm.errors import ConfigurationError


def test_gen_config_roundtrip_dict():
    cfg = GenConfig(n_users=100, alpha=0.5, task_horizons={"LT1": 1, "LT3": 3})
    d = config_to_dict(cfg)
    back = config_from_dict(GenConfig, d)
    assert back == cfg
    assert isinstance(back.events_per_user, tuple)
    assert isinstance(back.stick_beta, tuple)


def test_model_config_roundtrip_dict():
    cfg = ModelConfig(backbone_hidden=(8, 4), tasks=(("LT1", 1), ("LT2", 2)))
    back = config_from_dict(ModelConfig, config_to_dict(cfg))
    assert back == cfg
    assert isinstance(back.backbone_hidden, tuple)
    assert back.tasks == (("LT1", 1), ("LT2", 2))


def test_config_file_roundtrip(tmp_path):
    cfg = TrainConfig(stage=2, epochs=3, freeze_groups=("embeddings", "hae"))
    path = tmp_path / "train.json"
    save_config(cfg, path)
    assert load_config(TrainConfig, path) == cfg
    # file is plain JSON
    assert json.loads(path.read_text())["stage"] == 2


def test_unknown_field_rejected():
    with pytest.raises(ConfigurationError, match="unknown.*not_a_field"):
        config_from_dict(GenConfig, {"not_a_field": 1})


def test_bad_json_file(tmp_path):
    p = tmp_path / "broken.json"
    p.write_text("{nope")
    with pytest.raises(ConfigurationError, match="not valid JSON"):
        load_config(GenConfig, p)


def test_hash_stable_and_sensitive():
    a = GenConfig(seed=3)
    b = GenConfig(seed=3)
    c = GenConfig(seed=4)
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash(c)
    assert len(config_hash(a)) == 16


def test_hash_ignores_dict_insertion_order():
    a = GenConfig(task_horizons={"LT1": 1, "LT7": 7})
    b = GenConfig(task_horizons={"LT7": 7, "LT1": 1})
    assert config_hash(a) == config_hash(b)


@pytest.mark.parametrize(
    "overrides, field",
    [
        (dict(alpha=1.5), "alpha"),
        (dict(kappa1=-0.1), "kappa1"),
        (dict(train_frac=1.0), "train_frac"),
        (dict(items_per_day=(4, 99)), "items_per_day"),
        (dict(task_horizons={"LT9": 9}), "horizon 9"),
        (dict(n_users=1), "n_users"),
    ],
)
def test_gen_config_validation_names_field(overrides, field):
    cfg = GenConfig(**overrides)
    with pytest.raises(ConfigurationError, match=field):
        cfg.validate()


@pytest.mark.parametrize(
    "overrides, field",
    [
        (dict(d_emb=15, n_heads=2), "divisible"),
        (dict(lambda_align=-1.0), "lambda_align"),
        (dict(align_metric="dot"), "align_metric"),
        (dict(content_encoder="rnn"), "content_encoder"),
        (dict(tasks=(("LT9", 9),)), "horizon 9"),
    ],
)
def test_model_config_validation_names_field(overrides, field):
    cfg = ModelConfig(**overrides)
    with pytest.raises(ConfigurationError, match=field):
        cfg.validate()


def test_train_config_validation():
    with pytest.raises(ConfigurationError, match="stage"):
        TrainConfig(stage=3).validate()
    with pytest.raises(ConfigurationError, match="mystery"):
        TrainConfig(freeze_groups=("mystery",)).validate()
    TrainConfig(stage=2, freeze_groups=("embeddings", "hae", "hae_proj")).validate()


def test_lambda_alias_accepted():
    back = config_from_dict(ModelConfig, {"lambda": 0.5})
    assert back.lambda_align == 0.5


def test_for_gen_matches_schema():
    gen = GenConfig(V=300, T=5, D=4, N=6, L_h=10, L_a=4,
                    entropy_bins=3, stick_bins=6,
                    task_horizons={"LT2": 2, "LT1": 1}, calendar_days=60)
    m = ModelConfig.for_gen(gen, d_emb=10, n_heads=2)
    assert m.vocab_size == 300
    assert m.n_topics == 5
    assert m.profile_cat_sizes == (5, 3, 6)
    assert (m.D, m.N, m.L_h, m.L_a) == (4, 6, 10, 4)
    # tasks sorted by horizon
    assert m.tasks == (("LT1", 1), ("LT2", 2))
    assert m.x_u_dim == 8 * 3 + 10
