import json

import numpy as np
import pytest
import yaml
from hypothesis import given, strategies as st

from avgflow.config import ExperimentConfig, load_config, parse_config_text, schema
from avgflow.errors import ConfigError


def test_defaults_follow_reference_recipe():
    cfg = ExperimentConfig.from_dict({})
    assert cfg.data.delta == 0.01 and cfg.model.sigma == 0.1 and cfg.model.kernel["N"] == 10
    assert cfg.train.vi.K == 100 and cfg.train.vi.L == 100 and cfg.train.optimizer.batch_size == 500
    assert cfg.train.optimizer.iterations == 100 and cfg.train.optimizer.lr == 1e-3
    assert (cfg.train.latent_flow.n_layers, cfg.train.latent_flow.hidden) == (2, 5)
    assert (cfg.train.vi.posterior_layers, cfg.train.vi.posterior_hidden) == (6, 256)
    assert cfg.n_transitions == 500 and cfg.subsample == 100
    assert cfg.latent_spec().dim == 10


def test_round_trip_is_fixed_point():
    cfg = ExperimentConfig.from_dict({"train": {"mode": "mle", "penalty": {"lam": 0.01}},
                                      "seeds": {"master": 42}})
    text = cfg.dump_yaml()
    again = parse_config_text(text)
    assert again == cfg
    assert again.dump_yaml() == text


@given(st.sampled_from(["mle", "vi", "baseline"]), st.floats(1e-4, 1e-1), st.integers(0, 2 ** 40),
       st.integers(1, 500))
def test_round_trip_property(mode, lr, seed, batch):
    cfg = ExperimentConfig.from_dict({"train": {"mode": mode, "optimizer": {"lr": lr, "batch_size": batch}},
                                      "seeds": {"master": seed}})
    assert parse_config_text(cfg.dump_yaml()) == cfg


def test_unknown_keys_name_their_path():
    with pytest.raises(ConfigError, match=r"train\.optimizer.*lrate"):
        ExperimentConfig.from_dict({"train": {"optimizer": {"lrate": 0.1}}})
    with pytest.raises(ConfigError, match="top level"):
        ExperimentConfig.from_dict({"extra": 1})


def test_batch_larger_than_data_names_both_values():
    with pytest.raises(ConfigError, match="B=600.*M0=500"):
        ExperimentConfig.from_dict({"train": {"optimizer": {"batch_size": 600}}})


def test_delta_must_be_multiple_of_dt():
    with pytest.raises(ConfigError, match="multiple"):
        ExperimentConfig.from_dict({"data": {"delta": 0.00015}})


def test_type_errors_and_other_checks():
    for bad in [{"train": {"optimizer": {"iterations": "many"}}},
                {"model": {"sigma": -1.0}},
                {"train": {"mode": "mcmc"}},
                {"model": {"kernel": {"variant": "solvent", "gamma": 0}}},
                {"data": {"x0": [1.0, 2.0]}},
                {"data": {"M0": 400}},
                {"model": {"fast": {"kind": "von_mises"}}},
                {"eval": {"quantiles": [0.5]}},
                {"eval": {"baseline": "yes"}}]:
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(bad)


def test_von_mises_double_well_config():
    cfg = ExperimentConfig.from_dict({"model": {"kernel": {"variant": "double_well"},
                                                "fast": {"kind": "von_mises"}, "n_scale": 100.0},
                                      "train": {"penalty": {"p": 2.0}}})
    s = cfg.sample_invariant(1000, 0)
    assert s.shape == (1000, 4) and s.min() >= -np.pi
    assert cfg.penalty().p == 2.0


def test_load_config_file(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump({"seeds": {"master": 3}}))
    assert load_config(p).seeds.master == 3
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
    (tmp_path / "bad.yaml").write_text("a: [1,")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.yaml")


def test_schema_lists_every_section():
    s = schema()
    assert set(s) == {"model", "data", "train", "eval", "table1", "seeds"}
    assert s["train"]["optimizer"]["lr"] == {"type": "float", "default": 1e-3}
    json.dumps(s)
