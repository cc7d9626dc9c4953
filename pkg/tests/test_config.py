import pytest
import tomli

from gradrecon.config import SCHEMA, SEED_KEYS, RunConfig, describe, load_config
from gradrecon.errors import ConfigError


def test_defaults_cover_every_key():
    cfg = RunConfig()
    assert cfg["adapter.rank"] == 8 and cfg["unlearn.n_views"] == 5
    assert cfg["collect.limit"] == 1000 and cfg["sweep.seeds"] == 3
    assert dict(cfg.items()).keys() == SCHEMA.keys()
    assert all(doc for _, doc in SCHEMA.values())


def test_unknown_key_is_an_error(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("[adapter]\nrnak = 4\n")
    with pytest.raises(ConfigError, match="unknown"):
        load_config(p)


def test_type_and_value_errors():
    with pytest.raises(ConfigError):
        RunConfig({"adapter.rank": "8"})
    with pytest.raises(ConfigError):
        RunConfig({"adapter.rank": True})
    with pytest.raises(ConfigError):
        RunConfig({"unlearn.eta": -1})
    with pytest.raises(ConfigError):
        RunConfig({"proxy.d_model": 16})
    with pytest.raises(ConfigError):
        RunConfig({"unlearn.method": "scrub"})
    with pytest.raises(ConfigError):
        RunConfig({"decoder.train_on_averaged": 1})
    assert RunConfig({"decoder.train_on_averaged": True})["decoder.train_on_averaged"] is True
    assert RunConfig({"decoder.lr": 1})["decoder.lr"] == 1.0
    assert RunConfig({"unlearn.eta": 0})["unlearn.eta"] == 0.0


def test_dotted_and_sectioned_forms_agree_and_hash_ignores_order(tmp_path):
    a, b = tmp_path / "a.toml", tmp_path / "b.toml"
    a.write_text('adapter.rank = 4\ncorpus.seed = 3\nunlearn.method = "full_grad"\n')
    b.write_text('[unlearn]\nmethod = "full_grad"\n[corpus]\nseed = 3\n[adapter]\nrank = 4\n')
    assert load_config(a).hash() == load_config(b).hash()
    assert load_config(a).hash() != RunConfig().hash()


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("this is = = not toml")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_seed_offset_shifts_every_stage_seed():
    cfg = RunConfig({"corpus.seed": 4})
    shifted = cfg.with_seed_offset(2)
    for k in SEED_KEYS:
        assert shifted[k] == cfg[k] + 2
    assert shifted["adapter.rank"] == cfg["adapter.rank"]
    assert cfg.with_seed_offset(0) is cfg


def test_describe_is_valid_toml_with_defaults():
    tree = tomli.loads(describe())
    from gradrecon.config import _flatten

    assert RunConfig(_flatten(tree)).hash() == RunConfig().hash()


def test_eta_grid():
    g = RunConfig().eta_grid()
    assert g[0] == pytest.approx(1e-3) and g[-1] == pytest.approx(1.0) and len(g) == 7
    assert RunConfig({"unlearn.grid_points": 1}).eta_grid() == [1e-3]
