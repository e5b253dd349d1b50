import pytest

from recem.config import ConfigError, RunConfig, load_config, parse_text, parse_value


def test_defaults_are_valid_and_mirror_the_data_spec():
    cfg = RunConfig()
    spec = cfg.data_spec()
    assert (spec.K, spec.M, spec.n_in, spec.dim_r, spec.dim_z, spec.rho) == (16, 8, 64, 32, 16, 0.9)
    assert (spec.n_train, spec.n_val, spec.n_test) == (4000, 1000, 2000)
    assert cfg.seeds == [0, 1, 2, 3, 4] and cfg.d == 16
    mc = cfg.model_config(3)
    assert mc.seed == 3 and mc.beta_warmup == 30


def test_warmup_is_thirty_percent_of_epochs():
    assert RunConfig(epochs=10).warmup == 3
    assert RunConfig(epochs=1).warmup == 1
    assert RunConfig(epochs=10, beta_warmup=7).warmup == 7


@pytest.mark.parametrize("bad", [dict(variant="MLP"), dict(epochs=-1), dict(batch_size=0),
                                 dict(experiment="nope"), dict(seeds=[]), dict(M=6), dict(rho=2.0),
                                 dict(lambda_m=-1.0)])
def test_invalid_values_raise_config_error(bad):
    with pytest.raises(ConfigError):
        RunConfig(**bad)


def test_parse_value_types():
    assert parse_value("epochs", "7") == 7
    assert parse_value("lr", "0.5") == 0.5
    assert parse_value("mechanisms", "true") is True
    assert parse_value("grad_clip", "none") is None
    assert parse_value("seeds", "0,2;4") == [0, 2, 4]
    assert parse_value("variant", "CEM") == "CEM"
    with pytest.raises(ConfigError):
        parse_value("epochs", "seven")
    with pytest.raises(ConfigError):
        parse_value("nope", "1")
    with pytest.raises(ConfigError):
        parse_value("mechanisms", "maybe")


def test_text_roundtrip_and_comments(tmp_path):
    cfg = RunConfig(variant="CEM", lr=0.01, seeds=[1, 2], mechanisms=False)
    assert RunConfig(**parse_text(cfg.dumps())) == cfg
    p = tmp_path / "c.cfg"
    p.write_text("# comment\nepochs = 3  # trailing\n\nvariant = FuzzyCBM\n")
    got = load_config(p, {"epochs": 5})
    assert got.epochs == 5 and got.variant == "FuzzyCBM"
    with pytest.raises(ConfigError):
        parse_text("epochs 3")
