import pytest
import yaml

from come.config import ConfigError, RunConfig, load_config


def test_defaults():
    rc = load_config()
    assert rc == RunConfig()
    assert (rc.model.d_model, rc.model.n_layers, rc.model.n_heads, rc.model.d_ff, rc.model.n_experts) == (64, 4, 4, 128, 4)
    assert (rc.reward.delta_d, rc.reward.delta_f) == (50.0, 0.5)
    assert (rc.dpo.beta, rc.dpo.alpha, rc.dpo.gamma, rc.cot.gamma) == (0.1, 1.0, 0.1, 0.1)
    assert rc.sample.K == 10 and rc.dpo.strategies == ["cc", "cw"]


def test_precedence(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump({"seed": 1, "cot": {"epochs": 5}, "out": "a"}))
    rc = load_config(path, ["cot.epochs=7", "dpo.strategies=[cw]"], seed=9, out="b")
    assert (rc.seed, rc.cot.epochs, rc.out, rc.dpo.strategies) == (9, 7, "b", ["cw"])
    assert rc.cot.lr == RunConfig().cot.lr


def test_int_promoted_to_float():
    assert load_config(overrides=["cot.lr=1"]).cot.lr == 1.0


def test_every_problem_reported(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump({"bogus": 1, "model": {"d_model": "wide", "colour": 3}}))
    with pytest.raises(ConfigError) as err:
        load_config(path, ["cot.epochs=-1", "reward.mode=fuzzy", "nokey"])
    text = "\n".join(err.value.problems)
    for key in ("bogus", "model.d_model", "model.colour", "cot", "reward.mode", "nokey"):
        assert key in text
    assert len(err.value.problems) >= 6


@pytest.mark.parametrize("override", ["model.n_experts=3", "model.n_heads=3", "data.split=[0.5,0.5]",
                                      "sample.K=1", "dpo.strategies=[xx]", "reward.ig_target=other",
                                      "seed=abc", "ablation.skip_router_ft=1", "cot.warmup=-1"])
def test_invalid_values(override):
    with pytest.raises(ConfigError):
        load_config(overrides=[override])


def test_dump_roundtrip(tmp_path):
    rc = load_config(overrides=["base.epochs=2"], seed=4)
    rc.dump(tmp_path / "r.yaml")
    again = load_config(tmp_path / "r.yaml")
    assert again == rc and again.digest() == rc.digest()
    assert load_config(seed=5).digest() != rc.digest()


def test_unreadable_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
    bad = tmp_path / "list.yaml"
    bad.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_exponent_notation_accepted():
    assert load_config(overrides=["cot.lr=1e-4"]).cot.lr == 1e-4
    with pytest.raises(ConfigError):
        load_config(overrides=["cot.lr=fast"])
