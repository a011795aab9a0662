import pytest

from bridgeseg.config import (KEYS, ConfigError, RunConfig, format_kv, parse_assignment, parse_value,
                              read_kv_file, split_prefixed)


def test_defaults():
    cfg = RunConfig()
    assert (cfg.method, cfg.steps, cfg.batch_size, cfg.lr) == ("lsb", 3000, 16, 1e-3)
    assert (cfg.beta1, cfg.beta2, cfg.alpha_max) == (0.9, 0.999, 0.999)
    w = cfg.weights
    assert (w.lambda_w, w.lambda_c, w.lambda_a) == (0.01, 4.0, 0.1)


def test_every_field_has_a_key():
    flat = RunConfig().to_flat()
    assert set(flat) == set(KEYS)
    assert RunConfig.from_flat(flat) == RunConfig()


def test_overrides_and_unknown_key():
    cfg = RunConfig().with_overrides({"loss.lambda_c": 0, "train.seed": 4})
    assert cfg.weights.lambda_c == 0.0 and cfg.seed == 4
    with pytest.raises(ConfigError, match="unknown"):
        RunConfig().with_overrides({"loss.lambda_q": 1})


@pytest.mark.parametrize("key,value", [("train.steps", 0), ("train.steps", 1.5), ("train.method", "dann"),
                                       ("ablation.use_con", "yes"), ("loss.lambda_a", -1.0),
                                       ("net.hidden_dims", [64, "x"]), ("ema.alpha_max", 2.0)])
def test_invalid_values(key, value):
    with pytest.raises(ConfigError):
        RunConfig().with_overrides({key: value})


def test_step_schedule():
    cfg = RunConfig(steps=100, lr_schedule="step")
    assert cfg.lr_at(79) == 1e-3 and cfg.lr_at(80) == pytest.approx(1e-4)
    assert RunConfig(steps=100).lr_at(99) == 1e-3


def test_parse_values():
    assert parse_value("0.5") == 0.5
    assert parse_value("true") is True
    assert parse_value("[32, 32]") == [32, 32]
    assert parse_value("step") == "step"
    assert parse_assignment("loss.lambda_c = 0") == ("loss.lambda_c", 0)
    with pytest.raises(ConfigError):
        parse_assignment("loss.lambda_c")


def test_kv_file_round_trip(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\ntrain.steps = 10  # inline\n\nbench.seed = 2\n" + format_kv({"optim.lr": 0.01}))
    flat = read_kv_file(path)
    assert flat == {"train.steps": 10, "bench.seed": 2, "optim.lr": 0.01}
    bench, run = split_prefixed(flat)
    assert bench == {"seed": 2} and run == {"train.steps": 10, "optim.lr": 0.01}


def test_kv_file_duplicate_key(tmp_path):
    path = tmp_path / "dup.cfg"
    path.write_text("train.steps = 1\ntrain.steps = 2\n")
    with pytest.raises(ConfigError, match="duplicate"):
        read_kv_file(path)
