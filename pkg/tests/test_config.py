import json

import pytest

from bfica.config import CostModel, SimConfig, load_cost_model
from bfica.errors import ConfigError


def test_defaults_validate():
    config = SimConfig().validate()
    assert config.b_max == 7
    assert config.pet_rate == 42.0
    assert config.consensus == "unanimous"


def test_string_overrides_are_coerced():
    config = SimConfig().with_overrides(b_max="3", duration="60", latency_model="0.01,0.02")
    assert config.b_max == 3
    assert config.duration == 60.0
    assert config.latency_model == (0.01, 0.02)


def test_none_overrides_skipped():
    assert SimConfig().with_overrides(seed=None, mode=None) == SimConfig()


@pytest.mark.parametrize(
    "overrides",
    [
        {"b_max": 0},
        {"duration": -1.0},
        {"mode": "fast"},
        {"consensus": "quorum"},
        {"latency_model": (0.5, 0.1)},
        {"delta_t": -1.0},
        {"no_such_key": 1},
        {"cost_model": CostModel()},
        {"b_max": "seven"},
    ],
)
def test_bad_overrides(overrides):
    with pytest.raises(ConfigError):
        SimConfig().with_overrides(**overrides)


def test_baseline_drops_hashing_and_encryption():
    costs = SimConfig(mode="baseline").effective_costs
    assert costs.hash_cost(4096) == 0.0
    assert costs.security_cost(4096) == 0.0
    assert costs.verify_sig == CostModel().verify_sig


def test_request_hash_charged_once():
    full = CostModel()
    baseline = SimConfig(mode="baseline").effective_costs
    assert full.request_cost(1, 1024) == pytest.approx(
        full.verify_sig + full.tdata_check + full.hash_cost(1024) + full.decrypt_cost(1024)
    )
    extra = full.request_cost(1, 1024) - baseline.request_cost(1, 1024)
    assert extra == pytest.approx(full.security_cost(1024))
    assert extra == pytest.approx(0.13, abs=0.02)


def test_pet_check_costs_tdata_extra():
    costs = CostModel()
    with_check = costs.verification_cost(1, 1024, True)
    without = costs.verification_cost(1, 1024, False)
    assert with_check - without == pytest.approx(costs.tdata_check)


def test_negative_cost_rejected():
    with pytest.raises(ConfigError):
        CostModel(verify_sig=-1.0)


class TestCalibrationFile:
    def test_env_override(self, tmp_path, monkeypatch):
        path = tmp_path / "cal.json"
        path.write_text(json.dumps({"verify_sig": 2.5, "_comment": "x"}))
        monkeypatch.setenv("BFICA_CALIBRATION", str(path))
        model = load_cost_model()
        assert model.verify_sig == 2.5
        assert model.tdata_check == CostModel().tdata_check

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_cost_model(tmp_path / "absent.json")

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError):
            load_cost_model(path)

    def test_unknown_keys_warned(self, tmp_path, caplog):
        path = tmp_path / "extra.json"
        path.write_text(json.dumps({"warp_drive": 1.0}))
        model = load_cost_model(path)
        assert model == CostModel()
        assert "warp_drive" in caplog.text
