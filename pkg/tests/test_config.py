import json
from pathlib import Path

import pytest

from app.config import get_settings
from app.errors import ConfigError
from app.models.schemas import DisguiseConfig, PoolConfig, TaskSpec, dump_json, load_config


@pytest.fixture(autouse=True)
def fresh_settings():
    get_settings.cache_clear()
    yield
    get_settings.cache_clear()


class TestSettings:
    def test_environment(self, monkeypatch):
        monkeypatch.setenv("STEGONET_LOG_LEVEL", "debug")
        monkeypatch.setenv("STEGONET_WORKERS", "3")
        monkeypatch.setenv("STEGONET_GRAD_BATCHES", "4")
        settings = get_settings()
        assert settings.log_level == "DEBUG"
        assert settings.workers == 3 and settings.grad_batches == 4

    def test_defaults(self, monkeypatch):
        for name in ("STEGONET_WORKERS", "STEGONET_GRAD_BATCHES", "STEGONET_API_PORT", "STEGONET_OUTPUT_DIR"):
            monkeypatch.delenv(name, raising=False)
        settings = get_settings()
        assert settings.workers >= 1
        assert settings.grad_batches == 10 and settings.api_port == 8000
        assert settings.output_dir == "recovered"

    @pytest.mark.parametrize("name,value", [
        ("STEGONET_LOG_LEVEL", "chatty"),
        ("STEGONET_WORKERS", "many"),
        ("STEGONET_WORKERS", "0"),
        ("STEGONET_GRAD_BATCHES", "-2"),
    ])
    def test_invalid(self, monkeypatch, name, value):
        monkeypatch.setenv(name, value)
        with pytest.raises(ConfigError):
            get_settings()


class TestJsonConfigs:
    def test_unknown_field(self, tmp_path):
        path = tmp_path / "task.json"
        path.write_text(json.dumps({"kind": "classification", "colour": "red"}))
        with pytest.raises(ConfigError):
            load_config(path, TaskSpec)

    def test_malformed(self, tmp_path):
        path = tmp_path / "task.json"
        path.write_text("{kind:")
        with pytest.raises(ConfigError):
            load_config(path, TaskSpec)

    def test_lambda_p_range(self):
        with pytest.raises(ValueError):
            DisguiseConfig(lambda_p=1.0)

    def test_secret_threshold_defaults(self):
        cfg = DisguiseConfig()
        assert cfg.secret_threshold("ber") == 0.0001
        assert cfg.secret_threshold("acc") == 0.01
        assert DisguiseConfig(tau_se=0.2).secret_threshold("psnr") == 0.2

    def test_shipped_configs_validate(self):
        configs = Path(__file__).resolve().parent.parent / "data" / "configs"
        pool = load_config(configs / "pool.json", PoolConfig)
        assert len(pool.task_pairs) == 2 and len(pool.seeds) == 6

    def test_non_finite_output(self):
        text = dump_json(DisguiseConfig(tau_st=float("inf")), indent=None)
        assert json.loads(text)["tau_st"] == "inf"
