"""
Tests for environment defaults, run manifests and checkpoint sidecars.
"""

import json

import pytest

from s2wmamba import config
from s2wmamba.errors import FormatError
from s2wmamba.models import NetworkConfig, RunManifest, TrainConfig


class TestDefaults:
    """Tests for the environment driven defaults."""

    def test_seed_from_environment(self):
        """Test that every seeded model picks up S2W_SEED."""
        assert config.SEED == 7
        assert RunManifest(command="gen").seed == config.SEED
        assert TrainConfig().seed == config.SEED
        assert NetworkConfig().seed == config.SEED

    def test_dtype_from_environment(self):
        assert NetworkConfig().dtype == config.DTYPE == "float64"


class TestManifest:
    """Tests for save_manifest / load_manifest."""

    def test_roundtrip(self, tmp_path):
        """Test that the run config, timings and outputs come back unchanged."""
        manifest = RunManifest(
            command="train",
            config={"network": {"width": 4}, "steps": 2},
            seed=11,
            timings={"total_s": 0.5},
            outputs=["runs/net.s2wc"],
        )
        path = config.save_manifest(tmp_path / "runs" / config.MANIFEST_FILE, manifest)
        assert json.loads(path.read_text())["config"]["network"] == {"width": 4}
        assert config.load_manifest(path) == manifest


class TestSidecar:
    """Tests for the network config stored next to a checkpoint."""

    def test_roundtrip(self, tmp_path, tiny_config):
        ckpt = tmp_path / "net.s2wc"
        assert config.save_network_config(ckpt, tiny_config).name == "net.s2wc.json"
        assert config.load_network_config(ckpt) == tiny_config

    def test_missing(self, tmp_path):
        with pytest.raises(FormatError):
            config.load_network_config(tmp_path / "net.s2wc")
