"""
Configuration management: environment defaults and JSON run state
"""

import json
import os
from pathlib import Path

import dotenv

dotenv.load_dotenv()

# default seed for every command, overridable per run
SEED = int(os.getenv("S2W_SEED", 7))
# empty string disables the log file
LOG_FILE = os.getenv("S2W_LOG_FILE", "s2w.log")
LOG_MAX_MB = float(os.getenv("S2W_LOG_MAX_MB", 10.0))
LOG_MAX_FILES = int(os.getenv("S2W_LOG_MAX_FILES", 5))
# float64 for verification paths, float32 allowed for training speed
DTYPE = os.getenv("S2W_DTYPE", "float64")
# tokens per chunk in the selective scan; only chunk boundary states are kept for backward
SCAN_CHUNK = int(os.getenv("S2W_SCAN_CHUNK", 64))

MANIFEST_FILE = "manifest.json"


def save_manifest(path, manifest):
    """Save a RunManifest to JSON"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(manifest.model_dump(mode="json"), f, indent=2)
    return path


def load_manifest(path):
    """Load a RunManifest from JSON"""
    from .models import RunManifest

    with open(path, "r") as f:
        data = json.load(f)
    return RunManifest.model_validate(data)


def save_network_config(ckpt_path, cfg):
    """Write the NetworkConfig sidecar that lets a checkpoint be rebuilt"""
    sidecar = Path(f"{ckpt_path}.json")
    with open(sidecar, "w") as f:
        json.dump(cfg.model_dump(mode="json"), f, indent=2)
    return sidecar


def load_network_config(ckpt_path):
    """Read the NetworkConfig sidecar of a checkpoint"""
    from .errors import FormatError
    from .models import NetworkConfig

    sidecar = Path(f"{ckpt_path}.json")
    if not sidecar.exists():
        raise FormatError(f"No configuration sidecar found at {sidecar}")

    with open(sidecar, "r") as f:
        data = json.load(f)
    return NetworkConfig.model_validate(data)
