"""Run configuration: a single JSON document with env-var and flag overrides.

Every artifact the pipeline emits embeds the hash of the resolved config so
a report can never mix artifacts from different runs. out_dir and jobs do
not affect results and are excluded from the hash.

Environment overrides use the RFAUTH_ prefix with double underscores as
path separators, e.g. ``RFAUTH_SEED=3`` or ``RFAUTH_CLASSIFIER__EPOCHS=10``.
Values are parsed as JSON when possible, else taken as strings.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from pathlib import Path

from .errors import ConfigError

ENV_PREFIX = "RFAUTH_"

DEFAULT_CONFIG = {
    "seed": 0,
    "out_dir": "runs/default",
    "jobs": 1,
    "deterministic": False,
    "dataset": {
        # "simulated" or a directory of <device_id>_<domain_id>.iq files
        "source": "simulated",
        "n_devices": 5,
        "domain_T": "dayT",
        "domain_S": "dayS",
        "samples_per_device": 6124,
        "fleet_seed": 7,
        "impairment_ranges": None,
        "waveform": {"n_symbols": 256, "oversample": 2, "seed": 424242, "amplitude": 1.0},
        "channel_T": {
            "seed": 101,
            "n_taps": 2,
            "max_delay": 8,
            "echo_to_main_db": -14.0,
            "snr_db": 25.0,
        },
        "channel_S": {
            "seed": 202,
            "n_taps": 4,
            "max_delay": 10,
            "echo_to_main_db": -7.0,
            "snr_db": 17.0,
        },
    },
    "slicing": {"slice_length": 128, "stride": 4, "max_slices": 1500, "normalize": True},
    "classifier": {
        "variant": "oneD",
        "n_filters": None,
        "learning_rate": 1e-4,
        "batch_size": 128,
        "epochs": 100,
        "target_val_accuracy": None,
        "patience": None,
    },
    "reveal": {
        "base_filters": 16,
        "disc_filters": 32,
        "cycle_weight": 10.0,
        "batch_size": 16,
        "replay_size": 50,
        "grid": {"epochs": [20, 40], "learning_rates": [2e-4]},
    },
    "evaluation": {"max_slices_per_device": 400},
}

# Keys that do not influence computed results and stay out of the hash.
_UNHASHED_KEYS = ("out_dir", "jobs")


def _deep_update(base: dict, override: dict) -> dict:
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_update(base[key], value)
        else:
            base[key] = value
    return base


def _parse_env_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    out: dict = {}
    for key, value in sorted(environ.items()):
        if not key.startswith(ENV_PREFIX):
            continue
        path = key[len(ENV_PREFIX) :].lower().split("__")
        node = out
        for part in path[:-1]:
            node = node.setdefault(part, {})
        node[path[-1]] = _parse_env_value(value)
    return out


def _set_overrides(assignments) -> dict:
    out: dict = {}
    for text in assignments or ():
        if "=" not in text:
            raise ConfigError(f"--set expects key.path=value, got {text!r}")
        key, value = text.split("=", 1)
        path = key.strip().split(".")
        node = out
        for part in path[:-1]:
            node = node.setdefault(part, {})
        node[path[-1]] = _parse_env_value(value.strip())
    return out


class RunConfig:
    """Resolved configuration for one pipeline run."""

    def __init__(self, data: dict):
        self.data = data
        self._validate()

    def _validate(self):
        d = self.data
        try:
            if d["reveal"]["cycle_weight"] <= 0:
                raise ConfigError("reveal.cycle_weight must be > 0")
            if d["slicing"]["slice_length"] < 1 or d["slicing"]["stride"] < 1:
                raise ConfigError("slicing geometry must be positive")
            if d["dataset"]["source"] != "simulated":
                src = Path(d["dataset"]["source"])
                if not src.is_dir():
                    raise ConfigError(f"dataset source directory {src} does not exist")
            grid = d["reveal"]["grid"]
            if not grid["epochs"] or not grid["learning_rates"]:
                raise ConfigError("reveal.grid must list at least one epoch budget and lr")
            if int(d["dataset"]["n_devices"]) < 2:
                raise ConfigError("dataset.n_devices must be >= 2")
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"config missing or malformed field: {exc}") from exc

    def __getitem__(self, key):
        return self.data[key]

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    @property
    def out_dir(self) -> Path:
        return Path(self.data["out_dir"])

    def hashed_view(self) -> dict:
        view = copy.deepcopy(self.data)
        for key in _UNHASHED_KEYS:
            view.pop(key, None)
        return view

    def config_hash(self) -> str:
        blob = json.dumps(self.hashed_view(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def to_json(self) -> str:
        return json.dumps(self.data, sort_keys=True, indent=1)


def load_config(
    path=None, set_overrides=None, seed=None, jobs=None, out_dir=None, environ=None
) -> RunConfig:
    """Resolve a config: defaults < file < env vars < --set < dedicated flags."""
    data = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            file_data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(file_data, dict):
            raise ConfigError(f"config {path} must be a JSON object")
        _deep_update(data, file_data)
    _deep_update(data, _env_overrides(environ))
    _deep_update(data, _set_overrides(set_overrides))
    if seed is not None:
        data["seed"] = int(seed)
    if jobs is not None:
        data["jobs"] = int(jobs)
    if out_dir is not None:
        data["out_dir"] = str(out_dir)
    return RunConfig(data)
