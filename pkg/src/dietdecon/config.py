"""Run configuration: one YAML file per run, plus the output manifest."""

import hashlib
import json
import os
from dataclasses import dataclass, field

import yaml

from . import __version__


class ConfigError(ValueError):
    """Malformed or incomplete run configuration."""


_SCENARIOS = ("mixed", "all-episodic", "all-regular", "lognormal")
_COMMANDS = ("simulate", "fit", "evaluate", "export-density", "diagnose")


@dataclass
class RunConfig:
    """Parsed configuration with the raw file bytes kept for hashing."""

    command: str
    seed: int
    output_dir: str
    threads: int
    section: dict
    raw_bytes: bytes

    @property
    def sha256(self):
        return hashlib.sha256(self.raw_bytes).hexdigest()


def _require(section, key, where):
    if key not in section:
        raise ConfigError(f"missing required field '{where}.{key}'")
    return section[key]


def load_config(path, command, output_override=None, threads_override=None):
    """Read and validate the config file for one subcommand."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}")
    try:
        payload = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config parse error in {path}: {exc}")
    if not isinstance(payload, dict):
        raise ConfigError("config file must hold a mapping at top level")

    key = command.replace("-", "_")
    section = payload.get(key, payload.get(command))
    if section is None:
        raise ConfigError(f"config has no '{key}' section for this command")
    if not isinstance(section, dict):
        raise ConfigError(f"'{key}' section must be a mapping")

    seed = payload.get("seed")
    if command in ("simulate", "fit"):
        if seed is None:
            raise ConfigError(f"'seed' is mandatory for {command}")
    seed = 0 if seed is None else int(seed)

    output_dir = (output_override
                  or os.environ.get("DIETDECON_OUTPUT")
                  or payload.get("output", "."))
    threads = int(threads_override if threads_override is not None
                  else payload.get("threads", 1))
    if threads < 1:
        raise ConfigError("'threads' must be at least 1")

    if command == "simulate":
        scenario = _require(section, "scenario", key)
        if scenario not in _SCENARIOS:
            raise ConfigError(
                f"simulate.scenario must be one of {_SCENARIOS}, got {scenario!r}")
    if command == "fit":
        _require(section, "dataset", key)
        _require(section, "q", key)
    if command == "evaluate":
        _require(section, "draws", key)
        _require(section, "truth", key)
    if command == "export-density":
        _require(section, "draws", key)
    if command == "diagnose":
        _require(section, "draws", key)
        _require(section, "dataset", key)
        _require(section, "q", key)

    return RunConfig(command=command, seed=seed, output_dir=output_dir,
                     threads=threads, section=section, raw_bytes=raw)


def atomic_write(path, text):
    """Write text via a temp file and rename, so outputs never half-exist."""
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_manifest(cfg: RunConfig, outputs):
    manifest = {
        "command": cfg.command,
        "config_sha256": cfg.sha256,
        "seed": cfg.seed,
        "version": __version__,
        "outputs": sorted(outputs),
    }
    path = os.path.join(cfg.output_dir, "manifest.json")
    atomic_write(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path
