"""Canonical config serialization, hashing, and layered merging.

Every artifact (checkpoints, reports, manifests written by the CLI) embeds
the hash of the fully resolved configuration so outputs can be traced back
to the exact settings that produced them.
"""

from __future__ import annotations

import hashlib
import json

from .errors import ConfigurationError


def canonical_json(obj) -> str:
    """Key-sorted, whitespace-free JSON: the hashing wire form."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def merge_config(defaults: dict, file_config: dict | None = None,
                 overrides: dict | None = None) -> dict:
    """defaults < file < explicit flags.  Unknown keys are typos, not
    extensions, so they fail loudly.  Override values of None mean 'not
    given on the command line' and are skipped."""
    out = dict(defaults)
    for source, name in ((file_config, "config file"), (overrides, "flag")):
        if not source:
            continue
        for key, value in source.items():
            if key not in defaults:
                raise ConfigurationError(f"unknown {name} setting {key!r}")
            if value is None:
                continue
            out[key] = value
    return out


def load_config_file(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
    except OSError as exc:
        raise ConfigurationError(f"cannot read config file {path}: {exc}") from exc
    except ValueError as exc:
        raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise ConfigurationError(f"config file {path} must hold a JSON object")
    return obj
