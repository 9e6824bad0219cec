"""Run configuration: config files, precedence resolution, manifests and output locks."""

from __future__ import annotations

import hashlib
import json
import os
import platform
from collections.abc import Iterable, Iterator, Mapping
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Union

import numpy as np
import yaml

import diffscene
from diffscene.core.errors import ConfigurationError, OutputError, RunLockError
from diffscene.core.logging import get_logger

logger = get_logger(__name__)

PathLike = Union[str, Path]

LOCK_NAME = ".diffscene.lock"
MANIFEST_NAME = "manifest.json"


@dataclass(frozen=True)
class RunConfig:
    """The resolved configuration of one CLI run."""

    command: str
    seed: int
    out: Path
    params: Mapping[str, Any] = field(default_factory=dict)
    inputs: tuple[Path, ...] = ()


def load_config_file(path: PathLike | None) -> dict[str, Any]:
    """Load a UTF-8 JSON (or YAML) config file into a flat mapping.

    Returns an empty mapping when *path* is ``None``.
    """
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"Config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigurationError(
            f"Cannot parse config file: {path}",
            hint="Config files are UTF-8 JSON (YAML is accepted too).",
        ) from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"Config file must hold a mapping at top level: {path}")
    return {str(k).replace("-", "_"): v for k, v in data.items()}


def resolve(
    defaults: Mapping[str, Any],
    file_values: Mapping[str, Any],
    flags: Mapping[str, Any],
) -> dict[str, Any]:
    """Merge settings with precedence flags > config file > defaults.

    Flags whose value is ``None`` count as "not given". Keys in the config file
    that no default declares are rejected so typos do not pass silently.
    """
    unknown = sorted(set(file_values) - set(defaults))
    if unknown:
        raise ConfigurationError(
            f"Unknown config key(s): {', '.join(unknown)}",
            hint=f"Known keys: {', '.join(sorted(defaults))}",
        )
    resolved = dict(defaults)
    resolved.update(file_values)
    resolved.update({k: v for k, v in flags.items() if v is not None})
    return resolved


def sha256_file(path: PathLike) -> str:
    """Return the hex sha256 of a file's bytes."""
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _jsonable(value: Any) -> Any:
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, Mapping):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if hasattr(value, "value") and not isinstance(value, (int, float, str, bool)):
        return value.value
    return value


def _input_hashes(inputs: Iterable[Path]) -> dict[str, str]:
    hashes: dict[str, str] = {}
    for item in inputs:
        item = Path(item)
        if item.is_file():
            hashes[str(item)] = sha256_file(item)
        elif item.is_dir():
            for child in sorted(item.iterdir()):
                if child.is_file() and child.name not in (LOCK_NAME,):
                    hashes[str(child)] = sha256_file(child)
    return hashes


def write_manifest(run: RunConfig, artifacts: Iterable[PathLike] = ()) -> Path:
    """Write ``manifest.json`` capturing the resolved config of *run*.

    The manifest records the command, resolved parameters, seed, sha256 hashes
    of every input file, the produced artifact names and the versions of the
    package, Python and numpy. It carries no timestamps so reruns are
    byte-identical. Keys already present in an existing manifest (a dataset
    manifest, for instance) are kept unless the run overrides them.
    """
    out = Path(run.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / MANIFEST_NAME
    manifest: dict[str, Any] = {}
    if path.exists():
        try:
            manifest = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError:
            logger.warning("Replacing unreadable manifest at %s", path)
            manifest = {}
    manifest.update({
        "command": run.command,
        "seed": run.seed,
        "config": _jsonable(dict(run.params)),
        "inputs": _input_hashes(run.inputs),
        "artifacts": sorted(Path(a).name for a in artifacts),
        "versions": {
            "diffscene": diffscene.__version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
        },
    })
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.debug("Manifest written to %s", path)
    return path


def ensure_writable(out: PathLike) -> Path:
    """Create *out* if needed and check it accepts new files.

    Raises:
        OutputError: Naming the path, if the directory cannot be written.
    """
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OutputError(f"Cannot create output directory: {out}") from exc
    if not os.access(out, os.W_OK):
        raise OutputError(
            f"Output directory is not writable: {out}",
            hint="Choose another --out root or fix its permissions.",
        )
    return out


@contextmanager
def output_lock(out: PathLike) -> Iterator[Path]:
    """Hold an exclusive lock file in the *out* root for the duration of a run."""
    out = ensure_writable(out)
    lock = out / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError as exc:
        raise RunLockError(
            f"Output root is in use by another run: {out}",
            hint=f"Target a distinct --out root, or remove {lock} if no run is active.",
        ) from exc
    except OSError as exc:
        raise OutputError(f"Cannot write to output directory: {out}") from exc
    try:
        os.write(fd, str(os.getpid()).encode("ascii"))
        os.close(fd)
        yield out
    finally:
        lock.unlink(missing_ok=True)
