"""Single-file checkpoint format shared by all trainable components.

A checkpoint is a torch-serialized dict with a version tag, a kind string
("autoencoder", "model", ...), a plain-dict config header, named weight
blocks (state dicts keyed by component name) and optional extras such as
loss histories. Loading validates structure before anything is handed out.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import torch

from .errors import IntegrityError

FORMAT_VERSION = 1
_REQUIRED_KEYS = ("format_version", "kind", "config", "weights")


@dataclass(frozen=True)
class Checkpoint:
    kind: str
    config: dict[str, Any]
    weights: dict[str, dict[str, torch.Tensor]]
    extra: dict[str, Any]


def save_checkpoint(
    path: str | Path,
    kind: str,
    config: dict[str, Any],
    weights: dict[str, dict[str, torch.Tensor]],
    extra: dict[str, Any] | None = None,
) -> None:
    """Atomically write a checkpoint (temp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config": config,
        "weights": weights,
        "extra": extra or {},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path: str | Path, expect_kind: str | None = None) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise IntegrityError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise IntegrityError(f"checkpoint {path} is unreadable: {exc}") from exc
    if not isinstance(payload, dict) or any(k not in payload for k in _REQUIRED_KEYS):
        raise IntegrityError(f"checkpoint {path} is missing required fields")
    if payload["format_version"] != FORMAT_VERSION:
        raise IntegrityError(
            f"checkpoint {path} has format version {payload['format_version']}, "
            f"expected {FORMAT_VERSION}"
        )
    if expect_kind is not None and payload["kind"] != expect_kind:
        raise IntegrityError(
            f"checkpoint {path} holds a {payload['kind']!r}, expected {expect_kind!r}"
        )
    return Checkpoint(
        kind=payload["kind"],
        config=payload["config"],
        weights=payload["weights"],
        extra=payload.get("extra", {}),
    )
