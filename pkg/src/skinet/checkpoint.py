"""Model checkpoints: a directory holding ``config.txt`` (key = JSON value lines),
``weights.pt`` (state dict) and, for classifiers, ``labels.txt``."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import tempfile
from pathlib import Path

import torch

from .classifier import ClassifierConfig, ClfModel
from .segnet import SegModel, SegNetConfig


class CheckpointError(RuntimeError):
    pass


_KINDS = {"segnet": (SegNetConfig, SegModel), "classifier": (ClassifierConfig, ClfModel)}


def config_to_dict(cfg) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(cfg).items()}


def config_from_dict(cls, d: dict):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(fields)
    if unknown:
        raise CheckpointError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    return cls(**kwargs)


def write_kv(path: Path, values: dict) -> None:
    lines = [f"{k} = {json.dumps(v)}" for k, v in values.items()]
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_kv(path: Path) -> dict:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CheckpointError(f"{path}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        out[key] = json.loads(raw)
    return out


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(model, directory) -> Path:
    directory = Path(directory)
    kind = "segnet" if isinstance(model, SegModel) else "classifier" if isinstance(model, ClfModel) else None
    if kind is None:
        raise CheckpointError(f"cannot checkpoint a {type(model).__name__}")
    directory.mkdir(parents=True, exist_ok=True)
    meta = {
        "kind": kind,
        "dtype": str(next(model.parameters()).dtype).replace("torch.", ""),
        "trained": bool(getattr(model, "trained", False)),
    }
    meta.update(config_to_dict(model.cfg))
    write_kv(directory / "config.txt", meta)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".weights.")
    os.close(fd)
    torch.save(model.state_dict(), tmp)
    os.replace(tmp, directory / "weights.pt")
    if kind == "classifier":
        atomic_write_text(directory / "labels.txt", "\n".join(model.cfg.class_labels) + "\n")
    return directory


def load_checkpoint(directory, expected=None):
    """Rebuild a model from a checkpoint; ``expected`` config must match when given."""
    directory = Path(directory)
    if not (directory / "config.txt").is_file() or not (directory / "weights.pt").is_file():
        raise CheckpointError(f"no checkpoint at {directory}")
    meta = read_kv(directory / "config.txt")
    kind = meta.pop("kind", None)
    dtype = meta.pop("dtype", "float32")
    trained = meta.pop("trained", False)
    if kind not in _KINDS:
        raise CheckpointError(f"{directory}: unknown checkpoint kind {kind!r}")
    cfg_cls, model_cls = _KINDS[kind]
    cfg = config_from_dict(cfg_cls, meta)
    if expected is not None and expected != cfg:
        raise CheckpointError(f"{directory}: checkpoint config {cfg} does not match expected {expected}")
    if kind == "classifier":
        labels = tuple((directory / "labels.txt").read_text().split())
        if labels != tuple(cfg.class_labels):
            raise CheckpointError(f"{directory}: labels.txt disagrees with config class_labels")
    model = model_cls(cfg).to(getattr(torch, dtype))
    state = torch.load(directory / "weights.pt", map_location="cpu", weights_only=True)
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(f"{directory}: weights do not fit the recorded architecture: {exc}") from exc
    model.trained = bool(trained)
    model.eval()
    return model


def checkpoint_hash(directory) -> str:
    h = hashlib.sha256()
    for name in ("config.txt", "weights.pt", "labels.txt"):
        p = Path(directory) / name
        if p.is_file():
            h.update(name.encode())
            h.update(p.read_bytes())
    return h.hexdigest()
