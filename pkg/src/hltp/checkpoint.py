"""Model checkpoints: a JSON manifest (kind, variant, architecture config,
version, seed) next to an ``.npz`` of named parameter and buffer arrays."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from torch import nn

from .storage import load_arrays, read_manifest, save_arrays, write_manifest
from .student import StudentConfig, StudentModel
from .teacher import TeacherConfig, TeacherModel

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
ARRAYS = "params.npz"


class CheckpointError(RuntimeError):
    pass


def model_kind(model: nn.Module) -> str:
    if isinstance(model, TeacherModel):
        return "teacher"
    if isinstance(model, StudentModel):
        return "student"
    raise TypeError(f"not a forecasting model: {type(model).__name__}")


def save_checkpoint(model: nn.Module, directory, seed: int | None = None, extra_arrays=None, meta=None) -> Path:
    """Write ``manifest.json`` and ``params.npz`` under ``directory``.

    ``extra_arrays`` (e.g. the KDM log-variances) are stored with an
    ``extra.`` prefix and come back in the loaded checkpoint's ``extra``.
    """
    from . import __version__

    directory = Path(directory)
    kind = model_kind(model)
    arrays = {f"param.{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    for k, v in (extra_arrays or {}).items():
        arrays[f"extra.{k}"] = np.asarray(v.detach().cpu() if torch.is_tensor(v) else v)
    save_arrays(directory / ARRAYS, arrays)
    write_manifest(
        directory / MANIFEST,
        {
            "format": FORMAT_VERSION,
            "kind": kind,
            "variant": getattr(model.cfg, "variant", "teacher"),
            "config": model.cfg.to_dict(),
            "version": __version__,
            "seed": seed,
            "n_parameters": sum(p.numel() for p in model.parameters() if p.requires_grad),
            **(meta or {}),
        },
    )
    return directory


class Checkpoint:
    """A loaded checkpoint: the model (in eval mode), its manifest and extra arrays."""

    def __init__(self, model, manifest, extra):
        self.model = model
        self.manifest = manifest
        self.extra = extra

    @property
    def kind(self) -> str:
        return self.manifest["kind"]


def build_model(kind: str, config: dict) -> nn.Module:
    if kind == "teacher":
        return TeacherModel(TeacherConfig.from_dict(config))
    if kind == "student":
        return StudentModel(StudentConfig.from_dict(config))
    raise CheckpointError(f"unknown model kind {kind!r}")


def load_checkpoint(directory) -> Checkpoint:
    directory = Path(directory)
    if not (directory / MANIFEST).is_file() or not (directory / ARRAYS).is_file():
        raise FileNotFoundError(f"no checkpoint at {directory}")
    manifest = read_manifest(directory / MANIFEST)
    if manifest.get("format") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format')!r}")
    model = build_model(manifest["kind"], manifest["config"])
    arrays = load_arrays(directory / ARRAYS)
    state = {k[len("param.") :]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("param.")}
    missing, unexpected = model.load_state_dict(state, strict=False)
    if missing or unexpected:
        raise CheckpointError(f"state mismatch: missing={missing}, unexpected={unexpected}")
    model.eval()
    extra = {k[len("extra.") :]: v for k, v in arrays.items() if k.startswith("extra.")}
    return Checkpoint(model, manifest, extra)


def load_model(source) -> nn.Module:
    """Accept a model, a :class:`Checkpoint`, or a checkpoint directory."""
    if isinstance(source, nn.Module):
        return source
    if isinstance(source, Checkpoint):
        return source.model
    return load_checkpoint(source).model
