"""Checkpoints: a JSON manifest plus a flat little-endian float64 parameter file.

Manifest fields:
    format          "ssmicl-checkpoint/1"
    model           "ssm" or "ticl"
    config          model config (see SSMConfig / TransformerConfig)
    parameters      [{"name", "shape", "offset"}] in model.parameters() order;
                    offset counts float64 elements into the binary file
    lsf             {"mean", "std"} log10 large-scale gain standardisation
    codebook        fronthaul codebook the model was trained with (optional)
    metadata        free-form run information (data / train configs, loss)
The binary file holds every parameter raveled in row-major order, back to back.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .prompt import LsfScaler
from .quant import Codebook
from .ssm import SSMConfig, SSMICLModel
from .transformer import TICLModel, TransformerConfig

FORMAT = "ssmicl-checkpoint/1"


def _paths(path):
    path = Path(path)
    base = path.with_suffix("") if path.suffix in (".json", ".bin") else path
    return base.with_suffix(".json"), base.with_suffix(".bin")


def save_checkpoint(path, model, lsf: LsfScaler, codebook: Codebook | None = None,
                    metadata: dict | None = None) -> Path:
    manifest_path, bin_path = _paths(path)
    kind = "ssm" if isinstance(model, SSMICLModel) else "ticl"
    entries, offset = [], 0
    for p in model.parameters():
        entries.append({"name": p.name, "shape": list(p.shape), "offset": offset})
        offset += p.size
    flat = np.concatenate([p.value.ravel() for p in model.parameters()]).astype("<f8")
    manifest = {"format": FORMAT, "model": kind, "config": model.config.to_dict(),
                "parameters": entries, "lsf": {"mean": lsf.mean, "std": lsf.std},
                "codebook": codebook.to_dict() if codebook is not None else None,
                "metadata": metadata or {}}
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    bin_path.write_bytes(flat.tobytes())
    manifest_path.write_text(json.dumps(manifest, indent=1))
    return manifest_path


def load_checkpoint(path):
    """Returns (model, lsf, codebook or None, manifest)."""
    manifest_path, bin_path = _paths(path)
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != FORMAT:
        raise ValueError(f"{manifest_path}: not a {FORMAT} manifest")
    if manifest["model"] == "ssm":
        model = SSMICLModel(SSMConfig(**manifest["config"]))
    else:
        model = TICLModel(TransformerConfig(**manifest["config"]))
    flat = np.frombuffer(bin_path.read_bytes(), dtype="<f8")
    params = model.parameters()
    if len(params) != len(manifest["parameters"]):
        raise ValueError("parameter list does not match the model config")
    for p, e in zip(params, manifest["parameters"]):
        if p.name != e["name"] or list(p.shape) != e["shape"]:
            raise ValueError(f"checkpoint entry {e['name']} {e['shape']} does not match "
                             f"{p.name} {list(p.shape)}")
        p.assign(flat[e["offset"]:e["offset"] + p.size].reshape(p.shape).astype(float))
    cb = manifest.get("codebook")
    return (model, LsfScaler(**manifest["lsf"]), Codebook.from_dict(cb) if cb else None,
            manifest)
