"""Versioned JSON checkpoints with base64 tensor payloads.

Tensors are serialized as raw row-major float64 bytes, so a save/load round
trip is bitwise lossless.  The envelope records the model spec, seed, and
solver configuration needed to resume or evaluate.
"""

from __future__ import annotations

import base64
import json
from pathlib import Path

import numpy as np

from . import nn
from .graph import ParamTree
from .projops import ScalarSolveConfig
from .solve import Method, SolverConfig

FORMAT_VERSION = 1


class CheckpointError(Exception):
    """Unreadable, corrupt, or incompatible checkpoint."""


def _encode_tensor(arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    return {
        "shape": list(arr.shape),
        "dtype": "float64",
        "data": base64.b64encode(arr.tobytes()).decode("ascii"),
    }


def _decode_tensor(d: dict) -> np.ndarray:
    if d["dtype"] != "float64":
        raise CheckpointError(f"unsupported tensor dtype: {d['dtype']}")
    raw = base64.b64decode(d["data"])
    arr = np.frombuffer(raw, dtype=np.float64).reshape(d["shape"])
    return arr.copy()


def _solver_dict(cfg: SolverConfig) -> dict:
    return {
        "method": cfg.method.value,
        "steps_per_batch": cfg.steps_per_batch,
        "lam": cfg.lam,
        "margin": cfg.margin,
        "batch_size": cfg.batch_size,
        "seed": cfg.seed,
        "max_steps": cfg.max_steps,
        "consensus_weighted": cfg.consensus_weighted,
        "reflect_target_partition_first": cfg.reflect_target_partition_first,
        "workers": cfg.workers,
    }


def solver_from_dict(d: dict) -> SolverConfig:
    return SolverConfig(
        method=Method(d["method"]),
        steps_per_batch=d["steps_per_batch"],
        lam=d["lam"],
        margin=d["margin"],
        batch_size=d["batch_size"],
        seed=d["seed"],
        max_steps=d["max_steps"],
        consensus_weighted=d["consensus_weighted"],
        reflect_target_partition_first=d["reflect_target_partition_first"],
        workers=d.get("workers", 1),
        scalar=ScalarSolveConfig(),
    )


def save_checkpoint(
    path: str | Path,
    model,
    params: ParamTree,
    cfg: SolverConfig,
    seed: int,
    meta: dict | None = None,
) -> None:
    payload = {
        "format_version": FORMAT_VERSION,
        "model": model.spec_dict(),
        "seed": seed,
        "solver": _solver_dict(cfg),
        "params": {name: _encode_tensor(v) for name, v in params.items()},
        "meta": meta or {},
    }
    Path(path).write_text(json.dumps(payload), encoding="utf-8")


def load_checkpoint(path: str | Path) -> dict:
    """Returns {model, params, solver, seed, meta}; raises on any mismatch."""
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {version} != supported {FORMAT_VERSION}"
        )
    try:
        model = nn.model_from_spec(payload["model"])
        params = {k: _decode_tensor(v) for k, v in payload["params"].items()}
        solver = solver_from_dict(payload["solver"])
    except (KeyError, ValueError, TypeError) as exc:
        raise CheckpointError(f"malformed checkpoint {path}: {exc}") from exc
    for name, _, _ in model.param_specs():
        if name not in params:
            raise CheckpointError(f"checkpoint missing parameter {name}")
        expected = next(s for n, s, _ in model.param_specs() if n == name)
        if tuple(params[name].shape) != tuple(expected):
            raise CheckpointError(
                f"parameter {name}: shape {params[name].shape} != {expected}"
            )
    return {
        "model": model,
        "params": params,
        "solver": solver,
        "seed": payload["seed"],
        "meta": payload.get("meta", {}),
    }
