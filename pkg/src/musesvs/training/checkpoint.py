"""Single-file checkpoints.

An ``.npz`` container holding named little-endian float32 arrays for every
parameter, buffer and optimizer moment, the torch RNG state as bytes, and a
JSON metadata block (step, seed, config hash, full run config, numpy RNG state).
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any, Optional

import numpy as np
import torch

FORMAT_VERSION = 1


def _f4(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy().astype("<f4")


def _module_arrays(prefix: str, module: torch.nn.Module) -> dict[str, np.ndarray]:
    out = {f"{prefix}/param/{k}": _f4(v) for k, v in module.named_parameters()}
    out.update({f"{prefix}/buffer/{k}": _f4(v) for k, v in module.named_buffers()})
    return out


def _optimizer_arrays(prefix: str, opt: torch.optim.Optimizer) -> dict[str, np.ndarray]:
    out = {}
    for idx, state in opt.state_dict()["state"].items():
        for key, value in state.items():
            out[f"{prefix}/{idx}/{key}"] = _f4(torch.as_tensor(value))
    return out


def save_checkpoint(path: str | Path, modules: dict[str, torch.nn.Module],
                    optimizers: dict[str, torch.optim.Optimizer], meta: dict[str, Any],
                    numpy_rng: Optional[np.random.Generator] = None) -> Path:
    """Write a checkpoint atomically (temporary file, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays: dict[str, np.ndarray] = {}
    for name, module in modules.items():
        arrays.update(_module_arrays(f"module/{name}", module))
    groups = {}
    for name, opt in optimizers.items():
        arrays.update(_optimizer_arrays(f"optim/{name}", opt))
        groups[name] = opt.state_dict()["param_groups"]
    meta = dict(meta, format=FORMAT_VERSION, param_groups=groups)
    if numpy_rng is not None:
        meta["numpy_rng"] = numpy_rng.bit_generator.state
    arrays["rng/torch"] = torch.get_rng_state().numpy()
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)
    return path


def read_meta(path: str | Path) -> dict[str, Any]:
    with np.load(path) as z:
        return json.loads(z["meta"].tobytes().decode())


def load_checkpoint(path: str | Path, modules: dict[str, torch.nn.Module],
                    optimizers: Optional[dict[str, torch.optim.Optimizer]] = None,
                    numpy_rng: Optional[np.random.Generator] = None, restore_torch_rng: bool = True
                    ) -> dict[str, Any]:
    """Restore modules (and optionally optimizers and RNG state) in place; returns the metadata."""
    with np.load(path) as z:
        meta = json.loads(z["meta"].tobytes().decode())
        for name, module in modules.items():
            prefix = f"module/{name}"
            with torch.no_grad():
                for kind, items in (("param", module.named_parameters()), ("buffer", module.named_buffers())):
                    for k, v in items:
                        key = f"{prefix}/{kind}/{k}"
                        if key not in z:
                            raise KeyError(f"checkpoint lacks {key}")
                        arr = z[key]
                        if tuple(arr.shape) != tuple(v.shape):
                            raise ValueError(f"{key}: shape {arr.shape} != {tuple(v.shape)}")
                        v.copy_(torch.from_numpy(arr.astype(np.float32)).to(v.dtype))
        for name, opt in (optimizers or {}).items():
            sd = opt.state_dict()
            prefix = f"optim/{name}/"
            state: dict[int, dict[str, torch.Tensor]] = {}
            for key in z.files:
                if key.startswith(prefix):
                    idx, field = key[len(prefix):].split("/")
                    state.setdefault(int(idx), {})[field] = torch.from_numpy(z[key].astype(np.float32))
            sd["state"] = state
            sd["param_groups"] = meta["param_groups"][name]
            opt.load_state_dict(sd)
        if restore_torch_rng:
            torch.set_rng_state(torch.from_numpy(z["rng/torch"].copy()))
    if numpy_rng is not None and "numpy_rng" in meta:
        numpy_rng.bit_generator.state = meta["numpy_rng"]
    return meta
