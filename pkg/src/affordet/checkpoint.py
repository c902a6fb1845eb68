"""Array-store files: named little-endian float32 arrays plus a JSON manifest.

A store is a directory holding ``manifest.json`` and ``arrays.bin``.  The
manifest lists every array's name, shape and byte offset, and carries free
metadata under ``"meta"``.  Writing is canonical, so save -> load -> save
reproduces both files byte for byte.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

STORE_VERSION = 1


def save_arrays(path, arrays: dict[str, np.ndarray | torch.Tensor], meta: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(path / "arrays.bin", "wb") as fh:
        for name in sorted(arrays):
            value = arrays[name]
            if isinstance(value, torch.Tensor):
                value = value.detach().cpu().numpy()
            arr = np.array(value, dtype="<f4", order="C")
            buf = arr.tobytes()
            fh.write(buf)
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(buf)})
            offset += len(buf)
    manifest = {"version": STORE_VERSION, "dtype": "float32-le", "arrays": entries, "meta": meta or {}}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json in {path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("version") != STORE_VERSION:
        raise ValueError(f"unsupported array-store version {manifest.get('version')!r}")
    blob = (path / "arrays.bin").read_bytes()
    arrays = {}
    for e in manifest["arrays"]:
        chunk = blob[e["offset"] : e["offset"] + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise ValueError(f"array {e['name']!r} is truncated")
        arrays[e["name"]] = np.frombuffer(chunk, dtype="<f4").reshape(e["shape"]).copy()
    return arrays, manifest["meta"]


def module_arrays(module: torch.nn.Module, prefix: str = "state/") -> dict[str, np.ndarray]:
    return {prefix + k: v.detach().cpu().numpy().astype(np.float32) for k, v in module.state_dict().items()}


def load_module_arrays(module: torch.nn.Module, arrays: dict[str, np.ndarray], prefix: str = "state/", strict: bool = True) -> None:
    state = module.state_dict()
    missing = [k for k in state if prefix + k not in arrays]
    if strict and missing:
        raise KeyError(f"checkpoint lacks {missing[:5]}{'...' if len(missing) > 5 else ''}")
    new = {}
    for k, v in state.items():
        if prefix + k in arrays:
            src = torch.from_numpy(arrays[prefix + k])
            if tuple(src.shape) != tuple(v.shape):
                raise ValueError(f"shape mismatch for {k}: {tuple(src.shape)} vs {tuple(v.shape)}")
            new[k] = src.to(v.dtype)
        else:
            new[k] = v
    module.load_state_dict(new)


def save_adapter_state(adapter, path) -> Path:
    """LoRA deltas and head weights only (the language model base stays out)."""
    arrays = {k: v for k, v in module_arrays(adapter, "").items() if "lm." not in k or "lora_" in k}
    return save_arrays(path, arrays, {"kind": "adapter-state"})


def load_adapter_state(adapter, path) -> None:
    arrays, _ = load_arrays(path)
    load_module_arrays(adapter, arrays, prefix="", strict=False)
