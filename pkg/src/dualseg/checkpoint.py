"""Parameter checkpoints: a JSON manifest next to a raw little-endian payload.

``save_params(params, "run/ckpt")`` writes ``run/ckpt.json`` and
``run/ckpt.bin``.  The manifest lists names, shapes, dtype and byte offsets;
the payload is the concatenation of the arrays in ParamSet order.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .errors import ArgumentError
from .tensor import ParamSet, Tensor

_DTYPES = {"float32": "<f4", "float64": "<f8"}


def _paths(prefix) -> tuple[Path, Path]:
    prefix = Path(prefix)
    if prefix.suffix in (".json", ".bin"):
        prefix = prefix.with_suffix("")
    return prefix.with_suffix(".json"), prefix.with_suffix(".bin")


def save_params(params: ParamSet, prefix, meta: dict | None = None) -> Path:
    manifest_path, payload_path = _paths(prefix)
    dtypes = {p.dtype for p in params.values()}
    if len(dtypes) > 1:
        raise ArgumentError(f"mixed parameter dtypes {dtypes}")
    dtype = np.dtype(dtypes.pop() if dtypes else np.float64).name
    if dtype not in _DTYPES:
        raise ArgumentError(f"unsupported dtype {dtype}")
    entries, offset = [], 0
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    with open(payload_path, "wb") as fh:
        for name, p in params.items():
            raw = np.ascontiguousarray(p.data, dtype=_DTYPES[dtype]).tobytes()
            fh.write(raw)
            entries.append({"name": name, "shape": list(p.shape), "offset": offset, "nbytes": len(raw)})
            offset += len(raw)
    manifest = {"format": "dualseg-params-v1", "dtype": dtype, "byteorder": "little",
                "payload": payload_path.name, "tensors": entries, "meta": meta or {}}
    tmp = manifest_path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    os.replace(tmp, manifest_path)
    return manifest_path


def load_params(prefix, requires_grad: bool = True) -> tuple[ParamSet, dict]:
    """Returns the parameters and the ``meta`` dict stored with them."""
    manifest_path, _ = _paths(prefix)
    manifest = json.loads(manifest_path.read_text())
    payload = (manifest_path.parent / manifest["payload"]).read_bytes()
    code = _DTYPES[manifest["dtype"]]
    params = ParamSet()
    for e in manifest["tensors"]:
        arr = np.frombuffer(payload, dtype=code, count=int(np.prod(e["shape"], dtype=np.int64)),
                            offset=e["offset"]).reshape(e["shape"])
        params[e["name"]] = Tensor(arr.astype(manifest["dtype"]), requires_grad=requires_grad)
    return params, manifest.get("meta", {})
