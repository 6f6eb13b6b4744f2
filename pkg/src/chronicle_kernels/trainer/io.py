"""Little-endian tensor files with a JSON sidecar, and metrics JSONL."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

_DTYPES = {"int32": "<i4", "int64": "<i8", "float32": "<f4", "float64": "<f8"}


def _sidecar(path) -> Path:
    return Path(str(path) + ".json")


def save_tensor(path, array, dtype: str | None = None):
    """Write raw little-endian values to ``path`` and {"shape", "dtype"} beside it."""
    array = np.asarray(array)
    dtype = dtype or ("int32" if array.dtype.kind in "iu" else "float64")
    if dtype not in _DTYPES:
        raise ValueError(f"unsupported dtype {dtype!r}")
    path = Path(path)
    path.write_bytes(np.ascontiguousarray(array, dtype=_DTYPES[dtype]).tobytes())
    _sidecar(path).write_text(json.dumps({"shape": list(array.shape), "dtype": dtype}))


def load_tensor(path) -> np.ndarray:
    path = Path(path)
    meta = json.loads(_sidecar(path).read_text())
    if "shape" not in meta:
        raise ValueError(f"{_sidecar(path)}: missing 'shape'")
    dtype = meta.get("dtype", "int32")
    if dtype not in _DTYPES:
        raise ValueError(f"unsupported dtype {dtype!r}")
    data = np.frombuffer(path.read_bytes(), dtype=_DTYPES[dtype])
    shape = tuple(meta["shape"])
    if int(np.prod(shape)) != data.size:
        raise ValueError(f"{path}: {data.size} values do not fill shape {shape}")
    return data.reshape(shape).astype(np.int64 if dtype.startswith("int") else np.float64)


def save_params(directory, params: dict):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, value in params.items():
        save_tensor(directory / f"{name}.bin", value, "float64")
    (directory / "index.json").write_text(json.dumps(sorted(params), indent=1))


def load_params(directory) -> dict:
    directory = Path(directory)
    names = json.loads((directory / "index.json").read_text())
    return {n: load_tensor(directory / f"{n}.bin") for n in names}


def read_metrics(path) -> list:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
