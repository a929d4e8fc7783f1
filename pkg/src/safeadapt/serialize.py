"""Binary file formats for checkpoints, datasets and episode logs.

Every artifact uses the same container: a UTF-8 JSON header line
describing kind, shapes and metadata, followed by one length-prefixed
little-endian float64 block per array. Round-trips are bit-exact.

Extensions by kind: ``.ckpt`` network parameters, ``.trans`` transition
datasets, ``.real`` action-state trajectories (no configuration field),
``.epis`` episode logs.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .networks import Conv1dSpec, MlpSpec, NetworkParams

_MAGIC = "safeadapt-v1"


def _write_block(fh, array: np.ndarray) -> None:
    flat = np.ascontiguousarray(array, dtype="<f8").ravel()
    fh.write(struct.pack("<Q", flat.size))
    fh.write(flat.tobytes())


def _read_block(fh, shape) -> np.ndarray:
    (count,) = struct.unpack("<Q", fh.read(8))
    expected = int(np.prod(shape)) if shape else 1
    if count != expected:
        raise ValueError(f"block length {count} does not match header shape {shape}")
    data = np.frombuffer(fh.read(8 * count), dtype="<f8").astype(np.float64)
    return data.reshape(shape)


def write_arrays(path, kind: str, meta: dict, arrays: dict) -> None:
    """Write named float64 arrays with a JSON header line."""
    path = Path(path)
    header = {
        "format": _MAGIC,
        "kind": kind,
        "meta": meta,
        "arrays": [[name, list(a.shape)] for name, a in arrays.items()],
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
        for a in arrays.values():
            _write_block(fh, np.asarray(a, dtype=np.float64))


def read_arrays(path, kind: str | None = None):
    """Read back (meta, arrays) written by :func:`write_arrays`."""
    path = Path(path)
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        if header.get("format") != _MAGIC:
            raise ValueError(f"{path} is not a {_MAGIC} file")
        if kind is not None and header["kind"] != kind:
            raise ValueError(f"{path}: expected kind {kind!r}, found {header['kind']!r}")
        arrays = {}
        for name, shape in header["arrays"]:
            arrays[name] = _read_block(fh, tuple(shape))
    return header["meta"], arrays


def _spec_to_dict(spec) -> dict:
    if isinstance(spec, MlpSpec):
        return {
            "type": "mlp",
            "input_dim": spec.input_dim,
            "hidden_dims": list(spec.hidden_dims),
            "output_dim": spec.output_dim,
            "activation": spec.activation,
        }
    if isinstance(spec, Conv1dSpec):
        return {
            "type": "conv1d",
            "channels_in": spec.channels_in,
            "window": spec.window,
            "conv_layers": [list(c) for c in spec.conv_layers],
            "head_dims": list(spec.head_dims),
            "output_dim": spec.output_dim,
            "activation": spec.activation,
        }
    raise TypeError(f"unknown spec type {type(spec).__name__}")


def _spec_from_dict(d: dict):
    if d["type"] == "mlp":
        return MlpSpec(
            input_dim=d["input_dim"],
            hidden_dims=tuple(d["hidden_dims"]),
            output_dim=d["output_dim"],
            activation=d["activation"],
        )
    if d["type"] == "conv1d":
        return Conv1dSpec(
            channels_in=d["channels_in"],
            window=d["window"],
            conv_layers=tuple(tuple(c) for c in d["conv_layers"]),
            head_dims=tuple(d["head_dims"]),
            output_dim=d["output_dim"],
            activation=d["activation"],
        )
    raise ValueError(f"unknown spec type {d['type']!r}")


def save_checkpoint(path, params: NetworkParams, meta: dict | None = None) -> None:
    meta = dict(meta or {})
    meta["spec"] = _spec_to_dict(params.spec)
    write_arrays(path, "checkpoint", meta, {"theta": params.theta})


def load_checkpoint(path):
    meta, arrays = read_arrays(path, "checkpoint")
    spec = _spec_from_dict(meta.pop("spec"))
    return NetworkParams(spec, arrays["theta"]), meta
