"""TCNN model files: header, JSON descriptor, normalizers, named f32 blobs."""

from __future__ import annotations

import json
import struct
from pathlib import Path as FsPath

import numpy as np

from terracost.errors import FormatError, InvalidArg
from terracost.regnet.model import Model, ModelSpec
from terracost.regnet.nn import Tensor

TCNN_MAGIC = b"TCNN"
TCNN_VERSION = 1


def save_model(model: Model, path) -> None:
    desc = json.dumps({"spec": json.loads(model.spec.to_json()), "meta": model.meta}, sort_keys=True).encode("utf-8")
    parts = [b"TCNN", struct.pack("<H", TCNN_VERSION), struct.pack("<I", len(desc)), desc]
    parts.append(struct.pack("<ff", model.max_w, model.max_v))
    for name in sorted(model.weights):
        t = model.weights[name]
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", t.value.ndim) + struct.pack(f"<{t.value.ndim}I", *t.value.shape))
        parts.append(np.ascontiguousarray(t.value, dtype="<f4").tobytes())
    FsPath(path).write_bytes(b"".join(parts))


def load_model(path) -> Model:
    blob = FsPath(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError(f"{path}: truncated at byte {pos}")
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    if take(4) != TCNN_MAGIC:
        raise FormatError(f"{path}: bad magic")
    (version,) = struct.unpack("<H", take(2))
    if version != TCNN_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    (dlen,) = struct.unpack("<I", take(4))
    try:
        desc = json.loads(take(dlen).decode("utf-8"))
        spec = ModelSpec.from_dict(desc["spec"])
    except (ValueError, KeyError, TypeError, InvalidArg) as exc:
        raise FormatError(f"{path}: bad descriptor: {exc}") from exc
    max_w, max_v = struct.unpack("<ff", take(8))
    weights = {}
    while pos < len(blob):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8", errors="strict")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(take(4 * count), dtype="<f4").reshape(dims).astype(np.float32)
        weights[name] = Tensor(data, trainable=not name.endswith(("running_mean", "running_var")))

    expected = Model.initialise(spec, 1.0, 1.0).weights
    if set(expected) != set(weights):
        missing = sorted(set(expected) - set(weights))
        extra = sorted(set(weights) - set(expected))
        raise FormatError(f"{path}: weights do not match spec (missing {missing[:3]}, unexpected {extra[:3]})")
    for name, t in expected.items():
        if t.shape != weights[name].shape:
            raise FormatError(f"{path}: {name} has shape {weights[name].shape}, spec needs {t.shape}")
    try:
        return Model(spec, weights, max_w, max_v, desc.get("meta", {}))
    except InvalidArg as exc:
        raise FormatError(f"{path}: {exc}") from exc
