"""Checkpoint container: JSON manifest followed by concatenated
little-endian float32 tensor payloads in manifest order.

Layout: 8-byte magic, uint32 little-endian manifest length, manifest JSON
(UTF-8), payload bytes. The manifest records the format version, the
ModelConfig, per-tensor name/shape/dtype, and a sha256 of the payload so a
torn or corrupt file is always detected at load time. Writes go to a temp
file in the same directory followed by os.replace, so concurrent readers
see either the old or the new file, never a mix.

Parameters are stored as float32 (the in-memory math is float64); a
round-trip is lossless at float32 resolution.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile

import numpy as np

from .nnet import ModelConfig, ModelParams

MAGIC = b"NKRECCKP"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


def save_checkpoint(params: ModelParams, cfg: ModelConfig, path: str) -> None:
    payload = b"".join(
        np.ascontiguousarray(v, dtype="<f4").tobytes() for v in params.tensors.values()
    )
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": cfg.to_dict(),
        "tensors": [
            {"name": k, "shape": list(v.shape), "dtype": "<f4"}
            for k, v in params.tensors.items()
        ],
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    dirname = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=dirname, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str) -> tuple[ModelParams, ModelConfig]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(MAGIC) + 4 or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (mlen,) = struct.unpack_from("<I", raw, len(MAGIC))
    header_end = len(MAGIC) + 4 + mlen
    if len(raw) < header_end:
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[len(MAGIC) + 4 : header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt manifest: {e}") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported format version {manifest.get('format_version')}"
        )
    payload = raw[header_end:]
    expected = sum(
        int(np.prod(t["shape"])) * 4 for t in manifest["tensors"]
    )
    if len(payload) != expected:
        raise CheckpointError(
            f"{path}: truncated payload ({len(payload)} bytes, expected {expected})"
        )
    digest = hashlib.sha256(payload).hexdigest()
    if digest != manifest["payload_sha256"]:
        raise CheckpointError(f"{path}: payload checksum mismatch")

    tensors: dict[str, np.ndarray] = {}
    offset = 0
    for t in manifest["tensors"]:
        count = int(np.prod(t["shape"]))
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
        tensors[t["name"]] = arr.astype(np.float64).reshape(t["shape"])
        offset += count * 4
    cfg = ModelConfig.from_dict(manifest["config"])
    return ModelParams(tensors), cfg
