"""Binary container for model weights, adapters and cached tensors.

Layout (all integers little-endian):

    bytes 0-3   magic ``EBTF``
    u32         format version (currently 1)
    u32         length of the configuration text block, then that many
                bytes of UTF-8 JSON (model config plus free-form metadata)
    u32         tensor count
    per tensor: u32 name length, UTF-8 name
                u32 rank, then rank u64 dimensions
                raw float64 payload, little-endian, row-major

Adapter factors are stored as ordinary tensors named ``lora/<target>/B`` and
``lora/<target>/A``; any other auxiliary tensor (e.g. cached oracle atoms
under ``oracle/...``) rides along the same way.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct

import numpy as np

from .model import LoraAdapters, ModelConfig, ModelParams, iter_param_shapes

MAGIC = b"EBTF"
VERSION = 1


class CheckpointError(IOError):
    """Raised on bad magic, unsupported version or truncated payloads."""


def _write_tensor(buf, name: str, arr: np.ndarray) -> None:
    data = np.ascontiguousarray(arr, dtype="<f8")
    name_b = name.encode("utf-8")
    buf.write(struct.pack("<I", len(name_b)))
    buf.write(name_b)
    buf.write(struct.pack("<I", data.ndim))
    for dim in data.shape:
        buf.write(struct.pack("<Q", dim))
    buf.write(data.tobytes())


def _read_exact(buf, n: int) -> bytes:
    chunk = buf.read(n)
    if len(chunk) != n:
        raise CheckpointError(f"truncated checkpoint: wanted {n} bytes, got {len(chunk)}")
    return chunk


def _read_tensor(buf) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<I", _read_exact(buf, 4))
    name = _read_exact(buf, name_len).decode("utf-8")
    (rank,) = struct.unpack("<I", _read_exact(buf, 4))
    dims = [struct.unpack("<Q", _read_exact(buf, 8))[0] for _ in range(rank)]
    count = int(np.prod(dims)) if dims else 1
    payload = _read_exact(buf, 8 * count)
    arr = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)
    return name, arr


def save_checkpoint(path, params: ModelParams, config: ModelConfig,
                    adapters: LoraAdapters | None = None,
                    extras: dict[str, np.ndarray] | None = None,
                    meta: dict | None = None) -> None:
    tensors: list[tuple[str, np.ndarray]] = list(params.items())
    if adapters:
        for target, (b, a) in adapters.items():
            tensors.append((f"lora/{target}/B", b))
            tensors.append((f"lora/{target}/A", a))
    if extras:
        tensors.extend(extras.items())

    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    cfg_text = json.dumps({"model": config.to_dict(), "meta": meta or {}},
                          sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(cfg_text)))
    buf.write(cfg_text)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        _write_tensor(buf, name, arr)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


class Checkpoint:
    """Parsed checkpoint: weights, adapters, extras and configuration."""

    def __init__(self, config: ModelConfig, params: ModelParams,
                 adapters: LoraAdapters, extras: dict[str, np.ndarray],
                 meta: dict):
        self.config = config
        self.params = params
        self.adapters = adapters
        self.extras = extras
        self.meta = meta


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise CheckpointError(f"bad magic {magic!r}: not a model checkpoint")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (cfg_len,) = struct.unpack("<I", _read_exact(fh, 4))
        cfg_doc = json.loads(_read_exact(fh, cfg_len).decode("utf-8"))
        config = ModelConfig.from_dict(cfg_doc["model"])
        model_names = {name for name, _ in iter_param_shapes(config)}
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        params: ModelParams = {}
        extras: dict[str, np.ndarray] = {}
        lora_parts: dict[str, dict[str, np.ndarray]] = {}
        for _ in range(count):
            name, arr = _read_tensor(fh)
            if name.startswith("lora/"):
                body = name[len("lora/"):]
                target, _, factor = body.rpartition("/")
                lora_parts.setdefault(target, {})[factor] = arr
            elif name in model_names:
                params[name] = arr
            else:
                extras[name] = arr
    adapters: LoraAdapters = {}
    for target, parts in sorted(lora_parts.items()):
        if set(parts) != {"A", "B"}:
            raise CheckpointError(f"incomplete adapter pair for target {target!r}")
        adapters[target] = (parts["B"], parts["A"])
    return Checkpoint(config, params, adapters, extras, cfg_doc.get("meta", {}))


def params_checksum(params: ModelParams) -> str:
    """Order-independent content hash of a named tensor dict."""
    digest = hashlib.sha256()
    for name in sorted(params):
        digest.update(name.encode("utf-8"))
        digest.update(np.ascontiguousarray(params[name], dtype="<f8").tobytes())
    return digest.hexdigest()
