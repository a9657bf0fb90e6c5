"""``EDCK`` checkpoint container: config echo plus named float64 arrays.

Layout (little-endian)::

    b"EDCK"  u16 version
    u32 config_len   config text (UTF-8 ``key = value`` lines)
    u32 array_count
    per array: u16 name_len, name (UTF-8), u8 ndim, u32 dims[ndim], f64 data[prod(dims)]
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .adapters import AdapterSpec, DecomposedWeight
from .model import Model, ModelConfig
from .numerics import Tensor

MAGIC = b"EDCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_config(config: dict) -> str:
    return "".join(f"{k} = {config[k]}\n" for k in config)


def decode_config(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def save_checkpoint(path, arrays: dict[str, np.ndarray], config: dict) -> None:
    buf = bytearray(MAGIC)
    text = encode_config(config).encode("utf-8")
    buf += struct.pack("<HI", VERSION, len(text)) + text
    buf += struct.pack("<I", len(arrays))
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        buf += struct.pack("<H", len(raw)) + raw
        buf += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not an EDCK checkpoint")
    off = 4
    try:
        version, clen = struct.unpack_from("<HI", buf, off)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        off += 6
        config = decode_config(buf[off:off + clen].decode("utf-8"))
        off += clen
        (count,) = struct.unpack_from("<I", buf, off)
        off += 4
        arrays = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<B", buf, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            n = int(np.prod(shape)) if ndim else 1
            if off + 8 * n > len(buf):
                raise CheckpointError(f"{path}: truncated array {name!r} at byte {off}")
            arrays[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(shape).copy()
            off += 8 * n
    except struct.error as err:
        raise CheckpointError(f"{path}: truncated header at byte {off}") from err
    return config, arrays


def payload_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# model / adapter helpers

_INT_FIELDS = ("channels", "samples", "classes", "temporal_kernel", "embed_dim", "encoder_layers",
               "heads", "ffn_dim", "pool_kernel", "pool_stride", "head_hidden")


def save_model(path, model: Model, extra: dict | None = None) -> None:
    """Base parameters only; adapters go to :func:`save_adapters`."""
    config = {"kind": "model", **model.config.to_dict(), **(extra or {})}
    save_checkpoint(path, {n: t.data for n, t in model.params.items()}, config)


def load_model(path) -> Model:
    config, arrays = load_checkpoint(path)
    if config.get("kind") != "model":
        raise CheckpointError(f"{path}: expected a model checkpoint, found {config.get('kind')!r}")
    cfg = ModelConfig(**{k: int(config[k]) for k in _INT_FIELDS})
    from .model import build

    model = build(cfg, seed=0)
    missing = set(model.params) - set(arrays)
    if missing:
        raise CheckpointError(f"{path}: missing parameters {sorted(missing)[:3]}")
    for name, t in model.params.items():
        t.data = arrays[name]
    return model


def save_adapters(path, model: Model, spec: AdapterSpec, extra: dict | None = None) -> None:
    config = {"kind": "adapters", "adapter_kind": spec.kind, "rank": spec.rank,
              "segments": spec.segments, "norm_mode": spec.norm_mode,
              "targets": ",".join(sorted({n.rsplit(".", 1)[1] for n in model.adapters})),
              **(extra or {})}
    arrays = {}
    for layer, a in model.adapters.items():
        for pname, t in a.named_parameters():
            arrays[f"{layer}/{pname}"] = t.data
    save_checkpoint(path, arrays, config)


def load_adapters(path, model: Model) -> Model:
    """Attach adapters from ``path`` to a copy of ``model`` (whose params are the bases)."""
    config, arrays = load_checkpoint(path)
    if config.get("kind") != "adapters":
        raise CheckpointError(f"{path}: expected an adapter checkpoint")
    spec = AdapterSpec(config["adapter_kind"], int(config["rank"]), int(config["segments"]),
                       config["norm_mode"])
    out = model.clone()
    layers: dict[str, dict[str, np.ndarray]] = {}
    for key, arr in arrays.items():
        layer, pname = key.split("/")
        layers.setdefault(layer, {})[pname] = arr
    for layer, parts in layers.items():
        n = spec.segments
        base = out.params[layer + ".weight"]
        mags = [Tensor(parts[f"m{i}"]) for i in range(n)] if spec.kind != "lora" else []
        out.adapters[layer] = DecomposedWeight(
            base=base, spec=spec,
            A=[Tensor(parts[f"A{i}"]) for i in range(n)],
            B=[Tensor(parts[f"B{i}"]) for i in range(n)],
            magnitudes=mags)
    for _, t in out.named_parameters():
        t.requires_grad = False
    return out
