# Copyright 2024 Tarkan Al-Kazily
"""
PUTR model file format.

    +-----------+-------------------------------------------------------------+
    | Bytes     | Description                                                 |
    +-----------+-------------------------------------------------------------+
    | 0..3      | Magic "PUTR"                                                |
    | 4         | Format version 0x01                                         |
    | 5..8      | Header length n, little-endian u32                          |
    | 9..9+n    | UTF-8 JSON header                                           |
    | ...       | Zero padding up to the next 64-byte boundary                |
    | payload   | Tensors as little-endian f32, in index order, each starting |
    |           | on a 64-byte boundary relative to the payload start         |
    +-----------+-------------------------------------------------------------+

JSON header keys:
    config: ModelConfig fields
    layers: per layer {"kv_heads": [...], "ff_nodes": [...]} in original indices
    tensor_count: number of tensors
    tensors: name -> {"dtype": "f32", "shape": [...], "offset": o, "length": n, "crc32": c}
"""

import hashlib
import json
import os
import struct
import typing
import zlib

import numpy as np
import torch

from putri.errors import (
    BadMagicError,
    ChecksumError,
    ConfigError,
    ModelFormatError,
    NonFiniteError,
    ShapeHeaderError,
    TruncatedPayloadError,
    VersionMismatchError,
)
from putri.linalg import STORAGE_DTYPE, check_finite
from putri.model import LayerWeights, ModelConfig, ToyTransformer

MAGIC = b"PUTR"
VERSION = 0x01
ALIGNMENT = 64
PREAMBLE = struct.Struct("<4sBI")


def _align(n: int) -> int:
    return (n + ALIGNMENT - 1) // ALIGNMENT * ALIGNMENT


def _ffn_names(config: ModelConfig) -> dict[str, str]:
    if config.ffn_kind == "gated":
        return {"gate": "ffn.gate", "up": "ffn.up", "down": "ffn.down"}
    return {"up": "ffn.fc1", "down": "ffn.fc2"}


def named_tensors(model: ToyTransformer) -> list[tuple[str, torch.Tensor]]:
    """
    Returns:
        (name, tensor) pairs in file order
    """
    tensors = [("token_embedding", model.token_embedding)]
    ffn_names = _ffn_names(model.config)
    for index, layer in enumerate(model.layers):
        prefix = f"layers.{index}."
        tensors += [
            (prefix + "attn_norm", layer.attn_norm),
            (prefix + "attn.wq", layer.wq),
            (prefix + "attn.wk", layer.wk),
            (prefix + "attn.wv", layer.wv),
            (prefix + "attn.wo", layer.wo),
            (prefix + "ffn_norm", layer.ffn_norm),
        ]
        tensors += [(prefix + name, getattr(layer, attr)) for attr, name in ffn_names.items()]
    tensors += [("final_norm", model.final_norm), ("lm_head", model.lm_head)]
    return tensors


def serialize(model: ToyTransformer) -> bytes:
    """
    Returns:
        The complete PUTR file contents
    """
    index = {}
    payloads = []
    offset = 0
    for name, tensor in named_tensors(model):
        data = tensor.detach().to(STORAGE_DTYPE).contiguous().numpy().astype("<f4").tobytes()
        offset = _align(offset)
        index[name] = {
            "dtype": "f32",
            "shape": list(tensor.shape),
            "offset": offset,
            "length": len(data),
            "crc32": zlib.crc32(data),
        }
        payloads.append((offset, data))
        offset += len(data)

    header = {
        "config": model.config.to_dict(),
        "layers": [
            {"kv_heads": list(layer.kv_heads), "ff_nodes": list(layer.ff_nodes)}
            for layer in model.layers
        ],
        "tensor_count": len(index),
        "tensors": index,
    }
    header_bytes = json.dumps(header, separators=(",", ":")).encode("utf-8")

    out = bytearray(PREAMBLE.pack(MAGIC, VERSION, len(header_bytes)))
    out += header_bytes
    out += b"\x00" * (_align(len(out)) - len(out))
    payload_start = len(out)
    for offset, data in payloads:
        out += b"\x00" * (payload_start + offset - len(out))
        out += data
    return bytes(out)


def save(model: ToyTransformer, path: str | os.PathLike):
    """
    Write a model file.

    Args:
        model: Model to write
        path: Destination file
    """
    with open(path, "wb") as f:
        f.write(serialize(model))


def _expected_shapes(config: ModelConfig, kv: int, ff: int) -> dict[str, tuple[int, ...]]:
    d = config.d_model
    hd = config.head_dim
    q = kv * config.group_size * hd
    shapes = {
        "attn_norm": (d,),
        "attn.wq": (d, q),
        "attn.wk": (d, kv * hd),
        "attn.wv": (d, kv * hd),
        "attn.wo": (q, d),
        "ffn_norm": (d,),
    }
    for attr, name in _ffn_names(config).items():
        shapes[name] = (ff, d) if attr == "down" else (d, ff)
    return shapes


def _parse_header(data: bytes) -> tuple[dict, int]:
    if len(data) < PREAMBLE.size:
        raise TruncatedPayloadError(f"File of {len(data)} bytes has no complete preamble")
    magic, version, header_len = PREAMBLE.unpack_from(data)
    if magic != MAGIC:
        raise BadMagicError(f"Bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise VersionMismatchError(f"Unsupported format version {version}, expected {VERSION}")
    end = PREAMBLE.size + header_len
    if len(data) < end:
        raise TruncatedPayloadError("File ends inside the JSON header")
    try:
        header = json.loads(data[PREAMBLE.size : end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ModelFormatError(f"Unreadable JSON header: {e}") from e
    return header, _align(end)


def _original_indices(layer: int, info: dict, key: str, bound: int) -> tuple[int, ...]:
    try:
        indices = tuple(int(i) for i in info[key])
    except (KeyError, TypeError, ValueError) as e:
        raise ModelFormatError(f"Malformed {key} for layer {layer}: {e}") from e
    if any(i < 0 or i >= bound for i in indices):
        raise ShapeHeaderError(f"Layer {layer} {key} {list(indices)} outside [0, {bound})")
    if any(a >= b for a, b in zip(indices, indices[1:])):
        raise ShapeHeaderError(f"Layer {layer} {key} {list(indices)} not strictly ascending")
    return indices


def deserialize(data: bytes) -> ToyTransformer:
    """
    Parse PUTR file contents.

    Raises:
        BadMagicError, VersionMismatchError, TruncatedPayloadError, ShapeHeaderError,
        ChecksumError, ModelFormatError (also for NaN or Inf weights)
    """
    header, payload_start = _parse_header(data)
    try:
        config = ModelConfig.from_dict(header["config"])
        layer_info = header["layers"]
        index = header["tensors"]
        tensor_count = header["tensor_count"]
    except (KeyError, TypeError, ConfigError) as e:
        raise ModelFormatError(f"Malformed header: {e}") from e

    if tensor_count != len(index):
        raise TruncatedPayloadError(
            f"Header announces {tensor_count} tensors but indexes {len(index)}"
        )
    if len(layer_info) != config.n_layers:
        raise ShapeHeaderError(
            f"Header lists {len(layer_info)} layers, config has {config.n_layers}"
        )

    tensors = {}
    for name, entry in index.items():
        try:
            shape = tuple(int(dim) for dim in entry["shape"])
            dtype = entry["dtype"]
            length = int(entry["length"])
            offset = int(entry["offset"])
            crc = int(entry["crc32"])
        except (KeyError, TypeError, ValueError) as e:
            raise ModelFormatError(f"Malformed index entry for tensor {name}: {e}") from e
        count = 1
        for dim in shape:
            count *= dim
        if dtype != "f32" or length != 4 * count or offset < 0:
            raise ShapeHeaderError(
                f"Tensor {name} length {length} does not match f32 shape {shape}"
            )
        start = payload_start + offset
        stop = start + length
        if stop > len(data):
            raise TruncatedPayloadError(f"Payload of tensor {name} is truncated")
        raw = data[start:stop]
        if zlib.crc32(raw) != crc:
            raise ChecksumError(f"CRC mismatch in tensor {name}")
        array = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape)
        tensor = torch.from_numpy(array.copy())
        try:
            check_finite(tensor, name)
        except NonFiniteError as e:
            raise ModelFormatError(str(e)) from e
        tensors[name] = tensor

    def take(name: str, shape: tuple[int, ...]) -> torch.Tensor:
        if name not in tensors:
            raise TruncatedPayloadError(f"Tensor {name} missing from the file")
        if tuple(tensors[name].shape) != shape:
            raise ShapeHeaderError(
                f"Tensor {name} has shape {tuple(tensors[name].shape)}, expected {shape}"
            )
        return tensors[name]

    d = config.d_model
    layers = []
    for i, info in enumerate(layer_info):
        kv_heads = _original_indices(i, info, "kv_heads", config.n_kv_heads)
        ff_nodes = _original_indices(i, info, "ff_nodes", config.d_ff)
        shapes = _expected_shapes(config, len(kv_heads), len(ff_nodes))
        prefix = f"layers.{i}."
        ffn = {attr: take(prefix + name, shapes[name]) for attr, name in _ffn_names(config).items()}
        layers.append(
            LayerWeights(
                wq=take(prefix + "attn.wq", shapes["attn.wq"]),
                wk=take(prefix + "attn.wk", shapes["attn.wk"]),
                wv=take(prefix + "attn.wv", shapes["attn.wv"]),
                wo=take(prefix + "attn.wo", shapes["attn.wo"]),
                gate=ffn.get("gate"),
                up=ffn["up"],
                down=ffn["down"],
                attn_norm=take(prefix + "attn_norm", shapes["attn_norm"]),
                ffn_norm=take(prefix + "ffn_norm", shapes["ffn_norm"]),
                kv_heads=kv_heads,
                ff_nodes=ff_nodes,
            )
        )
    return ToyTransformer(
        config=config,
        token_embedding=take("token_embedding", (config.vocab_size, d)),
        layers=tuple(layers),
        final_norm=take("final_norm", (d,)),
        lm_head=take("lm_head", (d, config.vocab_size)),
    )


def load(path: str | os.PathLike) -> ToyTransformer:
    """
    Read a model file written by save.

    Raises:
        OSError: File unreadable
        ModelFormatError: See deserialize
    """
    with open(path, "rb") as f:
        return deserialize(f.read())


def digest(model: ToyTransformer) -> str:
    """
    Returns:
        sha256 hex digest of the serialized model
    """
    return hashlib.sha256(serialize(model)).hexdigest()


def describe(model: ToyTransformer) -> dict[str, typing.Any]:
    """
    Returns:
        JSON-ready summary of the model structure
    """
    ffn, attn = model.prunable_params()
    return {
        "config": model.config.to_dict(),
        "layers": [
            {"layer": i, "kv_live": layer.kv_live, "ff_live": layer.ff_live}
            for i, layer in enumerate(model.layers)
        ],
        "params": {"ffn": ffn, "attn": attn, "total": ffn + attn},
        "digest": digest(model),
    }
