"""
Binary model file (little-endian):

    magic "NDSG" | version u16 | layer count u16
    per layer: kind u8 + fixed u32 attribute words
    param count u64 | float32 words in canonical flat order
    CRC-32 of everything preceding
"""
import struct
import zlib
from pathlib import Path
from typing import List, Union

import numpy as np

from app.errors import ModelFormatError, ShapeMismatchError
from app.models.graph import LayerSpec, ModelGraph

MAGIC = b"NDSG"
FORMAT_VERSION = 1

KIND_CODES = {
    "conv2d": 1,
    "dense": 2,
    "batchnorm": 3,
    "relu": 4,
    "maxpool": 5,
    "avgpool_global": 6,
}
CODE_KINDS = {code: kind for kind, code in KIND_CODES.items()}
ATTR_WORDS = {"conv2d": 6, "dense": 2, "batchnorm": 1, "relu": 0, "maxpool": 0, "avgpool_global": 0}

_HEADER = struct.Struct("<4sHH")
_COUNT = struct.Struct("<Q")
_CRC = struct.Struct("<I")


def _layer_words(spec: LayerSpec) -> List[int]:
    if spec.kind == "conv2d":
        return [spec.out_filters, spec.in_channels, spec.kernel[0], spec.kernel[1], spec.stride, spec.padding]
    if spec.kind == "dense":
        return [spec.out_width, spec.in_width]
    if spec.kind == "batchnorm":
        return [spec.channels]
    return []


def _layer_from_words(kind: str, words) -> LayerSpec:
    if kind == "conv2d":
        d, c, s1, s2, stride, padding = words
        return LayerSpec.conv(d, c, (s1, s2), stride, padding)
    if kind == "dense":
        return LayerSpec.dense(*words)
    if kind == "batchnorm":
        return LayerSpec.batchnorm(*words)
    return LayerSpec(kind=kind)


def dumps_model(graph: ModelGraph) -> bytes:
    if len(graph.layers) > 0xFFFF:
        raise ModelFormatError(f"too many layers for the model format: {len(graph.layers)}")
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION, len(graph.layers))]
    for spec in graph.layers:
        words = _layer_words(spec)
        parts.append(struct.pack(f"<B{len(words)}I", KIND_CODES[spec.kind], *words))
    parts.append(_COUNT.pack(graph.num_params))
    parts.append(graph.params.astype("<f4", copy=False).tobytes())
    body = b"".join(parts)
    return body + _CRC.pack(zlib.crc32(body) & 0xFFFFFFFF)


def loads_model(blob: bytes) -> ModelGraph:
    if len(blob) < _HEADER.size + _COUNT.size + _CRC.size:
        raise ModelFormatError(f"truncated model file ({len(blob)} bytes)")
    magic, version, count = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise ModelFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported format version {version}, expected {FORMAT_VERSION}")

    body, (stored_crc,) = blob[:-_CRC.size], _CRC.unpack_from(blob, len(blob) - _CRC.size)
    if zlib.crc32(body) & 0xFFFFFFFF != stored_crc:
        raise ModelFormatError("model file checksum failure")
    if count == 0:
        raise ModelFormatError("model file has an empty layer list")

    offset = _HEADER.size
    layers = []
    try:
        for _ in range(count):
            (code,) = struct.unpack_from("<B", body, offset)
            offset += 1
            kind = CODE_KINDS.get(code)
            if kind is None:
                raise ModelFormatError(f"unknown layer kind code {code}")
            n = ATTR_WORDS[kind]
            words = struct.unpack_from(f"<{n}I", body, offset)
            offset += 4 * n
            layers.append(_layer_from_words(kind, words))
        (n_params,) = _COUNT.unpack_from(body, offset)
        offset += _COUNT.size
    except struct.error as e:
        raise ModelFormatError(f"truncated model file: {e}")
    except ValueError as e:
        raise ModelFormatError(f"invalid layer attributes: {e}")

    if len(body) - offset != 4 * n_params:
        raise ModelFormatError(f"parameter blob holds {len(body) - offset} bytes, header declares {n_params} words")
    params = np.frombuffer(body, dtype="<f4", count=n_params, offset=offset).astype(np.float32)
    try:
        return ModelGraph(layers, params)
    except ShapeMismatchError as e:
        raise ModelFormatError(f"inconsistent architecture in model file: {e}")


def save_model(graph: ModelGraph, path: Union[str, Path]):
    Path(path).write_bytes(dumps_model(graph))


def load_model(path: Union[str, Path]) -> ModelGraph:
    return loads_model(Path(path).read_bytes())
