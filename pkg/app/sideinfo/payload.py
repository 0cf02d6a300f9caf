"""
Side-information framing (little-endian integers, bits MSB-first per byte):

    version u8 | layer count u16 | d^l u16 per weighted layer
    membership bits (sum d^l, bit 0 = selected), zero-padded to a byte
    adaptation: mode u8, O_e u32, O_t u32, added neurons u32
    batchnorm: word count u32, then running_mean and running_var of every
               batchnorm layer as float32 words
    CRC-32 of all preceding bytes
"""
import struct
import zlib
from dataclasses import dataclass
from typing import List, Tuple, Union

import numpy as np

from app.errors import CrcMismatchError, IntegrityError, ShapeMismatchError
from app.models.adaptation import AdaptationMeta, AdaptationMode
from app.models.graph import BatchNormStats, ModelGraph
from app.models.selection import FilterSelection

PAYLOAD_VERSION = 1

_HEAD = struct.Struct("<BH")
_ADAPT = struct.Struct("<BIII")
_COUNT = struct.Struct("<I")
_CRC = struct.Struct("<I")


@dataclass(frozen=True)
class SideInfoPayload:
    filter_counts: Tuple[int, ...]
    membership: np.ndarray
    adapt: AdaptationMeta
    bn_words: np.ndarray
    version: int = PAYLOAD_VERSION

    def to_bytes(self) -> bytes:
        body = bytearray(_HEAD.pack(self.version, len(self.filter_counts)))
        body += struct.pack(f"<{len(self.filter_counts)}H", *self.filter_counts)
        body += np.packbits(self.membership.astype(np.uint8)).tobytes()
        a = self.adapt
        body += _ADAPT.pack(a.mode.code, a.original_output_dim, a.stego_output_dim, a.added_neurons)
        body += _COUNT.pack(self.bn_words.size)
        body += self.bn_words.astype("<f4").tobytes()
        return bytes(body) + _CRC.pack(zlib.crc32(bytes(body)) & 0xFFFFFFFF)

    def to_bits(self) -> np.ndarray:
        return np.unpackbits(np.frombuffer(self.to_bytes(), dtype=np.uint8))

    def equals(self, other: "SideInfoPayload") -> bool:
        return self.to_bytes() == other.to_bytes()


def payload_byte_length(graph: ModelGraph) -> int:
    """Frame size implied by a stego architecture alone."""
    counts = [graph.layers[i].out_units for i in graph.weighted_layers()]
    bn_channels = sum(graph.layers[i].channels for i in graph.bn_layers())
    return (_HEAD.size + 2 * len(counts) + (sum(counts) + 7) // 8
            + _ADAPT.size + _COUNT.size + 4 * 2 * bn_channels + _CRC.size)


def payload_bit_length(graph: ModelGraph) -> int:
    return 8 * payload_byte_length(graph)


def frame_payload(graph: ModelGraph, sel: FilterSelection, adapt: AdaptationMeta,
                  bn_stats: BatchNormStats) -> SideInfoPayload:
    """Frame the side information of a stego graph."""
    sel.validate(graph, adapt)
    if adapt.stego_output_dim != graph.output_dim:
        raise ShapeMismatchError(f"adaptation says O_t={adapt.stego_output_dim}, graph outputs {graph.output_dim}")
    if not bn_stats.covers(graph):
        raise ShapeMismatchError("batchnorm statistics do not cover the graph's batchnorm channels")
    streams = sel.membership_bits(graph)
    counts = tuple(int(s.size) for s in streams)
    if any(c > 0xFFFF for c in counts) or len(counts) > 0xFFFF:
        raise ShapeMismatchError("layer widths or count exceed the u16 payload fields")
    words = [np.concatenate([bn_stats.mean(i), bn_stats.var(i)]) for i in graph.bn_layers()]
    bn_words = np.concatenate(words).astype(np.float32) if words else np.zeros(0, dtype=np.float32)
    return SideInfoPayload(counts, np.concatenate(streams), adapt, bn_words)


def decode_payload(data: Union[bytes, np.ndarray]) -> SideInfoPayload:
    """Bytes (or an MSB-first bit array) back to a payload; CRC is checked first."""
    blob = np.packbits(data.astype(np.uint8)).tobytes() if isinstance(data, np.ndarray) else bytes(data)
    if len(blob) < _HEAD.size + _ADAPT.size + _COUNT.size + _CRC.size:
        raise IntegrityError(f"side information too short ({len(blob)} bytes)")
    body, (stored,) = blob[:-_CRC.size], _CRC.unpack_from(blob, len(blob) - _CRC.size)
    if zlib.crc32(body) & 0xFFFFFFFF != stored:
        raise CrcMismatchError("side information CRC mismatch (wrong key or tampered model)")

    try:
        version, layer_count = _HEAD.unpack_from(body, 0)
        if version != PAYLOAD_VERSION:
            raise IntegrityError(f"unknown side information version {version}")
        offset = _HEAD.size
        counts = struct.unpack_from(f"<{layer_count}H", body, offset)
        offset += 2 * layer_count
        total = sum(counts)
        nbytes = (total + 7) // 8
        membership = np.unpackbits(np.frombuffer(body, dtype=np.uint8, count=nbytes, offset=offset))[:total]
        offset += nbytes
        code, o_e, o_t, added = _ADAPT.unpack_from(body, offset)
        offset += _ADAPT.size
        (n_words,) = _COUNT.unpack_from(body, offset)
        offset += _COUNT.size
        if len(body) - offset != 4 * n_words:
            raise IntegrityError(f"batchnorm block declares {n_words} words, {len(body) - offset} bytes remain")
        bn_words = np.frombuffer(body, dtype="<f4", count=n_words, offset=offset).astype(np.float32)
        mode = AdaptationMode.from_code(code)
        adapt = AdaptationMeta(mode, o_e, o_t, added_neurons=added,
                               appended_layer=mode == AdaptationMode.HIDDEN_EXTEND)
    except (struct.error, ValueError) as e:
        raise IntegrityError(f"malformed side information: {e}")
    return SideInfoPayload(tuple(counts), membership, adapt, bn_words, version)


def parse_payload(data: Union[bytes, np.ndarray, SideInfoPayload],
                  graph: ModelGraph) -> Tuple[FilterSelection, AdaptationMeta, BatchNormStats]:
    """Decode and check against the stego architecture."""
    payload = data if isinstance(data, SideInfoPayload) else decode_payload(data)
    weighted = graph.weighted_layers()
    widths = tuple(graph.layers[i].out_units for i in weighted)
    if payload.filter_counts != widths:
        raise IntegrityError(f"membership widths {payload.filter_counts} do not match the architecture {widths}")
    if payload.adapt.stego_output_dim != graph.output_dim:
        raise IntegrityError(f"side information says O_t={payload.adapt.stego_output_dim}, "
                             f"model outputs {graph.output_dim}")
    bn_layers = graph.bn_layers()
    channels = [graph.layers[i].channels for i in bn_layers]
    if payload.bn_words.size != 2 * sum(channels):
        raise IntegrityError(f"{payload.bn_words.size} batchnorm words for {sum(channels)} channels")

    streams: List[np.ndarray] = []
    offset = 0
    for width in widths:
        streams.append(payload.membership[offset:offset + width])
        offset += width
    try:
        sel = FilterSelection.from_membership_bits(graph, streams)
        sel.validate(graph, payload.adapt)
    except (ShapeMismatchError, ValueError) as e:
        raise IntegrityError(f"side information inconsistent with the architecture: {e}")

    stats = {}
    offset = 0
    for i, c in zip(bn_layers, channels):
        stats[i] = (payload.bn_words[offset:offset + c].copy(), payload.bn_words[offset + c:offset + 2 * c].copy())
        offset += 2 * c
    return sel, payload.adapt, BatchNormStats(stats)
