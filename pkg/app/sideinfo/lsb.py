"""
Least-significant-bit codec over the float32 parameter words of a model.
"""
from typing import Optional

import numpy as np

from app.errors import IntegrityError, NonFiniteError
from app.log import log_debug
from app.models.graph import ModelGraph
from app.sideinfo.keyed import StegoKey, select_hosts
from app.sideinfo.payload import SideInfoPayload, decode_payload, payload_bit_length

_CLEAR_LSB = np.uint32(0xFFFFFFFE)


def embed_bits(model: ModelGraph, bits: np.ndarray, key: StegoKey) -> ModelGraph:
    """Write `bits` into the LSBs of the keyed host parameters of a copy of `model`."""
    out = model.copy()
    hosts = select_hosts(key, out.num_params, int(bits.size))
    if not np.all(np.isfinite(out.params[hosts])):
        raise NonFiniteError("a host parameter is non-finite")
    words = out.params.view(np.uint32)
    words[hosts] = (words[hosts] & _CLEAR_LSB) | bits.astype(np.uint32)
    log_debug(f"embedded {bits.size} bits into {out.num_params} parameters")
    return out


def extract_bits(model: ModelGraph, key: StegoKey, bit_length: int) -> np.ndarray:
    hosts = select_hosts(key, model.num_params, bit_length)
    return (model.params.view(np.uint32)[hosts] & np.uint32(1)).astype(np.uint8)


def embed(model: ModelGraph, payload: SideInfoPayload, key: StegoKey) -> ModelGraph:
    return embed_bits(model, payload.to_bits(), key)


def extract(model: ModelGraph, key: StegoKey, bit_length: Optional[int] = None) -> SideInfoPayload:
    """Read and CRC-check the payload; its length follows from the architecture."""
    bit_length = payload_bit_length(model) if bit_length is None else bit_length
    if bit_length > model.num_params:
        raise IntegrityError(f"model has {model.num_params} parameters, side information needs {bit_length}")
    return decode_payload(extract_bits(model, key, bit_length))
