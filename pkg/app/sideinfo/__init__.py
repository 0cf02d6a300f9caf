from .keyed import SplitMix64, StegoKey, select_hosts
from .payload import SideInfoPayload, decode_payload, frame_payload, parse_payload, payload_bit_length
from .lsb import embed, extract

__all__ = [
    "SplitMix64",
    "StegoKey",
    "select_hosts",
    "SideInfoPayload",
    "decode_payload",
    "frame_payload",
    "parse_payload",
    "payload_bit_length",
    "embed",
    "extract",
]
