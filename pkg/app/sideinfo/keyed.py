"""
Keyed host selection: a SplitMix64 stream seeded with the key drives a
partial Fisher-Yates shuffle of [0, N); the first m drawn positions host the
payload bits, in draw order.
"""
from dataclasses import dataclass
from typing import Union

import numpy as np

from app.errors import CapacityExceededError, ConfigError

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15


@dataclass(frozen=True)
class StegoKey:
    seed: int

    def __post_init__(self):
        if not 0 <= self.seed <= MASK64:
            raise ConfigError(f"key must be an unsigned 64-bit integer, got {self.seed}")

    @classmethod
    def parse(cls, value: Union[str, int]) -> "StegoKey":
        """Decimal or 0x-prefixed hex."""
        if isinstance(value, int):
            return cls(value)
        try:
            return cls(int(value.strip(), 0))
        except ValueError:
            raise ConfigError(f"key must be a decimal or 0x-prefixed hex u64, got {value!r}")

    def __str__(self) -> str:
        return f"0x{self.seed:016x}"


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def take(self, n: int) -> np.ndarray:
        """The next `n` outputs at once (uint64, wrapping arithmetic)."""
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * np.uint64(GOLDEN_GAMMA)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * GOLDEN_GAMMA) & MASK64
        return z


def select_hosts(key: StegoKey, param_count: int, payload_bits: int) -> np.ndarray:
    """`payload_bits` distinct indices in [0, param_count), a pure function of the key."""
    if payload_bits > param_count:
        raise CapacityExceededError(f"payload of {payload_bits} bits exceeds {param_count} host parameters")
    draws = SplitMix64(key.seed).take(payload_bits)
    # sparse view of the permuted array: position -> value where it moved
    moved = {}
    hosts = np.empty(payload_bits, dtype=np.int64)
    for k in range(payload_bits):
        i = param_count - 1 - k
        r = int(draws[k] % np.uint64(i + 1))
        value_i = moved.get(i, i)
        value_r = moved.get(r, r)
        moved[i], moved[r] = value_r, value_i
        hosts[k] = value_r
    return hosts
