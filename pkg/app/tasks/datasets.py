"""
Procedural task data: blob / spiral / grating classification, grating
denoising, and bit decoding from a seed-defined embedder. Every generator is
a pure function of the TaskSpec.
"""
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Tuple, Union

import numpy as np

from app.engine.tensor import DTYPE
from app.errors import ConfigError
from app.models.schemas import TaskSpec

# amplitude of the embedder's pattern on top of the cover grating
EMBED_STRENGTH = 0.3


@dataclass
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        if len(self.inputs) != len(self.targets):
            raise ConfigError(f"{len(self.inputs)} inputs for {len(self.targets)} targets")

    def __len__(self) -> int:
        return int(len(self.inputs))

    def batches(self, batch_size: int, rng: Optional[np.random.Generator] = None) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        """Minibatches in order, or shuffled when `rng` is given."""
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for start in range(0, len(self), batch_size):
            idx = order[start:start + batch_size]
            yield self.inputs[idx], self.targets[idx]

    def take(self, n: int) -> "Dataset":
        return Dataset(self.inputs[:n], self.targets[:n])


@dataclass
class TaskData:
    spec: TaskSpec
    train: Dataset
    test: Dataset


def _grid(h: int, w: int) -> Tuple[np.ndarray, np.ndarray]:
    ys, xs = np.meshgrid(np.linspace(-1.0, 1.0, h), np.linspace(-1.0, 1.0, w), indexing="ij")
    return ys, xs


def _gaussian_dot(ys, xs, cy, cx, radius):
    return np.exp(-((ys[None] - cy[:, None, None]) ** 2 + (xs[None] - cx[:, None, None]) ** 2) / (2 * radius ** 2))


def _channels(img: np.ndarray, channels: int, rng: np.random.Generator) -> np.ndarray:
    """(N, H, W) -> (N, C, H, W) with a fixed per-channel gain."""
    gains = rng.uniform(0.6, 1.0, size=channels)
    return img[:, None] * gains[None, :, None, None]


def _blobs(spec: TaskSpec, n: int, rng: np.random.Generator):
    ys, xs = _grid(spec.height, spec.width)
    angles = 2 * np.pi * np.arange(spec.classes) / spec.classes + rng.uniform(0, 2 * np.pi)
    centers = 0.55 * np.stack([np.sin(angles), np.cos(angles)], axis=1)
    labels = rng.integers(0, spec.classes, size=n)
    jitter = rng.normal(0.0, 0.08, size=(n, 2))
    cy, cx = (centers[labels] + jitter).T
    img = _gaussian_dot(ys, xs, cy, cx, 0.25)
    x = _channels(img, spec.channels, rng)
    return x + rng.normal(0.0, spec.noise_sigma, size=x.shape), labels


def _spirals(spec: TaskSpec, n: int, rng: np.random.Generator):
    ys, xs = _grid(spec.height, spec.width)
    labels = rng.integers(0, spec.classes, size=n)
    t = rng.uniform(0.15, 1.0, size=n)
    theta = 2.5 * np.pi * t + 2 * np.pi * labels / spec.classes
    # three points along the arm so the local curvature is visible
    img = np.zeros((n, spec.height, spec.width))
    for dt in (-0.08, 0.0, 0.08):
        r = 0.85 * np.clip(t + dt, 0.05, 1.0)
        th = theta + 2.5 * np.pi * dt
        img += _gaussian_dot(ys, xs, r * np.sin(th), r * np.cos(th), 0.12)
    x = _channels(img, spec.channels, rng)
    return x + rng.normal(0.0, spec.noise_sigma, size=x.shape), labels


def _gratings(spec: TaskSpec, orientation: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Oriented sine gratings in [0, 1], random frequency and phase."""
    n = orientation.size
    ys, xs = _grid(spec.height, spec.width)
    freq = rng.uniform(1.5, 3.0, size=n)
    phase = rng.uniform(0, 2 * np.pi, size=n)
    proj = xs[None] * np.cos(orientation)[:, None, None] + ys[None] * np.sin(orientation)[:, None, None]
    img = 0.5 + 0.5 * np.sin(2 * np.pi * freq[:, None, None] * proj + phase[:, None, None])
    return _channels(img, spec.channels, rng)


def _textures(spec: TaskSpec, n: int, rng: np.random.Generator):
    labels = rng.integers(0, spec.classes, size=n)
    orientation = np.pi * labels / spec.classes + rng.normal(0.0, 0.05, size=n)
    x = _gratings(spec, orientation, rng)
    return x + rng.normal(0.0, spec.noise_sigma, size=x.shape), labels


def _denoising(spec: TaskSpec, n: int, rng: np.random.Generator):
    clean = _gratings(spec, rng.uniform(0, np.pi, size=n), rng)
    noisy = clean + rng.normal(0.0, spec.noise_sigma, size=clean.shape)
    return noisy, clean


def _bit_decoding(spec: TaskSpec, n: int, rng: np.random.Generator):
    # embedder weights come from their own stream so they do not depend on n
    embedder_rng = np.random.default_rng([spec.seed, 0xE5B])
    size = spec.channels * spec.height * spec.width
    w = embedder_rng.normal(0.0, 1.0 / np.sqrt(spec.message_bits), size=(size, spec.message_bits))
    bits = rng.integers(0, 2, size=(n, spec.message_bits))
    pattern = np.tanh((2.0 * bits - 1.0) @ w.T).reshape(n, spec.channels, spec.height, spec.width)
    cover = _gratings(spec, rng.uniform(0, np.pi, size=n), rng)
    x = cover + EMBED_STRENGTH * pattern + rng.normal(0.0, spec.noise_sigma, size=cover.shape)
    return x, bits


def _generate(spec: TaskSpec, n: int):
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "classification":
        generator = {"blobs": _blobs, "spirals": _spirals, "textures": _textures}[spec.pattern]
        x, y = generator(spec, n, rng)
        return x.astype(DTYPE), y.astype(np.int64)
    if spec.kind == "denoising":
        x, y = _denoising(spec, n, rng)
        return x.astype(DTYPE), y.astype(DTYPE)
    x, y = _bit_decoding(spec, n, rng)
    return x.astype(DTYPE), y.astype(DTYPE)


def make_dataset(spec: TaskSpec) -> TaskData:
    """Deterministic (train, test) split for `spec`."""
    if spec.data_file:
        return load_raw_dataset(spec, spec.data_file)
    x, y = _generate(spec, spec.train_size + spec.test_size)
    n = spec.train_size
    return TaskData(spec, Dataset(x[:n], y[:n]), Dataset(x[n:], y[n:]))


# --- raw tensor files -----------------------------------------------------

def _write_block(fh, array: np.ndarray):
    array = np.ascontiguousarray(array, dtype="<f4")
    fh.write(struct.pack("<II", array.shape[0], array.ndim - 1))
    fh.write(struct.pack(f"<{array.ndim - 1}I", *array.shape[1:]))
    fh.write(array.tobytes())


def _read_block(blob: bytes, offset: int) -> Tuple[np.ndarray, int]:
    try:
        count, ndim = struct.unpack_from("<II", blob, offset)
        offset += 8
        dims = struct.unpack_from(f"<{ndim}I", blob, offset)
        offset += 4 * ndim
    except struct.error as e:
        raise ConfigError(f"truncated raw dataset: {e}")
    shape = (count,) + tuple(dims)
    size = int(np.prod(shape))
    if len(blob) - offset < 4 * size:
        raise ConfigError(f"raw dataset block {shape} needs {4 * size} bytes, {len(blob) - offset} left")
    values = np.frombuffer(blob, dtype="<f4", count=size, offset=offset).astype(DTYPE).reshape(shape)
    return values, offset + 4 * size


def save_raw_dataset(path: Union[str, Path], inputs: np.ndarray, targets: np.ndarray):
    """Two blocks, inputs then targets: u32 count, u32 ndim, u32 dims, float32 values."""
    with open(path, "wb") as fh:
        _write_block(fh, inputs)
        _write_block(fh, targets)


def load_raw_dataset(spec: TaskSpec, path: Union[str, Path]) -> TaskData:
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise ConfigError(f"cannot read raw dataset {path}: {e}")
    x, offset = _read_block(blob, 0)
    y, offset = _read_block(blob, offset)
    if offset != len(blob):
        raise ConfigError(f"raw dataset {path} has {len(blob) - offset} trailing bytes")
    if len(x) != len(y):
        raise ConfigError(f"raw dataset {path}: {len(x)} inputs for {len(y)} targets")
    if x.shape[1:] != spec.input_shape:
        raise ConfigError(f"raw dataset inputs have shape {x.shape[1:]}, task expects {spec.input_shape}")
    if len(x) <= spec.train_size:
        raise ConfigError(f"raw dataset has {len(x)} samples, needs more than train_size={spec.train_size}")
    if spec.kind == "classification":
        y = y.reshape(len(y)).astype(np.int64)
        if y.min() < 0 or y.max() >= spec.classes:
            raise ConfigError(f"raw dataset labels must lie in [0, {spec.classes})")
    n, stop = spec.train_size, spec.train_size + spec.test_size
    return TaskData(spec, Dataset(x[:n], y[:n]), Dataset(x[n:stop], y[n:stop]))
