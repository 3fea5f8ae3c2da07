"""Model configuration, deterministic weight init, and the checkpoint file format.

Checkpoint file layout (``.spnm``):

    magic "SPNM" | u32 little-endian header length | JSON header | raw f32 data

The JSON header carries the model config and an ordered tensor table of
``{"name", "shape", "offset"}`` entries; offsets are byte positions inside
the data section, which is the concatenation of all tensors as
little-endian float32 in header order.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .prng import SplitMix64

MAGIC = b"SPNM"


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    n_heads: int
    d_model: int
    d_ffn: int
    vocab_size: int
    max_seq_len: int

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "d_model", "d_ffn", "vocab_size"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"model.{name} must be >= 1, got {getattr(self, name)}")
        if self.max_seq_len < 2:
            raise ConfigError(f"model.max_seq_len must be >= 2, got {self.max_seq_len}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"model.d_model ({self.d_model}) not divisible by n_heads ({self.n_heads})"
            )

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"model config has unknown keys: {sorted(extra)}")
        missing = known - set(d)
        if missing:
            raise ConfigError(f"model config missing keys: {sorted(missing)}")
        return cls(**{k: int(v) for k, v in d.items()})


def tensor_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape table; defines both init order and file order."""
    d, f, v = config.d_model, config.d_ffn, config.vocab_size
    shapes: dict[str, tuple[int, ...]] = {"embedding": (v, d)}
    for i in range(config.n_layers):
        p = f"layers.{i}."
        shapes[p + "attn_norm"] = (d,)
        shapes[p + "wq"] = (d, d)
        shapes[p + "wk"] = (d, d)
        shapes[p + "wv"] = (d, d)
        shapes[p + "wo"] = (d, d)
        shapes[p + "ffn_norm"] = (d,)
        shapes[p + "w1"] = (d, f)
        shapes[p + "w2"] = (f, d)
    shapes["final_norm"] = (d,)
    shapes["output"] = (d, v)
    return shapes


class Checkpoint:
    """Immutable bundle of config + named float32 tensors.

    Safe to share across concurrent generation streams: every array is
    marked read-only after construction.
    """

    def __init__(self, config: ModelConfig, tensors: dict[str, np.ndarray]):
        expected = tensor_shapes(config)
        if list(tensors) != list(expected):
            raise DataError(
                "checkpoint tensor names/order do not match config "
                f"(expected {len(expected)} tensors, got {len(tensors)})"
            )
        for name, shape in expected.items():
            t = tensors[name]
            if tuple(t.shape) != shape:
                raise DataError(f"tensor {name!r} has shape {tuple(t.shape)}, expected {shape}")
            if t.dtype != np.float32:
                raise DataError(f"tensor {name!r} has dtype {t.dtype}, expected float32")
            if not np.isfinite(t).all():
                raise DataError(f"tensor {name!r} contains non-finite values")
        self.config = config
        self.tensors = dict(tensors)
        for t in self.tensors.values():
            t.setflags(write=False)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def layer(self, i: int, name: str) -> np.ndarray:
        return self.tensors[f"layers.{i}.{name}"]

    def mutated(self, edits: dict[str, np.ndarray]) -> "Checkpoint":
        """Copy with some tensors replaced (used to build rigged test models)."""
        tensors = {k: (edits[k] if k in edits else v).astype(np.float32) for k, v in self.tensors.items()}
        return Checkpoint(self.config, tensors)


def init_checkpoint(config: ModelConfig, seed: int) -> Checkpoint:
    """Deterministic random init: one splitmix64 stream consumed in table order.

    Projection/embedding weights are uniform in [-s, s] with s = 1/sqrt(d_model);
    norm gains start at exactly 1. Identical (config, seed) gives bit-identical
    tensors on any platform.
    """
    rng = SplitMix64(seed)
    s = 1.0 / math.sqrt(config.d_model)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in tensor_shapes(config).items():
        if name.endswith("norm"):
            tensors[name] = np.ones(shape, dtype=np.float32)
            continue
        n = int(np.prod(shape))
        u = rng.uniforms(n)
        tensors[name] = ((2.0 * u - 1.0) * s).astype(np.float32).reshape(shape)
    return Checkpoint(config, tensors)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    table = []
    offset = 0
    blobs = []
    for name, t in ckpt.tensors.items():
        blob = np.ascontiguousarray(t, dtype="<f4").tobytes()
        table.append({"name": name, "shape": list(t.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"config": ckpt.config.to_dict(), "tensors": table}).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise DataError(f"{path}: not a SPNM checkpoint (bad magic)")
    if len(raw) < 8:
        raise DataError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + hlen:
        raise DataError(f"{path}: truncated header (want {hlen} bytes)")
    try:
        header = json.loads(raw[8 : 8 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"{path}: bad checkpoint header: {e}") from e
    try:
        config = ModelConfig.from_dict(header["config"])
    except (KeyError, TypeError) as e:
        raise DataError(f"{path}: bad checkpoint config: {e}") from e
    except ConfigError as e:
        raise DataError(f"{path}: bad checkpoint config: {e}") from e

    data = raw[8 + hlen :]
    expected = tensor_shapes(config)
    entries = header.get("tensors")
    if not isinstance(entries, list) or [e.get("name") for e in entries] != list(expected):
        raise DataError(f"{path}: tensor table does not match config-derived layout")
    tensors: dict[str, np.ndarray] = {}
    end = 0
    for entry in entries:
        name = entry["name"]
        shape = tuple(int(x) for x in entry["shape"])
        if shape != expected[name]:
            raise DataError(f"{path}: tensor {name!r} shape {shape} != expected {expected[name]}")
        n = int(np.prod(shape))
        off = int(entry["offset"])
        if off != end:
            raise DataError(f"{path}: tensor {name!r} offset {off} is not contiguous")
        end = off + 4 * n
        if end > len(data):
            raise DataError(f"{path}: tensor {name!r} runs past end of file")
        tensors[name] = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(shape).copy()
    if end != len(data):
        raise DataError(f"{path}: {len(data) - end} trailing bytes after tensor data")
    return Checkpoint(config, tensors)
