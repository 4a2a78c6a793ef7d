"""Versioned binary checkpoints.

Layout (little-endian)::

    magic    8 bytes   b"RMAECKP1"
    version  u32       1
    config   u32 length, then utf-8 key=value lines (the train snapshot,
                       which embeds every model dimension)
    quantizer u32 v_bins, f64 lo, f64 hi
    epoch    u32
    rng      u8 flag; if 1: 16-byte state, 16-byte inc, u32 has_uint32,
                       u32 uinteger (PCG64 state)
    params   u32 count, then per block sorted by name:
                u16 name length, name bytes, u8 ndim, u32 dims...,
                f64 data row-major

Values are stored as doubles regardless of the in-memory dtype, so a
save/load/save round trip is byte-identical.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .config import parse_kv_text
from .model import ModelConfig
from .quantizer import MelQuantizer
from .synth import FactorRanges

MAGIC = b"RMAECKP1"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    """Raised on magic/version/size trouble; the message names the field."""


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    quantizer: MelQuantizer
    model: ModelConfig
    train_snapshot: dict[str, str]
    epoch: int
    rng_state: dict | None = None

    @property
    def tau(self) -> float:
        return float(self.train_snapshot.get("tau", "0.5"))

    @property
    def seed(self) -> int:
        return int(self.train_snapshot.get("seed", "0"))


def model_config_from_snapshot(snap: dict[str, str]) -> ModelConfig:
    ranges = FactorRanges(pitch_bins=int(snap["pitch_bins"]),
                          loudness_bins=int(snap["loudness_bins"]),
                          speakers=int(snap["speakers"]),
                          content=int(snap["content"]))
    return ModelConfig(d=int(snap["d"]), enc_layers=int(snap["enc_layers"]),
                       dec_layers=int(snap["dec_layers"]), heads=int(snap["heads"]),
                       n_residual=int(snap["n_residual"]), n_noise=int(snap["n_noise"]),
                       v_bins=int(snap["v_bins"]), t_frames=int(snap["t_frames"]),
                       f_bins=int(snap["f_bins"]), ranges=ranges,
                       ff_mult=int(snap["ff_mult"]), club_hidden=int(snap["club_hidden"]),
                       dtype=snap["dtype"])


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    config_text = "\n".join(f"{k}={v}" for k, v in sorted(ckpt.train_snapshot.items()))
    config_bytes = config_text.encode("utf-8")
    chunks.append(struct.pack("<I", len(config_bytes)))
    chunks.append(config_bytes)
    q = ckpt.quantizer
    chunks.append(struct.pack("<Idd", q.v_bins, q.lo, q.hi))
    chunks.append(struct.pack("<I", ckpt.epoch))
    if ckpt.rng_state is not None:
        st = ckpt.rng_state["state"]
        chunks.append(struct.pack("<B", 1))
        chunks.append(int(st["state"]).to_bytes(16, "little"))
        chunks.append(int(st["inc"]).to_bytes(16, "little"))
        chunks.append(struct.pack("<II", int(ckpt.rng_state["has_uint32"]),
                                  int(ckpt.rng_state["uinteger"])))
    else:
        chunks.append(struct.pack("<B", 0))
    names = sorted(ckpt.params)
    chunks.append(struct.pack("<I", len(names)))
    for name in names:
        arr = ckpt.params[name]
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data = data
        self.off = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.data):
            raise CheckpointError(f"{self.path}: truncated while reading {what}")
        out = self.data[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str, what: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size, what))


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data, path)
    magic = r.take(len(MAGIC), "magic")
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r} (field: magic)")
    (version,) = r.unpack("<I", "version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version} (field: version)")
    (cfg_len,) = r.unpack("<I", "config length")
    snap = parse_kv_text(r.take(cfg_len, "config").decode("utf-8"), source=path)
    v_bins, lo, hi = r.unpack("<Idd", "quantizer")
    (epoch,) = r.unpack("<I", "epoch")
    (rng_flag,) = r.unpack("<B", "rng flag")
    rng_state = None
    if rng_flag:
        state = int.from_bytes(r.take(16, "rng state"), "little")
        inc = int.from_bytes(r.take(16, "rng inc"), "little")
        has_uint32, uinteger = r.unpack("<II", "rng tail")
        rng_state = {"bit_generator": "PCG64",
                     "state": {"state": state, "inc": inc},
                     "has_uint32": has_uint32, "uinteger": uinteger}
    model = model_config_from_snapshot(snap)
    dt = model.np_dtype
    (count,) = r.unpack("<I", "parameter count")
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H", "parameter name length")
        name = r.take(name_len, "parameter name").decode("utf-8")
        (ndim,) = r.unpack("<B", f"{name} ndim")
        shape = r.unpack(f"<{ndim}I", f"{name} shape")
        n_items = int(np.prod(shape)) if ndim else 1
        raw = r.take(8 * n_items, f"{name} data")
        params[name] = np.frombuffer(raw, "<f8").reshape(shape).astype(dt)
    if r.off != len(data):
        raise CheckpointError(f"{path}: {len(data) - r.off} trailing bytes (field: end)")
    return Checkpoint(params=params, quantizer=MelQuantizer(v_bins=v_bins, lo=lo, hi=hi),
                      model=model, train_snapshot=snap, epoch=epoch, rng_state=rng_state)
