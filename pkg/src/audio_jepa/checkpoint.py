"""Versioned binary checkpoint container.

Layout (little-endian)::

    magic      8 bytes  b"AJEPCKPT"
    version    uint32
    header_len uint32
    header     UTF-8 JSON (sorted keys): configs, step, seed, mask bounds, metrics, extra
    n_tensors  uint32
    records    n_tensors x {name_len uint16, name UTF-8, dtype uint8, ndim uint8,
                            dims uint32 x ndim, row-major data}
    crc32      uint32 over every preceding byte

Tensor names are ``ctx.*``, ``tgt.*``, ``pred.*``, ``mask_token`` and
``adam.m.*`` / ``adam.v.*`` for the optimizer moments of trainable tensors.
"""

from __future__ import annotations

import dataclasses
import io
import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np
import torch

from .jepa import JepaModel, OptimizerConfig, TrainState, check_model_configs, trainable
from .vit import ViTConfig, parameter_shapes

MAGIC = b"AJEPCKPT"
VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {v: k for k, v in _DTYPES.items()}


class CheckpointError(Exception):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


def _tensors(state: TrainState) -> dict[str, torch.Tensor]:
    model = state.model
    out = {}
    out.update({"ctx." + k: v for k, v in model.ctx.items()})
    out.update({"tgt." + k: v for k, v in model.tgt.items()})
    out.update({"pred." + k: v for k, v in model.pred.items()})
    out["mask_token"] = model.mask_token
    out.update({"adam.m." + k: v for k, v in state.exp_avg.items()})
    out.update({"adam.v." + k: v for k, v in state.exp_avg_sq.items()})
    return out


def _header(state: TrainState) -> dict:
    return {
        "encoder": dataclasses.asdict(state.model.encoder),
        "predictor": dataclasses.asdict(state.model.predictor),
        "grid": list(state.model.grid),
        "optim": dataclasses.asdict(state.optim),
        "step": state.step,
        "seed": state.seed,
        "mask_bounds": list(state.mask_bounds),
        "metrics": state.metrics,
        "extra": state.extra,
    }


def to_bytes(state: TrainState) -> bytes:
    buf = io.BytesIO()
    header = json.dumps(_header(state), sort_keys=True).encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(header)))
    buf.write(header)
    tensors = _tensors(state)
    buf.write(struct.pack("<I", len(tensors)))
    for name, tensor in tensors.items():
        array = tensor.detach().cpu().numpy()
        dtype = array.dtype.newbyteorder("<")
        if dtype not in _CODES:
            raise TypeError(f"{name}: unsupported dtype {array.dtype}")
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<BB", _CODES[dtype], array.ndim))
        buf.write(struct.pack(f"<{array.ndim}I", *array.shape))
        buf.write(np.ascontiguousarray(array, dtype=dtype).tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    """Write atomically: a partial file never replaces a complete one."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(state))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CorruptCheckpointError("checkpoint is truncated")
        chunk = self.raw[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(raw: bytes) -> TrainState:
    if len(raw) < len(MAGIC) + 12 or not raw.startswith(MAGIC):
        raise CorruptCheckpointError("not a checkpoint file (bad magic or too short)")
    (version,) = struct.unpack_from("<I", raw, len(MAGIC))
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, this build reads {VERSION}")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptCheckpointError("checksum mismatch (truncated or corrupted file)")

    r = _Reader(body)
    r.take(len(MAGIC) + 4)
    (header_len,) = r.unpack("<I")
    try:
        header = json.loads(r.take(header_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"unreadable header: {exc}") from exc
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise CorruptCheckpointError(f"{name}: unknown dtype code {code}")
        shape = r.unpack(f"<{ndim}I")
        dtype = _DTYPES[code]
        nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64))
        array = np.frombuffer(r.take(nbytes), dtype=dtype).reshape(shape)
        tensors[name] = torch.from_numpy(array.copy())
    if r.pos != len(body):
        raise CorruptCheckpointError("trailing bytes after tensor records")
    return _assemble(header, tensors)


def _split(tensors: dict, prefix: str) -> dict:
    return {k[len(prefix) :]: v for k, v in tensors.items() if k.startswith(prefix)}


def _check_shapes(part: str, found: dict, expected: dict) -> None:
    if found.keys() != expected.keys():
        missing = sorted(set(expected) - set(found))
        extra = sorted(set(found) - set(expected))
        raise CheckpointShapeError(f"{part}: missing tensors {missing}, unexpected {extra}")
    for name, shape in expected.items():
        if tuple(found[name].shape) != tuple(shape):
            raise CheckpointShapeError(
                f"{part}.{name}: stored shape {tuple(found[name].shape)}, config implies {tuple(shape)}"
            )


def _assemble(header: dict, tensors: dict) -> TrainState:
    try:
        encoder = ViTConfig(**header["encoder"])
        predictor = ViTConfig(**header["predictor"])
        optim = OptimizerConfig(**header["optim"])
        grid = tuple(header["grid"])
        check_model_configs(encoder, predictor)
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptCheckpointError(f"invalid header: {exc}") from exc

    ctx, tgt, pred = _split(tensors, "ctx."), _split(tensors, "tgt."), _split(tensors, "pred.")
    _check_shapes("ctx", ctx, parameter_shapes(encoder))
    _check_shapes("tgt", tgt, parameter_shapes(encoder))
    _check_shapes("pred", pred, parameter_shapes(predictor))
    if "mask_token" not in tensors or tuple(tensors["mask_token"].shape) != (predictor.embed_dim,):
        raise CheckpointShapeError(f"mask_token must have shape ({predictor.embed_dim},)")
    model = JepaModel(ctx, tgt, pred, tensors["mask_token"], encoder, predictor, grid)
    expected = {k: tuple(v.shape) for k, v in trainable(model).items()}
    exp_avg, exp_avg_sq = _split(tensors, "adam.m."), _split(tensors, "adam.v.")
    _check_shapes("adam.m", exp_avg, expected)
    _check_shapes("adam.v", exp_avg_sq, expected)
    return TrainState(
        step=int(header["step"]),
        model=model,
        exp_avg=exp_avg,
        exp_avg_sq=exp_avg_sq,
        optim=optim,
        seed=int(header["seed"]),
        mask_bounds=tuple(header["mask_bounds"]),
        metrics=header.get("metrics", {}),
        extra=header.get("extra", {}),
    )


def load_checkpoint(path: str | Path) -> TrainState:
    return from_bytes(Path(path).read_bytes())
