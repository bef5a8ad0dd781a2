"""Binary checkpoint format.

::

    b"PADC" | u32 version | u32 n | config JSON (n bytes, utf-8)
    u32 n_tensors, then per tensor:
        u16 name_len | name | u8 dtype tag | u8 ndim | u32 dims[ndim] | payload (LE)
    optional appendix:
        b"OPTS" | u32 n | meta JSON | u32 n_tensors | tensors as above

Tensor order is the model's ``named_parameters`` order; optimizer moments are
stored as ``exp_avg/<param>`` and ``exp_avg_sq/<param>``.
"""

from __future__ import annotations

import io
import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

from .config import PadConfig

__all__ = ["CheckpointError", "dump", "parse", "save_checkpoint", "load_checkpoint"]

MAGIC = b"PADC"
OPT_MAGIC = b"OPTS"
VERSION = 1
_DTYPES = {0: torch.float32, 1: torch.float64, 2: torch.int64}
_TAGS = {v: k for k, v in _DTYPES.items()}
_NP = {0: "<f4", 1: "<f8", 2: "<i8"}


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint."""


def _write_tensors(out: io.BytesIO, tensors: list[tuple[str, torch.Tensor]]) -> None:
    out.write(struct.pack("<I", len(tensors)))
    for name, t in tensors:
        t = t.detach().cpu().contiguous()
        tag = _TAGS.get(t.dtype)
        if tag is None:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
        nb = name.encode()
        out.write(struct.pack("<H", len(nb)) + nb)
        out.write(struct.pack("<BB", tag, t.dim()))
        out.write(struct.pack(f"<{t.dim()}I", *t.shape))
        out.write(t.numpy().astype(_NP[tag], copy=False).tobytes())


def _read_tensors(buf: memoryview, off: int) -> tuple[dict[str, torch.Tensor], int]:
    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(buf):
            raise CheckpointError("truncated checkpoint")
        vals = struct.unpack_from(fmt, buf, off)
        off += size
        return vals

    (n,) = take("<I")
    tensors = {}
    for _ in range(n):
        (ln,) = take("<H")
        if off + ln > len(buf):
            raise CheckpointError("truncated checkpoint")
        name = bytes(buf[off : off + ln]).decode()
        off += ln
        tag, ndim = take("<BB")
        if tag not in _DTYPES:
            raise CheckpointError(f"unknown dtype tag {tag}")
        shape = take(f"<{ndim}I") if ndim else ()
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * np.dtype(_NP[tag]).itemsize
        if off + nbytes > len(buf):
            raise CheckpointError("truncated checkpoint")
        arr = np.frombuffer(buf, _NP[tag], count, off).reshape(shape).copy()
        off += nbytes
        tensors[name] = torch.from_numpy(arr)
    return tensors, off


def dump(
    cfg: PadConfig,
    params: list[tuple[str, torch.Tensor]],
    opt_meta: dict | None = None,
    opt_tensors: list[tuple[str, torch.Tensor]] | None = None,
) -> bytes:
    out = io.BytesIO()
    cj = cfg.to_json().encode()
    out.write(MAGIC + struct.pack("<II", VERSION, len(cj)) + cj)
    _write_tensors(out, params)
    if opt_meta is not None:
        mj = json.dumps(opt_meta, sort_keys=True).encode()
        out.write(OPT_MAGIC + struct.pack("<I", len(mj)) + mj)
        _write_tensors(out, opt_tensors or [])
    return out.getvalue()


def parse(data: bytes) -> tuple[PadConfig, dict[str, torch.Tensor], dict | None, dict[str, torch.Tensor]]:
    buf = memoryview(data)
    if len(buf) < 12 or bytes(buf[:4]) != MAGIC:
        raise CheckpointError("not a PADC checkpoint")
    version, n = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} != supported {VERSION}")
    off = 12
    if off + n > len(buf):
        raise CheckpointError("truncated checkpoint")
    try:
        cfg = PadConfig.from_json(bytes(buf[off : off + n]).decode())
    except (ValueError, TypeError) as e:
        raise CheckpointError(f"bad config block: {e}") from e
    off += n
    params, off = _read_tensors(buf, off)
    meta, opt = None, {}
    if off < len(buf):
        if bytes(buf[off : off + 4]) != OPT_MAGIC:
            raise CheckpointError("unknown trailing chunk")
        (m,) = struct.unpack_from("<I", buf, off + 4)
        off += 8
        meta = json.loads(bytes(buf[off : off + m]).decode())
        off += m
        opt, off = _read_tensors(buf, off)
        if off != len(buf):
            raise CheckpointError("trailing bytes after optimizer chunk")
    return cfg, params, meta, opt


def save_checkpoint(path: str | os.PathLike, model, optimizer=None, meta: dict | None = None) -> Path:
    """Model parameters, plus optimizer moments and ``meta`` when given."""
    params = list(model.named_parameters())
    opt_meta = opt_tensors = None
    if optimizer is not None or meta is not None:
        opt_meta = dict(meta or {})
        opt_tensors = []
        if optimizer is not None:
            opt_meta["opt_step"] = 0
            for name, p in params:
                st = optimizer.state.get(p)
                if not st:
                    continue
                opt_meta["opt_step"] = int(st["step"])
                opt_tensors.append((f"exp_avg/{name}", st["exp_avg"]))
                opt_tensors.append((f"exp_avg_sq/{name}", st["exp_avg_sq"]))
    data = dump(model.cfg, params, opt_meta, opt_tensors)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | os.PathLike, optimizer_factory=None, dtype=torch.float32):
    """Returns ``(model, optimizer or None, meta or None)``."""
    from .padnet import PadNet

    cfg, params, meta, opt = parse(Path(path).read_bytes())
    model = PadNet(cfg)
    names = [n for n, _ in model.named_parameters()]
    if names != list(params):
        raise CheckpointError("parameter names do not match the configured network")
    with torch.no_grad():
        for name, p in model.named_parameters():
            if tuple(p.shape) != tuple(params[name].shape):
                raise CheckpointError(f"shape mismatch for {name}")
            p.copy_(params[name])
    model = model.to(params[names[0]].dtype if params else dtype)
    optimizer = None
    if optimizer_factory is not None:
        optimizer = optimizer_factory(model.parameters())
        if opt:
            step = float((meta or {}).get("opt_step", 0))
            for name, p in model.named_parameters():
                if f"exp_avg/{name}" not in opt:
                    continue
                optimizer.state[p] = {
                    "step": torch.tensor(step),
                    "exp_avg": opt[f"exp_avg/{name}"].clone(),
                    "exp_avg_sq": opt[f"exp_avg_sq/{name}"].clone(),
                }
    return model, optimizer, meta
