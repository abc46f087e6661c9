"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"SDMF"                       magic
    u32 version
    u32 n, n bytes                JSON config block (UTF-8)
    u32 record count
    per record:
      u32 n, n bytes              record name (UTF-8)
      u32 rank, rank * u64        extents
      prod(extents) * f64         raw values, C order

Loading reproduces every array bit for bit. Writes go to a sibling temporary
file first and are moved into place, so an interrupted save never clobbers
the previous checkpoint.
"""

import json
import os
import struct

import numpy as np

from . import tensorcore as tc

MAGIC = b"SDMF"
FORMAT_VERSION = 1


class CheckpointError(IOError):
    """Unreadable, truncated or incompatible checkpoint."""


def _u32(n):
    return struct.pack("<I", n)


def dumps(config, arrays, version=FORMAT_VERSION):
    """Serialize a JSON-able ``config`` and a ``name -> array`` mapping."""
    parts = [MAGIC, _u32(version)]
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    parts += [_u32(len(blob)), blob, _u32(len(arrays))]
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype="<f8", order="C")
        raw = name.encode("utf-8")
        parts += [_u32(len(raw)), raw, _u32(arr.ndim)]
        parts += [struct.pack("<Q", n) for n in arr.shape]
        parts.append(arr.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]


def loads(buf, expect_version=FORMAT_VERSION):
    """Inverse of :func:`dumps`; returns ``(config, arrays)``."""
    r = _Reader(memoryview(buf).tobytes())
    if r.take(4) != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    version = r.u32()
    if expect_version is not None and version != expect_version:
        raise CheckpointError(f"checkpoint format version {version}, this build reads {expect_version}")
    try:
        config = json.loads(r.take(r.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt config block: {exc}") from exc
    arrays = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        shape = tuple(struct.unpack("<Q", r.take(8))[0] for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(r.buf):
        raise CheckpointError(f"{len(r.buf) - r.pos} trailing bytes after last record")
    return config, arrays


def save(path, config, arrays):
    path = os.fspath(path)
    tmp = path + ".tmp"
    try:
        with open(tmp, "wb") as fh:
            fh.write(dumps(config, arrays))
        os.replace(tmp, path)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc


def load(path):
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads(buf)


# -- trainer state <-> records --------------------------------------------------


def pack_state(model, adam):
    """Flatten parameters, batch-norm statistics and Adam moments into records."""
    arrays = {f"param/{k}": v.data for k, v in model.params.items()}
    for k, st in model.bn_stats.items():
        arrays[f"bn_mean/{k}"] = st.mean
        arrays[f"bn_var/{k}"] = st.var
    for k, m in adam.m.items():
        arrays[f"adam_m/{k}"] = m
        arrays[f"adam_v/{k}"] = adam.v[k]
    return arrays


def unpack_state(arrays, adam_hyper):
    """Split records back into ``(params, bn_stats, adam_state)``."""
    params, bn, m, v = {}, {}, {}, {}
    for name, arr in arrays.items():
        kind, _, key = name.partition("/")
        if kind == "param":
            params[key] = tc.Tensor(arr, requires_grad=True)
        elif kind == "bn_mean":
            bn.setdefault(key, [None, None])[0] = arr.copy()
        elif kind == "bn_var":
            bn.setdefault(key, [None, None])[1] = arr.copy()
        elif kind == "adam_m":
            m[key] = arr.copy()
        elif kind == "adam_v":
            v[key] = arr.copy()
        else:
            raise CheckpointError(f"unknown record {name!r}")
    if any(a is None or b is None for a, b in bn.values()) or set(m) != set(v):
        raise CheckpointError("incomplete batch-norm or optimizer records")
    stats = {k: tc.RunningStats(a, b) for k, (a, b) in bn.items()}
    adam = tc.AdamState(lr=adam_hyper["lr"], beta1=adam_hyper["beta1"], beta2=adam_hyper["beta2"],
                        eps=adam_hyper["eps"], step=adam_hyper["step"], m=m, v=v)
    return params, stats, adam


def adam_hyper(adam):
    return {"lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps, "step": adam.step}
