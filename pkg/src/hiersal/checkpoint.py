"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic   4s   = b"HD2S"
    version u32  = 1
    step    u64
    config  u32 length + utf-8 key=value block (model configuration echo)
    params  u32 count + tensor entries, sorted by name
    stats   u32 count + tensor entries, sorted by name (per-domain BN
            running statistics, named "<layer>@<domain>.mean" / ".var")

Tensor entry: u16 name length + name, u8 dtype code (0 = float32), u8 rank,
u32 extents, raw little-endian payload. Save -> load -> save is
byte-identical.
"""

import struct
from pathlib import Path

import numpy as np

from .config import model_config_from_text, model_config_to_text
from .errors import CheckpointError, ModeMismatchError
from .model import SaliencyModel

MAGIC = b"HD2S"
VERSION = 1
_DTYPE_F32 = 0


def _pack_tensor(name, arr):
    nb = name.encode()
    out = struct.pack("<H", len(nb)) + nb
    out += struct.pack("<BB", _DTYPE_F32, arr.ndim)
    out += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return out + arr.astype("<f4").tobytes()


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.off = 0

    def take(self, n, what):
        if self.off + n > len(self.blob):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        out = self.blob[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def tensor(self):
        (nlen,) = self.unpack("<H", "tensor name length")
        name = self.take(nlen, "tensor name").decode()
        dtype, rank = self.unpack("<BB", "tensor header")
        if dtype != _DTYPE_F32:
            raise CheckpointError(f"unknown dtype code {dtype} for tensor {name!r}")
        shape = self.unpack(f"<{rank}I", "tensor extents")
        count = 1
        for e in shape:
            count *= e
        payload = self.take(4 * count, f"tensor payload of {name!r}")
        arr = np.frombuffer(payload, dtype="<f4").reshape(shape)
        return name, np.ascontiguousarray(arr)


def save_checkpoint(model, step=0):
    """Serialize parameters, per-domain statistics, and the step counter."""
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", VERSION)
    out += struct.pack("<Q", step)
    cfg = model_config_to_text(model.config).encode()
    out += struct.pack("<I", len(cfg)) + cfg

    names = sorted(model.params)
    out += struct.pack("<I", len(names))
    for name in names:
        out += _pack_tensor(name, model.params[name].data)

    stat_entries = []
    for layer in sorted(model.bn_stats):
        for d, mean, var in model.bn_stats[layer].state_items():
            stat_entries.append((f"{layer}@{d}.mean", mean))
            stat_entries.append((f"{layer}@{d}.var", var))
    stat_entries.sort(key=lambda e: e[0])
    out += struct.pack("<I", len(stat_entries))
    for name, arr in stat_entries:
        out += _pack_tensor(name, arr)
    return bytes(out)


def load_checkpoint(blob, seed=0):
    """Rebuild the model from a checkpoint; returns (model, step)."""
    r = _Reader(blob)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}, "
                              f"expected {VERSION}")
    (step,) = r.unpack("<Q", "step counter")
    (clen,) = r.unpack("<I", "config length")
    cfg = model_config_from_text(r.take(clen, "config echo").decode())
    model = SaliencyModel(cfg, seed=seed)

    (n_params,) = r.unpack("<I", "parameter count")
    seen = set()
    for _ in range(n_params):
        name, arr = r.tensor()
        if name not in model.params:
            raise CheckpointError(f"checkpoint has unknown parameter {name!r}")
        if arr.shape != model.params[name].data.shape:
            raise CheckpointError(f"parameter {name!r} has shape {arr.shape}, "
                                  f"model expects {model.params[name].data.shape}")
        model.params[name].data = arr
        seen.add(name)
    missing = set(model.params) - seen
    if missing:
        raise CheckpointError(f"checkpoint is missing parameters: {sorted(missing)[:3]}...")

    (n_stats,) = r.unpack("<I", "stats count")
    halves = {}
    for _ in range(n_stats):
        name, arr = r.tensor()
        try:
            layer_domain, kind = name.rsplit(".", 1)
            layer, domain = layer_domain.rsplit("@", 1)
            domain = int(domain)
        except ValueError:
            raise CheckpointError(f"malformed stats entry name {name!r}")
        if layer not in model.bn_stats or kind not in ("mean", "var"):
            raise CheckpointError(f"stats entry {name!r} matches no model layer")
        halves.setdefault((layer, domain), {})[kind] = arr
    for (layer, domain), kv in sorted(halves.items()):
        if set(kv) != {"mean", "var"}:
            raise CheckpointError(f"incomplete stats for {layer}@{domain}")
        model.bn_stats[layer].load(domain, kv["mean"], kv["var"])

    if r.off != len(blob):
        raise CheckpointError(f"{len(blob) - r.off} trailing bytes after checkpoint")
    return model, step


def write_checkpoint(model, path, step=0):
    Path(path).write_bytes(save_checkpoint(model, step))


def read_checkpoint(path, seed=0):
    return load_checkpoint(Path(path).read_bytes(), seed=seed)


def ensure_mode(model, mode):
    """Assert the checkpoint's adaptation mode ('plain', 'da' or 'dsl')."""
    cfg = model.config
    actual = "da" if cfg.enable_da else ("dsl" if cfg.enable_dsl else "plain")
    if mode != actual:
        raise ModeMismatchError(f"checkpoint was trained in {actual!r} mode, "
                                f"but {mode!r} was requested")
