"""Binary checkpoint format.

Layout (little-endian)::

    b"CRYM"  u16 version
    u32 config length, config text (``key = value`` lines, utf-8)
    u32 entry count
    per entry: u16 name length, name (utf-8), u8 kind (0 parameter, 1 buffer),
               u32 ndim, ndim x u32 dims, prod(dims) x f64 values
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .config import format_kv, model_config_from_text, parse_kv
from .errors import ConfigInvalidError, CorruptCheckpointError, VersionMismatchError
from .model import Model, ModelConfig

MAGIC = b"CRYM"
VERSION = 1


def _entries(model: Model):
    for name, p in model.named_parameters():
        yield name, 0, p.data
    for name, buf in model.named_buffers():
        yield name, 1, buf


def checkpoint_bytes(model: Model) -> bytes:
    meta = {"kind": model.kind, "seed": model.seed, **model.config.to_dict()}
    text = format_kv(meta).encode("utf-8")
    chunks = [MAGIC, struct.pack("<H", VERSION), struct.pack("<I", len(text)), text]
    entries = list(_entries(model))
    chunks.append(struct.pack("<I", len(entries)))
    for name, kind, arr in entries:
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<BI", kind, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(chunks)


def checkpoint_save(model: Model, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptCheckpointError("checkpoint is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def checkpoint_load(path: str | Path, expected_config: ModelConfig | None = None) -> Model:
    """Rebuild a model from ``path``.

    When ``expected_config`` is given and differs from the stored one, a
    :class:`ConfigInvalidError` names the mismatching keys.
    """
    data = Path(path).read_bytes()
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CorruptCheckpointError("not a crynet checkpoint (bad magic)")
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, expected {VERSION}")
    (text_len,) = r.unpack("<I")
    try:
        meta = parse_kv(r.take(text_len).decode("utf-8"))
        kind = meta.pop("kind")
        seed = int(meta.pop("seed"))
        config = model_config_from_text("".join(f"{k} = {v}\n" for k, v in meta.items()))
    except (KeyError, ValueError, UnicodeDecodeError) as exc:
        raise CorruptCheckpointError(f"unreadable config block: {exc}") from exc
    if expected_config is not None and expected_config != config:
        stored, wanted = config.to_dict(), expected_config.to_dict()
        diff = sorted(k for k in stored if stored[k] != wanted[k])
        raise ConfigInvalidError(f"checkpoint config differs from requested config on: {diff}")

    model = Model(config, kind, seed)
    targets = {name: (0, p.data) for name, p in model.named_parameters()}
    targets.update({name: (1, b) for name, b in model.named_buffers()})
    (count,) = r.unpack("<I")
    seen = set()
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8", errors="replace")
        kind_id, ndim = r.unpack("<BI")
        shape = r.unpack(f"<{ndim}I")
        n = int(np.prod(shape)) if ndim else 1
        values = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape)
        if name not in targets or targets[name][0] != kind_id or targets[name][1].shape != shape:
            raise CorruptCheckpointError(f"unexpected entry {name!r} with shape {shape}")
        targets[name][1][...] = values
        seen.add(name)
    if seen != set(targets):
        raise CorruptCheckpointError(f"missing entries: {sorted(set(targets) - seen)[:5]}")
    if r.pos != len(data):
        raise CorruptCheckpointError("trailing bytes after last entry")
    return model
