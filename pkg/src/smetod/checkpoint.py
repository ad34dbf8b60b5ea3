"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"SMET"                      magic
    u32  version                 currently 1
    u32  header length, bytes    followed by UTF-8 canonical JSON:
                                 {"config": {...}, "vocab": [...] | null, "extra": {...}}
    u32  array count             then per array:
         u32 name length, name bytes (UTF-8)
         u32 ndim, ndim x u64 dims
         u64 byte offset into the data section
    data section                 float64 little-endian buffers, row-major

Loading rebuilds the model from the config echo and rejects any manifest whose
names or shapes disagree with that config.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .transformer import ModelConfig, Seq2SeqModel
from .vocab import Vocab

MAGIC = b"SMET"
VERSION = 1


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def save_checkpoint(path, model: Seq2SeqModel, vocab: Vocab | None = None, extra: dict | None = None) -> None:
    header = canonical_json(
        {
            "config": model.config.to_dict(),
            "vocab": None if vocab is None else vocab.tokens,
            "extra": extra or {},
        }
    ).encode("utf-8")
    params = model.named_parameters()
    manifest = bytearray()
    blobs = []
    offset = 0
    for name, t in params.items():
        raw = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        nb = name.encode("utf-8")
        manifest += struct.pack("<I", len(nb)) + nb
        manifest += struct.pack("<I", t.data.ndim)
        manifest += struct.pack(f"<{t.data.ndim}Q", *t.data.shape)
        manifest += struct.pack("<Q", offset)
        blobs.append(raw)
        offset += len(raw)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(params)))
        fh.write(manifest)
        for raw in blobs:
            fh.write(raw)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint truncated")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_header(path) -> dict:
    buf = Path(path).read_bytes()
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    return json.loads(r.take(hlen).decode("utf-8"))


def load_checkpoint(path) -> tuple[Seq2SeqModel, Vocab | None, dict]:
    """Return ``(model, vocab, extra)`` from a checkpoint file."""
    buf = Path(path).read_bytes()
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    header = json.loads(r.take(hlen).decode("utf-8"))
    try:
        config = ModelConfig.from_dict(header["config"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: bad config echo ({exc})") from None
    (count,) = r.unpack("<I")
    manifest = []
    for _ in range(count):
        (nlen,) = r.unpack("<I")
        name = r.take(nlen).decode("utf-8")
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        (offset,) = r.unpack("<Q")
        manifest.append((name, tuple(shape), offset))
    data_start = r.pos

    model = Seq2SeqModel(config)
    params = model.named_parameters()
    names = [m[0] for m in manifest]
    if names != list(params):
        missing = set(params) - set(names)
        unknown = set(names) - set(params)
        raise CheckpointError(f"{path}: manifest disagrees with config (missing {sorted(missing)}, unknown {sorted(unknown)})")
    for name, shape, offset in manifest:
        t = params[name]
        if shape != t.shape:
            raise CheckpointError(f"{path}: {name} has shape {shape}, config implies {t.shape}")
        n = int(np.prod(shape, dtype=np.int64))
        start = data_start + offset
        if start + 8 * n > len(buf):
            raise CheckpointError(f"{path}: data for {name} truncated")
        t.data[...] = np.frombuffer(buf, dtype="<f8", count=n, offset=start).reshape(shape)
    vocab = Vocab(header["vocab"]) if header.get("vocab") else None
    return model, vocab, header.get("extra", {})
