"""Little-endian binary files for datasets, checkpoints and logit traces.

Every file opens with a 4-byte magic and a u16 version. Loaders name the byte
offset where a file stops making sense.

Dataset (``MXDS``)::

    magic, version u16, split u8, K u16, N u32, C u16, H u16, W u16,
    N*C*H*W uint8 pixels, N u16 labels

Checkpoint (``MXCK``)::

    magic, version u16, metadata length u32, metadata (UTF-8 JSON),
    entry count u32, then per entry sorted by name:
    name length u16, UTF-8 name, rank u8, dims u32[rank], float32 data

Trace (``MXTR``)::

    magic, version u16, N u32, M u16, K u16, N*M*K float32 logits, N u16 labels
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .data import SPLITS, Dataset
from .exits import LogitTrace

VERSION = 1
DATASET_MAGIC = b"MXDS"
CHECKPOINT_MAGIC = b"MXCK"
TRACE_MAGIC = b"MXTR"


class FormatError(ValueError):
    def __init__(self, path: str, offset: int, message: str):
        super().__init__(f"{path}: byte {offset}: {message}")
        self.path, self.offset = path, offset


class _Reader:
    def __init__(self, buf: bytes, path: str):
        self.buf, self.path, self.pos = buf, path, 0

    def fail(self, message: str, offset: Optional[int] = None):
        raise FormatError(self.path, self.pos if offset is None else offset, message)

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            self.fail(f"truncated {what}: need {n} bytes, {len(self.buf) - self.pos} left")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        vals = struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt), what))
        return vals[0] if len(vals) == 1 else vals

    def array(self, dtype: str, count: int, what: str) -> np.ndarray:
        dt = np.dtype(dtype).newbyteorder("<")
        return np.frombuffer(self.take(count * dt.itemsize, what), dtype=dt).astype(dt.newbyteorder("="))

    def header(self, magic: bytes) -> int:
        got = self.take(4, "magic")
        if got != magic:
            self.fail(f"bad magic {got!r}, expected {magic!r}", 0)
        version = self.unpack("H", "version")
        if version != VERSION:
            self.fail(f"unsupported version {version}, expected {VERSION}", 4)
        return version

    def finish(self) -> None:
        if self.pos != len(self.buf):
            self.fail(f"{len(self.buf) - self.pos} trailing bytes")


def _read(path: str) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def _header(magic: bytes) -> bytes:
    return magic + struct.pack("<H", VERSION)


# -- dataset -----------------------------------------------------------------

def save_dataset(ds: Dataset, path: str) -> None:
    n, c, h, w = ds.images.shape
    if ds.num_classes > 0xFFFF:
        raise ValueError("too many classes for the dataset format")
    with open(path, "wb") as fh:
        fh.write(_header(DATASET_MAGIC))
        fh.write(struct.pack("<BHIHHH", SPLITS.index(ds.split), ds.num_classes, n, c, h, w))
        fh.write(np.ascontiguousarray(ds.images).tobytes())
        fh.write(ds.labels.astype("<u2").tobytes())


def load_dataset(path: str) -> Dataset:
    r = _Reader(_read(path), path)
    r.header(DATASET_MAGIC)
    split_pos = r.pos
    split, k, n, c, h, w = r.unpack("BHIHHH", "dataset header")
    if split >= len(SPLITS):
        r.fail(f"unknown split code {split}", split_pos)
    images = r.array("u1", n * c * h * w, "pixels").reshape(n, c, h, w)
    label_pos = r.pos
    labels = r.array("u2", n, "labels").astype(np.int64)
    if n and labels.max() >= k:
        bad = int(np.argmax(labels >= k))
        r.fail(f"label {labels[bad]} outside [0, {k})", label_pos + 2 * bad)
    r.finish()
    return Dataset(images, labels, k, SPLITS[split])


# -- checkpoint ----------------------------------------------------------------

@dataclass
class Checkpoint:
    tensors: Dict[str, np.ndarray]
    metadata: Dict = field(default_factory=dict)
    version: int = VERSION


def config_digest(config) -> str:
    """Short hash of a config mapping or dataclass (key order independent)."""
    items = config if isinstance(config, dict) else vars(config)
    blob = json.dumps(items, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    meta = json.dumps(ckpt.metadata, sort_keys=True).encode()
    parts = [_header(CHECKPOINT_MAGIC), struct.pack("<I", len(meta)), meta,
             struct.pack("<I", len(ckpt.tensors))]
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name])
        if arr.dtype != np.float32:
            raise ValueError(f"tensor {name!r} is {arr.dtype}; checkpoints hold float32")
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path: str) -> Checkpoint:
    r = _Reader(_read(path), path)
    version = r.header(CHECKPOINT_MAGIC)
    meta_len = r.unpack("I", "metadata length")
    meta_pos = r.pos
    try:
        metadata = json.loads(r.take(meta_len, "metadata").decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        r.fail(f"metadata is not valid JSON ({exc})", meta_pos)
    count = r.unpack("I", "entry count")
    tensors: Dict[str, np.ndarray] = {}
    prev = None
    for _ in range(count):
        entry_pos = r.pos
        name_len = r.unpack("H", "name length")
        name = r.take(name_len, "name").decode("utf-8", errors="strict")
        if prev is not None and name <= prev:
            r.fail(f"entry {name!r} out of order or duplicated", entry_pos)
        prev = name
        rank = r.unpack("B", "rank")
        dims = [r.unpack("I", "dim") for _ in range(rank)]
        count_el = int(np.prod(dims)) if dims else 1
        tensors[name] = r.array("f4", count_el, f"data of {name!r}").reshape(dims)
    r.finish()
    return Checkpoint(tensors, metadata, version)


def model_state(model) -> Dict[str, np.ndarray]:
    """Parameters and buffers of a multi-exit model under their scoped names."""
    state = {name: p.data.copy() for name, p in model.params}
    state.update({name: b.copy() for name, b in model.buffers().items()})
    return state


def load_model_state(model, tensors: Dict[str, np.ndarray]) -> None:
    params = dict(model.params)
    buffers = model.buffers()
    expected = set(params) | set(buffers)
    missing, extra = expected - set(tensors), set(tensors) - expected
    if missing or extra:
        raise ValueError(f"checkpoint does not fit model: missing {sorted(missing)[:5]}, "
                         f"unexpected {sorted(extra)[:5]}")
    for name, arr in tensors.items():
        dest = params[name].data if name in params else buffers[name]
        if dest.shape != arr.shape:
            raise ValueError(f"{name}: checkpoint shape {arr.shape} != model shape {dest.shape}")
        dest[...] = arr


def save_model(model, path: str, epoch: int = 0, config=None, **extra) -> None:
    bb = model.backbone
    meta = {"backbone": bb.name, "pattern": str(model.pattern), "classes": model.num_classes,
            "input_size": bb.input_shape[1], "epoch": epoch,
            "config_digest": config_digest(config) if config is not None else ""}
    if model.branches:
        spec = model.branches[0].spec
        meta["se_ratio"], meta["reduction_bn"] = spec.se_ratio, spec.reduction_bn
    meta.update(extra)
    save_checkpoint(Checkpoint(model_state(model), meta), path)


def load_model(path: str):
    """Rebuild the model recorded in a checkpoint and load its weights."""
    from .model import build_model

    ckpt = load_checkpoint(path)
    meta = ckpt.metadata
    try:
        model = build_model(meta["backbone"], meta["pattern"], meta["classes"], meta["input_size"],
                            seed=0, se_ratio=meta.get("se_ratio", 16),
                            reduction_bn=meta.get("reduction_bn", True))
    except KeyError as exc:
        raise ValueError(f"{path}: checkpoint metadata lacks {exc}") from None
    load_model_state(model, ckpt.tensors)
    model.eval()
    return model, ckpt


# -- trace -------------------------------------------------------------------

def save_trace(trace: LogitTrace, path: str) -> None:
    if max(trace.M, trace.K) > 0xFFFF:
        raise ValueError("trace dimensions exceed the u16 fields")
    with open(path, "wb") as fh:
        fh.write(_header(TRACE_MAGIC))
        fh.write(struct.pack("<IHH", trace.N, trace.M, trace.K))
        fh.write(trace.logits.astype("<f4").tobytes())
        fh.write(trace.labels.astype("<u2").tobytes())


def load_trace(path: str) -> LogitTrace:
    r = _Reader(_read(path), path)
    r.header(TRACE_MAGIC)
    n, m, k = r.unpack("IHH", "trace header")
    logit_pos = r.pos
    logits = r.array("f4", n * m * k, "logits").reshape(n, m, k)
    if not np.all(np.isfinite(logits)):
        bad = int(np.argmax(~np.isfinite(logits.ravel())))
        r.fail("non-finite logit", logit_pos + 4 * bad)
    label_pos = r.pos
    labels = r.array("u2", n, "labels").astype(np.int64)
    if n and labels.max() >= k:
        bad = int(np.argmax(labels >= k))
        r.fail(f"label {labels[bad]} outside [0, {k})", label_pos + 2 * bad)
    r.finish()
    return LogitTrace(logits, labels)


# -- csv -------------------------------------------------------------------

def write_csv(rows: List[Dict], path: str, fieldnames: Optional[List[str]] = None) -> None:
    """Rows of dicts to CSV with a header (empty input writes the header only)."""
    fieldnames = fieldnames or (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)
