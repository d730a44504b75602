"""Little-endian binary formats for tensors, label maps, checkpoints and datasets.

EGT0  tensor      magic, u32 rank (=4), 4 x u32 dims, f32 payload (row-major)
EGL0  label map   magic, u32 H, u32 W, u8 payload (255 = ignore)
EGC0  checkpoint  magic, u32 count, then per array:
                  u16 name length, utf-8 name, u32 rank, rank x u32 dims, f32 payload

A dataset directory holds ``manifest.txt`` (num_classes, modalities, count)
and one ``NNNNNN/`` directory per sample with ``<modality>.egt`` files and
``label.egl``.
"""

from __future__ import annotations

import os
import struct
import tempfile
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .data import SampleRecord, SegDataset
from .errors import FormatError
from .params import ModelParams

TENSOR_MAGIC = b"EGT0"
LABEL_MAGIC = b"EGL0"
CHECKPOINT_MAGIC = b"EGC0"
_F32 = np.dtype("<f4")


def atomic_write_bytes(path, payload: bytes) -> None:
    """Write to a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, buf: bytes, what: str):
        self.buf = buf
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.what}: truncated (need {n} bytes at offset {self.pos}, have {len(self.buf) - self.pos})")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def magic(self, expected: bytes) -> None:
        got = self.take(4)
        if got != expected:
            raise FormatError(f"{self.what}: bad magic {got!r}, expected {expected!r}")

    def done(self) -> None:
        if self.pos != len(self.buf):
            raise FormatError(f"{self.what}: {len(self.buf) - self.pos} trailing bytes")


# --------------------------------------------------------------------------- tensors


def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim != 4:
        raise FormatError(f"tensor files hold rank-4 arrays, got shape {arr.shape}")
    head = TENSOR_MAGIC + struct.pack("<I4I", 4, *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_F32).tobytes()


def decode_tensor(buf: bytes, what: str = "tensor") -> np.ndarray:
    r = _Reader(buf, what)
    r.magic(TENSOR_MAGIC)
    (rank,) = r.unpack("<I")
    if rank != 4:
        raise FormatError(f"{what}: rank {rank}, expected 4")
    dims = r.unpack("<4I")
    n = int(np.prod(dims))
    data = np.frombuffer(r.take(4 * n), dtype=_F32).reshape(dims).astype(np.float32)
    r.done()
    return data


def write_tensor(path, arr: np.ndarray) -> None:
    atomic_write_bytes(path, encode_tensor(arr))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes(), str(path))


# --------------------------------------------------------------------------- labels


def encode_label(label: np.ndarray) -> bytes:
    label = np.asarray(label)
    if label.ndim != 2:
        raise FormatError(f"label files hold [H, W] maps, got shape {label.shape}")
    if label.size and (label.min() < 0 or label.max() > 255):
        raise FormatError("label values must fit in an unsigned byte")
    return LABEL_MAGIC + struct.pack("<2I", *label.shape) + np.ascontiguousarray(label, dtype=np.uint8).tobytes()


def decode_label(buf: bytes, what: str = "label") -> np.ndarray:
    r = _Reader(buf, what)
    r.magic(LABEL_MAGIC)
    h, w = r.unpack("<2I")
    data = np.frombuffer(r.take(h * w), dtype=np.uint8).reshape(h, w).copy()
    r.done()
    return data


def write_label(path, label: np.ndarray) -> None:
    atomic_write_bytes(path, encode_label(label))


def read_label(path) -> np.ndarray:
    return decode_label(Path(path).read_bytes(), str(path))


# --------------------------------------------------------------------------- checkpoints


def encode_checkpoint(arrays: "OrderedDict[str, np.ndarray]") -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise FormatError(f"array name too long: {name[:40]}...")
        arr = np.asarray(arr)
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_F32).tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes, what: str = "checkpoint") -> "OrderedDict[str, np.ndarray]":
    r = _Reader(buf, what)
    r.magic(CHECKPOINT_MAGIC)
    (count,) = r.unpack("<I")
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        try:
            name = r.take(nlen).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{what}: array name is not utf-8") from exc
        (rank,) = r.unpack("<I")
        dims = r.unpack(f"<{rank}I") if rank else ()
        n = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(r.take(4 * n), dtype=_F32).reshape(dims).astype(np.float32)
    r.done()
    return out


def write_checkpoint(path, params: ModelParams) -> None:
    atomic_write_bytes(path, encode_checkpoint(params.arrays()))


def read_checkpoint(path, dtype=np.float32) -> ModelParams:
    return ModelParams(decode_checkpoint(Path(path).read_bytes(), str(path)), dtype=dtype)


# --------------------------------------------------------------------------- datasets


def write_dataset(root, dataset: SegDataset) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(dataset):
        d = root / f"{i:06d}"
        for m in dataset.modalities:
            write_tensor(d / f"{m}.egt", s.modalities[m][None])
        write_label(d / "label.egl", s.label)
    manifest = (
        f"num_classes = {dataset.num_classes}\n"
        f"modalities = {','.join(dataset.modalities)}\n"
        f"count = {len(dataset)}\n"
    )
    atomic_write_bytes(root / "manifest.txt", manifest.encode())


def read_dataset(root) -> SegDataset:
    root = Path(root)
    mpath = root / "manifest.txt"
    if not mpath.is_file():
        raise FileNotFoundError(f"no dataset manifest at {mpath}")
    meta = {}
    for line in mpath.read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            meta[k.strip()] = v.strip()
    try:
        num_classes = int(meta["num_classes"])
        mods = tuple(m for m in meta["modalities"].split(",") if m)
        count = int(meta["count"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{mpath}: malformed manifest") from exc
    samples = []
    for i in range(count):
        d = root / f"{i:06d}"
        arrays = {}
        for m in mods:
            t = read_tensor(d / f"{m}.egt")
            if t.shape[0] != 1:
                raise FormatError(f"{d / m}.egt: expected batch extent 1, got {t.shape[0]}")
            arrays[m] = t[0]
        samples.append(SampleRecord(arrays, read_label(d / "label.egl")))
    ds = SegDataset(mods, num_classes, samples)
    ds.validate()
    return ds
