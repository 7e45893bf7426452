"""Binary checkpoints, flat config files and the style-library manifest.

Checkpoint layout (all integers little-endian)::

    b"SISEG1"                 magic
    u16 version
    u8  kind length, kind     "seg" or "st"
    u32 record count
    per record:
        u16 name length, name (utf-8)
        u8  rank, u32 * rank extents
        float32 * prod(extents)
    u32 crc32 of every byte after the magic
"""

from __future__ import annotations

import dataclasses
import struct
import zlib
from pathlib import Path
from typing import Any, Dict, List, Tuple, Type, TypeVar

import numpy as np

from .params import ModelParams

MAGIC = b"SISEG1"
VERSION = 1
KINDS = ("seg", "st")


class CheckpointError(ValueError):
    """Malformed or corrupted checkpoint file."""


class KindMismatchError(CheckpointError):
    """A checkpoint of the wrong network kind was supplied."""


def encode_checkpoint(params: ModelParams) -> bytes:
    if params.kind not in KINDS:
        raise ValueError(f"unknown network kind {params.kind!r}")
    kind = params.kind.encode("ascii")
    parts = [struct.pack("<HB", VERSION, len(kind)), kind, struct.pack("<I", len(params.tensors))]
    for name, arr in params.tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    payload = b"".join(parts)
    return MAGIC + payload + struct.pack("<I", zlib.crc32(payload))


def decode_checkpoint(blob: bytes, expect_kind: str = None) -> ModelParams:
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    if len(blob) < len(MAGIC) + 4:
        raise CheckpointError("truncated checkpoint")
    payload, (crc,) = blob[len(MAGIC) : -4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) != crc:
        raise CheckpointError("checksum mismatch")
    try:
        version, klen = struct.unpack_from("<HB", payload, 0)
        pos = 3
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        kind = payload[pos : pos + klen].decode("ascii")
        pos += klen
        (count,) = struct.unpack_from("<I", payload, pos)
        pos += 4
        tensors: Dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", payload, pos)
            pos += 2
            name = payload[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", payload, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", payload, pos)
            pos += 4 * rank
            n = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * n > len(payload):
                raise CheckpointError(f"record {name!r} runs past the end of the file")
            tensors[name] = np.frombuffer(payload, "<f4", n, pos).reshape(shape).astype(np.float32)
            pos += 4 * n
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    if pos != len(payload):
        raise CheckpointError("trailing bytes after the last record")
    if kind not in KINDS:
        raise CheckpointError(f"unknown network kind {kind!r}")
    if expect_kind is not None and kind != expect_kind:
        raise KindMismatchError(f"expected a {expect_kind} checkpoint, got {kind}")
    return ModelParams(kind, tensors)


def save_checkpoint(path, params: ModelParams) -> None:
    Path(path).write_bytes(encode_checkpoint(params))


def load_checkpoint(path, expect_kind: str = None) -> ModelParams:
    return decode_checkpoint(Path(path).read_bytes(), expect_kind)


# ---------------------------------------------------------------------------
# flat ``key = value`` config files

C = TypeVar("C")


class ConfigError(ValueError):
    pass


def _parse_value(text: str, default: Any, key: str):
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            conv = type(default[0]) if default else str
            if conv is int:
                text = text.replace("x", ",")  # 64x64 reads as (64, 64)
            items = [s.strip() for s in text.split(",") if s.strip()]
            return tuple(conv(s) for s in items)
        return text
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def parse_config(text: str, cls: Type[C], base: C = None) -> C:
    """Overlay ``key = value`` lines on ``base`` (or the dataclass defaults).

    Blank lines and ``#`` comments are ignored; unknown keys are errors.
    Dotted keys such as ``seg.iterations`` reach into nested dataclasses.
    """
    cfg = base if base is not None else cls()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            cfg = _set(cfg, key.split("."), value, key)
        except ConfigError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
    return cfg


def _set(cfg, path: List[str], value: str, key: str):
    names = {f.name for f in dataclasses.fields(cfg)}
    head = path[0]
    if head not in names:
        raise ConfigError(f"unknown key {key!r}")
    current = getattr(cfg, head)
    if len(path) > 1:
        if not dataclasses.is_dataclass(current):
            raise ConfigError(f"unknown key {key!r}")
        return dataclasses.replace(cfg, **{head: _set(current, path[1:], value, key)})
    if dataclasses.is_dataclass(current):
        raise ConfigError(f"{key!r} is a section; set {key}.<field> instead")
    return dataclasses.replace(cfg, **{head: _parse_value(value, current, key)})


def load_config(path, cls: Type[C], base: C = None) -> C:
    return parse_config(Path(path).read_text(), cls, base)


def format_config(cfg, prefix: str = "") -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if dataclasses.is_dataclass(v):
            lines.append(format_config(v, f"{prefix}{f.name}.").rstrip("\n"))
            continue
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{prefix}{f.name} = {v}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# style library manifest: source_id <tab> mean <tab> std <tab> path

LIBRARY_NAME = "library.tsv"


def write_library(root, lib) -> Path:
    """Slices as 16-bit PGM next to the manifest. Returns the manifest path."""
    from .phantoms import load_slice, save_slice

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    lines = []
    for img, d in zip(lib.slices, lib.descriptors):
        rel = f"style_{d.source_id:04d}.pgm"
        save_slice(root / rel, img)
        # describe the stored (quantised) slice so the manifest matches what loads back
        q = load_slice(root / rel)
        lines.append(f"{d.source_id}\t{float(q.astype(np.float64).mean())!r}\t{float(q.astype(np.float64).std())!r}\t{rel}")
    path = root / LIBRARY_NAME
    path.write_text("\n".join(lines) + "\n")
    return path


def read_library(path):
    from .phantoms import load_slice
    from .style import StyleDescriptor, StyleLibrary

    path = Path(path)
    if path.is_dir():
        path = path / LIBRARY_NAME
    if not path.exists():
        raise FileNotFoundError(f"style library manifest {path} not found")
    lib = StyleLibrary()
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ValueError(f"{path}:{lineno}: expected 4 tab-separated fields")
        sid, mean, std, rel = int(parts[0]), float(parts[1]), float(parts[2]), parts[3]
        if sid != len(lib):
            raise ValueError(f"{path}:{lineno}: source ids must be 0..n-1 in order")
        lib.slices.append(load_slice(path.parent / rel))
        lib.descriptors.append(StyleDescriptor(mean, std, sid, Path(rel).stem))
    return lib
