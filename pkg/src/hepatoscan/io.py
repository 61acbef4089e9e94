"""MVOL volume/mask files and template-atlas directories.

MVOL is a small self-describing format: an ASCII header of fixed lines
followed by a raw x-fastest payload::

    MVOL 1
    dims <nx> <ny> <nz>
    spacing <sx> <sy> <sz>
    origin <ox> <oy> <oz>
    dtype int16le|uint8
    END
    <payload>
"""
from __future__ import annotations

import os
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from .atlas import CANONICAL_SPACING_MM, AtlasError, LiverShapeType, LiverTemplate, TemplateAtlas
from .volume import HU_MAX, HU_MIN, BinaryMask, CtVolume, InvalidArgumentError, VoxelGrid

PathLike = Union[str, os.PathLike]

MAGIC = "MVOL 1"
ATLAS_MANIFEST = "atlas.txt"
_DTYPES = {"int16le": np.dtype("<i2"), "uint8": np.dtype("u1")}


class FormatError(ValueError):
    """Malformed MVOL file or atlas directory; ``field`` names the culprit."""

    def __init__(self, field: str, message: str, path: PathLike = None):
        self.field = field
        self.path = None if path is None else str(path)
        where = f"{self.path}: " if path is not None else ""
        super().__init__(f"{where}{field}: {message}")


class AtlasFormatError(FormatError, AtlasError):
    pass


def _fmt(x: float) -> str:
    return repr(float(x))


def encode_header(grid: VoxelGrid, dtype: str) -> bytes:
    lines = [
        MAGIC,
        "dims " + " ".join(str(d) for d in grid.dims),
        "spacing " + " ".join(_fmt(s) for s in grid.spacing_mm),
        "origin " + " ".join(_fmt(o) for o in grid.origin_mm),
        f"dtype {dtype}",
        "END",
    ]
    return ("\n".join(lines) + "\n").encode("ascii")


def _read_line(buf: bytes, pos: int, field: str, path) -> Tuple[str, int]:
    end = buf.find(b"\n", pos)
    if end < 0:
        raise FormatError(field, "header truncated", path)
    try:
        return buf[pos:end].decode("ascii"), end + 1
    except UnicodeDecodeError:
        raise FormatError(field, "header is not ASCII", path) from None


def _parse_numbers(line: str, key: str, conv, path):
    parts = line.split()
    if len(parts) != 4 or parts[0] != key:
        raise FormatError(key, f"expected '{key} a b c', got {line!r}", path)
    try:
        return tuple(conv(p) for p in parts[1:])
    except ValueError:
        raise FormatError(key, f"bad number in {line!r}", path) from None


def decode(buf: bytes, path=None) -> Tuple[VoxelGrid, str, np.ndarray]:
    """Parse an MVOL byte string into ``(grid, dtype_name, array)``."""
    line, pos = _read_line(buf, 0, "magic", path)
    if line != MAGIC:
        raise FormatError("magic", f"expected {MAGIC!r}, got {line[:20]!r}", path)
    line, pos = _read_line(buf, pos, "dims", path)
    dims = _parse_numbers(line, "dims", int, path)
    if any(d < 1 for d in dims):
        raise FormatError("dims", f"must be positive, got {dims}", path)
    line, pos = _read_line(buf, pos, "spacing", path)
    spacing = _parse_numbers(line, "spacing", float, path)
    if any(not np.isfinite(s) or s <= 0 for s in spacing):
        raise FormatError("spacing", f"must be positive, got {spacing}", path)
    line, pos = _read_line(buf, pos, "origin", path)
    origin = _parse_numbers(line, "origin", float, path)
    if any(not np.isfinite(o) for o in origin):
        raise FormatError("origin", f"must be finite, got {origin}", path)
    line, pos = _read_line(buf, pos, "dtype", path)
    parts = line.split()
    if len(parts) != 2 or parts[0] != "dtype" or parts[1] not in _DTYPES:
        raise FormatError("dtype", f"expected 'dtype int16le|uint8', got {line!r}", path)
    dtype = parts[1]
    line, pos = _read_line(buf, pos, "END", path)
    if line != "END":
        raise FormatError("END", f"expected END, got {line!r}", path)
    grid = VoxelGrid(dims, spacing, origin)
    want = grid.voxel_count * _DTYPES[dtype].itemsize
    have = len(buf) - pos
    if have != want:
        kind = "truncated" if have < want else "has trailing bytes"
        raise FormatError("payload", f"{kind}: {have} bytes, expected {want}", path)
    arr = np.frombuffer(buf, dtype=_DTYPES[dtype], offset=pos).reshape(grid.shape)
    return grid, dtype, arr


def _read_bytes(path: PathLike) -> bytes:
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise OSError(exc.errno, f"cannot read {path}: {exc.strerror}") from exc


def _write_bytes(path: PathLike, header: bytes, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    try:
        with open(tmp, "wb") as fh:
            fh.write(header)
            fh.write(payload)
        os.replace(tmp, path)
    except OSError as exc:
        try:
            tmp.unlink()
        except OSError:
            pass
        raise OSError(exc.errno, f"cannot write {path}: {exc.strerror}") from exc


def volume_bytes(vol: CtVolume) -> bytes:
    return encode_header(vol.grid, "int16le") + vol.values.astype("<i2", copy=False).tobytes()


def read_volume(path: PathLike) -> CtVolume:
    grid, dtype, arr = decode(_read_bytes(path), path)
    if dtype != "int16le":
        raise FormatError("dtype", f"volume must be int16le, got {dtype}", path)
    if arr.size and (arr.min() < HU_MIN or arr.max() > HU_MAX):
        raise FormatError("payload", f"values outside [{HU_MIN}, {HU_MAX}]", path)
    return CtVolume(grid, arr.astype(np.int16))


def write_volume(vol: CtVolume, path: PathLike) -> None:
    _write_bytes(
        path, encode_header(vol.grid, "int16le"), vol.values.astype("<i2", copy=False).tobytes()
    )


def read_mask(path: PathLike) -> BinaryMask:
    grid, dtype, arr = decode(_read_bytes(path), path)
    if dtype != "uint8":
        raise FormatError("dtype", f"mask must be uint8, got {dtype}", path)
    if arr.size and arr.max() > 1:
        raise FormatError("payload", "mask bytes must be 0 or 1", path)
    return BinaryMask(grid, arr.astype(bool))


def write_mask(mask: BinaryMask, path: PathLike) -> None:
    _write_bytes(path, encode_header(mask.grid, "uint8"), mask.bits.astype(np.uint8).tobytes())


def read_atlas(directory: PathLike) -> TemplateAtlas:
    """Load the templates listed in ``<directory>/atlas.txt`` in manifest order."""
    directory = Path(directory)
    manifest = directory / ATLAS_MANIFEST
    if not manifest.is_file():
        raise AtlasFormatError("manifest", "missing atlas.txt", directory)
    templates = []
    seen = set()
    with open(manifest, "r", encoding="ascii") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            where = f"{manifest}:{lineno}"
            if len(parts) != 4:
                raise AtlasFormatError("manifest", f"expected 4 fields, got {len(parts)}", where)
            tid, st_text, cc_text, mask_file = parts
            if tid in seen:
                raise AtlasFormatError("id", f"duplicate template id {tid!r}", where)
            seen.add(tid)
            try:
                st = LiverShapeType.parse(st_text)
            except AtlasError as exc:
                raise AtlasFormatError("shape_type", str(exc), where) from None
            try:
                cc = float(cc_text)
            except ValueError:
                raise AtlasFormatError("cc_extent_mm", f"bad number {cc_text!r}", where) from None
            try:
                mask = read_mask(directory / mask_file)
            except FormatError as exc:
                raise AtlasFormatError(exc.field, str(exc), where) from None
            if mask.grid.spacing_mm != CANONICAL_SPACING_MM:
                raise AtlasFormatError(
                    "spacing",
                    f"{mask_file} has spacing {mask.grid.spacing_mm}, atlas canonical is "
                    f"{CANONICAL_SPACING_MM}",
                    where,
                )
            try:
                templates.append(LiverTemplate(tid, st, mask, cc))
            except AtlasError as exc:
                raise AtlasFormatError("template", str(exc), where) from None
    return TemplateAtlas(tuple(templates))


def write_atlas(atlas: TemplateAtlas, directory: PathLike) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = ["# id shape_type cc_extent_mm mask_file"]
    for t in atlas:
        fname = f"{t.id}.mask.mvol"
        write_mask(t.mask, directory / fname)
        lines.append(f"{t.id} {t.shape_type.name} {_fmt(t.cc_extent_mm)} {fname}")
    (directory / ATLAS_MANIFEST).write_text("\n".join(lines) + "\n", encoding="ascii")


__all__ = [
    "FormatError",
    "AtlasFormatError",
    "InvalidArgumentError",
    "read_volume",
    "write_volume",
    "read_mask",
    "write_mask",
    "read_atlas",
    "write_atlas",
    "volume_bytes",
    "decode",
    "encode_header",
]
