"""File formats: DSV1 grids, checkpoint containers, manifests and CSV reports.

DSV1 layout (little-endian)::

    b"DSV1" | u8 dtype | u32 dz, dy, dx | f32 sz, sy, sx | payload (z-major)

dtype 1 is a float32 volume, 2 a uint8 mask, 3 a float32 distance map.
Volume and distance values are stored at float32 precision.

Every writer goes through :func:`atomic_write`: bytes land in a temporary
file in the target directory which is then renamed over the destination.
"""
from __future__ import annotations

import csv
import io
import os
import struct
import tempfile
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Sequence, Tuple, Union

import numpy as np

from .errors import FormatError, TruncatedFile
from .grid import Mask, Volume
from .sdt import DEFAULT_CAP_MM, DistanceMap

MAGIC = b"DSV1"
HEADER = struct.Struct("<4sB3I3f")
DTYPE_VOLUME, DTYPE_MASK, DTYPE_DISTANCE = 1, 2, 3
_PAYLOAD = {DTYPE_VOLUME: "<f4", DTYPE_MASK: "u1", DTYPE_DISTANCE: "<f4"}
_KIND = {DTYPE_VOLUME: Volume, DTYPE_MASK: Mask, DTYPE_DISTANCE: DistanceMap}

CKPT_MAGIC = b"DSVC"
CKPT_TEXT, CKPT_F64 = 0, 4

PathLike = Union[str, os.PathLike]


def atomic_write(path: PathLike, data: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _code_for(obj) -> int:
    if isinstance(obj, DistanceMap):
        return DTYPE_DISTANCE
    if isinstance(obj, Mask):
        return DTYPE_MASK
    if isinstance(obj, Volume):
        return DTYPE_VOLUME
    raise TypeError(f"cannot serialise {type(obj).__name__} as DSV1")


def dsv1_bytes(obj) -> bytes:
    code = _code_for(obj)
    head = HEADER.pack(MAGIC, code, *obj.dims, *obj.spacing)
    return head + np.ascontiguousarray(obj.data, dtype=_PAYLOAD[code]).tobytes()


def write_dsv1(obj, path: PathLike) -> Path:
    return atomic_write(path, dsv1_bytes(obj))


def parse_dsv1(buf: bytes, expect=None, cap: float = DEFAULT_CAP_MM):
    if len(buf) < HEADER.size:
        raise TruncatedFile(f"header needs {HEADER.size} bytes, got {len(buf)}")
    magic, code, dz, dy, dx, sz, sy, sx = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if code not in _PAYLOAD:
        raise FormatError(f"unknown dtype code {code}")
    kind = _KIND[code]
    if expect is not None and kind is not expect:
        raise TypeError(f"file holds a {kind.__name__}, expected {expect.__name__}")
    count = dz * dy * dx
    dtype = np.dtype(_PAYLOAD[code])
    need = HEADER.size + count * dtype.itemsize
    if len(buf) < need:
        raise TruncatedFile(f"payload needs {need} bytes, got {len(buf)}")
    if len(buf) > need:
        raise FormatError(f"{len(buf) - need} trailing bytes after payload")
    data = np.frombuffer(buf, dtype=dtype, count=count, offset=HEADER.size).reshape(dz, dy, dx)
    spacing = (sz, sy, sx)
    if code == DTYPE_VOLUME:
        return Volume(data.astype(np.float32), spacing)
    if code == DTYPE_MASK:
        return Mask(data.astype(np.uint8), spacing)
    return DistanceMap(data.astype(np.float32), spacing, max(cap, float(np.abs(data).max(initial=0.0))))


def read_dsv1(path: PathLike, expect=None, cap: float = DEFAULT_CAP_MM):
    """Read a DSV1 file; ``expect`` (Volume, Mask or DistanceMap) enforces the stored kind."""
    return parse_dsv1(Path(path).read_bytes(), expect, cap)


# --- checkpoints -----------------------------------------------------------

def checkpoint_bytes(tensors: Mapping[str, np.ndarray], texts: Mapping[str, str] = None) -> bytes:
    """Named-tensor table: per entry a DSV1-style header followed by its payload.

    Layout: ``b"DSVC" | u32 count`` then per entry
    ``u16 name_len | name | u8 dtype | u8 ndim | u32 dims[ndim] | payload``.
    Text entries (dtype 0) hold UTF-8 bytes with a single dim (byte length).
    """
    texts = texts or {}
    out = io.BytesIO()
    out.write(CKPT_MAGIC + struct.pack("<I", len(tensors) + len(texts)))
    for name, text in texts.items():
        raw = text.encode("utf-8")
        key = name.encode("utf-8")
        out.write(struct.pack("<H", len(key)) + key + struct.pack("<BBI", CKPT_TEXT, 1, len(raw)) + raw)
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        key = name.encode("utf-8")
        out.write(struct.pack("<H", len(key)) + key + struct.pack("<BB", CKPT_F64, arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(arr.tobytes())
    return out.getvalue()


def parse_checkpoint(buf: bytes) -> Tuple[Dict[str, np.ndarray], Dict[str, str]]:
    if buf[:4] != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {buf[:4]!r}")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise TruncatedFile("checkpoint ends inside an entry")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    tensors, texts = {}, {}
    for _ in range(count):
        (klen,) = struct.unpack("<H", take(2))
        name = take(klen).decode("utf-8")
        code, ndim = struct.unpack("<BB", take(2))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        if code == CKPT_TEXT:
            texts[name] = take(dims[0]).decode("utf-8")
        elif code == CKPT_F64:
            n = int(np.prod(dims)) if ndim else 1
            tensors[name] = np.frombuffer(take(8 * n), dtype="<f8").reshape(dims).astype(np.float64)
        else:
            raise FormatError(f"unknown checkpoint dtype {code} for {name}")
    if pos != len(buf):
        raise FormatError("trailing bytes after checkpoint entries")
    return tensors, texts


def save_checkpoint(net, path: PathLike, meta: Mapping[str, str] = None) -> Path:
    from .nn.network import config_dict

    cfg_text = "\n".join(f"{k} = {v}" for k, v in config_dict(net.cfg).items())
    texts = {"__config__": cfg_text}
    if meta:
        texts["__meta__"] = "\n".join(f"{k} = {v}" for k, v in meta.items())
    return atomic_write(path, checkpoint_bytes(net.params, texts))


def load_checkpoint(path: PathLike):
    from .nn.network import Network, NetworkConfig

    tensors, texts = parse_checkpoint(Path(path).read_bytes())
    if "__config__" not in texts:
        raise FormatError("checkpoint lacks a network config entry")
    types = {f.name: f.type for f in fields(NetworkConfig)}
    kwargs = {}
    for line in texts["__config__"].splitlines():
        key, _, value = (s.strip() for s in line.partition("="))
        caster = float if types.get(key) in (float, "float") else int
        kwargs[key] = caster(value)
    net = Network(NetworkConfig(**kwargs))
    net.load_params(tensors)
    return net


# --- manifests and reports ---------------------------------------------------

MANIFEST_HEADER = ("case_id", "domain", "volume_path", "organ_path", "lesion_path")


@dataclass(frozen=True)
class ManifestRow:
    case_id: str
    domain: str
    volume_path: str
    organ_path: str
    lesion_path: str


def csv_bytes(header: Sequence[str], rows: Iterable[Sequence]) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue().encode("utf-8")


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def write_csv(path: PathLike, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    return atomic_write(path, csv_bytes(header, rows))


def read_csv(path: PathLike) -> List[Dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def write_manifest(rows: Sequence[ManifestRow], path: PathLike) -> Path:
    return write_csv(path, MANIFEST_HEADER, [tuple(getattr(r, h) for h in MANIFEST_HEADER) for r in rows])


def read_manifest(path: PathLike) -> List[ManifestRow]:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_HEADER:
            raise FormatError(f"manifest header must be {','.join(MANIFEST_HEADER)}")
        return [ManifestRow(**row) for row in reader]


def resolve(manifest_path: PathLike, rel: str) -> Path:
    p = Path(rel)
    return p if p.is_absolute() else Path(manifest_path).parent / p
