"""Point clouds with per-point semantic labels.

Two on-disk formats are supported:

text
    One point per line, whitespace separated ``x y z [class]``. Lines starting
    with ``#`` are comments. A header comment of the form
    ``# pspc-text features=F num_classes=K`` switches the reader to
    ``x y z f1 .. fF class`` records; :func:`save_cloud` always writes it.
binary
    ``PSPC`` magic, u32 version (=1), u32 point count N, u32 feature width F,
    u8 has_labels, N*(3+F) little-endian f32 (interleaved per point), then N
    little-endian u16 class ids if has_labels.
"""

from __future__ import annotations

import io
import re
import struct
from dataclasses import dataclass
from typing import BinaryIO, Union

import numpy as np

from .errors import ArgumentError, ParseError

MAGIC = b"PSPC"
VERSION = 1
_HEADER = struct.Struct("<4sIIIB")
_TEXT_PRAGMA = re.compile(r"#\s*pspc-text\b(.*)")

ByteSource = Union[bytes, bytearray, memoryview, BinaryIO]


def _frozen(arr):
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Ordered points (float32, shape ``(N, 3)``) and optional features ``(N, F)``."""

    xyz: np.ndarray
    features: np.ndarray = None

    def __post_init__(self):
        xyz = np.asarray(self.xyz, dtype=np.float32).reshape(-1, 3)
        if not np.isfinite(xyz).all():
            raise ArgumentError("point coordinates must be finite")
        feats = self.features
        if feats is None:
            feats = np.zeros((len(xyz), 0), dtype=np.float32)
        feats = np.asarray(feats, dtype=np.float32)
        if feats.ndim == 1:
            feats = feats.reshape(len(xyz), -1) if len(xyz) else feats.reshape(0, 0)
        if feats.shape[0] != len(xyz):
            raise ArgumentError(
                f"feature rows ({feats.shape[0]}) != point count ({len(xyz)})")
        object.__setattr__(self, "xyz", _frozen(xyz))
        object.__setattr__(self, "features", _frozen(feats))

    def __len__(self):
        return len(self.xyz)

    @property
    def feature_width(self) -> int:
        return self.features.shape[1]

    def __eq__(self, other):
        if not isinstance(other, PointCloud):
            return NotImplemented
        return (self.xyz.shape == other.xyz.shape
                and self.features.shape == other.features.shape
                and self.xyz.tobytes() == other.xyz.tobytes()
                and self.features.tobytes() == other.features.tobytes())

    __hash__ = None


@dataclass(frozen=True, eq=False)
class SemanticMask:
    """Row-major grid of class ids; 0 is background."""

    width: int
    height: int
    labels: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.width < 0 or self.height < 0:
            raise ArgumentError("mask dimensions must be non-negative")
        if labels.size != self.width * self.height:
            raise ArgumentError(
                f"mask has {labels.size} labels, expected {self.width}x{self.height}")
        if (labels < 0).any():
            raise ArgumentError("mask labels must be non-negative")
        object.__setattr__(self, "labels", _frozen(labels.reshape(self.height, self.width)))

    def at(self, u: int, v: int) -> int:
        return int(self.labels[v, u])


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera with a world-to-camera rigid transform."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: tuple = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
    translation: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ArgumentError("focal lengths must be positive")
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if r.shape != (3, 3) or t.shape != (3,):
            raise ArgumentError("rotation must be 3x3 and translation a 3-vector")
        if not np.allclose(r @ r.T, np.eye(3), rtol=0, atol=1e-6):
            raise ArgumentError("rotation is not orthonormal")
        object.__setattr__(self, "rotation", tuple(map(tuple, r.tolist())))
        object.__setattr__(self, "translation", tuple(t.tolist()))

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"],
                   rotation=d.get("rotation", cls.rotation),
                   translation=d.get("translation", cls.translation))


@dataclass(frozen=True, eq=False)
class PaintedPointCloud:
    """A point cloud whose points carry a semantic class id (0 = background)."""

    cloud: PointCloud
    classes: np.ndarray = None
    num_classes: int = None

    def __post_init__(self):
        n = len(self.cloud)
        classes = self.classes
        if classes is None:
            classes = np.zeros(n, dtype=np.int64)
        classes = np.asarray(classes, dtype=np.int64).reshape(-1)
        if classes.size != n:
            raise ArgumentError(f"{classes.size} class ids for {n} points")
        if (classes < 0).any():
            raise ArgumentError("class ids must be non-negative")
        k = self.num_classes
        if k is None:
            k = int(classes.max()) + 1 if n else 1
        if n and classes.max() >= k:
            raise ArgumentError(f"class id {classes.max()} >= num_classes {k}")
        object.__setattr__(self, "classes", _frozen(classes))
        object.__setattr__(self, "num_classes", int(k))

    def __len__(self):
        return len(self.cloud)

    @property
    def xyz(self):
        return self.cloud.xyz

    @property
    def features(self):
        return self.cloud.features

    def __eq__(self, other):
        if not isinstance(other, PaintedPointCloud):
            return NotImplemented
        return (self.cloud == other.cloud
                and np.array_equal(self.classes, other.classes)
                and self.num_classes == other.num_classes)

    __hash__ = None


def foreground_indices(p: PaintedPointCloud) -> np.ndarray:
    """Indices of points with a nonzero class, ascending."""
    return np.flatnonzero(p.classes > 0)


def paint_points(cloud: PointCloud, mask: SemanticMask, cam: CameraModel) -> PaintedPointCloud:
    """Label every point with the mask pixel it projects onto.

    Points at or behind the image plane (Z <= 0) and points that fall outside
    the mask after nearest-pixel rounding (round half up) get class 0.
    """
    r = np.asarray(cam.rotation)
    t = np.asarray(cam.translation)
    pc = cloud.xyz.astype(np.float64) @ r.T + t
    z = pc[:, 2]
    classes = np.zeros(len(cloud), dtype=np.int64)
    front = z > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.fx * pc[:, 0] / z + cam.cx
        v = cam.fy * pc[:, 1] / z + cam.cy
    ui = np.floor(np.where(front, u, -1.0) + 0.5)
    vi = np.floor(np.where(front, v, -1.0) + 0.5)
    inside = front & (ui >= 0) & (ui < mask.width) & (vi >= 0) & (vi < mask.height)
    idx = np.flatnonzero(inside)
    classes[idx] = mask.labels[vi[idx].astype(np.int64), ui[idx].astype(np.int64)]
    k = max(int(mask.labels.max()) + 1 if mask.labels.size else 1, 1)
    return PaintedPointCloud(cloud, classes, num_classes=k)


# -- serialization -------------------------------------------------------------

def _read_all(source: ByteSource) -> bytes:
    if isinstance(source, (bytes, bytearray, memoryview)):
        return bytes(source)
    return source.read()


def _float32_text(x) -> str:
    # repr of the widened double parses back to exactly this float32
    return repr(float(x))


def save_cloud(p: PaintedPointCloud, format: str = "binary") -> bytes:
    """Serialize a painted cloud; ``load_cloud`` inverts this bit-exactly."""
    if isinstance(p, PointCloud):
        p = PaintedPointCloud(p)
    if format == "binary":
        n, f = len(p), p.cloud.feature_width
        out = io.BytesIO()
        out.write(_HEADER.pack(MAGIC, VERSION, n, f, 1))
        block = np.concatenate([p.xyz, p.features], axis=1).astype("<f4")
        out.write(block.tobytes())
        if n and p.classes.max() > 0xFFFF:
            raise ArgumentError("class ids must fit in 16 bits")
        out.write(p.classes.astype("<u2").tobytes())
        return out.getvalue()
    if format == "text":
        f = p.cloud.feature_width
        lines = [f"# pspc-text features={f} num_classes={p.num_classes}"]
        for row, feat, c in zip(p.xyz, p.features, p.classes):
            vals = [_float32_text(v) for v in row] + [_float32_text(v) for v in feat]
            vals.append(str(int(c)))
            lines.append(" ".join(vals))
        return ("\n".join(lines) + "\n").encode("ascii")
    raise ArgumentError(f"unknown cloud format {format!r}")


def detect_format(data: bytes) -> str:
    return "binary" if data[:4] == MAGIC else "text"


def load_cloud(source: ByteSource, format: str = "auto") -> PaintedPointCloud:
    """Parse a cloud from bytes or a binary file object.

    Raises
    ------
    ParseError
        On malformed records, inconsistent column counts or non-finite
        coordinates. The error carries the offending line or byte offset.
    """
    data = _read_all(source)
    if format == "auto":
        format = detect_format(data)
    if format == "binary":
        return _load_binary(data)
    if format == "text":
        return _load_text(data)
    raise ArgumentError(f"unknown cloud format {format!r}")


def _load_binary(data: bytes) -> PaintedPointCloud:
    if len(data) < _HEADER.size:
        raise ParseError("truncated header", 0, kind="offset")
    magic, version, n, f, has_labels = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise ParseError(f"bad magic {magic!r}", 0, kind="offset")
    if version != VERSION:
        raise ParseError(f"unsupported version {version}", 4, kind="offset")
    if has_labels not in (0, 1):
        raise ParseError(f"has_labels must be 0 or 1, got {has_labels}", 16, kind="offset")
    off = _HEADER.size
    nfloat = n * (3 + f)
    need = off + 4 * nfloat + (2 * n if has_labels else 0)
    if len(data) != need:
        raise ParseError(f"expected {need} bytes, got {len(data)}", min(len(data), need),
                         kind="offset")
    block = np.frombuffer(data, dtype="<f4", count=nfloat, offset=off).reshape(n, 3 + f)
    xyz = block[:, :3].astype(np.float32)
    bad = np.flatnonzero(~np.isfinite(xyz).all(axis=1))
    if bad.size:
        raise ParseError("non-finite coordinate", off + int(bad[0]) * 4 * (3 + f),
                         kind="offset")
    classes = None
    if has_labels:
        classes = np.frombuffer(data, dtype="<u2", count=n, offset=off + 4 * nfloat)
    cloud = PointCloud(xyz, block[:, 3:].astype(np.float32))
    return PaintedPointCloud(cloud, classes)


def _load_text(data: bytes) -> PaintedPointCloud:
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(f"not UTF-8 text ({exc.reason})", exc.start, kind="offset") from None
    width = None            # feature width from the pragma, if any
    num_classes = None
    ncols = None
    rows, labels = [], []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            m = _TEXT_PRAGMA.match(line)
            if m and not rows:
                opts = dict(kv.split("=", 1) for kv in m.group(1).split() if "=" in kv)
                try:
                    width = int(opts.get("features", 0))
                    if "num_classes" in opts:
                        num_classes = int(opts["num_classes"])
                except ValueError:
                    raise ParseError("bad pspc-text header", lineno) from None
            continue
        parts = line.split()
        if ncols is None:
            ncols = len(parts)
            allowed = (3 + width + 1,) if width is not None else (3, 4)
            if ncols not in allowed:
                raise ParseError(f"expected {' or '.join(map(str, allowed))} columns, "
                                 f"got {ncols}", lineno)
        elif len(parts) != ncols:
            raise ParseError(f"expected {ncols} columns, got {len(parts)}", lineno)
        try:
            vals = [np.float32(float(s)) for s in parts[:3 + (width or 0)]]
        except ValueError:
            raise ParseError(f"malformed number in {line!r}", lineno) from None
        if not all(np.isfinite(vals[:3])):
            raise ParseError("non-finite coordinate", lineno)
        label = 0
        if ncols > 3 + (width or 0):
            try:
                label = int(parts[-1])
            except ValueError:
                raise ParseError(f"malformed class id {parts[-1]!r}", lineno) from None
            if not 0 <= label <= 0xFFFF:
                raise ParseError(f"class id {label} out of range", lineno)
        rows.append(vals)
        labels.append(label)
    w = width or 0
    arr = np.array(rows, dtype=np.float32).reshape(-1, 3 + w)
    cloud = PointCloud(arr[:, :3], arr[:, 3:])
    if num_classes is not None and labels and max(labels) >= num_classes:
        raise ParseError(f"class id {max(labels)} >= declared num_classes {num_classes}")
    return PaintedPointCloud(cloud, np.array(labels, dtype=np.int64), num_classes)
