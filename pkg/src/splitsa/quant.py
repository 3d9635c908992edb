"""Post-training INT8 affine quantization with selectable channel grouping.

Values are quantized as ``q = clamp(round(x / scale) + zero_point, -128, 127)``
(round half to even) and restored as ``scale * (q - zero_point)``. The last
tensor axis is the channel axis. A *partition* is a list of contiguous
``(start, stop)`` channel spans, one (scale, zero_point) pair per span.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .errors import ArgumentError, ConfigurationError, ParseError

QMIN, QMAX = -128, 127
DEFAULT_BINS = 2048
DEFAULT_EPSILON = 1e-10

TENSOR_MAGIC = b"PSTN"


# -- tensor file format ----------------------------------------------------------

def save_tensor(t) -> bytes:
    """``PSTN``, u32 rank, u32 dims, little-endian f32 payload."""
    arr = np.ascontiguousarray(t, dtype="<f4")
    head = TENSOR_MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    return head + arr.tobytes()


def load_tensor(data: bytes) -> np.ndarray:
    if data[:4] != TENSOR_MAGIC:
        raise ParseError("bad tensor magic", 0, kind="offset")
    if len(data) < 8:
        raise ParseError("truncated tensor header", len(data), kind="offset")
    (rank,) = struct.unpack_from("<I", data, 4)
    off = 8 + 4 * rank
    if len(data) < off:
        raise ParseError("truncated tensor dims", len(data), kind="offset")
    dims = struct.unpack_from(f"<{rank}I", data, 8)
    count = int(np.prod(dims)) if rank else 1
    if len(data) != off + 4 * count:
        raise ParseError(f"expected {off + 4 * count} bytes, got {len(data)}", len(data),
                         kind="offset")
    arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(dims)
    return arr.astype(np.float32)


# -- statistics --------------------------------------------------------------------

@dataclass
class TensorStats:
    channel_min: np.ndarray
    channel_max: np.ndarray
    min: float
    max: float
    hist: np.ndarray         # (C, B) counts
    edges: np.ndarray        # (C, B + 1)
    count: int               # samples per channel

    @property
    def channels(self) -> int:
        return len(self.channel_min)

    @property
    def bins(self) -> int:
        return self.hist.shape[1]


def _as_channels(t) -> np.ndarray:
    arr = np.asarray(t, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    return arr.reshape(-1, arr.shape[-1])


def calibrate(samples: Sequence, bins: int = DEFAULT_BINS, shared_range: bool = False) -> TensorStats:
    """Min/max and histograms over a set of calibration tensors.

    Histograms span each channel's own range unless ``shared_range`` is set,
    in which case every channel is binned over the whole-tensor range (needed
    to compare channels with :func:`kl_matrix`).
    """
    if not len(samples):
        raise ArgumentError("calibration needs at least one sample")
    if bins < 1:
        raise ArgumentError("bins must be >= 1")
    shape = np.shape(samples[0])
    for s in samples[1:]:
        if np.shape(s) != shape:
            raise ArgumentError(f"sample shapes differ: {shape} vs {np.shape(s)}")
    x = np.concatenate([_as_channels(s) for s in samples])
    if not np.isfinite(x).all():
        raise ArgumentError("calibration samples must be finite")
    cmin, cmax = x.min(axis=0), x.max(axis=0)
    c = x.shape[1]
    hist = np.empty((c, bins), dtype=np.int64)
    edges = np.empty((c, bins + 1))
    for ch in range(c):
        lo, hi = (x.min(), x.max()) if shared_range else (cmin[ch], cmax[ch])
        if hi <= lo:
            lo, hi = lo - 0.5, hi + 0.5
        h, e = np.histogram(x[:, ch], bins=bins, range=(lo, hi))
        hist[ch], edges[ch] = h, e
    return TensorStats(cmin, cmax, float(cmin.min()), float(cmax.max()), hist, edges, len(x))


# -- parameters --------------------------------------------------------------------

@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int

    def __post_init__(self):
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ArgumentError(f"scale must be positive and finite, got {self.scale}")
        if not QMIN <= self.zero_point <= QMAX:
            raise ArgumentError(f"zero_point {self.zero_point} outside int8 range")

    @property
    def low(self) -> float:
        return self.scale * (QMIN - self.zero_point)

    @property
    def high(self) -> float:
        return self.scale * (QMAX - self.zero_point)

    def to_dict(self):
        return {"scale": self.scale, "zero_point": self.zero_point}


def derive_params(lo: float, hi: float) -> QuantParams:
    """Asymmetric int8 parameters for the range ``[lo, hi]`` widened to contain 0."""
    if not (math.isfinite(lo) and math.isfinite(hi)):
        raise ArgumentError("range bounds must be finite")
    if lo > hi:
        raise ArgumentError(f"min {lo} > max {hi}")
    lo, hi = min(float(lo), 0.0), max(float(hi), 0.0)
    scale = (hi - lo) / (QMAX - QMIN)
    if scale < np.finfo(np.float64).tiny:
        # empty or subnormal range: everything rounds to the zero point anyway
        return QuantParams(1.0, 0)
    zp = int(np.rint(QMIN - lo / scale))
    # an integer zero point keeps real 0 exact; clamping is the only nudge needed
    return QuantParams(scale, min(max(zp, QMIN), QMAX))


# -- granularity ----------------------------------------------------------------------

ROLES = ("coords", "classification", "regression", "features")


@dataclass(frozen=True)
class RoleGroup:
    name: str
    channels: int
    role: str
    parts: tuple = ()        # (head name, channel count) sub-blocks, informational

    def __post_init__(self):
        if self.channels < 1:
            raise ArgumentError(f"group {self.name!r} needs >= 1 channel")
        if self.role not in ROLES:
            raise ArgumentError(f"unknown role {self.role!r}")


@dataclass(frozen=True)
class RoleLayout:
    groups: tuple

    @property
    def total(self) -> int:
        return sum(g.channels for g in self.groups)

    def sizes(self):
        return [g.channels for g in self.groups]

    def to_dict(self):
        return {"channels": self.total,
                "groups": [{"name": g.name, "channels": g.channels, "role": g.role,
                            "parts": [list(p) for p in g.parts]} for g in self.groups]}


DATASETS = {
    "sunrgbd": {"classes": 10, "heading_bins": 12},
    "scannet": {"classes": 18, "heading_bins": 1},
}


def role_layout(module: str, dataset: str = "sunrgbd") -> RoleLayout:
    """Channel roles of the last layer of the voting or proposal module."""
    if module == "voting":
        return RoleLayout((RoleGroup("xyz", 3, "coords"),
                           RoleGroup("features", 256, "features")))
    if module != "proposal":
        raise ArgumentError(f"unknown module {module!r}")
    try:
        ds = DATASETS[dataset]
    except KeyError:
        raise ArgumentError(f"unknown dataset {dataset!r}") from None
    nc, nh = ds["classes"], ds["heading_bins"]
    cls_parts = (("objectness", 2), ("heading_cls", nh), ("size_cls", nc), ("sem_cls", nc))
    reg_parts = (("heading_reg", nh), ("size_reg", 3 * nc))
    return RoleLayout((
        RoleGroup("center", 3, "coords", (("center", 3),)),
        RoleGroup("classification", sum(n for _, n in cls_parts), "classification", cls_parts),
        RoleGroup("regression", sum(n for _, n in reg_parts), "regression", reg_parts),
    ))


@dataclass(frozen=True)
class Layer:
    pass


@dataclass(frozen=True)
class EvenGroups:
    n: int


@dataclass(frozen=True)
class Channel:
    pass


@dataclass(frozen=True)
class RoleGroups:
    layout: RoleLayout


Granularity = Union[Layer, EvenGroups, Channel, RoleGroups]


def partition_channels(layer_channels: int, g: Granularity) -> list:
    """Split ``range(layer_channels)`` into contiguous spans for granularity ``g``."""
    c = int(layer_channels)
    if c < 1:
        raise ArgumentError("a layer needs at least one channel")
    if isinstance(g, Layer):
        return [(0, c)]
    if isinstance(g, Channel):
        return [(i, i + 1) for i in range(c)]
    if isinstance(g, EvenGroups):
        if not 1 <= g.n <= c:
            raise ConfigurationError(f"cannot split {c} channels into {g.n} groups")
        big, extra = divmod(c, g.n)
        spans, start = [], 0
        for i in range(g.n):
            size = big + (1 if i < extra else 0)
            spans.append((start, start + size))
            start += size
        return spans
    if isinstance(g, RoleGroups):
        if g.layout.total != c:
            raise ConfigurationError(f"layout covers {g.layout.total} channels, layer has {c}")
        spans, start = [], 0
        for size in g.layout.sizes():
            spans.append((start, start + size))
            start += size
        return spans
    raise ArgumentError(f"unknown granularity {g!r}")


def _check_partition(c: int, partition):
    pos = 0
    for start, stop in partition:
        if start != pos or stop <= start:
            raise ConfigurationError(f"partition has a gap or overlap at channel {pos}")
        pos = stop
    if pos != c:
        raise ConfigurationError(f"partition covers {pos} of {c} channels")


def parse_granularity(text: str, layout: RoleLayout | None = None) -> Granularity:
    """``layer``, ``channel``, ``group:N`` or ``role`` (needs ``layout``)."""
    if text == "layer":
        return Layer()
    if text == "channel":
        return Channel()
    if text.startswith("group:"):
        try:
            return EvenGroups(int(text.split(":", 1)[1]))
        except ValueError:
            raise ArgumentError(f"bad group count in {text!r}") from None
    if text == "role":
        if layout is None:
            raise ArgumentError("role granularity needs a layout")
        return RoleGroups(layout)
    raise ArgumentError(f"unknown granularity {text!r}")


# -- quantize / dequantize ----------------------------------------------------------

@dataclass
class QuantizedTensor:
    values: np.ndarray       # int8
    shape: tuple
    params: list
    partition: list


def quantize(t, partition, params) -> QuantizedTensor:
    x = np.asarray(t, dtype=np.float64)
    c = x.shape[-1] if x.ndim else 1
    _check_partition(c, partition)
    if len(params) != len(partition):
        raise ConfigurationError(f"{len(params)} parameter sets for {len(partition)} groups")
    q = np.empty(x.shape, dtype=np.int8)
    xv = x.reshape(-1, c)
    qv = q.reshape(-1, c)
    for (start, stop), p in zip(partition, params):
        v = np.rint(xv[:, start:stop] / p.scale) + p.zero_point
        qv[:, start:stop] = np.clip(v, QMIN, QMAX).astype(np.int8)
    return QuantizedTensor(q, x.shape, list(params), list(partition))


def dequantize(q: QuantizedTensor) -> np.ndarray:
    c = q.shape[-1] if q.shape else 1
    out = np.empty(q.values.shape, dtype=np.float64)
    qv = q.values.reshape(-1, c).astype(np.float64)
    ov = out.reshape(-1, c)
    for (start, stop), p in zip(q.partition, q.params):
        ov[:, start:stop] = p.scale * (qv[:, start:stop] - p.zero_point)
    return out.reshape(q.shape)


def params_for(t, partition) -> list:
    """Parameters per group from the tensor's own per-group min/max."""
    x = _as_channels(t)
    return [derive_params(float(x[:, a:b].min()), float(x[:, a:b].max())) for a, b in partition]


def params_from_stats(stats: TensorStats, partition) -> list:
    return [derive_params(float(stats.channel_min[a:b].min()), float(stats.channel_max[a:b].max()))
            for a, b in partition]


def quantize_with(t, g: Granularity) -> QuantizedTensor:
    c = np.shape(t)[-1]
    part = partition_channels(c, g)
    return quantize(t, part, params_for(t, part))


def clamp_to_params(t, q: QuantizedTensor) -> np.ndarray:
    """Clip each element to the representable range of its owning group."""
    x = np.array(t, dtype=np.float64)
    c = x.shape[-1]
    xv = x.reshape(-1, c)
    for (a, b), p in zip(q.partition, q.params):
        xv[:, a:b] = np.clip(xv[:, a:b], p.low, p.high)
    return x


def quant_error(t, g: Granularity) -> dict:
    """MSE and max-abs error of a quantize/dequantize round trip at granularity ``g``."""
    x = np.asarray(t, dtype=np.float64)
    err = dequantize(quantize_with(x, g)) - x
    return {"mse": float(np.mean(err ** 2)), "max_abs": float(np.max(np.abs(err)))}


# -- parameter counting ---------------------------------------------------------------

def count_quant_params(layers, g) -> int:
    """Scale and zero-point per group, per quantized quantity, summed over layers.

    ``layers`` holds ``(channels, quantities)`` pairs (weights and activations
    give 2 quantities). ``g`` is one granularity for every layer or a list with
    one per layer.
    """
    layers = list(layers)
    grans = list(g) if isinstance(g, (list, tuple)) else [g] * len(layers)
    if len(grans) != len(layers):
        raise ArgumentError("one granularity per layer required")
    total = 0
    for (channels, quantities), gran in zip(layers, grans):
        total += 2 * quantities * len(partition_channels(channels, gran))
    return total


def head_layers(dataset: str = "sunrgbd"):
    """The voting and proposal output layers as ``(name, layout)`` pairs."""
    return [("voting", role_layout("voting", dataset)),
            ("proposal", role_layout("proposal", dataset))]


def head_granularities(kind: str, dataset: str = "sunrgbd"):
    """Per-layer granularities for the voting and proposal layers.

    ``group`` without a count uses 2 equal groups for voting and 3 for
    proposal, matching the role-group counts.
    """
    out = []
    for name, layout in head_layers(dataset):
        if kind == "group":
            out.append(EvenGroups(len(layout.groups)))
        else:
            out.append(parse_granularity(kind, layout))
    return out


def head_param_count(kind: str, dataset: str = "sunrgbd", quantities: int = 2) -> int:
    layers = [(layout.total, quantities) for _, layout in head_layers(dataset)]
    return count_quant_params(layers, head_granularities(kind, dataset))


# -- KL analysis -------------------------------------------------------------------

def kl_matrix(stats: TensorStats, epsilon: float = DEFAULT_EPSILON) -> np.ndarray:
    """Pairwise KL divergence between channel histograms.

    Entry ``(i, j)`` is ``KL(p_i || p_j)`` with ``epsilon``-smoothed,
    renormalized bin probabilities. All channels must share one binning.
    """
    hist = np.asarray(stats.hist, dtype=np.float64)
    edges = np.asarray(stats.edges)
    if hist.ndim != 2 or edges.shape != (hist.shape[0], hist.shape[1] + 1):
        raise ArgumentError("histograms must share a bin count")
    if not np.all(edges == edges[0]):
        raise ArgumentError("histograms must share bin edges (calibrate with shared_range=True)")
    p = hist + epsilon
    p /= p.sum(axis=1, keepdims=True)
    logp = np.log(p)
    kl = np.empty((len(p), len(p)))
    # row at a time keeps memory at C x B; identical rows give an exact 0
    for i in range(len(p)):
        kl[i] = ((logp[i] - logp) * p[i]).sum(axis=1)
    np.fill_diagonal(kl, 0.0)
    return np.maximum(kl, 0.0)


def block_contrast(kl, sizes) -> dict:
    """Mean off-diagonal KL inside the diagonal blocks versus across blocks."""
    kl = np.asarray(kl)
    labels = np.repeat(np.arange(len(sizes)), sizes)
    if len(labels) != len(kl):
        raise ArgumentError(f"block sizes sum to {len(labels)}, matrix is {len(kl)}")
    same = labels[:, None] == labels[None, :]
    offdiag = ~np.eye(len(kl), dtype=bool)
    within = kl[same & offdiag]
    cross = kl[~same]
    return {"within": float(within.mean()) if within.size else 0.0,
            "cross": float(cross.mean()) if cross.size else 0.0}
