"""Two-pipeline set-abstraction backbone and model-size accounting.

The backbone runs a plain-FPS pipeline and a biased-FPS pipeline side by side
through the first three set-abstraction (SA) layers with one shared set of
PointNet weights, then concatenates both centroid sets and runs the last SA
layer once on the union.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ArgumentError, ConfigurationError
from .pointcloud import PaintedPointCloud
from .sampling import BallQuerySpec, BiasSpec, ball_query, biased_fps, fps

BN_EPS = 1e-5


@dataclass(frozen=True)
class MlpSpec:
    """A stack of shared per-point fully connected layers."""

    input_width: int
    widths: tuple
    has_bias: bool = True
    has_batchnorm: bool = True

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        if not widths or min(widths) < 1 or self.input_width < 1:
            raise ArgumentError(f"layer widths must be >= 1, got {self.input_width} -> {widths}")
        object.__setattr__(self, "widths", widths)

    @property
    def output_width(self) -> int:
        return self.widths[-1]

    def layer_shapes(self):
        """Yield ``(fan_in, fan_out)`` per layer."""
        fan_in = self.input_width
        for w in self.widths:
            yield fan_in, w
            fan_in = w

    @classmethod
    def from_dict(cls, d: Mapping) -> "MlpSpec":
        return cls(int(d["input_width"]), tuple(d["widths"]),
                   bool(d.get("bias", True)), bool(d.get("batchnorm", True)))


@dataclass(frozen=True)
class SaLayerConfig:
    num_centroids: int
    radius: float
    k: int
    mlp: MlpSpec
    biased: bool = False

    def __post_init__(self):
        if self.num_centroids < 1:
            raise ArgumentError("num_centroids must be >= 1")
        if not self.radius > 0:
            raise ArgumentError("radius must be > 0")


@dataclass(frozen=True)
class BackboneConfig:
    sa_layers: tuple
    w0: float = 2.0
    fuse_before_layer: int = 4
    start_normal: int = 0
    start_bias: int = 0

    def __post_init__(self):
        layers = tuple(self.sa_layers)
        if len(layers) != 4:
            raise ConfigurationError(f"expected 4 SA layers, got {len(layers)}")
        if self.fuse_before_layer != 4:
            raise ConfigurationError("pipelines are fused before layer 4")
        for i in range(1, 4):
            prev, cur = layers[i - 1], layers[i]
            if cur.mlp.input_width != 3 + prev.mlp.output_width:
                raise ConfigurationError(
                    f"sa{i + 1} expects input width {cur.mlp.input_width}, "
                    f"previous layer emits 3 + {prev.mlp.output_width}")
        object.__setattr__(self, "sa_layers", layers)


def default_backbone_config(in_features: int, w0: float = 2.0,
                            biased_layers=(1, 2)) -> BackboneConfig:
    """Per-pipeline centroid counts 512/256/128, radii 0.2/0.4/0.8/1.2.

    ``in_features`` is the per-point feature width entering the first layer
    (see :func:`backbone_input_features`).
    """
    counts = (512, 256, 128, 128)
    radii = (0.2, 0.4, 0.8, 1.2)
    ks = (64, 32, 16, 16)
    widths = ((64, 64, 128), (128, 128, 256), (128, 128, 256), (128, 128, 256))
    layers = []
    prev = in_features
    for i in range(4):
        mlp = MlpSpec(3 + prev, widths[i])
        layers.append(SaLayerConfig(counts[i], radii[i], ks[i], mlp, biased=(i + 1) in biased_layers))
        prev = widths[i][-1]
    return BackboneConfig(tuple(layers), w0=w0)


def backbone_input_features(p: PaintedPointCloud) -> np.ndarray:
    """Point features plus a one-hot encoding of the painted class."""
    onehot = np.zeros((len(p), p.num_classes), dtype=np.float64)
    onehot[np.arange(len(p)), p.classes] = 1.0
    return np.concatenate([p.features.astype(np.float64), onehot], axis=1)


# -- weights -------------------------------------------------------------------

@dataclass
class WeightBundle:
    """Named weight tensors.

    Layer ``i`` of the MLP registered under ``prefix`` owns
    ``{prefix}.{i}.weight`` (fan_in x fan_out), ``.bias``, ``.bn_gamma``,
    ``.bn_beta``, ``.bn_mean`` and ``.bn_var``.
    """

    tensors: dict = field(default_factory=dict)

    def __getitem__(self, key):
        try:
            return self.tensors[key]
        except KeyError:
            raise ConfigurationError(f"missing weight tensor {key!r}") from None

    def keys_for(self, prefix: str, mlp: MlpSpec):
        keys = []
        for i, _ in enumerate(mlp.widths):
            keys.append(f"{prefix}.{i}.weight")
            if mlp.has_bias:
                keys.append(f"{prefix}.{i}.bias")
            if mlp.has_batchnorm:
                keys += [f"{prefix}.{i}.bn_{n}" for n in ("gamma", "beta", "mean", "var")]
        return keys

    def check(self, prefix: str, mlp: MlpSpec):
        for i, (fi, fo) in enumerate(mlp.layer_shapes()):
            expect = {f"{prefix}.{i}.weight": (fi, fo)}
            if mlp.has_bias:
                expect[f"{prefix}.{i}.bias"] = (fo,)
            if mlp.has_batchnorm:
                for n in ("gamma", "beta", "mean", "var"):
                    expect[f"{prefix}.{i}.bn_{n}"] = (fo,)
            for key, shape in expect.items():
                got = self[key].shape
                if got != shape:
                    raise ConfigurationError(f"{key} has shape {got}, expected {shape}")


def init_weights(mlps: Mapping[str, MlpSpec], seed: int = 0) -> WeightBundle:
    """Seeded pseudo-random weights for each named MLP (He-scaled normals)."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for prefix in sorted(mlps):
        mlp = mlps[prefix]
        for i, (fi, fo) in enumerate(mlp.layer_shapes()):
            tensors[f"{prefix}.{i}.weight"] = rng.normal(0, np.sqrt(2.0 / fi), (fi, fo)).astype(np.float32)
            if mlp.has_bias:
                tensors[f"{prefix}.{i}.bias"] = rng.normal(0, 0.01, fo).astype(np.float32)
            if mlp.has_batchnorm:
                tensors[f"{prefix}.{i}.bn_gamma"] = rng.uniform(0.8, 1.2, fo).astype(np.float32)
                tensors[f"{prefix}.{i}.bn_beta"] = rng.normal(0, 0.05, fo).astype(np.float32)
                tensors[f"{prefix}.{i}.bn_mean"] = rng.normal(0, 0.05, fo).astype(np.float32)
                tensors[f"{prefix}.{i}.bn_var"] = rng.uniform(0.5, 1.5, fo).astype(np.float32)
    return WeightBundle(tensors)


def backbone_mlps(cfg: BackboneConfig) -> dict:
    return {f"sa{i + 1}": layer.mlp for i, layer in enumerate(cfg.sa_layers)}


def save_weights(bundle: WeightBundle, manifest_path) -> Path:
    """Write ``<name>.json`` (name -> shape, byte offset) and ``<name>.bin`` (f32 LE blob)."""
    manifest_path = Path(manifest_path)
    blob_path = manifest_path.with_suffix(".bin")
    manifest, chunks, offset = {}, [], 0
    for key in sorted(bundle.tensors):
        arr = np.ascontiguousarray(bundle.tensors[key], dtype="<f4")
        manifest[key] = {"shape": list(arr.shape), "offset": offset}
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    blob_path.write_bytes(b"".join(chunks))
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return blob_path


def load_weights(manifest_path) -> WeightBundle:
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    blob = manifest_path.with_suffix(".bin").read_bytes()
    tensors = {}
    for key, entry in manifest.items():
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        off = int(entry["offset"])
        if off < 0 or off + 4 * count > len(blob):
            raise ConfigurationError(f"{key}: data range exceeds weight blob")
        tensors[key] = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(shape).astype(np.float32)
    return WeightBundle(tensors)


# -- kernels -------------------------------------------------------------------

def pointnet_forward(xyz, features, groups, centroid_xyz, mlp: MlpSpec,
                     weights: WeightBundle, prefix: str) -> np.ndarray:
    """Shared per-point MLP followed by a channel-wise max over each group.

    Each member's input is its offset from the group centroid followed by its
    features, so ``mlp.input_width`` must equal ``3 + features.shape[1]``.
    Returns an array of shape ``(M, mlp.output_width)``.
    """
    xyz = np.asarray(xyz, dtype=np.float64)
    features = np.asarray(features, dtype=np.float64).reshape(len(xyz), -1)
    groups = np.asarray(groups, dtype=np.int64)
    if groups.ndim != 2:
        raise ConfigurationError(f"groups must be M x k, got shape {groups.shape}")
    if mlp.input_width != 3 + features.shape[1]:
        raise ConfigurationError(
            f"{prefix}: input width {mlp.input_width} != 3 + {features.shape[1]} features")
    weights.check(prefix, mlp)
    rel = xyz[groups] - np.asarray(centroid_xyz, dtype=np.float64)[:, None, :]
    x = np.concatenate([rel, features[groups]], axis=2)
    for i, _ in enumerate(mlp.widths):
        x = x @ weights[f"{prefix}.{i}.weight"].astype(np.float64)
        if mlp.has_bias:
            x = x + weights[f"{prefix}.{i}.bias"]
        if mlp.has_batchnorm:
            g = weights[f"{prefix}.{i}.bn_gamma"].astype(np.float64)
            b = weights[f"{prefix}.{i}.bn_beta"].astype(np.float64)
            mu = weights[f"{prefix}.{i}.bn_mean"].astype(np.float64)
            var = weights[f"{prefix}.{i}.bn_var"].astype(np.float64)
            x = (x - mu) * (g / np.sqrt(var + BN_EPS)) + b
        x = np.maximum(x, 0.0)
    if x.shape[1] == 0:
        return np.zeros((len(groups), mlp.output_width))
    return x.max(axis=1)


def fp_weights(coarse_xyz, fine_xyz, k_neighbors: int = 3):
    """Neighbour indices and inverse-distance weights used by :func:`fp_interpolate`."""
    coarse = np.asarray(coarse_xyz, dtype=np.float64).reshape(-1, 3)
    fine = np.asarray(fine_xyz, dtype=np.float64).reshape(-1, 3)
    if len(coarse) == 0:
        raise ArgumentError("coarse point set is empty")
    k = min(k_neighbors, len(coarse))
    idx = np.empty((len(fine), k), dtype=np.int64)
    dk = np.empty((len(fine), k))
    for lo in range(0, len(fine), 1024):
        d = np.sqrt(((fine[lo:lo + 1024, None, :] - coarse[None, :, :]) ** 2).sum(axis=2))
        part = np.argsort(d, axis=1, kind="stable")[:, :k]
        idx[lo:lo + 1024] = part
        dk[lo:lo + 1024] = np.take_along_axis(d, part, axis=1)
    w = np.zeros_like(dk)
    exact = dk[:, 0] == 0
    w[exact, 0] = 1.0
    inv = 1.0 / dk[~exact]
    w[~exact] = inv / inv.sum(axis=1, keepdims=True)
    return idx, w


def fp_interpolate(coarse_xyz, coarse_features, fine_xyz, k_neighbors: int = 3) -> np.ndarray:
    """Inverse-distance interpolation of coarse features onto fine points.

    A fine point that coincides with a coarse point copies its feature.
    Skip-connection concatenation is left to the caller.
    """
    idx, w = fp_weights(coarse_xyz, fine_xyz, k_neighbors)
    feats = np.asarray(coarse_features, dtype=np.float64).reshape(len(np.asarray(coarse_xyz).reshape(-1, 3)), -1)
    return (feats[idx] * w[:, :, None]).sum(axis=1)


# -- backbone ------------------------------------------------------------------

@dataclass
class LayerOutput:
    layer: int
    pipeline: str            # "normal", "bias" or "fused"
    xyz: np.ndarray
    features: np.ndarray
    classes: np.ndarray
    indices: np.ndarray      # centroid indices into this layer's input set
    weight_keys: tuple

    @property
    def shape(self):
        return (len(self.xyz), self.features.shape[1])


@dataclass
class BackboneResult:
    layers: list
    xyz: np.ndarray
    features: np.ndarray

    def shapes(self) -> list:
        return [{"layer": o.layer, "pipeline": o.pipeline, "points": o.shape[0],
                 "channels": o.shape[1]} for o in self.layers]

    def output(self, layer: int, pipeline: str) -> LayerOutput:
        for o in self.layers:
            if o.layer == layer and o.pipeline == pipeline:
                return o
        raise KeyError((layer, pipeline))


def _sa_step(layer_no, cfg_layer, xyz, feats, classes, weights, *, start, bias_w0=None, pipeline):
    m = cfg_layer.num_centroids if pipeline != "fused" else 2 * cfg_layer.num_centroids
    if m > len(xyz):
        raise ArgumentError(f"sa{layer_no}: {m} centroids requested from {len(xyz)} points")
    if bias_w0 is not None:
        idx = biased_fps(xyz, m, BiasSpec(bias_w0, tuple(np.flatnonzero(classes > 0))), start)
    else:
        idx = fps(xyz, m, start)
    groups = ball_query(xyz, idx, BallQuerySpec(cfg_layer.radius, cfg_layer.k))
    prefix = f"sa{layer_no}"
    out = pointnet_forward(xyz, feats, groups, xyz[idx], cfg_layer.mlp, weights, prefix)
    return LayerOutput(layer_no, pipeline, xyz[idx], out, classes[idx], idx,
                       tuple(weights.keys_for(prefix, cfg_layer.mlp)))


def run_backbone(p: PaintedPointCloud, cfg: BackboneConfig, w: WeightBundle,
                 features=None) -> BackboneResult:
    """Run both SA pipelines, fuse them, and apply the last SA layer.

    ``features`` defaults to :func:`backbone_input_features`. Both pipelines
    read the same ``w`` at every layer.
    """
    need = 2 * cfg.sa_layers[0].num_centroids
    if len(p) < need:
        raise ArgumentError(f"backbone needs at least {need} points, got {len(p)}")
    if features is None:
        features = backbone_input_features(p)
    xyz0 = p.xyz.astype(np.float64)
    classes0 = np.asarray(p.classes)
    outputs = []
    state = {"normal": (xyz0, features, classes0), "bias": (xyz0, features, classes0)}
    starts = {"normal": cfg.start_normal, "bias": cfg.start_bias}
    for li in range(cfg.fuse_before_layer - 1):
        layer = cfg.sa_layers[li]
        for pipe in ("normal", "bias"):
            xyz, feats, cls = state[pipe]
            w0 = cfg.w0 if (pipe == "bias" and layer.biased) else None
            start = starts[pipe] if li == 0 else 0
            o = _sa_step(li + 1, layer, xyz, feats, cls, w, start=start, bias_w0=w0, pipeline=pipe)
            outputs.append(o)
            state[pipe] = (o.xyz, o.features, o.classes)
    fx = np.concatenate([state["normal"][0], state["bias"][0]])
    ff = np.concatenate([state["normal"][1], state["bias"][1]])
    fc = np.concatenate([state["normal"][2], state["bias"][2]])
    last = _sa_step(4, cfg.sa_layers[3], fx, ff, fc, w, start=0, pipeline="fused")
    outputs.append(last)
    return BackboneResult(outputs, last.xyz, last.features)


# -- accounting ----------------------------------------------------------------

@dataclass(frozen=True)
class ModelStats:
    params: int
    madds: int


def count_params(specs: Sequence[MlpSpec]) -> int:
    """Weights, plus bias and four batchnorm terms per output channel when present."""
    total = 0
    for spec in specs:
        for fi, fo in spec.layer_shapes():
            total += fi * fo
            if spec.has_bias:
                total += fo
            if spec.has_batchnorm:
                total += 4 * fo
    return total


def count_madds(specs: Sequence[MlpSpec], points_per_spec: Sequence[int]) -> int:
    """Per point: one unit per multiply-accumulate, one per bias add, two per batchnorm channel."""
    if len(specs) != len(points_per_spec):
        raise ArgumentError("specs and point counts differ in length")
    total = 0
    for spec, n in zip(specs, points_per_spec):
        per_point = 0
        for fi, fo in spec.layer_shapes():
            per_point += fi * fo
            if spec.has_bias:
                per_point += fo
            if spec.has_batchnorm:
                per_point += 2 * fo
        total += per_point * int(n)
    return total


# FP heads: two 512->256->256 PointNets at 512 and 1024 points, versus one
# shared 768->256 layer at 1024 points.
PRESETS = {
    "fp-pointnet2": ((MlpSpec(512, (256, 256)), MlpSpec(512, (256, 256))), (512, 1024)),
    "fp-pointsplit": ((MlpSpec(768, (256,)),), (1024,)),
}


def preset_stats(name: str) -> ModelStats:
    try:
        specs, points = PRESETS[name]
    except KeyError:
        raise ArgumentError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return ModelStats(count_params(specs), count_madds(specs, points))
