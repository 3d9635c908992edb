"""Deterministic synthetic inputs: a painted indoor scene and head activations."""

from __future__ import annotations

import numpy as np

from .pointcloud import PaintedPointCloud, PointCloud

# (class id, centre xy, size xyz) for a table and four chairs
_OBJECTS = (
    (1, (3.0, 2.5), (1.2, 0.8, 0.75)),
    (2, (2.2, 2.5), (0.45, 0.45, 0.9)),
    (2, (3.8, 2.5), (0.45, 0.45, 0.9)),
    (2, (3.0, 1.7), (0.45, 0.45, 0.9)),
    (2, (3.0, 3.3), (0.45, 0.45, 0.9)),
)
ROOM = (6.0, 5.0, 2.5)


def _box_surface(rng, n, centre, size):
    """Uniform samples on the four sides and the top of an axis-aligned box."""
    cx, cy = centre
    sx, sy, sz = size
    areas = np.array([sx * sz, sx * sz, sy * sz, sy * sz, sx * sy])
    face = rng.choice(5, size=n, p=areas / areas.sum())
    u, v = rng.random(n), rng.random(n)
    pts = np.empty((n, 3))
    x0, y0 = cx - sx / 2, cy - sy / 2
    pts[:, 0] = np.select([face < 2, face == 2, face == 3], [x0 + u * sx, x0, x0 + sx], x0 + u * sx)
    pts[:, 1] = np.select([face == 0, face == 1, face < 4], [y0, y0 + sy, y0 + u * sy], y0 + v * sy)
    pts[:, 2] = np.where(face < 4, v * sz, sz)
    return pts


def make_scene(n: int = 20000, seed: int = 0, foreground_fraction: float = 0.25) -> PaintedPointCloud:
    """A room (floor and two walls, class 0) with a table (1) and four chairs (2).

    Points are shuffled so index order carries no spatial structure.
    """
    rng = np.random.default_rng(seed)
    n_fg = int(round(n * foreground_fraction))
    n_bg = n - n_fg
    lx, ly, lz = ROOM
    n_floor = n_bg // 2
    n_wall = n_bg - n_floor
    floor = np.column_stack([rng.random(n_floor) * lx, rng.random(n_floor) * ly, np.zeros(n_floor)])
    side = rng.random(n_wall) < lx / (lx + ly)
    t, h = rng.random(n_wall), rng.random(n_wall) * lz
    walls = np.column_stack([np.where(side, t * lx, 0.0), np.where(side, ly, t * ly), h])
    sizes = np.array([np.prod(s[:2]) + 2 * s[2] * (s[0] + s[1]) for _, _, s in _OBJECTS])
    counts = np.floor(sizes / sizes.sum() * n_fg).astype(int)
    counts[0] += n_fg - counts.sum()
    parts, labels = [floor, walls], [np.zeros(n_bg, dtype=np.int64)]
    for (cls, centre, size), k in zip(_OBJECTS, counts):
        parts.append(_box_surface(rng, k, centre, size))
        labels.append(np.full(k, cls, dtype=np.int64))
    xyz = np.concatenate(parts)
    classes = np.concatenate(labels)
    order = rng.permutation(n)
    xyz, classes = xyz[order], classes[order]
    height = xyz[:, 2:3].astype(np.float32)
    return PaintedPointCloud(PointCloud(xyz, height), classes, num_classes=3)


# channel populations: (mean, std) per role group of a head's last layer
ROLE_POPULATIONS = {
    "coords": (0.0, 0.05),
    "classification": (2.0, 3.0),
    "regression": (-1.0, 0.6),
    "features": (0.5, 2.0),
}


def head_activations(layout, n: int = 4000, seed: int = 0) -> np.ndarray:
    """``(n, C)`` activations whose channel statistics follow the layout's roles."""
    rng = np.random.default_rng(seed)
    cols = []
    for g in layout.groups:
        mean, std = ROLE_POPULATIONS[g.role]
        cols.append(rng.normal(mean, std, size=(n, g.channels)))
    return np.concatenate(cols, axis=1)
