"""Bundled desk-scale datasets, generated procedurally from a seed.

``two_moons`` is a 2-D binary task for the exhaustive soundness oracle.
``digits8x8`` renders ten stroke-based glyphs on an 8x8 grid and perturbs
them along their deformation tangents (rotation, shear, shift, scale, stroke
width), with random ink intensity and pixel noise.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from .data import LabeledDataset

# glyph strokes as polylines in [0,1]^2 (x right, y down)
_T, _B, _L, _R, _M = 0.15, 0.85, 0.25, 0.75, 0.5
_GLYPHS: dict[int, list[list[tuple[float, float]]]] = {
    0: [[(_L, _T), (_R, _T), (_R, _B), (_L, _B), (_L, _T)]],
    1: [[(0.35, 0.3), (_M, _T), (_M, _B)], [(0.35, _B), (0.65, _B)]],
    2: [[(_L, _T), (_R, _T), (_R, _M), (_L, _B), (_R, _B)]],
    3: [[(_L, _T), (_R, _T), (_R, _B), (_L, _B)], [(0.4, _M), (_R, _M)]],
    4: [[(_L, _T), (_L, _M), (_R, _M)], [(0.65, _T), (0.65, _B)]],
    5: [[(_R, _T), (_L, _T), (_L, _M), (_R, _M), (_R, _B), (_L, _B)]],
    6: [[(_R, _T), (_L, _T), (_L, _B), (_R, _B), (_R, _M), (_L, _M)]],
    7: [[(_L, _T), (_R, _T), (0.45, _B)]],
    8: [[(_L, _T), (_R, _T), (_R, _B), (_L, _B), (_L, _T)], [(_L, _M), (_R, _M)]],
    9: [[(_R, _M), (_L, _M), (_L, _T), (_R, _T), (_R, _B), (_L, _B)]],
}


def _segment_distance(px: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    t = np.clip(((px - a) @ ab) / max(ab @ ab, 1e-12), 0.0, 1.0)
    return np.linalg.norm(px - (a + t[:, None] * ab), axis=1)


_DEFORMATIONS = (
    ("angle", 0.15), ("shear", 0.15), ("shift_x", 0.06), ("shift_y", 0.06),
    ("scale_x", 0.08), ("scale_y", 0.08), ("width", 0.02),
)


def _rasterize(label: int, size: int, angle=0.0, shear=0.0, shift_x=0.0, shift_y=0.0,
               scale_x=1.0, scale_y=1.0, width=0.09) -> np.ndarray:
    coords = (np.arange(size) + 0.5) / size
    gx, gy = np.meshgrid(coords, coords)
    px = np.stack([gx.ravel(), gy.ravel()], axis=1)
    ca, sa = np.cos(angle), np.sin(angle)
    mat = np.array([[ca, -sa], [sa, ca]]) @ np.array([[scale_x, shear], [0.0, scale_y]])
    shift = np.array([shift_x, shift_y])
    dist = np.full(len(px), np.inf)
    for stroke in _GLYPHS[label]:
        pts = (np.array(stroke) - 0.5) @ mat.T + 0.5 + shift
        for a, b in zip(pts, pts[1:]):
            dist = np.minimum(dist, _segment_distance(px, a, b))
    return np.clip(1.25 - dist / width, 0.0, 1.0) ** 1.5


@lru_cache(maxsize=None)
def glyph_basis(label: int, size: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """Template image and its tangent directions under the small deformations.

    Each direction is a central difference of the rendered glyph with respect
    to one deformation parameter, scaled by that parameter's typical size.
    """
    rest = {"scale_x": 1.0, "scale_y": 1.0, "width": 0.09}
    template = _rasterize(label, size, **rest)
    dirs = []
    for name, step in _DEFORMATIONS:
        base = rest.get(name, 0.0)
        hi = _rasterize(label, size, **{**rest, name: base + step})
        lo = _rasterize(label, size, **{**rest, name: base - step})
        dirs.append((hi - lo) / 2.0)
    template.flags.writeable = False
    out = np.stack(dirs)
    out.flags.writeable = False
    return template, out


def digits8x8(n: int, seed: int = 0, amplitude: float = 1.0, noise: float = 0.1, size: int = 8,
              background: float = 0.1, contrast: float = 0.8) -> LabeledDataset:
    """``n`` class-balanced glyph images flattened to ``size * size`` features.

    Shape variation is linear in the tangent directions of ``glyph_basis``
    with N(0, amplitude^2) coefficients. A per-image ink intensity and i.i.d.
    pixel noise are applied on top, then values are clipped to [0, 1].
    """
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 10
    rng.shuffle(labels)
    d = size * size
    x = np.empty((n, d))
    for i, c in enumerate(labels):
        template, dirs = glyph_basis(int(c), size)
        img = template + rng.normal(0.0, amplitude, len(dirs)) @ dirs
        img = background + contrast * img * rng.uniform(0.7, 1.0) + rng.normal(0.0, noise, d)
        x[i] = np.clip(img, 0.0, 1.0)
    return LabeledDataset(x, labels, num_classes=10)


def two_moons(n: int, seed: int = 0, noise: float = 0.08) -> LabeledDataset:
    """Two interleaved half circles, rescaled into [0,1]^2."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    rng.shuffle(labels)
    t = rng.uniform(0.0, np.pi, n)
    x = np.where(labels == 0, np.cos(t), 1.0 - np.cos(t))
    y = np.where(labels == 0, np.sin(t), 0.5 - np.sin(t))
    pts = np.stack([x, y], axis=1) + rng.normal(0.0, noise, (n, 2))
    # fixed affine map of [-1.5, 2.5] x [-1, 1.5] into the unit square
    pts = (pts - np.array([-1.5, -1.0])) / np.array([4.0, 2.5])
    return LabeledDataset(np.clip(pts, 0.0, 1.0), labels, num_classes=2)


def digits_splits(n_train: int = 500, n_test: int = 1000, seed: int = 0, **kw):
    """Disjoint train/test glyph sets drawn from the same distribution."""
    train = digits8x8(n_train, seed=seed, **kw)
    test = digits8x8(n_test, seed=seed + 10_000, **kw)
    return train, test


def moons_splits(n_train: int = 400, n_test: int = 400, seed: int = 0, **kw):
    return two_moons(n_train, seed=seed, **kw), two_moons(n_test, seed=seed + 10_000, **kw)
