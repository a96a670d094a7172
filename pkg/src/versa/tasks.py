"""Seeded episodic task samplers with disjoint context/target splits.

All generators are pure functions of (spec, stream): the same stream tags
reproduce the same episode bit-for-bit.  Rasterized datasets (glyphs, sprite
views) are drawn with integer-grid rules and no anti-aliasing so the corpora
are identical across platforms without any image I/O.

Generator-side truth (the latent task mean, the true cluster means, the
sprite geometry) is stashed in ``Episode.oracle`` for verification code only;
nothing on the training path reads it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .rng import RandomStream

__all__ = [
    "Episode",
    "ToyModelSpec",
    "ClusterTaskSpec",
    "validate_episode",
    "sample_toy_episode",
    "sample_cluster_episode",
    "sample_glyph_episode",
    "sample_view_episode",
    "glyph_base",
    "render_sprite_view",
    "export_episodes_jsonl",
    "GLYPH_ALPHABET_SIZE",
    "GLYPH_IMAGE_SIZE",
    "VIEW_COUNT",
    "VIEW_IMAGE_SIZE",
]

GLYPH_ALPHABET_SIZE = 64
GLYPH_IMAGE_SIZE = 16
VIEW_COUNT = 36  # one view every 10 degrees
VIEW_IMAGE_SIZE = 16


@dataclass
class Episode:
    """One task: a context set and a disjoint target set plus metadata."""

    kind: str  # "classification" | "regression"
    context_x: np.ndarray
    context_y: np.ndarray
    target_x: np.ndarray
    target_y: np.ndarray
    way: int | None
    shot: int
    task_id: int
    context_ids: np.ndarray = field(default=None)
    target_ids: np.ndarray = field(default=None)
    oracle: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.context_x.shape[0] != self.context_y.shape[0]:
            raise ContractError("episode: context inputs/targets length mismatch")
        if self.target_x.shape[0] != self.target_y.shape[0]:
            raise ContractError("episode: target inputs/targets length mismatch")
        if self.context_ids is None:
            self.context_ids = np.arange(self.context_x.shape[0], dtype=np.int64)
        if self.target_ids is None:
            n = self.context_x.shape[0]
            self.target_ids = np.arange(n, n + self.target_x.shape[0], dtype=np.int64)

    @property
    def n_context(self) -> int:
        return self.context_x.shape[0]

    @property
    def n_target(self) -> int:
        return self.target_x.shape[0]


def validate_episode(episode: Episode) -> None:
    """Raise ContractError on overlapping splits or degenerate class coverage."""
    shared = np.intersect1d(episode.context_ids, episode.target_ids)
    if shared.size:
        raise ContractError(
            f"episode {episode.task_id}: context and target sets overlap (ids {shared[:5]})"
        )
    if episode.kind == "classification":
        present = set(int(c) for c in np.unique(episode.context_y))
        for c in np.unique(episode.target_y):
            if int(c) not in present:
                raise ContractError(
                    f"episode {episode.task_id}: class {int(c)} missing from context"
                )
        if episode.way is not None:
            for c in range(episode.way):
                if c not in present:
                    raise ContractError(
                        f"episode {episode.task_id}: class {c} has zero context shots"
                    )


# ---------------------------------------------------------------------------
# Scalar Gaussian tasks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ToyModelSpec:
    """Scalar task: latent mean ~ N(0, prior_var), y ~ N(mean, obs_var)."""

    prior_var: float = 1.0
    obs_var: float = 0.25
    n_context: int = 5
    n_target: int = 15

    def __post_init__(self):
        if self.prior_var <= 0 or self.obs_var <= 0:
            raise ContractError("ToyModelSpec: variances must be positive")
        if self.n_context < 0 or self.n_target < 1:
            raise ContractError("ToyModelSpec: bad set sizes")


def sample_toy_episode(spec: ToyModelSpec, stream: RandomStream, task_id: int = 0):
    """Draw one scalar task; returns (episode, true latent mean)."""
    psi = float(np.sqrt(spec.prior_var) * stream.normal())
    noise = np.sqrt(spec.obs_var) * stream.normal((spec.n_context + spec.n_target,))
    y = psi + noise
    episode = Episode(
        kind="regression",
        context_x=np.zeros((spec.n_context, 0)),
        context_y=y[: spec.n_context, None].copy(),
        target_x=np.zeros((spec.n_target, 0)),
        target_y=y[spec.n_context :, None].copy(),
        way=None,
        shot=spec.n_context,
        task_id=task_id,
        oracle={"psi": psi},
    )
    return episode, psi


# ---------------------------------------------------------------------------
# Gaussian cluster classification
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClusterTaskSpec:
    """C-way classification with isotropic Gaussian classes in input space."""

    input_dim: int = 8
    way: int = 5
    shot: int = 5
    targets_per_class: int = 15
    cluster_sigma: float = 1.0
    mean_scale: float = 1.0

    def __post_init__(self):
        if min(self.input_dim, self.way, self.shot, self.targets_per_class) < 1:
            raise ContractError("ClusterTaskSpec: counts must be positive")
        if self.cluster_sigma <= 0 or self.mean_scale <= 0:
            raise ContractError("ClusterTaskSpec: scales must be positive")


def sample_cluster_episode(
    spec: ClusterTaskSpec, stream: RandomStream, task_id: int = 0
) -> Episode:
    """Draw class means, then per-class context/target points around them."""
    means = spec.mean_scale * stream.normal((spec.way, spec.input_dim))
    ctx_x, ctx_y, tgt_x, tgt_y = [], [], [], []
    for c in range(spec.way):
        n = spec.shot + spec.targets_per_class
        points = means[c] + spec.cluster_sigma * stream.normal((n, spec.input_dim))
        ctx_x.append(points[: spec.shot])
        tgt_x.append(points[spec.shot :])
        ctx_y.append(np.full(spec.shot, c, dtype=np.int64))
        tgt_y.append(np.full(spec.targets_per_class, c, dtype=np.int64))
    return Episode(
        kind="classification",
        context_x=np.concatenate(ctx_x),
        context_y=np.concatenate(ctx_y),
        target_x=np.concatenate(tgt_x),
        target_y=np.concatenate(tgt_y),
        way=spec.way,
        shot=spec.shot,
        task_id=task_id,
        oracle={"means": means, "cluster_var": spec.cluster_sigma**2},
    )


# ---------------------------------------------------------------------------
# Procedural glyph classification
# ---------------------------------------------------------------------------

_GLYPH_CACHE: dict[int, np.ndarray] = {}


def _draw_segment(canvas: np.ndarray, x0: int, y0: int, x1: int, y1: int) -> None:
    """Bresenham line on an integer grid (no anti-aliasing)."""
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    while True:
        canvas[y0, x0] = 1.0
        if x0 == x1 and y0 == y1:
            return
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def glyph_base(class_id: int, size: int = GLYPH_IMAGE_SIZE) -> np.ndarray:
    """The canonical stroke raster for a glyph class (same in every episode)."""
    key = (class_id, size)
    if key not in _GLYPH_CACHE:
        stream = RandomStream(0, "glyph-base", class_id, size)
        canvas = np.zeros((size, size))
        n_strokes = 3 + int(stream.integers(0, 3))
        lo, hi = 2, size - 2
        for _ in range(n_strokes):
            x0, y0, x1, y1 = (int(v) for v in stream.integers(lo, hi, (4,)))
            _draw_segment(canvas, x0, y0, x1, y1)
        _GLYPH_CACHE[key] = canvas
    return _GLYPH_CACHE[key]


def _glyph_instance(
    class_id: int, stream: RandomStream, jitter: int, noise: float, size: int
) -> np.ndarray:
    base = glyph_base(class_id, size)
    img = base
    if jitter > 0:
        dx = int(stream.integers(-jitter, jitter + 1))
        dy = int(stream.integers(-jitter, jitter + 1))
        img = np.zeros_like(base)
        src = base[
            max(0, -dy) : size - max(0, dy),
            max(0, -dx) : size - max(0, dx),
        ]
        img[max(0, dy) : max(0, dy) + src.shape[0], max(0, dx) : max(0, dx) + src.shape[1]] = src
    if noise > 0:
        img = np.clip(img + noise * (2.0 * stream.uniform((size, size)) - 1.0), 0.0, 1.0)
    return img


def sample_glyph_episode(
    way: int,
    shot: int,
    stream: RandomStream,
    targets_per_class: int = 15,
    alphabet_size: int = GLYPH_ALPHABET_SIZE,
    jitter: int = 1,
    noise: float = 0.05,
    task_id: int = 0,
) -> Episode:
    """C-way episode of flattened glyph rasters with per-instance jitter/noise."""
    if way > alphabet_size:
        raise ContractError(f"way {way} exceeds glyph alphabet size {alphabet_size}")
    class_ids = stream.choice(alphabet_size, way)
    size = GLYPH_IMAGE_SIZE
    ctx_x, ctx_y, tgt_x, tgt_y = [], [], [], []
    for label, class_id in enumerate(class_ids):
        for _ in range(shot):
            ctx_x.append(_glyph_instance(int(class_id), stream, jitter, noise, size).reshape(-1))
            ctx_y.append(label)
        for _ in range(targets_per_class):
            tgt_x.append(_glyph_instance(int(class_id), stream, jitter, noise, size).reshape(-1))
            tgt_y.append(label)
    return Episode(
        kind="classification",
        context_x=np.asarray(ctx_x),
        context_y=np.asarray(ctx_y, dtype=np.int64),
        target_x=np.asarray(tgt_x),
        target_y=np.asarray(tgt_y, dtype=np.int64),
        way=way,
        shot=shot,
        task_id=task_id,
        oracle={"class_ids": np.asarray(class_ids)},
    )


# ---------------------------------------------------------------------------
# Rotated-sprite view regression
# ---------------------------------------------------------------------------


def _convex_hull(points: np.ndarray) -> np.ndarray:
    """Andrew's monotone chain; returns hull vertices in CCW order."""
    pts = points[np.lexsort((points[:, 1], points[:, 0]))]

    def half(chain_pts):
        chain = []
        for p in chain_pts:
            while len(chain) >= 2:
                a, b = chain[-2], chain[-1]
                if (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) <= 0:
                    chain.pop()
                else:
                    break
            chain.append(p)
        return chain

    lower = half(pts)
    upper = half(pts[::-1])
    return np.asarray(lower[:-1] + upper[:-1])


def _sample_sprite(stream: RandomStream) -> np.ndarray:
    """A random elongated convex polygon (vertices in the sprite frame)."""
    major = 0.30 + 0.12 * stream.uniform()
    minor = major * (0.30 + 0.30 * stream.uniform())
    phase = 2.0 * np.pi * stream.uniform()
    n = 10
    angles = 2.0 * np.pi * np.arange(n) / n + 0.12 * (2.0 * stream.uniform((n,)) - 1.0)
    radii_scale = 1.0 + 0.08 * (2.0 * stream.uniform((n,)) - 1.0)
    # radial equation of an ellipse with semi-axes (major, minor)
    r = major * minor / np.sqrt((minor * np.cos(angles)) ** 2 + (major * np.sin(angles)) ** 2)
    r = r * radii_scale
    cos_p, sin_p = np.cos(phase), np.sin(phase)
    rot = np.array([[cos_p, -sin_p], [sin_p, cos_p]])
    points = np.stack([r * np.cos(angles), r * np.sin(angles)], axis=1) @ rot.T
    return _convex_hull(points)


def render_sprite_view(vertices: np.ndarray, degree: int, size: int = VIEW_IMAGE_SIZE) -> np.ndarray:
    """Rasterize the sprite rotated to an integer azimuth in degrees.

    The azimuth is reduced mod 360 before computing the rotation, so a
    360-degree turn reproduces the 0-degree view bit-exactly.  Pixels are 1.0
    when their center lies inside the rotated polygon.
    """
    theta = np.radians(float(int(degree) % 360))
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    rot = np.array([[cos_t, -sin_t], [sin_t, cos_t]])
    poly = vertices @ rot.T
    coords = (np.arange(size) + 0.5) / size - 0.5
    px, py = np.meshgrid(coords, coords)
    inside = np.ones((size, size), dtype=bool)
    n = poly.shape[0]
    for i in range(n):
        ax, ay = poly[i]
        bx, by = poly[(i + 1) % n]
        cross = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
        inside &= cross >= 0.0
    return inside.astype(np.float64)


def sample_view_episode(
    shot: int, stream: RandomStream, task_id: int = 0
) -> Episode:
    """One sprite instance rendered at all 36 azimuths; ``shot`` views as context.

    Inputs are azimuths in radians (shape [n, 1]); outputs are flattened
    rasters.  The remaining views form the target set.
    """
    if not (1 <= shot < VIEW_COUNT):
        raise ContractError(f"shot must be in [1, {VIEW_COUNT}), got {shot}")
    vertices = _sample_sprite(stream)
    degrees = np.arange(VIEW_COUNT) * 10
    images = np.stack([render_sprite_view(vertices, int(d)).reshape(-1) for d in degrees])
    angles = np.radians(degrees.astype(np.float64))[:, None]
    order = stream.permutation(VIEW_COUNT)
    ctx_idx, tgt_idx = np.sort(order[:shot]), np.sort(order[shot:])
    return Episode(
        kind="regression",
        context_x=angles[ctx_idx],
        context_y=images[ctx_idx],
        target_x=angles[tgt_idx],
        target_y=images[tgt_idx],
        way=None,
        shot=shot,
        task_id=task_id,
        context_ids=ctx_idx.astype(np.int64),
        target_ids=tgt_idx.astype(np.int64),
        oracle={"vertices": vertices},
    )


# ---------------------------------------------------------------------------
# Corpus export
# ---------------------------------------------------------------------------


def export_episodes_jsonl(episodes, path) -> None:
    """One JSON document per line: {task_id, way, shot, context, target}."""
    with open(path, "w", encoding="utf-8") as fh:
        for ep in episodes:
            record = {
                "task_id": ep.task_id,
                "way": ep.way,
                "shot": ep.shot,
                "context": [
                    [list(map(float, x)), _label(y)]
                    for x, y in zip(ep.context_x, ep.context_y)
                ],
                "target": [
                    [list(map(float, x)), _label(y)]
                    for x, y in zip(ep.target_x, ep.target_y)
                ],
            }
            fh.write(json.dumps(record) + "\n")


def _label(y):
    if np.isscalar(y) or np.asarray(y).ndim == 0:
        return int(y) if np.issubdtype(np.asarray(y).dtype, np.integer) else float(y)
    return list(map(float, y))
