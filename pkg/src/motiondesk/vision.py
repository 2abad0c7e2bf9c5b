"""Visual conditioning: feature providers and the two buildable adapters.

A :class:`VisualFeature` is a T x D_v array from a named provider (T = 1 for
a single pose image, T = frame count for videos). Two adapters map features
to language-model embeddings: a trainable linear projection, and a perceiver
resampler whose fixed learnable queries cross-attend to [media; latents] over
six blocks, producing a constant number of output rows regardless of T.

The desk-scale provider renders joint positions to an orthographic occupancy
grid (XZ and XY planes concatenated), standing in for a pretrained image
encoder; externally computed features can be loaded from JSON instead.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad

POSE_GRID_RESOLUTION = 16
POSE_GRID_EXTENT = 2.0


class VisionError(ValueError):
    """Raised for malformed features or mismatched adapter dimensions."""


@dataclass
class VisualFeature:
    """T x D_v feature rows from one provider."""

    rows: np.ndarray
    provider: str

    def __post_init__(self) -> None:
        self.rows = np.asarray(self.rows, dtype=np.float64)
        if self.rows.ndim != 2 or self.rows.shape[0] < 1:
            raise VisionError(f"feature rows must be (T >= 1, D_v), got {self.rows.shape}")
        if not np.all(np.isfinite(self.rows)):
            raise VisionError("feature rows contain non-finite values")

    @property
    def t(self) -> int:
        return self.rows.shape[0]

    @property
    def d_v(self) -> int:
        return self.rows.shape[1]

    def save(self, path: str | Path) -> None:
        doc = {
            "provider": self.provider,
            "d_v": self.d_v,
            "t": self.t,
            "rows": np.asarray(self.rows, dtype=np.float32).tolist(),
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh)

    @classmethod
    def load(cls, path: str | Path) -> "VisualFeature":
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        rows = np.asarray(doc["rows"], dtype=np.float64)
        if rows.shape != (doc["t"], doc["d_v"]):
            raise VisionError(
                f"feature file declares {doc['t']} x {doc['d_v']} but rows are {rows.shape}"
            )
        return cls(rows=rows, provider=doc["provider"])


# ---------------------------------------------------------------------------
# pose-render provider


def pose_render_features(
    positions: np.ndarray,
    resolution: int = POSE_GRID_RESOLUTION,
    extent: float = POSE_GRID_EXTENT,
) -> VisualFeature:
    """Orthographic occupancy splat of joint positions, D_v = 2 * R^2.

    ``positions`` is (N, 3) for one pose or (T, N, 3) for a pose sequence.
    Each pose fills two R x R grids (ground XZ plane and frontal XY plane)
    over a square window of side ``extent`` centred on the origin; cells
    count the joints landing in them, joints outside the window are dropped.
    """
    positions = np.asarray(positions, dtype=np.float64)
    if positions.ndim == 2:
        positions = positions[None]
    if positions.ndim != 3 or positions.shape[2] != 3:
        raise VisionError(f"positions must be (N, 3) or (T, N, 3), got {positions.shape}")
    if not np.all(np.isfinite(positions)):
        raise VisionError("positions contain non-finite values")
    if resolution < 1:
        raise VisionError(f"grid resolution must be positive, got {resolution}")
    lo = -extent / 2.0
    cell = extent / resolution
    rows = np.zeros((positions.shape[0], 2 * resolution * resolution), dtype=np.float64)
    for t, pose in enumerate(positions):
        for plane, (a_axis, b_axis) in enumerate(((0, 2), (0, 1))):
            a = np.floor((pose[:, a_axis] - lo) / cell).astype(np.int64)
            b = np.floor((pose[:, b_axis] - lo) / cell).astype(np.int64)
            keep = (a >= 0) & (a < resolution) & (b >= 0) & (b < resolution)
            grid = np.zeros((resolution, resolution), dtype=np.float64)
            np.add.at(grid, (b[keep], a[keep]), 1.0)
            offset = plane * resolution * resolution
            rows[t, offset : offset + resolution * resolution] = grid.reshape(-1)
    return VisualFeature(rows=rows, provider=f"pose-grid-{resolution}")


# ---------------------------------------------------------------------------
# linear projection adapter


@dataclass
class ProjectionWeights:
    """Affine map D_v -> model dim, trained jointly with the language model."""

    w: np.ndarray
    b: np.ndarray

    def __post_init__(self) -> None:
        self.w = np.asarray(self.w)
        self.b = np.asarray(self.b)
        if self.w.ndim != 2 or self.b.shape != (self.w.shape[1],):
            raise VisionError(
                f"projection shapes disagree: w {self.w.shape}, b {self.b.shape}"
            )


def init_projection(d_v: int, d_model: int, seed: int) -> ProjectionWeights:
    rng = np.random.default_rng([seed, 31])
    w = rng.normal(0.0, 0.02, size=(d_v, d_model)).astype(np.float32)
    return ProjectionWeights(w=w, b=np.zeros(d_model, dtype=np.float32))


def project_linear(feature: VisualFeature, weights: ProjectionWeights) -> np.ndarray:
    """Per-row affine map to (T, model dim)."""
    if feature.d_v != weights.w.shape[0]:
        raise VisionError(
            f"feature dim {feature.d_v} does not match projection input {weights.w.shape[0]}"
        )
    return feature.rows @ weights.w + weights.b


# ---------------------------------------------------------------------------
# perceiver resampler


@dataclass
class PerceiverConfig:
    """Resampler dimensions; the 1024/512/4096/768 setting is format parity."""

    n_queries: int = 16
    media_dim: int = 1024
    inner_dim: int = 512
    ff_mult: int = 4
    out_dim: int = 768
    depth: int = 6
    max_frames: int = 64
    temporal_embeddings: bool = True

    def __post_init__(self) -> None:
        if min(self.n_queries, self.media_dim, self.inner_dim, self.out_dim, self.depth) < 1:
            raise VisionError("perceiver dimensions must be positive")
        if self.ff_mult < 1:
            raise VisionError("feed-forward expansion must be at least 1x")

    @property
    def ff_dim(self) -> int:
        return self.media_dim * self.ff_mult


def init_perceiver(config: PerceiverConfig, seed: int) -> dict[str, np.ndarray]:
    """Named parameters; Linear layers inside blocks carry no bias."""
    rng = np.random.default_rng([seed, 53])
    d, inner, ff = config.media_dim, config.inner_dim, config.ff_dim

    def mat(rows: int, cols: int) -> np.ndarray:
        return rng.normal(0.0, 0.02, size=(rows, cols)).astype(np.float32)

    params: dict[str, np.ndarray] = {
        "latents": mat(config.n_queries, d),
        "temporal": mat(config.max_frames, d),
    }
    for i in range(config.depth):
        p = f"block{i}."
        params[p + "norm_media.g"] = np.ones(d, dtype=np.float32)
        params[p + "norm_media.b"] = np.zeros(d, dtype=np.float32)
        params[p + "norm_latents.g"] = np.ones(d, dtype=np.float32)
        params[p + "norm_latents.b"] = np.zeros(d, dtype=np.float32)
        params[p + "to_q.w"] = mat(d, inner)
        params[p + "to_kv.w"] = mat(d, 2 * inner)
        params[p + "to_out.w"] = mat(inner, d)
        params[p + "ff.norm.g"] = np.ones(d, dtype=np.float32)
        params[p + "ff.norm.b"] = np.zeros(d, dtype=np.float32)
        params[p + "ff.w1"] = mat(d, ff)
        params[p + "ff.w2"] = mat(ff, d)
    params["norm.g"] = np.ones(d, dtype=np.float32)
    params["norm.b"] = np.zeros(d, dtype=np.float32)
    params["out.w"] = mat(d, config.out_dim)
    params["out.b"] = np.zeros(config.out_dim, dtype=np.float32)
    return params


def perceiver_layer_shapes(config: PerceiverConfig) -> dict[str, tuple]:
    """Declared layer geometry, for format-parity checks against references."""
    d, inner, ff = config.media_dim, config.inner_dim, config.ff_dim
    return {
        "depth": (config.depth,),
        "norm_media": (d,),
        "norm_latents": (d,),
        "to_q": (d, inner, False),
        "to_kv": (d, 2 * inner, False),
        "to_out": (inner, d, False),
        "ff.norm": (d,),
        "ff.linear1": (d, ff, False),
        "ff.linear2": (ff, d, False),
        "final_norm": (d,),
        "out_linear": (d, config.out_dim, True),
    }


def perceiver_resample(
    feature: VisualFeature,
    config: PerceiverConfig,
    params: dict[str, np.ndarray],
) -> np.ndarray:
    """Fixed-length resampling: (T, media dim) -> (n_queries, out dim).

    Each block cross-attends the running latents to [media; latents] with
    pre-norms on both streams, adds the attended value back, then applies a
    pre-norm feed-forward with GELU, also residual. A final layer norm and
    an affine output projection finish the stack.
    """
    if feature.d_v != config.media_dim:
        raise VisionError(
            f"feature dim {feature.d_v} does not match media dim {config.media_dim}"
        )
    media = feature.rows.astype(np.float64)
    if config.temporal_embeddings:
        if feature.t > config.max_frames:
            raise VisionError(
                f"{feature.t} frames exceed the temporal table ({config.max_frames})"
            )
        media = media + params["temporal"][: feature.t].astype(np.float64)
    latents = params["latents"].astype(np.float64)
    scale = 1.0 / np.sqrt(config.inner_dim)
    for i in range(config.depth):
        p = f"block{i}."
        media_n = ad.np_layer_norm(media, params[p + "norm_media.g"], params[p + "norm_media.b"])
        latents_n = ad.np_layer_norm(
            latents, params[p + "norm_latents.g"], params[p + "norm_latents.b"]
        )
        q = latents_n @ params[p + "to_q.w"]
        kv = np.concatenate([media_n, latents_n], axis=0) @ params[p + "to_kv.w"]
        k, v = kv[:, : config.inner_dim], kv[:, config.inner_dim :]
        attn = ad.np_softmax(q @ k.T * scale, axis=-1)
        latents = latents + (attn @ v) @ params[p + "to_out.w"]
        h = ad.np_layer_norm(latents, params[p + "ff.norm.g"], params[p + "ff.norm.b"])
        h = ad.np_gelu(h @ params[p + "ff.w1"]) @ params[p + "ff.w2"]
        latents = latents + h
    out = ad.np_layer_norm(latents, params["norm.g"], params["norm.b"])
    return out @ params["out.w"] + params["out.b"]
