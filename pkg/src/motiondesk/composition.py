"""Temporal composition of per-turn motion segments, with seam diagnostics.

Three ways to turn a list of token segments into one continuous feature
clip: decode each segment alone and splice the frames, decode each segment
together with a short token tail from its predecessor and keep only the new
frames, or decode the whole concatenated token sequence at once. Strategy
choice never touches token content, only the decoder's context, so smoother
seams come purely from letting the decoder's receptive field span the
boundary.

Seam quality is reported as the largest per-joint jump across each boundary
and the largest per-joint second difference at the boundary frame, plus the
position-error family against a ground-truth clip when one is available.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .features import recover_positions
from .metrics import mpjpe_family
from .tokenizer import MotionTokenizer, MotionTokens


class CompositionError(ValueError):
    """Raised for empty or mismatched segments and out-of-range seams."""


@dataclass(frozen=True)
class Independent:
    """Decode every segment alone, splice the frames."""


@dataclass(frozen=True)
class PastCondition:
    """Decode each segment behind the last ``window`` tokens of its predecessor."""

    window: int = 4

    def __post_init__(self) -> None:
        if self.window < 1:
            raise CompositionError(f"conditioning window must be >= 1, got {self.window}")


@dataclass(frozen=True)
class TokensJoint:
    """Decode the concatenation of all segments in a single pass."""


CompositionStrategy = Independent | PastCondition | TokensJoint

_STRATEGY_NAMES = {"independent": Independent, "past": PastCondition, "joint": TokensJoint}


def strategy_from_name(name: str, window: int = 4) -> CompositionStrategy:
    """Parse the CLI/API strategy spelling; ``window`` applies to ``past``."""
    try:
        kind = _STRATEGY_NAMES[name]
    except KeyError:
        raise CompositionError(
            f"unknown strategy {name!r}, expected one of {sorted(_STRATEGY_NAMES)}"
        ) from None
    return PastCondition(window=window) if kind is PastCondition else kind()


def _validate_segments(segments: list[MotionTokens]) -> None:
    if not segments:
        raise CompositionError("no segments to compose")
    counts = {s.n_quantizers for s in segments}
    if len(counts) != 1:
        raise CompositionError(f"segments disagree on quantizer layers: {sorted(counts)}")
    if any(s.length == 0 for s in segments):
        raise CompositionError("empty segment")


def seam_frames(segments: list[MotionTokens]) -> list[int]:
    """Frame index of the first frame of each non-initial segment."""
    _validate_segments(segments)
    bounds = np.cumsum([s.n_frames for s in segments])
    return [int(b) for b in bounds[:-1]]


def compose(
    segments: list[MotionTokens],
    strategy: CompositionStrategy,
    tokenizer: MotionTokenizer,
) -> np.ndarray:
    """Feature frames (l · ΣL_i, D) for the composed sequence."""
    _validate_segments(segments)
    if isinstance(strategy, Independent):
        return np.concatenate([tokenizer.decode(s) for s in segments], axis=0)
    if isinstance(strategy, TokensJoint):
        return tokenizer.compose_decode(segments)
    if isinstance(strategy, PastCondition):
        down = tokenizer.config.downsample
        pieces = [tokenizer.decode(segments[0])]
        for prev, cur in zip(segments, segments[1:]):
            ctx = min(strategy.window, prev.length)
            joined = np.concatenate([prev.layers[:, prev.length - ctx :], cur.layers], axis=1)
            decoded = tokenizer.decode(MotionTokens(layers=joined, downsample=down))
            pieces.append(decoded[ctx * down :])
        return np.concatenate(pieces, axis=0)
    raise CompositionError(f"unknown strategy {strategy!r}")


@dataclass
class SeamReport:
    """Boundary diagnostics; distances in meters, pose errors in mm."""

    seams: list[int]
    displacement: list[float]
    acceleration: list[float]
    pose_errors: dict[str, float] | None = None

    def __post_init__(self) -> None:
        if len(self.displacement) != len(self.seams) or len(self.acceleration) != len(self.seams):
            raise CompositionError("one displacement and acceleration value per seam")
        values = self.displacement + self.acceleration + list((self.pose_errors or {}).values())
        if any(v < 0 for v in values):
            raise CompositionError("seam diagnostics cannot be negative")


def seam_metrics(
    features: np.ndarray,
    seams: list[int],
    n_joints: int,
    ground_truth: np.ndarray | None = None,
) -> SeamReport:
    """Jump and curvature size at each seam of a composed feature clip.

    A seam index is the first frame after a boundary; it needs both its
    neighbors, so valid indices are 1 .. T−2. With ``ground_truth`` features
    of the same shape, the MPJPE family of the whole clip is included.
    """
    positions = recover_positions(features, n_joints)
    t = positions.shape[0]
    displacement = []
    acceleration = []
    for s in seams:
        if not 1 <= s <= t - 2:
            raise CompositionError(f"seam index {s} outside [1, {t - 2}]")
        jump = np.linalg.norm(positions[s] - positions[s - 1], axis=-1)
        curve = np.linalg.norm(
            positions[s + 1] - 2.0 * positions[s] + positions[s - 1], axis=-1
        )
        displacement.append(float(jump.max()))
        acceleration.append(float(curve.max()))
    errors = None
    if ground_truth is not None:
        errors = mpjpe_family(positions, recover_positions(ground_truth, n_joints))
    return SeamReport(
        seams=list(seams),
        displacement=displacement,
        acceleration=acceleration,
        pose_errors=errors,
    )
