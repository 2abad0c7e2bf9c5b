"""Rig definition, motion clips, forward kinematics, and clip file I/O.

A clip stores a root trajectory plus per-joint local rotations; world joint
positions come out of :func:`forward_kinematics`. Clip files are JSON with a
``format_version`` field so readers can reject containers they do not
understand.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rotations import quat_mul, quat_normalize, quat_rotate

CLIP_FORMAT_VERSION = 1


class ClipFormatError(ValueError):
    """Raised when a clip file or container fails validation."""


@dataclass(frozen=True)
class Skeleton:
    """Joint tree: ``parents[j] < j`` with the root at index 0 (parent -1).

    ``offsets[j]`` is the bind translation from parent to joint ``j``;
    ``heel_toe_ids`` are the four distinct contact-proxy joints in
    (left heel, left toe, right heel, right toe) order.
    """

    parents: tuple[int, ...]
    offsets: np.ndarray
    heel_toe_ids: tuple[int, int, int, int]

    def __post_init__(self) -> None:
        offsets = np.asarray(self.offsets, dtype=np.float64)
        object.__setattr__(self, "offsets", offsets)
        n = len(self.parents)
        if offsets.shape != (n, 3):
            raise ClipFormatError(f"offsets shape {offsets.shape} does not match {n} joints")
        if n < 1 or self.parents[0] != -1:
            raise ClipFormatError("parents[0] must be -1 (root)")
        for j in range(1, n):
            if not 0 <= self.parents[j] < j:
                raise ClipFormatError(f"parents[{j}]={self.parents[j]} must point to an earlier joint")
            if np.linalg.norm(offsets[j]) <= 0.0:
                raise ClipFormatError(f"offsets[{j}] must have positive length")
        ids = tuple(int(i) for i in self.heel_toe_ids)
        if len(ids) != 4 or len(set(ids)) != 4 or not all(0 <= i < n for i in ids):
            raise ClipFormatError(f"heel_toe_ids {ids} must be 4 distinct joint indices")
        object.__setattr__(self, "heel_toe_ids", ids)

    @property
    def n_joints(self) -> int:
        return len(self.parents)

    def to_dict(self) -> dict:
        return {
            "parents": list(self.parents),
            "offsets": self.offsets.tolist(),
            "heel_toe_ids": list(self.heel_toe_ids),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Skeleton":
        try:
            return cls(
                parents=tuple(int(p) for p in d["parents"]),
                offsets=np.asarray(d["offsets"], dtype=np.float64),
                heel_toe_ids=tuple(int(i) for i in d["heel_toe_ids"]),
            )
        except KeyError as exc:
            raise ClipFormatError(f"skeleton missing field {exc}") from exc


def default_rig() -> Skeleton:
    """Five-joint desk rig: pelvis root plus two heel->toe leg chains.

    The four non-root joints are exactly the contact proxies, which is the
    smallest rig where the heel/toe ids can be distinct.
    """
    offsets = np.array(
        [
            [0.0, 0.0, 0.0],
            [-0.10, -0.85, -0.02],  # left heel
            [0.00, -0.05, 0.14],  # left toe
            [0.10, -0.85, -0.02],  # right heel
            [0.00, -0.05, 0.14],  # right toe
        ]
    )
    return Skeleton(parents=(-1, 0, 1, 0, 3), offsets=offsets, heel_toe_ids=(1, 2, 3, 4))


@dataclass
class MotionClip:
    """Root trajectory ``root_pos`` (T, 3) and local rotations ``quats`` (T, N, 4)."""

    fps: float
    skeleton: Skeleton
    root_pos: np.ndarray
    quats: np.ndarray

    def __post_init__(self) -> None:
        self.root_pos = np.asarray(self.root_pos, dtype=np.float64)
        self.quats = np.asarray(self.quats, dtype=np.float64)
        t = self.root_pos.shape[0]
        n = self.skeleton.n_joints
        if self.root_pos.shape != (t, 3):
            raise ClipFormatError(f"root_pos shape {self.root_pos.shape} is not (T, 3)")
        if self.quats.shape != (t, n, 4):
            raise ClipFormatError(f"quats shape {self.quats.shape} is not ({t}, {n}, 4)")
        if not np.all(np.isfinite(self.root_pos)):
            raise ClipFormatError("root_pos contains non-finite values")
        if not np.all(np.isfinite(self.quats)):
            raise ClipFormatError("quats contains non-finite values")
        norms = np.linalg.norm(self.quats, axis=-1)
        if np.any(norms < 1e-6):
            raise ClipFormatError("quats contains a zero-length quaternion")
        self.quats = self.quats / norms[..., None]
        if self.fps <= 0:
            raise ClipFormatError(f"fps must be positive, got {self.fps}")

    @property
    def n_frames(self) -> int:
        return self.root_pos.shape[0]

    def save(self, path: str | Path) -> None:
        doc = {
            "format_version": CLIP_FORMAT_VERSION,
            "fps": self.fps,
            "skeleton": self.skeleton.to_dict(),
            "frames": [
                {"root": self.root_pos[t].tolist(), "quats": self.quats[t].tolist()}
                for t in range(self.n_frames)
            ],
        }
        Path(path).write_text(json.dumps(doc), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "MotionClip":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ClipFormatError(f"{path}: not valid JSON: {exc}") from exc
        return cls.from_dict(doc)

    @classmethod
    def from_dict(cls, doc: dict) -> "MotionClip":
        version = doc.get("format_version")
        if version != CLIP_FORMAT_VERSION:
            raise ClipFormatError(f"unsupported clip format_version {version!r}")
        for field in ("fps", "skeleton", "frames"):
            if field not in doc:
                raise ClipFormatError(f"clip missing field {field!r}")
        skeleton = Skeleton.from_dict(doc["skeleton"])
        frames = doc["frames"]
        if not frames:
            raise ClipFormatError("frames must be non-empty")
        try:
            root = np.asarray([f["root"] for f in frames], dtype=np.float64)
            quats = np.asarray([f["quats"] for f in frames], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise ClipFormatError(f"malformed frames entry: {exc}") from exc
        return cls(fps=float(doc["fps"]), skeleton=skeleton, root_pos=root, quats=quats)


def forward_kinematics(
    skeleton: Skeleton, root_pos: np.ndarray, quats: np.ndarray
) -> np.ndarray:
    """World joint positions (T, N, 3) from root trajectory and local rotations.

    Joint j sits at ``parent_position + parent_global_rotation * offsets[j]``;
    global rotations chain as ``parent_global * local``.
    """
    root_pos = np.asarray(root_pos, dtype=np.float64)
    quats = quat_normalize(np.asarray(quats, dtype=np.float64))
    t, n = quats.shape[0], skeleton.n_joints
    positions = np.empty((t, n, 3), dtype=np.float64)
    global_quats = np.empty((t, n, 4), dtype=np.float64)
    positions[:, 0] = root_pos
    global_quats[:, 0] = quats[:, 0]
    for j in range(1, n):
        p = skeleton.parents[j]
        positions[:, j] = positions[:, p] + quat_rotate(global_quats[:, p], skeleton.offsets[j])
        global_quats[:, j] = quat_mul(global_quats[:, p], quats[:, j])
    return positions


def global_rotations(skeleton: Skeleton, quats: np.ndarray) -> np.ndarray:
    """Per-joint world rotations (T, N, 4) obtained by chaining local ones."""
    quats = quat_normalize(np.asarray(quats, dtype=np.float64))
    out = np.empty_like(quats)
    out[:, 0] = quats[:, 0]
    for j in range(1, skeleton.n_joints):
        out[:, j] = quat_mul(out[:, skeleton.parents[j]], quats[:, j])
    return out
