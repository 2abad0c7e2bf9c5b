"""Redundant per-frame pose features and their (partial) inverse.

Per frame the feature vector packs, in order:

- yaw rate of the root (1), heading change per frame about +Y;
- planar root velocity in the facing frame (2): lateral x then forward z;
- root height (1);
- joint positions relative to the root's ground point, yaw removed (3N);
- frame differences of world joint positions, yaw removed (3N);
- local joint rotations as 6-D (first two rotation-matrix columns) (6N);
- binary foot contacts for the four heel/toe proxies (4).

Total dimension ``8 + 12 N``. Velocity-like entries at frame t use frames
t and t+1; the final frame replicates the penultimate ones so the array
stays (T, D).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rotations import quat_to_6d, rot6d_to_quat, rotate_y, wrap_angle, yaw_of
from .skeleton import ClipFormatError, MotionClip, Skeleton, forward_kinematics

FEATURE_FORMAT_VERSION = 1

CONTACT_SPEED_THRESHOLD = 0.002


def feature_dim(n_joints: int) -> int:
    return 8 + 12 * n_joints


@dataclass
class FeatureLayout:
    """Slice bookkeeping for one rig size."""

    n_joints: int

    @property
    def dim(self) -> int:
        return feature_dim(self.n_joints)

    @property
    def yaw_rate(self) -> slice:
        return slice(0, 1)

    @property
    def planar_velocity(self) -> slice:
        return slice(1, 3)

    @property
    def root_height(self) -> slice:
        return slice(3, 4)

    @property
    def joint_positions(self) -> slice:
        return slice(4, 4 + 3 * self.n_joints)

    @property
    def joint_velocities(self) -> slice:
        n = self.n_joints
        return slice(4 + 3 * n, 4 + 6 * n)

    @property
    def joint_rotations(self) -> slice:
        n = self.n_joints
        return slice(4 + 6 * n, 4 + 12 * n)

    @property
    def contacts(self) -> slice:
        return slice(self.dim - 4, self.dim)


def _replicated_diff(x: np.ndarray) -> np.ndarray:
    """Forward differences along axis 0 with the last row replicated."""
    if x.shape[0] == 1:
        return np.zeros_like(x)
    d = np.empty_like(x)
    d[:-1] = x[1:] - x[:-1]
    d[-1] = d[-2]
    return d


def extract_features(
    clip: MotionClip, contact_threshold: float = CONTACT_SPEED_THRESHOLD
) -> np.ndarray:
    """Per-frame features (T, 8 + 12N) for a clip."""
    skel = clip.skeleton
    layout = FeatureLayout(skel.n_joints)
    positions = forward_kinematics(skel, clip.root_pos, clip.quats)
    t = clip.n_frames

    yaw = yaw_of(clip.quats[:, 0])
    # Wrap each per-frame heading step, not the cumulative heading.
    yaw_step = np.zeros((t, 1))
    if t > 1:
        yaw_step[:-1, 0] = wrap_angle(yaw[1:] - yaw[:-1])
        yaw_step[-1, 0] = yaw_step[-2, 0]

    root_disp = _replicated_diff(clip.root_pos)
    planar = rotate_y(-yaw, root_disp)[:, [0, 2]]

    ground = clip.root_pos.copy()
    ground[:, 1] = 0.0
    rel = rotate_y(-yaw[:, None], positions - ground[:, None, :])

    vel = rotate_y(-yaw[:, None], _replicated_diff(positions))

    rots = quat_to_6d(clip.quats)

    speeds = np.linalg.norm(_replicated_diff(positions[:, list(skel.heel_toe_ids)]), axis=-1)
    contacts = (speeds < contact_threshold).astype(np.float64)

    out = np.empty((t, layout.dim), dtype=np.float64)
    out[:, layout.yaw_rate] = yaw_step
    out[:, layout.planar_velocity] = planar
    out[:, layout.root_height] = clip.root_pos[:, 1:2]
    out[:, layout.joint_positions] = rel.reshape(t, -1)
    out[:, layout.joint_velocities] = vel.reshape(t, -1)
    out[:, layout.joint_rotations] = rots.reshape(t, -1)
    out[:, layout.contacts] = contacts
    return out


def recover_positions(
    features: np.ndarray,
    n_joints: int,
    origin_xz: tuple[float, float] = (0.0, 0.0),
    initial_yaw: float = 0.0,
) -> np.ndarray:
    """World joint positions (T, N, 3) implied by a feature array.

    Integrates heading from the yaw-rate channel and the planar root track
    from the facing-frame velocities, then re-poses the root-relative joint
    positions. The root trajectory round-trips exactly against
    :func:`extract_features`; other joints match whenever the stored relative
    positions are kinematically consistent.
    """
    features = np.asarray(features, dtype=np.float64)
    layout = FeatureLayout(n_joints)
    if features.ndim != 2 or features.shape[1] != layout.dim:
        raise ClipFormatError(
            f"feature array shape {features.shape} does not match dim {layout.dim}"
        )
    t = features.shape[0]

    yaw = np.empty(t)
    yaw[0] = initial_yaw
    steps = features[:, layout.yaw_rate][:, 0]
    if t > 1:
        yaw[1:] = initial_yaw + np.cumsum(steps[:-1])

    planar = features[:, layout.planar_velocity]
    disp_local = np.stack([planar[:, 0], np.zeros(t), planar[:, 1]], axis=-1)
    disp_world = rotate_y(yaw, disp_local)
    ground = np.zeros((t, 3))
    ground[0, 0], ground[0, 2] = origin_xz
    if t > 1:
        ground[1:, [0, 2]] = ground[0, [0, 2]] + np.cumsum(disp_world[:-1, [0, 2]], axis=0)

    rel = features[:, layout.joint_positions].reshape(t, n_joints, 3)
    positions = rotate_y(yaw[:, None], rel) + ground[:, None, :]
    return positions


def features_to_clip(
    features: np.ndarray,
    skeleton: Skeleton,
    fps: float,
    origin_xz: tuple[float, float] = (0.0, 0.0),
    initial_yaw: float = 0.0,
) -> MotionClip:
    """Rebuild a clip from features via the 6-D local rotations.

    The root translation is the integrated trajectory at the stored height;
    local rotations come straight from the rotation block. For features
    produced by :func:`extract_features` this inverts the clip exactly up to
    the planar origin and floating-point error.
    """
    features = np.asarray(features, dtype=np.float64)
    layout = FeatureLayout(skeleton.n_joints)
    positions = recover_positions(features, skeleton.n_joints, origin_xz, initial_yaw)
    t = features.shape[0]
    root = positions[:, 0].copy()
    root[:, 1] = features[:, layout.root_height][:, 0]
    rots = features[:, layout.joint_rotations].reshape(t, skeleton.n_joints, 6)
    quats = rot6d_to_quat(rots)
    return MotionClip(fps=fps, skeleton=skeleton, root_pos=root, quats=quats)


def save_features(path: str | Path, features: np.ndarray, n_joints: int) -> None:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != feature_dim(n_joints):
        raise ClipFormatError(
            f"feature array shape {features.shape} does not match {n_joints} joints"
        )
    doc = {
        "format_version": FEATURE_FORMAT_VERSION,
        "n_joints": n_joints,
        "dim": int(features.shape[1]),
        "frames": features.tolist(),
    }
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_features(path: str | Path) -> tuple[np.ndarray, int]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ClipFormatError(f"{path}: not valid JSON: {exc}") from exc
    if doc.get("format_version") != FEATURE_FORMAT_VERSION:
        raise ClipFormatError(f"unsupported feature format_version {doc.get('format_version')!r}")
    n_joints = int(doc["n_joints"])
    frames = np.asarray(doc["frames"], dtype=np.float64)
    if frames.ndim != 2 or frames.shape[1] != int(doc["dim"]) or doc["dim"] != feature_dim(n_joints):
        raise ClipFormatError("feature file dim/n_joints/frames are inconsistent")
    return frames, n_joints
