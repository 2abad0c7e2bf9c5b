"""Synthetic labeled motion corpus.

Five motion families (walk, turn, jump, wave, stand) rendered procedurally on
the default rig, each with a caption drawn from a small template grammar that
always contains the family keyword. Clip ``i`` of ``make_corpus(n, seed)`` is
a pure function of ``(seed, i)``, so corpora are reproducible and two calls
with different seeds share no clips.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rotations import quat_about_y, quat_from_axis_angle, quat_identity, quat_mul
from .skeleton import MotionClip, Skeleton, default_rig

FAMILIES = ("walk", "turn", "jump", "wave", "stand")

_PELVIS_HEIGHT = 0.90

_CAPTIONS = {
    "walk": (
        "a person walks {pace}",
        "someone is walking {pace} across the floor",
        "the person walks {pace} in a straight line",
    ),
    "turn": (
        "a person turns around to the {side}",
        "someone slowly turns {side} in place",
        "the person turns {side} where they stand",
    ),
    "jump": (
        "a person jumps in place",
        "someone jumps up and lands again",
        "the person does a small jump",
    ),
    "wave": (
        "a person waves in greeting",
        "someone stands and waves",
        "the person waves at somebody",
    ),
    "stand": (
        "a person stands still",
        "someone stands in place without moving",
        "the person is standing calmly",
    ),
}

_PACE_WORDS = ((0.065, "slowly"), (0.095, "at an even pace"), (np.inf, "quickly"))


@dataclass
class LabeledClip:
    """A clip plus its family label, caption, and generation parameters."""

    clip: MotionClip
    family: str
    caption: str
    params: dict[str, float] = field(default_factory=dict)


def _pace_word(speed: float) -> str:
    for limit, word in _PACE_WORDS:
        if speed < limit:
            return word
    raise AssertionError("unreachable")


def _base_pose(t: int, n: int) -> tuple[np.ndarray, np.ndarray]:
    root = np.zeros((t, 3))
    root[:, 1] = _PELVIS_HEIGHT
    quats = quat_identity((t, n))
    return root, quats


def _walk(rng: np.random.Generator, t: int, n: int) -> tuple[np.ndarray, np.ndarray, dict]:
    speed = float(rng.uniform(0.05, 0.12))
    heading = float(rng.uniform(-np.pi, np.pi))
    freq = float(rng.uniform(0.08, 0.12))
    swing = float(rng.uniform(0.35, 0.65))
    phase = float(rng.uniform(0.0, 2 * np.pi))
    root, quats = _base_pose(t, n)
    steps = np.arange(t)
    forward = np.array([np.sin(heading), 0.0, np.cos(heading)])
    root += steps[:, None] * speed * forward
    root[:, 1] = _PELVIS_HEIGHT + 0.015 * np.sin(2 * np.pi * 2 * freq * steps + phase)
    quats[:, 0] = quat_about_y(np.full(t, heading))
    osc = np.sin(2 * np.pi * freq * steps + phase)
    x_axis = np.array([1.0, 0.0, 0.0])
    quats[:, 1] = quat_from_axis_angle(x_axis, swing * osc)
    quats[:, 3] = quat_from_axis_angle(x_axis, -swing * osc)
    quats[:, 2] = quat_from_axis_angle(x_axis, 0.25 * swing * osc)
    quats[:, 4] = quat_from_axis_angle(x_axis, -0.25 * swing * osc)
    return root, quats, {"speed": speed, "heading": heading, "freq": freq}


def _turn(rng: np.random.Generator, t: int, n: int) -> tuple[np.ndarray, np.ndarray, dict]:
    rate = float(rng.uniform(0.02, 0.05)) * (1.0 if rng.random() < 0.5 else -1.0)
    root, quats = _base_pose(t, n)
    steps = np.arange(t)
    quats[:, 0] = quat_about_y(rate * steps)
    shuffle = 0.08 * np.sin(2 * np.pi * 0.1 * steps)
    x_axis = np.array([1.0, 0.0, 0.0])
    quats[:, 1] = quat_from_axis_angle(x_axis, shuffle)
    quats[:, 3] = quat_from_axis_angle(x_axis, -shuffle)
    return root, quats, {"rate": rate}


def _jump(rng: np.random.Generator, t: int, n: int) -> tuple[np.ndarray, np.ndarray, dict]:
    height = float(rng.uniform(0.15, 0.30))
    hops = int(rng.integers(1, 4))
    crouch = float(rng.uniform(0.2, 0.4))
    root, quats = _base_pose(t, n)
    steps = np.arange(t)
    phase = np.mod(steps * hops / t, 1.0)
    # Crouch in the first quarter of each hop, airborne bump in the middle half.
    air = np.clip(np.sin(np.pi * (phase - 0.25) / 0.5), 0.0, None) * (phase >= 0.25) * (phase < 0.75)
    root[:, 1] = _PELVIS_HEIGHT - 0.08 * np.clip(np.sin(np.pi * phase / 0.25), 0, None) * (
        phase < 0.25
    ) + height * air
    tuck = crouch * air
    x_axis = np.array([1.0, 0.0, 0.0])
    quats[:, 1] = quat_from_axis_angle(x_axis, -tuck)
    quats[:, 3] = quat_from_axis_angle(x_axis, -tuck)
    quats[:, 2] = quat_from_axis_angle(x_axis, 0.5 * tuck)
    quats[:, 4] = quat_from_axis_angle(x_axis, 0.5 * tuck)
    return root, quats, {"height": height, "hops": float(hops)}


def _wave(rng: np.random.Generator, t: int, n: int) -> tuple[np.ndarray, np.ndarray, dict]:
    amp = float(rng.uniform(0.35, 0.70))
    freq = float(rng.uniform(0.08, 0.15))
    phase = float(rng.uniform(0.0, 2 * np.pi))
    root, quats = _base_pose(t, n)
    steps = np.arange(t)
    osc = amp * np.sin(2 * np.pi * freq * steps + phase)
    # One raised limb chain oscillating side to side while the root holds.
    z_axis = np.array([0.0, 0.0, 1.0])
    lift = quat_from_axis_angle(z_axis, np.full(t, 2.2))
    quats[:, 1] = quat_mul(lift, quat_from_axis_angle(z_axis, osc))
    quats[:, 2] = quat_from_axis_angle(z_axis, 0.5 * osc)
    return root, quats, {"amp": amp, "freq": freq}


def _stand(rng: np.random.Generator, t: int, n: int) -> tuple[np.ndarray, np.ndarray, dict]:
    sway = float(rng.uniform(0.002, 0.005))
    freq = float(rng.uniform(0.02, 0.04))
    root, quats = _base_pose(t, n)
    steps = np.arange(t)
    root[:, 1] = _PELVIS_HEIGHT + sway * np.sin(2 * np.pi * freq * steps)
    quats[:, 0] = quat_about_y(0.01 * np.sin(2 * np.pi * freq * steps))
    return root, quats, {"sway": sway}


_GENERATORS = {"walk": _walk, "turn": _turn, "jump": _jump, "wave": _wave, "stand": _stand}


def make_labeled_clip(
    family: str,
    seed: int,
    index: int,
    n_frames: int = 64,
    fps: float = 20.0,
    skeleton: Skeleton | None = None,
) -> LabeledClip:
    """One deterministic clip of the given family."""
    if family not in _GENERATORS:
        raise ValueError(f"unknown motion family {family!r}")
    skeleton = skeleton or default_rig()
    rng = np.random.default_rng([seed, index])
    root, quats, params = _GENERATORS[family](rng, n_frames, skeleton.n_joints)
    template = _CAPTIONS[family][int(rng.integers(0, len(_CAPTIONS[family])))]
    caption = template.format(
        pace=_pace_word(params.get("speed", 0.0)),
        side="left" if params.get("rate", 1.0) >= 0 else "right",
    )
    clip = MotionClip(fps=fps, skeleton=skeleton, root_pos=root, quats=quats)
    return LabeledClip(clip=clip, family=family, caption=caption, params=params)


def make_corpus(
    n: int,
    seed: int,
    n_frames: int | tuple[int, ...] = 64,
    fps: float = 20.0,
    skeleton: Skeleton | None = None,
) -> list[LabeledClip]:
    """``n`` clips cycling through the families so labels stay balanced.

    ``n_frames`` may be a tuple of lengths; the length advances once per
    family round, so every family gets clips of every length (length-edit
    pairs rely on that variety).
    """
    if isinstance(n_frames, int):
        lengths = (n_frames,)
    else:
        lengths = tuple(int(f) for f in n_frames)
    # Lengths advance once per family round so every family sees every length.
    return [
        make_labeled_clip(
            FAMILIES[i % len(FAMILIES)],
            seed,
            i,
            lengths[(i // len(FAMILIES)) % len(lengths)],
            fps,
            skeleton,
        )
        for i in range(n)
    ]


# ---------------------------------------------------------------------------
# on-disk corpus


CORPUS_FORMAT_VERSION = 1


def save_corpus(corpus: list[LabeledClip], out_dir: str | Path) -> Path:
    """Write one clip file per entry plus a ``manifest.jsonl`` index.

    The manifest's first line is a header record carrying the format
    version; each following line names one clip file with its label,
    caption, and generation parameters. Clip order is manifest order.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps({"format_version": CORPUS_FORMAT_VERSION, "count": len(corpus)})]
    for i, labeled in enumerate(corpus):
        name = f"clip_{i:04d}.json"
        labeled.clip.save(out_dir / name)
        lines.append(
            json.dumps(
                {
                    "index": i,
                    "file": name,
                    "family": labeled.family,
                    "caption": labeled.caption,
                    "params": labeled.params,
                }
            )
        )
    manifest = out_dir / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def load_corpus(in_dir: str | Path) -> list[LabeledClip]:
    """Read a corpus directory back in manifest order."""
    in_dir = Path(in_dir)
    manifest = in_dir / "manifest.jsonl"
    if not manifest.is_file():
        raise ValueError(f"{in_dir} has no manifest.jsonl; not a corpus directory")
    lines = [line for line in manifest.read_text(encoding="utf-8").splitlines() if line.strip()]
    header = json.loads(lines[0])
    version = header.get("format_version")
    if version != CORPUS_FORMAT_VERSION:
        raise ValueError(f"unsupported corpus format_version {version!r}")
    out = []
    for line in lines[1:]:
        entry = json.loads(line)
        clip = MotionClip.load(in_dir / entry["file"])
        out.append(
            LabeledClip(
                clip=clip,
                family=entry["family"],
                caption=entry["caption"],
                params=entry["params"],
            )
        )
    if len(out) != header.get("count"):
        raise ValueError(f"manifest promises {header.get('count')} clips, found {len(out)}")
    return out
