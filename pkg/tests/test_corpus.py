"""Synthetic corpus properties: determinism, labels, family signatures."""

import json

import numpy as np
import pytest

from motiondesk.corpus import FAMILIES, load_corpus, make_corpus, make_labeled_clip, save_corpus
from motiondesk.features import FeatureLayout, extract_features


def planar_speed(clip):
    d = np.diff(clip.root_pos[:, [0, 2]], axis=0)
    return float(np.linalg.norm(d, axis=1).mean())


def test_deterministic_per_seed():
    a = make_corpus(10, seed=42)
    b = make_corpus(10, seed=42)
    for x, y in zip(a, b):
        assert x.caption == y.caption
        np.testing.assert_array_equal(x.clip.root_pos, y.clip.root_pos)
        np.testing.assert_array_equal(x.clip.quats, y.clip.quats)


def test_different_seeds_differ():
    a = make_corpus(5, seed=1)
    b = make_corpus(5, seed=2)
    assert any(not np.array_equal(x.clip.quats, y.clip.quats) for x, y in zip(a, b))


def test_family_balance_and_keywords():
    corpus = make_corpus(25, seed=0)
    counts = {f: 0 for f in FAMILIES}
    for item in corpus:
        counts[item.family] += 1
        assert item.family in item.caption
    assert set(counts.values()) == {5}


def test_requested_frame_count_and_fps():
    corpus = make_corpus(3, seed=0, n_frames=48, fps=25.0)
    for item in corpus:
        assert item.clip.n_frames == 48
        assert item.clip.fps == 25.0


def test_walk_travels_stand_does_not():
    walk = make_labeled_clip("walk", seed=0, index=0).clip
    stand = make_labeled_clip("stand", seed=0, index=1).clip
    assert planar_speed(walk) > 0.04
    assert planar_speed(stand) < 1e-6


def test_turn_changes_heading():
    item = make_labeled_clip("turn", seed=0, index=0)
    feats = extract_features(item.clip)
    rate = feats[:, FeatureLayout(item.clip.skeleton.n_joints).yaw_rate]
    assert abs(rate.mean()) > 0.015


def test_jump_leaves_ground():
    item = make_labeled_clip("jump", seed=0, index=0)
    heights = item.clip.root_pos[:, 1]
    assert heights.max() - heights.min() > 0.1


def test_wave_root_is_static_but_limb_moves():
    item = make_labeled_clip("wave", seed=0, index=0)
    assert planar_speed(item.clip) < 1e-6
    feats = extract_features(item.clip)
    layout = FeatureLayout(item.clip.skeleton.n_joints)
    limb_vel = feats[:, layout.joint_velocities]
    assert np.abs(limb_vel).max() > 0.01


def test_families_have_distinct_mean_features():
    corpus = make_corpus(25, seed=3)
    by_family = {}
    for item in corpus:
        by_family.setdefault(item.family, []).append(extract_features(item.clip).mean(axis=0))
    means = {f: np.mean(v, axis=0) for f, v in by_family.items()}
    names = list(means)
    for i, a in enumerate(names):
        for b in names[i + 1 :]:
            assert np.linalg.norm(means[a] - means[b]) > 1e-3, (a, b)


def test_corpus_directory_round_trip(tmp_path):
    corpus = make_corpus(7, seed=11)
    save_corpus(corpus, tmp_path / "corpus")
    back = load_corpus(tmp_path / "corpus")
    assert len(back) == 7
    for orig, loaded in zip(corpus, back):
        assert loaded.family == orig.family
        assert loaded.caption == orig.caption
        assert loaded.params == pytest.approx(orig.params)
        np.testing.assert_allclose(loaded.clip.root_pos, orig.clip.root_pos)
        np.testing.assert_allclose(loaded.clip.quats, orig.clip.quats)
        assert loaded.clip.fps == orig.clip.fps


def test_corpus_manifest_header_carries_version_and_count(tmp_path):
    manifest = save_corpus(make_corpus(3, seed=0), tmp_path / "c")
    header = json.loads(manifest.read_text().splitlines()[0])
    assert header == {"format_version": 1, "count": 3}


def test_corpus_load_rejects_non_corpus_directory(tmp_path):
    with pytest.raises(ValueError, match="manifest"):
        load_corpus(tmp_path)


def test_corpus_load_rejects_unknown_version(tmp_path):
    save_corpus(make_corpus(2, seed=0), tmp_path / "c")
    manifest = tmp_path / "c" / "manifest.jsonl"
    lines = manifest.read_text().splitlines()
    lines[0] = json.dumps({"format_version": 9, "count": 2})
    manifest.write_text("\n".join(lines) + "\n")
    with pytest.raises(ValueError, match="format_version"):
        load_corpus(tmp_path / "c")
