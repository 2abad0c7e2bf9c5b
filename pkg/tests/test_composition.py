"""Strategy contracts, seam diagnostics, and the paired seam comparison."""

import numpy as np
import pytest

from motiondesk.composition import (
    CompositionError,
    Independent,
    PastCondition,
    SeamReport,
    TokensJoint,
    compose,
    seam_frames,
    seam_metrics,
    strategy_from_name,
)
from motiondesk.corpus import make_corpus
from motiondesk.features import extract_features, feature_dim
from motiondesk.tokenizer import MotionTokens, TokenizerConfig, train_tokenizer

from helpers import family_pairs, make_two_phase_features

N_JOINTS = 5


@pytest.fixture(scope="module")
def trained():
    corpus = make_corpus(30, seed=57, n_frames=64)
    feats = [extract_features(item.clip) for item in corpus]
    config = TokenizerConfig(codebook_size=32, code_dim=32, n_quantizers=2, downsample=4, hidden=64)
    model, _ = train_tokenizer(feats, config, steps=600, batch_size=8, lr=3e-4, seed=1)
    return corpus, feats, model


def split_tokens(model, features: np.ndarray) -> list[MotionTokens]:
    half = features.shape[0] // 2
    return [model.encode(features[:half]), model.encode(features[half:])]


class TestCompose:
    def test_single_segment_identical_across_strategies(self, trained):
        _, feats, model = trained
        segment = [model.encode(feats[0])]
        base = compose(segment, Independent(), model)
        np.testing.assert_array_equal(base, compose(segment, PastCondition(), model))
        np.testing.assert_array_equal(base, compose(segment, TokensJoint(), model))

    def test_frame_counts_match_across_strategies(self, trained):
        _, feats, model = trained
        segments = split_tokens(model, feats[1])
        total = sum(s.n_frames for s in segments)
        for strategy in (Independent(), PastCondition(), TokensJoint()):
            out = compose(segments, strategy, model)
            assert out.shape == (total, feature_dim(N_JOINTS))

    def test_segments_are_not_mutated(self, trained):
        _, feats, model = trained
        segments = split_tokens(model, feats[2])
        before = [s.layers.copy() for s in segments]
        for strategy in (Independent(), PastCondition(), TokensJoint()):
            compose(segments, strategy, model)
        for s, b in zip(segments, before):
            np.testing.assert_array_equal(s.layers, b)

    def test_past_condition_window_caps_at_segment_length(self, trained):
        _, feats, model = trained
        segments = split_tokens(model, feats[3])
        small = compose(segments, PastCondition(window=4), model)
        huge = compose(segments, PastCondition(window=10_000), model)
        assert small.shape == huge.shape
        # A window longer than the first segment degenerates to joint
        # decoding of the pair, so the tail frames must match TokensJoint.
        joint = compose(segments, TokensJoint(), model)
        np.testing.assert_allclose(huge[segments[0].n_frames :], joint[segments[0].n_frames :])

    def test_independent_matches_per_segment_decode(self, trained):
        _, feats, model = trained
        segments = split_tokens(model, feats[4])
        out = compose(segments, Independent(), model)
        np.testing.assert_array_equal(out[: segments[0].n_frames], model.decode(segments[0]))
        np.testing.assert_array_equal(out[segments[0].n_frames :], model.decode(segments[1]))

    def test_validation_errors(self, trained):
        *_, model = trained
        cfg = model.config
        good = MotionTokens(
            layers=np.zeros((cfg.n_quantizers, 3), dtype=np.int64), downsample=cfg.downsample
        )
        empty = MotionTokens(
            layers=np.zeros((cfg.n_quantizers, 0), dtype=np.int64), downsample=cfg.downsample
        )
        lopsided = MotionTokens(
            layers=np.zeros((cfg.n_quantizers + 1, 3), dtype=np.int64), downsample=cfg.downsample
        )
        with pytest.raises(CompositionError, match="no segments"):
            compose([], Independent(), model)
        with pytest.raises(CompositionError, match="empty segment"):
            compose([good, empty], Independent(), model)
        with pytest.raises(CompositionError, match="disagree"):
            compose([good, lopsided], TokensJoint(), model)

    def test_strategy_parsing(self):
        assert strategy_from_name("independent") == Independent()
        assert strategy_from_name("past", window=7) == PastCondition(window=7)
        assert strategy_from_name("joint") == TokensJoint()
        with pytest.raises(CompositionError, match="unknown strategy"):
            strategy_from_name("blended")
        with pytest.raises(CompositionError, match="window"):
            PastCondition(window=0)


class TestSeamFrames:
    def test_cumulative_boundaries(self, trained):
        *_, model = trained
        cfg = model.config
        segments = [
            MotionTokens(
                layers=np.zeros((cfg.n_quantizers, n), dtype=np.int64),
                downsample=cfg.downsample,
            )
            for n in (5, 7, 2)
        ]
        assert seam_frames(segments) == [20, 48]

    def test_single_segment_has_no_seam(self, trained):
        *_, model = trained
        cfg = model.config
        one = MotionTokens(
            layers=np.zeros((cfg.n_quantizers, 5), dtype=np.int64), downsample=cfg.downsample
        )
        assert seam_frames([one]) == []


class TestSeamMetrics:
    def test_constant_clip_is_perfectly_smooth(self):
        features = np.zeros((20, feature_dim(N_JOINTS)))
        report = seam_metrics(features, [10], N_JOINTS)
        assert report.displacement == [0.0]
        assert report.acceleration == [0.0]
        assert report.pose_errors is None

    def test_deliberate_teleport_measures_one_meter(self):
        features = np.zeros((20, feature_dim(N_JOINTS)))
        # Forward root velocity at frame s-1 displaces every joint by
        # exactly one meter between frames s-1 and s.
        features[9, 2] = 1.0
        report = seam_metrics(features, [10], N_JOINTS)
        assert report.displacement[0] == pytest.approx(1.0, abs=1e-9)

    def test_ground_truth_adds_pose_errors(self):
        features = np.zeros((20, feature_dim(N_JOINTS)))
        report = seam_metrics(features, [10], N_JOINTS, ground_truth=features.copy())
        assert report.pose_errors is not None
        assert set(report.pose_errors) == {"MPJPE", "PA-MPJPE", "ACCL"}
        assert report.pose_errors["MPJPE"] == 0.0

    def test_out_of_range_seam_rejected(self):
        features = np.zeros((20, feature_dim(N_JOINTS)))
        for bad in (0, 19, 25, -1):
            with pytest.raises(CompositionError, match="outside"):
                seam_metrics(features, [bad], N_JOINTS)

    def test_report_validation(self):
        with pytest.raises(CompositionError, match="per seam"):
            SeamReport(seams=[4], displacement=[], acceleration=[0.0])
        with pytest.raises(CompositionError, match="negative"):
            SeamReport(seams=[4], displacement=[-0.1], acceleration=[0.0])


class TestSeamQuality:
    def test_joint_decoding_smooths_most_seams(self, trained):
        # Paired protocol: a two-phase clip is generated whole, split at the
        # phase boundary, the halves encoded separately, and each strategy
        # recomposes the pair. Splitting exactly where the behavior changes
        # is the hard case for a context-free decode, so the joint decode
        # should produce the smaller seam jump on a clear majority of pairs.
        _, _, model = trained
        wins = 0
        pairs = 0
        for seed in range(1000, 1005):
            for family_a, family_b in family_pairs():
                feats = make_two_phase_features(family_a, family_b, seed=seed)
                segments = split_tokens(model, feats)
                seam = seam_frames(segments)
                joint = seam_metrics(compose(segments, TokensJoint(), model), seam, N_JOINTS)
                indep = seam_metrics(compose(segments, Independent(), model), seam, N_JOINTS)
                pairs += 1
                wins += joint.displacement[0] <= indep.displacement[0]
        assert pairs == 100
        assert wins / pairs >= 0.8
