"""Causality, masked-loss, decoding, and training contracts for the LM."""

import numpy as np
import pytest

from motiondesk.autodiff import Tape, np_softmax
from motiondesk.checkpoint import Checkpoint, CheckpointError
from motiondesk.conversation import TrainingSample
from motiondesk.lm import (
    DecodingParams,
    LmConfig,
    LmError,
    forward,
    forward_graph,
    generate,
    init_lm_params,
    lm_loss,
    load_lm,
    save_lm,
    select_stage,
    train_lm,
    visual_positions,
)

SMALL = LmConfig(vocab_size=50, n_layers=2, n_heads=2, d_model=16, d_ff=32, max_context=64)


@pytest.fixture(scope="module")
def small_params():
    return init_lm_params(SMALL, seed=3)


# ---------------------------------------------------------------------------
# config and shapes


def test_config_rejects_indivisible_heads():
    with pytest.raises(LmError):
        LmConfig(vocab_size=10, d_model=30, n_heads=4)


def test_config_rejects_lone_visual_field():
    with pytest.raises(LmError):
        LmConfig(vocab_size=10, visual_dim=8)
    with pytest.raises(LmError):
        LmConfig(vocab_size=10, vis_id=3)


def test_forward_shapes(small_params):
    one = forward(small_params, np.array([4, 9, 2]), SMALL)
    assert one.shape == (3, SMALL.vocab_size)
    two = forward(small_params, np.array([[4, 9, 2], [1, 1, 1]]), SMALL)
    assert two.shape == (2, 3, SMALL.vocab_size)
    assert np.all(np.isfinite(two))


def test_forward_rejects_overlong_sequence(small_params):
    ids = np.zeros(SMALL.max_context + 1, dtype=np.int64)
    with pytest.raises(LmError):
        forward(small_params, ids, SMALL)


def test_position_matters(small_params):
    # The same token in different slots must produce different logits.
    logits = forward(small_params, np.array([7, 7, 7]), SMALL)
    assert not np.allclose(logits[0], logits[1])


def test_next_token_distribution_normalizes(small_params):
    logits = forward(small_params, np.array([4, 9, 2, 40]), SMALL)
    probs = np_softmax(logits.astype(np.float64), axis=-1)
    assert np.allclose(probs.sum(axis=-1), 1.0, atol=1e-5)
    assert np.all(probs >= 0.0)


# ---------------------------------------------------------------------------
# causality


def test_future_edit_leaves_past_logits_bitwise_unchanged(small_params):
    rng = np.random.default_rng(0)
    ids = rng.integers(0, SMALL.vocab_size, size=12)
    edited = ids.copy()
    edited[8] = (edited[8] + 1) % SMALL.vocab_size
    a = forward(small_params, ids, SMALL)
    b = forward(small_params, edited, SMALL)
    assert np.array_equal(a[:8], b[:8])
    assert not np.array_equal(a[8:], b[8:])


def test_every_prefix_is_independent_of_its_suffix(small_params):
    # Cross-length runs reassociate the same sums, so this one is numeric;
    # the bitwise guarantee above is for same-length suffix edits.
    rng = np.random.default_rng(1)
    ids = rng.integers(0, SMALL.vocab_size, size=9)
    full = forward(small_params, ids, SMALL)
    for t in range(1, 10):
        partial = forward(small_params, ids[:t], SMALL)
        assert np.allclose(partial, full[:t], atol=1e-5)


# ---------------------------------------------------------------------------
# loss


def test_zero_logits_give_log_vocab_loss():
    v = 13
    logits = np.zeros((1, 4, v))
    targets = np.array([[3, 1, 0, 7]])
    mask = np.ones((1, 4))
    assert lm_loss(logits, targets, mask) == pytest.approx(np.log(v), abs=1e-12)


def test_loss_matches_hand_computed_masked_mean():
    logits = np.array([[[2.0, 0.5, -1.0], [0.0, 3.0, 0.0], [1.0, 1.0, 4.0]]])
    targets = np.array([[0, 2, 2]])
    mask = np.array([[1.0, 1.0, 0.0]])
    # Direct per-position negative log softmax, third position excluded.
    expected = 0.0
    for t in range(2):
        row = logits[0, t]
        expected += -(row[targets[0, t]] - np.log(np.exp(row).sum()))
    expected /= 2.0
    assert lm_loss(logits, targets, mask) == pytest.approx(expected, rel=1e-9)


def test_loss_rejects_empty_mask():
    with pytest.raises(LmError):
        lm_loss(np.zeros((1, 2, 5)), np.zeros((1, 2), dtype=int), np.zeros((1, 2)))


def test_masked_positions_have_exactly_zero_logit_gradient():
    tape = Tape()
    logits = tape.leaf(np.random.default_rng(2).normal(size=(2, 5, 7)))
    targets = np.random.default_rng(3).integers(0, 7, size=(2, 5))
    mask = np.array([[1, 1, 0, 0, 1], [0, 1, 1, 0, 0]], dtype=float)
    tape.backward(lm_loss(logits, targets, mask))
    grad = logits.grad
    assert np.all(grad[mask == 0] == 0.0)
    assert np.all(np.any(grad[mask == 1] != 0.0, axis=-1))


def test_masked_logit_perturbation_leaves_loss_exactly_unchanged():
    # Finite-difference version of the mask-0 contract: moving a logit at a
    # masked position must not move the loss at all, not merely within eps.
    rng = np.random.default_rng(4)
    logits = rng.normal(size=(1, 4, 6))
    targets = rng.integers(0, 6, size=(1, 4))
    mask = np.array([[1.0, 0.0, 1.0, 0.0]])
    base = lm_loss(logits, targets, mask)
    bumped = logits.copy()
    bumped[0, 1, 3] += 0.7
    bumped[0, 3, 0] -= 1.3
    assert lm_loss(bumped, targets, mask) == base


def test_masked_target_values_cannot_influence_parameter_gradients(small_params):
    ids = np.array([[4, 9, 2, 6]])
    mask = np.array([[0.0, 1.0, 1.0, 0.0]])
    grads = []
    for junk in (0, 17):
        targets = np.array([[junk, 3, 5, junk]])
        tape = Tape()
        leaves = {k: tape.leaf(v) for k, v in small_params.items()}
        tape.backward(lm_loss(forward_graph(leaves, ids, SMALL), targets, mask))
        grads.append({k: leaves[k].grad.copy() for k in leaves})
    for name in grads[0]:
        assert np.array_equal(grads[0][name], grads[1][name]), name


def test_right_padding_with_masked_zeros_preserves_loss(small_params):
    ids = np.array([[4, 9, 2, 6, 1]])
    targets = np.array([[9, 2, 6, 1, 8]])
    mask = np.array([[0.0, 1.0, 1.0, 1.0, 1.0]])
    plain = lm_loss(forward(small_params, ids, SMALL), targets, mask)
    pad = np.zeros((1, 3), dtype=ids.dtype)
    padded = lm_loss(
        forward(small_params, np.concatenate([ids, pad], axis=1), SMALL),
        np.concatenate([targets, pad], axis=1),
        np.concatenate([mask, pad.astype(float)], axis=1),
    )
    assert padded == pytest.approx(plain, rel=1e-6)


# ---------------------------------------------------------------------------
# visual injection


def test_visual_positions_are_row_major():
    ids = np.array([[5, 3, 2], [3, 7, 3]])
    assert visual_positions(ids, 3) == [(0, 1), (1, 0), (1, 2)]


def _visual_config():
    return LmConfig(
        vocab_size=50,
        n_layers=2,
        n_heads=2,
        d_model=16,
        d_ff=32,
        max_context=64,
        visual_dim=6,
        vis_id=48,
    )


def test_injected_rows_change_logits_from_placeholder_onward():
    config = _visual_config()
    params = init_lm_params(config, seed=4)
    ids = np.array([5, config.vis_id, 9, 2])
    rows = np.random.default_rng(5).normal(size=(1, config.d_model))
    with_rows = forward(params, ids, config, visual_rows=rows.astype(np.float32))
    without = forward(params, ids, config)
    assert np.array_equal(with_rows[0], without[0])
    assert not np.allclose(with_rows[1:], without[1:])
    # Even an all-zero vector differs from the placeholder's own embedding,
    # and the difference still enters only through the injected slot.
    zeros = forward(
        params, ids, config, visual_rows=np.zeros((1, config.d_model), dtype=np.float32)
    )
    assert np.array_equal(zeros[0], without[0])
    assert not np.allclose(zeros[1:], without[1:])


def test_visual_row_count_mismatch_raises():
    config = _visual_config()
    params = init_lm_params(config, seed=4)
    rows = np.zeros((2, config.d_model), dtype=np.float32)
    with pytest.raises(LmError):
        forward(params, np.array([5, config.vis_id, 9]), config, visual_rows=rows)


def test_visual_row_dim_mismatch_raises():
    config = _visual_config()
    params = init_lm_params(config, seed=4)
    rows = np.zeros((1, config.d_model + 1), dtype=np.float32)
    with pytest.raises(LmError):
        forward(params, np.array([config.vis_id]), config, visual_rows=rows)


def test_generate_conditions_on_visual_rows():
    config = _visual_config()
    params = init_lm_params(config, seed=4)
    ids = [5, config.vis_id, 9]
    decoding = DecodingParams(stop_id=0, max_new_tokens=8)
    rng = np.random.default_rng(6)
    a = generate(params, config, ids, decoding, visual_rows=None)
    b = generate(
        params,
        config,
        ids,
        decoding,
        visual_rows=rng.normal(scale=4.0, size=(1, config.d_model)).astype(np.float32),
    )
    assert a != b


# ---------------------------------------------------------------------------
# decoding


def test_decoding_params_validation():
    with pytest.raises(LmError):
        DecodingParams(stop_id=0, mode="beam")
    with pytest.raises(LmError):
        DecodingParams(stop_id=0, k=0, mode="topk")
    with pytest.raises(LmError):
        DecodingParams(stop_id=0, temperature=0.0)
    with pytest.raises(LmError):
        DecodingParams(stop_id=0, max_new_tokens=0)


def test_greedy_matches_stepwise_full_recompute(small_params):
    # The incremental cache must agree with rerunning the whole prefix.
    context = [4, 17, 9, 30, 2, 11, 25]
    decoding = DecodingParams(stop_id=SMALL.vocab_size - 1, max_new_tokens=12)
    cached = generate(small_params, SMALL, context, decoding)
    ids = list(context)
    expected = []
    for _ in range(decoding.max_new_tokens):
        logits = forward(small_params, np.asarray(ids), SMALL)
        nxt = int(np.argmax(logits[-1]))
        expected.append(nxt)
        if nxt == decoding.stop_id:
            break
        ids.append(nxt)
    assert cached == expected


def test_greedy_is_deterministic(small_params):
    decoding = DecodingParams(stop_id=0, max_new_tokens=10)
    a = generate(small_params, SMALL, [4, 9], decoding)
    b = generate(small_params, SMALL, [4, 9], decoding)
    assert a == b
    assert len(a) <= decoding.max_new_tokens


def test_topk_is_seed_reproducible(small_params):
    decoding = DecodingParams(stop_id=0, max_new_tokens=10, mode="topk", k=5, seed=9)
    a = generate(small_params, SMALL, [4, 9], decoding)
    b = generate(small_params, SMALL, [4, 9], decoding)
    assert a == b


def test_top1_sampling_equals_greedy(small_params):
    greedy = DecodingParams(stop_id=0, max_new_tokens=10)
    top1 = DecodingParams(stop_id=0, max_new_tokens=10, mode="topk", k=1, seed=7)
    assert generate(small_params, SMALL, [4, 9], greedy) == generate(
        small_params, SMALL, [4, 9], top1
    )


def test_generation_stops_at_terminator_and_includes_it():
    # Bias the output projection so the stop id dominates every step.
    params = init_lm_params(SMALL, seed=3)
    params = {k: v.copy() for k, v in params.items()}
    stop = 31
    params["out.b"][stop] = 50.0
    out = generate(params, SMALL, [4, 9], DecodingParams(stop_id=stop, max_new_tokens=10))
    assert out == [stop]


def test_generation_without_terminator_fills_the_bound(small_params):
    decoding = DecodingParams(stop_id=-1, max_new_tokens=6)
    out = generate(small_params, SMALL, [4, 9], decoding)
    assert len(out) == 6
    assert -1 not in out


def test_generate_rejects_window_overflow(small_params):
    context = [1] * 60
    with pytest.raises(LmError):
        generate(small_params, SMALL, context, DecodingParams(stop_id=0, max_new_tokens=5))
    with pytest.raises(LmError):
        generate(small_params, SMALL, [], DecodingParams(stop_id=0, max_new_tokens=5))


# ---------------------------------------------------------------------------
# training


def _sample(prompt: list[int], answer: list[int], task="text-to-motion", turns=1, visual=None):
    full = prompt + answer
    mask = [0] * (len(prompt) - 1) + [1] * len(answer)
    return TrainingSample(
        input_ids=full[:-1],
        target_ids=full[1:],
        loss_mask=mask,
        task=task,
        turns=turns,
        visual=visual,
    )


def test_stage_selection():
    samples = [
        _sample([5, 6], [7, 1]),
        _sample([5, 6], [7, 1], task="motion-reasoning"),
        _sample([5, 6], [7, 1], task="motion-to-text", turns=3),
    ]
    assert select_stage(samples, "pretrain") == [samples[0]]
    assert select_stage(samples, "instruct") == samples
    with pytest.raises(LmError):
        select_stage([samples[1]], "pretrain")
    with pytest.raises(LmError):
        select_stage(samples, "finetune")


def test_dataset_validation_errors():
    config = LmConfig(vocab_size=8, n_layers=1, n_heads=1, d_model=8, d_ff=16, max_context=6)
    with pytest.raises(LmError):
        train_lm([_sample([5, 6], [9, 1])], config, seed=0, steps=1)
    with pytest.raises(LmError):
        train_lm([_sample([5, 6, 2, 3, 4, 0], [5, 1])], config, seed=0, steps=1)
    with pytest.raises(LmError):
        train_lm([_sample([5, 6], [7, 1], visual=[0.0, 0.0])], config, seed=0, steps=1)


def test_overfit_memorizes_two_answers():
    config = LmConfig(vocab_size=16, n_layers=2, n_heads=2, d_model=32, d_ff=64, max_context=16)
    stop = 1
    pairs = [([5, 6], [7, 8, 9, stop]), ([5, 10], [11, 12, 13, stop])]
    samples = [_sample(p, a) for p, a in pairs]
    params, log = train_lm(samples, config, seed=0, steps=250, batch_size=2, lr=1e-2)
    assert log.loss[-1] < 0.2
    assert log.loss[-1] < log.loss[0]
    decoding = DecodingParams(stop_id=stop, max_new_tokens=8)
    for prompt, answer in pairs:
        assert generate(params, config, prompt, decoding) == answer


def test_training_with_visual_samples_updates_the_projection():
    config = _visual_config()
    visual = list(np.linspace(-1.0, 1.0, config.visual_dim))
    samples = [
        _sample([5, config.vis_id, 6], [7, 1], task="image-conditioned-motion", visual=visual),
        _sample([5, 9], [8, 1]),
    ]
    before = init_lm_params(config, seed=0)
    params, _ = train_lm(
        samples, config, seed=0, steps=5, batch_size=2, lr=1e-3, init_params=before
    )
    assert not np.array_equal(params["vis.w"], before["vis.w"])
    assert not np.array_equal(params["vis.b"], before["vis.b"])


def test_training_improves_held_out_loss_across_seeds():
    config = LmConfig(vocab_size=16, n_layers=1, n_heads=2, d_model=16, d_ff=32, max_context=16)
    stop = 1
    train = [_sample([5, p], [p + 1, p + 2, stop]) for p in (6, 9)]
    held = [_sample([5, 12], [13, 14, stop])]

    def held_loss(params: dict) -> float:
        ids, targets, mask, _ = np.array([held[0].input_ids]), np.array(
            [held[0].target_ids]
        ), np.array([held[0].loss_mask], dtype=float), None
        return lm_loss(forward(params, ids, config), targets, mask)

    wins = 0
    for seed in (0, 1, 2):
        before = held_loss(init_lm_params(config, seed))
        params, _ = train_lm(train, config, seed=seed, steps=80, batch_size=2, lr=3e-3)
        wins += held_loss(params) < before
    assert wins >= 2


def test_trained_parameter_set_is_the_lm_alone():
    # The motion tokenizer stays frozen by construction: nothing beyond the
    # transformer's own named arrays ever reaches the optimizer.
    config = LmConfig(vocab_size=16, n_layers=1, n_heads=1, d_model=8, d_ff=16, max_context=16)
    params, _ = train_lm([_sample([5, 6], [7, 1])], config, seed=0, steps=2)
    assert set(params) == set(init_lm_params(config, seed=0))


def test_train_log_and_resume_from_init_params():
    config = LmConfig(vocab_size=16, n_layers=1, n_heads=1, d_model=8, d_ff=16, max_context=16)
    samples = [_sample([5, 6], [7, 1])]
    params, log = train_lm(samples, config, seed=0, steps=20, batch_size=2, log_every=5)
    assert log.steps[0] == 0 and log.steps[-1] == 19
    assert len(log.loss) == len(log.steps) == len(log.lr)
    assert log.wall_seconds > 0.0
    resumed, _ = train_lm(
        samples, config, seed=0, steps=3, batch_size=2, init_params=params, start_step=20
    )
    assert set(resumed) == set(params)


# ---------------------------------------------------------------------------
# persistence


def test_checkpoint_round_trip(tmp_path, small_params):
    path = tmp_path / "lm.ckpt"
    save_lm(path, small_params, SMALL, step=42)
    params, config, step = load_lm(path)
    assert config == SMALL
    assert step == 42
    assert set(params) == set(small_params)
    for name in params:
        assert np.array_equal(params[name], small_params[name])


def test_checkpoint_kind_is_enforced(tmp_path):
    path = tmp_path / "other.ckpt"
    Checkpoint(params={"w": np.zeros(2, dtype=np.float32)}, step=0, meta={"kind": "x"}).save(path)
    with pytest.raises(CheckpointError):
        load_lm(path)
