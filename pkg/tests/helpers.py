"""Shared test utilities: gradient checking and structured motion builders.

The gradient checker treats the tape as a black box: every op output is
reduced to a scalar through a fixed random projection, and each input
element is probed with central differences in float64. The motion builders
construct clips with known structure for composition protocols. Both are
used by the unit suites and the acceptance gate.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

from motiondesk.autodiff import Tape, Tensor
from motiondesk.corpus import FAMILIES, make_labeled_clip
from motiondesk.features import extract_features
from motiondesk.skeleton import MotionClip, default_rig


def numerical_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of ``f`` with respect to ``x`` in place."""
    g = np.zeros_like(x)
    flat_x = x.reshape(-1)
    flat_g = g.reshape(-1)
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + h
        fp = f()
        flat_x[i] = orig - h
        fm = f()
        flat_x[i] = orig
        flat_g[i] = (fp - fm) / (2.0 * h)
    return g


def max_rel_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1.0)
    return float(np.max(np.abs(a - b) / scale)) if a.size else 0.0


def check_gradients(
    build: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    rng: np.random.Generator,
    h: float = 1e-5,
    tol: float = 1e-4,
) -> float:
    """Compare tape gradients of ``build(tape, *leaves)`` against differences.

    ``build`` must return a non-scalar tensor or a scalar loss; non-scalar
    outputs are contracted with a fixed random projection so the whole
    Jacobian is exercised. Returns the worst relative error seen; raises
    AssertionError past ``tol``.
    """
    inputs = [np.asarray(x, dtype=np.float64) for x in inputs]
    proj_holder: dict[int, np.ndarray] = {}

    def scalar_loss() -> float:
        tape = Tape()
        leaves = [tape.leaf(x) for x in inputs]
        out = build(tape, *leaves)
        if out.data.ndim == 0:
            return float(out.data)
        if 0 not in proj_holder:
            proj_holder[0] = rng.normal(size=out.data.shape)
        return float(np.sum(out.data * proj_holder[0]))

    # Analytic pass.
    tape = Tape()
    leaves = [tape.leaf(x) for x in inputs]
    out = build(tape, *leaves)
    if out.data.ndim == 0:
        loss = out
    else:
        if 0 not in proj_holder:
            proj_holder[0] = rng.normal(size=out.data.shape)
        from motiondesk.autodiff import mul, reduce_sum

        loss = reduce_sum(mul(out, proj_holder[0]))
    tape.backward(loss)

    worst = 0.0
    for x, leaf in zip(inputs, leaves):
        numeric = numerical_grad(scalar_loss, x, h=h)
        err = max_rel_error(leaf.grad, numeric)
        worst = max(worst, err)
        assert err < tol, f"gradient mismatch {err:.3e} (tol {tol:.1e}) for input shape {x.shape}"
    return worst


def family_pairs() -> list[tuple[str, str]]:
    """All ordered pairs of distinct motion families."""
    return [(a, b) for a, b in itertools.product(FAMILIES, FAMILIES) if a != b]


def make_two_phase_features(
    family_a: str,
    family_b: str,
    seed: int,
    n_frames: int = 64,
    blend: int = 8,
    fps: float = 20.0,
) -> np.ndarray:
    """Features of one continuous clip that switches behavior at the midpoint.

    The first half moves like ``family_a``, the second like ``family_b``.
    Root steps and joint rotations crossfade over ``blend`` frames centered
    on the midpoint, so the clip is a single coherent motion with a genuine
    transition rather than two clips glued together. Splitting it at the
    midpoint yields a segment pair whose recomposition can be scored against
    the whole clip.
    """
    skeleton = default_rig()
    half = n_frames // 2
    a = make_labeled_clip(family_a, seed, 0, n_frames=n_frames, fps=fps, skeleton=skeleton).clip
    b = make_labeled_clip(family_b, seed, 1, n_frames=n_frames, fps=fps, skeleton=skeleton).clip
    lo = half - blend // 2
    hi = half + blend // 2
    w = np.clip((np.arange(n_frames) - lo) / max(hi - lo, 1), 0.0, 1.0)

    step_a = np.diff(a.root_pos, axis=0)
    step_b = np.diff(b.root_pos, axis=0)
    root = np.empty_like(a.root_pos)
    root[0] = a.root_pos[0]
    for t in range(1, n_frames):
        root[t] = root[t - 1] + (1.0 - w[t]) * step_a[t - 1] + w[t] * step_b[t - 1]

    # Sign-align before blending so antipodal quaternions do not cancel.
    flip = (a.quats * b.quats).sum(axis=-1, keepdims=True) < 0.0
    quats_b = np.where(flip, -b.quats, b.quats)
    quats = (1.0 - w[:, None, None]) * a.quats + w[:, None, None] * quats_b

    clip = MotionClip(fps=fps, skeleton=skeleton, root_pos=root, quats=quats)
    return extract_features(clip)
