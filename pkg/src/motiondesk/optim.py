"""AdamW with decoupled weight decay and a warmup+cosine learning schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def cosine_schedule(
    step: int, total_steps: int, lr: float, warmup_steps: int, lr_min_ratio: float = 0.01
) -> float:
    """Linear warmup then cosine decay to ``lr * lr_min_ratio``.

    ``step`` is zero-based; the schedule is defined for ``step >= total_steps``
    too (it stays at the floor), so overshooting a run is harmless.
    """
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    lr_min = lr * lr_min_ratio
    if warmup_steps > 0 and step < warmup_steps:
        return lr * (step + 1) / warmup_steps
    # Reaches lr exactly at the end of warmup and lr_min at the final step.
    span = max(total_steps - 1 - warmup_steps, 1)
    progress = min((step - warmup_steps) / span, 1.0)
    return lr_min + (lr - lr_min) * 0.5 * (1.0 + np.cos(np.pi * progress))


def default_warmup(total_steps: int) -> int:
    """1% of the run, at least 10 steps (or the whole run if shorter)."""
    return min(max(total_steps // 100, 10), total_steps)


@dataclass
class AdamW:
    """Decoupled-weight-decay Adam over a named parameter dict.

    Moment buffers are keyed by parameter name so checkpoint/restore and
    parameter iteration order cannot drift apart.
    """

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    _m: dict[str, np.ndarray] = field(default_factory=dict)
    _v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(
        self,
        params: dict[str, np.ndarray],
        grads: dict[str, np.ndarray],
        lr: float | None = None,
    ) -> None:
        """Update ``params`` in place; ``lr`` overrides the stored rate."""
        rate = self.lr if lr is None else lr
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name in params:
            p = params[name]
            g = grads.get(name)
            if g is None:
                continue
            g = g.astype(p.dtype, copy=False)
            m = self._m.get(name)
            if m is None:
                m = self._m[name] = np.zeros_like(p)
                self._v[name] = np.zeros_like(p)
            v = self._v[name]
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            mhat = m / bc1
            vhat = v / bc2
            if self.weight_decay:
                p -= rate * self.weight_decay * p
            p -= rate * mhat / (np.sqrt(vhat) + self.eps)
