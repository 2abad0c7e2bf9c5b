"""Autoregressive transformer over the unified text+motion vocabulary.

A decoder-only causal transformer: learned token and position embeddings,
pre-norm attention and feed-forward blocks, and an output projection to the
unified vocabulary. Image-like conditioning enters by replacing the
embedding row at each visual-placeholder position with a projected visual
vector, so tokenization stays fixed and the projection trains jointly with
the model.

Training minimises the masked negative log-likelihood: only answer positions
(mask 1) contribute to the loss and its gradient. Decoding appends one token
at a time with an incremental key/value cache, stopping at the terminator id
or the new-token bound; greedy and seeded top-k modes are supported.

The two-phase recipe on top of a frozen motion tokenizer: the pretraining
stage restricts data to the three single-turn translation tasks (text to
motion, motion to text, image-conditioned motion), the instruction stage
uses the full multi-turn mixture.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .checkpoint import Checkpoint, CheckpointError
from .conversation import TrainingSample
from .optim import AdamW, cosine_schedule, default_warmup

LM_KIND = "conversation-lm"

PRETRAIN_TASKS = ("text-to-motion", "motion-to-text", "image-conditioned-motion")


class LmError(ValueError):
    """Raised for config violations, context overflow, or data mismatches."""


@dataclass(frozen=True)
class LmConfig:
    vocab_size: int
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 128
    d_ff: int = 512
    max_context: int = 512
    dropout: float = 0.0
    visual_dim: int | None = None
    vis_id: int | None = None

    def __post_init__(self) -> None:
        if min(self.vocab_size, self.n_layers, self.n_heads, self.d_model, self.d_ff) < 1:
            raise LmError("model dimensions must be positive")
        if self.d_model % self.n_heads != 0:
            raise LmError(f"d_model {self.d_model} not divisible by {self.n_heads} heads")
        if self.max_context < 1:
            raise LmError("context length must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise LmError(f"dropout {self.dropout} outside [0, 1)")
        if (self.visual_dim is None) != (self.vis_id is None):
            raise LmError("visual_dim and vis_id must be set together")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


def init_lm_params(config: LmConfig, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng([seed, 41])
    d, ff, v = config.d_model, config.d_ff, config.vocab_size

    def mat(rows: int, cols: int) -> np.ndarray:
        return rng.normal(0.0, 0.02, size=(rows, cols)).astype(np.float32)

    params: dict[str, np.ndarray] = {
        "emb.tok": mat(v, d),
        "emb.pos": mat(config.max_context, d),
    }
    for i in range(config.n_layers):
        p = f"h{i}."
        params[p + "ln1.g"] = np.ones(d, dtype=np.float32)
        params[p + "ln1.b"] = np.zeros(d, dtype=np.float32)
        for name in ("wq", "wk", "wv", "wo"):
            params[p + "attn." + name] = mat(d, d)
        for name in ("bq", "bk", "bv", "bo"):
            params[p + "attn." + name] = np.zeros(d, dtype=np.float32)
        params[p + "ln2.g"] = np.ones(d, dtype=np.float32)
        params[p + "ln2.b"] = np.zeros(d, dtype=np.float32)
        params[p + "ff.w1"] = mat(d, ff)
        params[p + "ff.b1"] = np.zeros(ff, dtype=np.float32)
        params[p + "ff.w2"] = mat(ff, d)
        params[p + "ff.b2"] = np.zeros(d, dtype=np.float32)
    params["out.ln.g"] = np.ones(d, dtype=np.float32)
    params["out.ln.b"] = np.zeros(d, dtype=np.float32)
    params["out.w"] = mat(d, v)
    params["out.b"] = np.zeros(v, dtype=np.float32)
    if config.visual_dim is not None:
        params["vis.w"] = mat(config.visual_dim, d)
        params["vis.b"] = np.zeros(d, dtype=np.float32)
    return params


def _causal_mask(t: int, dtype) -> np.ndarray:
    mask = np.zeros((t, t), dtype=dtype)
    mask[np.triu_indices(t, k=1)] = -np.inf
    return mask


def _affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, w), b)


def visual_positions(ids: np.ndarray, vis_id: int) -> list[tuple[int, int]]:
    """Row-major (batch, position) pairs of every placeholder occurrence."""
    rows, cols = np.nonzero(np.asarray(ids) == vis_id)
    return [(int(r), int(c)) for r, c in zip(rows, cols)]


def forward_graph(
    p: dict[str, Tensor],
    ids: np.ndarray,
    config: LmConfig,
    visual_rows: Tensor | None = None,
    mask_value_dtype=np.float32,
) -> Tensor:
    """Logits (B, T, V) on whatever tape the parameter tensors carry."""
    ids = np.asarray(ids)
    if ids.ndim == 1:
        ids = ids[None]
    b, t = ids.shape
    if t > config.max_context:
        raise LmError(f"sequence length {t} exceeds context {config.max_context}")
    x = ad.add(ad.embedding(p["emb.tok"], ids), ad.narrow(p["emb.pos"], 0, 0, t))
    if visual_rows is not None:
        if config.vis_id is None:
            raise LmError("visual rows supplied but the config declares no placeholder id")
        if visual_rows.data.shape[-1] != config.d_model:
            raise LmError(
                f"visual embedding dim {visual_rows.data.shape[-1]} "
                f"does not match model dim {config.d_model}"
            )
        positions = visual_positions(ids, config.vis_id)
        if len(positions) != visual_rows.data.shape[0]:
            raise LmError(
                f"{visual_rows.data.shape[0]} visual rows for "
                f"{len(positions)} placeholder positions"
            )
        x = ad.inject_rows(x, visual_rows, positions)
    h_dim, heads = config.d_head, config.n_heads
    scale = 1.0 / np.sqrt(h_dim)
    mask = _causal_mask(t, mask_value_dtype)
    for i in range(config.n_layers):
        pre = f"h{i}."
        xn = ad.layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])

        def split(z: Tensor) -> Tensor:
            return ad.transpose(ad.reshape(z, (b, t, heads, h_dim)), (0, 2, 1, 3))

        q = split(_affine(xn, p[pre + "attn.wq"], p[pre + "attn.bq"]))
        k = split(_affine(xn, p[pre + "attn.wk"], p[pre + "attn.bk"]))
        v = split(_affine(xn, p[pre + "attn.wv"], p[pre + "attn.bv"]))
        scores = ad.add(ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), scale), mask)
        ctx = ad.matmul(ad.softmax(scores, axis=-1), v)
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, t, config.d_model))
        x = ad.add(x, _affine(ctx, p[pre + "attn.wo"], p[pre + "attn.bo"]))
        hn = ad.layer_norm(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
        hidden = ad.gelu(_affine(hn, p[pre + "ff.w1"], p[pre + "ff.b1"]))
        x = ad.add(x, _affine(hidden, p[pre + "ff.w2"], p[pre + "ff.b2"]))
    xn = ad.layer_norm(x, p["out.ln.g"], p["out.ln.b"])
    return _affine(xn, p["out.w"], p["out.b"])


def forward(
    params: dict[str, np.ndarray],
    ids: np.ndarray,
    config: LmConfig,
    visual_rows: np.ndarray | None = None,
) -> np.ndarray:
    """Inference logits; same graph as training, nothing recorded."""
    tape = Tape()
    p = {name: tape.const(value) for name, value in params.items()}
    rows = tape.const(visual_rows) if visual_rows is not None else None
    squeeze = np.asarray(ids).ndim == 1
    logits = forward_graph(p, ids, config, visual_rows=rows)
    out = logits.data
    return out[0] if squeeze else out


def lm_loss(logits, targets: np.ndarray, mask: np.ndarray):
    """Masked mean negative log-likelihood.

    Accepts a graph tensor (returns a tensor for backward) or a plain array
    (returns a float). Mask-0 positions contribute exactly zero to the value
    and the gradient; an all-zero mask is an error, not a zero loss.
    """
    mask = np.asarray(mask)
    if mask.sum() == 0:
        raise LmError("loss mask selects no positions")
    if isinstance(logits, Tensor):
        return ad.cross_entropy(logits, np.asarray(targets), mask)
    tape = Tape()
    out = ad.cross_entropy(tape.const(np.asarray(logits)), np.asarray(targets), mask)
    return float(out.data)


# ---------------------------------------------------------------------------
# decoding


@dataclass(frozen=True)
class DecodingParams:
    stop_id: int
    max_new_tokens: int = 64
    mode: str = "greedy"
    k: int = 10
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in ("greedy", "topk"):
            raise LmError(f"unknown decoding mode {self.mode!r}")
        if self.k < 1:
            raise LmError("top-k needs k >= 1")
        if self.temperature <= 0.0:
            raise LmError("temperature must be positive")
        if self.max_new_tokens < 1:
            raise LmError("max new tokens must be at least 1")


class _DecodeState:
    """Incremental single-sequence decoding with per-layer K/V caches."""

    def __init__(self, params: dict[str, np.ndarray], config: LmConfig):
        self.params = params
        self.config = config
        self.length = 0
        self.caches: list[tuple[np.ndarray, np.ndarray]] = [
            (
                np.zeros((config.n_heads, 0, config.d_head), dtype=np.float32),
                np.zeros((config.n_heads, 0, config.d_head), dtype=np.float32),
            )
            for _ in range(config.n_layers)
        ]

    def append(self, embedded: np.ndarray) -> np.ndarray:
        """Feed ``embedded`` (T_new, d) rows; return logits for the last row."""
        p, cfg = self.params, self.config
        t_new = embedded.shape[0]
        heads, h_dim = cfg.n_heads, cfg.d_head
        scale = 1.0 / np.sqrt(h_dim)
        x = embedded
        for i in range(cfg.n_layers):
            pre = f"h{i}."
            xn = ad.np_layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])

            def split(z: np.ndarray) -> np.ndarray:
                return z.reshape(t_new, heads, h_dim).transpose(1, 0, 2)

            q = split(xn @ p[pre + "attn.wq"] + p[pre + "attn.bq"])
            k_new = split(xn @ p[pre + "attn.wk"] + p[pre + "attn.bk"])
            v_new = split(xn @ p[pre + "attn.wv"] + p[pre + "attn.bv"])
            k_all = np.concatenate([self.caches[i][0], k_new], axis=1)
            v_all = np.concatenate([self.caches[i][1], v_new], axis=1)
            self.caches[i] = (k_all, v_all)
            scores = q @ k_all.transpose(0, 2, 1) * scale
            total = k_all.shape[1]
            causal = np.zeros((t_new, total), dtype=scores.dtype)
            past = total - t_new
            causal[np.triu_indices(t_new, k=1 + past, m=total)] = -np.inf
            attn = ad.np_softmax(scores + causal, axis=-1)
            ctx = (attn @ v_all).transpose(1, 0, 2).reshape(t_new, cfg.d_model)
            x = x + ctx @ p[pre + "attn.wo"] + p[pre + "attn.bo"]
            hn = ad.np_layer_norm(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
            x = x + ad.np_gelu(hn @ p[pre + "ff.w1"] + p[pre + "ff.b1"]) @ p[pre + "ff.w2"] + p[pre + "ff.b2"]
        self.length += t_new
        xn = ad.np_layer_norm(x[-1:], p["out.ln.g"], p["out.ln.b"])
        return (xn @ p["out.w"] + p["out.b"])[0]


def _embed_rows(
    params: dict[str, np.ndarray],
    ids: list[int],
    offset: int,
    config: LmConfig,
    visual_rows: np.ndarray | None,
) -> np.ndarray:
    x = params["emb.tok"][np.asarray(ids)] + params["emb.pos"][offset : offset + len(ids)]
    if visual_rows is not None and config.vis_id is not None:
        slots = [i for i, t in enumerate(ids) if t == config.vis_id]
        if len(slots) != visual_rows.shape[0]:
            raise LmError(
                f"{visual_rows.shape[0]} visual rows for {len(slots)} placeholder positions"
            )
        x = x.copy()
        x[slots] = visual_rows
    return x


def generate(
    params: dict[str, np.ndarray],
    config: LmConfig,
    context_ids: list[int],
    decoding: DecodingParams,
    visual_rows: np.ndarray | None = None,
) -> list[int]:
    """Answer ids, terminator included when reached within the bound."""
    context_ids = [int(i) for i in context_ids]
    if not context_ids:
        raise LmError("empty context")
    if len(context_ids) + decoding.max_new_tokens > config.max_context:
        raise LmError(
            f"context {len(context_ids)} + {decoding.max_new_tokens} new tokens "
            f"exceeds the {config.max_context} window"
        )
    state = _DecodeState(params, config)
    logits = state.append(_embed_rows(params, context_ids, 0, config, visual_rows))
    rng = np.random.default_rng(decoding.seed)
    out: list[int] = []
    for _ in range(decoding.max_new_tokens):
        next_id = _select(logits, decoding, rng)
        out.append(next_id)
        if next_id == decoding.stop_id:
            break
        logits = state.append(
            _embed_rows(params, [next_id], state.length, config, None)
        )
    return out


def _select(logits: np.ndarray, decoding: DecodingParams, rng: np.random.Generator) -> int:
    if decoding.mode == "greedy":
        return int(np.argmax(logits))
    scaled = logits.astype(np.float64) / decoding.temperature
    k = min(decoding.k, scaled.shape[0])
    # Ties resolve toward lower ids so sampling stays platform-stable.
    order = np.lexsort((np.arange(scaled.shape[0]), -scaled))
    top = order[:k]
    probs = ad.np_softmax(scaled[top])
    return int(top[rng.choice(k, p=probs)])


# ---------------------------------------------------------------------------
# training


@dataclass
class LmTrainLog:
    steps: list[int] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    wall_seconds: float = 0.0


def _check_dataset(samples: list[TrainingSample], config: LmConfig) -> None:
    for sample in samples:
        top = max(max(sample.input_ids), max(sample.target_ids))
        if top >= config.vocab_size:
            raise LmError(
                f"dataset id {top} outside vocabulary of size {config.vocab_size}"
            )
        if len(sample.input_ids) > config.max_context:
            raise LmError(
                f"sample length {len(sample.input_ids)} exceeds context {config.max_context}"
            )
        if sample.visual is not None:
            if config.visual_dim is None:
                raise LmError("dataset has visual samples but config.visual_dim is unset")
            if len(sample.visual) != config.visual_dim:
                raise LmError(
                    f"visual vector dim {len(sample.visual)} != {config.visual_dim}"
                )


def select_stage(samples: list[TrainingSample], stage: str) -> list[TrainingSample]:
    """Pretraining keeps the three single-turn translation tasks only."""
    if stage == "pretrain":
        kept = [s for s in samples if s.task in PRETRAIN_TASKS and s.turns == 1]
        if not kept:
            raise LmError("no single-turn translation samples for the pretrain stage")
        return kept
    if stage == "instruct":
        return list(samples)
    raise LmError(f"unknown training stage {stage!r}")


def _batch_arrays(
    batch: list[TrainingSample], config: LmConfig
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray | None]:
    width = max(len(s.input_ids) for s in batch)
    ids = np.zeros((len(batch), width), dtype=np.int64)
    targets = np.zeros((len(batch), width), dtype=np.int64)
    mask = np.zeros((len(batch), width), dtype=np.float32)
    visuals: list[np.ndarray] = []
    for row, sample in enumerate(batch):
        n = len(sample.input_ids)
        ids[row, :n] = sample.input_ids
        targets[row, :n] = sample.target_ids
        mask[row, :n] = sample.loss_mask
        if sample.visual is not None:
            visuals.append(np.asarray(sample.visual, dtype=np.float32))
    stacked = np.stack(visuals) if visuals else None
    return ids, targets, mask, stacked


def train_lm(
    samples: list[TrainingSample],
    config: LmConfig,
    seed: int,
    stage: str = "instruct",
    steps: int = 600,
    batch_size: int = 8,
    lr: float = 3e-4,
    init_params: dict[str, np.ndarray] | None = None,
    start_step: int = 0,
    checkpoint_every: int = 0,
    checkpoint_path=None,
    log_every: int = 50,
) -> tuple[dict[str, np.ndarray], LmTrainLog]:
    """AdamW + warmup/cosine over the masked objective; returns (params, log).

    The motion tokenizer never appears in the parameter set: its codes enter
    the data as plain ids, so its weights stay frozen by construction.
    """
    chosen = select_stage(samples, stage)
    _check_dataset(chosen, config)
    params = (
        {name: value.copy() for name, value in init_params.items()}
        if init_params is not None
        else init_lm_params(config, seed)
    )
    opt = AdamW(lr=lr)
    warmup = default_warmup(steps)
    rng = np.random.default_rng([seed, 11])
    log = LmTrainLog()
    t0 = time.perf_counter()
    for step in range(start_step, start_step + steps):
        batch = [chosen[i] for i in rng.integers(0, len(chosen), size=batch_size)]
        ids, targets, mask, visuals = _batch_arrays(batch, config)
        tape = Tape()
        leaves = {name: tape.leaf(value) for name, value in params.items()}
        rows = None
        if visuals is not None:
            feats = tape.const(visuals)
            rows = _affine(feats, leaves["vis.w"], leaves["vis.b"])
        logits = forward_graph(leaves, ids, config, visual_rows=rows)
        loss = lm_loss(logits, targets, mask)
        tape.backward(loss)
        grads = {name: leaves[name].grad for name in params}
        rate = cosine_schedule(step - start_step, steps, lr, warmup)
        opt.step(params, grads, lr=rate)
        if log_every and (step % log_every == 0 or step == start_step + steps - 1):
            log.steps.append(step)
            log.loss.append(float(loss.data))
            log.lr.append(rate)
        if checkpoint_every and checkpoint_path and (step + 1) % checkpoint_every == 0:
            save_lm(checkpoint_path, params, config, step + 1)
    log.wall_seconds = time.perf_counter() - t0
    if checkpoint_path and checkpoint_every:
        save_lm(checkpoint_path, params, config, start_step + steps)
    return params, log


# ---------------------------------------------------------------------------
# persistence


def save_lm(path, params: dict[str, np.ndarray], config: LmConfig, step: int) -> None:
    meta = {"kind": LM_KIND, "config": asdict(config)}
    Checkpoint(params=params, step=step, meta=meta).save(path)


def load_lm(path) -> tuple[dict[str, np.ndarray], LmConfig, int]:
    ck = Checkpoint.load(path)
    if ck.meta.get("kind") != LM_KIND:
        raise CheckpointError(f"{path}: not a conversation model checkpoint")
    config = LmConfig(**ck.meta["config"])
    return ck.params, config, ck.step
