"""Residual vector-quantized autoencoder over motion features.

A strided temporal conv encoder maps ``T`` feature frames to ``L = T / l``
latent rows (``l`` a power of two); each row is quantized by ``Q`` stacked
codebooks, every layer quantizing the residual its predecessors left behind.
The decoder mirrors the encoder with nearest-neighbor upsampling and emits
``l * L`` frames exactly.

Training minimizes reconstruction error plus a codebook pull term (stop
gradient on the encoder side) and a commitment term (stop gradient on the
codebook side) weighted by ``beta_commit``, with the straight-through
estimator carrying decoder gradients into the encoder. Nearest-neighbor
search always runs in float64 with ties broken toward the lowest index.

Entry 0 of every codebook is a reserved pass-through code pinned to the zero
vector during training. Its presence in the candidate set means the best
quantization distance never exceeds the row norm, so per-row residual norms
are non-increasing across layers by construction, not just empirically.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .checkpoint import Checkpoint, CheckpointError
from .features import feature_dim
from .optim import AdamW, cosine_schedule, default_warmup

TOKENIZER_KIND = "motion-tokenizer"
TOKENS_FORMAT_VERSION = 1


@dataclass(frozen=True)
class TokenizerConfig:
    n_joints: int = 5
    codebook_size: int = 64
    code_dim: int = 64
    n_quantizers: int = 2
    downsample: int = 4
    hidden: int = 96
    beta_commit: float = 0.25

    def __post_init__(self) -> None:
        if self.downsample < 1 or (self.downsample & (self.downsample - 1)) != 0:
            raise ValueError(f"downsample must be a power of two, got {self.downsample}")
        for field_name in ("codebook_size", "code_dim", "n_quantizers", "hidden", "n_joints"):
            if getattr(self, field_name) < 1:
                raise ValueError(f"{field_name} must be positive")

    @property
    def n_stages(self) -> int:
        return int(np.log2(self.downsample))

    @property
    def feature_dim(self) -> int:
        return feature_dim(self.n_joints)


@dataclass
class MotionTokens:
    """Discrete codes (n_quantizers, L), layer-major."""

    layers: np.ndarray
    downsample: int

    def __post_init__(self) -> None:
        self.layers = np.asarray(self.layers, dtype=np.int64)
        if self.layers.ndim != 2:
            raise ValueError(f"token layers must be 2-D, got shape {self.layers.shape}")

    @property
    def n_quantizers(self) -> int:
        return self.layers.shape[0]

    @property
    def length(self) -> int:
        return self.layers.shape[1]

    @property
    def n_frames(self) -> int:
        return self.length * self.downsample

    def save(self, path: str | Path) -> None:
        doc = {
            "format_version": TOKENS_FORMAT_VERSION,
            "downsample": self.downsample,
            "layers": self.layers.tolist(),
        }
        Path(path).write_text(json.dumps(doc), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "MotionTokens":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: not valid JSON: {exc}") from exc
        version = doc.get("format_version")
        if version != TOKENS_FORMAT_VERSION:
            raise ValueError(f"unsupported tokens format_version {version!r}")
        for field in ("downsample", "layers"):
            if field not in doc:
                raise ValueError(f"tokens file missing field {field!r}")
        return cls(layers=np.asarray(doc["layers"]), downsample=int(doc["downsample"]))


def quantize(z: np.ndarray, codebook: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest codebook row per input row under squared L2.

    Distances are computed in float64 regardless of input dtype; equidistant
    entries resolve to the lowest index. Returns ``(codes, codebook[codes])``.
    """
    z2 = np.asarray(z)
    if z2.ndim != 2 or codebook.ndim != 2 or z2.shape[1] != codebook.shape[1]:
        raise ValueError(f"quantize shapes incompatible: {z2.shape} vs {codebook.shape}")
    diff = z2.astype(np.float64)[:, None, :] - codebook.astype(np.float64)[None, :, :]
    dist = np.sum(diff * diff, axis=-1)
    codes = np.argmin(dist, axis=1)
    return codes, codebook[codes]


def residual_quantize(z: np.ndarray, codebooks: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray, list[np.ndarray]]:
    """Stacked quantization of successive residuals.

    Returns ``(codes (Q, rows), quantized_sum (rows, d), residual_inputs)``
    where ``residual_inputs[q]`` is what layer ``q`` saw.
    """
    rows = np.asarray(z, dtype=np.float64)
    residual = rows.copy()
    total = np.zeros_like(rows)
    codes = np.empty((len(codebooks), rows.shape[0]), dtype=np.int64)
    residual_inputs = []
    for q, book in enumerate(codebooks):
        residual_inputs.append(residual.copy())
        idx, picked = quantize(residual, book)
        codes[q] = idx
        picked = picked.astype(np.float64)
        total += picked
        residual -= picked
    return codes, total, residual_inputs


def _edge_pad(x: Tensor, pad: int = 1) -> Tensor:
    """Replicate the boundary frames along the time axis (dim 1).

    Zero padding would splice the feature mean into every window edge (the
    features are normalized), dragging boundary frames toward the mean pose;
    replication lets edges extrapolate the adjacent pose instead, which keeps
    segment boundaries at full motion amplitude.
    """
    first = ad.narrow(x, 1, 0, 1)
    last = ad.narrow(x, 1, x.data.shape[1] - 1, 1)
    return ad.concat([first] * pad + [x] + [last] * pad, axis=1)


class MotionTokenizer:
    """Trained encoder/decoder/codebook bundle operating on raw features."""

    def __init__(self, config: TokenizerConfig, params: dict[str, np.ndarray], step: int = 0):
        self.config = config
        self.params = params
        self.step = step

    # -- construction -------------------------------------------------------

    @classmethod
    def initialize(cls, config: TokenizerConfig, seed: int) -> "MotionTokenizer":
        rng = np.random.default_rng([seed, 7001])
        params: dict[str, np.ndarray] = {}

        def conv(name: str, k: int, cin: int, cout: int) -> None:
            scale = np.sqrt(2.0 / (k * cin))
            params[f"{name}.w"] = rng.normal(0.0, scale, size=(k, cin, cout)).astype(np.float32)
            params[f"{name}.b"] = np.zeros(cout, dtype=np.float32)

        d_in, h, d_code = config.feature_dim, config.hidden, config.code_dim
        conv("enc.in", 3, d_in, h)
        for i in range(config.n_stages):
            conv(f"enc.d{i}", 4, h, h)
        conv("enc.out", 3, h, d_code)
        conv("dec.in", 3, d_code, h)
        for i in range(config.n_stages):
            conv(f"dec.u{i}", 3, h, h)
        conv("dec.out", 3, h, d_in)
        for q in range(config.n_quantizers):
            book = rng.normal(0.0, 0.5, size=(config.codebook_size, config.code_dim))
            # Entry 0 is a reserved pass-through code pinned to zero; with it in
            # the candidate set, quantizing can never grow a residual's norm.
            book[0] = 0.0
            params[f"codebook.q{q}"] = book.astype(np.float32)
        params["feat.mean"] = np.zeros(d_in, dtype=np.float32)
        params["feat.std"] = np.ones(d_in, dtype=np.float32)
        return cls(config, params, step=0)

    # -- persistence --------------------------------------------------------

    def save(self, path) -> None:
        meta = {"kind": TOKENIZER_KIND, "config": asdict(self.config)}
        Checkpoint(params=self.params, step=self.step, meta=meta).save(path)

    @classmethod
    def load(cls, path) -> "MotionTokenizer":
        ck = Checkpoint.load(path)
        if ck.meta.get("kind") != TOKENIZER_KIND:
            raise CheckpointError(f"{path}: not a motion tokenizer checkpoint")
        config = TokenizerConfig(**ck.meta["config"])
        return cls(config, ck.params, step=ck.step)

    # -- graph builders -----------------------------------------------------

    def _wrap(self, tape: Tape, trainable: bool) -> dict[str, Tensor]:
        out = {}
        for name, arr in self.params.items():
            frozen = name.startswith("feat.")
            out[name] = tape.const(arr) if (frozen or not trainable) else tape.leaf(arr)
        return out

    def _encode_graph(self, tape: Tape, x: Tensor, p: dict[str, Tensor]) -> Tensor:
        h = ad.gelu(ad.conv1d(_edge_pad(x), p["enc.in.w"], p["enc.in.b"], stride=1))
        for i in range(self.config.n_stages):
            h = ad.gelu(ad.conv1d(_edge_pad(h), p[f"enc.d{i}.w"], p[f"enc.d{i}.b"], stride=2))
        return ad.conv1d(_edge_pad(h), p["enc.out.w"], p["enc.out.b"], stride=1)

    def _decode_graph(self, tape: Tape, z: Tensor, p: dict[str, Tensor]) -> Tensor:
        h = ad.gelu(ad.conv1d(_edge_pad(z), p["dec.in.w"], p["dec.in.b"], stride=1))
        for i in range(self.config.n_stages):
            h = ad.upsample_nearest(h, 2)
            h = ad.gelu(ad.conv1d(_edge_pad(h), p[f"dec.u{i}.w"], p[f"dec.u{i}.b"], stride=1))
        return ad.conv1d(_edge_pad(h), p["dec.out.w"], p["dec.out.b"], stride=1)

    # -- normalization ------------------------------------------------------

    def normalize(self, features: np.ndarray) -> np.ndarray:
        return (features - self.params["feat.mean"]) / self.params["feat.std"]

    def denormalize(self, features: np.ndarray) -> np.ndarray:
        return features * self.params["feat.std"] + self.params["feat.mean"]

    def _check_frames(self, t: int) -> None:
        l = self.config.downsample
        if t % l != 0:
            raise ValueError(
                f"frame count {t} is not divisible by the downsample rate {l}; "
                f"trim or pad the clip to a multiple of {l}"
            )

    @property
    def codebooks(self) -> list[np.ndarray]:
        return [self.params[f"codebook.q{q}"] for q in range(self.config.n_quantizers)]

    # -- public API ---------------------------------------------------------

    def encode(self, features: np.ndarray) -> MotionTokens:
        """Features (T, D) -> discrete codes (Q, T / l)."""
        features = np.asarray(features, dtype=np.float32)
        if features.ndim != 2 or features.shape[1] != self.config.feature_dim:
            raise ValueError(
                f"feature shape {features.shape} does not match dim {self.config.feature_dim}"
            )
        self._check_frames(features.shape[0])
        tape = Tape()
        p = self._wrap(tape, trainable=False)
        x = tape.const(self.normalize(features)[None].astype(np.float32))
        z = self._encode_graph(tape, x, p).data[0]
        codes, _, _ = residual_quantize(z, self.codebooks)
        return MotionTokens(layers=codes, downsample=self.config.downsample)

    def decode(self, tokens: MotionTokens | np.ndarray) -> np.ndarray:
        """Codes (Q, L) -> features (l * L, D)."""
        layers = tokens.layers if isinstance(tokens, MotionTokens) else np.asarray(tokens)
        if layers.ndim != 2 or layers.shape[0] != self.config.n_quantizers:
            raise ValueError(
                f"token layers shape {layers.shape} does not match "
                f"{self.config.n_quantizers} quantizer layers"
            )
        if np.any(layers < 0) or np.any(layers >= self.config.codebook_size):
            raise ValueError(f"token id out of range [0, {self.config.codebook_size})")
        z = np.zeros((layers.shape[1], self.config.code_dim), dtype=np.float64)
        for q, book in enumerate(self.codebooks):
            z += book[layers[q]]
        z = z.astype(np.float32)
        tape = Tape()
        p = self._wrap(tape, trainable=False)
        out = self._decode_graph(tape, tape.const(z[None]), p).data[0]
        return self.denormalize(out.astype(np.float64))

    def reconstruct(self, features: np.ndarray) -> np.ndarray:
        return self.decode(self.encode(features))

    def compose_decode(self, segments: list[MotionTokens]) -> np.ndarray:
        """Concatenate code sequences along time, then decode once.

        Decoding the joined sequence lets the decoder's receptive field span
        segment boundaries, so seams come out smoother than decoding each
        segment alone and splicing frames.
        """
        if not segments:
            raise ValueError("compose_decode needs at least one segment")
        counts = {s.n_quantizers for s in segments}
        if len(counts) != 1:
            raise ValueError(f"segments disagree on quantizer layers: {sorted(counts)}")
        if any(s.length == 0 for s in segments):
            raise ValueError("empty segment")
        joined = np.concatenate([s.layers for s in segments], axis=1)
        return self.decode(MotionTokens(layers=joined, downsample=self.config.downsample))


@dataclass
class TrainLog:
    steps: list[int]
    loss: list[float]
    recon: list[float]
    codebook: list[float]
    commit: list[float]
    seconds: float = 0.0


def train_tokenizer(
    feature_clips: list[np.ndarray],
    config: TokenizerConfig,
    steps: int = 2000,
    batch_size: int = 24,
    lr: float = 2e-4,
    seed: int = 0,
    window: int | None = None,
    reseed_every: int = 50,
    log_every: int = 50,
) -> tuple[MotionTokenizer, TrainLog]:
    """Train a tokenizer on raw feature clips.

    Each step samples ``batch_size`` windows of ``window`` frames (default:
    shortest clip length rounded down to a multiple of the downsample rate).
    Codebook entries unused over the last ``reseed_every`` steps are re-seeded
    from current encoder outputs so capacity is not wasted on dead codes.
    """
    start = time.perf_counter()
    if not feature_clips:
        raise ValueError("feature_clips is empty")
    clips = [np.asarray(c, dtype=np.float64) for c in feature_clips]
    l = config.downsample
    if window is None:
        window = min(c.shape[0] for c in clips) // l * l
    if window < l:
        raise ValueError(f"window {window} shorter than downsample rate {l}")
    for i, c in enumerate(clips):
        if c.ndim != 2 or c.shape[1] != config.feature_dim:
            raise ValueError(f"clip {i} feature shape {c.shape} does not match config")
        if c.shape[0] < window:
            raise ValueError(f"clip {i} shorter ({c.shape[0]}) than window {window}")

    model = MotionTokenizer.initialize(config, seed)
    stacked = np.concatenate(clips, axis=0)
    mean = stacked.mean(axis=0)
    std = np.maximum(stacked.std(axis=0), 1e-4)
    model.params["feat.mean"] = mean.astype(np.float32)
    model.params["feat.std"] = std.astype(np.float32)

    rng = np.random.default_rng([seed, 7002])
    opt = AdamW(lr=lr, beta1=0.9, beta2=0.99)
    warmup = default_warmup(steps)
    usage = [np.zeros(config.codebook_size, dtype=np.int64) for _ in range(config.n_quantizers)]
    log = TrainLog(steps=[], loss=[], recon=[], codebook=[], commit=[])

    for step in range(steps):
        idx = rng.integers(0, len(clips), size=batch_size)
        starts = [int(rng.integers(0, clips[i].shape[0] - window + 1)) for i in idx]
        batch = np.stack(
            [(clips[i][s : s + window] - mean) / std for i, s in zip(idx, starts)]
        ).astype(np.float32)

        tape = Tape()
        p = model._wrap(tape, trainable=True)
        x = tape.const(batch)
        z_e = model._encode_graph(tape, x, p)
        b, length, d = z_e.data.shape
        flat_value = z_e.data.reshape(-1, d)
        codes, total, residual_inputs = residual_quantize(flat_value, model.codebooks)
        for q in range(config.n_quantizers):
            usage[q] += np.bincount(codes[q], minlength=config.codebook_size)

        z_flat = ad.reshape(z_e, (b * length, d))
        quantized = ad.straight_through(z_flat, total.astype(np.float32))
        recon = model._decode_graph(tape, ad.reshape(quantized, (b, length, d)), p)
        diff = ad.sub(recon, x)
        loss_recon = ad.reduce_mean(ad.mul(diff, diff))

        terms = [loss_recon]
        loss_code_v = 0.0
        loss_commit_v = 0.0
        residual_t = z_flat
        for q in range(config.n_quantizers):
            picked = ad.embedding(p[f"codebook.q{q}"], codes[q])
            pull = ad.sub(picked, residual_inputs[q].astype(np.float32))
            l_code = ad.reduce_mean(ad.mul(pull, pull))
            commit = ad.sub(residual_t, picked.data)
            l_commit = ad.reduce_mean(ad.mul(commit, commit))
            terms.append(l_code)
            terms.append(ad.mul(l_commit, config.beta_commit))
            loss_code_v += float(l_code.data)
            loss_commit_v += float(l_commit.data)
            residual_t = ad.sub(residual_t, picked.data)
        loss = terms[0]
        for t in terms[1:]:
            loss = ad.add(loss, t)
        tape.backward(loss)

        grads = {name: t.grad for name, t in p.items() if t.requires_grad}
        rate = cosine_schedule(step, steps, lr, warmup)
        opt.step(model.params, grads, lr=rate)
        for q in range(config.n_quantizers):
            model.params[f"codebook.q{q}"][0] = 0.0

        if reseed_every and (step + 1) % reseed_every == 0:
            for q in range(config.n_quantizers):
                dead = np.flatnonzero(usage[q] == 0)
                dead = dead[dead != 0]
                if dead.size:
                    source = residual_inputs[q]
                    pick = rng.integers(0, source.shape[0], size=dead.size)
                    model.params[f"codebook.q{q}"][dead] = source[pick].astype(np.float32)
                usage[q][:] = 0

        if step % log_every == 0 or step == steps - 1:
            log.steps.append(step)
            log.loss.append(float(loss.data))
            log.recon.append(float(loss_recon.data))
            log.codebook.append(loss_code_v)
            log.commit.append(loss_commit_v)

    model.step = steps
    log.seconds = time.perf_counter() - start
    return model, log
