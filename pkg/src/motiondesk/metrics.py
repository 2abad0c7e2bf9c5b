"""Evaluation suite: motion quality, diversity, retrieval, language, speed.

Positions are in meters and reported in millimeters; ACCL is mm per squared
frame. All stochastic pieces (subset splits, mismatch sampling, the shared
embedding projections) are seeded, so a report is a pure function of its
inputs and seed.

The embedding side deliberately uses a fixed random projection rather than a
learned evaluator: time-averaged motion features and hashed caption subwords
through seed-determined matrices. Absolute scores are therefore meaningful
only relative to each other, which is all the toy-scale comparisons need.
"""

from __future__ import annotations

import re
import time
import zlib
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

import numpy as np

MM_PER_M = 1000.0

_CI95_Z = 1.96


class MetricsError(ValueError):
    """Raised for shape mismatches, insufficient samples, or bad stats."""


# ---------------------------------------------------------------------------
# distribution statistics and FID


@dataclass(frozen=True)
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    def __post_init__(self) -> None:
        mean = np.asarray(self.mean, dtype=np.float64)
        cov = np.asarray(self.cov, dtype=np.float64)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        if mean.ndim != 1 or cov.shape != (mean.shape[0], mean.shape[0]):
            raise MetricsError(f"stats shapes {mean.shape} / {cov.shape} are inconsistent")
        if self.count < 2:
            raise MetricsError("need at least 2 samples for covariance statistics")
        if not np.allclose(cov, cov.T, atol=1e-8):
            raise MetricsError("covariance is not symmetric within 1e-8")

    @classmethod
    def from_features(cls, features: np.ndarray) -> "GaussianStats":
        x = np.asarray(features, dtype=np.float64)
        if x.ndim != 2:
            raise MetricsError(f"feature matrix must be 2-D, got shape {x.shape}")
        if x.shape[0] < 2:
            raise MetricsError("need at least 2 samples for covariance statistics")
        cov = np.cov(x, rowvar=False, ddof=1).reshape(x.shape[1], x.shape[1])
        return cls(mean=x.mean(axis=0), cov=cov, count=x.shape[0])


def _psd_sqrtm(m: np.ndarray, eig_floor: float) -> np.ndarray:
    """Symmetric PSD square root; eigenvalues below ``eig_floor`` are an error."""
    sym = (m + m.T) / 2.0
    vals, vecs = np.linalg.eigh(sym)
    if vals.min() < eig_floor:
        raise MetricsError(f"matrix eigenvalue {vals.min():.3e} below PSD tolerance")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid(a: GaussianStats, b: GaussianStats, eig_floor: float = -1e-8) -> float:
    """Fréchet distance ‖μ_a−μ_b‖² + Tr(Σ_a+Σ_b−2(Σ_aΣ_b)^½) between Gaussians."""
    if a.mean.shape != b.mean.shape:
        raise MetricsError(f"stat dims differ: {a.mean.shape} vs {b.mean.shape}")
    sqrt_a = _psd_sqrtm(a.cov, eig_floor)
    inner = _psd_sqrtm(sqrt_a @ b.cov @ sqrt_a, eig_floor)
    diff = a.mean - b.mean
    value = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.trace(inner))
    return max(value, 0.0)


# ---------------------------------------------------------------------------
# pose error family


def _check_positions(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise MetricsError(f"position shapes differ: {pred.shape} vs {gt.shape}")
    if pred.ndim != 3 or pred.shape[-1] != 3:
        raise MetricsError(f"positions must be (frames, joints, 3), got {pred.shape}")
    return pred, gt


def similarity_align(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Best-fit scale + rotation + translation of ``pred`` onto ``gt``.

    Orthogonal Procrustes over the pooled point cloud, reflection-corrected,
    with the uniform scale of the Gower alignment convention.
    """
    p = pred.reshape(-1, 3)
    g = gt.reshape(-1, 3)
    mu_p = p.mean(axis=0)
    mu_g = g.mean(axis=0)
    pc = p - mu_p
    gc = g - mu_g
    u, s, vt = np.linalg.svd(pc.T @ gc)
    d = np.ones(3)
    d[-1] = np.sign(np.linalg.det(u @ vt))
    rot = u @ np.diag(d) @ vt
    denom = (pc * pc).sum()
    if denom == 0.0:
        return np.broadcast_to(mu_g, pred.shape).copy()
    scale = (s * d).sum() / denom
    return (scale * (pc @ rot) + mu_g).reshape(pred.shape)


def mpjpe_family(pred: np.ndarray, gt: np.ndarray) -> dict[str, float]:
    """MPJPE / PA-MPJPE in mm and ACCL in mm per frame squared."""
    pred, gt = _check_positions(pred, gt)
    if pred.shape[0] < 3:
        raise MetricsError("acceleration error needs at least 3 frames")

    def joint_mean(a: np.ndarray, b: np.ndarray) -> float:
        return float(np.linalg.norm(a - b, axis=-1).mean()) * MM_PER_M

    mpjpe = joint_mean(pred, gt)
    # The Procrustes fit minimizes summed squared error, which on rare draws
    # nudges the mean unsquared error above the identity's. Identity stays in
    # the candidate set so the aligned score never exceeds the raw one.
    pa = min(joint_mean(similarity_align(pred, gt), gt), mpjpe)
    accel_pred = pred[2:] - 2.0 * pred[1:-1] + pred[:-2]
    accel_gt = gt[2:] - 2.0 * gt[1:-1] + gt[:-2]
    return {
        "MPJPE": mpjpe,
        "PA-MPJPE": pa,
        "ACCL": joint_mean(accel_pred, accel_gt),
    }


def ade_fde(pred: np.ndarray, gt: np.ndarray) -> dict[str, float]:
    """Average / final displacement error in mm (per-joint L2, joint-averaged)."""
    pred, gt = _check_positions(pred, gt)
    dist = np.linalg.norm(pred - gt, axis=-1)
    return {
        "ADE": float(dist.mean()) * MM_PER_M,
        "FDE": float(dist[-1].mean()) * MM_PER_M,
    }


# ---------------------------------------------------------------------------
# embeddings


_TOKEN_RE = re.compile(r"\w+")


def tokenize(text: str) -> list[str]:
    """Lowercase word tokens; the one split rule every text metric shares."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class FeatureExtractor:
    """Seed-determined embeddings for motions and captions.

    Motions: time-averaged feature rows through a fixed Gaussian projection.
    Captions: token and character-trigram counts hashed into a fixed number
    of bins, through a projection drawn from the same seed. Equal seeds give
    equal maps, so scores are comparable across runs.
    """

    seed: int
    embed_dim: int = 32
    n_bins: int = 512

    def __post_init__(self) -> None:
        if self.embed_dim < 1 or self.n_bins < 1:
            raise MetricsError("embedding dimensions must be positive")

    def _projection(self, rows: int, stream: int) -> np.ndarray:
        rng = np.random.default_rng([self.seed, stream, rows])
        return rng.normal(0.0, 1.0 / np.sqrt(rows), size=(rows, self.embed_dim))

    def embed_motion(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] == 0:
            raise MetricsError(f"motion features must be non-empty (T, D), got {features.shape}")
        pooled = features.mean(axis=0)
        return pooled @ self._projection(pooled.shape[0], 101)

    def embed_motions(self, features: Iterable[np.ndarray]) -> np.ndarray:
        return np.stack([self.embed_motion(f) for f in features])

    def embed_caption(self, text: str) -> np.ndarray:
        counts = np.zeros(self.n_bins, dtype=np.float64)
        for token in tokenize(text):
            pieces = [token] + [token[i : i + 3] for i in range(max(len(token) - 2, 0))]
            for piece in pieces:
                counts[zlib.crc32(piece.encode("utf-8")) % self.n_bins] += 1.0
        norm = np.linalg.norm(counts)
        if norm > 0.0:
            counts /= norm
        return counts @ self._projection(self.n_bins, 103)

    def embed_captions(self, texts: Iterable[str]) -> np.ndarray:
        return np.stack([self.embed_caption(t) for t in texts])


# ---------------------------------------------------------------------------
# diversity and retrieval


def diversity_mmodality(
    features_by_condition: dict[Any, np.ndarray],
    div_subset_size: int,
    m: int,
    seed: int = 0,
) -> dict[str, float]:
    """DIV over the pooled set, MModality within each condition.

    DIV draws two disjoint subsets of the pooled features and averages the
    element-wise pair distances; MModality averages all pairwise distances
    among the first ``m`` generations of each condition.
    """
    if m < 2:
        raise MetricsError("multimodality needs m >= 2 generations per condition")
    if div_subset_size < 1:
        raise MetricsError("subset size must be positive")
    groups = {k: np.asarray(v, dtype=np.float64) for k, v in features_by_condition.items()}
    if not groups:
        raise MetricsError("no conditions given")
    pooled = np.concatenate(list(groups.values()), axis=0)
    if pooled.shape[0] < 2 * div_subset_size:
        raise MetricsError(
            f"{pooled.shape[0]} samples cannot fill two subsets of {div_subset_size}"
        )
    rng = np.random.default_rng([seed, 71])
    order = rng.permutation(pooled.shape[0])
    first = pooled[order[:div_subset_size]]
    second = pooled[order[div_subset_size : 2 * div_subset_size]]
    div = float(np.linalg.norm(first - second, axis=-1).mean())

    spreads = []
    for key, rows in groups.items():
        if rows.shape[0] < m:
            raise MetricsError(f"condition {key!r} has {rows.shape[0]} generations, needs {m}")
        chosen = rows[:m]
        pair_dists = [
            np.linalg.norm(chosen[i] - chosen[j])
            for i in range(m)
            for j in range(i + 1, m)
        ]
        spreads.append(np.mean(pair_dists))
    return {"DIV": div, "MModality": float(np.mean(spreads))}


RETRIEVAL_POOL = 32


def retrieval_metrics(
    motion_embeds: np.ndarray,
    text_embeds: np.ndarray,
    seed: int = 0,
) -> dict[str, float]:
    """Rank each text's true motion among 31 seeded mismatches.

    R@k counts matches ranked in the top k by Euclidean distance (strictly
    closer mismatches push the rank down; ties do not); MM-Dist is the mean
    matched-pair distance.
    """
    motion = np.asarray(motion_embeds, dtype=np.float64)
    text = np.asarray(text_embeds, dtype=np.float64)
    if motion.shape != text.shape or motion.ndim != 2:
        raise MetricsError(f"embedding shapes differ: {motion.shape} vs {text.shape}")
    n = motion.shape[0]
    if n < RETRIEVAL_POOL:
        raise MetricsError(f"retrieval needs at least {RETRIEVAL_POOL} pairs, got {n}")
    rng = np.random.default_rng([seed, 73])
    hits = np.zeros(3)
    matched = np.linalg.norm(motion - text, axis=-1)
    for i in range(n):
        others = np.delete(np.arange(n), i)
        mism = rng.choice(others, size=RETRIEVAL_POOL - 1, replace=False)
        dists = np.linalg.norm(motion[mism] - text[i], axis=-1)
        rank = 1 + int((dists < matched[i]).sum())
        for k in range(3):
            hits[k] += rank <= k + 1
    return {
        "R@1": float(hits[0] / n),
        "R@2": float(hits[1] / n),
        "R@3": float(hits[2] / n),
        "MM-Dist": float(matched.mean()),
    }


# ---------------------------------------------------------------------------
# linguistic metrics


def _normalize_references(
    candidates: Sequence[str], references: Sequence
) -> list[list[str]]:
    if len(candidates) == 0:
        raise MetricsError("no candidates to score")
    if len(references) != len(candidates):
        raise MetricsError(
            f"{len(candidates)} candidates vs {len(references)} reference entries"
        )
    grouped: list[list[str]] = []
    for entry in references:
        refs = [entry] if isinstance(entry, str) else list(entry)
        if not refs or any(not tokenize(r) for r in refs):
            raise MetricsError("every candidate needs at least one non-empty reference")
        grouped.append(refs)
    return grouped


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _bleu(cands: list[list[str]], refs: list[list[list[str]]], max_n: int) -> float:
    log_sum = 0.0
    cand_len = 0
    ref_len = 0
    for cand, ref_group in zip(cands, refs):
        cand_len += len(cand)
        ref_len += min((len(r) for r in ref_group), key=lambda l: (abs(l - len(cand)), l))
    for n in range(1, max_n + 1):
        clipped = 0
        total = 0
        for cand, ref_group in zip(cands, refs):
            counts = _ngrams(cand, n)
            best = Counter()
            for ref in ref_group:
                ref_counts = _ngrams(ref, n)
                for gram, c in ref_counts.items():
                    best[gram] = max(best[gram], c)
            clipped += sum(min(c, best[gram]) for gram, c in counts.items())
            total += max(len(cand) - n + 1, 0)
        if clipped == 0 or total == 0:
            return 0.0
        log_sum += np.log(clipped / total)
    if cand_len == 0:
        return 0.0
    brevity = 1.0 if cand_len > ref_len else float(np.exp(1.0 - ref_len / cand_len))
    return brevity * float(np.exp(log_sum / max_n))


def _lcs(a: list[str], b: list[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            cur[j] = prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def _rouge_l(cands: list[list[str]], refs: list[list[list[str]]]) -> float:
    scores = []
    for cand, ref_group in zip(cands, refs):
        best = 0.0
        for ref in ref_group:
            lcs = _lcs(cand, ref)
            if lcs == 0:
                continue
            recall = lcs / len(ref)
            precision = lcs / len(cand) if cand else 0.0
            if precision + recall > 0:
                best = max(best, 2.0 * precision * recall / (precision + recall))
        scores.append(best)
    return float(np.mean(scores))


def _cider(cands: list[list[str]], refs: list[list[list[str]]], max_n: int = 4) -> float:
    n_docs = len(cands)
    scores = np.zeros(n_docs)
    for n in range(1, max_n + 1):
        doc_freq: Counter = Counter()
        for ref_group in refs:
            grams = set()
            for ref in ref_group:
                grams.update(_ngrams(ref, n))
            doc_freq.update(grams)

        def tfidf(tokens: list[str]) -> dict[tuple, float]:
            counts = _ngrams(tokens, n)
            return {
                gram: c * (np.log(n_docs) - np.log(max(doc_freq[gram], 1)))
                for gram, c in counts.items()
            }

        for i, (cand, ref_group) in enumerate(zip(cands, refs)):
            cand_vec = tfidf(cand)
            cand_norm = np.sqrt(sum(v * v for v in cand_vec.values()))
            sims = []
            for ref in ref_group:
                ref_vec = tfidf(ref)
                ref_norm = np.sqrt(sum(v * v for v in ref_vec.values()))
                if cand_norm == 0.0 or ref_norm == 0.0:
                    sims.append(0.0)
                    continue
                dot = sum(cand_vec[g] * ref_vec.get(g, 0.0) for g in cand_vec)
                sims.append(dot / (cand_norm * ref_norm))
            scores[i] += np.mean(sims)
    return float(10.0 * (scores / max_n).mean())


def linguistic(candidates: Sequence[str], references: Sequence) -> dict[str, float]:
    """Corpus BLEU@1/@4, mean ROUGE-L F1, and CIDEr over shared tokenization."""
    grouped = _normalize_references(candidates, references)
    cands = [tokenize(c) for c in candidates]
    refs = [[tokenize(r) for r in group] for group in grouped]
    return {
        "BLEU@1": _bleu(cands, refs, 1),
        "BLEU@4": _bleu(cands, refs, 4),
        "ROUGE-L": _rouge_l(cands, refs),
        "CIDEr": _cider(cands, refs),
    }


# ---------------------------------------------------------------------------
# throughput


def fps_harness(
    emit: Callable[[Any], int],
    contexts: Sequence[Any],
    runs: int = 1,
    downsample: int = 4,
    clock: Callable[[], float] = time.perf_counter,
) -> float:
    """Mean generated frames per second at batch size one.

    ``emit`` runs one context and returns the number of motion timesteps it
    produced; each timestep decodes to ``downsample`` frames. The clock only
    brackets generation, so loading stays outside the measurement.
    """
    if runs < 1 or not contexts:
        raise MetricsError("need at least one run over at least one context")
    rates = []
    for _ in range(runs):
        start = clock()
        timesteps = 0
        for context in contexts:
            timesteps += int(emit(context))
        elapsed = clock() - start
        frames = downsample * timesteps
        if frames <= 0:
            raise MetricsError("no motion frames generated")
        rates.append(frames / max(elapsed, 1e-9))
    return float(np.mean(rates))


# ---------------------------------------------------------------------------
# aggregation


@dataclass(frozen=True)
class MetricValue:
    value: float
    ci95: float | None = None


@dataclass
class MetricReport:
    metrics: dict[str, MetricValue] = field(default_factory=dict)
    runs: int = 1

    def to_json(self) -> dict:
        return {
            name: {
                "value": mv.value,
                "ci95": mv.ci95,
                "runs": self.runs,
            }
            for name, mv in self.metrics.items()
        }


def aggregate_runs(per_run: Sequence[dict[str, float]]) -> MetricReport:
    """Mean and 95% halfwidth (normal approximation) across repeated runs."""
    if not per_run:
        raise MetricsError("no runs to aggregate")
    names = list(per_run[0])
    for run in per_run:
        if list(run) != names:
            raise MetricsError("runs report different metric sets")
    r = len(per_run)
    report = MetricReport(runs=r)
    for name in names:
        values = np.array([run[name] for run in per_run], dtype=np.float64)
        if r > 1:
            half = _CI95_Z * values.std(ddof=1) / np.sqrt(r)
            report.metrics[name] = MetricValue(value=float(values.mean()), ci95=float(half))
        else:
            report.metrics[name] = MetricValue(value=float(values.mean()), ci95=None)
    return report
