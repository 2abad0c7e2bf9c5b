"""Text tokenizer and the unified text+motion id space.

Text side: byte-level byte-pair encoding. Ids 0..255 are raw bytes, merge
products follow, and the last four text ids are the specials ``<pad>``,
``<unk>``, ``</s>``, ``<vis>`` (the visual-embedding placeholder). Merges are
learned greedily by pair frequency inside whitespace-delimited chunks
(maximal runs of whitespace or non-whitespace), so encoding any string and
decoding it back is lossless.

Unified side: text ids occupy ``[0, K_t)``; each residual quantizer layer q
gets its own contiguous block of K ids starting at ``K_t + q*K`` (every
layer's codes are distinct symbols); two boundary ids ``<som>``/``<eom>``
close the space, for a total of ``K_t + Q*K + 2``. Motion spans serialize
layer-major per timestep: layer 0 first within each timestep.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tokenizer import MotionTokens

VOCAB_FORMAT_VERSION = 1

_N_BYTES = 256
SPECIAL_NAMES = ("pad", "unk", "eos", "vis")
_SPECIAL_SURFACE = {"pad": "<pad>", "unk": "<unk>", "eos": "</s>", "vis": "<vis>"}

_CHUNK_RE = re.compile(r"\s+|\S+")
_SPECIAL_SPLIT = re.compile("(" + "|".join(re.escape(s) for s in _SPECIAL_SURFACE.values()) + ")")
_SURFACE_TO_NAME = {surface: name for name, surface in _SPECIAL_SURFACE.items()}


class VocabError(ValueError):
    """Raised for malformed vocabulary files or out-of-range ids."""


class MotionSpanError(VocabError):
    """Raised when a motion span fails strict structural validation."""


def _chunks(text: str) -> list[str]:
    return _CHUNK_RE.findall(text)


@dataclass
class TextVocab:
    """Byte-level BPE vocabulary of declared size ``k_t``."""

    k_t: int
    merges: list[tuple[int, int]]

    def __post_init__(self) -> None:
        if self.k_t < _N_BYTES + len(SPECIAL_NAMES):
            raise VocabError(f"k_t={self.k_t} cannot hold {_N_BYTES} bytes plus specials")
        if len(self.merges) > self.k_t - _N_BYTES - len(SPECIAL_NAMES):
            raise VocabError("more merges than free id slots")
        self._rank = {pair: i for i, pair in enumerate(self.merges)}
        self._bytes_of: dict[int, bytes] = {i: bytes([i]) for i in range(_N_BYTES)}
        for i, (a, b) in enumerate(self.merges):
            self._bytes_of[_N_BYTES + i] = self._bytes_of[a] + self._bytes_of[b]

    # Specials sit at the top of the text block, in SPECIAL_NAMES order.
    @property
    def pad_id(self) -> int:
        return self.k_t - 4

    @property
    def unk_id(self) -> int:
        return self.k_t - 3

    @property
    def eos_id(self) -> int:
        return self.k_t - 2

    @property
    def vis_id(self) -> int:
        return self.k_t - 1

    @property
    def specials(self) -> dict[str, int]:
        return {name: self.k_t - 4 + i for i, name in enumerate(SPECIAL_NAMES)}

    def _merge_chunk(self, seq: list[int]) -> list[int]:
        while len(seq) >= 2:
            best_rank, best_pair = None, None
            for pair in zip(seq, seq[1:]):
                rank = self._rank.get(pair)
                if rank is not None and (best_rank is None or rank < best_rank):
                    best_rank, best_pair = rank, pair
            if best_pair is None:
                break
            merged_id = _N_BYTES + best_rank
            out: list[int] = []
            i = 0
            while i < len(seq):
                if i + 1 < len(seq) and (seq[i], seq[i + 1]) == best_pair:
                    out.append(merged_id)
                    i += 2
                else:
                    out.append(seq[i])
                    i += 1
            seq = out
        return seq

    def encode(self, text: str) -> list[int]:
        """Text to ids; lossless for any string (byte fallback, no unknowns).

        Special surface strings ("</s>", "<vis>", ...) map atomically to
        their reserved ids rather than being split into bytes.
        """
        ids: list[int] = []
        table = self.specials
        for part in _SPECIAL_SPLIT.split(text):
            if not part:
                continue
            name = _SURFACE_TO_NAME.get(part)
            if name is not None:
                ids.append(table[name])
                continue
            for chunk in _chunks(part):
                ids.extend(self._merge_chunk(list(chunk.encode("utf-8"))))
        return ids

    def decode(self, ids) -> str:
        """Ids back to text; specials render as their surface strings."""
        out: list[bytes] = []
        for i in ids:
            i = int(i)
            if i in self._bytes_of:
                out.append(self._bytes_of[i])
            elif self.k_t - 4 <= i < self.k_t:
                out.append(_SPECIAL_SURFACE[SPECIAL_NAMES[i - (self.k_t - 4)]].encode("utf-8"))
            else:
                raise VocabError(f"id {i} is not a valid text id (k_t={self.k_t})")
        return b"".join(out).decode("utf-8", errors="replace")


def train_text_vocab(corpus: list[str], k_t: int) -> TextVocab:
    """Learn BPE merges from ``corpus`` until ``k_t`` is full or no pair repeats.

    Deterministic: highest pair count first, ties broken by the smaller id
    pair. Merges never span a whitespace/non-whitespace chunk boundary.
    """
    if not corpus:
        raise VocabError("training corpus is empty")
    budget = k_t - _N_BYTES - len(SPECIAL_NAMES)
    if budget < 0:
        raise VocabError(f"k_t={k_t} cannot hold {_N_BYTES} bytes plus specials")
    freq = Counter()
    for text in corpus:
        freq.update(_chunks(text))
    seqs: dict[str, list[int]] = {c: list(c.encode("utf-8")) for c in freq}
    merges: list[tuple[int, int]] = []
    for _ in range(budget):
        pair_counts: Counter = Counter()
        for chunk, seq in seqs.items():
            n = freq[chunk]
            for pair in zip(seq, seq[1:]):
                pair_counts[pair] += n
        if not pair_counts:
            break
        best = min(pair_counts.items(), key=lambda kv: (-kv[1], kv[0]))
        if best[1] < 2:
            break
        pair = best[0]
        new_id = _N_BYTES + len(merges)
        merges.append(pair)
        for chunk, seq in seqs.items():
            if len(seq) < 2:
                continue
            out: list[int] = []
            i = 0
            while i < len(seq):
                if i + 1 < len(seq) and (seq[i], seq[i + 1]) == pair:
                    out.append(new_id)
                    i += 2
                else:
                    out.append(seq[i])
                    i += 1
            seqs[chunk] = out
    return TextVocab(k_t=k_t, merges=merges)


class UnifiedVocab:
    """Text block + per-layer motion blocks + boundary specials."""

    def __init__(self, text: TextVocab, n_quantizers: int, codebook_size: int):
        if n_quantizers < 1 or codebook_size < 1:
            raise VocabError("motion vocabulary needs positive Q and K")
        self.text = text
        self.n_quantizers = n_quantizers
        self.codebook_size = codebook_size

    @property
    def size(self) -> int:
        return self.text.k_t + self.n_quantizers * self.codebook_size + 2

    @property
    def som_id(self) -> int:
        return self.text.k_t + self.n_quantizers * self.codebook_size

    @property
    def eom_id(self) -> int:
        return self.som_id + 1

    @property
    def eos_id(self) -> int:
        return self.text.eos_id

    @property
    def vis_id(self) -> int:
        return self.text.vis_id

    @property
    def pad_id(self) -> int:
        return self.text.pad_id

    def motion_id(self, layer: int, code: int) -> int:
        if not 0 <= layer < self.n_quantizers:
            raise VocabError(f"layer {layer} out of range [0, {self.n_quantizers})")
        if not 0 <= code < self.codebook_size:
            raise VocabError(f"code {code} out of range [0, {self.codebook_size})")
        return self.text.k_t + layer * self.codebook_size + code

    def is_motion(self, token_id: int) -> bool:
        return self.text.k_t <= token_id < self.som_id

    def motion_layer_code(self, token_id: int) -> tuple[int, int]:
        if not self.is_motion(token_id):
            raise VocabError(f"id {token_id} is not a motion id")
        rel = token_id - self.text.k_t
        return rel // self.codebook_size, rel % self.codebook_size

    def classify(self, token_id: int) -> str:
        """'text' | 'motion' | 'som' | 'eom' for any in-range id."""
        if 0 <= token_id < self.text.k_t:
            return "text"
        if self.is_motion(token_id):
            return "motion"
        if token_id == self.som_id:
            return "som"
        if token_id == self.eom_id:
            return "eom"
        raise VocabError(f"id {token_id} outside unified vocabulary of size {self.size}")

    # -- motion span serialization ------------------------------------------

    def motion_to_symbols(self, tokens: MotionTokens) -> list[int]:
        """``<som>``, per-timestep layer-major code ids, ``<eom>``."""
        layers = tokens.layers
        if layers.shape[0] != self.n_quantizers:
            raise MotionSpanError(
                f"tokens have {layers.shape[0]} layers, vocabulary expects {self.n_quantizers}"
            )
        out = [self.som_id]
        for t in range(layers.shape[1]):
            for q in range(self.n_quantizers):
                out.append(self.motion_id(q, int(layers[q, t])))
        out.append(self.eom_id)
        return out

    def symbols_to_motion(self, ids, downsample: int) -> MotionTokens:
        """Strict inverse of :meth:`motion_to_symbols`.

        The sequence must be exactly ``<som> body <eom>`` with the body a
        whole number of timesteps, each carrying one id per layer in order.
        """
        ids = [int(i) for i in ids]
        if not ids or ids[0] != self.som_id:
            raise MotionSpanError("motion span must start with <som>")
        if ids[-1] != self.eom_id:
            raise MotionSpanError("motion span must end with <eom>")
        body = ids[1:-1]
        if self.som_id in body or self.eom_id in body:
            raise MotionSpanError("nested motion boundary inside span")
        q = self.n_quantizers
        if len(body) % q != 0:
            raise MotionSpanError(
                f"span length {len(body)} is not a multiple of {q} quantizer layers"
            )
        length = len(body) // q
        layers = np.zeros((q, length), dtype=np.int64)
        for t in range(length):
            for layer in range(q):
                token_id = body[t * q + layer]
                if not self.is_motion(token_id):
                    raise MotionSpanError(f"id {token_id} inside motion span is not a motion id")
                got_layer, code = self.motion_layer_code(token_id)
                if got_layer != layer:
                    raise MotionSpanError(
                        f"timestep {t}: expected layer {layer}, got layer {got_layer}"
                    )
                layers[layer, t] = code
        return MotionTokens(layers=layers, downsample=downsample)

    def extract_motion_lenient(self, ids, downsample: int) -> MotionTokens | None:
        """Best-effort span recovery from a generated stream.

        Scans for motion ids in order, accepting each id only when it carries
        the layer the pattern expects next; stops at ``<eom>`` (or stream
        end) and drops a trailing incomplete timestep. Returns None when no
        complete timestep exists.
        """
        q = self.n_quantizers
        body: list[int] = []
        expect = 0
        started = False
        for raw in ids:
            i = int(raw)
            if i == self.som_id:
                started = True
                continue
            if i == self.eom_id and started:
                break
            if not self.is_motion(i):
                continue
            layer, code = self.motion_layer_code(i)
            if layer == expect:
                body.append(code)
                expect = (expect + 1) % q
        usable = (len(body) // q) * q
        if usable == 0:
            return None
        arr = np.asarray(body[:usable], dtype=np.int64).reshape(-1, q).T
        return MotionTokens(layers=arr, downsample=downsample)

    # -- persistence --------------------------------------------------------

    def save(self, path: str | Path) -> None:
        doc = {
            "format_version": VOCAB_FORMAT_VERSION,
            "k_t": self.text.k_t,
            "merges": [list(p) for p in self.text.merges],
            "specials": self.text.specials,
            "motion": {"q": self.n_quantizers, "k": self.codebook_size},
        }
        Path(path).write_text(json.dumps(doc), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "UnifiedVocab":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise VocabError(f"{path}: not valid JSON: {exc}") from exc
        if doc.get("format_version") != VOCAB_FORMAT_VERSION:
            raise VocabError(f"unsupported vocabulary format_version {doc.get('format_version')!r}")
        try:
            text = TextVocab(
                k_t=int(doc["k_t"]), merges=[tuple(int(x) for x in p) for p in doc["merges"]]
            )
            motion = doc["motion"]
            vocab = cls(text, n_quantizers=int(motion["q"]), codebook_size=int(motion["k"]))
        except KeyError as exc:
            raise VocabError(f"vocabulary file missing field {exc}") from exc
        if doc.get("specials") != text.specials:
            raise VocabError("special-token table does not match the declared layout")
        return vocab
