"""Conversational serving core: loaded models, sessions, turn generation.

The runtime owns every piece the HTTP service and the terminal chat share:
a bundle of trained artifacts, a concurrent session store with optional
JSONL event logs, prompt construction that reuses the training renderer
byte for byte, and motion recomposition of the answers a session has
accumulated.

A turn is generated by appending a placeholder answer to the history,
rendering the whole session exactly as a training sample would be, and
dropping the placeholder id; whatever the model emits before the
terminator becomes the stored answer. Generated answers that hit the token
bound without a terminator are terminated on storage so the session stays
renderable for the next turn.

Sessions serialize their own turns: posting while a generation is running
fails fast rather than queueing. Different sessions proceed concurrently;
the model weights are only ever read.
"""

from __future__ import annotations

import json
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .composition import CompositionStrategy, Independent, PastCondition, TokensJoint, compose, seam_frames
from .config import AppConfig, DecodingSpec
from .conversation import DEFAULT_SYSTEM_MESSAGE, Session, Turn, render_session
from .features import recover_positions
from .lm import DecodingParams, LmConfig, LmError, generate, load_lm
from .tokenizer import MotionTokenizer, MotionTokens
from .vision import pose_render_features
from .vocab import UnifiedVocab

VOCAB_FILE = "vocab.json"
TOKENIZER_FILE = "tokenizer.ckpt"
LM_FILE = "lm.ckpt"

MAX_TURNS = 10

STRATEGIES: dict[str, type[CompositionStrategy]] = {
    "independent": Independent,
    "past": PastCondition,
    "joint": TokensJoint,
}


class ChatError(Exception):
    """Base for session-layer failures; ``code`` names the failure class."""

    code = "internal"


class UnknownSessionError(ChatError):
    code = "unknown_session"


class SessionBusyError(ChatError):
    code = "generation_in_progress"


class ContextOverflowError(ChatError):
    code = "context_overflow"


class BadRequestError(ChatError):
    code = "bad_request"


# ---------------------------------------------------------------------------
# model bundle


@dataclass
class ModelBundle:
    """Trained artifacts the runtime serves; weights are never written."""

    vocab: UnifiedVocab
    tokenizer: MotionTokenizer
    lm_params: dict[str, np.ndarray]
    lm_config: LmConfig
    fps: float = 20.0

    @classmethod
    def load(cls, checkpoint_dir: str | Path, fps: float = 20.0) -> "ModelBundle":
        checkpoint_dir = Path(checkpoint_dir)
        vocab = UnifiedVocab.load(checkpoint_dir / VOCAB_FILE)
        tokenizer = MotionTokenizer.load(checkpoint_dir / TOKENIZER_FILE)
        lm_params, lm_config, _ = load_lm(checkpoint_dir / LM_FILE)
        return cls(
            vocab=vocab,
            tokenizer=tokenizer,
            lm_params=lm_params,
            lm_config=lm_config,
            fps=fps,
        )


def pose_condition_vector(positions: np.ndarray) -> np.ndarray:
    """Joint positions, one pose or a sequence, to one conditioning vector.

    The pose-grid features of every supplied pose are averaged, so a single
    pose and a short sequence produce vectors of the same dimension.
    """
    return pose_render_features(positions).rows.mean(axis=0)


def make_decoding(spec: DecodingSpec, vocab: UnifiedVocab, seed: int) -> DecodingParams:
    return DecodingParams(
        stop_id=vocab.eos_id,
        max_new_tokens=spec.max_new_tokens,
        mode=spec.mode,
        k=spec.k,
        temperature=spec.temperature,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# session state


@dataclass
class TurnRecord:
    """User-facing view of one exchange."""

    text: str
    answer_kind: str
    answer_text: str | None = None
    motion_turn_index: int | None = None

    def to_json(self) -> dict:
        return {
            "text": self.text,
            "answer_kind": self.answer_kind,
            "answer_text": self.answer_text,
            "motion_turn_index": self.motion_turn_index,
        }


@dataclass
class MotionView:
    """Decoded motion of one composition strategy, ready to serialize."""

    fps: float
    frames: np.ndarray
    seams: list[int]

    def to_json(self) -> dict:
        return {
            "fps": self.fps,
            "frames": self.frames.tolist(),
            "seams": self.seams,
        }


@dataclass
class ChatSession:
    session_id: str
    session: Session
    records: list[TurnRecord] = field(default_factory=list)
    motions: list[MotionTokens] = field(default_factory=list)
    # Conditioning vector held until the first turn exists to carry it;
    # rendering only accepts visuals on turn one.
    pending_visual: np.ndarray | None = None
    created: float = field(default_factory=time.time)
    lock: threading.Lock = field(default_factory=threading.Lock)
    compose_cache: dict[tuple[int, str], np.ndarray] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# runtime


class ChatRuntime:
    """Serves conversations over one loaded model bundle.

    ``log_dir`` enables per-session JSONL event logs; every session mutation
    appends one line, so a crashed process can be reconstructed from the
    logs alone (see :meth:`recover`).
    """

    def __init__(
        self,
        bundle: ModelBundle,
        decoding: DecodingSpec | None = None,
        seed: int = 0,
        log_dir: str | Path | None = None,
    ):
        self.bundle = bundle
        self.decoding = decoding or DecodingSpec()
        self.seed = seed
        self.log_dir = Path(log_dir) if log_dir is not None else None
        if self.log_dir is not None:
            self.log_dir.mkdir(parents=True, exist_ok=True)
        self._sessions: dict[str, ChatSession] = {}
        self._store_lock = threading.RLock()

    @classmethod
    def from_config(
        cls, config: AppConfig, log_dir: str | Path | None = None
    ) -> "ChatRuntime":
        bundle = ModelBundle.load(config.checkpoint_dir, fps=config.fps)
        return cls(bundle, decoding=config.decoding, seed=config.seed, log_dir=log_dir)

    # -- store ---------------------------------------------------------------

    def _get(self, session_id: str) -> ChatSession:
        with self._store_lock:
            state = self._sessions.get(session_id)
        if state is None:
            raise UnknownSessionError(f"no session {session_id!r}")
        return state

    def session_ids(self) -> list[str]:
        with self._store_lock:
            return list(self._sessions)

    def create_session(
        self,
        system_message: str | None = None,
        pose_condition: np.ndarray | None = None,
    ) -> str:
        visual = None
        if pose_condition is not None:
            cfg = self.bundle.lm_config
            if cfg.visual_dim is None:
                raise BadRequestError("the loaded model takes no pose conditioning")
            visual = np.asarray(pose_condition, dtype=np.float64).reshape(-1)
            if visual.shape[0] != cfg.visual_dim:
                raise BadRequestError(
                    f"pose condition has {visual.shape[0]} values, model expects {cfg.visual_dim}"
                )
        message = DEFAULT_SYSTEM_MESSAGE if system_message is None else system_message
        state = ChatSession(
            session_id=uuid.uuid4().hex,
            session=Session(turns=[], system_message=message),
            pending_visual=visual,
        )
        with self._store_lock:
            self._sessions[state.session_id] = state
        self._log(
            state,
            {
                "event": "created",
                "session_id": state.session_id,
                "system_message": message,
                "pose_condition": None if visual is None else visual.tolist(),
            },
        )
        return state.session_id

    def delete_session(self, session_id: str) -> None:
        state = self._get(session_id)
        with self._store_lock:
            del self._sessions[session_id]
        self._log(state, {"event": "deleted", "session_id": session_id})

    # -- turns ---------------------------------------------------------------

    def post_turn(self, session_id: str, text: str) -> TurnRecord:
        if not isinstance(text, str) or not text.strip():
            raise BadRequestError("turn text must be a non-empty string")
        state = self._get(session_id)
        if not state.lock.acquire(blocking=False):
            raise SessionBusyError(f"session {session_id} is generating")
        try:
            return self._generate_turn(state, text)
        finally:
            state.lock.release()

    def _generate_turn(self, state: ChatSession, text: str) -> TurnRecord:
        vocab = self.bundle.vocab
        if len(state.session.turns) >= MAX_TURNS:
            raise ContextOverflowError(f"sessions take at most {MAX_TURNS} turns")

        visual = state.pending_visual if not state.session.turns else None
        pending = Turn(
            source_ids=vocab.text.encode(text),
            answer_ids=[vocab.eos_id],
            visual=visual,
        )
        trial = Session(
            turns=state.session.turns + [pending],
            system_message=state.session.system_message,
        )
        ids, _ = render_session(trial, vocab)
        prompt = ids[:-1]

        visual_rows = None
        if trial.visual is not None:
            p = self.bundle.lm_params
            visual_rows = (
                trial.visual[None, :].astype(np.float32) @ p["vis.w"] + p["vis.b"]
            ).astype(np.float32)

        decoding = make_decoding(
            self.decoding, vocab, seed=self.seed + len(state.session.turns)
        )
        try:
            answer = generate(
                self.bundle.lm_params,
                self.bundle.lm_config,
                prompt,
                decoding,
                visual_rows=visual_rows,
            )
        except LmError as exc:
            raise ContextOverflowError(str(exc)) from exc

        terminated = bool(answer) and answer[-1] == vocab.eos_id
        if not terminated:
            answer = answer + [vocab.eos_id]
        record = self._parse_answer(state, text, answer)
        pending.answer_ids = answer
        state.session.turns.append(pending)
        state.records.append(record)
        self._log(
            state,
            {
                "event": "turn",
                "session_id": state.session_id,
                "text": text,
                "source_ids": pending.source_ids,
                "answer_ids": answer,
                "terminated": terminated,
                "answer_kind": record.answer_kind,
                "answer_text": record.answer_text,
                "motion_turn_index": record.motion_turn_index,
            },
        )
        return record

    def _parse_answer(self, state: ChatSession, text: str, answer: list[int]) -> TurnRecord:
        vocab = self.bundle.vocab
        core = answer[:-1] if answer and answer[-1] == vocab.eos_id else answer
        tokens = vocab.extract_motion_lenient(core, self.bundle.tokenizer.config.downsample)
        if tokens is not None:
            state.motions.append(tokens)
            return TurnRecord(
                text=text,
                answer_kind="motion",
                motion_turn_index=len(state.motions) - 1,
            )
        return TurnRecord(text=text, answer_kind="text", answer_text=self._render(core))

    def _render(self, ids: list[int]) -> str:
        """Answer ids to display text; stray motion ids surface as markers."""
        vocab = self.bundle.vocab
        out: list[str] = []
        run: list[int] = []
        for i in ids:
            kind = vocab.classify(i)
            if kind == "text":
                run.append(i)
                continue
            if run:
                out.append(vocab.text.decode(run))
                run = []
            if kind == "motion":
                layer, code = vocab.motion_layer_code(i)
                out.append(f"<m{layer}:{code}>")
            else:
                out.append("<som>" if kind == "som" else "<eom>")
        if run:
            out.append(vocab.text.decode(run))
        return "".join(out)

    # -- motion --------------------------------------------------------------

    def get_motion(self, session_id: str, strategy: str) -> MotionView:
        if strategy not in STRATEGIES:
            known = ", ".join(sorted(STRATEGIES))
            raise BadRequestError(f"unknown strategy {strategy!r} (known: {known})")
        state = self._get(session_id)
        with self._store_lock:
            segments = list(state.motions)
        if not segments:
            raise BadRequestError("session has no motion turns yet")
        key = (len(segments), strategy)
        features = state.compose_cache.get(key)
        if features is None:
            features = compose(segments, STRATEGIES[strategy](), self.bundle.tokenizer)
            state.compose_cache[key] = features
        positions = recover_positions(features, self.bundle.tokenizer.config.n_joints)
        return MotionView(
            fps=self.bundle.fps,
            frames=positions,
            seams=seam_frames(segments) if len(segments) > 1 else [],
        )

    # -- history -------------------------------------------------------------

    def history(self, session_id: str) -> dict:
        state = self._get(session_id)
        return {
            "session_id": state.session_id,
            "system_message": state.session.system_message,
            "turns": [r.to_json() for r in state.records],
            "n_motion_turns": len(state.motions),
        }

    # -- event log -----------------------------------------------------------

    def _log(self, state: ChatSession, event: dict) -> None:
        if self.log_dir is None:
            return
        path = self.log_dir / f"{state.session_id}.jsonl"
        with self._store_lock:
            with open(path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(event) + "\n")

    def recover(self) -> int:
        """Rebuild sessions from the event logs; returns how many came back.

        Deleted sessions stay deleted. Motion tokens are re-derived from the
        stored answer ids, so the recovered state composes identically.
        """
        if self.log_dir is None:
            raise ChatError("runtime has no log directory to recover from")
        count = 0
        for path in sorted(self.log_dir.glob("*.jsonl")):
            state = self._replay(path)
            if state is not None:
                with self._store_lock:
                    self._sessions[state.session_id] = state
                count += 1
        return count

    def _replay(self, path: Path) -> ChatSession | None:
        vocab = self.bundle.vocab
        state: ChatSession | None = None
        for line in path.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            event = json.loads(line)
            kind = event["event"]
            if kind == "created":
                pose = event.get("pose_condition")
                state = ChatSession(
                    session_id=event["session_id"],
                    session=Session(turns=[], system_message=event["system_message"]),
                    pending_visual=None if pose is None else np.asarray(pose),
                )
            elif kind == "turn" and state is not None:
                visual = state.pending_visual if not state.session.turns else None
                state.session.turns.append(
                    Turn(
                        source_ids=list(event["source_ids"]),
                        answer_ids=list(event["answer_ids"]),
                        visual=visual,
                    )
                )
                record = TurnRecord(
                    text=event["text"],
                    answer_kind=event["answer_kind"],
                    answer_text=event["answer_text"],
                    motion_turn_index=event["motion_turn_index"],
                )
                state.records.append(record)
                if record.answer_kind == "motion":
                    core = event["answer_ids"][:-1]
                    tokens = vocab.extract_motion_lenient(
                        core, self.bundle.tokenizer.config.downsample
                    )
                    state.motions.append(tokens)
            elif kind == "deleted":
                return None
        return state

    # -- throughput ----------------------------------------------------------

    def motion_timesteps(self, text: str) -> int:
        """Generate one throwaway turn; count of motion timesteps produced."""
        session_id = self.create_session()
        try:
            record = self.post_turn(session_id, text)
            if record.answer_kind != "motion":
                return 0
            state = self._get(session_id)
            return state.motions[record.motion_turn_index].length
        finally:
            self.delete_session(session_id)
