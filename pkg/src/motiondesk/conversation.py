"""Multi-turn dialogue rendering and training-dataset construction.

Rendered format (fixed, byte-exact): the system message on its own line when
present, then one line per turn reading ``USER: <source> ASSISTANT: <answer>``
with the answer ending in the terminator id. A visual placeholder id follows
``USER: `` on the first turn when the session carries an image-like
conditioning input. The loss mask is 1 exactly on answer ids including the
terminator.

The dataset builder covers fourteen task shapes: motion generation from text
(with and without a length constraint), from a length alone, unconditioned,
and image-conditioned; motion captioning (plain, with duration), length
queries in both directions, caption generation, free-form reasoning keyed to
the motion family, and two editing shapes driven by similarity buckets
(cross-family rewrites from medium pairs, duration edits from high pairs).
Multi-turn sessions open with a generation task and chain follow-up
translation / reasoning / editing turns, at most ten turns, within a token
budget. Every sample is a pure function of (corpus, seed, index).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import LabeledClip
from .tokenizer import MotionTokens
from .vocab import UnifiedVocab

DATASET_FORMAT_VERSION = 1

DEFAULT_SYSTEM_MESSAGE = (
    "You are a motion assistant: you translate between text and body motion tokens."
)

TAU_HIGH = 0.95
TAU_LOW = 0.5

TASK_IDS = (
    "text-to-motion",
    "text-to-motion-with-length",
    "motion-length-editing",
    "length-to-motion",
    "random-motion",
    "motion-to-text",
    "motion-to-text-with-length",
    "motion-to-length",
    "caption-to-length",
    "length-to-caption",
    "random-caption",
    "motion-reasoning",
    "motion-editing",
    "image-conditioned-motion",
)

GENERATION_TASKS = (
    "text-to-motion",
    "text-to-motion-with-length",
    "length-to-motion",
    "random-motion",
    "image-conditioned-motion",
)
FOLLOW_UP_KINDS = ("translation", "reasoning", "editing")

_PROMPTS: dict[str, tuple[str, ...]] = {
    "text-to-motion": (
        "Please generate a motion matching the description: [caption].",
        "Show me a motion of [caption].",
        "Demonstrate how [caption] looks as a motion.",
    ),
    "text-to-motion-with-length": (
        "Please generate a motion that is around [frames] frames long and shows [caption].",
        "In about [frames] frames, show [caption].",
    ),
    "length-to-motion": (
        "Please generate a motion that is around [frames] frames long.",
        "Produce any motion lasting about [seconds] seconds.",
    ),
    "random-motion": (
        "Please generate a random motion.",
        "Show me any motion you like.",
    ),
    "motion-to-text": (
        "[motion] Please describe the motion shown.",
        "What does this motion depict? [motion]",
    ),
    "motion-to-text-with-length": (
        "[motion] Describe the motion and say how long it lasts.",
    ),
    "motion-to-length": (
        "[motion] How many frames does this motion have?",
        "[motion] What is the frame count of the motion?",
    ),
    "caption-to-length": (
        "How many frames would a motion of [caption] typically need?",
    ),
    "length-to-caption": (
        "Suggest a motion that would fit in [frames] frames.",
    ),
    "random-caption": (
        "Say a random motion description.",
        "Give me any motion caption.",
    ),
    "image-conditioned-motion": (
        "Generate a motion for the person in the image.",
        "Continue moving like the pose in the image.",
    ),
}

_ANSWERS: dict[str, str] = {
    "text-to-motion": "[motion]",
    "text-to-motion-with-length": "[motion]",
    "length-to-motion": "[motion]",
    "random-motion": "[motion]",
    "motion-to-text": "[caption]",
    "motion-to-text-with-length": "[caption], lasting [seconds] seconds.",
    "motion-to-length": "There are [frames] frames in the motion.",
    "caption-to-length": "Around [frames] frames.",
    "length-to-caption": "[caption]",
    "random-caption": "[caption]",
    "image-conditioned-motion": "[motion]",
}

_REASONING: dict[str, dict[str, str]] = {
    "muscles": {
        "question": "Can you tell me which muscles this motion mainly uses?",
        "walk": "Mostly the legs and hips drive the stride while the torso stays upright.",
        "turn": "The core and hip rotators do the work while the feet pivot in place.",
        "jump": "The calves, thighs and glutes load and release to push off the ground.",
        "wave": "The shoulder and arm swing the limb while the rest of the body stays put.",
        "stand": "Only the postural muscles are active, keeping the body balanced.",
    },
    "purpose": {
        "question": "What could the person be doing this motion for?",
        "walk": "They are likely moving from one place to another at a steady pace.",
        "turn": "They are probably changing direction to face something behind them.",
        "jump": "They might be hopping over something or simply bouncing with energy.",
        "wave": "They seem to be greeting someone or trying to get attention.",
        "stand": "They are simply waiting or resting in place.",
    },
    "energy": {
        "question": "Is this motion energetic or calm?",
        "walk": "It is a steady, moderate motion with a regular rhythm.",
        "turn": "It is a calm, controlled motion without much exertion.",
        "jump": "It is an explosive, energetic motion with clear effort.",
        "wave": "It is a light, friendly motion with little effort.",
        "stand": "It is as calm as a motion gets, with almost no movement.",
    },
}
_REASONING_TOPICS = tuple(_REASONING)

_FAMILY_EDIT_PATTERNS = (
    "Change the {src} into a {dst}.",
    "Make the person {dst} instead of {src}.",
    "Replace the {src} with a {dst}.",
)

EXTEND_INSTRUCTION = "Extend the duration of the motion provided."
SHORTEN_INSTRUCTION = "Shorten the duration of the motion provided."


class ConversationError(ValueError):
    """Raised for malformed sessions or unsatisfiable dataset requests."""


@dataclass
class Turn:
    """One user/assistant exchange, already in unified ids.

    ``visual`` carries an image-like conditioning vector; only the first turn
    of a session may have one.
    """

    source_ids: list[int]
    answer_ids: list[int]
    visual: np.ndarray | None = None

    def validate(self, vocab: UnifiedVocab) -> None:
        if not self.answer_ids:
            raise ConversationError("turn answer is empty")
        if self.answer_ids[-1] != vocab.eos_id:
            raise ConversationError("turn answer does not end with the terminator id")


@dataclass
class Session:
    """System message plus ordered turns."""

    turns: list[Turn]
    system_message: str = DEFAULT_SYSTEM_MESSAGE

    @property
    def visual(self) -> np.ndarray | None:
        return self.turns[0].visual if self.turns else None

    def validate(self, vocab: UnifiedVocab) -> None:
        if not 1 <= len(self.turns) <= 10:
            raise ConversationError(f"sessions take 1..10 turns, got {len(self.turns)}")
        for i, turn in enumerate(self.turns):
            turn.validate(vocab)
            if i > 0 and turn.visual is not None:
                raise ConversationError("visual input is only accepted on the first turn")


def render_session(session: Session, vocab: UnifiedVocab) -> tuple[list[int], list[int]]:
    """Session to (ids, loss_mask); mask 1 exactly on answer+terminator ids."""
    session.validate(vocab)
    text = vocab.text
    ids: list[int] = []
    mask: list[int] = []

    def emit(chunk_ids: list[int], hot: bool) -> None:
        ids.extend(chunk_ids)
        mask.extend([1 if hot else 0] * len(chunk_ids))

    if session.system_message:
        emit(text.encode(session.system_message + "\n"), False)
    for i, turn in enumerate(session.turns):
        if i > 0:
            emit(text.encode("\n"), False)
        emit(text.encode("USER: "), False)
        if i == 0 and turn.visual is not None:
            emit([vocab.vis_id], False)
            emit(text.encode(" "), False)
        emit(turn.source_ids, False)
        emit(text.encode(" ASSISTANT: "), False)
        emit(turn.answer_ids, True)
    return ids, mask


def render_text(session: Session, vocab: UnifiedVocab) -> str:
    """Decoded rendering; motion ids surface as <m{layer}:{code}> markers."""
    ids, _ = render_session(session, vocab)
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
        elif kind == "som":
            out.append("<som>")
        else:
            out.append("<eom>")
    if run:
        out.append(vocab.text.decode(run))
    return "".join(out)


# ---------------------------------------------------------------------------
# similarity bucketing


def pair_bucket(
    similarity: float,
    same_family: bool,
    tau_high: float = TAU_HIGH,
    tau_low: float = TAU_LOW,
) -> str | None:
    """Bucket for one pair: 'high', 'medium', or None (excluded)."""
    if same_family and similarity >= tau_high:
        return "high"
    if not same_family and tau_low <= similarity < tau_high:
        return "medium"
    return None


def pooled_features(feature_clips: list[np.ndarray]) -> np.ndarray:
    """Per-clip time-averaged feature vectors."""
    return np.stack(
        [np.asarray(f, dtype=np.float64).mean(axis=0) for f in feature_clips]
    )


def cosine_similarity_matrix(pooled: np.ndarray) -> np.ndarray:
    norms = np.maximum(np.linalg.norm(pooled, axis=1), 1e-12)
    unit = pooled / norms[:, None]
    return unit @ unit.T


def bucket_similar_pairs(
    feature_clips: list[np.ndarray],
    families: list[str],
    tau_high: float = TAU_HIGH,
    tau_low: float = TAU_LOW,
) -> dict[str, list[tuple[int, int]]]:
    """All index pairs i<j bucketed by cosine of pooled feature vectors."""
    if len(feature_clips) < 2:
        raise ConversationError("need at least two clips to bucket pairs")
    if len(feature_clips) != len(families):
        raise ConversationError("feature and family lists differ in length")
    # The shared static pose keeps same-family cosines near 1 and cross-family
    # ones in the medium band; the default thresholds assume this raw scale.
    sims = cosine_similarity_matrix(pooled_features(feature_clips))
    buckets: dict[str, list[tuple[int, int]]] = {"high": [], "medium": []}
    n = len(feature_clips)
    for i in range(n):
        for j in range(i + 1, n):
            kind = pair_bucket(float(sims[i, j]), families[i] == families[j], tau_high, tau_low)
            if kind is not None:
                buckets[kind].append((i, j))
    return buckets


# ---------------------------------------------------------------------------
# editing tasks


@dataclass(frozen=True)
class EditTask:
    """One editing exemplar: apply ``instruction`` to ``source``, get ``target``."""

    instruction: str
    source: MotionTokens
    target: MotionTokens
    kind: str
    source_index: int
    target_index: int


def make_edit_tasks(
    buckets: dict[str, list[tuple[int, int]]],
    corpus: list[LabeledClip],
    encoded: list[MotionTokens],
) -> list[EditTask]:
    """Editing exemplars from bucketed pairs.

    High pairs with differing lengths yield duration edits in both directions
    (extend toward the longer sibling, shorten toward the shorter); medium
    pairs yield family rewrites in both directions, with the instruction
    naming the source and target families.
    """
    if not buckets.get("high") and not buckets.get("medium"):
        raise ConversationError("both similarity buckets are empty")
    tasks: list[EditTask] = []
    for i, j in buckets.get("high", ()):
        n_i = corpus[i].clip.n_frames
        n_j = corpus[j].clip.n_frames
        if n_i == n_j:
            continue
        shorter, longer = (i, j) if n_i < n_j else (j, i)
        tasks.append(
            EditTask(EXTEND_INSTRUCTION, encoded[shorter], encoded[longer], "length", shorter, longer)
        )
        tasks.append(
            EditTask(SHORTEN_INSTRUCTION, encoded[longer], encoded[shorter], "length", longer, shorter)
        )
    for i, j in buckets.get("medium", ()):
        for src, dst in ((i, j), (j, i)):
            pattern = _FAMILY_EDIT_PATTERNS[(src + dst) % len(_FAMILY_EDIT_PATTERNS)]
            instruction = pattern.format(src=corpus[src].family, dst=corpus[dst].family)
            tasks.append(EditTask(instruction, encoded[src], encoded[dst], "family", src, dst))
    return tasks


# ---------------------------------------------------------------------------
# training samples


@dataclass
class TrainingSample:
    """Next-token pair with answer-only mask; ``visual`` feeds the projector."""

    input_ids: list[int]
    target_ids: list[int]
    loss_mask: list[int]
    task: str
    turns: int
    visual: list[float] | None = None

    def to_json(self) -> str:
        doc: dict[str, object] = {
            "input_ids": self.input_ids,
            "target_ids": self.target_ids,
            "loss_mask": self.loss_mask,
            "task": self.task,
            "turns": self.turns,
        }
        if self.visual is not None:
            doc["visual"] = self.visual
        return json.dumps(doc, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "TrainingSample":
        doc = json.loads(line)
        return cls(
            input_ids=[int(i) for i in doc["input_ids"]],
            target_ids=[int(i) for i in doc["target_ids"]],
            loss_mask=[int(i) for i in doc["loss_mask"]],
            task=doc["task"],
            turns=int(doc["turns"]),
            visual=[float(v) for v in doc["visual"]] if "visual" in doc else None,
        )


def save_dataset(path: str | Path, samples: list[TrainingSample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for sample in samples:
            fh.write(sample.to_json())
            fh.write("\n")


def load_dataset(path: str | Path) -> list[TrainingSample]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(TrainingSample.from_json(line))
    return out


# ---------------------------------------------------------------------------
# dataset construction


@dataclass
class DatasetBuilder:
    """Deterministic sample factory over an encoded corpus.

    ``encoded[i]`` must hold the motion tokens for ``corpus[i]``;
    ``visual_features[i]`` (optional) the image-like conditioning vector.
    Without visual features the image-conditioned task is left out of the
    mixture and coverage spans the remaining thirteen tasks.
    """

    corpus: list[LabeledClip]
    encoded: list[MotionTokens]
    vocab: UnifiedVocab
    feature_clips: list[np.ndarray]
    visual_features: list[np.ndarray] | None = None
    fps: float = 20.0
    max_len: int = 512
    multi_turn_rate: float = 0.35
    system_message: str = DEFAULT_SYSTEM_MESSAGE
    tau_high: float = TAU_HIGH
    tau_low: float = TAU_LOW
    buckets: dict[str, list[tuple[int, int]]] = field(init=False)
    edit_tasks: list[EditTask] = field(init=False)

    def __post_init__(self) -> None:
        if not self.corpus:
            raise ConversationError("corpus is empty")
        if not (len(self.corpus) == len(self.encoded) == len(self.feature_clips)):
            raise ConversationError("corpus, encoded tokens, and features differ in length")
        if self.visual_features is not None and len(self.visual_features) != len(self.corpus):
            raise ConversationError("visual feature list length differs from the corpus")
        self.buckets = bucket_similar_pairs(
            self.feature_clips,
            [c.family for c in self.corpus],
            self.tau_high,
            self.tau_low,
        )
        self.edit_tasks = make_edit_tasks(self.buckets, self.corpus, self.encoded)
        self._edits_by_kind: dict[str, dict[int, list[EditTask]]] = {
            "length": {},
            "family": {},
        }
        for task in self.edit_tasks:
            self._edits_by_kind[task.kind].setdefault(task.source_index, []).append(task)

    @property
    def task_ids(self) -> tuple[str, ...]:
        if self.visual_features is None:
            return tuple(t for t in TASK_IDS if t != "image-conditioned-motion")
        return TASK_IDS

    # -- template filling ----------------------------------------------------

    def _fill(self, template: str, slots: dict[str, object]) -> list[int]:
        ids: list[int] = []
        rest = template
        while rest:
            start = rest.find("[")
            if start < 0:
                ids.extend(self.vocab.text.encode(rest))
                break
            end = rest.find("]", start)
            if end < 0:
                ids.extend(self.vocab.text.encode(rest))
                break
            if start:
                ids.extend(self.vocab.text.encode(rest[:start]))
            name = rest[start + 1 : end]
            if name not in slots:
                raise ConversationError(f"template slot [{name}] has no value")
            value = slots[name]
            if isinstance(value, str):
                ids.extend(self.vocab.text.encode(value))
            else:
                ids.extend(int(v) for v in value)  # already unified ids
            rest = rest[end + 1 :]
        return ids

    def _motion_span(self, index: int) -> list[int]:
        return self.vocab.motion_to_symbols(self.encoded[index])

    def _slots_for(self, index: int) -> dict[str, object]:
        clip = self.corpus[index]
        frames = clip.clip.n_frames
        return {
            "caption": clip.caption,
            "frames": str(frames),
            "seconds": f"{frames / self.fps:.1f}",
            "motion": self._motion_span(index),
        }

    # -- single turns --------------------------------------------------------

    def _pick(self, rng: np.random.Generator, options: tuple) -> object:
        return options[int(rng.integers(0, len(options)))]

    def _edit_source_index(self, kind: str, index: int) -> int:
        """``index`` if it has ``kind`` edits, else the nearest index that does."""
        by_source = self._edits_by_kind[kind]
        if index in by_source:
            return index
        n = len(self.corpus)
        for offset in range(1, n):
            candidate = (index + offset) % n
            if candidate in by_source:
                return candidate
        raise ConversationError(
            f"no {kind} edit pairs exist in this corpus; "
            "the similarity buckets cannot fill the editing templates"
        )

    def _edit_turn(self, kind: str, rng: np.random.Generator, index: int) -> Turn:
        index = self._edit_source_index(kind, index)
        options = self._edits_by_kind[kind][index]
        task = options[int(rng.integers(0, len(options)))]
        source = self._motion_span(index) + self.vocab.text.encode(" " + task.instruction)
        answer = self.vocab.motion_to_symbols(task.target) + [self.vocab.eos_id]
        return Turn(source, answer)

    def _reasoning_turn(self, rng: np.random.Generator, index: int, with_motion: bool) -> Turn:
        topic = str(self._pick(rng, _REASONING_TOPICS))
        entry = _REASONING[topic]
        question = entry["question"]
        if with_motion:
            source = self._motion_span(index) + self.vocab.text.encode(" " + question)
        else:
            source = self.vocab.text.encode(question)
        answer_text = entry[self.corpus[index].family]
        return Turn(source, self.vocab.text.encode(answer_text) + [self.vocab.eos_id])

    def _single_turn(self, task: str, rng: np.random.Generator, index: int) -> Turn:
        if task == "motion-length-editing":
            return self._edit_turn("length", rng, index)
        if task == "motion-editing":
            return self._edit_turn("family", rng, index)
        if task == "motion-reasoning":
            return self._reasoning_turn(rng, index, with_motion=True)
        slots = self._slots_for(index)
        prompt = self._fill(str(self._pick(rng, _PROMPTS[task])), slots)
        answer = self._fill(_ANSWERS[task], slots) + [self.vocab.eos_id]
        visual = None
        if task == "image-conditioned-motion":
            assert self.visual_features is not None
            visual = np.asarray(self.visual_features[index], dtype=np.float64)
        return Turn(prompt, answer, visual=visual)

    # -- sessions ------------------------------------------------------------

    def _follow_up(self, rng: np.random.Generator, index: int) -> tuple[Turn, int]:
        """A follow-up turn about the session's current motion.

        Translation and reasoning keep the current clip; editing moves the
        conversation to the edit target. Follow-up prompts refer back to the
        dialogue instead of repeating the motion tokens.
        """
        kind = str(self._pick(rng, FOLLOW_UP_KINDS))
        if kind == "editing":
            options = self._edits_by_kind["family"].get(index, [])
            if options:
                task = options[int(rng.integers(0, len(options)))]
                source = self.vocab.text.encode(task.instruction)
                answer = self.vocab.motion_to_symbols(task.target) + [self.vocab.eos_id]
                return Turn(source, answer), task.target_index
            kind = "translation"  # no partner for this clip
        if kind == "reasoning":
            return self._reasoning_turn(rng, index, with_motion=False), index
        prompts = (
            "Now describe the motion you just generated.",
            "Put what that motion shows into words.",
        )
        source = self.vocab.text.encode(str(self._pick(rng, prompts)))
        answer = self.vocab.text.encode(self.corpus[index].caption) + [self.vocab.eos_id]
        return Turn(source, answer), index

    def _session_length(self, session: Session) -> int:
        ids, _ = render_session(session, self.vocab)
        return len(ids)

    def build_sample(
        self,
        seed: int,
        sample_index: int,
        task: str | None = None,
        single_turn: bool = False,
    ) -> TrainingSample:
        """Deterministic sample ``sample_index`` for ``seed``."""
        rng = np.random.default_rng([seed, sample_index])
        index = int(rng.integers(0, len(self.corpus)))
        pool = self.task_ids
        if task is None:
            task = str(pool[int(rng.integers(0, len(pool)))])
        elif task not in pool:
            raise ConversationError(f"task {task!r} is not available to this builder")
        first_turn = self._single_turn(task, rng, index)
        session = Session(turns=[first_turn], system_message=self.system_message)
        if self._session_length(session) > self.max_len:
            raise ConversationError(
                f"a single-turn session of task {task!r} renders to "
                f"{self._session_length(session)} ids, over the {self.max_len} budget; "
                "raise max_len or shorten the clips"
            )

        if not single_turn and task in GENERATION_TASKS and rng.random() < self.multi_turn_rate:
            current = index
            for _ in range(int(rng.integers(1, 10))):
                turn, current = self._follow_up(rng, current)
                session.turns.append(turn)
                if self._session_length(session) > self.max_len:
                    session.turns.pop()
                    break

        ids, mask = render_session(session, self.vocab)
        visual = session.visual
        return TrainingSample(
            input_ids=ids[:-1],
            target_ids=ids[1:],
            loss_mask=mask[1:],
            task=task,
            turns=len(session.turns),
            visual=visual.tolist() if visual is not None else None,
        )

    def build(self, seed: int, size: int) -> list[TrainingSample]:
        """``size`` samples; the leading samples cover every available task once."""
        if size < 1:
            raise ConversationError("dataset size must be positive")
        pool = self.task_ids
        samples = []
        for i in range(size):
            forced = pool[i] if size >= len(pool) and i < len(pool) else None
            samples.append(self.build_sample(seed, i, task=forced, single_turn=forced is not None))
        return samples


def build_dataset(
    corpus: list[LabeledClip],
    encoded: list[MotionTokens],
    vocab: UnifiedVocab,
    feature_clips: list[np.ndarray],
    seed: int,
    size: int,
    visual_features: list[np.ndarray] | None = None,
    **builder_options,
) -> list[TrainingSample]:
    """One-call dataset build; see DatasetBuilder for the knobs."""
    builder = DatasetBuilder(
        corpus=corpus,
        encoded=encoded,
        vocab=vocab,
        feature_clips=feature_clips,
        visual_features=visual_features,
        **builder_options,
    )
    return builder.build(seed, size)
