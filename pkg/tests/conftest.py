"""Shared fixtures: one small trained serving stack, built once per run.

The stack is deliberately tiny (seconds to train) and heavily overfit; its
training captions double as prompts whose greedy answers are memorized
motion spans, which gives turn-level tests a reliable motion answer
without a full-scale model.
"""

from dataclasses import dataclass, field

import numpy as np
import pytest

from motiondesk.config import DecodingSpec
from motiondesk.conversation import DatasetBuilder, TrainingSample
from motiondesk.corpus import LabeledClip, make_corpus
from motiondesk.features import extract_features
from motiondesk.lm import LmConfig, train_lm
from motiondesk.runtime import ChatRuntime, ModelBundle, pose_condition_vector
from motiondesk.skeleton import forward_kinematics
from motiondesk.tokenizer import MotionTokenizer, TokenizerConfig, train_tokenizer
from motiondesk.vocab import UnifiedVocab, train_text_vocab


@dataclass
class ServingStack:
    corpus: list[LabeledClip]
    feats: list[np.ndarray]
    tokenizer: MotionTokenizer
    vocab: UnifiedVocab
    visuals: list[np.ndarray]
    samples: list[TrainingSample]
    bundle: ModelBundle
    decoding: DecodingSpec = field(default_factory=lambda: DecodingSpec(max_new_tokens=64))

    def runtime(self, **kwargs) -> ChatRuntime:
        kwargs.setdefault("decoding", self.decoding)
        return ChatRuntime(self.bundle, **kwargs)

    def user_texts(self, task: str) -> list[str]:
        """First-turn user texts of single-turn samples of ``task``.

        Rendered prompts are byte-identical when this text is posted back,
        so the overfit model replays the memorized answer.
        """
        out = []
        for sample in self.samples:
            if sample.task != task or sample.turns != 1 or sample.visual is not None:
                continue
            text = self.vocab.text.decode(
                [i for i in sample.input_ids if 0 <= i < self.vocab.text.k_t]
            )
            body = text.split("USER: ", 1)[1]
            out.append(body.split(" ASSISTANT: ", 1)[0])
        return out


def build_serving_stack() -> ServingStack:
    corpus = make_corpus(15, seed=7, n_frames=(64, 48, 80))
    feats = [extract_features(item.clip) for item in corpus]
    tok_cfg = TokenizerConfig(
        codebook_size=16, code_dim=16, n_quantizers=2, downsample=4, hidden=32
    )
    tokenizer, _ = train_tokenizer(feats, tok_cfg, steps=200, batch_size=8, lr=3e-4, seed=0)

    text_vocab = train_text_vocab([item.caption for item in corpus], k_t=280)
    vocab = UnifiedVocab(text_vocab, n_quantizers=2, codebook_size=16)
    encoded = [tokenizer.encode(f) for f in feats]
    visuals = []
    for item in corpus:
        pos = forward_kinematics(item.clip.skeleton, item.clip.root_pos, item.clip.quats)
        visuals.append(pose_condition_vector(pos[[0, -1]]))

    builder = DatasetBuilder(
        corpus=corpus,
        encoded=encoded,
        vocab=vocab,
        feature_clips=feats,
        visual_features=visuals,
        max_len=256,
    )
    samples = builder.build(seed=3, size=40)

    lm_cfg = LmConfig(
        vocab_size=vocab.size,
        n_layers=2,
        n_heads=2,
        d_model=64,
        d_ff=192,
        max_context=384,
        visual_dim=len(visuals[0]),
        vis_id=vocab.vis_id,
    )
    params, _ = train_lm(samples, lm_cfg, seed=0, steps=600, batch_size=4, lr=3e-3)
    bundle = ModelBundle(
        vocab=vocab, tokenizer=tokenizer, lm_params=params, lm_config=lm_cfg
    )
    return ServingStack(
        corpus=corpus,
        feats=feats,
        tokenizer=tokenizer,
        vocab=vocab,
        visuals=visuals,
        samples=samples,
        bundle=bundle,
    )


@pytest.fixture(scope="session")
def serving() -> ServingStack:
    return build_serving_stack()
