"""Command-line entry point: the pipeline and the services as subcommands.

    gen-corpus       synthesize a labeled clip corpus
    train-tokenizer  fit the motion tokenizer on a corpus
    build-data       render conversation samples from corpus plus tokenizer
    train-lm         train the language model on rendered samples
    eval             score prediction clips against ground truth
    compose          splice motion token files into one motion
    chat             interactive terminal session over local checkpoints
    serve            HTTP chat service
    fps              generation throughput probe

Every subcommand accepts ``--config`` (TOML; defaults apply without one)
and ``--seed`` (overrides the configured seed). Artifact locations come
from the config and can be overridden per command. Exit status is 0 on
success, 2 on usage errors, and 1 on runtime failures, which are reported
on stderr as a single ``error:`` line.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .composition import compose, seam_frames, strategy_from_name
from .config import AppConfig, ConfigError, load_config, write_default_config
from .conversation import DatasetBuilder, load_dataset, save_dataset
from .corpus import LabeledClip, load_corpus, make_corpus, save_corpus
from .features import extract_features, recover_positions
from .lm import LmConfig, save_lm, train_lm
from .metrics import (
    RETRIEVAL_POOL,
    FeatureExtractor,
    GaussianStats,
    aggregate_runs,
    ade_fde,
    diversity_mmodality,
    fid,
    fps_harness,
    linguistic,
    mpjpe_family,
    retrieval_metrics,
)
from .report import write_report
from .runtime import (
    LM_FILE,
    TOKENIZER_FILE,
    VOCAB_FILE,
    ChatError,
    ChatRuntime,
    pose_condition_vector,
)
from .service import condition_from_json, serve
from .skeleton import MotionClip, forward_kinematics
from .tokenizer import MotionTokenizer, MotionTokens, train_tokenizer
from .vocab import UnifiedVocab, train_text_vocab

MOTION_FORMAT_VERSION = 1

# Phrasings of the caption-free generation tasks; used when no prompt file
# is given so the probe works against any trained checkpoint.
_FPS_PROMPTS = (
    "Please generate a random motion.",
    "Show me any motion you like.",
    "Please generate a motion that is around 64 frames long.",
)


# ---------------------------------------------------------------------------
# shared plumbing


def _load_app_config(args: argparse.Namespace) -> AppConfig:
    config = load_config(args.config) if args.config is not None else AppConfig()
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    return config


def _dir_arg(value: Path | None, fallback: Path) -> Path:
    return Path(value) if value is not None else fallback


def _require_dir(path: Path, role: str) -> Path:
    if not path.is_dir():
        raise ConfigError(f"{role} {path} does not exist; run the producing step first")
    return path


def _corpus_features(corpus: list[LabeledClip]) -> list[np.ndarray]:
    return [extract_features(item.clip) for item in corpus]


def _corpus_visuals(corpus: list[LabeledClip]) -> list[np.ndarray]:
    """First-and-last-pose conditioning vector per clip."""
    out = []
    for item in corpus:
        pos = forward_kinematics(item.clip.skeleton, item.clip.root_pos, item.clip.quats)
        out.append(pose_condition_vector(pos[[0, -1]]))
    return out


# ---------------------------------------------------------------------------
# pipeline commands


def _cmd_gen_corpus(args: argparse.Namespace) -> int:
    config = _load_app_config(args)
    corpus = make_corpus(
        args.count,
        seed=config.seed,
        n_frames=tuple(args.lengths),
        fps=config.fps,
        skeleton=config.rig(),
    )
    out_dir = _dir_arg(args.out, config.corpus_dir)
    save_corpus(corpus, out_dir)
    print(f"wrote {len(corpus)} clips to {out_dir}")
    return 0


def _cmd_train_tokenizer(args: argparse.Namespace) -> int:
    config = _load_app_config(args)
    corpus_dir = _require_dir(_dir_arg(args.corpus, config.corpus_dir), "corpus dir")
    corpus = load_corpus(corpus_dir)
    feats = _corpus_features(corpus)
    tokenizer, log = train_tokenizer(
        feats,
        config.tokenizer,
        steps=args.steps,
        batch_size=args.batch_size,
        lr=args.lr,
        seed=config.seed,
    )
    out_dir = _dir_arg(args.checkpoint_dir, config.checkpoint_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / TOKENIZER_FILE
    tokenizer.save(path)
    print(
        f"tokenizer: {args.steps} steps on {len(corpus)} clips, "
        f"loss {log.loss[0]:.4f} -> {log.loss[-1]:.4f}, wrote {path}"
    )
    return 0


def _cmd_build_data(args: argparse.Namespace) -> int:
    config = _load_app_config(args)
    corpus_dir = _require_dir(_dir_arg(args.corpus, config.corpus_dir), "corpus dir")
    checkpoint_dir = _require_dir(
        _dir_arg(args.checkpoint_dir, config.checkpoint_dir), "checkpoint dir"
    )
    corpus = load_corpus(corpus_dir)
    tokenizer = MotionTokenizer.load(checkpoint_dir / TOKENIZER_FILE)
    feats = _corpus_features(corpus)
    encoded = [tokenizer.encode(f) for f in feats]
    text = train_text_vocab([item.caption for item in corpus], k_t=config.lm.k_text)
    vocab = UnifiedVocab(
        text, tokenizer.config.n_quantizers, tokenizer.config.codebook_size
    )
    visuals = None if args.no_visuals else _corpus_visuals(corpus)
    builder = DatasetBuilder(
        corpus,
        encoded,
        vocab,
        feats,
        visual_features=visuals,
        fps=config.fps,
        max_len=args.max_len if args.max_len is not None else config.lm.max_context,
    )
    samples = builder.build(seed=config.seed, size=args.size)
    dataset_dir = _dir_arg(args.dataset_dir, config.dataset_dir)
    dataset_dir.mkdir(parents=True, exist_ok=True)
    data_path = dataset_dir / "train.jsonl"
    save_dataset(data_path, samples)
    vocab_path = checkpoint_dir / VOCAB_FILE
    vocab.save(vocab_path)
    print(
        f"wrote {len(samples)} samples to {data_path} "
        f"(vocabulary of {vocab.size} ids at {vocab_path})"
    )
    return 0


def _cmd_train_lm(args: argparse.Namespace) -> int:
    config = _load_app_config(args)
    checkpoint_dir = _require_dir(
        _dir_arg(args.checkpoint_dir, config.checkpoint_dir), "checkpoint dir"
    )
    data_path = (
        Path(args.data) if args.data is not None else config.dataset_dir / "train.jsonl"
    )
    samples = load_dataset(data_path)
    vocab = UnifiedVocab.load(checkpoint_dir / VOCAB_FILE)
    visual_dims = {len(s.visual) for s in samples if s.visual is not None}
    if len(visual_dims) > 1:
        raise ConfigError(f"dataset mixes visual dimensions {sorted(visual_dims)}")
    visual_dim = visual_dims.pop() if visual_dims else None
    lm_config = LmConfig(
        vocab_size=vocab.size,
        n_layers=config.lm.n_layers,
        n_heads=config.lm.n_heads,
        d_model=config.lm.d_model,
        d_ff=config.lm.d_ff,
        max_context=config.lm.max_context,
        visual_dim=visual_dim,
        vis_id=vocab.vis_id if visual_dim is not None else None,
    )
    params = None
    step = 0
    if args.pretrain_steps:
        params, log = train_lm(
            samples,
            lm_config,
            seed=config.seed,
            stage="pretrain",
            steps=args.pretrain_steps,
            batch_size=args.batch_size,
            lr=args.lr,
            log_every=args.log_every,
        )
        step = args.pretrain_steps
        print(f"pretrain: {args.pretrain_steps} steps, loss {log.loss[0]:.4f} -> {log.loss[-1]:.4f}")
    params, log = train_lm(
        samples,
        lm_config,
        seed=config.seed,
        stage="instruct",
        steps=args.steps,
        batch_size=args.batch_size,
        lr=args.lr,
        init_params=params,
        start_step=step,
        log_every=args.log_every,
    )
    step += args.steps
    path = checkpoint_dir / LM_FILE
    save_lm(path, params, lm_config, step)
    print(
        f"instruct: {args.steps} steps on {len(samples)} samples, "
        f"loss {log.loss[0]:.4f} -> {log.loss[-1]:.4f}, wrote {path}"
    )
    return 0


# ---------------------------------------------------------------------------
# evaluation


def _load_clip_dir(path: Path) -> tuple[list[MotionClip], list[str] | None]:
    """Clips plus families when the directory carries a manifest."""
    _require_dir(path, "clip dir")
    if (path / "manifest.jsonl").is_file():
        corpus = load_corpus(path)
        return [item.clip for item in corpus], [item.family for item in corpus]
    files = sorted(path.glob("clip_*.json")) or sorted(path.glob("*.json"))
    if not files:
        raise ConfigError(f"no clip files in {path}")
    return [MotionClip.load(f) for f in files], None


def _load_captions(path: Path) -> list[str]:
    lines = [ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines()]
    if not lines:
        raise ConfigError(f"caption file {path} is empty")
    return lines


def _clip_positions(clip: MotionClip) -> np.ndarray:
    return forward_kinematics(clip.skeleton, clip.root_pos, clip.quats)


def _family_groups(
    embeds: np.ndarray, families: list[str] | None
) -> dict[str, np.ndarray]:
    """Per-family embedding groups; one pooled group when labels are absent
    or any family is too small to measure a within-condition spread."""
    if families is not None:
        groups: dict[str, list[int]] = {}
        for i, fam in enumerate(families):
            groups.setdefault(fam, []).append(i)
        if all(len(idx) >= 2 for idx in groups.values()):
            return {fam: embeds[idx] for fam, idx in groups.items()}
    return {"all": embeds}


def _eval_once(
    pred: list[MotionClip],
    gt: list[MotionClip],
    pred_families: list[str] | None,
    pred_captions: list[str] | None,
    gt_captions: list[str] | None,
    seed: int,
) -> dict[str, float]:
    extractor = FeatureExtractor(seed=seed)
    pred_embeds = extractor.embed_motions([extract_features(c) for c in pred])
    gt_embeds = extractor.embed_motions([extract_features(c) for c in gt])
    out: dict[str, float] = {
        "FID": fid(
            GaussianStats.from_features(pred_embeds),
            GaussianStats.from_features(gt_embeds),
        )
    }
    out.update(
        diversity_mmodality(
            _family_groups(pred_embeds, pred_families),
            div_subset_size=max(len(pred) // 2, 1),
            m=2,
            seed=seed,
        )
    )
    paired = len(pred) == len(gt) and all(
        p.root_pos.shape == g.root_pos.shape for p, g in zip(pred, gt)
    )
    if paired:
        per_pair = [
            mpjpe_family(_clip_positions(p), _clip_positions(g))
            | ade_fde(_clip_positions(p), _clip_positions(g))
            for p, g in zip(pred, gt)
        ]
        for key in per_pair[0]:
            out[key] = float(np.mean([row[key] for row in per_pair]))
    if gt_captions is not None:
        if len(gt_captions) != len(pred):
            raise ConfigError(
                f"{len(gt_captions)} ground-truth captions for {len(pred)} prediction clips"
            )
        if len(pred) >= RETRIEVAL_POOL:
            out.update(
                retrieval_metrics(
                    pred_embeds, extractor.embed_captions(gt_captions), seed=seed
                )
            )
    if pred_captions is not None and gt_captions is not None:
        if len(pred_captions) != len(gt_captions):
            raise ConfigError(
                f"{len(pred_captions)} candidate captions for {len(gt_captions)} references"
            )
        out.update(linguistic(pred_captions, gt_captions))
    return out


def _cmd_eval(args: argparse.Namespace) -> int:
    config = _load_app_config(args)
    pred, pred_families = _load_clip_dir(Path(args.pred))
    gt, _ = _load_clip_dir(Path(args.gt))
    pred_captions = _load_captions(args.pred_captions) if args.pred_captions else None
    gt_captions = _load_captions(args.gt_captions) if args.gt_captions else None
    per_run = [
        _eval_once(pred, gt, pred_families, pred_captions, gt_captions, config.seed + r)
        for r in range(args.runs)
    ]
    report = aggregate_runs(per_run)
    if args.out_dir is not None:
        write_report(report, args.out_dir, per_run=per_run)
    print(json.dumps(report.to_json(), indent=2))
    return 0


# ---------------------------------------------------------------------------
# composition


def _cmd_compose(args: argparse.Namespace) -> int:
    config = _load_app_config(args)
    checkpoint_dir = _require_dir(
        _dir_arg(args.checkpoint_dir, config.checkpoint_dir), "checkpoint dir"
    )
    tokenizer = MotionTokenizer.load(checkpoint_dir / TOKENIZER_FILE)
    segments = [MotionTokens.load(p) for p in args.tokens]
    strategy = strategy_from_name(args.strategy, window=args.window)
    features = compose(segments, strategy, tokenizer)
    positions = recover_positions(features, tokenizer.config.n_joints)
    doc = {
        "format_version": MOTION_FORMAT_VERSION,
        "fps": config.fps,
        "frames": positions.tolist(),
        "seams": seam_frames(segments) if len(segments) > 1 else [],
    }
    payload = json.dumps(doc)
    if args.out is not None:
        Path(args.out).write_text(payload, encoding="utf-8")
        print(f"wrote {positions.shape[0]} frames to {args.out}")
    else:
        print(payload)
    return 0


# ---------------------------------------------------------------------------
# serving


def _cmd_serve(args: argparse.Namespace) -> int:
    config = _load_app_config(args)
    _require_dir(
        _dir_arg(args.checkpoint_dir, config.checkpoint_dir), "checkpoint dir"
    )
    if args.checkpoint_dir is not None:
        config = dataclasses.replace(config, checkpoint_dir=Path(args.checkpoint_dir))
    runtime = ChatRuntime.from_config(config, log_dir=args.session_dir)
    if args.session_dir is not None:
        recovered = runtime.recover()
        if recovered:
            print(f"recovered {recovered} sessions from {args.session_dir}")
    host = args.host if args.host is not None else config.host
    port = args.port if args.port is not None else config.port
    server = serve(runtime, host=host, port=port, verbose=args.verbose)
    print(f"listening on http://{host}:{server.port}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def _print_motion(view_json: dict) -> str:
    frames = view_json["frames"]
    seams = view_json["seams"]
    return f"{len(frames)} frames at {view_json['fps']:g} fps, seams {seams}"


def _cmd_chat(args: argparse.Namespace) -> int:
    config = _load_app_config(args)
    _require_dir(
        _dir_arg(args.checkpoint_dir, config.checkpoint_dir), "checkpoint dir"
    )
    if args.checkpoint_dir is not None:
        config = dataclasses.replace(config, checkpoint_dir=Path(args.checkpoint_dir))
    runtime = ChatRuntime.from_config(config, log_dir=args.session_dir)
    pose = None
    if args.pose is not None:
        pose = condition_from_json(
            json.loads(Path(args.pose).read_text(encoding="utf-8"))
        )
    session_id = runtime.create_session(pose_condition=pose)
    print(f"session {session_id}")
    print("commands: :motion [strategy] [file]  :history  :quit")
    while True:
        try:
            line = input("you> ").strip()
        except (EOFError, KeyboardInterrupt):
            break
        if not line:
            continue
        if line in (":quit", ":q"):
            break
        try:
            if line == ":history":
                print(json.dumps(runtime.history(session_id), indent=2))
            elif line.startswith(":motion"):
                parts = line.split()
                strategy = parts[1] if len(parts) > 1 else "joint"
                view = runtime.get_motion(session_id, strategy).to_json()
                print(_print_motion(view))
                if len(parts) > 2:
                    Path(parts[2]).write_text(json.dumps(view), encoding="utf-8")
                    print(f"wrote {parts[2]}")
            else:
                record = runtime.post_turn(session_id, line)
                if record.answer_kind == "motion":
                    print(f"assistant> [motion #{record.motion_turn_index}]")
                else:
                    print(f"assistant> {record.answer_text}")
        except ChatError as exc:
            print(f"error: {exc}")
    return 0


def _cmd_fps(args: argparse.Namespace) -> int:
    config = _load_app_config(args)
    _require_dir(
        _dir_arg(args.checkpoint_dir, config.checkpoint_dir), "checkpoint dir"
    )
    if args.checkpoint_dir is not None:
        config = dataclasses.replace(config, checkpoint_dir=Path(args.checkpoint_dir))
    runtime = ChatRuntime.from_config(config)
    prompts = list(_FPS_PROMPTS)
    if args.prompts is not None:
        prompts = _load_captions(args.prompts)
    rate = fps_harness(
        runtime.motion_timesteps,
        prompts,
        runs=args.runs,
        downsample=runtime.bundle.tokenizer.config.downsample,
    )
    print(json.dumps({"fps": rate, "runs": args.runs, "contexts": len(prompts)}))
    return 0


def _cmd_init_config(args: argparse.Namespace) -> int:
    path = write_default_config(args.out)
    print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--config", type=Path, metavar="FILE", help="TOML config; defaults apply without one"
    )
    common.add_argument("--seed", type=int, help="override the configured seed")

    parser = argparse.ArgumentParser(
        prog="motiondesk",
        description="Desk-scale conversational motion stack.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("gen-corpus", parents=[common], help="synthesize a labeled clip corpus")
    p.add_argument("--count", type=int, default=60, help="number of clips (default 60)")
    p.add_argument(
        "--lengths",
        type=int,
        nargs="+",
        default=[64, 48, 80],
        metavar="FRAMES",
        help="clip lengths cycled per family round (default 64 48 80)",
    )
    p.add_argument("--out", type=Path, metavar="DIR", help="corpus directory override")
    p.set_defaults(func=_cmd_gen_corpus)

    p = sub.add_parser("train-tokenizer", parents=[common], help="fit the motion tokenizer")
    p.add_argument("--corpus", type=Path, metavar="DIR", help="corpus directory override")
    p.add_argument("--checkpoint-dir", type=Path, metavar="DIR", help="output directory override")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--batch-size", type=int, default=24)
    p.add_argument("--lr", type=float, default=2e-4)
    p.set_defaults(func=_cmd_train_tokenizer)

    p = sub.add_parser("build-data", parents=[common], help="render conversation samples")
    p.add_argument("--corpus", type=Path, metavar="DIR", help="corpus directory override")
    p.add_argument("--checkpoint-dir", type=Path, metavar="DIR", help="tokenizer/vocab directory override")
    p.add_argument("--dataset-dir", type=Path, metavar="DIR", help="output directory override")
    p.add_argument("--size", type=int, default=200, help="samples to render (default 200)")
    p.add_argument(
        "--max-len", type=int, metavar="TOKENS", help="sample length cap (default: lm.max_context)"
    )
    p.add_argument(
        "--no-visuals", action="store_true", help="leave out the image-conditioned task"
    )
    p.set_defaults(func=_cmd_build_data)

    p = sub.add_parser("train-lm", parents=[common], help="train the language model")
    p.add_argument("--data", type=Path, metavar="FILE", help="dataset override (default: dataset_dir/train.jsonl)")
    p.add_argument("--checkpoint-dir", type=Path, metavar="DIR", help="vocab/output directory override")
    p.add_argument("--steps", type=int, default=600, help="instruction-stage steps (default 600)")
    p.add_argument(
        "--pretrain-steps", type=int, default=0, help="translation-only warmup steps (default 0)"
    )
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--log-every", type=int, default=50)
    p.set_defaults(func=_cmd_train_lm)

    p = sub.add_parser("eval", parents=[common], help="score predictions against ground truth")
    p.add_argument("--pred", type=Path, required=True, metavar="DIR", help="prediction clip directory")
    p.add_argument("--gt", type=Path, required=True, metavar="DIR", help="ground-truth clip directory")
    p.add_argument("--pred-captions", type=Path, metavar="FILE", help="candidate captions, one per line")
    p.add_argument("--gt-captions", type=Path, metavar="FILE", help="reference captions, one per line")
    p.add_argument("--runs", type=int, default=1, help="evaluator seeds to average (default 1)")
    p.add_argument("--out-dir", type=Path, metavar="DIR", help="also write JSON/CSV/figure files here")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("compose", parents=[common], help="splice motion token files")
    p.add_argument("--tokens", type=Path, nargs="+", required=True, metavar="FILE", help="segment token files, in order")
    p.add_argument(
        "--strategy", default="joint", choices=("independent", "past", "joint")
    )
    p.add_argument("--window", type=int, default=4, help="context tokens for the past strategy")
    p.add_argument("--checkpoint-dir", type=Path, metavar="DIR", help="tokenizer directory override")
    p.add_argument("--out", type=Path, metavar="FILE", help="motion JSON destination (default: stdout)")
    p.set_defaults(func=_cmd_compose)

    p = sub.add_parser("chat", parents=[common], help="terminal chat session")
    p.add_argument("--checkpoint-dir", type=Path, metavar="DIR", help="model directory override")
    p.add_argument("--session-dir", type=Path, metavar="DIR", help="enable JSONL session event logs")
    p.add_argument("--pose", type=Path, metavar="FILE", help="pose-condition JSON for the session")
    p.set_defaults(func=_cmd_chat)

    p = sub.add_parser("serve", parents=[common], help="run the HTTP chat service")
    p.add_argument("--checkpoint-dir", type=Path, metavar="DIR", help="model directory override")
    p.add_argument("--session-dir", type=Path, metavar="DIR", help="enable JSONL session event logs")
    p.add_argument("--host", help="bind address override")
    p.add_argument("--port", type=int, help="port override; 0 picks a free port")
    p.add_argument("--verbose", action="store_true", help="log requests to stderr")
    p.set_defaults(func=_cmd_serve)

    p = sub.add_parser("fps", parents=[common], help="measure generation throughput")
    p.add_argument("--checkpoint-dir", type=Path, metavar="DIR", help="model directory override")
    p.add_argument("--prompts", type=Path, metavar="FILE", help="prompt texts, one per line")
    p.add_argument("--runs", type=int, default=1)
    p.set_defaults(func=_cmd_fps)

    p = sub.add_parser("init-config", help="write the commented default config file")
    p.add_argument("--out", type=Path, default=Path("motiondesk.toml"), metavar="FILE")
    p.set_defaults(func=_cmd_init_config)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: 0 for --help, 2 for usage errors
        return int(exc.code or 0)
    try:
        return args.func(args)
    except KeyboardInterrupt:
        return 1
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
