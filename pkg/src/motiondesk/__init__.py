"""Desk-scale conversational motion stack.

Library layout:

- `rotations`, `skeleton`, `features`, `corpus`: rig math, clip containers,
  redundant pose features, and the synthetic labeled corpus.
- `autodiff`, `optim`, `checkpoint`: reverse-mode tape over numpy arrays,
  AdamW with cosine schedule, and the binary checkpoint container.
- `tokenizer`: residual vector-quantized motion autoencoder.
- `vocab`, `conversation`: byte-level BPE, the unified text+motion id space,
  and the multi-turn dialogue renderer / dataset builder.
- `lm`: decoder-only transformer over the unified vocabulary.
- `vision`: pose-render features, linear projection, and the latent-query
  resampler for visual conditioning.
- `composition`: strategies for stitching multi-segment token streams.
- `metrics`, `report`: evaluation suite and file-based reporting.
- `config`, `service`, `runtime`, `cli`: TOML config, HTTP app, shared chat
  engine, and the command-line entry point.
"""

__version__ = "0.1.0"
