"""Command line: serve the manifest's models or train the prefix sampler."""

from __future__ import annotations

import argparse
import sys

from .prefix import (
    DEFAULT_BATCH,
    DEFAULT_EPOCHS,
    DEFAULT_LR,
    PrefixParaphraser,
    save_prefixes,
    train_prefix_alignment,
)
from .models import build_backbone
from .server import ModelLoadError, load_manifest, serve_models


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="modelserve")
    sub = parser.add_subparsers(dest="command", required=True)

    serve = sub.add_parser("serve", help="serve the wire protocol from a manifest")
    serve.add_argument("--manifest", required=True)

    train = sub.add_parser("train-prefix", help="distill prompted paraphrasing into prefixes")
    train.add_argument("--manifest", required=True)
    train.add_argument("--corpus", required=True, help="JSON-lines of {source, paraphrase}")
    train.add_argument("--out", required=True, help="where to save the learned prefixes (.pt)")
    train.add_argument("--epochs", type=int, default=DEFAULT_EPOCHS)
    train.add_argument("--batch", type=int, default=DEFAULT_BATCH)
    train.add_argument("--lr", type=float, default=DEFAULT_LR)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        manifest = load_manifest(args.manifest)
        if args.command == "serve":
            server = serve_models(manifest)
            print(f"serving on http://{manifest.host}:{server.server_address[1]}")
            try:
                server.serve_forever()
            except KeyboardInterrupt:
                pass
            finally:
                server.shutdown()
            return 0
        backbone = build_backbone(
            manifest.seed,
            d_model=manifest.d_model,
            num_layers=manifest.num_layers,
            num_heads=manifest.num_heads,
            d_ff=manifest.d_ff,
            d_kv=manifest.d_kv,
        )
        student = PrefixParaphraser(backbone, manifest.prefix_tokens, seed=manifest.seed)
        result = train_prefix_alignment(
            student, args.corpus, epochs=args.epochs, batch=args.batch, lr=args.lr
        )
        save_prefixes(student, args.out)
        print(
            f"alignment loss {result.initial:.6f} -> {result.final:.6f} "
            f"over {args.epochs} epochs; prefixes saved to {args.out}"
        )
        if result.diverged:
            print("warning: loss increased on 3 consecutive evaluations", file=sys.stderr)
        return 0
    except (ModelLoadError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
