"""Command line surface: preprocess, train, generate, evaluate, heatmap,
paramcount.  Every run writes a manifest (resolved arguments plus content
hashes of its inputs) into the output directory, so identical manifests
mean identical outputs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

from . import __version__
from . import generation as G
from . import heatmap as H
from . import metrics as E
from . import model as M
from . import text as T
from . import training as TR


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: Path, command: str, arguments: dict,
                   inputs: list[Path]) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "version": __version__,
        "arguments": {k: str(v) if isinstance(v, Path) else v
                      for k, v in sorted(arguments.items())
                      if not callable(v) and k != "command"},
        "inputs": {str(p): _sha256(Path(p)) for p in inputs},
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")
    return path


def _load_json(path: Path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}:{e.lineno}: invalid JSON ({e.msg})") from e


def cmd_preprocess(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    inputs = [Path(args.input)]
    if args.vocab:
        vocab = T.Vocabulary.load(args.vocab)
        vocab_path = Path(args.vocab)
        inputs.append(vocab_path)
    else:
        texts = []
        for _, record in T.iter_jsonl(args.input):
            texts.extend(T.record_texts(record, args.mode))
        vocab = T.build_vocab(texts, max_size=args.vocab_size, min_freq=args.min_freq)
        vocab_path = out / "vocab.txt"
        vocab.save(vocab_path)
    examples = T.load_dataset(
        args.input, args.mode, vocab,
        max_source_len=args.max_source_len,
        max_target_len=args.max_target_len,
        chunk_tokens=args.chunk_tokens,
        max_segments=args.max_segments,
    )
    for ex in examples:
        ex.validate()
    T.save_encoded(examples, out / "encoded.jsonl")
    write_manifest(out, "preprocess", vars(args) | {"vocab_file": str(vocab_path)},
                   inputs)
    print(f"wrote {len(examples)} examples to {out / 'encoded.jsonl'} "
          f"(vocab size {len(vocab)})")
    return 0


def cmd_train(args) -> int:
    model_cfg = M.HatConfig.from_dict(_load_json(args.model))
    raw = _load_json(args.train_config)
    opt_cfg = TR.OptimizerConfig.from_dict(raw)
    train_set = T.load_encoded(args.data)
    valid_set = T.load_encoded(args.valid) if args.valid else train_set
    out = Path(args.out)
    inputs = [Path(args.model), Path(args.train_config), Path(args.data)]
    if args.valid:
        inputs.append(Path(args.valid))
    if args.init_from:
        inputs.append(Path(args.init_from))
    write_manifest(out, "train", vars(args), inputs)
    best = TR.train(model_cfg, opt_cfg, train_set, valid_set, out,
                    init_from=args.init_from, valid_interval=args.valid_interval,
                    selection=args.selection)
    print(f"best checkpoint: {best}")
    return 0


def cmd_generate(args) -> int:
    cfg, params = M.load_checkpoint(args.checkpoint)
    vocab = T.Vocabulary.load(args.vocab)
    gen_cfg = G.GenConfig.from_dict(_load_json(args.gen_config))
    if args.trace_attention:
        gen_cfg.trace_attention = True
    examples = T.load_encoded(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    traces_dir = out / "traces"
    if gen_cfg.trace_attention:
        traces_dir.mkdir(exist_ok=True)
    hyp_lines = []
    ref_lines = []
    docs = []
    for i, ex in enumerate(examples):
        enc = M.encode(params, cfg, ex.source_ids, ex.segment_ids, ex.bos_positions)
        hyp = G.generate(params, cfg, enc, gen_cfg)
        hyp_lines.append(" ".join(vocab.decode(hyp.tokens)))
        ref_lines.append(" ".join(vocab.decode(ex.target_ids)))
        docs.append(ex.doc)
        if hyp.trace is not None:
            hyp.trace.save(traces_dir / f"{i}.npz")
    if args.concat_docs and all(d is not None for d in docs):
        hyp_lines = _concat_by_doc(hyp_lines, docs)
        ref_lines = _concat_by_doc(ref_lines, docs)
    (out / "hypotheses.txt").write_text("\n".join(hyp_lines) + "\n", encoding="utf-8")
    (out / "references.txt").write_text("\n".join(ref_lines) + "\n", encoding="utf-8")
    write_manifest(out, "generate", vars(args),
                   [Path(args.checkpoint), Path(args.vocab), Path(args.gen_config),
                    Path(args.data)])
    print(f"decoded {len(examples)} examples into {out}")
    return 0


def _concat_by_doc(lines: list[str], docs: list) -> list[str]:
    # chunked documents decode separately; their translations join back up
    merged: dict = {}
    order = []
    for line, doc in zip(lines, docs):
        if doc not in merged:
            merged[doc] = []
            order.append(doc)
        merged[doc].append(line)
    return [" ".join(merged[doc]) for doc in order]


def cmd_evaluate(args) -> int:
    cand_lines = Path(args.candidates).read_text(encoding="utf-8").splitlines()
    ref_lines = Path(args.references).read_text(encoding="utf-8").splitlines()
    if len(cand_lines) != len(ref_lines):
        raise ValueError(
            f"{len(cand_lines)} candidate lines vs {len(ref_lines)} reference lines"
        )
    cands = [E.tokenize_for_eval(line) for line in cand_lines]
    refs = [E.tokenize_for_eval(line) for line in ref_lines]
    report = E.build_report(cands, refs,
                            rouge=args.metric in ("rouge", "both"),
                            bleu=args.metric in ("bleu", "both"))
    print(report.to_text())
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
    return 0


def cmd_heatmap(args) -> int:
    trace = H.AttentionTrace.load(args.trace)
    trace.validate()
    layers = None if args.layer == "all" else [int(args.layer)]
    paths = H.export_layers(trace, args.out_prefix, k=args.top_k,
                            fmt=args.format, layers=layers)
    for p in paths:
        print(p)
    return 0


def cmd_paramcount(args) -> int:
    cfg = M.HatConfig.from_dict(_load_json(args.model))
    hat_cfg = cfg if cfg.mode == "hat" else M.plain_twin(cfg)
    plain_cfg = cfg if cfg.mode == "plain" else M.plain_twin(hat_cfg)
    for label, c in (("hat", hat_cfg), ("plain", plain_cfg)):
        total = M.count_parameters(c)
        parts = ", ".join(f"{k}={v:,}" for k, v in M.parameter_breakdown(c).items())
        print(f"{label}: {total:,} ({parts})")
    delta = M.count_parameters(hat_cfg) - M.count_parameters(plain_cfg)
    print(f"hat - plain: {delta:,}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hatseq",
        description="hierarchical attention seq2seq: preprocessing, training, "
                    "generation, evaluation, and attention heatmaps",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="encode a JSONL dataset")
    p.add_argument("--input", required=True)
    p.add_argument("--mode", required=True, choices=("document", "conversation", "mt"))
    p.add_argument("--out", required=True)
    p.add_argument("--vocab", help="existing vocabulary file; built from the corpus if absent")
    p.add_argument("--vocab-size", type=int, default=32000)
    p.add_argument("--min-freq", type=int, default=1)
    p.add_argument("--max-source-len", type=int, default=3072)
    p.add_argument("--max-target-len", type=int, default=512)
    p.add_argument("--chunk-tokens", type=int, default=512)
    p.add_argument("--max-segments", type=int, default=16)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--model", required=True, help="model config JSON")
    p.add_argument("--train-config", required=True, help="optimizer config JSON")
    p.add_argument("--data", required=True, help="encoded training set")
    p.add_argument("--valid", help="encoded validation set (defaults to --data)")
    p.add_argument("--out", required=True)
    p.add_argument("--init-from", help="checkpoint to warm-start matching parameters from")
    p.add_argument("--valid-interval", type=int, default=50)
    p.add_argument("--selection", choices=("loss",), default="loss")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="decode a test set with beam search")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--gen-config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--trace-attention", action="store_true")
    p.add_argument("--concat-docs", action="store_true",
                   help="rejoin chunked documents before writing hypotheses")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="score candidates against references")
    p.add_argument("--candidates", required=True)
    p.add_argument("--references", required=True)
    p.add_argument("--metric", choices=("rouge", "bleu", "both"), default="both")
    p.add_argument("--out", help="also write the report as JSON")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("heatmap", help="export attention heatmaps from a trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--layer", default="all", help="layer index or 'all'")
    p.add_argument("--top-k", type=int, default=16)
    p.add_argument("--format", choices=("csv", "pgm"), default="csv")
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("paramcount", help="report parameter counts and the hat-plain delta")
    p.add_argument("--model", required=True)
    p.set_defaults(func=cmd_paramcount)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
