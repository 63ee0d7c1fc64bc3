"""Command-line entry point.

Subcommands: build-vocab, pretrain, finetune, infill, score, eval, report.

Configuration precedence is flags > config file > built-in defaults; the
config file is flat ``key=value`` text whose keys are exactly the flag
names. Every command that writes an artifact echoes its effective
configuration to ``<output>.cfg``.

Exit codes: 0 ok, 2 bad input, 3 I/O failure, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

from .errors import (
    BlankLMError,
    CheckpointError,
    ContractError,
    DegenerateInputError,
    NumericError,
)
from .infer import (
    ClozePattern,
    DecodeConfig,
    EvalConfig,
    eval_last_word,
    eval_perplexity,
    infill,
    parse_infill_text,
    score_labels,
)
from .model import Model, ModelConfig, load_checkpoint
from .rng import STREAM_DECODE, derive_rng, new_rng
from .spans import OBJECTIVES, CorruptionConfig
from .train import (
    TrainConfig,
    TrainState,
    finetune_cloze_step,
    finetune_seq2seq_step,
    train_loop,
)
from .vocab import Vocab, build_vocab, load_corpus

EXIT_OK, EXIT_BAD_INPUT, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

MODEL_KEYS = {
    "n-layers": ("n_layers", int),
    "hidden-size": ("hidden_size", int),
    "n-heads": ("n_heads", int),
    "ffn-size": ("ffn_size", int),
    "max-pos1": ("max_pos1", int),
    "max-pos2": ("max_pos2", int),
    "dropout": ("dropout", float),
    "attn-dropout": ("attn_dropout", float),
    "use-pos2": ("use_pos2", "bool"),
    "tie-output": ("tie_output", "bool"),
}
TRAIN_KEYS = {
    "peak-lr": ("peak_lr", float),
    "warmup-steps": ("warmup_steps", int),
    "max-steps": ("max_steps", int),
    "batch-size": ("batch_size", int),
    "weight-decay": ("weight_decay", float),
    "grad-clip": ("grad_clip", float),
    "label-smoothing": ("label_smoothing", float),
    "seed": ("seed", int),
    "max-seq-len": ("max_seq_len", int),
    "checkpoint-interval": ("checkpoint_interval", int),
    "deterministic": ("deterministic", "bool"),
}
CORRUPTION_KEYS = {
    "poisson-lambda": ("lam", float),
    "min-mask-ratio": ("min_mask_ratio", float),
    "objective": ("objective", str),
    "multi-task": ("multi_task", "bool"),
    "shuffle-spans": ("shuffle_spans", "bool"),
    "sentinel-mode": ("sentinel_mode", "bool"),
}


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("true", "1", "yes", "on"):
        return True
    if v in ("false", "0", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {s!r}")


def _add_config_flags(parser: argparse.ArgumentParser, keys: dict) -> None:
    for flag, (_, typ) in keys.items():
        if typ == "bool":
            parser.add_argument(f"--{flag}", type=_parse_bool, default=None)
        elif typ is str and flag == "objective":
            parser.add_argument(f"--{flag}", choices=OBJECTIVES, default=None)
        else:
            parser.add_argument(f"--{flag}", type=typ, default=None)


def _read_config_file(path: str) -> dict[str, str]:
    pairs = {}
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ContractError(f"config line without '=': {line!r}")
        k, v = line.split("=", 1)
        pairs[k.strip()] = v.strip()
    return pairs


def _merge(keys: dict, args, file_pairs: dict[str, str]) -> dict:
    """flags > config file > dataclass defaults (by omitting the key)."""
    out = {}
    for flag, (field, typ) in keys.items():
        file_val = file_pairs.get(flag)
        flag_val = getattr(args, flag.replace("-", "_"), None)
        if flag_val is not None:
            out[field] = flag_val
        elif file_val is not None:
            if typ == "bool":
                out[field] = _parse_bool(file_val)
            else:
                out[field] = typ(file_val)
    return out


def _effective_pairs(keys: dict, cfg) -> dict[str, str]:
    pairs = {}
    for flag, (field, _) in keys.items():
        v = getattr(cfg, field)
        pairs[flag] = str(v).lower() if isinstance(v, bool) else str(v)
    return pairs


def _write_sidecar(out_path: str | Path, pairs: dict[str, str]) -> None:
    text = "\n".join(f"{k}={v}" for k, v in sorted(pairs.items())) + "\n"
    Path(str(out_path) + ".cfg").write_text(text, encoding="utf-8")


def _require_file(path: str) -> None:
    if not Path(path).is_file():
        raise FileNotFoundError(f"missing file: {path}")


# ---------------------------------------------------------------------------
# commands


def cmd_build_vocab(args) -> int:
    _require_file(args.corpus)
    lines = [
        ln
        for ln in Path(args.corpus).read_text(encoding="utf-8").splitlines()
        if ln.strip()
    ]
    vocab = build_vocab(lines, args.max_size, n_sentinels=args.sentinels)
    vocab.save(args.out)
    _write_sidecar(
        args.out,
        {
            "corpus": args.corpus,
            "max-size": str(args.max_size),
            "sentinels": str(args.sentinels),
        },
    )
    print(f"wrote vocab of {len(vocab)} tokens to {args.out}")
    return EXIT_OK


def _load_model_and_vocab(args) -> tuple[Model, Vocab, dict]:
    _require_file(args.checkpoint)
    _require_file(args.vocab)
    model, extras, opt = load_checkpoint(args.checkpoint)
    vocab = Vocab.load(args.vocab)
    if len(vocab) != model.cfg.vocab_size:
        raise ContractError(
            f"vocab has {len(vocab)} tokens but checkpoint expects "
            f"{model.cfg.vocab_size}"
        )
    return model, vocab, opt


def cmd_pretrain(args) -> int:
    _require_file(args.corpus)
    _require_file(args.vocab)
    if args.config:
        _require_file(args.config)
    file_pairs = _read_config_file(args.config) if args.config else {}

    vocab = Vocab.load(args.vocab)
    tcfg = TrainConfig(**_merge(TRAIN_KEYS, args, file_pairs))
    ccfg = CorruptionConfig(**_merge(CORRUPTION_KEYS, args, file_pairs))
    model_kwargs = _merge(MODEL_KEYS, args, file_pairs)
    model_kwargs["vocab_size"] = len(vocab)

    if ccfg.sentinel_mode:
        worst_case_spans = math.ceil(ccfg.min_mask_ratio * tcfg.max_seq_len)
        if vocab.n_sentinels < worst_case_spans:
            raise ContractError(
                f"sentinel mode can need up to {worst_case_spans} sentinels at "
                f"max-seq-len {tcfg.max_seq_len}; vocab has {vocab.n_sentinels}"
            )

    docs = load_corpus(args.corpus, vocab)
    state = None
    if args.resume:
        # Resume keeps the checkpoint's model config; model flags are ignored.
        model, extras, opt = load_checkpoint(args.out)
        state = TrainState.from_opt_tensors(int(extras.get("step", 0)), opt)
    else:
        cfg = ModelConfig(**model_kwargs)
        model = Model.init(cfg, new_rng(tcfg.seed))

    flags = {}
    flags.update(_effective_pairs(TRAIN_KEYS, tcfg))
    flags.update(_effective_pairs(CORRUPTION_KEYS, ccfg))
    flags.update(_effective_pairs(MODEL_KEYS, model.cfg))
    run_header = {f"run.{k}": v for k, v in sorted(flags.items())}

    state = train_loop(
        docs,
        vocab,
        model,
        tcfg,
        ccfg,
        metrics_path=args.metrics,
        checkpoint_path=args.out,
        state=state,
        extra_header=run_header,
    )
    _write_sidecar(args.out, flags)
    from .report import read_metrics

    final = read_metrics(args.metrics)["loss"][-1]
    print(f"final loss {final:.6f} after {state.step} steps")
    return EXIT_OK


def _read_tsv(path: str) -> list[tuple[str, str]]:
    rows = []
    for ln in Path(path).read_text(encoding="utf-8").splitlines():
        if not ln.strip():
            continue
        if "\t" not in ln:
            raise ContractError(f"task line missing tab: {ln!r}")
        a, b = ln.split("\t", 1)
        rows.append((a, b))
    if not rows:
        raise DegenerateInputError(f"no rows in {path}")
    return rows


def cmd_finetune(args) -> int:
    model, vocab, _ = _load_model_and_vocab(args)
    _require_file(args.task)
    file_pairs = _read_config_file(args.config) if args.config else {}
    tcfg = TrainConfig(**_merge(TRAIN_KEYS, args, file_pairs))
    rows = _read_tsv(args.task)
    state = TrainState.init(model)
    order_rng = new_rng(tcfg.seed)

    losses = []
    if args.mode == "cloze":
        _require_file(args.pattern)
        pattern = ClozePattern.parse(Path(args.pattern).read_text(encoding="utf-8"))
        verbalizers = pattern.verbalizer_ids(vocab)
        label_index = {y: i for i, y in enumerate(pattern.labels)}
        data = []
        for text, label in rows:
            if label not in label_index:
                raise ContractError(f"unknown label {label!r}")
            data.append((pattern.context_for(text, vocab), label_index[label]))
        while state.step < tcfg.max_steps:
            idx = order_rng.choice(len(data), size=min(tcfg.batch_size, len(data)), replace=False)
            ctxs = [data[i][0] for i in idx]
            gold = [data[i][1] for i in idx]
            losses.append(
                finetune_cloze_step(model, ctxs, verbalizers, gold, state, tcfg)
            )
    else:
        pairs = [(vocab.encode(s), vocab.encode(t)) for s, t in rows]
        while state.step < tcfg.max_steps:
            idx = order_rng.choice(len(pairs), size=min(tcfg.batch_size, len(pairs)), replace=False)
            batch_pairs = [pairs[i] for i in idx]
            losses.append(
                finetune_seq2seq_step(model, batch_pairs, vocab, state, tcfg)
            )

    model.save(args.out, extra_header={"step": state.step, "finetune_mode": args.mode})
    _write_sidecar(args.out, _effective_pairs(TRAIN_KEYS, tcfg))
    print(f"final loss {losses[-1]:.6f} after {state.step} steps")
    return EXIT_OK


def cmd_infill(args) -> int:
    model, vocab, _ = _load_model_and_vocab(args)
    if args.text is not None:
        text = args.text
    else:
        _require_file(args.input)
        text = Path(args.input).read_text(encoding="utf-8").strip()
    ctx = parse_infill_text(text, vocab)
    cfg = DecodeConfig(
        strategy=args.strategy,
        max_blank_len=args.max_blank_len,
        top_k=args.top_k,
        beam_width=args.beam_width,
        length_penalty=args.length_penalty,
        block_repeated_trigrams=args.block_trigrams,
    )
    rng = derive_rng(args.seed, STREAM_DECODE, 0)
    fills = infill(model, ctx, cfg, rng)
    lines = []
    for f in fills:
        record = {
            "blank_index": f.blank_index,
            "tokens": [vocab.token(t) for t in f.tokens],
            "text": vocab.decode(f.tokens),
            "logprob": f.logprob,
        }
        if f.truncated:
            record["truncated"] = True
        lines.append(json.dumps(record))
    out_text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(out_text, encoding="utf-8")
        _write_sidecar(args.out, {"strategy": args.strategy, "seed": str(args.seed)})
    else:
        sys.stdout.write(out_text)
    return EXIT_OK


def cmd_score(args) -> int:
    model, vocab, _ = _load_model_and_vocab(args)
    _require_file(args.pattern)
    pattern = ClozePattern.parse(Path(args.pattern).read_text(encoding="utf-8"))
    ctx = pattern.context_for(args.input, vocab)
    probs = score_labels(model, ctx, pattern, vocab)
    for label, p in zip(pattern.labels, probs):
        print(f"{label}\t{p:.6f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, vocab, _ = _load_model_and_vocab(args)
    _require_file(args.data)
    if args.mode == "ppl":
        stream: list[int] = []
        for ln in Path(args.data).read_text(encoding="utf-8").splitlines():
            stream.extend(vocab.encode(ln))
        cfg = EvalConfig(
            window=args.window,
            overlap=args.overlap,
            bidirectional=not args.unidirectional,
        )
        ppl = eval_perplexity(model, stream, cfg, uniform_logits=args.force_uniform)
        print(f"ppl\t{ppl:.6f}")
    else:
        passages = [
            (vocab.encode(a), vocab.encode(b)) for a, b in _read_tsv(args.data)
        ]
        acc = eval_last_word(model, passages)
        print(f"lastword_accuracy\t{acc:.6f}")
    return EXIT_OK


def cmd_report(args) -> int:
    _require_file(args.metrics)
    from .report import write_report

    written = write_report(args.metrics, args.out_dir)
    for p in written:
        print(p)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="blanklm",
        description="Blank-infilling language model: train, finetune, decode, evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-vocab", help="build a vocabulary from a corpus")
    p.add_argument("corpus")
    p.add_argument("out")
    p.add_argument("--max-size", type=int, default=4096)
    p.add_argument("--sentinels", type=int, default=16)
    p.set_defaults(fn=cmd_build_vocab)

    p = sub.add_parser("pretrain", help="run span-infilling pretraining")
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--metrics", required=True, help="metrics CSV path")
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--resume", action="store_true")
    _add_config_flags(p, MODEL_KEYS)
    _add_config_flags(p, TRAIN_KEYS)
    _add_config_flags(p, CORRUPTION_KEYS)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("finetune", help="finetune a checkpoint on a task TSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--task", required=True, help="TSV: input<TAB>label or source<TAB>target")
    p.add_argument("--mode", choices=("cloze", "seq2seq"), required=True)
    p.add_argument("--pattern", help="pattern file (cloze mode)")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    _add_config_flags(p, TRAIN_KEYS)
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("infill", help="fill [MASK] blanks in text")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--text", help="input text with [MASK] markers")
    p.add_argument("--input", help="file containing the input text")
    p.add_argument("--out", help="write JSON lines here instead of stdout")
    p.add_argument("--strategy", choices=("greedy", "topk", "beam"), default="greedy")
    p.add_argument("--max-blank-len", type=int, default=20)
    p.add_argument("--top-k", type=int, default=40)
    p.add_argument("--beam-width", type=int, default=5)
    p.add_argument("--length-penalty", type=float, default=0.0)
    p.add_argument("--block-trigrams", type=_parse_bool, default=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_infill)

    p = sub.add_parser("score", help="per-label cloze probabilities")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--pattern", required=True)
    p.add_argument("--input", required=True)
    p.set_defaults(fn=cmd_score)

    p = sub.add_parser("eval", help="perplexity or last-word accuracy")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--mode", choices=("ppl", "lastword"), required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--window", type=int, default=64)
    p.add_argument("--overlap", type=int, default=32)
    p.add_argument("--unidirectional", action="store_true")
    p.add_argument("--force-uniform", action="store_true",
                   help="debug: score every token at log(V)")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("report", help="render figures from a metrics CSV")
    p.add_argument("--metrics", required=True)
    p.add_argument("--out-dir")
    p.set_defaults(fn=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "infill" and args.text is None and args.input is None:
            raise ContractError("infill needs --text or --input")
        if args.command == "finetune" and args.mode == "cloze" and not args.pattern:
            raise ContractError("cloze finetuning needs --pattern")
        return args.fn(args)
    except NumericError as e:
        print(f"error: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, IsADirectoryError, PermissionError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except CheckpointError as e:
        print(f"error: bad checkpoint: {e}", file=sys.stderr)
        return EXIT_IO
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except BlankLMError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_BAD_INPUT


if __name__ == "__main__":
    sys.exit(main())
