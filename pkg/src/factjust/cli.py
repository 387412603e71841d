"""Command-line entry point: ingest, init, index, train, generate, evaluate.

Exit codes: 0 success, 2 usage or input error, 3 internal invariant violation.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import yaml

from . import __version__
from .corpus import (
    BuildConfig,
    CorpusError,
    build_dataset,
    read_corpus,
    read_instances,
    read_raw_records,
    write_corpus,
    write_instances,
)
from .distillation import LossConfigError
from .evaluator import (
    METRICS,
    EvaluationError,
    MissingPredictions,
    evaluate_run,
    lead4,
    read_predictions,
    write_predictions,
)
from .modeling import ModelConfig, RAGModel
from .retriever import BM25, EmbeddingIndex, RetrievalError, build_index
from .tokenizer import Vocab
from .trainer import TrainConfig, TrainingError, generate_predictions, train

logger = logging.getLogger("factjust")

EXIT_OK, EXIT_INPUT, EXIT_INVARIANT = 0, 2, 3
DATA_ROOT_ENV = "FACTJUST_DATA_ROOT"
DEFAULT_SEEDS = "13,42,7"


class InputError(Exception):
    pass


class InvariantViolation(Exception):
    pass


def resolve(path: str | None) -> Path | None:
    """Relative paths that do not exist here are looked up under $FACTJUST_DATA_ROOT."""
    if path is None:
        return None
    p = Path(path)
    root = os.environ.get(DATA_ROOT_ENV)
    if not p.is_absolute() and not p.exists() and root:
        return Path(root) / p
    return p


def _require(path: Path | None, what: str) -> Path:
    if path is None or not path.exists():
        raise InputError(f"{what} not found: {path}")
    return path


def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def write_manifest(out_dir: Path, command: str, config: dict, inputs: dict, outputs: Sequence[Path], started: str, seeds: Sequence[int] = ()) -> None:
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "version": __version__,
        "config": config,
        "seeds": list(seeds),
        "inputs": {k: str(v) for k, v in inputs.items() if v is not None},
        "outputs": {str(p): sha256(p) for p in outputs if p.is_file()},
        "started": started,
        "finished": _now(),
    }
    tmp = out_dir / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    tmp.replace(out_dir / "manifest.json")


def _parse_seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise InputError(f"bad seed list {text!r}") from exc
    if not seeds:
        raise InputError("empty seed list")
    return seeds


def _load_config_file(path: Path | None) -> dict:
    if path is None:
        return {}
    data = yaml.safe_load(_require(path, "config file").read_text()) or {}
    if not isinstance(data, dict):
        raise InputError(f"{path}: config must be a mapping")
    return data


# -- commands ----------------------------------------------------------------


def cmd_ingest(args: argparse.Namespace) -> int:
    started = _now()
    src = _require(resolve(args.input), "input file")
    if src.stat().st_size == 0 or not src.read_text(encoding="utf-8").strip():
        raise InputError(f"{src}: input file is empty")
    records = read_raw_records(src)
    train_set, test_set, corpus = build_dataset(records, config=BuildConfig(include_dropped_refs=not args.exclude_dropped_refs))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_instances(out / "instances.jsonl", train_set + test_set)
    write_corpus(out / "corpus.jsonl", corpus)
    dropped = len(records) - len(train_set) - len(test_set)
    print(f"records: {len(records)}  train: {len(train_set)}  test: {len(test_set)}  dropped: {dropped}  corpus chunks: {len(corpus)}")
    write_manifest(out, "ingest", {"exclude_dropped_refs": args.exclude_dropped_refs}, {"input": src}, [out / "instances.jsonl", out / "corpus.jsonl"], started)
    return EXIT_OK


def cmd_init(args: argparse.Namespace) -> int:
    started = _now()
    instances = read_instances(_require(resolve(args.instances), "instances file"))
    corpus = read_corpus(_require(resolve(args.corpus), "corpus file"))
    texts = [t for i in instances if i.split == "train" for t in (i.claim, i.justification, i.article)]
    texts += [i.claim for i in instances] + [c.text for c in corpus.chunks]
    vocab = Vocab.build(texts, min_count=args.min_count, max_size=args.max_vocab, extra=("false", "mixture", "true"))
    cfg = _load_config_file(resolve(args.config)).get("model", {})
    model = RAGModel(vocab, ModelConfig.from_dict(cfg), seed=args.seed)
    out = Path(args.out)
    model.save(out)
    print(f"vocabulary: {len(vocab)}  parameters: {sum(p.numel() for p in model.parameters())}")
    write_manifest(out.parent, "init", {"model": cfg, "seed": args.seed}, {"instances": args.instances, "corpus": args.corpus}, [out, out.parent / "vocab.txt"], started)
    return EXIT_OK


def cmd_index(args: argparse.Namespace) -> int:
    started = _now()
    corpus = read_corpus(_require(resolve(args.corpus), "corpus file"))
    ckpt = _require(resolve(args.checkpoint), "checkpoint")
    model = RAGModel.load(ckpt)
    index = build_index(corpus, model.retriever)
    out = Path(args.out_dir)
    index.save(out)
    print(f"indexed {len(index)} chunks, dim {index.dim}")
    write_manifest(out, "index", {}, {"corpus": args.corpus, "checkpoint": ckpt}, [out / f for f in ("meta.json", "embeddings.bin", "ids.txt")], started)
    return EXIT_OK


TRAIN_FLAGS = ("shots", "top_n", "steps", "batch_size", "lr", "retriever_lr", "warmup_steps", "warmup_finetune_steps", "mode", "balanced_shots", "joint_veracity")


def resolve_train_config(args: argparse.Namespace, seed: int) -> TrainConfig:
    raw = _load_config_file(resolve(args.config))
    raw.pop("model", None)
    for key in TRAIN_FLAGS:
        value = getattr(args, key, None)
        if value is not None:
            raw[key] = value
    if args.losses is not None:
        raw["losses"] = args.losses
    elif raw.get("mode") == "article_input" and "losses" not in raw:
        raw["losses"] = "base_lm"
    raw["seed"] = seed
    return TrainConfig.from_dict(raw)


def cmd_train(args: argparse.Namespace) -> int:
    seeds = _parse_seeds(args.seeds)
    instances = read_instances(_require(resolve(args.instances), "instances file"), split="train")
    corpus = read_corpus(_require(resolve(args.corpus), "corpus file"))
    index = EmbeddingIndex.load(_require(resolve(args.index), "index directory"))
    ckpt = _require(resolve(args.checkpoint), "checkpoint")
    probe = json.loads(_require(resolve(args.probe), "probe file").read_text()) if args.probe else None
    configs = {s: resolve_train_config(args, s) for s in seeds}  # validate everything before training
    index_bytes = (Path(resolve(args.index)) / "embeddings.bin").read_bytes()
    out_root = Path(args.out_dir)
    for seed, config in configs.items():
        started = _now()
        model = RAGModel.load(ckpt)
        doc_before = {k: v.clone() for k, v in model.retriever.doc_encoder.state_dict().items()}
        out = out_root / f"seed_{seed}"
        result = train(config, instances, corpus, index, model, out_dir=out, probe=probe)
        for k, v in model.retriever.doc_encoder.state_dict().items():
            if not doc_before[k].equal(v):
                raise InvariantViolation(f"document encoder tensor {k} changed during training")
        if (Path(resolve(args.index)) / "embeddings.bin").read_bytes() != index_bytes:
            raise InvariantViolation("index bytes changed during training")
        last = result.log[-1] if result.log else {}
        print(f"seed {seed}: {config.steps} steps, final loss {last.get('loss', float('nan')):.4f} -> {out}")
        write_manifest(
            out, "train", config.to_dict(), {"instances": args.instances, "corpus": args.corpus, "index": args.index, "checkpoint": ckpt},
            [out / "checkpoint.safetensors", out / "train_log.jsonl"], started, seeds,
        )
    return EXIT_OK


def cmd_generate(args: argparse.Namespace) -> int:
    started = _now()
    split = None if args.split == "all" else args.split
    instances = read_instances(_require(resolve(args.test), "test instances file"), split=split)
    if not instances:
        raise InputError(f"no instances for split {args.split!r}")
    corpus = read_corpus(_require(resolve(args.corpus), "corpus file")) if args.corpus else None
    if args.baseline == "lead4":
        if corpus is None:
            raise InputError("--baseline lead4 needs --corpus")
        bm25 = BM25(corpus)
        rows = [{"id": i.id, "justification": lead4(i.claim, bm25)} for i in instances]
        inputs = {"test": args.test, "corpus": args.corpus}
    else:
        ckpt = _require(resolve(args.checkpoint), "checkpoint")
        model = RAGModel.load(ckpt)
        index = None
        if args.context == "retrieved":
            if corpus is None:
                raise InputError("retrieved-context generation needs --corpus")
            index = EmbeddingIndex.load(_require(resolve(args.index), "index directory"))
        rows = generate_predictions(
            model, instances, index, corpus, args.top_n, args.context, args.with_veracity, args.max_len, args.beam_size
        )
        inputs = {"checkpoint": ckpt, "index": args.index, "test": args.test, "corpus": args.corpus}
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_predictions(out, rows)
    print(f"wrote {len(rows)} predictions to {out}")
    config = {k: getattr(args, k) for k in ("top_n", "context", "with_veracity", "baseline", "max_len", "beam_size", "split")}
    write_manifest(out.parent, "generate", config, inputs, [out], started)
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    started = _now()
    paths = [resolve(p.strip()) for p in args.pred.split(",") if p.strip()]
    split = None if args.split == "all" else args.split
    refs = read_instances(_require(resolve(args.refs), "reference file"), split=split)
    predictions = {}
    for p in paths:
        _require(p, "prediction file")
        name = p.parent.name if p.name == "predictions.jsonl" else p.stem
        if name in predictions:
            name = str(p)
        predictions[name] = read_predictions(p)
    metrics = [m.strip() for spec in (args.metric or [",".join(METRICS)]) for m in spec.split(",") if m.strip()]
    try:
        report = evaluate_run(predictions, refs, metrics=metrics, aggregation=args.summacc_aggregation)
    except MissingPredictions as exc:
        raise InputError(f"{exc}") from exc
    print(report.table())
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report.write(out / "report.json")
    write_manifest(out, "evaluate", {"metrics": report.metrics, "summacc_aggregation": args.summacc_aggregation}, {"refs": args.refs, **{f"pred{i}": p for i, p in enumerate(paths)}}, [out / "report.json"], started)
    return EXIT_OK


def cmd_synth(args: argparse.Namespace) -> int:
    from .synthetic import SyntheticConfig, generate

    data = generate(SyntheticConfig(n_train=args.n_train, n_test=args.n_test, n_chunks=args.n_chunks, seed=args.seed))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "raw.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for r in data.records:
            row = {
                "id": r.id, "claim": r.claim, "article": r.article, "label": r.label, "split": r.split,
                "reference_docs": [{"doc_id": d.doc_id, "text": d.text} for d in r.reference_docs],
            }
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    (out / "probe.json").write_text(json.dumps(data.probe, indent=1, sort_keys=True) + "\n")
    print(f"wrote {len(data.records)} records to {out / 'raw.jsonl'} and planted evidence ids to {out / 'probe.json'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="factjust", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="build instances.jsonl and corpus.jsonl from raw records")
    p.add_argument("--input", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--exclude-dropped-refs", action="store_true", help="leave out reference docs of instances without a justification")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("init", help="build the vocabulary and a randomly initialized checkpoint")
    p.add_argument("--instances", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="checkpoint path; vocab.txt is written beside it")
    p.add_argument("--config", help="YAML/JSON file; its 'model' mapping sets dimensions")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-count", type=int, default=1)
    p.add_argument("--max-vocab", type=int, default=None)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("index", help="embed the corpus with the frozen document encoder")
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("train", help="few-shot fine-tuning, one run per seed")
    p.add_argument("--config")
    p.add_argument("--instances", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--checkpoint", required=True, help="starting checkpoint")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seeds", default=DEFAULT_SEEDS)
    p.add_argument("--losses", help="comma-separated subset of base_lm,perplexity_distill,ret_g,lm_g,ret_c,lm_c")
    p.add_argument("--mode", choices=("retrieval", "article_input"))
    p.add_argument("--shots", type=int)
    p.add_argument("--top-n", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--retriever-lr", type=float, help="query-encoder lr (default: same as --lr)")
    p.add_argument("--warmup-steps", type=int)
    p.add_argument("--warmup-finetune-steps", type=int)
    p.add_argument("--balanced-shots", action="store_true", default=None)
    p.add_argument("--joint-veracity", action="store_true", default=None)
    p.add_argument("--probe", help="JSON map of instance id to planted chunk ids, logged as retrieval recall")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="write predictions.jsonl for test instances")
    p.add_argument("--checkpoint")
    p.add_argument("--index")
    p.add_argument("--corpus")
    p.add_argument("--test", required=True)
    p.add_argument("--split", default="test", help="train, test or all")
    p.add_argument("--top-n", type=int, default=20)
    p.add_argument("--context", choices=("retrieved", "article"), default="retrieved")
    p.add_argument("--with-veracity", action="store_true")
    p.add_argument("--baseline", choices=("lead4",))
    p.add_argument("--max-len", type=int, default=160)
    p.add_argument("--beam-size", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="score prediction files and aggregate across seeds")
    p.add_argument("--pred", required=True, help="comma-separated prediction files, one per seed")
    p.add_argument("--refs", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--metric", action="append", help="restrict to these metrics (repeatable or comma-separated)")
    p.add_argument("--summacc-aggregation", choices=("mean", "sum"), default="mean")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("synth", help="write a synthetic planted-evidence raw dataset")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-train", type=int, default=30)
    p.add_argument("--n-test", type=int, default=20)
    p.add_argument("--n-chunks", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InputError, CorpusError, EvaluationError, RetrievalError, LossConfigError, TrainingError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (InvariantViolation, AssertionError) as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
