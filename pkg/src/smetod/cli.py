"""``smetod`` command line.

Exit codes: 0 success, 1 usage error, 2 runtime error.  Every run writes
``manifest.json`` (settings echo, seed, version) into its output directory.
"""

from __future__ import annotations

import argparse
import configparser
import json
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from . import __version__
from .errors import SmetodError


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_float(text: str) -> float | None:
    return None if str(text).strip().lower() in ("", "none") else float(text)


@dataclass(frozen=True)
class Setting:
    section: str
    key: str
    kind: Callable
    default: object
    help: str

    @property
    def flag(self) -> str:
        return "--" + self.key.replace("_", "-")


SETTINGS = (
    Setting("model", "d_model", int, 64, "model width"),
    Setting("model", "d_ff", int, 128, "feed-forward width"),
    Setting("model", "encoder_layers", int, 2, "encoder blocks"),
    Setting("model", "decoder_layers", int, 2, "decoder blocks"),
    Setting("model", "heads", int, 4, "attention heads"),
    Setting("model", "max_len", int, 128, "maximum sequence length"),
    Setting("model", "experts", str, "4", "experts per Soft-MoE layer (comma list for bench/ablate)"),
    Setting("model", "slots", int, 2, "slots per expert"),
    Setting("model", "masked_softmax", _bool, True, "exclude padding from the Soft-MoE softmaxes"),
    Setting("model", "dropout", float, 0.1, "dropout rate during training"),
    Setting("train", "lr", _opt_float, None, "learning rate (default depends on the task)"),
    Setting("train", "steps", int, 2000, "optimizer steps"),
    Setting("train", "batch_size", int, 32, "training batch size"),
    Setting("train", "warmup_steps", int, 100, "linear warmup steps"),
    Setting("train", "clip_norm", _opt_float, None, "global gradient-norm clip"),
    Setting("train", "weight_decay", float, 0.0, "decoupled weight decay"),
    Setting("train", "decay_to", _opt_float, None, "final learning-rate fraction for linear decay"),
    Setting("corpus", "corpus", str, None, "corpus directory"),
    Setting("corpus", "num_dialogues", int, 2000, "dialogues to generate"),
    Setting("corpus", "min_turns", int, 1, "minimum user turns per dialogue"),
    Setting("corpus", "max_turns", int, 4, "maximum user turns per dialogue"),
    Setting("corpus", "entities_per_domain", int, 50, "database entities per domain"),
    Setting("corpus", "update_rate", float, 0.1, "fraction of dialogues with a value update"),
    Setting("corpus", "split", str, "test", "split used by eval, infer and pad-study"),
    Setting("bench", "slots_total", int, None, "fixed total slot count (overrides --slots)"),
    Setting("bench", "repeats", int, 30, "timed repeats per configuration"),
    Setting("bench", "warmup", int, 5, "untimed warmup runs"),
    Setting("bench", "seq_len", int, 64, "benchmark input length"),
    Setting("bench", "bench_batch", int, 1, "benchmark input batch size"),
    Setting("bench", "batch_sizes", str, "1,4,16,64", "batch sizes for pad-study"),
    Setting("bench", "limit", int, None, "cap on evaluated examples (pad-study)"),
)
BY_KEY = {s.key: s for s in SETTINGS}

COMMANDS = {
    "gen-corpus": ("corpus",),
    "train": ("model", "train", "corpus"),
    "eval": ("corpus",),
    "infer": ("corpus",),
    "bench": ("model", "bench"),
    "ablate": ("model", "train", "corpus", "bench"),
    "pad-study": ("corpus", "bench"),
}


def build_parser() -> _Parser:
    parser = _Parser(prog="smetod", description="Soft-MoE encoder-decoder toolkit for synthetic task-oriented dialogue.")
    parser.add_argument("--version", action="version", version=f"smetod {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, sections in COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="INI file with [model] [train] [corpus] [bench] sections")
        p.add_argument("--seed", type=int, help="random seed")
        p.add_argument("--out", type=Path, help="output directory")
        for s in SETTINGS:
            if s.section in sections:
                p.add_argument(s.flag, dest=s.key, type=s.kind, default=None, help=f"{s.help} [{s.default}]")
        if name in ("train", "eval", "pad-study"):
            p.add_argument("--task", choices=("nlu", "dst", "nlg"), type=str.lower)
        if name in ("train", "eval", "infer", "pad-study"):
            p.add_argument("--checkpoint", type=Path, help="model checkpoint (written by train, read otherwise)")
        if name in ("eval", "infer"):
            p.add_argument("--dst-checkpoint", type=Path, help="DST checkpoint for two-step NLG inference")
        if name == "infer":
            p.add_argument("--history", action="append", default=[], help="serialized history; repeatable")
            p.add_argument("--input", type=Path, help="file with one serialized history per line")
    return parser


def resolve_settings(args: argparse.Namespace, sections) -> dict:
    """Defaults, then the config file, then explicit flags."""
    values = {s.key: s.default for s in SETTINGS if s.section in sections}
    if args.config is not None:
        cp = configparser.ConfigParser()
        if not cp.read(args.config):
            raise UsageError(f"cannot read config file {args.config}")
        for section in cp.sections():
            for key, raw in cp.items(section):
                s = BY_KEY.get(key)
                if s is None or s.section != section:
                    raise UsageError(f"unknown config key [{section}] {key}")
                if s.section in sections:
                    try:
                        values[key] = s.kind(raw)
                    except ValueError as exc:
                        raise UsageError(f"bad value for [{section}] {key}: {exc}") from None
    for key in values:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    return values


def _jsonable(v):
    return str(v) if isinstance(v, Path) else v


def write_manifest(out: Path, command: str, argv: list[str], seed: int, settings: dict, outputs: list[str], extra=None):
    manifest = {
        "tool": "smetod",
        "version": __version__,
        "command": command,
        "argv": argv,
        "seed": seed,
        "settings": {k: _jsonable(v) for k, v in sorted(settings.items())},
        "outputs": sorted(outputs),
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _out_dir(args, default: str) -> Path:
    out = args.out or Path(default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _model_config(settings: dict, vocab_size: int):
    from .transformer import ModelConfig

    experts = settings["experts"]
    try:
        m = int(experts)
    except ValueError:
        raise UsageError(f"--experts must be one integer here, got {experts!r}") from None
    return ModelConfig(
        vocab_size=vocab_size,
        d_model=settings["d_model"],
        d_ff=settings["d_ff"],
        num_encoder_layers=settings["encoder_layers"],
        num_decoder_layers=settings["decoder_layers"],
        num_heads=settings["heads"],
        max_len=settings["max_len"],
        num_experts=m,
        slots_per_expert=settings["slots"],
        masked_softmax=settings["masked_softmax"],
        dropout_rate=settings["dropout"],
    )


def _corpus_spec(settings: dict, seed: int):
    from .corpus import CorpusSpec

    return CorpusSpec(
        num_dialogues=settings["num_dialogues"],
        min_turns=settings["min_turns"],
        max_turns=settings["max_turns"],
        entities_per_domain=settings["entities_per_domain"],
        update_rate=settings["update_rate"],
        seed=seed,
    )


def _load_corpus(settings: dict):
    from .corpus import read_corpus

    if not settings.get("corpus"):
        raise UsageError("--corpus is required")
    return read_corpus(settings["corpus"])


def _opt_config(settings: dict, task: str, seed: int):
    from .train import OptConfig, default_lr

    lr = settings["lr"] if settings["lr"] is not None else default_lr(task)
    return OptConfig(
        lr=lr,
        steps=settings["steps"],
        batch_size=settings["batch_size"],
        warmup_steps=settings["warmup_steps"],
        clip_norm=settings["clip_norm"],
        weight_decay=settings["weight_decay"],
        decay_to=settings["decay_to"],
        seed=seed,
    )


# --- subcommands ---------------------------------------------------------------


def cmd_gen_corpus(args, settings, argv) -> int:
    from .corpus import generate_corpus, write_corpus

    seed = 7 if args.seed is None else args.seed
    out = _out_dir(args, "corpus")
    corpus = generate_corpus(_corpus_spec(settings, seed))
    paths = write_corpus(corpus, out)
    write_manifest(out, "gen-corpus", argv, seed, settings, [p.name for p in paths.values()])
    print(f"wrote {len(corpus.dialogues)} dialogues to {out}")
    return 0


def cmd_train(args, settings, argv) -> int:
    from .train import train
    from .transformer import Seq2SeqModel

    if args.task is None:
        raise UsageError("--task is required")
    seed = 0 if args.seed is None else args.seed
    corpus = _load_corpus(settings)
    out = _out_dir(args, f"runs/{args.task}")
    vocab = corpus.vocab()
    config = _model_config(settings, len(vocab))
    opt = _opt_config(settings, args.task, seed)
    ckpt = args.checkpoint or out / f"{args.task}.ckpt"
    model = Seq2SeqModel(config, seed=seed)
    examples = corpus.examples(args.task, "train")

    def progress(rec):
        if rec["step"] % 100 == 0 or rec["step"] == opt.steps:
            print(f"step {rec['step']:>6}  loss {rec['loss']:.4f}  lr {rec['lr']:.2e}", flush=True)

    log = train(model, examples, opt, vocab, checkpoint=ckpt, log_path=out / "train_log.jsonl", extra={"task": args.task}, progress=progress)
    write_manifest(
        out, "train", argv, seed, settings, [Path(ckpt).name, "train_log.jsonl"],
        {"task": args.task, "model": config.to_dict(), "lr": opt.lr, "final_loss": log.final_loss},
    )
    print(f"final loss {log.final_loss:.4f}; checkpoint {ckpt}")
    return 0


def _generator(path: Path):
    from .checkpoint import load_checkpoint
    from .textgen import TextGenerator

    model, vocab, extra = load_checkpoint(path)
    if vocab is None:
        raise SmetodError(f"{path}: checkpoint carries no vocabulary")
    return TextGenerator(model, vocab, max_len=min(48, model.config.max_len)), extra


def cmd_eval(args, settings, argv) -> int:
    from .evaluate import evaluate_task

    if args.checkpoint is None:
        raise UsageError("--checkpoint is required")
    corpus = _load_corpus(settings)
    gen, extra = _generator(args.checkpoint)
    task = args.task or extra.get("task")
    if task is None:
        raise UsageError("--task is required (checkpoint does not record one)")
    dst = _generator(args.dst_checkpoint)[0] if args.dst_checkpoint is not None else None
    dialogues = corpus.split(settings["split"])
    report = evaluate_task(task, gen, dialogues, corpus.database, dst_model=dst)
    out = _out_dir(args, f"runs/eval-{task}")
    (out / "eval.csv").write_text(report.to_csv(), encoding="utf-8")
    (out / "eval.txt").write_text(str(report) + "\n", encoding="utf-8")
    with open(out / "records.jsonl", "w", encoding="utf-8") as fh:
        for rec in report.records:
            fh.write(json.dumps(rec) + "\n")
    seed = 0 if args.seed is None else args.seed
    write_manifest(out, "eval", argv, seed, settings, ["eval.csv", "eval.txt", "records.jsonl"], {"task": task, "metrics": report.metrics()})
    print(report)
    return 0


def cmd_infer(args, settings, argv) -> int:
    from .dialogue import end_to_end_infer_batch, parse_history

    if args.checkpoint is None or args.dst_checkpoint is None:
        raise UsageError("--checkpoint (NLG) and --dst-checkpoint are required")
    texts = list(args.history)
    if args.input is not None:
        texts.extend(line.strip() for line in args.input.read_text(encoding="utf-8").splitlines() if line.strip())
    if not texts:
        raise UsageError("give --history or --input")
    corpus = _load_corpus(settings)
    nlg, _ = _generator(args.checkpoint)
    dst, _ = _generator(args.dst_checkpoint)
    traces = end_to_end_infer_batch([parse_history(t) for t in texts], dst, nlg, corpus.database)
    rows = [
        {
            "history": tr.history,
            "belief": tr.dst_output,
            "malformed": tr.malformed,
            "db": {"count": tr.db_result.match_count, "name": tr.db_result.top_entity},
            "response": tr.response,
        }
        for tr in traces
    ]
    for row in rows:
        print(json.dumps(row))
    if args.out is not None:
        out = _out_dir(args, "runs/infer")
        with open(out / "traces.jsonl", "w", encoding="utf-8") as fh:
            for row in rows:
                fh.write(json.dumps(row) + "\n")
        write_manifest(out, "infer", argv, 0 if args.seed is None else args.seed, settings, ["traces.jsonl"])
    return 0


def _grid(settings) -> list[tuple[int, int]]:
    from .bench import parse_expert_list, slot_grid

    try:
        experts = parse_expert_list(settings["experts"])
        if settings["slots_total"] is not None:
            return slot_grid(experts, settings["slots_total"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return [(m, settings["slots"]) for m in experts]


def cmd_bench(args, settings, argv) -> int:
    from .bench import bench_latency

    seed = 0 if args.seed is None else args.seed
    grid = _grid(settings)
    base = _model_config({**settings, "experts": str(grid[0][0])}, vocab_size=300)
    report = bench_latency(
        base, grid, seq_len=settings["seq_len"], batch_size=settings["bench_batch"],
        repeats=settings["repeats"], warmup=settings["warmup"], seed=seed,
    )
    out = _out_dir(args, "runs/bench")
    (out / "bench.csv").write_text(report.to_csv(), encoding="utf-8")
    write_manifest(out, "bench", argv, seed, settings, ["bench.csv"], {"grid": grid})
    print(report.to_csv(), end="")
    return 0


def cmd_ablate(args, settings, argv) -> int:
    from .bench import ablation_run
    from .corpus import generate_corpus

    seed = 0 if args.seed is None else args.seed
    if settings["experts"] == BY_KEY["experts"].default:
        settings["experts"] = "2,4,8,16,32"
    if settings["slots_total"] is None:
        settings["slots_total"] = 32
    grid = _grid(settings)
    corpus = _load_corpus(settings) if settings.get("corpus") else generate_corpus(_corpus_spec(settings, 7))
    base = _model_config({**settings, "experts": str(grid[0][0])}, vocab_size=len(corpus.vocab()))
    opt = _opt_config(settings, "dst", seed)
    report = ablation_run(base, grid, corpus, opt, seed=seed, progress=print)
    out = _out_dir(args, "runs/ablate")
    (out / "ablation.csv").write_text(report.to_csv(), encoding="utf-8")
    write_manifest(out, "ablate", argv, seed, settings, ["ablation.csv"], {"grid": grid, "lr": opt.lr})
    print(report.to_csv(), end="")
    return 0


def cmd_pad_study(args, settings, argv) -> int:
    from .checkpoint import load_checkpoint
    from .evaluate import padding_sensitivity_study

    if args.checkpoint is None:
        raise UsageError("--checkpoint is required")
    try:
        sizes = [int(b) for b in settings["batch_sizes"].split(",")]
    except ValueError:
        raise UsageError(f"bad --batch-sizes {settings['batch_sizes']!r}") from None
    corpus = _load_corpus(settings)
    model, vocab, extra = load_checkpoint(args.checkpoint)
    task = args.task or extra.get("task")
    if task is None:
        raise UsageError("--task is required (checkpoint does not record one)")
    examples = corpus.examples(task, settings["split"])
    if settings["limit"] is not None:
        examples = examples[: settings["limit"]]
    study = padding_sensitivity_study(model, vocab, examples, sizes)
    out = _out_dir(args, "runs/pad-study")
    (out / "padding.csv").write_text(study.to_csv(), encoding="utf-8")
    seed = 0 if args.seed is None else args.seed
    write_manifest(
        out, "pad-study", argv, seed, settings, ["padding.csv"],
        {"task": task, "masked_softmax": study.masked, "average_metric": study.average_metric},
    )
    print(study.to_csv(), end="")
    print(f"average {study.metric_name}: {study.average_metric:.4f}")
    return 0


HANDLERS = {
    "gen-corpus": cmd_gen_corpus,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "bench": cmd_bench,
    "ablate": cmd_ablate,
    "pad-study": cmd_pad_study,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        settings = resolve_settings(args, COMMANDS[args.command])
        return HANDLERS[args.command](args, settings, argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (SmetodError, OSError, ValueError) as exc:
        print(f"smetod: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
