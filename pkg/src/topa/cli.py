"""Command-line entry point: generate, stats, encode, build-memory, train, finetune, eval, ablate.

Each invocation writes its artifacts into a fresh run directory under
``--out`` (``<command>-<fingerprint>``, suffixed ``-1``, ``-2``... when it
already exists, reused with ``--resume``).  A ``summary.json`` lands beside the
artifacts and a plain table goes to standard output.

Exit codes: 0 success, 1 usage error, 2 partial output, 3 contract violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import container
from .aligner import Checkpoint, finetune, train
from .backbone import TinyBackbone
from .config import RunConfig, load_config
from .data import QAItem, TideoAnnotation, corpus_stats, read_shard, write_shard
from .encoders import FeatureCache
from .errors import ClientExhausted, FingerprintMismatch, TopaError
from .evaluation import Model, load_benchmark, run_benchmark
from .generation import FixtureClient, HTTPClient, LLMClientConfig, run_generation
from .memory import SupportMemory, build_memory
from .synthetic import benchmark_records, language_backbone, make_corpus, make_world

log = logging.getLogger("topa")

EXIT_OK, EXIT_USAGE, EXIT_PARTIAL, EXIT_CONTRACT = 0, 1, 2, 3


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- run directories and output ----------------------------------------------


def run_dir(cfg: RunConfig, command: str, resume: bool) -> Path:
    base = Path(cfg.out) / f"{command}-{cfg.fingerprint()}"
    if resume or not base.exists():
        base.mkdir(parents=True, exist_ok=True)
        return base
    k = 1
    while (base.parent / f"{base.name}-{k}").exists():
        k += 1
    path = base.parent / f"{base.name}-{k}"
    path.mkdir(parents=True)
    return path


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def emit(directory: Path, cfg: RunConfig, command: str, summary: dict) -> None:
    record = {"command": command, "run_fingerprint": cfg.fingerprint(), **summary}
    write_json(directory / "summary.json", record)
    write_json(directory / "config.json", cfg.to_dict() | {"out": None})
    print(f"{command}: {directory}")
    width = max((len(k) for k in summary), default=0)
    for k, v in summary.items():
        if isinstance(v, float):
            v = f"{v:.4f}"
        elif isinstance(v, (dict, list)):
            v = json.dumps(v, sort_keys=True)
        print(f"  {k:<{width}}  {v}")


def require(path: str | None, what: str) -> Path:
    if not path:
        raise UsageError(f"{what} is required")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def world_pair(cfg: RunConfig):
    if cfg.encoder.kind != "synthetic":
        raise UsageError("only the synthetic encoder pair ships with this package")
    return make_world(cfg.world)


def check_compat(ckpt: Checkpoint, backbone: TinyBackbone, memory: SupportMemory | None,
                 encoder_descriptor: str | None = None) -> None:
    if ckpt.backbone_descriptor != backbone.descriptor():
        raise FingerprintMismatch(
            f"checkpoint expects backbone {ckpt.backbone_descriptor}, got {backbone.descriptor()}")
    want = ckpt.meta.get("encoder_descriptor") or encoder_descriptor
    if memory is not None:
        if memory.dimension != ckpt.meta["feature_dim"]:
            raise FingerprintMismatch(
                f"memory dimension {memory.dimension} != checkpoint feature dim {ckpt.meta['feature_dim']}")
        if want and memory.descriptor != want:
            raise FingerprintMismatch(f"memory built with encoder {memory.descriptor}, checkpoint expects {want}")


# -- commands ------------------------------------------------------------------


def cmd_generate(args, cfg: RunConfig) -> int:
    g = cfg.generation
    count = g.count if args.count is None else args.count
    if count < 0:
        raise UsageError("--count must be >= 0")
    if g.mode == "live":
        # credentials are resolved here, before any run directory or request exists
        client = HTTPClient(LLMClientConfig(g.endpoint, g.timeout_s, g.max_retries, g.rate_limit_per_min,
                                            g.credentials, g.concurrency))
    out = run_dir(cfg, "generate", args.resume)
    shard = out / "shard"
    if g.mode == "synthetic":
        corpus = make_corpus(count, cfg.seed, g.kinds, cfg.world.n_concepts)
        write_shard(shard, corpus)
        emit(out, cfg, "generate", {"accepted": len(corpus), "rejected": 0, "dedup": 0,
                                     "requested": count, "shard": "shard"})
        return EXIT_OK
    sources = json.loads(require(g.sources, "generation.sources").read_text(encoding="utf-8"))
    if g.mode == "fixture":
        client = FixtureClient.from_file(require(g.fixtures, "generation.fixtures"))
    _, report = run_generation(sources, g.weights, count, client, cfg.seed, shard,
                               max_retries=g.max_retries, concurrency=g.concurrency)
    summary = {k: v for k, v in report.to_dict().items() if k != "rejections"}
    emit(out, cfg, "generate", summary | {"shard": "shard"})
    return EXIT_PARTIAL if report.exhausted else EXIT_OK


def cmd_stats(args, cfg: RunConfig) -> int:
    corpus = read_shard(require(args.corpus, "--corpus"))
    out = run_dir(cfg, "stats", args.resume)
    emit(out, cfg, "stats", corpus_stats(corpus).to_dict())
    return EXIT_OK


def cmd_encode(args, cfg: RunConfig) -> int:
    corpus = read_shard(require(args.corpus, "--corpus"))
    pair = world_pair(cfg)
    out = run_dir(cfg, "encode", args.resume)
    cache = FeatureCache(pair.descriptor, pair.dimension)
    for t, _ in corpus:
        for f in t.frames:
            for text in (f.caption, *f.object_captions):
                cache.get_or_encode(text, pair)
    cache.save(out / "text_features.topa")
    summary = {"encoder": pair.descriptor, "dimension": pair.dimension, "texts": len(cache.rows)}
    for name, size, offset in (("benchmark", cfg.encoder.benchmark_size, 7),
                               ("finetune", cfg.encoder.finetune_size, 8)):
        if size <= 0:
            continue
        videos = make_corpus(size, cfg.seed + offset, cfg.generation.kinds, cfg.world.n_concepts,
                             prefix=name)
        rows, feats = benchmark_records(videos, pair)
        (out / name / "features").mkdir(parents=True, exist_ok=True)
        for vid, seq in feats.items():
            container.save_features(out / name / "features" / f"{vid}.topa", seq.vectors, pair.descriptor)
        for kind, kind_rows in rows.items():
            with open(out / name / f"{kind}.jsonl", "w", encoding="utf-8") as fh:
                for r in kind_rows:
                    fh.write(json.dumps(r, sort_keys=True) + "\n")
        summary[f"{name}_videos"] = len(feats)
    emit(out, cfg, "encode", summary)
    return EXIT_OK


def cmd_build_memory(args, cfg: RunConfig) -> int:
    corpus = read_shard(require(args.corpus, "--corpus"))
    pair = world_pair(cfg)
    out = run_dir(cfg, "build-memory", args.resume)
    size = cfg.memory.max_size if args.max_size is None else args.max_size
    tau = cfg.memory.temperature if args.temperature is None else args.temperature
    mem = build_memory((f.caption for t, _ in corpus for f in t.frames), pair, size, tau, cfg.seed)
    mem.save(out / "memory.topa")
    emit(out, cfg, "build-memory", {"size": mem.size, "dimension": mem.dimension,
                                    "temperature": mem.temperature, "encoder": mem.descriptor})
    return EXIT_OK


def load_or_build_backbone(args, cfg: RunConfig, out: Path) -> TinyBackbone:
    path = args.backbone or cfg.backbone.path
    if path:
        return TinyBackbone.load(require(path, "backbone"))
    b = cfg.backbone
    backbone, losses = language_backbone(cfg.world.n_concepts, b.language_corpus, b.language_epochs,
                                         cfg.seed, b.width, b.n_layers, b.n_heads, b.language_lr, b.dtype,
                                         cfg.generation.kinds)
    backbone.save(out / "backbone.topa")
    log.info("language pretraining losses: %s", losses)
    return backbone


def cmd_train(args, cfg: RunConfig) -> int:
    corpus = read_shard(require(args.corpus, "--corpus"))
    pair = world_pair(cfg)
    out = run_dir(cfg, "train", args.resume)
    backbone = load_or_build_backbone(args, cfg, out)
    before = backbone.base_hash()
    init = Checkpoint.load(require(args.checkpoint, "--checkpoint")) if args.checkpoint else None
    ckpt, report = train(corpus, cfg.trainer, backbone, pair, backbone.tokenizer, init)
    ckpt.save(out / "checkpoint.topa")
    with open(out / "report.jsonl", "w", encoding="utf-8") as fh:
        for r in report:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    emit(out, cfg, "train", {"steps": ckpt.step, "config_fingerprint": ckpt.config_fingerprint,
                             "backbone": ckpt.backbone_descriptor,
                             "backbone_unchanged": backbone.base_hash() == before,
                             "final_loss": report[-1]["loss"] if report else None})
    return EXIT_OK


def load_video_dataset(path: Path, dimension: int):
    """Benchmark-format rows with answers as (features, annotation) training pairs."""
    with open(path, encoding="utf-8") as fh:
        descriptions = {str(r.get("id")): r.get("description", "")
                        for r in map(json.loads, filter(str.strip, fh))}
    data = []
    for item in load_benchmark(path, dimension):
        if item.answer_index is None:
            raise UsageError(f"finetuning item {item.id} has no answer_index")
        qa = QAItem(item.question, item.options, item.answer_index, "other")
        data.append((item.load_features(), TideoAnnotation(item.id, descriptions[item.id], (qa,))))
    return data


def cmd_finetune(args, cfg: RunConfig) -> int:
    data_path = require(args.data, "--data")
    backbone = TinyBackbone.load(require(args.backbone or cfg.backbone.path, "--backbone"))
    pair = world_pair(cfg)
    ckpt = Checkpoint.load(require(args.checkpoint, "--checkpoint")) if args.checkpoint else None
    if ckpt is not None:
        check_compat(ckpt, backbone, None)
    out = run_dir(cfg, "finetune", args.resume)
    before = backbone.base_hash()
    data = load_video_dataset(data_path, pair.dimension)
    new, report = finetune(data, ckpt, cfg.finetune, backbone, backbone.tokenizer,
                           data_ratio=args.data_ratio, feature_dim=pair.dimension)
    new.save(out / "checkpoint.topa")
    with open(out / "report.jsonl", "w", encoding="utf-8") as fh:
        for r in report:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    emit(out, cfg, "finetune", {"steps": new.step, "examples": len(data),
                                "backbone_unchanged": backbone.base_hash() == before,
                                "final_loss": report[-1]["loss"] if report else None})
    return EXIT_OK


def _eval_inputs(args, cfg: RunConfig):
    bench = require(args.benchmark, "--benchmark")
    backbone = TinyBackbone.load(require(args.backbone or cfg.backbone.path, "--backbone"))
    ckpt = Checkpoint.load(require(args.checkpoint, "--checkpoint"))
    memory = SupportMemory.load(require(args.memory, "--memory")) if args.memory else None
    check_compat(ckpt, backbone, memory)
    items = load_benchmark(bench, ckpt.meta["feature_dim"])
    return items, Model.from_checkpoint(ckpt, backbone), memory, ckpt


def cmd_eval(args, cfg: RunConfig) -> int:
    items, model, memory, ckpt = _eval_inputs(args, cfg)
    e = cfg.eval
    out = run_dir(cfg, "eval", args.resume)
    result = run_benchmark(items, model, e.mode, e.projection, memory, e.frames, e.blind,
                           {"checkpoint": ckpt.config_fingerprint, "run": cfg.fingerprint()})
    result.write(out)
    s = result.summary()
    emit(out, cfg, "eval", {k: s[k] for k in ("mode", "projection", "frames", "blind", "n", "accuracy",
                                             "fallback_rate")})
    return EXIT_OK


def cmd_ablate(args, cfg: RunConfig) -> int:
    items, model, memory, ckpt = _eval_inputs(args, cfg)
    e = cfg.eval
    out = run_dir(cfg, "ablate", args.resume)
    settings = [("blind", False, e.frames, True)]
    for frames in e.ablate_frames:
        settings.append((f"raw_f{frames}", False, frames, False))
        if memory is not None:
            settings.append((f"projected_f{frames}", True, frames, False))
    rows = {}
    for name, projection, frames, blind in settings:
        r = run_benchmark(items, model, e.mode, projection, memory, frames, blind,
                          {"checkpoint": ckpt.config_fingerprint, "run": cfg.fingerprint()})
        r.write(out, name)
        rows[name] = r.accuracy
    emit(out, cfg, "ablate", {"mode": e.mode, "n": len(items), "accuracy": rows})
    return EXIT_OK


COMMANDS = {
    "generate": (cmd_generate, "generate a Tideo corpus shard"),
    "stats": (cmd_stats, "corpus statistics for a shard"),
    "encode": (cmd_encode, "encode corpus texts; render synthetic benchmark features"),
    "build-memory": (cmd_build_memory, "build the support memory from corpus frame captions"),
    "train": (cmd_train, "text-only pre-alignment on a corpus shard"),
    "finetune": (cmd_finetune, "finetune on video features without projection"),
    "eval": (cmd_eval, "multi-choice evaluation on a benchmark file"),
    "ablate": (cmd_ablate, "projection on/off, frame-count and blind ablations"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("global")
    g.add_argument("--config", help="TOML run configuration (defaults apply when omitted)")
    g.add_argument("--seed", type=int, help="override the configured seed")
    g.add_argument("--deterministic", action="store_true", default=None,
                   help="force deterministic algorithms and single-threaded kernels")
    g.add_argument("--out", help="base directory for run directories (default: runs)")
    g.add_argument("--resume", action="store_true", help="reuse the run directory instead of creating a new one")
    g.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")

    parser = Parser(prog="topa", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)
    ps = {name: sub.add_parser(name, parents=[common], help=text, description=text)
          for name, (_, text) in COMMANDS.items()}
    ps["generate"].add_argument("--count", type=int, help="number of generation jobs (overrides config)")
    for name in ("stats", "encode", "build-memory", "train"):
        ps[name].add_argument("--corpus", required=True, help="corpus shard directory")
    ps["build-memory"].add_argument("--max-size", type=int, help="memory size N (overrides config)")
    ps["build-memory"].add_argument("--temperature", type=float, help="softmax temperature (overrides config)")
    ps["train"].add_argument("--backbone", help="frozen backbone file (built from config when omitted)")
    ps["train"].add_argument("--checkpoint", help="initialize trainable parameters from a checkpoint")
    ps["finetune"].add_argument("--data", required=True, help="benchmark-format JSONL with answers")
    ps["finetune"].add_argument("--backbone", help="frozen backbone file")
    ps["finetune"].add_argument("--checkpoint", help="pre-aligned checkpoint (random init when omitted)")
    ps["finetune"].add_argument("--data-ratio", type=float, default=1.0, help="fraction of the data to use")
    for name in ("eval", "ablate"):
        ps[name].add_argument("--benchmark", required=True, help="benchmark JSONL file")
        ps[name].add_argument("--backbone", help="frozen backbone file")
        ps[name].add_argument("--checkpoint", required=True, help="trained checkpoint")
        ps[name].add_argument("--memory", help="support memory (needed for projection)")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config).with_overrides(args.seed, args.deterministic, args.out)
        return COMMANDS[args.command][0](args, cfg)
    except ClientExhausted as exc:
        # only reachable at client construction, before any request was sent
        print(f"topa {args.command}: client unavailable: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TopaError as exc:
        print(f"topa {args.command}: contract violation: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except (UsageError, FileNotFoundError, ValueError) as exc:
        print(f"topa {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
