"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data or validation error,
3 numerical abort (non-finite loss or gradient).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import zipfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .compression import (FINETUNE_LR, QuantizedModel, eval_compressed, finetune_pruned,
                          global_sparsity, prune, quantize)
from .evaluation import (ABLATIONS, benchmark, evaluate_documents, render_table, resolve_all,
                         run_ablations, write_records)
from .model import FingerprintError, ModelConfig, ModelParams
from .numerics import NonFiniteError, load_tensors
from .resolver import ResolveConfig
from .textmodel import (Document, DocumentError, generate_synthetic_corpus, read_documents, split_corpus,
                        write_documents)
from .training import ConfigError, TrainConfig, train

log = logging.getLogger("corefnet")

PROG = "corefnet"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# -- configuration ------------------------------------------------------------

TRAIN_KEYS = {f.name: f for f in fields(TrainConfig)}
MODEL_KEYS = {f.name: f for f in fields(ModelConfig)}
CONFIG_KEYS = list(TRAIN_KEYS) + list(MODEL_KEYS)
_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


@dataclass
class CliConfig:
    command: str | None = None
    paths: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    explicit: frozenset = frozenset()  # keys set by a file or a flag
    prune_sparsity: float | None = None
    quantize: bool = False

    @property
    def seed(self):
        return self.train.seed

    def values(self):
        return {**asdict(self.train), **asdict(self.model)}


def _field_type(key):
    f = TRAIN_KEYS.get(key) or MODEL_KEYS[key]
    return f.type if isinstance(f.type, str) else f.type.__name__


def parse_value(key, text):
    if key not in TRAIN_KEYS and key not in MODEL_KEYS:
        raise ConfigError(f"unknown config key {key!r}; valid keys: {', '.join(CONFIG_KEYS)}")
    kind = _field_type(key)
    text = text.strip()
    try:
        if kind == "bool":
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value {text!r} for {key} (expected {kind})") from None
    return text


def format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def read_config_file(path):
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            try:
                out[key] = parse_value(key, value)
            except ConfigError as exc:
                raise ConfigError(f"{path}:{lineno}: {exc}") from None
    return out


def load_config(path=None, overrides=None) -> CliConfig:
    """Defaults, then the config file, then flag overrides.

    ``path`` of None or ``"default"`` means built-in defaults only.
    ``overrides`` maps keys to already-parsed values or raw strings.
    """
    values = {}
    if path not in (None, "default"):
        values.update(read_config_file(path))
    for key, value in (overrides or {}).items():
        values[key] = parse_value(key, value) if isinstance(value, str) else value
    unknown = set(values) - set(CONFIG_KEYS)
    if unknown:
        raise ConfigError(f"unknown config key {sorted(unknown)[0]!r}; valid keys: {', '.join(CONFIG_KEYS)}")
    tc = TrainConfig(**{k: v for k, v in values.items() if k in TRAIN_KEYS})
    try:
        mc = ModelConfig(**{k: v for k, v in values.items() if k in MODEL_KEYS})
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return CliConfig(train=tc, model=mc, explicit=frozenset(values))


def format_config(config: CliConfig) -> str:
    """The effective config as a loadable ``key=value`` file."""
    return "".join(f"{k}={format_value(v)}\n" for k, v in config.values().items())


# -- argument parsing ---------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage().rstrip()}")


def _add_config_flags(p):
    p.add_argument("--config", default=None, metavar="FILE",
                   help="key=value config file, or 'default' for built-in defaults")
    g = p.add_argument_group("config overrides (beat the config file)")
    for key in CONFIG_KEYS:
        g.add_argument("--" + key.replace("_", "-"), dest="cfg_" + key, default=None,
                       metavar=_field_type(key).upper())


def _add_parallel(p):
    p.add_argument("--parallel-docs", type=int, default=1, metavar="N",
                   help="resolve documents on N threads")


def build_parser():
    parser = _Parser(prog=PROG, description="Neural coreference resolution toolkit.")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")

    p = sub.add_parser("gen-corpus", help="write a synthetic annotated corpus")
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--vocab-size", type=int, default=200)
    p.add_argument("--max-len", type=int, default=60)
    p.add_argument("--out", required=True)

    p = sub.add_parser("split", help="shuffle a corpus into train/dev/test files")
    p.add_argument("--corpus", required=True)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("train", help="train a model; keeps the best dev checkpoint")
    p.add_argument("--corpus", help="single corpus, split with --seed")
    p.add_argument("--train", dest="train_path")
    p.add_argument("--dev", dest="dev_path")
    p.add_argument("--out", default="model.npz")
    p.add_argument("--log-out", help="per-epoch records (default: <out>.log.jsonl)")
    p.add_argument("--dump-config", metavar="FILE", help="write the effective config")
    p.add_argument("--no-figures", action="store_true")
    _add_config_flags(p)

    p = sub.add_parser("predict", help="fill in clusters for each input document")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--timing", help="per-document stage timings (jsonl sidecar)")
    p.add_argument("--include-singletons", action="store_true")
    _add_parallel(p)
    _add_config_flags(p)

    p = sub.add_parser("evaluate", help="score a model against gold clusters")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True, help="metric report (json, no timing)")
    p.add_argument("--timing", help="timing sidecar (default: <out>.timing.json)")
    p.add_argument("--no-figures", action="store_true")
    _add_parallel(p)
    _add_config_flags(p)

    p = sub.add_parser("bench", help="throughput over repeated passes")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--repetitions", type=int, default=3)
    p.add_argument("--with-quantized", action="store_true", help="also time the int8 model")
    p.add_argument("--out", required=True)
    p.add_argument("--no-figures", action="store_true")
    _add_parallel(p)
    _add_config_flags(p)

    p = sub.add_parser("ablate", help="train the base model and each ablation variant")
    p.add_argument("--corpus", help="single corpus, split with --seed")
    p.add_argument("--train", dest="train_path")
    p.add_argument("--dev", dest="dev_path")
    p.add_argument("--test", dest="test_path")
    p.add_argument("--variants", default="all",
                   help=f"comma list from {','.join(ABLATIONS)}, 'all' or 'none'")
    p.add_argument("--dataset", default="synthetic")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--no-figures", action="store_true")
    _add_config_flags(p)

    p = sub.add_parser("prune", help="global magnitude pruning with optional fine-tune")
    p.add_argument("--model", required=True)
    p.add_argument("--sparsity", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.add_argument("--train", dest="train_path", help="fine-tune on these documents")
    p.add_argument("--dev", dest="dev_path", help="score full vs pruned on these documents")
    p.add_argument("--finetune-epochs", type=int, default=5)
    p.add_argument("--finetune-lr", type=float, default=FINETUNE_LR)
    p.add_argument("--report", help="json report (default: <out>.report.json)")
    _add_config_flags(p)

    p = sub.add_parser("quantize", help="symmetric per-tensor int8 quantization")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dev", dest="dev_path", help="score full vs quantized on these documents")
    p.add_argument("--report", help="json report (default: <out>.report.json)")
    _add_config_flags(p)
    return parser


# -- helpers ------------------------------------------------------------------

def _config_from_args(args) -> CliConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    if getattr(args, "config", None) not in (None, "default"):
        _require_file(args.config)
    cfg = load_config(getattr(args, "config", None), overrides)
    cfg.command = args.command
    return cfg


def _require_file(path):
    if not path or not os.path.isfile(path):
        raise DataError(f"input file not found: {path}")
    return path


def _prepare_output(path, inputs=()):
    out = Path(path)
    for src in inputs:
        if src and os.path.exists(src) and out.exists() and os.path.samefile(src, out):
            raise DataError(f"refusing to overwrite input file {src}")
    if out.exists() and out.is_dir():
        raise DataError(f"output path is a directory: {path}")
    out.parent.mkdir(parents=True, exist_ok=True)
    return out


def _sidecar(path, suffix):
    p = Path(path)
    return p.with_name(p.stem + suffix)


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_docs(path):
    return read_documents(_require_file(path))


def load_model(path, expect: ModelConfig | None = None) -> ModelParams:
    """Full-precision or quantized checkpoint, as a float64 model."""
    _require_file(path)
    try:
        _, header = load_tensors(path)
        if header.get("kind") == "quantized-model":
            return QuantizedModel.load(path, expect).dequantized()
        return ModelParams.load(path, expect)
    except FingerprintError:
        raise
    except (KeyError, ValueError, OSError, zipfile.BadZipFile) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from None


def _expected_model(cfg: CliConfig):
    # only a config that names model dimensions is checked against the checkpoint
    return cfg.model if cfg.explicit & set(MODEL_KEYS) else None


def _resolve_config(cfg: CliConfig, model: ModelParams, include_singletons=False):
    return ResolveConfig(mention_mode=cfg.train.mention_mode, max_width=model.config.max_width,
                         include_singletons=include_singletons)


def _split_docs(docs, seed):
    sp = split_corpus(docs, seed)
    by_id = {d.id: d for d in docs}
    return ([by_id[i] for i in sp.train], [by_id[i] for i in sp.dev], [by_id[i] for i in sp.test])


def _train_dev(args, cfg, need_test=False):
    if args.corpus:
        if args.train_path or args.dev_path or getattr(args, "test_path", None):
            raise UsageError("give either --corpus or explicit split files, not both")
        tr, dev, te = _split_docs(_read_docs(args.corpus), cfg.seed)
        return tr, dev, te
    if not args.train_path:
        raise UsageError("need --corpus or --train")
    tr = _read_docs(args.train_path)
    dev = _read_docs(args.dev_path) if args.dev_path else []
    te = None
    if need_test:
        if not getattr(args, "test_path", None):
            raise UsageError("need --test (or --corpus)")
        te = _read_docs(args.test_path)
    return tr, dev, te


def _echo_config(cfg):
    log.info("effective config:\n%s", format_config(cfg).rstrip())


# -- commands -----------------------------------------------------------------

def cmd_gen_corpus(args):
    if args.n < 1:
        raise DataError("--n must be >= 1")
    out = _prepare_output(args.out)
    docs = generate_synthetic_corpus(args.n, args.seed, args.vocab_size, args.max_len)
    write_documents(docs, out)
    log.info("wrote %d documents to %s", len(docs), out)


def cmd_split(args):
    docs = _read_docs(args.corpus)
    out_dir = Path(args.out_dir)
    outs = {name: _prepare_output(out_dir / f"{name}.jsonl", [args.corpus])
            for name in ("train", "dev", "test")}
    tr, dev, te = _split_docs(docs, args.seed)
    for name, part in (("train", tr), ("dev", dev), ("test", te)):
        write_documents(part, outs[name])
    log.info("split %d documents: train %d, dev %d, test %d", len(docs), len(tr), len(dev), len(te))


def cmd_train(args):
    cfg = _config_from_args(args)
    tr, dev, _ = _train_dev(args, cfg)
    inputs = [args.corpus, args.train_path, args.dev_path]
    out = _prepare_output(args.out, inputs)
    log_out = _prepare_output(args.log_out or _sidecar(out, ".log.jsonl"), inputs)
    if args.dump_config:
        Path(_prepare_output(args.dump_config, inputs)).write_text(format_config(cfg), encoding="utf-8")
    _echo_config(cfg)
    log.info("training on %d documents, %d dev", len(tr), len(dev))
    result = train(tr, dev, cfg.train, cfg.model)
    result.model.save(out)
    write_records([r.to_dict() for r in result.log], log_out)
    log.info("best epoch %d; checkpoint %s (fingerprint %s)", result.best_epoch, out,
             result.model.fingerprint)
    if not args.no_figures:
        from .plotting import plot_training_curve
        plot_training_curve(result.log, _sidecar(out, ".curve.png"))


def cmd_predict(args):
    cfg = _config_from_args(args)
    model = load_model(args.model, _expected_model(cfg))
    docs = _read_docs(args.input)
    out = _prepare_output(args.out, [args.input, args.model])
    timing = _prepare_output(args.timing, [args.input, args.model]) if args.timing else None
    rc = _resolve_config(cfg, model, args.include_singletons)
    results = resolve_all(docs, model, rc, args.parallel_docs)
    predicted = [Document(d.id, d.tokens, tuple(r.spans), r.clusters) for d, r in zip(docs, results)]
    write_documents(predicted, out)
    if timing:
        write_records([{"id": d.id, "stages_ms": r.timings, "tokens_per_second": r.tokens_per_second}
                       for d, r in zip(docs, results)], timing)
    log.info("predicted %d documents into %s", len(docs), out)


def cmd_evaluate(args):
    cfg = _config_from_args(args)
    model = load_model(args.model, _expected_model(cfg))
    docs = _read_docs(args.input)
    out = _prepare_output(args.out, [args.input, args.model])
    timing = _prepare_output(args.timing or _sidecar(out, ".timing.json"), [args.input, args.model])
    rc = _resolve_config(cfg, model)
    report = evaluate_documents(model, docs, rc, args.parallel_docs)
    _write_json(out, {"model_fingerprint": model.fingerprint,
                      "mention_mode": rc.mention_mode, "metrics": report.metrics()})
    _write_json(timing, {"tokens_per_second": report.tokens_per_second,
                         "parallel_docs": args.parallel_docs})
    log.info("link P %.4f R %.4f F1 %.4f | MUC F1 %.4f over %d docs", report.link_precision,
             report.link_recall, report.link_f1, report.muc_f1, report.docs_scored)
    if not args.no_figures:
        from .plotting import plot_stage_timings
        stages = {}
        for r in resolve_all(docs, model, rc):
            for k, v in r.timings.items():
                stages[k] = stages.get(k, 0.0) + v / len(docs)
        if stages:
            plot_stage_timings(stages, _sidecar(timing, ".png"))


def cmd_bench(args):
    cfg = _config_from_args(args)
    if args.repetitions < 3:
        raise DataError("--repetitions must be >= 3")
    model = load_model(args.model, _expected_model(cfg))
    docs = _read_docs(args.input)
    out = _prepare_output(args.out, [args.input, args.model])
    rc = _resolve_config(cfg, model)
    results = {"full": benchmark(model, docs, args.repetitions, rc, args.parallel_docs)}
    if args.with_quantized:
        results["int8"] = benchmark(quantize(model).dequantized(), docs, args.repetitions, rc,
                                    args.parallel_docs)
    summary = {name: r.summary() for name, r in results.items()}
    if "int8" in results:
        summary["throughput_ratio"] = results["int8"].median / results["full"].median
    _write_json(out, summary)
    for name, r in results.items():
        log.info("%s: median %.0f tokens/s (min %.0f, max %.0f)", name, r.median, r.min, r.max)
    if not args.no_figures:
        from .plotting import plot_benchmark
        plot_benchmark(results, _sidecar(out, ".png"))


def _parse_variants(text):
    if text == "all":
        return list(ABLATIONS.values())
    if text in ("none", ""):
        return []
    names = [s.strip() for s in text.split(",") if s.strip()]
    bad = [n for n in names if n not in ABLATIONS]
    if bad:
        raise UsageError(f"unknown variant {bad[0]!r}; choose from {', '.join(ABLATIONS)}")
    return [ABLATIONS[n] for n in names]


def cmd_ablate(args):
    cfg = _config_from_args(args)
    variants = _parse_variants(args.variants)
    tr, dev, te = _train_dev(args, cfg, need_test=True)
    out_dir = Path(args.out_dir)
    inputs = [args.corpus, args.train_path, args.dev_path, args.test_path]
    records_path = _prepare_output(out_dir / "ablation.jsonl", inputs)
    table_path = _prepare_output(out_dir / "ablation.txt", inputs)
    _echo_config(cfg)
    rows = run_ablations(cfg.train, cfg.model, variants, tr, dev, te, dataset=args.dataset)
    write_records([r.record() for r in rows], records_path)
    table = render_table(rows)
    table_path.write_text(table, encoding="utf-8")
    sys.stdout.write(table)
    if not args.no_figures:
        from .plotting import plot_ablation, plot_training_curve
        plot_ablation(rows, out_dir / "ablation.png")
        for k, r in enumerate(rows):
            if r.train_log:
                plot_training_curve(r.train_log, out_dir / f"curve_{k}.png", title=r.method)
    if all(r.error and r.error.startswith("NonFiniteError") for r in rows):
        raise NonFiniteError("every ablation run aborted on non-finite values")


def cmd_prune(args):
    cfg = _config_from_args(args)
    if not 0.0 <= args.sparsity < 1.0:
        raise DataError("--sparsity must lie in [0, 1)")
    model = load_model(args.model, _expected_model(cfg))
    tr = _read_docs(args.train_path) if args.train_path else None
    dev = _read_docs(args.dev_path) if args.dev_path else None
    inputs = [args.model, args.train_path, args.dev_path]
    out = _prepare_output(args.out, inputs)
    report_path = _prepare_output(args.report or _sidecar(out, ".report.json"), inputs)
    pruned, mask = prune(model, args.sparsity)
    report = {"target_sparsity": args.sparsity, "pruned_sparsity": global_sparsity(pruned)}
    if tr and args.finetune_epochs > 0:
        result = finetune_pruned(pruned, mask, tr, dev or [], args.finetune_epochs,
                                 args.finetune_lr, cfg.seed)
        pruned = result.model
        report.update(finetune_epochs=args.finetune_epochs, finetune_lr=args.finetune_lr,
                      finetune_log=[r.to_dict() for r in result.log])
    report["final_sparsity"] = global_sparsity(pruned)
    if dev:
        cmp = eval_compressed(model, pruned, dev, _resolve_config(cfg, model))
        report.update(full_f1=cmp.full.link_f1, pruned_f1=cmp.compressed.link_f1,
                      delta_f1_points=cmp.delta_f1, throughput_ratio=cmp.throughput_ratio)
        log.info("pruned F1 %.4f vs full %.4f (delta %.2f points)", cmp.compressed.link_f1,
                 cmp.full.link_f1, cmp.delta_f1)
    pruned.save(out)
    _write_json(report_path, report)
    log.info("sparsity %.4f; wrote %s", report["final_sparsity"], out)


def cmd_quantize(args):
    cfg = _config_from_args(args)
    model = load_model(args.model, _expected_model(cfg))
    dev = _read_docs(args.dev_path) if args.dev_path else None
    inputs = [args.model, args.dev_path]
    out = _prepare_output(args.out, inputs)
    report_path = _prepare_output(args.report or _sidecar(out, ".report.json"), inputs)
    qm = quantize(model)
    qm.save(out)
    report = {"scales": {k: q.scale for k, q in qm.tensors.items()}}
    if dev:
        cmp = eval_compressed(model, qm, dev, _resolve_config(cfg, model))
        report.update(full_f1=cmp.full.link_f1, quantized_f1=cmp.compressed.link_f1,
                      delta_f1_points=cmp.delta_f1, throughput_ratio=cmp.throughput_ratio)
        log.info("int8 F1 %.4f vs full %.4f (delta %.2f points)", cmp.compressed.link_f1,
                 cmp.full.link_f1, cmp.delta_f1)
    _write_json(report_path, report)


COMMANDS = {
    "gen-corpus": cmd_gen_corpus, "split": cmd_split, "train": cmd_train,
    "predict": cmd_predict, "evaluate": cmd_evaluate, "bench": cmd_bench,
    "ablate": cmd_ablate, "prune": cmd_prune, "quantize": cmd_quantize,
}


def _one_line(exc):
    return " ".join(str(exc).split()) or type(exc).__name__


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        sys.stderr.write(parser.format_usage())
        return 1
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        msg, _, usage = str(exc).partition("\n")
        sys.stderr.write(f"{PROG}: error: {msg}\n{usage}\n")
        return 1
    except SystemExit as exc:  # --help
        return 0 if not exc.code else 1
    if args.command is None:
        sys.stderr.write(parser.format_usage())
        return 1
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(name)s: %(message)s"))
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(args.log_level)
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        sys.stderr.write(f"{PROG}: error: {_one_line(exc)}\n{parser.format_usage()}")
        return 1
    except NonFiniteError as exc:
        sys.stderr.write(f"{PROG}: numerical abort: {_one_line(exc)}\n")
        return 3
    except (DataError, DocumentError, FingerprintError, ConfigError, ValueError, OSError) as exc:
        sys.stderr.write(f"{PROG}: error: {_one_line(exc)}\n")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
