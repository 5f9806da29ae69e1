"""Link and MUC scoring, corpus evaluation, ablations and throughput timing."""

from __future__ import annotations

import json
import logging
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from itertools import combinations

from .resolver import ResolveConfig, resolve
from .textmodel import ClusterSet

log = logging.getLogger(__name__)


class UniverseError(ValueError):
    pass


def f1_score(p, r):
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def _check_universe(predicted, gold, universe):
    if universe is None:
        return
    universe = set(universe)
    stray = (predicted.members() | gold.members()) - universe
    if stray:
        raise UniverseError(f"mentions {sorted(stray, key=repr)[:5]} are outside the mention universe")


def coref_pairs(clusters: ClusterSet):
    """Unordered within-cluster pairs, each as a (smaller, larger) tuple."""
    pairs = set()
    for c in clusters:
        for a, b in combinations(sorted(c), 2):
            pairs.add((a, b))
    return pairs


def link_counts(predicted, gold):
    p, g = coref_pairs(predicted), coref_pairs(gold)
    return len(p & g), len(p), len(g)


def _link_from_counts(hit, n_pred, n_gold):
    precision = hit / n_pred if n_pred else 1.0
    recall = hit / n_gold if n_gold else 1.0
    return precision, recall, f1_score(precision, recall)


def link_prf(predicted: ClusterSet, gold: ClusterSet, universe=None):
    """Pairwise link precision/recall/F1; an empty side scores 1."""
    _check_universe(predicted, gold, universe)
    return _link_from_counts(*link_counts(predicted, gold))


def muc_counts(key: ClusterSet, response: ClusterSet):
    """MUC numerator and denominator for recall of ``key`` by ``response``."""
    owner = {}
    for k, c in enumerate(response):
        for m in c:
            owner[m] = k
    num = den = 0
    for c in key:
        parts = {owner.get(m, ("alone", m)) for m in c}
        num += len(c) - len(parts)
        den += len(c) - 1
    return num, den


def _ratio(num, den):
    return num / den if den else 0.0


def muc_prf(predicted: ClusterSet, gold: ClusterSet, universe=None):
    """MUC link-based score; a zero denominator scores 0."""
    _check_universe(predicted, gold, universe)
    r_num, r_den = muc_counts(gold, predicted)
    p_num, p_den = muc_counts(predicted, gold)
    precision, recall = _ratio(p_num, p_den), _ratio(r_num, r_den)
    return precision, recall, f1_score(precision, recall)


@dataclass
class EvalReport:
    link_precision: float = 0.0
    link_recall: float = 0.0
    link_f1: float = 0.0
    muc_precision: float = 0.0
    muc_recall: float = 0.0
    muc_f1: float = 0.0
    mention_f1: float | None = None
    docs_scored: int = 0
    tokens_per_second: float = 0.0

    def metrics(self):
        """Everything but timing, rounded for stable text output."""
        out = {k: (round(v, 10) if isinstance(v, float) else v)
               for k, v in asdict(self).items() if k != "tokens_per_second"}
        return out


def _span_clusters(clusters, spans):
    return clusters.mapped(lambda m: tuple(spans[m]))


def resolve_all(docs, model, config: ResolveConfig | None = None, workers=1):
    """Resolve documents in input order, optionally on a thread pool."""
    if workers <= 1 or len(docs) < 2:
        return [resolve(d, model, config) for d in docs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda d: resolve(d, model, config), docs))


def evaluate_documents(model, docs, config: ResolveConfig | None = None, workers=1):
    """Resolve every document and micro-average the scores over the corpus."""
    config = config or ResolveConfig()
    hit = n_pred = n_gold = 0
    mr_num = mr_den = mp_num = mp_den = 0
    m_hit = m_pred = m_gold = 0
    tokens = sum(len(d.tokens) for d in docs)
    t0 = time.perf_counter()
    results = resolve_all(docs, model, config, workers)
    elapsed = time.perf_counter() - t0
    for doc, res in zip(docs, results):
        gold = doc.gold_clusters.without_singletons()
        pred = res.clusters.without_singletons()
        if config.mention_mode != "gold":
            gold = _span_clusters(gold, doc.mentions)
            pred = _span_clusters(pred, res.spans)
            gold_spans, pred_spans = set(doc.mentions), set(res.spans)
            m_hit += len(gold_spans & pred_spans)
            m_pred += len(pred_spans)
            m_gold += len(gold_spans)
        h, p, g = link_counts(pred, gold)
        hit, n_pred, n_gold = hit + h, n_pred + p, n_gold + g
        a, b = muc_counts(gold, pred)
        mr_num, mr_den = mr_num + a, mr_den + b
        a, b = muc_counts(pred, gold)
        mp_num, mp_den = mp_num + a, mp_den + b
    lp, lr, lf = _link_from_counts(hit, n_pred, n_gold)
    mp, mr = _ratio(mp_num, mp_den), _ratio(mr_num, mr_den)
    mention_f1 = None
    if config.mention_mode != "gold":
        mention_f1 = f1_score(_ratio(m_hit, m_pred), _ratio(m_hit, m_gold))
    return EvalReport(lp, lr, lf, mp, mr, f1_score(mp, mr), mention_f1, len(docs),
                      tokens / elapsed if elapsed > 0 else 0.0)


# -- ablations ----------------------------------------------------------------

@dataclass(frozen=True)
class AblationSpec:
    name: str
    delta: str  # attention-off | frozen-embeddings | depth-1 | fixed-lr

    def apply(self, train_config, model_config):
        if self.delta == "attention-off":
            return train_config, replace(model_config, attention=False)
        if self.delta == "frozen-embeddings":
            return replace(train_config, freeze_embeddings=True), model_config
        if self.delta == "depth-1":
            return train_config, replace(model_config, depth=1)
        if self.delta == "fixed-lr":
            return replace(train_config, lr_schedule="fixed", learning_rate=1e-5), model_config
        raise ValueError(f"unknown ablation delta {self.delta!r}")


ABLATIONS = {
    "attention-off": AblationSpec("No Attention", "attention-off"),
    "frozen-embeddings": AblationSpec("Static Embeddings", "frozen-embeddings"),
    "depth-1": AblationSpec("Reduced Layers", "depth-1"),
    "fixed-lr": AblationSpec("Fixed Learning Rate", "fixed-lr"),
}

TABLE_COLUMNS = ("Method", "Dataset", "F1", "Precision", "Recall", "Epochs", "Batch Size", "Learning Rate")


@dataclass
class AblationRow:
    method: str
    delta: str | None
    dataset: str
    report: EvalReport | None
    epochs: int
    batch_size: int
    learning_rate: float
    error: str | None = None
    train_log: list = field(default_factory=list, repr=False)

    def record(self):
        out = {"method": self.method, "delta": self.delta, "dataset": self.dataset,
               "epochs": self.epochs, "batch_size": self.batch_size,
               "learning_rate": self.learning_rate, "error": self.error}
        out.update(self.report.metrics() if self.report else {})
        return out


def run_ablations(train_config, model_config, variants, train_docs, dev_docs, test_docs,
                  dataset="synthetic", base_name="Full model"):
    """Train the base model and one model per variant; score each on the test docs.

    Every run uses the same seed and therefore the same data order. A
    variant that fails is reported with its error instead of a score.
    """
    from .training import train

    rows = []
    runs = [(base_name, None, train_config, model_config)]
    for spec in variants:
        tc, mc = spec.apply(train_config, model_config)
        runs.append((spec.name, spec.delta, tc, mc))
    for name, delta, tc, mc in runs:
        log.info("ablation run: %s", name)
        try:
            result = train(train_docs, dev_docs, tc, mc)
            report = evaluate_documents(result.model, test_docs,
                                        ResolveConfig(mention_mode=tc.mention_mode))
            rows.append(AblationRow(name, delta, dataset, report, tc.epochs, tc.batch_size,
                                    tc.learning_rate, train_log=result.log))
        except Exception as exc:  # reported per variant, the others still run
            log.error("ablation %s failed: %s", name, exc)
            rows.append(AblationRow(name, delta, dataset, None, tc.epochs, tc.batch_size,
                                    tc.learning_rate, error=f"{type(exc).__name__}: {exc}"))
    return rows


def _pct(x):
    return f"{100 * x:.1f}"


def render_table(rows):
    """Fixed-width text table with the Method/Dataset/F1/... column order."""
    cells = [TABLE_COLUMNS]
    for r in rows:
        if r.report is None:
            scores = ("error", "-", "-")
        else:
            scores = (_pct(r.report.link_f1), _pct(r.report.link_precision), _pct(r.report.link_recall))
        cells.append((r.method, r.dataset, *scores, str(r.epochs), str(r.batch_size), f"{r.learning_rate:g}"))
    widths = [max(len(row[k]) for row in cells) for k in range(len(TABLE_COLUMNS))]
    lines = []
    for k, row in enumerate(cells):
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
        if k == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def write_records(records, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True))
            fh.write("\n")


# -- throughput ---------------------------------------------------------------

@dataclass
class BenchmarkResult:
    samples: list  # tokens per second, one per repetition
    seconds: list
    tokens: int
    outputs_identical: bool

    @property
    def min(self):
        return min(self.samples)

    @property
    def median(self):
        return statistics.median(self.samples)

    @property
    def max(self):
        return max(self.samples)

    def summary(self):
        return {"tokens": self.tokens, "repetitions": len(self.samples),
                "tokens_per_second_min": self.min, "tokens_per_second_median": self.median,
                "tokens_per_second_max": self.max, "outputs_identical": self.outputs_identical}


def benchmark(model, docs, repetitions=3, config: ResolveConfig | None = None, workers=1):
    """Time full passes over ``docs`` after one untimed warm-up pass."""
    if repetitions < 3:
        raise ValueError("repetitions must be >= 3")
    config = config or ResolveConfig()
    tokens = sum(len(d.tokens) for d in docs)
    reference = [r.clusters for r in resolve_all(docs, model, config, workers)]
    samples, seconds, identical = [], [], True
    for _ in range(repetitions):
        t0 = time.perf_counter()
        out = [r.clusters for r in resolve_all(docs, model, config, workers)]
        dt = time.perf_counter() - t0
        identical = identical and out == reference
        seconds.append(dt)
        samples.append(tokens / dt if dt > 0 else float("inf"))
    return BenchmarkResult(samples, seconds, tokens, identical)
