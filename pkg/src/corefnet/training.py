"""Coreference loss, learning-rate schedule and the training loop."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, fields

import numpy as np

from .evaluation import evaluate_documents
from .model import ForwardPass, ModelConfig, ModelParams, mention_hinge
from .numerics import NonFiniteError, Rng, adamw_step
from .resolver import ResolveConfig

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 3e-5
    max_seq_len: int = 512
    alpha: float = 1.0
    beta: float = 1.0
    seed: int = 7
    lr_schedule: str = "fixed"
    weight_decay: float = 0.01
    freeze_embeddings: bool = False
    mention_mode: str = "gold"

    def __post_init__(self):
        for name in ("epochs", "batch_size", "max_seq_len"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.alpha <= 0 or self.beta <= 0:
            raise ConfigError("alpha and beta must be positive")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be non-negative")
        if self.lr_schedule not in ("fixed", "linear-decay"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.mention_mode not in ("gold", "enumerate"):
            raise ConfigError(f"unknown mention_mode {self.mention_mode!r}")

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


def gold_antecedents(gold, n):
    """For each mention j, the set of earlier mentions in its gold cluster."""
    owner = {}
    for k, c in enumerate(gold):
        for m in c:
            owner[m] = k
    out = []
    for j in range(n):
        k = owner.get(j)
        out.append([i for i in range(j) if k is not None and owner.get(i) == k])
    return out


def coref_loss(A, gold, alpha=1.0, beta=1.0):
    """Weighted negative log-likelihood of the gold antecedent choice.

    Anaphoric mentions contribute ``-alpha * log(sum of attention on gold
    antecedents)``; the rest contribute ``-beta * log(attention on the
    dummy)``. Returns the mean over mentions and its gradient on ``A.raw``.
    """
    n = A.n
    d_raw = np.zeros_like(A.raw)
    if n == 0:
        return 0.0, d_raw
    total = 0.0
    for j, ants in enumerate(gold_antecedents(gold, n)):
        p = A.row(j)
        target = np.zeros(j + 1)
        if ants:
            cols = np.array(ants) + 1
            weight = alpha
        else:
            cols = np.array([0])
            weight = beta
        mass = p[cols].sum()
        if mass < PROB_FLOOR:
            total += -weight * np.log(PROB_FLOOR)
            continue  # clamped: flat, zero gradient
        total += -weight * np.log(mass)
        target[cols] = p[cols] / mass
        d_raw[j, :j + 1] = weight * (p - target) / n
    return total / n, d_raw


def lr_at(config: TrainConfig, epoch, step, steps_per_epoch=1):
    if config.lr_schedule == "fixed":
        return config.learning_rate
    progress = (epoch * steps_per_epoch + step) / (config.epochs * steps_per_epoch)
    return config.learning_rate * (1.0 - progress)


def document_loss(model, doc, config: TrainConfig, backward=True):
    """Forward (and optionally backward) on one document; returns the loss."""
    fp = ForwardPass(model, doc.tokens, doc.mentions)
    loss, d_raw = coref_loss(fp.A, doc.gold_clusters, config.alpha, config.beta)
    if config.mention_mode == "enumerate":
        h_loss, d_tokens = mention_hinge(model, fp.reps, doc, model.config.max_width)
        loss += h_loss
    else:
        d_tokens = None
    if backward:
        fp.backward(d_raw, d_tokens)
    return loss


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    dev_precision: float
    dev_recall: float
    dev_f1: float
    wall_time: float

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainResult:
    model: ModelParams
    final_model: ModelParams
    log: list
    best_epoch: int


def build_vocab(docs):
    words = set()
    for doc in docs:
        words.update(doc.tokens)
    return sorted(words)


def train(train_docs, dev_docs, config: TrainConfig, model_config: ModelConfig = None,
          model: ModelParams = None, mask=None, on_epoch=None) -> TrainResult:
    """Minibatch AdamW training; keeps the checkpoint with the best dev link F1.

    Without dev documents the final model is returned as the best one.

    ``model`` continues training an existing model (e.g. after pruning) and
    ``mask`` (a SparsityMask) is re-applied after every optimizer step.
    """
    if not train_docs:
        raise ConfigError("training split is empty")
    model_config = model_config or ModelConfig()
    rng = Rng(config.seed)
    docs = []
    for doc in train_docs:
        if len(doc.tokens) > config.max_seq_len:
            log.warning("truncating %s from %d to %d tokens", doc.id, len(doc.tokens), config.max_seq_len)
            doc = doc.truncated(config.max_seq_len)
        docs.append(doc)
    if model is None:
        model = ModelParams.build(model_config, build_vocab(docs), rng.spawn(0))
    model.table.frozen = config.freeze_embeddings
    params = model.params(mention_scorer=config.mention_mode == "enumerate")
    resolve_config = ResolveConfig(mention_mode=config.mention_mode, max_width=model.config.max_width)
    order_rng = rng.spawn(1)
    n_batches = -(-len(docs) // config.batch_size)
    history = []
    best, best_f1, best_epoch = model.copy(), -1.0, 0
    step = 0
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = order_rng.permutation(len(docs))
        losses = []
        for b in range(n_batches):
            batch = [docs[k] for k in order[b * config.batch_size:(b + 1) * config.batch_size]]
            batch_loss = 0.0
            with np.errstate(over="ignore", invalid="ignore"):  # caught by the finiteness check
                for doc in batch:
                    batch_loss += document_loss(model, doc, config)
            batch_loss /= len(batch)
            if not np.isfinite(batch_loss):
                raise NonFiniteError(f"non-finite loss in epoch {epoch + 1} batch {b}")
            for p in params:
                p.grad /= len(batch)
            step += 1
            adamw_step(params, lr_at(config, epoch, b, n_batches),
                       weight_decay=config.weight_decay, step_index=step)
            if mask is not None:
                mask.apply(model)
            losses.append(batch_loss)
        report = evaluate_documents(model, dev_docs, resolve_config) if dev_docs else None
        dev_f1 = report.link_f1 if report else 0.0
        record = EpochRecord(epoch + 1, float(np.mean(losses)),
                             report.link_precision if report else 0.0,
                             report.link_recall if report else 0.0, dev_f1,
                             time.perf_counter() - t0)
        history.append(record)
        log.info("epoch %d loss %.5f dev P %.4f R %.4f F1 %.4f (%.1fs)", record.epoch,
                 record.train_loss, record.dev_precision, record.dev_recall, dev_f1, record.wall_time)
        if on_epoch is not None:
            on_epoch(record)
        if dev_f1 > best_f1:
            best, best_f1, best_epoch = model.copy(), dev_f1, epoch + 1
    if not dev_docs:
        best, best_epoch = model.copy(), config.epochs
    return TrainResult(best, model, history, best_epoch)
