"""Pretraining and fine-tuning loops, evaluation metrics and metric logging."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .augment import AugmentationSpec, make_views, rng_stream
from .data import UNDEFINED_LABEL, Vocabulary
from .exceptions import ConfigError, DivergenceError
from .losses import barlow_twins_terms, cross_correlation, in_batch_contrastive_loss, mean_abs_off_diagonal
from .models import (
    ENCODER_COMPONENTS,
    ModelBundle,
    ModelConfig,
    add_head,
    classify,
    context_tower,
    encode,
    encode_numpy,
    init_parameters,
    project,
)
from .optim import Adam

logger = logging.getLogger(__name__)

PHASES = ("bt_pretrain", "de_pretrain", "finetune_classify", "finetune_next_item")
ENCODER_MODES = ("fixed", "trainable")
RECALL_KS = (1, 5, 10)
METRICS_HEADER = ("run_id", "phase", "epoch", "split", "metric", "value")

# stream ids for rng_stream keys, kept apart from augmentation keys
_SHUFFLE = 1
_DIAG = 2


@dataclass
class TrainConfig:
    phase: str = "bt_pretrain"
    batch_size: int = 128
    epochs: int = 10
    learning_rate: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    label_fraction: float = 1.0
    encoder_mode: str = "trainable"
    augmentation: AugmentationSpec = field(default_factory=AugmentationSpec)
    lambd: float = 10.0
    seed: int = 0
    eval_batch_size: int = 4096

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ConfigError(f"unknown phase {self.phase!r}")
        if self.encoder_mode not in ENCODER_MODES:
            raise ConfigError(f"encoder_mode must be one of {ENCODER_MODES}")
        if self.batch_size < 1 or (self.phase == "bt_pretrain" and self.batch_size < 2):
            raise ConfigError(f"batch_size {self.batch_size} too small for {self.phase}")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if not 0 < self.label_fraction <= 1:
            raise ConfigError(f"label_fraction must be in (0, 1], got {self.label_fraction}")
        if self.lambd < 0:
            raise ConfigError("lambda must be >= 0")
        if isinstance(self.augmentation, dict):
            self.augmentation = AugmentationSpec.from_json(self.augmentation)
        self.betas = tuple(self.betas)

    def to_json(self) -> dict:
        return {
            "phase": self.phase,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "learning_rate": self.learning_rate,
            "betas": list(self.betas),
            "adam_eps": self.adam_eps,
            "label_fraction": self.label_fraction,
            "encoder_mode": self.encoder_mode,
            "augmentation": self.augmentation.to_json(),
            "lambd": self.lambd,
            "seed": self.seed,
            "eval_batch_size": self.eval_batch_size,
        }


@dataclass
class History:
    """Per-epoch records collected by a training loop."""

    rows: list[tuple[str, int, str, str, float]] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)

    def log(self, phase: str, epoch: int, split: str, metric: str, value: float) -> None:
        value = float(value)
        if not math.isfinite(value):
            raise DivergenceError(f"{metric} is not finite at epoch {epoch}")
        self.rows.append((phase, epoch, split, metric, value))

    def series(self, metric: str, split: str | None = None) -> list[float]:
        return [r[4] for r in self.rows if r[3] == metric and (split is None or r[2] == split)]

    def value(self, metric: str, split: str | None = None) -> float:
        vals = self.series(metric, split)
        if not vals:
            raise KeyError(metric)
        return vals[-1]


def _optimizer(bundle: ModelBundle, config: TrainConfig) -> Adam:
    return Adam(bundle.trainable(), config.learning_rate, config.betas, config.adam_eps)


def _batches(n: int, batch_size: int, seed: int, epoch: int):
    order = rng_stream(seed, _SHUFFLE, epoch).permutation(n)
    for bi, lo in enumerate(range(0, n, batch_size)):
        yield bi, order[lo : lo + batch_size]


def _step(tape: T.Tape, loss: T.Tensor, bundle: ModelBundle, opt: Adam) -> float:
    value = loss.item()
    if not math.isfinite(value):
        raise DivergenceError(f"loss became {value}")
    bundle.zero_grad()
    T.backward(tape, loss)
    opt.step()
    return value


# ---------------------------------------------------------------------------
# metrics


def eval_accuracy(logits, labels) -> float:
    """Fraction of rows whose argmax matches the label."""
    z = logits.data if isinstance(logits, T.Tensor) else np.asarray(logits)
    labels = np.asarray(labels)
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(z.argmax(axis=1) == labels))


def target_ranks(context_out: np.ndarray, targets: np.ndarray, item_table: np.ndarray) -> np.ndarray:
    """0-based rank of each target among items 1..V by cosine similarity.

    ``item_table`` is the full (V + 1, d) embedding; row 0 (mask) is never a
    candidate. Equal scores rank the lower item index first.
    """
    eps = T.NORM_EPS
    ctx = context_out / (np.linalg.norm(context_out, axis=1, keepdims=True) + eps)
    items = item_table[1:]
    items = items / (np.linalg.norm(items, axis=1, keepdims=True) + eps)
    scores = ctx @ items.T
    cols = targets - 1
    mine = scores[np.arange(len(targets)), cols][:, None]
    idx = np.arange(items.shape[0])[None, :]
    return ((scores > mine) | ((scores == mine) & (idx < cols[:, None]))).sum(axis=1)


def eval_topk_recall(bundle: ModelBundle, contexts, targets, k=RECALL_KS, batch_size: int = 4096):
    """Hit ratio at ``k`` for next-item prediction.

    ``k`` may be an int (returns a float) or an iterable (returns a dict).
    """
    single = np.isscalar(k)
    ks = (int(k),) if single else tuple(int(x) for x in k)
    n_items = bundle.config.n_items
    for x in ks:
        if not 1 <= x <= n_items:
            raise ConfigError(f"k={x} outside [1, {n_items}]")
    contexts = np.asarray(contexts)
    targets = np.asarray(targets)
    if len(targets) == 0:
        return float("nan") if single else {x: float("nan") for x in ks}
    table = bundle.embedding.data
    ranks = np.empty(len(targets), dtype=np.int64)
    for lo in range(0, len(targets), batch_size):
        sl = slice(lo, lo + batch_size)
        out = context_tower(encode(contexts[sl], bundle), bundle).data
        ranks[sl] = target_ranks(out, targets[sl], table)
    result = {x: float(np.mean(ranks < x)) for x in ks}
    return result[ks[0]] if single else result


# ---------------------------------------------------------------------------
# pretraining


def bt_diagnostics(bundle, items, real_length, config: TrainConfig, n: int = 2048) -> tuple[float, float]:
    """BT loss and mean |off-diagonal C| on a fixed subset with fixed views."""
    pick = rng_stream(config.seed, _DIAG).permutation(len(items))[:n]
    spec = config.augmentation
    v1, v2 = make_views(items[pick], real_length[pick], spec, epoch=2**31 - 1, batch_index=0)
    z = project(T.Tensor(encode_numpy(np.concatenate([v1, v2]), bundle)), bundle).data
    b = len(pick)
    c = cross_correlation(
        T.mean_center_columns(T.Tensor(z[:b])), T.mean_center_columns(T.Tensor(z[b:]))
    )
    return barlow_twins_terms(c, config.lambd).item(), mean_abs_off_diagonal(c.data)


def pretrain_bt(
    items,
    real_length,
    config: TrainConfig,
    model_config: ModelConfig | None = None,
    bundle: ModelBundle | None = None,
    on_epoch: Callable[[int, ModelBundle], None] | None = None,
) -> tuple[ModelBundle, History]:
    """Barlow Twins pretraining of embedding, encoder and projector.

    Each batch gets two views from the configured augmentation; both pass
    through the shared network and the redundancy-reduction loss is
    minimised with Adam. Trailing batches smaller than 2 are skipped.
    """
    if config.phase != "bt_pretrain":
        raise ConfigError(f"pretrain_bt needs phase bt_pretrain, got {config.phase}")
    items = np.asarray(items)
    real_length = np.asarray(real_length)
    if bundle is None:
        if model_config is None:
            raise ConfigError("pass model_config or bundle")
        bundle = init_parameters(model_config, config.seed)
    opt = _optimizer(bundle, config)
    hist = History()
    loss0, off0 = bt_diagnostics(bundle, items, real_length, config)
    hist.log("bt_pretrain", 0, "diag", "bt_loss", loss0)
    hist.log("bt_pretrain", 0, "diag", "offdiag_abs_mean", off0)
    for epoch in range(1, config.epochs + 1):
        total, count, off = 0.0, 0, 0.0
        for bi, idx in _batches(len(items), config.batch_size, config.seed, epoch):
            b = len(idx)
            if b < 2:
                continue
            v1, v2 = make_views(items[idx], real_length[idx], config.augmentation, epoch, bi)
            with T.Tape() as tape:
                z = project(encode(np.concatenate([v1, v2]), bundle), bundle)
                c = cross_correlation(
                    T.mean_center_columns(T.rows(z, 0, b)), T.mean_center_columns(T.rows(z, b, 2 * b))
                )
                loss = barlow_twins_terms(c, config.lambd)
            value = _step(tape, loss, bundle, opt)
            hist.step_losses.append(value)
            total += value * b
            count += b
            off += mean_abs_off_diagonal(c.data) * b
        if count:
            hist.log("bt_pretrain", epoch, "train", "bt_loss", total / count)
            hist.log("bt_pretrain", epoch, "train", "offdiag_abs_mean", off / count)
        loss_e, off_e = bt_diagnostics(bundle, items, real_length, config)
        hist.log("bt_pretrain", epoch, "diag", "bt_loss", loss_e)
        hist.log("bt_pretrain", epoch, "diag", "offdiag_abs_mean", off_e)
        logger.info("bt epoch %d loss %.4f offdiag %.4f", epoch, total / max(count, 1), off_e)
        if on_epoch:
            on_epoch(epoch, bundle)
    return bundle, hist


def _train_next_item(
    bundle: ModelBundle,
    contexts,
    targets,
    config: TrainConfig,
    phase: str,
    val: tuple[np.ndarray, np.ndarray] | None,
    ks,
    on_epoch,
) -> History:
    opt = _optimizer(bundle, config)
    hist = History()
    for epoch in range(1, config.epochs + 1):
        total, count = 0.0, 0
        for _, idx in _batches(len(contexts), config.batch_size, config.seed, epoch):
            with T.Tape() as tape:
                out = context_tower(encode(contexts[idx], bundle), bundle)
                loss = in_batch_contrastive_loss(out, targets[idx], bundle.embedding)
            value = _step(tape, loss, bundle, opt)
            hist.step_losses.append(value)
            total += value * len(idx)
            count += len(idx)
        if count:
            hist.log(phase, epoch, "train", "contrastive_loss", total / count)
        if val is not None and len(val[1]):
            for k, r in eval_topk_recall(bundle, val[0], val[1], ks, config.eval_batch_size).items():
                hist.log(phase, epoch, "val", f"recall@{k}", r)
        if on_epoch:
            on_epoch(epoch, bundle)
    return hist


def pretrain_dual_encoder(
    contexts,
    targets,
    config: TrainConfig,
    model_config: ModelConfig | None = None,
    bundle: ModelBundle | None = None,
    val: tuple[np.ndarray, np.ndarray] | None = None,
    ks=RECALL_KS,
    on_epoch=None,
) -> tuple[ModelBundle, History]:
    """Two-tower next-item training from scratch (the baseline encoder)."""
    if config.phase != "de_pretrain":
        raise ConfigError(f"pretrain_dual_encoder needs phase de_pretrain, got {config.phase}")
    if bundle is None:
        if model_config is None:
            raise ConfigError("pass model_config or bundle")
        bundle = init_parameters(model_config, config.seed, ("embedding", "encoder", "context"))
    contexts, targets = np.asarray(contexts), np.asarray(targets)
    hist = _train_next_item(bundle, contexts, targets, config, "de_pretrain", val, ks, on_epoch)
    return bundle, hist


def _apply_encoder_mode(bundle: ModelBundle, mode: str) -> None:
    if mode == "fixed":
        bundle.freeze(*ENCODER_COMPONENTS)
    else:
        bundle.unfreeze(*ENCODER_COMPONENTS)


def finetune_next_item(
    bundle: ModelBundle,
    contexts,
    targets,
    config: TrainConfig,
    val: tuple[np.ndarray, np.ndarray] | None = None,
    ks=RECALL_KS,
    on_epoch=None,
) -> tuple[ModelBundle, History]:
    """Dual encoder initialised from pretrained embedding + encoder weights.

    A fresh context MLP is attached; with ``encoder_mode="fixed"`` the
    embedding (also the item tower) and encoder stay frozen.
    """
    if config.phase != "finetune_next_item":
        raise ConfigError(f"finetune_next_item needs phase finetune_next_item, got {config.phase}")
    bundle = bundle.copy()
    bundle.drop("projector")
    bundle.drop("classifier")
    add_head(bundle, "context", config.seed)
    _apply_encoder_mode(bundle, config.encoder_mode)
    contexts, targets = np.asarray(contexts), np.asarray(targets)
    hist = _train_next_item(bundle, contexts, targets, config, "finetune_next_item", val, ks, on_epoch)
    for k in ks:
        series = hist.series(f"recall@{k}", "val")
        if series:
            hist.log("finetune_next_item", config.epochs, "val", f"best_recall@{k}", max(series))
            hist.log("finetune_next_item", config.epochs, "val", f"final_recall@{k}", series[-1])
    return bundle, hist


# ---------------------------------------------------------------------------
# classification


def finetune_classifier(
    bundle: ModelBundle,
    train: tuple[np.ndarray, np.ndarray],
    val: tuple[np.ndarray, np.ndarray],
    n_classes: int,
    config: TrainConfig,
    on_epoch=None,
) -> tuple[ModelBundle, History]:
    """Train a 2-layer MLP head on top of the sequence encoder.

    Rows labelled :data:`UNDEFINED_LABEL` are ignored. Validation accuracy
    is logged each epoch; best and final values are logged at the end.
    With a fixed encoder the representations are computed once, which is
    equivalent because frozen weights never change.
    """
    if config.phase != "finetune_classify":
        raise ConfigError(f"finetune_classifier needs phase finetune_classify, got {config.phase}")
    x_tr, y_tr = (np.asarray(a) for a in train)
    x_va, y_va = (np.asarray(a) for a in val)
    keep = y_tr != UNDEFINED_LABEL
    x_tr, y_tr = x_tr[keep], y_tr[keep]
    keep = y_va != UNDEFINED_LABEL
    x_va, y_va = x_va[keep], y_va[keep]
    if len(y_tr) == 0:
        raise ConfigError("no labelled training rows for this task")

    bundle = bundle.copy()
    bundle.drop("projector")
    bundle.drop("context")
    add_head(bundle, "classifier", config.seed, n_classes)
    _apply_encoder_mode(bundle, config.encoder_mode)
    fixed = config.encoder_mode == "fixed"
    if fixed:
        reps_tr = encode_numpy(x_tr, bundle, config.eval_batch_size)
        reps_va = encode_numpy(x_va, bundle, config.eval_batch_size)

    opt = _optimizer(bundle, config)
    hist = History()
    phase = "finetune_classify"
    for epoch in range(1, config.epochs + 1):
        total = 0.0
        for _, idx in _batches(len(y_tr), config.batch_size, config.seed, epoch):
            with T.Tape() as tape:
                reps = T.Tensor(reps_tr[idx]) if fixed else encode(x_tr[idx], bundle)
                loss = T.softmax_cross_entropy(classify(reps, bundle), y_tr[idx])
            total += _step(tape, loss, bundle, opt) * len(idx)
        hist.log(phase, epoch, "train", "cross_entropy", total / len(y_tr))
        if len(y_va):
            rv = reps_va if fixed else encode_numpy(x_va, bundle, config.eval_batch_size)
            hist.log(phase, epoch, "val", "accuracy", eval_accuracy(classify(T.Tensor(rv), bundle).data, y_va))
        if on_epoch:
            on_epoch(epoch, bundle)
    acc = hist.series("accuracy", "val")
    if acc:
        hist.log(phase, config.epochs, "val", "best_accuracy", max(acc))
        hist.log(phase, config.epochs, "val", "final_accuracy", acc[-1])
    return bundle, hist


def predict_logits(bundle: ModelBundle, items, batch_size: int = 4096) -> np.ndarray:
    return classify(T.Tensor(encode_numpy(items, bundle, batch_size)), bundle).data


# ---------------------------------------------------------------------------
# outputs


class MetricsWriter:
    """Appends :class:`History` rows to ``metrics.csv``.

    With ``replace=True`` earlier rows carrying the same ``run_id`` are
    dropped first, so repeating a deterministic run leaves the file as is.
    """

    def __init__(self, path):
        self.path = Path(path)

    def write(self, run_id: str, hist: History, replace: bool = False) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        kept = []
        if replace and self.path.exists():
            with open(self.path, newline="") as fh:
                kept = [r for r in list(csv.reader(fh))[1:] if r and r[0] != run_id]
        mode = "w" if replace or not self.path.exists() else "a"
        with open(self.path, mode, newline="") as fh:
            w = csv.writer(fh)
            if mode == "w":
                w.writerow(METRICS_HEADER)
                w.writerows(kept)
            for phase, epoch, split, metric, value in hist.rows:
                w.writerow([run_id, phase, epoch, split, metric, repr(value)])


def read_metrics(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["epoch"] = int(r["epoch"])
        r["value"] = float(r["value"])
    return rows


def export_embeddings(bundle: ModelBundle, vocab: Vocabulary, out_path) -> int:
    """Write ``item_id,category_list,e1..ed`` for every vocabulary item."""
    table = bundle.embedding.data
    if table.shape[0] != vocab.n_items + 1:
        raise ConfigError(f"embedding has {table.shape[0] - 1} items, vocabulary {vocab.n_items}")
    d = table.shape[1]
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["item_id", "category_list"] + [f"e{j + 1}" for j in range(d)])
        for idx, item in enumerate(vocab.item_ids, start=1):
            cats = "|".join(vocab.categories[c] for c in vocab.item_categories[idx])
            w.writerow([item, cats] + [repr(float(v)) for v in table[idx]])
    return vocab.n_items


def with_phase(config: TrainConfig, phase: str, **changes) -> TrainConfig:
    return replace(config, phase=phase, **changes)
