"""Downstream comparison protocol for limited-label classification.

Pretrains a Barlow Twins encoder and a dual-encoder encoder on the training
split, then fine-tunes favorite-category classifiers on a small labelled
fraction with fixed or trainable encoders, next to a from-scratch baseline
of the same architecture.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .augment import AugmentationSpec
from .data import PreparedData, SplitManifest, subsample_labeled
from .models import ModelConfig, init_parameters
from .training import TrainConfig, finetune_classifier, pretrain_bt, pretrain_dual_encoder

logger = logging.getLogger(__name__)


@dataclass
class ProtocolSettings:
    task: str = "favorite_category"
    label_fraction: float = 0.01
    pretrain_batch_size: int = 128
    pretrain_epochs: int = 10
    finetune_batch_size: int = 64
    finetune_epochs: int = 50
    learning_rate: float = 1e-3
    augmentation: AugmentationSpec = field(default_factory=lambda: AugmentationSpec("segment_mask", 0.2, 0))
    lambd: float = 10.0
    seed: int = 0
    arms: tuple[str, ...] = ("bt_fixed", "bt_trainable", "de_fixed", "de_trainable", "scratch")


@dataclass
class ArmResult:
    best: float
    final: float
    curve: list[float]

    @property
    def drop(self) -> float:
        return self.best - self.final


def subsample_manifest(manifest: SplitManifest, max_sequences: int, seed: int) -> SplitManifest:
    """Shrink every split proportionally so the total is at most ``max_sequences``."""
    total = len(manifest.train) + len(manifest.val) + len(manifest.test)
    if max_sequences >= total:
        return manifest
    rng = np.random.default_rng(seed)

    def take(ids):
        k = max(1, math.floor(len(ids) * max_sequences / total))
        return sorted(rng.choice(np.asarray(ids), size=k, replace=False).tolist())

    return SplitManifest(take(manifest.train), take(manifest.val), take(manifest.test), manifest.seed)


def run_protocol(data: PreparedData, settings: ProtocolSettings, model_config: ModelConfig | None = None):
    """Run every arm in ``settings.arms``; returns ``{arm: ArmResult}`` and timings."""
    store, manifest = data.store, data.manifest
    if model_config is None:
        model_config = ModelConfig(n_items=data.vocab.n_items, seq_len=store.seq_len)
    labels = store.labels[settings.task]
    n_classes = int(max(labels.max() + 1, len(data.vocab.label_classes.get(settings.task, []))))
    train = np.asarray(manifest.train)
    val = np.asarray(manifest.val)
    labelled = np.asarray(subsample_labeled(manifest, settings.label_fraction, settings.seed))

    results: dict[str, ArmResult] = {}
    timings: dict[str, float] = {}
    arms = settings.arms
    base = dict(learning_rate=settings.learning_rate, seed=settings.seed, lambd=settings.lambd)

    encoders = {}
    if any(a.startswith("bt_") for a in arms):
        t0 = time.perf_counter()
        cfg = TrainConfig(
            phase="bt_pretrain",
            batch_size=settings.pretrain_batch_size,
            epochs=settings.pretrain_epochs,
            augmentation=settings.augmentation,
            **base,
        )
        encoders["bt"], _ = pretrain_bt(store.items[train], store.real_length[train], cfg, model_config)
        timings["bt_pretrain"] = time.perf_counter() - t0
    if any(a.startswith("de_") for a in arms):
        t0 = time.perf_counter()
        cfg = TrainConfig(
            phase="de_pretrain", batch_size=settings.pretrain_batch_size, epochs=settings.pretrain_epochs, **base
        )
        ctx, tgt = store.subset(train).next_item_pairs()
        encoders["de"], _ = pretrain_dual_encoder(ctx, tgt, cfg, model_config)
        timings["de_pretrain"] = time.perf_counter() - t0

    x_tr, y_tr = store.items[labelled], labels[labelled]
    x_va, y_va = store.items[val], labels[val]
    for arm in arms:
        t0 = time.perf_counter()
        if arm == "scratch":
            bundle, mode = init_parameters(model_config, settings.seed, ("embedding", "encoder")), "trainable"
        else:
            source, mode = arm.split("_")
            bundle = encoders[source]
        cfg = TrainConfig(
            phase="finetune_classify",
            batch_size=settings.finetune_batch_size,
            epochs=settings.finetune_epochs,
            label_fraction=settings.label_fraction,
            encoder_mode=mode,
            **base,
        )
        _, hist = finetune_classifier(bundle, (x_tr, y_tr), (x_va, y_va), n_classes, cfg)
        curve = hist.series("accuracy", "val")
        results[arm] = ArmResult(max(curve), curve[-1], curve)
        timings[arm] = time.perf_counter() - t0
        logger.info("%s best %.4f final %.4f", arm, max(curve), curve[-1])
    return results, timings
