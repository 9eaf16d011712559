"""Metric-learning training loop over balanced synthetic pairs.

Each step draws a batch of pairs, embeds both members through the shared
network in one forward pass, applies the weighted contrastive loss, and
backpropagates exact gradients into Adam. After every epoch the loss is
measured on pairs drawn from held-out classes the optimizer never sees;
the checkpoint with the best held-out loss is returned.
"""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .embedding import (
    NetworkConfig,
    NetworkParams,
    backward_batch,
    forward_batch,
    init_adam,
    init_network,
    adam_step,
)
from .errors import (
    EmptyBatchError,
    InsufficientClassesError,
    InvalidConfigError,
    LeakageError,
    NonFiniteGradientError,
)
from .loss import LossConfig, batch_loss_and_grads
from .synthesis import (
    Pair,
    SamplerConfig,
    SourceBank,
    feasible_categories,
    sample_pair,
)


@dataclass
class TrainConfig:
    batch_size: int = 64
    max_epochs: int = 100
    # None: one epoch covers the event-source pool once, ceil(sources/batch).
    steps_per_epoch: int | None = None
    lr: float = 0.001
    loss: LossConfig = field(default_factory=LossConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    background_class_enabled: bool = True  # False: the ablation arm
    n_verif_pairs: int = 128
    select_final: bool = False  # True: skip best-verification selection
    # workers > 1 draws pairs from that many spawned rng streams round-robin;
    # changes the sample order relative to workers=1 (documented tradeoff)
    workers: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 1:
            raise InvalidConfigError("batch_size and max_epochs must be >= 1")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise InvalidConfigError("steps_per_epoch must be >= 1 when set")
        if self.n_verif_pairs < 1:
            raise InvalidConfigError("n_verif_pairs must be >= 1")
        if self.workers < 1:
            raise InvalidConfigError("workers must be >= 1")
        # one switch controls both the sampler and the ablation bookkeeping
        self.sampler = replace(
            self.sampler,
            background_enabled=self.background_class_enabled,
            w_bg=self.loss.w_bg,
        )


@dataclass
class TrainHistory:
    epochs: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    verif_loss: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)

    def append(self, epoch: int, train: float, verif: float, secs: float) -> None:
        for name, value in (("train", train), ("verification", verif)):
            if not math.isfinite(value):
                raise NonFiniteGradientError(f"non-finite {name} loss at epoch {epoch}")
        self.epochs.append(epoch)
        self.train_loss.append(train)
        self.verif_loss.append(verif)
        self.seconds.append(secs)

    @property
    def best_epoch(self) -> int:
        """Epoch (1-based) with the lowest verification loss."""
        if not self.epochs:
            raise EmptyBatchError("history is empty")
        return self.epochs[int(np.argmin(self.verif_loss))]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch", "train_loss", "verif_loss", "seconds"])
            for row in zip(self.epochs, self.train_loss, self.verif_loss, self.seconds):
                writer.writerow([row[0], f"{row[1]:.8f}", f"{row[2]:.8f}", f"{row[3]:.3f}"])


def _batch_of_pairs(
    rngs: list[np.random.Generator],
    bank: SourceBank,
    cfg: TrainConfig,
) -> list[Pair]:
    """Round-robin over the worker rng streams (one stream when workers=1)."""
    return [
        sample_pair(rngs[i % len(rngs)], bank, cfg.sampler)
        for i in range(cfg.batch_size)
    ]


def _pair_batch_arrays(pairs: list[Pair]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack pair members into one (2N, F, T) array plus labels/weights."""
    firsts = np.stack([p.first.features.values for p in pairs])
    seconds = np.stack([p.second.features.values for p in pairs])
    x = np.concatenate([firsts, seconds], axis=0)
    labels = np.array([p.label for p in pairs])
    weights = np.array([p.w for p in pairs], dtype=np.float64)
    return x, labels, weights


def _event_class_names(bank: SourceBank) -> set[str]:
    return set(bank.class_names.values())


def verification_loss(
    params: NetworkParams,
    held_out_bank: SourceBank,
    cfg: TrainConfig,
    rng: np.random.Generator,
    n_pairs: int,
    train_classes: set[str] | None = None,
) -> float:
    """Mean weighted contrastive loss on fresh pairs from held-out classes.

    Categories the held-out bank cannot realize (different-class pairs when
    only one class is held out) are dropped and the rest renormalized.
    """
    if n_pairs < 1:
        raise EmptyBatchError("verification needs n_pairs >= 1")
    if train_classes is not None:
        overlap = train_classes & _event_class_names(held_out_bank)
        if overlap:
            raise LeakageError(
                f"held-out bank shares classes with training: {sorted(overlap)}"
            )
    cats, probs = feasible_categories(held_out_bank, cfg.sampler)
    pairs = [sample_pair(rng, held_out_bank, cfg.sampler, cats, probs)
             for _ in range(n_pairs)]
    x, labels, weights = _pair_batch_arrays(pairs)
    emb, _ = forward_batch(params, x)
    loss, _, _ = batch_loss_and_grads(emb[:n_pairs], emb[n_pairs:],
                                      labels, weights, cfg.loss)
    return loss


def train(
    bank: SourceBank,
    cfg: TrainConfig,
    rng: np.random.Generator,
    holdout_bank: SourceBank,
) -> tuple[NetworkParams, TrainHistory]:
    """Run the full loop; returns the best-verification-loss checkpoint.

    Deterministic given the rng state: batch assembly is single-threaded
    and every random draw flows through the one generator.
    """
    if bank.c_train < 2:
        raise InsufficientClassesError(
            f"training needs >= 2 event classes, bank has {bank.c_train}"
        )
    train_names = _event_class_names(bank)
    overlap = train_names & _event_class_names(holdout_bank)
    if overlap:
        raise LeakageError(f"holdout classes overlap training: {sorted(overlap)}")

    n_sources = sum(len(v) for v in bank.event_sources.values())
    steps = cfg.steps_per_epoch or max(1, math.ceil(n_sources / cfg.batch_size))

    params = init_network(cfg.network, rng)
    adam = init_adam(params, lr=cfg.lr)
    history = TrainHistory()
    best_params = params
    best_verif = math.inf
    sample_rngs = [rng] if cfg.workers == 1 else list(rng.spawn(cfg.workers))

    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        epoch_losses = []
        for step in range(1, steps + 1):
            pairs = _batch_of_pairs(sample_rngs, bank, cfg)
            x, labels, weights = _pair_batch_arrays(pairs)
            emb, cache = forward_batch(params, x)
            n = len(pairs)
            loss, g1, g2 = batch_loss_and_grads(emb[:n], emb[n:],
                                                labels, weights, cfg.loss)
            grads = backward_batch(params, cache, np.concatenate([g1, g2]))
            try:
                params, adam = adam_step(params, grads, adam)
            except NonFiniteGradientError as exc:
                raise NonFiniteGradientError(
                    f"epoch {epoch} step {step}: {exc}"
                ) from exc
            epoch_losses.append(loss)
        verif = verification_loss(params, holdout_bank, cfg, rng,
                                  cfg.n_verif_pairs, train_classes=train_names)
        history.append(epoch, float(np.mean(epoch_losses)), verif,
                       time.perf_counter() - t0)
        if verif < best_verif:
            best_verif = verif
            best_params = params

    return (params if cfg.select_final else best_params), history
