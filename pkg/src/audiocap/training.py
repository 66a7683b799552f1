"""Batching with front-padded features, the Adam training loop with rounded-loss
early stopping, and split evaluation by greedy decoding."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from decimal import ROUND_HALF_UP, Decimal
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, ContractViolation, SequenceTooShort, TrainingDiverged
from .model import ModelConfig, batch_loss, encode, greedy_decode, init_params, min_input_length
from .numcore import AdamState, ParamStore, adam_step, make_rng

log = logging.getLogger(__name__)


@dataclass
class Example:
    features: np.ndarray  # (T, F)
    targets: Sequence[int]  # ends with eos
    clip_id: str = ""


@dataclass
class Batch:
    features: np.ndarray  # (B, T_max, F), zero rows at the front
    feature_valid_from: np.ndarray  # (B,) first non-pad row
    targets: np.ndarray  # (B, S_max), tail filled with eos
    target_lengths: np.ndarray  # (B,)
    clip_ids: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return self.features.shape[0]

    def target_mask(self) -> np.ndarray:
        S = self.targets.shape[1]
        return (np.arange(S)[None, :] < self.target_lengths[:, None]).astype(np.float64)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    learning_rate: float = 1e-4
    patience_epochs: int = 100
    loss_round_digits: int = 3
    beta_clamp: float = 0.5
    rng_seed: int = 0
    max_epochs: int = 10000
    loss_mode: str = "categorical"
    mask_padded_targets: bool = False
    holdout_fraction: float = 0.0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.patience_epochs < 1:
            raise ConfigurationError("patience_epochs must be >= 1")
        if self.max_epochs < 1:
            raise ConfigurationError("max_epochs must be >= 1")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ConfigurationError("holdout_fraction must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigurationError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    raw_loss: float
    rounded_loss: float
    seconds: float


def round_half_away(x: float, digits: int) -> float:
    q = Decimal(1).scaleb(-digits)
    return float(Decimal(repr(x)).quantize(q, rounding=ROUND_HALF_UP))


def make_batches(examples: Sequence[Example], batch_size: int, rng_seed: int | None,
                 ) -> list[Batch]:
    """Shuffle (when ``rng_seed`` is not None) and pad into batches.

    Features are front-padded with zero rows to the batch's longest T; targets
    are back-padded with each item's own final (eos) index to the longest S.
    """
    if not examples:
        raise ContractViolation("cannot batch an empty example list")
    order = np.arange(len(examples))
    if rng_seed is not None:
        order = make_rng(rng_seed).permutation(len(examples))
    batches = []
    for start in range(0, len(order), batch_size):
        chunk = [examples[i] for i in order[start:start + batch_size]]
        T = max(ex.features.shape[0] for ex in chunk)
        S = max(len(ex.targets) for ex in chunk)
        F = chunk[0].features.shape[1]
        feats = np.zeros((len(chunk), T, F))
        valid = np.empty(len(chunk), dtype=np.int64)
        targets = np.empty((len(chunk), S), dtype=np.int64)
        lengths = np.empty(len(chunk), dtype=np.int64)
        for b, ex in enumerate(chunk):
            t = ex.features.shape[0]
            feats[b, T - t:] = ex.features
            valid[b] = T - t
            s = len(ex.targets)
            targets[b, :s] = ex.targets
            targets[b, s:] = ex.targets[-1]
            lengths[b] = s
        batches.append(Batch(feats, valid, targets, lengths, [ex.clip_id for ex in chunk]))
    return batches


class EarlyStopping:
    """Stop once the rounded loss has not strictly improved for ``patience`` epochs."""

    def __init__(self, patience: int, digits: int = 3):
        self.patience = patience
        self.digits = digits
        self.best: float | None = None
        self.best_epoch = -1
        self.stale = 0

    def update(self, epoch: int, raw_loss: float) -> bool:
        """Record an epoch; returns True when it is the new best."""
        rounded = round_half_away(raw_loss, self.digits)
        if self.best is None or rounded < self.best:
            self.best, self.best_epoch, self.stale = rounded, epoch, 0
            return True
        self.stale += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.stale >= self.patience


@dataclass
class TrainResult:
    params: ParamStore  # parameters of the best rounded-loss epoch
    records: list[EpochRecord]
    last_params: ParamStore
    best_epoch: int

    def __iter__(self):
        return iter((self.params, self.records))


def _phi_matrix(targets: np.ndarray, weights) -> np.ndarray:
    table = np.asarray(weights.phi if hasattr(weights, "phi") else weights, dtype=np.float64)
    return table[targets]


def mean_loss(examples: Sequence[Example], params: ParamStore, model_cfg: ModelConfig,
              train_cfg: TrainConfig, weights) -> float:
    """Inference-mode loss over examples (no gradients, no dropout)."""
    total = 0.0
    for batch in make_batches(examples, train_cfg.batch_size, None):
        mask = batch.target_mask() if train_cfg.mask_padded_targets else None
        total += len(batch) * batch_loss(batch.features, batch.targets, _phi_matrix(batch.targets, weights),
                                         params, model_cfg, mode=train_cfg.loss_mode, mask=mask,
                                         compute_grad=False)
    return total / len(examples)


def train(dev_examples: Sequence[Example], model_cfg: ModelConfig, train_cfg: TrainConfig,
          weights, *, init: ParamStore | None = None,
          on_epoch: Callable[[EpochRecord, ParamStore], None] | None = None,
          stop_when: Callable[[EpochRecord], bool] | None = None) -> TrainResult:
    """Optimize with Adam until the rounded epoch loss stalls for ``patience_epochs``.

    ``stop_when`` is an optional extra stopping predicate checked after each epoch.
    """
    if not dev_examples:
        raise ContractViolation("training needs at least one example")
    examples = list(dev_examples)
    monitor: list[Example] | None = None
    if train_cfg.holdout_fraction > 0.0:
        order = make_rng(train_cfg.rng_seed, 1).permutation(len(examples))
        n_hold = max(1, int(round(train_cfg.holdout_fraction * len(examples))))
        monitor = [examples[i] for i in order[:n_hold]]
        examples = [examples[i] for i in order[n_hold:]]
        if not examples:
            raise ConfigurationError("holdout leaves no training examples")

    params = init.copy() if init is not None else init_params(model_cfg, train_cfg.rng_seed)
    params.zero_grad()
    adam = AdamState(lr=train_cfg.learning_rate)
    stopper = EarlyStopping(train_cfg.patience_epochs, train_cfg.loss_round_digits)
    best = params.copy()
    records: list[EpochRecord] = []

    for epoch in range(train_cfg.max_epochs):
        t0 = time.perf_counter()
        total = 0.0
        batches = make_batches(examples, train_cfg.batch_size, train_cfg.rng_seed + epoch)
        for k, batch in enumerate(batches):
            mask = batch.target_mask() if train_cfg.mask_padded_targets else None
            loss = batch_loss(batch.features, batch.targets, _phi_matrix(batch.targets, weights),
                              params, model_cfg, training=True,
                              rng=make_rng(train_cfg.rng_seed, epoch, k),
                              mode=train_cfg.loss_mode, mask=mask)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {k}", last_good=best)
            try:
                adam_step(params, adam)
            except TrainingDiverged as exc:
                raise TrainingDiverged(f"epoch {epoch}, batch {k}: {exc}", last_good=best) from None
            total += loss * len(batch)
        raw = total / len(examples)
        if monitor is not None:
            raw = mean_loss(monitor, params, model_cfg, train_cfg, weights)
        rec = EpochRecord(epoch, raw, round_half_away(raw, train_cfg.loss_round_digits),
                          time.perf_counter() - t0)
        records.append(rec)
        if stopper.update(epoch, raw):
            best = params.copy()
        log.debug("epoch %d loss %.3f", epoch, rec.rounded_loss)
        if on_epoch is not None:
            on_epoch(rec, params)
        if stopper.should_stop or (stop_when is not None and stop_when(rec)):
            break
    return TrainResult(best, records, params, stopper.best_epoch)


def evaluate_split(features: Mapping[str, np.ndarray], params: ParamStore, cfg: ModelConfig,
                   eos_index: int) -> dict[str, list[int]]:
    """Greedy-decode each clip (dropout off); eos is stripped from the result."""
    out: dict[str, list[int]] = {}
    need = min_input_length(cfg)
    for clip_id, X in features.items():
        if X.shape[0] < need:
            log.warning("skipping %s: %d frames < %d required by sub-sampling", clip_id, X.shape[0], need)
            continue
        try:
            z, _ = encode(X, params, cfg)
        except SequenceTooShort as exc:
            log.warning("skipping %s: %s", clip_id, exc)
            continue
        tokens = greedy_decode(z, params, cfg, eos_index)
        out[clip_id] = [t for t in tokens if t != eos_index]
    return out
