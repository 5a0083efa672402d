"""Training loop: forward, per-layer matching, loss, backward, AdamW.

Matching modes mirror the ablation of the method:

* ``static``    each label is bound to the free query whose predicted time is
                nearest the tagged frame; class scores play no part.
* ``time_only`` Hungarian matching on ``lambda_time * |t - t̂|`` only.
* ``dynamic``   Hungarian matching on class cost plus weighted time cost.
"""

from __future__ import annotations

import json
import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as tn
from .inference import detect, ground_truth
from .loss import total_loss
from .matcher import assign_labels, frame_of, nearest_time_assignment
from .model import ModelConfig, ModelParams, forward, init_params
from .spotting_eval import evaluate
from .synth import Clip, dilate_labels, mixup

log = logging.getLogger(__name__)

MATCHING_MODES = ("static", "time_only", "dynamic")
# lambda_time per label-noise sigma for visually distinct events
LAMBDA_BY_SIGMA = {0.0: 10.0, 0.5: 8.0, 1.0: 4.0, 1.5: 2.0, 2.0: 1.0}
AMBIGUOUS_LAMBDA = 8.0


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    steps_per_epoch: int = 100
    batch_size: int = 8
    lr_backbone: float = 1e-3
    lr_transformer: float = 1e-3
    weight_decay: float = 1e-4
    warmup_epochs: int = 3
    lambda_time: float = 10.0
    matching: str = "dynamic"
    mixup: bool = False
    mixup_alpha: float = 0.2
    dilation: bool = False
    aux_losses: bool = True
    seed: int = 0
    eval_every: int = 0
    deltas: tuple[int, ...] = (1, 2)

    def __post_init__(self):
        if self.matching not in MATCHING_MODES:
            raise ValueError(f"matching must be one of {MATCHING_MODES}, got {self.matching!r}")
        if self.epochs < 0 or self.steps_per_epoch < 1 or self.batch_size < 1:
            raise ValueError("epochs >= 0, steps_per_epoch >= 1 and batch_size >= 1 required")
        if self.epochs and not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError("warmup_epochs must be smaller than epochs")
        if self.lr_backbone <= 0 or self.lr_transformer <= 0:
            raise ValueError("learning rates must be positive")
        if self.lambda_time < 0:
            raise ValueError("lambda_time must be non-negative")


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss: float
    class_loss: float
    time_loss: float
    offset_noisy: float | None
    offset_precise: float | None
    val_map: dict[str, float] = field(default_factory=dict)


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(r), sort_keys=True) + "\n" for r in self.records)

    def write(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_jsonl())

    @classmethod
    def read(cls, path) -> TrainLog:
        with open(path) as fh:
            return cls([EpochRecord(**json.loads(line)) for line in fh if line.strip()])


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, params: ModelParams, log: TrainLog):
        super().__init__(message)
        self.params = params
        self.log = log


# ---------------------------------------------------------------------------
# schedule and optimiser

def lr_at(epoch: int, base: float, warmup_epochs: int, epochs: int) -> float:
    """Linear warmup reaching ``base`` on the last warmup epoch, then cosine."""
    if not 0 <= epoch < epochs:
        raise ValueError(f"epoch {epoch} outside [0, {epochs})")
    if epoch < warmup_epochs:
        return base * (epoch + 1) / warmup_epochs
    return base * 0.5 * (1.0 + math.cos(math.pi * (epoch - warmup_epochs) / (epochs - warmup_epochs)))


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
                   lr: float | dict[str, float], weight_decay: float) -> dict[str, np.ndarray]:
    """One AdamW update. Weight decay shrinks parameters directly and never
    enters the moment estimates. ``lr`` may be given per parameter."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    out = {}
    for name, p in params.items():
        step_lr = lr[name] if isinstance(lr, dict) else lr
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p = p * (1.0 - step_lr * weight_decay)
        out[name] = p - step_lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out


def _is_backbone(name: str) -> bool:
    return name.startswith("embed.")


def make_matcher(mode: str, lambda_time: float) -> Callable:
    if mode == "dynamic":
        return lambda labels, preds: assign_labels(labels, preds, lambda_time)
    if mode == "time_only":
        return lambda labels, preds: assign_labels(labels, preds, lambda_time, use_class=False)
    if mode == "static":
        return nearest_time_assignment
    raise ValueError(f"unknown matching mode {mode!r}")


def lambda_for_sigma(sigma: float, distinct: bool = True) -> float:
    if not distinct:
        return AMBIGUOUS_LAMBDA
    key = min(LAMBDA_BY_SIGMA, key=lambda s: abs(s - sigma))
    return LAMBDA_BY_SIGMA[key]


# ---------------------------------------------------------------------------

@dataclass
class _Sample:
    features: np.ndarray
    labels: list
    precise: list | None


def _make_batch(clips: Sequence[Clip], rng: np.random.Generator, cfg: TrainConfig) -> list[_Sample]:
    batch = []
    for _ in range(cfg.batch_size):
        clip = clips[int(rng.integers(len(clips)))]
        precise = clip.precise
        if cfg.mixup:
            other = clips[int(rng.integers(len(clips)))]
            lam = float(rng.beta(cfg.mixup_alpha, cfg.mixup_alpha))
            clip = mixup(clip, other, lam=lam)
            precise = None
        labels = clip.labels
        if cfg.dilation:
            labels = dilate_labels(labels)
            precise = None
        if labels:
            batch.append(_Sample(clip.features, list(labels), precise))
    return batch


def train(
    model_config: ModelConfig,
    clips: Sequence[Clip],
    config: TrainConfig,
    params: ModelParams | None = None,
    val_clips: Sequence[Clip] | None = None,
    on_epoch: Callable[[EpochRecord, ModelParams], None] | None = None,
) -> tuple[ModelParams, TrainLog]:
    """Train on ``clips`` (their ``labels`` are the training targets; when a
    clip carries ``precise`` labels, offsets to them are logged per epoch)."""
    params = params or init_params(model_config, seed=config.seed)
    history = TrainLog()
    usable = [c for c in clips if c.labels]
    if config.epochs == 0:
        return params, history
    if not usable:
        raise ValueError("no training clip has labels")
    rng = np.random.default_rng([config.seed, 7])
    matcher = make_matcher(config.matching, config.lambda_time)
    state = AdamState()
    names = list(params.tensors)

    for epoch in range(config.epochs):
        lr_b = lr_at(epoch, config.lr_backbone, config.warmup_epochs, config.epochs)
        lr_t = lr_at(epoch, config.lr_transformer, config.warmup_epochs, config.epochs)
        lrs = {n: (lr_b if _is_backbone(n) else lr_t) for n in names}
        sums = np.zeros(3)
        steps = 0
        off_noisy: list[int] = []
        off_precise: list[int] = []
        for _ in range(config.steps_per_epoch):
            batch = _make_batch(usable, rng, config)
            if not batch:
                continue
            feats = np.stack([s.features for s in batch])
            labels = [s.labels for s in batch]
            try:
                with tn.Tape() as tape:
                    outs = forward(feats, params)
                    used = outs if config.aux_losses else outs[-1:]
                    loss, parts, asgs = total_loss(used, labels, config.lambda_time, matcher)
                grads = tn.backward(loss, tape)
                arrays = optimizer_step(
                    params.arrays(), {t.name: g for t, g in grads.items()}, state, lrs,
                    config.weight_decay,
                )
                new_params = params.replace(arrays)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}", params, history) from exc
            final_times = outs[-1].times
            for b, (asg, sample) in enumerate(zip(asgs[-1], batch)):
                for pair in asg.pairs:
                    off_noisy.append(abs(pair.frame_offset))
                    if sample.precise is not None:
                        g = sample.precise[pair.gt_index]
                        off_precise.append(abs(frame_of(final_times[b, pair.pred_index], g.length) - g.frame))
            params = new_params
            sums += (parts.total, parts.class_loss, parts.time_loss)
            steps += 1
        means = sums / max(steps, 1)
        record = EpochRecord(
            epoch=epoch,
            lr=lr_t,
            loss=float(means[0]),
            class_loss=float(means[1]),
            time_loss=float(means[2]),
            offset_noisy=float(np.mean(off_noisy)) if off_noisy else None,
            offset_precise=float(np.mean(off_precise)) if off_precise else None,
        )
        last = epoch == config.epochs - 1
        if val_clips and config.eval_every and ((epoch + 1) % config.eval_every == 0 or last):
            dets, _ = detect(params, val_clips)
            report = evaluate(dets, ground_truth(val_clips), config.deltas,
                              n_classes=model_config.n_classes)
            record.val_map = {str(d): r.mAP for d, r in report.results.items()}
        history.records.append(record)
        log.info("epoch %d loss %.4f offset(noisy) %s offset(precise) %s %s", epoch, record.loss,
                 record.offset_noisy, record.offset_precise, record.val_map)
        if on_epoch is not None:
            on_epoch(record, params)
    return params, history
