"""Adam, the training loop with validation-Dice early stopping, and the KD study."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from .autodiff import Variable, backward, no_grad
from .data import Sample, stack_pyramids
from .errors import ConfigError, ContractError, NumericalError
from .losses import LossWeights, kd_feature_loss, region_only_loss, total_loss
from .metrics import dice
from .modules import pointwise
from .tensor import Rng
from .zoo import Model, build

DICE_GRANULARITY = 1e-6


@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, state: AdamState):
    """One bias-corrected Adam update over ``{name: Variable}``; zeroes the grads.

    A plain list of Variables is accepted too; names are then positional.
    """
    if not isinstance(params, dict):
        params = {f"param{i}": p for i, p in enumerate(params)}
    for name, p in params.items():
        if p.grad is None:
            raise ContractError(f"adam_step: parameter {name!r} has no gradient")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.value)
            state.v[name] = np.zeros_like(p.value)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        if state.lr != 0.0:
            update = (m / c1) / (np.sqrt(v / c2) + state.eps)
            p.value -= (state.lr * update).astype(p.value.dtype, copy=False)
        p.zero_grad()


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 4
    patience: int = 10
    seed: int = 1
    lr: float = 3e-4
    weights: LossWeights = field(default_factory=LossWeights)
    kd_alpha: float = 0.0
    # stop as soon as validation Dice reaches this (None: never)
    target_dice: float | None = None

    def validate(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.lr < 0:
            raise ConfigError("learning rate must be non-negative")
        if self.kd_alpha < 0:
            raise ConfigError("kd_alpha must be non-negative")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_dice: float
    best_dice: float
    stopped: bool
    seconds: float = 0.0

    def line(self):
        return (f"epoch={self.epoch} train_loss={self.train_loss:.6f} val_dice={self.val_dice:.6f} "
                f"best={self.best_dice:.6f} stopped={int(self.stopped)}")


@dataclass
class TrainReport:
    epochs: list
    best_epoch: int
    best_dice: float
    best_state: bytes
    last_state: bytes
    step_losses: list
    seed: int
    stop_reason: str

    def lines(self):
        return [e.line() for e in self.epochs]

    def to_dict(self, timing=False):
        rows = []
        for e in self.epochs:
            row = {"epoch": e.epoch, "train_loss": e.train_loss, "val_dice": e.val_dice,
                   "best_dice": e.best_dice, "stopped": e.stopped}
            if timing:
                row["seconds"] = e.seconds
            rows.append(row)
        return {"seed": self.seed, "best_epoch": self.best_epoch, "best_dice": self.best_dice,
                "stop_reason": self.stop_reason, "epochs": rows}


def _batch(samples):
    images = np.concatenate([s.image for s in samples])
    return images, stack_pyramids([s.pyramid for s in samples])


def predict_logits(model: Model, images, batch_size=8):
    """Final region logits (N, 1, H, W) in eval mode without graph recording."""
    was_training = model.training
    model.eval()
    outs = []
    try:
        with no_grad():
            for i in range(0, len(images), batch_size):
                outs.append(model(images[i:i + batch_size]).region.value)
    finally:
        model.net.train(was_training)
    return np.concatenate(outs)


def mean_dice(model: Model, samples, batch_size=8):
    if not samples:
        raise ConfigError("cannot compute Dice on an empty sample list")
    logits = predict_logits(model, np.concatenate([s.image for s in samples]), batch_size)
    return float(np.mean([dice(logits[i, 0] >= 0, s.pyramid.region[1][0, 0]) for i, s in enumerate(samples)]))


def _supervised_loss(model, outputs, pyramid, weights):
    if model.config.family == "ultraseg":
        loss, _ = total_loss(outputs, pyramid, weights)
        return loss
    return region_only_loss(outputs, pyramid)


class KDAdaptor:
    """Pointwise projection from the student bottleneck to the teacher's width."""

    def __init__(self, student_channels, teacher_channels, seed):
        self.conv = pointwise(student_channels, teacher_channels)
        self.conv.initialize(seed, "kd_adaptor.")

    def parameters(self):
        return dict(self.conv.named_parameters("kd_adaptor."))

    def __call__(self, x):
        return self.conv(x)


def fit(model: Model, train_samples, val_samples, cfg: TrainConfig, teacher_features=None, log=None) -> TrainReport:
    """Train ``model`` in place and restore its best-validation weights.

    ``teacher_features`` maps sample id to a cached teacher bottleneck
    (1, C, h, w); it is required when ``cfg.kd_alpha > 0``.
    """
    cfg.validate()
    train_samples, val_samples = list(train_samples), list(val_samples)
    if not train_samples or not val_samples:
        raise ConfigError("training and validation sets must both be non-empty")
    adaptor = None
    if cfg.kd_alpha > 0:
        if teacher_features is None:
            raise ConfigError("kd_alpha > 0 needs cached teacher features")
        t_channels = next(iter(teacher_features.values())).shape[1]
        adaptor = KDAdaptor(model.config.encoder_channels[-1], t_channels, cfg.seed)

    params = dict(model.registry)
    if adaptor is not None:
        params.update(adaptor.parameters())
    state = AdamState(lr=cfg.lr)
    rng = Rng(cfg.seed).fork(0x7EA1)
    model.zero_grad()

    best_dice, best_epoch = -math.inf, 0
    best_state = checkpoint.encode(model)
    since_best = 0
    epochs, step_losses = [], []
    stop_reason = "epochs"
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        model.train()
        order = rng.permutation(len(train_samples))
        losses = []
        for bi, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = [train_samples[i] for i in order[start:start + cfg.batch_size]]
            images, pyramid = _batch(batch)
            outputs = model(images)
            loss = _supervised_loss(model, outputs, pyramid, cfg.weights)
            if adaptor is not None:
                teacher = np.concatenate([teacher_features[s.id] for s in batch])
                loss = loss + kd_feature_loss(teacher, outputs.bottleneck, adaptor, cfg.kd_alpha)
            value = float(loss.value.reshape(()))
            if not math.isfinite(value):
                raise NumericalError(f"non-finite loss {value} at epoch {epoch}, batch {bi}")
            backward(loss)
            adam_step(params, state)
            losses.append(value)
            step_losses.append(value)
        val = mean_dice(model, val_samples)
        improved = round(val / DICE_GRANULARITY) > round(best_dice / DICE_GRANULARITY) if best_epoch else True
        if improved:
            best_dice, best_epoch, since_best = val, epoch, 0
            best_state = checkpoint.encode(model)
        else:
            since_best += 1
        stop = False
        if cfg.target_dice is not None and val >= cfg.target_dice:
            stop, stop_reason = True, "target"
        elif since_best >= cfg.patience:
            stop, stop_reason = True, "patience"
        rec = EpochRecord(epoch, float(np.mean(losses)), val, best_dice, stop, time.perf_counter() - t0)
        epochs.append(rec)
        if log is not None:
            log(rec.line())
        if stop:
            break
    last_state = checkpoint.encode(model)
    _restore(model, best_state)
    return TrainReport(epochs, best_epoch, best_dice, best_state, last_state, step_losses, cfg.seed, stop_reason)


def _restore(model: Model, blob: bytes):
    best = checkpoint.decode(blob)
    src = best.state_arrays()
    for name, arr in model.state_arrays().items():
        arr[...] = src[name]


# ------------------------------------------------------------------ distillation study

def teacher_features(teacher: Model, samples, batch_size=4):
    """Cached bottleneck features {id: (1, C, h, w)} from an eval-mode teacher."""
    teacher.eval()
    feats = {}
    with no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i:i + batch_size]
            out = teacher(np.concatenate([s.image for s in chunk]))
            for j, s in enumerate(chunk):
                feats[s.id] = out.bottleneck.value[j:j + 1].copy()
    return feats


@dataclass
class KDResult:
    seed: int
    alpha: float
    baseline_dice: float
    kd_dice: float

    @property
    def delta(self):
        return self.kd_dice - self.baseline_dice


def kd_experiment(train_samples, val_samples, seeds=(1, 2, 3), alpha=0.2, student="ultraseg-108k",
                  teacher="unet-medium", teacher_epochs=2, student_epochs=3, batch_size=4, log=None):
    """Train a teacher once, then a student per seed with and without feature KD.

    Returns (teacher validation Dice, list of KDResult). No improvement is
    expected or asserted; the study reports deltas.
    """
    t_model = build(teacher, seed=seeds[0])
    t_cfg = TrainConfig(epochs=teacher_epochs, batch_size=batch_size, patience=teacher_epochs, seed=seeds[0])
    t_report = fit(t_model, train_samples, val_samples, t_cfg, log=log)
    feats = teacher_features(t_model, list(train_samples))
    results = []
    for seed in seeds:
        scores = []
        for kd in (0.0, alpha):
            model = build(student, seed=seed)
            cfg = TrainConfig(epochs=student_epochs, batch_size=batch_size, patience=student_epochs,
                              seed=seed, kd_alpha=kd)
            rep = fit(model, train_samples, val_samples, cfg, teacher_features=feats if kd else None, log=log)
            scores.append(rep.best_dice)
        results.append(KDResult(seed, alpha, scores[0], scores[1]))
    return t_report.best_dice, results
