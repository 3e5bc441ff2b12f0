"""Two-stage training (float pretrain, then binary fine-tune), evaluation and ablations."""
from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import config as cfgtext
from .autodiff import Adam, Tape
from .data import gen_dataset, stack
from .exceptions import ConfigError, DivergenceError, ShapeError
from .metrics import ConfusionMatrix, maxf
from .network import Model, ModelConfig, build_model, save_checkpoint
from .rng import SplitMix64, stream_key

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs_float: int = 10
    epochs_binary: int = 10
    batch_size: int = 16
    lr: float = 1e-3
    lr_binary: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    data_seed: int = 0
    n_train: int = 400
    n_val: int = 100
    flip: bool = True
    crop: bool = True
    crop_pad: int = 4
    plateau_patience: int = 2
    plateau_factor: float = 0.5
    min_lr: float = 1e-5

    def __post_init__(self):
        if min(self.epochs_float, self.epochs_binary) < 0:
            raise ConfigError("epoch counts must be non-negative")
        if self.batch_size < 1 or self.n_train < 1 or self.n_val < 0:
            raise ConfigError("batch_size and n_train must be positive, n_val non-negative")
        if self.lr < 0 or self.lr_binary < 0:
            raise ConfigError("learning rates must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ConfigError("Adam needs 0 <= beta < 1 and eps > 0")
        if not 0 < self.plateau_factor <= 1 or self.plateau_patience < 1:
            raise ConfigError("plateau_factor must be in (0, 1] and patience >= 1")
        if self.crop_pad < 0:
            raise ConfigError("crop_pad must be non-negative")


def load_configs(path):
    """Read one config file holding both model and training keys."""
    model_cfg, train_cfg = cfgtext.load_file(path, ModelConfig, TrainConfig)
    return model_cfg, train_cfg


@dataclass
class EpochLog:
    stage: str
    epoch: int
    loss: float
    val_miou: float
    lr: float
    seconds: float

    def line(self) -> str:
        return (f"stage={self.stage} epoch={self.epoch} loss={self.loss:.6f} "
                f"val_miou={self.val_miou:.6f} lr={self.lr:.3g}")


@dataclass
class TrainResult:
    model: Model
    log: List[EpochLog] = field(default_factory=list)

    @property
    def checkpoint(self) -> bytes:
        return save_checkpoint(self.model)

    @property
    def final_miou(self) -> float:
        return self.log[-1].val_miou if self.log else float("nan")

    def log_text(self) -> str:
        return "\n".join(e.line() for e in self.log) + "\n"


def augment(images: np.ndarray, masks: np.ndarray, rng: SplitMix64, flip: bool, crop: bool, pad: int):
    """Per-sample horizontal flip and reflect-padded random crop back to the input size."""
    images, masks = images.copy(), masks.copy()
    n, _, h, w = images.shape
    for i in range(n):
        if flip and rng.random() < 0.5:
            images[i] = images[i, :, :, ::-1]
            masks[i] = masks[i, :, ::-1]
        if crop and pad:
            dy, dx = rng.below(2 * pad + 1), rng.below(2 * pad + 1)
            img = np.pad(images[i], ((0, 0), (pad, pad), (pad, pad)), mode="reflect")
            msk = np.pad(masks[i], ((pad, pad), (pad, pad)), mode="reflect")
            images[i] = img[:, dy:dy + h, dx:dx + w]
            masks[i] = msk[dy:dy + h, dx:dx + w]
    return images, masks


def _step(model: Model, opt: Adam, images, masks) -> float:
    tape = Tape()
    logits = model.run(tape, images, model.context(training=True))
    loss = tape.apply("softmax_ce", logits, masks)
    value = float(loss.value)
    if not np.isfinite(value):
        raise DivergenceError(f"non-finite loss {value}")
    model.store.zero_grad()
    tape.backward(loss, model.store)
    del tape, logits, loss
    opt.step(model.store)
    return value


def _run_stage(model, stage, epochs, lr, tcfg, train, val, rng, history, on_epoch):
    opt = Adam(lr=lr, beta1=tcfg.beta1, beta2=tcfg.beta2, eps=tcfg.eps)
    images, masks = train
    best, stale = -1.0, 0
    for epoch in range(epochs):
        t0 = time.perf_counter()
        order = rng.permutation(len(images))
        losses = []
        for s in range(0, len(order), tcfg.batch_size):
            idx = order[s:s + tcfg.batch_size]
            xb, yb = augment(images[idx], masks[idx], rng, tcfg.flip, tcfg.crop, tcfg.crop_pad)
            losses.append(_step(model, opt, xb, yb))
        score = evaluate(model, *val)["miou"] if len(val[0]) else float("nan")
        entry = EpochLog(stage, epoch, float(np.mean(losses)), score, opt.lr, time.perf_counter() - t0)
        history.append(entry)
        log.info(entry.line())
        if on_epoch:
            on_epoch(entry)
        if np.isnan(score):
            continue
        if score > best:
            best, stale = score, 0
        else:
            stale += 1
            if stale >= tcfg.plateau_patience:
                opt.lr = max(opt.lr * tcfg.plateau_factor, tcfg.min_lr) if opt.lr > 0 else 0.0
                stale = 0


def train(tcfg: TrainConfig, model_cfg: ModelConfig, train_set=None, val_set=None,
          on_epoch=None) -> TrainResult:
    """Stage 1 trains with binarizers off; stage 2 turns them on and keeps the same shadow weights.

    Training and validation sets default to ``gen_dataset`` draws: training
    indices ``0 .. n_train-1`` and validation indices after them, all under
    ``data_seed``.
    """
    if train_set is None:
        train_set = gen_dataset(tcfg.data_seed, tcfg.n_train, model_cfg.height)
    if val_set is None:
        val_set = gen_dataset(tcfg.data_seed, tcfg.n_val, model_cfg.height, start=tcfg.n_train)
    train_arr = stack(train_set)
    val_arr = stack(val_set) if len(val_set) else (np.zeros((0,)), np.zeros((0,)))
    if train_arr[0].shape[1:] != (model_cfg.in_channels, model_cfg.height, model_cfg.width):
        raise ShapeError("training images do not match the model input size")
    model = build_model(dataclasses.replace(model_cfg, binary_active=False))
    rng = SplitMix64(stream_key(tcfg.seed, 1))
    result = TrainResult(model)
    _run_stage(model, "float", tcfg.epochs_float, tcfg.lr, tcfg, train_arr, val_arr, rng, result.log, on_epoch)
    model.set_binary_active(model_cfg.binary_active)
    if model_cfg.binary_active:
        _run_stage(model, "binary", tcfg.epochs_binary, tcfg.lr_binary, tcfg, train_arr, val_arr, rng,
                   result.log, on_epoch)
    return result


def evaluate(model: Model, images, masks, batch_size: int = 25) -> dict:
    """mIoU, per-class IoU and maxF (foreground probability, pooled over all pixels)."""
    images, masks = np.asarray(images), np.asarray(masks)
    if images.shape[0] != masks.shape[0] or images.shape[2:] != masks.shape[1:]:
        raise ShapeError("images and masks disagree in count or size")
    cm = ConfusionMatrix(model.cfg.classes)
    probs = model.predict_proba(images, batch_size)
    cm.update(masks, probs.argmax(axis=1))
    report = {"miou": cm.miou(), "iou": cm.iou().tolist(), "pixels": cm.total}
    if model.cfg.classes == 2:
        report["maxf"] = maxf(probs[:, 1], masks)
    return report


# -- ablations ---------------------------------------------------------------

ABLATIONS = {
    4: [("single-branch K=1", {"K": 1}), ("multi-branch K=4", {"K": 4})],
    5: [("attention off", {"attention": False}), ("attention on", {"attention": True})],
    6: [("float enc / float dec", {"binarize_encoder": False, "binarize_decoder": False}),
        ("binary enc / float dec", {"binarize_encoder": True, "binarize_decoder": False}),
        ("float enc / binary dec", {"binarize_encoder": False, "binarize_decoder": True}),
        ("binary enc / binary dec", {"binarize_encoder": True, "binarize_decoder": True})],
}


@dataclass
class AblationRow:
    label: str
    scores: List[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.scores))


def ablate(table: int, seeds: Sequence[int], tcfg: TrainConfig, model_cfg: ModelConfig,
           on_run=None) -> List[AblationRow]:
    """Train each variant of ``table`` once per seed; the seed drives data, init and shuffling."""
    if table not in ABLATIONS:
        raise ConfigError(f"no ablation table {table}; choose from {sorted(ABLATIONS)}")
    rows = []
    for label, overrides in ABLATIONS[table]:
        scores = []
        for seed in seeds:
            mc = dataclasses.replace(model_cfg, seed=seed, **overrides)
            tc = dataclasses.replace(tcfg, seed=seed, data_seed=seed)
            res = train(tc, mc)
            scores.append(res.final_miou)
            if on_run:
                on_run(label, seed, res)
        rows.append(AblationRow(label, scores))
    return rows
