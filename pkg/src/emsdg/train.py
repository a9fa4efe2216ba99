"""Single-source training: weighted CE, SGD + momentum, exponential LR decay,
gradient accumulation and source-validation model selection."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
import torch

from .data import Sample, stack
from .em import EMConfig
from .evaluation import confusion, macro_metrics, one_vs_all_from_confusion
from .net import (EncoderConfig, ParameterSet, TrainingStepError, clone_params, encoder_forward,
                  init_params, is_buffer, loss_and_grads, weighted_cross_entropy)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr0: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    lr_decay: float = 0.05
    epochs: int = 30
    physical_batch: int = 2
    effective_batch: int = 16
    val_fraction: float = 0.2
    class_weights: str = "inverse"
    seed: int = 0

    def __post_init__(self):
        if self.physical_batch < 1 or self.effective_batch % self.physical_batch:
            raise ValueError(f"train.effective_batch ({self.effective_batch}) must be a multiple "
                             f"of train.physical_batch ({self.physical_batch})")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError(f"train.val_fraction must lie in (0, 1), got {self.val_fraction}")
        if not 0.0 <= self.lr_decay < 1.0:
            raise ValueError(f"train.lr_decay must lie in [0, 1), got {self.lr_decay}")
        if self.class_weights not in ("inverse", "uniform"):
            raise ValueError("train.class_weights must be 'inverse' or 'uniform'")
        if self.epochs < 1:
            raise ValueError("train.epochs must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    val_acc: float
    val_sen: float
    val_spe: float
    val_f1: float
    steps: int


@dataclass
class RunRecord:
    epochs: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_f1: float = float("nan")
    best_val_loss: float = float("nan")
    targets: dict = field(default_factory=dict)
    diverged: bool = False
    error: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def mean_target_f1(self) -> float:
        return float(np.mean([t["multiclass"]["f1"] for t in self.targets.values()]))


class TrainingDivergence(RuntimeError):
    def __init__(self, record: RunRecord, cause: TrainingStepError):
        self.record = record
        self.tensor_name = cause.tensor_name
        super().__init__(str(cause))


EPOCH_HEADER = ["epoch", "lr", "train_loss", "val_loss", "val_acc", "val_sen", "val_spe",
                "val_f1", "steps"]


def write_epoch_csv(record: RunRecord, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EPOCH_HEADER)
        for e in record.epochs:
            w.writerow([e.epoch, f"{e.lr:.8g}", f"{e.train_loss:.6f}", f"{e.val_loss:.6f}",
                        f"{e.val_acc:.4f}", f"{e.val_sen:.4f}", f"{e.val_spe:.4f}",
                        f"{e.val_f1:.4f}", e.steps])


def lr_at_epoch(e: int, cfg: TrainConfig) -> float:
    if e < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.lr0 * (1.0 - cfg.lr_decay) ** e


def class_weights_from_labels(labels, K: int) -> np.ndarray:
    """Inverse-frequency weights scaled so that sum_c w_c * freq_c = 1.

    Classes absent from ``labels`` get weight 1; they never enter the loss.
    """
    labels = np.asarray(labels, dtype=np.int64)
    freq = np.bincount(labels, minlength=K).astype(np.float64) / labels.size
    present = freq > 0
    w = np.ones(K)
    w[present] = 1.0 / freq[present]
    w[present] /= np.sum(freq[present] * w[present])
    return w


def sgd_step(params: ParameterSet, grads: Mapping[str, torch.Tensor],
             velocity: Mapping[str, torch.Tensor], lr: float,
             cfg: TrainConfig) -> tuple[ParameterSet, dict]:
    """v <- momentum * v + (g + wd * w);  w <- w - lr * v.  Buffers pass through."""
    new_params, new_vel = {}, {}
    for name, w in params.items():
        if is_buffer(name):
            new_params[name] = w
            continue
        g = grads[name]
        if g.shape != w.shape:
            raise ValueError(f"gradient for {name} has shape {tuple(g.shape)}, expected {tuple(w.shape)}")
        v = velocity.get(name)
        d = g + cfg.weight_decay * w
        v = d if v is None else cfg.momentum * v + d
        nw = w - lr * v
        if not bool(torch.isfinite(nw).all()):
            raise TrainingStepError(name, f"non-finite update for {name}")
        new_params[name] = nw
        new_vel[name] = v
    return new_params, new_vel


def stratified_split(labels, val_fraction: float, rng: np.random.Generator):
    labels = np.asarray(labels)
    train_idx, val_idx = [], []
    for k in np.unique(labels):
        idx = np.flatnonzero(labels == k)
        idx = idx[rng.permutation(idx.size)]
        n_val = int(round(idx.size * val_fraction))
        if idx.size >= 2:
            n_val = min(max(n_val, 1), idx.size - 1)
        val_idx.extend(idx[:n_val].tolist())
        train_idx.extend(idx[n_val:].tolist())
    return np.sort(np.asarray(train_idx, dtype=np.int64)), np.sort(np.asarray(val_idx, dtype=np.int64))


@torch.no_grad()
def predict(x: torch.Tensor, params: ParameterSet, enc_cfg: EncoderConfig,
            batch_size: int = 16) -> tuple[np.ndarray, torch.Tensor, torch.Tensor]:
    """Eval-mode predictions, logits and embeddings."""
    logits, embs = [], []
    for i in range(0, x.shape[0], batch_size):
        out = encoder_forward(x[i:i + batch_size], params, enc_cfg, mode="eval")
        logits.append(out.logits)
        embs.append(out.embedding)
    logits = torch.cat(logits)
    return logits.argmax(dim=1).numpy(), logits, torch.cat(embs)


def evaluate_samples(samples: Sequence[Sample], params: ParameterSet, enc_cfg: EncoderConfig,
                     positive: int) -> dict:
    x, y = stack(samples)
    preds, _, _ = predict(torch.from_numpy(x), params, enc_cfg)
    cm = confusion(y, preds, enc_cfg.num_classes)
    return {"multiclass": macro_metrics(cm).to_dict(),
            "one_vs_all": one_vs_all_from_confusion(cm, positive).to_dict(),
            "confusion": cm.tolist(), "n": int(y.size)}


def _streams(seed: int):
    init, split, shuffle, em = np.random.SeedSequence(seed).spawn(4)
    return (int(init.generate_state(1)[0]), np.random.default_rng(split),
            np.random.default_rng(shuffle), np.random.default_rng(em))


def fit(source: Sequence[Sample], targets: Mapping[str, Sequence[Sample]],
        enc_cfg: EncoderConfig, em_cfg: Optional[EMConfig], cfg: TrainConfig,
        positive: int = 2, dtype=torch.float32,
        init: Optional[ParameterSet] = None) -> tuple[RunRecord, ParameterSet]:
    """Train on ``source`` only; evaluate the selected checkpoint on each target.

    Returns the run record and the best (source-validation macro-F1) parameters.
    Targets are only touched after the training loop has finished.
    """
    init_seed, split_rng, shuffle_rng, em_rng = _streams(cfg.seed)
    x_all, y_all = stack(source)
    tr, va = stratified_split(y_all, cfg.val_fraction, split_rng)
    x_tr = torch.from_numpy(x_all[tr]).to(dtype)
    y_tr = y_all[tr]
    x_va = torch.from_numpy(x_all[va]).to(dtype)
    y_va = y_all[va]
    K = enc_cfg.num_classes
    if cfg.class_weights == "inverse":
        weights = torch.as_tensor(class_weights_from_labels(y_tr, K), dtype=dtype)
    else:
        weights = None

    params = init_params(enc_cfg, init_seed, dtype) if init is None else clone_params(init)
    velocity: dict = {}
    record = RunRecord()
    best = clone_params(params)
    scale = cfg.physical_batch / cfg.effective_batch
    micro_per_step = cfg.effective_batch // cfg.physical_batch

    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(epoch, cfg)
        order = shuffle_rng.permutation(len(y_tr))
        acc: dict = {}
        n_micro = 0
        steps = 0
        total_loss = 0.0
        try:
            for start in range(0, len(order), cfg.physical_batch):
                idx = order[start:start + cfg.physical_batch]
                loss, grads = loss_and_grads(x_tr[idx], y_tr[idx], params, enc_cfg, em_cfg,
                                             "train", em_rng, weights, scale=scale)
                total_loss += loss / scale * len(idx)
                for n, g in grads.items():
                    acc[n] = g if n not in acc else acc[n] + g
                n_micro += 1
                if n_micro == micro_per_step or start + cfg.physical_batch >= len(order):
                    params, velocity = sgd_step(params, acc, velocity, lr, cfg)
                    acc, n_micro = {}, 0
                    steps += 1
        except TrainingStepError as exc:
            record.diverged = True
            record.error = f"epoch {epoch}: {exc}"
            log.error("training diverged: %s", record.error)
            raise TrainingDivergence(record, exc) from exc

        preds, logits, _ = predict(x_va, params, enc_cfg)
        with torch.no_grad():
            val_loss = float(weighted_cross_entropy(logits, y_va, weights))
        rep = macro_metrics(confusion(y_va, preds, K))
        record.epochs.append(EpochRecord(epoch, lr, total_loss / len(y_tr), val_loss,
                                         rep.accuracy, rep.sensitivity, rep.specificity,
                                         rep.f1, steps))
        log.info("epoch %d lr %.5f train %.4f val %.4f f1 %.4f", epoch, lr,
                 total_loss / len(y_tr), val_loss, rep.f1)
        # macro-F1 on a small split ties often; lower validation loss breaks ties
        if (record.best_epoch < 0 or rep.f1 > record.best_val_f1
                or (rep.f1 == record.best_val_f1 and val_loss < record.best_val_loss)):
            record.best_epoch, record.best_val_f1, record.best_val_loss = epoch, rep.f1, val_loss
            best = clone_params(params)

    for name, samples in targets.items():
        record.targets[name] = evaluate_samples(samples, best, enc_cfg, positive)
    return record, best
