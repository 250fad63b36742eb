"""Optimization loop, evaluation, adversarial attacks, and protocols.

A run is a pure function of its RunConfig: dataset generation, model
init, batch order, dropout, and codebook revival all draw from seeds
derived from cfg.seed, so identical configs give identical checkpoints
and metric rows.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .controller import ema_update
from .data import SampleBatch, build_dataset
from .errors import ConfigError, ContractError, NumericsError
from .losses import (LossBreakdown, bce_binary, ce_multiclass, recon_loss,
                     total_loss)
from .model import AsacModel, ModelConfig

MODES = ("train", "eval", "attack", "transfer", "fewshot", "efficiency")
ATTACK_KINDS = ("fgsm", "pgd")

CSV_COLUMNS = ("run_id", "mode", "split", "epoch", "task_loss", "recon_loss",
               "vq_loss", "total_loss", "accuracy", "precision", "recall",
               "f1", "epsilon", "fraction", "wall_ms")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    dataset: str = "triangles"
    train_samples: int = 2000
    test_samples: int = 500
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    aux_weight: float = 0.01
    seed: int = 0
    mode: str = "train"
    attack_kinds: tuple = ATTACK_KINDS
    epsilons: tuple = (0.01, 0.03, 0.05, 0.1)
    pgd_steps: int = 10
    pgd_alpha: float = 0.0          # 0 means epsilon / 4
    data_fractions: tuple = (0.10, 0.25, 0.50, 1.00)
    fewshot_fractions: tuple = (0.01, 0.05, 0.10, 0.25)
    source_dataset: str = ""
    pretrain_epochs: int = 10
    finetune_epochs: int = 5
    early_stop_patience: int = 0     # 0 disables early stopping

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        for kind in self.attack_kinds:
            if kind not in ATTACK_KINDS:
                raise ConfigError(f"unknown attack kind {kind!r}")
        if self.pgd_steps < 1:
            raise ConfigError("pgd_steps must be >= 1")


@dataclass
class RunRecord:
    run_id: str
    seed: int
    config_hash: str
    rows: list = field(default_factory=list)


def config_hash(cfg: RunConfig) -> str:
    blob = json.dumps(asdict(cfg), sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def run_id(cfg: RunConfig) -> str:
    return f"{cfg.mode}-{cfg.dataset}-s{cfg.seed}"


def metric_row(rid: str, mode: str, split: str, epoch: int, values: dict,
         epsilon=None, fraction=None, wall_ms: float = 0.0) -> dict:
    row = {"run_id": rid, "mode": mode, "split": split, "epoch": epoch,
           "epsilon": epsilon, "fraction": fraction, "wall_ms": wall_ms}
    row.update(values)
    return row


# -- metrics ---------------------------------------------------------------------


def predictions(cfg: ModelConfig, logits: np.ndarray) -> np.ndarray:
    if cfg.head == "multiclass":
        return np.argmax(logits, axis=1)
    if cfg.head == "binary":
        return (logits.reshape(-1) > 0.0).astype(np.int64)
    return (logits > 0.0).astype(np.int64)


def classification_metrics(preds: np.ndarray, labels: np.ndarray,
                           num_classes: int, multilabel: bool = False) -> dict:
    """Accuracy plus macro precision/recall/F1 from confusion counts."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise ContractError(f"predictions {preds.shape} vs labels {labels.shape}")
    accuracy = float((preds == labels).mean())
    ps, rs, fs = [], [], []
    for c in range(num_classes):
        if multilabel:
            hit, want = preds[:, c] == 1, labels[:, c] == 1
        else:
            hit, want = preds == c, labels == c
        tp = float(np.sum(hit & want))
        fp = float(np.sum(hit & ~want))
        fn = float(np.sum(~hit & want))
        p = tp / (tp + fp) if tp + fp > 0 else 0.0
        r = tp / (tp + fn) if tp + fn > 0 else 0.0
        f = 2 * p * r / (p + r) if p + r > 0 else 0.0
        ps.append(p)
        rs.append(r)
        fs.append(f)
    return {"accuracy": accuracy, "precision": float(np.mean(ps)),
            "recall": float(np.mean(rs)), "f1": float(np.mean(fs))}


def _metric_classes(cfg: ModelConfig):
    if cfg.head == "binary":
        return 2, False
    return cfg.num_classes, cfg.head == "multilabel"


# -- loss composition ------------------------------------------------------------


def task_loss_fn(cfg: ModelConfig, logits: T.Tensor, labels: np.ndarray) -> T.Tensor:
    if cfg.head == "multiclass":
        return ce_multiclass(logits, labels)
    return bce_binary(logits, labels)


def compute_losses(model: AsacModel, images, labels, task_ids=None,
                   aux_weight: float = 0.01, training: bool = False,
                   rng=None, frozen=None):
    """Forward pass plus the full objective breakdown."""
    out = model.forward(images, task_ids, training=training, rng=rng,
                        frozen=frozen)
    task = task_loss_fn(model.cfg, out.logits, labels)
    recon = recon_loss(out.recon_pairs())
    vqs = [t.vq for t in out.traces if t.vq is not None]
    if vqs:
        vq = vqs[0]
        for term in vqs[1:]:
            vq = vq + term
        vq = vq * (1.0 / len(vqs))
    else:
        vq = T.constant(0.0)
    return out, total_loss(task, recon, vq, aux_weight)


def _check_batch(model: AsacModel, batch: SampleBatch):
    cfg = model.cfg
    want = (cfg.channels, cfg.image_size, cfg.image_size)
    if batch.images.ndim != 4 or batch.images.shape[1:] != want:
        raise ContractError(f"batch images {batch.images.shape} incompatible "
                            f"with model input {want}")
    if cfg.head == "multilabel":
        if batch.labels.ndim != 2 or batch.labels.shape[1] != cfg.num_classes:
            raise ContractError("multilabel head expects [n, classes] labels")
    elif batch.labels.ndim != 1:
        raise ContractError("single-label head expects [n] labels")


def evaluate(model: AsacModel, batch: SampleBatch,
             aux_weight: float = 0.01, batch_size: int = 64) -> dict:
    """Metrics over a batch; dropout off, codebook untouched."""
    _check_batch(model, batch)
    n = len(batch)
    sums = {"task_loss": 0.0, "recon_loss": 0.0, "vq_loss": 0.0,
            "total_loss": 0.0}
    preds = []
    with T.no_grad():
        for start in range(0, n, batch_size):
            sub = batch.subset(np.arange(start, min(start + batch_size, n)))
            out, bd = compute_losses(model, sub.images, sub.labels,
                                     sub.task_ids, aux_weight, training=False)
            k = len(sub)
            for key, value in bd.values().items():
                sums[key] += value * k
            preds.append(predictions(model.cfg, out.logits.data))
    values = {key: value / n for key, value in sums.items()}
    classes, multi = _metric_classes(model.cfg)
    values.update(classification_metrics(np.concatenate(preds), batch.labels,
                                         classes, multi))
    return values


# -- optimizer -------------------------------------------------------------------


class AdamW:
    """Adam with decoupled weight decay applied to every parameter."""

    def __init__(self, params: dict, learning_rate: float,
                 weight_decay: float = 0.01, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.names = sorted(params)
        self.lr = learning_rate
        self.wd = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {n: np.zeros_like(params[n].data) for n in self.names}
        self.v = {n: np.zeros_like(params[n].data) for n in self.names}
        self.t = 0

    def zero_grad(self):
        for name in self.names:
            self.params[name].grad = None

    def step(self):
        self.t += 1
        bias1 = 1.0 - self.beta1 ** self.t
        bias2 = 1.0 - self.beta2 ** self.t
        for name in self.names:
            p = self.params[name]
            g = p.grad if p.grad is not None else 0.0
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * (g * g)
            step = (self.m[name] / bias1) / (np.sqrt(self.v[name] / bias2) + self.eps)
            p.data = p.data - self.lr * (step + self.wd * p.data)


# -- training --------------------------------------------------------------------


def _build_split(cfg: RunConfig, split: str) -> SampleBatch:
    n = cfg.train_samples if split == "train" else cfg.test_samples
    return build_dataset(cfg.dataset, split, n, cfg.seed, cfg.model.image_size)


def train(cfg: RunConfig, train_batch: SampleBatch | None = None,
          test_batch: SampleBatch | None = None,
          model: AsacModel | None = None, run_suffix: str = ""):
    """Train (or fine-tune) a model; returns (model, RunRecord)."""
    if train_batch is None:
        train_batch = _build_split(cfg, "train")
    if test_batch is None:
        test_batch = _build_split(cfg, "test")
    if model is None:
        model = AsacModel(cfg.model, seed=cfg.seed)
    _check_batch(model, train_batch)
    _check_batch(model, test_batch)

    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0x7E41)))
    opt = AdamW(model.parameters(), cfg.learning_rate, cfg.weight_decay)
    rid = run_id(cfg) + run_suffix
    record = RunRecord(run_id=rid, seed=cfg.seed, config_hash=config_hash(cfg))
    classes, multi = _metric_classes(model.cfg)
    n = len(train_batch)
    best, stale = np.inf, 0

    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        perm = rng.permutation(n)
        sums = {"task_loss": 0.0, "recon_loss": 0.0, "vq_loss": 0.0,
                "total_loss": 0.0}
        preds, seen = [], []
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            sub = train_batch.subset(idx)
            out, bd = compute_losses(model, sub.images, sub.labels,
                                     sub.task_ids, cfg.aux_weight,
                                     training=True, rng=rng)
            bad = bd.first_nonfinite()
            if bad is not None:
                raise NumericsError(f"non-finite {bad} at epoch {epoch}, "
                                    f"step {start // cfg.batch_size}")
            opt.zero_grad()
            bd.total.backward()
            opt.step()
            for trace, ctrl in zip(out.traces, model.controllers()):
                ema_update(ctrl.codebook, trace.encoded.data, trace.indices, rng)
            k = len(idx)
            for key, value in bd.values().items():
                sums[key] += value * k
            preds.append(predictions(model.cfg, out.logits.data))
            seen.append(sub.labels)
        values = {key: value / n for key, value in sums.items()}
        values.update(classification_metrics(np.concatenate(preds),
                                             np.concatenate(seen), classes, multi))
        record.rows.append(metric_row(rid, cfg.mode, "train", epoch, values,
                                wall_ms=(time.perf_counter() - t0) * 1e3))

        t1 = time.perf_counter()
        ev = evaluate(model, test_batch, cfg.aux_weight, cfg.batch_size)
        record.rows.append(metric_row(rid, cfg.mode, "test", epoch, ev,
                                wall_ms=(time.perf_counter() - t1) * 1e3))

        if cfg.early_stop_patience > 0:
            if ev["total_loss"] < best - 1e-12:
                best, stale = ev["total_loss"], 0
            else:
                stale += 1
                if stale >= cfg.early_stop_patience:
                    break
    return model, record


# -- adversarial attacks ---------------------------------------------------------


def input_task_gradient(model: AsacModel, images: np.ndarray,
                        labels: np.ndarray, task_ids=None) -> np.ndarray:
    """Gradient of the classification loss w.r.t. the input pixels."""
    x = T.Tensor(np.array(images, dtype=np.float64), requires_grad=True)
    out = model.forward(x, task_ids, training=False)
    task_loss_fn(model.cfg, out.logits, labels).backward()
    return x.grad


def fgsm_attack(model: AsacModel, batch: SampleBatch,
                epsilon: float) -> SampleBatch:
    """x + epsilon * sign(grad), clamped to [0, 1]; labels unchanged."""
    if epsilon < 0:
        raise ContractError(f"epsilon {epsilon} must be >= 0")
    grad = input_task_gradient(model, batch.images, batch.labels, batch.task_ids)
    adv = np.clip(batch.images + epsilon * np.sign(grad), 0.0, 1.0)
    return SampleBatch(adv, batch.labels, batch.task_ids, batch.meta)


def pgd_attack(model: AsacModel, batch: SampleBatch, epsilon: float,
               steps: int = 10, alpha: float | None = None) -> SampleBatch:
    """Iterated signed steps, each clamped to [0, 1] and projected back
    into the epsilon max-norm ball around the clean input."""
    if epsilon < 0:
        raise ContractError(f"epsilon {epsilon} must be >= 0")
    if steps < 1:
        raise ContractError(f"steps {steps} must be >= 1")
    if alpha is None or alpha == 0.0:
        alpha = epsilon / 4.0
    x0 = batch.images
    x = x0.copy()
    for _ in range(steps):
        grad = input_task_gradient(model, x, batch.labels, batch.task_ids)
        x = np.clip(x + alpha * np.sign(grad), 0.0, 1.0)
        x = np.clip(x, x0 - epsilon, x0 + epsilon)
    return SampleBatch(x, batch.labels, batch.task_ids, batch.meta)


def attack_sweep(model: AsacModel, batch: SampleBatch,
                 cfg: RunConfig) -> RunRecord:
    """Clean row plus one row per (attack kind, epsilon)."""
    rid = run_id(cfg)
    record = RunRecord(run_id=rid, seed=cfg.seed, config_hash=config_hash(cfg))
    t0 = time.perf_counter()
    clean = evaluate(model, batch, cfg.aux_weight, cfg.batch_size)
    record.rows.append(metric_row(rid, "attack", "clean", 0, clean,
                            wall_ms=(time.perf_counter() - t0) * 1e3))
    for kind in cfg.attack_kinds:
        for eps in cfg.epsilons:
            t0 = time.perf_counter()
            if kind == "fgsm":
                adv = fgsm_attack(model, batch, eps)
            else:
                adv = pgd_attack(model, batch, eps, cfg.pgd_steps,
                                 cfg.pgd_alpha or None)
            values = evaluate(model, adv, cfg.aux_weight, cfg.batch_size)
            record.rows.append(metric_row(rid, "attack", kind, 0, values,
                                    epsilon=eps,
                                    wall_ms=(time.perf_counter() - t0) * 1e3))
    return record


# -- experiment protocols --------------------------------------------------------


def stratified_indices(labels: np.ndarray, fraction: float,
                       seed: int) -> np.ndarray:
    """Class-stratified sample; smaller fractions are prefixes of
    larger ones under the same seed."""
    if not 0.0 < fraction <= 1.0:
        raise ContractError(f"fraction {fraction} outside (0, 1]")
    labels = np.asarray(labels)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x57A7)))
    picked = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        order = idx[rng.permutation(idx.size)]
        k = int(round(fraction * idx.size))
        if k < 1:
            raise ContractError(f"fraction {fraction} yields no samples "
                                f"for class {c}")
        picked.append(order[:k])
    return np.sort(np.concatenate(picked))


def protocol_efficiency(cfg: RunConfig, train_batch: SampleBatch | None = None,
                        test_batch: SampleBatch | None = None) -> list:
    """Fresh run per data fraction, all class-stratified by cfg.seed."""
    if train_batch is None:
        train_batch = _build_split(cfg, "train")
    if test_batch is None:
        test_batch = _build_split(cfg, "test")
    records = []
    for fraction in cfg.data_fractions:
        idx = stratified_indices(train_batch.labels, fraction, cfg.seed)
        suffix = f"-frac{int(round(fraction * 100))}"
        _, record = train(cfg, train_batch.subset(idx), test_batch,
                          run_suffix=suffix)
        for row in record.rows:
            row["fraction"] = fraction
        records.append(record)
    return records


def _pretrain(cfg: RunConfig):
    if not cfg.source_dataset:
        raise ConfigError(f"mode {cfg.mode!r} needs source_dataset")
    pre_cfg = replace(cfg, dataset=cfg.source_dataset,
                      epochs=cfg.pretrain_epochs)
    source_test = _build_split(pre_cfg, "test")
    model, record = train(pre_cfg, _build_split(pre_cfg, "train"), source_test,
                          run_suffix="-pretrain")
    return model, record, source_test


def protocol_transfer(cfg: RunConfig):
    """Pretrain on the source dataset, fine-tune all weights on the
    target; returns (model, [pretrain record, finetune record])."""
    model, rec_pre, source_test = _pretrain(cfg)
    bridge = evaluate(model, source_test, cfg.aux_weight, cfg.batch_size)
    fine_cfg = replace(cfg, epochs=cfg.finetune_epochs)
    model, rec_fine = train(fine_cfg, _build_split(cfg, "train"),
                            _build_split(cfg, "test"), model=model,
                            run_suffix="-finetune")
    rec_fine.rows.insert(0, metric_row(rec_fine.run_id, cfg.mode, "source_test", 0,
                                 bridge))
    return model, [rec_pre, rec_fine]


def protocol_fewshot(cfg: RunConfig) -> list:
    """Pretrain once, then fine-tune a copy on nested stratified
    fractions of the target training split."""
    pretrained, rec_pre, _ = _pretrain(cfg)
    target_train = _build_split(cfg, "train")
    target_test = _build_split(cfg, "test")
    fine_cfg = replace(cfg, epochs=cfg.finetune_epochs)
    records = [rec_pre]
    for fraction in cfg.fewshot_fractions:
        idx = stratified_indices(target_train.labels, fraction, cfg.seed)
        suffix = f"-shot{int(round(fraction * 100))}"
        _, record = train(fine_cfg, target_train.subset(idx), target_test,
                          model=copy.deepcopy(pretrained), run_suffix=suffix)
        for row in record.rows:
            row["fraction"] = fraction
        records.append(record)
    return records


# -- metrics csv -----------------------------------------------------------------


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_metrics_csv(records, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for record in records:
            for row in record.rows:
                writer.writerow([_format_cell(row.get(col))
                                 for col in CSV_COLUMNS])
