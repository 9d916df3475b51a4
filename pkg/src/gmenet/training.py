"""Teacher training, attention-similarity distillation and evaluation loops."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional, Union

import numpy as np
import torch
from torch import nn

from .data import PairedDataset
from .errors import AlignmentError, ConfigurationError, TrainingError
from .losses import DEFAULT_LAMBDA_KD, cross_entropy, kd_loss, total_loss
from .network import GMENet, save_checkpoint

__all__ = [
    "Schedule",
    "MetricsLog",
    "EpochSummary",
    "TrainResult",
    "EvaluationReport",
    "make_optimizer",
    "train_supervised",
    "train_teacher",
    "train_student",
    "evaluate",
    "METRICS_SCHEMA_VERSION",
    "REPORT_SCHEMA_VERSION",
]

log = logging.getLogger(__name__)

METRICS_SCHEMA_VERSION = 1
REPORT_SCHEMA_VERSION = 1


@dataclass
class Schedule:
    lr0: float = 0.1
    decay: float = 0.4
    decay_every: int = 20
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 100
    weight_decay: float = 1e-4
    eval_every: int = 1

    def validate(self) -> None:
        if self.lr0 <= 0 or not 0 < self.decay <= 1 or self.decay_every < 1:
            raise ConfigurationError("lr0 > 0, 0 < decay <= 1 and decay_every >= 1 are required")
        if self.batch_size < 1 or self.epochs < 1 or self.eval_every < 1:
            raise ConfigurationError("batch_size, epochs and eval_every must be >= 1")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ConfigurationError("momentum must lie in [0, 1) and weight_decay be >= 0")

    def lr_at(self, epoch: int) -> float:
        """Step decay: lr0 * decay ** (epoch // decay_every), epochs counted from 0."""
        return self.lr0 * self.decay ** (epoch // self.decay_every)


def make_optimizer(params, schedule: Schedule) -> torch.optim.SGD:
    return torch.optim.SGD(
        params, lr=schedule.lr0, momentum=schedule.momentum, weight_decay=schedule.weight_decay
    )


class MetricsLog:
    """Append-only newline-delimited JSON log of per-step and per-epoch records."""

    def __init__(self, path: Optional[Union[str, Path]] = None):
        self.path = Path(path) if path is not None else None
        self.records: list[dict] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, record: dict) -> None:
        record = {"schema_version": METRICS_SCHEMA_VERSION, **record}
        self.records.append(record)
        if self.path is not None:
            with self.path.open("a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def steps(self) -> list[dict]:
        return [r for r in self.records if r.get("kind") == "step"]


@dataclass
class EpochSummary:
    epoch: int
    lr: float
    l_ce: float
    l_kd: Optional[float]
    total: float
    test_accuracy: Optional[float] = None


@dataclass
class TrainResult:
    epochs: list[EpochSummary] = field(default_factory=list)
    last_checkpoint: Optional[Path] = None
    best_checkpoint: Optional[Path] = None
    best_accuracy: Optional[float] = None

    @property
    def final_loss(self) -> float:
        return self.epochs[-1].total


@dataclass
class EvaluationReport:
    overall_accuracy: float
    per_class_accuracy: list[Optional[float]]
    confusion_matrix: list[list[int]]
    sample_count: int
    class_names: Optional[list[str]] = None
    provenance: dict = field(default_factory=dict)

    @classmethod
    def from_predictions(cls, labels, predictions, num_classes: int, **kw) -> "EvaluationReport":
        cm = np.zeros((num_classes, num_classes), dtype=np.int64)
        np.add.at(cm, (np.asarray(labels), np.asarray(predictions)), 1)
        total = int(cm.sum())
        rows = cm.sum(axis=1)
        per_class = [100.0 * cm[i, i] / rows[i] if rows[i] else None for i in range(num_classes)]
        overall = 100.0 * np.trace(cm) / total if total else 0.0
        return cls(float(overall), per_class, cm.tolist(), total, **kw)

    def to_dict(self) -> dict:
        return {"schema_version": REPORT_SCHEMA_VERSION, **asdict(self)}

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


@torch.no_grad()
def evaluate(
    net: GMENet,
    dataset: PairedDataset,
    *,
    use: str = "lr",
    batch_size: int = 256,
    class_names: Optional[list[str]] = None,
    device: Union[str, torch.device] = "cpu",
) -> EvaluationReport:
    """Top-1 accuracy and confusion matrix in a single deterministic pass."""
    was_training = net.training
    net.eval()
    labels, preds = [], []
    try:
        for batch in dataset.batches(batch_size, shuffle=False):
            x = batch.lr_images if use == "lr" else batch.hr_images
            out = net(x.to(device))
            preds.append(out.logits.argmax(dim=1).cpu())
            labels.append(batch.labels)
    finally:
        net.train(was_training)
    return EvaluationReport.from_predictions(
        torch.cat(labels).numpy(), torch.cat(preds).numpy(), net.config.num_classes,
        class_names=class_names,
    )


def _param_snapshot(net: nn.Module) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in net.state_dict().items()}


def _check_alignment(teacher: GMENet, student: GMENet) -> None:
    ts, ss = teacher.state_dict(), student.state_dict()
    if ts.keys() != ss.keys():
        diff = sorted(set(ts) ^ set(ss))
        raise AlignmentError(f"teacher and student architectures differ; mismatched tensors: {diff[:8]}")
    for k in ts:
        if ts[k].shape != ss[k].shape:
            raise AlignmentError(f"{k}: teacher {tuple(ts[k].shape)} vs student {tuple(ss[k].shape)}")


def _run(
    net: GMENet,
    dataset: PairedDataset,
    schedule: Schedule,
    *,
    use: str,
    teacher: Optional[GMENet] = None,
    lambda_kd: float = 0.0,
    seed: int = 0,
    out_dir: Optional[Union[str, Path]] = None,
    metrics: Optional[MetricsLog] = None,
    eval_dataset: Optional[PairedDataset] = None,
    phase: str = "train",
    device: Union[str, torch.device] = "cpu",
    provenance: Optional[dict] = None,
    on_epoch: Optional[Callable[[EpochSummary], None]] = None,
) -> TrainResult:
    schedule.validate()
    if lambda_kd < 0:
        raise ConfigurationError(f"lambda_kd must be nonnegative, got {lambda_kd}")
    if len(dataset) == 0:
        raise TrainingError("training dataset is empty")
    metrics = metrics if metrics is not None else MetricsLog()
    out_dir = Path(out_dir) if out_dir is not None else None
    optimizer = make_optimizer(net.parameters(), schedule)
    result = TrainResult()
    step = 0
    net.to(device).train()
    for epoch in range(schedule.epochs):
        lr = schedule.lr_at(epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        sums = {"l_ce": 0.0, "l_kd": 0.0, "total": 0.0}
        n_seen = 0
        for b_idx, batch in enumerate(dataset.batches(schedule.batch_size, epoch)):
            x = (batch.lr_images if use == "lr" else batch.hr_images).to(device)
            labels = batch.labels.to(device)
            out = net(x)
            l_ce = cross_entropy(out.logits, labels)
            if teacher is not None:
                with torch.no_grad():
                    t_out = teacher(batch.hr_images.to(device))
                if lambda_kd == 0:
                    # keep the kd term out of the graph so the update equals plain supervised training
                    with torch.no_grad():
                        l_kd, per_block = kd_loss(t_out.attention_maps, out.attention_maps)
                    loss = total_loss(l_ce, l_kd, 0.0, per_block)
                    loss.total = l_ce
                else:
                    l_kd, per_block = kd_loss(t_out.attention_maps, out.attention_maps)
                    loss = total_loss(l_ce, l_kd, lambda_kd, per_block)
                kd_value: Optional[float] = float(loss.l_kd.detach())
            else:
                loss = total_loss(l_ce, torch.zeros((), dtype=l_ce.dtype), 0.0)
                kd_value = None
            total_value = float(loss.total.detach())
            if not math.isfinite(total_value):
                if out_dir is not None:
                    out_dir.mkdir(parents=True, exist_ok=True)
                    (out_dir / "nonfinite_batch.json").write_text(json.dumps({
                        "epoch": epoch, "batch_index": b_idx, "record_indices": batch.indices,
                        "l_ce": float(l_ce.detach()), "l_kd": kd_value,
                    }))
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch {b_idx} (records {batch.indices[:8]}...)"
                )
            optimizer.zero_grad(set_to_none=True)
            loss.total.backward()
            optimizer.step()

            rec = {
                "kind": "step", "phase": phase, "epoch": epoch, "step": step, "lr": lr,
                "l_ce": float(l_ce.detach()), "l_kd": kd_value, "total": total_value,
            }
            if teacher is not None:
                rec["per_block_kd"] = [float(v.detach()) for v in loss.per_block_kd]
            metrics.write(rec)
            n = len(batch)
            sums["l_ce"] += float(l_ce.detach()) * n
            sums["l_kd"] += (kd_value or 0.0) * n
            sums["total"] += total_value * n
            n_seen += n
            step += 1

        summary = EpochSummary(
            epoch=epoch, lr=lr,
            l_ce=sums["l_ce"] / n_seen,
            l_kd=sums["l_kd"] / n_seen if teacher is not None else None,
            total=sums["total"] / n_seen,
        )
        last_epoch = epoch == schedule.epochs - 1
        if eval_dataset is not None and ((epoch + 1) % schedule.eval_every == 0 or last_epoch):
            summary.test_accuracy = evaluate(net, eval_dataset, use=use, device=device).overall_accuracy
        result.epochs.append(summary)
        metrics.write({"kind": "epoch", "phase": phase, **asdict(summary)})
        log.info("%s epoch %d: %s", phase, epoch, summary)
        if on_epoch is not None:
            on_epoch(summary)

        if out_dir is not None:
            ckpt_meta = dict(seed=seed, epoch=epoch, metrics=asdict(summary), provenance=provenance)
            result.last_checkpoint = save_checkpoint(out_dir / "last.pt", net, **ckpt_meta)
            acc = summary.test_accuracy
            if acc is not None and (result.best_accuracy is None or acc > result.best_accuracy):
                result.best_accuracy = acc
                result.best_checkpoint = save_checkpoint(out_dir / "best.pt", net, **ckpt_meta)
        elif summary.test_accuracy is not None:
            if result.best_accuracy is None or summary.test_accuracy > result.best_accuracy:
                result.best_accuracy = summary.test_accuracy
    return result


def train_supervised(
    net: GMENet,
    dataset: PairedDataset,
    schedule: Schedule,
    *,
    use: str = "hr",
    **kw: Any,
) -> TrainResult:
    """Cross-entropy-only training on the HR (``use="hr"``) or prepared LR images."""
    if use not in ("hr", "lr"):
        raise ConfigurationError(f"use must be 'hr' or 'lr', got {use!r}")
    kw.setdefault("phase", f"supervised-{use}")
    return _run(net, dataset, schedule, use=use, **kw)


def train_teacher(net: GMENet, dataset: PairedDataset, schedule: Schedule, **kw: Any) -> TrainResult:
    kw.setdefault("phase", "teacher")
    return train_supervised(net, dataset, schedule, use="hr", **kw)


def train_student(
    student: GMENet,
    teacher: GMENet,
    dataset: PairedDataset,
    schedule: Schedule,
    *,
    lambda_kd: float = DEFAULT_LAMBDA_KD,
    **kw: Any,
) -> TrainResult:
    """Distil a frozen teacher's attention maps into the student.

    The teacher sees HR images, the student the prepared LR images. Teacher
    parameters and buffers are checked to be bit-identical afterwards.
    """
    _check_alignment(teacher, student)
    if teacher.num_attention_blocks == 0:
        raise AlignmentError("distillation needs attention blocks; this architecture has none")
    before = _param_snapshot(teacher)
    flags = [p.requires_grad for p in teacher.parameters()]
    was_training = teacher.training
    teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    kw.setdefault("phase", "student")
    try:
        result = _run(student, dataset, schedule, use="lr", teacher=teacher, lambda_kd=lambda_kd, **kw)
    finally:
        for p, f in zip(teacher.parameters(), flags):
            p.requires_grad_(f)
        teacher.train(was_training)
    after = teacher.state_dict()
    for k, v in before.items():
        if not torch.equal(v, after[k]):
            raise TrainingError(f"frozen teacher tensor {k!r} changed during distillation")
    return result
