"""Run configuration and the command implementations behind the CLI.

Every command takes a resolved :class:`RunConfig` and writes its artifacts
under ``config.output_dir``; each artifact embeds the full config and seed.
"""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
import os
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence, Union

import torch
import yaml

from .data import DatasetManifest, PairedDataset, generate_lr_dataset, lr_root_for, scan_source
from .degradation import DegradationSpec
from .errors import AlignmentError, ConfigurationError, GMENetError
from .network import (
    AblationConfig,
    NetworkConfig,
    build_network,
    count_parameters,
    load_checkpoint,
    network_from_checkpoint,
    save_checkpoint,
)
from .training import (
    EvaluationReport,
    MetricsLog,
    Schedule,
    evaluate,
    train_student,
    train_supervised,
    train_teacher,
)

__all__ = [
    "RunConfig",
    "load_config",
    "apply_overrides",
    "resolve_device",
    "cmd_prepare_data",
    "cmd_train_teacher",
    "cmd_distill_student",
    "cmd_evaluate",
    "cmd_ablation",
    "ABLATION_ROWS",
    "AblationRow",
]

log = logging.getLogger(__name__)

DEVICE_ENV = "GMENET_DEVICE"


@dataclass
class DataConfig:
    source: str = "data/raw"
    hr_size: int = 112
    test_fraction: float = 0.1
    class_names: Optional[list[str]] = None
    degradation: DegradationSpec = field(default_factory=DegradationSpec)
    manifest: Optional[str] = None
    augment: bool = True
    missing: str = "fail"
    workers: int = 1


@dataclass
class DistillConfig:
    lambda_kd: float = 5.0
    teacher_checkpoint: Optional[str] = None


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    precision: int = 32
    network: NetworkConfig = field(default_factory=NetworkConfig)
    schedule: Schedule = field(default_factory=Schedule)
    distill: DistillConfig = field(default_factory=DistillConfig)
    data: DataConfig = field(default_factory=DataConfig)
    overrides: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["network"] = self.network.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RunConfig":
        d = copy.deepcopy(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        data = d.pop("data", {}) or {}
        deg = DegradationSpec(**(data.pop("degradation", {}) or {}))
        try:
            return cls(
                network=NetworkConfig.from_dict(d.pop("network", {}) or {}),
                schedule=Schedule(**(d.pop("schedule", {}) or {})),
                distill=DistillConfig(**(d.pop("distill", {}) or {})),
                data=DataConfig(degradation=deg, **data),
                **d,
            )
        except TypeError as exc:
            raise ConfigurationError(f"invalid config: {exc}") from None

    def validate(self) -> None:
        if self.precision not in (32, 64):
            raise ConfigurationError(f"precision must be 32 or 64, got {self.precision}")
        self.network.validate()
        self.schedule.validate()
        self.data.degradation.validate()
        if self.distill.lambda_kd < 0:
            raise ConfigurationError("distill.lambda_kd must be nonnegative")
        if tuple(self.network.input_size) != (self.data.hr_size, self.data.hr_size):
            raise ConfigurationError(
                f"network.input_size {list(self.network.input_size)} must equal "
                f"(data.hr_size, data.hr_size) = ({self.data.hr_size}, {self.data.hr_size})"
            )

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    @property
    def manifest_path(self) -> Path:
        if self.data.manifest:
            return Path(self.data.manifest)
        return self.out / f"manifest_lr{self.data.degradation.target_size}.jsonl"

    def provenance(self) -> dict[str, Any]:
        return {"config": self.to_dict(), "seed": self.seed, "overrides": list(self.overrides)}


def _set_path(tree: dict, dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = tree
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            raise ConfigurationError(f"override {dotted!r}: {k!r} is not a config section")
        node = node[k]
    if keys[-1] not in node:
        raise ConfigurationError(f"override {dotted!r}: unknown key {keys[-1]!r}")
    node[keys[-1]] = value


def apply_overrides(config: RunConfig, overrides: Sequence[str]) -> RunConfig:
    """Apply ``key.path=value`` overrides; values are parsed as YAML scalars or lists."""
    tree = config.to_dict()
    applied = list(tree.pop("overrides", []))
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        _set_path(tree, key.strip(), yaml.safe_load(raw))
        applied.append(item)
    new = RunConfig.from_dict(tree)
    new.overrides = applied
    return new


def load_config(path: Optional[Union[str, Path]] = None, overrides: Sequence[str] = ()) -> RunConfig:
    if path is None:
        config = RunConfig()
    else:
        p = Path(path)
        if not p.is_file():
            raise ConfigurationError(f"config file not found: {p}")
        config = RunConfig.from_dict(yaml.safe_load(p.read_text()) or {})
    config = apply_overrides(config, overrides)
    config.validate()
    return config


def resolve_device() -> torch.device:
    return torch.device(os.environ.get(DEVICE_ENV, "cpu"))


def _write_json(path: Path, payload: Any) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def file_sha256(path: Union[str, Path]) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- prepare-data -------------------------------------------------------------

def cmd_prepare_data(config: RunConfig) -> DatasetManifest:
    d = config.data
    hr = scan_source(d.source, d.hr_size, seed=config.seed, test_fraction=d.test_fraction,
                     class_names=d.class_names)
    hr.provenance = config.provenance()
    hr.save(config.out / "manifest_hr.jsonl")
    lr = generate_lr_dataset(hr, d.degradation, lr_root_for(hr.root, d.degradation.target_size),
                             workers=d.workers)
    lr.provenance = config.provenance()
    lr.save(config.manifest_path)
    _write_json(config.out / "prepare_data.json", {
        **config.provenance(),
        "manifest": str(config.manifest_path),
        "manifest_sha256": file_sha256(config.manifest_path),
        "records": len(lr.records),
        "errors": lr.errors,
    })
    return lr


# -- training -----------------------------------------------------------------

def _datasets(config: RunConfig, manifest: Optional[DatasetManifest] = None):
    manifest = manifest or DatasetManifest.load(config.manifest_path)
    if len(manifest.class_names) != config.network.num_classes:
        raise ConfigurationError(
            f"manifest has {len(manifest.class_names)} classes but "
            f"network.num_classes is {config.network.num_classes}"
        )
    kw = dict(input_size=config.data.hr_size, seed=config.seed, missing=config.data.missing)
    train = PairedDataset(manifest, "train", augment=config.data.augment, **kw)
    test = PairedDataset(manifest, "test", augment=False, **kw)
    return manifest, train, test


def _config_diff(a: dict, b: dict, prefix: str = "") -> list[str]:
    out = []
    for k in sorted(set(a) | set(b)):
        va, vb = a.get(k), b.get(k)
        if isinstance(va, dict) and isinstance(vb, dict):
            out += _config_diff(va, vb, f"{prefix}{k}.")
        elif va != vb:
            out.append(f"{prefix}{k}: checkpoint={va!r} config={vb!r}")
    return out


def _check_checkpoint_config(payload: dict, network: NetworkConfig, what: str) -> None:
    diff = _config_diff(payload["config"], network.to_dict())
    if diff:
        raise AlignmentError(f"{what} architecture does not match network config:\n  " + "\n  ".join(diff))


def cmd_train_teacher(config: RunConfig) -> dict[str, Any]:
    _, train, test = _datasets(config)
    net = build_network(config.network, seed=config.seed).to(resolve_device())
    out = config.out / "teacher"
    result = train_teacher(
        net, train, config.schedule, seed=config.seed, out_dir=out,
        metrics=MetricsLog(out / "metrics.jsonl"), eval_dataset=test,
        device=resolve_device(), provenance=config.provenance(),
    )
    summary = {
        **config.provenance(),
        "epochs": [dataclasses.asdict(e) for e in result.epochs],
        "best_accuracy": result.best_accuracy,
        "best_checkpoint": str(result.best_checkpoint) if result.best_checkpoint else None,
        "last_checkpoint": str(result.last_checkpoint),
    }
    _write_json(out / "summary.json", summary)
    return summary


def cmd_distill_student(config: RunConfig) -> dict[str, Any]:
    ckpt = Path(config.distill.teacher_checkpoint or config.out / "teacher" / "best.pt")
    if not ckpt.is_file():
        raise ConfigurationError(f"teacher checkpoint not found: {ckpt}")
    payload = load_checkpoint(ckpt)
    _check_checkpoint_config(payload, config.network, "teacher checkpoint")
    device = resolve_device()
    teacher = network_from_checkpoint(payload, torch.get_default_dtype()).to(device)
    _, train, test = _datasets(config)
    student = build_network(config.network, seed=config.seed).to(device)
    out = config.out / "student"
    result = train_student(
        student, teacher, train, config.schedule, lambda_kd=config.distill.lambda_kd,
        seed=config.seed, out_dir=out, metrics=MetricsLog(out / "metrics.jsonl"),
        eval_dataset=test, device=device,
        provenance={**config.provenance(), "teacher_checkpoint": str(ckpt)},
    )
    summary = {
        **config.provenance(),
        "teacher_checkpoint": str(ckpt),
        "epochs": [dataclasses.asdict(e) for e in result.epochs],
        "best_accuracy": result.best_accuracy,
        "best_checkpoint": str(result.best_checkpoint) if result.best_checkpoint else None,
        "last_checkpoint": str(result.last_checkpoint),
    }
    _write_json(out / "summary.json", summary)
    return summary


def cmd_evaluate(
    config: RunConfig, checkpoint: Union[str, Path], manifest: Optional[Union[str, Path]] = None,
    use: str = "lr",
) -> EvaluationReport:
    payload = load_checkpoint(checkpoint)
    m = DatasetManifest.load(manifest or config.manifest_path)
    num_classes = payload["config"]["num_classes"]
    if num_classes != len(m.class_names):
        raise ConfigurationError(
            f"checkpoint predicts {num_classes} classes, manifest has {len(m.class_names)}"
        )
    net = network_from_checkpoint(payload, torch.get_default_dtype()).to(resolve_device())
    input_size = payload["config"]["input_size"][0]
    test = PairedDataset(m, "test", input_size=input_size, augment=False, missing=config.data.missing)
    report = evaluate(net, test, use=use, class_names=m.class_names, device=resolve_device())
    report.provenance = {
        **config.provenance(),
        "checkpoint": str(checkpoint),
        "checkpoint_seed": payload["seed"],
        "checkpoint_epoch": payload["epoch"],
        "manifest": str(manifest or config.manifest_path),
        "input": use,
    }
    return report


# -- ablation -----------------------------------------------------------------

@dataclass(frozen=True)
class AblationRow:
    name: str
    use_dbam: bool
    use_cbam: bool
    use_global_branch: bool
    distill: bool


ABLATION_ROWS = (
    AblationRow("Baseline", False, False, False, False),
    AblationRow("Baseline+CBAM", False, True, False, False),
    AblationRow("Baseline+DBAM", True, False, False, False),
    AblationRow("Baseline+Global Module", False, False, True, False),
    AblationRow("Baseline+DBAM+GM(without kd)", True, False, True, False),
    AblationRow("Baseline+DBAM+GM(GME-Net)", True, False, True, True),
)


def _row_network(config: RunConfig, row: AblationRow) -> NetworkConfig:
    net = copy.deepcopy(config.network)
    net.ablation = AblationConfig(row.use_dbam, row.use_cbam, row.use_global_branch)
    return net


def cmd_ablation(
    config: RunConfig, manifest: Optional[DatasetManifest] = None, rows: Sequence[AblationRow] = ABLATION_ROWS,
) -> list[dict[str, Any]]:
    """Train and evaluate every ablation row on the LR test split.

    Rows without distillation train on the prepared LR images with
    cross-entropy only; the distilled row first trains a teacher of the same
    architecture on HR images. A failing row is recorded and skipped.
    """
    manifest, train, test = _datasets(config, manifest)
    device = resolve_device()
    out = config.out / "ablation"
    table: list[dict[str, Any]] = []
    for row in rows:
        start = time.perf_counter()
        entry: dict[str, Any] = {"row": row.name, **dataclasses.asdict(row)}
        try:
            net_cfg = _row_network(config, row)
            student = build_network(net_cfg, seed=config.seed).to(device)
            entry["parameters"] = count_parameters(student)
            slug = row.name.replace("+", "_").replace(" ", "_").replace("(", "_").replace(")", "")
            row_dir = out / slug
            if row.distill:
                teacher = build_network(net_cfg, seed=config.seed).to(device)
                t_res = train_teacher(
                    teacher, train, config.schedule, seed=config.seed,
                    metrics=MetricsLog(row_dir / "teacher_metrics.jsonl"), device=device,
                )
                entry["teacher_hr_accuracy"] = evaluate(teacher, test, use="hr", device=device).overall_accuracy
                entry["teacher_final_loss"] = t_res.final_loss
                metrics = MetricsLog(row_dir / "metrics.jsonl")
                res = train_student(
                    student, teacher, train, config.schedule, lambda_kd=config.distill.lambda_kd,
                    seed=config.seed, metrics=metrics, device=device,
                )
                steps = metrics.steps()
                entry["l_kd_step0"] = steps[0]["l_kd"]
                entry["l_kd_final"] = res.epochs[-1].l_kd
                entry["l_kd_last_step"] = steps[-1]["l_kd"]
            else:
                res = train_supervised(
                    student, train, config.schedule, use="lr", seed=config.seed,
                    metrics=MetricsLog(row_dir / "metrics.jsonl"), device=device,
                )
            report = evaluate(student, test, use="lr", class_names=manifest.class_names, device=device)
            report.provenance = {**config.provenance(), "row": row.name}
            report.save(row_dir / "report.json")
            save_checkpoint(row_dir / "last.pt", student, seed=config.seed,
                            epoch=config.schedule.epochs - 1, provenance=report.provenance)
            entry["accuracy"] = report.overall_accuracy
            entry["final_loss"] = res.final_loss
            entry["status"] = "ok"
        except (GMENetError, RuntimeError) as exc:
            log.error("ablation row %s failed: %s", row.name, exc)
            entry["status"] = "failed"
            entry["error"] = f"{type(exc).__name__}: {exc}"
            entry["traceback"] = traceback.format_exc()
        entry["seconds"] = time.perf_counter() - start
        table.append(entry)

    _write_json(out / "table.json", {**config.provenance(), "rows": table})
    (out / "table.md").write_text(format_ablation_table(table))
    return table


def format_ablation_table(table: Sequence[dict[str, Any]]) -> str:
    lines = ["| Method | Params | LR test acc (%) | Status |", "|---|---:|---:|---|"]
    for e in table:
        acc = f"{e['accuracy']:.4f}" if "accuracy" in e else "-"
        lines.append(f"| {e['row']} | {e.get('parameters', '-')} | {acc} | {e['status']} |")
    return "\n".join(lines) + "\n"
