"""Dataset manifests, low-resolution dataset generation and paired HR/LR loading.

Directory layout is ``<root>/<split>/<class_name>/<image>``; a source laid
out flat as ``<root>/<class_name>/<image>`` gets a seeded stratified split.
Generated LR images mirror the split layout under ``<root>_lr<target>``.
"""
from __future__ import annotations

import json
import logging
import queue
import threading
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterator, Optional, Sequence, Union

import numpy as np
import torch
from PIL import Image

from .degradation import (
    DegradationSpec,
    bicubic_resize,
    prepare_student_input,
    prepare_teacher_input,
)
from .errors import ConfigurationError, DataError, ValidationError

__all__ = [
    "MANIFEST_VERSION",
    "IMAGE_SUFFIXES",
    "ManifestRecord",
    "DatasetManifest",
    "DistillationBatch",
    "read_image",
    "write_image",
    "scan_source",
    "generate_lr_dataset",
    "lr_root_for",
    "PairedDataset",
    "load_paired_batches",
    "channel_stats",
]

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}
SPLITS = ("train", "test")


@dataclass
class ManifestRecord:
    relative_path: str
    label_index: int
    split: str
    hr_path: Optional[str] = None


@dataclass
class DatasetManifest:
    root: str
    class_names: list[str]
    hr_size: int
    lr_size: Optional[int] = None
    records: list[ManifestRecord] = field(default_factory=list)
    hr_root: Optional[str] = None
    normalization: Optional[dict] = None
    hr_normalization: Optional[dict] = None
    spec: Optional[dict] = None
    provenance: dict = field(default_factory=dict)
    errors: list[dict] = field(default_factory=list)

    def validate(self) -> None:
        n = len(self.class_names)
        for r in self.records:
            if not 0 <= r.label_index < n:
                raise ValidationError(f"{r.relative_path}: label {r.label_index} outside [0, {n})")
            if r.split not in SPLITS:
                raise ValidationError(f"{r.relative_path}: unknown split {r.split!r}")
        if self.lr_size is not None and self.lr_size >= self.hr_size:
            raise ValidationError(f"lr_size {self.lr_size} must be below hr_size {self.hr_size}")

    @property
    def is_paired(self) -> bool:
        return self.hr_root is not None

    def split(self, name: str) -> list[tuple[int, ManifestRecord]]:
        return [(i, r) for i, r in enumerate(self.records) if r.split == name]

    def header(self) -> dict[str, Any]:
        d = asdict(self)
        d.pop("records")
        d["manifest_version"] = MANIFEST_VERSION
        return d

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = [json.dumps({"header": self.header()}, sort_keys=True)]
        lines += [json.dumps(asdict(r), sort_keys=True) for r in self.records]
        path.write_text("\n".join(lines) + "\n")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "DatasetManifest":
        path = Path(path)
        if not path.is_file():
            raise DataError(f"manifest not found: {path}")
        lines = path.read_text().splitlines()
        header = json.loads(lines[0])["header"]
        version = header.pop("manifest_version", None)
        if version != MANIFEST_VERSION:
            raise ValidationError(f"{path}: unsupported manifest version {version!r}")
        records = [ManifestRecord(**json.loads(line)) for line in lines[1:] if line.strip()]
        m = cls(records=records, **header)
        m.validate()
        return m


@dataclass
class DistillationBatch:
    hr_images: torch.Tensor
    lr_images: torch.Tensor
    labels: torch.Tensor
    indices: list[int]

    def __len__(self) -> int:
        return len(self.indices)


def read_image(path: Union[str, Path]) -> np.ndarray:
    """Load any Pillow-readable image as an HxWx3 uint8 RGB array."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc


def write_image(path: Union[str, Path], pixels: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(pixels, dtype=np.uint8)).save(path, format="PNG")


def _images_in(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def channel_stats(images: Sequence[np.ndarray]) -> dict[str, list[float]]:
    """Per-channel mean and std of pixel arrays in [0, 255], reported on the [0, 1] scale."""
    if not images:
        raise DataError("cannot compute normalisation statistics from zero images")
    total = np.zeros(3)
    total_sq = np.zeros(3)
    count = 0
    for img in images:
        x = np.asarray(img, dtype=np.float64).reshape(-1, 3) / 255.0
        total += x.sum(axis=0)
        total_sq += (x * x).sum(axis=0)
        count += x.shape[0]
    mean = total / count
    std = np.sqrt(np.maximum(total_sq / count - mean * mean, 0.0))
    std = np.where(std < 1e-6, 1.0, std)
    return {"mean": [float(v) for v in mean], "std": [float(v) for v in std]}


def scan_source(
    root: Union[str, Path],
    hr_size: int,
    *,
    seed: int = 0,
    test_fraction: float = 0.1,
    class_names: Optional[Sequence[str]] = None,
) -> DatasetManifest:
    """Index a high-resolution source directory into a manifest.

    Uses ``train/`` and ``test/`` subdirectories when present, otherwise
    splits each class with a seeded shuffle, holding out ``test_fraction``.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"source directory does not exist: {root}")
    presplit = all((root / s).is_dir() for s in SPLITS)
    class_root = root / "train" if presplit else root
    if class_names is None:
        class_names = sorted(p.name for p in class_root.iterdir() if p.is_dir())
    class_names = list(class_names)
    if not class_names:
        raise DataError(f"no class directories found under {class_root}")

    records: list[ManifestRecord] = []
    rng = np.random.default_rng(seed)
    for label, name in enumerate(class_names):
        if presplit:
            for split in SPLITS:
                d = root / split / name
                if d.is_dir():
                    records += [
                        ManifestRecord(str(p.relative_to(root)), label, split) for p in _images_in(d)
                    ]
            continue
        d = root / name
        if not d.is_dir():
            raise DataError(f"class directory missing: {d}")
        files = _images_in(d)
        order = rng.permutation(len(files))
        n_test = int(round(test_fraction * len(files)))
        test_set = set(order[:n_test].tolist())
        records += [
            ManifestRecord(str(p.relative_to(root)), label, "test" if i in test_set else "train")
            for i, p in enumerate(files)
        ]
    if not records:
        raise DataError(f"no images found under {root}")

    manifest = DatasetManifest(root=str(root.resolve()), class_names=class_names, hr_size=hr_size, records=records)
    train_imgs = [
        _load_hr(manifest.root, r.relative_path, hr_size) for _, r in manifest.split("train")
    ]
    manifest.normalization = channel_stats(train_imgs)
    manifest.validate()
    return manifest


def _load_hr(root: str, rel: str, hr_size: int) -> np.ndarray:
    img = read_image(Path(root) / rel)
    if img.shape[:2] != (hr_size, hr_size):
        img = bicubic_resize(img, hr_size)
    return img


def lr_root_for(hr_root: Union[str, Path], target_size: int) -> Path:
    hr_root = Path(hr_root)
    return hr_root.with_name(f"{hr_root.name}_lr{target_size}")


def generate_lr_dataset(
    src_manifest: DatasetManifest,
    spec: DegradationSpec,
    out_dir: Optional[Union[str, Path]] = None,
    *,
    workers: int = 1,
) -> DatasetManifest:
    """Bicubic-downscale every source image and write it as PNG under ``out_dir``.

    Unreadable sources are recorded in ``manifest.errors`` and skipped.
    Output bytes depend only on the source pixels and ``spec``.
    """
    spec.validate()
    if spec.target_size >= src_manifest.hr_size:
        raise ConfigurationError(
            f"target size {spec.target_size} must be below hr_size {src_manifest.hr_size}"
        )
    out_dir = Path(out_dir) if out_dir is not None else lr_root_for(src_manifest.root, spec.target_size)
    class_names = src_manifest.class_names

    def work(rec: ManifestRecord):
        try:
            hr = _load_hr(src_manifest.root, rec.relative_path, src_manifest.hr_size)
        except DataError as exc:
            return rec, None, str(exc)
        lr = bicubic_resize(hr, spec.target_size, spec.antialias)
        rel = Path(rec.split) / class_names[rec.label_index] / (Path(rec.relative_path).stem + ".png")
        write_image(out_dir / rel, lr)
        return rec, (str(rel), lr), None

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(work, src_manifest.records))
    else:
        results = [work(r) for r in src_manifest.records]

    records, errors, stats_inputs = [], [], []
    input_size = src_manifest.hr_size
    for rec, out, err in results:
        if err is not None:
            log.warning("skipping unreadable source: %s", err)
            errors.append({"path": rec.relative_path, "error": err})
            continue
        rel, lr = out
        records.append(ManifestRecord(rel, rec.label_index, rec.split, hr_path=rec.relative_path))
        if rec.split == "train":
            stats_inputs.append(prepare_student_input(lr, input_size, spec, as_tensor=False))
    if not records:
        raise DataError(f"no low-resolution images were generated under {out_dir}")

    manifest = DatasetManifest(
        root=str(out_dir.resolve()),
        class_names=list(class_names),
        hr_size=src_manifest.hr_size,
        lr_size=spec.target_size,
        records=records,
        hr_root=src_manifest.root,
        normalization=channel_stats(stats_inputs) if stats_inputs else None,
        hr_normalization=src_manifest.normalization,
        spec=spec.to_dict(),
        errors=errors,
    )
    manifest.validate()
    return manifest


class PairedDataset:
    """Aligned HR and prepared-LR tensors for one split of a paired manifest.

    Tensors are built lazily on first use and cached. ``missing`` is
    ``"fail"`` (raise :class:`DataError`) or ``"skip"`` (warn and drop).
    """

    def __init__(
        self,
        manifest: DatasetManifest,
        split: str = "train",
        *,
        input_size: Optional[int] = None,
        seed: int = 0,
        augment: Optional[bool] = None,
        missing: str = "fail",
        dtype: Optional[torch.dtype] = None,
    ):
        if not manifest.is_paired:
            raise ConfigurationError("PairedDataset needs a manifest produced by generate_lr_dataset")
        if missing not in ("fail", "skip"):
            raise ConfigurationError(f"missing must be 'fail' or 'skip', got {missing!r}")
        self.manifest = manifest
        self.split = split
        self.input_size = input_size or manifest.hr_size
        self.seed = seed
        self.augment = (split == "train") if augment is None else augment
        self.missing = missing
        self.dtype = dtype or torch.get_default_dtype()
        self.spec = DegradationSpec(**manifest.spec)
        self.entries = manifest.split(split)
        self._cache: Optional[tuple[torch.Tensor, torch.Tensor, torch.Tensor, list[int]]] = None

    def __len__(self) -> int:
        return len(self.tensors()[3])

    @property
    def labels(self) -> torch.Tensor:
        return self.tensors()[2]

    def load_pair(self, rec: ManifestRecord) -> tuple[torch.Tensor, torch.Tensor]:
        m = self.manifest
        hr = _load_hr(m.hr_root, rec.hr_path, m.hr_size)
        lr = read_image(Path(m.root) / rec.relative_path)
        hr_t = prepare_teacher_input(hr, self.input_size, m.hr_normalization)
        lr_t = prepare_student_input(lr, self.input_size, self.spec, m.normalization)
        return hr_t.to(self.dtype), lr_t.to(self.dtype)

    def tensors(self):
        if self._cache is None:
            hrs, lrs, labels, kept = [], [], [], []
            for idx, rec in self.entries:
                try:
                    hr, lr = self.load_pair(rec)
                except DataError as exc:
                    if self.missing == "fail":
                        raise
                    warnings.warn(f"skipping record {rec.relative_path}: {exc}")
                    continue
                hrs.append(hr)
                lrs.append(lr)
                labels.append(rec.label_index)
                kept.append(idx)
            if not kept:
                raise DataError(f"split {self.split!r} has no loadable records")
            self._cache = (torch.stack(hrs), torch.stack(lrs), torch.tensor(labels), kept)
        return self._cache

    def order(self, epoch: int, shuffle: bool = True) -> tuple[np.ndarray, np.ndarray]:
        """Record permutation and flip decisions for ``epoch``; a pure function of (seed, epoch)."""
        n = len(self)
        rng = np.random.default_rng([self.seed, epoch])
        perm = rng.permutation(n) if shuffle else np.arange(n)
        flips = rng.random(n) < 0.5 if self.augment else np.zeros(n, dtype=bool)
        return perm, flips

    def batches(self, batch_size: int, epoch: int = 0, shuffle: Optional[bool] = None) -> Iterator[DistillationBatch]:
        if batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {batch_size}")
        shuffle = (self.split == "train") if shuffle is None else shuffle
        hr, lr, labels, kept = self.tensors()
        perm, flips = self.order(epoch, shuffle)
        for start in range(0, len(perm), batch_size):
            sel = torch.from_numpy(perm[start:start + batch_size])
            flip = torch.from_numpy(flips[start:start + batch_size])[:, None, None, None]
            hb, lb = hr[sel], lr[sel]
            if self.augment:
                hb = torch.where(flip, hb.flip(-1), hb)
                lb = torch.where(flip, lb.flip(-1), lb)
            yield DistillationBatch(hb, lb, labels[sel], [kept[i] for i in sel.tolist()])


def _prefetch(it: Iterator, depth: int) -> Iterator:
    """Run ``it`` on a background thread with a bounded queue; order is preserved."""
    q: queue.Queue = queue.Queue(maxsize=depth)
    done = object()

    def producer():
        try:
            for item in it:
                q.put(item)
        except BaseException as exc:  # re-raised in the consumer
            q.put(exc)
        q.put(done)

    threading.Thread(target=producer, daemon=True).start()
    while True:
        item = q.get()
        if item is done:
            return
        if isinstance(item, BaseException):
            raise item
        yield item


def load_paired_batches(
    manifest: DatasetManifest,
    batch_size: int,
    seed: int,
    *,
    epoch: int = 0,
    split: str = "train",
    input_size: Optional[int] = None,
    augment: Optional[bool] = None,
    missing: str = "fail",
    prefetch: int = 0,
) -> Iterator[DistillationBatch]:
    ds = PairedDataset(
        manifest, split, input_size=input_size, seed=seed, augment=augment, missing=missing
    )
    it = ds.batches(batch_size, epoch)
    return _prefetch(it, prefetch) if prefetch > 0 else it
