"""MVTec-style dataset ingestion and class-aware batch sampling.

Layout read by :func:`scan_dataset`::

    root/<class_name>/train/good/*.png
    root/<class_name>/test/good/*.png
    root/<class_name>/test/<defect_name>/*.png
    root/<class_name>/ground_truth/<defect_name>/<stem>_mask.png
"""

from __future__ import annotations

import dataclasses
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .augment import AugmentConfig, augment

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


class DatasetError(ValueError):
    """Malformed dataset layout or unreadable file."""


@dataclass(frozen=True, eq=False)
class ImageSample:
    image: np.ndarray  # H x W x 3, float32 in [0, 1]
    class_id: int
    split: str = "train"
    is_anomalous: bool = False
    mask: Optional[np.ndarray] = None  # H x W uint8 {0, 1}
    pseudo_class_id: Optional[int] = None
    source_path: str = ""
    defect_name: str = "good"

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise ValueError(f"unknown split {self.split!r}")
        if self.split == "train" and (self.is_anomalous or self.mask is not None):
            raise ValueError(f"train sample {self.source_path} must be normal and mask-free")
        if self.is_anomalous and (self.mask is None or not self.mask.any()):
            raise ValueError(f"anomalous sample {self.source_path} needs a non-empty mask")
        if not self.is_anomalous and self.mask is not None and self.mask.any():
            raise ValueError(f"normal sample {self.source_path} has anomalous mask pixels")

    def label(self, source: str = "raw") -> int:
        if source == "raw":
            return self.class_id
        if source == "pseudo":
            if self.pseudo_class_id is None:
                raise DatasetError(f"{self.source_path} has no pseudo-class label")
            return self.pseudo_class_id
        raise ValueError(f"unknown label source {source!r}")

    def full_mask(self) -> np.ndarray:
        if self.mask is None:
            return np.zeros(self.image.shape[:2], dtype=np.uint8)
        return self.mask

    def replace(self, **changes) -> "ImageSample":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class DatasetIndex:
    samples: tuple
    class_names: tuple
    root: str = ""
    resolution: int = 0

    def __post_init__(self):
        if len(self.class_names) < 1:
            raise DatasetError("dataset has no classes")
        for s in self.samples:
            if not 0 <= s.class_id < len(self.class_names):
                raise DatasetError(f"class id {s.class_id} out of range for {s.source_path}")

    @property
    def class_count(self) -> int:
        return len(self.class_names)

    @property
    def train_samples(self) -> list:
        return [s for s in self.samples if s.split == "train"]

    @property
    def test_samples(self) -> list:
        return [s for s in self.samples if s.split == "test"]

    @property
    def train_count(self) -> int:
        return len(self.train_samples)

    @property
    def test_count(self) -> int:
        return len(self.test_samples)

    def replace_samples(self, samples) -> "DatasetIndex":
        return dataclasses.replace(self, samples=tuple(samples))


def _load_image(path: Path, resolution: int) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if im.size != (resolution, resolution):
                im = im.resize((resolution, resolution), Image.BILINEAR)
            return np.asarray(im, dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise DatasetError(f"unreadable image {path}: {exc}") from exc


def _load_mask(path: Path, resolution: int) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im = im.convert("L")
            if im.size != (resolution, resolution):
                im = im.resize((resolution, resolution), Image.NEAREST)
            return (np.asarray(im) > 127).astype(np.uint8)
    except (OSError, ValueError) as exc:
        raise DatasetError(f"unreadable mask {path}: {exc}") from exc


def _image_files(directory: Path) -> list:
    return sorted(p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def scan_dataset(root, resolution: int = 256, workers: int = 1) -> DatasetIndex:
    """Load an MVTec-style tree into a :class:`DatasetIndex`.

    Class ids follow the sorted order of class directory names. Images are
    resized bilinearly; masks nearest-neighbour then re-binarized.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"malformed dataset: {root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DatasetError(f"malformed dataset: no class directories under {root}")

    jobs = []  # (class_id, split, defect, image_path, mask_path)
    for class_id, cdir in enumerate(class_dirs):
        train_dir = cdir / "train" / "good"
        if not train_dir.is_dir():
            raise DatasetError(f"malformed dataset: missing split directory {train_dir}")
        train_files = _image_files(train_dir)
        if not train_files:
            raise DatasetError(f"class {cdir.name!r} has zero train images")
        jobs.extend((class_id, "train", "good", p, None) for p in train_files)

        test_dir = cdir / "test"
        if not test_dir.exists():
            continue
        if not test_dir.is_dir():
            raise DatasetError(f"malformed dataset: {test_dir} is not a directory")
        for ddir in sorted(p for p in test_dir.iterdir() if p.is_dir()):
            for p in _image_files(ddir):
                mask_path = None
                if ddir.name != "good":
                    mask_path = cdir / "ground_truth" / ddir.name / f"{p.stem}_mask.png"
                    if not mask_path.is_file():
                        raise DatasetError(f"malformed dataset: missing mask {mask_path}")
                jobs.append((class_id, "test", ddir.name, p, mask_path))

    def load(job):
        class_id, split, defect, path, mask_path = job
        image = _load_image(path, resolution)
        mask = None
        anomalous = False
        if mask_path is not None:
            mask = _load_mask(mask_path, resolution)
            anomalous = bool(mask.any())
            if not anomalous:
                raise DatasetError(f"mask {mask_path} has no anomalous pixels")
        return ImageSample(
            image=image,
            class_id=class_id,
            split=split,
            is_anomalous=anomalous,
            mask=mask,
            source_path=path.relative_to(root).as_posix(),
            defect_name=defect,
        )

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            samples = list(pool.map(load, jobs))
    else:
        samples = [load(j) for j in jobs]
    return DatasetIndex(
        samples=tuple(samples),
        class_names=tuple(p.name for p in class_dirs),
        root=str(root),
        resolution=resolution,
    )


def images_to_tensor(samples: Sequence[ImageSample]) -> torch.Tensor:
    """Stack samples into an N x 3 x H x W float32 tensor."""
    arr = np.stack([s.image for s in samples]).astype(np.float32)
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


@dataclass
class ContrastiveBatch:
    anchors: list
    augmented_views: list
    batch_labels: list
    label_source: str = "raw"
    seeds: list = field(default_factory=list)

    @property
    def size(self) -> int:
        return len(self.anchors)

    def images(self) -> torch.Tensor:
        """Anchors followed by their views: 2B x 3 x H x W."""
        return images_to_tensor(list(self.anchors) + list(self.augmented_views))

    def labels(self) -> torch.Tensor:
        """Labels for the 2B stacked entries (views repeat their anchor's label)."""
        return torch.tensor(list(self.batch_labels) * 2, dtype=torch.long)

    def identifiers(self) -> list:
        return [s.source_path for s in self.anchors]


def _stratified_draw(groups: dict, B: int, rng: np.random.Generator) -> list:
    labels = sorted(groups)
    order = [labels[i] for i in rng.permutation(len(labels))]
    pools = {lab: [groups[lab][i] for i in rng.permutation(len(groups[lab]))] for lab in labels}

    quota = {}
    if len(order) >= 2 and B < 4:
        # only room for one label pair: keep the batch mixed
        quota[order[0]] = min(B - 1, len(pools[order[0]]))
        quota[order[1]] = B - quota[order[0]]
    else:
        total = 0
        for lab in order:
            if total >= B:
                break
            take = min(2, len(pools[lab]), B - total)
            quota[lab] = take
            total += take

    chosen = []
    leftovers = []
    for lab, q in quota.items():
        chosen.extend(pools[lab][:q])
        leftovers.extend(pools[lab][q:])
    remaining = B - len(chosen)
    if remaining > 0:
        # every label is already represented here, so leftovers cover the rest
        picks = rng.choice(len(leftovers), size=remaining, replace=False)
        chosen.extend(leftovers[i] for i in sorted(picks))
    return [chosen[i] for i in rng.permutation(len(chosen))]


class BatchSampler:
    """Seeded class-aware sampler; one instance per training loop."""

    def __init__(
        self,
        samples: Sequence[ImageSample],
        batch_size: int,
        label_source: str = "raw",
        seed: int = 0,
        augment_config: Optional[AugmentConfig] = None,
        augment_seed: Optional[int] = None,
    ):
        samples = [s for s in samples if s.split == "train"]
        if not samples:
            raise DatasetError("cannot sample from an empty index")
        if batch_size < 2:
            raise ValueError("batch size must be >= 2")
        if batch_size > len(samples):
            raise ValueError(f"batch size {batch_size} exceeds train set size {len(samples)}")
        self.label_source = label_source
        self.batch_size = batch_size
        self.augment_config = augment_config or AugmentConfig()
        self.rng = np.random.default_rng(seed)
        # view seeds come from their own stream when ``augment_seed`` is given
        self.augment_rng = self.rng if augment_seed is None else np.random.default_rng(augment_seed)
        self.groups = defaultdict(list)
        for s in samples:
            self.groups[s.label(label_source)].append(s)

    def draw(self) -> ContrastiveBatch:
        anchors = _stratified_draw(self.groups, self.batch_size, self.rng)
        seeds = [int(x) for x in self.augment_rng.integers(0, 2**31 - 1, size=len(anchors))]
        views = [augment(a, s, self.augment_config) for a, s in zip(anchors, seeds)]
        return ContrastiveBatch(
            anchors=anchors,
            augmented_views=views,
            batch_labels=[a.label(self.label_source) for a in anchors],
            label_source=self.label_source,
            seeds=seeds,
        )


def sample_batch(index, B: int, label_source: str = "raw", seed: int = 0,
                 augment_config: Optional[AugmentConfig] = None) -> ContrastiveBatch:
    """Draw one class-aware contrastive batch from the train split of ``index``."""
    samples = index.train_samples if isinstance(index, DatasetIndex) else list(index)
    return BatchSampler(samples, B, label_source, seed, augment_config).draw()
