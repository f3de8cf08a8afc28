"""Optimisation loop, validation-based early stopping and checkpoints."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .augment import AugmentConfig, augment
from .backbone import ModelConfig, ReconstructionModel
from .data import BatchSampler, DatasetIndex, images_to_tensor
from .losses import LossConfig, check_window, total_loss
from .utils import sub_seed, tensor_dict_hash

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "epoch", "l_kd", "l_lcl", "l_gcl", "l_total", "val_loss")


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 16
    tau: float = 0.1
    lambda1: float = 1.0
    lambda2: float = 1.0
    k: object = 1
    stages_used: tuple = (1, 2, 3)
    lr_projector: float = 0.001
    lr_other: float = 0.005
    max_epochs: int = 100
    patience: int = 10
    label_source: str = "raw"
    seed: int = 0
    resolution: int = 64
    val_fraction: float = 0.1
    grad_clip: float = 5.0
    max_candidates: int = 1024
    projector_blocks: int = 4
    bottleneck_channels: int = 128
    steps_per_epoch: Optional[int] = None

    def __post_init__(self):
        self.k = check_window(self.k)
        self.stages_used = tuple(int(s) for s in self.stages_used)
        self.validate()

    def validate(self) -> None:
        checks = {
            "batch_size": self.batch_size >= 2,
            "patience": self.patience >= 1,
            "lr_projector": self.lr_projector > 0,
            "lr_other": self.lr_other > 0,
            "tau": self.tau > 0,
            "lambda1": self.lambda1 >= 0,
            "lambda2": self.lambda2 >= 0,
            "max_epochs": self.max_epochs >= 1,
            "label_source": self.label_source in ("raw", "pseudo"),
            "resolution": self.resolution >= 1,
            "val_fraction": 0 < self.val_fraction < 1,
            "stages_used": bool(self.stages_used) and set(self.stages_used) <= {1, 2, 3},
        }
        for name, ok in checks.items():
            if not ok:
                raise ValueError(f"invalid config field {name!r}: {getattr(self, name)!r}")

    def loss_config(self) -> LossConfig:
        return LossConfig(tau=self.tau, lambda1=self.lambda1, lambda2=self.lambda2, k=self.k,
                          stages_used=self.stages_used, max_candidates=self.max_candidates)

    def model_config(self) -> ModelConfig:
        return ModelConfig(resolution=self.resolution, projector_blocks=self.projector_blocks,
                           bottleneck_channels=self.bottleneck_channels,
                           encoder_seed=sub_seed(self.seed, "encoder"))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages_used"] = list(self.stages_used)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"invalid config field {sorted(unknown)[0]!r}: unknown name")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    best_val_loss: float = math.inf
    epochs_since_best: int = 0
    best_epoch: int = 0
    history: list = field(default_factory=list)


@dataclass
class TrainResult:
    model: ReconstructionModel
    state: TrainState
    config: TrainConfig
    checkpoint: Optional[Path] = None
    initial_val_loss: float = math.nan


def split_validation(samples, fraction: float, seed: int, label_source: str = "raw"):
    """Hold out ``ceil(fraction * n)`` samples per label (never the last one)."""
    rng = np.random.default_rng(seed)
    by_label = {}
    for s in samples:
        by_label.setdefault(s.label(label_source), []).append(s)
    train, val = [], []
    for lab in sorted(by_label):
        group = by_label[lab]
        order = rng.permutation(len(group))
        n_val = min(math.ceil(fraction * len(group)), len(group) - 1)
        val.extend(group[i] for i in order[:n_val])
        train.extend(group[i] for i in order[n_val:])
    return train, val


def build_optimizer(model: ReconstructionModel, config: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam([
        {"params": list(model.projector.parameters()), "lr": config.lr_projector, "name": "projector"},
        {"params": list(model.neck.parameters()) + list(model.decoder.parameters()),
         "lr": config.lr_other, "name": "other"},
    ])


def _validation_batches(val_samples, config: TrainConfig):
    """Fixed chunks of un-augmented images, each with one fixed-seed view."""
    aug = AugmentConfig()
    batches = []
    for start in range(0, len(val_samples), config.batch_size):
        chunk = val_samples[start:start + config.batch_size]
        views = [augment(s, sub_seed(config.seed, f"val-view:{s.source_path}"), aug) for s in chunk]
        x = images_to_tensor(chunk + views)
        labels = torch.tensor([s.label(config.label_source) for s in chunk] * 2)
        batches.append((x, labels, len(chunk)))
    return batches


@torch.no_grad()
def validate(model: ReconstructionModel, val_samples, config: TrainConfig, batches=None) -> float:
    """Mean total loss over the validation batches, no parameter updates."""
    if not val_samples:
        raise ValueError("validation set is empty")
    batches = batches or _validation_batches(list(val_samples), config)
    was_training = model.training
    model.eval()
    loss_cfg = config.loss_config()
    gen = torch.Generator().manual_seed(sub_seed(config.seed, "val-candidates"))
    total, weight = 0.0, 0
    try:
        for x, labels, n in batches:
            out = model(x)
            terms = total_loss(out, labels, loss_cfg, n_anchors=n, generator=gen)
            total += float(terms.total) * n
            weight += n
    finally:
        model.train(was_training)
    return total / weight


def _seed_torch(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def train(config: TrainConfig, index: DatasetIndex, out_dir=None, model: Optional[ReconstructionModel] = None,
          augment_config: Optional[AugmentConfig] = None, log_every: int = 0) -> TrainResult:
    """Train projector, neck and decoder on the train split of ``index``.

    Holds out a class-stratified validation split, stops after ``patience``
    epochs without validation improvement and keeps the best weights. When
    ``out_dir`` is given, writes checkpoint.bin, config.json and train_log.csv.
    """
    config.validate()
    train_all = index.train_samples
    if not train_all:
        raise ValueError("index has no train samples")
    present = {s.class_id for s in train_all}
    missing = [index.class_names[c] for c in range(index.class_count) if c not in present]
    if missing:
        raise ValueError(f"classes without train samples: {missing}")
    if config.label_source == "pseudo" and any(s.pseudo_class_id is None for s in train_all):
        raise ValueError("label_source=pseudo but some train samples lack pseudo labels")

    _seed_torch(sub_seed(config.seed, "init"))
    model = model or ReconstructionModel(config.model_config())
    encoder_hash = tensor_dict_hash(model.encoder.state_dict())
    train_set, val_set = split_validation(train_all, config.val_fraction, sub_seed(config.seed, "split"),
                                          config.label_source)
    sampler = BatchSampler(train_set, min(config.batch_size, len(train_set)), config.label_source,
                           sub_seed(config.seed, "sampler"), augment_config, sub_seed(config.seed, "augment"))
    gen = torch.Generator().manual_seed(sub_seed(config.seed, "candidates"))
    optimizer = build_optimizer(model, config)
    loss_cfg = config.loss_config()
    val_batches = _validation_batches(val_set, config)
    steps_per_epoch = config.steps_per_epoch or math.ceil(len(train_set) / config.batch_size)

    state = TrainState()
    initial_val = validate(model, val_set, config, val_batches)
    best_state = copy.deepcopy(model.trainable_state())
    state.best_val_loss = initial_val
    model.train()
    for epoch in range(1, config.max_epochs + 1):
        state.epoch = epoch
        for _ in range(steps_per_epoch):
            batch = sampler.draw()
            out = model(batch.images())
            terms = total_loss(out, batch.labels(), loss_cfg, n_anchors=batch.size, generator=gen)
            kd, lcl, gcl = (float(t.detach()) for t in (terms.kd, terms.lcl, terms.gcl))
            if not torch.isfinite(terms.total):
                raise TrainingError(f"non-finite loss at step {state.step}: batch {batch.identifiers()} "
                                    f"(kd={kd}, lcl={lcl}, gcl={gcl})")
            optimizer.zero_grad(set_to_none=True)
            terms.total.backward()
            if config.grad_clip:
                torch.nn.utils.clip_grad_norm_(
                    [p for g in optimizer.param_groups for p in g["params"]], config.grad_clip)
            optimizer.step()
            state.step += 1
            state.history.append({
                "step": state.step, "epoch": epoch,
                "l_kd": kd, "l_lcl": lcl, "l_gcl": gcl,
                "l_total": float(terms.total.detach()), "val_loss": None,
            })
            if log_every and state.step % log_every == 0:
                logger.info("step %d kd=%.4f lcl=%.4f gcl=%.4f", state.step, kd, lcl, gcl)

        val_loss = validate(model, val_set, config, val_batches)
        state.history[-1]["val_loss"] = val_loss
        if val_loss < state.best_val_loss:
            state.best_val_loss = val_loss
            state.best_epoch = epoch
            state.epochs_since_best = 0
            best_state = copy.deepcopy(model.trainable_state())
        else:
            state.epochs_since_best += 1
            if state.epochs_since_best >= config.patience:
                logger.info("early stop at epoch %d (best %d)", epoch, state.best_epoch)
                break

    model.load_state_dict(best_state, strict=False)
    model.eval()
    if tensor_dict_hash(model.encoder.state_dict()) != encoder_hash:
        raise TrainingError("encoder parameters changed during training")

    result = TrainResult(model=model, state=state, config=config, initial_val_loss=initial_val)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        result.checkpoint = save_checkpoint(out_dir / "checkpoint.bin", model, config, state)
        (out_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))
        write_log(out_dir / "train_log.csv", state.history)
    return result


def write_log(path, history) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        for row in history:
            writer.writerow({k: ("" if row[k] is None else row[k]) for k in LOG_COLUMNS})


def save_checkpoint(path, model: ReconstructionModel, config: TrainConfig, state: TrainState) -> Path:
    manifest = {
        "config_hash": model.config.config_hash(),
        "model_config": model.config.to_dict(),
        "train_config": config.to_dict(),
        "stage_shapes": model.config.stage_shapes(),
        "step": state.step,
        "best_epoch": state.best_epoch,
        "best_val_loss": state.best_val_loss,
        "seed": config.seed,
        "encoder": model.encoder_identifier,
        "parameter_hash": tensor_dict_hash(model.trainable_state()),
    }
    path = Path(path)
    torch.save({"manifest": manifest, "params": model.trainable_state()}, path)
    return path


def load_checkpoint(path, expected: Optional[ModelConfig] = None, encoder=None):
    """Rebuild a model from ``checkpoint.bin``; returns (model, manifest)."""
    blob = torch.load(Path(path), map_location="cpu", weights_only=False)
    manifest = blob["manifest"]
    mcfg = ModelConfig.from_dict(manifest["model_config"])
    if mcfg.config_hash() != manifest["config_hash"]:
        raise CheckpointError("checkpoint manifest is internally inconsistent")
    if expected is not None and expected.config_hash() != manifest["config_hash"]:
        raise CheckpointError(f"config hash mismatch: checkpoint {manifest['config_hash'][:12]} "
                              f"vs expected {expected.config_hash()[:12]}")
    model = ReconstructionModel(mcfg, encoder=encoder)
    if model.encoder_identifier != manifest["encoder"]:
        raise CheckpointError(f"encoder {model.encoder_identifier} does not match {manifest['encoder']}")
    missing, unexpected = model.load_state_dict(blob["params"], strict=False)
    if unexpected or any(not k.startswith("encoder.") for k in missing):
        raise CheckpointError(f"parameter mismatch: missing={missing} unexpected={unexpected}")
    model.eval()
    return model, manifest

