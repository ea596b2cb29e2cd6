"""Train and apply convolutional models for consumption regression and
extreme-poverty classification.

Transfer-learning setup: a residual backbone with the final layer replaced
(1 output for regression, 2 for classification), MSE / cross-entropy loss,
adaptive-moment optimizer with a one-cycle learning-rate schedule, and
best-validation-epoch checkpointing.
"""

from __future__ import annotations

import copy
import io
import logging
import math
import random
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import torch
from PIL import Image
from torch import nn
from torch.utils.data import DataLoader, Dataset
from torchvision import transforms

from .manifest import CATEGORIES
from .metrics import (
    MetricsReport,
    RegressionPairs,
    UndefinedMetricError,
    classification_summary,
    confusion,
    r_squared,
    rmse,
)

log = logging.getLogger(__name__)

# standard ImageNet channel statistics, shared by all backbones
NORMALIZE_MEAN = (0.485, 0.456, 0.406)
NORMALIZE_STD = (0.229, 0.224, 0.225)

CHECKPOINT_SCHEMA = 1
TASKS = ("regression", "classification")
AUGMENTATIONS = ("none", "standard_flips_crops")
BACKBONES = ("smallnet", "resnet18", "resnet34", "resnet18-random", "resnet34-random")


class ModelingError(ValueError):
    pass


class EmptyDatasetError(ModelingError):
    pass


class SingleClassError(ModelingError):
    pass


class TaskMismatchError(ModelingError):
    pass


class WeightsUnavailableError(ModelingError):
    """Pretrained weights could not be loaded (typically: no network egress)."""


class NonFiniteLossError(RuntimeError):
    def __init__(self, epoch: int, batch: int, loss_value: float, lr: float):
        self.epoch = epoch
        self.batch = batch
        super().__init__(
            f"non-finite loss {loss_value!r} at epoch {epoch}, batch {batch} (lr={lr:.3e}); "
            "check target scaling and learning rate"
        )


def _parse_input_mode(input_mode: str) -> None:
    if input_mode in ("merged", "pooled"):
        return
    if input_mode.startswith("category:"):
        slug = input_mode.split(":", 1)[1]
        if slug in CATEGORIES:
            return
        raise ModelingError(f"unknown category slug {slug!r} in input_mode")
    raise ModelingError(
        f"input_mode must be 'merged', 'pooled' or 'category:<slug>', got {input_mode!r}"
    )


@dataclass(frozen=True)
class TrainConfig:
    task: str
    input_mode: str = "merged"
    backbone_id: str = "resnet18"
    input_px: int = 224
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 42
    augmentation: str = "none"

    def __post_init__(self) -> None:
        if self.task not in TASKS:
            raise ModelingError(f"task must be one of {TASKS}, got {self.task!r}")
        _parse_input_mode(self.input_mode)
        if self.backbone_id not in BACKBONES:
            raise ModelingError(f"backbone_id must be one of {BACKBONES}, got {self.backbone_id!r}")
        if self.input_px < 8:
            raise ModelingError(f"input_px too small: {self.input_px}")
        if self.epochs < 1:
            raise ModelingError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ModelingError(f"batch_size must be >= 1, got {self.batch_size}")
        if not (math.isfinite(self.learning_rate) and self.learning_rate > 0):
            raise ModelingError(f"learning_rate must be positive, got {self.learning_rate!r}")
        if self.augmentation not in AUGMENTATIONS:
            raise ModelingError(f"augmentation must be one of {AUGMENTATIONS}")


class LabeledImage(NamedTuple):
    """One training sample: image path, numeric target, provenance id."""

    path: Path
    target: float
    family_id: str = ""


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    valid_loss: float
    metric_values: dict[str, float]
    wall_time_s: float

    def as_dict(self) -> dict:
        return asdict(self)


class _Residual(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(c_out)
        self.skip = (
            nn.Sequential(nn.Conv2d(c_in, c_out, 1, stride=stride, bias=False), nn.BatchNorm2d(c_out))
            if (stride != 1 or c_in != c_out)
            else nn.Identity()
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = torch.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return torch.relu(out + self.skip(x))


class SmallResNet(nn.Module):
    """Compact residual CNN for CPU-budget runs and tests.

    Three stages (16/32/64 channels), global average pooling, linear head.
    """

    def __init__(self, out_features: int):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(3, 16, 3, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(16),
            nn.ReLU(inplace=True),
        )
        self.stage1 = _Residual(16, 16)
        self.stage2 = _Residual(16, 32, stride=2)
        self.stage3 = _Residual(32, 64, stride=2)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(64, out_features)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.stem(x)
        x = self.stage1(x)
        x = self.stage2(x)
        x = self.stage3(x)
        x = self.pool(x).flatten(1)
        return self.fc(x)


def build_backbone(backbone_id: str, out_features: int) -> nn.Module:
    """Backbone with its final layer replaced by a fresh linear head.

    ``resnet18``/``resnet34`` request pretrained weights and raise
    WeightsUnavailableError when the weight download fails; the ``-random``
    variants and ``smallnet`` never touch the network.
    """
    if backbone_id == "smallnet":
        return SmallResNet(out_features)
    from torchvision import models

    name = backbone_id.removesuffix("-random")
    pretrained = not backbone_id.endswith("-random")
    factory = {"resnet18": models.resnet18, "resnet34": models.resnet34}[name]
    if pretrained:
        weights = {"resnet18": models.ResNet18_Weights, "resnet34": models.ResNet34_Weights}[name]
        try:
            model = factory(weights=weights.IMAGENET1K_V1)
        except Exception as exc:  # urllib wraps many error types
            raise WeightsUnavailableError(
                f"could not fetch pretrained weights for {name!r} ({exc}); "
                f"use '{name}-random' or 'smallnet' for offline runs"
            ) from exc
    else:
        model = factory(weights=None)
    model.fc = nn.Linear(model.fc.in_features, out_features)
    return model


def _eval_transform(input_px: int) -> transforms.Compose:
    return transforms.Compose(
        [
            transforms.Resize((input_px, input_px)),
            transforms.ToTensor(),
            transforms.Normalize(NORMALIZE_MEAN, NORMALIZE_STD),
        ]
    )


def _train_transform(config: TrainConfig) -> transforms.Compose:
    if config.augmentation == "none":
        return _eval_transform(config.input_px)
    # flips/crops suit single-category photos; mosaics keep augmentation off
    # because flipping would permute the positional category encoding
    inflated = max(config.input_px + 4, int(round(config.input_px * 1.15)))
    return transforms.Compose(
        [
            transforms.Resize((inflated, inflated)),
            transforms.RandomCrop(config.input_px),
            transforms.RandomHorizontalFlip(),
            transforms.ToTensor(),
            transforms.Normalize(NORMALIZE_MEAN, NORMALIZE_STD),
        ]
    )


class _ImageDataset(Dataset):
    def __init__(self, samples: Sequence[LabeledImage], transform, target_dtype: torch.dtype):
        self.samples = list(samples)
        self.transform = transform
        self.target_dtype = target_dtype

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, index: int):
        sample = self.samples[index]
        with Image.open(sample.path) as img:
            tensor = self.transform(img.convert("RGB"))
        return tensor, torch.tensor(sample.target, dtype=self.target_dtype)


@dataclass
class ModelCheckpoint:
    """Self-contained trained model: config snapshot + weights."""

    task: str
    config: TrainConfig
    state_dict: dict[str, torch.Tensor]
    best_epoch: int
    created_at: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())

    def build_model(self) -> nn.Module:
        out_features = 1 if self.task == "regression" else 2
        if self.config.backbone_id in ("resnet18", "resnet34"):
            # weights are about to be overwritten; skip the pretrained fetch
            model = build_backbone(self.config.backbone_id + "-random", out_features)
        else:
            model = build_backbone(self.config.backbone_id, out_features)
        model.load_state_dict(self.state_dict)
        model.eval()
        return model

    def save(self, path: Path | str) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "schema_version": CHECKPOINT_SCHEMA,
            "task": self.task,
            "config": asdict(self.config),
            "state_dict": self.state_dict,
            "best_epoch": self.best_epoch,
            "created_at": self.created_at,
        }
        torch.save(payload, path)
        return path

    @classmethod
    def load(cls, path: Path | str) -> "ModelCheckpoint":
        payload = torch.load(Path(path), map_location="cpu", weights_only=True)
        if payload.get("schema_version") != CHECKPOINT_SCHEMA:
            raise ModelingError(f"unsupported checkpoint schema in {path}")
        return cls(
            task=payload["task"],
            config=TrainConfig(**payload["config"]),
            state_dict=payload["state_dict"],
            best_epoch=payload["best_epoch"],
            created_at=payload["created_at"],
        )


def _seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def _snapshot(model: nn.Module) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


@torch.no_grad()
def _predict_tensor(model: nn.Module, samples: Sequence[LabeledImage], config: TrainConfig) -> torch.Tensor:
    """Raw model outputs for a sample list, batch order preserved."""
    model.eval()
    transform = _eval_transform(config.input_px)
    outputs = []
    for start in range(0, len(samples), config.batch_size):
        chunk = samples[start : start + config.batch_size]
        batch = torch.stack(
            [transform(Image.open(s.path).convert("RGB")) for s in chunk]
        )
        outputs.append(model(batch))
    return torch.cat(outputs) if outputs else torch.empty(0)


def _regression_metrics(model: nn.Module, valid: Sequence[LabeledImage], config: TrainConfig) -> tuple[dict, RegressionPairs]:
    preds = _predict_tensor(model, valid, config).squeeze(-1).tolist()
    pairs = RegressionPairs(predictions=preds, targets=[s.target for s in valid])
    values = {"rmse": rmse(pairs)}
    try:
        values["r2_score"] = r_squared(pairs)
    except UndefinedMetricError:
        values["r2_score"] = math.nan
    return values, pairs


def _classification_metrics(
    model: nn.Module, valid: Sequence[LabeledImage], config: TrainConfig, beta: float
) -> tuple[dict, "object"]:
    logits = _predict_tensor(model, valid, config)
    pred_labels = logits.argmax(dim=1).tolist()
    cm = confusion([int(s.target) for s in valid], pred_labels)
    summary = classification_summary(cm, beta=beta)
    values = {k: (v if v is not None else math.nan) for k, v in summary.items()}
    return values, cm


def _valid_loss(model: nn.Module, loader: DataLoader, criterion, task: str) -> float:
    model.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for batch, targets in loader:
            outputs = model(batch)
            if task == "regression":
                loss = criterion(outputs.squeeze(-1), targets)
            else:
                loss = criterion(outputs, targets)
            total += float(loss) * len(targets)
            count += len(targets)
    return total / count


def _run_training(
    train: Sequence[LabeledImage],
    valid: Sequence[LabeledImage],
    config: TrainConfig,
    beta: float = 0.8,
) -> tuple[ModelCheckpoint, list[EpochLog]]:
    if not train or not valid:
        raise EmptyDatasetError(
            f"train and valid must be non-empty (got {len(train)}, {len(valid)})"
        )
    if config.task == "classification":
        for name, split in (("train", train), ("valid", valid)):
            labels = {int(s.target) for s in split}
            if not labels <= {0, 1}:
                raise ModelingError(f"{name} labels must be 0/1, got {sorted(labels)}")
            if len(labels) < 2:
                raise SingleClassError(f"{name} split holds a single class {labels}")

    _seed_everything(config.seed)
    out_features = 1 if config.task == "regression" else 2
    model = build_backbone(config.backbone_id, out_features)

    target_dtype = torch.float32 if config.task == "regression" else torch.long
    criterion = nn.MSELoss() if config.task == "regression" else nn.CrossEntropyLoss()
    train_ds = _ImageDataset(train, _train_transform(config), target_dtype)
    valid_ds = _ImageDataset(valid, _eval_transform(config.input_px), target_dtype)
    generator = torch.Generator().manual_seed(config.seed)
    train_loader = DataLoader(
        train_ds, batch_size=config.batch_size, shuffle=True, generator=generator
    )
    valid_loader = DataLoader(valid_ds, batch_size=config.batch_size)

    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    scheduler = torch.optim.lr_scheduler.OneCycleLR(
        optimizer,
        max_lr=config.learning_rate,
        total_steps=config.epochs * max(1, len(train_loader)),
    )

    logs: list[EpochLog] = []
    best_epoch, best_key, best_state = 0, None, None
    fallback_epoch, fallback_loss, fallback_state = 0, math.inf, None

    for epoch in range(1, config.epochs + 1):
        started = time.monotonic()
        model.train()
        running, seen = 0.0, 0
        for batch_idx, (batch, targets) in enumerate(train_loader, start=1):
            optimizer.zero_grad()
            outputs = model(batch)
            if config.task == "regression":
                loss = criterion(outputs.squeeze(-1), targets)
            else:
                loss = criterion(outputs, targets)
            loss_value = loss.detach().item()
            if not math.isfinite(loss_value):
                raise NonFiniteLossError(epoch, batch_idx, loss_value, scheduler.get_last_lr()[0])
            loss.backward()
            optimizer.step()
            scheduler.step()
            running += loss_value * len(targets)
            seen += len(targets)

        valid_loss = _valid_loss(model, valid_loader, criterion, config.task)
        if config.task == "regression":
            metric_values, _ = _regression_metrics(model, valid, config)
            key = -metric_values["rmse"]  # maximize -rmse
        else:
            metric_values, _ = _classification_metrics(model, valid, config, beta)
            key = metric_values["fbeta_score"]  # maximize; nan skipped below
        logs.append(
            EpochLog(
                epoch=epoch,
                train_loss=running / seen,
                valid_loss=valid_loss,
                metric_values=metric_values,
                wall_time_s=time.monotonic() - started,
            )
        )
        log.info(
            "epoch %d train_loss %.6f valid_loss %.6f %s time %.1fs",
            epoch,
            logs[-1].train_loss,
            valid_loss,
            " ".join(f"{k} {v:.6f}" for k, v in metric_values.items()),
            logs[-1].wall_time_s,
        )
        if not math.isnan(key) and (best_key is None or key > best_key):
            best_epoch, best_key, best_state = epoch, key, _snapshot(model)
        if valid_loss < fallback_loss:
            fallback_epoch, fallback_loss, fallback_state = epoch, valid_loss, _snapshot(model)

    if best_state is None:
        # selection metric undefined in every epoch: keep lowest valid loss
        best_epoch, best_state = fallback_epoch, fallback_state
    checkpoint = ModelCheckpoint(
        task=config.task, config=config, state_dict=best_state, best_epoch=best_epoch
    )
    return checkpoint, logs


def train_regressor(
    train: Sequence[LabeledImage], valid: Sequence[LabeledImage], config: TrainConfig
) -> tuple[ModelCheckpoint, list[EpochLog]]:
    """Fit the log-consumption regressor; checkpoint = best validation RMSE."""
    if config.task != "regression":
        raise TaskMismatchError(f"train_regressor needs task='regression', got {config.task!r}")
    return _run_training(train, valid, config)


def train_classifier(
    train: Sequence[LabeledImage],
    valid: Sequence[LabeledImage],
    config: TrainConfig,
    beta: float = 0.8,
) -> tuple[ModelCheckpoint, list[EpochLog]]:
    """Fit the poverty classifier; checkpoint = best validation F-beta."""
    if config.task != "classification":
        raise TaskMismatchError(f"train_classifier needs task='classification', got {config.task!r}")
    if not (math.isfinite(beta) and beta > 0):
        raise ModelingError(f"beta must be positive, got {beta!r}")
    return _run_training(train, valid, config, beta=beta)


class ClassifierOutput(NamedTuple):
    prob_poor: float
    label: int


ImageLike = Path | str | Image.Image


def _as_samples(images: Sequence[ImageLike]) -> list[LabeledImage]:
    samples = []
    for image in images:
        if isinstance(image, Image.Image):
            buffer = io.BytesIO()
            image.convert("RGB").save(buffer, format="PNG")
            buffer.seek(0)
            samples.append(LabeledImage(path=buffer, target=0.0))  # type: ignore[arg-type]
        else:
            samples.append(LabeledImage(path=Path(image), target=0.0))
    return samples


def predict(checkpoint: ModelCheckpoint, images: Sequence[ImageLike]) -> list:
    """Apply a trained model; regression -> reals, classification -> outputs.

    Batch order is preserved; an empty input list yields an empty output.
    """
    if not images:
        return []
    model = checkpoint.build_model()
    outputs = _predict_tensor(model, _as_samples(images), checkpoint.config)
    if checkpoint.task == "regression":
        return [float(v) for v in outputs.squeeze(-1)]
    probs = torch.softmax(outputs, dim=1)[:, 1]
    return [ClassifierOutput(prob_poor=float(p), label=int(p >= 0.5)) for p in probs]


def predict_log_consumption(checkpoint: ModelCheckpoint, images: Sequence[ImageLike]) -> list[float]:
    if checkpoint.task != "regression":
        raise TaskMismatchError(f"checkpoint task is {checkpoint.task!r}, wanted regression output")
    return predict(checkpoint, images)


def predict_poverty(checkpoint: ModelCheckpoint, images: Sequence[ImageLike]) -> list[ClassifierOutput]:
    if checkpoint.task != "classification":
        raise TaskMismatchError(f"checkpoint task is {checkpoint.task!r}, wanted class output")
    return predict(checkpoint, images)


def evaluate(
    checkpoint: ModelCheckpoint, valid: Sequence[LabeledImage], beta: float = 0.8
) -> MetricsReport:
    """Pure evaluation of a checkpoint on a validation set."""
    if not valid:
        raise EmptyDatasetError("valid set must be non-empty")
    model = checkpoint.build_model()
    if checkpoint.task == "regression":
        metric_values, pairs = _regression_metrics(model, valid, checkpoint.config)
        metrics = {"rmse": metric_values["rmse"]}
        if not math.isnan(metric_values["r2_score"]):
            metrics["r2"] = metric_values["r2_score"]
        return MetricsReport(task="regression", n_valid=len(valid), metrics=metrics, pairs=pairs)
    _, cm = _classification_metrics(model, valid, checkpoint.config, beta)
    summary = classification_summary(cm, beta=beta)
    metrics = {k: v for k, v in summary.items() if v is not None}
    return MetricsReport(task="classification", n_valid=len(valid), metrics=metrics, confusion=cm)
