"""Dropout-augmented lesion classifiers and their training loop.

Backbones are built from their published layer recipes (DenseNet-169:
growth 32, blocks 6/12/32/32; ResNet-50: bottlenecks 3/4/6/3) using the
package's own ReLU so guided backpropagation can intercept every unit.
Pretrained weights are optional and loaded through ``load_state_dict``.
"""

from __future__ import annotations

import copy
import logging
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .core import CLASS_LABELS, Image, ProbabilityVector, ValidationError
from .data import AugmentationSpec, balance_by_augmentation
from .layers import MCDropout, ReLU, mc_dropout
from .segnet import ConstructionError, History, TrainConfig, TrainingDivergedError, images_to_tensor

log = logging.getLogger(__name__)

BACKBONES = ("densenet169_style", "resnet50_style", "desk_cnn")
_DEFAULT_POSITIONS = {
    "densenet169_style": "after_dense_blocks",
    "resnet50_style": "after_stages",
    "desk_cnn": "after_stages",
}


@dataclass(frozen=True)
class ClassifierConfig:
    backbone: str = "densenet169_style"
    dropout_rate: float = 0.5
    dropout_positions: str | tuple[str, ...] | None = None
    num_classes: int = 7
    input_shape: tuple[int, int, int] = (224, 224, 3)
    class_labels: tuple[str, ...] = CLASS_LABELS
    desk_widths: tuple[int, int, int, int] = (16, 32, 64, 64)

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ValidationError(f"unknown backbone {self.backbone!r}; expected one of {BACKBONES}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValidationError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.num_classes < 2:
            raise ValidationError("num_classes must be at least 2")
        if len(self.class_labels) != self.num_classes:
            raise ValidationError(
                f"{len(self.class_labels)} class labels for num_classes={self.num_classes}"
            )

    @property
    def positions(self):
        return self.dropout_positions or _DEFAULT_POSITIONS[self.backbone]


# --------------------------------------------------------------------------- backbones


def _conv_bn_relu(in_ch, out_ch, kernel, stride=1):
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, kernel, stride=stride, padding=kernel // 2, bias=False),
        nn.BatchNorm2d(out_ch),
        ReLU(),
    )


def _desk_stages(cfg: ClassifierConfig):
    stages, in_ch = [], cfg.input_shape[2]
    for i, w in enumerate(cfg.desk_widths, start=1):
        stages.append((f"stage{i}", nn.Sequential(_conv_bn_relu(in_ch, w, 3), nn.MaxPool2d(2))))
        in_ch = w
    return stages, in_ch, "features.stage4"


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, in_ch, width, stride=1):
        super().__init__()
        out_ch = width * self.expansion
        self.conv1 = nn.Conv2d(in_ch, width, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(width)
        self.relu1 = ReLU()
        self.conv2 = nn.Conv2d(width, width, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(width)
        self.relu2 = ReLU()
        self.conv3 = nn.Conv2d(width, out_ch, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(out_ch)
        self.relu3 = ReLU()
        self.downsample = None
        if stride != 1 or in_ch != out_ch:
            self.downsample = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False), nn.BatchNorm2d(out_ch)
            )

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = self.relu1(self.bn1(self.conv1(x)))
        out = self.relu2(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return self.relu3(out + identity)


def _resnet50_stages(cfg: ClassifierConfig):
    stem = nn.Sequential(_conv_bn_relu(cfg.input_shape[2], 64, 7, stride=2), nn.MaxPool2d(3, 2, 1))
    stages = [("stem", stem)]
    in_ch = 64
    for i, (n, width) in enumerate(zip((3, 4, 6, 3), (64, 128, 256, 512)), start=1):
        blocks = []
        for j in range(n):
            stride = 2 if (j == 0 and i > 1) else 1
            blocks.append(Bottleneck(in_ch, width, stride))
            in_ch = width * Bottleneck.expansion
        stages.append((f"stage{i}", nn.Sequential(*blocks)))
    return stages, in_ch, "features.stage4"


class DenseLayer(nn.Module):
    def __init__(self, in_ch, growth, bn_size=4):
        super().__init__()
        self.norm1 = nn.BatchNorm2d(in_ch)
        self.relu1 = ReLU()
        self.conv1 = nn.Conv2d(in_ch, bn_size * growth, 1, bias=False)
        self.norm2 = nn.BatchNorm2d(bn_size * growth)
        self.relu2 = ReLU()
        self.conv2 = nn.Conv2d(bn_size * growth, growth, 3, padding=1, bias=False)

    def forward(self, x):
        new = self.conv2(self.relu2(self.norm2(self.conv1(self.relu1(self.norm1(x))))))
        return torch.cat([x, new], dim=1)


def _transition(in_ch, out_ch):
    return nn.Sequential(
        nn.BatchNorm2d(in_ch), ReLU(), nn.Conv2d(in_ch, out_ch, 1, bias=False), nn.AvgPool2d(2)
    )


def _densenet169_stages(cfg: ClassifierConfig, growth=32, blocks=(6, 12, 32, 32), init=64):
    stages = [("stem", nn.Sequential(_conv_bn_relu(cfg.input_shape[2], init, 7, stride=2), nn.MaxPool2d(3, 2, 1)))]
    ch = init
    for i, n in enumerate(blocks, start=1):
        layers = []
        for _ in range(n):
            layers.append(DenseLayer(ch, growth))
            ch += growth
        stages.append((f"block{i}", nn.Sequential(*layers)))
        if i != len(blocks):
            stages.append((f"trans{i}", _transition(ch, ch // 2)))
            ch //= 2
    stages.append(("final", nn.Sequential(nn.BatchNorm2d(ch), ReLU())))
    return stages, ch, "features.final"


class ClfModel(nn.Module):
    """Backbone → global average pooling → linear head producing class logits."""

    def __init__(self, cfg: ClassifierConfig):
        super().__init__()
        self.cfg = cfg
        self.trained = False
        builder = {
            "desk_cnn": _desk_stages,
            "resnet50_style": _resnet50_stages,
            "densenet169_style": _densenet169_stages,
        }[cfg.backbone]
        stages, out_ch, self.default_cam_layer = builder(cfg)
        names = [n for n, _ in stages]
        after = self._resolve_positions(cfg, names)
        seq = OrderedDict()
        for name, module in stages:
            seq[name] = module
            if name in after:
                seq[f"drop_{name}"] = MCDropout(cfg.dropout_rate)
        self.features = nn.Sequential(seq)
        self.head_dropout = MCDropout(cfg.dropout_rate) if "head" in after else nn.Identity()
        self.fc = nn.Linear(out_ch, cfg.num_classes)

    @staticmethod
    def _resolve_positions(cfg: ClassifierConfig, names: list[str]) -> set[str]:
        pos = cfg.positions
        if isinstance(pos, str):
            if pos == "before_head":
                return {"head"}
            if pos == "after_dense_blocks":
                if cfg.backbone != "densenet169_style":
                    raise ConstructionError("after_dense_blocks only applies to densenet169_style")
                return {n for n in names if n.startswith("block")}
            if pos == "after_stages":
                if cfg.backbone == "densenet169_style":
                    raise ConstructionError("densenet169_style has dense blocks, not stages")
                return {n for n in names if n.startswith("stage")}
            pos = (pos,)
        chosen = set(pos)
        unknown = chosen - set(names) - {"head"}
        if unknown:
            raise ConstructionError(f"unknown dropout position(s) {sorted(unknown)}; valid: {names + ['head']}")
        return chosen

    def forward(self, x):
        x = self.features(x)
        x = torch.flatten(F.adaptive_avg_pool2d(x, 1), 1)
        return self.fc(self.head_dropout(x))


def build_classifier(cfg: ClassifierConfig) -> ClfModel:
    return ClfModel(cfg)


# --------------------------------------------------------------------------- inference


def _dtype(model):
    for p in model.parameters():
        return p.dtype
    return torch.float32


def clf_logits(model: nn.Module, images, seeds=None) -> torch.Tensor:
    cfg = getattr(model, "cfg", None)
    if cfg is not None:
        for im in images:
            shape = im.shape if isinstance(im, Image) else np.asarray(im).shape
            if tuple(shape) != tuple(cfg.input_shape):
                raise ValidationError(f"image shape {tuple(shape)} does not match model input {cfg.input_shape}")
    x = images_to_tensor(images, _dtype(model))
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            if seeds is None:
                return model(x)
            with mc_dropout(seeds):
                return model(x)
    finally:
        model.train(was_training)


def clf_probs_batch(model: nn.Module, images, seeds=None) -> np.ndarray:
    return torch.softmax(clf_logits(model, images, seeds).double(), dim=1).numpy()


def _labels(model) -> tuple[str, ...]:
    cfg = getattr(model, "cfg", None)
    return tuple(cfg.class_labels) if cfg is not None else CLASS_LABELS


def clf_forward(model: nn.Module, img: Image, stochastic: bool = False, seed: int = 0) -> ProbabilityVector:
    probs = clf_probs_batch(model, [img], [seed] if stochastic else None)[0]
    return ProbabilityVector(probs, _labels(model))


def predict_labels(model: nn.Module, images, batch_size: int = 32) -> np.ndarray:
    out = []
    for start in range(0, len(images), batch_size):
        out.append(clf_probs_batch(model, list(images[start : start + batch_size])).argmax(axis=1))
    return np.concatenate(out) if out else np.empty(0, dtype=int)


# --------------------------------------------------------------------------- training


def classification_loss(logits: torch.Tensor, labels: torch.Tensor, kind: str = "bce") -> torch.Tensor:
    """Per-class binary cross-entropy of the softmax against one-hot targets, or plain categorical CE."""
    if kind == "categorical":
        return F.cross_entropy(logits, labels)
    probs = torch.softmax(logits, dim=1).clamp(1e-7, 1 - 1e-7)
    onehot = F.one_hot(labels, logits.shape[1]).to(probs.dtype)
    return -(onehot * torch.log(probs) + (1 - onehot) * torch.log(1 - probs)).mean()


def _to_arrays(data, model):
    from .data import DatasetManifest, load_arrays

    if isinstance(data, DatasetManifest):
        if tuple(data.class_labels) != _labels(model):
            raise ValidationError("manifest class labels differ from the model's label order")
        return load_arrays(data, model.cfg.input_shape[0])
    images, labels = data
    return np.asarray(images, dtype=np.float32), np.asarray(labels, dtype=np.int64)


def train_classifier(
    model: ClfModel,
    train,
    val=None,
    cfg: TrainConfig = TrainConfig(),
    aug: AugmentationSpec | None = None,
    seed: int = 0,
    balance: bool = True,
):
    """Adam training; returns the best-validation-accuracy model and its history.

    When ``balance`` is set, minority classes are oversampled with augmented
    copies (drawn from ``aug``) up to the majority-class count before training.
    """
    x_train, y_train = _to_arrays(train, model)
    if len(x_train) == 0:
        raise ValidationError("training set is empty")
    if np.any((y_train < 0) | (y_train >= model.cfg.num_classes)):
        raise ValidationError("training labels out of range")
    x_val, y_val = _to_arrays(val, model) if val is not None else (x_train, y_train)
    if len(x_val) == 0:
        raise ValidationError("validation set is empty")
    if balance:
        x_fit, y_fit = balance_by_augmentation(x_train, y_train, aug or AugmentationSpec(), seed)
    else:
        x_fit, y_fit = x_train, y_train
    dtype = _dtype(model)
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    history = History()
    best_state = copy.deepcopy(model.state_dict())
    for epoch in range(cfg.epochs):
        model.train()
        order = rng.permutation(len(x_fit))
        total, seen = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            x = images_to_tensor(x_fit[idx], dtype)
            y = torch.from_numpy(np.asarray(y_fit[idx], dtype=np.int64))
            opt.zero_grad()
            loss = classification_loss(model(x), y, cfg.loss)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}")
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            seen += len(idx)
        train_acc = float((predict_labels(model, x_train) == y_train).mean())
        val_acc = float((predict_labels(model, x_val) == y_val).mean())
        rec = {"epoch": epoch, "loss": total / seen, "train_accuracy": train_acc, "val_accuracy": val_acc}
        history.append(rec)
        log.info("clf epoch %d loss %.4f train acc %.3f val acc %.3f", epoch, rec["loss"], train_acc, val_acc)
        if val_acc > history.best_value:
            history.best_value, history.best_epoch = val_acc, epoch
            best_state = copy.deepcopy(model.state_dict())
    model.load_state_dict(best_state)
    model.trained = True
    model.eval()
    return model, history
