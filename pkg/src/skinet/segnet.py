"""Bayesian MultiResUNet lesion segmenter, a plain U-Net baseline, and their training loop."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .core import BinaryMask, Image, RunningMetrics, ValidationError, binarize
from .layers import MCDropout, ReLU, conv_bn, mc_dropout

log = logging.getLogger(__name__)

RES_PATH_LENGTHS = (4, 3, 2, 1)


class ConstructionError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


# --------------------------------------------------------------------------- configs


@dataclass(frozen=True)
class MultiResBlockSpec:
    in_channels: int
    W: int
    branch_filters: tuple[int, int, int] | None = None
    shortcut_filters: int | None = None

    @classmethod
    def from_budget(cls, in_channels: int, W: int) -> "MultiResBlockSpec":
        a, b = W // 6, W // 3
        return cls(in_channels, W, (a, b, W - a - b), W)

    def resolved(self) -> tuple[tuple[int, int, int], int]:
        branches = self.branch_filters
        if branches is None:
            a, b = self.W // 6, self.W // 3
            branches = (a, b, self.W - a - b)
        shortcut = self.shortcut_filters if self.shortcut_filters is not None else sum(branches)
        return tuple(branches), shortcut


@dataclass(frozen=True)
class ResPathSpec:
    in_channels: int
    filters: int
    length: int


@dataclass(frozen=True)
class SegNetConfig:
    input_shape: tuple[int, int, int] = (224, 224, 3)
    base_W: int = 32
    dropout_rate: float = 0.5
    depth: int = 4
    architecture: str = "multiresunet"  # or "unet" for the baseline
    decoder_dropout: bool = True

    def __post_init__(self):
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValidationError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.base_W < 1 or self.depth < 1:
            raise ValidationError("base_W and depth must be positive")
        if self.architecture not in ("multiresunet", "unet"):
            raise ValidationError(f"unknown segmentation architecture {self.architecture!r}")

    def stage_budgets(self) -> list[int]:
        return [self.base_W * 2**i for i in range(self.depth + 1)]

    def res_path_specs(self) -> list[ResPathSpec]:
        """Res path per encoder stage; length shrinks toward the bridge (4, 3, 2, 1 at depth 4)."""
        specs = []
        for i, w in enumerate(self.stage_budgets()[: self.depth]):
            specs.append(ResPathSpec(w, w, max(1, self.depth - i)))
        return specs


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 16
    epochs: int = 50
    optimizer: str = "adam"
    loss: str = "bce"

    def __post_init__(self):
        if self.learning_rate < 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValidationError("learning_rate must be >= 0, batch_size and epochs >= 1")
        if self.optimizer != "adam":
            raise ValidationError(f"unsupported optimizer {self.optimizer!r}")
        if self.loss not in ("bce", "categorical"):
            raise ValidationError(f"unsupported loss {self.loss!r}")


# --------------------------------------------------------------------------- blocks


class MultiResBlock(nn.Module):
    """Chained 3×3 convs approximating 3×3/5×5/7×7 receptive fields, plus a 1×1 shortcut."""

    def __init__(self, spec: MultiResBlockSpec):
        super().__init__()
        (f1, f2, f3), shortcut = spec.resolved()
        if min(f1, f2, f3, shortcut, spec.in_channels) < 1:
            raise ConstructionError(f"all filter counts must be >= 1, got {spec}")
        if f1 + f2 + f3 != shortcut:
            raise ConstructionError(
                f"concatenated branches give {f1 + f2 + f3} channels but the shortcut has {shortcut}"
            )
        self.conv3 = conv_bn(spec.in_channels, f1, 3)
        self.conv5 = conv_bn(f1, f2, 3)
        self.conv7 = conv_bn(f2, f3, 3)
        self.shortcut = conv_bn(spec.in_channels, shortcut, 1, activation=False)
        self.act = ReLU()
        self.norm = nn.BatchNorm2d(shortcut)
        self.out_channels = shortcut

    def forward(self, x):
        a = self.conv3(x)
        b = self.conv5(a)
        c = self.conv7(b)
        out = torch.cat([a, b, c], dim=1) + self.shortcut(x)
        return self.norm(self.act(out))


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.shortcut = nn.Conv2d(in_ch, out_ch, 1)
        self.act = ReLU()
        self.norm = nn.BatchNorm2d(out_ch)

    def forward(self, x):
        return self.norm(self.act(self.conv(x) + self.shortcut(x)))


class ResPath(nn.Sequential):
    def __init__(self, spec: ResPathSpec):
        if spec.length < 1:
            raise ConstructionError(f"res path length must be >= 1, got {spec.length}")
        if spec.filters < 1 or spec.in_channels < 1:
            raise ConstructionError(f"invalid res path spec {spec}")
        blocks = [ResBlock(spec.in_channels, spec.filters)]
        blocks += [ResBlock(spec.filters, spec.filters) for _ in range(spec.length - 1)]
        super().__init__(*blocks)
        self.spec = spec


def build_multires_block(spec: MultiResBlockSpec) -> MultiResBlock:
    return MultiResBlock(spec)


def build_res_path(spec: ResPathSpec) -> ResPath:
    return ResPath(spec)


# --------------------------------------------------------------------------- networks


class SegModel(nn.Module):
    """Encoder/decoder producing a one-channel sigmoid probability map."""

    def __init__(self, cfg: SegNetConfig):
        super().__init__()
        H, W, C = cfg.input_shape
        if H % 2**cfg.depth or W % 2**cfg.depth:
            raise ConstructionError(f"input {H}×{W} is not divisible by 2^{cfg.depth}")
        self.cfg = cfg
        self.trained = False
        budgets = cfg.stage_budgets()
        multires = cfg.architecture == "multiresunet"

        def block(in_ch, w):
            if multires:
                return MultiResBlock(MultiResBlockSpec.from_budget(in_ch, w))
            return nn.Sequential(conv_bn(in_ch, w, 3), conv_bn(w, w, 3))

        self.encoder = nn.ModuleList()
        self.skips = nn.ModuleList()
        in_ch = C
        for i in range(cfg.depth):
            self.encoder.append(block(in_ch, budgets[i]))
            if multires:
                self.skips.append(ResPath(cfg.res_path_specs()[i]))
            else:
                self.skips.append(nn.Identity())
            in_ch = budgets[i]
        self.pool = nn.MaxPool2d(2)
        self.enc_dropout = nn.ModuleList(MCDropout(cfg.dropout_rate) for _ in range(cfg.depth))
        self.bridge = block(in_ch, budgets[cfg.depth])

        self.up = nn.ModuleList()
        self.decoder = nn.ModuleList()
        self.dec_dropout = nn.ModuleList()
        in_ch = budgets[cfg.depth]
        for i in reversed(range(cfg.depth)):
            self.up.append(nn.ConvTranspose2d(in_ch, in_ch // 2, 2, stride=2))
            self.dec_dropout.append(MCDropout(cfg.dropout_rate) if cfg.decoder_dropout else nn.Identity())
            self.decoder.append(block(in_ch // 2 + budgets[i], budgets[i]))
            in_ch = budgets[i]
        self.head = nn.Conv2d(in_ch, 1, 1)

    def forward(self, x):
        skips = []
        for enc, skip, drop in zip(self.encoder, self.skips, self.enc_dropout):
            x = enc(x)
            skips.append(skip(x))
            x = drop(self.pool(x))
        x = self.bridge(x)
        for up, drop, dec, s in zip(self.up, self.dec_dropout, self.decoder, reversed(skips)):
            x = drop(up(x))
            x = dec(torch.cat([x, s], dim=1))
        return torch.sigmoid(self.head(x))


def build_segnet(cfg: SegNetConfig) -> SegModel:
    return SegModel(cfg)


# --------------------------------------------------------------------------- inference


def _model_dtype(model: nn.Module) -> torch.dtype:
    for p in model.parameters():
        return p.dtype
    return torch.float32


def images_to_tensor(images, dtype=torch.float32) -> torch.Tensor:
    """Stack Images (or H×W×C arrays) into an N×C×H×W tensor."""
    arrs = [im.pixels if isinstance(im, Image) else np.asarray(im) for im in images]
    return torch.from_numpy(np.stack(arrs).transpose(0, 3, 1, 2).copy()).to(dtype)


def _expected_shape(model: nn.Module):
    cfg = getattr(model, "cfg", None)
    return tuple(cfg.input_shape) if cfg is not None else None


def seg_forward_batch(model: nn.Module, images, seeds=None) -> np.ndarray:
    """N×H×W probability maps; dropout sampled per row when ``seeds`` is given."""
    expected = _expected_shape(model)
    for im in images:
        shape = im.shape if isinstance(im, Image) else np.asarray(im).shape
        if expected is not None and tuple(shape) != expected:
            raise ValidationError(f"image shape {tuple(shape)} does not match model input {expected}")
    x = images_to_tensor(images, _model_dtype(model))
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            if seeds is None:
                out = model(x)
            else:
                with mc_dropout(seeds):
                    out = model(x)
    finally:
        model.train(was_training)
    return out[:, 0].double().numpy()


def seg_forward(model: nn.Module, img: Image, stochastic: bool = False, seed: int = 0) -> np.ndarray:
    return seg_forward_batch(model, [img], [seed] if stochastic else None)[0]


def predict_mask(model: nn.Module, img: Image, threshold: float = 0.5) -> BinaryMask:
    return binarize(seg_forward(model, img), threshold)


# --------------------------------------------------------------------------- training


def bce_loss(pred: torch.Tensor, target: torch.Tensor, eps: float = 1e-7) -> torch.Tensor:
    """Binary cross-entropy averaged over every output element."""
    p = pred.clamp(eps, 1 - eps)
    return -(target * torch.log(p) + (1 - target) * torch.log(1 - p)).mean()


@dataclass
class History:
    records: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_value: float = -math.inf

    def append(self, rec: dict) -> None:
        self.records.append(rec)

    def column(self, key: str) -> list:
        return [r[key] for r in self.records]


def _to_arrays(data):
    """Accept a DatasetManifest or an (images, masks) pair of arrays."""
    from .data import DatasetManifest, load_arrays

    if isinstance(data, DatasetManifest):
        return load_arrays(data)
    images, targets = data
    return np.asarray(images, dtype=np.float32), np.asarray(targets)


def evaluate_segmenter(model: nn.Module, images, masks, threshold: float = 0.5, batch_size: int = 16):
    metrics = RunningMetrics()
    for start in range(0, len(images), batch_size):
        maps = seg_forward_batch(model, list(images[start : start + batch_size]))
        for m, truth in zip(maps, masks[start : start + batch_size]):
            metrics.update(binarize(m, threshold), BinaryMask(np.asarray(truth, dtype=bool)))
    return metrics


def train_segnet(model: SegModel, train, val=None, cfg: TrainConfig = TrainConfig(), seed: int = 0):
    """Adam + per-pixel BCE. Returns the best-validation-Dice model and its history.

    ``train``/``val`` are manifests or ``(images, masks)`` array pairs; with no
    validation set the training Dice selects the checkpoint.
    """
    x_train, y_train = _to_arrays(train)
    if len(x_train) == 0:
        raise ValidationError("training set is empty")
    if val is not None:
        x_val, y_val = _to_arrays(val)
        if len(x_val) == 0:
            raise ValidationError("validation set is empty")
    else:
        x_val, y_val = x_train, y_train
    dtype = _model_dtype(model)
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    history = History()
    best_state = copy.deepcopy(model.state_dict())
    for epoch in range(cfg.epochs):
        model.train()
        order = rng.permutation(len(x_train))
        total, seen = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            x = images_to_tensor(x_train[idx], dtype)
            y = torch.from_numpy(y_train[idx].astype(np.float64)).to(dtype)[:, None]
            opt.zero_grad()
            loss = bce_loss(model(x), y)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}")
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            seen += len(idx)
        train_m = evaluate_segmenter(model, x_train, y_train)
        val_m = evaluate_segmenter(model, x_val, y_val)
        rec = {
            "epoch": epoch,
            "loss": total / seen,
            "train_dice": train_m.dice,
            "train_jaccard": train_m.jaccard,
            "val_dice": val_m.dice,
            "val_jaccard": val_m.jaccard,
        }
        history.append(rec)
        log.info("seg epoch %d loss %.4f train DI %.3f val DI %.3f", epoch, rec["loss"], train_m.dice, val_m.dice)
        if val_m.dice > history.best_value:
            history.best_value, history.best_epoch = val_m.dice, epoch
            best_state = copy.deepcopy(model.state_dict())
    model.load_state_dict(best_state)
    model.trained = True
    model.eval()
    return model, history
