"""Step 2: CNN regression from feature-images to a motility or morphology triple.

A backbone (ResNet-34 or a small test CNN) gets its classification layer
replaced by a 3-output linear head. When the encoder's feature channel count
differs from 3, the backbone's first convolution is swapped for one that
accepts that many channels, initialized by mean-replicating the original
kernel across input channels. Predictions are unclamped during training;
clamping to [0, 100] happens only at video-level aggregation.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .autoencoder import Encoder, TrainedAutoencoder, TrainingDiverged
from .checkpoint import load_checkpoint, save_checkpoint
from .core import FrameStack, TaskKind, derive_seed
from .ingestion import SamplingPlan, VideoSource, sample_stacks

BACKBONES = ("resnet34_pretrained", "resnet34_random", "tiny_cnn")
LOSSES = ("l1", "l2")

WEIGHTS_DIR_ENV = "SPERMVISION_WEIGHTS_DIR"


class PretrainedWeightsUnavailable(RuntimeError):
    """Pretrained backbone weights could not be loaded; there is no silent random fallback."""


@dataclass(frozen=True)
class RegressorConfig:
    task: TaskKind
    backbone: str = "resnet34_pretrained"
    input_channels: int = 3
    freeze_encoder: bool = True
    loss: str = "l1"
    epochs: int = 100
    batch_size: int = 16
    learning_rate: float = 1e-3
    rng_seed: int = 0

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}; choose from {BACKBONES}")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}; choose from {LOSSES}")
        if self.input_channels <= 0:
            raise ValueError(f"input_channels must be > 0, got {self.input_channels}")
        if self.epochs <= 0 or self.batch_size <= 0 or self.learning_rate <= 0:
            raise ValueError("epochs, batch_size and learning_rate must be > 0")

    def to_dict(self) -> dict:
        return {
            "task": self.task.value,
            "backbone": self.backbone,
            "input_channels": self.input_channels,
            "freeze_encoder": self.freeze_encoder,
            "loss": self.loss,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "rng_seed": self.rng_seed,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "RegressorConfig":
        payload = dict(payload)
        payload["task"] = TaskKind.parse(payload["task"])
        return cls(**payload)


class TinyCnn(nn.Module):
    """Three stride-2 conv blocks, global average pool, 3-wide linear head.

    Small enough for CPU tests that must not download pretrained weights.
    """

    def __init__(self, in_channels: int):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(in_channels, 16, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1),
            nn.ReLU(),
        )
        self.head = nn.Linear(64, 3)

    def forward(self, x):
        h = self.features(x).mean(dim=(2, 3))
        return self.head(h)


def _adapt_first_conv(conv: nn.Conv2d, in_channels: int) -> nn.Conv2d:
    """Replace a conv's input width, initializing by channel-wise mean replication."""
    adapted = nn.Conv2d(
        in_channels,
        conv.out_channels,
        kernel_size=conv.kernel_size,
        stride=conv.stride,
        padding=conv.padding,
        bias=conv.bias is not None,
    )
    with torch.no_grad():
        mean_kernel = conv.weight.mean(dim=1, keepdim=True)
        adapted.weight.copy_(mean_kernel.repeat(1, in_channels, 1, 1))
        if conv.bias is not None:
            adapted.bias.copy_(conv.bias)
    return adapted


def _build_resnet34(pretrained: bool, in_channels: int) -> nn.Module:
    from torchvision import models

    if pretrained:
        weights_dir = os.environ.get(WEIGHTS_DIR_ENV)
        if weights_dir:
            torch.hub.set_dir(weights_dir)
        try:
            net = models.resnet34(weights=models.ResNet34_Weights.IMAGENET1K_V1)
        except Exception as exc:
            raise PretrainedWeightsUnavailable(
                f"could not load pretrained ResNet-34 weights ({exc}); "
                f"populate the cache (env {WEIGHTS_DIR_ENV}) or use resnet34_random/tiny_cnn"
            ) from exc
    else:
        net = models.resnet34(weights=None)
    net.fc = nn.Linear(net.fc.in_features, 3)
    if in_channels != 3:
        net.conv1 = _adapt_first_conv(net.conv1, in_channels)
    return net


class TrainedRegressor:
    """Backbone-with-head module plus training state."""

    def __init__(self, model: nn.Module, config: RegressorConfig):
        self.model = model
        self.config = config
        self.loss_history: list[tuple[int, float]] = []
        self.optimizer: torch.optim.Optimizer | None = None
        self._shuffle = torch.Generator().manual_seed(derive_seed(config.rng_seed, "shuffle"))

    @property
    def head(self) -> nn.Linear:
        return self.model.fc if hasattr(self.model, "fc") else self.model.head


def build_regressor(config: RegressorConfig) -> TrainedRegressor:
    """Construct the configured backbone with a fresh 3-output head."""
    torch.manual_seed(config.rng_seed)
    if config.backbone == "tiny_cnn":
        model = TinyCnn(config.input_channels)
    else:
        model = _build_resnet34(config.backbone == "resnet34_pretrained", config.input_channels)
    return TrainedRegressor(model, config)


def _check_compatible(encoder: TrainedAutoencoder | Encoder, regressor: TrainedRegressor) -> None:
    if encoder.config.feature_channels != regressor.config.input_channels:
        raise ValueError(
            f"encoder produces {encoder.config.feature_channels} feature channels but regressor "
            f"expects {regressor.config.input_channels}"
        )


def _encode_batch(encoder: TrainedAutoencoder | Encoder, xb: torch.Tensor, frozen: bool) -> torch.Tensor:
    if frozen:
        encoder.encoder.eval()
        with torch.no_grad():
            return encoder.encoder(xb)
    encoder.encoder.train()
    return encoder.encoder(xb)


def forward(
    encoder: TrainedAutoencoder | Encoder, regressor: TrainedRegressor, stack: FrameStack
) -> tuple[float, float, float]:
    """Predict one unclamped triple: head(backbone(encode(stack)))."""
    if stack.spec is not encoder.config.spec:
        raise ValueError(f"stack spec {stack.spec.name} does not match encoder spec {encoder.config.spec.name}")
    _check_compatible(encoder, regressor)
    regressor.model.eval()
    with torch.no_grad():
        feats = _encode_batch(encoder, torch.from_numpy(stack.data[None]), frozen=True)
        pred = regressor.model(feats)[0]
    return tuple(float(v) for v in pred)


def _regression_loss(pred: torch.Tensor, target: torch.Tensor, kind: str) -> torch.Tensor:
    if kind == "l1":
        return (pred - target).abs().mean()
    return ((pred - target) ** 2).mean()


def train_regressor(
    encoder: TrainedAutoencoder | Encoder,
    regressor: TrainedRegressor,
    dataset: Sequence[tuple[FrameStack, tuple[float, float, float]]],
    epochs: int | None = None,
) -> TrainedRegressor:
    """Gradient-descend the configured loss over (stack, target-triple) pairs.

    With freeze_encoder the encoder's parameters are untouched (features are
    extracted once, under no_grad); otherwise encoder and regressor train
    jointly.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    spec = encoder.config.spec
    for stack, target in dataset:
        if stack.spec is not spec:
            raise ValueError(f"stack from video {stack.video_id!r} has spec {stack.spec.name}, expected {spec.name}")
        if len(target) != 3 or not all(np.isfinite(v) for v in target):
            raise ValueError(f"target triple {target!r} is not three finite reals")
    _check_compatible(encoder, regressor)
    config = regressor.config
    x = torch.from_numpy(np.stack([s.data for s, _ in dataset]))
    y = torch.tensor([list(t) for _, t in dataset], dtype=torch.float32)

    frozen = config.freeze_encoder
    if regressor.optimizer is None:
        params = list(regressor.model.parameters())
        if not frozen:
            params += list(encoder.encoder.parameters())
        regressor.optimizer = torch.optim.Adam(params, lr=config.learning_rate)
    if frozen:
        feats_all = _encode_batch(encoder, x, frozen=True)

    epochs = config.epochs if epochs is None else epochs
    regressor.model.train()
    for _ in range(epochs):
        epoch_index = len(regressor.loss_history)
        perm = torch.randperm(x.shape[0], generator=regressor._shuffle)
        batch_losses = []
        for batch_no, idx in enumerate(perm.split(config.batch_size)):
            feats = feats_all[idx] if frozen else _encode_batch(encoder, x[idx], frozen=False)
            pred = regressor.model(feats)
            loss = _regression_loss(pred, y[idx], config.loss)
            loss_value = float(loss.detach())
            if not np.isfinite(loss_value):
                raise TrainingDiverged(epoch_index, batch_no, loss_value)
            regressor.optimizer.zero_grad()
            loss.backward()
            regressor.optimizer.step()
            batch_losses.append(loss_value)
        regressor.loss_history.append((epoch_index, float(np.mean(batch_losses))))
    regressor.model.eval()
    return regressor


def aggregate_predictions(triples: Sequence[tuple[float, float, float]]) -> tuple[float, float, float]:
    """Mean the per-stack triples, then clamp each component into [0, 100]."""
    if not triples:
        raise ValueError("no predictions to aggregate")
    mean = np.mean(np.asarray(triples, dtype=np.float64), axis=0)
    return tuple(float(v) for v in np.clip(mean, 0.0, 100.0))


def predict_video(
    encoder: TrainedAutoencoder | Encoder,
    regressor: TrainedRegressor,
    source: VideoSource,
    plan: SamplingPlan,
    frame_size: int = 256,
    frames: np.ndarray | None = None,
) -> tuple[float, float, float]:
    """Per-video prediction: mean of per-stack outputs over the plan's stacks, clamped."""
    _check_compatible(encoder, regressor)
    stacks = sample_stacks(source, encoder.config.spec, plan, frame_size, frames)
    regressor.model.eval()
    with torch.no_grad():
        xb = torch.from_numpy(np.stack([s.data for s in stacks]))
        feats = _encode_batch(encoder, xb, frozen=True)
        preds = regressor.model(feats).numpy()
    return aggregate_predictions([tuple(row) for row in preds])


def export_regressor(regressor: TrainedRegressor, path) -> None:
    """Write the regressor checkpoint (same container as encoder checkpoints)."""
    state = {name: tensor.detach().cpu().numpy() for name, tensor in regressor.model.state_dict().items()}
    save_checkpoint(path, kind="regressor", config=regressor.config.to_dict(), state=state)


def import_regressor(path) -> TrainedRegressor:
    """Restore a regressor checkpoint bit-exactly."""
    _, config_payload, state = load_checkpoint(path, expected_kind="regressor")
    config = RegressorConfig.from_dict(config_payload)
    if config.backbone == "resnet34_pretrained":
        # parameters come from the checkpoint; no download needed at import time
        regressor = TrainedRegressor(_build_resnet34(False, config.input_channels), config)
    else:
        regressor = build_regressor(config)
    regressor.model.load_state_dict({name: torch.from_numpy(arr) for name, arr in state.items()})
    regressor.model.eval()
    return regressor
