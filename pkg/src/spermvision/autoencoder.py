"""Step 1: convolutional autoencoder turning frame stacks into feature-images.

The encoder is a chain of 3x3, stride-1, same-padding convolutions
(C -> hidden widths -> F) with ReLU between layers and a linear last layer,
so feature-images keep the input's spatial resolution. The decoder mirrors
it (F -> reversed hidden widths -> C) and ends in a sigmoid, which pins
reconstructions into [0, 1]. Training minimizes mean squared error; only
the encoder survives into step 2.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .core import FeatureImage, FrameStack, InputStackSpec, derive_seed
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; training aborts instead of skipping batches."""

    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch
        self.loss = loss


@dataclass(frozen=True)
class AutoencoderConfig:
    spec: InputStackSpec
    feature_channels: int = 3
    hidden_widths: tuple[int, ...] = (64, 32)
    epochs: int = 2000
    batch_size: int = 16
    learning_rate: float = 1e-3
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.feature_channels <= 0:
            raise ValueError(f"feature_channels must be > 0, got {self.feature_channels}")
        if not self.hidden_widths or any(w <= 0 for w in self.hidden_widths):
            raise ValueError(f"hidden_widths must be non-empty positive ints, got {self.hidden_widths}")
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError("epochs and batch_size must be > 0")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.name,
            "feature_channels": self.feature_channels,
            "hidden_widths": list(self.hidden_widths),
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "rng_seed": self.rng_seed,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "AutoencoderConfig":
        payload = dict(payload)
        payload["spec"] = InputStackSpec.parse(payload["spec"])
        payload["hidden_widths"] = tuple(payload["hidden_widths"])
        return cls(**payload)


def _conv_chain(widths: Sequence[int], output_sigmoid: bool) -> nn.Sequential:
    layers: list[nn.Module] = []
    for i in range(len(widths) - 1):
        layers.append(nn.Conv2d(widths[i], widths[i + 1], kernel_size=3, stride=1, padding=1))
        if i < len(widths) - 2:
            layers.append(nn.ReLU())
    if output_sigmoid:
        layers.append(nn.Sigmoid())
    return nn.Sequential(*layers)


class TrainedAutoencoder:
    """Encoder/decoder pair plus training state (optimizer, shuffle stream, loss history)."""

    def __init__(self, encoder: nn.Module, decoder: nn.Module, config: AutoencoderConfig):
        self.encoder = encoder
        self.decoder = decoder
        self.config = config
        self.loss_history: list[tuple[int, float]] = []
        self.optimizer = torch.optim.Adam(
            list(encoder.parameters()) + list(decoder.parameters()), lr=config.learning_rate
        )
        self._shuffle = torch.Generator().manual_seed(derive_seed(config.rng_seed, "shuffle"))

    @property
    def spec(self) -> InputStackSpec:
        return self.config.spec

    @property
    def feature_channels(self) -> int:
        return self.config.feature_channels


class Encoder:
    """Inference-only encoder restored from a checkpoint."""

    def __init__(self, module: nn.Module, config: AutoencoderConfig):
        self.encoder = module
        self.config = config

    @property
    def spec(self) -> InputStackSpec:
        return self.config.spec

    @property
    def feature_channels(self) -> int:
        return self.config.feature_channels


def build_autoencoder(config: AutoencoderConfig) -> TrainedAutoencoder:
    """Construct an untrained model with seed-reproducible initialization."""
    torch.manual_seed(config.rng_seed)
    c = config.spec.channel_count
    widths = (c, *config.hidden_widths, config.feature_channels)
    encoder = _conv_chain(widths, output_sigmoid=False)
    decoder = _conv_chain(tuple(reversed(widths)), output_sigmoid=True)
    return TrainedAutoencoder(encoder, decoder, config)


def mse_loss(value, reconstruction):
    """Mean of squared elementwise differences over all elements.

    Accepts two equal-shape torch tensors (returns a differentiable tensor)
    or two numpy arrays (returns a float).
    """
    if isinstance(value, torch.Tensor) and isinstance(reconstruction, torch.Tensor):
        if value.shape != reconstruction.shape:
            raise ValueError(f"shape mismatch: {tuple(value.shape)} vs {tuple(reconstruction.shape)}")
        return ((value - reconstruction) ** 2).mean()
    a = np.asarray(value, dtype=np.float64)
    b = np.asarray(reconstruction, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def _stacks_tensor(stacks: Sequence[FrameStack], spec: InputStackSpec) -> torch.Tensor:
    if not stacks:
        raise ValueError("dataset is empty")
    for s in stacks:
        if s.spec is not spec:
            raise ValueError(f"stack from video {s.video_id!r} has spec {s.spec.name}, model expects {spec.name}")
    return torch.from_numpy(np.stack([s.data for s in stacks]))


def train_autoencoder(
    model: TrainedAutoencoder, stacks: Sequence[FrameStack], epochs: int | None = None
) -> TrainedAutoencoder:
    """Gradient-descend reconstruction MSE; one loss_history entry per epoch.

    Calling this repeatedly continues training (optimizer and shuffle state
    live on the model), so chunked runs match a single long run.
    """
    x = _stacks_tensor(stacks, model.config.spec)
    epochs = model.config.epochs if epochs is None else epochs
    model.encoder.train()
    model.decoder.train()
    for _ in range(epochs):
        epoch_index = len(model.loss_history)
        perm = torch.randperm(x.shape[0], generator=model._shuffle)
        batch_losses = []
        for batch_no, idx in enumerate(perm.split(model.config.batch_size)):
            xb = x[idx]
            recon = model.decoder(model.encoder(xb))
            loss = mse_loss(recon, xb)
            loss_value = float(loss.detach())
            if not np.isfinite(loss_value):
                raise TrainingDiverged(epoch_index, batch_no, loss_value)
            model.optimizer.zero_grad()
            loss.backward()
            model.optimizer.step()
            batch_losses.append(loss_value)
        model.loss_history.append((epoch_index, float(np.mean(batch_losses))))
    model.encoder.eval()
    model.decoder.eval()
    return model


def encode(model: TrainedAutoencoder | Encoder, stack: FrameStack) -> FeatureImage:
    """Run the encoder on one stack; deterministic in inference mode."""
    if stack.spec is not model.config.spec:
        raise ValueError(f"stack spec {stack.spec.name} does not match encoder spec {model.config.spec.name}")
    model.encoder.eval()
    with torch.no_grad():
        out = model.encoder(torch.from_numpy(stack.data[None]))
    return FeatureImage(
        data=out[0].numpy(),
        source_video_id=stack.video_id,
        source_start_frame=stack.start_frame,
    )


def decode(model: TrainedAutoencoder, feature: FeatureImage) -> np.ndarray:
    """Reconstruct a stack-shaped array from a feature image; output lies in [0, 1]."""
    if feature.data.shape[0] != model.config.feature_channels:
        raise ValueError(
            f"feature image has {feature.data.shape[0]} channels, decoder expects {model.config.feature_channels}"
        )
    model.decoder.eval()
    with torch.no_grad():
        out = model.decoder(torch.from_numpy(feature.data[None]))
    return out[0].numpy()


def save_loss_history(path, history: Sequence[tuple[int, float]]) -> None:
    from .core import atomic_write_text

    lines = ["epoch,loss"] + [f"{epoch},{repr(loss)}" for epoch, loss in history]
    atomic_write_text(path, "\n".join(lines) + "\n")


def export_encoder(model: TrainedAutoencoder | Encoder, path) -> None:
    """Write the encoder's parameters and config echo to a checkpoint file."""
    state = {name: tensor.detach().cpu().numpy() for name, tensor in model.encoder.state_dict().items()}
    save_checkpoint(path, kind="encoder", config=model.config.to_dict(), state=state)


def import_encoder(path) -> Encoder:
    """Restore an encoder; round-trips are bit-exact in parameters and outputs."""
    _, config_payload, state = load_checkpoint(path, expected_kind="encoder")
    config = AutoencoderConfig.from_dict(config_payload)
    widths = (config.spec.channel_count, *config.hidden_widths, config.feature_channels)
    module = _conv_chain(widths, output_sigmoid=False)
    try:
        module.load_state_dict({name: torch.from_numpy(arr) for name, arr in state.items()})
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: parameters do not fit the declared architecture ({exc})") from None
    module.eval()
    return Encoder(module, config)
