"""SegNet-lite, U-Net-lite and the recurrent-encoder network.

All three map a volume [T, 1, H, W] (or a batch [B, T, 1, H, W]) of contour
slices to per-pixel knot logits of the same shape.
"""
from __future__ import annotations

from typing import Optional

import numpy as np

from ..autodiff import ops
from ..autodiff.tensor import Tensor
from .config import ModelConfig
from .convlstm import BiConvLSTM
from .nn import Decoder, DoubleConv, Module


def _as_batch(volume: Tensor) -> tuple[Tensor, bool]:
    if volume.ndim == 4:
        return ops.reshape(volume, (1,) + volume.shape), True
    if volume.ndim == 5:
        return volume, False
    raise ValueError(f"expected [T,1,H,W] or [B,T,1,H,W], got {volume.shape}")


def _check_spatial(volume: Tensor, config: ModelConfig) -> None:
    h, w = volume.shape[-2:]
    if h % 8 or w % 8:
        raise ValueError(f"spatial size {h}x{w} is not divisible by 8")
    if volume.shape[-3] != 1:
        raise ValueError(f"expected a single input channel, got {volume.shape[-3]}")


class SegmentationNet(Module):
    config: ModelConfig

    def forward(self, volume: Tensor, rng: Optional[np.random.Generator] = None) -> Tensor:
        _check_spatial(volume, self.config)
        batch, squeeze = _as_batch(volume)
        logits = self.forward_batch(batch, rng)
        return ops.reshape(logits, volume.shape) if squeeze else logits

    def forward_batch(self, batch: Tensor, rng: Optional[np.random.Generator]) -> Tensor:
        raise NotImplementedError


class FeedforwardNet(SegmentationNet):
    """Per-slice encoder/decoder; the T axis folds into the batch axis."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator, skips: bool):
        super().__init__()
        self.config = config
        self.use_skips = skips
        c1, c2, c3 = config.encoder_channels
        m, eps = config.bn_momentum, config.bn_eps
        self.enc0 = DoubleConv(1, c1, rng, m, eps)
        self.enc1 = DoubleConv(c1, c2, rng, m, eps)
        self.enc2 = DoubleConv(c2, c3, rng, m, eps)
        skip_channels = [c2, c1, 1] if skips else None
        self.decoder = Decoder(c3, list(config.decoder_channels), rng, skip_channels, m, eps,
                               config.head_bias)

    def forward_batch(self, batch: Tensor, rng=None) -> Tensor:
        B, T = batch.shape[:2]
        x0 = ops.reshape(batch, (B * T,) + batch.shape[2:])
        p1 = ops.maxpool2(self.enc0(x0))
        p2 = ops.maxpool2(self.enc1(p1))
        p3 = ops.maxpool2(self.enc2(p2))
        skips = [p2, p1, x0] if self.use_skips else None
        return ops.reshape(self.decoder(p3, skips), batch.shape)


class SegNetLite(FeedforwardNet):
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__(config, rng, skips=False)


class UNetLite(FeedforwardNet):
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__(config, rng, skips=True)


class ConvLSTMNet(SegmentationNet):
    """Bidirectional ConvLSTM encoder, dropout, per-slice feedforward decoder."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        c1, c2, c3 = config.encoder_channels
        fb = config.forget_bias
        self.enc0 = BiConvLSTM(1, c1, rng, fb)
        self.enc1 = BiConvLSTM(c1, c2, rng, fb)
        self.enc2 = BiConvLSTM(c2, c3, rng, fb)
        self.decoder = Decoder(c3, list(config.decoder_channels), rng, None,
                               config.bn_momentum, config.bn_eps, config.head_bias)
        self.rng = rng

    def forward_batch(self, batch: Tensor, rng: Optional[np.random.Generator] = None) -> Tensor:
        B, T = batch.shape[:2]
        seq = [ops.take(batch, t, axis=1) for t in range(T)]
        for block in (self.enc0, self.enc1, self.enc2):
            seq = [ops.maxpool2(h) for h in block(seq)]
        feats = ops.concat(seq, axis=0)  # t-major: row t*B + b
        if self.training and self.config.dropout_p > 0:
            feats = ops.dropout(feats, self.config.dropout_p, True, rng if rng is not None else self.rng)
        logits = self.decoder(feats)
        logits = ops.reshape(logits, (T, B) + logits.shape[1:])
        return ops.transpose(logits, (1, 0, 2, 3, 4))


ARCHITECTURES = {"segnet": SegNetLite, "unet": UNetLite, "convlstm": ConvLSTMNet}


def build_model(config: ModelConfig, seed: int = 0) -> SegmentationNet:
    """Deterministic construction: same (config, seed) -> same weights and names."""
    rng = np.random.default_rng(seed)
    return ARCHITECTURES[config.variant](config, rng)


def crnn_forward(volume: Tensor, model: ConvLSTMNet, mode: str = "eval",
                 rng: Optional[np.random.Generator] = None) -> Tensor:
    model.train(mode == "train")
    return model(volume, rng)


def segnet_forward(volume: Tensor, model: SegNetLite, mode: str = "eval") -> Tensor:
    model.train(mode == "train")
    return model(volume)


def unet_forward(volume: Tensor, model: UNetLite, mode: str = "eval") -> Tensor:
    model.train(mode == "train")
    return model(volume)
