"""Barlow Twins pre-training for the segmentation encoder.

Two random distortions of every image (area crop resized back, rotation
with reflect padding) pass through one shared encoder and projection
head. The d x d cross-correlation matrix of the batch-standardized
embeddings is pushed toward identity: diagonal terms enforce invariance
across views, off-diagonal terms (weighted by the trade-off coefficient,
0.2 by default) decorrelate embedding dimensions. Projection-head weights
are discarded after pre-training; only encoder weights transfer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import ndimage

from . import engine as E
from .blocks import BatchNorm
from .checkpoint import Checkpoint
from .engine import Module, ModuleList, Tensor
from .errors import ConfigError, DataError, ShapeError
from .models import EncoderOnly
from .optim import Adam, EarlyStopper, PlateauSchedule, TrainConfig, index_batches


@dataclass(frozen=True)
class BTConfig:
    lambda_: float = 0.2
    crop_scale: tuple[float, float] = (0.6, 1.0)
    rotation_degrees: tuple[float, float] = (-30.0, 30.0)
    batch_size: int = 16
    epochs: int = 100
    projection_blocks: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.lambda_ <= 0:
            raise ConfigError("trade-off lambda must be positive")
        lo, hi = self.crop_scale
        if not 0.0 < lo <= hi <= 1.0:
            raise ConfigError(f"crop_scale must satisfy 0 < lo <= hi <= 1, got {self.crop_scale}")
        if self.rotation_degrees[0] > self.rotation_degrees[1]:
            raise ConfigError("rotation range must be ordered")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (cross-correlation over a batch)")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.projection_blocks < 1:
            raise ConfigError("projection_blocks must be >= 1")


def embedding_dim(input_size: int) -> int:
    """Projection width rule: half the spatial input dimension."""
    return input_size // 2


# -- augmentation ------------------------------------------------------------


def _resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of (h, w, c), half-pixel-centered sampling."""
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img
    ys = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0).astype(img.dtype)[:, None, None]
    wx = (xs - x0).astype(img.dtype)[None, :, None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def _distort(img: np.ndarray, size: int, cfg: BTConfig, rng: np.random.Generator) -> np.ndarray:
    scale = rng.uniform(*cfg.crop_scale)
    side = int(round(size * math.sqrt(scale)))
    if side < 1:
        raise DataError(f"crop scale {scale} yields an empty crop at size {size}")
    top = int(rng.integers(0, size - side + 1))
    left = int(rng.integers(0, size - side + 1))
    angle = float(rng.uniform(*cfg.rotation_degrees))
    out = img
    if side != size:
        out = _resize_bilinear(out[top : top + side, left : left + side], size, size)
    if angle != 0.0:
        out = ndimage.rotate(out, angle, axes=(1, 0), reshape=False, order=1, mode="reflect")
    return out


def augment_pair(batch: np.ndarray, cfg: BTConfig,
                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Two independently distorted views per image, deterministic in rng."""
    if batch.ndim != 4 or batch.shape[0] < 1:
        raise ShapeError(f"expected a non-empty (n, s, s, c) batch, got {batch.shape}")
    size = batch.shape[1]
    view_a = np.empty_like(batch)
    view_b = np.empty_like(batch)
    for i, img in enumerate(batch):
        view_a[i] = _distort(img, size, cfg, rng)
        view_b[i] = _distort(img, size, cfg, rng)
    return view_a, view_b


# -- projection head ---------------------------------------------------------


class Linear(Module):
    def __init__(self, c_in: int, c_out: int, *, rng, dtype):
        super().__init__()
        self.weight = E.he_uniform(rng, (c_in, c_out), c_in, dtype)
        self.bias = E.zeros_param((c_out,), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class ProjectionHead(Module):
    """GAP, then (FC + ReLU + BN) blocks, then a plain FC to the embedding."""

    def __init__(self, in_features: int, embed_dim: int, blocks: int = 2, *,
                 rng, dtype=np.float32):
        super().__init__()
        self.embed_dim = embed_dim
        self.blocks = ModuleList()
        width = in_features
        for _ in range(blocks):
            self.blocks.append(Linear(width, embed_dim, rng=rng, dtype=dtype))
            self.blocks.append(BatchNorm(embed_dim, dtype=dtype))
            width = embed_dim
        self.final = Linear(width, embed_dim, rng=rng, dtype=dtype)

    def __call__(self, features: Tensor, training: bool) -> Tensor:
        if features.data.ndim != 4:
            raise ShapeError(f"projection expects (n, h, w, c), got {features.data.shape}")
        if training and features.data.shape[0] < 2:
            raise ShapeError("projection head needs a batch of at least 2 (batch norm)")
        h = features.mean(axis=(1, 2))  # global average pooling -> (n, c)
        stack = list(self.blocks)
        for linear, bn in zip(stack[0::2], stack[1::2]):
            h = bn(E.relu(linear(h)), training)
        return self.final(h)


def build_projection_head(encoder: EncoderOnly, cfg: BTConfig, *, dtype=np.float32
                          ) -> ProjectionHead:
    return ProjectionHead(
        encoder.arch.bottleneck_width(),
        embedding_dim(encoder.arch.input_size),
        cfg.projection_blocks,
        rng=E.rng_for(cfg.seed, "projection"),
        dtype=dtype,
    )


def project(features: Tensor, head: ProjectionHead, training: bool = True) -> Tensor:
    return head(features, training)


# -- cross-correlation and loss ------------------------------------------------


STD_EPS = 1e-12
NORM_EPS = 1e-12


def standardize_embeddings(z: Tensor) -> Tensor:
    """Per-dimension (z - mean) / std over the batch axis."""
    if z.data.shape[0] < 2:
        raise ShapeError("standardization needs at least 2 rows")
    mu = z.mean(axis=0, keepdims=True)
    centered = z - mu
    var = (centered * centered).mean(axis=0, keepdims=True)
    return centered / (var.sqrt() + STD_EPS)


def cross_correlation(za: Tensor, zb: Tensor, standardize: bool = True) -> Tensor:
    """Column-normalized correlation matrix of two embedding batches.

    C[i, j] = sum_b za[b, i] zb[b, j] / (||za[:, i]|| ||zb[:, j]||), computed
    on batch-standardized embeddings unless `standardize=False` (raw mode,
    used by value tests).
    """
    za, zb = E.as_tensor(za), E.as_tensor(zb)
    if za.data.shape != zb.data.shape or za.data.ndim != 2:
        raise ShapeError(
            f"embeddings must be equal-shape (n, d) matrices, got "
            f"{za.data.shape} vs {zb.data.shape}"
        )
    if not (np.isfinite(za.data).all() and np.isfinite(zb.data).all()):
        raise ValueError("embeddings contain NaN or Inf")
    if standardize:
        za = standardize_embeddings(za)
        zb = standardize_embeddings(zb)
    d = za.data.shape[1]
    na = (za * za).sum(axis=0).sqrt().reshape(d, 1)
    nb = (zb * zb).sum(axis=0).sqrt().reshape(1, d)
    return (E.transpose2d(za) @ zb) / (na * nb + NORM_EPS)


def bt_loss(c: Tensor, lambda_: float = 0.2) -> Tensor:
    """Invariance term plus lambda-weighted redundancy-reduction term."""
    c = E.as_tensor(c)
    d0, d1 = c.data.shape
    if d0 != d1:
        raise ShapeError(f"cross-correlation matrix must be square, got {c.data.shape}")
    eye = np.eye(d0, dtype=c.data.dtype)
    invariance = (((1.0 - c) * eye) ** 2).sum()
    redundancy = ((c * (1.0 - eye)) ** 2).sum()
    return invariance + redundancy * lambda_


# -- pre-training loop ---------------------------------------------------------


@dataclass
class PretrainResult:
    checkpoint: Checkpoint
    history: list[dict]
    step_losses: list[float]
    epochs_run: int

    @property
    def final_loss(self) -> float:
        return self.history[-1]["loss"] if self.history else float("nan")


def pretrain(encoder: EncoderOnly, head: ProjectionHead, images: np.ndarray,
             bt_cfg: BTConfig, train_cfg: TrainConfig,
             log_fn: Callable[[str], None] | None = None) -> PretrainResult:
    """Minimize the redundancy-reduction loss over two augmented views.

    Both views flow through the same encoder/head parameters (weight
    sharing, not copies). Early stopping and plateau decay monitor the
    training loss since pre-training has no labels. The returned
    checkpoint holds encoder weights only.
    """
    if images.ndim != 4:
        raise ShapeError(f"expected (n, s, s, c) images, got {images.shape}")
    if images.shape[0] < 2 or bt_cfg.batch_size < 2:
        raise DataError("pre-training needs at least 2 images and batch_size >= 2")

    class _Both(Module):
        # registers the inner Encoder so state names match EncoderOnly's
        def __init__(self):
            super().__init__()
            self.encoder = encoder.encoder
            self.projection = head

    both = _Both()
    opt = Adam(both.parameters(), lr=train_cfg.learning_rate)
    sched = PlateauSchedule(train_cfg)
    stopper = EarlyStopper(train_cfg, both)
    shuffle_rng = E.rng_for(train_cfg.seed, "pretrain-shuffle")
    augment_rng = E.rng_for(bt_cfg.seed, "augment")

    history: list[dict] = []
    step_losses: list[float] = []
    epochs_run = 0
    for epoch in range(1, bt_cfg.epochs + 1):
        epochs_run = epoch
        epoch_losses = []
        for idx in index_batches(images.shape[0], bt_cfg.batch_size, shuffle_rng):
            view_a, view_b = augment_pair(images[idx], bt_cfg, augment_rng)
            za = head(encoder(view_a, training=True), training=True)
            zb = head(encoder(view_b, training=True), training=True)
            loss = bt_loss(cross_correlation(za, zb), bt_cfg.lambda_)
            opt.zero_grad()
            loss.backward()
            opt.step()
            value = loss.item()
            step_losses.append(value)
            epoch_losses.append(value)
            if log_fn:
                log_fn(f"pretrain step {len(step_losses)}: bt_loss={value:.5f}")
        mean_loss = float(np.mean(epoch_losses))
        opt.lr = sched.update(mean_loss)
        history.append({"epoch": epoch, "loss": mean_loss, "lr": opt.lr})
        if log_fn:
            log_fn(f"pretrain epoch {epoch}: loss={mean_loss:.5f} lr={opt.lr:.2e}")
        if stopper.update(mean_loss, epoch):
            break
    stopper.restore_best()

    ckpt = Checkpoint.from_module(
        both, encoder.arch.to_dict(), "PRETRAIN", train_cfg.seed, prefix="encoder/"
    )
    return PretrainResult(ckpt, history, step_losses, epochs_run)
