"""Weight transfer, supervised fine-tuning, and test-set evaluation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as E
from .checkpoint import Checkpoint
from .data import DatasetManifest, Record, load_image_stack, load_mask_stack
from .errors import CheckpointError, DataError
from .losses import combined_loss
from .metrics import THRESHOLD_SWEEP, confusion, dice_coefficient, evaluate_pair, iou, precision
from .models import ModelArchConfig, SegmentationModel, encoder_state_names
from .optim import Adam, EarlyStopper, PlateauSchedule, TrainConfig, index_batches


def transfer_encoder(ckpt: Checkpoint, model: SegmentationModel) -> SegmentationModel:
    """Overwrite the model's encoder tensors from a pre-training checkpoint.

    Decoder and head keep their fresh initialization. Architecture configs
    must match apart from the seed; the encoder forward path is bitwise
    identical to the checkpointed encoder afterwards.
    """
    ck_arch = ModelArchConfig.from_dict(ckpt.arch)
    if not ck_arch.compatible_with(model.arch):
        raise CheckpointError(
            f"architecture mismatch: checkpoint {ckpt.arch} vs model {model.arch.to_dict()}"
        )
    want = encoder_state_names(model)
    have = set(ckpt.tensors)
    if want != have:
        missing = sorted(want - have)[:5]
        extra = sorted(have - want)[:5]
        raise CheckpointError(
            f"encoder tensor names do not line up; missing={missing}, unexpected={extra}"
        )
    state = model.state()
    for name in sorted(want):
        src = ckpt.tensors[name]
        dst = state[name]
        if dst.data.shape != src.shape:
            raise CheckpointError(
                f"shape mismatch for '{name}': checkpoint {src.shape} vs model {dst.data.shape}"
            )
        dst.data = src.astype(dst.data.dtype, copy=True)
    return model


@dataclass
class FinetuneResult:
    checkpoint: Checkpoint
    history: list[dict]
    epochs_run: int
    best_val_loss: float


def _fold_split(manifest: DatasetManifest, val_fold: int) -> tuple[list[Record], list[Record]]:
    labeled = manifest.labeled_records()
    if not labeled:
        raise DataError("manifest has no labeled records; run limit_labels first")
    if manifest.folds_k is None:
        raise DataError("manifest has no fold assignments; run make_folds first")
    if not 0 <= val_fold < manifest.folds_k:
        raise DataError(f"val_fold {val_fold} outside 0..{manifest.folds_k - 1}")
    train = [r for r in labeled if r.fold != val_fold]
    val = [r for r in labeled if r.fold == val_fold]
    if not train or not val:
        raise DataError(f"fold {val_fold} leaves an empty train or validation set")
    return train, val


def _batched_val_loss(model: SegmentationModel, images, masks, batch_size: int) -> float:
    total, count = 0.0, 0
    with E.no_grad():
        for start in range(0, images.shape[0], batch_size):
            xb = images[start : start + batch_size]
            yb = masks[start : start + batch_size]
            probs = E.sigmoid(model(xb, training=False))
            total += combined_loss(yb, probs).item() * xb.shape[0]
            count += xb.shape[0]
    return total / count


def finetune(model: SegmentationModel, manifest: DatasetManifest, cfg: TrainConfig,
             val_fold: int = 0, log_fn=None) -> FinetuneResult:
    """Minimize the combined loss on labeled records outside `val_fold`.

    The held-out fold provides the validation loss that drives plateau
    decay and early stopping; the best-epoch weights are restored before
    the checkpoint is taken.
    """
    train_recs, val_recs = _fold_split(manifest, val_fold)
    if len(train_recs) < cfg.batch_size:
        raise DataError(
            f"{len(train_recs)} labeled training records < batch size {cfg.batch_size}"
        )
    size, channels = model.arch.input_size, model.arch.input_channels
    x_train = load_image_stack(train_recs, size, channels)
    y_train = load_mask_stack(train_recs, size)
    x_val = load_image_stack(val_recs, size, channels)
    y_val = load_mask_stack(val_recs, size)

    opt = Adam(model.parameters(), lr=cfg.learning_rate)
    sched = PlateauSchedule(cfg)
    stopper = EarlyStopper(cfg, model)
    rng = E.rng_for(cfg.seed, "finetune-shuffle")

    history: list[dict] = []
    epochs_run = 0
    for epoch in range(1, cfg.max_epochs + 1):
        epochs_run = epoch
        losses = []
        for idx in index_batches(x_train.shape[0], cfg.batch_size, rng):
            probs = E.sigmoid(model(x_train[idx], training=True))
            loss = combined_loss(y_train[idx], probs)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        val_loss = _batched_val_loss(model, x_val, y_val, cfg.batch_size)
        opt.lr = sched.update(val_loss)
        history.append(
            {
                "epoch": epoch,
                "train_loss": float(np.mean(losses)),
                "val_loss": val_loss,
                "lr": opt.lr,
            }
        )
        if log_fn:
            log_fn(
                f"finetune epoch {epoch}: train={history[-1]['train_loss']:.5f} "
                f"val={val_loss:.5f} lr={opt.lr:.2e}"
            )
        if stopper.update(val_loss, epoch):
            break
    stopper.restore_best()

    ckpt = Checkpoint.from_module(model, model.arch.to_dict(), "FINETUNE", cfg.seed)
    return FinetuneResult(ckpt, history, epochs_run, float(stopper.best))


def predict_probabilities(model: SegmentationModel, images: np.ndarray,
                          batch_size: int = 8) -> np.ndarray:
    """Inference-mode sigmoid outputs as float64, batched."""
    outs = []
    with E.no_grad():
        for start in range(0, images.shape[0], batch_size):
            logits = model(images[start : start + batch_size], training=False)
            outs.append(E.sigmoid(logits).data.astype(np.float64))
    return np.concatenate(outs, axis=0)


def evaluate(model: SegmentationModel, manifest: DatasetManifest, batch_size: int = 8,
             pooled: bool = False) -> dict:
    """Precision / dice / mean-IoU on the mask-bearing test records.

    Default: per-image metrics averaged over images. `pooled=True` instead
    accumulates pixel counts over the whole test set first.
    """
    records = [r for r in manifest.test_records() if r.mask_path]
    if not records:
        raise DataError("manifest has no mask-bearing test records")
    size, channels = model.arch.input_size, model.arch.input_channels
    images = load_image_stack(records, size, channels)
    masks = load_mask_stack(records, size)
    probs = predict_probabilities(model, images, batch_size)

    if pooled:
        cc = confusion(masks, (probs >= 0.5).astype(np.float64))
        miou = 0.0
        for t in THRESHOLD_SWEEP:
            miou += iou(confusion(masks, (probs >= t).astype(np.float64)))
        result = {
            "precision": precision(cc),
            "dc": dice_coefficient(cc),
            "miou": miou / len(THRESHOLD_SWEEP),
        }
    else:
        rows = [evaluate_pair(masks[i], probs[i]) for i in range(len(records))]
        result = {
            key: float(np.mean([r[key] for r in rows]))
            for key in ("precision", "dc", "miou")
        }
    result["n_images"] = len(records)
    return result
