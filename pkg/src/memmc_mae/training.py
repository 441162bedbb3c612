"""Masked-pixel training loop with warmup + cosine schedule and random resized crops."""

from __future__ import annotations

import csv
import logging
import math
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import Checkpoint, decode_torch_rng, encode_torch_rng, save_checkpoint
from .config import ModelConfig, TrainConfig
from .encoder import NonFiniteError
from .model import MemMCMAE, masked_patch_loss
from .patchgrid import to_patches, visible_count

logger = logging.getLogger(__name__)

LOSS_CSV_HEADER = ["epoch", "step", "loss", "lr"]


def learning_rate(step: int, steps_per_epoch: int, cfg: TrainConfig) -> float:
    """Per-step rate: linear warmup to ``base_lr``, then cosine decay to ``min_lr``."""
    warmup = cfg.warmup_epochs * steps_per_epoch
    total = cfg.epochs * steps_per_epoch
    if step < warmup:
        return cfg.base_lr * (step + 1) / warmup
    progress = (step - warmup) / max(1, total - warmup)
    return cfg.min_lr + (cfg.base_lr - cfg.min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


def random_resized_crop(images: torch.Tensor, rng: np.random.Generator, scale, ratio) -> torch.Tensor:
    """Batched crop-and-resize of (B, H, W, R) images back to their own size."""
    b = images.shape[0]
    area = rng.uniform(scale[0], scale[1], size=b)
    log_r = rng.uniform(math.log(ratio[0]), math.log(ratio[1]), size=b)
    aspect = np.exp(log_r)
    w = np.minimum(np.sqrt(area * aspect), 1.0)
    h = np.minimum(np.sqrt(area / aspect), 1.0)
    # centres in normalised [-1, 1] coordinates keeping the crop inside the image
    cx = rng.uniform(-1.0, 1.0, size=b) * (1.0 - w)
    cy = rng.uniform(-1.0, 1.0, size=b) * (1.0 - h)
    theta = np.zeros((b, 2, 3))
    theta[:, 0, 0], theta[:, 0, 2] = w, cx
    theta[:, 1, 1], theta[:, 1, 2] = h, cy
    x = images.permute(0, 3, 1, 2)
    grid = F.affine_grid(torch.as_tensor(theta, dtype=x.dtype), list(x.shape), align_corners=False)
    out = F.grid_sample(x, grid, mode="bilinear", padding_mode="border", align_corners=False)
    return out.permute(0, 2, 3, 1).contiguous()


def random_visible_index(rng: np.random.Generator, batch: int, num_patches: int, ratio: float):
    """Fresh uniform mask per sample: (visible_idx (B, k), masked flags (B, N))."""
    keep = visible_count(num_patches, ratio)
    order = np.argsort(rng.random((batch, num_patches)), axis=1)
    visible = np.sort(order[:, :keep], axis=1)
    masked = np.ones((batch, num_patches), dtype=bool)
    np.put_along_axis(masked, visible, False, axis=1)
    return torch.from_numpy(visible), torch.from_numpy(masked)


def param_groups(model: torch.nn.Module, weight_decay: float):
    decay, no_decay = [], []
    for _, p in model.named_parameters():
        # biases, norms and the mask token are vectors and stay undecayed
        (decay if p.ndim >= 2 else no_decay).append(p)
    return [
        {"params": decay, "weight_decay": weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]


class LossLog:
    """Append-only ``epoch,step,loss,lr`` CSV (kept in memory as well)."""

    def __init__(self, path: str | Path | None = None, rows=None):
        self.rows: list[list] = [list(r) for r in (rows or [])]
        self.path = Path(path) if path else None
        if self.path and not self.path.exists():
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(LOSS_CSV_HEADER)

    def append(self, epoch: int, step: int, loss: float, lr: float):
        row = [epoch, step, loss, lr]
        self.rows.append(row)
        if self.path:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh).writerow([epoch, step, repr(loss), repr(lr)])

    def epoch_means(self) -> dict[int, float]:
        sums: dict[int, list[float]] = {}
        for epoch, _, loss, _ in self.rows:
            sums.setdefault(epoch, []).append(loss)
        return {e: float(np.mean(v)) for e, v in sums.items()}


def _as_array(images) -> np.ndarray:
    if hasattr(images, "images"):
        images = images.images
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim != 4:
        raise ValueError(f"expected a stack of (H, W, R) images, got shape {arr.shape}")
    return arr


def train(
    dataset,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    out_dir: str | Path | None = None,
    resume: Checkpoint | None = None,
    progress: bool = False,
) -> Checkpoint:
    """Train on normal images only and return the final checkpoint.

    ``dataset`` is a ``NormalImageSet`` or an array (N, H, W, R) in [0, 1].
    With ``out_dir`` set, writes ``loss.csv``, periodic checkpoints and ``last.ckpt``.
    """
    if getattr(dataset, "labels", None) is not None and any(l != "normal" for l in dataset.labels):
        raise ValueError("training data must contain only normal images")
    images = torch.from_numpy(_as_array(dataset))
    n = images.shape[0]
    if tuple(images.shape[1:]) != (model_cfg.image_size, model_cfg.image_size, model_cfg.channels):
        raise ValueError(f"images {tuple(images.shape[1:])} do not match the model config")
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)

    if resume is None:
        torch.manual_seed(train_cfg.seed)
        model = MemMCMAE(model_cfg)
        rng = np.random.default_rng(train_cfg.seed)
        start_epoch, history = 0, []
    else:
        model = resume.build_model()
        rng = np.random.default_rng()
        rng.bit_generator.state = resume.rng["numpy"]
        torch.set_rng_state(decode_torch_rng(resume.rng["torch"]))
        start_epoch, history = resume.epoch, resume.loss_curve
    optimizer = torch.optim.AdamW(
        param_groups(model, train_cfg.weight_decay), lr=train_cfg.base_lr, betas=train_cfg.betas
    )
    if resume is not None:
        resume.restore_optimizer(model, optimizer)

    log = LossLog(out / "loss.csv" if out else None, rows=history)
    steps_per_epoch = math.ceil(n / train_cfg.batch_size)

    def snapshot(epoch):
        state = {"numpy": rng.bit_generator.state, "torch": encode_torch_rng(torch.get_rng_state())}
        return Checkpoint.capture(model, optimizer, train_cfg, epoch, state, log.rows)

    model.train()
    for epoch in range(start_epoch, train_cfg.epochs):
        order = rng.permutation(n)
        for i in range(steps_per_epoch):
            step = epoch * steps_per_epoch + i
            lr = learning_rate(step, steps_per_epoch, train_cfg)
            for group in optimizer.param_groups:
                group["lr"] = lr
            batch = images[torch.from_numpy(order[i * train_cfg.batch_size:(i + 1) * train_cfg.batch_size])]
            if train_cfg.augment:
                batch = random_resized_crop(batch, rng, train_cfg.crop_scale, train_cfg.crop_ratio)
            visible, masked = random_visible_index(
                rng, batch.shape[0], model_cfg.num_patches, model_cfg.mask_ratio
            )
            pred = model(batch, visible)
            loss = masked_patch_loss(pred, to_patches(batch, model_cfg.patch_side), masked)
            if not torch.isfinite(loss):
                if out:
                    save_checkpoint(snapshot(epoch), out / "nonfinite_dump.ckpt")
                raise NonFiniteError(
                    f"non-finite loss at epoch {epoch} step {step} (lr {lr:.3g})"
                    + (f"; state dumped to {out / 'nonfinite_dump.ckpt'}" if out else "")
                )
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            log.append(epoch + 1, step, loss.item(), lr)
        model.epochs_trained = epoch + 1
        if progress:
            logger.info("epoch %d loss %.5f", epoch + 1, log.epoch_means()[epoch + 1])
        if out and train_cfg.checkpoint_every and (epoch + 1) % train_cfg.checkpoint_every == 0:
            save_checkpoint(snapshot(epoch + 1), out / f"epoch{epoch + 1:05d}.ckpt")

    ckpt = snapshot(train_cfg.epochs)
    if out:
        save_checkpoint(ckpt, out / "last.ckpt")
    return ckpt
