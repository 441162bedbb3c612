"""Full masked autoencoder: patch embedding, memory encoder, multi-level decoder, pixel head."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from .config import ModelConfig
from .decoder import MultiLevelDecoder, assemble_decoder_input, partition_index
from .encoder import MemoryEncoder
from .patchgrid import MaskPartition, PatchGrid, from_patches, positional_table, to_patches


class EmptyMaskError(ValueError):
    """Raised when the reconstruction loss has no masked pixels to average over."""


class MemMCMAE(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        enc, dec = config.encoder, config.decoder
        n = config.num_patches

        self.patch_embed = nn.Linear(config.patch_dim, enc.width)
        self.register_buffer(
            "enc_pos", torch.from_numpy(positional_table(config.grid_dims, enc.width)).float()
        )
        self.encoder = MemoryEncoder(
            enc.width, enc.depth, enc.heads, config.memory_slots, enc.mlp_ratio, enc.long_skips
        )
        self.enc_norm = nn.LayerNorm(enc.width)

        self.decoder_embed = nn.Linear(enc.width, dec.width)
        self.mask_token = nn.Parameter(torch.zeros(dec.width))
        self.register_buffer(
            "dec_pos", torch.from_numpy(positional_table(config.grid_dims, dec.width)).float()
        )
        self.decoder = MultiLevelDecoder(
            dec.width,
            enc.width,
            dec.depth,
            dec.heads,
            num_levels=enc.depth if config.mc_dec else 1,
            gated=config.mc_dec,
            gate_granularity=dec.gate_granularity,
            mlp_ratio=dec.mlp_ratio,
            fusion_residual=dec.fusion_residual,
            long_skips=dec.long_skips,
        )
        self.dec_norm = nn.LayerNorm(dec.width)
        self.head = nn.Linear(dec.width, config.patch_dim)
        self.epochs_trained = 0
        assert self.enc_pos.shape[0] == n
        self._init_weights()

    def _init_weights(self):
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.xavier_uniform_(m.weight)
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.LayerNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
        # raw-pixel targets have a std around 0.1; a unit-scale head starts far off
        # and sits on the predict-the-mean plateau for much longer
        nn.init.xavier_uniform_(self.head.weight, gain=0.02)
        nn.init.normal_(self.mask_token, std=0.02)
        for mem_k, mem_v in self.encoder.memory_bank():
            nn.init.normal_(mem_k, std=0.02)
            nn.init.normal_(mem_v, std=0.02)

    # -- pieces ---------------------------------------------------------------

    def encode(self, patches: torch.Tensor, visible_idx: torch.Tensor) -> list[torch.Tensor]:
        """Encode the visible patches; returns every encoder block's output."""
        if visible_idx.shape[1] < 1:
            raise ValueError("the encoder needs at least one visible patch")
        tokens = self.patch_embed(patches)
        gather = visible_idx.unsqueeze(-1)
        visible = tokens.gather(1, gather.expand(-1, -1, tokens.shape[-1]))
        pos = self.enc_pos[visible_idx]
        return self.encoder(visible, pos)

    def decoder_levels(self, encoded: list[torch.Tensor]) -> list[torch.Tensor]:
        return encoded if self.config.mc_dec else encoded[-1:]

    def decode(self, encoded: list[torch.Tensor], visible_idx: torch.Tensor, return_gates=False):
        top = self.decoder_embed(self.enc_norm(encoded[-1]))
        y = assemble_decoder_input(
            top, visible_idx, self.config.num_patches, self.mask_token, self.dec_pos
        )
        return self.decoder(y, self.decoder_levels(encoded), return_gates=return_gates)

    def predict_pixels(self, state: torch.Tensor) -> torch.Tensor:
        return self.head(self.dec_norm(state))

    # -- full passes ----------------------------------------------------------

    def forward(self, images: torch.Tensor, visible_idx: torch.Tensor) -> torch.Tensor:
        """``images`` (B, H, W, R), ``visible_idx`` (B, n_visible) -> predicted patches (B, N, p*p*R)."""
        cfg = self.config
        if tuple(images.shape[1:]) != (cfg.image_size, cfg.image_size, cfg.channels):
            raise ValueError(
                f"image shape {tuple(images.shape[1:])} does not match the model config "
                f"{(cfg.image_size, cfg.image_size, cfg.channels)}"
            )
        patches = to_patches(images, cfg.patch_side)
        encoded = self.encode(patches, visible_idx)
        return self.predict_pixels(self.decode(encoded, visible_idx))

    def unpatchify(self, patches: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        return from_patches(patches, cfg.patch_side, cfg.grid_dims, cfg.channels)

    def reconstruct(self, image, partition: MaskPartition):
        """Single-image forward returning ``(reconstruction, partition)`` as numpy."""
        param = next(self.parameters())
        x = torch.as_tensor(np.asarray(image), dtype=param.dtype, device=param.device)
        with torch.no_grad():
            pred = self(x.unsqueeze(0), partition_index(partition).to(param.device))
        return self.unpatchify(pred)[0].cpu().numpy(), partition

    def predict_grid(self, image, partition: MaskPartition) -> PatchGrid:
        recon, _ = self.reconstruct(image, partition)
        cfg = self.config
        return PatchGrid(to_patches(recon, cfg.patch_side), cfg.patch_side, cfg.grid_dims, cfg.channels)


def masked_patch_loss(pred: torch.Tensor, target: torch.Tensor, masked: torch.Tensor) -> torch.Tensor:
    """Mean squared error over pixels of masked patches.

    ``pred``/``target``: (B, N, D) patch arrays; ``masked``: (B, N) boolean.
    """
    count = masked.sum()
    if int(count) == 0:
        raise EmptyMaskError("no masked patches: the reconstruction loss is undefined")
    per_patch = ((pred - target) ** 2).mean(dim=-1)
    return (per_patch * masked).sum() / count


def masked_flags(partitions, num_patches: int) -> torch.Tensor:
    if isinstance(partitions, MaskPartition):
        partitions = [partitions]
    flags = np.zeros((len(partitions), num_patches), dtype=bool)
    for row, p in zip(flags, partitions):
        row[p.masked_idx] = True
    return torch.from_numpy(flags)


def masked_mse_loss(reconstruction, target, partition: MaskPartition, patch_side: int):
    """MSE between two (H, W, R) images restricted to the masked patches of ``partition``."""
    rec = torch.as_tensor(reconstruction)
    tgt = torch.as_tensor(target, dtype=rec.dtype)
    if rec.shape != tgt.shape:
        raise ValueError(f"shape mismatch: {tuple(rec.shape)} vs {tuple(tgt.shape)}")
    rp = to_patches(rec, patch_side)
    tp = to_patches(tgt, patch_side)
    if rp.shape[0] != partition.num_patches:
        raise ValueError("partition does not match the image's patch count")
    flags = masked_flags(partition, rp.shape[0])[0]
    return masked_patch_loss(rp.unsqueeze(0), tp.unsqueeze(0), flags.unsqueeze(0))
