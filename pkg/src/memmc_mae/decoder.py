"""Decoder that cross-attends to every encoder level and fuses them with sigmoid gates.

Per decoder layer ``d`` with self-attention output ``S``:

    C_l     = attn(query=S, key=W_K X_l, value=W_V X_l)      for each encoder level l
    alpha_l = sigmoid(W_alpha_l [S, C_l])
    out     = sum_l alpha_l * C_l

The gate reads the level's own cross-attention result instead of the layer
output, which would make the gate depend on itself.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from .encoder import MemorySelfAttention, Mlp, attend, check_finite, long_skip_sources
from .patchgrid import MaskPartition


class CrossAttention(nn.Module):
    def __init__(self, width: int, context_width: int, heads: int):
        super().__init__()
        if width % heads:
            raise ValueError(f"width {width} is not divisible by {heads} heads")
        self.heads = heads
        self.q = nn.Linear(width, width)
        self.k = nn.Linear(context_width, width)
        self.v = nn.Linear(context_width, width)
        self.proj = nn.Linear(width, width)

    def forward(self, query: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        out, _ = attend(self.q(query), self.k(context), self.v(context), self.heads)
        return self.proj(out)


class MultiLevelCrossAttentionBlock(nn.Module):
    """One decoder layer: self-attention, gated multi-level cross-attention, MLP.

    ``num_levels`` fixes how many encoder outputs the layer consumes. With
    ``gated=False`` the per-level results are summed with unit weight, which is
    the single-source decoder when ``num_levels == 1``.
    """

    def __init__(
        self,
        width: int,
        context_width: int,
        heads: int,
        num_levels: int,
        gated: bool = True,
        gate_granularity: str = "token",
        mlp_ratio: float = 4.0,
        fusion_residual: bool = True,
    ):
        super().__init__()
        self.num_levels = num_levels
        self.fusion_residual = fusion_residual
        self.norm1 = nn.LayerNorm(width)
        self.self_attn = MemorySelfAttention(width, heads, slots=0)
        self.norm2 = nn.LayerNorm(width)
        self.context_norm = nn.LayerNorm(context_width)
        # W_K, W_V carry only the decoder-layer index, so they are shared by all levels
        self.cross = CrossAttention(width, context_width, heads)
        gate_out = 1 if gate_granularity == "token" else width
        self.gates = (
            nn.ModuleList(nn.Linear(2 * width, gate_out) for _ in range(num_levels))
            if gated
            else None
        )
        self.norm3 = nn.LayerNorm(width)
        self.mlp = Mlp(width, int(width * mlp_ratio))

    def forward(self, y: torch.Tensor, levels: list[torch.Tensor], return_gates: bool = False):
        if len(levels) != self.num_levels:
            raise ValueError(
                f"decoder layer expects {self.num_levels} encoder levels, got {len(levels)}"
            )
        s = y + self.self_attn(self.norm1(y))
        query = self.norm2(s)
        fused = torch.zeros_like(s)
        gates = []
        for l, x in enumerate(levels):
            c = self.cross(query, self.context_norm(x))
            if self.gates is not None:
                alpha = torch.sigmoid(self.gates[l](torch.cat([query, c], dim=-1)))
                gates.append(alpha)
                c = alpha * c
            fused = fused + c
        out = s + fused if self.fusion_residual else fused
        out = out + self.mlp(self.norm3(out))
        check_finite(out, "decoder layer output")
        return (out, gates) if return_gates else out


class MultiLevelDecoder(nn.Module):
    def __init__(
        self,
        width: int,
        context_width: int,
        depth: int,
        heads: int,
        num_levels: int,
        gated: bool = True,
        gate_granularity: str = "token",
        mlp_ratio: float = 4.0,
        fusion_residual: bool = True,
        long_skips: bool = True,
    ):
        super().__init__()
        self.num_levels = num_levels
        self.blocks = nn.ModuleList(
            MultiLevelCrossAttentionBlock(
                width, context_width, heads, num_levels, gated, gate_granularity,
                mlp_ratio, fusion_residual,
            )
            for _ in range(depth)
        )
        self.skips = long_skip_sources(depth) if long_skips else {}

    def forward(self, y: torch.Tensor, levels: list[torch.Tensor], return_gates: bool = False):
        outputs, all_gates = [], []
        for i, block in enumerate(self.blocks):
            if i in self.skips:
                y = y + outputs[self.skips[i]]
            if return_gates:
                y, gates = block(y, levels, return_gates=True)
                all_gates.append(gates)
            else:
                y = block(y, levels)
            outputs.append(y)
        return (y, all_gates) if return_gates else y


def assemble_decoder_input(
    visible_tokens: torch.Tensor,
    visible_idx: torch.Tensor,
    num_patches: int,
    mask_token: torch.Tensor,
    pos: torch.Tensor | None = None,
) -> torch.Tensor:
    """Scatter projected visible tokens into a full grid of mask tokens.

    ``visible_tokens``: (B, n_visible, width); ``visible_idx``: (B, n_visible)
    patch indices in the order the tokens were gathered. Returns (B, num_patches, width).
    """
    b, nv, width = visible_tokens.shape
    if visible_idx.shape != (b, nv):
        raise ValueError(
            f"visible index shape {tuple(visible_idx.shape)} does not match tokens {(b, nv)}"
        )
    if nv > num_patches or (nv and int(visible_idx.max()) >= num_patches):
        raise ValueError("visible indices exceed the patch count")
    y = mask_token.reshape(1, 1, width).expand(b, num_patches, width)
    index = visible_idx.unsqueeze(-1).expand(-1, -1, width)
    y = y.scatter(1, index, visible_tokens)
    if pos is not None:
        y = y + pos
    return y


def partition_index(partitions: list[MaskPartition] | MaskPartition) -> torch.Tensor:
    """Stack visible indices of one or more partitions into a (B, n_visible) tensor."""
    if isinstance(partitions, MaskPartition):
        partitions = [partitions]
    sizes = {len(p.visible_idx) for p in partitions}
    if len(sizes) != 1:
        raise ValueError("all partitions in a batch need the same visible count")
    return torch.as_tensor(np.stack([p.visible_idx for p in partitions]), dtype=torch.long)
