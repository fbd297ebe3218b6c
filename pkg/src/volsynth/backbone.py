"""3D diffusion transformer predicting clean latents for every slot.

Latents are patchified into per-group token streams and processed by an
even stack of alternating attention blocks:

  brain:   spatial (tokens within one modality slot)  /  modal (slots at
           one spatial site, stream reshaped to put the slot axis inside)
  cardiac: planar (tokens sharing a latent depth plane) / through-plane
           (depth positions at one in-plane site)

Conditioning (timestep embedding plus an optional projected prompt
vector) enters through zero-initialized adaLN modulation, so at
initialization every block is the identity and the network output is
exactly zero. Rotary embeddings act inside spatial (3D coordinates) and
through-plane (depth index) attention only; the additive sine-cosine
embedding after patchify covers the rest.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .layers import (
    AttentionConfig,
    Modulation,
    MultiHeadAttention,
    TimestepEmbedder,
    grid_coords,
    modulate,
    sincos_pe_3d,
)

INJECTION_SITES = ("modal_or_spatial", "spatial_or_planar", "both")
PROMPT_CONCAT_DIM = 1536


@dataclass
class BackboneConfig:
    variant: str                       # brain | cardiac
    latent_grid: tuple[int, int, int]  # per-slot latent spatial shape (D', H', W')
    n_slots: int                       # modality slots (brain) or 1 (cardiac)
    hidden: int = 768
    blocks: int = 16
    heads: int = 12
    patch: int = 2
    latent_dim: int = 8
    injection_site: str = "modal_or_spatial"
    t_max: int = 500

    def __post_init__(self):
        if self.variant not in ("brain", "cardiac"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.blocks % 2 != 0:
            raise ValueError(f"block count must be even for alternation, got {self.blocks}")
        if self.hidden % self.heads != 0:
            raise ValueError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.injection_site not in INJECTION_SITES:
            raise ValueError(f"injection_site must be one of {INJECTION_SITES}")
        if any(n % self.patch != 0 for n in self.latent_grid):
            raise ValueError(f"latent grid {self.latent_grid} not divisible by patch {self.patch}")
        if self.variant == "cardiac" and self.n_slots != 1:
            raise ValueError("cardiac volumes form a single encoding slot")

    @property
    def patch_grid(self) -> tuple[int, int, int]:
        return tuple(n // self.patch for n in self.latent_grid)

    @property
    def tokens_per_group(self) -> int:
        gd, gh, gw = self.patch_grid
        return gd * gh * gw if self.variant == "brain" else gh * gw

    @property
    def n_groups(self) -> int:
        return self.n_slots if self.variant == "brain" else self.patch_grid[0]


class DiTBlock(nn.Module):
    """Pre-norm attention + MLP with adaLN-modulated, gated residuals."""

    def __init__(self, dim: int, heads: int, rope_axes: int | None = None):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False)
        self.attn = MultiHeadAttention(
            AttentionConfig(
                num_heads=heads,
                head_dim=dim // heads,
                rope_enabled=rope_axes is not None,
                rope_axes=rope_axes or 1,
            )
        )
        self.mlp = nn.Sequential(
            nn.Linear(dim, 4 * dim), nn.GELU(approximate="tanh"), nn.Linear(4 * dim, dim)
        )
        self.modulation = Modulation(dim, dim, n_values=6)

    def forward(self, x, cond, positions=None):
        """x: [G, T, d]; cond: [G, d] (already expanded to the group axis)."""
        shift_a, scale_a, gate_a, shift_m, scale_m, gate_m = self.modulation(cond)
        h = modulate(self.norm1(x), shift_a, scale_a)
        x = x + gate_a[:, None, :] * self.attn(h, positions=positions)
        h = modulate(self.norm2(x), shift_m, scale_m)
        return x + gate_m[:, None, :] * self.mlp(h)


class FinalLayer(nn.Module):
    """adaLN-modulated norm followed by a zero-initialized linear output map."""

    def __init__(self, dim: int, out_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim, elementwise_affine=False)
        self.modulation = Modulation(dim, dim, n_values=2)
        self.linear = nn.Linear(dim, out_dim)
        nn.init.zeros_(self.linear.weight)
        nn.init.zeros_(self.linear.bias)

    def forward(self, x, cond):
        shift, scale = self.modulation(cond)
        return self.linear(modulate(self.norm(x), shift, scale))


class MDiT3D(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.hidden
        p = cfg.patch
        self.patch_embed = nn.Conv3d(cfg.latent_dim, d, kernel_size=p, stride=p)
        pe = sincos_pe_3d(cfg.patch_grid, d)
        self.register_buffer("pos_embed", torch.from_numpy(pe).float(), persistent=False)
        self.t_embedder = TimestepEmbedder(d, freq_dim=256, t_max=cfg.t_max)
        self.prompt_proj = nn.Linear(PROMPT_CONCAT_DIM, d)
        rope_intra = 3 if cfg.variant == "brain" else None
        rope_inter = None if cfg.variant == "brain" else 1
        blocks = []
        for i in range(cfg.blocks):
            axes = rope_intra if i % 2 == 0 else rope_inter
            blocks.append(DiTBlock(d, cfg.heads, rope_axes=axes))
        self.blocks = nn.ModuleList(blocks)
        self.final = FinalLayer(d, cfg.latent_dim * p**3)
        coords = grid_coords(cfg.patch_grid)
        self.register_buffer("token_coords", coords, persistent=False)
        self.register_buffer(
            "plane_coords", torch.arange(cfg.patch_grid[0]), persistent=False
        )

    # -- token plumbing ------------------------------------------------------

    def patchify(self, z: torch.Tensor, add_pe: bool = True) -> torch.Tensor:
        """[B, S, d_z, D', H', W'] -> [B, G, T, hidden] token grid."""
        cfg = self.cfg
        b, s = z.shape[:2]
        if s != cfg.n_slots:
            raise ValueError(f"expected {cfg.n_slots} slots, got {s}")
        if tuple(z.shape[-3:]) != cfg.latent_grid:
            raise ValueError(f"latent grid {tuple(z.shape[-3:])} != {cfg.latent_grid}")
        h = self.patch_embed(z.reshape(b * s, *z.shape[2:]))  # [B*S, d, gd, gh, gw]
        gd, gh, gw = cfg.patch_grid
        h = h.reshape(b, s, -1, gd * gh * gw).transpose(-2, -1)  # [B, S, T_full, d]
        if add_pe:
            h = h + self.pos_embed.to(h.dtype)[None, None]
        if cfg.variant == "brain":
            return h  # groups = slots
        return h.reshape(b, gd, gh * gw, -1)  # groups = depth planes

    def unpatchify(self, tokens: torch.Tensor) -> torch.Tensor:
        """Inverse spatial reassembly of the final layer's patch features."""
        cfg = self.cfg
        b = tokens.shape[0]
        gd, gh, gw = cfg.patch_grid
        p = cfg.patch
        feats = tokens.reshape(b, cfg.n_slots, gd, gh, gw, cfg.latent_dim, p, p, p)
        feats = feats.permute(0, 1, 5, 2, 6, 3, 7, 4, 8)
        return feats.reshape(b, cfg.n_slots, cfg.latent_dim, gd * p, gh * p, gw * p)

    def conditioning(self, t: torch.Tensor, prompt: torch.Tensor | None):
        """(plain, prompted) conditioning vectors; prompted == plain when absent."""
        t_emb = self.t_embedder(t)
        if prompt is None:
            return t_emb, t_emb
        if prompt.dim() == 1:
            prompt = prompt[None]
        return t_emb, t_emb + self.prompt_proj(prompt.to(t_emb.dtype))

    def _inject_here(self, inter_block: bool) -> bool:
        site = self.cfg.injection_site
        if site == "both":
            return True
        return inter_block == (site == "modal_or_spatial")

    def forward(self, z: torch.Tensor, t: torch.Tensor, prompt: torch.Tensor | None = None):
        """Predict clean latents for all slots.

        z: [B, S, d_z, D', H', W'] with clean available slots and noised
        missing ones; t: [B] integer timesteps; prompt: [B, 1536] or None.
        No availability mask is ever part of the input.
        """
        cfg = self.cfg
        b = z.shape[0]
        tokens = self.patchify(z)  # [B, G, T, d]
        g, tt, d = tokens.shape[1:]
        cond_plain, cond_prompt = self.conditioning(torch.as_tensor(t).reshape(b), prompt)

        h = tokens
        for i, block in enumerate(self.blocks):
            inter = i % 2 == 1
            cond = cond_prompt if self._inject_here(inter) else cond_plain
            if not inter:
                positions = self.token_coords if cfg.variant == "brain" else None
                stream = h.reshape(b * g, tt, d)
                stream = block(stream, cond.repeat_interleave(g, dim=0), positions=positions)
                h = stream.reshape(b, g, tt, d)
            else:
                positions = None if cfg.variant == "brain" else self.plane_coords
                stream = h.transpose(1, 2).reshape(b * tt, g, d)
                stream = block(stream, cond.repeat_interleave(tt, dim=0), positions=positions)
                h = stream.reshape(b, tt, g, d).transpose(1, 2)

        out = self.final(h.reshape(b, g * tt, d), cond_plain)
        return self.unpatchify(out.reshape(b, g, tt, -1))


def parameter_count(cfg: BackboneConfig) -> int:
    """Instantiate on the meta device and count learnable parameters."""
    with torch.device("meta"):
        model = MDiT3D(cfg)
    return sum(p.numel() for p in model.parameters())
