"""Completeness-perception tokenizer: VQ autoencoder plus pretext heads.

The encoder/decoder apply per encoding slot with shared weights (brain:
one slot per modality; cardiac: the whole volume is a single slot whose
depth axis is the slice axis). Three prompt encoders turn the continuous
slot latents of a zero-filled incomplete input into 512-dim prompts, and
task heads score them:

  * detection   -- how many units are missing ((n-1)-class).
  * positioning -- which units are missing (n-class, mean CE over the set).
  * assessment  -- InfoNCE between incomplete and complement embeddings.

"Units" are modality slots for brain and latent depth planes for cardiac.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .phantom import DEPTH_FACTOR, MissingPattern


@dataclass
class TokenizerConfig:
    mode: str                       # brain | cardiac
    m: int                          # slots (brain) or slices (cardiac)
    channels: tuple[int, int, int]  # encoder stage widths
    codebook_size: int
    latent_dim: int = 8
    prompt_dim: int = 512
    prompt_channels: tuple[int, int] = (256, 512)
    prompt_hidden: int = 1024
    contrast_dim: int = 128
    commitment: float = 0.25
    tau: float = 0.2

    @property
    def enc_slots(self) -> int:
        return self.m if self.mode == "brain" else 1

    @property
    def n_units(self) -> int:
        return self.m if self.mode == "brain" else self.m // DEPTH_FACTOR

    def latent_shape(self, vol_shape: tuple[int, int, int]) -> tuple[int, int, int]:
        d, h, w = vol_shape
        if self.mode == "cardiac":
            d = self.m  # slot axis becomes depth
        for n in (d, h, w):
            if n % DEPTH_FACTOR != 0:
                raise ValueError(f"volume dims {(d, h, w)} not divisible by {DEPTH_FACTOR}")
        return (d // DEPTH_FACTOR, h // DEPTH_FACTOR, w // DEPTH_FACTOR)


def _norm(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(ch, 8), ch)


class SlotEncoder(nn.Module):
    """Three stride-2 stages, one mid conv, and a latent head (8x compression)."""

    def __init__(self, channels, latent_dim):
        super().__init__()
        c1, c2, c3 = channels
        self.net = nn.Sequential(
            nn.Conv3d(1, c1, 4, 2, 1), _norm(c1), nn.SiLU(),
            nn.Conv3d(c1, c2, 4, 2, 1), _norm(c2), nn.SiLU(),
            nn.Conv3d(c2, c2, 3, 1, 1), _norm(c2), nn.SiLU(),
            nn.Conv3d(c2, c3, 4, 2, 1), _norm(c3), nn.SiLU(),
            nn.Conv3d(c3, c3, 3, 1, 1), _norm(c3), nn.SiLU(),
            nn.Conv3d(c3, latent_dim, 3, 1, 1),
        )

    def forward(self, x):
        for ax, n in enumerate(x.shape[-3:]):
            if n % DEPTH_FACTOR != 0:
                raise ValueError(f"input axis {ax} size {n} not divisible by {DEPTH_FACTOR}")
        return self.net(x)


class SlotDecoder(nn.Module):
    """Mirror decoder with learnable non-overlapping upsampling, sigmoid output.

    Capacity concentrates at latent resolution; channels thin toward full
    resolution so the high-resolution stages stay cheap.
    """

    def __init__(self, channels, latent_dim):
        super().__init__()
        c1, c2, c3 = channels
        ch = max(3 * c1 // 4, 16)  # half-resolution width
        cf = max(3 * c1 // 8, 8)    # full-resolution width
        self.net = nn.Sequential(
            nn.Conv3d(latent_dim, c3, 3, 1, 1), _norm(c3), nn.SiLU(),
            nn.Conv3d(c3, c3, 3, 1, 1), _norm(c3), nn.SiLU(),
            nn.Conv3d(c3, c2, 3, 1, 1), _norm(c2), nn.SiLU(),
            nn.ConvTranspose3d(c2, c1, 2, 2), _norm(c1), nn.SiLU(),
            nn.Conv3d(c1, c1, 3, 1, 1), _norm(c1), nn.SiLU(),
            nn.ConvTranspose3d(c1, ch, 2, 2), _norm(ch), nn.SiLU(),
            nn.Conv3d(ch, ch, 3, 1, 1), _norm(ch), nn.SiLU(),
            nn.ConvTranspose3d(ch, cf, 2, 2), _norm(cf), nn.SiLU(),
            nn.Conv3d(cf, 1, 3, 1, 1),
        )

    def forward(self, z):
        return torch.sigmoid(self.net(z))


class VectorQuantizer(nn.Module):
    """Nearest-neighbor codebook lookup with a straight-through gradient.

    Ties resolve to the lowest code index. The returned loss is
    ||sg(z_e) - e||^2 + commitment * ||z_e - sg(e)||^2 (means over sites).
    """

    def __init__(self, codebook_size: int, latent_dim: int, commitment: float = 0.25):
        super().__init__()
        if codebook_size < 2:
            raise ValueError(f"need at least 2 codes, got {codebook_size}")
        self.commitment = commitment
        self.codebook = nn.Parameter(torch.randn(codebook_size, latent_dim) * 0.3)

    def forward(self, z_e: torch.Tensor):
        """z_e: [..., latent_dim, D', H', W'] -> (z_q, indices, vq_loss)."""
        d_z = self.codebook.shape[1]
        if z_e.shape[-4] != d_z:
            raise ValueError(f"latent channel dim {z_e.shape[-4]} != codebook dim {d_z}")
        perm = z_e.movedim(-4, -1)  # [..., D', H', W', d_z]
        flat = perm.reshape(-1, d_z)
        dist = (
            flat.pow(2).sum(1, keepdim=True)
            - 2.0 * flat @ self.codebook.t()
            + self.codebook.pow(2).sum(1)[None, :]
        )
        idx = torch.argmin(dist, dim=1)  # first minimum = lowest index on ties
        quant = self.codebook[idx].reshape(perm.shape).movedim(-1, -4)
        vq_loss = F.mse_loss(quant, z_e.detach()) + self.commitment * F.mse_loss(
            z_e, quant.detach()
        )
        z_q = z_e + (quant - z_e).detach()
        return z_q, idx.reshape(z_e.shape[:-4] + z_e.shape[-3:]), vq_loss


class PromptEncoder(nn.Module):
    """Conv stack + global average pooling + MLP tail producing one prompt.

    Applied with shared weights to every slot latent; pooled per-slot
    features receive a learned slot embedding and are averaged before the
    tail (a single cardiac slot skips nothing: the mean of one is itself).
    """

    def __init__(self, latent_dim, conv_channels, hidden, prompt_dim):
        super().__init__()
        w1, w2 = conv_channels
        self.conv = nn.Sequential(
            nn.Conv3d(latent_dim, w1, 3, 1, 1), nn.BatchNorm3d(w1), nn.ReLU(),
            nn.Conv3d(w1, w2, 3, 1, 1), nn.BatchNorm3d(w2), nn.ReLU(),
            nn.AdaptiveAvgPool3d(1),
        )
        self.tail = nn.Sequential(
            nn.Linear(w2, hidden), nn.ReLU(), nn.Linear(hidden, prompt_dim)
        )
        self.pooled_dim = w2

    def forward(self, z: torch.Tensor, slot_emb: torch.Tensor | None = None):
        """z: [B, S, d_z, D', H', W'] -> [B, prompt_dim]."""
        b, s = z.shape[:2]
        feats = self.conv(z.reshape(b * s, *z.shape[2:])).reshape(b, s, self.pooled_dim)
        if slot_emb is not None:
            feats = feats + slot_emb[None, :, :]
        return self.tail(feats.mean(dim=1))


class CompletenessTokenizer(nn.Module):
    def __init__(self, cfg: TokenizerConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = SlotEncoder(cfg.channels, cfg.latent_dim)
        self.decoder = SlotDecoder(cfg.channels, cfg.latent_dim)
        self.quantizer = VectorQuantizer(cfg.codebook_size, cfg.latent_dim, cfg.commitment)
        make_f = lambda: PromptEncoder(
            cfg.latent_dim, cfg.prompt_channels, cfg.prompt_hidden, cfg.prompt_dim
        )
        self.f_detect = make_f()
        self.f_position = make_f()
        self.f_assess = make_f()
        self.slot_emb = nn.Parameter(
            torch.randn(cfg.enc_slots, cfg.prompt_channels[1]) * 0.02
        )
        self.h_detect = nn.Sequential(nn.SiLU(), nn.Linear(cfg.prompt_dim, cfg.n_units - 1))
        self.h_position = nn.Sequential(nn.SiLU(), nn.Linear(cfg.prompt_dim, cfg.n_units))
        self.h_assess = nn.Sequential(nn.SiLU(), nn.Linear(cfg.prompt_dim, cfg.contrast_dim))

    # -- autoencoding ------------------------------------------------------

    def encode(self, vols: torch.Tensor) -> torch.Tensor:
        """[B, S, D, H, W] volumes -> continuous latents [B, S, d_z, D', H', W']."""
        b, s = vols.shape[:2]
        z = self.encoder(vols.reshape(b * s, 1, *vols.shape[2:]))
        return z.reshape(b, s, *z.shape[1:])

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        b, s = z.shape[:2]
        x = self.decoder(z.reshape(b * s, *z.shape[2:]))
        return x.reshape(b, s, *x.shape[2:])

    def quantize(self, z_e: torch.Tensor):
        return self.quantizer(z_e)

    # -- prompts -----------------------------------------------------------

    def prompt_detect(self, z):
        return self.f_detect(z, self.slot_emb)

    def prompt_position(self, z):
        return self.f_position(z, self.slot_emb)

    def prompt_assess(self, z):
        return self.f_assess(z, self.slot_emb)

    def prompts_concat(self, z):
        return torch.cat(
            [self.prompt_detect(z), self.prompt_position(z), self.prompt_assess(z)], dim=1
        )


@dataclass
class PromptTokens:
    """The three 512-dim completeness prompts and their concatenation."""

    p_d: np.ndarray
    p_p: np.ndarray
    p_s: np.ndarray

    def __post_init__(self):
        for name in ("p_d", "p_p", "p_s"):
            v = np.asarray(getattr(self, name), dtype=np.float32)
            if not np.all(np.isfinite(v)):
                raise ValueError(f"{name} contains non-finite values")
            setattr(self, name, v)

    @property
    def p(self) -> np.ndarray:
        return np.concatenate([self.p_d, self.p_p, self.p_s])


# ---------------------------------------------------------------------------
# Pretext losses
# ---------------------------------------------------------------------------


def detection_loss(tok: CompletenessTokenizer, z_incomplete, c_true):
    """Cross-entropy on the missing count; class index is c - 1.

    c_true: [B] unit counts in 1..n_units-1. Returns (loss, p_d).
    """
    n = tok.cfg.n_units
    c = torch.as_tensor(c_true)
    if torch.any(c < 1) or torch.any(c > n - 1):
        raise ValueError(f"missing count must lie in [1, {n - 1}]")
    p_d = tok.prompt_detect(z_incomplete)
    loss = F.cross_entropy(tok.h_detect(p_d), c.long() - 1)
    return loss, p_d


def positioning_loss(tok: CompletenessTokenizer, z_incomplete, unit_sets):
    """Mean cross-entropy over each sample's missing units. Returns (loss, p_p)."""
    n = tok.cfg.n_units
    for units in unit_sets:
        if not units or not all(0 <= u < n for u in units) or len(units) >= n:
            raise ValueError(f"invalid missing unit set {units} for {n} units")
    p_p = tok.prompt_position(z_incomplete)
    logp = F.log_softmax(tok.h_position(p_p), dim=1)
    per_sample = [-logp[i, list(units)].mean() for i, units in enumerate(unit_sets)]
    return torch.stack(per_sample).mean(), p_p


def contrastive_loss(anchors: torch.Tensor, positives: torch.Tensor, tau: float = 0.2):
    """InfoNCE over in-batch negatives with L2-normalized embeddings.

    anchors/positives: [B, d] projected embeddings from the same subjects
    in matching order; negatives for anchor i are the other positives.
    """
    if anchors.shape[0] < 2:
        raise ValueError("contrastive loss needs a batch of at least 2")
    a = F.normalize(anchors, dim=1)
    b = F.normalize(positives, dim=1)
    sim = a @ b.t() / tau  # [B, B]; diagonal = positives
    return F.cross_entropy(sim, torch.arange(a.shape[0], device=a.device))


def assemble_incomplete_latents(
    z_slots: torch.Tensor, z_zero: torch.Tensor, patterns: list[MissingPattern]
):
    """Brain fast path: per-slot latents + the shared zero-input latent.

    Because encoding is per-slot, the latents of a zero-filled volume are
    the complete sample's slot latents with missing slots replaced by the
    latent of an all-zero slot. Returns (z_incomplete, z_complement).
    """
    z_inc = z_slots.clone()
    z_comp = z_slots.clone()
    for i, pat in enumerate(patterns):
        for s in pat.missing:
            z_inc[i, s] = z_zero
        for s in pat.available:
            z_comp[i, s] = z_zero
    return z_inc, z_comp


def tokenizer_loss(
    tok: CompletenessTokenizer,
    vols: torch.Tensor,
    patterns: list[MissingPattern],
    lam: float,
    adversarial: nn.Module | None = None,
    perceptual: nn.Module | None = None,
    adv_weight: float = 0.1,
    perc_weight: float = 0.1,
):
    """Total training loss L_rec + lam * (L_d + L_p + L_c) with components.

    vols: complete subjects, [B, m, D, H, W] for brain or [B, m, 1, H, W]
    for cardiac. Reconstruction covers all slots of the complete sample;
    pretext losses act on the zero-filled incomplete encoding.
    """
    cfg = tok.cfg
    b = vols.shape[0]
    if len(patterns) != b:
        raise ValueError("one missing pattern per batch sample required")

    if cfg.mode == "brain":
        x = vols
    else:
        x = vols[:, :, 0][:, None]  # [B, 1, m, H, W]

    z_e = tok.encode(x)
    z_q, _, vq = tok.quantize(z_e)
    recon = tok.decode(z_q)
    l1 = (recon - x).abs().mean()
    l_rec = l1 + vq

    comps = {"l1": l1, "vq": vq}
    if adversarial is not None:
        adv = -adversarial(recon.reshape(-1, 1, *recon.shape[2:])).mean()
        l_rec = l_rec + adv_weight * adv
        comps["adv"] = adv
    if perceptual is not None:
        perc = perceptual(
            recon.reshape(-1, 1, *recon.shape[2:]), x.reshape(-1, 1, *x.shape[2:])
        )
        l_rec = l_rec + perc_weight * perc
        comps["perc"] = perc

    if cfg.mode == "brain":
        z_zero = tok.encode(torch.zeros(1, 1, *x.shape[2:], dtype=x.dtype, device=x.device))[0, 0]
        z_inc, z_comp = assemble_incomplete_latents(z_e, z_zero, patterns)
    else:
        inc = x.clone()
        comp = x.clone()
        for i, pat in enumerate(patterns):
            inc[i, 0, list(pat.missing)] = 0.0
            comp[i, 0, list(pat.available)] = 0.0
        z_inc = tok.encode(inc)
        z_comp = tok.encode(comp)

    counts = [len(p.missing_units()) for p in patterns]
    unit_sets = [p.missing_units() for p in patterns]
    l_d, _ = detection_loss(tok, z_inc, counts)
    l_p, _ = positioning_loss(tok, z_inc, unit_sets)
    l_c = contrastive_loss(
        tok.h_assess(tok.prompt_assess(z_inc)),
        tok.h_assess(tok.prompt_assess(z_comp)),
        cfg.tau,
    )

    total = l_rec + lam * (l_d + l_p + l_c)
    comps.update({"rec": l_rec, "d": l_d, "p": l_p, "c": l_c, "tok": total})
    return total, comps


@torch.no_grad()
def infer_prompts(tok: CompletenessTokenizer, incomplete: np.ndarray) -> PromptTokens:
    """Prompts for one zero-filled incomplete subject (mask-free contract).

    incomplete: [m, D, H, W] float array with missing slots already zeroed.
    The tokenizer must be in eval mode so batch-norm uses running stats.
    """
    was_training = tok.training
    tok.eval()
    try:
        x = torch.as_tensor(np.asarray(incomplete, dtype=np.float32))
        if tok.cfg.mode == "cardiac":
            x = x[:, 0][None]
        z = tok.encode(x[None])
        p_d = tok.prompt_detect(z)[0]
        p_p = tok.prompt_position(z)[0]
        p_s = tok.prompt_assess(z)[0]
    finally:
        if was_training:
            tok.train()
    return PromptTokens(p_d=p_d.numpy(), p_p=p_p.numpy(), p_s=p_s.numpy())


# ---------------------------------------------------------------------------
# Optional reconstruction-loss plug-ins (default off)
# ---------------------------------------------------------------------------


class PatchDiscriminator3d(nn.Module):
    """Tiny 3D patch critic for the optional adversarial term."""

    def __init__(self, base: int = 16):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv3d(1, base, 4, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv3d(base, base * 2, 4, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv3d(base * 2, 1, 3, 1, 1),
        )

    def forward(self, x):
        return self.net(x)

    def hinge_loss(self, real, fake):
        return F.relu(1.0 - self(real)).mean() + F.relu(1.0 + self(fake)).mean()


class RandomFeatureDistance(nn.Module):
    """Frozen random conv features; L1 distance between feature maps."""

    def __init__(self, base: int = 16, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.conv1 = nn.Conv3d(1, base, 3, 2, 1)
        self.conv2 = nn.Conv3d(base, base * 2, 3, 2, 1)
        for p in self.parameters():
            p.data = torch.randn(p.shape, generator=gen) * (1.0 / math.sqrt(p[0].numel()))
            p.requires_grad_(False)

    def features(self, x):
        h1 = F.relu(self.conv1(x))
        return h1, F.relu(self.conv2(h1))

    def forward(self, a, b):
        fa, fb = self.features(a), self.features(b)
        return sum((u - v).abs().mean() for u, v in zip(fa, fb))
