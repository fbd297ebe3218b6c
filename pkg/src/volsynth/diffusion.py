"""Noise schedule, forward noising, and deterministic DDIM sampling.

Only missing units (modality slots, or latent depth planes for cardiac)
are ever noised and denoised; available units stay clean throughout and
serve as context. The sampler returns the available voxels untouched and
decodes only the synthesized latents.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .backbone import MDiT3D
from .phantom import DEPTH_FACTOR, MissingPattern
from .tokenizer import CompletenessTokenizer, PromptTokens, infer_prompts


@dataclass
class NoiseSchedule:
    t_max: int
    beta: np.ndarray       # [T], beta[t-1] is the step-t variance increment
    alpha: np.ndarray
    alpha_bar: np.ndarray  # strictly decreasing cumulative product

    def alpha_bar_at(self, t: int) -> float:
        """Cumulative signal fraction; t = 0 denotes the clean boundary (1.0)."""
        if t == 0:
            return 1.0
        if not 1 <= t <= self.t_max:
            raise ValueError(f"timestep {t} outside [1, {self.t_max}]")
        return float(self.alpha_bar[t - 1])


def make_schedule(t_max: int = 500, beta_start: float = 0.0015, beta_end: float = 0.0195,
                  kind: str = "scaled-linear") -> NoiseSchedule:
    """Scaled-linear schedule: beta is linear in sqrt between the endpoints."""
    if not 0.0 < beta_start < beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start < beta_end < 1, got ({beta_start}, {beta_end})")
    if kind != "scaled-linear":
        raise ValueError(f"unknown schedule kind {kind!r}")
    steps = np.arange(t_max, dtype=np.float64)
    beta = (np.sqrt(beta_start) + steps / (t_max - 1) * (np.sqrt(beta_end) - np.sqrt(beta_start))) ** 2
    beta[0] = beta_start  # the formula hits the endpoints exactly; pin them in float too
    beta[-1] = beta_end
    alpha = 1.0 - beta
    return NoiseSchedule(t_max=t_max, beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha))


def substep_map(t_max: int, n_steps: int) -> np.ndarray:
    """Uniform-stride increasing timestep subsequence covering 1..t_max."""
    if not 2 <= n_steps <= t_max:
        raise ValueError(f"need 2 <= n_steps <= {t_max}, got {n_steps}")
    taus = np.round(np.linspace(1, t_max, n_steps)).astype(np.int64)
    if np.any(np.diff(taus) <= 0):
        raise ValueError("substep map is not strictly increasing")
    return taus


def q_sample(z0: torch.Tensor, t: int, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """z_t = sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps."""
    abar = schedule.alpha_bar_at(int(t))
    return math.sqrt(abar) * z0 + math.sqrt(1.0 - abar) * eps


def ddim_step(z_t: torch.Tensor, x0_hat: torch.Tensor, t: int, t_prev: int,
              schedule: NoiseSchedule, eta: float = 0.0) -> torch.Tensor:
    """Deterministic DDIM update from t to t_prev (< t); t_prev = 0 returns x0_hat."""
    if t_prev >= t:
        raise ValueError(f"t_prev {t_prev} must be < t {t}")
    if eta != 0.0:
        raise ValueError("only the deterministic eta=0 sampler is supported")
    abar_t = schedule.alpha_bar_at(int(t))
    abar_p = schedule.alpha_bar_at(int(t_prev))
    eps_hat = (z_t - math.sqrt(abar_t) * x0_hat) / math.sqrt(1.0 - abar_t)
    return math.sqrt(abar_p) * x0_hat + math.sqrt(1.0 - abar_p) * eps_hat


# ---------------------------------------------------------------------------
# Missing-unit masks in latent space
# ---------------------------------------------------------------------------


def missing_unit_slices(pattern: MissingPattern):
    """Latent-space selector for the missing units of one sample.

    Brain: (slot_indices, None). Cardiac: (0, plane_indices) where planes
    index the latent depth axis.
    """
    if pattern.mode == "brain":
        return list(pattern.missing), None
    return 0, list(pattern.missing_units())


def noise_missing(z0: torch.Tensor, pattern: MissingPattern, t: int, eps: torch.Tensor,
                  schedule: NoiseSchedule) -> torch.Tensor:
    """One sample's z_t: q_sample applied to missing units only. z0: [S, dz, D', H', W']."""
    z_t = z0.clone()
    slots, planes = missing_unit_slices(pattern)
    if planes is None:
        z_t[slots] = q_sample(z0[slots], t, eps[slots], schedule)
    else:
        z_t[0, :, planes] = q_sample(z0[0, :, planes], t, eps[0, :, planes], schedule)
    return z_t


def diffusion_training_loss(model: MDiT3D, z0: torch.Tensor, patterns: list[MissingPattern],
                            t: torch.Tensor, noise: torch.Tensor,
                            prompts: torch.Tensor | None, schedule: NoiseSchedule):
    """Clean-latent prediction loss over ALL slots (x-prediction).

    z0: [B, S, dz, D', H', W'] clean latents; noise matches z0; t: [B].
    Available units enter clean, so their contribution is reconstruction
    error rather than denoising error.
    """
    z_t = torch.stack(
        [noise_missing(z0[i], patterns[i], int(t[i]), noise[i], schedule) for i in range(z0.shape[0])]
    )
    pred = model(z_t, t, prompts)
    return ((pred - z0) ** 2).mean(), z_t


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def prompt_vector(tok: CompletenessTokenizer, incomplete: np.ndarray,
                  pattern: MissingPattern, conditioning: str,
                  override: PromptTokens | np.ndarray | None = None) -> np.ndarray | None:
    """Resolve the conditioning vector for one sample."""
    if conditioning == "none":
        return None
    if conditioning == "mask_codes":
        from .metrics import mask_code_onehot  # local import avoids cycle at module load

        code = mask_code_onehot(pattern)
        out = np.zeros(1536, dtype=np.float32)
        out[: code.shape[0]] = code
        return out
    if conditioning != "prompts":
        raise ValueError(f"unknown conditioning {conditioning!r}")
    if override is None:
        return infer_prompts(tok, incomplete).p
    if isinstance(override, PromptTokens):
        return override.p
    return np.asarray(override, dtype=np.float32)


@torch.no_grad()
def sample_missing(model: MDiT3D, tok: CompletenessTokenizer, incomplete: np.ndarray,
                   pattern: MissingPattern, schedule: NoiseSchedule, n_substeps: int,
                   seed: int, conditioning: str = "prompts",
                   prompt_override: PromptTokens | np.ndarray | None = None,
                   return_latents: bool = False):
    """Synthesize the missing units of one zero-filled subject.

    Available slots of the returned array are the input bytes untouched;
    available latent units are held at their quantized values at every
    step. Fixed seed gives bit-identical output.
    """
    if len(pattern.missing) == 0 or len(pattern.missing) >= pattern.m:
        raise ValueError("pattern must leave at least one slot available and one missing")
    model.eval()
    tok.eval()
    x = torch.as_tensor(np.asarray(incomplete, dtype=np.float32))
    if pattern.mode == "cardiac":
        enc_in = x[:, 0][None, None]  # [1, 1, m, H, W]
    else:
        enc_in = x[None]  # [1, m, D, H, W]

    z_q, _, _ = tok.quantize(tok.encode(enc_in))
    gen = torch.Generator().manual_seed(seed)
    zlat = z_q[0].clone()  # [S, dz, D', H', W']
    slots, planes = missing_unit_slices(pattern)
    if planes is None:
        zlat[slots] = torch.randn(zlat[slots].shape, generator=gen)
    else:
        zlat[0, :, planes] = torch.randn(zlat[0, :, planes].shape, generator=gen)
    avail_ref = z_q[0].clone()

    pvec = prompt_vector(tok, incomplete, pattern, conditioning, prompt_override)
    prompt = None if pvec is None else torch.as_tensor(pvec)[None]

    taus = substep_map(schedule.t_max, n_substeps)
    for k in range(len(taus) - 1, -1, -1):
        t_k = int(taus[k])
        t_prev = int(taus[k - 1]) if k > 0 else 0
        x0_hat = model(zlat[None], torch.tensor([t_k]), prompt)[0]
        if planes is None:
            zlat[slots] = ddim_step(zlat[slots], x0_hat[slots], t_k, t_prev, schedule)
        else:
            zlat[0, :, planes] = ddim_step(
                zlat[0, :, planes], x0_hat[0, :, planes], t_k, t_prev, schedule
            )

    # available latent units must be bit-identical to the initial z_q
    if planes is None:
        avail = [i for i in range(pattern.m) if i not in pattern.missing]
        if not torch.equal(zlat[avail], avail_ref[avail]):
            raise AssertionError("available latent slots were modified during sampling")
    else:
        keep = [i for i in range(zlat.shape[2]) if i not in planes]
        if not torch.equal(zlat[0, :, keep], avail_ref[0, :, keep]):
            raise AssertionError("available latent planes were modified during sampling")

    out = np.array(incomplete, dtype=np.float32, copy=True)
    if pattern.mode == "brain":
        decoded = tok.decode(zlat[None][:, slots])[0]  # [c, D, H, W]
        out[slots] = decoded.numpy()
    else:
        decoded = tok.decode(zlat[None])[0, 0]  # [m, H, W]
        miss = list(pattern.missing)
        out[miss, 0] = decoded.numpy()[miss]
    out = np.clip(out, 0.0, 1.0)
    if return_latents:
        return out, zlat, avail_ref
    return out
