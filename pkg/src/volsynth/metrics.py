"""Volumetric image-quality metrics and pretext-task accuracy probes."""

from __future__ import annotations

import numpy as np
import torch
from scipy.ndimage import correlate1d

from .phantom import MissingPattern, apply_missing
from .tokenizer import CompletenessTokenizer

PSNR_CAP_DB = 99.0


def psnr(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """10*log10(range^2 / MSE), capped at 99 dB (zero-MSE convention)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(data_range**2 / mse))


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = size // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _filter_valid(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    r = len(kernel) // 2
    out = x
    for axis in range(3):
        out = correlate1d(out, kernel, axis=axis, mode="constant")
    return out[r:-r, r:-r, r:-r]


def ssim3d(a: np.ndarray, b: np.ndarray, data_range: float = 1.0,
           win: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean local SSIM with a separable 3D Gaussian window over valid positions."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim != 3:
        raise ValueError(f"expected a 3D volume, got ndim={a.ndim}")
    if any(n < win for n in a.shape):
        raise ValueError(f"volume {a.shape} smaller than the {win}^3 window")
    kern = _gaussian_kernel(win, sigma)
    mu_a = _filter_valid(a, kern)
    mu_b = _filter_valid(b, kern)
    mu_aa = _filter_valid(a * a, kern)
    mu_bb = _filter_valid(b * b, kern)
    mu_ab = _filter_valid(a * b, kern)
    var_a = mu_aa - mu_a**2
    var_b = mu_bb - mu_b**2
    cov = mu_ab - mu_a * mu_b
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def mask_code_onehot(pattern: MissingPattern) -> np.ndarray:
    """Multi-hot baseline code: entry i is 1 iff slot i is missing."""
    code = np.zeros(pattern.m, dtype=np.float32)
    code[list(pattern.missing)] = 1.0
    return code


@torch.no_grad()
def pretext_accuracy(tok: CompletenessTokenizer, volumes, patterns) -> tuple[float, float]:
    """Held-out accuracy of the count and position heads.

    volumes: iterable of complete [m, D, H, W] arrays; patterns: matching
    missing patterns. Count is correct when argmax equals c-1; position is
    correct when the top-c logit indices equal the missing set exactly.
    """
    volumes = list(volumes)
    patterns = list(patterns)
    if not volumes:
        raise ValueError("empty evaluation split")
    was_training = tok.training
    tok.eval()
    n_count = n_pos = 0
    try:
        for data, pattern in zip(volumes, patterns):
            from .phantom import SubjectVolume

            vol = SubjectVolume(subject_id=-1, mode=pattern.mode, data=np.asarray(data),
                                modality_names=[])
            incomplete, _ = apply_missing(vol, pattern)
            x = torch.as_tensor(incomplete)
            if pattern.mode == "cardiac":
                x = x[:, 0][None]
            z = tok.encode(x[None])
            units = pattern.missing_units()
            c = len(units)
            count_logits = tok.h_detect(tok.prompt_detect(z))[0]
            pos_logits = tok.h_position(tok.prompt_position(z))[0]
            if int(count_logits.argmax()) == c - 1:
                n_count += 1
            top = set(torch.topk(pos_logits, k=c).indices.tolist())
            if top == set(units):
                n_pos += 1
    finally:
        if was_training:
            tok.train()
    n = len(volumes)
    return n_count / n, n_pos / n
