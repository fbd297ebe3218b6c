"""Training loops for both stages with deterministic per-step seeding.

Every source of randomness in a step is derived from (run seed, step
index), so resuming from a checkpoint reproduces the continuation
bit-identically and two runs with the same seed follow the same
trajectory.
"""

from __future__ import annotations

import csv
import hashlib
from pathlib import Path

import numpy as np
import torch

from .backbone import MDiT3D
from .checkpoint import load_checkpoint, load_module_arrays, module_arrays, save_checkpoint
from .config import RunConfig
from .diffusion import diffusion_training_loss, make_schedule
from .metrics import mask_code_onehot
from .optim import AdamW, EmaShadow, warmup_cosine_lr
from .phantom import Dataset, GeneratorParams, MissingPattern, sample_missing_pattern
from .tokenizer import (
    CompletenessTokenizer,
    PatchDiscriminator3d,
    RandomFeatureDistance,
    assemble_incomplete_latents,
    tokenizer_loss,
)


class NumericFailure(RuntimeError):
    """Training produced a non-finite loss."""


def seed_for(*parts) -> int:
    """Stable 63-bit seed derived from arbitrary labeled parts."""
    text = "/".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)


def step_rng(seed: int, step: int, label: str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed_for(seed, step, label)))


def generator_params(cfg: RunConfig) -> GeneratorParams:
    return GeneratorParams(mode=cfg.mode, m=cfg.m, shape=cfg.vol_shape)


def preload(dataset: Dataset, ids) -> dict[int, np.ndarray]:
    return {sid: dataset.load(sid).data for sid in ids}


def build_tokenizer(cfg: RunConfig, init_seed: int | None = None) -> CompletenessTokenizer:
    if init_seed is not None:
        torch.manual_seed(init_seed)
    return CompletenessTokenizer(cfg.tokenizer_config())


def build_backbone(cfg: RunConfig, init_seed: int | None = None) -> MDiT3D:
    if init_seed is not None:
        torch.manual_seed(init_seed)
    return MDiT3D(cfg.backbone_config())


def _check_finite(loss: torch.Tensor, step: int) -> None:
    if not torch.isfinite(loss):
        raise NumericFailure(f"non-finite loss at step {step}")


# ---------------------------------------------------------------------------
# Stage I
# ---------------------------------------------------------------------------


def train_vae(cfg: RunConfig, dataset: Dataset, out_dir: Path,
              resume_from: Path | None = None, log_cb=None,
              ckpt_every: int | None = None, stop_after: int | None = None) -> Path:
    """Train the tokenizer; writes a checkpoint and a per-step loss log.

    ``stop_after`` interrupts the run at that step (checkpoint still
    written) so it can be resumed later; ``ckpt_every`` adds periodic
    snapshots into the same directory.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if dataset.manifest.mode != cfg.mode or dataset.manifest.m != cfg.m:
        raise ValueError(
            f"dataset mode/m ({dataset.manifest.mode}, {dataset.manifest.m}) "
            f"does not match profile ({cfg.mode}, {cfg.m})"
        )
    tok = build_tokenizer(cfg, init_seed=seed_for(cfg.seed, "vae-init"))
    params = dict(tok.named_parameters())
    opt = AdamW(params, lr=cfg.vae_learning_rate, betas=(0.9, 0.999), weight_decay=0.0)
    disc = perc = None
    disc_opt = None
    if cfg.adversarial:
        torch.manual_seed(seed_for(cfg.seed, "disc-init"))
        disc = PatchDiscriminator3d()
        disc_opt = AdamW(dict(disc.named_parameters()), lr=cfg.vae_learning_rate)
    if cfg.perceptual:
        perc = RandomFeatureDistance(seed=seed_for(cfg.seed, "perc") % 2**31)

    start = 0
    if resume_from is not None:
        arrays, meta = load_checkpoint(resume_from)
        if meta["config_hash"] != cfg.hash():
            raise ValueError("checkpoint config hash does not match the active config")
        load_module_arrays(tok, arrays)
        opt.load_state_arrays(
            {k: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("opt.")},
            meta["step"],
        )
        start = meta["step"]

    rows = []
    if start > 0 and resume_from is not None and (Path(resume_from) / "loss_log.csv").exists():
        with open(Path(resume_from) / "loss_log.csv", newline="", encoding="utf-8") as fh:
            rows = [r for r in list(csv.reader(fh))[1:] if int(r[0]) <= start]

    def checkpoint(step: int) -> None:
        arrays = dict(module_arrays(tok))
        arrays.update(opt.state_arrays())
        meta = {
            "kind": "vae",
            "step": step,
            "seed": cfg.seed,
            "config_hash": cfg.hash(),
        }
        save_checkpoint(out_dir, arrays, meta)
        with open(out_dir / "loss_log.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "l_rec", "l_d", "l_p", "l_c", "l_tok"])
            writer.writerows(rows)

    data = preload(dataset, dataset.train_ids)
    train_ids = sorted(data)
    tok.train()
    last = min(cfg.vae_total_steps, stop_after) if stop_after else cfg.vae_total_steps
    for step in range(start + 1, last + 1):
        rng = step_rng(cfg.seed, step, "vae-batch")
        ids = rng.choice(train_ids, size=cfg.vae_batch_size, replace=len(train_ids) < cfg.vae_batch_size)
        patterns = [sample_missing_pattern(rng, cfg.m, cfg.mode) for _ in ids]
        vols = torch.from_numpy(np.stack([data[i] for i in ids]))

        if disc is not None:
            # critic update on the current reconstruction before the generator step
            with torch.no_grad():
                x = vols if cfg.mode == "brain" else vols[:, :, 0][:, None]
                z_q, _, _ = tok.quantize(tok.encode(x))
                fake = tok.decode(z_q).reshape(-1, 1, *x.shape[2:])
            d_loss = disc.hinge_loss(x.reshape(-1, 1, *x.shape[2:]), fake)
            disc_opt.zero_grad()
            d_loss.backward()
            disc_opt.step()

        loss, comps = tokenizer_loss(tok, vols, patterns, cfg.lambda_pretext,
                                     adversarial=disc, perceptual=perc)
        _check_finite(loss, step)
        opt.zero_grad()
        loss.backward()
        lr = warmup_cosine_lr(step, cfg.vae_warmup_steps, cfg.vae_total_steps, cfg.vae_learning_rate)
        opt.step(lr=lr)
        rows.append([step] + [float(comps[k].detach()) for k in ("rec", "d", "p", "c", "tok")])
        if log_cb is not None:
            log_cb(step, comps)
        if ckpt_every and step % ckpt_every == 0 and step != last:
            checkpoint(step)

    checkpoint(last)
    return out_dir


def load_tokenizer(cfg: RunConfig, ckpt_dir: Path) -> CompletenessTokenizer:
    arrays, meta = load_checkpoint(ckpt_dir)
    if meta.get("kind") != "vae":
        raise ValueError(f"{ckpt_dir} is not a tokenizer checkpoint")
    tok = build_tokenizer(cfg)
    load_module_arrays(tok, arrays)
    tok.eval()
    return tok


# ---------------------------------------------------------------------------
# Stage II
# ---------------------------------------------------------------------------


class LatentStore:
    """Frozen-tokenizer latents and per-pattern prompt cache for training."""

    def __init__(self, tok: CompletenessTokenizer, cfg: RunConfig, data: dict[int, np.ndarray]):
        self.tok = tok
        self.cfg = cfg
        self.data = data
        self.z_q: dict[int, torch.Tensor] = {}
        self.z_e: dict[int, torch.Tensor] = {}
        self._prompts: dict[tuple, np.ndarray] = {}
        tok.eval()
        with torch.no_grad():
            if cfg.mode == "brain":
                shape = data[next(iter(data))].shape[1:]
                self.z_zero = tok.encode(torch.zeros(1, 1, *shape))[0, 0]
            for sid, arr in data.items():
                x = torch.from_numpy(arr)
                x = x[None] if cfg.mode == "brain" else x[:, 0][None, None]
                z_e = tok.encode(x)
                z_q, _, _ = tok.quantize(z_e)
                self.z_e[sid] = z_e[0]
                self.z_q[sid] = z_q[0]

    @torch.no_grad()
    def prompt(self, sid: int, pattern: MissingPattern) -> np.ndarray:
        key = (sid, pattern.missing)
        hit = self._prompts.get(key)
        if hit is not None:
            return hit
        if self.cfg.mode == "brain":
            z_inc, _ = assemble_incomplete_latents(
                self.z_e[sid][None], self.z_zero, [pattern]
            )
        else:
            inc = self.data[sid].copy()
            inc[list(pattern.missing)] = 0.0
            z_inc = self.tok.encode(torch.from_numpy(inc)[:, 0][None, None])
        vec = self.tok.prompts_concat(z_inc)[0].numpy()
        self._prompts[key] = vec
        return vec

    def conditioning_batch(self, ids, patterns) -> torch.Tensor | None:
        mode = self.cfg.conditioning
        if mode == "none":
            return None
        if mode == "mask_codes":
            out = np.zeros((len(ids), 1536), dtype=np.float32)
            for i, pat in enumerate(patterns):
                code = mask_code_onehot(pat)
                out[i, : code.shape[0]] = code
            return torch.from_numpy(out)
        return torch.from_numpy(np.stack([self.prompt(s, p) for s, p in zip(ids, patterns)]))


def train_dit(cfg: RunConfig, dataset: Dataset, vae_dir: Path, out_dir: Path,
              resume_from: Path | None = None, log_cb=None,
              ckpt_every: int | None = None, stop_after: int | None = None) -> Path:
    """Train the diffusion backbone on frozen-tokenizer latents."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tok = load_tokenizer(cfg, vae_dir)
    for p in tok.parameters():
        p.requires_grad_(False)

    model = build_backbone(cfg, init_seed=seed_for(cfg.seed, "dit-init"))
    params = dict(model.named_parameters())
    opt = AdamW(params, lr=cfg.dit_learning_rate, betas=(0.9, 0.999),
                weight_decay=cfg.weight_decay if cfg.dit_optimizer == "adamw" else 0.0)
    ema = EmaShadow(params, cfg.ema_decay)
    schedule = make_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)

    start = 0
    if resume_from is not None:
        arrays, meta = load_checkpoint(resume_from)
        if meta["config_hash"] != cfg.hash():
            raise ValueError("checkpoint config hash does not match the active config")
        load_module_arrays(model, arrays)
        opt.load_state_arrays(
            {k: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("opt.")},
            meta["step"],
        )
        for name in ema.shadow:
            ema.shadow[name] = torch.from_numpy(arrays[f"ema.{name}"]).clone()
        start = meta["step"]

    rows = []
    if start > 0 and resume_from is not None and (Path(resume_from) / "loss_log.csv").exists():
        with open(Path(resume_from) / "loss_log.csv", newline="", encoding="utf-8") as fh:
            rows = [r for r in list(csv.reader(fh))[1:] if int(r[0]) <= start]

    def checkpoint(step: int) -> None:
        arrays = dict(module_arrays(model))
        arrays.update(opt.state_arrays())
        arrays.update({f"ema.{k}": v for k, v in ema.shadow.items()})
        meta = {
            "kind": "dit",
            "step": step,
            "seed": cfg.seed,
            "config_hash": cfg.hash(),
            "conditioning": cfg.conditioning,
        }
        save_checkpoint(out_dir, arrays, meta)
        with open(out_dir / "loss_log.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "l_diff"])
            writer.writerows(rows)

    data = preload(dataset, dataset.train_ids)
    store = LatentStore(tok, cfg, data)
    train_ids = sorted(data)
    model.train()
    last = min(cfg.dit_total_steps, stop_after) if stop_after else cfg.dit_total_steps
    for step in range(start + 1, last + 1):
        rng = step_rng(cfg.seed, step, "dit-batch")
        ids = rng.choice(train_ids, size=cfg.dit_batch_size, replace=len(train_ids) < cfg.dit_batch_size)
        patterns = [sample_missing_pattern(rng, cfg.m, cfg.mode) for _ in ids]
        z0 = torch.stack([store.z_q[i] for i in ids])
        t = torch.from_numpy(rng.integers(1, cfg.timesteps + 1, size=len(ids)))
        gen = torch.Generator().manual_seed(seed_for(cfg.seed, step, "dit-noise"))
        noise = torch.randn(z0.shape, generator=gen)
        prompts = store.conditioning_batch(ids, patterns)

        loss, _ = diffusion_training_loss(model, z0, patterns, t, noise, prompts, schedule)
        _check_finite(loss, step)
        opt.zero_grad()
        loss.backward()
        lr = warmup_cosine_lr(step, cfg.dit_warmup_steps, cfg.dit_total_steps, cfg.dit_learning_rate)
        opt.step(lr=lr)
        ema.update(params)
        rows.append([step, float(loss.detach())])
        if log_cb is not None:
            log_cb(step, {"diff": loss})
        if ckpt_every and step % ckpt_every == 0 and step != last:
            checkpoint(step)

    checkpoint(last)
    return out_dir


def load_backbone(cfg: RunConfig, ckpt_dir: Path, use_ema: bool = True) -> MDiT3D:
    arrays, meta = load_checkpoint(ckpt_dir)
    if meta.get("kind") != "dit":
        raise ValueError(f"{ckpt_dir} is not a diffusion checkpoint")
    model = build_backbone(cfg)
    load_module_arrays(model, arrays)
    if use_ema:
        with torch.no_grad():
            for name, p in model.named_parameters():
                p.copy_(torch.from_numpy(arrays[f"ema.{name}"]))
    model.eval()
    return model
