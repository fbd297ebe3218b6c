"""Acceptance suite: one test per numbered criterion, one PASS/FAIL line each.

Desk-scale artifacts (dataset, three tokenizer seeds, nine diffusion
models) are trained on demand and cached under VOLSYNTH_CACHE (default
~/.cache/volsynth-acceptance), keyed by config hash; delete the cache
directory to force a cold retrain.
"""

import math
import os
from pathlib import Path

import numpy as np
import pytest
import torch

from volsynth.backbone import BackboneConfig, MDiT3D, parameter_count
from volsynth.checkpoint import load_checkpoint
from volsynth.config import RunConfig, profile_config
from volsynth.diffusion import (
    ddim_step,
    diffusion_training_loss,
    make_schedule,
    q_sample,
    sample_missing,
)
from volsynth.layers import MultiHeadAttention, AttentionConfig, Modulation, conv3d_forward, grad_check, modulate
from volsynth.metrics import pretext_accuracy, psnr, ssim3d
from volsynth.phantom import apply_missing, read_dataset, sample_missing_pattern, write_dataset
from volsynth.studies import (
    baseline_results,
    corruption_study,
    evaluate_synthesis,
    mean_missing_psnr,
    median_psnr_from_rows,
)
from volsynth.tokenizer import (
    CompletenessTokenizer,
    TokenizerConfig,
    contrastive_loss,
    detection_loss,
    positioning_loss,
    tokenizer_loss,
)
from volsynth.train import (
    build_tokenizer,
    generator_params,
    load_backbone,
    load_tokenizer,
    step_rng,
    train_dit,
    train_vae,
)
from volsynth.phantom import GeneratorParams, MissingPattern, generate_subject

SEEDS = (0, 1, 2)
CACHE = Path(os.environ.get("VOLSYNTH_CACHE", Path.home() / ".cache" / "volsynth-acceptance"))


def report(num: int, ok: bool, detail: str) -> None:
    print(f"\nCRITERION {num}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, f"criterion {num}: {detail}"


def desk_cfg(seed: int = 0, **overrides) -> RunConfig:
    return profile_config("desk-b", seed=seed, **overrides)


# ---------------------------------------------------------------------------
# Cached desk-scale artifacts
# ---------------------------------------------------------------------------


@pytest.fixture(scope="session")
def desk_dataset():
    cfg = desk_cfg()
    root = CACHE / "dataset"
    try:
        ds = read_dataset(root)
        if ds.manifest.subject_count == cfg.subjects and ds.manifest.global_seed == 0:
            return ds
    except Exception:
        pass
    return write_dataset(root, generator_params(cfg), global_seed=0, subject_count=cfg.subjects)


def _cached_vae(cfg: RunConfig, dataset) -> Path:
    out = CACHE / f"vae-{cfg.hash()}-s{cfg.seed}"
    try:
        _, meta = load_checkpoint(out)
        if meta["config_hash"] == cfg.hash() and meta["step"] == cfg.vae_total_steps:
            return out
    except Exception:
        pass
    return train_vae(cfg, dataset, out)


def _cached_dit(cfg: RunConfig, dataset, vae_dir: Path) -> Path:
    out = CACHE / f"dit-{cfg.hash()}-s{cfg.seed}-{cfg.conditioning}"
    try:
        _, meta = load_checkpoint(out)
        if meta["config_hash"] == cfg.hash() and meta["step"] == cfg.dit_total_steps:
            return out
    except Exception:
        pass
    return train_dit(cfg, dataset, vae_dir, out)


@pytest.fixture(scope="session")
def vae_ckpts(desk_dataset):
    return {s: _cached_vae(desk_cfg(seed=s), desk_dataset) for s in SEEDS}


@pytest.fixture(scope="session")
def dit_ckpts(desk_dataset, vae_ckpts):
    out = {}
    for s in SEEDS:
        for conditioning in ("prompts", "none", "mask_codes"):
            cfg = desk_cfg(seed=s, conditioning=conditioning)
            out[(s, conditioning)] = _cached_dit(cfg, desk_dataset, vae_ckpts[s])
    return out


@pytest.fixture(scope="session")
def synth_psnrs(desk_dataset, vae_ckpts, dit_ckpts):
    """Mean missing-slot PSNR per (training seed, conditioning)."""
    out = {}
    for s in SEEDS:
        cfg = desk_cfg(seed=s)
        tok = load_tokenizer(cfg, vae_ckpts[s])
        schedule = make_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)
        for conditioning in ("prompts", "none", "mask_codes"):
            model = load_backbone(cfg, dit_ckpts[(s, conditioning)])
            results = evaluate_synthesis(
                model, tok, desk_dataset, schedule, cfg.sampling_steps,
                seed=0, conditioning=conditioning,
            )
            out[(s, conditioning)] = mean_missing_psnr(results)
    return out


# ---------------------------------------------------------------------------
# 1. Parameter-count conformance
# ---------------------------------------------------------------------------


def test_criterion_1_parameter_counts():
    brain = parameter_count(profile_config("paper-b").backbone_config())
    cardiac = parameter_count(profile_config("paper-c").backbone_config())
    ok_b = abs(brain - 173.3e6) / 173.3e6 <= 0.05
    ok_c = abs(cardiac - 33.0e6) / 33.0e6 <= 0.05
    report(1, ok_b and ok_c,
           f"brain {brain/1e6:.2f}M (target 173.3M +/-5%), cardiac {cardiac/1e6:.2f}M (target 33.0M +/-5%)")


# ---------------------------------------------------------------------------
# 2. Gradient suite (64-bit finite differences, <= 1e-4)
# ---------------------------------------------------------------------------


def test_criterion_2_gradient_suite():
    torch.manual_seed(0)
    errs = {}

    gen = torch.Generator().manual_seed(0)
    x = torch.randn(2, 4, 4, 4, generator=gen, dtype=torch.float64)
    w = torch.randn(3, 2, 2, 2, 2, generator=gen, dtype=torch.float64)
    b = torch.randn(3, generator=gen, dtype=torch.float64)
    errs["conv3d"] = grad_check(lambda a, c, d: conv3d_forward(a, c, d, stride=2), [x, w, b])

    attn = MultiHeadAttention(AttentionConfig(num_heads=2, head_dim=4)).double()
    errs["attention"] = grad_check(lambda a: attn(a), [torch.randn(2, 3, 8, dtype=torch.float64)])

    norm = torch.nn.LayerNorm(6, elementwise_affine=False).double()
    mod = Modulation(6, 6, n_values=6).double()
    with torch.no_grad():
        mod.linear.weight.normal_(std=0.3)
        mod.linear.bias.normal_(std=0.3)
    mlp = torch.nn.Sequential(torch.nn.Linear(6, 12), torch.nn.GELU(), torch.nn.Linear(12, 6)).double()

    def adaln_block(a, cond):
        sa, ca, ga, sm, cm, gm = mod(cond)
        h = a + ga[:, None, :] * modulate(norm(a), sa, ca)
        return h + gm[:, None, :] * mlp(modulate(norm(h), sm, cm))

    errs["adaln_block"] = grad_check(
        adaln_block,
        [torch.randn(2, 3, 6, dtype=torch.float64), torch.randn(2, 6, dtype=torch.float64)],
    )

    # VQ straight-through path: gradient through the quantizer equals the
    # downstream gradient evaluated at z_q; the oracle differentiates the
    # downstream map at the quantized point
    from volsynth.tokenizer import VectorQuantizer

    vq = VectorQuantizer(8, 3).double()
    lin = torch.nn.Linear(3, 1).double()
    z = torch.randn(1, 3, 2, 1, 1, dtype=torch.float64, requires_grad=True)
    z_q, _, _ = vq(z)
    loss = lin(z_q.movedim(1, -1)).sum()
    (g_st,) = torch.autograd.grad(loss, z)
    q_point = z_q.detach().clone()
    errs["vq_straight_through"] = grad_check(
        lambda q: lin(q.movedim(1, -1)).sum(), [q_point]
    )
    with torch.no_grad():
        analytic_at_q = lin.weight.reshape(3, 1, 1, 1).expand_as(z[0]) / 1.0
    errs["vq_st_identity"] = float((g_st[0] - analytic_at_q).abs().max())

    tok_cfg = TokenizerConfig(mode="brain", m=4, channels=(8, 16, 16), codebook_size=16,
                              prompt_channels=(8, 16), prompt_hidden=16)
    torch.manual_seed(1)
    tok = CompletenessTokenizer(tok_cfg).double()
    z_lat = torch.randn(2, 4, 8, 2, 2, 1, dtype=torch.float64) * 0.5

    errs["loss_detection"] = grad_check(lambda a: detection_loss(tok, a, [1, 2])[0], [z_lat],
                                        max_coords=192)
    errs["loss_positioning"] = grad_check(lambda a: positioning_loss(tok, a, [(0,), (1, 3)])[0],
                                          [z_lat], max_coords=192)
    errs["loss_contrastive"] = grad_check(
        lambda a, bb: contrastive_loss(a, bb, 0.2),
        [torch.randn(3, 8, dtype=torch.float64), torch.randn(3, 8, dtype=torch.float64)],
    )

    xin = torch.rand(1, 4, 8, 8, 8, dtype=torch.float64)

    def rec_loss(a):
        z_e = tok.encode(a)
        z_q2, _, vq_l = tok.quantize(z_e)
        return (tok.decode(z_q2) - a).abs().mean() + vq_l

    errs["loss_reconstruction"] = grad_check(rec_loss, [xin], step=1e-6, max_coords=160)

    bb_cfg = BackboneConfig(variant="brain", latent_grid=(2, 2, 2), n_slots=2,
                            hidden=24, blocks=2, heads=2, patch=1, latent_dim=2, t_max=50)
    torch.manual_seed(2)
    model = MDiT3D(bb_cfg).double()
    gen2 = torch.Generator().manual_seed(3)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=gen2, dtype=torch.float64) * 0.2)
    schedule = make_schedule(50)

    def diff_loss(z0):
        pats2 = [MissingPattern(m=4, missing=(1,), mode="brain")]
        noise = torch.zeros_like(z0)
        prompt = torch.zeros(1, 1536, dtype=torch.float64)
        loss, _ = diffusion_training_loss(model, z0, pats2, torch.tensor([10]),
                                          noise, prompt, schedule)
        return loss

    errs["loss_diffusion_full_mdit"] = grad_check(
        diff_loss, [torch.randn(1, 2, 2, 2, 2, 2, dtype=torch.float64)]
    )

    worst = max(errs.values())
    detail = ", ".join(f"{k}={v:.2e}" for k, v in errs.items())
    report(2, worst <= 1e-4, f"max rel err {worst:.2e} <= 1e-4 ({detail})")


# ---------------------------------------------------------------------------
# 3. Closed-form loss values
# ---------------------------------------------------------------------------


def test_criterion_3_closed_forms():
    checks = {}
    torch.manual_seed(0)
    tok = CompletenessTokenizer(TokenizerConfig(
        mode="brain", m=4, channels=(8, 16, 16), codebook_size=16,
        prompt_channels=(8, 16), prompt_hidden=16))
    with torch.no_grad():
        tok.h_detect[1].weight.zero_(); tok.h_detect[1].bias.zero_()
        tok.h_position[1].weight.zero_(); tok.h_position[1].bias.zero_()
    z = tok.encode(torch.rand(1, 4, 16, 16, 16))
    checks["detection_ln3"] = (detection_loss(tok, z, [2])[0].item(), math.log(3))
    checks["positioning_ln4"] = (positioning_loss(tok, z, [(1, 2)])[0].item(), math.log(4))
    e = torch.ones(2, 16, dtype=torch.float64)
    checks["contrastive_ln2"] = (contrastive_loss(e, e.clone(), 0.2).item(), math.log(2))
    a = np.zeros((16, 16, 16))
    checks["psnr_20db"] = (psnr(a, a + 0.1), 20.0)
    c1 = 1e-4
    checks["ssim_const"] = (ssim3d(a, a + 1.0), c1 / (1 + c1))

    worst = max(abs(got - want) / abs(want) for got, want in checks.values())
    detail = ", ".join(f"{k}: {got:.6g} (want {want:.6g})" for k, (got, want) in checks.items())
    report(3, worst <= 1e-6, f"max rel dev {worst:.2e} <= 1e-6 ({detail})")


# ---------------------------------------------------------------------------
# 4. Schedule conformance
# ---------------------------------------------------------------------------


def test_criterion_4_schedule():
    s = make_schedule(500, 0.0015, 0.0195)
    ok_ends = s.beta[0] == 0.0015 and s.beta[-1] == 0.0195
    ok_mono = bool(np.all(np.diff(s.alpha_bar) < 0))

    t, n = 250, 10_000
    gen = torch.Generator().manual_seed(0)
    z_t = q_sample(torch.zeros(n), t, torch.randn(n, generator=gen), s)
    target = 1.0 - s.alpha_bar_at(t)
    sigma = target * np.sqrt(2.0 / (n - 1))
    ok_var = abs(z_t.var(unbiased=True).item() - target) <= 3 * sigma
    report(4, ok_ends and ok_mono and ok_var,
           f"beta endpoints exact={ok_ends}, alpha_bar strictly decreasing={ok_mono}, "
           f"q_sample var {z_t.var(unbiased=True).item():.5f} vs {target:.5f} within 3 sigma={ok_var}")


# ---------------------------------------------------------------------------
# 5. Pretext learnability (desk scale, median of 3 seeds)
# ---------------------------------------------------------------------------


def _pretext_scores(cfg, ckpt, dataset):
    tok = load_tokenizer(cfg, ckpt)
    rng = step_rng(123, 0, "acceptance-eval")
    vols, pats = [], []
    for sid in dataset.test_ids:
        for _ in range(8):
            vols.append(dataset.load(sid).data)
            pats.append(sample_missing_pattern(rng, cfg.m, cfg.mode))
    return pretext_accuracy(tok, vols, pats)


def test_criterion_5_pretext_learnability(desk_dataset, vae_ckpts):
    counts, positions = [], []
    for s in SEEDS:
        ac, ap = _pretext_scores(desk_cfg(seed=s), vae_ckpts[s], desk_dataset)
        counts.append(ac)
        positions.append(ap)
    med_c, med_p = float(np.median(counts)), float(np.median(positions))
    ok = med_c >= 0.90 and med_p >= 0.85
    report(5, ok,
           f"median count acc {med_c:.3f} >= 0.90 (chance 0.33), "
           f"median position acc {med_p:.3f} >= 0.85 (chance <= 0.25); "
           f"per-seed counts {counts}, positions {positions}")


def test_tokenizer_roundtrip_psnr(desk_dataset, vae_ckpts):
    # held-out reconstruction quality of the trained tokenizer (>= 28 dB)
    meds = []
    for s in SEEDS:
        cfg = desk_cfg(seed=s)
        tok = load_tokenizer(cfg, vae_ckpts[s])
        vals = []
        with torch.no_grad():
            for sid in desk_dataset.test_ids:
                x = torch.from_numpy(desk_dataset.load(sid).data)[None]
                z_q, _, _ = tok.quantize(tok.encode(x))
                vals.append(psnr(tok.decode(z_q)[0].numpy(), desk_dataset.load(sid).data))
        meds.append(float(np.mean(vals)))
    med = float(np.median(meds))
    print(f"\nround-trip held-out PSNR per seed: {[round(v, 2) for v in meds]} (median {med:.2f} dB)")
    assert med >= 28.0


# ---------------------------------------------------------------------------
# 6. Diffusion efficacy vs baselines (median of 3 seeds)
# ---------------------------------------------------------------------------


def test_criterion_6_diffusion_efficacy(desk_dataset, synth_psnrs):
    zero = mean_missing_psnr(baseline_results(desk_dataset, 0, "zero"))
    mean = mean_missing_psnr(baseline_results(desk_dataset, 0, "mean"))
    synth = float(np.median([synth_psnrs[(s, "prompts")] for s in SEEDS]))
    ok = synth >= zero + 6.0 and synth >= mean + 2.0
    report(6, ok,
           f"median synth {synth:.2f} dB vs zero-fill {zero:.2f} (+{synth-zero:.2f}, need >= 6) "
           f"and mean-volume {mean:.2f} (+{synth-mean:.2f}, need >= 2)")


# ---------------------------------------------------------------------------
# 7. Conditioning ablation ordering (median of 3 seeds)
# ---------------------------------------------------------------------------


def test_criterion_7_conditioning_ablation(synth_psnrs):
    med = {c: float(np.median([synth_psnrs[(s, c)] for s in SEEDS]))
           for c in ("prompts", "none", "mask_codes")}
    ok = med["prompts"] >= med["none"] + 0.3 and med["prompts"] >= med["mask_codes"]
    report(7, ok,
           f"median PSNR prompts {med['prompts']:.2f} vs none {med['none']:.2f} "
           f"(gap {med['prompts']-med['none']:.2f}, need >= 0.3) and mask codes "
           f"{med['mask_codes']:.2f} (need prompts >= mask)")


# ---------------------------------------------------------------------------
# 8. Sampling invariants
# ---------------------------------------------------------------------------


def test_criterion_8_sampling_invariants(desk_dataset, vae_ckpts, dit_ckpts):
    cfg = desk_cfg(seed=0)
    tok = load_tokenizer(cfg, vae_ckpts[0])
    model = load_backbone(cfg, dit_ckpts[(0, "prompts")])
    schedule = make_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)
    sid = desk_dataset.test_ids[0]
    vol = desk_dataset.load(sid)
    pattern = MissingPattern(m=4, missing=(0, 2), mode="brain")
    incomplete, _ = apply_missing(vol, pattern)

    a, final_lat, initial_lat = sample_missing(
        model, tok, incomplete, pattern, schedule, cfg.sampling_steps, seed=7,
        return_latents=True,
    )
    b = sample_missing(model, tok, incomplete, pattern, schedule, cfg.sampling_steps, seed=7)
    ok_repeat = a.tobytes() == b.tobytes()
    ok_pass = np.array_equal(a[[1, 3]], incomplete[[1, 3]])
    ok_latent = torch.equal(final_lat[[1, 3]], initial_lat[[1, 3]])
    changed = not torch.equal(final_lat[[0, 2]], initial_lat[[0, 2]])
    report(8, ok_repeat and ok_pass and ok_latent and changed,
           f"fixed-seed byte-identical={ok_repeat}, available slots pass through={ok_pass}, "
           f"available latents bit-identical={ok_latent}, missing latents synthesized={changed}")


# ---------------------------------------------------------------------------
# 9. Corruption-study direction
# ---------------------------------------------------------------------------


def test_criterion_9_corruption_direction(desk_dataset, vae_ckpts, dit_ckpts):
    cfg = desk_cfg(seed=0)
    tok = load_tokenizer(cfg, vae_ckpts[0])
    model = load_backbone(cfg, dit_ckpts[(0, "prompts")])
    schedule = make_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)
    rows = corruption_study(
        model, tok, desk_dataset, schedule, cfg.sampling_steps,
        seeds=[0, 1, 2], rates=(0.0, 1.0), kinds=("p_d", "p_p", "p_s"),
        subject_ids=desk_dataset.test_ids[:12],
    )
    drops = {}
    ok_degrade = True
    for kind in ("p_d", "p_p", "p_s"):
        r0 = median_psnr_from_rows(rows, kind, 0.0)
        r1 = median_psnr_from_rows(rows, kind, 1.0)
        drops[kind] = r0 - r1
        ok_degrade = ok_degrade and (r1 <= r0)
    ok_order = drops["p_p"] >= drops["p_s"]
    report(9, ok_degrade and ok_order,
           f"median PSNR drops at r=1.0: " +
           ", ".join(f"{k} {v:+.2f} dB" for k, v in drops.items()) +
           f"; all drops >= 0: {ok_degrade}, p_p drop >= p_s drop: {ok_order}")


# ---------------------------------------------------------------------------
# 10. Initialization identity
# ---------------------------------------------------------------------------


def test_criterion_10_initialization_identity():
    cfg = desk_cfg().backbone_config()
    torch.manual_seed(0)
    model = MDiT3D(cfg)
    z = torch.randn(2, 4, 8, *cfg.latent_grid)
    out = model(z, torch.tensor([5, 50]), torch.randn(2, 1536))
    ok_zero = bool(torch.all(out == 0))

    x = torch.randn(3, cfg.tokens_per_group, cfg.hidden)
    cond = torch.randn(3, cfg.hidden)
    ok_ident = True
    for i, block in enumerate(model.blocks):
        positions = model.token_coords if i % 2 == 0 else None
        ok_ident = ok_ident and torch.allclose(block(x, cond, positions=positions), x)
    report(10, ok_zero and ok_ident,
           f"network output identically zero at init={ok_zero}, every block is the identity={ok_ident}")
