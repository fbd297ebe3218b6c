import math

import pytest
import torch

from volsynth.optim import AdamW, EmaShadow, NonFiniteGradient, ema_update, warmup_cosine_lr


def test_lr_warmup_endpoints():
    assert warmup_cosine_lr(0, 100, 1000, 3e-4) == 0.0
    assert warmup_cosine_lr(100, 100, 1000, 3e-4) == pytest.approx(3e-4)


def test_lr_cosine_midpoint():
    # halfway through decay: base * cos^2(pi/4) = base / 2
    warmup, total, base = 100, 1000, 2e-3
    mid = (warmup + total) // 2
    assert warmup_cosine_lr(mid, warmup, total, base) == pytest.approx(base / 2)


def test_lr_clamps_past_total():
    assert warmup_cosine_lr(5000, 100, 1000, 1e-3) == pytest.approx(0.0, abs=1e-20)


def test_lr_invalid_warmup():
    with pytest.raises(ValueError):
        warmup_cosine_lr(0, 1000, 1000, 1e-3)


def test_adamw_zero_grad_no_motion():
    p = torch.nn.Parameter(torch.tensor([1.0, -2.0]))
    p.grad = torch.zeros(2)
    opt = AdamW({"p": p}, lr=0.1, weight_decay=0.0)
    opt.step()
    torch.testing.assert_close(p.detach(), torch.tensor([1.0, -2.0]))


def test_adamw_first_step_closed_form():
    g = 0.37
    lr, eps = 1e-2, 1e-8
    p = torch.nn.Parameter(torch.tensor([0.5], dtype=torch.float64))
    p.grad = torch.tensor([g], dtype=torch.float64)
    opt = AdamW({"p": p}, lr=lr, eps=eps, weight_decay=0.0)
    opt.step()
    # bias-corrected first step: m_hat = g, v_hat = g^2
    expected = 0.5 - lr * g / (abs(g) + eps)
    assert p.item() == pytest.approx(expected, rel=1e-12)


def test_adam_equals_adamw_without_decay():
    torch.manual_seed(0)
    init = torch.randn(4, 3)
    grads = [torch.randn(4, 3) for _ in range(5)]
    outs = []
    for _ in range(2):
        p = torch.nn.Parameter(init.clone())
        opt = AdamW({"p": p}, lr=1e-3, weight_decay=0.0)
        for g in grads:
            p.grad = g.clone()
            opt.step()
        outs.append(p.detach().clone())
    torch.testing.assert_close(outs[0], outs[1])


def test_adamw_decoupled_decay_direction():
    p = torch.nn.Parameter(torch.tensor([10.0]))
    p.grad = torch.zeros(1)
    opt = AdamW({"p": p}, lr=0.1, weight_decay=0.5)
    opt.step()
    assert p.item() == pytest.approx(10.0 * (1 - 0.1 * 0.5))


def test_adamw_nonfinite_grad_aborts_with_name():
    a = torch.nn.Parameter(torch.zeros(2))
    b = torch.nn.Parameter(torch.zeros(2))
    a.grad = torch.zeros(2)
    b.grad = torch.tensor([float("nan"), 0.0])
    opt = AdamW({"layer.a": a, "layer.b": b}, lr=0.1)
    before = a.detach().clone()
    with pytest.raises(NonFiniteGradient, match="layer.b"):
        opt.step()
    torch.testing.assert_close(a.detach(), before)  # whole step aborted


def test_ema_boundary_decays():
    params = {"w": torch.tensor([1.0, 2.0])}
    ema = EmaShadow({"w": torch.zeros(2)}, decay=0.0)
    ema.update(params)
    torch.testing.assert_close(ema.shadow["w"], params["w"])

    ema = EmaShadow({"w": torch.tensor([5.0, 5.0])}, decay=1.0)
    ema.update(params)
    torch.testing.assert_close(ema.shadow["w"], torch.tensor([5.0, 5.0]))


def test_ema_single_step_value():
    shadow = {"w": torch.zeros(1, dtype=torch.float64)}
    ema_update(shadow, {"w": torch.ones(1, dtype=torch.float64)}, 0.9999)
    assert abs(shadow["w"].item() - 1e-4) < 1e-12


def test_ema_shape_mismatch():
    ema = EmaShadow({"w": torch.zeros(2)}, decay=0.5)
    with pytest.raises(ValueError, match="shape mismatch"):
        ema.update({"w": torch.zeros(3)})
