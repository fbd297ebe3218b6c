import numpy as np
import pytest

from volsynth.diffusion import make_schedule
from volsynth.studies import (
    baseline_results,
    corruption_study,
    eval_patterns,
    evaluate_synthesis,
    grouped_report_rows,
    mean_missing_psnr,
    median_psnr_from_rows,
    write_report,
)
from volsynth.train import load_backbone, load_tokenizer, train_dit, train_vae


@pytest.fixture(scope="module")
def setup(tiny_cfg, tiny_dataset, tmp_path_factory):
    root = tmp_path_factory.mktemp("studies")
    vae = train_vae(tiny_cfg, tiny_dataset, root / "vae")
    dit = train_dit(tiny_cfg, tiny_dataset, vae, root / "dit")
    tok = load_tokenizer(tiny_cfg, vae)
    model = load_backbone(tiny_cfg, dit)
    schedule = make_schedule(tiny_cfg.timesteps, tiny_cfg.beta_start, tiny_cfg.beta_end)
    return tiny_cfg, tiny_dataset, tok, model, schedule


def test_eval_patterns_fixed_by_seed(tiny_dataset):
    a = eval_patterns(tiny_dataset, 0)
    b = eval_patterns(tiny_dataset, 0)
    c = eval_patterns(tiny_dataset, 1)
    assert a == b
    assert any(a[k] != c[k] for k in a)


def test_evaluate_synthesis_results(setup):
    cfg, ds, tok, model, schedule = setup
    results = evaluate_synthesis(model, tok, ds, schedule, cfg.sampling_steps, seed=0)
    assert len(results) == len(ds.test_ids)
    for r in results:
        assert np.isfinite(r.psnr_missing) and np.isfinite(r.ssim_missing)
        assert set(r.per_slot) == set(r.pattern.missing)
    rows = grouped_report_rows(results, 0)
    assert any(r[3] == "aggregate" for r in rows)


def test_evaluate_empty_split_rejected(setup):
    cfg, ds, tok, model, schedule = setup
    with pytest.raises(ValueError, match="empty"):
        evaluate_synthesis(model, tok, ds, schedule, cfg.sampling_steps, seed=0, subject_ids=[])


def test_baselines_ordering(tiny_dataset):
    zero = mean_missing_psnr(baseline_results(tiny_dataset, 0, "zero"))
    mean = mean_missing_psnr(baseline_results(tiny_dataset, 0, "mean"))
    assert mean > zero  # the dataset mean is always a better imputation than zeros


def test_report_roundtrip(tmp_path):
    rows = [["p_d", 0.0, 0, "all", 21.5, 0.8]]
    write_report(tmp_path / "r.csv", rows)
    text = (tmp_path / "r.csv").read_text()
    assert text.splitlines()[0] == "kind,rate,seed,slot,psnr_db,ssim"


def test_corruption_study_schema_and_r0(setup):
    cfg, ds, tok, model, schedule = setup
    ids = ds.test_ids[:3]
    rows = corruption_study(
        model, tok, ds, schedule, cfg.sampling_steps, seeds=[0],
        rates=(0.0, 1.0), kinds=("p_p", "p_s"), subject_ids=ids,
    )
    cells = [r for r in rows if r[2] != "median"]
    medians = [r for r in rows if r[2] == "median"]
    assert len(cells) == 4  # |kinds| * |rates| * |seeds|
    assert len(medians) == 4  # one per (kind, rate)

    # r = 0 must be a no-op: equal to the uncorrupted evaluation, same seed
    base = evaluate_synthesis(model, tok, ds, schedule, cfg.sampling_steps, seed=0,
                              subject_ids=ids)
    base_psnr = round(mean_missing_psnr(base), 4)
    for kind in ("p_p", "p_s"):
        assert median_psnr_from_rows(rows, kind, 0.0) == pytest.approx(base_psnr, abs=1e-4)


def test_corruption_study_needs_two_samples(setup):
    cfg, ds, tok, model, schedule = setup
    with pytest.raises(ValueError, match="at least 2"):
        corruption_study(model, tok, ds, schedule, cfg.sampling_steps, seeds=[0],
                         subject_ids=ds.test_ids[:1])
