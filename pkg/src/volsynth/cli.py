"""Command-line surface tying the two stages together.

Commands: gen-data, train-vae, train-dit, synth, eval, corrupt-study,
inspect-ckpt. Exit codes: 0 success, 1 usage error, 2 data error,
3 numeric failure (non-finite loss).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint
from .config import CONDITIONING_MODES, RunConfig, profile_config
from .diffusion import make_schedule, sample_missing
from .phantom import DatasetError, apply_missing, read_dataset, write_dataset
from .studies import (
    corruption_study,
    evaluate_synthesis,
    grouped_report_rows,
    write_report,
)
from .train import (
    NumericFailure,
    generator_params,
    load_backbone,
    load_tokenizer,
    seed_for,
    train_dit,
    train_vae,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def write_pgm(path: Path, image: np.ndarray) -> None:
    """Plain-text portable graymap of a [H, W] array in [0, 1]."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    pixels = np.round(img * 255).astype(int)
    lines = [f"P2", f"{img.shape[1]} {img.shape[0]}", "255"]
    lines += [" ".join(str(v) for v in row) for row in pixels]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _resolve_config(args) -> RunConfig:
    if getattr(args, "config", None):
        cfg = RunConfig.from_json(args.config)
    elif getattr(args, "profile", None):
        cfg = profile_config(args.profile)
    else:
        raise _UsageError("one of --config or --profile is required")
    overrides = {}
    for field in ("seed", "subjects", "conditioning", "injection_site"):
        val = getattr(args, field, None)
        if val is not None:
            overrides[field] = val
    if getattr(args, "steps", None) is not None:
        overrides["vae_total_steps"] = args.steps
        overrides["dit_total_steps"] = args.steps
    if overrides:
        cfg = RunConfig.from_dict({**cfg.to_dict(), **overrides})
    return cfg


def _add_common(p: argparse.ArgumentParser, out_required: bool = True):
    p.add_argument("--config", type=Path, help="JSON run configuration")
    p.add_argument("--profile", choices=["paper-b", "paper-c", "desk-b", "desk-c"])
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, required=out_required)
    p.add_argument("--force", action="store_true")


def build_parser() -> _Parser:
    parser = _Parser(prog="volsynth")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a phantom dataset")
    _add_common(p)
    p.add_argument("--subjects", type=int)

    p = sub.add_parser("train-vae", help="train the tokenizer")
    _add_common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--resume", type=Path)
    p.add_argument("--steps", type=int)

    p = sub.add_parser("train-dit", help="train the diffusion backbone")
    _add_common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--vae", type=Path, required=True)
    p.add_argument("--resume", type=Path)
    p.add_argument("--steps", type=int)
    p.add_argument("--conditioning", choices=list(CONDITIONING_MODES))

    p = sub.add_parser("synth", help="synthesize missing slots for test subjects")
    _add_common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--vae", type=Path, required=True)
    p.add_argument("--dit", type=Path, required=True)
    p.add_argument("--subject", type=int, nargs="*")
    p.add_argument("--conditioning", choices=list(CONDITIONING_MODES))

    p = sub.add_parser("eval", help="evaluate synthesis quality on the test split")
    _add_common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--vae", type=Path, required=True)
    p.add_argument("--dit", type=Path, required=True)
    p.add_argument("--conditioning", choices=list(CONDITIONING_MODES))

    p = sub.add_parser("corrupt-study", help="prompt-corruption sensitivity study")
    _add_common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--vae", type=Path, required=True)
    p.add_argument("--dit", type=Path, required=True)
    p.add_argument("--seeds", type=str, default="0,1,2")
    p.add_argument("--max-subjects", type=int)

    p = sub.add_parser("inspect-ckpt", help="print checkpoint metadata")
    p.add_argument("path", type=Path)
    return parser


def _check_out_dir(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()) and not force:
        raise DatasetError(f"output directory {path} is not empty (use --force)")


def _cmd_gen_data(args) -> int:
    cfg = _resolve_config(args)
    if args.out.exists():
        _check_out_dir(args.out, args.force)
    ds = write_dataset(args.out, generator_params(cfg), cfg.seed, cfg.subjects)
    print(
        f"wrote {cfg.subjects} subjects (mode={cfg.mode}, m={cfg.m}, "
        f"shape={cfg.vol_shape}) to {args.out}; "
        f"train/test = {len(ds.train_ids)}/{len(ds.test_ids)}"
    )
    return EXIT_OK


def _cmd_train_vae(args) -> int:
    cfg = _resolve_config(args)
    ds = read_dataset(args.data)
    out = train_vae(cfg, ds, args.out, resume_from=args.resume)
    print(f"tokenizer checkpoint at {out}")
    return EXIT_OK


def _cmd_train_dit(args) -> int:
    cfg = _resolve_config(args)
    ds = read_dataset(args.data)
    out = train_dit(cfg, ds, args.vae, args.out, resume_from=args.resume)
    print(f"diffusion checkpoint at {out} (conditioning={cfg.conditioning})")
    return EXIT_OK


def _mid_views(vol: np.ndarray):
    d, h, w = vol.shape
    return {
        "axial": vol[d // 2],
        "sagittal": vol[:, h // 2],
        "coronal": vol[:, :, w // 2],
    }


def _cmd_synth(args) -> int:
    cfg = _resolve_config(args)
    ds = read_dataset(args.data)
    tok = load_tokenizer(cfg, args.vae)
    model = load_backbone(cfg, args.dit)
    schedule = make_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)
    args.out.mkdir(parents=True, exist_ok=True)
    ids = args.subject if args.subject else ds.test_ids
    from .studies import eval_patterns

    patterns = eval_patterns(ds, cfg.seed, ids)
    for sid in ids:
        vol = ds.load(sid)
        pattern = patterns[sid]
        incomplete, _ = apply_missing(vol, pattern)
        synth = sample_missing(
            model, tok, incomplete, pattern, schedule, cfg.sampling_steps,
            seed=seed_for(cfg.seed, sid, "synth"), conditioning=cfg.conditioning,
        )
        full = args.out / f"subject_{sid:05d}_full.f32"
        full.write_bytes(np.ascontiguousarray(synth.astype("<f4")).tobytes())
        for slot in pattern.missing:
            slot_file = args.out / f"subject_{sid:05d}_slot{slot:02d}.f32"
            slot_file.write_bytes(np.ascontiguousarray(synth[slot].astype("<f4")).tobytes())
        view_vol = (
            synth[pattern.missing[0]]
            if cfg.mode == "brain"
            else synth[list(pattern.missing), 0]
        )
        for view, img in _mid_views(view_vol).items():
            write_pgm(args.out / f"subject_{sid:05d}_{view}.pgm", img)
        print(f"subject {sid}: synthesized slots {list(pattern.missing)}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    ds = read_dataset(args.data)
    tok = load_tokenizer(cfg, args.vae)
    model = load_backbone(cfg, args.dit)
    schedule = make_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)
    results = evaluate_synthesis(
        model, tok, ds, schedule, cfg.sampling_steps, cfg.seed,
        conditioning=cfg.conditioning,
    )
    rows = grouped_report_rows(results, cfg.seed, kind=cfg.conditioning)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_report(args.out, rows)
    print(f"evaluated {len(results)} subjects -> {args.out}")
    return EXIT_OK


def _cmd_corrupt_study(args) -> int:
    cfg = _resolve_config(args)
    ds = read_dataset(args.data)
    tok = load_tokenizer(cfg, args.vae)
    model = load_backbone(cfg, args.dit)
    schedule = make_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)
    seeds = [int(s) for s in args.seeds.split(",") if s]
    ids = ds.test_ids[: args.max_subjects] if args.max_subjects else None
    rows = corruption_study(
        model, tok, ds, schedule, cfg.sampling_steps, seeds, subject_ids=ids
    )
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_report(args.out, rows)
    print(f"corruption study rows: {len(rows)} -> {args.out}")
    return EXIT_OK


def _cmd_inspect(args) -> int:
    arrays, meta = load_checkpoint(args.path)
    total = sum(int(np.prod(a.shape)) for a in arrays.values())
    print(json.dumps(meta, indent=1, sort_keys=True))
    print(f"{len(arrays)} arrays, {total} float32 values")
    return EXIT_OK


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train-vae": _cmd_train_vae,
    "train-dit": _cmd_train_dit,
    "synth": _cmd_synth,
    "eval": _cmd_eval,
    "corrupt-study": _cmd_corrupt_study,
    "inspect-ckpt": _cmd_inspect,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return _COMMANDS[args.command](args)
    except _UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericFailure as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetError, CheckpointError, ValueError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
