"""Command-line entry point: ``fusionregister <command> ...``.

Exit codes: 0 success, 1 internal error (including failing self-tests and
aborted training), 2 usage error (bad flags, missing or unreadable inputs,
incompatible checkpoints).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .data import (
    RunConfig,
    config_from_flat,
    load_config,
    load_image,
    pad_to_multiple,
    save_image,
    scan_dataset,
    unpad,
)
from .errors import (
    CheckpointError,
    ContractError,
    EmptyDatasetError,
    ImageFormatError,
)
from .metrics import evaluate_run, prior_map, segmented_pairs
from .simulate import apply_affine, apply_discrete, baseline_fuse, make_training_sample, synthetic_corpus
from .train import fit, init_state, load_checkpoint, steps_per_epoch
from .warpcore import backward_warp

log = logging.getLogger("fusionregister")

USAGE_ERRORS = (
    FileNotFoundError,
    ImageFormatError,
    ContractError,
    EmptyDatasetError,
    CheckpointError,
)


class UsageError(Exception):
    pass


def write_run_record(out_dir, command, argv, args, config=None):
    """Write ``run.json``: everything needed to repeat the invocation."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    record = {
        "command": command,
        "argv": list(argv),
        "args": {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"},
        "config": None if config is None else config.to_flat(),
        "version": __version__,
        "torch": torch.__version__,
    }
    path = out_dir / "run.json"
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    if config is not None:
        log.info("resolved config: %s", json.dumps(config.to_flat(), sort_keys=True))
    return path


def heat_image(values):
    """Map a non-negative 2-D array to an RGB black-red-yellow-white ramp."""
    v = np.asarray(values, dtype=np.float64)
    top = v.max()
    t = v / top if top > 0 else np.zeros_like(v)
    rgb = np.stack([np.clip(3 * t, 0, 1), np.clip(3 * t - 1, 0, 1), np.clip(3 * t - 2, 0, 1)])
    return torch.from_numpy(rgb)


def _resolve_config(args, base=None):
    overrides = {}
    if getattr(args, "layers", None) is not None:
        overrides["pyramid_depth"] = args.layers
    if getattr(args, "no_mrb", False):
        overrides["no_mrb"] = True
    if getattr(args, "one_way_warp", False):
        overrides["one_way_warp"] = True
    if getattr(args, "mrb_variant", None):
        overrides["mrb_variant"] = args.mrb_variant
    if getattr(args, "epochs", None) is not None:
        overrides["epochs"] = args.epochs
    if getattr(args, "seed", None) is not None:
        overrides["rng_seed"] = args.seed
    if getattr(args, "config", None):
        return load_config(args.config, **overrides)
    if base is None:
        base = RunConfig.desk() if getattr(args, "preset", "full") == "desk" else RunConfig()
    return base.replace(**overrides) if overrides else base


# ---------------------------------------------------------------------------
# train


def _load_pairs(root, cfg):
    records = scan_dataset(root)
    pairs = []
    for rec in records:
        vi = load_image(rec.visible_path)
        ir = load_image(rec.infrared_path)
        if vi.shape[-2:] != ir.shape[-2:]:
            raise ContractError(f"{rec.identifier}: visible and infrared sizes differ")
        if min(vi.shape[-2:]) < cfg.patch_size:
            raise ContractError(
                f"{rec.identifier}: {tuple(vi.shape[-2:])} smaller than patch_size {cfg.patch_size}"
            )
        if rec.fused_path is not None:
            log.info("%s: external fused image ignored for training", rec.identifier)
        pairs.append((vi, ir))
    return pairs


def cmd_train(args, argv):
    cfg = _resolve_config(args)
    if args.resume:
        state = load_checkpoint(args.resume, cfg)
    else:
        state = None
    if args.synthetic:
        pairs = [(p.visible, p.infrared) for p in synthetic_corpus(args.synthetic, cfg.patch_size, cfg.rng_seed)]
    elif args.data:
        pairs = _load_pairs(args.data, cfg)
    else:
        raise UsageError("train needs --data DIR or --synthetic N")
    total = cfg.epochs * steps_per_epoch(len(pairs), cfg.batch_size)
    if state is None:
        state = init_state(cfg, total_steps=total)
    write_run_record(args.out, "train", argv, args, cfg)
    rows = fit(state, pairs, out_dir=args.out, epochs=cfg.epochs - state.epoch if args.resume else cfg.epochs)
    if rows:
        log.info("trained %d steps; first loss %.4f, last loss %.4f", len(rows), rows[0]["total"], rows[-1]["total"])
    return 0


# ---------------------------------------------------------------------------
# register


def register_images(state, vi, ir, fused):
    """Run a trained model on full-resolution inputs.

    Pads to the pyramid multiple, runs the network without gradients and
    returns un-padded ``(I_out, M, phi)`` at the finest scale.
    """
    model = state.model
    model.eval()
    planes = [vi, ir, fused]
    if len({p.shape for p in planes}) != 1:
        raise ContractError("visible, infrared and fused images must share dimensions")
    padded = []
    pad = (0, 0)
    for p in planes:
        q, pad = pad_to_multiple(p, model.multiple)
        padded.append(q)
    with torch.no_grad():
        out = model(*padded)[0]
    return unpad(out.out, pad), unpad(out.mask, pad), unpad(out.field, pad)


def cmd_register(args, argv):
    if args.fused is None and not args.fuse_internally:
        raise UsageError("register needs --fused PATH (or --fuse-internally)")
    state = load_checkpoint(args.ckpt, _resolve_config(args) if args.config else None)
    cfg = state.config
    vi = load_image(args.vi)
    ir = load_image(args.ir)
    if args.fuse_internally:
        fused = baseline_fuse(vi, ir, cfg.fuser)
    else:
        fused = load_image(args.fused)
    out_dir = Path(args.out)
    write_run_record(out_dir, "register", argv, args, cfg)
    i_out, mask, phi = register_images(state, vi, ir, fused)
    save_image(out_dir / "I_out.png", i_out)
    save_image(out_dir / "mask.png", mask)
    magnitude = phi[0].double().pow(2).sum(0).sqrt().numpy()
    save_image(out_dir / "field.png", heat_image(magnitude))
    with open(out_dir / "field.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["y", "x", "phi_h", "phi_v"])
        f = phi[0].double().numpy()
        for y in range(f.shape[1]):
            for x in range(f.shape[2]):
                w.writerow([y, x, repr(float(f[0, y, x])), repr(float(f[1, y, x]))])
    log.info("wrote %s (max |phi| %.3f px)", out_dir, float(magnitude.max()))
    return 0


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(args, argv):
    out = Path(args.out)
    rng = np.random.default_rng(args.seed)
    if args.synthetic:
        corpus = synthetic_corpus(args.count, args.synthetic, args.seed)
        sources = [(f"syn{k:04d}", p.visible, p.infrared, p.masks) for k, p in enumerate(corpus)]
    elif args.input:
        records = scan_dataset(args.input)
        sources = []
        for k in range(args.count):
            rec = records[k % len(records)]
            stem = rec.identifier if args.count <= len(records) else f"{rec.identifier}_{k:04d}"
            sources.append((stem, load_image(rec.visible_path), load_image(rec.infrared_path), None))
    else:
        raise UsageError("simulate needs --in DIR or --synthetic SIZE")
    write_run_record(out, "simulate", argv, args)
    lines = []
    for stem, vi, ir, masks in sources:
        s = make_training_sample(vi, ir, rng, fuser=args.fuser, deform_only_ir=args.deform_only_ir)
        save_image(out / f"{stem}_vi.png", s.visible)
        save_image(out / f"{stem}_ir.png", s.infrared_deformed)
        save_image(out / f"{stem}_f.png", s.fused)
        save_image(out / f"{stem}_gt.png", s.fused_registered)
        lines.append(f"{stem} {s.params.to_line()}")
        if masks is not None:
            _write_object_masks(out / "masks", stem, masks, s.params, args.deform_only_ir)
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    log.info("wrote %d samples to %s", len(sources), out)
    return 0


def _write_object_masks(directory, stem, masks, params, deform_only_ir=False):
    """Reference (``_a``) and misaligned (``_b``) masks in the sample's geometry."""
    for j, m in enumerate(masks):
        t = torch.from_numpy(m.astype(np.float64))[None, None]
        if deform_only_ir:
            ref, moved = t, apply_affine(t, params)
        else:
            ref = apply_discrete(t, params)
            moved = apply_affine(ref, params, discrete=False)
        save_image(directory / f"{stem}_{j:02d}_a.png", ref)
        save_image(directory / f"{stem}_{j:02d}_b.png", (moved > 0.5).double())


# ---------------------------------------------------------------------------
# evaluate / prior-analysis


def _images_by_stem(directory):
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(directory)
    return {p.stem: p for p in sorted(directory.iterdir()) if p.is_file()}


def read_mask_pairs(directory, stem=None):
    """``<stem>_<objid>_{a,b}.png`` files as a sorted list of boolean pairs."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(directory)
    pairs = []
    pattern = "*_a.png" if stem is None else f"{stem}_*_a.png"
    for a in sorted(directory.glob(pattern)):
        b = a.with_name(a.name[: -len("_a.png")] + "_b.png")
        if not b.is_file():
            log.warning("mask %s has no partner; skipped", a.name)
            continue
        ma = load_image(a, channels=1)[0, 0].numpy() > 0.5
        mb = load_image(b, channels=1)[0, 0].numpy() > 0.5
        pairs.append((ma, mb))
    return pairs


def cmd_evaluate(args, argv):
    before = _images_by_stem(args.before)
    after = _images_by_stem(args.after)
    stems = sorted(set(before) & set(after))
    if not stems:
        raise EmptyDatasetError(f"no common image names in {args.before} and {args.after}")
    masks_before = masks_after = []
    if args.segment_level is not None:
        if not args.masks:
            raise UsageError("--segment-level needs --masks")
        masks_before, masks_after = [], []
        for s in stems:
            objects = read_mask_pairs(args.masks, s)
            masks_before += segmented_pairs(load_image(before[s]), objects, args.segment_level)
            masks_after += segmented_pairs(load_image(after[s]), objects, args.segment_level)
    elif args.masks:
        root = Path(args.masks)
        if (root / "before").is_dir() and (root / "after").is_dir():
            masks_before = read_mask_pairs(root / "before")
            masks_after = read_mask_pairs(root / "after")
        else:
            masks_before = masks_after = read_mask_pairs(root)
    out = Path(args.out)
    write_run_record(out.parent, "evaluate", argv, args)
    reports = [evaluate_run(load_image(before[s]), load_image(after[s])) for s in stems]
    rows = []
    for key in reports[0].before:
        b = float(np.mean([r.before[key] for r in reports]))
        a = float(np.mean([r.after[key] for r in reports]))
        rows.append((key, b, a, a - b))
    if masks_before:
        summary = evaluate_run(load_image(before[stems[0]]), load_image(after[stems[0]]), masks_before, masks_after)
        rows += [r for r in summary.rows() if r[0] in ("IoU", "PR")]
    else:
        log.warning("no masks supplied; reporting image quality only")
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "before", "after", "delta"])
        w.writerows(rows)
    for row in rows:
        print("%-4s before %.4f after %.4f delta %+.4f" % row)
    return 0


def cmd_prior_analysis(args, argv):
    fused = load_image(args.fused)
    gt = load_image(args.gt)
    pm = prior_map(fused, gt, args.patch, args.stride)
    out = Path(args.out)
    write_run_record(out.parent, "prior-analysis", argv, args)
    grid = torch.from_numpy((pm.ssim + 1) / 2)
    save_image(out, grid[None])
    with open(out.with_suffix(".csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "col", "top", "left", "ssim"])
        for r in range(pm.ssim.shape[0]):
            for c in range(pm.ssim.shape[1]):
                w.writerow([r, c, r * pm.stride, c * pm.stride, repr(float(pm.ssim[r, c]))])
    print(f"mean patch SSIM {pm.ssim.mean():.4f}, min {pm.ssim.min():.4f}")
    return 0


# ---------------------------------------------------------------------------
# warp-demo / selftest


def cmd_warp_demo(args, argv):
    if args.image:
        img = load_image(args.image).double()
    else:
        img = synthetic_corpus(1, 64, 0)[0].visible.double()
    phi = torch.zeros(img.shape[0], 2, *img.shape[-2:], dtype=img.dtype)
    phi[:, 0] = args.dx
    phi[:, 1] = args.dy
    out = Path(args.out)
    write_run_record(out.parent, "warp-demo", argv, args)
    save_image(out, backward_warp(img, phi))
    return 0


def cmd_selftest(args, argv, warp=None):
    from .selftest import run_selftest

    torch.manual_seed(0)
    if args.out:
        write_run_record(args.out, "selftest", argv, args)
    results = run_selftest(warp=warp)
    failed = [name for name, fails in results.items() if fails]
    if failed:
        print("failing groups: " + ", ".join(failed))
        return 1
    print("all groups pass")
    return 0


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="fusionregister", description="Post-registration of fused infrared/visible images.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a registrar")
    t.add_argument("--data", type=Path)
    t.add_argument("--synthetic", type=int, metavar="N", help="train on N generated shape pairs")
    t.add_argument("--config", type=Path)
    t.add_argument("--preset", choices=("full", "desk"), default="full")
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--resume", type=Path)
    t.add_argument("--no-mrb", action="store_true")
    t.add_argument("--one-way-warp", action="store_true")
    t.add_argument("--mrb-variant", choices=("gmlp", "dc", "dt"))
    t.add_argument("--layers", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("register", help="register a fused image with a trained model")
    r.add_argument("--vi", type=Path, required=True)
    r.add_argument("--ir", type=Path, required=True)
    r.add_argument("--fused", type=Path)
    r.add_argument("--ckpt", type=Path, required=True)
    r.add_argument("--out", type=Path, required=True)
    r.add_argument("--config", type=Path)
    r.add_argument("--fuse-internally", action="store_true")
    r.set_defaults(func=cmd_register)

    s = sub.add_parser("simulate", help="write deformed training quadruples")
    s.add_argument("--in", dest="input", type=Path)
    s.add_argument("--synthetic", type=int, metavar="SIZE", help="generate shape scenes of this size")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--fuser", choices=("max", "mean"), default="max")
    s.add_argument("--count", type=int, default=8)
    s.add_argument("--deform-only-ir", action="store_true")
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("evaluate", help="quality and mask-overlap report")
    e.add_argument("--before", type=Path, required=True)
    e.add_argument("--after", type=Path, required=True)
    e.add_argument("--masks", type=Path)
    e.add_argument("--out", type=Path, required=True)
    e.add_argument(
        "--segment-level",
        type=float,
        help="segment bright objects in each image (luma above this level, prompted by the masks) "
        "and score those segmentations against the reference masks",
    )
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("prior-analysis", help="patchwise SSIM map")
    a.add_argument("--fused", type=Path, required=True)
    a.add_argument("--gt", type=Path, required=True)
    a.add_argument("--patch", type=int, default=32)
    a.add_argument("--stride", type=int, default=16)
    a.add_argument("--out", type=Path, required=True)
    a.set_defaults(func=cmd_prior_analysis)

    w = sub.add_parser("warp-demo", help="warp an image by a constant field")
    w.add_argument("--image", type=Path)
    w.add_argument("--dx", type=float, default=1.5)
    w.add_argument("--dy", type=float, default=0.0)
    w.add_argument("--out", type=Path, required=True)
    w.set_defaults(func=cmd_warp_demo)

    st = sub.add_parser("selftest", help="run the bundled property suite")
    st.add_argument("--out", type=Path)
    st.set_defaults(func=cmd_selftest)
    return p


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    torch.set_num_threads(1)
    try:
        return args.func(args, argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NotImplementedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # anything else is a bug or an aborted run
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
