"""Command-line entry point: ``unetformer <command> [flags]``.

Every command accepts ``--config FILE.json``; keys are flag names (dashes or
underscores) and explicit flags on the command line win over the file.
Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("unetformer")

# reference sizes (millions of parameters) used by the ``params`` diagnostic
REFERENCE_PARAMS = {"cnn": ("UNetFormer", 58.96), "transformer": ("UNetFormer+", 24.44)}
PARAM_BAND = 0.20


class UsageError(Exception):
    pass


# -- shared flags ----------------------------------------------------------

def _model_flags(p: argparse.ArgumentParser, preset: str) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--preset", choices=("tiny", "default"), default=preset,
                   help=f"encoder size preset (default: {preset}); tiny is C=8, depths 1,1,1,1, M=2")
    g.add_argument("--embed-dim", type=int, default=None, help="override the embedding width C")
    g.add_argument("--window", type=int, default=None, help="override the window size M")
    g.add_argument("--num-classes", type=int, default=3, help="segmentation classes K including background")


def _encoder_config(args):
    from .swin import EncoderConfig

    cfg = EncoderConfig.tiny() if args.preset == "tiny" else EncoderConfig()
    kw = {}
    if args.embed_dim is not None:
        kw["embed_dim"] = args.embed_dim
    if args.window is not None:
        kw["window"] = args.window
    if kw:
        from dataclasses import asdict

        cfg = EncoderConfig(**{**asdict(cfg), **kw})
    return cfg


def _synth_flags(p: argparse.ArgumentParser, size: int) -> None:
    g = p.add_argument_group("synthetic data")
    g.add_argument("--size", type=int, default=size, help=f"cubic volume extent, a multiple of 32 (default: {size})")
    g.add_argument("--n-volumes", type=int, default=1, help="number of synthetic volumes (default: 1)")
    g.add_argument("--data-seed", type=int, default=0, help="seed of the synthetic generator (default: 0)")


def _load_volume(path: str) -> tuple[np.ndarray, tuple[float, float, float]]:
    from .io import read_vvol

    arr, header = read_vvol(path)
    return arr.astype(np.float64), header.spacing


def _write_json(obj, path: str | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True, allow_nan=False)
    if path:
        from .io import atomic_write

        atomic_write(path, (text + "\n").encode())
    else:
        print(text)


# -- commands ------------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite

    print(f"{'case':28s} {'max rel error':>14s} {'coords':>7s} {'time':>7s}")

    def show(r, dt):
        flag = "ok" if r.passed(args.tol) else "FAIL"
        print(f"{r.op_name:28s} {r.max_rel_error:14.3e} {r.n_checked:7d} {dt:6.1f}s  {flag}", flush=True)

    results = run_suite(seed=args.seed, include_models=not args.ops_only, tol=args.tol, report=show)
    failed = [r.op_name for r in results if not r.passed(args.tol)]
    print(f"{len(results) - len(failed)}/{len(results)} cases below {args.tol:g}")
    return 1 if failed else 0


def cmd_shapes(args) -> int:
    from .decoders import DecoderConfig
    from .swin import skip_shapes

    enc = _encoder_config(args)
    shapes = skip_shapes(args.input, enc)
    print(f"input (1, {args.input}, {args.input}, {args.input})")
    for i, s in enumerate(shapes):
        print(f"skip {i}  {s}")
    dec = DecoderConfig(args.variant, args.num_classes)
    out = (dec.num_classes,) + shapes[0][1:]
    names = ["logits_full"] + (["logits_aux1", "logits_aux2"] if dec.deep_supervision else [])
    for name in names:
        print(f"{name:12s} {out}")
    return 0


def cmd_pretrain(args) -> int:
    from .io import atomic_write, save_checkpoint
    from .pretrain import MaskedVolumeModel, PretrainConfig, PretrainState, generate_mask, pretrain_step

    enc = _encoder_config(args)
    volumes = _pretrain_volumes(args)
    model = MaskedVolumeModel(enc, seed=args.seed)
    cfg = PretrainConfig(lr=args.lr, steps=args.steps, warmup_steps=args.warmup, mask_ratio=args.mask_ratio,
                         patch_size=args.patch_size, seed=args.seed)
    state = PretrainState.create(model, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    shape = volumes[0].shape[-3:]
    lines = []
    for step in range(cfg.steps):
        mask = generate_mask(shape, cfg.patch_size, cfg.mask_ratio, cfg.seed * 1_000_003 + step)
        loss = pretrain_step(state, volumes[step % len(volumes)], mask)
        rec = {"step": step, "loss": loss, "masked_cubes": len(mask.masked_cubes), "total_cubes": mask.total_cubes}
        lines.append(json.dumps(rec))
        print(f"step {step:4d}  masked {len(mask.masked_cubes)}/{mask.total_cubes}  loss {loss:.6f}", flush=True)
    atomic_write(out / "pretrain_log.jsonl", ("\n".join(lines) + "\n").encode())
    save_checkpoint(out / "pretrain.ckpt", model, step=cfg.steps, rng_state={"seed": args.seed})
    print(f"wrote {out / 'pretrain.ckpt'}")
    return 0


def _pretrain_volumes(args) -> list[np.ndarray]:
    if args.input:
        return [_load_volume(p)[0][0] for p in args.input]
    from .data import synth_dataset

    return [s.image[0] for s in synth_dataset(args.n_volumes, args.size, args.num_classes, seed=args.data_seed)]


def cmd_sweep(args) -> int:
    from .pretrain import ablation_sweep

    rows = ablation_sweep(args.ratios, args.patch_sizes, _pretrain_volumes(args), _encoder_config(args),
                          steps=args.steps, seed=args.seed, lr=args.lr, out_dir=args.out)
    print("ratio  patch  final_loss")
    for r in rows:
        mark = "  <- reference point" if r["reference"] else ""
        print(f"{r['ratio']:5.2f}  {r['patch']:5d}  {r['final_loss']:.6f}{mark}")
    print(f"wrote {Path(args.out) / 'sweep.csv'}")
    return 0


def cmd_train(args) -> int:
    from .data import AugmentFlags, SegSample, synth_dataset
    from .decoders import DecoderConfig, UNetFormer
    from .io import save_checkpoint, transfer_encoder
    from .train import TrainConfig, fit

    enc = _encoder_config(args)
    model = UNetFormer(enc, DecoderConfig(args.variant, args.num_classes), seed=args.seed)
    if args.from_checkpoint:
        rep = transfer_encoder(args.from_checkpoint, model)
        n_dec = sum(1 for n in rep.matched if not n.startswith("encoder."))
        print(f"fine-tuning: {len(rep.matched)} encoder tensors loaded, {n_dec} decoder tensors loaded, "
              f"{len(rep.missing)} initialised fresh")
    if args.image:
        if len(args.image) != len(args.label or []):
            raise UsageError("--image and --label must be given the same number of times")
        data = []
        for ip, lp in zip(args.image, args.label):
            img, spacing = _load_volume(ip)
            lab, _ = _load_volume(lp)
            data.append(SegSample(img[:1], lab[0].astype(np.int64), spacing))
    else:
        data = synth_dataset(args.n_volumes, args.size, args.num_classes, seed=args.data_seed)
    flags = AugmentFlags(flip=args.augment, rotate90=args.augment, intensity_scale=args.augment,
                         intensity_shift=args.augment)
    cfg = TrainConfig(lr=args.lr, epochs=args.epochs, warmup_steps=args.warmup, seed=args.seed, augment=flags,
                      val_every=args.val_every, stop_at_dice=args.stop_at_dice)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = fit(model, data, cfg, log_path=out / "train_log.jsonl", checkpoint_path=out / "best.ckpt")
    for rec in result.records:
        if "val_dice" in rec:
            print(f"step {rec['step']:4d}  lr {rec['lr']:.3g}  loss {rec['loss']:.5f}  dice {rec['val_dice']:.4f}")
    print(f"best dice {result.best_dice:.4f} at step {result.best_step}")
    if result.steps_to_threshold is not None:
        print(f"reached dice > {args.stop_at_dice} after {result.steps_to_threshold} steps")
    save_checkpoint(out / "last.ckpt", model, step=len(result.records), rng_state={"seed": args.seed}, train_config=cfg)
    return 0


def cmd_infer(args) -> int:
    from .inference import SlidingWindowConfig, sliding_window_infer
    from .io import VVolHeader, load_model, write_vvol

    model = load_model(args.checkpoint)
    vol, spacing = _load_volume(args.input)
    cfg = SlidingWindowConfig(args.roi, args.overlap, args.blend)
    probs = sliding_window_infer(model.logits, vol[:1], cfg)
    labels = np.argmax(probs, axis=0).astype(np.uint16)
    write_vvol(args.out, labels, VVolHeader(labels.shape, 1, "u16", spacing))
    print(f"wrote labels {labels.shape} to {args.out}")
    if args.probs:
        write_vvol(args.probs, probs, VVolHeader(probs.shape[1:], probs.shape[0], "f64", spacing))
        print(f"wrote probabilities to {args.probs}")
    return 0


def cmd_eval(args) -> int:
    from .metrics import evaluate

    pred, _ = _load_volume(args.pred)
    gt, spacing = _load_volume(args.gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    res = evaluate(pred[0].astype(np.int64), gt[0].astype(np.int64), args.num_classes, spacing,
                   include_background=args.include_background)
    _write_json(res.to_json(), args.out)
    return 0


def cmd_mask_demo(args) -> int:
    from .data import synth_dataset
    from .io import dump_slice, load_model
    from .pretrain import MaskedVolumeModel, apply_mask, generate_mask
    from .tensor import Tensor, no_grad

    if args.checkpoint:
        model = load_model(args.checkpoint)
        if not isinstance(model, MaskedVolumeModel):
            raise ValueError(f"{args.checkpoint} is not a pre-training checkpoint")
    else:
        model = MaskedVolumeModel(_encoder_config(args), seed=args.seed)
    if args.input:
        vol = _load_volume(args.input)[0][0]
    else:
        vol = synth_dataset(1, args.size, args.num_classes, seed=args.data_seed)[0].image[0]
    mask = generate_mask(vol.shape, args.patch_size, args.mask_ratio, args.seed)
    masked = apply_mask(vol, mask)
    with no_grad():
        recon = model(Tensor(masked[None, None])).data[0]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    index = vol.shape[args.axis] // 2 if args.index is None else args.index
    for name, v in (("original", vol), ("masked", masked), ("recon", recon)):
        path = dump_slice(v, args.axis, index, out / f"{name}.pgm")
        print(f"wrote {path}")
    return 0


def cmd_params(args) -> int:
    from .decoders import DecoderConfig, UNetFormer
    from .nn import count_parameters

    enc = _encoder_config(args)
    ok = True
    rows = []
    for variant in ("cnn", "transformer"):
        name, ref = REFERENCE_PARAMS[variant]
        n = count_parameters(UNetFormer(enc, DecoderConfig(variant, args.num_classes), seed=0)) / 1e6
        within = abs(n - ref) <= PARAM_BAND * ref
        ok &= within
        rows.append({"model": name, "params_m": round(n, 4), "reference_m": ref,
                     "ratio": round(n / ref, 4), "within_20pct": within})
        print(f"{name:12s} {n:10.2f} M   reference {ref:6.2f} M   ratio {n / ref:5.2f}   "
              f"{'within' if within else 'outside'} +-20%")
    if args.json:
        _write_json(rows, args.json)
    print("diagnostic only: head counts and MLP ratio behind the reference sizes are not documented")
    return 0


def cmd_synth(args) -> int:
    from .data import synth_dataset
    from .io import VVolHeader, write_vvol

    out = Path(args.out)
    for i, s in enumerate(synth_dataset(args.n_volumes, args.size, args.num_classes, seed=args.data_seed)):
        write_vvol(out / f"image_{i:03d}.vvol", s.image, VVolHeader(s.image.shape[1:], 1, "f64", s.spacing))
        lab = s.label.astype(np.uint16)
        write_vvol(out / f"label_{i:03d}.vvol", lab, VVolHeader(lab.shape, 1, "u16", s.spacing))
    print(f"wrote {args.n_volumes} image/label pairs to {out}")
    return 0


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="unetformer", description="3D Swin UNet segmentation and masked-volume pre-training on numpy.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", default=None, help="JSON file of flag values; command-line flags take precedence")
        p.set_defaults(func=func)
        return p

    p = add("gradcheck", cmd_gradcheck, "finite-difference check of every differentiable op and both tiny models")
    p.add_argument("--seed", type=int, default=0, help="seed for inputs and probed coordinates (default: 0)")
    p.add_argument("--tol", type=float, default=1e-4, help="max relative error allowed (default: 1e-4)")
    p.add_argument("--ops-only", action="store_true", help="skip the two end-to-end model checks")

    p = add("shapes", cmd_shapes, "print the skip and decoder output shapes for an input size")
    p.add_argument("--input", type=int, default=96, help="cubic input extent (default: 96)")
    p.add_argument("--variant", choices=("cnn", "transformer"), default="cnn", help="decoder (default: cnn)")
    _model_flags(p, "default")

    p = add("pretrain", cmd_pretrain, "masked-volume pre-training with the masked L1 loss")
    p.add_argument("--mask-ratio", type=float, default=0.4, help="fraction of cubes hidden (default: 0.4)")
    p.add_argument("--patch-size", type=int, default=16, help="mask cube edge in voxels (default: 16)")
    p.add_argument("--seed", type=int, default=0, help="model and mask seed (default: 0)")
    p.add_argument("--steps", type=int, default=10, help="optimisation steps (default: 10)")
    p.add_argument("--lr", type=float, default=2e-4, help="peak learning rate (default: 2e-4)")
    p.add_argument("--warmup", type=int, default=0, help="linear warmup steps (default: 0)")
    p.add_argument("--input", action="append", default=None, help="VVOL volume to pre-train on (repeatable); synthetic if absent")
    p.add_argument("--out", default="runs/pretrain", help="output directory (default: runs/pretrain)")
    _model_flags(p, "tiny")
    _synth_flags(p, 96)

    p = add("sweep", cmd_sweep, "masking ratio x patch size grid of short pre-training runs")
    p.add_argument("--ratios", type=float, nargs="+", default=[0.2, 0.4, 0.6, 0.8], help="masking ratios (default: 0.2 0.4 0.6 0.8)")
    p.add_argument("--patch-sizes", type=int, nargs="+", default=[8, 16, 32], help="cube sizes (default: 8 16 32)")
    p.add_argument("--steps", type=int, default=5, help="steps per cell (default: 5)")
    p.add_argument("--lr", type=float, default=2e-4, help="peak learning rate (default: 2e-4)")
    p.add_argument("--seed", type=int, default=0, help="model and mask seed (default: 0)")
    p.add_argument("--input", action="append", default=None, help="VVOL volume (repeatable); synthetic if absent")
    p.add_argument("--out", default="runs/sweep", help="directory for sweep.csv and sweep.json (default: runs/sweep)")
    _model_flags(p, "tiny")
    _synth_flags(p, 96)

    p = add("train", cmd_train, "segmentation training with deep supervision")
    p.add_argument("--variant", choices=("cnn", "transformer"), default="cnn", help="decoder: cnn (UNetFormer) or transformer (UNetFormer+)")
    p.add_argument("--from-checkpoint", default=None, help="pre-training checkpoint whose encoder initialises the model")
    p.add_argument("--epochs", type=int, default=50, help="passes over the training set (default: 50)")
    p.add_argument("--lr", type=float, default=2e-4, help="peak learning rate (default: 2e-4)")
    p.add_argument("--warmup", type=int, default=10, help="linear warmup steps (default: 10)")
    p.add_argument("--val-every", type=int, default=10, help="validation interval in steps (default: 10)")
    p.add_argument("--stop-at-dice", type=float, default=None, help="stop once mean foreground Dice exceeds this")
    p.add_argument("--augment", action="store_true", help="random flips, rotations and intensity jitter")
    p.add_argument("--seed", type=int, default=0, help="model and shuffling seed (default: 0)")
    p.add_argument("--image", action="append", default=None, help="VVOL image (repeatable, pairs with --label)")
    p.add_argument("--label", action="append", default=None, help="VVOL u16 label map (repeatable)")
    p.add_argument("--out", default="runs/train", help="output directory (default: runs/train)")
    _model_flags(p, "tiny")
    _synth_flags(p, 64)

    p = add("infer", cmd_infer, "sliding-window inference of a VVOL volume")
    p.add_argument("--checkpoint", required=True, help="segmentation checkpoint")
    p.add_argument("--input", required=True, help="VVOL image")
    p.add_argument("--out", required=True, help="output VVOL of u16 labels")
    p.add_argument("--probs", default=None, help="optional output VVOL of class probabilities")
    p.add_argument("--roi", type=int, default=96, help="window edge, a multiple of 32 (default: 96)")
    p.add_argument("--overlap", type=float, default=0.7, help="window overlap in [0, 1) (default: 0.7)")
    p.add_argument("--blend", choices=("constant", "gaussian"), default="constant", help="window weighting (default: constant)")

    p = add("eval", cmd_eval, "Dice, Hausdorff and HD95 per class as JSON")
    p.add_argument("--pred", required=True, help="VVOL predicted labels")
    p.add_argument("--gt", required=True, help="VVOL ground-truth labels (its spacing is used)")
    p.add_argument("--num-classes", type=int, default=3, help="classes including background (default: 3)")
    p.add_argument("--include-background", action="store_true", help="also score class 0")
    p.add_argument("--out", default=None, help="JSON output file (stdout if absent)")

    p = add("mask-demo", cmd_mask_demo, "write original, masked and reconstructed slices as PGM")
    p.add_argument("--checkpoint", default=None, help="pre-training checkpoint (fresh model if absent)")
    p.add_argument("--input", default=None, help="VVOL volume (synthetic if absent)")
    p.add_argument("--mask-ratio", type=float, default=0.4, help="fraction of cubes hidden (default: 0.4)")
    p.add_argument("--patch-size", type=int, default=16, help="mask cube edge (default: 16)")
    p.add_argument("--seed", type=int, default=0, help="mask and model seed (default: 0)")
    p.add_argument("--axis", type=int, choices=(0, 1, 2), default=2, help="slice axis (default: 2)")
    p.add_argument("--index", type=int, default=None, help="slice index (default: middle)")
    p.add_argument("--out", default="runs/mask_demo", help="output directory (default: runs/mask_demo)")
    _model_flags(p, "tiny")
    _synth_flags(p, 96)

    p = add("params", cmd_params, "parameter counts of both models next to the reference sizes")
    p.add_argument("--json", default=None, help="also write the table as JSON")
    _model_flags(p, "default")

    p = add("synth", cmd_synth, "write synthetic image/label VVOL pairs")
    p.add_argument("--out", default="runs/synth", help="output directory (default: runs/synth)")
    p.add_argument("--num-classes", type=int, default=3, help="classes including background (default: 3)")
    _synth_flags(p, 64)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: list[str], args) -> argparse.Namespace:
    try:
        cfg = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {args.config}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError("config file must hold a JSON object")
    known = vars(args)
    overrides = {}
    for key, value in cfg.items():
        dest = key.replace("-", "_")
        if dest in ("func", "command", "config") or dest not in known:
            raise UsageError(f"unknown config key {key!r} for command {args.command}")
        overrides[dest] = value
    sub = parser._subparsers._group_actions[0].choices[args.command]
    sub.set_defaults(**overrides)
    return parser.parse_args(argv)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.config:
            args = _apply_config(parser, argv, args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"unetformer: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"unetformer: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure: one-line diagnostic, exit 1
        log.debug("traceback", exc_info=True)
        print(f"unetformer {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
