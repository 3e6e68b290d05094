"""Command-line entry point.

Subcommands: prep (synthetic dataset), maskgen, train (three phases),
train-segmenter, eval, infer, ablate, serve. Exit codes: 0 success,
2 config error, 3 data error, 4 numeric failure.
"""

import argparse
import sys
from pathlib import Path

import torch

from . import data as data_mod
from . import masks as masks_mod
from .engine import InpaintEngine
from .errors import (
    CheckpointError,
    DataError,
    EspaintError,
    NumericError,
    ParameterError,
)
from .evaluate import ablation_grid_image, evaluate_setting, write_metrics_csv
from .imaging import (
    composite,
    labels_to_pseudocolor,
    load_image_png,
    load_labels_png,
    load_mask_png,
    one_hot,
    save_image_png,
    save_labels_png,
    save_mask_png,
)
from .losses import FeaturePyramid
from .networks import NeuralSegmenter, TinySegmenter, segment
from .training import (
    TrainConfig,
    load_checkpoint,
    load_into,
    train_joint,
    train_segmenter,
    train_stage1,
    train_stage2,
)


def _cmd_prep(args):
    data_mod.write_dataset(Path(args.out) / "train", args.count, args.size, args.seed)
    data_mod.write_dataset(Path(args.out) / "test", args.test_count, args.size, args.seed + 1)
    print(f"wrote {args.count} train / {args.test_count} test scenes under {args.out}")


def _cmd_maskgen(args):
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        seed = args.seed + i
        if args.kind == "center":
            mask = masks_mod.center_mask(args.size, args.size, args.hole)
        elif args.kind == "rect":
            mask = masks_mod.random_rect_mask(
                args.size, args.size, (args.area_lo, args.area_hi), seed
            )
        else:
            mask = masks_mod.irregular_mask(
                args.size, args.size, coverage_range=(args.coverage_lo, args.coverage_hi),
                rng_seed=seed,
            )
        save_mask_png(mask, out / f"{args.kind}_{i:05d}.png")
    print(f"wrote {args.count} {args.kind} masks to {out}")


def _cmd_train(args):
    cfg = TrainConfig.load(args.config)
    if args.phase:
        cfg.phase = args.phase
    if args.data:
        cfg.data_dir = args.data
    if args.out:
        cfg.out_dir = args.out
    if args.init:
        cfg.init_checkpoint = args.init
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.validate()
    if cfg.phase == "stage1":
        train_stage1(cfg)
    elif cfg.phase == "stage2":
        if not cfg.init_checkpoint:
            raise ParameterError("stage2 needs --init (stage-1 checkpoint)")
        train_stage2(cfg, cfg.init_checkpoint)
    else:
        if not cfg.init_checkpoint:
            raise ParameterError("joint needs --init (stage-2 checkpoint)")
        train_joint(cfg, cfg.init_checkpoint)
    print(f"{cfg.phase} training finished; outputs under {cfg.out_dir}")


def _cmd_train_segmenter(args):
    dataset = data_mod.FolderDataset(args.data)
    train_segmenter(dataset, iters=args.iters, seed=args.seed, out_path=args.out)
    print(f"segmenter checkpoint written to {args.out}")


def _load_models(ckpt_path):
    """Rebuild (autoencoder, decoder-or-None) from a checkpoint."""
    eng = InpaintEngine(ckpt_path)
    return eng.autoencoder, eng.decoder


def _segmenter_from(args_segmenter, dataset):
    if args_segmenter is None:
        return None
    ckpt = load_checkpoint(args_segmenter)
    module = TinySegmenter(ckpt["config"]["num_classes"], ckpt["config"]["base_channels"])
    load_into(module, ckpt["models"]["segmenter"], "segmenter")
    return NeuralSegmenter(module)


def _cmd_eval(args):
    dataset = data_mod.FolderDataset(args.data)
    autoencoder, decoder = _load_models(args.checkpoint)
    segmenter = _segmenter_from(args.segmenter, dataset)
    fx = FeaturePyramid(args.feature_seed)
    rows = []
    for setting in args.settings:
        metrics = evaluate_setting(
            setting, dataset, autoencoder, decoder, segmenter, fx,
            hole=args.hole, max_samples=args.max_samples,
        )
        rows.append((setting, metrics))
        print(f"{setting}: psnr={metrics['psnr']:.4f} ssim={metrics['ssim']:.4f} "
              f"fid={metrics['fid']:.4f}")
    write_metrics_csv(rows, args.out)
    print(f"metrics table written to {args.out}")


def _cmd_infer(args):
    engine = InpaintEngine(args.checkpoint, args.segmenter)
    image = load_image_png(args.image)
    mask = load_mask_png(args.mask)
    if image.shape[1:] != (engine.image_size, engine.image_size):
        from .imaging import resize_image, resize_mask

        image = resize_image(image, engine.image_size)
        mask = resize_mask(mask, engine.image_size)
    coarse, f_c = engine.coarse_and_features(image, mask)
    coarse_comp = composite(coarse, image, mask)
    if args.semantic:
        labels = load_labels_png(args.semantic, engine.num_classes)
    else:
        labels = engine.segment_labels(coarse_comp)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_image_png(coarse_comp, out / "coarse.png")
    save_labels_png(labels, out / "labels.png")
    palette = data_mod.default_palette()
    if palette.num_classes >= engine.num_classes:
        save_image_png(labels_to_pseudocolor(labels, palette), out / "labels_color.png")
    fine = engine.refine(f_c, labels)
    save_image_png(composite(fine, image, mask), out / "fine.png")
    print(f"coarse/labels/fine written to {out}")


def _cmd_ablate(args):
    dataset = data_mod.FolderDataset(args.data)
    fx = FeaturePyramid(args.feature_seed)
    ae_b, _ = _load_models(args.ckpt_b)
    ae_c, _ = _load_models(args.ckpt_c)
    ae_de, dec = _load_models(args.ckpt_de)
    if dec is None:
        raise CheckpointError(f"{args.ckpt_de} has no semantic decoder")
    segmenter = _segmenter_from(args.segmenter, dataset)
    if segmenter is None:
        raise ParameterError("ablate needs --segmenter for setting (d)")
    common = dict(fx=fx, hole=args.hole, max_samples=args.max_samples)
    rows = [
        ("b", evaluate_setting("stage1", dataset, ae_b, **common)),
        ("c", evaluate_setting("stage1", dataset, ae_c, **common)),
        ("d", evaluate_setting("stage2_pred", dataset, ae_de, dec, segmenter, **common)),
        ("e", evaluate_setting("stage2_gt", dataset, ae_de, dec, **common)),
    ]
    out = Path(args.out_dir)
    write_metrics_csv(rows, out / "ablation.csv")
    for name, metrics in rows:
        print(f"({name}) psnr={metrics['psnr']:.4f} ssim={metrics['ssim']:.4f} "
              f"fid={metrics['fid']:.4f}")

    def _stage1_render(ae):
        def render(sample, mask):
            with torch.no_grad():
                masked = sample["image"][None] * (1.0 - torch.from_numpy(mask)[None])
                coarse, _ = ae(masked, torch.from_numpy(mask)[None])
            return composite(coarse[0].numpy(), sample["image"].numpy(), mask)

        return render

    def _stage2_render(use_gt):
        def render(sample, mask):
            image = sample["image"].numpy()
            with torch.no_grad():
                mask_t = torch.from_numpy(mask)[None]
                coarse, f_c = ae_de(sample["image"][None] * (1.0 - mask_t), mask_t)
                coarse_comp = composite(coarse[0].numpy(), image, mask)
                if use_gt:
                    labels = sample["labels"].numpy()
                else:
                    labels = segment(coarse_comp, segmenter, key=sample["key"])
                onehot = torch.from_numpy(one_hot(labels, dataset.num_classes))[None]
                fine = dec(f_c, onehot)
            return composite(fine[0].numpy(), image, mask)

        return render

    renders = [_stage1_render(ae_b), _stage1_render(ae_c),
               _stage2_render(False), _stage2_render(True)]
    ablation_grid_image(dataset, renders, out / "ablation_grid.png", hole=args.hole)
    print(f"ablation table and grid written to {out}")


def _cmd_serve(args):
    import uvicorn

    from .imaging import ColorPalette
    from .service import SessionStore, create_app

    engine = InpaintEngine(args.checkpoint, args.segmenter)
    palette = ColorPalette.load(args.palette) if args.palette else data_mod.default_palette()
    store = SessionStore(args.session_dir, ttl_seconds=args.ttl)
    app = create_app(engine, palette, store)
    uvicorn.run(app, host=args.host, port=args.port)


def build_parser():
    p = argparse.ArgumentParser(prog="espaint", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("prep", help="generate a synthetic labeled dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--count", type=int, default=2000)
    sp.add_argument("--test-count", type=int, default=200)
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=_cmd_prep)

    sp = sub.add_parser("maskgen", help="emit PNG damage masks")
    sp.add_argument("--kind", choices=("center", "rect", "irregular"), required=True)
    sp.add_argument("--size", type=int, default=256)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--count", type=int, default=1)
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--hole", type=int, default=128)
    sp.add_argument("--area-lo", type=float, default=0.05)
    sp.add_argument("--area-hi", type=float, default=0.35)
    sp.add_argument("--coverage-lo", type=float, default=0.1)
    sp.add_argument("--coverage-hi", type=float, default=0.4)
    sp.set_defaults(func=_cmd_maskgen)

    sp = sub.add_parser("train", help="run one training phase from a JSON config")
    sp.add_argument("--config", required=True)
    sp.add_argument("--phase", choices=("stage1", "stage2", "joint"))
    sp.add_argument("--data")
    sp.add_argument("--out")
    sp.add_argument("--init", help="checkpoint the phase starts from")
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=_cmd_train)

    sp = sub.add_parser("train-segmenter", help="train the tiny segmenter on a labeled set")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--iters", type=int, default=800)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=_cmd_train_segmenter)

    sp = sub.add_parser("eval", help="metric table over a dataset")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--settings", nargs="+", default=["stage1"],
                    choices=("stage1", "stage2_pred", "stage2_gt"))
    sp.add_argument("--segmenter")
    sp.add_argument("--hole", type=int)
    sp.add_argument("--max-samples", type=int)
    sp.add_argument("--feature-seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=_cmd_eval)

    sp = sub.add_parser("infer", help="single-image offline inpainting")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--mask", required=True)
    sp.add_argument("--semantic", help="label-map PNG; predicted when omitted")
    sp.add_argument("--segmenter")
    sp.add_argument("--out-dir", required=True)
    sp.set_defaults(func=_cmd_infer)

    sp = sub.add_parser("ablate", help="four-setting ablation table and grid")
    sp.add_argument("--ckpt-b", required=True, help="stage-1 checkpoint without attention")
    sp.add_argument("--ckpt-c", required=True, help="stage-1 checkpoint with attention")
    sp.add_argument("--ckpt-de", required=True, help="stage-2 checkpoint")
    sp.add_argument("--segmenter", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--hole", type=int)
    sp.add_argument("--max-samples", type=int)
    sp.add_argument("--feature-seed", type=int, default=0)
    sp.add_argument("--out-dir", required=True)
    sp.set_defaults(func=_cmd_ablate)

    sp = sub.add_parser("serve", help="run the interactive HTTP service")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--segmenter")
    sp.add_argument("--palette")
    sp.add_argument("--session-dir", default="sessions")
    sp.add_argument("--ttl", type=int, default=24 * 3600)
    sp.add_argument("--host", default="127.0.0.1")
    sp.add_argument("--port", type=int, default=8000)
    sp.set_defaults(func=_cmd_serve)

    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except ParameterError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    except (DataError, CheckpointError, EspaintError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
