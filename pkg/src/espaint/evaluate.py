"""Metric evaluation over datasets and the ablation grid.

Every setting is scored on the composited final image (hole pixels from the
generator, context from the input) using the square center mask, which is
the standard quantitative protocol for inpainting.
"""

import csv
from pathlib import Path

import numpy as np
import torch

from .errors import ParameterError
from .imaging import composite, one_hot, save_image_png
from .losses import FeaturePyramid
from .masks import center_mask
from .metrics import frechet_distance, psnr, ssim
from .networks import segment

SETTINGS = ("stage1", "stage2_pred", "stage2_gt")


def pyramid_features(images, fx):
    """Global-average-pooled pyramid stages, concatenated: (N, D) features."""
    with torch.no_grad():
        feats = [f.mean(dim=(-2, -1)) for f in fx(images)]
    return torch.cat(feats, dim=1).numpy()


def evaluate_setting(
    setting,
    dataset,
    autoencoder,
    decoder=None,
    segmenter=None,
    fx=None,
    hole=None,
    max_samples=None,
):
    """Mean PSNR/SSIM plus Frechet distance for one pipeline setting.

    stage1 scores the composited coarse result; stage2_pred conditions the
    decoder on labels segmented from that composite; stage2_gt conditions on
    the dataset's ground-truth labels.
    """
    if setting not in SETTINGS:
        raise ParameterError(f"setting must be one of {SETTINGS}, got {setting!r}")
    if setting != "stage1" and decoder is None:
        raise ParameterError(f"setting {setting} needs the semantic decoder")
    if setting == "stage2_pred" and segmenter is None:
        raise ParameterError("stage2_pred needs a segmenter")
    fx = fx or FeaturePyramid()
    size = dataset.size if hasattr(dataset, "size") else dataset[0]["image"].shape[-1]
    hole = hole or size // 2
    mask = center_mask(size, size, hole)
    mask_t = torch.from_numpy(mask)[None]
    n = len(dataset) if max_samples is None else min(len(dataset), max_samples)

    autoencoder.eval()
    if decoder is not None:
        decoder.eval()
    psnrs, ssims = [], []
    pred_feats, real_feats = [], []
    num_classes = getattr(dataset, "num_classes", None)
    with torch.no_grad():
        for i in range(n):
            sample = dataset[i]
            image = sample["image"].numpy()
            img_t = sample["image"][None]
            masked = img_t * (1.0 - mask_t)
            coarse, f_c = autoencoder(masked, mask_t)
            coarse_comp = composite(coarse[0].numpy(), image, mask)
            if setting == "stage1":
                final = coarse_comp
            else:
                if setting == "stage2_gt":
                    labels = sample["labels"].numpy()
                else:
                    labels = segment(coarse_comp, segmenter, key=sample.get("key"))
                onehot = torch.from_numpy(one_hot(labels, num_classes))[None]
                fine = decoder(f_c, onehot)
                final = composite(fine[0].numpy(), image, mask)
            psnrs.append(psnr(final, image))
            ssims.append(ssim(final, image))
            pred_feats.append(torch.from_numpy(final)[None])
            real_feats.append(img_t)
    fid = frechet_distance(
        pyramid_features(torch.cat(pred_feats), fx),
        pyramid_features(torch.cat(real_feats), fx),
    )
    return {"psnr": float(np.mean(psnrs)), "ssim": float(np.mean(ssims)), "fid": fid}


def write_metrics_csv(rows, path):
    """rows: list of (setting_name, {psnr, ssim, fid}) -> CSV shaped like the tables."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["setting", "psnr", "ssim", "fid"])
        for name, m in rows:
            writer.writerow([name, f"{m['psnr']:.4f}", f"{m['ssim']:.4f}", f"{m['fid']:.4f}"])
    tmp.replace(path)
    return path


def ablation_grid_image(dataset, engines, out_path, rows=4, hole=None):
    """Side-by-side grid PNG: input | per-setting results | ground truth."""
    size = dataset.size if hasattr(dataset, "size") else dataset[0]["image"].shape[-1]
    hole = hole or size // 2
    mask = center_mask(size, size, hole)
    rows = min(rows, len(dataset))
    cols = []
    for i in range(rows):
        sample = dataset[i]
        image = sample["image"].numpy()
        masked = image * (1.0 - mask)
        row_imgs = [masked]
        for render in engines:
            row_imgs.append(render(sample, mask))
        row_imgs.append(image)
        cols.append(np.concatenate(row_imgs, axis=2))
    grid = np.concatenate(cols, axis=1)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_image_png(np.clip(grid, 0.0, 1.0), out_path)
    return out_path
