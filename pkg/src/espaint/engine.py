"""Frozen-snapshot inference around a trained checkpoint.

The engine owns the numpy <-> torch boundary: images and masks come in as
[0, 1] arrays, the cached bottleneck features stay torch tensors. Parameters
are a read-only snapshot, so any number of threads may run inference
concurrently; ``stage1_calls`` counts coarse passes for the
features-computed-once guarantee.
"""

from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError, ContractError
from .imaging import one_hot
from .networks import (
    AutoencoderConfig,
    ESPAAutoencoder,
    NeuralSegmenter,
    SemanticDecoder,
    SemanticDecoderConfig,
    TinySegmenter,
    segment,
)
from .training import load_checkpoint, load_into


def _config_from(raw, cls):
    import dataclasses

    known = {f.name for f in dataclasses.fields(cls)}
    kwargs = {k: v for k, v in raw.items() if k in known}
    for tup_key in ("dilation_rates", "block_widths"):
        if tup_key in kwargs and kwargs[tup_key] is not None:
            kwargs[tup_key] = tuple(kwargs[tup_key])
    return cls(**kwargs)


class InpaintEngine:
    def __init__(self, checkpoint, segmenter_ckpt=None):
        if isinstance(checkpoint, (str, Path)):
            checkpoint = load_checkpoint(checkpoint)
        cfg = checkpoint["config"]
        self.image_size = int(cfg["image_size"])
        self.autoencoder = ESPAAutoencoder(_config_from(cfg["autoencoder"], AutoencoderConfig))
        load_into(self.autoencoder, checkpoint["models"]["autoencoder"], "autoencoder")
        self.autoencoder.eval().requires_grad_(False)

        self.decoder = None
        if "decoder" in checkpoint["models"]:
            self.decoder = SemanticDecoder(_config_from(cfg["decoder"], SemanticDecoderConfig))
            load_into(self.decoder, checkpoint["models"]["decoder"], "decoder")
            self.decoder.eval().requires_grad_(False)
            self.num_classes = self.decoder.cfg.num_classes
        else:
            self.num_classes = int(cfg.get("decoder", {}).get("num_classes", 4))

        if isinstance(segmenter_ckpt, (str, Path)):
            segmenter_ckpt = load_checkpoint(segmenter_ckpt)
        if segmenter_ckpt is not None:
            seg_cfg = segmenter_ckpt["config"]
            module = TinySegmenter(seg_cfg["num_classes"], seg_cfg["base_channels"])
            load_into(module, segmenter_ckpt["models"]["segmenter"], "segmenter")
        elif "segmenter" in checkpoint["models"]:
            module = TinySegmenter(self.num_classes)
            load_into(module, checkpoint["models"]["segmenter"], "segmenter")
        else:
            # untrained fallback: the loop still works, the user paints over it
            torch.manual_seed(0)
            module = TinySegmenter(self.num_classes)
        module.eval().requires_grad_(False)
        self.segmenter = NeuralSegmenter(module)
        self.stage1_calls = 0

    def coarse_and_features(self, image, mask):
        """Run stage 1; returns the coarse [0,1] image and bottleneck features."""
        self.stage1_calls += 1
        with torch.no_grad():
            img_t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))[None]
            mask_t = torch.from_numpy(np.ascontiguousarray(mask, dtype=np.float32))[None]
            masked = img_t * (1.0 - mask_t)
            coarse, f_c = self.autoencoder(masked, mask_t)
        return coarse[0].numpy(), f_c

    def segment_labels(self, image):
        return segment(image, self.segmenter)

    def refine(self, f_c, labels):
        """Decode the cached features under an edited label map."""
        if self.decoder is None:
            raise CheckpointError("checkpoint has no semantic decoder; train stage 2 first")
        if int(labels.max()) >= self.num_classes:
            raise ContractError(f"label {int(labels.max())} outside {self.num_classes} classes")
        with torch.no_grad():
            onehot = torch.from_numpy(one_hot(labels, self.num_classes))[None]
            fine = self.decoder(f_c, onehot)
        return fine[0].numpy()
