"""Three-phase training orchestration, the optimizer schedule, and
checkpointing.

Phase 1 trains the attention autoencoder on masked inputs (L1 + perceptual).
Phase 2 freezes it and trains the semantic decoder against ground-truth
label maps with an additional least-squares adversarial term from the patch
discriminator. The joint phase thaws stage 1 and fine-tunes all generator
parameters under one optimizer while the stage-1 losses stay attached to
the coarse output.

The learning rate is constant for ``plateau_iters`` iterations, then decays
linearly to zero at ``total_iters``. Runs are reproducible given the config
seed and single-threaded data delivery.
"""

import csv
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import FolderDataset
from .errors import CheckpointError, DataError, NumericError, ParameterError
from .losses import FeaturePyramid, LossWeights, adversarial_losses, l1_loss, perceptual_loss
from .masks import training_mask
from .networks import (
    AutoencoderConfig,
    DiscriminatorConfig,
    ESPAAutoencoder,
    PatchDiscriminator,
    SemanticDecoder,
    SemanticDecoderConfig,
    TinySegmenter,
)

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
PHASES = ("stage1", "stage2", "joint")
COLLAPSE_THRESHOLD = 1e-6
COLLAPSE_PATIENCE = 500


@dataclass
class TrainConfig:
    phase: str = "stage1"
    data_dir: str | None = None
    out_dir: str = "runs/exp"
    image_size: int = 256
    batch_size: int = 1
    lr: float = 2e-4
    beta1: float = 0.0
    beta2: float = 0.9
    plateau_iters: int = 2_000
    total_iters: int = 4_000
    seed: int = 0
    lambda_rec: float = 1.0
    lambda_per: float = 1.0
    lambda_adv: float = 0.01
    log_every: int = 1
    checkpoint_every: int = 1_000
    feature_seed: int = 0
    init_checkpoint: str | None = None
    autoencoder: AutoencoderConfig = field(default_factory=AutoencoderConfig)
    decoder: SemanticDecoderConfig = field(default_factory=SemanticDecoderConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)

    def validate(self):
        if self.phase not in PHASES:
            raise ParameterError(f"phase must be one of {PHASES}, got {self.phase!r}")
        if self.batch_size < 1:
            raise ParameterError("batch_size must be >= 1")
        if not (0 <= self.plateau_iters <= self.total_iters):
            raise ParameterError("need 0 <= plateau_iters <= total_iters")
        if self.lr <= 0:
            raise ParameterError("lr must be positive")
        if min(self.lambda_rec, self.lambda_per, self.lambda_adv) < 0:
            raise ParameterError("loss weights must be nonnegative")
        if self.phase in ("stage2", "joint") and self.image_size < 32:
            raise ParameterError(
                "adversarial phases need image_size >= 32 (the 70x70 patch "
                "discriminator downsamples 8x before its stride-1 tail)"
            )
        # one source of truth for sizes shared between sub-configs
        self.autoencoder.image_size = self.image_size
        self.decoder.bottleneck_channels = self.autoencoder.bottleneck_channels
        self.autoencoder.validate()
        return self

    def weights(self):
        return LossWeights(self.lambda_rec, self.lambda_per, self.lambda_adv)

    def to_json(self):
        return json.dumps(dataclasses.asdict(self), indent=2)

    @classmethod
    def from_dict(cls, raw):
        raw = dict(raw)
        nested = {
            "autoencoder": AutoencoderConfig,
            "decoder": SemanticDecoderConfig,
            "discriminator": DiscriminatorConfig,
        }
        kwargs = {}
        for key, sub_cls in nested.items():
            sub = dict(raw.pop(key, {}))
            known = {f.name for f in dataclasses.fields(sub_cls)}
            extra = set(sub) - known
            if extra:
                raise ParameterError(f"unknown {key} config keys: {sorted(extra)}")
            for tup_key in ("dilation_rates", "block_widths"):
                if tup_key in sub:
                    sub[tup_key] = tuple(sub[tup_key])
            kwargs[key] = sub_cls(**sub)
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(raw) - known
        if extra:
            raise ParameterError(f"unknown config keys: {sorted(extra)}")
        return cls(**raw, **kwargs)

    @classmethod
    def from_json(cls, text):
        try:
            raw = json.loads(text)
        except ValueError as exc:
            raise ParameterError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(raw)

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(fh.read())


def lr_at(iteration, cfg):
    """Piecewise-linear schedule: constant, then linear to 0 at total_iters."""
    if not (0 <= iteration <= cfg.total_iters):
        raise ParameterError(f"iteration {iteration} outside [0, {cfg.total_iters}]")
    if iteration <= cfg.plateau_iters:
        return cfg.lr
    return cfg.lr * (cfg.total_iters - iteration) / (cfg.total_iters - cfg.plateau_iters)


# --- checkpoints --------------------------------------------------------------


def save_checkpoint(ckpt, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(ckpt, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path):
    try:
        ckpt = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises a zoo of types on corrupt input
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(ckpt, dict) or "format_version" not in ckpt:
        raise CheckpointError(f"{path} is not a checkpoint container")
    if ckpt["format_version"] != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {ckpt['format_version']} != "
            f"supported {CHECKPOINT_VERSION}"
        )
    return ckpt


def load_into(module, state, name):
    """Load a state dict after an explicit shape check naming the first bad key."""
    own = module.state_dict()
    for key in sorted(own):
        if key not in state:
            raise CheckpointError(f"{name}: checkpoint is missing key {key!r}")
        if tuple(state[key].shape) != tuple(own[key].shape):
            raise CheckpointError(
                f"{name}: shape mismatch at key {key!r}: checkpoint "
                f"{tuple(state[key].shape)} vs model {tuple(own[key].shape)}"
            )
    module.load_state_dict(state)


def _checkpoint_dict(cfg, iteration, models, optimizers):
    return {
        "format_version": CHECKPOINT_VERSION,
        "phase": cfg.phase,
        "iteration": iteration,
        "config": dataclasses.asdict(cfg),
        "models": {k: m.state_dict() for k, m in models.items()},
        "optimizers": {k: o.state_dict() for k, o in optimizers.items()},
    }


# --- shared loop machinery ----------------------------------------------------


class _LossLog:
    """CSV sink with columns (iteration, loss_name, value)."""

    def __init__(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(path, "w", newline="", encoding="utf-8")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(["iteration", "loss_name", "value"])

    def write(self, iteration, **losses):
        for name, value in losses.items():
            if torch.is_tensor(value):
                value = value.detach().item()
            self._writer.writerow([iteration, name, f"{value:.10e}"])

    def close(self):
        self._fh.close()


def _require_dataset(cfg, dataset):
    if dataset is None:
        if cfg.data_dir is None:
            raise DataError("no dataset given and config has no data_dir")
        dataset = FolderDataset(cfg.data_dir)
    if len(dataset) == 0:
        raise DataError("dataset is empty")
    return dataset


def _batch(dataset, rng, cfg):
    idx = rng.integers(0, len(dataset), size=cfg.batch_size)
    images, labels, masks = [], [], []
    for i in idx:
        sample = dataset[int(i)]
        images.append(sample["image"])
        labels.append(sample["labels"])
        masks.append(
            torch.from_numpy(
                training_mask(cfg.image_size, cfg.image_size, int(rng.integers(2**31)))
            )
        )
    return torch.stack(images), torch.stack(labels), torch.stack(masks)


def _onehot(labels, num_classes):
    return F.one_hot(labels[:, 0].long(), num_classes).permute(0, 3, 1, 2).float()


def _check_finite(value, what, iteration):
    if not torch.isfinite(value):
        raise NumericError(f"non-finite {what} ({float(value)!r}) at iteration {iteration}")


def _scheduler(optimizer, cfg):
    return torch.optim.lr_scheduler.LambdaLR(
        optimizer, lambda it: lr_at(min(it, cfg.total_iters), cfg) / cfg.lr
    )


def _adam(params, cfg):
    return torch.optim.Adam(params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))


def _deterministic_mode():
    # multi-threaded backward reductions are not bitwise reproducible, and at
    # desk-scale tensor sizes the sync overhead outweighs the parallelism
    torch.set_num_threads(1)


# --- phases -------------------------------------------------------------------


def train_stage1(cfg, dataset=None):
    """Minimize L1 + perceptual loss on the coarse output; returns the checkpoint."""
    cfg.validate()
    dataset = _require_dataset(cfg, dataset)
    _deterministic_mode()
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model = ESPAAutoencoder(cfg.autoencoder)
    fx = FeaturePyramid(cfg.feature_seed)
    opt = _adam(model.parameters(), cfg)
    sched = _scheduler(opt, cfg)
    weights = cfg.weights()
    out = Path(cfg.out_dir)
    logger = _LossLog(out / "loss_log.csv")
    try:
        for it in range(1, cfg.total_iters + 1):
            images, _, masks = _batch(dataset, rng, cfg)
            masked = images * (1.0 - masks)
            coarse, _ = model(masked, masks)
            rec = l1_loss(coarse, images)
            per = perceptual_loss(coarse, images, fx)
            total = weights.rec * rec + weights.per * per
            _check_finite(total, "stage1 loss", it)
            opt.zero_grad()
            total.backward()
            opt.step()
            sched.step()
            if it % cfg.log_every == 0:
                logger.write(it, stage1_total=total, l1=rec, perceptual=per)
            if cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
                ckpt = _checkpoint_dict(cfg, it, {"autoencoder": model}, {"generator": opt})
                save_checkpoint(ckpt, out / f"stage1_{it:07d}.pt")
    finally:
        logger.close()
    ckpt = _checkpoint_dict(cfg, cfg.total_iters, {"autoencoder": model}, {"generator": opt})
    save_checkpoint(ckpt, out / "stage1.pt")
    return ckpt


def train_stage2(cfg, stage1_ckpt, dataset=None):
    """Train the semantic decoder (plus discriminator) on frozen stage-1 features.

    Semantic conditioning uses the dataset's ground-truth label maps. The
    resulting checkpoint embeds the frozen autoencoder so it is
    self-contained for inference.
    """
    cfg.validate()
    dataset = _require_dataset(cfg, dataset)
    if isinstance(stage1_ckpt, (str, Path)):
        stage1_ckpt = load_checkpoint(stage1_ckpt)
    _deterministic_mode()
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    autoencoder = ESPAAutoencoder(cfg.autoencoder)
    load_into(autoencoder, stage1_ckpt["models"]["autoencoder"], "autoencoder")
    autoencoder.requires_grad_(False).eval()
    decoder = SemanticDecoder(cfg.decoder)
    disc = PatchDiscriminator(cfg.discriminator)
    fx = FeaturePyramid(cfg.feature_seed)
    g_opt = _adam(decoder.parameters(), cfg)
    d_opt = _adam(disc.parameters(), cfg)
    g_sched, d_sched = _scheduler(g_opt, cfg), _scheduler(d_opt, cfg)
    weights = cfg.weights()
    out = Path(cfg.out_dir)
    logger = _LossLog(out / "loss_log.csv")
    collapse_run = 0
    collapse_warned = False
    models = {"autoencoder": autoencoder, "decoder": decoder, "discriminator": disc}
    opts = {"generator": g_opt, "discriminator": d_opt}
    try:
        for it in range(1, cfg.total_iters + 1):
            images, labels, masks = _batch(dataset, rng, cfg)
            masked = images * (1.0 - masks)
            with torch.no_grad():
                _, f_c = autoencoder(masked, masks)
            onehot = _onehot(labels, cfg.decoder.num_classes)
            pred = decoder(f_c, onehot)

            d_real = disc(images)
            _, d_loss = adversarial_losses(d_real, disc(pred.detach()))
            _check_finite(d_loss, "discriminator loss", it)
            d_opt.zero_grad()
            d_loss.backward()
            d_opt.step()
            d_sched.step()

            g_adv, _ = adversarial_losses(d_real.detach(), disc(pred))
            rec = l1_loss(pred, images)
            per = perceptual_loss(pred, images, fx)
            total = weights.rec * rec + weights.per * per + weights.adv * g_adv
            _check_finite(total, "stage2 loss", it)
            g_opt.zero_grad()
            total.backward()
            g_opt.step()
            g_sched.step()

            collapse_run = collapse_run + 1 if d_loss.detach().item() < COLLAPSE_THRESHOLD else 0
            if collapse_run >= COLLAPSE_PATIENCE and not collapse_warned:
                log.warning(
                    "discriminator collapse suspected: d_loss < %.0e for %d consecutive steps",
                    COLLAPSE_THRESHOLD,
                    COLLAPSE_PATIENCE,
                )
                collapse_warned = True
            if it % cfg.log_every == 0:
                logger.write(
                    it, stage2_total=total, l1=rec, perceptual=per, g_adv=g_adv, d_loss=d_loss
                )
            if cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
                save_checkpoint(_checkpoint_dict(cfg, it, models, opts), out / f"stage2_{it:07d}.pt")
    finally:
        logger.close()
    ckpt = _checkpoint_dict(cfg, cfg.total_iters, models, opts)
    save_checkpoint(ckpt, out / "stage2.pt")
    return ckpt


def train_joint(cfg, stage2_ckpt, dataset=None):
    """Fine-tune both stages together: one optimizer over all generator
    parameters, stage-1 losses kept on the coarse output."""
    cfg.validate()
    dataset = _require_dataset(cfg, dataset)
    if isinstance(stage2_ckpt, (str, Path)):
        stage2_ckpt = load_checkpoint(stage2_ckpt)
    _deterministic_mode()
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    autoencoder = ESPAAutoencoder(cfg.autoencoder)
    decoder = SemanticDecoder(cfg.decoder)
    disc = PatchDiscriminator(cfg.discriminator)
    for name, module in (("autoencoder", autoencoder), ("decoder", decoder),
                         ("discriminator", disc)):
        load_into(module, stage2_ckpt["models"][name], name)
    fx = FeaturePyramid(cfg.feature_seed)
    g_opt = _adam(list(autoencoder.parameters()) + list(decoder.parameters()), cfg)
    d_opt = _adam(disc.parameters(), cfg)
    g_sched, d_sched = _scheduler(g_opt, cfg), _scheduler(d_opt, cfg)
    weights = cfg.weights()
    out = Path(cfg.out_dir)
    logger = _LossLog(out / "loss_log.csv")
    models = {"autoencoder": autoencoder, "decoder": decoder, "discriminator": disc}
    opts = {"generator": g_opt, "discriminator": d_opt}
    try:
        for it in range(1, cfg.total_iters + 1):
            images, labels, masks = _batch(dataset, rng, cfg)
            masked = images * (1.0 - masks)
            coarse, f_c = autoencoder(masked, masks)
            onehot = _onehot(labels, cfg.decoder.num_classes)
            pred = decoder(f_c, onehot)

            d_real = disc(images)
            _, d_loss = adversarial_losses(d_real, disc(pred.detach()))
            _check_finite(d_loss, "discriminator loss", it)
            d_opt.zero_grad()
            d_loss.backward()
            d_opt.step()
            d_sched.step()

            g_adv, _ = adversarial_losses(d_real.detach(), disc(pred))
            coarse_rec = l1_loss(coarse, images)
            coarse_per = perceptual_loss(coarse, images, fx)
            fine_rec = l1_loss(pred, images)
            fine_per = perceptual_loss(pred, images, fx)
            stage1_part = weights.rec * coarse_rec + weights.per * coarse_per
            stage2_part = weights.rec * fine_rec + weights.per * fine_per + weights.adv * g_adv
            total = stage1_part + stage2_part
            _check_finite(total, "joint loss", it)
            g_opt.zero_grad()
            total.backward()
            g_opt.step()
            g_sched.step()

            if it % cfg.log_every == 0:
                logger.write(
                    it,
                    joint_total=total,
                    stage1_part=stage1_part,
                    stage2_part=stage2_part,
                    d_loss=d_loss,
                )
            if cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
                save_checkpoint(_checkpoint_dict(cfg, it, models, opts), out / f"joint_{it:07d}.pt")
    finally:
        logger.close()
    ckpt = _checkpoint_dict(cfg, cfg.total_iters, models, opts)
    save_checkpoint(ckpt, out / "joint.pt")
    return ckpt


def train_segmenter(dataset, iters=800, seed=0, lr=1e-3, base_channels=16, out_path=None):
    """Supervised training of the tiny segmenter on a labeled dataset.

    Plumbing around the interactive loop, not one of the three framework
    phases; uses plain Adam defaults and cross-entropy.
    """
    if len(dataset) == 0:
        raise DataError("dataset is empty")
    num_classes = dataset.num_classes
    _deterministic_mode()
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = TinySegmenter(num_classes, base_channels)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    for it in range(1, iters + 1):
        idx = int(rng.integers(0, len(dataset)))
        sample = dataset[idx]
        logits = model.logits(sample["image"][None])
        loss = F.cross_entropy(logits, sample["labels"].long())
        _check_finite(loss, "segmenter loss", it)
        opt.zero_grad()
        loss.backward()
        opt.step()
    ckpt = {
        "format_version": CHECKPOINT_VERSION,
        "phase": "segmenter",
        "iteration": iters,
        "config": {"num_classes": num_classes, "base_channels": base_channels},
        "models": {"segmenter": model.state_dict()},
        "optimizers": {},
    }
    if out_path is not None:
        save_checkpoint(ckpt, out_path)
    return ckpt
