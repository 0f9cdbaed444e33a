"""Training orchestration for every stage: intra-modality registration
pre-training, translation training through the frozen registration net, the
ablation variants, and the NMI / NMI+Dice baselines.

Determinism contract: every random draw of a run is derived from
(config seed, global step), never from ambient RNG state. Runs are therefore
exactly resumable from any checkpoint, and batch prefetching (bounded by the
SBR_NUM_WORKERS environment variable) cannot change the data order.
"""

from __future__ import annotations

import json
import logging
import math
import os
import sys
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field as dc_field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import data, losses, models, warp
from .core import CoreError
from .data import AugmentationConfig
from .losses import LossWeights

logger = logging.getLogger("sbr.train")

STAGES = ("reg", "sbr", "sbr_n", "sbr_r", "sbr_g", "nmi", "nmiw")
NEIGHBOR_MAX_OFFSET = 3
# bound multiplier for the independent perturbations layered on top of the
# matched augmentation of a training pair
PERTURBATION_SCALE = 0.2
LOG_NAME = "train_log.jsonl"
FINAL_CHECKPOINT = "checkpoint_final.pt"


class TrainingDiverged(RuntimeError):
    """A training loss became non-finite."""


@dataclass
class TrainConfig:
    stage: str = "reg"
    epochs: int = 20
    batch_size: int = 4
    learning_rate: float = 2e-4
    betas: tuple = (0.5, 0.999)
    weights: LossWeights = dc_field(default_factory=LossWeights)
    patches_per_layer: int = 128
    seed: int = 0
    checkpoint_every: int = 100

    def __post_init__(self):
        if self.stage not in STAGES:
            raise CoreError(f"TrainConfig: unknown stage '{self.stage}' "
                            f"(expected one of {STAGES})")
        if self.epochs < 0 or self.batch_size < 1:
            raise CoreError("TrainConfig: epochs must be >= 0 and batch_size >= 1")
        if self.learning_rate <= 0:
            raise CoreError("TrainConfig: learning_rate must be > 0")
        if self.patches_per_layer < 1 or self.checkpoint_every < 1:
            raise CoreError("TrainConfig: patches_per_layer and checkpoint_every "
                            "must be >= 1")
        if self.stage == "sbr_n" and self.weights.lambda_geo != 0.0:
            self.weights = replace(self.weights, lambda_geo=0.0)
        if self.stage == "sbr_g" and self.weights.lambda_gan <= 0.0:
            raise CoreError("TrainConfig: stage sbr_g needs weights.lambda_gan > 0")


def config_to_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)


def config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    w = d.pop("weights", None)
    weights = LossWeights(**w) if isinstance(w, dict) else (w or LossWeights())
    betas = tuple(d.pop("betas", (0.5, 0.999)))
    return TrainConfig(weights=weights, betas=betas, **d)


def load_checkpoint(path) -> dict:
    return torch.load(Path(path), map_location="cpu", weights_only=True)


def _as_payload(checkpoint) -> dict:
    if isinstance(checkpoint, dict):
        return checkpoint
    return load_checkpoint(checkpoint)


def _canonical(obj):
    """Rebuild nested containers with interned strings. Strings coming out of
    torch.load are fresh objects, so without this a checkpoint saved after a
    resume pickles them inline instead of as memo references and the file
    bytes drift from an uninterrupted run's."""
    if isinstance(obj, dict):
        return type(obj)((_canonical(k), _canonical(v)) for k, v in obj.items())
    if isinstance(obj, (list, tuple)):
        return type(obj)(_canonical(v) for v in obj)
    if isinstance(obj, str):
        return sys.intern(obj)
    return obj


def _epoch_population(stage: str, num_slices: int) -> int:
    """Number of training examples one epoch covers.

    Stage "reg" draws ordered neighbor pairs, so its epoch spans the pair
    population; every other stage iterates the aligned slices.
    """
    if stage == "reg":
        return max(1, 2 * sum(max(0, num_slices - d)
                              for d in range(1, NEIGHBOR_MAX_OFFSET + 1)))
    return max(1, num_slices)


def _steps_per_epoch(stage: str, num_slices: int, batch_size: int) -> int:
    return max(1, math.ceil(_epoch_population(stage, num_slices) / batch_size))


def total_steps(cfg: TrainConfig, num_slices: int) -> int:
    return cfg.epochs * _steps_per_epoch(cfg.stage, num_slices, cfg.batch_size)


def _step_rng(seed: int, step: int) -> np.random.Generator:
    # stateless derivation: the stream for a step never depends on what
    # earlier steps consumed
    return np.random.default_rng(np.random.SeedSequence(entropy=seed,
                                                        spawn_key=(step,)))


def _env_workers() -> int:
    raw = os.environ.get("SBR_NUM_WORKERS", "")
    if not raw:
        return 0
    try:
        return int(raw)
    except ValueError:
        logger.warning("ignoring non-integer SBR_NUM_WORKERS=%r", raw)
        return 0


def _numbered_batches(builder, first: int, last: int):
    """Yield (step, builder(step)) for step in [first, last], optionally
    building ahead in worker threads. Order of consumption is fixed."""
    if last < first:
        return
    workers = _env_workers()
    if workers <= 1:
        for step in range(first, last + 1):
            yield step, builder(step)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        pending = deque()
        next_submit = first
        for step in range(first, last + 1):
            while next_submit <= last and len(pending) < 2 * workers:
                pending.append(pool.submit(builder, next_submit))
                next_submit += 1
            yield step, pending.popleft().result()


class _DivergenceGuard:
    def __init__(self, stage: str):
        self.stage = stage
        self.initial: Optional[float] = None
        self.warned = False

    def check(self, value: float, step: int) -> None:
        if not math.isfinite(value):
            raise TrainingDiverged(f"stage {self.stage}: non-finite loss at "
                                   f"step {step}")
        if self.initial is None:
            self.initial = value
        elif not self.warned and value > 10.0 * abs(self.initial) > 0:
            logger.warning("stage %s: loss %.4g at step %d exceeds 10x the "
                           "initial loss %.4g", self.stage, value, step,
                           self.initial)
            self.warned = True


def _prepare_log(path: Path, start_step: int) -> None:
    """Fresh runs truncate the log; resumed runs drop any records past the
    resume step so step numbering stays gapless and duplicate-free."""
    if start_step <= 0 or not path.exists():
        path.write_text("")
        return
    kept = []
    for line in path.read_text().splitlines():
        if line.strip() and json.loads(line)["step"] <= start_step:
            kept.append(line)
    path.write_text("".join(k + "\n" for k in kept))


def _log_record(log, record: dict) -> None:
    log.write(json.dumps(record, sort_keys=True) + "\n")
    log.flush()


def _require_stage(cfg: TrainConfig, allowed: tuple) -> None:
    if cfg.stage not in allowed:
        raise CoreError(f"this trainer runs stages {allowed}, got '{cfg.stage}'")


def _uniform_shape(stack) -> tuple[int, int]:
    if not stack:
        raise CoreError("empty stack")
    h, w = stack[0].target.shape
    for s in stack:
        if s.target.shape != (h, w) or s.source.shape != (h, w):
            raise CoreError(f"slice {s.index}: stacks must share one shape for "
                            f"batched training")
    return h, w


# --------------------------------------------------------------------------- #
# Batch builders (pure functions of (stack, cfg, step))
# --------------------------------------------------------------------------- #

def _reg_pair_batch(stack, cfg: TrainConfig, aug: AugmentationConfig, step: int):
    rng = _step_rng(cfg.seed, step)
    n = len(stack)
    fixed, moving = [], []
    for _ in range(cfg.batch_size):
        i = int(rng.integers(n))
        offsets = [d for d in range(-NEIGHBOR_MAX_OFFSET, NEIGHBOR_MAX_OFFSET + 1)
                   if d != 0 and 0 <= i + d < n]
        j = i + offsets[int(rng.integers(len(offsets)))]
        a, _ = data.random_augmentation(stack[i].target, aug, rng)
        b, _ = data.random_augmentation(stack[j].target, aug, rng)
        fixed.append(a)
        moving.append(b)
    return torch.stack(fixed)[:, None], torch.stack(moving)[:, None]


def _paired_batch(stack, cfg: TrainConfig, aug: AugmentationConfig, step: int,
                  with_segs: bool = False) -> dict:
    """Aligned-index (source, target) batch with matched augmentation plus
    small independent perturbations per side."""
    rng = _step_rng(cfg.seed, step)
    n = len(stack)
    h, w = stack[0].source.shape
    out = {"sources": [], "targets": [], "masks": [], "seeds": [],
           "source_segs": [], "target_segs": []}
    for _ in range(cfg.batch_size):
        s = stack[int(rng.integers(n))]
        shared = data.draw_augmentation_field(h, w, aug, rng)
        pert_s = data.draw_augmentation_field(h, w, aug, rng, PERTURBATION_SCALE)
        pert_t = data.draw_augmentation_field(h, w, aug, rng, PERTURBATION_SCALE)
        field_s = warp.compose(pert_s, shared)
        field_t = warp.compose(pert_t, shared)
        out["sources"].append(warp.resample(s.source, field_s))
        out["targets"].append(warp.resample(s.target, field_t))
        mask = s.tissue_mask if s.tissue_mask is not None \
            else torch.ones(h, w, dtype=torch.bool)
        m = warp.resample(mask.float(), shared) > 0.5
        out["masks"].append(m if bool(m.any()) else torch.ones_like(m))
        out["seeds"].append(int(rng.integers(2 ** 31 - 2)))
        if with_segs:
            out["source_segs"].append(warp.resample_labels(s.source_seg, field_s))
            out["target_segs"].append(warp.resample_labels(s.target_seg, field_t))
    return out


def _make_extract(gen, heads, mask, n):
    def extract(image, seed):
        _, taps = models.translate(gen, image)
        return models.sample_descriptors(taps, heads, mask, n, seed)
    return extract


# --------------------------------------------------------------------------- #
# Checkpoint payloads
# --------------------------------------------------------------------------- #

def _registration_checkpoint(reg, opt, cfg, step) -> dict:
    return _canonical(
        {"kind": "registration", "config": asdict(reg.config),
         "state": reg.state_dict(), "step": step, "seed": cfg.seed,
         "optimizer_state": opt.state_dict(),
         "train_config": config_to_dict(cfg)})


def _sbr_checkpoint(gen, heads, reg, opt, cfg, step, disc=None, opt_d=None) -> dict:
    payload = {"kind": "sbr", "gen_config": asdict(gen.config),
               "gen_state": gen.state_dict(), "heads_state": heads.state_dict(),
               "reg_config": asdict(reg.config), "reg_state": reg.state_dict(),
               "step": step, "seed": cfg.seed,
               "optimizer_state": opt.state_dict(),
               "train_config": config_to_dict(cfg)}
    if disc is not None:
        payload["disc_state"] = disc.state_dict()
        payload["disc_optimizer_state"] = opt_d.state_dict()
    return _canonical(payload)


# --------------------------------------------------------------------------- #
# Stage 1: intra-modality registration
# --------------------------------------------------------------------------- #

def train_registration(stack, cfg: TrainConfig, out_dir, resume=None,
                       augment: Optional[AugmentationConfig] = None) -> dict:
    """Train the registration U-Net on augmented neighbor pairs from the
    target modality; loss is -LNCC + 2 * lambda_r * velocity gradient norm."""
    _require_stage(cfg, ("reg",))
    if len(stack) < 2:
        raise CoreError("registration training needs a stack of length >= 2")
    h, w = _uniform_shape(stack)
    aug = augment if augment is not None else AugmentationConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(cfg.seed)
    reg = models.RegistrationNet()
    opt = torch.optim.Adam(reg.parameters(), lr=cfg.learning_rate, betas=cfg.betas)
    start_step = 0
    if resume is not None:
        payload = _as_payload(resume)
        reg = models.build_registration_net(payload)
        opt = torch.optim.Adam(reg.parameters(), lr=cfg.learning_rate,
                               betas=cfg.betas)
        opt.load_state_dict(payload["optimizer_state"])
        start_step = int(payload["step"])

    total = total_steps(cfg, len(stack))
    guard = _DivergenceGuard(cfg.stage)
    _prepare_log(out / LOG_NAME, start_step)
    run_start = time.perf_counter()
    with (out / LOG_NAME).open("a") as log:
        batches = _numbered_batches(
            lambda step: _reg_pair_batch(stack, cfg, aug, step),
            start_step + 1, total)
        for step, (fixed, moving) in batches:
            psi = reg(fixed, moving)
            phi = warp.upsample_field(warp.integrate_svf(psi), h, w)
            # border padding: warping zeros in at the rim would reward a
            # uniform contraction regardless of the input pair
            warped = warp.resample(moving, phi, padding="border")
            sim = losses.lncc(fixed, warped)
            smooth = 2.0 * cfg.weights.lambda_r * losses.svf_gradient_norm(psi)
            loss = -sim + smooth
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            guard.check(float(loss.detach()), step)
            _log_record(log, {"stage": cfg.stage, "step": step,
                              "loss": float(loss.detach()),
                              "loss_lncc": float(-sim.detach()),
                              "loss_grad": float(smooth.detach()),
                              "wall_time": time.perf_counter() - run_start})
            if step % cfg.checkpoint_every == 0:
                torch.save(_registration_checkpoint(reg, opt, cfg, step),
                           out / f"checkpoint_{step:06d}.pt")
    payload = _registration_checkpoint(reg, opt, cfg, total)
    torch.save(payload, out / FINAL_CHECKPOINT)
    return payload


# --------------------------------------------------------------------------- #
# Stage 2: translation through the (frozen) registration net
# --------------------------------------------------------------------------- #

def _run_translation_stage(stack, reg, gen, heads, cfg, out_dir, resume,
                           augment, disc=None, reg_trainable=False,
                           lr=None) -> dict:
    h, w = _uniform_shape(stack)
    aug = augment if augment is not None else AugmentationConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lr = cfg.learning_rate if lr is None else lr

    params = list(gen.parameters()) + list(heads.parameters())
    if reg_trainable:
        params += list(reg.parameters())
    opt = torch.optim.Adam(params, lr=lr, betas=cfg.betas)
    opt_d = torch.optim.Adam(disc.parameters(), lr=lr, betas=cfg.betas) \
        if disc is not None else None
    start_step = 0
    if resume is not None:
        payload = _as_payload(resume)
        gen.load_state_dict(payload["gen_state"])
        heads.load_state_dict(payload["heads_state"])
        reg.load_state_dict(payload["reg_state"])
        opt.load_state_dict(payload["optimizer_state"])
        if disc is not None:
            disc.load_state_dict(payload["disc_state"])
            opt_d.load_state_dict(payload["disc_optimizer_state"])
        start_step = int(payload["step"])

    if any(s.tissue_mask is None for s in stack):
        logger.warning("stage %s: samples without a tissue mask; patch "
                       "sampling falls back to the full image", cfg.stage)

    total = total_steps(cfg, len(stack))
    weights = cfg.weights
    guard = _DivergenceGuard(cfg.stage)
    _prepare_log(out / LOG_NAME, start_step)
    run_start = time.perf_counter()
    with (out / LOG_NAME).open("a") as log:
        batches = _numbered_batches(
            lambda step: _paired_batch(stack, cfg, aug, step),
            start_step + 1, total)
        for step, batch in batches:
            b = len(batch["sources"])
            acc = {"loss_l1": 0.0, "loss_geo": 0.0}
            batch_loss = None
            translated = []
            for k in range(b):
                src, tgt = batch["sources"][k], batch["targets"][k]
                st, _ = models.translate(gen, src)
                psi = models.predict_svf(reg, tgt, st)
                phi = warp.upsample_field(warp.integrate_svf(psi), h, w)
                st_warped = warp.resample(st, phi)
                extract = _make_extract(gen, heads, batch["masks"][k],
                                        cfg.patches_per_layer)
                item, parts = losses.sbr_total_loss(
                    extract, src, st, st_warped, tgt, weights,
                    seed=batch["seeds"][k])
                batch_loss = item if batch_loss is None else batch_loss + item
                acc["loss_l1"] += parts["loss_l1"] / b
                acc["loss_geo"] += parts["loss_geo"] / b
                translated.append(st)
            batch_loss = batch_loss / b

            record = {"stage": cfg.stage, "step": step,
                      "loss_l1": acc["loss_l1"], "loss_geo": acc["loss_geo"]}
            if disc is not None:
                fake = torch.stack(translated)[:, None]
                real = torch.stack(batch["targets"])[:, None]
                gan_gen, _ = losses.lsgan_losses(disc(real), disc(fake))
                batch_loss = batch_loss + weights.lambda_gan * gan_gen
                record["loss_gan"] = float(
                    weights.lambda_gan * gan_gen.detach())
            opt.zero_grad(set_to_none=True)
            batch_loss.backward()
            opt.step()
            if disc is not None:
                _, d_loss = losses.lsgan_losses(disc(real), disc(fake.detach()))
                opt_d.zero_grad(set_to_none=True)
                d_loss.backward()
                opt_d.step()
                record["loss_disc"] = float(d_loss.detach())
            record["loss"] = float(batch_loss.detach())
            record["wall_time"] = time.perf_counter() - run_start
            guard.check(record["loss"], step)
            _log_record(log, record)
            if step % cfg.checkpoint_every == 0:
                torch.save(_sbr_checkpoint(gen, heads, reg, opt, cfg, step,
                                           disc, opt_d),
                           out / f"checkpoint_{step:06d}.pt")
    payload = _sbr_checkpoint(gen, heads, reg, opt, cfg, total, disc, opt_d)
    torch.save(payload, out / FINAL_CHECKPOINT)
    return payload


def train_sbr(stack, reg_checkpoint, cfg: TrainConfig, out_dir, resume=None,
              augment: Optional[AugmentationConfig] = None) -> dict:
    """Train generator and projection heads through the frozen registration
    net; per iteration the loss is the L1 registration term plus the weighted
    contrastive geometry term."""
    _require_stage(cfg, ("sbr", "sbr_n"))
    reg = models.freeze(models.build_registration_net(_as_payload(reg_checkpoint)))
    torch.manual_seed(cfg.seed)
    gen = models.Generator()
    heads = models.ProjectionHeads(gen.config.tap_channels,
                                   gen.config.hidden_dim, gen.config.embed_dim)
    return _run_translation_stage(stack, reg, gen, heads, cfg, out_dir,
                                  resume, augment)


def train_sbr_g(stack, reg_checkpoint, cfg: TrainConfig, out_dir, resume=None,
                augment: Optional[AugmentationConfig] = None) -> dict:
    """SbR plus a least-squares adversarial term with a patch discriminator;
    generator and discriminator updates alternate within each step. With
    lambda_gan = 0 this reduces exactly to train_sbr."""
    _require_stage(cfg, ("sbr", "sbr_g"))
    reg = models.freeze(models.build_registration_net(_as_payload(reg_checkpoint)))
    torch.manual_seed(cfg.seed)
    gen = models.Generator()
    heads = models.ProjectionHeads(gen.config.tap_channels,
                                   gen.config.hidden_dim, gen.config.embed_dim)
    disc = None
    if cfg.weights.lambda_gan > 0:
        torch.manual_seed(cfg.seed + 1)
        disc = models.PatchGANDiscriminator()
    return _run_translation_stage(stack, reg, gen, heads, cfg, out_dir,
                                  resume, augment, disc=disc)


def finetune_sbr_r(stack, sbr_checkpoint, cfg: TrainConfig, out_dir,
                   resume=None,
                   augment: Optional[AugmentationConfig] = None) -> dict:
    """Continue a finished SbR run with the registration weights unfrozen,
    at a tenth of the configured learning rate."""
    _require_stage(cfg, ("sbr_r",))
    payload = _as_payload(sbr_checkpoint)
    gen, heads = models.build_generator(payload)
    reg = models.build_registration_net(payload)
    return _run_translation_stage(stack, reg, gen, heads, cfg, out_dir,
                                  resume, augment, reg_trainable=True,
                                  lr=cfg.learning_rate * 0.1)


# --------------------------------------------------------------------------- #
# Baselines: registration trained directly on (S, T)
# --------------------------------------------------------------------------- #

def train_baseline_nmi(stack, cfg: TrainConfig, out_dir, use_dice=False,
                       resume=None,
                       augment: Optional[AugmentationConfig] = None) -> dict:
    """Train a registration net on the inter-modality pairs with soft-binned
    NMI (negated) plus the velocity regularizer; optionally adds a Dice loss
    on the warped source segmentation."""
    _require_stage(cfg, ("nmi", "nmiw"))
    use_dice = use_dice or cfg.stage == "nmiw"
    if use_dice and any(s.source_seg is None or s.target_seg is None
                        for s in stack):
        raise CoreError("Dice-augmented baseline requires source and target "
                        "segmentations on every sample")
    h, w = _uniform_shape(stack)
    aug = augment if augment is not None else AugmentationConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(cfg.seed)
    reg = models.RegistrationNet()
    opt = torch.optim.Adam(reg.parameters(), lr=cfg.learning_rate, betas=cfg.betas)
    start_step = 0
    if resume is not None:
        payload = _as_payload(resume)
        reg = models.build_registration_net(payload)
        opt = torch.optim.Adam(reg.parameters(), lr=cfg.learning_rate,
                               betas=cfg.betas)
        opt.load_state_dict(payload["optimizer_state"])
        start_step = int(payload["step"])

    total = total_steps(cfg, len(stack))
    guard = _DivergenceGuard(cfg.stage)
    _prepare_log(out / LOG_NAME, start_step)
    run_start = time.perf_counter()
    with (out / LOG_NAME).open("a") as log:
        batches = _numbered_batches(
            lambda step: _paired_batch(stack, cfg, aug, step,
                                       with_segs=use_dice),
            start_step + 1, total)
        for step, batch in batches:
            b = len(batch["sources"])
            nmi_term = None
            dice_term = None
            smooth_term = None
            for k in range(b):
                src, tgt = batch["sources"][k], batch["targets"][k]
                psi = models.predict_svf(reg, tgt, src)
                phi = warp.upsample_field(warp.integrate_svf(psi), h, w)
                warped = warp.resample(src, phi)
                sim = losses.nmi(tgt, warped)
                nmi_term = sim if nmi_term is None else nmi_term + sim
                sm = losses.svf_gradient_norm(psi)
                smooth_term = sm if smooth_term is None else smooth_term + sm
                if use_dice:
                    pred = warp.resample(
                        losses.one_hot(batch["source_segs"][k])[None],
                        phi[None])[0]
                    dl = losses.dice_loss(pred,
                                          losses.one_hot(batch["target_segs"][k]))
                    dice_term = dl if dice_term is None else dice_term + dl
            loss = -nmi_term / b + 2.0 * cfg.weights.lambda_r * smooth_term / b
            record = {"stage": cfg.stage, "step": step,
                      "loss_nmi": float(-nmi_term.detach() / b),
                      "loss_grad": float(2.0 * cfg.weights.lambda_r
                                         * smooth_term.detach() / b)}
            if use_dice:
                loss = loss + dice_term / b
                record["loss_dice"] = float(dice_term.detach() / b)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            record["loss"] = float(loss.detach())
            record["wall_time"] = time.perf_counter() - run_start
            guard.check(record["loss"], step)
            _log_record(log, record)
            if step % cfg.checkpoint_every == 0:
                torch.save(_registration_checkpoint(reg, opt, cfg, step),
                           out / f"checkpoint_{step:06d}.pt")
    payload = _registration_checkpoint(reg, opt, cfg, total)
    torch.save(payload, out / FINAL_CHECKPOINT)
    return payload


def run_stage(stack, cfg: TrainConfig, out_dir, checkpoint=None, resume=None,
              augment: Optional[AugmentationConfig] = None) -> dict:
    """Dispatch a configured stage. ``checkpoint`` is the required input
    checkpoint for the translation stages: a stage-reg checkpoint for
    sbr / sbr_n / sbr_g, a finished SbR checkpoint for sbr_r."""
    if cfg.stage == "reg":
        return train_registration(stack, cfg, out_dir, resume, augment)
    if cfg.stage in ("nmi", "nmiw"):
        return train_baseline_nmi(stack, cfg, out_dir,
                                  use_dice=cfg.stage == "nmiw",
                                  resume=resume, augment=augment)
    if checkpoint is None:
        raise CoreError(f"stage {cfg.stage} requires an input checkpoint")
    if cfg.stage in ("sbr", "sbr_n"):
        return train_sbr(stack, checkpoint, cfg, out_dir, resume, augment)
    if cfg.stage == "sbr_g":
        return train_sbr_g(stack, checkpoint, cfg, out_dir, resume, augment)
    return finetune_sbr_r(stack, checkpoint, cfg, out_dir, resume, augment)
