"""Layered denoising objective, optimizer loop, checkpointing.

Each step draws one t per example, noises the whole image pyramid with a
shared sinc-downsampled noise pyramid under per-level shifted schedules,
and regresses the clean image at every level (x-prediction). With cropping
enabled the latents and targets are cropped after the pyramids are built,
so the crop and the downsampling commute exactly.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .crops import CropPlan, crop_array, make_crop_plan
from .data import Dataset, batch_iter, batches_per_epoch
from .noise import NoiseField, bilinear_downsample, build_noise_pyramid
from .params import ParamStore, backward
from .schedule import ShiftConfig, T_EPS
from .tensor import ShapeError, Tensor
from .unet import LayeredModel, ModelConfig, build_model

__all__ = [
    "TrainConfig",
    "StepMetrics",
    "TrainingDiverged",
    "Adam",
    "layered_loss",
    "train_step",
    "fit",
    "make_crop_plan",
    "CropPlan",
    "level_coefficients",
    "load_training_checkpoint",
]

WEIGHT_PRESETS = ("uniform", "quarter_per_level", "quadruple_per_level")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    warmup_steps: int = 100
    total_steps: int = 1000
    loss_weights: str | tuple = "uniform"  # preset name or per-level tuple
    crop_enabled: bool = False
    noise_mode: str = "sinc"  # or "independent"
    shifts: tuple = (1.0,)
    shift_multiplier: float = 2.0
    grad_clip: float = 0.0  # 0 disables
    seed: int = 0
    metrics_every: int = 1
    checkpoint_every: int = 500

    def __post_init__(self):
        if self.batch_size < 1 or self.total_steps < 0:
            raise ValueError("batch_size must be >= 1 and total_steps >= 0")
        if self.noise_mode not in ("sinc", "independent"):
            raise ValueError(f"unknown noise mode {self.noise_mode}")
        if isinstance(self.loss_weights, str):
            if self.loss_weights not in WEIGHT_PRESETS:
                raise ValueError(
                    f"loss_weights must be one of {WEIGHT_PRESETS} or a tuple"
                )
        else:
            w = tuple(float(x) for x in self.loss_weights)
            if any(x < 0 for x in w) or not any(x > 0 for x in w):
                raise ValueError("weights must be >= 0 with at least one > 0")
            object.__setattr__(self, "loss_weights", w)
        object.__setattr__(self, "shifts", tuple(float(s) for s in self.shifts))

    def shift_config(self) -> ShiftConfig:
        return ShiftConfig(shifts=self.shifts, multiplier=self.shift_multiplier)

    def weights_for(self, num_levels: int) -> Tuple[float, ...]:
        """Per-pyramid-level weights, highest resolution first."""
        if isinstance(self.loss_weights, tuple):
            if len(self.loss_weights) != num_levels:
                raise ValueError(
                    f"{len(self.loss_weights)} weights for {num_levels} levels"
                )
            return self.loss_weights
        if self.loss_weights == "uniform":
            return tuple(1.0 for _ in range(num_levels))
        if self.loss_weights == "quarter_per_level":
            return tuple(0.25**i for i in range(num_levels))
        return tuple(4.0**i for i in range(num_levels))

    def to_dict(self) -> dict:
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        for key in ("loss_weights", "shifts"):
            if isinstance(d[key], tuple):
                d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        d = dict(d)
        if isinstance(d.get("loss_weights"), list):
            d["loss_weights"] = tuple(d["loss_weights"])
        if isinstance(d.get("shifts"), list):
            d["shifts"] = tuple(d["shifts"])
        return cls(**d)


@dataclass
class StepMetrics:
    step: int
    wall_ms: float
    loss_total: float
    loss_per_level: List[float]
    grad_norm: float
    lr: float


def layered_loss(predictions: Sequence[Tensor], targets: Sequence[np.ndarray],
                 weights: Sequence[float]) -> Tensor:
    """Sum over levels of w_i * per-pixel MSE between prediction and target."""
    if not (len(predictions) == len(targets) == len(weights)):
        raise ShapeError("predictions, targets and weights must align")
    total = None
    for pred, target, w in zip(predictions, targets, weights):
        target = np.asarray(target, dtype=pred.data.dtype)
        if pred.shape != target.shape:
            raise ShapeError(
                f"prediction {pred.shape} vs target {target.shape}"
            )
        diff = pred - Tensor(target)
        term = (diff * diff).mean() * float(w)
        total = term if total is None else total + term
    return total


def level_coefficients(t: np.ndarray, num_levels: int,
                       shift_cfg: ShiftConfig) -> Tuple[np.ndarray, np.ndarray]:
    """(alpha, sigma) arrays of shape [num_levels, N], pyramid order."""
    t = np.clip(np.asarray(t, dtype=np.float64), T_EPS, 1.0 - T_EPS)
    lam_base = -2.0 * np.log(np.tan(np.pi * t / 2.0))
    k = num_levels - 1
    alphas, sigmas = [], []
    for i in range(num_levels):
        depth = k - i
        lam = lam_base + shift_cfg.multiplier * np.log(shift_cfg.shifts[depth])
        a2 = 1.0 / (1.0 + np.exp(-lam))
        alphas.append(np.sqrt(a2))
        sigmas.append(np.sqrt(1.0 - a2))
    return np.stack(alphas), np.stack(sigmas)


class Adam:
    """Adam with linear learning-rate warmup and optional gradient norm cap."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.t = 0

    def lr_at(self, step: int) -> float:
        lr = self.cfg.learning_rate
        if self.cfg.warmup_steps > 0 and step < self.cfg.warmup_steps:
            lr *= (step + 1) / self.cfg.warmup_steps
        return lr

    def step(self, params: ParamStore, step_index: int) -> float:
        cfg = self.cfg
        lr = self.lr_at(step_index)
        if lr == 0.0:
            return 0.0
        scale = 1.0
        if cfg.grad_clip > 0.0:
            gnorm = params.grad_norm()
            if gnorm > cfg.grad_clip:
                scale = cfg.grad_clip / (gnorm + 1e-12)
        self.t += 1
        b1c = 1.0 - cfg.beta1**self.t
        b2c = 1.0 - cfg.beta2**self.t
        for name, p in params.items():
            g = p.grad * scale
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            self.m[name] = cfg.beta1 * self.m[name] + (1 - cfg.beta1) * g
            self.v[name] = cfg.beta2 * self.v[name] + (1 - cfg.beta2) * g * g
            mhat = self.m[name] / b1c
            vhat = self.v[name] / b2c
            p.data = p.data - lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)
        return lr

    def state_tensors(self) -> Dict[str, np.ndarray]:
        out = {}
        for name, arr in self.m.items():
            out[f"opt.m.{name}"] = arr
        for name, arr in self.v.items():
            out[f"opt.v.{name}"] = arr
        return out

    def load_state_tensors(self, tensors: Dict[str, np.ndarray], t: int) -> None:
        self.t = t
        for name, arr in tensors.items():
            if name.startswith("opt.m."):
                self.m[name[len("opt.m."):]] = arr.copy()
            elif name.startswith("opt.v."):
                self.v[name[len("opt.v."):]] = arr.copy()


def _step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.Generator(
        np.random.PCG64(np.random.SeedSequence([seed & (2**63 - 1), step]))
    )


def prepare_step_inputs(model_cfg: ModelConfig, images: np.ndarray,
                        cfg: TrainConfig, rng: np.random.Generator):
    """Noised per-level latents and per-level targets for one batch.

    Returns (latents, targets, t, crop_plan). Latents and targets are
    cropped per the plan when cropping is enabled (base level stays full).
    """
    n = images.shape[0]
    num_levels = model_cfg.num_levels
    t = rng.uniform(T_EPS, 1.0 - T_EPS, size=n)
    eps_seed = int(rng.integers(0, 2**62))
    eps0 = NoiseField(
        rng.standard_normal(images.shape).astype(np.float64), seed=eps_seed)
    pyramid = build_noise_pyramid(eps0, num_levels, mode=cfg.noise_mode)
    alphas, sigmas = level_coefficients(t, num_levels, cfg.shift_config())

    dtype = model_cfg.dtype
    latents, targets = [], []
    for i in range(num_levels):
        target = bilinear_downsample(images, 2**i) if i else np.asarray(images)
        target = target.astype(dtype)
        a = alphas[i][:, None, None, None].astype(dtype)
        s = sigmas[i][:, None, None, None].astype(dtype)
        latents.append(a * target + s * pyramid.levels[i].data.astype(dtype))
        targets.append(target)

    plan = None
    if cfg.crop_enabled:
        plan = make_crop_plan(rng, model_cfg.base_res, num_levels)
        rects = plan.image_rects
        for i in range(num_levels - 1):  # base level stays full
            latents[i] = crop_array(latents[i], rects[i])
            targets[i] = crop_array(targets[i], rects[i])
    return latents, targets, t, plan


def train_step(model: LayeredModel, batch, step: int, cfg: TrainConfig,
               optimizer: Adam, rng: Optional[np.random.Generator] = None
               ) -> StepMetrics:
    """One optimization step; deterministic given (cfg.seed, step, batch)."""
    t_start = time.perf_counter()
    images, tokens = batch
    if images.shape[0] == 0:
        raise ValueError("empty batch")
    if rng is None:
        rng = _step_rng(cfg.seed, step)
    latents, targets, t, plan = prepare_step_inputs(
        model.config, images, cfg, rng)
    preds = model.forward(latents, t, tokens, crop_plan=plan)
    weights = cfg.weights_for(model.config.num_levels)
    loss = layered_loss(preds, targets, weights)
    loss_val = float(loss.data)
    if not np.isfinite(loss_val):
        raise TrainingDiverged(
            f"non-finite loss at step {step} (seed {cfg.seed}); "
            f"rerun with _step_rng({cfg.seed}, {step}) to reproduce"
        )
    backward(loss, model.params)
    lr = optimizer.step(model.params, step)
    per_level = [
        float(w) * float(((p.data - np.asarray(tg)) ** 2).mean())
        for p, tg, w in zip(preds, targets, weights)
    ]
    return StepMetrics(
        step=step,
        wall_ms=(time.perf_counter() - t_start) * 1e3,
        loss_total=loss_val,
        loss_per_level=per_level,
        grad_norm=model.params.grad_norm(),
        lr=lr,
    )


def _metrics_header(num_levels: int) -> List[str]:
    return (["step", "wall_ms", "loss_total"]
            + [f"loss_level{i}" for i in range(num_levels)]
            + ["grad_norm", "lr"])


def fit(model: LayeredModel, dataset: Dataset, cfg: TrainConfig,
        out_dir: Optional[str] = None, start_step: int = 0,
        optimizer: Optional[Adam] = None) -> List[StepMetrics]:
    """Run train_step for cfg.total_steps, logging metrics and checkpoints.

    Batch order is a pure function of (cfg.seed, epoch), so resuming from a
    checkpoint at step k continues the exact uninterrupted stream.
    """
    if optimizer is None:
        optimizer = Adam(cfg)
    metrics: List[StepMetrics] = []
    spe = batches_per_epoch(len(dataset), cfg.batch_size)
    csv_fp = writer = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, "metrics.csv")
        fresh = start_step == 0 or not os.path.exists(path)
        try:
            csv_fp = open(path, "w" if fresh else "a", newline="")
        except OSError as exc:
            raise OSError(f"cannot open metrics file {path}: {exc}") from exc
        writer = csv.writer(csv_fp)
        if fresh:
            writer.writerow(_metrics_header(model.config.num_levels))

    try:
        for step in range(start_step, cfg.total_steps):
            epoch, pos = divmod(step, spe)
            batches = batch_iter(dataset, cfg.batch_size, cfg.seed, epoch)
            for _ in range(pos):
                next(batches)
            idx = next(batches)
            batch = dataset.stacked(idx)
            sm = train_step(model, batch, step, cfg, optimizer)
            metrics.append(sm)
            if writer and (step % cfg.metrics_every == 0
                           or step == cfg.total_steps - 1):
                writer.writerow(
                    [sm.step, f"{sm.wall_ms:.3f}", repr(sm.loss_total)]
                    + [repr(v) for v in sm.loss_per_level]
                    + [repr(sm.grad_norm), repr(sm.lr)]
                )
                csv_fp.flush()
            if out_dir and cfg.checkpoint_every > 0 and (
                    (step + 1) % cfg.checkpoint_every == 0
                    or step == cfg.total_steps - 1):
                save_training_checkpoint(
                    os.path.join(out_dir, "latest.ldck"),
                    model, cfg, optimizer, step + 1)
    finally:
        if csv_fp:
            csv_fp.close()
    return metrics


def save_training_checkpoint(path: str, model: LayeredModel, cfg: TrainConfig,
                             optimizer: Adam, step: int) -> None:
    tensors = dict(model.params.state_dict())
    tensors.update(optimizer.state_tensors())
    header = {
        "model_config": model.config.to_dict(),
        "train_config": cfg.to_dict(),
        "step": step,
        "opt_t": optimizer.t,
    }
    try:
        save_checkpoint(path, header, tensors)
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc}") from exc


def load_training_checkpoint(path: str
                             ) -> Tuple[LayeredModel, TrainConfig, Adam, int]:
    header, tensors = load_checkpoint(path)
    model_cfg = ModelConfig.from_dict(header["model_config"])
    cfg = TrainConfig.from_dict(header["train_config"])
    model = build_model(model_cfg, seed=cfg.seed)
    param_state = {k: v for k, v in tensors.items() if not k.startswith("opt.")}
    model.params.load_state_dict(param_state)
    optimizer = Adam(cfg)
    optimizer.load_state_tensors(
        {k: v for k, v in tensors.items() if k.startswith("opt.")},
        header.get("opt_t", header["step"]),
    )
    return model, cfg, optimizer, header["step"]
