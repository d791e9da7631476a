"""Learning-rate schedules, momentum SGD and the training loop."""

from __future__ import annotations

import json
import logging
import math
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch
import torch.nn as nn

from .backbone import StochasticDepth
from .datapipe import DetectionDataset, DetectionLoader, JitterSpec

logger = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e4
REFERENCE_BATCH = 256
STEP_TAIL = "step_tail"
COSINE = "cosine"


class NonFiniteGradientError(FloatingPointError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, dump_dir: Path | None = None):
        super().__init__(message)
        self.dump_dir = dump_dir


@dataclass
class TrainRecipe:
    """Optimization recipe.

    The step-tail schedule warms up linearly, holds ``base_lr`` and drops to
    ``drop_factors[0] * base_lr`` for the last ``first_drop_last_epochs``
    epochs and to ``drop_factors[1] * base_lr`` for the last
    ``second_drop_last_epochs``. Factors are relative to ``base_lr``.
    """

    epochs: int = 600
    batch_size: int = 256
    base_lr: float = 0.28
    warmup_epochs: float = 5.0
    schedule: str = STEP_TAIL
    first_drop_last_epochs: float = 25.0
    second_drop_last_epochs: float = 10.0
    drop_factors: tuple[float, float] = (0.1, 0.01)
    weight_decay: float = 4e-5
    momentum: float = 0.9
    sd_init: float = 0.2
    jitter: JitterSpec = field(default_factory=lambda: JitterSpec(640, (0.1, 2.0)))
    grad_clip: float | None = None
    bn_recalibration_batches: int = 0

    def __post_init__(self):
        self.drop_factors = tuple(float(f) for f in self.drop_factors)
        if isinstance(self.jitter, dict):
            self.jitter = JitterSpec(self.jitter["target_size"], tuple(self.jitter["scale_range"]))
        if self.schedule not in (STEP_TAIL, COSINE):
            raise ValueError(f"schedule must be {STEP_TAIL!r} or {COSINE!r}, got {self.schedule!r}")
        if not (self.warmup_epochs < self.epochs or (self.epochs == 0 and self.warmup_epochs == 0)):
            raise ValueError(f"warmup_epochs ({self.warmup_epochs}) must be < epochs ({self.epochs})")
        a, b = self.drop_factors
        if not 1 > a > b > 0:
            raise ValueError(f"drop_factors must be decreasing and in (0, 1), got {self.drop_factors}")
        if self.second_drop_last_epochs > self.first_drop_last_epochs:
            raise ValueError("second drop must come after the first (second_drop_last_epochs <= first)")
        if self.bn_recalibration_batches < 0:
            raise ValueError("bn_recalibration_batches must be >= 0")

    @classmethod
    def coco(cls, **kw) -> "TrainRecipe":
        """COCO recipe: batch 256, 600 epochs, step LR from 0.28, 5 warmup epochs."""
        return cls(**kw)

    @classmethod
    def desk(cls, **kw) -> "TrainRecipe":
        """Batch 8 with linearly rescaled LR over 50 epochs.

        Short runs leave slow-moving batch-norm statistics behind the
        weights, so the statistics are re-estimated on 4 batches at the end.
        """
        kw.setdefault("batch_size", 8)
        kw.setdefault("bn_recalibration_batches", 4)
        kw.setdefault("epochs", 50)
        kw.setdefault("base_lr", 0.28 * kw["batch_size"] / REFERENCE_BATCH)
        return cls(**kw)

    @classmethod
    def finetune_cosine(cls, **kw) -> "TrainRecipe":
        """Short cosine schedule from 0.08 used for domain fine-tuning."""
        kw.setdefault("epochs", 6)
        kw.setdefault("base_lr", 0.08)
        kw.setdefault("warmup_epochs", 0.0)
        kw.setdefault("schedule", COSINE)
        return cls(**kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["drop_factors"] = list(self.drop_factors)
        d["jitter"] = {"target_size": self.jitter.target_size, "scale_range": list(self.jitter.scale_range)}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainRecipe":
        d = dict(d)
        if "jitter" in d:
            j = d["jitter"]
            d["jitter"] = JitterSpec(int(j["target_size"]), tuple(j["scale_range"]))
        if "drop_factors" in d:
            d["drop_factors"] = tuple(d["drop_factors"])
        return cls(**d)


def lr_at(recipe: TrainRecipe, epoch: float) -> float:
    """Learning rate at a (fractional) epoch."""
    base, warm, total = recipe.base_lr, recipe.warmup_epochs, recipe.epochs
    if epoch < warm:
        return base * epoch / warm
    if recipe.schedule == COSINE:
        span = total - warm
        t = min(max((epoch - warm) / span, 0.0), 1.0) if span > 0 else 1.0
        return base * (1 + math.cos(math.pi * t)) / 2
    if epoch >= total - recipe.second_drop_last_epochs:
        return base * recipe.drop_factors[1]
    if epoch >= total - recipe.first_drop_last_epochs:
        return base * recipe.drop_factors[0]
    return base


def no_decay_names(model: nn.Module) -> set[str]:
    """Parameter names belonging to normalization layers."""
    names = set()
    for mod_name, mod in model.named_modules():
        if isinstance(mod, nn.modules.batchnorm._BatchNorm):
            for p_name, _ in mod.named_parameters(recurse=False):
                names.add(f"{mod_name}.{p_name}" if mod_name else p_name)
    return names


@torch.no_grad()
def sgd_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor], momentum_buffers: dict[str, torch.Tensor],
             lr: float, momentum: float = 0.9, weight_decay: float = 0.0, no_decay: Iterable[str] = ()) -> None:
    """In-place momentum SGD with L2 decay folded into the gradient.

    ``g <- g + wd * w`` (skipped for ``no_decay`` names), ``m <- momentum * m + g``,
    ``w <- w - lr * m``. Missing momentum buffers start at zero.

    Raises:
        NonFiniteGradientError: before touching any weight, if a gradient has
            NaN or inf entries.
    """
    for name, g in grads.items():
        if g is not None and not torch.isfinite(g).all():
            raise NonFiniteGradientError(f"non-finite gradient for parameter {name!r}")
    skip = set(no_decay)
    for name, w in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if weight_decay and name not in skip:
            g = g + weight_decay * w
        buf = momentum_buffers.get(name)
        if buf is None:
            buf = torch.zeros_like(w)
        buf.mul_(momentum).add_(g)
        momentum_buffers[name] = buf
        w.sub_(lr * buf)


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    momentum_buffers: dict[str, torch.Tensor] = field(default_factory=dict)
    metrics: list[dict] = field(default_factory=list)


def _rng_state() -> dict:
    return {
        "torch": torch.get_rng_state(),
        "numpy": np.random.get_state(),
        "python": random.getstate(),
    }


def _set_rng_state(state: dict) -> None:
    torch.set_rng_state(state["torch"])
    np.random.set_state(state["numpy"])
    random.setstate(state["python"])


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    random.seed(seed)


def save_checkpoint(directory, model: nn.Module, state: TrainState, recipe: TrainRecipe, extra: dict | None = None) -> Path:
    """Write ``weights.pt``, ``optimizer.pt``, ``rng.pt``, ``recipe.json`` and ``state.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    torch.save({k: v.detach().clone() for k, v in model.state_dict().items()}, d / "weights.pt")
    torch.save({k: v.clone() for k, v in state.momentum_buffers.items()}, d / "optimizer.pt")
    torch.save(_rng_state(), d / "rng.pt")
    (d / "recipe.json").write_text(json.dumps(recipe.to_dict(), indent=2, sort_keys=True))
    meta = {"step": state.step, "epoch": state.epoch}
    meta.update(extra or {})
    (d / "state.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return d


def load_checkpoint(directory, model: nn.Module, restore_rng: bool = True) -> TrainState:
    d = Path(directory)
    model.load_state_dict(torch.load(d / "weights.pt", map_location="cpu", weights_only=True))
    meta = json.loads((d / "state.json").read_text())
    state = TrainState(step=meta["step"], epoch=meta["epoch"])
    opt = d / "optimizer.pt"
    if opt.exists():
        state.momentum_buffers = torch.load(opt, map_location="cpu", weights_only=True)
    if restore_rng and (d / "rng.pt").exists():
        _set_rng_state(torch.load(d / "rng.pt", map_location="cpu", weights_only=False))
    return state


@torch.no_grad()
def recalibrate_batchnorm(model: nn.Module, batches: Iterable[torch.Tensor]) -> int:
    """Replace batch-norm running statistics by their plain average over ``batches``.

    Runs the model in training mode with stochastic depth switched off.
    Returns the number of batches seen; with none the statistics are left
    untouched.
    """
    batches = list(batches)
    norms = [m for m in model.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]
    if not norms or not batches:
        return 0
    momenta = [m.momentum for m in norms]
    was_training = model.training
    for m in norms:
        m.reset_running_stats()
        m.momentum = None
    model.train()
    for m in model.modules():
        if isinstance(m, StochasticDepth):
            m.eval()
    try:
        for images in batches:
            model(images)
    finally:
        for m, momentum in zip(norms, momenta):
            m.momentum = momentum
        model.train(was_training)
    return len(batches)


def _json_line(record: dict) -> str:
    return json.dumps(record, sort_keys=True)


def train(model: nn.Module, dataset: DetectionDataset, recipe: TrainRecipe, *, seed: int = 0,
          output_dir=None, checkpoint_every: int = 0, max_steps: int | None = None, num_workers: int = 1,
          resume_from=None, callbacks: Iterable[Callable[[dict], None]] = (), flip: bool = True,
          with_masks: bool = False, extra: dict | None = None) -> TrainState:
    """Run ``recipe`` on ``dataset``.

    One JSON record per step (losses, lr, step, epoch) is appended to
    ``output_dir/metrics.jsonl`` and handed to every callback. Checkpoints go
    to ``output_dir/checkpoints/epoch_XXXX`` every ``checkpoint_every`` epochs
    and to ``output_dir/checkpoints/last`` at the end; ``extra`` is stored
    in each checkpoint's ``state.json``. After the last epoch, batch-norm
    statistics are re-estimated on ``recipe.bn_recalibration_batches``
    augmented batches when that is nonzero.

    Raises:
        TrainingDiverged: total loss above 1e4 or non-finite; the state at the
            failing step is dumped to ``output_dir/checkpoints/diverged``.
    """
    out = Path(output_dir) if output_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    model_classes = getattr(getattr(model, "cfg", None), "num_classes", None)
    if model_classes is not None and model_classes != dataset.num_classes:
        raise ValueError(f"model predicts {model_classes} classes but dataset has {dataset.num_classes}")

    if resume_from is not None:
        state = load_checkpoint(resume_from, model)
    else:
        seed_everything(seed)
        state = TrainState()
    loader = DetectionLoader(dataset, recipe.batch_size, recipe.jitter, seed=seed, flip=flip,
                             num_workers=num_workers, with_masks=with_masks)
    steps_per_epoch = loader.steps_per_epoch()
    params = dict(model.named_parameters())
    no_decay = no_decay_names(model)
    metrics_file = open(out / "metrics.jsonl", "a") if out is not None else None
    try:
        for epoch in range(state.epoch, recipe.epochs):
            if max_steps is not None and state.step >= max_steps:
                break
            model.train()
            finished = True
            for i, batch in enumerate(loader.epoch(epoch)):
                if max_steps is not None and state.step >= max_steps:
                    finished = False
                    break
                lr = lr_at(recipe, epoch + i / steps_per_epoch)
                bundle = model.loss(batch.images, batch.targets)
                total = bundle.total
                if not torch.isfinite(total) or total.item() > DIVERGENCE_LIMIT:
                    dump = save_checkpoint(out / "checkpoints" / "diverged", model, state, recipe, extra) if out else None
                    raise TrainingDiverged(f"loss {total.item()} at step {state.step} exceeds {DIVERGENCE_LIMIT}", dump)
                model.zero_grad(set_to_none=True)
                total.backward()
                grads = {k: p.grad for k, p in params.items() if p.grad is not None}
                if recipe.grad_clip:
                    torch.nn.utils.clip_grad_norm_(list(params.values()), recipe.grad_clip)
                sgd_step(params, grads, state.momentum_buffers, lr, recipe.momentum, recipe.weight_decay, no_decay)
                record = {"step": state.step, "epoch": epoch, "lr": lr}
                record.update(bundle.as_floats())
                state.metrics.append(record)
                state.step += 1
                if metrics_file is not None:
                    metrics_file.write(_json_line(record) + "\n")
                    metrics_file.flush()
                for cb in callbacks:
                    cb(record)
            if not finished:
                # a partial epoch is replayed from its start on resume
                break
            state.epoch = epoch + 1
            if out is not None and checkpoint_every and state.epoch % checkpoint_every == 0:
                save_checkpoint(out / "checkpoints" / f"epoch_{state.epoch:04d}", model, state, recipe, extra)
    finally:
        if metrics_file is not None:
            metrics_file.close()
    if recipe.bn_recalibration_batches and state.step and state.epoch == recipe.epochs:
        extra_epoch = loader.epoch(recipe.epochs)
        try:
            images = [b.images for _, b in zip(range(recipe.bn_recalibration_batches), extra_epoch)]
        finally:
            extra_epoch.close()
        recalibrate_batchnorm(model, images)
    if out is not None:
        save_checkpoint(out / "checkpoints" / "last", model, state, recipe, extra)
    return state
