"""Cross-view completion pretraining.

Each step renders a batch of synthetic pairs, hides ``mask_ratio`` of the
target tokens and regresses the hidden patches from the source view.  All
randomness for step ``k`` is drawn from streams keyed on ``(seed, k)``, so an
interrupted run resumed from a checkpoint replays the same trajectory.
"""

from __future__ import annotations

import csv
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .checkpoint import (Checkpoint, check_config, load_arrays, optimizer_arrays,
                         restore_optimizer, save_arrays)
from .datagen import PhotometricJitter, SyntheticPair, make_pair
from .errors import CheckpointError, ConfigMismatchError, ConfigurationError, DimensionError, TrainingError
from .model import CrossViewModel, ModelConfig, init_params

logger = logging.getLogger(__name__)


@dataclass
class MaskSpec:
    mask: np.ndarray  # (hw,) bool, True = hidden
    ratio: float

    @property
    def visible(self) -> np.ndarray:
        return np.flatnonzero(~self.mask)

    @property
    def masked(self) -> np.ndarray:
        return np.flatnonzero(self.mask)


def sample_mask(hw: int, ratio: float, rng: np.random.Generator) -> MaskSpec:
    if not 0.0 < ratio < 1.0:
        raise ConfigurationError(f"mask ratio must be in (0, 1), got {ratio}")
    n = int(round(ratio * hw))
    mask = np.zeros(hw, dtype=bool)
    mask[rng.choice(hw, size=n, replace=False)] = True
    return MaskSpec(mask, ratio)


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    learning_rate: float = 1.5e-4
    weight_decay: float = 0.05
    mask_ratio: float = 0.9
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.95
    warmup_frac: float = 0.05
    grad_clip: float = 1.0
    loss_kind: str = "normalized"
    jitter: float = 0.1
    data_kind: str = "procedural"
    data_dir: str = ""

    def __post_init__(self):
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigurationError(f"mask_ratio must be in (0, 1), got {self.mask_ratio}")
        if self.steps <= 0:
            raise ConfigurationError("steps must be > 0")
        if self.loss_kind not in ("normalized", "plain"):
            raise ConfigurationError(f"unknown loss_kind {self.loss_kind!r}")


def parse_kv(text: str) -> dict[str, str]:
    """Flat ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected key=value, got {raw!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def coerce_fields(cls, values: dict):
    """Build dataclass ``cls`` from string values, converting by field type."""
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for k, v in values.items():
        if k not in known:
            raise ConfigurationError(f"unknown {cls.__name__} key {k!r}")
        default = known[k].default
        if isinstance(v, str):
            if isinstance(default, bool):
                v = v.lower() in ("1", "true", "yes", "on")
            elif isinstance(default, int):
                v = int(v)
            elif isinstance(default, float):
                v = float(v)
            elif isinstance(default, tuple):
                v = tuple(int(x) for x in v.replace(",", " ").split())
        kwargs[k] = v
    return cls(**kwargs)


def load_train_config(path, overrides: Optional[dict] = None) -> TrainConfig:
    values = parse_kv(Path(path).read_text()) if path else {}
    values.update(overrides or {})
    return coerce_fields(TrainConfig, values)


def patch_targets(model: CrossViewModel, images: torch.Tensor, normalize: bool) -> torch.Tensor:
    patches = model.image_to_patches(images)
    if normalize:
        mean = patches.mean(dim=-1, keepdim=True)
        var = patches.var(dim=-1, keepdim=True, unbiased=False)
        patches = (patches - mean) / (var + 1e-6).sqrt()
    return patches


def reconstruction_loss(pred: torch.Tensor, target: torch.Tensor, mask) -> torch.Tensor:
    """Mean over hidden patches of the per-patch pixel MSE.

    ``pred``/``target`` are patch values ``(B, hw, p*p*3)`` and ``mask`` a
    ``(B, hw)`` (or ``(hw,)``) boolean tensor / :class:`MaskSpec`.
    """
    if isinstance(mask, MaskSpec):
        mask = torch.from_numpy(mask.mask)
    mask = torch.as_tensor(mask, dtype=torch.bool)
    if pred.shape != target.shape:
        raise DimensionError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    if mask.dim() == 1:
        mask = mask.expand(pred.shape[0], -1)
    per_patch = (pred - target).square().mean(dim=-1)
    m = mask.to(per_patch.dtype)
    n = m.sum()
    if n == 0:
        warnings.warn("no masked patches; reconstruction loss defined as 0", RuntimeWarning)
        return per_patch.sum() * 0.0
    return (per_patch * m).sum() / n


def lr_at(step: int, cfg: TrainConfig) -> float:
    warm = max(1, int(round(cfg.warmup_frac * cfg.steps)))
    if step < warm:
        return cfg.learning_rate * (step + 1) / warm
    t = (step - warm) / max(1, cfg.steps - warm)
    return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * min(t, 1.0)))


def batch_pairs(cfg: TrainConfig, step: int, size: int) -> list[SyntheticPair]:
    jit = PhotometricJitter(cfg.jitter, cfg.jitter, cfg.jitter)
    return [make_pair(cfg.seed, step * cfg.batch_size + k, size, None, jit, cfg.data_kind,
                      cfg.data_dir or None) for k in range(cfg.batch_size)]


def to_tensor(images: Sequence[np.ndarray] | np.ndarray) -> torch.Tensor:
    """HWC image(s) -> ``(B, 3, H, W)`` float32 tensor."""
    arr = np.asarray(images) if isinstance(images, np.ndarray) else np.stack(list(images))
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2), dtype=np.float32))


class Trainer:
    """Owns the model, optimizer and step counter of one pretraining run."""

    def __init__(self, model: CrossViewModel, cfg: TrainConfig):
        self.model = model
        self.cfg = cfg
        self.step = 0
        self.optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate,
                                           betas=(cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay)

    def masks(self, step: int) -> np.ndarray:
        rng = np.random.default_rng([self.cfg.seed, step, 7])
        hw = self.model.config.num_tokens
        return np.stack([sample_mask(hw, self.cfg.mask_ratio, rng).mask for _ in range(self.cfg.batch_size)])

    def loss(self, pairs: Sequence[SyntheticPair], masks: np.ndarray) -> torch.Tensor:
        src = to_tensor([p.source for p in pairs])
        tgt = to_tensor([p.target for p in pairs])
        mask = torch.from_numpy(np.ascontiguousarray(masks))
        visible = torch.stack([torch.nonzero(~m).squeeze(-1) for m in mask])
        pred = self.model.forward_masked(src, tgt, visible)
        target = patch_targets(self.model, tgt, self.cfg.loss_kind == "normalized")
        return reconstruction_loss(pred, target, mask)

    def train_step(self, pairs: Optional[Sequence[SyntheticPair]] = None) -> dict:
        t0 = time.perf_counter()
        step = self.step
        pairs = pairs if pairs is not None else batch_pairs(self.cfg, step, self.model.config.image_size)
        for g in self.optimizer.param_groups:
            g["lr"] = lr_at(step, self.cfg)
        self.model.train()
        loss = self.loss(pairs, self.masks(step))
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite loss {loss.item()} at step {step}")
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        clip = self.cfg.grad_clip if self.cfg.grad_clip > 0 else float("inf")
        gnorm = torch.nn.utils.clip_grad_norm_(self.model.parameters(), clip)
        self.optimizer.step()
        self.step += 1
        return {"step": step, "loss": float(loss.detach()), "grad_norm": float(gnorm),
                "wall_ms": (time.perf_counter() - t0) * 1e3}

    def run(self, n_steps: Optional[int] = None, metrics_csv=None, log_every: int = 50) -> list[dict]:
        end = self.cfg.steps if n_steps is None else min(self.cfg.steps, self.step + n_steps)
        history = []
        writer = None
        fh = None
        if metrics_csv is not None:
            path = Path(metrics_csv)
            path.parent.mkdir(parents=True, exist_ok=True)
            new = not path.exists() or path.stat().st_size == 0
            fh = open(path, "a", newline="")
            writer = csv.writer(fh)
            if new:
                writer.writerow(["step", "loss", "grad_norm", "wall_ms"])
        try:
            while self.step < end:
                m = self.train_step()
                history.append(m)
                if writer:
                    writer.writerow([m["step"], f"{m['loss']:.6g}", f"{m['grad_norm']:.6g}", f"{m['wall_ms']:.1f}"])
                if log_every and m["step"] % log_every == 0:
                    logger.info("step %d loss %.4f gnorm %.3f", m["step"], m["loss"], m["grad_norm"])
        finally:
            if fh:
                fh.close()
        return history

    # -- persistence ---------------------------------------------------------

    def save(self, path) -> None:
        save_checkpoint(self.model, path, self.optimizer, self.step, self.cfg)

    @classmethod
    def resume(cls, path, cfg: Optional[TrainConfig] = None) -> "Trainer":
        ckpt = load_arrays(path)
        model = model_from_checkpoint(ckpt)
        saved = ckpt.meta.get("train_config")
        cfg = cfg or (TrainConfig(**saved) if saved else TrainConfig())
        trainer = cls(model, cfg)
        restore_optimizer(trainer.optimizer, dict(model.named_parameters()), ckpt)
        trainer.step = int(ckpt.meta.get("step", 0))
        return trainer


def train_step(trainer: Trainer, pairs: Optional[Sequence[SyntheticPair]] = None) -> dict:
    return trainer.train_step(pairs)


def save_checkpoint(model: CrossViewModel, path, optimizer=None, step: int = 0,
                    train_cfg: Optional[TrainConfig] = None, extra_meta: Optional[dict] = None) -> None:
    arrays = {f"model/{k}": v for k, v in model.state_dict().items()}
    if optimizer is not None:
        names = {p: n for n, p in model.named_parameters()}
        arrays.update(optimizer_arrays(optimizer, names))
    meta = {"kind": "crossview-model", "model_config": model.config.to_dict(), "step": step}
    if train_cfg is not None:
        meta["train_config"] = asdict(train_cfg)
    meta.update(extra_meta or {})
    save_arrays(path, arrays, meta)


def model_from_checkpoint(ckpt: Checkpoint, config: Optional[ModelConfig] = None) -> CrossViewModel:
    if ckpt.meta.get("kind") != "crossview-model":
        raise CheckpointError(f"not a model checkpoint (kind={ckpt.meta.get('kind')!r})")
    found = ckpt.meta["model_config"]
    if config is not None:
        check_config(found, config.to_dict())
    model = CrossViewModel(ModelConfig.from_dict(found))
    state = ckpt.tensors("model/")
    missing = set(model.state_dict()) ^ set(state)
    if missing:
        raise CheckpointError(f"entry set differs from model: {sorted(missing)[:5]}")
    for k, v in state.items():
        if tuple(v.shape) != tuple(model.state_dict()[k].shape):
            raise ConfigMismatchError(f"shape mismatch for {k}: {tuple(v.shape)}")
    model.load_state_dict(state)
    model.eval()
    return model


def load_checkpoint(path, config: Optional[ModelConfig] = None) -> CrossViewModel:
    return model_from_checkpoint(load_arrays(path), config)


def pretrain(model_cfg: ModelConfig, cfg: TrainConfig, metrics_csv=None) -> Trainer:
    trainer = Trainer(init_params(model_cfg), cfg)
    trainer.run(metrics_csv=metrics_csv)
    return trainer
