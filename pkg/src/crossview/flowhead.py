"""Learned matching on top of a frozen cross-view backbone.

The head refines the per-layer cross-attention costs with a small
transformer that attends along the target axis only, fuses both input
orders, and upsamples the cost along the target axis guided by encoder
features.  Every learned path is zero-initialised on top of a residual, so
an untrained head reproduces the zero-shot flow.

A second mode fine-tunes the whole backbone through the (differentiable)
zero-shot pipeline.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_arrays, save_arrays
from .costvol import (CostOptions, CostVolume, Extraction, attention_cost, build_cost, extract, grid_coords,
                      resize_images, soft_argmax_coords, soft_argmax_flow, suppress_register, upsample_flow)
from .datagen import SyntheticPair
from .errors import CheckpointError, ConfigurationError, ContractError, DimensionError, MetricError, TrainingError
from .model import CrossViewModel
from .pretrain import to_tensor

logger = logging.getLogger(__name__)


@dataclass
class HeadConfig:
    n_agg_blocks: int = 4
    compressed_dim: int = 128
    hidden_dim: int = 32
    n_heads: int = 4
    window_size: int = 4
    upsample_stages: int = 2
    guide_layers: tuple = (3, 1)  # 4th then 2nd encoder block (0-based)
    guide_dim: int = 8
    temperature: float = 0.02
    loss_kind: str = "epe"
    stage1_epochs: int = 30
    stage2_epochs: int = 10
    stage1_lr: float = 2e-4
    stage2_lr: float = 1e-4
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        self.guide_layers = tuple(int(g) for g in self.guide_layers)
        if self.n_agg_blocks < 1:
            raise ConfigurationError("n_agg_blocks must be >= 1")
        if self.upsample_stages not in (1, 2):
            raise ConfigurationError("upsample_stages must be 1 or 2")
        if len(self.guide_layers) < self.upsample_stages:
            raise ConfigurationError("one guide layer per upsampling stage is required")
        if self.temperature <= 0:
            raise ConfigurationError("temperature must be > 0")
        if self.loss_kind not in ("epe", "l1"):
            raise ConfigurationError(f"unknown loss_kind {self.loss_kind!r}")
        if self.hidden_dim % self.n_heads:
            raise ConfigurationError("hidden_dim must be divisible by n_heads")


# -- building blocks ------------------------------------------------------------

class Compress(nn.Module):
    """Linear ``d -> d'`` projection of decoder features."""

    def __init__(self, d: int, d_out: int):
        super().__init__()
        if d_out > d:
            raise ConfigurationError(f"compressed_dim {d_out} exceeds feature dim {d}")
        self.proj = nn.Linear(d, d_out, bias=False)
        with torch.no_grad():
            self.proj.weight.zero_()
            self.proj.weight[:, :d_out] += torch.eye(d_out)

    def forward(self, x):
        return self.proj(x)


def compress_decoder_feature(d: torch.Tensor, module: Compress) -> torch.Tensor:
    return module(d)


class _Block(nn.Module):
    def __init__(self, dim, n_heads):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, n_heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))

    def forward(self, x):
        y = self.norm1(x)
        x = x + self.attn(y, y, y, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


def _windows(x: torch.Tensor, h: int, w: int, win: int) -> torch.Tensor:
    n, _, c = x.shape
    x = x.view(n, h // win, win, w // win, win, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(-1, win * win, c)


def _unwindows(x: torch.Tensor, n: int, h: int, w: int, win: int) -> torch.Tensor:
    c = x.shape[-1]
    x = x.view(n, h // win, w // win, win, win, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(n, h * w, c)


class CostAggregator(nn.Module):
    """Transformer over the target axis, one sequence per source column."""

    def __init__(self, n_layers: int, feat_dim: int, cfg: HeadConfig):
        super().__init__()
        self.window = cfg.window_size
        self.cost_embed = nn.Linear(n_layers, cfg.hidden_dim)
        self.feat_embed = nn.Linear(feat_dim, cfg.hidden_dim)
        self.local = nn.ModuleList(_Block(cfg.hidden_dim, cfg.n_heads) for _ in range(cfg.n_agg_blocks))
        self.glob = nn.ModuleList(_Block(cfg.hidden_dim, cfg.n_heads) for _ in range(cfg.n_agg_blocks))
        self.norm = nn.LayerNorm(cfg.hidden_dim)
        self.out = nn.Linear(cfg.hidden_dim, 1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, costs: torch.Tensor, feats: torch.Tensor, grid: tuple[int, int]) -> torch.Tensor:
        """``costs (B, L, N_t, N_s)``, ``feats (B, N_t, d')`` -> ``(B, N_t, N_s)``."""
        b, n_layers, n_t, n_s = costs.shape
        h, w = grid
        if h * w != n_t:
            raise DimensionError(f"grid {grid} does not hold {n_t} target tokens")
        if h % self.window or w % self.window:
            raise ConfigurationError(f"window {self.window} does not divide grid {grid}")
        if feats.shape[:2] != (b, n_t):
            raise DimensionError(f"features {tuple(feats.shape)} do not match costs {tuple(costs.shape)}")
        base = costs.mean(dim=1)
        # per-row standardisation keeps the embedding scale-free and source-permutation equivariant
        mu = costs.mean(dim=-1, keepdim=True)
        sd = costs.std(dim=-1, keepdim=True) + 1e-6
        z = ((costs - mu) / sd).permute(0, 3, 2, 1)  # (B, N_s, N_t, L)
        x = self.cost_embed(z) + self.feat_embed(feats)[:, None]
        x = x.reshape(b * n_s, n_t, -1)
        for local, glob in zip(self.local, self.glob):
            x = _unwindows(local(_windows(x, h, w, self.window)), b * n_s, h, w, self.window)
            x = glob(x)
        delta = self.out(self.norm(x)).view(b, n_s, n_t).transpose(1, 2)
        return base + delta


def aggregate(c_att, d_feat: torch.Tensor, module: CostAggregator, grid=None) -> CostVolume:
    costs = _stack_costs(c_att)
    grid = grid or (c_att[0].grid_shape if isinstance(c_att, (list, tuple)) else _sq(costs.shape[-2]))
    return CostVolume(module(costs, d_feat, grid), tuple(grid), "none", "cross_attention")


def _sq(n):
    s = int(round(math.sqrt(n)))
    return s, s


def _stack_costs(c) -> torch.Tensor:
    if isinstance(c, CostVolume):
        return c.scores.unsqueeze(1)
    if isinstance(c, (list, tuple)):
        return torch.stack([v.scores if isinstance(v, CostVolume) else v for v in c], dim=1)
    return c if c.dim() == 4 else c.unsqueeze(1)


def reciprocal_aggregate(c_att, c_att_swap, d_t: torch.Tensor, d_s: torch.Tensor,
                         module: CostAggregator, grid=None) -> CostVolume:
    """``T(C, D_t) + T(C_swap, D_s)^T`` with one shared aggregator."""
    a, b = _stack_costs(c_att), _stack_costs(c_att_swap)
    if a.shape != b.shape or a.shape[-1] != a.shape[-2]:
        raise DimensionError(f"cost shapes {tuple(a.shape)} and {tuple(b.shape)} cannot be fused")
    grid = grid or _sq(a.shape[-2])
    fwd = module(a, d_t, grid)
    bwd = module(b, d_s, grid)
    return CostVolume(fwd + bwd.transpose(-2, -1), tuple(grid), "none", "cross_attention")


class UpsampleStage(nn.Module):
    """2x target-axis upsampling: nearest residual + guided transposed conv.

    Every path is bias-free and linear in the cost, so source columns never
    mix and a zero column stays zero.
    """

    def __init__(self, guide_in: int, guide_dim: int):
        super().__init__()
        self.guide_proj = nn.Linear(guide_in, guide_dim)
        self.deconv = nn.ConvTranspose2d(1 + guide_dim, 1, kernel_size=4, stride=2, padding=1, bias=False)
        nn.init.zeros_(self.deconv.weight)

    def forward(self, cost: torch.Tensor, grid: tuple[int, int], guide: torch.Tensor,
                guide_grid: tuple[int, int]) -> torch.Tensor:
        """``cost (B, h*w, N_s)``, ``guide (B, gh*gw, C)`` -> ``(B, 4*h*w, N_s)``."""
        b, n_t, n_s = cost.shape
        h, w = grid
        gh, gw = guide_grid
        if h * w != n_t:
            raise DimensionError(f"grid {grid} does not hold {n_t} target rows")
        if guide.shape[0] != b or guide.shape[1] != gh * gw or h % gh or w % gw:
            raise DimensionError(f"guide {tuple(guide.shape)} on grid {guide_grid} cannot guide grid {grid}")
        g = self.guide_proj(guide).transpose(1, 2).reshape(b, -1, gh, gw)
        if (gh, gw) != (h, w):
            g = F.interpolate(g, size=(h, w), mode="bilinear", align_corners=False)
        col = cost.transpose(1, 2).reshape(b, n_s, 1, h, w)
        x = torch.cat([col, col * g[:, None]], dim=2).reshape(b * n_s, -1, h, w)
        up = F.interpolate(col.reshape(b * n_s, 1, h, w), scale_factor=2, mode="nearest") + self.deconv(x)
        return up.reshape(b, n_s, 4 * h * w).transpose(1, 2)


def upsample_stage(cost: CostVolume, guide: torch.Tensor, module: UpsampleStage, guide_grid=None) -> CostVolume:
    gg = guide_grid or _sq(guide.shape[1])
    out = module(cost.scores, cost.grid_shape, guide, gg)
    h, w = cost.grid_shape
    return replace(cost, scores=out, grid_shape=(2 * h, 2 * w))


def fine_centers(coarse: tuple[int, int], fine: tuple[int, int]) -> torch.Tensor:
    """Fine-cell centres in coarse token units, ``(fh*fw, 2)``."""
    sy, sx = fine[0] / coarse[0], fine[1] / coarse[1]
    c = grid_coords(*fine)
    return torch.stack([(c[:, 0] + 0.5) / sx - 0.5, (c[:, 1] + 0.5) / sy - 0.5], dim=-1)


def head_flow(cost: CostVolume, temperature: float, src_grid: tuple[int, int], patch_size: int,
              out_size: Optional[tuple[int, int]] = None) -> torch.Tensor:
    """Soft-argmax flow of an upsampled cost, in pixels, ``(B, 2, H, W)``.

    Rows live on the fine target grid, columns on the coarse source grid;
    fine-cell centres are expressed in source token units before
    differencing.
    """
    fh, fw = cost.grid_shape
    matched = soft_argmax_coords(cost.scores, temperature, src_grid)
    flow = (matched - fine_centers(src_grid, (fh, fw)).to(matched.dtype)) * patch_size
    flow = flow.transpose(1, 2).reshape(-1, 2, fh, fw)
    if out_size is not None and tuple(out_size) != (fh, fw):
        flow = F.interpolate(flow, size=tuple(out_size), mode="bilinear", align_corners=False)
    return flow


def regression_loss(pred: torch.Tensor, gt: torch.Tensor, valid: torch.Tensor, kind: str = "epe") -> torch.Tensor:
    """Mean end-point error (or L1) over valid pixels of ``(B, 2, H, W)`` flows."""
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {tuple(pred.shape)} vs ground truth {tuple(gt.shape)}")
    valid = valid.bool()
    if not valid.any():
        raise MetricError("empty valid mask")
    d = pred - gt
    if kind == "epe":
        per_px = torch.linalg.vector_norm(d, dim=1)
    elif kind == "l1":
        per_px = d.abs().sum(dim=1)
    else:
        raise ConfigurationError(f"unknown loss kind {kind!r}")
    return per_px[valid].mean()


# -- full head ------------------------------------------------------------------

@dataclass
class HeadInputs:
    """Frozen-backbone quantities the head consumes (cacheable per pair)."""

    costs: torch.Tensor  # (B, L, N, N) forward, register suppressed
    costs_swap: torch.Tensor  # (B, L, N, N)
    feat_t: torch.Tensor  # (B, N, d) final decoder target stream
    feat_s: torch.Tensor  # (B, N, d) final decoder source stream (swapped run)
    guides: list  # per stage (B, N, enc_dim)
    grid: tuple

    def index(self, idx) -> "HeadInputs":
        return HeadInputs(self.costs[idx], self.costs_swap[idx], self.feat_t[idx], self.feat_s[idx],
                          [g[idx] for g in self.guides], self.grid)

    @staticmethod
    def cat(items: Sequence["HeadInputs"]) -> "HeadInputs":
        return HeadInputs(torch.cat([i.costs for i in items]), torch.cat([i.costs_swap for i in items]),
                          torch.cat([i.feat_t for i in items]), torch.cat([i.feat_s for i in items]),
                          [torch.cat(g) for g in zip(*[i.guides for i in items])], items[0].grid)

    def to(self, dtype) -> "HeadInputs":
        return HeadInputs(self.costs.to(dtype), self.costs_swap.to(dtype), self.feat_t.to(dtype),
                          self.feat_s.to(dtype), [g.to(dtype) for g in self.guides], self.grid)


def head_inputs(ex: Extraction, guide_layers: Sequence[int], suppress: bool = True) -> HeadInputs:
    def layer_costs(recs):
        out = []
        for c in attention_cost(recs, "all", "QK"):
            if c.has_register:
                c = suppress_register(c) if suppress else replace(c, scores=c.scores[..., :-1], has_register=False)
            out.append(c.scores)
        return torch.stack(out, dim=1)

    return HeadInputs(layer_costs(ex.records), layer_costs(ex.swap_records), ex.final_t, ex.final_s,
                      [ex.enc_t[g] for g in guide_layers], ex.grid_shape)


class FlowHead(nn.Module):
    def __init__(self, model_config, cfg: HeadConfig = HeadConfig()):
        super().__init__()
        self.cfg = cfg
        self.model_config = model_config
        for g in cfg.guide_layers:
            if not 0 <= g < model_config.enc_layers:
                raise ConfigurationError(f"guide layer {g} outside encoder depth {model_config.enc_layers}")
        self.compress = Compress(model_config.dec_dim, cfg.compressed_dim)
        self.aggregator = CostAggregator(model_config.dec_layers, cfg.compressed_dim, cfg)
        self.stages = nn.ModuleList(UpsampleStage(model_config.enc_dim, cfg.guide_dim)
                                    for _ in range(cfg.upsample_stages))

    def costs(self, inp: HeadInputs) -> tuple[CostVolume, CostVolume]:
        """Aggregated coarse cost and its target-axis upsampled version."""
        fused = reciprocal_aggregate(inp.costs, inp.costs_swap, self.compress(inp.feat_t),
                                     self.compress(inp.feat_s), self.aggregator, inp.grid)
        up = fused
        for stage, guide in zip(self.stages, inp.guides):
            up = upsample_stage(up, guide, stage, inp.grid)
        return fused, up

    def forward(self, inp: HeadInputs, temperature: Optional[float] = None,
                out_size: Optional[tuple[int, int]] = None) -> torch.Tensor:
        """Pixel flow ``(B, 2, H, W)`` at ``out_size`` (default: model resolution).

        The coarse soft-argmax flow is upsampled exactly as in zero-shot
        matching; the upsampled cost contributes the residual between its
        fine matches and the nearest-upsampled coarse matches.
        """
        tau = temperature or self.cfg.temperature
        size = self.model_config.image_size
        p = self.model_config.patch_size
        grid = inp.grid
        fused, fine = self.costs(inp)
        coarse_flow = upsample_flow(soft_argmax_flow(fused, tau, grid), (size, size))
        m_coarse = soft_argmax_coords(fused.scores, tau, grid)
        m_fine = soft_argmax_coords(fine.scores, tau, grid)
        fh, fw = fine.grid_shape
        b = m_coarse.shape[0]
        m_coarse = m_coarse.transpose(1, 2).reshape(b, 2, *grid)
        m_fine = m_fine.transpose(1, 2).reshape(b, 2, fh, fw)
        resid = m_fine - F.interpolate(m_coarse, size=(fh, fw), mode="nearest")
        resid = F.interpolate(resid, size=(size, size), mode="bilinear", align_corners=False) * p
        flow = coarse_flow + resid
        if out_size is not None and tuple(out_size) != (size, size):
            flow = upsample_flow(flow, tuple(out_size))
        return flow


# -- training -------------------------------------------------------------------

def pairs_to_batch(pairs: Sequence[SyntheticPair], size: int):
    src = resize_images(to_tensor([p.source for p in pairs]), size)
    tgt = resize_images(to_tensor([p.target for p in pairs]), size)
    gt = torch.from_numpy(np.stack([p.gt_flow.stack().transpose(2, 0, 1) for p in pairs]))
    valid = torch.from_numpy(np.stack([p.gt_flow.valid for p in pairs]))
    return src, tgt, gt, valid


@torch.no_grad()
def cache_inputs(model: CrossViewModel, pairs: Sequence[SyntheticPair], cfg: HeadConfig,
                 chunk: int = 16) -> HeadInputs:
    model.eval()
    out = []
    for i in range(0, len(pairs), chunk):
        src, tgt, _, _ = pairs_to_batch(pairs[i:i + chunk], model.config.image_size)
        out.append(head_inputs(extract(model, tgt, src), cfg.guide_layers))
    return HeadInputs.cat(out)


def _fingerprint(model: nn.Module) -> list[torch.Tensor]:
    return [p.detach().clone() for p in model.parameters()]


def _check_frozen(model: nn.Module, before: list[torch.Tensor]) -> None:
    for p, q in zip(model.parameters(), before):
        if not torch.equal(p.detach(), q):
            raise ContractError("backbone parameters changed while training the head")


def train_head(model: CrossViewModel, head: FlowHead, pairs: Sequence[SyntheticPair],
               cfg: Optional[HeadConfig] = None, log_every: int = 0) -> list[dict]:
    """Two-stage regression training of ``head`` with the backbone frozen.

    Backbone outputs are computed once per pair and cached, so the backbone
    never sees a gradient.  Returns per-epoch mean losses.
    """
    cfg = cfg or head.cfg
    for p in model.parameters():
        p.requires_grad_(False)
    before = _fingerprint(model)
    size = model.config.image_size
    cache = cache_inputs(model, pairs, cfg)
    _, _, gt, valid = pairs_to_batch(pairs, size)
    opt = torch.optim.AdamW(head.parameters(), lr=cfg.stage1_lr, weight_decay=1e-4)
    gen = torch.Generator().manual_seed(cfg.seed)
    history = []
    schedule = [(cfg.stage1_lr, cfg.stage1_epochs), (cfg.stage2_lr, cfg.stage2_epochs)]
    epoch = 0
    head.train()
    for lr, n_epochs in schedule:
        for g in opt.param_groups:
            g["lr"] = lr
        for _ in range(n_epochs):
            order = torch.randperm(len(pairs), generator=gen)
            total, count = 0.0, 0
            for i in range(0, len(pairs), cfg.batch_size):
                idx = order[i:i + cfg.batch_size]
                pred = head(cache.index(idx))
                loss = regression_loss(pred, gt[idx], valid[idx], cfg.loss_kind)
                if not torch.isfinite(loss):
                    raise TrainingError(f"non-finite head loss in epoch {epoch}")
                opt.zero_grad(set_to_none=True)
                loss.backward()
                if lr > 0:
                    opt.step()
                total += float(loss.detach()) * len(idx)
                count += len(idx)
            history.append({"epoch": epoch, "lr": lr, "loss": total / count})
            if log_every and epoch % log_every == 0:
                logger.info("head epoch %d loss %.4f", epoch, total / count)
            epoch += 1
    head.eval()
    _check_frozen(model, before)
    return history


@torch.no_grad()
def predict_head(model: CrossViewModel, head: FlowHead, source, target, temperature=None) -> torch.Tensor:
    from .costvol import _as_batch
    src, tgt = _as_batch(source), _as_batch(target)
    size = model.config.image_size
    ex = extract(model, resize_images(tgt, size), resize_images(src, size))
    head.eval()
    return head(head_inputs(ex, head.cfg.guide_layers), temperature, tuple(tgt.shape[-2:]))


def save_head(head: FlowHead, path) -> None:
    meta = {"kind": "crossview-head", "head_config": asdict(head.cfg),
            "model_config": head.model_config.to_dict()}
    save_arrays(path, {f"head/{k}": v for k, v in head.state_dict().items()}, meta)


def load_head(path, model_config=None) -> FlowHead:
    from .model import ModelConfig
    from .checkpoint import check_config
    ckpt = load_arrays(path)
    if ckpt.meta.get("kind") != "crossview-head":
        raise CheckpointError(f"not a head checkpoint (kind={ckpt.meta.get('kind')!r})")
    if model_config is not None:
        check_config(ckpt.meta["model_config"], model_config.to_dict(), "backbone")
    head = FlowHead(ModelConfig.from_dict(ckpt.meta["model_config"]), HeadConfig(**ckpt.meta["head_config"]))
    head.load_state_dict(ckpt.tensors("head/"))
    head.eval()
    return head


# -- end-to-end fine-tuning -------------------------------------------------------

@dataclass
class FinetuneConfig:
    steps: int = 200
    batch_size: int = 8
    learning_rate: float = 1e-5
    temperature: float = 0.02
    loss_kind: str = "epe"
    seed: int = 0
    options: CostOptions = field(default_factory=CostOptions)


def differentiable_flow(model: CrossViewModel, src: torch.Tensor, tgt: torch.Tensor,
                        options: CostOptions, temperature: float) -> torch.Tensor:
    """Zero-shot flow with gradients flowing into the backbone."""
    size = model.config.image_size
    ex = extract(model, resize_images(tgt, size), resize_images(src, size))
    cost = build_cost(ex, options)
    flow = upsample_flow(soft_argmax_flow(cost, temperature), (size, size))
    if tgt.shape[-2:] != (size, size):
        flow = upsample_flow(flow, tuple(tgt.shape[-2:]))
    return flow


def finetune_mode(model: CrossViewModel, pairs: Sequence[SyntheticPair],
                  cfg: FinetuneConfig = FinetuneConfig()) -> list[dict]:
    """Fine-tune every backbone parameter through the zero-shot pipeline."""
    for p in model.parameters():
        p.requires_grad_(True)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate, weight_decay=0.0)
    rng = np.random.default_rng([cfg.seed, 11])
    history = []
    model.train()
    for step in range(cfg.steps):
        idx = rng.choice(len(pairs), size=min(cfg.batch_size, len(pairs)), replace=False)
        src, tgt, gt, valid = pairs_to_batch([pairs[i] for i in idx], model.config.image_size)
        pred = differentiable_flow(model, src, tgt, cfg.options, cfg.temperature)
        loss = regression_loss(pred, gt, valid, cfg.loss_kind)
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite fine-tuning loss at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        history.append({"step": step, "loss": float(loss.detach())})
    model.eval()
    return history
