"""Matching costs from a cross-view completion model and zero-shot flow.

Cost volumes are ``(B, N_t, N_s)`` tensors: row ``i`` is a target query
token, column ``j`` a source token (row-major grid order).  Three cost
sources are available: encoder-feature correlation, decoder-feature
correlation and the pre-softmax cross-attention logits.  Flow fields are
``(B, 2, H, W)`` tensors (x then y) pointing from target to source.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F

from .datagen import FlowField
from .errors import ConfigurationError, ContractError, DimensionError, RangeError, ScoreError
from .model import AttentionRecord, CrossViewModel, TokenGrid

SOURCE_KINDS = ("encoder_corr", "decoder_corr", "cross_attention")
PAIRINGS = ("QK", "QQ", "KK", "VV")
NORMALIZATIONS = ("none", "l2", "softmax")


@dataclass
class CostVolume:
    scores: torch.Tensor  # (B, N_t, N_s [+1 register])
    grid_shape: tuple[int, int]
    normalized: str = "none"
    source_kind: str = "cross_attention"
    has_register: bool = False

    def transpose(self) -> "CostVolume":
        if self.has_register:
            raise ContractError("cannot transpose a cost volume that still holds a register column")
        return replace(self, scores=self.scores.transpose(-2, -1))


@dataclass
class CostOptions:
    source_kind: str = "cross_attention"
    layer_select: Union[str, Sequence[int]] = "all"
    pairing: str = "QK"
    normalize: Optional[str] = None  # None -> l2 for feature correlations, none for attention
    reciprocity: bool = True
    suppress_register: bool = True
    temperature: float = 1e-4
    dense_zoom_in: bool = False
    zoom_window: Optional[int] = None
    zoom_stride: Optional[int] = None
    zoom_margin: float = 1.0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigurationError(f"temperature must be > 0, got {self.temperature}")
        if self.source_kind not in SOURCE_KINDS:
            raise ConfigurationError(f"unknown source_kind {self.source_kind!r}")
        if self.pairing not in PAIRINGS:
            raise ConfigurationError(f"unknown pairing {self.pairing!r}")
        if self.normalize is not None and self.normalize not in NORMALIZATIONS:
            raise ConfigurationError(f"unknown normalization {self.normalize!r}")

    @property
    def norm(self) -> str:
        if self.normalize is not None:
            return self.normalize
        return "none" if self.source_kind == "cross_attention" else "l2"

    def fingerprint(self) -> str:
        sel = self.layer_select if isinstance(self.layer_select, str) else ",".join(map(str, self.layer_select))
        return (f"{self.source_kind}|layers={sel}|pair={self.pairing}|norm={self.norm}|recip={int(self.reciprocity)}"
                f"|reg={int(self.suppress_register)}|tau={self.temperature:g}|zoom={int(self.dense_zoom_in)}")


# -- cost construction --------------------------------------------------------

def _tokens(x) -> torch.Tensor:
    t = x.tokens if isinstance(x, TokenGrid) else x
    return t if t.dim() == 3 else t.unsqueeze(0)


def feature_correlation(d_t, d_s, normalize: str = "l2", grid_shape=None,
                        source_kind: str = "encoder_corr") -> CostVolume:
    """``scores(i, j) = D_t(i) . D_s(j)``, optionally on unit vectors or row-softmaxed."""
    a, b = _tokens(d_t), _tokens(d_s)
    if a.shape[0] != b.shape[0] or a.shape[-1] != b.shape[-1] or a.shape[1] != b.shape[1]:
        raise DimensionError(f"feature grids differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    if normalize == "l2":
        a, b = F.normalize(a, dim=-1), F.normalize(b, dim=-1)
    scores = a @ b.transpose(-2, -1)
    if normalize == "softmax":
        scores = scores.softmax(dim=-1)
    if grid_shape is None:
        grid_shape = d_t.grid_shape if isinstance(d_t, TokenGrid) else _square(a.shape[1])
    return CostVolume(scores, tuple(grid_shape), normalize, source_kind)


def _square(n: int) -> tuple[int, int]:
    s = int(round(n ** 0.5))
    if s * s != n:
        raise DimensionError(f"{n} tokens do not form a square grid")
    return s, s


def _select(n_layers: int, layer_select) -> list[int]:
    if isinstance(layer_select, str):
        if layer_select.lower() != "all":
            raise ConfigurationError(f"layer_select must be 'all' or indices, got {layer_select!r}")
        return list(range(n_layers))
    idx = [int(i) for i in layer_select]
    for i in idx:
        if not 0 <= i < n_layers:
            raise RangeError(f"layer {i} out of range [0, {n_layers})")
    return idx


def _pair_dot(a: torch.Tensor, b: torch.Tensor, normalize: str) -> torch.Tensor:
    """Head-averaged ``a . b^T / sqrt(dh)`` for ``(B, heads, N, dh)`` tensors."""
    if normalize == "l2":
        a, b = F.normalize(a, dim=-1), F.normalize(b, dim=-1)
        return (a @ b.transpose(-2, -1)).mean(dim=1)
    return (a @ b.transpose(-2, -1)).mean(dim=1) / a.shape[-1] ** 0.5


def attention_cost(records: Sequence[AttentionRecord], layer_select="all", pairing: str = "QK",
                   swap_records: Optional[Sequence[AttentionRecord]] = None,
                   normalize: str = "none", grid_shape=None) -> list[CostVolume]:
    """Per-layer cross-attention costs averaged over heads.

    ``QK`` uses the recorded logits (register column kept for later
    suppression).  ``QQ``/``KK``/``VV`` pair the target-stream projection of
    one run with the source-stream projection of the swapped run and drop
    any register entries.  ``normalize='softmax'`` returns head-averaged
    attention probabilities; ``'l2'`` uses cosine similarity of projections.
    """
    if not records:
        raise ContractError("no attention records")
    layers = _select(len(records), layer_select)
    if pairing != "QK" and swap_records is None:
        raise ContractError(f"pairing {pairing} needs the swapped-run records")
    out = []
    for l in layers:
        rec = records[l]
        reg = rec.has_register
        n_t = rec.logits.shape[-2]
        gs = grid_shape or _square(n_t)
        if pairing == "QK":
            if normalize == "none":
                scores = rec.logits.mean(dim=1)
            elif normalize == "softmax":
                scores = rec.probs.mean(dim=1)
            else:
                scores = _pair_dot(rec.q, rec.k, "l2")
            out.append(CostVolume(scores, gs, normalize, "cross_attention", reg))
            continue
        srec = swap_records[l]
        # forward run: target is the query stream and source the memory;
        # swapped run: source is the query stream and target the memory.
        if pairing == "QQ":
            a, b = rec.q, srec.q
        elif pairing == "KK":
            a, b = srec.k, rec.k
        else:
            a, b = srec.v, rec.v
        a, b = a[:, :, :n_t], b[:, :, :n_t]
        scores = _pair_dot(a, b, "l2" if normalize == "l2" else "none")
        if normalize == "softmax":
            scores = scores.softmax(dim=-1)
        out.append(CostVolume(scores, gs, normalize, "cross_attention", False))
    return out


def suppress_register(cost: CostVolume, register_col: int = -1, drop: bool = True) -> CostVolume:
    """Overwrite the register column with each row's minimum, then drop it."""
    s = cost.scores
    n = s.shape[-1]
    col = register_col if register_col >= 0 else n + register_col
    if not 0 <= col < n:
        raise RangeError(f"register column {register_col} out of range for {n} columns")
    row_min = s.min(dim=-1, keepdim=True).values
    s = torch.cat([s[..., :col], row_min, s[..., col + 1:]], dim=-1)
    if drop:
        s = torch.cat([s[..., :col], s[..., col + 1:]], dim=-1)
        return replace(cost, scores=s, has_register=False)
    return replace(cost, scores=s)


def _layer_mean(costs: Sequence[CostVolume]) -> torch.Tensor:
    return torch.stack([c.scores for c in costs]).mean(dim=0)


def fuse_reciprocal(c_layers: Sequence[CostVolume], c_swap_layers: Optional[Sequence[CostVolume]]) -> CostVolume:
    """``mean_l C^l + (mean_l C^l_swap)^T``; without swap costs, just the layer mean."""
    if not c_layers:
        raise ContractError("no cost volumes to fuse")
    tags = {c.normalized for c in c_layers} | {c.normalized for c in (c_swap_layers or ())}
    if len(tags) != 1:
        raise ContractError(f"mixed normalization tags {sorted(tags)}")
    if any(c.has_register for c in list(c_layers) + list(c_swap_layers or ())):
        raise ContractError("suppress the register column before fusing")
    fwd = _layer_mean(c_layers)
    if c_swap_layers is None:
        return replace(c_layers[0], scores=fwd)
    if len(c_swap_layers) != len(c_layers):
        raise ContractError(f"{len(c_layers)} forward vs {len(c_swap_layers)} swapped layers")
    bwd = _layer_mean(c_swap_layers)
    if fwd.shape != bwd.transpose(-2, -1).shape:
        raise DimensionError(f"cannot fuse {tuple(fwd.shape)} with transpose of {tuple(bwd.shape)}")
    return replace(c_layers[0], scores=fwd + bwd.transpose(-2, -1))


# -- flow from costs ----------------------------------------------------------

def grid_coords(h: int, w: int, dtype=torch.float32) -> torch.Tensor:
    """``(h*w, 2)`` (x, y) coordinates of a row-major grid."""
    ys, xs = torch.meshgrid(torch.arange(h, dtype=dtype), torch.arange(w, dtype=dtype), indexing="ij")
    return torch.stack([xs.reshape(-1), ys.reshape(-1)], dim=-1)


def soft_argmax_coords(scores: torch.Tensor, temperature: float, src_grid: tuple[int, int]) -> torch.Tensor:
    """Expected source (x, y) per target row: ``(B, N_t, 2)``."""
    if temperature <= 0:
        raise ConfigurationError(f"temperature must be > 0, got {temperature}")
    p = (scores / temperature).softmax(dim=-1)
    return p @ grid_coords(*src_grid, dtype=scores.dtype)


def soft_argmax_flow(cost: CostVolume | torch.Tensor, temperature: float = 1e-4,
                     grid_shape=None) -> torch.Tensor:
    """Token-unit flow ``(B, 2, h, w)``: expected match minus query position."""
    scores = cost.scores if isinstance(cost, CostVolume) else cost
    if scores.dim() == 2:
        scores = scores.unsqueeze(0)
    gs = grid_shape or (cost.grid_shape if isinstance(cost, CostVolume) else _square(scores.shape[-2]))
    if isinstance(cost, CostVolume) and cost.has_register:
        raise ContractError("cost still holds a register column")
    src_grid = _square(scores.shape[-1]) if scores.shape[-1] != gs[0] * gs[1] else gs
    matched = soft_argmax_coords(scores, temperature, src_grid)
    flow = matched - grid_coords(*gs, dtype=scores.dtype)
    return flow.transpose(1, 2).reshape(scores.shape[0], 2, *gs)


def upsample_flow(flow: torch.Tensor, out_size: tuple[int, int], valid: Optional[torch.Tensor] = None):
    """Bilinear resize of ``(B, 2, h, w)`` flow, displacements scaled per axis.

    Returns the flow, or ``(flow, valid)`` when a ``(B, h, w)`` mask is given
    (mask resized nearest-neighbour).
    """
    h, w = flow.shape[-2:]
    oh, ow = out_size
    if (oh, ow) == (h, w):
        out = flow.clone()
    else:
        out = F.interpolate(flow, size=(oh, ow), mode="bilinear", align_corners=False)
        out = out * torch.tensor([ow / w, oh / h], dtype=flow.dtype).view(1, 2, 1, 1)
    if valid is None:
        return out
    v = F.interpolate(valid[:, None].float(), size=(oh, ow), mode="nearest")[:, 0] > 0.5
    return out, v


# -- warping and photometric scores ---------------------------------------------

def bilinear_sample(img: torch.Tensor, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Sample ``(B, C, H, W)`` at pixel coords ``x, y`` ``(B, H', W')``; border clamp."""
    b, c, h, w = img.shape
    x = x.clamp(0, w - 1)
    y = y.clamp(0, h - 1)
    x0 = x.floor().clamp(max=w - 1)
    y0 = y.floor().clamp(max=h - 1)
    wx = (x - x0).unsqueeze(1)
    wy = (y - y0).unsqueeze(1)
    x0l, y0l = x0.long(), y0.long()
    x1l, y1l = (x0l + 1).clamp(max=w - 1), (y0l + 1).clamp(max=h - 1)
    flat = img.reshape(b, c, h * w)

    def at(yy, xx):
        idx = (yy * w + xx).reshape(b, 1, -1).expand(-1, c, -1)
        return flat.gather(2, idx).reshape(b, c, *x.shape[1:])

    top = at(y0l, x0l) * (1 - wx) + at(y0l, x1l) * wx
    bot = at(y1l, x0l) * (1 - wx) + at(y1l, x1l) * wx
    return top * (1 - wy) + bot * wy


def warp(source, flow):
    """Sample ``source`` at ``p + flow(p)``.

    ``source`` is a ``(B, C, H, W)`` tensor, an ``(H, W, C)`` array or a
    :class:`TokenGrid`; ``flow`` is ``(B, 2, H, W)`` or a :class:`FlowField`
    in pixel (or token) units of the source.  Returns ``(warped, valid)``;
    out-of-frame samples are zero and invalid.
    """
    as_numpy = isinstance(source, np.ndarray)
    token_grid = isinstance(source, TokenGrid)
    if isinstance(flow, FlowField):
        flow = torch.from_numpy(flow.stack().transpose(2, 0, 1)[None].copy())
    if as_numpy:
        src = torch.from_numpy(np.ascontiguousarray(source.transpose(2, 0, 1)[None], dtype=np.float32))
    elif token_grid:
        h, w = source.grid_shape
        t = source.spatial
        src = t.transpose(1, 2).reshape(t.shape[0], t.shape[-1], h, w)
    else:
        src = source
    b, _, h, w = src.shape
    if flow.shape[-2:] != (h, w):
        raise DimensionError(f"flow {tuple(flow.shape[-2:])} does not match source {(h, w)}")
    gx, gy = torch.meshgrid(torch.arange(w, dtype=flow.dtype), torch.arange(h, dtype=flow.dtype), indexing="xy")
    x = gx + flow[:, 0]
    y = gy + flow[:, 1]
    valid = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    out = bilinear_sample(src.to(flow.dtype), x, y) * valid.unsqueeze(1)
    if as_numpy:
        return out[0].permute(1, 2, 0).numpy(), valid[0].numpy()
    if token_grid:
        return TokenGrid(out.reshape(b, -1, h * w).transpose(1, 2), (h, w)), valid
    return out, valid


def charbonnier(delta: torch.Tensor, eps: float = 1e-3) -> torch.Tensor:
    return torch.sqrt(delta * delta + eps * eps)


def ssim_map(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Per-pixel SSIM over 3x3 windows (reflection padded), ``(B, C, H, W)``."""
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    pad = lambda t: F.pad(t, (1, 1, 1, 1), mode="reflect")  # noqa: E731
    pool = lambda t: F.avg_pool2d(pad(t), 3, 1)  # noqa: E731
    mx, my = pool(x), pool(y)
    sx = pool(x * x) - mx * mx
    sy = pool(y * y) - my * my
    sxy = pool(x * y) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sx + sy + c2)
    return num / den


def photometric_score(warped, target, valid, kind: str = "charbonnier") -> float:
    """Mean reconstruction error over valid pixels (Charbonnier or (1-SSIM)/2)."""
    def as_t(a):
        if isinstance(a, np.ndarray):
            a = torch.from_numpy(np.ascontiguousarray(a, dtype=np.float32))
            if a.dim() == 3:
                a = a.permute(2, 0, 1)[None]
        return a
    w, t = as_t(warped), as_t(target)
    v = torch.as_tensor(np.asarray(valid) if isinstance(valid, np.ndarray) else valid).bool()
    if v.dim() == 2:
        v = v[None]
    if w.shape != t.shape:
        raise DimensionError(f"shape mismatch {tuple(w.shape)} vs {tuple(t.shape)}")
    if not v.any():
        raise ScoreError("empty valid mask")
    if kind == "charbonnier":
        per_px = charbonnier(w - t)
    elif kind == "ssim":
        per_px = ((1 - ssim_map(w, t)) / 2).clamp(0, 1)
    else:
        raise ConfigurationError(f"unknown photometric kind {kind!r}")
    m = v.unsqueeze(1).expand_as(per_px)
    return float(per_px[m].mean())


# -- model passes -----------------------------------------------------------------

@dataclass
class Extraction:
    """Everything one forward + swapped decoder pass exposes."""

    enc_t: list[torch.Tensor]
    enc_s: list[torch.Tensor]
    dec_t: list[torch.Tensor]  # target stream of the forward run
    dec_s: list[torch.Tensor]  # source stream of the swapped run
    records: list[AttentionRecord]
    swap_records: list[AttentionRecord]
    grid_shape: tuple[int, int]
    final_t: torch.Tensor = field(repr=False, default=None)
    final_s: torch.Tensor = field(repr=False, default=None)


def resize_images(img: torch.Tensor, size: int) -> torch.Tensor:
    if img.shape[-2:] == (size, size):
        return img
    return F.interpolate(img, size=(size, size), mode="bilinear", align_corners=False, antialias=True).clamp(0, 1)


def extract(model: CrossViewModel, target: torch.Tensor, source: torch.Tensor,
            record_qkv: bool = True) -> Extraction:
    """Run both encoders once and the decoder in both directions, unmasked."""
    cfg = model.config
    enc_layers = list(range(cfg.enc_layers))
    dec_layers = list(range(cfg.dec_layers))
    kept_t, fin_t = model.encode(model.patchify(target), enc_layers)
    kept_s, fin_s = model.encode(model.patchify(source), enc_layers)
    dec_t, rec, out_t = model.decode(model.embed_target(fin_t.tokens), model.embed_source(fin_s.tokens),
                                     dec_layers, record_attention=True)
    dec_s, srec, out_s = model.decode(model.embed_target(fin_s.tokens), model.embed_source(fin_t.tokens),
                                      dec_layers, record_attention=True)
    for nan_check in (rec[-1].logits, srec[-1].logits):
        if not torch.isfinite(nan_check).all():
            from .errors import NumericError
            raise NumericError("non-finite attention logits")
    return Extraction([k.tokens for k in kept_t], [k.tokens for k in kept_s],
                      [k.tokens for k in dec_t], [k.tokens for k in dec_s], rec, srec, cfg.grid,
                      out_t.tokens, out_s.tokens)


def build_cost(ex: Extraction, options: CostOptions) -> CostVolume:
    """Fused cost volume for one source kind (register suppressed)."""
    norm = options.norm
    gs = ex.grid_shape
    kind = options.source_kind
    if kind in ("encoder_corr", "decoder_corr"):
        feats_t, feats_s = (ex.enc_t, ex.enc_s) if kind == "encoder_corr" else (ex.dec_t, ex.dec_s)
        layers = _select(len(feats_t), options.layer_select)
        fwd = [feature_correlation(feats_t[l], feats_s[l], norm, gs, kind) for l in layers]
        bwd = [feature_correlation(feats_s[l], feats_t[l], norm, gs, kind) for l in layers] \
            if options.reciprocity else None
        return fuse_reciprocal(fwd, bwd)

    def prepared(recs, other):
        costs = attention_cost(recs, options.layer_select, options.pairing, other,
                               "none" if norm == "softmax" else norm, gs)
        out = []
        for c in costs:
            if c.has_register:
                c = suppress_register(c) if options.suppress_register else \
                    replace(c, scores=c.scores[..., :-1], has_register=False)
            if norm == "softmax":
                c = replace(c, scores=c.scores.softmax(dim=-1), normalized="softmax")
            out.append(c)
        return out

    fwd = prepared(ex.records, ex.swap_records)
    bwd = prepared(ex.swap_records, ex.records) if options.reciprocity else None
    return fuse_reciprocal(fwd, bwd)


def _as_batch(img) -> torch.Tensor:
    if isinstance(img, np.ndarray):
        arr = img if img.ndim == 4 else img[None]
        return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2), dtype=np.float32))
    return img if img.dim() == 4 else img.unsqueeze(0)


def cost_to_flow(cost: CostVolume, temperature: float, image_size: int, out_size) -> torch.Tensor:
    tok = soft_argmax_flow(cost, temperature)
    flow = upsample_flow(tok, (image_size, image_size))
    if tuple(out_size) != (image_size, image_size):
        flow = upsample_flow(flow, tuple(out_size))
    return flow


@torch.no_grad()
def match_batch(model: CrossViewModel, source, target, options: CostOptions = CostOptions(),
                extraction: Optional[Extraction] = None) -> torch.Tensor:
    """Batched zero-shot flow ``(B, 2, H_t, W_t)`` in target pixels."""
    src, tgt = _as_batch(source), _as_batch(target)
    size = model.config.image_size
    out_size = tgt.shape[-2:]
    if extraction is None:
        extraction = extract(model, resize_images(tgt, size), resize_images(src, size))
    cost = build_cost(extraction, options)
    flow = cost_to_flow(cost, options.temperature, size, out_size)
    if src.shape[-2:] != out_size:
        # source resolution differs: rescale displacements into source pixels
        sh, sw = src.shape[-2:]
        flow = flow * torch.tensor([sw / out_size[1], sh / out_size[0]]).view(1, 2, 1, 1)
    if options.dense_zoom_in:
        flow = dense_zoom_in(model, src, tgt, flow, options)
    return flow


def zero_shot_match(model: CrossViewModel, source, target, options: CostOptions = CostOptions()) -> FlowField:
    """Flow for one image pair (HWC arrays or tensors) at target resolution."""
    model.eval()
    flow = match_batch(model, source, target, options)[0]
    uv = flow.permute(1, 2, 0).numpy()
    return FlowField(uv[..., 0].copy(), uv[..., 1].copy(), np.ones(uv.shape[:2], dtype=bool))


def _positions(extent: int, window: int, stride: int) -> list[int]:
    pos = list(range(0, extent - window + 1, stride))
    if pos[-1] != extent - window:
        pos.append(extent - window)
    return pos


def _hann(n: int) -> torch.Tensor:
    return torch.sin(torch.pi * (torch.arange(n, dtype=torch.float32) + 0.5) / n) ** 2


@torch.no_grad()
def dense_zoom_in(model: CrossViewModel, source, target, coarse_flow: torch.Tensor,
                  options: CostOptions = CostOptions()) -> torch.Tensor:
    """Refine ``coarse_flow`` by re-matching zoomed crops.

    For every target window, the source crop is centred on the window's
    median coarse correspondence, is ``zoom_margin`` times larger, and is
    shifted back inside the frame when needed.  Both crops are resized to the
    model resolution and matched without zoom-in; the local flows are mapped
    back to global coordinates and blended with Hann weights.  Pixels not
    covered by any usable window keep the coarse flow.
    """
    src, tgt = _as_batch(source), _as_batch(target)
    b, _, ht, wt = tgt.shape
    hs, ws = src.shape[-2:]
    size = model.config.image_size
    win = options.zoom_window or max(1, min(ht, wt) // 2)
    stride = options.zoom_stride or max(1, win // 2)
    if win > min(ht, wt):
        raise ConfigurationError(f"zoom window {win} larger than image {ht}x{wt}")
    crop = int(round(options.zoom_margin * win))
    if crop > min(hs, ws):
        return coarse_flow
    local_opts = replace(options, dense_zoom_in=False)
    acc = torch.zeros_like(coarse_flow)
    wsum = torch.zeros(b, 1, ht, wt)
    hann = _hann(win)
    weight = (hann[:, None] * hann[None, :])[None, None]
    rows = torch.arange(win, dtype=torch.float32)
    for y0 in _positions(ht, win, stride):
        for x0 in _positions(wt, win, stride):
            patch = coarse_flow[:, :, y0:y0 + win, x0:x0 + win]
            med = patch.flatten(2).median(dim=-1).values  # (B, 2)
            cx = x0 + (win - 1) / 2 + med[:, 0]
            cy = y0 + (win - 1) / 2 + med[:, 1]
            sx0 = torch.clamp(torch.round(cx - (crop - 1) / 2), 0, ws - crop).long()
            sy0 = torch.clamp(torch.round(cy - (crop - 1) / 2), 0, hs - crop).long()
            t_crop = resize_images(tgt[:, :, y0:y0 + win, x0:x0 + win], size)
            s_crop = torch.stack([src[i, :, sy0[i]:sy0[i] + crop, sx0[i]:sx0[i] + crop] for i in range(b)])
            s_crop = resize_images(s_crop, size)
            local = match_batch(model, s_crop, t_crop, local_opts)  # resized-crop pixels
            if win != size:
                local = F.interpolate(local, size=(win, win), mode="bilinear", align_corners=False)
            scale = crop / win
            gx = (x0 + rows)[None, None, :]
            gy = (y0 + rows)[None, :, None]
            lx = local[:, 0] * (crop / size)
            ly = local[:, 1] * (crop / size)
            fx = sx0.view(b, 1, 1).float() + (gx - x0 + 0.5) * scale + lx - 0.5 - gx
            fy = sy0.view(b, 1, 1).float() + (gy - y0 + 0.5) * scale + ly - 0.5 - gy
            acc[:, :, y0:y0 + win, x0:x0 + win] += torch.stack([fx, fy], dim=1) * weight
            wsum[:, :, y0:y0 + win, x0:x0 + win] += weight
    covered = wsum > 0
    return torch.where(covered, acc / wsum.clamp_min(1e-12), coarse_flow)
