"""Miniature cross-view completion encoder/decoder.

Images are ``(B, 3, H, W)`` float tensors in ``[0, 1]``.  Token grids are
``(B, N, dim)`` in row-major grid order.  Every decoder block runs
self-attention over the target stream, cross-attention from the target
stream into a fixed source memory, then an MLP.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, DimensionError, NumericError, RangeError


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    patch_size: int = 8
    enc_layers: int = 6
    dec_layers: int = 6
    enc_dim: int = 192
    dec_dim: int = 128
    n_heads: int = 4
    mlp_ratio: float = 4.0
    use_register_token: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.image_size <= 0 or self.patch_size <= 0:
            raise ConfigurationError("image_size and patch_size must be positive")
        if self.image_size % self.patch_size:
            raise ConfigurationError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.n_heads < 1:
            raise ConfigurationError("n_heads must be >= 1")
        if self.dec_dim % self.n_heads:
            raise ConfigurationError(
                f"dec_dim {self.dec_dim} not divisible by n_heads {self.n_heads}")
        if self.enc_dim % self.n_heads:
            raise ConfigurationError(
                f"enc_dim {self.enc_dim} not divisible by n_heads {self.n_heads}")
        if self.dec_layers < 1 or self.enc_layers < 1:
            raise ConfigurationError("enc_layers and dec_layers must be >= 1")

    @property
    def grid(self) -> tuple[int, int]:
        g = self.image_size // self.patch_size
        return g, g

    @property
    def num_tokens(self) -> int:
        h, w = self.grid
        return h * w

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class TokenGrid:
    tokens: torch.Tensor  # (B, hw [+1], dim)
    grid_shape: tuple[int, int]
    has_register: bool = False

    @property
    def dim(self) -> int:
        return self.tokens.shape[-1]

    @property
    def spatial(self) -> torch.Tensor:
        """Tokens with the register row (always last) removed."""
        return self.tokens[:, :-1] if self.has_register else self.tokens


@dataclass
class AttentionRecord:
    """Per-layer cross-attention: logits/probs are ``(B, heads, Nq, Nk)``.

    ``q``, ``k``, ``v`` hold the per-head projections ``(B, heads, N, d_head)``
    so that alternative pairings (Q-Q, K-K, V-V) can be rebuilt later.
    """

    layer_index: int
    logits: torch.Tensor
    probs: torch.Tensor
    q: Optional[torch.Tensor] = None
    k: Optional[torch.Tensor] = None
    v: Optional[torch.Tensor] = None
    has_register: bool = False


def _check_finite(*tensors):
    for t in tensors:
        if not torch.isfinite(t).all():
            raise NumericError("non-finite values in attention inputs")


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor):
    """Scaled dot-product attention on per-head tensors ``(B, heads, N, dh)``.

    Returns ``(out, logits, probs)`` with ``logits = q k^T / sqrt(dh)``.
    """
    _check_finite(q, k, v)
    logits = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    probs = logits.softmax(dim=-1)
    return probs @ v, logits, probs


def _split_heads(x: torch.Tensor, n_heads: int) -> torch.Tensor:
    b, n, d = x.shape
    return x.reshape(b, n, n_heads, d // n_heads).transpose(1, 2)


def _merge_heads(x: torch.Tensor) -> torch.Tensor:
    b, h, n, dh = x.shape
    return x.transpose(1, 2).reshape(b, n, h * dh)


class Attention(nn.Module):
    """Multi-head attention; query and key/value streams may differ."""

    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, mem=None, record: bool = False, layer_index: int = 0,
                has_register: bool = False):
        mem = x if mem is None else mem
        q = _split_heads(self.q(x), self.n_heads)
        k = _split_heads(self.k(mem), self.n_heads)
        v = _split_heads(self.v(mem), self.n_heads)
        out, logits, probs = attention(q, k, v)
        out = self.proj(_merge_heads(out))
        rec = None
        if record:
            rec = AttentionRecord(layer_index, logits, probs, q, k, v, has_register)
        return out, rec


class Mlp(nn.Module):
    def __init__(self, dim: int, ratio: float):
        super().__init__()
        hidden = int(dim * ratio)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class EncoderBlock(nn.Module):
    def __init__(self, dim, n_heads, mlp_ratio):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, n_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))[0]
        return x + self.mlp(self.norm2(x))


class DecoderBlock(nn.Module):
    def __init__(self, dim, n_heads, mlp_ratio):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = Attention(dim, n_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.norm_mem = nn.LayerNorm(dim)
        self.cross_attn = Attention(dim, n_heads)
        self.norm3 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)

    def forward(self, x, mem, record=False, layer_index=0, has_register=False):
        x = x + self.self_attn(self.norm1(x))[0]
        y, rec = self.cross_attn(self.norm2(x), self.norm_mem(mem), record=record,
                                 layer_index=layer_index, has_register=has_register)
        x = x + y
        return x + self.mlp(self.norm3(x)), rec


def cross_attention(query_feats: torch.Tensor, key_feats: torch.Tensor,
                    value_feats: torch.Tensor, layer: Attention | None = None,
                    layer_index: int = 0):
    """Cross-attention of target queries into source keys/values.

    With ``layer`` given, the inputs are token features ``(B, N, dim)`` that are
    projected (and heads merged) by the layer.  Without it, the inputs are
    already-projected single-head tensors ``(B, N, dh)`` and the output is the
    attended values.
    """
    if layer is None:
        q, k, v = (t.unsqueeze(1) for t in (query_feats, key_feats, value_feats))
        out, logits, probs = attention(q, k, v)
        return out.squeeze(1), AttentionRecord(layer_index, logits, probs, q, k, v)
    q = _split_heads(layer.q(query_feats), layer.n_heads)
    k = _split_heads(layer.k(key_feats), layer.n_heads)
    v = _split_heads(layer.v(value_feats), layer.n_heads)
    out, logits, probs = attention(q, k, v)
    return layer.proj(_merge_heads(out)), AttentionRecord(layer_index, logits, probs, q, k, v)


class CrossViewModel(nn.Module):
    """Encoder/decoder pair trained by reconstructing a masked target view."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c, d, p = config.enc_dim, config.dec_dim, config.patch_size
        n = config.num_tokens
        self.patch_embed = nn.Linear(p * p * 3, c)
        self.enc_pos = nn.Parameter(torch.zeros(1, n, c))
        self.enc_blocks = nn.ModuleList(
            EncoderBlock(c, config.n_heads, config.mlp_ratio) for _ in range(config.enc_layers))
        self.enc_norm = nn.LayerNorm(c)
        self.dec_embed = nn.Linear(c, d)
        self.dec_pos = nn.Parameter(torch.zeros(1, n, d))
        self.mask_token = nn.Parameter(torch.zeros(1, 1, d))
        if config.use_register_token:
            self.register_token = nn.Parameter(torch.zeros(1, 1, d))
        self.dec_blocks = nn.ModuleList(
            DecoderBlock(d, config.n_heads, config.mlp_ratio) for _ in range(config.dec_layers))
        self.dec_norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, p * p * 3)

    # -- tokenization ------------------------------------------------------

    def image_to_patches(self, images: torch.Tensor) -> torch.Tensor:
        """``(B, 3, H, W)`` -> ``(B, hw, p*p*3)`` in row-major patch order."""
        cfg = self.config
        if images.dim() != 4 or images.shape[1] != 3 or \
                images.shape[-2:] != (cfg.image_size, cfg.image_size):
            raise DimensionError(
                f"expected (B, 3, {cfg.image_size}, {cfg.image_size}) images, got {tuple(images.shape)}")
        p = cfg.patch_size
        b = images.shape[0]
        h, w = cfg.grid
        x = images.reshape(b, 3, h, p, w, p).permute(0, 2, 4, 3, 5, 1)
        return x.reshape(b, h * w, p * p * 3)

    def patches_to_image(self, patches: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        p = cfg.patch_size
        h, w = cfg.grid
        b = patches.shape[0]
        x = patches.reshape(b, h, w, p, p, 3).permute(0, 5, 1, 3, 2, 4)
        return x.reshape(b, 3, h * p, w * p)

    def patchify(self, images: torch.Tensor) -> TokenGrid:
        tokens = self.patch_embed(self.image_to_patches(images)) + self.enc_pos
        return TokenGrid(tokens, self.config.grid)

    # -- encoder -----------------------------------------------------------

    def encode(self, tokens: TokenGrid | torch.Tensor, keep_layers: Sequence[int] = (),
               visible: Optional[torch.Tensor] = None):
        """Run the encoder; returns ``(kept, final)``.

        ``kept`` holds one grid per index in ``keep_layers`` (raw block
        outputs); ``final`` is the normalized last-layer output that feeds the
        decoder.  ``visible`` (``(B, n_vis)`` token indices) restricts the
        encoder to unmasked target tokens.
        """
        x = tokens.tokens if isinstance(tokens, TokenGrid) else tokens
        n_layers = len(self.enc_blocks)
        for idx in keep_layers:
            if not 0 <= idx < n_layers:
                raise RangeError(f"encoder layer {idx} out of range [0, {n_layers})")
        if visible is not None:
            x = torch.gather(x, 1, visible.unsqueeze(-1).expand(-1, -1, x.shape[-1]))
        wanted = set(keep_layers)
        kept = {}
        for i, blk in enumerate(self.enc_blocks):
            x = blk(x)
            if i in wanted:
                kept[i] = x
        grid = self.config.grid
        return [TokenGrid(kept[i], grid) for i in keep_layers], TokenGrid(self.enc_norm(x), grid)

    # -- decoder -----------------------------------------------------------

    def embed_target(self, enc_final: torch.Tensor, visible: Optional[torch.Tensor] = None) -> TokenGrid:
        """Project encoder output to decoder width; masked slots get the mask token."""
        y = self.dec_embed(enc_final)
        if visible is not None:
            b = y.shape[0]
            full = self.mask_token.expand(b, self.config.num_tokens, -1).clone()
            full = full.scatter(1, visible.unsqueeze(-1).expand(-1, -1, y.shape[-1]), y)
            y = full
        return TokenGrid(y + self.dec_pos, self.config.grid)

    def embed_source(self, enc_final: torch.Tensor) -> TokenGrid:
        y = self.dec_embed(enc_final) + self.dec_pos
        if self.config.use_register_token:
            y = torch.cat([y, self.register_token.expand(y.shape[0], -1, -1)], dim=1)
            return TokenGrid(y, self.config.grid, has_register=True)
        return TokenGrid(y, self.config.grid)

    def decode(self, target: TokenGrid, source: TokenGrid, keep_layers: Sequence[int] = (),
               record_attention: bool = False):
        """Apply the decoder blocks; returns ``(kept_grids, records, final)``."""
        d = self.config.dec_dim
        if target.dim != d or source.dim != d:
            raise DimensionError(f"decoder expects width {d}, got {target.dim} and {source.dim}")
        n_layers = len(self.dec_blocks)
        for idx in keep_layers:
            if not 0 <= idx < n_layers:
                raise RangeError(f"decoder layer {idx} out of range [0, {n_layers})")
        wanted = set(keep_layers)
        x, mem = target.tokens, source.tokens
        kept, records = {}, []
        for i, blk in enumerate(self.dec_blocks):
            x, rec = blk(x, mem, record=record_attention, layer_index=i,
                         has_register=source.has_register)
            if rec is not None:
                records.append(rec)
            if i in wanted:
                kept[i] = x
        grid = self.config.grid
        return [TokenGrid(kept[i], grid) for i in keep_layers], records, TokenGrid(x, grid)

    def reconstruct_head(self, decoder_out: TokenGrid | torch.Tensor) -> torch.Tensor:
        x = decoder_out.tokens if isinstance(decoder_out, TokenGrid) else decoder_out
        return self.patches_to_image(self.head(self.dec_norm(x)))

    # -- composite passes --------------------------------------------------

    def forward_masked(self, source: torch.Tensor, target: torch.Tensor, visible: torch.Tensor):
        """Cross-view completion pass: predicted patches ``(B, hw, p*p*3)``."""
        _, src = self.encode(self.patchify(source))
        _, tgt = self.encode(self.patchify(target), visible=visible)
        _, _, out = self.decode(self.embed_target(tgt.tokens, visible), self.embed_source(src.tokens))
        return self.head(self.dec_norm(out.tokens))


def sincos_2d(grid: tuple[int, int], dim: int) -> torch.Tensor:
    """Fixed 2-D sine/cosine table ``(h*w, dim)``: half the channels encode y, half x."""
    if dim % 4:
        raise ConfigurationError(f"sin-cos table needs dim divisible by 4, got {dim}")
    h, w = grid
    ys, xs = torch.meshgrid(torch.arange(h, dtype=torch.float64), torch.arange(w, dtype=torch.float64),
                            indexing="ij")
    freq = 1.0 / 10000 ** (torch.arange(dim // 4, dtype=torch.float64) / (dim // 4))

    def enc(pos):
        a = pos.reshape(-1, 1) * freq
        return torch.cat([a.sin(), a.cos()], dim=1)

    return torch.cat([enc(ys), enc(xs)], dim=1).float()


def init_params(config: ModelConfig, seed: Optional[int] = None, pos_init: str = "sincos") -> CrossViewModel:
    """Build a model with truncated-normal(0.02) weights and zero biases.

    Positional embeddings are learned; ``pos_init='sincos'`` starts them from
    a 2-D sine/cosine table, ``'normal'`` from the same truncated normal.
    """
    seed = config.seed if seed is None else seed
    if pos_init not in ("sincos", "normal"):
        raise ConfigurationError(f"unknown pos_init {pos_init!r}")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = CrossViewModel(config)
        for name, p in model.named_parameters():
            if name.endswith("bias"):
                nn.init.zeros_(p)
            elif "norm" in name:
                nn.init.ones_(p)
            else:
                nn.init.trunc_normal_(p, std=0.02, a=-0.04, b=0.04)
        if pos_init == "sincos":
            with torch.no_grad():
                model.enc_pos.copy_(sincos_2d(config.grid, config.enc_dim)[None])
                model.dec_pos.copy_(sincos_2d(config.grid, config.dec_dim)[None])
    return model
