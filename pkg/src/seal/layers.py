"""Attention building blocks shared by the backbone, fusion stack, mask
decoder, and mask feature enhancer."""

from __future__ import annotations

import logging
import math

import torch
from torch import nn

log = logging.getLogger(__name__)


_PE_CACHE: dict = {}


def _pe_freqs(quarter: int, span: int) -> torch.Tensor:
    """Geometric frequency ladder from cell-resolving (pi per cell) down to
    roughly two cycles across the span, so encoding inner products form a
    localized translation kernel instead of a checkerboard."""
    lo = 2.0 / max(4, span)
    if quarter == 1:
        return torch.tensor([1.0], dtype=torch.float64)
    return torch.exp(torch.linspace(0.0, math.log(lo), quarter, dtype=torch.float64))


def sinusoidal_2d(h: int, w: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Fixed 2D sinusoidal positional encoding, (h * w, dim), row-major.

    Layout per token: [y_sin, y_cos, x_sin, x_cos], each dim/4 wide, with a
    frequency ladder tied to the grid size (shared with `point_encoding`).
    """
    key = (h, w, dim, dtype)
    cached = _PE_CACHE.get(key)
    if cached is not None:
        return cached
    if dim % 4:
        raise ValueError("2D sinusoidal encoding needs dim divisible by 4")
    freqs = _pe_freqs(dim // 4, max(h, w))
    ys = torch.arange(h, dtype=torch.float64)[:, None] * freqs[None, :] * math.pi
    xs = torch.arange(w, dtype=torch.float64)[:, None] * freqs[None, :] * math.pi
    y_enc = torch.cat([torch.sin(ys), torch.cos(ys)], dim=1)    # (h, dim/2)
    x_enc = torch.cat([torch.sin(xs), torch.cos(xs)], dim=1)    # (w, dim/2)
    grid = torch.cat([
        y_enc[:, None, :].expand(h, w, dim // 2),
        x_enc[None, :, :].expand(h, w, dim // 2),
    ], dim=2)
    out = grid.reshape(h * w, dim).to(dtype)
    _PE_CACHE[key] = out
    return out


def point_encoding(y: float, x: float, dim: int, span: int,
                   dtype=torch.float32) -> torch.Tensor:
    """Sinusoidal encoding of one (possibly fractional) grid position, (dim,).

    Same frequencies and layout as `sinusoidal_2d` over a grid of extent
    `span`, so prompt embeddings and cell encodings share one positional
    space and their inner product is a translation kernel.
    """
    if dim % 4:
        raise ValueError("point encoding needs dim divisible by 4")
    freqs = _pe_freqs(dim // 4, span)
    ang_y = y * freqs * math.pi
    ang_x = x * freqs * math.pi
    return torch.cat([torch.sin(ang_y), torch.cos(ang_y),
                      torch.sin(ang_x), torch.cos(ang_x)]).to(dtype)


class MultiHeadAttention(nn.Module):
    """Multi-head attention with an optional boolean allow mask over keys.

    Disallowed keys get -inf logits before the softmax. A query row with no
    allowed keys falls back to attending everywhere (logged) so the output
    is never NaN.
    """

    def __init__(self, q_dim: int, heads: int, kv_dim: int | None = None):
        super().__init__()
        if q_dim % heads:
            raise ValueError("q_dim must be divisible by heads")
        kv_dim = q_dim if kv_dim is None else kv_dim
        self.heads = heads
        self.head_dim = q_dim // heads
        self.q = nn.Linear(q_dim, q_dim)
        self.k = nn.Linear(kv_dim, q_dim)
        self.v = nn.Linear(kv_dim, q_dim)
        self.out = nn.Linear(q_dim, q_dim)

    def forward(self, queries: torch.Tensor, keys_values: torch.Tensor,
                allow: torch.Tensor | None = None) -> torch.Tensor:
        """queries (..., M, Dq), keys_values (..., N, Dk), allow (..., M, N)."""
        m, n = queries.shape[-2], keys_values.shape[-2]
        q = self.q(queries).unflatten(-1, (self.heads, self.head_dim)).transpose(-3, -2)
        k = self.k(keys_values).unflatten(-1, (self.heads, self.head_dim)).transpose(-3, -2)
        v = self.v(keys_values).unflatten(-1, (self.heads, self.head_dim)).transpose(-3, -2)
        logits = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if allow is not None:
            allow = allow.to(torch.bool)
            starved = ~allow.any(dim=-1)
            if starved.any():
                log.debug("attention fallback: %d query rows had no allowed keys",
                          int(starved.sum()))
                allow = torch.where(starved.unsqueeze(-1), torch.ones_like(allow), allow)
            logits = logits.masked_fill(~allow.unsqueeze(-3), float("-inf"))
        attn = torch.softmax(logits, dim=-1)
        ctx = (attn @ v).transpose(-3, -2).flatten(-2)
        return self.out(ctx)


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or 4 * dim
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(torch.nn.functional.gelu(self.fc1(x)))


def windowed_self_attention(tokens: torch.Tensor, grid_hw: tuple[int, int],
                            window: int, attn: MultiHeadAttention) -> torch.Tensor:
    """Self-attention restricted to window x window tiles of the token grid.

    The grid is zero-padded up to window multiples and padded positions are
    masked out of the key set, so a window covering the whole grid equals
    global self-attention exactly.
    """
    h, w = grid_hw
    if tokens.shape[0] != h * w:
        raise ValueError("token count does not match grid")
    window = min(window, max(h, w))
    ph = (window - h % window) % window
    pw = (window - w % window) % window
    hp, wp = h + ph, w + pw
    dim = tokens.shape[1]
    grid = tokens.new_zeros(hp, wp, dim)
    grid[:h, :w] = tokens.reshape(h, w, dim)
    valid = torch.zeros(hp, wp, dtype=torch.bool, device=tokens.device)
    valid[:h, :w] = True

    nh, nw = hp // window, wp // window
    def to_windows(t):
        return (t.reshape(nh, window, nw, window, -1)
                 .permute(0, 2, 1, 3, 4)
                 .reshape(nh * nw, window * window, -1))

    win_tokens = to_windows(grid)
    win_valid = to_windows(valid.unsqueeze(-1)).squeeze(-1)
    allow = win_valid[:, None, :].expand(-1, window * window, -1)
    out = attn(win_tokens, win_tokens, allow=allow)
    out = (out.reshape(nh, nw, window, window, dim)
              .permute(0, 2, 1, 3, 4)
              .reshape(hp, wp, dim))
    return out[:h, :w].reshape(h * w, dim)
