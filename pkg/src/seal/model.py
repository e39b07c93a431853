"""The event segmentation network.

Pipeline: voxel grid -> patch-transformer backbone -> language-fusion
enhancer (windowed self-attention, cross-attention over pooled text
embeddings, feed-forward; global attention in the last layer) ->
prompt-driven mask decoder emitting per-mask tokens -> mask-weighted RoI
pooling (with deliberate dead-mask semantics) -> spatial encoding
proj(concat(token, pooled)) -> masked cross-attention feature enhancer ->
cosine classification against text queries.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from seal._pool_geom import (
    POOL_GRID,
    bbox_to_feature_box,
    box_bin_weights,
    downsample_mask_binary,
    mask_bbox,
    pool_taps,
)
from seal.layers import (
    FeedForward,
    MultiHeadAttention,
    point_encoding,
    sinusoidal_2d,
    windowed_self_attention,
)

log = logging.getLogger(__name__)

GRANULARITY_TAGS = ("coarse", "mid", "fine")
CANONICAL_PHRASES = ("object", "things", "stuff", "texture")


class ConfigError(ValueError):
    pass


class PromptError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 512
    bins: int = 3
    patch_size: int = 16
    backbone_depth: int = 2
    backbone_heads: int = 4
    d2: int = 128                # backbone feature dim
    d: int = 64                  # guidance / classification dim
    fusion_layers: int = 6
    fusion_heads: int = 4
    window: int = 14
    downscale: int = 32
    decoder_blocks: int = 2
    decoder_heads: int = 4
    box_dilation_px: int = 32
    use_fusion: bool = True
    use_se: bool = True
    use_mfe: bool = True

    def __post_init__(self):
        if self.input_size % self.patch_size:
            raise ConfigError("input size must be divisible by patch size")
        if self.downscale % self.patch_size or self.input_size % self.downscale:
            raise ConfigError("downscale must be a patch-size multiple dividing the input")
        if self.d2 % self.backbone_heads or self.d2 % self.fusion_heads:
            raise ConfigError("d2 must be divisible by the head counts")
        if self.d % self.decoder_heads or self.d % 4 or self.d2 % 4:
            raise ConfigError("feature dims must suit heads and positional encodings")
        if self.fusion_layers < 1:
            raise ConfigError("at least one fusion layer required")

    @property
    def feat_size(self) -> int:
        return self.input_size // self.downscale

    @staticmethod
    def small(**overrides) -> "ModelConfig":
        """Desk-scale test configuration."""
        base = dict(input_size=64, bins=3, patch_size=8, backbone_depth=1,
                    backbone_heads=2, d2=32, d=16, fusion_layers=2,
                    fusion_heads=2, window=14, downscale=8, decoder_blocks=2,
                    decoder_heads=2, box_dilation_px=8)
        base.update(overrides)
        return ModelConfig(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(**d)


@dataclass(frozen=True)
class Prompt:
    """User visual prompt: a point or an (x_min, y_min, x_max, y_max) box."""

    kind: str
    x: int = 0
    y: int = 0
    box: tuple[int, int, int, int] | None = None

    @staticmethod
    def point(x: int, y: int) -> "Prompt":
        return Prompt(kind="point", x=int(x), y=int(y))

    @staticmethod
    def from_box(x_min: int, y_min: int, x_max: int, y_max: int) -> "Prompt":
        return Prompt(kind="box", box=(int(x_min), int(y_min), int(x_max), int(y_max)))

    def validate(self, width: int, height: int):
        if self.kind == "point":
            if not (0 <= self.x < width and 0 <= self.y < height):
                raise PromptError(f"point ({self.x}, {self.y}) outside {width}x{height} frame")
        elif self.kind == "box":
            x0, y0, x1, y1 = self.box
            if x0 > x1 or y0 > y1:
                raise PromptError(f"degenerate box {self.box}")
            if not (0 <= x0 and x1 < width and 0 <= y0 and y1 < height):
                raise PromptError(f"box {self.box} outside {width}x{height} frame")
        else:
            raise PromptError(f"unknown prompt kind {self.kind!r}")


@dataclass
class MaskPrediction:
    mask: np.ndarray               # binary H x W
    token: torch.Tensor            # mask token, (d,)
    granularity: str               # coarse/mid/fine for points, "box" for boxes


@dataclass
class MaskFeatureBundle:
    pooled: torch.Tensor           # S, (d,)
    dead: bool
    token: torch.Tensor            # G, (d,)
    fused: torch.Tensor            # M = proj(concat(G, S))
    enhanced: torch.Tensor         # M-hat after the mask feature enhancer


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = FeedForward(dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h)
        return x + self.mlp(self.norm2(x))


class Backbone(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.patch = nn.Conv2d(cfg.bins, cfg.d2, cfg.patch_size, stride=cfg.patch_size)
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.d2, cfg.backbone_heads) for _ in range(cfg.backbone_depth))
        self.neck = nn.Linear(cfg.d2, cfg.d2)

    def forward(self, voxel: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        x = self.patch(voxel.unsqueeze(0)).squeeze(0)          # d2, gh, gw
        gh, gw = x.shape[1], x.shape[2]
        tokens = x.flatten(1).T                                 # (gh*gw, d2)
        for block in self.blocks:
            tokens = block(tokens)
        pool = cfg.downscale // cfg.patch_size
        grid = tokens.reshape(gh, gw, cfg.d2)
        if pool > 1:
            grid = grid.reshape(gh // pool, pool, gw // pool, pool, cfg.d2).mean(dim=(1, 3))
        return self.neck(grid).permute(2, 0, 1)                 # d2, H2, W2


class _SelfSub(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)


class _CrossSub(nn.Module):
    def __init__(self, dim: int, heads: int, kv_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, kv_dim=kv_dim)


class _FfnSub(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, 4 * dim)
        self.fc2 = nn.Linear(4 * dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(torch.nn.functional.gelu(self.fc1(self.norm(x))))


class FusionLayer(nn.Module):
    """[windowed self-attention, text cross-attention, feed-forward], each
    residual. Checkpoint names: fusion.{i}.{self,cross,ffn}.*"""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.add_module("self", _SelfSub(cfg.d2, cfg.fusion_heads))
        self.cross = _CrossSub(cfg.d2, cfg.fusion_heads, kv_dim=cfg.d)
        self.ffn = _FfnSub(cfg.d2)

    def forward(self, tokens: torch.Tensor, grid_hw, window: int,
                text: torch.Tensor | None) -> torch.Tensor:
        sub = getattr(self, "self")
        tokens = tokens + windowed_self_attention(sub.norm(tokens), grid_hw, window, sub.attn)
        if text is not None and text.shape[0] > 0:
            tokens = tokens + self.cross.attn(self.cross.norm(tokens), text)
        return tokens + self.ffn(tokens)


class TwoWayBlock(nn.Module):
    """Bidirectional attention between prompt/mask tokens and feature cells."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.self_attn = MultiHeadAttention(dim, heads)
        self.norm1 = nn.LayerNorm(dim)
        self.t2i = MultiHeadAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = FeedForward(dim)
        self.norm3 = nn.LayerNorm(dim)
        self.i2t = MultiHeadAttention(dim, heads)
        self.norm4 = nn.LayerNorm(dim)

    def forward(self, tokens, cells, pe):
        tokens = self.norm1(tokens + self.self_attn(tokens, tokens))
        tokens = self.norm2(tokens + self.t2i(tokens, cells + pe))
        tokens = self.norm3(tokens + self.mlp(tokens))
        cells = self.norm4(cells + self.i2t(cells + pe, tokens))
        return tokens, cells


class MaskDecoder(nn.Module):
    """Prompt embeddings and mask-query tokens run two two-way blocks against
    the feature cells; masks come from a token/cell dot product, the final
    query token is the mask token G."""

    N_TOKENS = 4   # 0: box/single output, 1..3: coarse/mid/fine

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.feat_proj = nn.Linear(cfg.d2, cfg.d)
        self.mask_tokens = nn.Embedding(self.N_TOKENS, cfg.d)
        self.prompt_types = nn.Embedding(3, cfg.d)  # point, box corner 1, box corner 2
        self.blocks = nn.ModuleList(
            TwoWayBlock(cfg.d, cfg.decoder_heads) for _ in range(cfg.decoder_blocks))
        self.final_t2i = MultiHeadAttention(cfg.d, cfg.decoder_heads)
        self.final_norm = nn.LayerNorm(cfg.d)

    def embed_prompt(self, prompt: Prompt, width: int, height: int,
                     h2: int, w2: int) -> torch.Tensor:
        """Prompt tokens encoded at fractional feature-grid coordinates, in
        the same positional space as the cell encodings."""
        dtype = self.feat_proj.weight.dtype
        sy, sx = h2 / height, w2 / width
        span = max(h2, w2)

        def enc(px: float, py: float) -> torch.Tensor:
            return point_encoding(py * sy - 0.5, px * sx - 0.5, self.cfg.d, span, dtype)

        if prompt.kind == "point":
            return (enc(prompt.x + 0.5, prompt.y + 0.5)
                    + self.prompt_types.weight[0]).unsqueeze(0)
        x0, y0, x1, y1 = prompt.box
        c1 = enc(x0, y0) + self.prompt_types.weight[1]
        c2 = enc(x1 + 1, y1 + 1) + self.prompt_types.weight[2]
        return torch.stack([c1, c2])

    def forward(self, feat_raw: torch.Tensor, prompt: Prompt, width: int, height: int):
        """Returns (tokens (4, d), per-token mask logits (4, H, W))."""
        d = self.cfg.d
        h2, w2 = feat_raw.shape[1], feat_raw.shape[2]
        cells = self.feat_proj(feat_raw.flatten(1).T)
        pe = sinusoidal_2d(h2, w2, d, dtype=cells.dtype)
        tokens = torch.cat([self.mask_tokens.weight,
                            self.embed_prompt(prompt, width, height, h2, w2)])
        for block in self.blocks:
            tokens, cells = block(tokens, cells, pe)
        tokens = self.final_norm(tokens + self.final_t2i(tokens, cells + pe))
        queries = tokens[: self.N_TOKENS]
        # Position-carrying dot product: a query holding a prompt's encoding
        # immediately reads out a translation kernel over the grid.
        logits = ((cells + pe) @ queries.T) / (d ** 0.5)        # (N, 4)
        grid = logits.T.reshape(self.N_TOKENS, h2, w2)
        full = torch.nn.functional.interpolate(
            grid.unsqueeze(0), size=(height, width), mode="bilinear",
            align_corners=False).squeeze(0)
        return queries, full


class SpatialEncoder(nn.Module):
    """pool: D2 -> D projection of RoI-pooled features; proj: the learned
    affine concat(G, S) -> M map."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.pool = nn.Linear(cfg.d2, cfg.d)
        self.proj = nn.Linear(2 * cfg.d, cfg.d)

    def forward(self, token: torch.Tensor, pooled: torch.Tensor) -> torch.Tensor:
        return self.proj(torch.cat([token, pooled], dim=-1))


class MaskFeatureEnhancer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.attn = MultiHeadAttention(cfg.d, cfg.decoder_heads, kv_dim=cfg.d2)
        self.norm = nn.LayerNorm(cfg.d)


class EventSegmenter(nn.Module):
    """Complete model; parameter names follow the checkpoint container
    families backbone.*, fusion.{i}.{self,cross,ffn}.*, decoder.*, se.*,
    mfe.*."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.backbone = Backbone(config)
        self.fusion = nn.ModuleList(FusionLayer(config) for _ in range(config.fusion_layers))
        self.decoder = MaskDecoder(config)
        self.se = SpatialEncoder(config)
        self.mfe = MaskFeatureEnhancer(config)

    # ----------------------------------------------------------------- utils
    @property
    def dtype(self):
        return self.se.pool.weight.dtype

    def _to_tensor(self, arr: np.ndarray) -> torch.Tensor:
        return torch.as_tensor(np.ascontiguousarray(arr), dtype=self.dtype)

    # ------------------------------------------------------------- backbone
    def encode_backbone(self, voxel) -> torch.Tensor:
        """Voxel (bins, H, W) -> raw feature map (d2, H2, W2)."""
        cfg = self.config
        if isinstance(voxel, np.ndarray):
            voxel = self._to_tensor(voxel)
        if voxel.shape != (cfg.bins, cfg.input_size, cfg.input_size):
            raise ConfigError(
                f"voxel shape {tuple(voxel.shape)} does not match config "
                f"({cfg.bins}, {cfg.input_size}, {cfg.input_size})")
        return self.backbone(voxel)

    def enhance(self, feat: torch.Tensor, text_tokens: torch.Tensor | None) -> torch.Tensor:
        """Backbone feature enhancer; with no text the cross sublayer is an
        identity residual, preserving a pure-vision path."""
        if not self.config.use_fusion:
            return feat
        h2, w2 = feat.shape[1], feat.shape[2]
        tokens = feat.flatten(1).T
        last = len(self.fusion) - 1
        for i, layer in enumerate(self.fusion):
            window = self.config.window if i < last else max(h2, w2)
            tokens = layer(tokens, (h2, w2), window, text_tokens)
        return tokens.T.reshape(feat.shape)

    # -------------------------------------------------------------- decoder
    def decode_masks(self, feat_raw: torch.Tensor, prompts: list[Prompt],
                     width: int | None = None, height: int | None = None) -> list[MaskPrediction]:
        """Point prompts yield 3 granularity-tagged masks, boxes one mask.

        Contracts enforced on the thresholded masks: point masks contain the
        prompted pixel in at least one granularity, box masks stay inside
        the dilated box, and no returned mask is empty.
        """
        width = width or self.config.input_size
        height = height or self.config.input_size
        preds: list[MaskPrediction] = []
        for prompt in prompts:
            prompt.validate(width, height)
            queries, logits = self.decoder(feat_raw, prompt, width, height)
            if prompt.kind == "box":
                items = [(0, "box")]
            else:
                items = [(1, "coarse"), (2, "mid"), (3, "fine")]
            allowed = None
            if prompt.kind == "box":
                x0, y0, x1, y1 = prompt.box
                pad = self.config.box_dilation_px
                allowed = np.zeros((height, width), dtype=bool)
                allowed[max(0, y0 - pad):y1 + 1 + pad, max(0, x0 - pad):x1 + 1 + pad] = True
            group = []
            for token_idx, tag in items:
                lg = logits[token_idx].detach().cpu().numpy()
                mask = lg > 0.0
                if allowed is not None:
                    mask &= allowed
                    lg = np.where(allowed, lg, -np.inf)
                if not mask.any():
                    yy, xx = np.unravel_index(np.argmax(lg), lg.shape)
                    mask[yy, xx] = True
                group.append(MaskPrediction(mask.astype(np.uint8), queries[token_idx], tag))
            if prompt.kind == "point":
                y, x = prompt.y, prompt.x
                if not any(p.mask[y, x] for p in group):
                    best = int(np.argmax([logits[i][y, x].item() for i, _ in items]))
                    group[best].mask[y, x] = 1
            preds.extend(group)
        return preds

    # -------------------------------------------------------------- pooling
    def roi_mask_pool(self, fused: torch.Tensor, mask: np.ndarray,
                      in_height: int | None = None, in_width: int | None = None):
        """Mask-weighted 7x7 RoI-Align over the mask's bounding box.

        The mask is binarized at feature resolution first; masks that vanish
        there return (zero vector, dead=True) deliberately.
        """
        if not mask.any():
            raise ValueError("mask is empty")
        h, w = mask.shape
        h2, w2 = fused.shape[1], fused.shape[2]
        box_f = bbox_to_feature_box(mask_bbox(mask), h, w, h2, w2)
        m2 = downsample_mask_binary(mask, h2, w2)
        weights = box_bin_weights(m2, box_f)
        if weights.sum() <= 0.0:
            return fused.new_zeros(self.config.d), True
        idx, coeff = pool_taps(box_f, weights, h2, w2)
        flat = fused.reshape(fused.shape[0], -1)
        pooled = flat[:, torch.as_tensor(idx)] @ torch.as_tensor(coeff, dtype=fused.dtype)
        return self.se.pool(pooled), False

    def spatial_encode(self, token: torch.Tensor, pooled: torch.Tensor) -> torch.Tensor:
        return self.se(token, pooled)

    def mask_feature_enhance(self, m: torch.Tensor, fused: torch.Tensor,
                             attn_mask: np.ndarray) -> torch.Tensor:
        """One masked cross-attention layer over fused cells + positional
        encodings; cells under the (feature-resolution) mask are the allow
        set, with an all-allowed fallback when the mask vanishes."""
        h2, w2 = fused.shape[1], fused.shape[2]
        m2 = downsample_mask_binary(attn_mask, h2, w2)
        allow = torch.as_tensor(m2.reshape(1, -1))
        kv = fused.flatten(1).T + sinusoidal_2d(h2, w2, fused.shape[0], dtype=fused.dtype)
        out = self.mfe.attn(m.unsqueeze(0), kv, allow=allow)
        return self.mfe.norm(m + out[0])

    # --------------------------------------------------------------- bundle
    def mask_feature_bundle(self, fused: torch.Tensor, feat_raw: torch.Tensor,
                            mask: np.ndarray, token: torch.Tensor) -> MaskFeatureBundle:
        """S/G/M/M-hat for one proposal, honoring the module toggles."""
        pooled, dead = self.roi_mask_pool(fused, mask)
        if self.config.use_se:
            m = self.spatial_encode(token, pooled)
        else:
            m = pooled
        if self.config.use_mfe:
            m_hat = self.mask_feature_enhance(m, fused, mask)
        else:
            m_hat = m
        return MaskFeatureBundle(pooled, dead, token, m, m_hat)

    def mask_features_batched(self, fused: torch.Tensor, tokens: torch.Tensor,
                              coeff: torch.Tensor, alive: torch.Tensor,
                              allow: torch.Tensor) -> torch.Tensor:
        """Batched equivalent of `mask_feature_bundle` over K proposals.

        `coeff` (K, H2*W2) are the precomputed pooling coefficient rows (all
        zero for dead masks), `alive` (K,) the not-dead indicator, `allow`
        (K, H2*W2) the attention masks. Attention rows are independent, so
        this matches the per-mask path.
        """
        flat = fused.flatten(1)
        pooled = coeff @ flat.T                         # (K, d2)
        s = self.se.pool(pooled) * alive.unsqueeze(-1)  # dead rows stay zero
        m = self.se.proj(torch.cat([tokens, s], dim=-1)) if self.config.use_se else s
        if not self.config.use_mfe:
            return m
        kv = flat.T + sinusoidal_2d(fused.shape[1], fused.shape[2],
                                    fused.shape[0], dtype=fused.dtype)
        return self.mfe.norm(m + self.mfe.attn(m, kv, allow=allow))


def pooling_coefficients(masks: list[np.ndarray], feat_h: int, feat_w: int):
    """Dense pooling coefficient rows, alive indicators, and attention-allow
    rows for a list of masks (precomputable: they depend only on geometry)."""
    k = len(masks)
    n = feat_h * feat_w
    coeff = np.zeros((k, n), dtype=np.float64)
    alive = np.zeros(k, dtype=np.float64)
    allow = np.zeros((k, n), dtype=bool)
    for i, mask in enumerate(masks):
        h, w = mask.shape
        box_f = bbox_to_feature_box(mask_bbox(mask), h, w, feat_h, feat_w)
        m2 = downsample_mask_binary(mask, feat_h, feat_w)
        allow[i] = m2.reshape(-1)
        weights = box_bin_weights(m2, box_f)
        if weights.sum() <= 0.0:
            continue
        idx, c = pool_taps(box_f, weights, feat_h, feat_w)
        np.add.at(coeff[i], idx, c)
        alive[i] = 1.0
    return coeff, alive, allow


def classify(m_hat: np.ndarray, queries: list[tuple[str, np.ndarray]],
             canonical: bool = False, text_encoder=None) -> list[tuple[str, float]]:
    """Cosine ranking of text queries against an enhanced mask feature.

    With `canonical`, the four canonical distractor phrases are appended via
    the text encoder. Ties keep input order; scores are scale-invariant.
    """
    if not queries:
        raise ValueError("at least one query required")
    queries = list(queries)
    if canonical:
        if text_encoder is None:
            raise ValueError("canonical phrases need a text encoder")
        queries += [(p, text_encoder(p)) for p in CANONICAL_PHRASES]
    m = np.asarray(m_hat, dtype=np.float64)
    norm_m = np.linalg.norm(m)
    scores = []
    for label, vec in queries:
        v = np.asarray(vec, dtype=np.float64)
        nv = np.linalg.norm(v)
        if nv == 0.0:
            raise ValueError(f"query {label!r} has zero norm")
        scores.append(0.0 if norm_m == 0.0 else float(m @ v / (norm_m * nv)))
    order = np.argsort(-np.asarray(scores), kind="stable")
    return [(queries[i][0], scores[i]) for i in order]
