"""Prompt-conditioned segmentation network with a latent prompt space.

A small strided CNN stands in for a foundation-scale image encoder. The prompt
encoder turns a box into two corner tokens (shared sinusoidal position encoding
plus a learned per-corner type embedding) and a learned dense "no-mask" grid.
Prior and posterior heads map embedding grids to diagonal Gaussians over a
latent z; the projected latent is added to every sparse token before decoding.
The decoder interleaves token/grid two-way attention, upsamples the grid with
transposed convolutions, and reads out per-pixel logits as a dot product with
the output token's head.

All randomness is explicit: forward passes are pure functions of (parameters,
inputs, generator state). MC dropout for the baseline sampling mode draws from
the generator passed in, never from torch's global RNG.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .data import BoxPrompt
from .distributions import GaussianDiag, sample_reparam


@dataclass
class ModelConfig:
    height: int = 64
    width: int = 64
    channels: int = 64       # embedding width C
    downscale: int = 8       # grid stride s (power of two)
    latent_dim: int = 6
    num_heads: int = 4
    num_freqs: int = 6       # sinusoidal frequencies per coordinate
    dropout_p: float = 0.5   # MC-dropout rate for the baseline sampling mode
    # Output multipliers on the zero-initialized layers. Adam moves weights by
    # ~lr per step regardless of scale, so without these the latent pathway
    # cannot reach a useful magnitude within a short training budget.
    latent_gain: float = 8.0  # on the projector output
    head_gain: float = 4.0    # on the prior/posterior head outputs
    mask_gain: float = 8.0    # on the pooled mask channel fed to the posterior

    def __post_init__(self) -> None:
        if self.downscale < 2 or self.downscale & (self.downscale - 1):
            raise ValueError(f"downscale must be a power of two >= 2, got {self.downscale}")
        if self.height % self.downscale or self.width % self.downscale:
            raise ValueError(
                f"image size {self.height}x{self.width} not divisible by downscale {self.downscale}"
            )
        if self.channels % self.num_heads:
            raise ValueError("channels must be divisible by num_heads")
        if self.channels % self.downscale:
            raise ValueError("channels must be divisible by downscale (upsampler halves per stage)")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")

    @property
    def grid_hw(self) -> tuple[int, int]:
        return self.height // self.downscale, self.width // self.downscale

    @property
    def num_stages(self) -> int:
        return self.downscale.bit_length() - 1


def mc_dropout(x: Tensor, p: float, rng: torch.Generator | None) -> Tensor:
    """Inverted dropout driven by an explicit generator; identity for p <= 0."""
    if p <= 0.0:
        return x
    keep = torch.rand(x.shape, generator=rng, dtype=x.dtype, device=x.device) >= p
    return x * keep / (1.0 - p)


def _norm2d(channels: int) -> nn.GroupNorm:
    # One group, so statistics pool over (C, H, W); per-pixel channel stats
    # degenerate on the narrow stages of small configs.
    return nn.GroupNorm(1, channels)


class ImageEncoder(nn.Module):
    """Strided CNN producing a C x h x w embedding grid (one stage per factor 2)."""

    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()
        widths = [cfg.channels >> (cfg.num_stages - 1 - i) for i in range(cfg.num_stages)]
        layers: list[nn.Module] = []
        in_ch = 1
        for w in widths:
            layers += [
                nn.Conv2d(in_ch, w, 3, stride=2, padding=1),
                _norm2d(w),
                nn.GELU(),
                nn.Conv2d(w, w, 3, padding=1),
                _norm2d(w),
                nn.GELU(),
            ]
            in_ch = w
        self.net = nn.Sequential(*layers)

    def forward(self, x: Tensor) -> Tensor:
        return self.net(x)


class PositionEncoder(nn.Module):
    """Sin/cos features of coordinates normalized to [0, 1], projected to C.

    The base angle pi * coord is injective on [0, 1], so distinct pixel
    positions always get distinct features. Shared by the box-corner tokens
    and the decoder's dense grid so both live in one spatial code.
    """

    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()
        self.cfg = cfg
        freqs = math.pi * (2.0 ** torch.arange(cfg.num_freqs, dtype=torch.float32))
        self.register_buffer("freqs", freqs, persistent=False)
        self.proj = nn.Linear(4 * cfg.num_freqs, cfg.channels)

    def encode_points(self, xy: Tensor) -> Tensor:
        """[..., 2] normalized (x, y) -> [..., C]."""
        ang = xy.unsqueeze(-1) * self.freqs.to(xy.dtype)  # [..., 2, F]
        feats = torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1).flatten(-2)
        return self.proj(feats)

    def grid(self, dtype: torch.dtype) -> Tensor:
        """[C, h, w] position code of the grid cell centers, in pixel coordinates."""
        h, w = self.cfg.grid_hw
        s = self.cfg.downscale
        ys = (torch.arange(h, dtype=dtype) + 0.5) * s / self.cfg.height
        xs = (torch.arange(w, dtype=dtype) + 0.5) * s / self.cfg.width
        yy, xx = torch.meshgrid(ys, xs, indexing="ij")
        pts = torch.stack([xx, yy], dim=-1)  # [h, w, 2] as (x, y)
        return self.encode_points(pts).permute(2, 0, 1)


class PromptEncoder(nn.Module):
    """Box -> two corner tokens plus the dense no-mask grid."""

    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()
        self.cfg = cfg
        self.pe = PositionEncoder(cfg)
        self.corner_type = nn.Parameter(torch.zeros(2, cfg.channels))
        self.no_mask = nn.Parameter(torch.zeros(cfg.channels))

    def forward(self, boxes: Tensor) -> tuple[Tensor, Tensor]:
        """[B, 4] (x1, y1, x2, y2) -> tokens [B, 2, C], dense [B, C, h, w]."""
        b = boxes.shape[0]
        scale = torch.tensor(
            [self.cfg.width, self.cfg.height], dtype=boxes.dtype, device=boxes.device
        )
        corners = boxes.reshape(b, 2, 2) / scale  # [(x1,y1), (x2,y2)] normalized
        tokens = self.pe.encode_points(corners) + self.corner_type.to(boxes.dtype)
        h, w = self.cfg.grid_hw
        dense = self.no_mask.to(boxes.dtype)[None, :, None, None].expand(b, -1, h, w)
        return tokens, dense


class GaussianHead(nn.Module):
    """Global-average-pool over the grid, then a 2-layer MLP to (mu, log_var).

    The output layer starts at zero, so every input maps to N(0, I) at init and
    the KL term starts at exactly 0; `gain` lets the zero-initialized layer
    reach useful output scales within a short optimization budget.
    """

    def __init__(self, in_channels: int, latent_dim: int, gain: float) -> None:
        super().__init__()
        hidden = 2 * in_channels
        self.fc1 = nn.Linear(in_channels, hidden)
        self.fc2 = nn.Linear(hidden, 2 * latent_dim)
        self.latent_dim = latent_dim
        self.gain = gain

    def forward(self, grid: Tensor) -> GaussianDiag:
        pooled = grid.mean(dim=(2, 3))
        out = self.gain * self.fc2(F.gelu(self.fc1(pooled)))
        mu, log_var = out[:, : self.latent_dim], out[:, self.latent_dim :]
        return GaussianDiag(mu=mu, log_var=log_var.clamp(-10.0, 10.0))


class LatentProjector(nn.Module):
    """2-layer MLP L -> C. The output layer starts at zero so z is inert at init."""

    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()
        self.fc1 = nn.Linear(cfg.latent_dim, cfg.channels)
        self.out = nn.Linear(cfg.channels, cfg.channels)
        self.gain = cfg.latent_gain

    def forward(self, z: Tensor) -> Tensor:
        return self.gain * self.out(F.gelu(self.fc1(z)))


class Attention(nn.Module):
    """Multi-head scaled dot-product attention with explicit-generator dropout."""

    def __init__(self, dim: int, num_heads: int) -> None:
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def _split(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        return x.reshape(b, n, self.num_heads, self.head_dim).transpose(1, 2)

    def forward(
        self, q: Tensor, k: Tensor, v: Tensor, dropout_p: float = 0.0,
        rng: torch.Generator | None = None,
    ) -> Tensor:
        b, n, dim = q.shape
        qh, kh, vh = self._split(self.q_proj(q)), self._split(self.k_proj(k)), self._split(self.v_proj(v))
        attn = torch.softmax(qh @ kh.transpose(-2, -1) / math.sqrt(self.head_dim), dim=-1)
        out = (attn @ vh).transpose(1, 2).reshape(b, n, dim)
        return mc_dropout(self.out_proj(out), dropout_p, rng)


class MLPBlock(nn.Module):
    def __init__(self, dim: int, hidden: int) -> None:
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: Tensor, dropout_p: float = 0.0, rng: torch.Generator | None = None) -> Tensor:
        return self.fc2(mc_dropout(F.gelu(self.fc1(x)), dropout_p, rng))


class TwoWayBlock(nn.Module):
    """Token self-attention, token->grid cross, token MLP, grid->token cross."""

    def __init__(self, dim: int, num_heads: int) -> None:
        super().__init__()
        self.self_attn = Attention(dim, num_heads)
        self.norm1 = nn.LayerNorm(dim)
        self.cross_tg = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLPBlock(dim, 2 * dim)
        self.norm3 = nn.LayerNorm(dim)
        self.cross_gt = Attention(dim, num_heads)
        self.norm4 = nn.LayerNorm(dim)

    def forward(
        self, tokens: Tensor, grid: Tensor, dropout_p: float = 0.0,
        rng: torch.Generator | None = None,
    ) -> tuple[Tensor, Tensor]:
        tokens = self.norm1(tokens + self.self_attn(tokens, tokens, tokens, dropout_p, rng))
        tokens = self.norm2(tokens + self.cross_tg(tokens, grid, grid, dropout_p, rng))
        tokens = self.norm3(tokens + self.mlp(tokens, dropout_p, rng))
        grid = self.norm4(grid + self.cross_gt(grid, tokens, tokens, dropout_p, rng))
        return tokens, grid


class OutputMLP(nn.Module):
    """3-layer head mapping the output token to the upsampled channel width."""

    def __init__(self, dim: int, out_dim: int) -> None:
        super().__init__()
        self.fc1 = nn.Linear(dim, dim)
        self.fc2 = nn.Linear(dim, dim)
        self.fc3 = nn.Linear(dim, out_dim)

    def forward(self, x: Tensor, dropout_p: float = 0.0, rng: torch.Generator | None = None) -> Tensor:
        x = mc_dropout(F.gelu(self.fc1(x)), dropout_p, rng)
        x = mc_dropout(F.gelu(self.fc2(x)), dropout_p, rng)
        return self.fc3(x)


class MaskDecoder(nn.Module):
    """Two two-way blocks, a final token->grid attention, transposed-conv
    upsampling back to full resolution, and a dot-product logit readout."""

    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()
        self.cfg = cfg
        c = cfg.channels
        self.output_token = nn.Parameter(torch.zeros(c))
        self.blocks = nn.ModuleList([TwoWayBlock(c, cfg.num_heads) for _ in range(2)])
        self.final_attn = Attention(c, cfg.num_heads)
        self.final_norm = nn.LayerNorm(c)
        up: list[nn.Module] = []
        ch = c
        for stage in range(cfg.num_stages):
            nxt = ch // 2
            up.append(nn.ConvTranspose2d(ch, nxt, 2, stride=2))
            if stage < cfg.num_stages - 1:
                up.append(_norm2d(nxt))
            up.append(nn.GELU())
            ch = nxt
        self.upscale = nn.Sequential(*up)
        self.out_mlp = OutputMLP(c, ch)

    def forward(
        self,
        emb: Tensor,
        tokens: Tensor,
        dense: Tensor,
        pe_grid: Tensor,
        dropout_p: float = 0.0,
        rng: torch.Generator | None = None,
    ) -> Tensor:
        b, c, h, w = emb.shape
        src = emb + dense + pe_grid[None]  # position code added once, at entry
        grid = src.flatten(2).transpose(1, 2)  # [B, h*w, C]
        toks = torch.cat(
            [self.output_token.to(emb.dtype).expand(b, 1, c), tokens], dim=1
        )
        for blk in self.blocks:
            toks, grid = blk(toks, grid, dropout_p, rng)
        toks = self.final_norm(toks + self.final_attn(toks, grid, grid, dropout_p, rng))
        head = self.out_mlp(toks[:, 0], dropout_p, rng)  # [B, C / s]
        feat = self.upscale(grid.transpose(1, 2).reshape(b, c, h, w))  # [B, C/s, H, W]
        return torch.einsum("bc,bchw->bhw", head, feat)


class ProbSegModel(nn.Module):
    """The full network. Parameters are immutable during inference, so
    concurrent sampling calls on shared params are safe; training mutates
    params and needs exclusive ownership."""

    def __init__(self, cfg: ModelConfig, seed: int = 0) -> None:
        super().__init__()
        self.cfg = cfg
        self.image_encoder = ImageEncoder(cfg)
        self.prompt_encoder = PromptEncoder(cfg)
        self.prior_head = GaussianHead(cfg.channels, cfg.latent_dim, cfg.head_gain)
        self.posterior_head = GaussianHead(cfg.channels + 1, cfg.latent_dim, cfg.head_gain)
        self.projector = LatentProjector(cfg)
        self.decoder = MaskDecoder(cfg)
        self.reset_parameters(seed)

    # -- initialization ----------------------------------------------------

    def reset_parameters(self, seed: int) -> None:
        """Deterministic init from an explicit generator; global RNG untouched.

        The latent projector's output layer is zeroed afterwards so every
        forward pass starts independent of z.
        """
        g = torch.Generator().manual_seed(seed)
        for m in self.modules():
            if isinstance(m, (nn.Linear, nn.Conv2d, nn.ConvTranspose2d)):
                nn.init.kaiming_uniform_(m.weight, a=math.sqrt(5), generator=g)
                if m.bias is not None:
                    fan_in, _ = nn.init._calculate_fan_in_and_fan_out(m.weight)
                    bound = 1.0 / math.sqrt(fan_in) if fan_in > 0 else 0.0
                    nn.init.uniform_(m.bias, -bound, bound, generator=g)
            elif isinstance(m, (nn.LayerNorm, nn.GroupNorm)):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
        nn.init.normal_(self.prompt_encoder.corner_type, std=1.0, generator=g)
        nn.init.normal_(self.prompt_encoder.no_mask, std=1.0, generator=g)
        nn.init.normal_(self.decoder.output_token, std=1.0, generator=g)
        nn.init.zeros_(self.projector.out.weight)
        nn.init.zeros_(self.projector.out.bias)
        for head in (self.prior_head, self.posterior_head):
            nn.init.zeros_(head.fc2.weight)
            nn.init.zeros_(head.fc2.bias)

    # -- input coercion ----------------------------------------------------

    @property
    def dtype(self) -> torch.dtype:
        return self.projector.out.weight.dtype

    def _image_batch(self, image: np.ndarray | Tensor) -> tuple[Tensor, bool]:
        t = torch.as_tensor(np.asarray(image)) if isinstance(image, np.ndarray) else image
        single = t.ndim == 2
        if single:
            t = t[None, None]
        elif t.ndim == 3:  # [B, H, W]
            t = t[:, None]
        if t.ndim != 4 or t.shape[1] != 1:
            raise ValueError(f"expected an (H, W) image or (B, 1, H, W) batch, got {tuple(t.shape)}")
        if t.shape[-2:] != (self.cfg.height, self.cfg.width):
            raise ValueError(
                f"image shape {tuple(t.shape[-2:])} != configured "
                f"({self.cfg.height}, {self.cfg.width})"
            )
        return t.to(self.dtype), single

    def _mask_batch(self, mask: np.ndarray | Tensor) -> tuple[Tensor, bool]:
        t = torch.as_tensor(np.asarray(mask)) if isinstance(mask, np.ndarray) else mask
        single = t.ndim == 2
        if single:
            t = t[None]
        if t.ndim != 3 or t.shape[-2:] != (self.cfg.height, self.cfg.width):
            raise ValueError(f"expected an (H, W) mask or (B, H, W) batch, got {tuple(t.shape)}")
        t = t.to(self.dtype)
        if not bool(((t == 0) | (t == 1)).all()):
            raise ValueError("mask values must be binary (0 or 1)")
        return t, single

    def _box_batch(self, box: BoxPrompt | Tensor) -> tuple[Tensor, bool]:
        if isinstance(box, BoxPrompt):
            box.validate(self.cfg.height, self.cfg.width)
            return torch.tensor([box.as_list()], dtype=self.dtype), True
        t = box.to(self.dtype)
        single = t.ndim == 1
        if single:
            t = t[None]
        if t.ndim != 2 or t.shape[1] != 4:
            raise ValueError(f"expected a BoxPrompt or (B, 4) tensor, got {tuple(t.shape)}")
        return t, single

    @staticmethod
    def _as_generator(rng: torch.Generator | int) -> torch.Generator:
        if isinstance(rng, torch.Generator):
            return rng
        return torch.Generator().manual_seed(int(rng))

    # -- spec-level operations ----------------------------------------------

    def encode_image(self, image: np.ndarray | Tensor) -> Tensor:
        """Image -> [C, h, w] embedding grid ([B, C, h, w] for batches)."""
        t, single = self._image_batch(image)
        emb = self.image_encoder(t)
        return emb[0] if single else emb

    def encode_prompt(self, box: BoxPrompt | Tensor) -> tuple[Tensor, Tensor]:
        """Box -> (corner tokens [2, C], dense no-mask grid [C, h, w])."""
        t, single = self._box_batch(box)
        tokens, dense = self.prompt_encoder(t)
        return (tokens[0], dense[0]) if single else (tokens, dense)

    def _grid_batch(self, emb: Tensor) -> tuple[Tensor, bool]:
        single = emb.ndim == 3
        if single:
            emb = emb[None]
        h, w = self.cfg.grid_hw
        if emb.shape[1:] != (self.cfg.channels, h, w):
            raise ValueError(
                f"embedding shape {tuple(emb.shape[1:])} != ({self.cfg.channels}, {h}, {w})"
            )
        return emb, single

    def prior_forward(self, emb: Tensor) -> GaussianDiag:
        emb, single = self._grid_batch(emb)
        q = self.prior_head(emb)
        return GaussianDiag(q.mu[0], q.log_var[0]) if single else q

    def posterior_forward(self, emb: Tensor, gt: np.ndarray | Tensor) -> GaussianDiag:
        """Embedding plus ground-truth mask (area-pooled to the grid, appended
        as an extra channel) -> latent Gaussian."""
        emb, single = self._grid_batch(emb)
        mask, mask_single = self._mask_batch(gt)
        if mask_single != single:
            raise ValueError("embedding and mask batching disagree")
        pooled = F.avg_pool2d(mask[:, None], kernel_size=self.cfg.downscale)
        # foreground fractions are ~0.1; rescale the channel into the
        # embedding channels' dynamic range
        q = self.posterior_head(torch.cat([emb, self.cfg.mask_gain * pooled], dim=1))
        return GaussianDiag(q.mu[0], q.log_var[0]) if single else q

    def inject_latent(self, z: Tensor, tokens: Tensor) -> Tensor:
        """tokens + projected z, the same vector added to every token row."""
        if z.shape[-1] != self.cfg.latent_dim:
            raise ValueError(f"z has dim {z.shape[-1]}, expected {self.cfg.latent_dim}")
        v = self.projector(z.to(self.dtype))
        return tokens + v.unsqueeze(-2)

    def decode(
        self,
        emb: Tensor,
        tokens: Tensor,
        dense: Tensor,
        dropout_active: bool = False,
        rng: torch.Generator | int | None = None,
    ) -> Tensor:
        """-> per-pixel logits [H, W] ([B, H, W] for batches)."""
        emb, single = self._grid_batch(emb)
        if single:
            tokens, dense = tokens[None], dense[None]
        if dropout_active and rng is None:
            raise ValueError("dropout_active requires an rng")
        p = self.cfg.dropout_p if dropout_active else 0.0
        gen = self._as_generator(rng) if dropout_active else None
        pe_grid = self.prompt_encoder.pe.grid(self.dtype)
        logits = self.decoder(emb, tokens, dense, pe_grid, p, gen)
        return logits[0] if single else logits

    def forward_train(
        self,
        image: np.ndarray | Tensor,
        box: BoxPrompt | Tensor,
        gt: np.ndarray | Tensor,
        noise: Tensor,
    ) -> tuple[Tensor, GaussianDiag, GaussianDiag]:
        """Training path: z is drawn from the posterior with the given noise;
        returns (logits, q, p) for the loss. Dropout stays off."""
        emb = self.encode_image(image)
        tokens, dense = self.encode_prompt(box)
        q = self.posterior_forward(emb, gt)
        p = self.prior_forward(emb)
        z = sample_reparam(q, noise.to(self.dtype))
        tokens = self.inject_latent(z, tokens)
        logits = self.decode(emb, tokens, dense)
        return logits, q, p

    @torch.no_grad()
    def forward_mean(
        self,
        image: np.ndarray | Tensor,
        box: BoxPrompt | Tensor,
        gt: np.ndarray | Tensor | None = None,
    ) -> np.ndarray:
        """Deterministic prediction at the prior mean (posterior mean when gt
        is given); sigmoid thresholded at 0.5. Returns a bool [H, W] mask."""
        emb = self.encode_image(image)
        tokens, dense = self.encode_prompt(box)
        dist = self.prior_forward(emb) if gt is None else self.posterior_forward(emb, gt)
        tokens = self.inject_latent(dist.mu, tokens)
        logits = self.decode(emb, tokens, dense)
        return (logits > 0).cpu().numpy()

    @torch.no_grad()
    def forward_sample(
        self,
        image: np.ndarray | Tensor,
        box: BoxPrompt | Tensor,
        m: int,
        rng: torch.Generator | int,
    ) -> np.ndarray:
        """Draw m masks from the prior latent. Encoders run exactly once;
        only the latent injection and decode repeat. Returns bool [m, H, W]."""
        if m < 1:
            raise ValueError(f"m must be >= 1, got {m}")
        gen = self._as_generator(rng)
        emb = self.encode_image(image)
        tokens, dense = self.encode_prompt(box)
        prior = self.prior_forward(emb)
        masks = []
        for _ in range(m):
            noise = torch.randn(prior.mu.shape, generator=gen, dtype=self.dtype)
            z = sample_reparam(prior, noise)
            logits = self.decode(emb, self.inject_latent(z, tokens), dense)
            masks.append((logits > 0).cpu().numpy())
        return np.stack(masks)

    @torch.no_grad()
    def forward_sample_dropout(
        self,
        image: np.ndarray | Tensor,
        box: BoxPrompt | Tensor,
        m: int,
        rng: torch.Generator | int,
    ) -> np.ndarray:
        """Baseline mode: z pinned at the prior mean, MC dropout active per draw."""
        if m < 1:
            raise ValueError(f"m must be >= 1, got {m}")
        gen = self._as_generator(rng)
        emb = self.encode_image(image)
        tokens, dense = self.encode_prompt(box)
        prior = self.prior_forward(emb)
        injected = self.inject_latent(prior.mu, tokens)
        masks = []
        for _ in range(m):
            logits = self.decode(emb, injected, dense, dropout_active=True, rng=gen)
            masks.append((logits > 0).cpu().numpy())
        return np.stack(masks)

    # -- batched training internals -----------------------------------------

    def forward_train_batch(
        self, images: Tensor, boxes: Tensor, gts: Tensor, noise: Tensor
    ) -> tuple[Tensor, GaussianDiag, GaussianDiag]:
        """Batched forward_train over pre-stacked tensors ([B,1,H,W], [B,4],
        [B,H,W], [B,L])."""
        emb = self.image_encoder(images.to(self.dtype))
        tokens, dense = self.prompt_encoder(boxes.to(self.dtype))
        q = self.posterior_forward(emb, gts)
        p = self.prior_forward(emb)
        z = sample_reparam(q, noise.to(self.dtype))
        logits = self.decode(emb, self.inject_latent(z, tokens), dense)
        return logits, q, p
