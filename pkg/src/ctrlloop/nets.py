"""Networks: frozen feature encoder, pose-condition embedder, conditional
denoiser U-Net.

The encoder is a randomly initialized two-layer convnet with patch pooling.
It is frozen for the entire lifetime of a run: its parameters are a pure
function of its seed and no optimizer ever touches them. Generated images
are re-encoded through it, so the training signal of closed-loop steps lives
in its feature space rather than pixel space; gradients flow *through* the
frozen weights back to the generator.

Every activation in both networks is smooth, which keeps finite-difference
gradient checks meaningful, and there is no batch-coupling (GroupNorm only),
so per-sample outputs do not depend on batch composition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import DenoiserConfig, EncoderConfig
from .diffusion import NumericalFailure
from .rng import torch_gen


@dataclass(frozen=True)
class EncoderFeatures:
    """Global feature plus per-patch features from the frozen encoder."""

    z_class: torch.Tensor  # (B, class_dim)
    z_patch: torch.Tensor  # (B, P, patch_dim)


_ACTS = {"tanh": torch.tanh, "silu": F.silu}


def seeded_init_(module: nn.Module, gen: torch.Generator) -> None:
    """Fill conv/linear weights uniformly at 1/sqrt(fan_in) scale, biases zero.

    Draws come only from ``gen``, never the global RNG, so module parameters
    are a pure function of the seed that built the generator.
    """
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight.shape[1] * (
                m.weight.shape[2] * m.weight.shape[3] if m.weight.ndim == 4 else 1
            )
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=gen)
                if m.bias is not None:
                    m.bias.zero_()


class FrozenEncoder(nn.Module):
    """Two smooth conv layers, patch-average pooling, fixed class projection."""

    def __init__(self, config: EncoderConfig, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.config = config
        w1, w2 = config.widths
        self.conv1 = nn.Conv2d(config.in_channels, w1, 3, padding=1)
        self.conv2 = nn.Conv2d(w1, w2, 3, padding=1)
        self.act = _ACTS[config.nonlinearity]
        gen = torch_gen(config.seed, "encoder-init")
        seeded_init_(self, gen)
        # biases drawn too: a zero-bias tanh net is odd-symmetric, which would
        # make +x and -x indistinguishable in feature space
        for m in (self.conv1, self.conv2):
            with torch.no_grad():
                m.bias.uniform_(-0.1, 0.1, generator=gen)
        if config.class_dim > config.patch_dim:
            raise ValueError("class_dim cannot exceed the patch feature dim")
        square = torch.randn(config.patch_dim, config.patch_dim, generator=gen, dtype=torch.float64)
        q, _ = torch.linalg.qr(square)
        self.register_buffer("class_proj", q[: config.class_dim].to(dtype))
        self.to(dtype)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, image: torch.Tensor) -> EncoderFeatures:
        """image: (B, C, H, W) in model range [-1, 1], H and W multiples of patch_size."""
        ps = self.config.patch_size
        if image.ndim != 4 or image.shape[1] != self.config.in_channels:
            raise ValueError(
                f"expected (B, {self.config.in_channels}, H, W) input, got {tuple(image.shape)}"
            )
        if image.shape[2] % ps or image.shape[3] % ps:
            raise ValueError(f"spatial dims {tuple(image.shape[2:])} not divisible by patch size {ps}")
        h = self.act(self.conv1(image))
        h = self.act(self.conv2(h))
        pooled = F.avg_pool2d(h, ps)  # (B, d_p, H/ps, W/ps)
        z_patch = pooled.flatten(2).transpose(1, 2)  # (B, P, d_p)
        z_class = z_patch.mean(dim=1) @ self.class_proj.T
        return EncoderFeatures(z_class=z_class, z_patch=z_patch)


class ConditionEmbedder(nn.Module):
    """Linear map from (class feature, 4-dim relative pose) to the condition.

    Trained jointly with the denoiser; the two together are the generator's
    full parameter set.
    """

    def __init__(self, class_dim: int, cond_dim: int, seed: int, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.linear = nn.Linear(class_dim + 4, cond_dim)
        seeded_init_(self, torch_gen(seed, "embedder-init"))
        self.to(dtype)

    def forward(self, z_class: torch.Tensor, rel_pose: torch.Tensor) -> torch.Tensor:
        return self.linear(torch.cat([z_class, rel_pose], dim=1))


def timestep_embedding(t: torch.Tensor, dim: int, dtype: torch.dtype) -> torch.Tensor:
    """Sinusoidal features of the (integer) timestep, dim must be even."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=dtype) / max(half - 1, 1)
    )
    args = t.to(dtype)[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ResBlock(nn.Module):
    """3x3 conv pair with GroupNorm and per-block scale-shift conditioning."""

    def __init__(self, in_ch: int, out_ch: int, emb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(1, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm2 = nn.GroupNorm(1, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, 2 * out_ch)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.emb_proj(F.silu(emb)).chunk(2, dim=1)
        h = self.norm2(h) * (1.0 + scale[:, :, None, None]) + shift[:, :, None, None]
        h = self.conv2(F.silu(h))
        return h + self.skip(x)


class Denoiser(nn.Module):
    """Conditional U-Net predicting the injected noise.

    Levels follow ``channel_mults``; each downsample halves the resolution.
    The timestep enters through a sinusoidal embedding, the condition vector
    through a linear map; their sum modulates every residual block via
    learned scale and shift.
    """

    def __init__(self, config: DenoiserConfig, dtype: torch.dtype = torch.float32):
        super().__init__()
        if config.emb_dim % 2:
            raise ValueError("emb_dim must be even")
        self.config = config
        widths = [config.base_width * m for m in config.channel_mults]
        emb = config.emb_dim

        self.time_mlp = nn.Sequential(
            nn.Linear(emb, emb), nn.SiLU(), nn.Linear(emb, emb)
        )
        self.cond_proj = nn.Linear(config.cond_dim, emb)

        self.stem = nn.Conv2d(config.in_channels, widths[0], 3, padding=1)
        self.down_blocks = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        for i, w in enumerate(widths):
            level = nn.ModuleList(
                [ResBlock(w, w, emb) for _ in range(config.blocks_per_level)]
            )
            self.down_blocks.append(level)
            if i < len(widths) - 1:
                self.downsamples.append(nn.Conv2d(w, widths[i + 1], 3, stride=2, padding=1))

        self.middle = ResBlock(widths[-1], widths[-1], emb)

        self.upsamples = nn.ModuleList()
        self.up_blocks = nn.ModuleList()
        for i in reversed(range(len(widths) - 1)):
            self.upsamples.append(nn.Conv2d(widths[i + 1], widths[i], 3, padding=1))
            level = nn.ModuleList(
                [ResBlock(2 * widths[i] if b == 0 else widths[i], widths[i], emb)
                 for b in range(config.blocks_per_level)]
            )
            self.up_blocks.append(level)

        self.head_norm = nn.GroupNorm(1, widths[0])
        self.head = nn.Conv2d(widths[0], config.in_channels, 3, padding=1)

        seeded_init_(self, torch_gen(config.seed, "denoiser-init"))
        with torch.no_grad():
            self.head.weight.zero_()  # start from eps_hat = 0
        self.to(dtype)

    def forward(self, x_t: torch.Tensor, condition: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        if x_t.ndim != 4 or x_t.shape[1] != cfg.in_channels:
            raise ValueError(f"expected (B, {cfg.in_channels}, H, W) input, got {tuple(x_t.shape)}")
        depth = len(cfg.channel_mults) - 1
        if x_t.shape[2] % (1 << depth) or x_t.shape[3] % (1 << depth):
            raise ValueError(f"spatial dims must be divisible by {1 << depth}")
        if t.ndim == 0:
            t = t.expand(x_t.shape[0])

        dtype = x_t.dtype
        emb = self.time_mlp(timestep_embedding(t, cfg.emb_dim, dtype)) + self.cond_proj(condition)

        h = self.stem(x_t)
        skips = []
        for i, level in enumerate(self.down_blocks):
            for block in level:
                h = block(h, emb)
            skips.append(h)
            if i < len(self.down_blocks) - 1:
                h = self.downsamples[i](h)

        h = self.middle(h, emb)

        for j, level in enumerate(self.up_blocks):
            h = self.upsamples[j](F.interpolate(h, scale_factor=2, mode="nearest"))
            h = torch.cat([h, skips[-(j + 2)]], dim=1)
            for block in level:
                h = block(h, emb)

        out = self.head(F.silu(self.head_norm(h)))
        if not torch.isfinite(out.detach()).all():
            raise NumericalFailure("denoiser produced non-finite activations")
        return out


@dataclass
class ModelBundle:
    """The three networks of one run plus their configs."""

    encoder: FrozenEncoder
    embedder: ConditionEmbedder
    denoiser: Denoiser

    def trainable_modules(self) -> list[nn.Module]:
        return [self.embedder, self.denoiser]

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for m in self.trainable_modules() for p in m.parameters()]

    def named_trainable_parameters(self) -> dict[str, nn.Parameter]:
        out: dict[str, nn.Parameter] = {}
        for prefix, mod in (("embedder", self.embedder), ("denoiser", self.denoiser)):
            for name, p in mod.named_parameters():
                out[f"{prefix}.{name}"] = p
        return out


def build_bundle(
    enc_config: EncoderConfig, den_config: DenoiserConfig, dtype: torch.dtype = torch.float32
) -> ModelBundle:
    encoder = FrozenEncoder(enc_config, dtype=dtype)
    embedder = ConditionEmbedder(
        enc_config.class_dim, den_config.cond_dim, den_config.seed, dtype=dtype
    )
    denoiser = Denoiser(den_config, dtype=dtype)
    return ModelBundle(encoder=encoder, embedder=embedder, denoiser=denoiser)
