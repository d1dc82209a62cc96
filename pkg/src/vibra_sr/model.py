"""Hybrid attention / state-space U-Net.

Encoder: strided conv + LeakyReLU + SAFiLM per level.
Bottleneck: stacked selective state-space (Mamba-style) layers, or a
linear-complexity attention stack for the ablation.
Decoder: conv + dropout + LeakyReLU + 1-D pixelshuffle + SAFiLM; the last
level only does conv + pixelshuffle. Down-level outputs are added to the
matching decoder inputs and the network input is added to the output.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace

import torch
import torch.nn as nn
import torch.nn.functional as F


class ConfigError(ValueError):
    pass


BOTTLENECK_KINDS = ("mamba", "performer_like_attention", "none")
ABLATIONS = ("full", "replace_mamba_with_attention", "remove_safilm")


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 3
    down_filters: tuple = (64, 128, 256)
    down_kernels: tuple = (65, 17, 7)
    up_filters: tuple = (512, 256, 4)
    up_kernels: tuple = (7, 17, 65)
    stride: int = 4
    safilm_blocks: int = 8
    safilm_layers: int = 2
    attn_heads: int = 2
    attn_model_dim: int | None = None
    attn_ff_mult: int = 2
    ssm_state_dim: int = 16
    ssm_expand: int = 2
    ssm_conv_kernel: int = 4
    ssm_layers: int = 2
    performer_features: int = 64
    performer_ff_mult: int = 4
    dropout_p: float = 0.1
    leaky_slope: float = 0.2
    bottleneck_kind: str = "mamba"
    safilm_enabled: bool = True
    global_residual: bool = True
    input_grid: str = "pre_upsampled"

    def __post_init__(self):
        for name in ("down_filters", "down_kernels", "up_filters", "up_kernels"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        self.validate()

    def validate(self):
        d = self.depth
        if d < 1:
            raise ConfigError("depth must be >= 1")
        for name in ("down_filters", "down_kernels", "up_filters", "up_kernels"):
            if len(getattr(self, name)) != d:
                raise ConfigError(f"{name} must have {d} entries")
        if self.stride < 1:
            raise ConfigError("stride must be >= 1")
        for k in self.down_kernels + self.up_kernels:
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"kernel sizes must be odd and positive, got {k}")
        # decoder output channels after pixelshuffle must match the skip they meet
        expected = [c for c in reversed(self.down_filters[:-1])] + [1]
        for b, (f, want) in enumerate(zip(self.up_filters, expected)):
            if f % self.stride or f // self.stride != want:
                raise ConfigError(
                    f"up_filters[{b}]={f} must equal stride*{want} to align with its skip"
                )
        if self.bottleneck_kind not in BOTTLENECK_KINDS:
            raise ConfigError(f"bottleneck_kind must be one of {BOTTLENECK_KINDS}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError("dropout_p must be in [0, 1)")
        if self.safilm_blocks < 1 or self.safilm_layers < 1:
            raise ConfigError("safilm_blocks and safilm_layers must be >= 1")
        if self.ssm_state_dim < 1 or self.ssm_expand < 1 or self.ssm_layers < 1:
            raise ConfigError("state-space dims must be >= 1")
        if self.input_grid != "pre_upsampled":
            raise ConfigError("only the pre_upsampled input grid is supported")
        for c in self._attention_widths():
            if c % self.attn_heads:
                raise ConfigError(f"attn_heads={self.attn_heads} does not divide width {c}")

    def _attention_widths(self):
        if self.attn_model_dim is not None:
            return [self.attn_model_dim]
        return list(self.down_filters) + [self.down_filters[-1]]

    @property
    def min_length(self) -> int:
        return self.stride ** self.depth

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        """Small config used for gradient checks, smoke training and CI."""
        base = dict(
            down_filters=(4, 8, 16), down_kernels=(5, 3, 3),
            up_filters=(32, 16, 4), up_kernels=(3, 3, 5),
            safilm_blocks=2, safilm_layers=1, attn_heads=2, attn_ff_mult=2,
            ssm_state_dim=2, ssm_expand=1, ssm_conv_kernel=2, ssm_layers=1,
            performer_features=8, performer_ff_mult=2, dropout_p=0.0,
        )
        base.update(overrides)
        return cls(**base)


def build_ablation(cfg: ModelConfig, variant: str) -> ModelConfig:
    if variant == "full":
        return cfg
    if variant == "replace_mamba_with_attention":
        return replace(cfg, bottleneck_kind="performer_like_attention")
    if variant == "remove_safilm":
        return replace(cfg, safilm_enabled=False)
    raise ConfigError(f"unknown ablation variant {variant!r}; expected one of {ABLATIONS}")


# --- primitives -------------------------------------------------------------

def pixelshuffle_1d(x: torch.Tensor, r: int) -> torch.Tensor:
    """(N, C, T) -> (N, C/r, T*r) with out[c, t*r + j] = in[c*r + j, t]."""
    n, c, t = x.shape
    if c % r:
        raise ValueError(f"channels {c} not divisible by shuffle factor {r}")
    return x.reshape(n, c // r, r, t).permute(0, 1, 3, 2).reshape(n, c // r, t * r)


def pixelunshuffle_1d(x: torch.Tensor, r: int) -> torch.Tensor:
    n, c, t = x.shape
    if t % r:
        raise ValueError(f"length {t} not divisible by factor {r}")
    return x.reshape(n, c, t // r, r).permute(0, 1, 3, 2).reshape(n, c * r, t // r)


def effective_blocks(length: int, blocks: int) -> int:
    # halve the block count while blocks would hold fewer than 4 frames
    while blocks > 1 and length / blocks < 4:
        blocks //= 2
    return blocks


def block_modulate(x: torch.Tensor, gamma: torch.Tensor) -> torch.Tensor:
    """Scale each temporal block of ``x`` (N, C, T) by ``gamma`` (N, B, C)."""
    t = x.shape[-1]
    nb = gamma.shape[1]
    block_len = math.ceil(t / nb)
    g = gamma.transpose(1, 2).repeat_interleave(block_len, dim=2)[..., :t]
    return x * g


class TransformerLayer(nn.Module):
    """Pre-norm self-attention + feed-forward, both with residual paths."""

    def __init__(self, dim, heads, ff_mult):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, ff_mult * dim), nn.GELU(), nn.Linear(ff_mult * dim, dim))

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.ff(self.norm2(x))


class SaFilm(nn.Module):
    """Scale-only attention FiLM over max-pooled temporal blocks."""

    def __init__(self, channels, blocks, layers=1, heads=2, model_dim=None, ff_mult=2):
        super().__init__()
        self.channels = channels
        self.blocks = blocks
        dim = model_dim or channels
        self.proj_in = nn.Linear(channels, dim) if dim != channels else nn.Identity()
        self.layers = nn.ModuleList(TransformerLayer(dim, heads, ff_mult) for _ in range(layers))
        self.to_gamma = nn.Linear(dim, channels)
        nn.init.zeros_(self.to_gamma.weight)
        nn.init.ones_(self.to_gamma.bias)

    def pool(self, x):
        t = x.shape[-1]
        nb = effective_blocks(t, self.blocks)
        block_len = math.ceil(t / nb)
        pad = nb * block_len - t
        if pad:
            x = F.pad(x, (0, pad))
        return x.reshape(x.shape[0], x.shape[1], nb, block_len).amax(dim=-1).transpose(1, 2)

    def scales(self, x):
        h = self.proj_in(self.pool(x))
        for layer in self.layers:
            h = layer(h)
        gamma = self.to_gamma(h)
        if not torch.isfinite(gamma).all():
            raise FloatingPointError("SAFiLM produced non-finite scales")
        return gamma

    def forward(self, x, gamma=None):
        if gamma is None:
            gamma = self.scales(x)
        return block_modulate(x, gamma)


# --- selective state space --------------------------------------------------

def selective_scan(u, delta, A, B, C, D=None):
    """Zero-order-hold discretized diagonal selective scan.

    u, delta: (N, D, L) or (D, L); A: (D, S) with non-positive entries;
    B, C: (N, S, L) or (S, L); D: (D,) passthrough gain. h_0 = 0.
    """
    squeeze = u.dim() == 2
    if squeeze:
        u, delta = u.unsqueeze(0), delta.unsqueeze(0)
        B, C = B.unsqueeze(0), C.unsqueeze(0)
    if (delta <= 0).any():
        raise ValueError("step size delta must be positive")
    dA = delta.unsqueeze(-1) * A[None, :, None, :]            # (N, D, L, S)
    a_bar = torch.exp(dA)
    small = A.abs() < 1e-12
    A_safe = torch.where(small, torch.ones_like(A), A)
    # (exp(dA) - 1) / A, with the A -> 0 limit equal to delta
    b_scale = torch.where(small[None, :, None, :], delta.unsqueeze(-1).expand_as(dA),
                          torch.expm1(dA) / A_safe[None, :, None, :])
    bu = b_scale * B.transpose(1, 2).unsqueeze(1) * u.unsqueeze(-1)
    y = linear_recurrence(a_bar, bu, C.transpose(1, 2).unsqueeze(1))
    if D is not None:
        y = y + D[None, :, None] * u
    return y.squeeze(0) if squeeze else y


def linear_recurrence(a_bar, bu, c):
    """h_l = a_bar_l * h_{l-1} + bu_l ; y_l = <c_l, h_l>. Inputs are (N, D, L, S)."""
    n, d, length, s = a_bar.shape
    h = a_bar.new_zeros(n, d, s)
    ys = []
    for l in range(length):
        h = a_bar[:, :, l] * h + bu[:, :, l]
        ys.append((h * c[:, :, l]).sum(-1))
    return torch.stack(ys, dim=-1)


class MambaMixer(nn.Module):
    def __init__(self, dim, state_dim=16, expand=2, conv_kernel=4):
        super().__init__()
        inner = expand * dim
        self.inner = inner
        self.state_dim = state_dim
        self.dt_rank = max(1, math.ceil(dim / 16))
        self.in_proj = nn.Linear(dim, 2 * inner, bias=False)
        self.conv = nn.Conv1d(inner, inner, conv_kernel, groups=inner, padding=conv_kernel - 1)
        self.x_proj = nn.Linear(inner, self.dt_rank + 2 * state_dim, bias=False)
        self.dt_proj = nn.Linear(self.dt_rank, inner)
        self.A_log = nn.Parameter(torch.log(torch.arange(1, state_dim + 1, dtype=torch.float32)).repeat(inner, 1))
        self.D = nn.Parameter(torch.ones(inner))
        self.out_proj = nn.Linear(inner, dim, bias=False)
        # softplus(dt bias) spread log-uniformly in [1e-3, 1e-1]
        dt = torch.exp(torch.rand(inner) * (math.log(0.1) - math.log(1e-3)) + math.log(1e-3))
        with torch.no_grad():
            self.dt_proj.bias.copy_(dt + torch.log(-torch.expm1(-dt)))

    def forward(self, x):
        # x: (N, L, dim)
        length = x.shape[1]
        xz = self.in_proj(x)
        xs, z = xz.chunk(2, dim=-1)
        xs = self.conv(xs.transpose(1, 2))[..., :length]
        xs = F.silu(xs)                                             # (N, inner, L)
        proj = self.x_proj(xs.transpose(1, 2))
        dt, Bm, Cm = torch.split(proj, [self.dt_rank, self.state_dim, self.state_dim], dim=-1)
        delta = F.softplus(self.dt_proj(dt)).transpose(1, 2)      # (N, inner, L)
        # floor keeps delta strictly positive under softplus underflow
        delta = delta.clamp_min(1e-12)
        A = -torch.exp(self.A_log)
        y = selective_scan(xs, delta, A, Bm.transpose(1, 2), Cm.transpose(1, 2), self.D)
        y = y.transpose(1, 2) * F.silu(z)
        return self.out_proj(y)


class ResidualBlock(nn.Module):
    def __init__(self, dim, mixer):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.mixer = mixer

    def forward(self, x):
        return x + self.mixer(self.norm(x))


class PerformerAttention(nn.Module):
    """Multi-head attention with FAVOR+ positive random features (linear in length)."""

    def __init__(self, dim, heads, n_features, seed=0):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)
        gen = torch.Generator().manual_seed(seed)
        proj = _orthogonal_gaussian(n_features, self.head_dim, gen)
        self.register_buffer("features", proj, persistent=True)

    def _phi(self, x, is_query):
        x = x * self.head_dim ** -0.25
        wx = x @ self.features.to(x.dtype).t()
        sq = 0.5 * (x ** 2).sum(-1, keepdim=True)
        logits = wx - sq
        if is_query:
            stab = logits.amax(dim=-1, keepdim=True)
        else:
            stab = logits.amax(dim=(-1, -2), keepdim=True)
        return torch.exp(logits - stab.detach()) + 1e-6

    def forward(self, x):
        n, length, dim = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        split = lambda t: t.reshape(n, length, self.heads, self.head_dim).transpose(1, 2)
        q, k, v = split(q), split(k), split(v)
        qp, kp = self._phi(q, True), self._phi(k, False)
        kv = kp.transpose(-1, -2) @ v                           # (N, H, m, hd)
        norm = qp @ kp.sum(dim=-2, keepdim=True).transpose(-1, -2)
        out = (qp @ kv) / norm
        return self.out(out.transpose(1, 2).reshape(n, length, dim))


def _orthogonal_gaussian(rows, cols, gen):
    blocks = []
    for _ in range(math.ceil(rows / cols)):
        q, _ = torch.linalg.qr(torch.randn(cols, cols, generator=gen))
        blocks.append(q.t())
    w = torch.cat(blocks)[:rows]
    norms = torch.randn(rows, cols, generator=gen).norm(dim=1, keepdim=True)
    return w * norms


class FeedForward(nn.Module):
    def __init__(self, dim, mult):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(dim, mult * dim), nn.GELU(), nn.Linear(mult * dim, dim))

    def forward(self, x):
        return self.net(x)


def make_bottleneck(cfg: ModelConfig) -> nn.Module:
    dim = cfg.down_filters[-1]
    if cfg.bottleneck_kind == "none":
        return nn.Identity()
    layers = []
    if cfg.bottleneck_kind == "mamba":
        for _ in range(cfg.ssm_layers):
            layers.append(ResidualBlock(dim, MambaMixer(dim, cfg.ssm_state_dim, cfg.ssm_expand, cfg.ssm_conv_kernel)))
    else:
        for i in range(cfg.ssm_layers):
            layers.append(ResidualBlock(dim, PerformerAttention(dim, cfg.attn_heads, cfg.performer_features, seed=i)))
            layers.append(ResidualBlock(dim, FeedForward(dim, cfg.performer_ff_mult)))
    return _SequenceBottleneck(nn.Sequential(*layers))


class _SequenceBottleneck(nn.Module):
    def __init__(self, body):
        super().__init__()
        self.body = body

    def forward(self, x):
        return self.body(x.transpose(1, 2)).transpose(1, 2)


# --- U-Net ------------------------------------------------------------------

class DownBlock(nn.Module):
    def __init__(self, c_in, c_out, kernel, cfg: ModelConfig):
        super().__init__()
        self.stride = cfg.stride
        self.conv = nn.Conv1d(c_in, c_out, kernel, stride=cfg.stride, padding=kernel // 2)
        self.act = nn.LeakyReLU(cfg.leaky_slope)
        self.safilm = _make_safilm(c_out, cfg)

    def forward(self, x):
        if x.shape[-1] % self.stride:
            raise ValueError(f"length {x.shape[-1]} not divisible by stride {self.stride}")
        h = self.act(self.conv(x))
        return self.safilm(h) if self.safilm is not None else h


class UpBlock(nn.Module):
    def __init__(self, c_in, filters, kernel, cfg: ModelConfig, final=False):
        super().__init__()
        self.stride = cfg.stride
        self.final = final
        self.conv = nn.Conv1d(c_in, filters, kernel, padding=kernel // 2)
        if not final:
            self.dropout = nn.Dropout(cfg.dropout_p)
            self.act = nn.LeakyReLU(cfg.leaky_slope)
            self.safilm = _make_safilm(filters // cfg.stride, cfg)
        else:
            self.safilm = None

    def forward(self, x):
        h = self.conv(x)
        if not self.final:
            h = self.act(self.dropout(h))
        h = pixelshuffle_1d(h, self.stride)
        return self.safilm(h) if self.safilm is not None else h


def _make_safilm(channels, cfg: ModelConfig):
    if not cfg.safilm_enabled:
        return None
    return SaFilm(channels, cfg.safilm_blocks, cfg.safilm_layers, cfg.attn_heads,
                  cfg.attn_model_dim, cfg.attn_ff_mult)


class HybridUNet(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        chans = [1] + list(cfg.down_filters)
        self.down = nn.ModuleList(
            DownBlock(chans[b], chans[b + 1], cfg.down_kernels[b], cfg) for b in range(cfg.depth)
        )
        self.bottleneck = make_bottleneck(cfg)
        up_in = [cfg.down_filters[-1]] + [f // cfg.stride for f in cfg.up_filters[:-1]]
        self.up = nn.ModuleList(
            UpBlock(up_in[b], cfg.up_filters[b], cfg.up_kernels[b], cfg, final=(b == cfg.depth - 1))
            for b in range(cfg.depth)
        )
        self.reset_parameters()

    def reset_parameters(self):
        for m in self.modules():
            if isinstance(m, nn.Conv1d) and m.groups == 1:
                nn.init.orthogonal_(m.weight)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)

    def forward(self, x, taps: list | None = None):
        squeeze = x.dim() == 2
        if squeeze:
            x = x.unsqueeze(1)
        if x.shape[-1] % self.cfg.min_length:
            raise ValueError(
                f"window length {x.shape[-1]} must be divisible by {self.cfg.min_length}"
            )
        skips = []
        h = x
        for i, block in enumerate(self.down):
            h = block(h)
            skips.append(h)
            _tap(taps, f"down{i + 1}", h)
        h = self.bottleneck(h)
        _tap(taps, "bottleneck", h)
        for i, block in enumerate(self.up):
            h = block(h + skips[-1 - i])
            _tap(taps, f"up{i + 1}", h)
        if self.cfg.global_residual:
            h = h + x
        return h.squeeze(1) if squeeze else h


def _tap(taps, name, h):
    if taps is not None:
        taps.append((name, tuple(h.shape[1:])))


def shape_ledger(cfg: ModelConfig, length: int) -> list:
    """Documented (channels, time) of every stage for an input of `length` samples."""
    s = cfg.stride
    rows = []
    t = length
    for b, c in enumerate(cfg.down_filters):
        t //= s
        rows.append((f"down{b + 1}", (c, t)))
    rows.append(("bottleneck", (cfg.down_filters[-1], t)))
    for b, f in enumerate(cfg.up_filters):
        t *= s
        rows.append((f"up{b + 1}", (f // s, t)))
    return rows


def trace_shapes(model: HybridUNet, length: int) -> list:
    taps = []
    was_training = model.training
    model.eval()
    with torch.no_grad():
        p = next(model.parameters())
        model(torch.zeros(1, 1, length, dtype=p.dtype), taps=taps)
    model.train(was_training)
    return taps


def zero_parameters(model: nn.Module) -> nn.Module:
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
    return model


def parameter_breakdown(cfg: ModelConfig) -> dict:
    model = HybridUNet(cfg)
    out = {}
    for name, child in model.named_children():
        if isinstance(child, nn.ModuleList):
            for i, sub in enumerate(child):
                out[f"{name}{i + 1}"] = _count(sub)
        else:
            out[name] = _count(child)
    out["safilm"] = sum(_count(m) for m in model.modules() if isinstance(m, SaFilm))
    return out


def count_parameters(cfg_or_model) -> int:
    model = cfg_or_model if isinstance(cfg_or_model, nn.Module) else HybridUNet(cfg_or_model)
    return _count(model)


def _count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)
