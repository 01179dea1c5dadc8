"""Time-conditioned circular-padded UNet used as the ODE vector field."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Dict

import numpy as np

from . import tensor as T
from .ops import conv2d_circular, downsample2x, group_norm, make_rng, self_attention, upsample2x
from .tensor import Tensor

Params = Dict[str, Tensor]


@dataclass
class FieldConfig:
    levels: int = 2
    channels_per_level: list[int] = field(default_factory=lambda: [16, 32])
    use_attention: bool = True
    attn_heads: int = 4
    attn_head_dim: int = 8
    time_embed_dim: int = 32
    state_channels: int = 12
    appearance_channels: int = 3
    gn_groups: int = 8
    time_freqs: int = 6
    time_span: float = 6.0

    def __post_init__(self):
        self.channels_per_level = list(self.channels_per_level)
        if len(self.channels_per_level) != self.levels:
            raise ValueError("channels_per_level must have one entry per level")
        if self.time_embed_dim != 2 * self.channels_per_level[0]:
            raise ValueError("time_embed_dim must be twice the first level's channel count")
        if self.appearance_channels not in (3, 9):
            raise ValueError("appearance_channels must be 3 (RGB) or 9 (svBRDF)")

    @property
    def multiple(self) -> int:
        """Spatial sizes must be divisible by this."""
        return 2 ** (self.levels - 1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FieldConfig":
        return cls(**d)

    @classmethod
    def rgb(cls, augmented: int = 9, time_span: float = 6.0) -> "FieldConfig":
        return cls(3, [32, 64, 128], True, 4, 8, 64, 3 + augmented, 3, time_span=time_span)

    @classmethod
    def svbrdf(cls, augmented: int = 9, time_span: float = 12.0) -> "FieldConfig":
        return cls(2, [64, 128], False, 4, 8, 128, 9 + augmented, 9, time_span=time_span)

    @classmethod
    def desk(cls, appearance_channels: int = 3, augmented: int = 9, use_attention: bool = True, time_span: float = 6.0) -> "FieldConfig":
        return cls(2, [16, 32], use_attention, 4, 8, 32, appearance_channels + augmented, appearance_channels, time_span=time_span)


def _groups(cfg: FieldConfig, channels: int) -> int:
    return math.gcd(cfg.gn_groups, channels)


def _conv_init(rng, cout, cin, k):
    std = 1.0 / math.sqrt(cin * k * k)
    return rng.normal(0.0, std, (cout, cin, k, k))


def _block_params(rng, p: dict, name: str, cin: int, cout: int, emb: int) -> None:
    p[f"{name}.conv.w"] = _conv_init(rng, cout, cin, 3)
    p[f"{name}.conv.b"] = np.zeros(cout)
    p[f"{name}.scale.w"] = rng.normal(0.0, 0.02, (emb, cout))
    p[f"{name}.scale.b"] = np.zeros(cout)
    p[f"{name}.shift.w"] = rng.normal(0.0, 0.02, (emb, cout))
    p[f"{name}.shift.b"] = np.zeros(cout)


def init_params(cfg: FieldConfig, seed: int = 0, svbrdf: bool | None = None, intensity: float = math.pi) -> Params:
    """Random weights with a zero output layer, so the initial field is identically zero."""
    rng = make_rng(seed)
    ch = cfg.channels_per_level
    emb = cfg.time_embed_dim
    enc = 2 * cfg.time_freqs
    p: dict[str, np.ndarray] = {}
    p["time.w1"] = rng.normal(0.0, 1.0 / math.sqrt(enc), (enc, emb))
    p["time.b1"] = np.zeros(emb)
    p["time.w2"] = rng.normal(0.0, 1.0 / math.sqrt(emb), (emb, emb))
    p["time.b2"] = np.zeros(emb)
    _block_params(rng, p, "down0", cfg.state_channels, ch[0], emb)
    for lvl in range(1, cfg.levels):
        _block_params(rng, p, f"down{lvl}", ch[lvl - 1], ch[lvl], emb)
    if cfg.use_attention:
        c = ch[-1]
        inner = cfg.attn_heads * cfg.attn_head_dim
        p["attn.wq"] = rng.normal(0.0, 1.0 / math.sqrt(c), (c, inner))
        p["attn.wk"] = rng.normal(0.0, 1.0 / math.sqrt(c), (c, inner))
        p["attn.wv"] = rng.normal(0.0, 1.0 / math.sqrt(c), (c, inner))
        p["attn.wo"] = rng.normal(0.0, 1.0 / math.sqrt(inner), (inner, c))
        p["attn.bo"] = np.zeros(c)
    for lvl in range(cfg.levels - 1, 0, -1):
        _block_params(rng, p, f"up{lvl}", ch[lvl] + ch[lvl - 1], ch[lvl - 1], emb)
    p["head.w"] = _conv_init(rng, ch[0], ch[0], 1)
    p["head.b"] = np.zeros(ch[0])
    p["out.w"] = np.zeros((cfg.state_channels, ch[0], 1, 1))
    p["out.b"] = np.zeros(cfg.state_channels)
    if svbrdf if svbrdf is not None else cfg.appearance_channels == 9:
        p["log_intensity"] = np.array(math.log(intensity))
    return {k: T.parameter(v, name=k) for k, v in p.items()}


def sinusoidal_encoding(t: float, n_freqs: int, span: float = 1.0) -> np.ndarray:
    """Interleaved [sin, cos] of t at frequencies 2^k * pi / span."""
    freqs = (2.0 ** np.arange(n_freqs)) * math.pi / span
    ang = t * freqs
    out = np.empty(2 * n_freqs, dtype=np.float32)
    out[0::2] = np.sin(ang)
    out[1::2] = np.cos(ang)
    return out


def time_embed(params: Params, cfg: FieldConfig, t: float) -> Tensor:
    enc = T.Tensor(sinusoidal_encoding(t, cfg.time_freqs, cfg.time_span).astype(params["time.w1"].dtype))
    h = T.swish(T.matmul(enc, params["time.w1"]) + params["time.b1"])
    return T.swish(T.matmul(h, params["time.w2"]) + params["time.b2"])


def ada_gn(x: Tensor, emb: Tensor, scale_w: Tensor, scale_b: Tensor, shift_w: Tensor, shift_b: Tensor, groups: int) -> Tensor:
    """(1 + scale(emb)) * GroupNorm(x) + shift(emb), broadcast over space."""
    c = x.shape[0]
    scale = T.reshape(T.matmul(emb, scale_w) + scale_b + 1.0, (c, 1, 1))
    shift = T.reshape(T.matmul(emb, shift_w) + shift_b, (c, 1, 1))
    return group_norm(x, groups) * scale + shift


def _conv_block(params: Params, cfg: FieldConfig, name: str, x: Tensor, emb: Tensor) -> Tensor:
    h = conv2d_circular(x, params[f"{name}.conv.w"], params[f"{name}.conv.b"])
    h = ada_gn(
        h,
        emb,
        params[f"{name}.scale.w"],
        params[f"{name}.scale.b"],
        params[f"{name}.shift.w"],
        params[f"{name}.shift.b"],
        _groups(cfg, h.shape[0]),
    )
    return T.swish(h)


def _attention(params: Params, cfg: FieldConfig, x: Tensor) -> Tensor:
    return self_attention(
        x, params["attn.wq"], params["attn.wk"], params["attn.wv"], params["attn.wo"], params["attn.bo"],
        cfg.attn_heads, cfg.attn_head_dim,
    )


def check_resolution(cfg: FieldConfig, h: int, w: int) -> None:
    m = cfg.multiple
    if h % m or w % m:
        raise ValueError(
            f"spatial size {h}x{w} is not divisible by {m}; resize to a multiple of {m} "
            f"(e.g. {max(m, h // m * m)}x{max(m, w // m * m)})"
        )


def eval_field(params: Params, cfg: FieldConfig, z: Tensor, t: float) -> Tensor:
    """dz/dt at (z, t); output has the shape of ``z``."""
    if z.shape[0] != cfg.state_channels:
        raise ValueError(f"state has {z.shape[0]} channels, field expects {cfg.state_channels}")
    check_resolution(cfg, z.shape[1], z.shape[2])
    emb = time_embed(params, cfg, t)
    h = _conv_block(params, cfg, "down0", z, emb)
    if cfg.levels == 1 and cfg.use_attention:
        h = _attention(params, cfg, h)
    skips = [h]
    for lvl in range(1, cfg.levels):
        h = _conv_block(params, cfg, f"down{lvl}", downsample2x(h), emb)
        if lvl == cfg.levels - 1 and cfg.use_attention:
            h = _attention(params, cfg, h)
        skips.append(h)
    for lvl in range(cfg.levels - 1, 0, -1):
        h = T.concat([upsample2x(h), skips[lvl - 1]], axis=0)
        h = _conv_block(params, cfg, f"up{lvl}", h, emb)
    h = T.sigmoid(conv2d_circular(h, params["head.w"], params["head.b"]))
    return conv2d_circular(h, params["out.w"], params["out.b"])


def output_bound(params: Params) -> float:
    """Sup-norm bound on the field: the last hidden layer is a sigmoid in [0, 1]."""
    w = np.abs(params["out.w"].data[:, :, 0, 0]).astype(np.float64).sum(axis=1)
    return float(np.max(w + np.abs(params["out.b"].data)))


def intensity(params: Params) -> Tensor:
    return T.exp(params["log_intensity"])


class VectorField:
    """Callable ``f(z, t)`` binding parameters and configuration."""

    def __init__(self, params: Params, cfg: FieldConfig):
        self.params = params
        self.cfg = cfg

    def __call__(self, z: Tensor, t: float) -> Tensor:
        return eval_field(self.params, self.cfg, z, t)

    def trainable(self) -> list[Tensor]:
        return list(self.params.values())
