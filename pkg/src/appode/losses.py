"""Texture statistics and the three training distances.

``global_loss`` compares feature distributions with a sliced Wasserstein
distance; ``crop_loss`` applies it to random windows under the matching
light/view geometry; ``shuffle_init_loss`` is a per-pixel rendering loss over
random pixel shuffles that pushes svBRDF maps towards spatial constancy.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .archive import load_archive, save_archive
from .latent import RGB, SVBRDF, LatentState, extract_brdf_maps
from .ops import conv2d_circular, make_rng
from .render import ShadingGeometry, render
from .tensor import Tensor

N_SLICES = 64
N_CROPS = 36
N_SHUFFLES = 36
RANGE_WEIGHT = 0.1
HEIGHT_MAX = 3.0


@dataclass(frozen=True)
class LossWeights:
    """Weights of the global, local (crop) and init (shuffle) loss terms."""

    w_global: float = 0.0
    w_local: float = 0.0
    w_init: float = 0.0

    def __post_init__(self):
        if min(self.w_global, self.w_local, self.w_init) < 0:
            raise ValueError("loss weights must be non-negative")

    @classmethod
    def for_phase(cls, phase: str) -> "LossWeights":
        try:
            return cls(**{f"w_{phase}": 1.0})
        except TypeError:
            raise ValueError(f"unknown loss phase {phase!r}") from None

    @property
    def active(self) -> list[str]:
        return [n for n in ("global", "local", "init") if getattr(self, f"w_{n}") != 0]


@dataclass
class FeatureBank:
    """Frozen stack of stride-2 3x3 convolutions with ReLU.

    Layer 0 is the input image itself; layer ``i`` is the output of the i-th conv.
    """

    kernels: list[np.ndarray]
    biases: list[np.ndarray]
    layer_ids: tuple[int, ...] = (0, 1, 2, 3, 4)
    source: str = "builtin-random"

    @classmethod
    def random(cls, seed: int = 0, channels: Sequence[int] = (16, 32, 64, 128), layer_ids=None) -> "FeatureBank":
        rng = make_rng(seed)
        kernels, biases = [], []
        cin = 3
        for c in channels:
            fan = cin * 9
            kernels.append((rng.standard_normal((c, cin, 3, 3)) * np.sqrt(2.0 / fan)).astype(np.float32))
            biases.append((rng.standard_normal(c) * 0.1).astype(np.float32))
            cin = c
        ids = tuple(layer_ids) if layer_ids is not None else tuple(range(len(channels) + 1))
        return cls(kernels, biases, ids, f"builtin-random({seed})")

    @classmethod
    def load(cls, path, layer_ids=None) -> "FeatureBank":
        tensors, meta = load_archive(path)
        n = sum(1 for k in tensors if k.startswith("conv") and k.endswith(".w"))
        kernels = [tensors[f"conv{i}.w"] for i in range(n)]
        biases = [tensors[f"conv{i}.b"] for i in range(n)]
        ids = layer_ids if layer_ids is not None else meta.get("layer_ids", list(range(n + 1)))
        return cls(kernels, biases, tuple(ids), f"file({path})")

    def save(self, path) -> None:
        tensors = {}
        for i, (w, b) in enumerate(zip(self.kernels, self.biases)):
            tensors[f"conv{i}.w"] = w
            tensors[f"conv{i}.b"] = b
        save_archive(path, tensors, {"layer_ids": list(self.layer_ids)})

    @property
    def min_size(self) -> int:
        return 2 ** len(self.kernels)


def extract_features(img, bank: FeatureBank) -> list[Tensor]:
    """Activation maps for each of ``bank.layer_ids``."""
    x = T.as_tensor(img)
    if x.ndim != 3 or x.shape[0] != 3:
        raise ValueError(f"expected a 3 x H x W image, got {x.shape}")
    if min(x.shape[1:]) < bank.min_size:
        raise ValueError(f"image {x.shape[1]}x{x.shape[2]} smaller than the bank's minimum {bank.min_size}")
    feats = [x]
    h = x
    for w, b in zip(bank.kernels, bank.biases):
        h = T.relu(conv2d_circular(h, T.Tensor(w.astype(x.dtype)), T.Tensor(b.astype(x.dtype)), stride=2))
        feats.append(h)
    return [feats[i] for i in bank.layer_ids]


def as_points(feat: Tensor) -> Tensor:
    """C x h x w map -> (h*w) x C point set."""
    c = feat.shape[0]
    return T.transpose(T.reshape(feat, (c, -1)), (1, 0))


def random_directions(rng: np.random.Generator, dim: int, n: int, dtype=np.float32) -> np.ndarray:
    d = rng.standard_normal((dim, n))
    return (d / np.linalg.norm(d, axis=0, keepdims=True)).astype(dtype)


def sliced_wasserstein(a: Tensor, b: Tensor, directions: np.ndarray) -> Tensor:
    """Mean squared gap between sorted 1-D projections of two equal-size point sets."""
    a, b = T.as_tensor(a), T.as_tensor(b)
    m = min(a.shape[0], b.shape[0])
    if m == 0:
        raise ValueError("empty point set")
    if a.shape[0] != m:
        a = a[:m]
    if b.shape[0] != m:
        b = b[:m]
    dirs = T.Tensor(directions.astype(a.dtype))
    pa = T.sort(T.matmul(a, dirs), axis=0)
    pb = T.sort(T.matmul(b, dirs), axis=0)
    diff = pa - pb
    return T.mean(diff * diff)


def swd(features_a: Sequence[Tensor], features_b: Sequence[Tensor], n_slices: int = N_SLICES, rng=None) -> Tensor:
    if len(features_a) != len(features_b):
        raise ValueError("feature lists differ in length")
    rng = rng if rng is not None else make_rng(0)
    total = None
    for fa, fb in zip(features_a, features_b):
        dirs = random_directions(rng, fa.shape[0], n_slices)
        term = sliced_wasserstein(as_points(fa), as_points(fb), dirs)
        total = term if total is None else total + term
    return total


def gram(feat: Tensor) -> Tensor:
    c = feat.shape[0]
    f = T.reshape(feat, (c, -1))
    return T.matmul(f, T.transpose(f, (1, 0))) * (1.0 / f.data.size)


def gram_loss(features_a: Sequence[Tensor], features_b: Sequence[Tensor]) -> Tensor:
    total = None
    for fa, fb in zip(features_a, features_b):
        d = gram(fa) - gram(fb)
        term = T.tsum(d * d)
        total = term if total is None else total + term
    return total


def global_loss(img, target, bank: FeatureBank, rng=None, n_slices: int = N_SLICES) -> Tensor:
    """SWD between feature statistics of two images."""
    return swd(extract_features(img, bank), extract_features(target, bank), n_slices, rng)


def sample_windows(rng: np.random.Generator, full_hw: tuple[int, int], crop_hw: tuple[int, int], n: int) -> list[tuple[int, int]]:
    (H, W), (h, w) = full_hw, crop_hw
    if h > H or w > W:
        raise ValueError(f"crop {h}x{w} larger than target {H}x{W}")
    ys = rng.integers(0, H - h + 1, n)
    xs = rng.integers(0, W - w + 1, n)
    return [(int(y), int(x)) for y, x in zip(ys, xs)]


def crop_loss(
    z: LatentState,
    target: np.ndarray,
    geom_full: ShadingGeometry,
    intensity,
    bank: FeatureBank,
    rng: np.random.Generator,
    n_crops: int = N_CROPS,
    n_slices: int = N_SLICES,
    isotropic: bool = False,
    windows: Sequence[tuple[int, int]] | None = None,
) -> Tensor:
    """Mean over random windows of the global loss between the crop-size maps
    rendered under that window's geometry and the same window of the target."""
    if z.mode != SVBRDF:
        raise ValueError("crop loss needs an svBRDF state")
    h, w = z.shape[1], z.shape[2]
    H, W = target.shape[1], target.shape[2]
    if windows is None:
        windows = sample_windows(rng, (H, W), (h, w), n_crops)
    maps = extract_brdf_maps(z, isotropic)
    total = None
    for y0, x0 in windows:
        img = render(maps, geom_full.crop(y0, x0, h, w), intensity)
        tgt = target[:, y0 : y0 + h, x0 : x0 + w]
        term = global_loss(img, tgt, bank, rng, n_slices)
        total = term if total is None else total + term
    return total * (1.0 / len(windows))


def shuffle_init_loss(
    z: LatentState,
    target: np.ndarray,
    geom_full: ShadingGeometry,
    intensity,
    rng: np.random.Generator,
    n_shuffles: int = N_SHUFFLES,
    isotropic: bool = False,
    shuffles: Sequence[np.ndarray] | None = None,
) -> Tensor:
    """Mean over random pixel shuffles of the per-pixel squared rendering error.

    Each shuffle draws ``h*w`` distinct target pixel sites; the (unshuffled)
    maps are rendered under the light/view directions of those sites and
    compared with the target's values there.
    """
    if z.mode != SVBRDF:
        raise ValueError("shuffle loss needs an svBRDF state")
    h, w = z.shape[1], z.shape[2]
    H, W = target.shape[1], target.shape[2]
    if shuffles is None:
        shuffles = [rng.permutation(H * W)[: h * w] for _ in range(n_shuffles)]
    maps = extract_brdf_maps(z, isotropic)
    flat = target.reshape(3, -1)
    total = None
    for idx in shuffles:
        img = render(maps, geom_full.gather(idx, h, w), intensity)
        tgt = flat[:, idx].reshape(3, h, w).astype(img.dtype)
        d = img - tgt
        term = T.mean(d * d)
        total = term if total is None else total + term
    return total * (1.0 / len(shuffles))


def range_penalty(z: LatentState, weight: float = RANGE_WEIGHT, height_max: float = HEIGHT_MAX) -> Tensor:
    """Squared excursion outside the admissible range, summed and scaled by ``weight``.

    RGB states: appearance channels outside [0, 1].  svBRDF states: height
    beyond +/- ``height_max`` (the other maps are bounded by their projection).
    """
    if z.mode == RGB:
        x = z.data[0:3]
        lo, hi = 0.0, 1.0
    else:
        x = z.data[8:9]
        lo, hi = -height_max, height_max
    below = T.relu(x * -1.0 + lo)
    above = T.relu(x - hi)
    return T.tsum(below * below + above * above) * weight
