"""Latent states and the fixed projections from latent channels to appearance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .render import ShadingGeometry, SvbrdfMaps, render
from .tensor import Tensor

RGB = "rgb"
SVBRDF = "svbrdf"
MODES = (RGB, SVBRDF)
AUGMENTED = 9
ALPHA_MIN = 0.05


def appearance_channels(mode: str) -> int:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    return 3 if mode == RGB else 9


@dataclass
class LatentState:
    data: Tensor
    mode: str

    def __post_init__(self):
        if self.data.shape[0] < appearance_channels(self.mode):
            raise ValueError(f"{self.mode} state needs at least {appearance_channels(self.mode)} channels")

    @property
    def shape(self):
        return self.data.shape

    def detach(self) -> "LatentState":
        return LatentState(self.data.detach(), self.mode)


def sample_initial_state(rng: np.random.Generator, mode: str, h: int, w: int, augmented: int = AUGMENTED) -> LatentState:
    c = appearance_channels(mode) + augmented
    return LatentState(T.Tensor(rng.standard_normal((c, h, w), dtype=np.float32)), mode)


def _require(z: LatentState, mode: str) -> None:
    if z.mode != mode:
        raise ValueError(f"projection expects a {mode} state, got {z.mode}")


def project_rgb(z: LatentState) -> Tensor:
    """The first three latent channels, unchanged."""
    _require(z, RGB)
    return z.data[0:3]


def extract_brdf_maps(z: LatentState, isotropic: bool = False, alpha_min: float = ALPHA_MIN) -> SvbrdfMaps:
    """Split channels 0..8 into bounded svBRDF maps.

    Albedos pass through a sigmoid; roughness maps to [alpha_min, 1]; height is
    left unbounded.  ``isotropic`` ties the v roughness to the u roughness.
    """
    _require(z, SVBRDF)
    d = z.data
    diffuse = T.sigmoid(d[0:3])
    specular = T.sigmoid(d[3:6])
    ru = T.sigmoid(d[6:7]) * (1.0 - alpha_min) + alpha_min
    rv = ru if isotropic else T.sigmoid(d[7:8]) * (1.0 - alpha_min) + alpha_min
    return SvbrdfMaps(diffuse, specular, ru, rv, d[8:9])


def project_svbrdf(z: LatentState, geom: ShadingGeometry, intensity, isotropic: bool = False) -> Tensor:
    return render(extract_brdf_maps(z, isotropic), geom, intensity)


def project(z: LatentState, geom: ShadingGeometry | None = None, intensity=None, isotropic: bool = False) -> Tensor:
    if z.mode == RGB:
        return project_rgb(z)
    if geom is None or intensity is None:
        raise ValueError("svBRDF projection needs shading geometry and light intensity")
    return project_svbrdf(z, geom, intensity, isotropic)
