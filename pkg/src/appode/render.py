"""Differentiable point-flash renderer for 9-channel svBRDF maps.

Cook-Torrance specular (anisotropic GGX, separable Smith-GGX, Schlick Fresnel)
plus a Lambertian lobe, lit by a point light with inverse-square falloff and
tone-mapped by clamp + gamma 1/2.2.  The sample is the plane z = 0 seen by a
pinhole camera one unit above it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

GAMMA = 2.2
NDOT_FLOOR = 1e-4
GRAZING = 1e-6
DEFAULT_FOV = 50.0
CAMERA = (0.0, 0.0, 1.0)


class RenderError(FloatingPointError):
    pass


@dataclass
class SvbrdfMaps:
    diffuse: Tensor  # 3 x H x W in [0, 1]
    specular: Tensor  # 3 x H x W in [0, 1]
    roughness_u: Tensor  # 1 x H x W
    roughness_v: Tensor  # 1 x H x W
    height: Tensor  # 1 x H x W, unbounded

    @property
    def shape(self) -> tuple[int, int]:
        return self.height.shape[1], self.height.shape[2]

    def stack(self) -> np.ndarray:
        """9 x H x W numpy array in channel order diffuse, specular, roughness u/v, height."""
        return np.concatenate(
            [m.data for m in (self.diffuse, self.specular, self.roughness_u, self.roughness_v, self.height)]
        )

    @classmethod
    def from_array(cls, arr) -> "SvbrdfMaps":
        a = T.as_tensor(arr)
        return cls(a[0:3], a[3:6], a[6:7], a[7:8], a[8:9])


@dataclass
class ShadingGeometry:
    light_dirs: np.ndarray  # 3 x H x W, unit, surface -> light
    view_dirs: np.ndarray  # 3 x H x W, unit, surface -> camera
    light_dist_sq: np.ndarray  # 1 x H x W
    fov_deg: float
    light_pos: tuple[float, float, float]

    @property
    def shape(self) -> tuple[int, int]:
        return self.light_dirs.shape[1], self.light_dirs.shape[2]

    def crop(self, y0: int, x0: int, h: int, w: int) -> "ShadingGeometry":
        sl = (slice(None), slice(y0, y0 + h), slice(x0, x0 + w))
        return ShadingGeometry(self.light_dirs[sl], self.view_dirs[sl], self.light_dist_sq[sl], self.fov_deg, self.light_pos)

    def gather(self, flat_idx: np.ndarray, h: int, w: int) -> "ShadingGeometry":
        """Geometry at the given flattened pixel sites, rearranged into an h x w grid."""

        def pick(a):
            return a.reshape(a.shape[0], -1)[:, flat_idx].reshape(a.shape[0], h, w)

        return ShadingGeometry(pick(self.light_dirs), pick(self.view_dirs), pick(self.light_dist_sq), self.fov_deg, self.light_pos)


def plane_points(h: int, w: int, fov_deg: float = DEFAULT_FOV) -> np.ndarray:
    """3 x H x W world positions of pixel centres on z = 0.

    Pixel centres span [-tan(fov/2), tan(fov/2)] along the longer image axis.
    """
    half = math.tan(math.radians(fov_deg) / 2)
    long = max(h, w)
    pitch = 2 * half / (long - 1) if long > 1 else 0.0
    xs = (np.arange(w) - (w - 1) / 2) * pitch
    ys = (np.arange(h) - (h - 1) / 2) * pitch
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([xx, yy, np.zeros_like(xx)])


def shading_geometry(h: int, w: int, fov_deg: float = DEFAULT_FOV, light_pos=CAMERA) -> ShadingGeometry:
    if h < 1 or w < 1:
        raise ValueError("image must be at least 1x1")
    light = np.asarray(light_pos, dtype=np.float64)
    if light[2] <= 0:
        raise ValueError(f"light must be above the sample plane, got z={light[2]}")
    p = plane_points(h, w, fov_deg)
    to_light = light[:, None, None] - p
    to_cam = np.asarray(CAMERA)[:, None, None] - p
    dist_sq = (to_light**2).sum(axis=0, keepdims=True)
    l = to_light / np.sqrt(dist_sq)
    v = to_cam / np.sqrt((to_cam**2).sum(axis=0, keepdims=True))
    f32 = np.float32
    return ShadingGeometry(l.astype(f32), v.astype(f32), dist_sq.astype(f32), float(fov_deg), tuple(float(c) for c in light))


# BRDF terms ------------------------------------------------------------------------


def ggx_ndf(hx, hy, hz, alpha_u, alpha_v):
    """Anisotropic GGX normal distribution; zero below the horizon."""
    hx, hy, hz = T.as_tensor(hx), T.as_tensor(hy), T.as_tensor(hz)
    au, av = T.as_tensor(alpha_u), T.as_tensor(alpha_v)
    q = (hx / au) ** 2 + (hy / av) ** 2 + hz**2
    d = 1.0 / ((au * av) * (q**2) * math.pi)
    return T.where(hz.data > 0, d, T.zeros_like(d))


def smith_g1(wx, wy, wz, alpha_u, alpha_v):
    wx, wy, wz = T.as_tensor(wx), T.as_tensor(wy), T.as_tensor(wz)
    au, av = T.as_tensor(alpha_u), T.as_tensor(alpha_v)
    wz = T.clamp(wz, lo=GRAZING)
    a2 = ((au * wx) ** 2 + (av * wy) ** 2) / (wz**2)
    lam = (T.sqrt(a2 + 1.0) - 1.0) * 0.5
    return 1.0 / (lam + 1.0)


def smith_g(l_local, v_local, alpha_u, alpha_v):
    """Separable masking-shadowing G1(l) * G1(v); directions are (x, y, z) triples."""
    return smith_g1(*l_local, alpha_u, alpha_v) * smith_g1(*v_local, alpha_u, alpha_v)


def fresnel_schlick(cos_theta, f0):
    c = np.clip(np.asarray(cos_theta.data if isinstance(cos_theta, Tensor) else cos_theta), 0.0, 1.0)
    w = (1.0 - c) ** 5
    f0 = T.as_tensor(f0)
    return f0 + (1.0 - f0) * w.astype(f0.dtype)


def height_to_normal(height: Tensor, bump_scale: float = 1.0) -> Tensor:
    """Unit normals from a height map by wrap-around central differences (pixel units)."""
    height = T.as_tensor(height)
    dhdx = (T.roll(height, -1, 2) - T.roll(height, 1, 2)) * 0.5
    dhdy = (T.roll(height, -1, 1) - T.roll(height, 1, 1)) * 0.5
    nx = dhdx * (-bump_scale)
    ny = dhdy * (-bump_scale)
    nz = T.Tensor(np.ones(height.shape, dtype=height.dtype))
    raw = T.concat([nx, ny, nz], axis=0)
    norm = T.sqrt(T.tsum(raw * raw, axis=0, keepdims=True))
    return raw / norm


def _dot(a, b):
    return T.tsum(T.as_tensor(a) * T.as_tensor(b), axis=0, keepdims=True)


def tangent_frame(n: Tensor) -> tuple[Tensor, Tensor]:
    """Tangent aligned with the image x axis (Gram-Schmidt) and bitangent n x t."""
    nx, ny, nz = n[0:1], n[1:2], n[2:3]
    tx = 1.0 - nx * nx
    ty = -(nx * ny)
    tz = -(nx * nz)
    inv = 1.0 / T.sqrt(tx * tx + ty * ty + tz * tz)
    tx, ty, tz = tx * inv, ty * inv, tz * inv
    bx = ny * tz - nz * ty
    by = nz * tx - nx * tz
    bz = nx * ty - ny * tx
    return T.concat([tx, ty, tz], 0), T.concat([bx, by, bz], 0)


def specular_brdf(l_local, v_local, specular, alpha_u, alpha_v):
    """Cook-Torrance specular value for local-frame directions (each a (x, y, z) triple)."""
    lx, ly, lz = (T.as_tensor(c) for c in l_local)
    vx, vy, vz = (T.as_tensor(c) for c in v_local)
    hx, hy, hz = lx + vx, ly + vy, lz + vz
    hn = T.sqrt(hx * hx + hy * hy + hz * hz)
    hx, hy, hz = hx / hn, hy / hn, hz / hn
    d = ggx_ndf(hx, hy, hz, alpha_u, alpha_v)
    g = smith_g((lx, ly, lz), (vx, vy, vz), alpha_u, alpha_v)
    hv = hx * vx + hy * vy + hz * vz
    f = fresnel_schlick(hv, specular)
    denom = T.clamp(lz, lo=NDOT_FLOOR) * T.clamp(vz, lo=NDOT_FLOOR) * 4.0
    return d * g * f / denom


def _gamma(x: Tensor) -> Tensor:
    xd = x.data
    out = xd ** (1.0 / GAMMA)
    slope = (1.0 / GAMMA) * np.maximum(xd, NDOT_FLOOR) ** (1.0 / GAMMA - 1.0)
    return T.Tensor._make(out, (x,), lambda g: (g * slope.astype(xd.dtype),))


def tonemap(linear: Tensor) -> Tensor:
    """Clamp to [0, 1] then gamma 1/2.2 (adjoint slope floored near black)."""
    return _gamma(T.clamp(T.as_tensor(linear), 0.0, 1.0))


def render_linear(maps: SvbrdfMaps, geom: ShadingGeometry, intensity, bump_scale: float = 1.0) -> Tensor:
    if maps.shape != geom.shape:
        raise ValueError(f"maps are {maps.shape} but geometry is {geom.shape}")
    inten = T.as_tensor(intensity)
    if np.any(inten.data < 0):
        raise ValueError("intensity must be non-negative")
    dt = maps.diffuse.dtype
    l = geom.light_dirs.astype(dt)
    v = geom.view_dirs.astype(dt)
    n = height_to_normal(maps.height, bump_scale)
    t, b = tangent_frame(n)
    nl, nv = _dot(n, l), _dot(n, v)
    l_loc = (_dot(t, l), _dot(b, l), nl)
    v_loc = (_dot(t, v), _dot(b, v), nv)
    spec = specular_brdf(l_loc, v_loc, maps.specular, maps.roughness_u, maps.roughness_v)
    brdf = maps.diffuse * (1.0 / math.pi) + spec
    cos = T.clamp(nl, lo=0.0) * (l[2:3] > 0).astype(dt)
    radiance = brdf * cos * inten / geom.light_dist_sq.astype(dt)
    for term, val in (("specular lobe", spec), ("radiance", radiance)):
        if not np.all(np.isfinite(val.data)):
            raise RenderError(f"non-finite values in {term}")
    return radiance


def render(maps: SvbrdfMaps, geom: ShadingGeometry, intensity, bump_scale: float = 1.0) -> Tensor:
    """Tone-mapped 3 x H x W image in [0, 1]."""
    return tonemap(render_linear(maps, geom, intensity, bump_scale))
