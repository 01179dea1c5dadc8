"""Exemplar ingestion and procedurally generated desk-scale exemplars."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from . import tensor as T
from .exemplar import Exemplar
from .latent import RGB, SVBRDF
from .ops import make_rng
from .render import SvbrdfMaps, render, shading_geometry

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
RGB_SIZE = 128
SVBRDF_SIZE = 256
N_FRAMES = 100
MANIFEST = "manifest.txt"


# image files ------------------------------------------------------------------------------


def to_uint8(img: np.ndarray) -> np.ndarray:
    """3 x H x W float in [0, 1] -> H x W x 3 uint8."""
    return (np.clip(img, 0, 1).transpose(1, 2, 0) * 255 + 0.5).astype(np.uint8)


def write_png(path, img: np.ndarray) -> None:
    Image.fromarray(to_uint8(img)).save(path)


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)


def center_crop_resize(img: np.ndarray, size: int | None) -> np.ndarray:
    """Crop the central square, then resize to ``size`` (skipped when already that size)."""
    _, h, w = img.shape
    s = min(h, w)
    y0, x0 = (h - s) // 2, (w - s) // 2
    sq = img[:, y0 : y0 + s, x0 : x0 + s]
    if size is None or size == s:
        return np.ascontiguousarray(sq)
    pil = Image.fromarray(to_uint8(sq)).resize((size, size), Image.Resampling.BILINEAR)
    return np.asarray(pil, dtype=np.float32).transpose(2, 0, 1) / 255.0


def list_frames(dir_path) -> list[Path]:
    d = Path(dir_path)
    if not d.is_dir():
        raise FileNotFoundError(f"{d} is not a directory")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def read_manifest(dir_path) -> dict[str, float] | None:
    path = Path(dir_path) / MANIFEST
    if not path.exists():
        return None
    times = {}
    for line in path.read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        name, t = line.replace(",", " ").split()
        times[name] = float(t)
    return times


def load_exemplar(
    dir_path,
    mode: str = RGB,
    target_size: int | None = None,
    n_frames: int | None = None,
    t_start: float = 0.0,
    t_end: float | None = None,
) -> Exemplar:
    """Read a directory of ordered frames.

    Frames are center-cropped to a square and resized.  ``n_frames`` frames are
    picked at uniformly spaced indices; their times are spread uniformly over
    [t_start, t_end] unless a ``manifest.txt`` lists ``name time`` pairs.
    """
    if t_end is None:
        t_end = 5.0 if mode == RGB else 10.0
    if target_size is None:
        target_size = RGB_SIZE if mode == RGB else SVBRDF_SIZE
    paths = list_frames(dir_path)
    if len(paths) < 2:
        raise ValueError(f"{dir_path}: need at least two frames, found {len(paths)}")
    if n_frames is not None and n_frames < len(paths):
        pick = np.round(np.linspace(0, len(paths) - 1, n_frames)).astype(int)
        paths = [paths[i] for i in pick]
    frames = []
    orig = None
    for p in paths:
        try:
            img = read_image(p)
        except OSError as exc:
            raise ValueError(f"unreadable frame {p}: {exc}") from exc
        if orig is None:
            orig = img.shape[1:]
        elif img.shape[1:] != orig:
            raise ValueError(f"frame {p.name} is {img.shape[1:]}, expected {orig}")
        frames.append(center_crop_resize(img, target_size))
    manifest = read_manifest(dir_path)
    if manifest is not None:
        times = np.array([manifest[p.name] for p in paths])
    else:
        times = np.linspace(t_start, t_end, len(paths))
    info = {"paths": [str(p) for p in paths], "original_size": list(orig)}
    return Exemplar(np.stack(frames), times, mode, info)


def save_exemplar(ex: Exemplar, out_dir, write_manifest: bool = True) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, f in enumerate(ex.frames):
        p = out / f"frame_{i:04d}.png"
        write_png(p, f)
        paths.append(p)
    if write_manifest:
        (out / MANIFEST).write_text("".join(f"{p.name} {float(t)!r}\n" for p, t in zip(paths, ex.times)))
    return paths


# procedural exemplars --------------------------------------------------------------------


def _wrapped_distance(h: int, w: int, cy: np.ndarray, cx: np.ndarray) -> np.ndarray:
    """Distance from each pixel centre to the nearest of the given centres on a torus."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    dy = np.abs(yy[None] - cy[:, None, None])
    dx = np.abs(xx[None] - cx[:, None, None])
    dy = np.minimum(dy, h - dy)
    dx = np.minimum(dx, w - dx)
    return np.sqrt(dy**2 + dx**2).min(axis=0)


def growing_disks(
    size: int = 24,
    n_frames: int = 20,
    cells: int = 3,
    max_radius: float = 0.4,
    t_start: float = 0.0,
    t_end: float = 5.0,
    rng=None,
) -> Exemplar:
    """Antialiased disks on a jittered lattice whose radius ramps from 0 to ``max_radius`` cells."""
    rng = rng if rng is not None else make_rng(0)
    cell = size / cells
    gy, gx = np.mgrid[0:cells, 0:cells].astype(np.float64)
    cy = ((gy + 0.5) * cell + rng.uniform(-0.15, 0.15, gy.shape) * cell).ravel()
    cx = ((gx + 0.5) * cell + rng.uniform(-0.15, 0.15, gx.shape) * cell).ravel()
    dist = _wrapped_distance(size, size, cy, cx)
    bg = np.array([0.15, 0.2, 0.35])[:, None, None]
    frames = []
    for i in range(n_frames):
        s = i / (n_frames - 1)
        r = max_radius * cell * s
        cover = np.clip(r - dist + 0.5, 0.0, 1.0) if r > 0 else np.zeros_like(dist)
        fg = np.array([0.95, 0.8 - 0.5 * s, 0.2])[:, None, None]
        frames.append(bg * (1 - cover) + fg * cover)
    times = np.linspace(t_start, t_end, n_frames)
    return Exemplar(np.stack(frames).astype(np.float32), times, RGB, {"kind": "growing-disk"})


def gray_scott_exemplar(
    size: int = 64,
    n_frames: int = 20,
    feed: float = 0.037,
    kill: float = 0.06,
    steps_per_frame: int = 150,
    t_start: float = 0.0,
    t_end: float = 5.0,
    rng=None,
) -> Exemplar:
    """Gray-Scott reaction-diffusion seeded uniformly at random, colourised from the V field."""
    rng = rng if rng is not None else make_rng(0)
    du, dv = 0.16, 0.08
    u = np.ones((size, size))
    v = np.zeros((size, size))
    n_seeds = max(4, size * size // 60)
    ys = rng.integers(0, size, n_seeds)
    xs = rng.integers(0, size, n_seeds)
    for y, x in zip(ys, xs):
        sl = (np.arange(y - 1, y + 2) % size)[:, None], (np.arange(x - 1, x + 2) % size)[None, :]
        u[sl] = 0.5
        v[sl] = 0.25
    v += rng.uniform(0, 0.02, v.shape)

    def lap(a):
        return np.roll(a, 1, 0) + np.roll(a, -1, 0) + np.roll(a, 1, 1) + np.roll(a, -1, 1) - 4 * a

    lo = np.array([0.9, 0.85, 0.7])[:, None, None]
    hi = np.array([0.25, 0.1, 0.35])[:, None, None]
    frames = []
    for _ in range(n_frames):
        for _ in range(steps_per_frame):
            uvv = u * v * v
            u += du * lap(u) - uvv + feed * (1 - u)
            v += dv * lap(v) + uvv - (feed + kill) * v
        a = np.clip(v / 0.4, 0, 1)[None]
        frames.append(lo * (1 - a) + hi * a)
    times = np.linspace(t_start, t_end, n_frames)
    return Exemplar(np.stack(frames).astype(np.float32), times, RGB, {"kind": "reaction-diffusion", "feed": feed, "kill": kill})


def periodic_noise(size: int, rng, smooth: float = 2.0) -> np.ndarray:
    """Unit-variance Gaussian random field that tiles seamlessly."""
    white = rng.standard_normal((size, size))
    f = np.fft.fftfreq(size)
    k2 = f[:, None] ** 2 + f[None, :] ** 2
    filt = np.exp(-k2 * (2 * np.pi * smooth) ** 2 / 2)
    field = np.real(np.fft.ifft2(np.fft.fft2(white) * filt))
    return (field - field.mean()) / field.std()


def rust_maps(rust: np.ndarray) -> np.ndarray:
    """9 x H x W maps blending brushed steel into rough orange rust by coverage ``rust``."""
    r = rust[None]
    steel_d = np.array([0.22, 0.22, 0.24])[:, None, None]
    rust_d = np.array([0.55, 0.22, 0.07])[:, None, None]
    diffuse = steel_d * (1 - r) + rust_d * r
    specular = np.repeat(0.5 * (1 - r) + 0.04 * r, 3, axis=0)
    ru = 0.12 * (1 - r) + 0.7 * r
    rv = 0.3 * (1 - r) + 0.7 * r
    height = 0.6 * r
    return np.concatenate([diffuse, specular, ru, rv, height]).astype(np.float32)


RUST_INTENSITY = 2.0


def rusting_ramp(
    size: int = 32,
    n_frames: int = 20,
    t_start: float = 0.0,
    t_end: float = 10.0,
    intensity: float = RUST_INTENSITY,
    rng=None,
) -> Exemplar:
    """Steel plate rusting over time, rendered from known maps under the centre flash."""
    rng = rng if rng is not None else make_rng(0)
    noise = periodic_noise(size, rng, smooth=1.2)
    geom = shading_geometry(size, size)
    frames, maps = [], []
    for i in range(n_frames):
        s = i / (n_frames - 1)
        thr = 1.8 - 2.6 * s
        rust = 1 / (1 + np.exp(-(noise - thr) / 0.15))
        m = rust_maps(rust)
        maps.append(m)
        with T.no_grad():
            frames.append(render(SvbrdfMaps.from_array(m), geom, intensity).data)
    times = np.linspace(t_start, t_end, n_frames)
    return Exemplar(np.stack(frames), times, SVBRDF, {"kind": "rusting-ramp", "intensity": intensity}, maps=np.stack(maps))


SYNTH_KINDS = {"growing-disk": growing_disks, "reaction-diffusion": gray_scott_exemplar, "rusting-ramp": rusting_ramp}


def synth_exemplar(kind: str, rng=None, **params) -> Exemplar:
    try:
        fn = SYNTH_KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown synthetic exemplar {kind!r}; choose from {sorted(SYNTH_KINDS)}") from None
    return fn(rng=rng, **params)


def render_maps_sequence(maps: Sequence[np.ndarray], light_pos, intensity: float) -> np.ndarray:
    """Ground-truth relighting of known map sequences."""
    h, w = maps[0].shape[1:]
    geom = shading_geometry(h, w, light_pos=light_pos)
    with T.no_grad():
        return np.stack([render(SvbrdfMaps.from_array(m), geom, intensity).data for m in maps])
