"""Inference with a trained field: generation, relighting and dynamics transfer."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .archive import save_archive
from .data import write_png
from .field import FieldConfig, Params, VectorField, check_resolution, init_params, intensity
from .latent import RGB, SVBRDF, LatentState, extract_brdf_maps, project_rgb, sample_initial_state
from .ode import solve_dense
from .ops import make_rng
from .render import SvbrdfMaps, render, shading_geometry
from .train import TrainConfig, load_checkpoint, params_from_tensors

log = logging.getLogger(__name__)

MAP_NAMES = ("diffuse", "specular", "roughness_u", "roughness_v", "height")
STD_FLOOR = 1e-6


@dataclass
class Model:
    """Trained parameters with the configuration needed to run them."""

    params: Params
    field_cfg: FieldConfig
    train_cfg: TrainConfig

    @property
    def mode(self) -> str:
        return self.train_cfg.mode

    @property
    def field(self) -> VectorField:
        return VectorField(self.params, self.field_cfg)

    @classmethod
    def load(cls, path) -> "Model":
        tensors, meta = load_checkpoint(path)
        fcfg = FieldConfig.from_dict(meta["field_config"])
        return cls(params_from_tensors(tensors, fcfg), fcfg, TrainConfig.from_dict(meta["train_config"]))

    @classmethod
    def untrained(cls, train_cfg: TrainConfig, field_cfg: FieldConfig | None = None, seed: int = 0) -> "Model":
        fcfg = field_cfg or train_cfg.field_config()
        return cls(init_params(fcfg, seed, svbrdf=train_cfg.mode == SVBRDF), fcfg, train_cfg)

    def frame_times(self, n_frames: int) -> np.ndarray:
        return np.linspace(self.train_cfg.t_start, self.train_cfg.t_end, n_frames)


def sample_states(model: Model, seed: int, size: int | tuple[int, int], times: Sequence[float], z0: LatentState | None = None) -> list[LatentState]:
    """Solve from fresh noise at the warm-up time and return the state at each time."""
    h, w = (size, size) if np.isscalar(size) else size
    check_resolution(model.field_cfg, h, w)
    cfg = model.train_cfg
    if z0 is None:
        z0 = sample_initial_state(make_rng(seed), cfg.mode, h, w, augmented=cfg.augmented)
    with T.no_grad():
        traj, _ = solve_dense(model.field, z0.data, cfg.t_warmup, times, cfg.tol)
    return [LatentState(s, cfg.mode) for s in traj.states]


def sample_maps(model: Model, seed: int, size, times: Sequence[float]) -> list[np.ndarray]:
    """9-channel svBRDF maps of one generated trajectory."""
    if size is None:
        size = model.train_cfg.crop_size or 16
    with T.no_grad():
        return [extract_brdf_maps(z, model.train_cfg.isotropic).stack() for z in sample_states(model, seed, size, times)]


def relight_maps(model: Model, maps: Sequence[np.ndarray], light_pos) -> np.ndarray:
    h, w = maps[0].shape[1:]
    geom = shading_geometry(h, w, light_pos=light_pos)
    with T.no_grad():
        inten = intensity(model.params)
        return np.stack([render(SvbrdfMaps.from_array(m), geom, inten).data for m in maps])


def generate(
    model: Model,
    seed: int,
    out_size: int,
    n_frames: int,
    out_dir=None,
    light_pos=(0.0, 0.0, 1.0),
) -> tuple[np.ndarray, np.ndarray | None]:
    """Synthesize ``n_frames`` frames over the generation interval.

    Returns (frames, maps); maps is None in RGB mode.  With ``out_dir`` the
    frames are written as numbered PNGs and, for svBRDF, the float maps go to
    ``maps.nap`` alongside 8-bit per-map previews.
    """
    times = model.frame_times(n_frames)
    states = sample_states(model, seed, out_size, times)
    with T.no_grad():
        if model.mode == RGB:
            frames = np.stack([project_rgb(z).data for z in states])
            maps = None
        else:
            maps = np.stack([extract_brdf_maps(z, model.train_cfg.isotropic).stack() for z in states])
            frames = relight_maps(model, maps, light_pos)
    if out_dir is not None:
        write_outputs(out_dir, frames, maps)
    return frames, maps


def write_outputs(out_dir, frames: np.ndarray, maps: np.ndarray | None = None) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, f in enumerate(frames):
        p = out / f"frame_{i:04d}.png"
        write_png(p, f)
        paths.append(p)
    if maps is not None:
        save_archive(out / "maps.nap", {f"maps/{i:04d}": m for i, m in enumerate(maps)}, {"kind": "svbrdf-maps", "channels": list(MAP_NAMES)})
        prev = out / "maps"
        prev.mkdir(exist_ok=True)
        for i, m in enumerate(maps):
            height = m[8:9]
            span = max(float(np.ptp(height)), 1e-6)
            h01 = (height - height.min()) / span
            for name, img in (("diffuse", m[0:3]), ("specular", m[3:6]), ("roughness_u", m[6:7]), ("roughness_v", m[7:8]), ("height", h01)):
                write_png(prev / f"{name}_{i:04d}.png", np.broadcast_to(img, (3,) + img.shape[1:]))
    return paths


# transfer ------------------------------------------------------------------------------------


def channel_stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    return x.mean(axis=(1, 2)), x.std(axis=(1, 2))


def _scales(std_from: np.ndarray, std_to: np.ndarray) -> np.ndarray:
    bad = (std_from < STD_FLOOR) | (std_to < STD_FLOOR)
    if np.any(bad):
        log.warning("degenerate channel std in channels %s; passing through unscaled", np.flatnonzero(bad).tolist())
    return np.where(bad, 1.0, std_to / np.where(bad, 1.0, std_from))


def encode(img: np.ndarray, img_stats, state_stats) -> np.ndarray:
    """Standardize ``img`` per channel and re-scale to the state's statistics."""
    (mi, si), (ms, ss) = img_stats, state_stats
    k = _scales(si, ss)
    return ((img - mi[:, None, None]) * k[:, None, None] + ms[:, None, None]).astype(np.float32)


def decode(x: np.ndarray, img_stats, state_stats) -> np.ndarray:
    """Inverse of :func:`encode`."""
    (mi, si), (ms, ss) = img_stats, state_stats
    k = _scales(si, ss)
    return ((np.asarray(x, dtype=np.float64) - ms[:, None, None]) / k[:, None, None] + mi[:, None, None]).astype(np.float32)


def transfer(model: Model, new_image: np.ndarray, seed: int, n_frames: int = 10) -> np.ndarray:
    """Apply the learned dynamics to ``new_image`` (3 x H x W) and return decoded frames."""
    if model.mode != RGB:
        raise ValueError("dynamics transfer is defined for RGB models")
    img = np.asarray(new_image, dtype=np.float32)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected a 3 x H x W image, got {img.shape}")
    h, w = img.shape[1:]
    cfg = model.train_cfg
    warm = sample_states(model, seed, (h, w), [cfg.t_start])[0]
    z = warm.data.data.copy()
    img_stats = channel_stats(img)
    state_stats = channel_stats(z[0:3])
    z[0:3] = encode(img, img_stats, state_stats)
    times = model.frame_times(n_frames)
    with T.no_grad():
        traj, _ = solve_dense(model.field, T.Tensor(z), cfg.t_start, times, cfg.tol)
    return np.stack([decode(s.data[0:3], img_stats, state_stats) for s in traj.states])
