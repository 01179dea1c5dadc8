"""Online training of an appearance ODE.

Each iteration integrates the field over one short segment and updates the
weights from the loss at the segment end.  Every ``refresh_rate`` iterations
the carried state is replaced by fresh noise at the warm-up time and
supervised by the first frame; the iterations in between walk the carried
state across stratified sub-intervals of the generation phase.
"""

from __future__ import annotations

import json
import logging
import math
import time
from collections import deque
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from . import tensor as T
from .archive import load_archive, save_archive
from .exemplar import Exemplar
from .field import FieldConfig, Params, VectorField, init_params, intensity
from .latent import RGB, SVBRDF, LatentState, appearance_channels, project_rgb, sample_initial_state
from .losses import FeatureBank, LossWeights, crop_loss, global_loss, range_penalty, shuffle_init_loss
from .ode import SolverError, solve_adaptive
from .ops import make_rng
from .render import shading_geometry

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    mode: str = RGB
    iterations: int = 50000
    refresh_rate: int = 6
    lr: float = 5e-4
    t_warmup: float = -1.0
    t_start: float = 0.0
    t_end: float = 5.0
    # svBRDF: iterations trained with the shuffle initialization loss before switching to crops
    init_iterations: int = 20000
    plateau_patience: int = 2500
    plateau_window: int = 100
    plateau_threshold: float = 0.01
    tol: float = 1e-2
    crop_size: int = 0  # 0: half the exemplar side
    n_crops: int = 36
    n_shuffles: int = 36
    n_slices: int = 64
    range_weight: float = 0.1
    height_max: float = 3.0
    augmented: int = 9
    isotropic: bool = False
    bank_seed: int = 0
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.refresh_rate < 2:
            raise ValueError("refresh_rate must be at least 2")
        if not self.t_warmup < self.t_start < self.t_end:
            raise ValueError("need t_warmup < t_start < t_end")
        appearance_channels(self.mode)

    @property
    def warmup_ratio(self) -> float:
        return (self.t_start - self.t_warmup) / (self.t_end - self.t_start)

    @classmethod
    def rgb(cls, **kw) -> "TrainConfig":
        return cls(**{"mode": RGB, "iterations": 50000, "t_warmup": -1.0, "t_start": 0.0, "t_end": 5.0, **kw})

    @classmethod
    def svbrdf(cls, **kw) -> "TrainConfig":
        base = {"mode": SVBRDF, "iterations": 60000, "init_iterations": 20000, "t_warmup": -2.0, "t_start": 0.0, "t_end": 10.0}
        return cls(**{**base, **kw})

    def field_config(self, desk: bool = False) -> FieldConfig:
        span = self.t_end - self.t_warmup
        if desk:
            return FieldConfig.desk(appearance_channels(self.mode), self.augmented, use_attention=self.mode == RGB, time_span=span)
        if self.mode == RGB:
            return FieldConfig.rgb(self.augmented, time_span=span)
        return FieldConfig.svbrdf(self.augmented, time_span=span)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def sample_supervision_time(k: int, t_start: float, t_end: float, refresh_rate: int, rng: np.random.Generator) -> float:
    """Uniform draw from the k-th of ``refresh_rate - 1`` equal strata of [t_start, t_end]."""
    if not 1 <= k <= refresh_rate - 1:
        raise ValueError(f"stratum {k} outside 1..{refresh_rate - 1}")
    width = (t_end - t_start) / (refresh_rate - 1)
    return float(t_start + width * (k - 1 + rng.random()))


# optimizer ------------------------------------------------------------------------------


@dataclass
class OptimizerState:
    lr: float
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    best: float = math.inf
    since_best: int = 0
    window: deque = field(default_factory=deque)
    lr_events: list[int] = field(default_factory=list)


def adam_step(params: Params, opt: OptimizerState, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> bool:
    """Bias-corrected Adam update from the accumulated ``.grad`` of each parameter.

    Returns False (and leaves everything untouched) if any adjoint is non-finite.
    """
    grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        log.warning("non-finite gradient; skipping update at step %d", opt.step)
        return False
    opt.step += 1
    c1 = 1 - beta1**opt.step
    c2 = 1 - beta2**opt.step
    for k, p in params.items():
        g = grads[k].astype(np.float32)
        m = opt.m.get(k)
        if m is None:
            m = opt.m[k] = np.zeros(p.shape, dtype=np.float32)
            opt.v[k] = np.zeros(p.shape, dtype=np.float32)
        v = opt.v[k]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        upd = np.float32(opt.lr) * (m / np.float32(c1)) / (np.sqrt(v / np.float32(c2)) + np.float32(eps))
        p.data = (p.data - upd).astype(p.dtype)
    return True


def plateau_update(opt: OptimizerState, loss: float, patience: int, window: int = 100, threshold: float = 0.01, iteration: int | None = None) -> bool:
    """Halve the learning rate when the smoothed loss stops improving.

    Returns True when a halving happened.
    """
    opt.window.append(float(loss))
    while len(opt.window) > window:
        opt.window.popleft()
    smoothed = float(np.mean(opt.window))
    if smoothed < opt.best * (1 - threshold):
        opt.best = smoothed
        opt.since_best = 0
        return False
    opt.since_best += 1
    if opt.since_best >= patience:
        opt.lr /= 2
        opt.since_best = 0
        opt.lr_events.append(iteration if iteration is not None else opt.step)
        return True
    return False


# trainer -----------------------------------------------------------------------------------


def _zero_grads(params: Params) -> None:
    for p in params.values():
        p.grad = None


class Trainer:
    """Holds everything that evolves during training and runs iterations."""

    def __init__(
        self,
        cfg: TrainConfig,
        exemplar: Exemplar,
        field_cfg: FieldConfig | None = None,
        params: Params | None = None,
        bank: FeatureBank | None = None,
        report_path=None,
    ):
        if exemplar.mode != cfg.mode:
            raise ValueError(f"exemplar mode {exemplar.mode} does not match config mode {cfg.mode}")
        self.cfg = cfg
        self.exemplar = exemplar
        self.field_cfg = field_cfg or cfg.field_config()
        self.params = params if params is not None else init_params(self.field_cfg, seed=cfg.seed)
        self.field = VectorField(self.params, self.field_cfg)
        self.bank = bank or FeatureBank.random(cfg.bank_seed)
        self.opt = OptimizerState(lr=cfg.lr)
        self.rng = make_rng(cfg.seed + 1)
        self.iteration = 0
        self.carried: LatentState | None = None
        self.carried_t = cfg.t_warmup
        self.history: list[dict[str, Any]] = []
        self.phase_steps = {"warmup": [0, 0.0], "generation": [0, 0.0]}
        self.report_path = Path(report_path) if report_path else None
        H, W = exemplar.size
        if cfg.mode == SVBRDF:
            self.geom = shading_geometry(H, W)
            c = cfg.crop_size or H // 2
            self.state_hw = (c, c)
        else:
            self.geom = None
            self.state_hw = (H, W)

    # -- loss
    def phase(self, i: int) -> str:
        if self.cfg.mode == RGB:
            return "global"
        return "init" if i < self.cfg.init_iterations else "local"

    def weights(self, i: int) -> LossWeights:
        return LossWeights.for_phase(self.phase(i))

    def loss(self, z: LatentState, target: np.ndarray, phase: str) -> T.Tensor:
        cfg = self.cfg
        w = LossWeights.for_phase(phase)
        if w.w_global:
            return global_loss(project_rgb(z), target, self.bank, self.rng, cfg.n_slices) * w.w_global
        inten = intensity(self.params)
        if w.w_init:
            return shuffle_init_loss(z, target, self.geom, inten, self.rng, cfg.n_shuffles, cfg.isotropic) * w.w_init
        return crop_loss(z, target, self.geom, inten, self.bank, self.rng, cfg.n_crops, cfg.n_slices, cfg.isotropic) * w.w_local

    def _segment(self, i: int) -> tuple[LatentState, float, float]:
        cfg = self.cfg
        k = i % cfg.refresh_rate
        if k == 0 or self.carried is None:
            z0 = sample_initial_state(self.rng, cfg.mode, *self.state_hw, augmented=cfg.augmented)
            return z0, cfg.t_warmup, cfg.t_start
        t1 = sample_supervision_time(k, cfg.t_start, cfg.t_end, cfg.refresh_rate, self.rng)
        return self.carried, self.carried_t, t1

    def step(self) -> dict[str, Any]:
        """One iteration; returns its record."""
        cfg = self.cfg
        i = self.iteration
        start = time.perf_counter()
        z0, t0, t1 = self._segment(i)
        phase = self.phase(i)
        rec: dict[str, Any] = {"iteration": i, "phase": phase, "t0": t0, "t1": t1}
        _zero_grads(self.params)
        try:
            if t1 > t0:
                zd, stats = solve_adaptive(self.field, z0.data, t0, t1, cfg.tol)
                nfe, acc, rej = stats.nfe, stats.accepted_steps, stats.rejected_steps
                self._record_density(stats.steps_per_unit_time, t0, t1)
            else:
                zd, nfe, acc, rej = z0.data, 0, 0, 0
            z1 = LatentState(zd, cfg.mode)
            target = self.exemplar.frame_at(t1)
            d = self.loss(z1, target, phase)
            total = d + range_penalty(z1, cfg.range_weight, cfg.height_max)
            nodes = T.backward(total)
            updated = adam_step(self.params, self.opt, cfg.beta1, cfg.beta2, cfg.eps)
            lr_cut = plateau_update(self.opt, total.item(), cfg.plateau_patience, cfg.plateau_window, cfg.plateau_threshold, i)
            self.carried = z1.detach()
            self.carried_t = t1
            rec.update(loss=float(d.item()), total=float(total.item()), lr=self.opt.lr, nfe=nfe,
                       accepted=acc, rejected=rej, nodes=nodes, updated=updated, lr_halved=lr_cut)
        except SolverError as exc:
            log.warning("iteration %d aborted: %s", i, exc)
            self.carried = None
            rec.update(aborted=str(exc), lr=self.opt.lr)
        rec["wall"] = time.perf_counter() - start
        self.iteration += 1
        self.history.append(rec)
        if self.report_path is not None:
            with open(self.report_path, "a") as fh:
                fh.write(json.dumps(rec) + "\n")
        return rec

    def _record_density(self, steps, t0: float, t1: float) -> None:
        for tm, inv_dt in steps:
            key = "warmup" if tm < self.cfg.t_start else "generation"
            self.phase_steps[key][0] += 1
            self.phase_steps[key][1] += 1.0 / inv_dt

    def steps_per_unit_time(self) -> dict[str, float]:
        """Accepted solver steps per unit of integrated time, by phase."""
        return {k: (n / span if span > 0 else 0.0) for k, (n, span) in self.phase_steps.items()}

    def run(self, n: int | None = None, callback=None) -> list[dict[str, Any]]:
        n = self.cfg.iterations - self.iteration if n is None else n
        out = []
        for _ in range(n):
            rec = self.step()
            out.append(rec)
            if callback is not None:
                callback(self, rec)
        return out

    def report(self) -> dict[str, Any]:
        losses = [r["loss"] for r in self.history if "loss" in r]
        return {
            "iterations": self.iteration,
            "losses": losses,
            "lr_events": list(self.opt.lr_events),
            "aborted": sum(1 for r in self.history if "aborted" in r),
            "nfe": sum(r.get("nfe", 0) for r in self.history),
            "steps_per_unit_time": self.steps_per_unit_time(),
        }

    # -- persistence
    def state(self) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
        tensors: dict[str, np.ndarray] = {}
        for k, p in self.params.items():
            tensors[f"param/{k}"] = p.data
        for k in self.opt.m:
            tensors[f"adam_m/{k}"] = self.opt.m[k]
            tensors[f"adam_v/{k}"] = self.opt.v[k]
        if self.carried is not None:
            tensors["carried"] = self.carried.data.data
        meta = {
            "kind": "checkpoint",
            "format_version": CHECKPOINT_VERSION,
            "field_config": self.field_cfg.to_dict(),
            "train_config": self.cfg.to_dict(),
            "iteration": self.iteration,
            "carried_t": self.carried_t,
            "opt": {
                "lr": self.opt.lr, "step": self.opt.step, "best": self.opt.best if math.isfinite(self.opt.best) else None,
                "since_best": self.opt.since_best, "window": list(self.opt.window), "lr_events": self.opt.lr_events,
            },
            "rng": self.rng.bit_generator.state,
            "phase_steps": self.phase_steps,
            "bank_source": self.bank.source,
        }
        return tensors, meta

    def save(self, path) -> None:
        tensors, meta = self.state()
        save_archive(path, tensors, meta)

    @classmethod
    def load(cls, path, exemplar: Exemplar, bank: FeatureBank | None = None, report_path=None) -> "Trainer":
        tensors, meta = load_checkpoint(path)
        cfg = TrainConfig.from_dict(meta["train_config"])
        fcfg = FieldConfig.from_dict(meta["field_config"])
        params = params_from_tensors(tensors, fcfg)
        tr = cls(cfg, exemplar, fcfg, params, bank, report_path)
        o = meta["opt"]
        tr.opt.lr = o["lr"]
        tr.opt.step = o["step"]
        tr.opt.best = o["best"] if o["best"] is not None else math.inf
        tr.opt.since_best = o["since_best"]
        tr.opt.window = deque(o["window"])
        tr.opt.lr_events = list(o["lr_events"])
        for k in params:
            if f"adam_m/{k}" in tensors:
                tr.opt.m[k] = tensors[f"adam_m/{k}"]
                tr.opt.v[k] = tensors[f"adam_v/{k}"]
        tr.iteration = meta["iteration"]
        tr.carried_t = meta["carried_t"]
        if "carried" in tensors:
            tr.carried = LatentState(T.Tensor(tensors["carried"]), cfg.mode)
        tr.rng.bit_generator.state = meta["rng"]
        tr.phase_steps = {k: list(v) for k, v in meta["phase_steps"].items()}
        return tr


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    """Read a checkpoint archive and validate its kind and version."""
    tensors, meta = load_archive(path)
    if meta.get("kind") != "checkpoint":
        raise ValueError(f"{path} is a tensor archive but not a checkpoint")
    if meta.get("format_version", 0) > CHECKPOINT_VERSION:
        raise ValueError(f"{path}: checkpoint version {meta['format_version']} is newer than supported {CHECKPOINT_VERSION}")
    return tensors, meta


def params_from_tensors(tensors: dict[str, np.ndarray], fcfg: FieldConfig) -> Params:
    reference = init_params(fcfg, 0, svbrdf=any(k == "param/log_intensity" for k in tensors))
    params: Params = {}
    for k, ref in reference.items():
        arr = tensors.get(f"param/{k}")
        if arr is None:
            raise ValueError(f"checkpoint is missing parameter {k}")
        if arr.shape != ref.shape:
            raise ValueError(f"parameter {k} has shape {arr.shape}, config expects {ref.shape}")
        params[k] = T.parameter(arr, name=k)
    return params


def train(cfg: TrainConfig, exemplar: Exemplar, field_cfg: FieldConfig | None = None, bank: FeatureBank | None = None, report_path=None) -> tuple[Params, dict[str, Any]]:
    """Run all ``cfg.iterations`` and return the parameters and a summary report."""
    tr = Trainer(cfg, exemplar, field_cfg, bank=bank, report_path=report_path)
    tr.run()
    return tr.params, tr.report()
