"""Evaluation: per-frame realism and temporal coherence of generated videos."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .losses import FeatureBank, extract_features, gram_loss, swd
from .ops import make_rng

log = logging.getLogger(__name__)

METRIC_SLICE_SEED = 2024
LIGHTS = {
    "center": (0.0, 0.0, 1.0),
    "novel-top": (0.0, -0.5, 1.0),
    "novel-left": (-0.5, 0.0, 1.0),
    "novel-bottom-right": (0.35, 0.35, 1.0),
}


@dataclass
class MetricsReport:
    lighting: str
    gram_per_frame: list[float]
    swd_per_frame: list[float]
    non_straightness: float
    degenerate: bool = False
    notes: list[str] = field(default_factory=list)

    @property
    def gram_mean(self) -> float:
        return float(np.mean(self.gram_per_frame))

    @property
    def swd_mean(self) -> float:
        return float(np.mean(self.swd_per_frame))

    def summary(self) -> dict:
        return {"lighting": self.lighting, "gram_mean": self.gram_mean, "swd_mean": self.swd_mean,
                "non_straightness": self.non_straightness, "degenerate": self.degenerate, "notes": self.notes}

    def to_lines(self) -> list[str]:
        """Line-delimited records: one per frame, then the summary block."""
        lines = [json.dumps({"lighting": self.lighting, "frame": i, "gram": g, "swd": s})
                 for i, (g, s) in enumerate(zip(self.gram_per_frame, self.swd_per_frame))]
        lines.append(json.dumps({"summary": self.summary()}))
        return lines


def frame_realism(img, target, bank: FeatureBank, slice_seed: int = METRIC_SLICE_SEED) -> tuple[float, float]:
    with T.no_grad():
        fa = extract_features(T.as_tensor(np.asarray(img, dtype=np.float32)), bank)
        fb = extract_features(T.as_tensor(np.asarray(target, dtype=np.float32)), bank)
        g = gram_loss(fa, fb).item()
        s = swd(fa, fb, rng=make_rng(slice_seed)).item()
    return float(g), float(s)


def realism_traces(generated: Sequence, target: Sequence, bank: FeatureBank) -> tuple[list[float], list[float]]:
    if len(generated) != len(target):
        raise ValueError(f"frame counts differ: {len(generated)} generated vs {len(target)} target")
    if len(generated) == 0:
        raise ValueError("empty frame sequence")
    pairs = [frame_realism(g, t, bank) for g, t in zip(generated, target)]
    return [p[0] for p in pairs], [p[1] for p in pairs]


def realism(generated: Sequence, target: Sequence, bank: FeatureBank) -> tuple[float, float]:
    """Mean Gram loss and mean SWD over frame pairs."""
    grams, swds = realism_traces(generated, target, bank)
    return float(np.mean(grams)), float(np.mean(swds))


def feature_vector(img, bank: FeatureBank) -> np.ndarray:
    """Global average pool of the deepest bank activation."""
    full = FeatureBank(bank.kernels, bank.biases, (len(bank.kernels),), bank.source)
    with T.no_grad():
        f = extract_features(T.as_tensor(np.asarray(img, dtype=np.float32)), full)[0]
    return f.data.astype(np.float64).mean(axis=(1, 2))


def path_curvature(vectors) -> tuple[np.ndarray, bool]:
    """Turning angles between consecutive non-zero displacements of a path.

    Returns the angles (radians) and whether the path was degenerate, i.e. had
    fewer than two non-zero displacements.
    """
    v = np.asarray(vectors, dtype=np.float64).reshape(len(vectors), -1)
    if len(v) < 3:
        raise ValueError("non-straightness needs at least 3 frames")
    d = np.diff(v, axis=0)
    norms = np.linalg.norm(d, axis=1)
    keep = norms > 0
    d, norms = d[keep], norms[keep]
    if len(d) < 2:
        return np.zeros(0), True
    u = d / norms[:, None]
    a, b = u[:-1], u[1:]
    # half-angle form stays accurate near 0 and pi, where arccos does not
    return 2 * np.arctan2(np.linalg.norm(a - b, axis=1), np.linalg.norm(a + b, axis=1)), False


def mean_curvature(vectors) -> tuple[float, bool]:
    angles, degenerate = path_curvature(vectors)
    if degenerate:
        log.warning("feature path has no non-zero displacements; non-straightness set to 0")
        return 0.0, True
    return float(angles.mean()), False


def non_straightness(video: Sequence, bank: FeatureBank) -> float:
    """Mean turning angle of the video's path through bank feature space."""
    return mean_curvature([feature_vector(f, bank) for f in video])[0]


def evaluate_video(generated: Sequence, target: Sequence, bank: FeatureBank, lighting: str = "center") -> MetricsReport:
    grams, swds = realism_traces(generated, target, bank)
    ns, degenerate = mean_curvature([feature_vector(f, bank) for f in generated]) if len(generated) >= 3 else (0.0, True)
    return MetricsReport(lighting, grams, swds, ns, degenerate)


def seam_ratio(img: np.ndarray) -> float:
    """Mean gradient magnitude across the wrap boundary over that of interior pixel pairs."""
    x = np.asarray(img, dtype=np.float64)
    gx = np.abs(np.roll(x, -1, axis=-1) - x)
    gy = np.abs(np.roll(x, -1, axis=-2) - x)
    seam = np.concatenate([gx[..., :, -1].ravel(), gy[..., -1, :].ravel()]).mean()
    interior = np.concatenate([gx[..., :, :-1].ravel(), gy[..., :-1, :].ravel()]).mean()
    return float(seam / interior)


def relight_eval(
    model,
    sample_times: Sequence[float],
    seeds: Sequence[int],
    references: Mapping[str, np.ndarray | None],
    bank: FeatureBank,
    lights: Mapping[str, tuple[float, float, float]] = LIGHTS,
    size: int | None = None,
) -> list[MetricsReport]:
    """Render generated svBRDF maps under each lighting and compare with references.

    ``references`` maps a lighting name to an N x 3 x H x W sequence (or None
    when no ground truth exists, in which case that lighting is reported only
    as a note).
    """
    from .synthesis import relight_maps, sample_maps

    if model.mode != "svbrdf":
        raise ValueError("relighting needs an svBRDF model")
    maps_per_seed = [sample_maps(model, seed, size, sample_times) for seed in seeds]
    reports = []
    missing = []
    for name, pos in lights.items():
        ref = references.get(name)
        if ref is None:
            missing.append(name)
            continue
        if len(ref) != len(sample_times):
            raise ValueError(f"reference for {name} has {len(ref)} frames, expected {len(sample_times)}")
        grams, swds, ns = [], [], []
        for maps in maps_per_seed:
            video = relight_maps(model, maps, pos)
            g, s = realism_traces(video, ref, bank)
            grams += g
            swds += s
            ns.append(mean_curvature([feature_vector(f, bank) for f in video])[0])
        reports.append(MetricsReport(name, grams, swds, float(np.mean(ns))))
    if missing and reports:
        reports[0].notes.append(f"no ground truth for {', '.join(missing)}; omitted")
    return reports


def report_dicts(reports: Sequence[MetricsReport]) -> list[dict]:
    return [{**asdict(r), "gram_mean": r.gram_mean, "swd_mean": r.swd_mean} for r in reports]
