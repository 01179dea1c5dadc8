from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .latent import MODES


@dataclass
class Exemplar:
    """Time-stamped target frames (N x 3 x H x W in [0, 1])."""

    frames: np.ndarray
    times: np.ndarray
    mode: str
    manifest: dict[str, Any] = field(default_factory=dict)
    # svBRDF synthetic exemplars only: N x 9 x H x W ground-truth maps
    maps: np.ndarray | None = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        self.times = np.asarray(self.times, dtype=np.float64)
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.frames.ndim != 4 or self.frames.shape[1] != 3:
            raise ValueError(f"frames must be N x 3 x H x W, got {self.frames.shape}")
        if len(self.frames) < 2:
            raise ValueError("an exemplar needs at least two frames")
        if len(self.times) != len(self.frames):
            raise ValueError("one time per frame required")
        if np.any(np.diff(self.times) < 0):
            raise ValueError("frame times must be non-decreasing")

    @property
    def t_start(self) -> float:
        return float(self.times[0])

    @property
    def t_end(self) -> float:
        return float(self.times[-1])

    @property
    def size(self) -> tuple[int, int]:
        return self.frames.shape[2], self.frames.shape[3]

    def __len__(self) -> int:
        return len(self.frames)

    def nearest_index(self, t: float) -> int:
        return int(np.argmin(np.abs(self.times - t)))

    def frame_at(self, t: float) -> np.ndarray:
        """Target at time ``t``: the nearest available frame (piecewise constant)."""
        return self.frames[self.nearest_index(t)]
