"""Clip preprocessing: frame sampling, background subtraction, resize, flip."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np


@dataclass(frozen=True)
class Clip:
    """Grayscale frame stack ``[T, H, W]`` with pixels in [0, 1]."""

    frames: np.ndarray
    fps: float

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float32)
        if frames.ndim != 3 or min(frames.shape) < 1:
            raise ValueError(f"clip frames must be a non-empty [T,H,W] array, got {frames.shape}")
        if not self.fps > 0:
            raise ValueError(f"fps must be > 0, got {self.fps}")
        if not np.all(np.isfinite(frames)) or frames.min() < 0 or frames.max() > 1:
            raise ValueError("clip pixels must be finite and within [0, 1]")
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "fps", float(self.fps))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.frames.shape


@dataclass(frozen=True)
class PreprocessConfig:
    """Seconds considered (S), frames sampled (N), target size, bg-sub options.

    ``size=None`` keeps the native frame size.
    """

    S: float = 7.0
    N: int = 35
    size: tuple[int, int] | None = (20, 20)
    bg_sub: bool = True
    bg_threshold: float | None = None

    def __post_init__(self):
        if not self.S > 0:
            raise ValueError("S must be > 0")
        if int(self.N) < 1:
            raise ValueError("N must be >= 1")
        object.__setattr__(self, "N", int(self.N))
        object.__setattr__(self, "S", float(self.S))
        if self.size is not None:
            size = tuple(int(v) for v in self.size)
            if len(size) != 2 or min(size) < 1:
                raise ValueError(f"size must be two positive ints, got {self.size!r}")
            object.__setattr__(self, "size", size)
        if self.bg_threshold is not None and not 0 < self.bg_threshold < 1:
            raise ValueError("bg_threshold must be in (0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["size"] = list(self.size) if self.size is not None else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PreprocessConfig":
        size = d.get("size")
        return cls(S=d["S"], N=d["N"], size=tuple(size) if size is not None else None,
                   bg_sub=bool(d.get("bg_sub", True)), bg_threshold=d.get("bg_threshold"))


# Table values for the three public datasets.
DATASET_PRESETS = {
    "kth": PreprocessConfig(S=7, N=35),
    "weizmann": PreprocessConfig(S=2, N=20),
    "ut": PreprocessConfig(S=7, N=35),
}


class ClipTooShortError(ValueError):
    pass


def usable_frames(clip: Clip, S: float) -> int:
    # tolerance guards products like 0.1 * 30 landing just under an integer
    return min(clip.shape[0], math.floor(S * clip.fps + 1e-9))


def sample_indices(F: int, N: int) -> np.ndarray:
    return (np.arange(N, dtype=np.int64) * F) // N


def sample_frames(clip: Clip, S: float, N: int) -> Clip:
    """Pick N equally interleaved frames from the first S seconds."""
    F = usable_frames(clip, S)
    if F < N:
        raise ClipTooShortError(
            f"need {N} frames within the first {S:g} s but only {F} are available "
            f"({clip.shape[0]} frames at {clip.fps:g} fps); clip must span at least "
            f"{N / clip.fps:.3f} s and S*fps must be >= {N}")
    return Clip(clip.frames[sample_indices(F, N)], clip.fps)


def temporal_median(frames: np.ndarray) -> np.ndarray:
    """Per-pixel median; for even counts the lower middle value."""
    k = (frames.shape[0] - 1) // 2
    return np.partition(frames, k, axis=0)[k]


def background_subtract(clip: Clip, threshold: float | None = None) -> Clip:
    if clip.shape[0] < 3:
        raise ValueError(f"background subtraction needs >= 3 frames, got {clip.shape[0]}")
    ref = temporal_median(clip.frames)
    out = np.abs(clip.frames - ref)
    if threshold is not None:
        out = (out >= threshold).astype(np.float32)
    return Clip(np.clip(out, 0.0, 1.0), clip.fps)


def _axis_weights(n_in: int, n_out: int):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize_bilinear(frame, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize with pixel-center sampling (no corner alignment).

    Accepts a single ``[H, W]`` frame or a ``[T, H, W]`` stack.
    """
    frame = np.asarray(frame)
    Ho, Wo = (int(v) for v in size)
    if Ho < 1 or Wo < 1:
        raise ValueError(f"target size must be positive, got {size!r}")
    H, W = frame.shape[-2:]
    f = frame.astype(np.float64)
    r0, r1, fr = _axis_weights(H, Ho)
    c0, c1, fc = _axis_weights(W, Wo)
    rows = f[..., r0, :] * (1 - fr)[:, None] + f[..., r1, :] * fr[:, None]
    out = rows[..., c0] * (1 - fc) + rows[..., c1] * fc
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def hflip(clip: Clip) -> Clip:
    return Clip(clip.frames[:, :, ::-1].copy(), clip.fps)


def preprocess(clip: Clip, cfg: PreprocessConfig) -> np.ndarray:
    """sample -> optional bg-sub -> resize -> ``[1, N, H', W']`` float32."""
    c = sample_frames(clip, cfg.S, cfg.N)
    if cfg.bg_sub:
        c = background_subtract(c, cfg.bg_threshold)
    frames = c.frames
    if cfg.size is not None and tuple(frames.shape[1:]) != cfg.size:
        frames = resize_bilinear(frames, cfg.size)
    return np.ascontiguousarray(frames[None], dtype=np.float32)
