"""Clip file formats, dataset manifests, augmentation and synthetic data.

RVID layout (little-endian)::

    "RVID" | u8 version=1 | u16 T | u16 H | u16 W | f32 fps | T*H*W u8 pixels

Manifest layout (UTF-8)::

    classes: a,b,c
    path,class_name,split
"""

from __future__ import annotations

import logging
import math
import os
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .vision import Clip, hflip, resize_bilinear

logger = logging.getLogger(__name__)

RVID_MAGIC = b"RVID"
RVID_VERSION = 1
_RVID_HEADER = struct.Struct("<4sBHHHf")
SPLITS = ("train", "val", "test")


class FormatError(ValueError):
    """Malformed clip file or manifest."""


def quantize(frames: np.ndarray) -> np.ndarray:
    """Pixels in [0,1] to u8 with round-half-up."""
    return np.floor(np.clip(frames, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def encode_rvid(clip: Clip) -> bytes:
    T, H, W = clip.shape
    if max(T, H, W) > 0xFFFF:
        raise FormatError(f"clip dims {clip.shape} exceed the u16 header limit")
    header = _RVID_HEADER.pack(RVID_MAGIC, RVID_VERSION, T, H, W, clip.fps)
    return header + quantize(clip.frames).tobytes()


def decode_rvid(data: bytes) -> Clip:
    if len(data) < _RVID_HEADER.size:
        raise FormatError(f"truncated header: {len(data)} bytes, need {_RVID_HEADER.size}")
    magic, version, T, H, W, fps = _RVID_HEADER.unpack_from(data, 0)
    if magic != RVID_MAGIC:
        raise FormatError(f"bad magic {magic!r} at byte 0")
    if version != RVID_VERSION:
        raise FormatError(f"unsupported version {version} at byte 4")
    if min(T, H, W) < 1:
        raise FormatError(f"zero dimension in header (T={T}, H={H}, W={W}) at byte 5")
    if not (math.isfinite(fps) and fps > 0):
        raise FormatError(f"invalid fps {fps} at byte 11")
    need = T * H * W
    payload = memoryview(data)[_RVID_HEADER.size:]
    if len(payload) < need:
        raise FormatError(f"truncated payload: expected {need} bytes from byte "
                          f"{_RVID_HEADER.size}, file ends at byte {len(data)}")
    if len(payload) > need:
        raise FormatError(f"{len(payload) - need} trailing bytes after payload at byte "
                          f"{_RVID_HEADER.size + need}")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(T, H, W)
    return Clip(pixels.astype(np.float32) / np.float32(255.0), fps)


def write_rvid(clip: Clip, path) -> None:
    Path(path).write_bytes(encode_rvid(clip))


def read_rvid(path) -> Clip:
    return decode_rvid(Path(path).read_bytes())


def _read_pgm(path: Path) -> np.ndarray:
    data = path.read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise FormatError(f"{path.name}: truncated PGM header")
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    if tokens[0] != b"P5":
        raise FormatError(f"{path.name}: not a binary P5 PGM (magic {tokens[0]!r})")
    try:
        W, H, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError(f"{path.name}: malformed PGM header") from None
    if maxval != 255:
        raise FormatError(f"{path.name}: maxval {maxval} unsupported (need 255)")
    if len(data) - pos < W * H:
        raise FormatError(f"{path.name}: truncated pixel data")
    return np.frombuffer(data, dtype=np.uint8, count=W * H, offset=pos).reshape(H, W)


def write_pgm(frame: np.ndarray, path) -> None:
    H, W = frame.shape
    Path(path).write_bytes(f"P5\n{W} {H}\n255\n".encode() + quantize(frame).tobytes())


def load_pgm_dir(directory, fps: float | None = None) -> Clip:
    """Stack ``*.pgm`` files in lexicographic order.

    ``fps`` wins over an ``fps.txt`` sidecar in the directory.
    """
    directory = Path(directory)
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() == ".pgm")
    if not files:
        raise FormatError(f"{directory}: no .pgm frames found")
    frames = []
    for p in files:
        f = _read_pgm(p)
        if frames and f.shape != frames[0].shape:
            raise FormatError(f"{p.name}: frame size {f.shape} differs from "
                              f"{files[0].name} {frames[0].shape}")
        frames.append(f)
    if fps is None:
        sidecar = directory / "fps.txt"
        if not sidecar.exists():
            raise FormatError(f"{directory}: no fps given and no fps.txt sidecar")
        fps = float(sidecar.read_text().strip())
    return Clip(np.stack(frames).astype(np.float32) / np.float32(255.0), fps)


def save_pgm_dir(clip: Clip, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(clip.frames):
        write_pgm(frame, directory / f"frame_{t:04d}.pgm")
    (directory / "fps.txt").write_text(f"{clip.fps!r}\n")


def load_clip(path, fps: float | None = None) -> Clip:
    """Load an RVID file or a PGM frame directory."""
    path = Path(path)
    if path.is_dir():
        return load_pgm_dir(path, fps)
    return read_rvid(path)


# -- manifests ---------------------------------------------------------------

@dataclass(frozen=True)
class Entry:
    path: str
    label: int
    split: str


@dataclass
class DatasetManifest:
    classes: list[str]
    entries: list[Entry]
    root: Path = field(default_factory=Path)

    def split(self, name: str) -> list[Entry]:
        return [e for e in self.entries if e.split == name]

    def counts(self) -> dict[str, int]:
        c = Counter(e.split for e in self.entries)
        return {s: c.get(s, 0) for s in SPLITS}

    def resolve(self, entry: Entry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else self.root / p

    def to_text(self) -> str:
        lines = ["classes: " + ",".join(self.classes)]
        lines += [f"{e.path},{self.classes[e.label]},{e.split}" for e in self.entries]
        return "\n".join(lines) + "\n"


def parse_manifest(text: str, root=".", check_files: bool = True) -> DatasetManifest:
    root = Path(root)
    lines = text.splitlines()
    if not lines or not lines[0].startswith("classes:"):
        raise FormatError("line 1: expected header 'classes: a,b,c'")
    classes = [c.strip() for c in lines[0][len("classes:"):].split(",") if c.strip()]
    if len(classes) < 2 or len(set(classes)) != len(classes):
        raise FormatError("line 1: need at least two distinct class names")
    index = {c: i for i, c in enumerate(classes)}
    entries: list[Entry] = []
    seen: set[str] = set()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = [p.strip() for p in line.rsplit(",", 2)]
        if len(parts) != 3:
            raise FormatError(f"line {lineno}: expected 'path,class_name,split'")
        path, cls, split = parts
        if cls not in index:
            raise FormatError(f"line {lineno}: undeclared class {cls!r}")
        if split not in SPLITS:
            raise FormatError(f"line {lineno}: unknown split {split!r}")
        if path in seen:
            raise FormatError(f"line {lineno}: duplicate path {path!r}")
        seen.add(path)
        full = Path(path) if Path(path).is_absolute() else root / path
        if check_files and not full.exists():
            raise FormatError(f"line {lineno}: clip file not found: {full}")
        entries.append(Entry(path, index[cls], split))
    return DatasetManifest(classes, entries, root)


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    m = parse_manifest(path.read_text(encoding="utf-8"), path.parent, check_files)
    logger.info("manifest %s: %s", path, m.counts())
    return m


# -- augmentation ------------------------------------------------------------

@dataclass(frozen=True)
class Sample:
    clip: Clip
    label: int
    source: str
    flipped: bool = False


def augment_training_set(train: list[Sample], val: list[Sample], mode: str = "none",
                         exclude_labels=()) -> list[Sample]:
    """Build the training list.

    ``model4`` appends flipped copies of the training clips and flipped copies
    of the validation clips; unflipped validation clips never enter training.
    Labels in ``exclude_labels`` (not flip-invariant) get no flipped copies.
    """
    if mode == "none":
        return list(train)
    if mode != "model4":
        raise ValueError(f"unknown augmentation mode {mode!r}")
    exclude = set(exclude_labels)
    flipped = [Sample(hflip(s.clip), s.label, s.source, True)
               for s in list(train) + list(val) if s.label not in exclude]
    if exclude:
        logger.info("flip augmentation skipped for labels %s", sorted(exclude))
    return list(train) + flipped


# -- synthetic dataset -------------------------------------------------------

SYNTH_CLASSES = ("translate-left", "translate-right", "translate-up", "translate-down",
                 "grow-shrink", "oscillate")
# Horizontal flip swaps these two labels, so flip augmentation must skip them.
LATERAL_CLASSES = ("translate-left", "translate-right")


@dataclass(frozen=True)
class SynthConfig:
    classes: int = 6
    clips_per_class: int = 40
    T: int = 16
    H: int = 24
    W: int = 24
    fps: float = 8.0
    bg_amplitude: float = 0.3
    noise: float = 0.03
    seed: int = 0

    def __post_init__(self):
        if not 2 <= self.classes <= len(SYNTH_CLASSES):
            raise ValueError(f"classes must be in [2, {len(SYNTH_CLASSES)}]")
        if self.clips_per_class < 3:
            raise ValueError("clips_per_class must be >= 3 to fill every split")
        if min(self.T, self.H, self.W) < 4 or not self.fps > 0:
            raise ValueError("T, H, W must be >= 4 and fps > 0")
        if not 0 <= self.bg_amplitude <= 0.5:
            raise ValueError("bg_amplitude must be in [0, 0.5]")
        if not 0 <= self.noise < 0.2:
            raise ValueError("noise sigma must be in [0, 0.2)")


def _texture(rng: np.random.Generator, H: int, W: int, amplitude: float) -> np.ndarray:
    """Smooth random texture centred on 0.35 with peak deviation ``amplitude``."""
    if amplitude == 0:
        return np.full((H, W), 0.35)
    coarse = rng.uniform(-1, 1, size=(max(2, H // 4), max(2, W // 4)))
    tex = resize_bilinear((coarse + 1) / 2, (H, W)).astype(np.float64) * 2 - 1
    fine = rng.uniform(-1, 1, size=(H, W))
    return 0.35 + amplitude * (0.7 * tex + 0.3 * fine)


def _square_mask(H, W, cy, cx, half) -> np.ndarray:
    ys = np.arange(H)[:, None] + 0.5
    xs = np.arange(W)[None, :] + 0.5
    return (np.abs(ys - cy) <= half) & (np.abs(xs - cx) <= half)


def render_clip(label: int, cfg: SynthConfig, rng: np.random.Generator) -> Clip:
    """Render one clip of motion class ``label`` over a static texture."""
    T, H, W = cfg.T, cfg.H, cfg.W
    bg = _texture(rng, H, W, cfg.bg_amplitude)
    name = SYNTH_CLASSES[label]
    s = min(H, W)
    half = rng.uniform(0.09, 0.12) * s
    intensity = rng.uniform(0.85, 1.0)
    tt = np.arange(T) / max(T - 1, 1)
    margin = half + 1
    span = rng.uniform(0.8, 1.0)
    jitter = rng.uniform(-0.08, 0.08, size=2) * s
    cy = np.full(T, H / 2 + jitter[0])
    cx = np.full(T, W / 2 + jitter[1])
    sizes = np.full(T, half)
    if name in ("translate-left", "translate-right"):
        start, stop = margin + 0.5, W - margin - 0.5
        path = start + (stop - start) * ((1 - span) / 2 + span * tt)
        cx = path[::-1] if name == "translate-left" else path
    elif name in ("translate-up", "translate-down"):
        start, stop = margin + 0.5, H - margin - 0.5
        path = start + (stop - start) * ((1 - span) / 2 + span * tt)
        cy = path[::-1] if name == "translate-up" else path
    elif name == "grow-shrink":
        sizes = half * (0.6 + 1.2 * np.sin(np.pi * tt))
    elif name == "oscillate":
        phase = rng.uniform(0, 2 * np.pi)
        cy = cy + 0.12 * s * np.sin(2 * np.pi * 2 * tt + phase)
    frames = np.empty((T, H, W))
    for t in range(T):
        frame = bg.copy()
        frame[_square_mask(H, W, cy[t], cx[t], sizes[t])] = intensity
        frames[t] = frame
    if cfg.noise > 0:
        frames = frames + rng.normal(0, cfg.noise, size=frames.shape)
    return Clip(np.clip(frames, 0, 1).astype(np.float32), cfg.fps)


def _split_for(i: int, n: int) -> str:
    n_val = max(1, round(0.15 * n))
    n_test = max(1, round(0.15 * n))
    n_train = n - n_val - n_test
    return "train" if i < n_train else ("val" if i < n_train + n_val else "test")


def synth_generate(cfg: SynthConfig, out_dir) -> DatasetManifest:
    """Write RVID clips plus ``manifest.txt`` under ``out_dir``.

    Splits are balanced per class (70/15/15).  Output bytes depend only on
    ``cfg``.
    """
    out_dir = Path(out_dir)
    try:
        (out_dir / "clips").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out_dir}: {exc}") from exc
    if not os.access(out_dir, os.W_OK):
        raise OSError(f"dataset directory {out_dir} is not writable")
    classes = list(SYNTH_CLASSES[: cfg.classes])
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.classes * cfg.clips_per_class)
    entries = []
    for label, cname in enumerate(classes):
        for i in range(cfg.clips_per_class):
            rng = np.random.default_rng(seeds[label * cfg.clips_per_class + i])
            clip = render_clip(label, cfg, rng)
            rel = f"clips/{cname}_{i:03d}.rvid"
            write_rvid(clip, out_dir / rel)
            entries.append(Entry(rel, label, _split_for(i, cfg.clips_per_class)))
    manifest = DatasetManifest(classes, entries, out_dir)
    (out_dir / "manifest.txt").write_text(manifest.to_text(), encoding="utf-8")
    return manifest
