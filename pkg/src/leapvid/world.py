"""Synthetic partially observable camera world and its dataset container.

A camera roams a static textured scene with bright obstacles and a drifting
sprite. Each frame is a heading-aligned square view; the action at each step
is chosen by a scripted obstacle-avoidance policy that reads the current
frame, so actions depend on frames and the next frame depends on the action.

Raw actions are ``(forward velocity in [0, v_max], turn rate in
[-omega_max, omega_max])``, stored after the affine map to ``[0, 1]``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

__all__ = [
    "WorldConfig", "SequencePair", "SequenceDataset", "generate_sequence",
    "generate_dataset", "write_dataset", "read_dataset", "split_dataset",
    "DatasetFormatError", "BadMagicError", "UnsupportedVersionError", "TruncatedDatasetError",
    "OBSTACLE_LEVEL",
]

OBSTACLE_LEVEL = 0.9  # pixels above this are obstacles
HEADINGS = 8
DATASET_MAGIC = b"LPDS"
DATASET_VERSION = 1


@dataclass(frozen=True)
class WorldConfig:
    scene_size: int = 64
    view_size: int = 16
    channels: int = 1
    obstacle_count: int = 7
    sprite_count: int = 1
    sequence_length: int = 25
    action_dim: int = 2
    seed: int = 0
    v_max: float = 2.0
    omega_max: float = float(np.pi / 8)

    def __post_init__(self):
        if self.view_size >= self.scene_size:
            raise ValueError("view_size must be smaller than scene_size")
        if self.sequence_length < 7:
            raise ValueError("sequence_length must be at least 7")
        if self.action_dim != 2:
            raise ValueError("the roaming camera has exactly two action components")
        if self.channels < 1 or self.obstacle_count < 0 or self.sprite_count < 0:
            raise ValueError("channels must be positive and counts non-negative")
        if self.scene_size < 2 * self.margin + 2:
            raise ValueError("scene too small for the view")

    @property
    def margin(self) -> float:
        return 0.75 * self.view_size + 1.0

    @property
    def frame_shape(self):
        return (self.view_size, self.view_size, self.channels)


@dataclass
class SequencePair:
    frames: np.ndarray   # (T, H, W, C) float32 in [0, 1]
    actions: np.ndarray  # (T, n) float32 in [0, 1]

    def __post_init__(self):
        if len(self.frames) != len(self.actions):
            raise ValueError(f"{len(self.frames)} frames but {len(self.actions)} actions")

    def __len__(self):
        return len(self.frames)


@dataclass
class SequenceDataset:
    """Homogeneous stack of sequences plus the action normalisation map."""

    frames: np.ndarray   # (N, T, H, W, C)
    actions: np.ndarray  # (N, T, n)
    v_max: float = 2.0
    omega_max: float = float(np.pi / 8)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        self.actions = np.asarray(self.actions, dtype=np.float32)
        if self.frames.ndim != 5 or self.actions.ndim != 3:
            raise ValueError("frames must be (N, T, H, W, C) and actions (N, T, n)")
        if self.frames.shape[:2] != self.actions.shape[:2]:
            raise ValueError(f"frames {self.frames.shape[:2]} and actions {self.actions.shape[:2]} disagree")

    @classmethod
    def from_sequences(cls, sequences, v_max=2.0, omega_max=float(np.pi / 8), frame_shape=None, length=None):
        sequences = list(sequences)
        if not sequences:
            t = length or 0
            shape = frame_shape or (0, 0, 0)
            return cls(np.zeros((0, t, *shape), np.float32), np.zeros((0, t, 2), np.float32), v_max, omega_max)
        shapes = {(s.frames.shape, s.actions.shape) for s in sequences}
        if len(shapes) != 1:
            raise ValueError(f"sequences have heterogeneous shapes: {sorted(shapes)}")
        return cls(np.stack([s.frames for s in sequences]), np.stack([s.actions for s in sequences]),
                   v_max, omega_max)

    def __len__(self):
        return len(self.frames)

    def __getitem__(self, i):
        if isinstance(i, (int, np.integer)):
            return SequencePair(self.frames[i], self.actions[i])
        return SequenceDataset(self.frames[i], self.actions[i], self.v_max, self.omega_max)

    @property
    def sequences(self):
        return [self[i] for i in range(len(self))]

    @property
    def sequence_length(self):
        return self.frames.shape[1]

    @property
    def frame_shape(self):
        return self.frames.shape[2:]

    def denormalize(self, actions):
        """Map normalised actions back to raw (velocity, turn rate)."""
        actions = np.asarray(actions, dtype=np.float64)
        raw = np.empty_like(actions)
        raw[..., 0] = actions[..., 0] * self.v_max
        raw[..., 1] = (2.0 * actions[..., 1] - 1.0) * self.omega_max
        return raw


# ---------------------------------------------------------------------------
# scene rendering

def _make_scene(cfg: WorldConfig, rng):
    s = cfg.scene_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    tex = np.zeros((s, s))
    for _ in range(4):
        k = rng.uniform(0.08, 0.35, size=2) * rng.choice([-1, 1], size=2)
        tex += np.sin(k[0] * xx + k[1] * yy + rng.uniform(0, 2 * np.pi))
    tex = (tex - tex.min()) / max(tex.max() - tex.min(), 1e-9)
    scene = 0.1 + 0.45 * tex
    lo, hi = cfg.margin, s - cfg.margin
    for _ in range(cfg.obstacle_count):
        cx, cy = rng.uniform(lo - 4, hi + 4, size=2)
        r = rng.uniform(3.0, 6.5)
        cover = np.clip(r - np.hypot(xx - cx, yy - cy) + 0.5, 0.0, 1.0)
        scene = np.maximum(scene, cover * 1.0 + (1 - cover) * scene)
    return scene


def _sprites(cfg: WorldConfig, rng):
    out = []
    for _ in range(cfg.sprite_count):
        pos = rng.uniform(cfg.margin, cfg.scene_size - cfg.margin, size=2)
        ang = rng.uniform(0, 2 * np.pi)
        out.append([pos, 1.0 * np.array([np.cos(ang), np.sin(ang)])])
    return out


def _draw_sprites(scene, sprites, size=4, level=0.75):
    img = scene.copy()
    s = scene.shape[0]
    for pos, _ in sprites:
        x0, y0 = int(round(pos[0])) - size // 2, int(round(pos[1])) - size // 2
        xs, ys = slice(max(x0, 0), min(x0 + size, s)), slice(max(y0, 0), min(y0 + size, s))
        img[ys, xs] = level
    return img


def _move_sprites(sprites, cfg):
    lo, hi = 2.0, cfg.scene_size - 3.0
    for sp in sprites:
        pos, vel = sp
        pos += vel
        for d in range(2):
            if pos[d] < lo or pos[d] > hi:
                vel[d] = -vel[d]
                pos[d] = np.clip(pos[d], lo, hi)


def _view_offsets(view):
    # camera at the view centre looking "up" the image (towards row 0)
    c = (view - 1) / 2.0
    rows, cols = np.mgrid[0:view, 0:view].astype(np.float64)
    return c - rows, cols - c  # forward, lateral


def quantize_heading(theta):
    step = 2 * np.pi / HEADINGS
    return np.round(theta / step) * step


def render_view(image, pos, theta, view):
    """Heading-aligned crop: heading snapped to 8 directions, bilinear in position."""
    fwd, lat = _view_offsets(view)
    q = quantize_heading(theta)
    cq, sq = np.cos(q), np.sin(q)
    x = pos[0] + fwd * cq - lat * sq
    y = pos[1] + fwd * sq + lat * cq
    s = image.shape[0]
    x = np.clip(x, 0, s - 1.000001)
    y = np.clip(y, 0, s - 1.000001)
    x0, y0 = np.floor(x).astype(int), np.floor(y).astype(int)
    fx, fy = x - x0, y - y0
    a = image[y0, x0] * (1 - fx) + image[y0, x0 + 1] * fx
    b = image[y0 + 1, x0] * (1 - fx) + image[y0 + 1, x0 + 1] * fx
    return a * (1 - fy) + b * fy


def obstacle_density(frame, region="center"):
    """Fraction of obstacle pixels in the view centre (or its left/right halves)."""
    v = frame.shape[0]
    band = frame[v // 8: v // 2 + v // 8, v // 4: v - v // 4]
    if frame.ndim == 3:
        band = band.mean(axis=-1)
    mask = band > OBSTACLE_LEVEL
    half = mask.shape[1] // 2
    if region == "left":
        return float(mask[:, :half].mean())
    if region == "right":
        return float(mask[:, half:].mean())
    return float(mask.mean())


class AvoidancePolicy:
    """Slow down and turn away when obstacles fill the view centre.

    A slowly varying cruise speed and a small wander term keep actions
    stochastic between episodes.
    """

    def __init__(self, cfg: WorldConfig, rng):
        self.cfg = cfg
        self.rng = rng
        self.cruise = rng.uniform(0.5, 1.0)
        self.wander = 0.0
        self.side = rng.choice([-1.0, 1.0])

    def __call__(self, frame):
        cfg = self.cfg
        d = obstacle_density(frame)
        left, right = obstacle_density(frame, "left"), obstacle_density(frame, "right")
        if abs(left - right) > 0.05:
            self.side = 1.0 if left > right else -1.0
        self.cruise = float(np.clip(self.cruise + self.rng.normal(0, 0.05), 0.4, 1.0))
        self.wander = float(np.clip(0.7 * self.wander + self.rng.normal(0, 0.08), -0.25, 0.25))
        v = cfg.v_max * self.cruise * float(np.clip(1.0 - 2.5 * d, 0.15, 1.0))
        avoid = float(np.clip(4.0 * d, 0.0, 1.0))
        omega = cfg.omega_max * float(np.clip(avoid * self.side + (1.0 - avoid) * self.wander, -1.0, 1.0))
        return v, omega


def normalize_action(v, omega, cfg: WorldConfig):
    return np.array([v / cfg.v_max, (omega + cfg.omega_max) / (2 * cfg.omega_max)], dtype=np.float64)


def generate_sequence(config: WorldConfig, episode_seed: int,
                      policy: Callable | None = None) -> SequencePair:
    """Roll out one episode.

    ``policy`` maps the current frame to a raw ``(velocity, turn_rate)``;
    the default is :class:`AvoidancePolicy`. Raw actions are clamped to the
    world bounds before use.
    """
    cfg = config
    rng = np.random.default_rng([cfg.seed, int(episode_seed)])
    scene = _make_scene(cfg, rng)
    sprites = _sprites(cfg, rng)
    lo, hi = cfg.margin, cfg.scene_size - cfg.margin
    pos = rng.uniform(lo, hi, size=2)
    theta = rng.uniform(0, 2 * np.pi)
    policy = policy or AvoidancePolicy(cfg, rng)

    T, V = cfg.sequence_length, cfg.view_size
    frames = np.empty((T, V, V, cfg.channels), dtype=np.float32)
    actions = np.empty((T, 2), dtype=np.float32)
    for t in range(T):
        view = render_view(_draw_sprites(scene, sprites), pos, theta, V)
        frames[t] = np.clip(view, 0.0, 1.0)[..., None]
        v, omega = policy(frames[t])
        v = float(np.clip(v, 0.0, cfg.v_max))
        omega = float(np.clip(omega, -cfg.omega_max, cfg.omega_max))
        actions[t] = normalize_action(v, omega, cfg)
        theta = theta + omega
        step = v * np.array([np.cos(quantize_heading(theta)), np.sin(quantize_heading(theta))])
        pos = pos + step
        for d in range(2):
            if pos[d] < lo or pos[d] > hi:
                pos[d] = np.clip(pos[d], lo, hi)
                theta = np.pi - theta if d == 0 else -theta
        _move_sprites(sprites, cfg)
    return SequencePair(frames, actions)


def generate_dataset(config: WorldConfig, count: int, first_episode: int = 0) -> SequenceDataset:
    seqs = [generate_sequence(config, first_episode + i) for i in range(count)]
    return SequenceDataset.from_sequences(seqs, config.v_max, config.omega_max,
                                          frame_shape=config.frame_shape, length=config.sequence_length)


# ---------------------------------------------------------------------------
# dataset file

class DatasetFormatError(ValueError):
    pass


class BadMagicError(DatasetFormatError):
    pass


class UnsupportedVersionError(DatasetFormatError):
    pass


class TruncatedDatasetError(DatasetFormatError):
    pass


_HEADER = struct.Struct("<4s7I2f")


def write_dataset(path, sequences) -> None:
    """Write sequences (a :class:`SequenceDataset` or list of pairs) to ``path``."""
    ds = sequences if isinstance(sequences, SequenceDataset) else SequenceDataset.from_sequences(sequences)
    n, t = ds.frames.shape[:2]
    h, w, c = ds.frames.shape[2:]
    header = _HEADER.pack(DATASET_MAGIC, DATASET_VERSION, n, t, h, w, c, ds.actions.shape[2],
                          ds.v_max, ds.omega_max)
    with open(path, "wb") as fh:
        fh.write(header)
        for i in range(n):
            fh.write(np.ascontiguousarray(ds.frames[i], dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(ds.actions[i], dtype="<f4").tobytes())


def read_dataset(path) -> SequenceDataset:
    buf = Path(path).read_bytes()
    if len(buf) < 4 or buf[:4] != DATASET_MAGIC:
        raise BadMagicError(f"{path}: bad magic")
    if len(buf) < _HEADER.size:
        raise TruncatedDatasetError(f"{path}: truncated header")
    _, version, n, t, h, w, c, na, v_max, omega_max = _HEADER.unpack_from(buf)
    if version != DATASET_VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported version {version}")
    fsize, asize = t * h * w * c, t * na
    need = _HEADER.size + 4 * n * (fsize + asize)
    if len(buf) < need:
        raise TruncatedDatasetError(f"{path}: expected {need} bytes, found {len(buf)}")
    body = np.frombuffer(buf, dtype="<f4", count=n * (fsize + asize), offset=_HEADER.size)
    body = body.reshape(n, fsize + asize) if n else body.reshape(0, fsize + asize)
    frames = body[:, :fsize].reshape(n, t, h, w, c).astype(np.float32)
    actions = body[:, fsize:].reshape(n, t, na).astype(np.float32)
    return SequenceDataset(frames, actions, float(v_max), float(omega_max))


def split_dataset(sequences: SequenceDataset, train_fraction: float, seed: int = 0):
    """Seeded shuffle into disjoint (train, test) parts."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie strictly between 0 and 1")
    n = len(sequences)
    n_train = int(round(train_fraction * n))
    if n_train == 0 or n_train == n:
        raise ValueError(f"train fraction {train_fraction} leaves an empty split for {n} sequences")
    order = np.random.default_rng(seed).permutation(n)
    return sequences[np.sort(order[:n_train])], sequences[np.sort(order[n_train:])]
