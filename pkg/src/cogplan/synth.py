"""Synthetic stand-ins for the paired video/EEG corpus and for driving scenes.

Pairs share a latent vector: the video renders latent-weighted moving blobs,
the EEG is a fixed random readout of the latent onto band-limited carriers.
Scenes are static occupancy grids around an ego vehicle at the origin
(heading +x), with an expert trajectory from a pure-pursuit controller and
obstacles placed only where they cannot touch the expert's footprint.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import signal as sps

from .exceptions import GenerationError, InputError
from .signal_prep import EegClip

COMMANDS = ("left", "straight", "right")
COMMAND_HEADINGS = {"left": math.radians(60.0), "straight": 0.0, "right": math.radians(-60.0)}
DIFFICULTY_OBSTACLES = {"empty": 0, "easy": 4, "medium": 8, "hard": 16}

GRID_CELLS = 64
RESOLUTION_M = 0.5
GRID_ORIGIN = (-8.0, -16.0)
HISTORY_LEN = 4
HORIZON = 6
WAYPOINT_HZ = 2.0
V_MAX = 8.0
KAPPA_MAX = 0.25
EGO_LENGTH = 4.0
EGO_WIDTH = 1.8
FRAME_SIZE = 16
GOAL_DISTANCE_M = 30.0  # beyond V_MAX * horizon, so the controller never reaches the goal


@dataclass
class VideoClip:
    frames: np.ndarray  # F x H x W x C in [0, 1]
    fps: float = 2.0
    latent_state: np.ndarray | None = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 4:
            raise InputError(f"video frames must be F x H x W x C, got shape {self.frames.shape}")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def duration_s(self) -> float:
        return self.n_frames / self.fps


@dataclass
class PairedSample:
    video: VideoClip
    eeg: EegClip
    pair_id: str


@dataclass
class PairWorld:
    """Dataset-level constants shared by every pair drawn from one seed."""

    readout: np.ndarray  # channels x d_latent
    carrier_hz: np.ndarray  # d_latent
    carrier_phase: np.ndarray  # d_latent
    blob_start: np.ndarray  # d_latent x 2, pixel units
    blob_velocity: np.ndarray  # d_latent x 2, pixels per frame
    blob_color: np.ndarray  # d_latent x C
    amplitude_mv: float = 0.02
    blob_sigma: float = 2.0

    @property
    def d_latent(self) -> int:
        return self.readout.shape[1]


def make_pair_world(seed: int, d_latent: int = 8, channels: int = 8, frame_size: int = FRAME_SIZE,
                    color_channels: int = 3) -> PairWorld:
    rng = np.random.default_rng([seed, 0xA11])
    return PairWorld(
        readout=rng.normal(size=(channels, d_latent)) / math.sqrt(d_latent),
        carrier_hz=rng.uniform(4.0, 30.0, size=d_latent),
        carrier_phase=rng.uniform(0, 2 * math.pi, size=d_latent),
        blob_start=rng.uniform(2.0, frame_size - 2.0, size=(d_latent, 2)),
        blob_velocity=rng.uniform(-1.5, 1.5, size=(d_latent, 2)),
        blob_color=rng.uniform(0.2, 1.0, size=(d_latent, color_channels)),
    )


def render_video(latent: np.ndarray, world: PairWorld, n_frames: int, fps: float = 2.0,
                 frame_size: int = FRAME_SIZE) -> VideoClip:
    grid = np.arange(frame_size) + 0.5
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    weight = 1.0 / (1.0 + np.exp(-latent))  # blob intensity per latent unit
    frames = np.zeros((n_frames, frame_size, frame_size, world.blob_color.shape[1]))
    for f in range(n_frames):
        centers = (world.blob_start + world.blob_velocity * f) % frame_size
        for k in range(world.d_latent):
            d2 = (yy - centers[k, 0]) ** 2 + (xx - centers[k, 1]) ** 2
            blob = weight[k] * np.exp(-d2 / (2 * world.blob_sigma ** 2))
            frames[f] += blob[..., None] * world.blob_color[k]
    return VideoClip(1.0 - np.exp(-frames), fps=fps, latent_state=latent.copy())


def eeg_readout(latent: np.ndarray, world: PairWorld, n_samples: int, rate_hz: float) -> np.ndarray:
    """Noise-free EEG: channels x T, linear in the latent."""
    t = np.arange(n_samples) / rate_hz
    carriers = np.sin(2 * math.pi * world.carrier_hz[:, None] * t[None, :] + world.carrier_phase[:, None])
    return world.amplitude_mv * (world.readout * latent[None, :]) @ carriers


def _band_noise(rng: np.random.Generator, channels: int, n: int, rate_hz: float) -> np.ndarray:
    sos = sps.butter(4, [1.0, 40.0], btype="bandpass", fs=rate_hz, output="sos")
    x = sps.sosfilt(sos, rng.normal(size=(channels, n + 500)), axis=-1)[:, 500:]
    return x / (x.std(axis=-1, keepdims=True) + 1e-12)


def gen_pairs(n: int, d_latent: int = 8, noise: float = 0.1, seed: int = 0,
              duration_s: float = 2.0, fps: float = 2.0, eeg_rate_hz: float = 1000.0,
              channels: int = 8, frame_size: int = FRAME_SIZE) -> list[PairedSample]:
    """Paired (video, raw EEG) samples drawn from shared latents.

    ``noise`` scales band-limited noise, slow drift and 50 Hz mains pickup
    relative to the signal amplitude; at zero the EEG is exactly the linear
    readout of the latent.
    """
    if n < 2:
        raise InputError(f"need at least 2 pairs, got {n}")
    world = make_pair_world(seed, d_latent, channels, frame_size)
    n_frames = max(1, int(round(duration_s * fps)))
    n_samples = int(round(duration_s * eeg_rate_hz))
    t = np.arange(n_samples) / eeg_rate_hz
    pairs = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        latent = rng.normal(size=d_latent)
        clean = eeg_readout(latent, world, n_samples, eeg_rate_hz)
        nuisance = _band_noise(rng, channels, n_samples, eeg_rate_hz)
        drift = rng.uniform(-1.0, 1.0, size=(channels, 1)) + 0.5 * t[None, :] / max(duration_s, 1e-9)
        mains = np.sin(2 * math.pi * 50.0 * t + rng.uniform(0, 2 * math.pi))[None, :]
        amp = noise * world.amplitude_mv
        eeg = clean + amp * (nuisance + 2.0 * drift + mains)
        pairs.append(PairedSample(
            video=render_video(latent, world, n_frames, fps, frame_size),
            eeg=EegClip(eeg, eeg_rate_hz, subject_class="expert" if i % 2 == 0 else "novice",
                        condition_id=1 + i % 14, clip_id=f"p{i:05d}"),
            pair_id=f"p{i:05d}",
        ))
    return pairs


# -- scenes -----------------------------------------------------------------

@dataclass
class Scene:
    grid: np.ndarray  # H x W bool, indexed [ix, iy]
    ego_history: np.ndarray  # K x 3 (x, y, yaw), oldest first, ego frame at t=0
    command: str
    expert_traj: np.ndarray  # T x 2 waypoints at 2 Hz
    scene_id: str = ""
    resolution: float = RESOLUTION_M
    origin: tuple[float, float] = GRID_ORIGIN
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=bool)
        self.ego_history = np.asarray(self.ego_history, dtype=np.float64)
        self.expert_traj = np.asarray(self.expert_traj, dtype=np.float64)
        self.origin = tuple(float(v) for v in self.origin)
        if self.command not in COMMANDS:
            raise InputError(f"unknown command {self.command!r}; expected one of {COMMANDS}")

    @property
    def command_index(self) -> int:
        return COMMANDS.index(self.command)

    @cached_property
    def camera_view(self) -> VideoClip:
        return render_camera(self)


def occupancy_at(grid: np.ndarray, origin, resolution: float, xy: np.ndarray) -> np.ndarray:
    """Nearest-cell occupancy lookup; outside the grid counts as free."""
    idx = np.floor((xy - np.asarray(origin)) / resolution).astype(int)
    inside = (idx >= 0).all(-1) & (idx[..., 0] < grid.shape[0]) & (idx[..., 1] < grid.shape[1])
    out = np.zeros(xy.shape[:-1], dtype=bool)
    out[inside] = grid[idx[inside, 0], idx[inside, 1]]
    return out


def render_camera(scene: Scene, n_frames: int = 4, fps: float = 2.0,
                  frame_size: int = FRAME_SIZE) -> VideoClip:
    """Forward-looking occupancy crops at the last ``n_frames`` poses (2 s at 2 fps)."""
    poses = np.vstack([scene.ego_history, [[0.0, 0.0, 0.0]]])[-n_frames:]
    ahead = (np.arange(frame_size) + 0.5) * (16.0 / frame_size)
    lateral = (np.arange(frame_size) + 0.5) * (16.0 / frame_size) - 8.0
    fwd, lat = np.meshgrid(ahead, lateral, indexing="ij")
    frames = np.zeros((len(poses), frame_size, frame_size, 3))
    for f, (x, y, yaw) in enumerate(poses):
        c, s = math.cos(yaw), math.sin(yaw)
        world = np.stack([x + c * fwd - s * lat, y + s * fwd + c * lat], axis=-1)
        occ = occupancy_at(scene.grid, scene.origin, scene.resolution, world).astype(float)
        frames[f, ..., 0] = occ
        frames[f, ..., 1] = occ * (1.0 - fwd / 16.0)
        frames[f, ..., 2] = fwd / 16.0
    return VideoClip(frames, fps=fps)


def box_corners(x: float, y: float, yaw: float, length: float = EGO_LENGTH,
                width: float = EGO_WIDTH) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    hl, hw = length / 2, width / 2
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    return np.array([x, y]) + local @ np.array([[c, s], [-s, c]])


def box_hits_grid(grid: np.ndarray, origin, resolution: float, x: float, y: float, yaw: float,
                  length: float = EGO_LENGTH, width: float = EGO_WIDTH) -> bool:
    """True iff the oriented box overlaps (positive area) any occupied cell.

    Separating-axis test against each candidate cell square.
    """
    corners = box_corners(x, y, yaw, length, width)
    lo = np.floor((corners.min(0) - np.asarray(origin)) / resolution).astype(int)
    hi = np.floor((corners.max(0) - np.asarray(origin)) / resolution).astype(int)
    lo = np.maximum(lo, 0)
    hi = np.minimum(hi, np.array(grid.shape) - 1)
    if (hi < lo).any():
        return False
    sub = grid[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1]
    if not sub.any():
        return False
    c, s = math.cos(yaw), math.sin(yaw)
    axes = np.array([[c, s], [-s, c]])
    box_proj = corners @ axes.T  # 4 x 2
    bmin, bmax = box_proj.min(0), box_proj.max(0)
    for i, j in zip(*np.nonzero(sub)):
        x0 = origin[0] + (lo[0] + i) * resolution
        y0 = origin[1] + (lo[1] + j) * resolution
        # world axes: box extent vs cell extent
        if corners[:, 0].max() <= x0 or corners[:, 0].min() >= x0 + resolution:
            continue
        if corners[:, 1].max() <= y0 or corners[:, 1].min() >= y0 + resolution:
            continue
        cell = np.array([[x0, y0], [x0 + resolution, y0], [x0 + resolution, y0 + resolution],
                         [x0, y0 + resolution]])
        cell_proj = cell @ axes.T
        if (cell_proj.max(0) <= bmin).any() or (cell_proj.min(0) >= bmax).any():
            continue
        return True
    return False


def waypoint_yaws(traj: np.ndarray, start=(0.0, 0.0), start_yaw: float = 0.0) -> np.ndarray:
    """Heading of each waypoint from the displacement to it; a near-zero step keeps the previous yaw."""
    yaws = np.empty(len(traj))
    prev = np.asarray(start, dtype=float)
    yaw = start_yaw
    for k, p in enumerate(traj):
        d = p - prev
        if math.hypot(d[0], d[1]) > 1e-6:
            yaw = math.atan2(d[1], d[0])
        yaws[k] = yaw
        prev = p
    return yaws


def _pure_pursuit(speed: float, goal: np.ndarray, horizon: int, substeps: int = 20) -> np.ndarray:
    dt = 1.0 / (WAYPOINT_HZ * substeps)
    x = y = yaw = 0.0
    out = []
    for _ in range(horizon):
        for _ in range(substeps):
            dx, dy = goal[0] - x, goal[1] - y
            dist = math.hypot(dx, dy)
            alpha = math.atan2(dy, dx) - yaw
            kappa = 2.0 * math.sin(alpha) / max(dist, 1.0)
            kappa = max(-KAPPA_MAX, min(KAPPA_MAX, kappa))
            yaw += speed * kappa * dt
            x += speed * math.cos(yaw) * dt
            y += speed * math.sin(yaw) * dt
        out.append((x, y))
    return np.array(out)


def _history(speed: float, yaw_rate: float, k: int, substeps: int = 20) -> np.ndarray:
    """Integrate backwards from the origin; returns K poses oldest first."""
    dt = 1.0 / (WAYPOINT_HZ * substeps)
    x = y = yaw = 0.0
    poses = []
    for _ in range(k):
        for _ in range(substeps):
            x -= speed * math.cos(yaw) * dt
            y -= speed * math.sin(yaw) * dt
            yaw -= yaw_rate * dt
        poses.append((x, y, yaw))
    return np.array(poses[::-1])


def _ego_path_clear(grid, scene_like, length, width) -> bool:
    traj = scene_like["expert_traj"]
    yaws = waypoint_yaws(traj)
    poses = [(0.0, 0.0, 0.0)] + [tuple(p) for p in scene_like["ego_history"]]
    poses += [(p[0], p[1], yw) for p, yw in zip(traj, yaws)]
    return not any(box_hits_grid(grid, GRID_ORIGIN, RESOLUTION_M, x, y, yw, length, width)
                   for x, y, yw in poses)


def gen_scenes(n: int, seed: int = 0, difficulty="medium", max_tries: int = 200) -> list[Scene]:
    """Random static scenes with collision-free expert trajectories.

    ``difficulty`` is a named level or an explicit obstacle count.
    """
    if n < 1:
        raise InputError(f"need at least one scene, got {n}")
    if isinstance(difficulty, str):
        if difficulty not in DIFFICULTY_OBSTACLES:
            raise InputError(f"unknown difficulty {difficulty!r}")
        n_obstacles = DIFFICULTY_OBSTACLES[difficulty]
    else:
        n_obstacles = int(difficulty)
    scenes = []
    for i in range(n):
        rng = np.random.default_rng([seed, i, 0x5CE])
        command = COMMANDS[int(rng.integers(3))]
        speed = float(rng.uniform(2.0, 7.0))
        yaw_rate = float(rng.uniform(-0.1, 0.1))
        heading = COMMAND_HEADINGS[command]
        goal = GOAL_DISTANCE_M * np.array([math.cos(heading), math.sin(heading)])
        traj = _pure_pursuit(speed, goal, HORIZON)
        history = _history(speed, yaw_rate, HISTORY_LEN)
        grid = np.zeros((GRID_CELLS, GRID_CELLS), dtype=bool)
        motion = {"expert_traj": traj, "ego_history": history}
        for _ in range(n_obstacles):
            for _attempt in range(max_tries):
                w, h = rng.integers(2, 7, size=2)
                ix, iy = rng.integers(0, GRID_CELLS - w), rng.integers(0, GRID_CELLS - h)
                trial = grid.copy()
                trial[ix:ix + w, iy:iy + h] = True
                # inflated footprint leaves a margin around the expert path
                if _ego_path_clear(trial, motion, EGO_LENGTH + 1.0, EGO_WIDTH + 1.0):
                    grid = trial
                    break
            else:
                raise GenerationError(
                    f"scene {i}: could not place obstacle after {max_tries} tries (grid overcrowded)")
        scenes.append(Scene(grid, history, command, traj, scene_id=f"s{i:05d}"))
    return scenes
