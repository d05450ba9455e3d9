"""On-disk dataset formats.

Layout::

    <root>/pairs/<id>/video.bin   raw little-endian float64 frames, F x H x W x C
    <root>/pairs/<id>/eeg.bin     one JSON header line, then little-endian float64 channels x T
    <root>/pairs/<id>/meta.json   pair metadata incl. video shape and fps
    <root>/scenes/<id>.json       scene with run-length, base64-encoded occupancy grid

See docs/formats.md for field-level detail.
"""

from __future__ import annotations

import base64
import json
from pathlib import Path

import numpy as np

from .exceptions import InputError
from .signal_prep import EegClip
from .synth import PairedSample, Scene, VideoClip

PAIR_FORMAT = "cogplan-pair/1"
EEG_FORMAT = "cogplan-eeg/1"
SCENE_FORMAT = "cogplan-scene/1"


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# -- EEG ------------------------------------------------------------------
def eeg_to_bytes(clip: EegClip) -> bytes:
    header = dict(clip.header(), format=EEG_FORMAT)
    line = json.dumps(header, sort_keys=True).encode() + b"\n"
    return line + np.ascontiguousarray(clip.samples, dtype="<f8").tobytes()


def eeg_from_bytes(raw: bytes) -> EegClip:
    newline = raw.find(b"\n")
    if newline < 0:
        raise InputError("EEG file lacks a JSON header line")
    header = json.loads(raw[:newline])
    if header.get("format") != EEG_FORMAT:
        raise InputError(f"unsupported EEG format {header.get('format')!r}")
    payload = np.frombuffer(raw[newline + 1:], dtype="<f8")
    expected = header["channels"] * header["n_samples"]
    if payload.size != expected:
        raise InputError(f"EEG payload has {payload.size} values, header implies {expected}")
    return EegClip(
        payload.reshape(header["channels"], header["n_samples"]).copy(),
        header["sample_rate_hz"], header["subject_class"], header["condition_id"],
        header.get("clip_id", ""), header.get("processed", False),
    )


def write_eeg(path, clip: EegClip) -> None:
    Path(path).write_bytes(eeg_to_bytes(clip))


def read_eeg(path) -> EegClip:
    return eeg_from_bytes(Path(path).read_bytes())


# -- pairs ----------------------------------------------------------------
def write_pairs(root, pairs: list[PairedSample]) -> Path:
    base = Path(root) / "pairs"
    base.mkdir(parents=True, exist_ok=True)
    for pair in pairs:
        d = base / pair.pair_id
        d.mkdir(exist_ok=True)
        (d / "video.bin").write_bytes(np.ascontiguousarray(pair.video.frames, dtype="<f8").tobytes())
        write_eeg(d / "eeg.bin", pair.eeg)
        meta = {
            "format": PAIR_FORMAT,
            "pair_id": pair.pair_id,
            "video_shape": list(pair.video.frames.shape),
            "fps": pair.video.fps,
            "latent_state": None if pair.video.latent_state is None else pair.video.latent_state.tolist(),
        }
        (d / "meta.json").write_text(_dump_json(meta))
    return base


def read_pair(d) -> PairedSample:
    d = Path(d)
    meta = json.loads((d / "meta.json").read_text())
    if meta.get("format") != PAIR_FORMAT:
        raise InputError(f"{d}: unsupported pair format {meta.get('format')!r}")
    frames = np.frombuffer((d / "video.bin").read_bytes(), dtype="<f8").reshape(meta["video_shape"])
    latent = meta.get("latent_state")
    video = VideoClip(frames.copy(), meta["fps"], None if latent is None else np.array(latent))
    return PairedSample(video, read_eeg(d / "eeg.bin"), meta["pair_id"])


def read_pairs(root) -> list[PairedSample]:
    base = Path(root) / "pairs"
    if not base.is_dir():
        raise InputError(f"no pairs/ directory under {root}")
    return [read_pair(d) for d in sorted(base.iterdir()) if d.is_dir()]


# -- scenes ---------------------------------------------------------------
def encode_grid(grid: np.ndarray) -> str:
    """Row-major run lengths (first run counts free cells) as base64 uint32."""
    flat = np.asarray(grid, dtype=bool).ravel()
    change = np.flatnonzero(np.diff(flat.astype(np.int8))) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds)
    if flat.size and flat[0]:
        runs = np.concatenate([[0], runs])
    return base64.b64encode(runs.astype("<u4").tobytes()).decode("ascii")


def decode_grid(text: str, shape) -> np.ndarray:
    runs = np.frombuffer(base64.b64decode(text), dtype="<u4").astype(np.int64)
    if runs.sum() != int(np.prod(shape)):
        raise InputError(f"grid runs cover {runs.sum()} cells, expected {int(np.prod(shape))}")
    values = np.arange(len(runs)) % 2 == 1
    return np.repeat(values, runs).reshape(shape)


def scene_to_dict(scene: Scene) -> dict:
    return {
        "format": SCENE_FORMAT,
        "scene_id": scene.scene_id,
        "resolution": scene.resolution,
        "origin": list(scene.origin),
        "grid_shape": list(scene.grid.shape),
        "grid_rle": encode_grid(scene.grid),
        "ego_history": scene.ego_history.tolist(),
        "command": scene.command,
        "expert_traj": scene.expert_traj.tolist(),
    }


def scene_from_dict(d: dict) -> Scene:
    if d.get("format") != SCENE_FORMAT:
        raise InputError(f"unsupported scene format {d.get('format')!r}")
    return Scene(
        decode_grid(d["grid_rle"], d["grid_shape"]), np.array(d["ego_history"]), d["command"],
        np.array(d["expert_traj"]), scene_id=d["scene_id"], resolution=d["resolution"],
        origin=tuple(d["origin"]),
    )


def scene_to_json(scene: Scene) -> str:
    return _dump_json(scene_to_dict(scene))


def write_scenes(root, scenes: list[Scene]) -> Path:
    base = Path(root) / "scenes"
    base.mkdir(parents=True, exist_ok=True)
    for scene in scenes:
        (base / f"{scene.scene_id}.json").write_text(scene_to_json(scene))
    return base


def read_scenes(root) -> list[Scene]:
    root = Path(root)
    base = root / "scenes" if (root / "scenes").is_dir() else root
    files = sorted(base.glob("*.json"))
    if not files:
        raise InputError(f"no scene files under {base}")
    return [scene_from_dict(json.loads(f.read_text())) for f in files]
