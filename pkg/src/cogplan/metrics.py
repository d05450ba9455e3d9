"""Open-loop planning metrics: L2 displacement under two horizon conventions
and footprint-based collision flags."""

from __future__ import annotations

import numpy as np

from .exceptions import InputError
from .synth import EGO_LENGTH, EGO_WIDTH, Scene, box_hits_grid, waypoint_yaws

HORIZON_STEPS = (2, 4, 6)  # 1 s, 2 s, 3 s at 2 Hz
CONVENTIONS = ("stp3", "uniad")


def _check_pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 2:
        raise InputError(f"trajectory shapes differ or are not T x 2: {pred.shape} vs {gt.shape}")
    if pred.shape[0] < max(HORIZON_STEPS):
        raise InputError(f"need {max(HORIZON_STEPS)} waypoints, got {pred.shape[0]}")
    return pred, gt


def l2_metric(pred, gt, convention: str = "stp3") -> dict[str, float]:
    """Displacement error at 1/2/3 s plus their mean.

    ``uniad``: the error at exactly steps 2, 4, 6. ``stp3``: the mean error
    over steps 1..2, 1..4, 1..6.
    """
    pred, gt = _check_pair(pred, gt)
    err = np.linalg.norm(pred - gt, axis=-1)
    if convention == "uniad":
        vals = [err[s - 1] for s in HORIZON_STEPS]
    elif convention == "stp3":
        vals = [err[:s].mean() for s in HORIZON_STEPS]
    else:
        raise InputError(f"unknown L2 convention {convention!r}; expected one of {CONVENTIONS}")
    out = {f"{s // 2}s": float(v) for s, v in zip(HORIZON_STEPS, vals)}
    out["avg"] = float(np.mean(vals))
    return out


def collision_flags(pred, scene: Scene, length: float = EGO_LENGTH, width: float = EGO_WIDTH) -> dict[str, int]:
    """Per-horizon 0/1 flags: 1 iff the ego box at any waypoint up to that
    horizon overlaps an occupied cell. Yaw follows consecutive waypoints."""
    if length <= 0 or width <= 0:
        raise InputError(f"ego footprint must be positive, got {length} x {width}")
    pred = np.asarray(pred, dtype=np.float64)
    yaws = waypoint_yaws(pred)
    hit = np.array([box_hits_grid(scene.grid, scene.origin, scene.resolution, x, y, yw, length, width)
                    for (x, y), yw in zip(pred, yaws)])
    return {f"{s // 2}s": int(hit[:s].any()) for s in HORIZON_STEPS}


def collision_metric(preds, scenes: list[Scene], length: float = EGO_LENGTH,
                     width: float = EGO_WIDTH) -> dict[str, float]:
    """Batch collision rate per horizon (mean of per-sample flags) plus their mean."""
    flags = [collision_flags(p, s, length, width) for p, s in zip(preds, scenes)]
    if not flags:
        raise InputError("no samples to score")
    out = {k: float(np.mean([f[k] for f in flags])) for k in flags[0]}
    out["avg"] = float(np.mean([out[k] for k in flags[0]]))
    return out
