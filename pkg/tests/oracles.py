"""Independent reference implementations used by several test modules."""

import math

import numpy as np
from shapely.geometry import Polygon, box
from shapely.ops import unary_union

from cogplan.synth import EGO_LENGTH, EGO_WIDTH


def l2_reference(pred, gt, convention):
    err = [math.hypot(pred[t][0] - gt[t][0], pred[t][1] - gt[t][1]) for t in range(6)]
    if convention == "uniad":
        vals = [err[1], err[3], err[5]]
    else:
        vals = [sum(err[:s]) / s for s in (2, 4, 6)]
    return vals + [sum(vals) / 3]


def obstacle_union(scene):
    ox, oy = scene.origin
    r = scene.resolution
    return unary_union([box(ox + i * r, oy + j * r, ox + (i + 1) * r, oy + (j + 1) * r)
                        for i, j in zip(*np.nonzero(scene.grid))])


def footprint(x, y, yaw, length=EGO_LENGTH, width=EGO_WIDTH):
    c, s = math.cos(yaw), math.sin(yaw)
    pts = [(x + c * dl * length / 2 - s * dw * width / 2, y + s * dl * length / 2 + c * dw * width / 2)
           for dl, dw in [(1, 1), (-1, 1), (-1, -1), (1, -1)]]
    return Polygon(pts)


def collision_reference(pred, scene):
    """Per-horizon flags from exact polygon overlap with the union of occupied cells."""
    obstacles = obstacle_union(scene)
    hits, yaw, px, py = [], 0.0, 0.0, 0.0
    for x, y in pred:
        if math.hypot(x - px, y - py) > 1e-6:
            yaw = math.atan2(y - py, x - px)
        hits.append(not obstacles.is_empty and footprint(x, y, yaw).intersection(obstacles).area > 1e-12)
        px, py = x, y
    return [int(any(hits[:s])) for s in (2, 4, 6)]


def random_metric_cases(n=100, seed=17):
    from cogplan.synth import gen_scenes

    rng = np.random.default_rng(seed)
    scenes = gen_scenes(n, seed=seed, difficulty="hard")
    preds = [s.expert_traj + np.cumsum(rng.normal(scale=1.0, size=(6, 2)), axis=0) for s in scenes]
    return scenes, preds


def fft_amplitude(x, freq, fs):
    """Single-sided amplitude at ``freq`` from the DFT of an integer number of periods."""
    spectrum = np.fft.rfft(x)
    k = int(round(freq * len(x) / fs))
    return 2 * np.abs(spectrum[k]) / len(x)
