"""Metric reports and the ablation harness."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import CogplanError, ConfigError, InputError
from .fusion import TrajectoryPlanner
from .metrics import CONVENTIONS, HORIZON_STEPS, collision_flags, l2_metric
from .synth import EGO_LENGTH, EGO_WIDTH, Scene

log = logging.getLogger(__name__)

REPORT_FORMAT = "cogplan-report/1"
ABLATION_FORMAT = "cogplan-ablation/1"
HORIZONS = tuple(f"{s // 2}s" for s in HORIZON_STEPS)
AXES = {
    "framework": "framework",
    "freeze": "freeze_cognition",
    "ns": "n_s",
    "layers": "layers",
    "heads": "heads",
    "dropout": "dropout",
    "data_source": None,  # selects which subjects' EEG trains the stage-1 model
}


def _mean(values) -> float:
    # fixed-order accumulation keeps sums reproducible
    total = 0.0
    for v in values:
        total += float(v)
    return total / len(values)


@dataclass
class MetricReport:
    l2: dict  # convention -> {"1s","2s","3s","avg"}
    collision: dict  # {"1s","2s","3s","avg"} rates in [0, 1]
    n_samples: int
    config: dict
    per_sample: list = field(default_factory=list)
    runtime_s: float | None = None  # kept out of the JSON so reports stay byte-stable

    def to_dict(self) -> dict:
        return {"format": REPORT_FORMAT, "n_samples": self.n_samples, "l2": self.l2,
                "collision": self.collision, "config": self.config, "per_sample": self.per_sample}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        if d.get("format") != REPORT_FORMAT:
            raise InputError(f"unsupported report format {d.get('format')!r}")
        return cls(d["l2"], d["collision"], d["n_samples"], d["config"], d.get("per_sample", []))

    def row(self) -> list[float]:
        out = []
        for conv in CONVENTIONS:
            out += [self.l2[conv][h] for h in HORIZONS] + [self.l2[conv]["avg"]]
            out += [100 * self.collision[h] for h in HORIZONS] + [100 * self.collision["avg"]]
        return out

    def table(self, label: str | None = None) -> str:
        return format_table([(label or self.config.get("framework", "model"), self)])

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        path.with_suffix(".txt").write_text(self.table() + "\n")
        if self.runtime_s is not None:
            path.with_name(path.stem + ".runtime.json").write_text(
                json.dumps({"runtime_s": self.runtime_s}) + "\n")
        return path


def format_table(rows: list[tuple[str, "MetricReport | None"]]) -> str:
    """Aligned text table: per convention, L2 (m) and collision (%) at 1/2/3 s plus Avg."""
    sub = [f"{h}" for h in HORIZONS] + ["Avg"]
    groups = []
    for conv in CONVENTIONS:
        name = "ST-P3" if conv == "stp3" else "UniAD"
        groups += [(f"{name} L2 (m)", sub), (f"{name} Col. (%)", sub)]
    width = max([len(r[0]) for r in rows] + [6])
    head1 = " " * width + " | " + " | ".join(g.center(6 * 4 + 3) for g, _ in groups)
    head2 = "Method".ljust(width) + " | " + " | ".join(" ".join(s.rjust(6) for s in cols)
                                                       for _, cols in groups)
    lines = [head1, head2, "-" * len(head2)]
    for label, report in rows:
        if report is None:
            lines.append(label.ljust(width) + " | failed")
            continue
        vals = report.row()
        cells = [" ".join(f"{v:6.2f}" for v in vals[i:i + 4]) for i in range(0, len(vals), 4)]
        lines.append(label.ljust(width) + " | " + " | ".join(cells))
    return "\n".join(lines)


def evaluate_predictions(preds, scenes: list[Scene], config: dict | None = None,
                         length: float = EGO_LENGTH, width: float = EGO_WIDTH) -> MetricReport:
    preds = np.asarray(preds, dtype=np.float64)
    if len(preds) != len(scenes) or not scenes:
        raise InputError(f"{len(preds)} predictions for {len(scenes)} scenes")
    per = []
    for p, s in zip(preds, scenes):
        per.append({"scene_id": s.scene_id,
                    "l2": {c: l2_metric(p, s.expert_traj, c) for c in CONVENTIONS},
                    "collision": collision_flags(p, s, length, width),
                    "trajectory": p.tolist()})
    l2 = {}
    for conv in CONVENTIONS:
        l2[conv] = {h: _mean([r["l2"][conv][h] for r in per]) for h in HORIZONS}
        l2[conv]["avg"] = _mean([l2[conv][h] for h in HORIZONS])
    col = {h: _mean([r["collision"][h] for r in per]) for h in HORIZONS}
    col["avg"] = _mean([col[h] for h in HORIZONS])
    return MetricReport(l2, col, len(per), dict(config or {}), per)


def run_eval(ckpt, scenes: list[Scene], cfg: dict | None = None) -> MetricReport:
    """Score a stage-2 checkpoint (path or fitted planner) on ``scenes``."""
    start = time.perf_counter()
    planner = ckpt if isinstance(ckpt, TrajectoryPlanner) else TrajectoryPlanner.load(ckpt)
    cfg = dict(cfg or {})
    preds = planner.predict(scenes)
    config = {"planner": _jsonable(planner.get_params()), **_jsonable(cfg)}
    config["framework"] = planner.framework
    report = evaluate_predictions(preds, scenes, config, cfg.get("ego_length", EGO_LENGTH),
                                  cfg.get("ego_width", EGO_WIDTH))
    report.runtime_s = time.perf_counter() - start
    return report


def _jsonable(d: dict) -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, tuple):
            v = list(v)
        elif isinstance(v, np.generic):
            v = v.item()
        out[k] = v
    return out


# -- ablation -------------------------------------------------------------

@dataclass
class AblationArm:
    value: object
    params: dict
    status: str  # "ok" | "failed"
    report: MetricReport | None = None
    error: str | None = None
    cognition_changed: int | None = None  # parameters differing from the stage-1 state

    def to_dict(self) -> dict:
        return {"value": self.value, "params": self.params, "status": self.status,
                "error": self.error, "cognition_changed": self.cognition_changed,
                "report": None if self.report is None else self.report.to_dict()}


@dataclass
class AblationGrid:
    axis: str
    arms: list[AblationArm]
    shared: dict

    def to_dict(self) -> dict:
        return {"format": ABLATION_FORMAT, "axis": self.axis, "shared": self.shared,
                "arms": [a.to_dict() for a in self.arms]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def table(self) -> str:
        return format_table([(f"{self.axis}={a.value}", a.report) for a in self.arms])


def _changed_parameters(before: dict[str, np.ndarray], module) -> int:
    after = module.state_dict()
    return sum(int(not np.array_equal(before[k], after[k])) for k in before)


def run_ablation(axis: str, grid: list, cfg: dict) -> AblationGrid:
    """Train one planner per value of ``axis`` under a shared budget and seed.

    ``cfg`` keys: ``scenes`` (list of Scene, split internally), ``aligner``
    (fitted stage-1 model) or ``pairs`` plus ``aligner_params`` (needed for
    the data_source axis), ``planner`` (base planner params), ``seed``.
    An arm that raises is kept in the grid and marked failed.
    """
    from .alignment import DrivingThinkingAligner

    if axis not in AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; expected one of {sorted(AXES)}")
    grid = list(grid)
    if len(grid) < 2:
        raise ConfigError(f"an ablation needs at least 2 configurations, got {len(grid)}")
    if "scenes" not in cfg:
        raise ConfigError("ablation config needs 'scenes'")
    scenes = cfg["scenes"]
    seed = int(cfg.get("seed", 0))
    base = dict(cfg.get("planner", {}))
    base["seed"] = seed
    if axis == "data_source" and "pairs" not in cfg:
        raise ConfigError("the data_source axis needs 'pairs' to retrain the stage-1 model")
    arms = []
    for value in grid:
        params = dict(base)
        if AXES[axis] is not None:
            params[AXES[axis]] = value
        try:
            aligner = cfg.get("aligner")
            if axis == "data_source":
                aparams = dict(cfg.get("aligner_params", {}), seed=seed, subject_filter=value)
                aligner = DrivingThinkingAligner(**aparams).fit(cfg["pairs"])
            before = None if aligner is None else aligner.video_encoder_.state_dict()
            planner = TrajectoryPlanner(**params).fit(scenes, cognition=aligner)
            changed = None
            if planner.cognition_ is not None:
                changed = _changed_parameters(before, planner.cognition_)
                if planner.freeze_cognition and changed:
                    raise CogplanError(f"{changed} frozen cognition parameters changed")
                if not planner.freeze_cognition and planner.model_.uses_cognition and not changed:
                    raise CogplanError("unfrozen arm left every cognition parameter unchanged")
            test_ids = set(planner.manifest_.test)
            held_out = [s for s in scenes if s.scene_id in test_ids] or scenes
            report = run_eval(planner, held_out, {"ablation_axis": axis, "ablation_value": value})
            report.runtime_s = None
            arms.append(AblationArm(value, _jsonable(params), "ok", report, None, changed))
        except (CogplanError, ValueError, RuntimeError, FloatingPointError) as exc:
            log.warning("ablation arm %s=%r failed: %s", axis, value, exc)
            arms.append(AblationArm(value, _jsonable(params), "failed", None,
                                    f"{type(exc).__name__}: {exc}"))
    shared = {"n_scenes": len(scenes), "seed": seed, "epochs": base.get("epochs", 50)}
    return AblationGrid(axis, arms, shared)
