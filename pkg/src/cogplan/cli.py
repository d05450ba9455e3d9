"""Command-line entry point: ``cogplan <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 runtime failure. Logs go to stderr,
summary tables to stdout, artifacts to files.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import subprocess
import sys
import time
from contextlib import contextmanager
from pathlib import Path

from .exceptions import CogplanError

log = logging.getLogger("cogplan")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
RUN_FORMAT = "cogplan-run/1"


class CliUsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliUsageError(f"{self.prog}: {message}\n\n{self.format_usage()}")


# defaults per subcommand; keys double as the accepted config-file keys
DEFAULTS: dict[str, dict] = {
    "gen": {"out": None, "kind": "both", "n_pairs": 128, "n_scenes": 200, "noise": 0.05,
            "difficulty": "medium", "seed": 0},
    "prep": {"pairs": None, "out": None, "seed": 0, "ratios": [0.8, 0.1, 0.1], "low": 0.1,
             "high": 50.0, "notch": 50.0, "rate": 200.0, "window": 2.0},
    "align": {"pairs": None, "out": None, "seed": 0, "epochs": 120, "lr": 2e-5, "batch_size": 16,
              "weight_decay": 1e-5, "dropout": 0.01, "embed_dim": 200, "subject_filter": None},
    "train": {"scenes": None, "framework": "f3", "ckpt_stage1": None, "out": None, "seed": 0,
              "layers": None, "heads": None, "dropout": None, "ns": 8, "epochs": 50, "lr": 1e-3,
              "batch_size": 16, "freeze": True, "collision_weight": 0.5, "l2_weight": 1.0},
    "eval": {"ckpt": None, "scenes": None, "report": None, "split": "all", "seed": 0},
    "ablate": {"axis": None, "grid": None, "out": None, "scenes": None, "ckpt_stage1": None,
               "pairs": None, "seed": 0, "epochs": 50, "align_epochs": 120, "lr": 1e-3},
    "gradcheck": {"seed": 0, "n_seeds": 20, "families": None},
    "pipeline": {"out": None, "seed": 0, "n_pairs": 128, "n_scenes": 200, "noise": 0.05,
                 "difficulty": "medium", "framework": "f3", "align_epochs": 120, "epochs": 50,
                 "lr": 1e-3},
}
REQUIRED = {
    "gen": ["out"], "prep": ["pairs", "out"], "align": ["pairs", "out"],
    "train": ["scenes", "out"], "eval": ["ckpt", "scenes", "report"],
    "ablate": ["axis", "grid", "out", "scenes"], "gradcheck": [], "pipeline": ["out"],
}


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _ratios(text: str) -> list[float]:
    return [float(v) for v in text.split(",")]


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cogplan", description="EEG-aligned video cognition for trajectory planning.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def cmd(name, help_text):
        p = sub.add_parser(name, help=help_text, argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="JSON file with option values; flags override it")
        p.add_argument("--seed", type=int)
        return p

    p = cmd("gen", "generate synthetic pairs and/or scenes")
    p.add_argument("--out")
    p.add_argument("--kind", choices=["pairs", "scenes", "both"])
    p.add_argument("--n-pairs", dest="n_pairs", type=int)
    p.add_argument("--n-scenes", dest="n_scenes", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--difficulty")

    p = cmd("prep", "preprocess EEG of a pair directory and write a split manifest")
    p.add_argument("--in", "--pairs", dest="pairs")
    p.add_argument("--out")
    p.add_argument("--ratios", type=_ratios)
    p.add_argument("--low", type=float)
    p.add_argument("--high", type=float)
    p.add_argument("--notch", type=float)
    p.add_argument("--rate", type=float)
    p.add_argument("--window", type=float)

    p = cmd("align", "stage 1: contrastive video/EEG alignment")
    p.add_argument("--pairs")
    p.add_argument("--out")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", "--batch-size", dest="batch_size", type=int)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--dropout", type=float)
    p.add_argument("--embed-dim", dest="embed_dim", type=int)
    p.add_argument("--subject-filter", dest="subject_filter", choices=["expert", "novice", "both"])

    p = cmd("train", "stage 2: train a planner")
    p.add_argument("--scenes")
    p.add_argument("--framework", choices=["baseline", "f1", "f2", "f3"])
    p.add_argument("--ckpt-stage1", dest="ckpt_stage1")
    p.add_argument("--out")
    p.add_argument("--layers", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--ns", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--freeze", type=_bool)
    p.add_argument("--collision-weight", dest="collision_weight", type=float)
    p.add_argument("--l2-weight", dest="l2_weight", type=float)

    p = cmd("eval", "score a stage-2 checkpoint")
    p.add_argument("--ckpt")
    p.add_argument("--scenes")
    p.add_argument("--report")
    p.add_argument("--split", choices=["all", "train", "val", "test"])

    p = cmd("ablate", "train and score one planner per grid value")
    p.add_argument("--axis", choices=["framework", "freeze", "ns", "layers", "heads", "dropout",
                                      "data_source"])
    p.add_argument("--grid", help="JSON file: a list of values or {\"values\": [...]}")
    p.add_argument("--out")
    p.add_argument("--scenes")
    p.add_argument("--ckpt-stage1", dest="ckpt_stage1")
    p.add_argument("--pairs")
    p.add_argument("--epochs", type=int)
    p.add_argument("--align-epochs", dest="align_epochs", type=int)
    p.add_argument("--lr", type=float)

    p = cmd("gradcheck", "finite-difference gradient checks")
    p.add_argument("--n-seeds", dest="n_seeds", type=int)
    p.add_argument("--families", type=lambda s: s.split(","))

    p = cmd("pipeline", "gen -> prep -> align -> train -> eval with one seed")
    p.add_argument("--out")
    p.add_argument("--n-pairs", dest="n_pairs", type=int)
    p.add_argument("--n-scenes", dest="n_scenes", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--difficulty")
    p.add_argument("--framework", choices=["baseline", "f1", "f2", "f3"])
    p.add_argument("--align-epochs", dest="align_epochs", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    return parser


def resolve_config(command: str, flags: dict) -> dict:
    """Defaults, then the JSON config file, then explicit flags."""
    cfg = dict(DEFAULTS[command])
    path = flags.pop("config", None)
    if path is not None:
        try:
            loaded = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CliUsageError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise CliUsageError(f"config {path} must hold a JSON object")
        unknown = sorted(set(loaded) - set(cfg))
        if unknown:
            raise CliUsageError(f"unknown config keys for {command}: {', '.join(unknown)}")
        cfg.update(loaded)
    cfg.update(flags)
    missing = [k for k in REQUIRED[command] if cfg.get(k) is None]
    if missing:
        raise CliUsageError(f"{command}: missing required option(s): "
                            + ", ".join("--" + k.replace("_", "-") for k in missing))
    return cfg


def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).resolve().parent, capture_output=True, text=True,
                             timeout=10)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def format_versions() -> dict:
    from .autodiff.checkpoint import FORMAT_VERSION as CKPT_FORMAT
    from .datasets import EEG_FORMAT, PAIR_FORMAT, SCENE_FORMAT
    from .evaluation import ABLATION_FORMAT, REPORT_FORMAT

    return {"checkpoint": CKPT_FORMAT, "eeg": EEG_FORMAT, "pair": PAIR_FORMAT, "scene": SCENE_FORMAT,
            "report": REPORT_FORMAT, "ablation": ABLATION_FORMAT, "run": RUN_FORMAT}


def write_run_info(directory, command: str, cfg: dict) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    info = {"format": RUN_FORMAT, "command": command, "config": cfg, "seed": cfg.get("seed"),
            "git_describe": git_describe(), "formats": format_versions()}
    path = directory / f"run_{command}.json"
    path.write_text(json.dumps(info, indent=2, sort_keys=True, default=str) + "\n")
    return path


@contextmanager
def thread_limit():
    from threadpoolctl import threadpool_limits

    raw = os.environ.get("COGPLAN_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise CliUsageError(f"COGPLAN_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise CliUsageError(f"COGPLAN_THREADS must be >= 1, got {n}")
    with threadpool_limits(limits=n):
        yield


# -- subcommands --------------------------------------------------------------

def _load_pairs(root, seed: int):
    """Pairs from ``root``, preprocessed if needed, with the stored split when present."""
    from .alignment import preprocess_pairs
    from .datasets import read_pairs
    from .signal_prep import SplitManifest

    pairs = read_pairs(root)
    if not all(p.eeg.processed for p in pairs):
        log.info("EEG under %s is raw; preprocessing in memory", root)
        pairs = preprocess_pairs(pairs)
    manifest_path = Path(root) / "manifest.json"
    manifest = None
    if manifest_path.exists():
        manifest = SplitManifest.from_dict(json.loads(manifest_path.read_text()))
    return pairs, manifest


def cmd_gen(cfg: dict) -> int:
    from .datasets import write_pairs, write_scenes
    from .synth import gen_pairs, gen_scenes

    out = Path(cfg["out"])
    difficulty = cfg["difficulty"]
    if isinstance(difficulty, str) and difficulty.isdigit():
        difficulty = int(difficulty)
    if cfg["kind"] in ("pairs", "both"):
        write_pairs(out, gen_pairs(cfg["n_pairs"], noise=cfg["noise"], seed=cfg["seed"]))
    if cfg["kind"] in ("scenes", "both"):
        write_scenes(out, gen_scenes(cfg["n_scenes"], seed=cfg["seed"], difficulty=difficulty))
    print(f"wrote {cfg['kind']} to {out}")
    return EXIT_OK


def cmd_prep(cfg: dict) -> int:
    from .alignment import preprocess_pairs
    from .datasets import read_pairs, write_pairs
    from .signal_prep import EegPreprocessor, split

    prep = EegPreprocessor(low_hz=cfg["low"], high_hz=cfg["high"], notch_hz=cfg["notch"],
                           target_hz=cfg["rate"], window_s=cfg["window"])
    pairs = preprocess_pairs(read_pairs(cfg["pairs"]), prep)
    out = Path(cfg["out"])
    write_pairs(out, pairs)
    manifest = split([p.pair_id for p in pairs], tuple(cfg["ratios"]), cfg["seed"])
    manifest.processed = True
    (out / "manifest.json").write_text(manifest.dumps())
    print(f"preprocessed {len(pairs)} pairs -> {out} "
          f"(train {len(manifest.train)}, val {len(manifest.val)}, test {len(manifest.test)})")
    return EXIT_OK


def _align(pairs, manifest, cfg: dict, epochs: int):
    from .alignment import DrivingThinkingAligner

    filt = cfg.get("subject_filter")
    aligner = DrivingThinkingAligner(
        embed_dim=cfg.get("embed_dim", 200), batch_size=cfg.get("batch_size", 16), epochs=epochs,
        lr=cfg.get("lr", 2e-5),
        weight_decay=cfg.get("weight_decay", 1e-5), dropout=cfg.get("dropout", 0.01),
        subject_filter=None if filt == "both" else filt, seed=cfg["seed"])
    return aligner.fit(pairs, manifest=manifest)


def cmd_align(cfg: dict) -> int:
    pairs, manifest = _load_pairs(cfg["pairs"], cfg["seed"])
    aligner = _align(pairs, manifest, cfg, cfg["epochs"])
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    aligner.save(out)
    with out.with_suffix(".log.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "val_loss", "val_top1", "beta"])
        writer.writeheader()
        writer.writerows(aligner.history_rows())
    best = aligner.history_[aligner.best_epoch_ - 1]
    print(f"stage 1: best epoch {aligner.best_epoch_}  val top-1 {best.val_top1:.3f}  "
          f"val loss {best.val_loss:.4f}")
    return EXIT_OK


def _planner_params(cfg: dict, framework: str) -> dict:
    return {"framework": framework, "layers": cfg.get("layers"), "heads": cfg.get("heads"),
            "dropout": cfg.get("dropout") if framework != "baseline" else None,
            "n_s": cfg.get("ns", 8), "epochs": cfg["epochs"], "lr": cfg["lr"],
            "batch_size": cfg.get("batch_size", 16), "freeze_cognition": cfg.get("freeze", True),
            "collision_weight": cfg.get("collision_weight", 0.5),
            "l2_weight": cfg.get("l2_weight", 1.0), "seed": cfg["seed"]}


def cmd_train(cfg: dict) -> int:
    from .alignment import DrivingThinkingAligner
    from .datasets import read_scenes
    from .fusion import TrajectoryPlanner

    scenes = read_scenes(cfg["scenes"])
    aligner = None if cfg["ckpt_stage1"] is None else DrivingThinkingAligner.load(cfg["ckpt_stage1"])
    planner = TrajectoryPlanner(**_planner_params(cfg, cfg["framework"]))
    planner.fit(scenes, cognition=aligner)
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    planner.save(out)
    rows = [vars(r) for r in planner.history_]
    out.with_suffix(".log.json").write_text(json.dumps(
        {"initial_val_l2": planner.initial_val_l2_, "epochs": rows}, indent=2) + "\n")
    (out.parent / "manifest.json").write_text(planner.manifest_.dumps())
    print(f"stage 2 ({cfg['framework']}): val L2 {planner.initial_val_l2_:.3f} -> "
          f"{planner.history_[-1].val_l2:.3f}")
    return EXIT_OK


def _select_split(scenes, split_name: str, planner):
    if split_name == "all":
        return scenes
    ids = set(getattr(planner.manifest_, split_name)) if hasattr(planner, "manifest_") else None
    if ids is None:
        from .signal_prep import split

        ids = set(getattr(split([s.scene_id for s in scenes], planner.ratios, planner.seed), split_name))
    chosen = [s for s in scenes if s.scene_id in ids]
    if not chosen:
        raise CogplanError(f"split {split_name!r} selects no scenes")
    return chosen


def cmd_eval(cfg: dict) -> int:
    from .datasets import read_scenes
    from .evaluation import run_eval
    from .fusion import TrajectoryPlanner

    planner = TrajectoryPlanner.load(cfg["ckpt"])
    scenes = _select_split(read_scenes(cfg["scenes"]), cfg["split"], planner)
    report = run_eval(planner, scenes, {"split": cfg["split"]})
    report.write(cfg["report"])
    print(report.table())
    return EXIT_OK


def _grid_values(path) -> list:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CliUsageError(f"cannot read grid {path}: {exc}") from exc
    values = data.get("values") if isinstance(data, dict) else data
    if not isinstance(values, list):
        raise CliUsageError(f"grid {path} must be a list or an object with a 'values' list")
    return values


def cmd_ablate(cfg: dict) -> int:
    from .alignment import DrivingThinkingAligner
    from .datasets import read_scenes
    from .evaluation import run_ablation

    values = _grid_values(cfg["grid"])
    setup = {"scenes": read_scenes(cfg["scenes"]), "seed": cfg["seed"],
             "planner": {"epochs": cfg["epochs"], "lr": cfg["lr"]}}
    if cfg["ckpt_stage1"] is not None:
        setup["aligner"] = DrivingThinkingAligner.load(cfg["ckpt_stage1"])
    if cfg["pairs"] is not None:
        setup["pairs"], _ = _load_pairs(cfg["pairs"], cfg["seed"])
        setup["aligner_params"] = {"epochs": cfg["align_epochs"]}
    grid = run_ablation(cfg["axis"], values, setup)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(grid.to_json())
    (out / "ablation.txt").write_text(grid.table() + "\n")
    print(grid.table())
    failed = [a.value for a in grid.arms if a.status != "ok"]
    if failed:
        log.warning("failed arms: %s", failed)
    # a grid with some failed arms is still a result; one with none is not
    return EXIT_RUNTIME if len(failed) == len(grid.arms) else EXIT_OK


def cmd_gradcheck(cfg: dict) -> int:
    from .gradcheck import FAMILIES, TOLERANCE, run_gradcheck

    families = cfg["families"]
    if families:
        unknown = [f for f in families if f not in FAMILIES]
        if unknown:
            raise CliUsageError(f"unknown op families: {', '.join(unknown)}")
    results = run_gradcheck(cfg["seed"], cfg["n_seeds"], families)
    for r in results:
        print(f"{r.family:20s} max_rel_err={r.max_rel_error:.3e}  "
              f"{'PASS' if r.passed else 'FAIL'}  ({r.checks} seeds, {r.seconds:.1f}s)")
    ok = all(r.passed for r in results)
    print(f"gradcheck: {'all families below' if ok else 'FAILED: some family at or above'} {TOLERANCE:g}")
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_pipeline(cfg: dict) -> int:
    from .alignment import preprocess_pairs
    from .datasets import write_pairs, write_scenes
    from .evaluation import run_eval
    from .fusion import TrajectoryPlanner
    from .signal_prep import split
    from .synth import gen_pairs, gen_scenes

    out = Path(cfg["out"])
    seed = cfg["seed"]
    difficulty = cfg["difficulty"]
    if isinstance(difficulty, str) and difficulty.isdigit():
        difficulty = int(difficulty)
    log.info("pipeline: generating data")
    raw = gen_pairs(cfg["n_pairs"], noise=cfg["noise"], seed=seed)
    scenes = gen_scenes(cfg["n_scenes"], seed=seed, difficulty=difficulty)
    write_pairs(out / "raw", raw)
    write_scenes(out, scenes)
    log.info("pipeline: preprocessing EEG")
    pairs = preprocess_pairs(raw)
    write_pairs(out / "processed", pairs)
    manifest = split([p.pair_id for p in pairs], (0.8, 0.1, 0.1), seed)
    manifest.processed = True
    (out / "processed" / "manifest.json").write_text(manifest.dumps())
    log.info("pipeline: stage 1")
    aligner = _align(pairs, manifest, {"seed": seed}, cfg["align_epochs"])
    aligner.save(out / "stage1.ckpt")
    log.info("pipeline: stage 2 (%s)", cfg["framework"])
    planner = TrajectoryPlanner(**_planner_params(cfg, cfg["framework"]))
    planner.fit(scenes, cognition=aligner if cfg["framework"] != "baseline" else None)
    planner.save(out / "stage2.ckpt")
    log.info("pipeline: evaluation")
    test = _select_split(scenes, "test", planner)
    report = run_eval(planner, test, {"split": "test", "seed": seed})
    report.write(out / "report.json")
    print(report.table())
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "prep": cmd_prep, "align": cmd_align, "train": cmd_train,
            "eval": cmd_eval, "ablate": cmd_ablate, "gradcheck": cmd_gradcheck,
            "pipeline": cmd_pipeline}


def _run_dir(command: str, cfg: dict) -> Path | None:
    if command in ("gen", "prep", "ablate", "pipeline"):
        return Path(cfg["out"])
    if command in ("align", "train"):
        return Path(cfg["out"]).parent
    if command == "eval":
        return Path(cfg["report"]).parent
    return None


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    logging.basicConfig(level=os.environ.get("COGPLAN_LOG", "INFO").upper(), stream=sys.stderr,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    parser = build_parser()
    try:
        if not argv:
            raise CliUsageError(parser.format_help())
        ns = vars(parser.parse_args(argv))
        command = ns.pop("command", None)
        if command is None:
            raise CliUsageError(parser.format_help())
        cfg = resolve_config(command, ns)
        with thread_limit():
            run_dir = _run_dir(command, cfg)
            if run_dir is not None:
                write_run_info(run_dir, command, cfg)
            start = time.perf_counter()
            code = COMMANDS[command](cfg)
            log.info("%s finished in %.1fs", command, time.perf_counter() - start)
            return code
    except CliUsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return EXIT_USAGE
    except (CogplanError, OSError, ValueError, RuntimeError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_RUNTIME


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
