"""Command-line entry points.

Every subcommand takes ``--config PATH`` (JSON, optional; the desk preset
fills anything missing), ``--seed N`` and ``--out DIR``, writes its results
under ``DIR`` and finishes with ``DIR/manifest.json`` recording the resolved
config, seed, ``git describe`` of the working tree and wall time.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import subprocess
import sys
import time
from pathlib import Path

from .comms import build_trace
from .config import ExperimentConfig
from .errors import ConfigurationError, CoopSimError, UsageError
from .evaluation import (
    COMPONENTS,
    METHODS,
    Evaluator,
    NoiseConfig,
    ap_by_p,
    run_ablations,
    run_pdr_sweep,
    run_pose_noise_sweep,
    write_records,
)
from .system import Variant, load_model, save_model
from .training import prepare_dataset, train_student, train_teacher
from .world import Scenario, ScenarioConfig, generate_scenario

log = logging.getLogger("coopsim")

# scenario seeds for run seed s are s * SEED_STRIDE + offset + k
SEED_STRIDE = 1_000_000


class CliError(Exception):
    def __init__(self, message: str, code: int = 2):
        super().__init__(message)
        self.code = code


def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True, text=True,
                             cwd=Path(__file__).resolve().parent, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() if out.returncode == 0 and out.stdout.strip() else "unknown"


def write_manifest(out: Path, command: str, cfg: ExperimentConfig, seed: int, started: float, extra=None) -> Path:
    doc = {
        "command": command,
        "config": cfg.to_dict(),
        "seed": seed,
        "git_describe": git_describe(),
        "wall_time_s": round(time.perf_counter() - started, 3),
    }
    if extra:
        doc.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def _load_config(path) -> ExperimentConfig:
    if path is None:
        cfg = ExperimentConfig()
        cfg.validate()
        return cfg
    return ExperimentConfig.load(path)


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError(f"{what} not found: {p}")
    return p


def _scenario_seeds(cfg: ExperimentConfig, seed: int, split: str) -> list[int]:
    local = cfg.data.train_seeds() if split == "train" else cfg.data.test_seeds()
    return [seed * SEED_STRIDE + s for s in local]


def _scenarios(args, cfg: ExperimentConfig, split: str, scenario_cfg: ScenarioConfig | None = None) -> list[Scenario]:
    """Scenarios from ``--scenarios DIR/<split>`` when given, else regenerated from the seed."""
    if getattr(args, "scenarios", None):
        folder = _existing(str(Path(args.scenarios) / split), "scenario directory")
        files = sorted(folder.glob("*.json"))
        if not files:
            raise CliError(f"no scenario files in {folder}")
        return [Scenario.from_json(f.read_text()) for f in files]
    sc = scenario_cfg or cfg.scenario
    return [generate_scenario(sc, s) for s in _scenario_seeds(cfg, args.seed, split)]


def _data(args, cfg, split, scenario_cfg=None):
    return prepare_dataset(_scenarios(args, cfg, split, scenario_cfg), cfg.sensing, cfg.model)


# ----------------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------------

def cmd_gen_scenarios(args, cfg: ExperimentConfig, out: Path) -> dict:
    counts = {}
    for split in ("train", "test"):
        folder = out / "scenarios" / split
        folder.mkdir(parents=True, exist_ok=True)
        seeds = _scenario_seeds(cfg, args.seed, split)
        for s in seeds:
            (folder / f"scenario_{s}.json").write_text(generate_scenario(cfg.scenario, s).to_json())
        counts[split] = len(seeds)
    return {"scenarios": counts}


def cmd_train_teacher(args, cfg: ExperimentConfig, out: Path) -> dict:
    data = _data(args, cfg, "train")
    tcfg = cfg.teacher
    tcfg.seed = args.seed
    if args.epochs is not None:
        tcfg.epochs = args.epochs
    result = train_teacher(data, cfg.model, tcfg, ego_only=args.ego_only)
    name = "individual" if args.ego_only else "teacher"
    path = save_model(out / f"{name}.json", result.model, result.variant, {"train_config": _plain(tcfg)})
    result.write_log(out / f"{name}_log.csv")
    return {"checkpoint": str(path), "final_det_loss": result.history[-1].mean_det_loss}


def cmd_train_student(args, cfg: ExperimentConfig, out: Path) -> dict:
    teacher, _, _ = load_model(_existing(args.teacher, "teacher checkpoint"))
    data = _data(args, cfg, "train")
    scfg = cfg.student
    scfg.seed = args.seed
    if args.epochs is not None:
        scfg.epochs = args.epochs
        scfg.ramp_epochs = max(1, round(args.epochs * 0.75))
    if args.no_kd:
        scfg.gamma = 0.0
    if args.no_curriculum:
        scfg.curriculum = False
    if args.fixed_p is not None:
        scfg.fixed_p = args.fixed_p
    variant = Variant(history=args.history, k=args.k)
    result = train_student(data, teacher, scfg, variant)
    path = save_model(out / f"{args.name}.json", result.model, variant, {"train_config": _plain(scfg)})
    result.write_log(out / f"{args.name}_log.csv")
    return {"checkpoint": str(path), "final_det_loss": result.history[-1].mean_det_loss}


def _model_arg(path: str):
    model, variant, _ = load_model(_existing(path, "checkpoint"))
    return model, variant


def _p_list(args, cfg):
    return [float(p) for p in args.p_list.split(",")] if args.p_list else cfg.eval.p_list


def _seeds(args, cfg):
    return [int(s) for s in args.eval_seeds.split(",")] if args.eval_seeds else cfg.eval.seeds


def cmd_eval_sweep(args, cfg: ExperimentConfig, out: Path) -> dict:
    model = _model_arg(args.checkpoint)
    ev = Evaluator(_data(args, cfg, "test"), conf_thresh=cfg.eval.conf_thresh)
    records = run_pdr_sweep(model, args.method, ev, _p_list(args, cfg), _seeds(args, cfg))
    write_records(out / "results.csv", records)
    curve = ap_by_p(records, args.method)
    return {"method": args.method, "mean_ap50": sum(curve.values()) / len(curve)}


def cmd_noise_sweep(args, cfg: ExperimentConfig, out: Path) -> dict:
    model = _model_arg(args.checkpoint)
    ev = Evaluator(_data(args, cfg, "test"), conf_thresh=cfg.eval.conf_thresh)
    levels = [NoiseConfig(t, math.radians(r), seed=args.seed) for t, r in cfg.eval.noise_levels]
    p = cfg.eval.noise_p if args.p is None else args.p
    records = run_pose_noise_sweep(model, args.method, ev, levels, p, _seeds(args, cfg))
    write_records(out / "results.csv", records, with_noise=True)
    return {"method": args.method, "p": p}


def _named_checkpoints(items: list[str]) -> dict[str, str]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise CliError(f"--model expects NAME=PATH, got {item!r}")
        name, path = item.split("=", 1)
        out[name] = path
    return out


def cmd_ablate(args, cfg: ExperimentConfig, out: Path) -> dict:
    named = _named_checkpoints(args.model)
    p_list = _p_list(args, cfg) if args.p_list else cfg.eval.ablation_p
    seeds = _seeds(args, cfg)
    conf = cfg.eval.conf_thresh
    if args.kind == "history_k":
        grid = cfg.eval.history_ks
        models = {k: _model_arg(named[str(k)]) for k in grid if str(k) in named}
        missing = [k for k in grid if str(k) not in named]
        if missing:
            raise CliError(f"history_k ablation needs --model K=PATH for k in {missing}")
        data = Evaluator(_data(args, cfg, "test"), conf_thresh=conf)
    elif args.kind == "num_nodes":
        grid = cfg.eval.node_counts
        if "incop" not in named:
            raise CliError("num_nodes ablation needs --model incop=PATH")
        models = {"incop": _model_arg(named["incop"])}
        data = {}
        for n in grid:
            sc = ScenarioConfig(**{**cfg.scenario.__dict__, "num_vehicles": n - cfg.scenario.num_rsus})
            sc.validate()
            data[n] = Evaluator(_data(args, cfg, "test", sc), conf_thresh=conf)
    else:
        grid = [c for c in COMPONENTS if c in named]
        if not grid:
            raise CliError(f"components ablation needs --model NAME=PATH with NAME in {COMPONENTS}")
        models = {c: _model_arg(named[c]) for c in grid}
        data = Evaluator(_data(args, cfg, "test"), conf_thresh=conf)
    records = run_ablations(args.kind, grid, models, data, p_list, seeds)
    write_records(out / "results.csv", records)
    return {"kind": args.kind, "grid": list(grid)}


def cmd_inspect_trace(args, cfg: ExperimentConfig, out: Path) -> dict:
    n = args.nodes if args.nodes is not None else cfg.scenario.num_nodes
    steps = args.steps if args.steps is not None else cfg.scenario.frames
    trace = build_trace(n, steps, args.p, args.seed, stream=args.stream)
    (out / "trace.csv").write_text(trace.to_csv())
    links = n * (n - 1) * steps
    rate = float(sum(len(trace.received(i, t)) for t in range(steps) for i in range(n))) / max(links, 1)
    print(f"{n} nodes, {steps} steps, p={args.p}: delivered {rate:.4f} of {links} link-steps")
    return {"delivery_rate": rate, "nodes": n, "steps": steps, "p": args.p}


def _plain(obj) -> dict:
    return dict(obj.__dict__)


# ----------------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON (desk preset when omitted)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default="runs/latest", help="output directory")
    common.add_argument("--scenarios", help="directory written by gen-scenarios (default: regenerate)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="coopsim", description="Cooperative perception under lossy V2X links.")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-scenarios", parents=[common], help="write train/test scenario JSON files")

    p = sub.add_parser("train-teacher", parents=[common], help="ideal-communication (or individual) training")
    p.add_argument("--ego-only", action="store_true", help="train the individual, non-cooperative detector")
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("train-student", parents=[common], help="interruption-aware training")
    p.add_argument("--teacher", required=True, help="teacher checkpoint")
    p.add_argument("--history", choices=["none", "summation", "msstp"], default="msstp")
    p.add_argument("--k", type=int, default=3, help="history length")
    p.add_argument("--no-kd", action="store_true")
    p.add_argument("--no-curriculum", action="store_true")
    p.add_argument("--fixed-p", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--name", default="student")

    for name, helptext in (("eval-sweep", "AP over drop rates"), ("noise-sweep", "AP over pose-noise levels")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--method", choices=METHODS, default="incop")
        p.add_argument("--eval-seeds", help="comma-separated evaluation seeds")
        if name == "eval-sweep":
            p.add_argument("--p-list", help="comma-separated drop rates")
        else:
            p.add_argument("--p", type=float)

    p = sub.add_parser("ablate", parents=[common], help="history-length, node-count or component ablations")
    p.add_argument("--kind", choices=["history_k", "num_nodes", "components"], required=True)
    p.add_argument("--model", action="append", help="NAME=PATH (k, 'incop' or component name)")
    p.add_argument("--p-list")
    p.add_argument("--eval-seeds")

    p = sub.add_parser("inspect-trace", parents=[common], help="dump a link-delivery trace as CSV")
    p.add_argument("--p", type=float, required=True)
    p.add_argument("--nodes", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--stream", type=int, default=0)
    return parser


COMMANDS = {
    "gen-scenarios": cmd_gen_scenarios,
    "train-teacher": cmd_train_teacher,
    "train-student": cmd_train_student,
    "eval-sweep": cmd_eval_sweep,
    "noise-sweep": cmd_noise_sweep,
    "ablate": cmd_ablate,
    "inspect-trace": cmd_inspect_trace,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    started = time.perf_counter()
    try:
        cfg = _load_config(args.config)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        extra = COMMANDS[args.command](args, cfg, out)
        write_manifest(out, args.command, cfg, args.seed, started, extra)
    except CliError as exc:
        print(f"coopsim {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigurationError, UsageError) as exc:
        print(f"coopsim {args.command}: {exc}", file=sys.stderr)
        return 2
    except CoopSimError as exc:
        print(f"coopsim {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
