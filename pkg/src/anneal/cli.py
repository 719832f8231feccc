"""Command-line entry point: generate datasets, run simulated experiments,
compare strategies across seeds, evaluate checkpoints, and host the human
annotation session.

Exit codes: 0 success, 1 usage/config error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import threading
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

from . import __version__
from . import data as datamod
from . import engine, evaluation, service, tcal
from . import model as modelmod

ALL_STRATEGIES = ("anneal", "anneal-u", "random", "tcal")


class UsageError(ValueError):
    """Bad flags or config; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- configuration ----------------------------------------------------------

_SYNTH_KEYS = {"classes": int, "per_class": int, "dim": int,
               "stddev": float, "seed": int}
_MODEL_KEYS = {"encoder_hidden": list, "embedding_dim": int, "g_dims": list,
               "bc_hidden": list, "margin": float, "beta": float,
               "learning_rate": float}
_AL_KEYS = {"k": int, "strategy": str, "uncertain_pool_multiplier": int,
            "budget_bits": float, "iterations_max": int,
            "epochs_per_iteration": int, "initial_epochs": int,
            "batch_size": int, "seed_fraction": float,
            "per_seed_similar": int, "per_seed_dissimilar": int,
            "retrain_from_scratch": bool, "scoring_block_size": int,
            "jobs": int}
_TCAL_KEYS = {"learning_rate": float, "rounding": str,
              "epochs_per_iteration": int, "initial_epochs": int,
              "batch_size": int, "retrain_from_scratch": bool}


@dataclass
class ExperimentConfig:
    dataset_path: str | None = None
    synthetic: dict | None = None
    model: dict = field(default_factory=dict)
    al: dict = field(default_factory=dict)
    tcal: dict = field(default_factory=dict)
    seed: int = 0
    seeds: list[int] = field(default_factory=list)
    output_dir: str = "runs"

    def echo(self) -> dict:
        doc = {"seed": self.seed, "output_dir": self.output_dir,
               "model": self.model, "al": self.al, "tcal": self.tcal}
        if self.seeds:
            doc["seeds"] = self.seeds
        doc["dataset"] = ({"path": self.dataset_path}
                          if self.dataset_path else
                          {"synthetic": self.synthetic})
        return doc


def _checked_section(doc: dict, name: str, allowed: dict) -> dict:
    section = doc.get(name, {})
    if not isinstance(section, dict):
        raise UsageError(f"config field '{name}' must be an object")
    out = {}
    for key, value in section.items():
        if key not in allowed:
            raise UsageError(f"unknown config key '{name}.{key}'")
        want = allowed[key]
        if want is float and isinstance(value, int):
            value = float(value)
        if want is int and isinstance(value, bool):
            raise UsageError(f"config key '{name}.{key}' must be {want.__name__}")
        if not isinstance(value, want):
            raise UsageError(f"config key '{name}.{key}' must be {want.__name__}")
        out[key] = value
    return out


def parse_config(doc: dict) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise UsageError("config root must be a JSON object")
    known_top = {"dataset", "model", "al", "tcal", "seed", "seeds",
                 "output_dir"}
    for key in doc:
        if key not in known_top:
            raise UsageError(f"unknown config key '{key}'")

    dataset = doc.get("dataset")
    if not isinstance(dataset, dict) or \
            ("path" in dataset) == ("synthetic" in dataset):
        raise UsageError(
            "config field 'dataset' must hold exactly one of 'path' or "
            "'synthetic'")
    for key in dataset:
        if key not in ("path", "synthetic"):
            raise UsageError(f"unknown config key 'dataset.{key}'")
    synthetic = None
    path = None
    if "path" in dataset:
        path = dataset["path"]
        if not isinstance(path, str):
            raise UsageError("config key 'dataset.path' must be a string")
    else:
        synthetic = _checked_section(dataset, "synthetic", _SYNTH_KEYS)
        for required in ("classes", "per_class", "dim", "stddev"):
            if required not in synthetic:
                raise UsageError(
                    f"config key 'dataset.synthetic.{required}' is required")

    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise UsageError("config field 'seed' must be an integer")
    seeds = doc.get("seeds", [])
    if not isinstance(seeds, list) or \
            not all(isinstance(s, int) and not isinstance(s, bool)
                    for s in seeds):
        raise UsageError("config field 'seeds' must be a list of integers")
    output_dir = doc.get("output_dir", "runs")
    if not isinstance(output_dir, str):
        raise UsageError("config field 'output_dir' must be a string")

    cfg = ExperimentConfig(
        dataset_path=path, synthetic=synthetic,
        model=_checked_section(doc, "model", _MODEL_KEYS),
        al=_checked_section(doc, "al", _AL_KEYS),
        tcal=_checked_section(doc, "tcal", _TCAL_KEYS),
        seed=seed, seeds=seeds, output_dir=output_dir)
    # fail fast on bad values, not at run time
    _ = build_al_config(cfg, cfg.al.get("strategy", "anneal"), cfg.seed)
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config is not valid JSON: {exc}") from None
    return parse_config(doc)


def build_dataset(cfg: ExperimentConfig, seed: int) -> datamod.Dataset:
    if cfg.dataset_path is not None:
        return datamod.load_dataset(cfg.dataset_path, split_seed=seed)
    spec = dict(cfg.synthetic)
    spec.setdefault("seed", seed)
    return datamod.generate_synthetic(
        classes=spec["classes"], per_class=spec["per_class"], dim=spec["dim"],
        stddev=spec["stddev"], seed=spec["seed"])


def build_al_config(cfg: ExperimentConfig, strategy: str,
                    seed: int) -> engine.ALConfig:
    kwargs = dict(cfg.al)
    kwargs["strategy"] = strategy
    kwargs["seed"] = seed
    kwargs.setdefault("k", 40)
    try:
        return engine.ALConfig(**kwargs)
    except ValueError as exc:
        raise UsageError(f"config field 'al': {exc}") from None


def build_model_config(cfg: ExperimentConfig,
                       dataset: datamod.Dataset) -> modelmod.ModelConfig:
    try:
        return modelmod.ModelConfig(feature_dim=dataset.dim, **cfg.model)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"config field 'model': {exc}") from None


def build_tcal_config(cfg: ExperimentConfig, seed: int) -> tcal.TcalConfig:
    al = build_al_config(cfg, "anneal", seed)
    kwargs = dict(cfg.tcal)
    try:
        return tcal.TcalConfig(
            pair_bits_per_iteration=al.k, budget_bits=al.budget_bits,
            iterations_max=al.iterations_max, seed=seed,
            seed_fraction=al.seed_fraction, **kwargs)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"config field 'tcal': {exc}") from None


def write_manifest(out_dir: str, cfg: ExperimentConfig, strategy: str,
                   seed: int, dataset: datamod.Dataset) -> None:
    doc = {
        "version": __version__,
        "strategy": strategy,
        "seed": seed,
        "dataset_sha256": dataset.sha256(),
        "config": cfg.echo(),
        "results": "results.csv",
        "checkpoint": "checkpoint.npz",
    }
    with open(os.path.join(out_dir, "manifest.json"), "w",
              encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- subcommands --------------------------------------------------------------

def cmd_synth(args) -> int:
    dataset = datamod.generate_synthetic(
        classes=args.classes, per_class=args.per_class, dim=args.dim,
        stddev=args.stddev, seed=args.seed)
    datamod.save_dataset_csv(dataset, args.out)
    print(f"wrote {len(dataset.records)} records to {args.out}")
    return 0


def run_single(cfg: ExperimentConfig, strategy: str, seed: int,
               out_dir: str) -> list[evaluation.HistoryRow]:
    """One experiment cell: results CSV, checkpoint, manifest."""
    os.makedirs(out_dir, exist_ok=True)
    dataset = build_dataset(cfg, seed)
    results_path = os.path.join(out_dir, "results.csv")

    if strategy == "tcal":
        tc = build_tcal_config(cfg, seed)
        out = tcal.run_tcal_experiment(dataset, tc)
        history = out["history"]
        evaluation.export_curve(history, results_path, "tcal", seed)
        write_manifest(out_dir, cfg, strategy, seed, dataset)
        return history

    al = build_al_config(cfg, strategy, seed)
    mc = build_model_config(cfg, dataset)

    def flush(state):
        evaluation.export_curve(state.history, results_path, strategy, seed)

    try:
        state = engine.run_experiment(dataset, al, mc, on_iteration=flush)
    except Exception:
        raise
    modelmod.save_checkpoint(state.model,
                             os.path.join(out_dir, "checkpoint.npz"))
    write_manifest(out_dir, cfg, strategy, seed, dataset)
    return state.history


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.oracle == "human":
        raise UsageError(
            "the human oracle needs the annotation server; use "
            "'anneal serve --config ...' instead")
    strategy = args.strategy or cfg.al.get("strategy", "anneal")
    if strategy not in ALL_STRATEGIES:
        raise UsageError(f"unknown strategy {strategy!r}")
    seed = cfg.seed if args.seed is None else args.seed
    out_dir = args.out or os.path.join(cfg.output_dir,
                                       f"{strategy}-seed{seed}")
    history = run_single(cfg, strategy, seed, out_dir)
    final = history[-1]
    print(f"{strategy} seed {seed}: {len(history)} rows, "
          f"final mAP@5 {evaluation.format_float(final.map_at_5)} at "
          f"{evaluation.format_float(final.bits)} bits -> {out_dir}")
    return 0


def _compare_cell(payload: str) -> tuple[str, int, str, list | None]:
    """Process-pool worker for one (strategy, seed) cell."""
    doc = json.loads(payload)
    cfg = parse_config(doc["config"])
    strategy, seed, cell_dir = doc["strategy"], doc["seed"], doc["cell_dir"]
    try:
        history = run_single(cfg, strategy, seed, cell_dir)
        rows = [[r.iteration, r.bits, r.map_at_5] for r in history]
        return strategy, seed, "ok", rows
    except Exception as exc:  # reported per cell
        return strategy, seed, f"{type(exc).__name__}: {exc}", None


def cmd_compare(args) -> int:
    cfg = load_config(args.config)
    strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
    for s in strategies:
        if s not in ALL_STRATEGIES:
            raise UsageError(f"unknown strategy {s!r}")
    if args.seeds:
        try:
            seeds = [int(s) for s in args.seeds.split(",")]
        except ValueError:
            raise UsageError("--seeds must be a comma-separated integer list")
    else:
        seeds = cfg.seeds or [cfg.seed]
    out_dir = args.out or os.path.join(cfg.output_dir, "compare")
    os.makedirs(out_dir, exist_ok=True)

    payloads = []
    for strategy in strategies:
        for seed in seeds:
            cell_dir = os.path.join(out_dir, "cells",
                                    f"{strategy}-seed{seed}")
            payloads.append(json.dumps({
                "config": cfg.echo(), "strategy": strategy, "seed": seed,
                "cell_dir": cell_dir}))

    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            outcomes = list(pool.map(_compare_cell, payloads))
    else:
        outcomes = [_compare_cell(p) for p in payloads]

    by_cell = {(s, seed): (status, rows) for s, seed, status, rows in outcomes}
    failures = {f"{s}-seed{seed}": status
                for (s, seed), (status, _) in by_cell.items()
                if status != "ok"}

    combined = os.path.join(out_dir, "combined.csv")
    with open(combined, "w", encoding="utf-8", newline="\n") as fh:
        seed_cols = ",".join(f"map_seed_{s}" for s in seeds)
        fh.write(f"strategy,iteration,bits_mean,map_mean,{seed_cols}\n")
        for strategy in strategies:
            per_seed = [by_cell[(strategy, s)][1] for s in seeds]
            ok_rows = [r for r in per_seed if r is not None]
            if not ok_rows:
                continue
            n_iters = min(len(r) for r in ok_rows)
            for it in range(n_iters):
                bits = [r[it][1] for r in ok_rows]
                maps = [r[it][2] for r in ok_rows]
                cells = []
                for r in per_seed:
                    cells.append("" if r is None
                                 else evaluation.format_float(r[it][2]))
                fh.write(",".join([
                    strategy, str(it),
                    evaluation.format_float(sum(bits) / len(bits)),
                    evaluation.format_float(sum(maps) / len(maps)),
                ] + cells) + "\n")

    if failures:
        with open(os.path.join(out_dir, "failures.json"), "w",
                  encoding="utf-8") as fh:
            json.dump(failures, fh, indent=2, sort_keys=True)
        print(f"{len(failures)} cell(s) failed; see failures.json",
              file=sys.stderr)
        return 2
    print(f"wrote {combined} ({len(strategies)} strategies x "
          f"{len(seeds)} seeds)")
    return 0


def cmd_eval(args) -> int:
    model = modelmod.load_checkpoint(args.checkpoint)
    dataset = datamod.load_dataset(args.dataset, split_seed=args.split_seed)
    score = evaluation.map_at_k(model, dataset, k=args.k)
    print(f"mAP@{args.k} = {evaluation.format_float(score)}")
    return 0


def cmd_serve(args) -> int:
    cfg = load_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    strategy = args.strategy or cfg.al.get("strategy", "anneal")
    if strategy == "tcal":
        raise UsageError("serve annotates pairs; tcal uses class labels")
    al = build_al_config(cfg, strategy, seed)
    dataset = build_dataset(cfg, seed)
    mc = build_model_config(cfg, dataset)
    out_dir = args.out or os.path.join(cfg.output_dir,
                                       f"serve-{strategy}-seed{seed}")
    os.makedirs(out_dir, exist_ok=True)
    log_path = os.path.join(out_dir, "labels.csv")
    snapshot_path = os.path.join(out_dir, "snapshot.json")
    checkpoint_path = os.path.join(out_dir, "checkpoint.npz")
    results_path = os.path.join(out_dir, "results.csv")

    resume_state = None
    preloaded: dict[str, int] = {}
    if args.resume:
        if not os.path.exists(snapshot_path):
            raise UsageError(f"nothing to resume: {snapshot_path} missing")
        resume_state = service.load_snapshot(snapshot_path)
        if os.path.exists(log_path):
            for lp in service.LabelLog.replay(log_path):
                preloaded[service.pair_id_of(lp.pair)] = lp.label

    log = service.LabelLog(log_path)
    session = service.AnnotationSession(
        dataset, al, mc, log, timeout=args.timeout, preloaded=preloaded)

    def flush(state):
        evaluation.export_curve(state.history, results_path, strategy, seed)

    worker = threading.Thread(
        target=session.run, kwargs={"on_iteration": flush,
                                    "resume_state": resume_state},
        daemon=True, name="al-loop")

    ui_dir = args.ui_dir
    if ui_dir is None:
        bundled = os.path.join(os.path.dirname(os.path.abspath(__file__)),
                               "..", "..", "frontend", "dist")
        ui_dir = bundled if os.path.isdir(bundled) else None
    try:
        server = service.start_server(session, args.port,
                                      asset_root=args.assets, ui_dir=ui_dir)
    except OSError as exc:
        print(f"error: cannot bind port {args.port}: {exc}", file=sys.stderr)
        return 2
    worker.start()
    print(f"annotation session on http://127.0.0.1:{args.port}/ "
          f"(strategy {strategy}, seed {seed}); Ctrl-C to stop")
    announced = False
    try:
        while True:
            worker.join(timeout=0.5)
            if not worker.is_alive() and not announced:
                announced = True
                view = session.session_view()
                if view["phase"] == "failed":
                    print(f"experiment failed: {view['error']}",
                          file=sys.stderr)
                else:
                    # keep serving so the dashboard can show the final state
                    print("experiment complete; Ctrl-C to stop serving")
                if session.state is not None:
                    modelmod.save_checkpoint(session.state.model,
                                             checkpoint_path)
    except KeyboardInterrupt:
        print("\nshutting down: persisting label log and state snapshot")
        session.shutdown()
        worker.join(timeout=120)
        if session.state is not None:
            service.write_snapshot(snapshot_path, session.state, al,
                                   checkpoint_path)
            print(f"snapshot written to {snapshot_path}")
        view = session.session_view()
        return 2 if view["phase"] == "failed" else 0
    finally:
        server.shutdown()
        log.close()


# -- argument parsing ---------------------------------------------------------

def make_parser() -> _Parser:
    parser = _Parser(prog="anneal",
                     description="Annotation-cost-efficient active metric "
                                 "learning for content-based retrieval")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset CSV")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--per-class", type=int, required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--stddev", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("run", help="run one simulated experiment")
    p.add_argument("--config", required=True)
    p.add_argument("--strategy", choices=ALL_STRATEGIES)
    p.add_argument("--oracle", choices=("simulated", "human"),
                   default="simulated")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare",
                       help="run a strategy x seed grid and average curves")
    p.add_argument("--config", required=True)
    p.add_argument("--strategies", default="anneal,anneal-u,random")
    p.add_argument("--seeds")
    p.add_argument("--out")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--k", type=int, default=5)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("serve", help="host the human annotation session")
    p.add_argument("--config", required=True)
    p.add_argument("--port", type=int, default=8788)
    p.add_argument("--assets", help="directory with {image_id}.png/.jpg files")
    p.add_argument("--ui-dir", help="built frontend bundle to serve at /")
    p.add_argument("--strategy", choices=("anneal", "anneal-u", "random"))
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--timeout", type=float,
                   help="seconds to wait for labels before aborting "
                        "(default: wait forever)")
    p.add_argument("--resume", action="store_true",
                   help="continue from a snapshot in the output directory")
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except datamod.DatasetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # pragma: no cover - final safety net
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
