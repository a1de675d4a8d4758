"""Command-line entry points tying the pipeline together.

Subcommands: gen-scenarios, build-features, train, evaluate, simulate,
ablate.  Each reads one flat key=value config file (see config.py for the
syntax), writes into --out, and is deterministic given fixed seeds.  All
file writes go through a temp-file-then-rename so interrupted runs never
leave half-written artifacts.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
import tempfile
import time

import numpy as np

from . import config as cfgmod
from .features import FEATURE_NAMES
from .planners import PlannerKind, make_planner
from .scenarios import (SCRIPTS, generate_synthetic_scenarios, load_scenarios,
                        save_scenarios)
from .scorer import ScorerConfig, load_params, save_params
from .simulate import (aggregate, compute_metrics, run_closed_loop,
                       tag_scenario, write_summary_csv)
from .training import (AUG_STD_HIGH, AUG_STD_LOW, TrainConfig,
                       balance_dataset, build_sample, train)


class StageError(Exception):
    """Raised with the name of the pipeline stage that failed."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


@contextlib.contextmanager
def _stage(name: str):
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


def _atomic_write(path, writer, mode="w"):
    """Call writer(file) on a temp file, then rename it into place."""
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, mode) as fh:
            writer(fh)
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(OSError):
            os.unlink(tmp)
        raise


def _atomic_write_path(path, writer):
    """Like _atomic_write but for writers that need a path, not a handle."""
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    os.close(fd)
    try:
        writer(tmp)
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(OSError):
            os.unlink(tmp)
        raise

def _load_cfg(args) -> dict:
    if getattr(args, "_cfg", None) is not None:  # ablation passes it in-memory
        return args._cfg
    if getattr(args, "config", None):
        return cfgmod.load_config(args.config)
    return cfgmod.apply_env_overrides({})


def _seed(args, cfg) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    return cfgmod.get(cfg, "seed", 0, int)


def _out_dir(args) -> str:
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _scenario_path(args, cfg) -> str:
    return cfgmod.get(cfg, "scenarios.path",
                      os.path.join(args.out, "scenarios.jsonl"), str)


def _mix_from_cfg(cfg) -> dict | None:
    mix = {s: cfg[f"mix.{s}"] for s in SCRIPTS if f"mix.{s}" in cfg}
    return mix or None


def _scorer_config(cfg) -> ScorerConfig:
    return ScorerConfig(
        hidden_size=cfgmod.get(cfg, "scorer.hidden_size", 20, int),
        model_dim=cfgmod.get(cfg, "scorer.model_dim", 120, int),
        ff_hidden=cfgmod.get(cfg, "scorer.ff_hidden", 64, int),
        head_hidden=cfgmod.get(cfg, "scorer.head_hidden", 64, int),
        n_heads=cfgmod.get(cfg, "scorer.n_heads", 2, int))


def _drop_features(cfg) -> tuple:
    drop = cfgmod.get(cfg, "drop_features", ())
    if isinstance(drop, str):
        drop = (drop,)
    bad = set(drop) - set(FEATURE_NAMES)
    if bad:
        raise cfgmod.ConfigError(f"drop_features: unknown feature(s) {sorted(bad)}")
    return tuple(drop)


def _train_config(cfg, seed: int) -> TrainConfig:
    noise = cfgmod.get(cfg, "train.noise", "low", str)
    if noise not in ("low", "high"):
        raise cfgmod.ConfigError("train.noise must be 'low' or 'high'")
    return TrainConfig(
        batch_size=cfgmod.get(cfg, "train.batch_size", 64, int),
        lr_init=cfgmod.get(cfg, "train.lr_init", 1e-3, float),
        lr_min=cfgmod.get(cfg, "train.lr_min", 1e-4, float),
        restart_period=cfgmod.get(cfg, "train.restart_period", 7, int),
        epochs=cfgmod.get(cfg, "train.epochs", 20, int),
        gamma=cfgmod.get(cfg, "train.gamma", 2.0, float),
        aug_std=AUG_STD_HIGH if noise == "high" else AUG_STD_LOW,
        seed=seed,
        scorer=_scorer_config(cfg),
        drop_features=_drop_features(cfg))


# --- subcommands -------------------------------------------------------


def cmd_gen_scenarios(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args)
    seed = _seed(args, cfg)
    n = cfgmod.get(cfg, "scenarios.count", 200, int)
    with _stage("scenario generation"):
        records = generate_synthetic_scenarios(n, seed, mix=_mix_from_cfg(cfg))
    with _stage("scenario write"):
        _atomic_write_path(os.path.join(out, "scenarios.jsonl"),
                           lambda p: save_scenarios(p, records))
    print(f"wrote {len(records)} scenarios to {out}/scenarios.jsonl")
    return 0


def _build_samples(records, drop=()):
    samples = []
    for rec in records:
        samples.append(build_sample(rec.initial_scene(), rec.expert,
                                    tags=tag_scenario(rec), drop_features=drop))
    return samples


def cmd_build_features(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args)
    with _stage("scenario read"):
        records = load_scenarios(_scenario_path(args, cfg))
    with _stage("feature pipeline"):
        samples = _build_samples(records, _drop_features(cfg))
    arrays = {}
    for i, (rec, sample) in enumerate(zip(records, samples)):
        for name in FEATURE_NAMES:
            arrays[f"{i}.{name}"] = np.stack(
                [getattr(b, name) for b in sample.bundles])
        arrays[f"{i}.demo_index"] = np.array(sample.demo_index)
        arrays[f"{i}.scenario_id"] = np.array(rec.scenario_id)
    with _stage("feature write"):
        def write(fh):
            np.savez(fh, **arrays)
        _atomic_write(os.path.join(out, "features.bin"), write, mode="wb")
    print(f"wrote features for {len(samples)} scenarios to {out}/features.bin")
    return 0


def load_features(path) -> list[dict]:
    """Read features.bin back into per-scenario dicts of arrays."""
    out = []
    with np.load(path) as z:
        n = 1 + max(int(k.split(".", 1)[0]) for k in z.files)
        for i in range(n):
            entry = {name: z[f"{i}.{name}"] for name in FEATURE_NAMES}
            entry["demo_index"] = int(z[f"{i}.demo_index"])
            entry["scenario_id"] = str(z[f"{i}.scenario_id"])
            out.append(entry)
    return out


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args)
    seed = _seed(args, cfg)
    tcfg = _train_config(cfg, seed)
    with _stage("scenario read"):
        records = load_scenarios(_scenario_path(args, cfg))
    if len(records) < 2:
        raise StageError("train/val split", ValueError("need >= 2 scenarios"))
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(records))
    n_val = max(1, int(len(records) * cfgmod.get(cfg, "train.val_fraction", 0.2, float)))
    val_recs = [records[i] for i in perm[:n_val]]
    train_recs = [records[i] for i in perm[n_val:]]
    drop = _drop_features(cfg)
    with _stage("feature pipeline"):
        train_samples = _build_samples(train_recs, drop)
        val_samples = _build_samples(val_recs, drop)
    ratios = {k.split(".", 1)[1]: cfgmod.get(cfg, k, type_=float)
              for k in cfg if k.startswith("balance.")}
    items = list(zip(train_samples, (r.expert for r in train_recs)))
    if ratios:
        by_id = {id(s): e for s, e in items}
        balanced = balance_dataset(train_samples, ratios)
        items = [(s, by_id[id(s)]) for s in balanced]
    with _stage("training"):
        params, history = train(items, val_samples, tcfg,
                                log_path=os.path.join(out, "training_log.csv"))
    with _stage("params write"):
        _atomic_write_path(os.path.join(out, "params.dirl"),
                           lambda p: save_params(params, p))
    best = min(h.val_loss for h in history)
    print(f"trained {tcfg.epochs} epochs on {len(items)} samples; "
          f"best val loss {best:.6f}; wrote {out}/params.dirl")
    return 0


_EVAL_PLANNERS = ("expert_replay", "constant_speed", "idm",
                  "learned", "learned_plus_safety")


def _planner_list(args, cfg) -> tuple:
    if getattr(args, "planner", None):
        return (args.planner,)
    names = cfgmod.get(cfg, "evaluate.planners", _EVAL_PLANNERS)
    if isinstance(names, str):
        names = (names,)
    return tuple(PlannerKind(n).value for n in names)


def _load_params_if_needed(args, cfg, kinds):
    if not any(k in ("learned", "learned_plus_safety") for k in kinds):
        return None
    path = cfgmod.get(cfg, "params.path",
                      os.path.join(args.out, "params.dirl"), str)
    if os.path.exists(path):
        return load_params(path)
    raise FileNotFoundError(f"no trained parameters at {path}; run `train` "
                            f"first or set params.path")


def _eval_one(rec, kind, params, drop):
    planner = make_planner(kind, params=params, scenario=rec,
                           drop_features=drop)
    t0 = time.perf_counter()
    rollout = run_closed_loop(rec, planner)
    wall = time.perf_counter() - t0
    report = compute_metrics(rollout, rec)
    line = {
        "scenario_id": rec.scenario_id,
        "planner": kind,
        "x": [round(s.x, 6) for s in rollout.states],
        "y": [round(s.y, 6) for s in rollout.states],
        "theta": [round(s.theta, 6) for s in rollout.states],
        "v": [round(s.v, 6) for s in rollout.states],
        "metrics": report.as_row(),
        "tags": sorted(report.tags),
        "wall_time_s": round(wall, 4),
    }
    return report, line


def _run_evaluation(records, kinds, params, drop, workers: int):
    jobs = [(rec, kind) for kind in kinds for rec in records]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_eval_one, *zip(*((r, k, params, drop)
                                                      for r, k in jobs))))
    else:
        results = [_eval_one(rec, kind, params, drop) for rec, kind in jobs]
    reports = {k: [] for k in kinds}
    lines = []
    for (rec, kind), (report, line) in zip(jobs, results):
        reports[kind].append(report)
        lines.append(line)
    return reports, lines


def cmd_evaluate(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args)
    kinds = _planner_list(args, cfg)
    drop = _drop_features(cfg)
    with _stage("scenario read"):
        records = load_scenarios(_scenario_path(args, cfg))
    with _stage("params read"):
        params = _load_params_if_needed(args, cfg, kinds)
    with _stage("closed-loop evaluation"):
        reports, lines = _run_evaluation(records, kinds, params, drop,
                                         max(1, args.workers))
    with _stage("results write"):
        def write_rollouts(fh):
            for line in lines:
                fh.write(json.dumps(line) + "\n")
        _atomic_write(os.path.join(out, "rollouts.jsonl"), write_rollouts)
        summaries = {k: aggregate(reports[k]) for k in kinds}
        _atomic_write_path(os.path.join(out, "summary.csv"),
                           lambda p: write_summary_csv(p, summaries))
    for kind in kinds:
        s = summaries[kind]
        print(f"{kind}: safety {s['safety']:.3f} comfort {s['comfort']:.3f} "
              f"progress {s['progress']:.3f} l2 {s['l2_with_yaw']:.3f} "
              f"collision {s['collision']:.3f} tailgate {s['tailgate']:.3f} "
              f"(n={s['n']})")
    return 0


def cmd_simulate(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args)
    with _stage("scenario read"):
        records = load_scenarios(_scenario_path(args, cfg))
    if not 0 <= args.index < len(records):
        raise StageError("scenario lookup",
                         IndexError(f"index {args.index} out of range "
                                    f"(have {len(records)})"))
    rec = records[args.index]
    kind = args.planner or "learned_plus_safety"
    with _stage("params read"):
        params = _load_params_if_needed(args, cfg, (kind,))
    with _stage("closed-loop rollout"):
        report, line = _eval_one(rec, kind, params, _drop_features(cfg))
    with _stage("results write"):
        _atomic_write(os.path.join(out, "rollouts.jsonl"),
                      lambda fh: fh.write(json.dumps(line) + "\n"))
    print(json.dumps({"scenario_id": rec.scenario_id, "planner": kind,
                      "metrics": report.as_row(), "tags": sorted(report.tags)},
                     indent=2))
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args)
    variants = cfgmod.get(cfg, "ablate.variants", ())
    if isinstance(variants, str):
        variants = (variants,)
    if not variants:
        raise StageError("ablation setup",
                         ValueError("config needs ablate.variants = name, ..."))
    rows = []
    for name in variants:
        prefix = f"variant.{name}."
        overrides = {k[len(prefix):]: v for k, v in cfg.items()
                     if k.startswith(prefix)}
        vcfg = {k: v for k, v in cfg.items() if not k.startswith("variant.")}
        vcfg.update(overrides)
        vout = os.path.join(out, name)
        # reuse the train and evaluate code paths verbatim with the merged
        # config; each variant gets its own output directory
        sub = argparse.Namespace(config=None, out=vout, seed=args.seed,
                                 workers=args.workers, planner=None, _cfg=vcfg)
        with _stage(f"ablation variant '{name}'"):
            os.makedirs(vout, exist_ok=True)
            cmd_train(sub)
            cmd_evaluate(sub)
        with open(os.path.join(vout, "summary.csv")) as fh:
            for line in fh.read().splitlines()[1:]:
                rows.append(f"{name},{line}")
    with _stage("ablation summary write"):
        header = "variant,planner,safety,comfort,progress,l2_with_yaw,collision,tailgate,n"
        _atomic_write(os.path.join(out, "ablation_summary.csv"),
                      lambda fh: fh.write("\n".join([header, *rows]) + "\n"))
    print(f"wrote {out}/ablation_summary.csv ({len(rows)} rows)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="irlplan",
                                description="trajectory planning pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, planner=False, index=False):
        sp.add_argument("--config", help="flat key=value config file")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--workers", type=int, default=1)
        if planner:
            sp.add_argument("--planner",
                            choices=[k.value for k in PlannerKind])
        if index:
            sp.add_argument("--index", type=int, default=0,
                            help="scenario index within scenarios.jsonl")

    sp = sub.add_parser("gen-scenarios", help="write synthetic scenarios.jsonl")
    common(sp)
    sp.set_defaults(func=cmd_gen_scenarios)

    sp = sub.add_parser("build-features", help="run the feature pipeline")
    common(sp)
    sp.set_defaults(func=cmd_build_features)

    sp = sub.add_parser("train", help="fit scorer parameters")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="closed-loop metrics per planner")
    common(sp, planner=True)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("simulate", help="roll out one scenario")
    common(sp, planner=True, index=True)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("ablate", help="train/evaluate config variants")
    common(sp)
    sp.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except StageError as exc:
        print(f"irlplan {args.command}: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, cfgmod.ConfigError) as exc:
        print(f"irlplan {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
