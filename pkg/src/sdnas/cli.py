"""Command-line front end: config files, subcommands, plot-ready CSVs.

Configs are INI files whose keys default to the standard search
hyperparameters, so ``sdnas search`` runs with no config at all.  Every run
directory carries a manifest that regenerates it; with SDNAS_DETERMINISTIC=1
(the default) re-running a manifest reproduces the genotype and log files
byte for byte.
"""
from __future__ import annotations

import argparse
import configparser
import json
import os
import statistics
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import __version__, benchmark, bilevel
from .bilevel import ConfigError, SearchConfig, run_search, train_discrete, write_epoch_csv
from .benchmark import DatasetConfig, MethodSpec, SpaceConfig
from .searchspace import genotype_parse
from .sharpness import SharpnessConfig, read_trace_csv, write_trace_csv


@dataclass
class EvalConfig:
    discrete_epochs: int = 200
    eval_seeds: int = 3

    def validate(self):
        if self.discrete_epochs < 0:
            raise ConfigError("discrete_epochs must be >= 0")
        if self.eval_seeds < 1:
            raise ConfigError("eval_seeds must be >= 1")


@dataclass
class RunConfig:
    search: SearchConfig = field(default_factory=SearchConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    sharp: SharpnessConfig = field(default_factory=SharpnessConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    run_id: str = "run"

    def validate(self):
        self.search.validate()
        self.evaluation.validate()


# ---------------------------------------------------------------------------
# config (de)serialization
# ---------------------------------------------------------------------------

_BOOL = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


def _parse_retain(v: str):
    return "all" if v == "all" else int(v)


def _parse_classes(v: str):
    return None if v in ("", "none") else int(v)


# section -> key -> (parse, unparse, attr)
_SCHEMA = {
    "search": {
        "total_epochs": (int, str, "total_epochs"),
        "warmup_epochs": (int, str, "warmup_epochs"),
        "window": (int, str, "window"),
        "lambda": (float, repr, "lam"),
        "batch_size": (int, str, "batch_size"),
        "metric": (str, str, "metric"),
        "retain": (_parse_retain, str, "retain"),
        "seed": (int, str, "seed"),
        "teacher_capture": (str, str, "teacher_capture"),
        "teacher_mode": (str, str, "teacher_mode"),
        "warmup_freeze_alpha": (lambda v: _BOOL[v.lower()], lambda b: str(b).lower(), "warmup_freeze_alpha"),
        "valid_fraction": (float, repr, "valid_fraction"),
        "num_cells": (int, str, "num_cells"),
        "feature_dim": (int, str, "feature_dim"),
        "w_lr": (float, repr, "w_lr"),
        "w_momentum": (float, repr, "w_momentum"),
        "w_weight_decay": (float, repr, "w_weight_decay"),
        "alpha_lr": (float, repr, "alpha_lr"),
        "alpha_beta1": (float, repr, None),
        "alpha_beta2": (float, repr, None),
        "alpha_weight_decay": (float, repr, "alpha_weight_decay"),
        "alpha_eps": (float, repr, "alpha_eps"),
        "w_grad_clip": (float, repr, "w_grad_clip"),
    },
    "dataset": {
        "kind": (str, str, "kind"),
        "n": (int, str, "n"),
        "noise": (float, repr, "noise"),
        "seed": (int, str, "seed"),
        "classes": (_parse_classes, lambda c: "none" if c is None else str(c), "classes"),
    },
    "sharpness": {
        "rho": (float, repr, "rho"),
        "hvp_eps": (float, repr, "hvp_eps"),
        "power_max_steps": (int, str, "power_max_steps"),
        "power_tol": (float, repr, "power_tol"),
        "cadence": (int, str, "cadence"),
        "probe_size": (int, str, "probe_size"),
    },
    "evaluation": {
        "discrete_epochs": (int, str, "discrete_epochs"),
        "eval_seeds": (int, str, "eval_seeds"),
    },
    "output": {
        "run_id": (str, str, None),
    },
}


def config_to_dict(rc: RunConfig) -> dict:
    """Nested plain dict (section -> key -> string) mirroring the INI file."""
    objs = {
        "search": rc.search,
        "dataset": rc.dataset,
        "sharpness": rc.sharp,
        "evaluation": rc.evaluation,
    }
    out: dict[str, dict[str, str]] = {}
    for section, keys in _SCHEMA.items():
        out[section] = {}
        for key, (_, unparse, attr) in keys.items():
            if section == "output":
                out[section][key] = rc.run_id
            elif attr is None:
                b1, b2 = rc.search.alpha_betas
                out[section][key] = unparse(b1 if key == "alpha_beta1" else b2)
            else:
                out[section][key] = unparse(getattr(objs[section], attr))
    return out


def config_from_dict(data: dict) -> RunConfig:
    values: dict[str, dict] = {s: {} for s in _SCHEMA}
    for section, keys in data.items():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in keys.items():
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown config key {key!r} in section [{section}]")
            parse = _SCHEMA[section][key][0]
            try:
                values[section][key] = parse(str(raw))
            except (ValueError, KeyError):
                raise ConfigError(
                    f"bad value {raw!r} for {key!r} in section [{section}]"
                ) from None
    search_kw = {}
    betas = [0.5, 0.999]
    for key, val in values["search"].items():
        attr = _SCHEMA["search"][key][2]
        if attr is None:
            betas[0 if key == "alpha_beta1" else 1] = val
        else:
            search_kw[attr] = val
    if "alpha_beta1" in values["search"] or "alpha_beta2" in values["search"]:
        search_kw["alpha_betas"] = (betas[0], betas[1])
    ds_kw = {_SCHEMA["dataset"][k][2]: v for k, v in values["dataset"].items()}
    sharp_kw = {_SCHEMA["sharpness"][k][2]: v for k, v in values["sharpness"].items()}
    eval_kw = {_SCHEMA["evaluation"][k][2]: v for k, v in values["evaluation"].items()}
    run_id = values["output"].get("run_id", "run")
    try:
        rc = RunConfig(
            search=SearchConfig(**search_kw),
            dataset=DatasetConfig(**ds_kw),
            sharp=SharpnessConfig(**sharp_kw),
            evaluation=EvalConfig(**eval_kw),
            run_id=run_id,
        )
    except ValueError as e:
        raise ConfigError(str(e)) from None
    return rc


def config_to_ini(rc: RunConfig) -> str:
    lines = []
    for section, keys in config_to_dict(rc).items():
        lines.append(f"[{section}]")
        for key, val in keys.items():
            lines.append(f"{key} = {val}")
        lines.append("")
    return "\n".join(lines)


def load_config(path: str | None) -> RunConfig:
    """Read an INI config or a run manifest (JSON with a "config" object)."""
    if path is None:
        return RunConfig()
    text = Path(path).read_text()
    if text.lstrip().startswith("{"):
        payload = json.loads(text)
        data = payload.get("config", payload)
        rc = config_from_dict(data)
    else:
        cp = configparser.ConfigParser()
        cp.read_string(text)
        data = {s: dict(cp.items(s)) for s in cp.sections()}
        rc = config_from_dict(data)
    rc.validate()
    return rc


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------


def deterministic_mode() -> bool:
    return os.environ.get("SDNAS_DETERMINISTIC", "1") != "0"


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.parent / (path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def write_manifest(path: Path, rc: RunConfig, wall_time_s: float) -> None:
    payload = {
        "manifest_version": 1,
        "tool": "sdnas",
        "version": __version__,
        "run_id": rc.run_id,
        "seed": rc.search.seed,
        "wall_time_s": wall_time_s,
        "config": config_to_dict(rc),
    }
    _write_atomic(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def run_search_to_dir(rc: RunConfig, out_dir: Path) -> bilevel.SearchResult:
    out_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    ds = rc.dataset.build()
    result = run_search(rc.search, ds, rc.sharp)
    wall = time.perf_counter() - t0
    _write_atomic(out_dir / "genotype.txt", result.genotype_text)
    write_epoch_csv(result.logs, out_dir / "epochs.csv", zero_wall=deterministic_mode())
    write_trace_csv(result.trace, out_dir / "sharpness.csv")
    write_manifest(out_dir / "manifest.json", rc, wall)
    return result


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _cmd_search(args) -> int:
    rc = load_config(args.config)
    if args.seed is not None:
        rc.search = replace(rc.search, seed=args.seed)
    out_dir = Path(args.out) if args.out else Path("runs") / rc.run_id
    result = run_search_to_dir(rc, out_dir)
    print(f"search done: genotype -> {out_dir / 'genotype.txt'}")
    for line in result.genotype_text.rstrip().splitlines():
        print(f"  {line}")
    return 0


def _cmd_eval_genotype(args) -> int:
    rc = load_config(args.config)
    if args.seed is not None:
        rc.search = replace(rc.search, seed=args.seed)
    g = genotype_parse(Path(args.genotype).read_text())
    ds = rc.dataset.build()
    acc = train_discrete(
        g,
        ds,
        epochs=rc.evaluation.discrete_epochs,
        seed=rc.search.seed,
        batch_size=rc.search.batch_size,
        num_cells=rc.search.num_cells,
        feature_dim=rc.search.feature_dim,
        lr=rc.search.w_lr,
        momentum=rc.search.w_momentum,
        weight_decay=rc.search.w_weight_decay,
        valid_fraction=rc.search.valid_fraction,
    )
    print(f"accuracy {acc!r} ({rc.evaluation.discrete_epochs} epochs, seed {rc.search.seed})")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_atomic(out / "eval.json", json.dumps({"accuracy": acc, "seed": rc.search.seed}) + "\n")
    return 0


def _space_of(rc: RunConfig) -> SpaceConfig:
    return SpaceConfig(
        num_intermediate=2,
        retain=rc.search.retain,
        num_cells=rc.search.num_cells,
        feature_dim=rc.search.feature_dim,
    )


def _cmd_build_oracle(args) -> int:
    rc = load_config(args.config)
    out = Path(args.out or "oracle.csv")

    def progress(done, total):
        if done % 16 == 0 or done == total:
            print(f"  oracle: {done}/{total} trainings", file=sys.stderr)

    table = benchmark.build_oracle(
        _space_of(rc),
        rc.dataset,
        train_epochs=rc.evaluation.discrete_epochs,
        eval_seeds=rc.evaluation.eval_seeds,
        base_seed=rc.search.seed,
        jobs=args.jobs,
        progress=progress,
    )
    tmp = out.parent / (out.name + ".tmp")
    benchmark.save_table(table, tmp)
    os.replace(tmp, out)
    best = table.ranking()[0]
    print(f"oracle table with {len(table.rows)} genotypes -> {out}")
    print(f"best mean accuracy {best[1]!r}")
    return 0


def _cmd_compare(args) -> int:
    rc = load_config(args.config)
    table = benchmark.load_table(args.oracle)
    seeds = list(range(args.seeds))
    methods = [
        MethodSpec("darts", lam=0.0, window=rc.search.window),
        MethodSpec("sd-darts", lam=rc.search.lam, window=rc.search.window, metric=rc.search.metric),
    ]
    reports = benchmark.compare_methods(
        table, methods, seeds, base_cfg=rc.search, sharp_cfg=rc.sharp, jobs=args.jobs
    )
    out_dir = Path(args.out or "compare")
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = ["method,seed,accuracy,rank,regret,percentile,lambda_max_final"]
    for r in reports:
        lam_final = "" if r.lambda_max_final is None else repr(r.lambda_max_final)
        lines.append(
            f"{r.method},{r.seed},{r.accuracy!r},{r.rank},{r.regret!r},{r.percentile!r},{lam_final}"
        )
    _write_atomic(out_dir / "compare.csv", "\n".join(lines) + "\n")
    summary = benchmark.method_summary(reports)
    lines = ["method,median_regret,mean_regret,median_rank,median_percentile"]
    for method, stats_ in summary.items():
        lines.append(
            f"{method},{stats_['median_regret']!r},{stats_['mean_regret']!r},"
            f"{stats_['median_rank']!r},{stats_['median_percentile']!r}"
        )
    _write_atomic(out_dir / "compare_summary.csv", "\n".join(lines) + "\n")
    for method, stats_ in summary.items():
        print(
            f"{method}: median regret {stats_['median_regret']:.4f}, "
            f"median percentile {stats_['median_percentile']:.3f}"
        )
    return 0


_AXES = {"warmup": "warmup_epochs", "window": "window", "lambda": "lam"}


def _sweep_one(task):
    rc_dict, axis_attr, value, seed, table_path = task
    rc = config_from_dict(rc_dict)
    kw = {axis_attr: (int(value) if axis_attr != "lam" else float(value)), "seed": seed}
    cfg = replace(rc.search, **kw)
    cfg.validate()
    ds = rc.dataset.build()
    res = run_search(cfg, ds, rc.sharp)
    acc = train_discrete(
        res.genotype,
        ds,
        epochs=rc.evaluation.discrete_epochs,
        seed=seed,
        num_cells=cfg.num_cells,
        feature_dim=cfg.feature_dim,
    )
    rank = regret = None
    if table_path:
        table = benchmark.load_table(table_path)
        rank, regret, _ = benchmark.score(table, res.genotype_text)
    lam_final = res.trace[-1].lambda_max if res.trace else None
    return value, seed, acc, rank, regret, lam_final


def _cmd_sweep(args) -> int:
    rc = load_config(args.config)
    if args.axis not in _AXES:
        raise ConfigError(f"unknown sweep axis {args.axis!r}; expected one of {sorted(_AXES)}")
    values = [v for v in (s.strip() for s in args.values.split(",")) if v]
    if not values:
        raise ConfigError("sweep needs a non-empty value list")
    axis_attr = _AXES[args.axis]
    rc_dict = config_to_dict(rc)
    tasks = []
    failures = []
    for v in values:
        for seed in range(args.seeds):
            why = _point_invalid(rc, axis_attr, v)
            if why:
                failures.append((v, seed, why))
            else:
                tasks.append((rc_dict, axis_attr, v, seed, args.oracle))
    rows = []
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_sweep_one, tasks))
    else:
        for task in tasks:
            try:
                rows.append(_sweep_one(task))
            except (ConfigError, ValueError) as e:
                failures.append((task[2], task[3], str(e)))
    for value, seed, msg in failures:
        print(f"sweep point {args.axis}={value} seed={seed} skipped: {msg}", file=sys.stderr)
    out = Path(args.out or "sweep.csv")
    lines = ["axis_value,seed,accuracy,rank,regret,lambda_max_final"]
    for value, seed, acc, rank, regret, lam_final in rows:
        lines.append(
            f"{value},{seed},{acc!r},{'' if rank is None else rank},"
            f"{'' if regret is None else repr(regret)},"
            f"{'' if lam_final is None else repr(lam_final)}"
        )
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_atomic(out, "\n".join(lines) + "\n")
    print(f"sweep over {args.axis} ({len(rows)} runs) -> {out}")
    return 0


def _point_invalid(rc: RunConfig, axis_attr: str, value: str) -> str | None:
    """Reason the sweep point violates the config invariants, or None if OK."""
    try:
        kw = {axis_attr: (int(value) if axis_attr != "lam" else float(value))}
        replace(rc.search, **kw).validate()
        return None
    except (ConfigError, ValueError) as e:
        return str(e)


def _cmd_analyze(args) -> int:
    rows = []
    used = 0
    for d in args.runs:
        d = Path(d)
        manifest_path = d / "manifest.json"
        trace_path = d / "sharpness.csv"
        if not manifest_path.exists() or not trace_path.exists():
            print(f"skipping {d}: missing manifest.json or sharpness.csv", file=sys.stderr)
            continue
        manifest = json.loads(manifest_path.read_text())
        lam = float(manifest["config"]["search"]["lambda"])
        method = "sd-darts" if lam > 0 else "darts"
        seed = int(manifest["config"]["search"]["seed"])
        for s in read_trace_csv(trace_path):
            rows.append((method, seed, s.epoch, s.lambda_max, s.grad_norm))
        used += 1
    if used == 0:
        raise ConfigError("analyze needs at least one completed run directory")
    out_dir = Path(args.out or "analysis")
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = ["method,seed,epoch,lambda_max,grad_norm"]
    for method, seed, epoch, lam_max, gn in rows:
        lines.append(f"{method},{seed},{epoch},{lam_max!r},{gn!r}")
    _write_atomic(out_dir / "sharpness_long.csv", "\n".join(lines) + "\n")
    by_key: dict[tuple[str, int], list[tuple[float, float]]] = {}
    for method, _, epoch, lam_max, gn in rows:
        by_key.setdefault((method, epoch), []).append((lam_max, gn))
    lines = ["method,epoch,lambda_max_median,grad_norm_median"]
    for (method, epoch), vals in sorted(by_key.items()):
        lam_med = statistics.median(v[0] for v in vals)
        gn_med = statistics.median(v[1] for v in vals)
        lines.append(f"{method},{epoch},{lam_med!r},{gn_med!r}")
    _write_atomic(out_dir / "sharpness_medians.csv", "\n".join(lines) + "\n")
    print(f"analyzed {used} runs -> {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sdnas", description=__doc__)
    p.add_argument("--version", action="version", version=f"sdnas {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("search", help="run one architecture search")
    sp.add_argument("--config", help="INI config or manifest.json")
    sp.add_argument("--seed", type=int, help="override the search seed")
    sp.add_argument("--out", help="output directory (default runs/<run_id>)")
    sp.set_defaults(fn=_cmd_search)

    sp = sub.add_parser("eval-genotype", help="train one genotype from scratch")
    sp.add_argument("--genotype", required=True, help="genotype text file")
    sp.add_argument("--config", help="INI config or manifest.json")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out")
    sp.set_defaults(fn=_cmd_eval_genotype)

    sp = sub.add_parser("build-oracle", help="train every genotype in the space")
    sp.add_argument("--config")
    sp.add_argument("--out", help="table file (default oracle.csv)")
    sp.add_argument("--jobs", type=int, default=1)
    sp.set_defaults(fn=_cmd_build_oracle)

    sp = sub.add_parser("compare", help="score baseline vs self-distilled search")
    sp.add_argument("--config")
    sp.add_argument("--oracle", required=True)
    sp.add_argument("--seeds", type=int, default=10)
    sp.add_argument("--jobs", type=int, default=1)
    sp.add_argument("--out")
    sp.set_defaults(fn=_cmd_compare)

    sp = sub.add_parser("sweep", help="ablation sweep over one hyperparameter")
    sp.add_argument("--config")
    sp.add_argument("--axis", required=True, choices=sorted(_AXES))
    sp.add_argument("--values", required=True, help="comma-separated values")
    sp.add_argument("--seeds", type=int, default=3)
    sp.add_argument("--oracle")
    sp.add_argument("--jobs", type=int, default=1)
    sp.add_argument("--out")
    sp.set_defaults(fn=_cmd_sweep)

    sp = sub.add_parser("analyze", help="merge sharpness traces across runs")
    sp.add_argument("runs", nargs="+", help="run directories")
    sp.add_argument("--out")
    sp.set_defaults(fn=_cmd_analyze)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failure
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
