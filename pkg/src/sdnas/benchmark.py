"""Brute-force ground truth over the enumerable micro search space.

Every genotype is trained to completion a few times; the resulting table is
the oracle against which search methods are ranked (rank 1 = best mean
accuracy) and their regret measured.
"""
from __future__ import annotations

import csv
import io
import json
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

from .bilevel import SearchConfig, run_search, train_discrete
from .datasets import Dataset, generate
from .diffcore import derive_seed
from .searchspace import CellTopology, Genotype, OP_ORDER, enumerate_genotypes, genotype_parse, genotype_serialize
from .sharpness import SharpnessConfig


@dataclass(frozen=True)
class SpaceConfig:
    num_intermediate: int = 2
    ops: tuple[str, ...] = OP_ORDER
    retain: object = "all"
    include_zero: bool = False
    num_cells: int = 4
    feature_dim: int = 16


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "moons"
    n: int = 2000
    noise: float = 0.2
    seed: int = 0
    classes: int | None = None

    def build(self) -> Dataset:
        return generate(self.kind, self.n, self.noise, self.seed, self.classes)


def space_fingerprint(
    space: SpaceConfig, data: DatasetConfig, train_epochs: int, eval_seeds: int, base_seed: int
) -> dict:
    return {
        "num_intermediate": space.num_intermediate,
        "ops": list(space.ops),
        "retain": space.retain,
        "include_zero": space.include_zero,
        "num_cells": space.num_cells,
        "feature_dim": space.feature_dim,
        "dataset_kind": data.kind,
        "dataset_n": data.n,
        "dataset_noise": data.noise,
        "dataset_seed": data.seed,
        "dataset_classes": data.classes,
        "train_epochs": train_epochs,
        "eval_seeds": eval_seeds,
        "base_seed": base_seed,
    }


@dataclass
class OracleTable:
    fingerprint: dict
    rows: dict[str, list[float]]  # genotype text -> per-seed accuracies

    def mean_accuracy(self, text: str) -> float:
        return statistics.fmean(self.rows[text])

    def best_accuracy(self) -> float:
        return max(self.mean_accuracy(t) for t in self.rows)

    def ranking(self) -> list[tuple[str, float]]:
        return sorted(
            ((t, statistics.fmean(accs)) for t, accs in self.rows.items()),
            key=lambda kv: -kv[1],
        )


def _space_from_fingerprint(fp: dict) -> tuple[SpaceConfig, DatasetConfig]:
    space = SpaceConfig(
        num_intermediate=fp["num_intermediate"],
        ops=tuple(fp["ops"]),
        retain=fp["retain"],
        include_zero=fp["include_zero"],
        num_cells=fp["num_cells"],
        feature_dim=fp["feature_dim"],
    )
    data = DatasetConfig(
        kind=fp["dataset_kind"],
        n=fp["dataset_n"],
        noise=fp["dataset_noise"],
        seed=fp["dataset_seed"],
        classes=fp["dataset_classes"],
    )
    return space, data


def _train_one(args) -> tuple[str, int, float]:
    text, seed_idx, fp = args
    space, data = _space_from_fingerprint(fp)
    ds = data.build()
    g = genotype_parse(text)
    seed = derive_seed(fp["base_seed"], "oracle", text, seed_idx)
    acc = train_discrete(
        g,
        ds,
        epochs=fp["train_epochs"],
        seed=seed,
        num_cells=space.num_cells,
        feature_dim=space.feature_dim,
    )
    if not 0.0 <= acc <= 1.0:
        raise RuntimeError(f"accuracy {acc} out of range for genotype:\n{text}")
    return text, seed_idx, acc


def build_oracle(
    space: SpaceConfig,
    data: DatasetConfig,
    train_epochs: int = 200,
    eval_seeds: int = 3,
    base_seed: int = 0,
    jobs: int = 1,
    cap: int = 4096,
    progress=None,
) -> OracleTable:
    """Train every genotype ``eval_seeds`` times; fully deterministic for a
    given fingerprint, regardless of worker count."""
    if eval_seeds < 1:
        raise ValueError("eval_seeds must be >= 1")
    topo = CellTopology.complete(space.num_intermediate)
    genotypes = enumerate_genotypes(
        topo, space.ops, retain=space.retain, include_zero=space.include_zero, cap=cap
    )
    fp = space_fingerprint(space, data, train_epochs, eval_seeds, base_seed)
    texts = [genotype_serialize(g) for g in genotypes]
    tasks = [(t, k, fp) for t in texts for k in range(eval_seeds)]
    results: dict[tuple[str, int], float] = {}
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for text, k, acc in pool.map(_train_one, tasks, chunksize=4):
                results[(text, k)] = acc
                if progress:
                    progress(len(results), len(tasks))
    else:
        for task in tasks:
            text, k, acc = _train_one(task)
            results[(text, k)] = acc
            if progress:
                progress(len(results), len(tasks))
    rows = {t: [results[(t, k)] for k in range(eval_seeds)] for t in texts}
    return OracleTable(fingerprint=fp, rows=rows)


def score(table: OracleTable, genotype: Genotype | str) -> tuple[int, float, float]:
    """(rank, regret, percentile) of a genotype; ties share the better rank."""
    text = genotype if isinstance(genotype, str) else genotype_serialize(genotype)
    if text not in table.rows:
        raise KeyError(f"genotype not present in the oracle table:\n{text}")
    mine = table.mean_accuracy(text)
    means = [table.mean_accuracy(t) for t in table.rows]
    rank = 1 + sum(1 for m in means if m > mine)
    regret = max(means) - mine
    return rank, regret, rank / len(means)


@dataclass(frozen=True)
class MethodSpec:
    name: str
    lam: float
    window: int
    metric: str = "KL"


@dataclass
class MethodReport:
    method: str
    seed: int
    genotype_text: str
    accuracy: float
    rank: int
    regret: float
    percentile: float
    lambda_max_final: float | None = None


def _search_one(args) -> tuple[str, int, str, float | None]:
    method, seed, base_cfg_kw, sharp_kw, fp = args
    _, data = _space_from_fingerprint(fp)
    ds = data.build()
    cfg = SearchConfig(**base_cfg_kw, seed=seed, lam=method.lam, window=method.window, metric=method.metric)
    sharp = SharpnessConfig(**sharp_kw) if sharp_kw is not None else None
    res = run_search(cfg, ds, sharp)
    lam_final = res.trace[-1].lambda_max if res.trace else None
    return method.name, seed, res.genotype_text, lam_final


def compare_methods(
    table: OracleTable,
    methods: list[MethodSpec],
    seeds: list[int],
    base_cfg: SearchConfig | None = None,
    sharp_cfg: SharpnessConfig | None = None,
    jobs: int = 1,
) -> list[MethodReport]:
    """Run each method on each seed against the table's dataset and score the
    found genotypes."""
    base_cfg = base_cfg or SearchConfig()
    base_kw = {
        k: v
        for k, v in vars(base_cfg).items()
        if k not in ("seed", "lam", "window", "metric")
    }
    sharp_kw = vars(sharp_cfg).copy() if sharp_cfg is not None else None
    tasks = [(m, s, base_kw, sharp_kw, table.fingerprint) for m in methods for s in seeds]
    raw: dict[tuple[str, int], tuple[str, float | None]] = {}
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for name, seed, text, lam_final in pool.map(_search_one, tasks):
                raw[(name, seed)] = (text, lam_final)
    else:
        for task in tasks:
            name, seed, text, lam_final = _search_one(task)
            raw[(name, seed)] = (text, lam_final)
    reports = []
    for m in methods:
        for s in seeds:
            text, lam_final = raw[(m.name, s)]
            rank, regret, pct = score(table, text)
            reports.append(
                MethodReport(
                    method=m.name,
                    seed=s,
                    genotype_text=text,
                    accuracy=table.mean_accuracy(text),
                    rank=rank,
                    regret=regret,
                    percentile=pct,
                    lambda_max_final=lam_final,
                )
            )
    return reports


def method_summary(reports: list[MethodReport]) -> dict[str, dict[str, float]]:
    out: dict[str, dict[str, float]] = {}
    for method in sorted({r.method for r in reports}):
        rs = [r for r in reports if r.method == method]
        out[method] = {
            "median_regret": statistics.median(r.regret for r in rs),
            "mean_regret": statistics.fmean(r.regret for r in rs),
            "median_rank": statistics.median(r.rank for r in rs),
            "median_percentile": statistics.median(r.percentile for r in rs),
        }
    return out


# ---------------------------------------------------------------------------
# table persistence: one JSON fingerprint line, then CSV rows
# ---------------------------------------------------------------------------


def save_table(table: OracleTable, path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    for text, accs in table.rows.items():
        for k, acc in enumerate(accs):
            writer.writerow([text, k, repr(acc)])
    with open(path, "w", newline="") as fh:
        fh.write(json.dumps(table.fingerprint, sort_keys=True) + "\n")
        fh.write(buf.getvalue())


def load_table(path, expect_fingerprint: dict | None = None) -> OracleTable:
    with open(path, newline="") as fh:
        header = fh.readline()
        try:
            fp = json.loads(header)
        except json.JSONDecodeError as e:
            raise ValueError(f"corrupt oracle table: bad fingerprint line ({e})") from None
        rows_raw = list(csv.reader(fh))
    if expect_fingerprint is not None and fp != expect_fingerprint:
        raise ValueError(
            "oracle table fingerprint does not match the requested space:\n"
            f"  file:      {json.dumps(fp, sort_keys=True)}\n"
            f"  requested: {json.dumps(expect_fingerprint, sort_keys=True)}"
        )
    space, _ = _space_from_fingerprint(fp)
    topo = CellTopology.complete(space.num_intermediate)
    expected = [
        genotype_serialize(g)
        for g in enumerate_genotypes(topo, space.ops, retain=space.retain, include_zero=space.include_zero)
    ]
    rows: dict[str, list[float]] = {t: [] for t in expected}
    for rec in rows_raw:
        if len(rec) != 3:
            raise ValueError(f"corrupt oracle table row: {rec!r}")
        text, _, acc = rec
        if text not in rows:
            raise ValueError(f"oracle table row for a genotype outside the space:\n{text}")
        rows[text].append(float(acc))
    for text, accs in rows.items():
        if len(accs) != fp["eval_seeds"]:
            raise ValueError(
                f"oracle table is missing rows for genotype ({len(accs)}/{fp['eval_seeds']} seeds):\n{text}"
            )
    return OracleTable(fingerprint=fp, rows=rows)
