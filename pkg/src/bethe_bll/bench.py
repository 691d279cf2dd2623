"""Experiment plans, per-cell runs, aggregation tables and the two-moons grid.

A plan is a ``key = value`` file; ``dataset`` and ``method`` may repeat::

    out = results
    seeds = 5..24
    max_steps = 5000
    dataset = data/boston.spec
    dataset = synthetic:linear_gaussian n=2000 d=10 alpha=1 sigma=0.5
    method = bethe V3 eb
    method = bethe V1 cv depth=0
    method = bethe V3 eb fs
    method = bethe V2 eb head=ordinal
    method = map
    method = ensemble M=5

Method tokens: a kind (``bethe``, ``map``, ``ensemble``), then optionally a
variant (``V1``..``V3``), a regime (``eb``, ``cv``, ``fixed``), ``fs`` and
``key=value`` options (``depth``, ``head``, ``alpha``, ``M``, ``width``).
"""
from __future__ import annotations

import csv
import io
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import data as D
from . import metrics as M
from .trainer import TrainConfig, TrainingDiverged, _forward, deep_ensemble, evaluate, predict, train

log = logging.getLogger(__name__)

SCHEMA = "# bethe-bll results v1"
RESULT_COLUMNS = [
    "dataset", "method", "seed", "status", "nll", "rmse_or_acc", "calib_or_ece",
    "alpha_final", "sigma_obs_final", "oracle_test_nll", "best_step", "steps", "flags", "error",
]
DEFAULT_SEEDS = tuple(range(5, 25))
SYNTHETIC = {
    "linear_gaussian": (D.gen_linear_gaussian, dict(n=2000, d=10, alpha=1.0, sigma=0.5)),
    "linear_probit": (D.gen_linear_probit, dict(n=1000, d=5, alpha=1.0)),
    "two_moons": (D.gen_two_moons, dict(n=200, noise=0.15)),
}


class PlanError(ValueError):
    pass


# ---------------------------------------------------------------------------
# plan


@dataclass(frozen=True)
class MethodSpec:
    kind: str = "bethe"  # bethe | map | ensemble
    variant: str = "V3"
    regime: str = "eb"
    fs: bool = False
    depth: int = 1
    head: str | None = None
    alpha: float = 1.0
    members: int = 5
    width: int = 50

    @property
    def label(self) -> str:
        parts = [self.kind]
        if self.kind == "bethe":
            parts += [self.variant, self.regime]
            if self.regime == "fixed":
                parts.append(f"a{self.alpha:g}")
            if self.fs:
                parts.append("fs")
        if self.kind == "ensemble":
            parts.append(f"M{self.members}")
        if self.head:
            parts.append(self.head)
        parts.append(f"d{self.depth}")
        if self.width != 50:
            parts.append(f"w{self.width}")
        return "-".join(parts)

    @classmethod
    def parse(cls, text: str) -> "MethodSpec":
        toks = text.split()
        if not toks or toks[0] not in ("bethe", "map", "ensemble"):
            raise PlanError(f"method {text!r}: must start with bethe, map or ensemble")
        kw: dict = {"kind": toks[0]}
        for tok in toks[1:]:
            if tok in ("V1", "V2", "V3"):
                kw["variant"] = tok
            elif tok in ("eb", "cv", "fixed"):
                kw["regime"] = tok
            elif tok == "fs":
                kw["fs"] = True
            elif "=" in tok:
                k, v = tok.split("=", 1)
                try:
                    if k == "depth":
                        kw["depth"] = int(v)
                    elif k == "head":
                        kw["head"] = v
                    elif k == "alpha":
                        kw["alpha"] = float(v)
                        kw.setdefault("regime", "fixed")
                    elif k == "M":
                        kw["members"] = int(v)
                    elif k == "width":
                        kw["width"] = int(v)
                    else:
                        raise PlanError(f"method {text!r}: unknown option {k!r}")
                except ValueError as exc:
                    raise PlanError(f"method {text!r}: bad value for {k!r}") from exc
            else:
                raise PlanError(f"method {text!r}: unknown token {tok!r}")
        spec = cls(**kw)
        if spec.kind != "bethe" and (spec.fs or spec.regime != "eb"):
            raise PlanError(f"method {text!r}: regimes and fs apply to bethe methods only")
        if spec.depth not in (0, 1, 2):
            raise PlanError(f"method {text!r}: depth must be 0, 1 or 2")
        if spec.head not in (None, "regression", "binary", "ova", "ordinal"):
            raise PlanError(f"method {text!r}: unknown head {spec.head!r}")
        if spec.kind == "ensemble" and spec.members < 2:
            raise PlanError(f"method {text!r}: ensemble needs M >= 2")
        if spec.alpha <= 0:
            raise PlanError(f"method {text!r}: alpha must be positive")
        return spec


@dataclass
class Plan:
    datasets: list[str]
    methods: list[MethodSpec]
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    out: str = "results"
    max_steps: int = 5000
    base_dir: Path = field(default_factory=Path.cwd)


def parse_seeds(text: str) -> tuple[int, ...]:
    """``"5..24"`` (inclusive) or a comma list ``"5,6,9"``."""
    text = text.strip()
    try:
        if ".." in text:
            a, b = text.split("..", 1)
            seeds = tuple(range(int(a), int(b) + 1))
        else:
            seeds = tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError as exc:
        raise PlanError(f"bad seed list {text!r}") from exc
    if not seeds:
        raise PlanError("seed list is empty")
    return seeds


def parse_plan(text: str, base_dir=None) -> Plan:
    datasets, methods = [], []
    opts: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise PlanError(f"plan line {lineno}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        if k == "dataset":
            datasets.append(v)
        elif k == "method":
            methods.append(MethodSpec.parse(v))
        elif k in ("seeds", "out", "max_steps"):
            opts[k] = v
        else:
            raise PlanError(f"plan line {lineno}: unknown key {k!r}")
    if not datasets:
        raise PlanError("plan has no dataset lines")
    if not methods:
        raise PlanError("plan has no method lines")
    plan = Plan(datasets, methods, base_dir=Path(base_dir) if base_dir else Path.cwd())
    if "seeds" in opts:
        plan.seeds = parse_seeds(opts["seeds"])
    if "out" in opts:
        plan.out = opts["out"]
    if "max_steps" in opts:
        try:
            plan.max_steps = int(opts["max_steps"])
        except ValueError as exc:
            raise PlanError("max_steps must be an integer") from exc
        if plan.max_steps < 1:
            raise PlanError("max_steps must be positive")
    return plan


def load_plan(path) -> Plan:
    path = Path(path)
    return parse_plan(path.read_text(), base_dir=path.parent)


# ---------------------------------------------------------------------------
# datasets


def _parse_synthetic(entry: str) -> tuple[str, dict]:
    head, *rest = entry.split()
    name = head.split(":", 1)[1]
    if name not in SYNTHETIC:
        raise PlanError(f"unknown synthetic dataset {name!r}")
    params = dict(SYNTHETIC[name][1])
    for tok in rest:
        if "=" not in tok:
            raise PlanError(f"dataset {entry!r}: expected key=value, got {tok!r}")
        k, v = tok.split("=", 1)
        if k not in params:
            raise PlanError(f"dataset {entry!r}: unknown parameter {k!r}")
        params[k] = type(params[k])(float(v)) if isinstance(params[k], int) else float(v)
    return name, params


def dataset_name(entry: str) -> str:
    if entry.startswith("synthetic:"):
        name, params = _parse_synthetic(entry)
        return name + "".join(f"_{k}{v:g}" for k, v in params.items())
    return Path(entry).stem


def load_dataset(entry: str, seed: int, base_dir: Path | None = None) -> D.Dataset:
    """Load a spec file or generate a synthetic set (regenerated per seed)."""
    if entry.startswith("synthetic:"):
        name, p = _parse_synthetic(entry)
        if name == "linear_gaussian":
            ds = D.gen_linear_gaussian(p["n"], p["d"], p["alpha"], p["sigma"], seed=seed)
        elif name == "linear_probit":
            ds = D.gen_linear_probit(p["n"], p["d"], p["alpha"], seed=seed)
        else:
            ds = D.gen_two_moons(p["n"], p["noise"], seed=seed)
        ds.name = dataset_name(entry)
        return ds
    path = Path(entry)
    if not path.is_absolute() and base_dir is not None:
        path = base_dir / path
    ds = D.load_spec(path)
    ds.name = path.stem
    return ds


def _task_for(method: MethodSpec, ds: D.Dataset) -> str:
    if ds.task == "regression":
        if method.head not in (None, "regression"):
            raise PlanError(f"{method.label}: head {method.head!r} does not fit regression data {ds.name!r}")
        return "regression"
    if method.head == "regression":
        raise PlanError(f"{method.label}: regression head on classification data {ds.name!r}")
    if method.fs:
        raise PlanError(f"{method.label}: fs only applies to regression data")
    k = ds.n_classes
    head = method.head or ("binary" if k == 2 else "ova")
    if head == "binary" and k != 2:
        raise PlanError(f"{method.label}: binary head on {k}-class data {ds.name!r}")
    return head


def validate_plan(plan: Plan) -> dict[str, D.Dataset]:
    """Check every (dataset, method) pairing before anything runs."""
    probes = {}
    for entry in plan.datasets:
        try:
            ds = load_dataset(entry, plan.seeds[0], plan.base_dir)
        except (OSError, ValueError) as exc:
            raise PlanError(f"dataset {entry!r}: {exc}") from exc
        for m in plan.methods:
            _task_for(m, ds)
        probes[entry] = ds
    return probes


# ---------------------------------------------------------------------------
# one cell


@dataclass
class RunRecord:
    dataset: str
    method: str
    seed: int
    status: str = "ok"
    nll: float = math.nan
    rmse_or_acc: float = math.nan
    calib_or_ece: float = math.nan
    alpha_final: float = math.nan
    sigma_obs_final: float = math.nan
    oracle_test_nll: float = math.nan
    best_step: int = -1
    steps: int = 0
    flags: str = ""
    error: str = ""
    wall_time: float = 0.0

    def row(self) -> list[str]:
        out = []
        for c in RESULT_COLUMNS:
            v = getattr(self, c)
            out.append(_fmt(v) if isinstance(v, float) else str(v))
        return out


def _fmt(x: float) -> str:
    return "" if math.isnan(x) else repr(float(x))


def config_for(method: MethodSpec, task: str, seed: int, max_steps: int) -> TrainConfig:
    return TrainConfig(
        task=task, variant=method.variant if method.kind == "bethe" else "V1",
        method="bethe" if method.kind == "bethe" else "map", depth=method.depth, width=method.width,
        regime=method.regime if method.kind == "bethe" else "fixed", alpha=method.alpha, fs=method.fs,
        seed=seed, max_steps=max_steps,
    )


def run_cell(entry: str, method: MethodSpec, seed: int, max_steps: int = 5000, base_dir=None, traj_dir=None) -> RunRecord:
    """Train and evaluate one (dataset, method, seed) cell; failures become a marked record."""
    t0 = time.perf_counter()
    ds_name = dataset_name(entry) if entry.startswith("synthetic:") else Path(entry).stem
    rec = RunRecord(ds_name, method.label, seed)
    try:
        ds = load_dataset(entry, seed, base_dir)
        sp = D.make_splits(ds, seed)
        task = _task_for(method, ds)
        cfg = config_for(method, task, seed, max_steps)
        if method.kind == "ensemble":
            ens = deep_ensemble(cfg, sp, method.members)
            pred = ens.predict(sp.X_test)
            results = ens.results
            rec.oracle_test_nll = float("nan")
        else:
            res = train(cfg, sp)
            pred = predict(res.model, sp.X_test)
            results = [res]
            rec.oracle_test_nll = res.oracle_test_nll
            if method.kind == "bethe":
                rec.alpha_final = float(np.exp(np.mean(np.log(res.model.alphas()))))
            if task == "regression":
                rec.sigma_obs_final = res.model.sigma_obs_sq
            rec.best_step = res.best_step
        rec.steps = sum(len(r.trajectory) for r in results)
        ev = evaluate(pred, sp.y_test)
        rec.nll = ev["nll"]
        rec.rmse_or_acc = ev.get("rmse", ev.get("acc"))
        rec.calib_or_ece = ev.get("calib_err", ev.get("ece"))
        flags = sorted({k for r in results for k, v in r.flags.items() if v is True})
        rec.flags = ";".join(flags)
        if traj_dir is not None:
            for i, r in enumerate(results):
                suffix = f"_m{i}" if len(results) > 1 else ""
                r.write_trajectory(Path(traj_dir) / f"{rec.dataset}__{rec.method}__s{seed}{suffix}.csv")
    except (TrainingDiverged, PlanError, ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        rec.status = "failed"
        rec.error = f"{type(exc).__name__}: {exc}".replace("\n", " ")[:200]
        log.warning("cell %s/%s/seed %d failed: %s", rec.dataset, rec.method, seed, rec.error)
    rec.wall_time = time.perf_counter() - t0
    return rec


def _run_cell_star(args):
    return run_cell(*args)


# ---------------------------------------------------------------------------
# commands


def records_csv(records: list[RunRecord]) -> str:
    buf = io.StringIO()
    buf.write(SCHEMA + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_COLUMNS)
    for r in records:
        w.writerow(r.row())
    return buf.getvalue()


def cmd_run(plan: Plan, out_dir=None, jobs: int = 1, methods=None) -> list[RunRecord]:
    """Run every (dataset, method, seed) cell and write results.csv.

    Rows come out in plan order regardless of ``jobs``.  Wall times go to a
    separate timings.csv so results.csv is reproducible byte for byte.
    """
    validate_plan(plan)
    out = Path(out_dir or plan.out)
    traj = out / "trajectories"
    traj.mkdir(parents=True, exist_ok=True)
    methods = plan.methods if methods is None else methods
    cells = [
        (entry, m, s, plan.max_steps, plan.base_dir, traj)
        for entry in plan.datasets for m in methods for s in plan.seeds
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            records = list(ex.map(_run_cell_star, cells))
    else:
        records = [_run_cell_star(c) for c in cells]
    (out / "results.csv").write_text(records_csv(records))
    with open(out / "timings.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dataset", "method", "seed", "wall_time"])
        for r in records:
            w.writerow([r.dataset, r.method, r.seed, f"{r.wall_time:.3f}"])
    return records


def read_records(path) -> list[dict]:
    """Read a results CSV; comment lines are skipped and unknown columns kept."""
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def _num(x) -> float:
    try:
        return float(x) if x not in ("", None) else math.nan
    except ValueError:
        return math.nan


@dataclass
class Cell:
    dataset: str
    method: str
    seeds: list[int]
    nll: np.ndarray
    mark: str = ""  # "best", "tied" or ""
    p_value: float = math.nan

    @property
    def mean(self) -> float:
        return float(np.mean(self.nll)) if self.nll.size else math.nan

    @property
    def se(self) -> float:
        return float(np.std(self.nll, ddof=1) / np.sqrt(self.nll.size)) if self.nll.size > 1 else math.nan


def aggregate(records: list[dict], metric: str = "nll") -> tuple[list[str], list[str], dict]:
    """Per (dataset, method) test-metric vectors with best / tied marks (lower is better)."""
    datasets = list(dict.fromkeys(r["dataset"] for r in records))
    methods = list(dict.fromkeys(r["method"] for r in records))
    cells: dict[tuple[str, str], Cell] = {}
    for ds in datasets:
        for m in methods:
            rows = [r for r in records if r["dataset"] == ds and r["method"] == m
                    and r.get("status", "ok") == "ok" and np.isfinite(_num(r.get(metric)))]
            if not rows:
                continue
            rows.sort(key=lambda r: int(r["seed"]))
            cells[ds, m] = Cell(ds, m, [int(r["seed"]) for r in rows], np.array([_num(r[metric]) for r in rows]))
        present = [cells[ds, m] for m in methods if (ds, m) in cells]
        if not present:
            continue
        best = min(present, key=lambda c: c.mean)
        best.mark = "best"
        for c in present:
            if c is best:
                continue
            common = sorted(set(c.seeds) & set(best.seeds))
            if len(common) < 2:
                continue
            a = np.array([c.nll[c.seeds.index(s)] for s in common])
            b = np.array([best.nll[best.seeds.index(s)] for s in common])
            c.p_value = M.paired_t_test(a, b, alternative="greater")
            if c.p_value >= 0.05:
                c.mark = "tied"
    return datasets, methods, cells


def cmd_report(records_path, out_dir=None, metric: str = "nll") -> str:
    """Markdown table of mean test metric: best in bold, p >= 0.05 peers in italics."""
    records = read_records(records_path)
    datasets, methods, cells = aggregate(records, metric)
    lines = [
        f"Mean test {metric} (+/- s.e.) over seeds. **bold**: best; *italic*: not significantly worse "
        "than the best (one-sided paired t-test, p >= 0.05).", "",
        "| dataset | " + " | ".join(methods) + " |",
        "|---|" + "---|" * len(methods),
    ]
    rows = []
    for ds in datasets:
        out = []
        for m in methods:
            c = cells.get((ds, m))
            if c is None:
                log.warning("report: no finished runs for %s / %s", ds, m)
                out.append("")
                rows.append([ds, m, 0, "", "", "", ""])
                continue
            txt = f"{c.mean:.3f}" + (f" +/- {c.se:.3f}" if np.isfinite(c.se) else "")
            if c.mark == "best":
                txt = f"**{txt}**"
            elif c.mark == "tied":
                txt = f"*{txt}*"
            out.append(txt)
            rows.append([ds, m, c.nll.size, _fmt(c.mean), _fmt(c.se), c.mark, _fmt(c.p_value)])
        lines.append(f"| {ds} | " + " | ".join(out) + " |")
    md = "\n".join(lines) + "\n"
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.md").write_text(md)
        with open(out / "report.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["dataset", "method", "n", f"mean_{metric}", f"se_{metric}", "mark", "p_value"])
            w.writerows(rows)
    return md


@dataclass
class EbCvRow:
    dataset: str
    method: str
    n: int
    mean_diff: float
    p_value: float

    @property
    def significant(self) -> bool:
        return self.p_value < 0.05


def eb_vs_cv_table(records: list[dict]) -> list[EbCvRow]:
    """Pair EB and CV rows per (dataset, method stem, seed); mean of NLL_CV - NLL_EB.

    The one-sided test points in the direction of the observed mean difference.
    """
    by = {}
    for r in records:
        if r.get("status", "ok") != "ok":
            continue
        toks = r["method"].split("-")
        if len(toks) < 3 or toks[0] != "bethe" or toks[2] not in ("eb", "cv"):
            continue
        stem = "-".join(toks[:2] + toks[3:])
        by.setdefault((r["dataset"], stem), {}).setdefault(toks[2], {})[int(r["seed"])] = _num(r["nll"])
    rows = []
    for (ds, stem), d in by.items():
        seeds = sorted(set(d.get("eb", {})) & set(d.get("cv", {})))
        if not seeds:
            continue
        cv = np.array([d["cv"][s] for s in seeds])
        eb = np.array([d["eb"][s] for s in seeds])
        diff = float(np.mean(cv - eb))
        p = M.paired_t_test(cv, eb, "greater" if diff >= 0 else "less") if len(seeds) > 1 else math.nan
        rows.append(EbCvRow(ds, stem, len(seeds), diff, p))
    return rows


def cmd_eb_vs_cv(plan: Plan, out_dir=None, jobs: int = 1) -> list[EbCvRow]:
    """Run every bethe method of the plan under both EB and CV, then tabulate the difference."""
    stems = []
    for m in plan.methods:
        if m.kind != "bethe":
            continue
        for regime in ("eb", "cv"):
            mm = replace(m, regime=regime)
            if mm not in stems:
                stems.append(mm)
    if not stems:
        raise PlanError("eb-vs-cv needs at least one bethe method")
    out = Path(out_dir or plan.out)
    records = cmd_run(plan, out, jobs, methods=stems)
    rows = eb_vs_cv_table([dict(zip(RESULT_COLUMNS, r.row())) for r in records])
    lines = [
        "Mean test NLL difference CV - EB over paired seeds (positive: EB better). One-sided paired "
        "t-test against the observed sign; * marks p < 0.05.", "",
        "| dataset | method | seeds | NLL_CV - NLL_EB | p |", "|---|---|---|---|---|",
    ]
    for r in rows:
        star = "*" if r.significant else ""
        lines.append(f"| {r.dataset} | {r.method} | {r.n} | {r.mean_diff:+.4f}{star} | {r.p_value:.3f} |")
    (out / "eb_vs_cv.md").write_text("\n".join(lines) + "\n")
    with open(out / "eb_vs_cv.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dataset", "method", "n", "mean_diff_cv_minus_eb", "p_value"])
        for r in rows:
            w.writerow([r.dataset, r.method, r.n, repr(r.mean_diff), _fmt(r.p_value)])
    return rows


# ---------------------------------------------------------------------------
# two moons


@dataclass
class MoonsGrid:
    lattice: np.ndarray  # (R*R, 2) raw coordinates
    p_map: np.ndarray  # P(y = 1)
    p_bethe: np.ndarray
    v_bethe: np.ndarray
    X_train: np.ndarray
    v_train: np.ndarray  # Bethe forward variance at the training points


def two_moons_grid(resolution: int = 100, seed: int = 0, n: int = 200, noise: float = 0.15, max_steps: int = 5000) -> MoonsGrid:
    """Train MAP and Bethe V3 binary models on two moons and evaluate them on a lattice over [-2.5, 3.5]^2."""
    if resolution < 2:
        raise ValueError("resolution must be at least 2")
    ds = D.gen_two_moons(n, noise, seed)
    idx = D.split(n, seed)
    sp = D.preprocess(ds, idx)
    bethe = train(TrainConfig(task="binary", variant="V3", seed=seed, max_steps=max_steps), sp).model
    mapm = train(TrainConfig(task="binary", method="map", seed=seed, max_steps=max_steps), sp).model
    g = np.linspace(-2.5, 3.5, resolution)
    xx, yy = np.meshgrid(g, g)
    lat = np.column_stack([xx.ravel(), yy.ravel()])
    Z = sp.transform(lat)
    _, vb = _forward(bethe, Z)
    _, vt = _forward(bethe, sp.X_train)
    return MoonsGrid(
        lat, predict(mapm, Z).probs[:, 1], predict(bethe, Z).probs[:, 1], vb[0], ds.X[idx[0]], vt[0],
    )


def cmd_two_moons(out_path, resolution: int = 100, seed: int = 0) -> MoonsGrid:
    grid = two_moons_grid(resolution, seed)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x1", "x2", "p_map", "p_bethe", "v_bethe"])
        for (x1, x2), pm, pb, vb in zip(grid.lattice, grid.p_map, grid.p_bethe, grid.v_bethe):
            w.writerow([repr(float(x1)), repr(float(x2)), repr(float(pm)), repr(float(pb)), repr(float(vb))])
    return grid
