"""Seeded, parallel Monte Carlo replications of the K-stage estimators.

A run is a grid of cells ``(delta, n)`` for one design. Replication ``i`` of
every cell draws its sample with the seed ``replication_seed(base_seed, i)``,
so results never depend on scheduling or on the number of workers. Records are
written to a JSONL file in (cell, index) order by a single writer.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import multiprocessing as mp
import os
import platform
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .asymptotics import limit_inputs, w_av
from .dgp import (
    PRNG_NAME,
    CorrectSpec,
    alpha_star,
    cumulative_table,
    design_to_dict,
    draw_cells,
    make_rng,
    true_joint,
)
from .estimate import (
    InvalidReplication,
    analogues_from_counts,
    bus_first_step_from_counts,
    k_stage_estimate,
)
from .model import bus_model

MASK64 = (1 << 64) - 1
SEED_MIXER = "splitmix64(base_seed + golden_gamma * (index + 1))"
WORKERS_ENV = "DDCPI_WORKERS"
SUMMARY_COLUMNS = [
    "design", "delta", "estimator", "W", "K", "n", "coord",
    "scaled_bias", "scaled_sd", "scaled_mse", "mcse_bias", "S_valid", "S_flagged", "r",
]


class ExperimentError(RuntimeError):
    """Invalid experiment configuration or output directory state."""


def splitmix64(z):
    z = (z + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def replication_seed(base_seed, index):
    """64-bit seed of replication ``index``: the ``index + 1``-th output of a
    splitmix64 stream started at ``base_seed``."""
    return splitmix64((int(base_seed) + 0x9E3779B97F4A7C15 * int(index)) & MASK64)


# ---------------------------------------------------------------------------
# Configuration


@dataclass(frozen=True)
class EstimatorSpec:
    kind: str  # "ml" or "md"
    weight: str = "-"  # "identity" or "w_av" for MD

    @property
    def label(self):
        if self.kind == "ml":
            return "K-ML"
        return "K-MD(I)" if self.weight == "identity" else "K-MD(W_AV)"

    @property
    def csv_fields(self):
        if self.kind == "ml":
            return "K-ML", "-"
        return "K-MD", ("I" if self.weight == "identity" else "W_AV")


DEFAULT_ESTIMATORS = (
    EstimatorSpec("md", "identity"),
    EstimatorSpec("md", "w_av"),
    EstimatorSpec("ml"),
)


@dataclass
class ExperimentConfig:
    design: object
    deltas: tuple = (1 / 3, 1 / 2, 1.0)
    sample_sizes: tuple = (200, 500, 1000)
    K_values: tuple = (1, 2, 3, 10)
    estimators: tuple = DEFAULT_ESTIMATORS
    replications: int = 2000
    base_seed: int = 20240917
    extra_scalings: tuple = ()
    n_states: int = 20
    beta: float = 0.9999
    alpha_bound: float = 10.0
    mileage_origin: float = 1.0
    coord_names: tuple = ("replace_cost", "mileage_cost")
    name: str = "experiment"

    def __post_init__(self):
        if self.replications < 2:
            raise ExperimentError("need at least 2 replications")
        if not self.K_values or min(self.K_values) < 1:
            raise ExperimentError("K values must be positive")
        if not self.sample_sizes or min(self.sample_sizes) < 1:
            raise ExperimentError("sample sizes must be positive")
        if isinstance(self.design, CorrectSpec):
            self.deltas = (math.inf,)
        if not self.deltas or min(self.deltas) <= 0:
            raise ExperimentError("deltas must be positive")
        for est in self.estimators:
            if est.kind not in ("ml", "md") or (
                est.kind == "md" and est.weight not in ("identity", "w_av")
            ):
                raise ExperimentError(f"unsupported estimator {est}")
        if len(self.coord_names) != 2:
            raise ExperimentError("the bus model has two utility parameters")

    def model(self):
        return bus_model(self.n_states, self.beta, self.alpha_bound, self.mileage_origin)

    def cells(self):
        return [(d, n) for d in self.deltas for n in self.sample_sizes]

    def design_at(self, delta):
        if isinstance(self.design, CorrectSpec):
            return self.design
        return type(self.design)(**{**_fields(self.design), "delta": delta})

    def scalings(self, delta):
        base = min(0.5, delta)
        return [base] + [r for r in self.extra_scalings if r != base]

    def to_dict(self):
        return {
            "name": self.name,
            "design": design_to_dict(self.design),
            "deltas": [_num(d) for d in self.deltas],
            "sample_sizes": list(self.sample_sizes),
            "K_values": list(self.K_values),
            "estimators": [asdict(e) for e in self.estimators],
            "replications": self.replications,
            "base_seed": self.base_seed,
            "extra_scalings": list(self.extra_scalings),
            "n_states": self.n_states,
            "beta": self.beta,
            "alpha_bound": self.alpha_bound,
            "mileage_origin": self.mileage_origin,
            "coord_names": list(self.coord_names),
        }

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def _fields(design):
    return {k: v for k, v in design.__dict__.items() if k != "kind"}


def _num(x):
    return "inf" if math.isinf(x) else x


def fmt_delta(delta):
    if math.isinf(delta):
        return "inf"
    for num, den in ((1, 3), (1, 2), (2, 3), (1, 4), (3, 4)):
        if abs(delta - num / den) < 1e-9:
            return f"{num}/{den}"
    return repr(float(delta))


# ---------------------------------------------------------------------------
# Replications


@dataclass
class CellContext:
    """Everything a worker needs to run replications of one cell."""

    cell: int
    delta: float
    n: int
    cdf: np.ndarray


@dataclass
class RunContext:
    model: object
    cells: list
    estimators: tuple
    K_max: int
    K_values: tuple
    weights: dict = field(default_factory=dict)


def run_replication(ctx, cell, index, base_seed):
    """Estimate every configured estimator on one simulated sample."""
    model = ctx.model
    cc = ctx.cells[cell]
    seed = replication_seed(base_seed, index)
    counts = np.bincount(draw_cells(cc.cdf, cc.n, make_rng(seed)), minlength=cc.cdf.size)
    rec = {"cell": cell, "index": index, "seed": seed}
    analogues = analogues_from_counts(counts, model.n_states, model.n_actions)
    try:
        theta_f = bus_first_step_from_counts(counts, model.n_states, model.n_actions)
    except InvalidReplication as exc:
        rec.update(valid=False, reason=str(exc))
        return rec
    rec.update(
        valid=True,
        theta_f_hat=theta_f,
        empty_states=int(analogues.empty_states.sum()),
        empty_cells=int(analogues.empty_cells.sum()),
    )
    ml_start = None
    estimates = {}
    for est in ctx.estimators:
        if est.kind == "ml":
            tr = k_stage_estimate(model, analogues, ctx.K_max, "ml", theta_f=theta_f)
        else:
            if ml_start is None:
                ml_start = k_stage_estimate(model, analogues, 1, "ml", theta_f=theta_f).alpha_stages[0]
            tr = k_stage_estimate(
                model, analogues, ctx.K_max, "md", ctx.weights.get(est.weight),
                theta_f=theta_f, alpha_start=ml_start,
            )
        if est.kind == "ml":
            ml_start = tr.alpha_stages[0]
        estimates[est.label] = {
            "alpha": {str(K): tr.alpha_stages[K - 1].tolist() for K in ctx.K_values},
            "converged": {str(K): bool(tr.converged[:K].all()) for K in ctx.K_values},
            "at_bound": {str(K): bool(tr.at_bound[:K].any()) for K in ctx.K_values},
        }
    rec["estimates"] = estimates
    return rec


def _order_estimators(estimators):
    # ML first so its first stage can warm-start the MD stages
    return tuple(sorted(estimators, key=lambda e: e.kind != "ml"))


_WORKER_CTX = None


def _init_worker(ctx):
    global _WORKER_CTX
    _WORKER_CTX = ctx


def _run_chunk(task):
    cell, start, stop, base_seed = task
    return [run_replication(_WORKER_CTX, cell, i, base_seed) for i in range(start, stop)]


def build_context(config):
    model = config.model()
    cells = []
    for k, (delta, n) in enumerate(config.cells()):
        pi = true_joint(model, config.design_at(delta), n)
        cells.append(CellContext(k, delta, n, cumulative_table(pi)))
    weights = {"identity": None}
    if any(e.weight == "w_av" for e in config.estimators):
        # every design shares the same limit, so one weight serves all cells
        weights["w_av"] = w_av(limit_inputs(model, config.design_at(config.deltas[0]), with_bias=False))
    return RunContext(
        model=model,
        cells=cells,
        estimators=_order_estimators(config.estimators),
        K_max=max(config.K_values),
        K_values=tuple(sorted(config.K_values)),
        weights=weights,
    )


def default_workers():
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        raise ExperimentError(f"{WORKERS_ENV} must be an integer") from None


def iter_replications(config, ctx, workers=1, done=frozenset(), chunk=25):
    """Yield lists of records in (cell, index) order, skipping ``done`` keys."""
    tasks = []
    for cell in range(len(ctx.cells)):
        todo = [i for i in range(config.replications) if (cell, i) not in done]
        # contiguous runs of pending indices, split into chunks
        start = None
        for pos, i in enumerate(todo):
            if start is None:
                start, prev = i, i
            elif i != prev + 1 or i - start >= chunk:
                tasks.append((cell, start, prev + 1, config.base_seed))
                start = i
            prev = i
            if pos == len(todo) - 1:
                tasks.append((cell, start, prev + 1, config.base_seed))
    if workers <= 1:
        _init_worker(ctx)
        for task in tasks:
            yield _run_chunk(task)
        return
    methods = mp.get_all_start_methods()
    mpctx = mp.get_context("fork" if "fork" in methods else "spawn")
    with mpctx.Pool(workers, initializer=_init_worker, initargs=(ctx,)) as pool:
        yield from pool.imap(_run_chunk, tasks)


# ---------------------------------------------------------------------------
# Summaries


@dataclass
class SummaryRow:
    design: str
    delta: float
    estimator: str
    W: str
    K: int
    n: int
    coord: str
    scaled_bias: float
    scaled_sd: float
    scaled_mse: float
    mcse_bias: float
    S_valid: int
    S_flagged: int
    r: float

    def csv_values(self):
        return [
            self.design, fmt_delta(self.delta), self.estimator, self.W, self.K, self.n,
            self.coord, repr(self.scaled_bias), repr(self.scaled_sd), repr(self.scaled_mse),
            repr(self.mcse_bias), self.S_valid, self.S_flagged, fmt_delta(self.r),
        ]


def summarize(estimates, n, r, alpha_star):
    """Scaled bias, SD, MSE and the Monte Carlo SE of the bias.

    ``estimates`` is ``(S, d)``; returns arrays of length ``d``.
    """
    if r <= 0:
        raise ExperimentError("scaling exponent must be positive")
    est = np.asarray(estimates, dtype=float)
    if est.ndim != 2 or est.shape[0] < 2:
        raise ExperimentError("need at least 2 valid replications")
    scale = float(n) ** r
    err = est - np.asarray(alpha_star, dtype=float)
    sd = est.std(axis=0, ddof=1)
    return {
        "bias": scale * err.mean(axis=0),
        "sd": scale * sd,
        "mse": scale**2 * np.mean(err**2, axis=0),
        "mcse_bias": scale * sd / math.sqrt(est.shape[0]),
    }


def summary_rows(config, records, exclude_flagged=False):
    """Summary rows for every (cell, estimator, K, scaling, coordinate)."""
    by_cell = {}
    for rec in records:
        by_cell.setdefault(rec["cell"], []).append(rec)
    a_star = alpha_star(config.design)
    rows = []
    for cell, (delta, n) in enumerate(config.cells()):
        recs = sorted(by_cell.get(cell, []), key=lambda r: r["index"])
        for est in config.estimators:
            estimator, weight = est.csv_fields
            for K in sorted(config.K_values):
                key = str(K)
                vals, flagged = [], 0
                for rec in recs:
                    if not rec["valid"]:
                        continue
                    e = rec["estimates"][est.label]
                    if not e["converged"][key]:
                        continue
                    is_flagged = rec["empty_states"] + rec["empty_cells"] > 0 or e["at_bound"][key]
                    if exclude_flagged and is_flagged:
                        continue
                    flagged += is_flagged
                    vals.append(e["alpha"][key])
                for r in config.scalings(delta):
                    if len(vals) >= 2:
                        s = summarize(vals, n, r, a_star)
                    else:
                        nan = np.full(a_star.size, np.nan)
                        s = {"bias": nan, "sd": nan, "mse": nan, "mcse_bias": nan}
                    for c, name in enumerate(config.coord_names):
                        rows.append(SummaryRow(
                            config.design.kind, delta, estimator, weight, K, n, name,
                            float(s["bias"][c]), float(s["sd"][c]), float(s["mse"][c]),
                            float(s["mcse_bias"][c]), len(vals), flagged, r,
                        ))
    return rows


def write_summary_csv(rows, path, config_hash=None):
    buf = io.StringIO()
    if config_hash:
        buf.write(f"# manifest.json config_hash={config_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for row in rows:
        w.writerow(row.csv_values())
    Path(path).write_text(buf.getvalue())


def read_summary_csv(path):
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def k_invariance_report(rows):
    """Absolute differences of scaled bias and SD between every pair of K
    values, per (design, delta, n, estimator, weight, coordinate, scaling)."""
    groups = {}
    for row in rows:
        key = (row.design, row.delta, row.n, row.estimator, row.W, row.coord, row.r)
        groups.setdefault(key, {})[row.K] = row
    report = []
    for key, by_k in groups.items():
        ks = sorted(by_k)
        for i, k1 in enumerate(ks):
            for k2 in ks[i + 1:]:
                a, b = by_k[k1], by_k[k2]
                report.append({
                    "design": key[0], "delta": key[1], "n": key[2], "estimator": key[3],
                    "W": key[4], "coord": key[5], "r": key[6], "K": k1, "K_other": k2,
                    "bias_diff": abs(a.scaled_bias - b.scaled_bias),
                    "sd_diff": abs(a.scaled_sd - b.scaled_sd),
                })
    return report


def format_tables(config, rows, coord=None, digits=2):
    """Plain-text tables: K and statistic down, estimator and n across."""
    coord = coord or config.coord_names[-1]
    ests = [e.csv_fields for e in config.estimators]
    names = {("K-ML", "-"): "K-ML", ("K-MD", "I"): "K-MD(I)", ("K-MD", "W_AV"): "K-MD(W_AV)"}
    index = {(r.delta, r.r, r.estimator, r.W, r.K, r.n): r for r in rows if r.coord == coord}
    ns = list(config.sample_sizes)
    out = []
    for delta in config.deltas:
        for r in config.scalings(delta):
            scale = "sqrt(n)" if r == 0.5 else f"n^{fmt_delta(r)}"
            title = f"design={config.design.kind} delta={fmt_delta(delta)} scaling={scale} coord={coord}"
            out.append(title)
            cell_w = 8
            head1 = f"{'K':>3} {'Statistic':<14}|" + "|".join(
                f"{names[e]:^{cell_w * len(ns)}}" for e in ests
            )
            head2 = f"{'':>3} {'':<14}|" + "|".join(
                "".join(f"{'n=' + str(n):>{cell_w}}" for n in ns) for _ in ests
            )
            rule = "-" * len(head1)
            out += [rule, head1, head2, rule]
            mse_scale = "n" if r == 0.5 else f"n^{fmt_delta(2 * r)}"
            for K in sorted(config.K_values):
                for stat, label in (("scaled_bias", f"{scale} Bias"), ("scaled_sd", f"{scale} SD"),
                                    ("scaled_mse", f"{mse_scale} MSE")):
                    cells = []
                    for e in ests:
                        vals = ""
                        for n in ns:
                            row = index.get((delta, r, e[0], e[1], K, n))
                            v = getattr(row, stat) if row else float("nan")
                            vals += f"{v:>{cell_w}.{digits}f}"
                        cells.append(vals)
                    kcol = str(K) if stat == "scaled_sd" else ""
                    out.append(f"{kcol:>3} {label:<14}|" + "|".join(cells))
                out.append(rule)
            out.append("")
    return "\n".join(out)


# ---------------------------------------------------------------------------
# Orchestration


def load_records(path):
    """Read a JSONL record file, dropping a trailing partial line."""
    records = []
    path = Path(path)
    if not path.exists():
        return records
    with open(path) as fh:
        for line in fh:
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError:
                break
    return records


def _manifest(config, status, started, finished=None):
    return {
        "name": config.name,
        "config_hash": config.hash(),
        "config": config.to_dict(),
        "prng": PRNG_NAME,
        "seed_mixer": SEED_MIXER,
        "versions": {
            "ddcpi": __version__,
            "numpy": np.__version__,
            "scipy": __import__("scipy").__version__,
            "python": platform.python_version(),
        },
        "started": started,
        "finished": finished,
        "status": status,
        "outputs": {
            "records": "records.jsonl",
            "summary": "summary.csv",
            "summary_unflagged": "summary_unflagged.csv",
            "tables": "tables.txt",
        },
        "argv": sys.argv,
    }


def _write_json(path, obj):
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    tmp.replace(path)


@dataclass
class ExperimentResult:
    records: list
    rows: list
    rows_unflagged: list
    out_dir: Path = None


def run_experiment(config, out_dir=None, workers=None, resume=False, force=False, progress=None):
    """Run (or resume) every replication of ``config``.

    With ``out_dir`` the manifest, JSONL records, summary CSVs and the text
    tables are written there. A directory holding an unfinished run is only
    touched with ``resume`` (continue it; the config must match) or ``force``
    (start over).
    """
    workers = default_workers() if workers is None else max(1, int(workers))
    ctx = build_context(config)
    now = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    records, done = [], frozenset()
    fh = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        manifest_path = out / "manifest.json"
        rec_path = out / "records.jsonl"
        prior = json.loads(manifest_path.read_text()) if manifest_path.exists() else None
        partial = (prior is not None and prior.get("status") != "complete") or (
            prior is None and rec_path.exists()
        )
        if partial and not (resume or force):
            raise ExperimentError(
                f"{out} holds an unfinished run; pass resume or force"
            )
        if resume and partial and not force:
            if prior is None or prior.get("config_hash") != config.hash():
                raise ExperimentError("cannot resume: configuration differs from the prior run")
            records = load_records(rec_path)
            done = frozenset((r["cell"], r["index"]) for r in records)
            # rewrite to drop any truncated trailing line
            rec_path.write_text("".join(json.dumps(r) + "\n" for r in records))
            now = prior.get("started", now)
            fh = open(rec_path, "a")
        else:
            fh = open(rec_path, "w")
        _write_json(manifest_path, _manifest(config, "running", now))
    try:
        total = len(ctx.cells) * config.replications
        for chunk in iter_replications(config, ctx, workers, done):
            records.extend(chunk)
            if fh is not None:
                fh.write("".join(json.dumps(r) + "\n" for r in chunk))
                fh.flush()
            if progress is not None:
                progress(len(records), total)
    finally:
        if fh is not None:
            fh.close()
    records.sort(key=lambda r: (r["cell"], r["index"]))
    rows = summary_rows(config, records)
    rows_unflagged = summary_rows(config, records, exclude_flagged=True)
    result = ExperimentResult(records, rows, rows_unflagged)
    if out_dir is not None:
        h = config.hash()
        write_summary_csv(rows, out / "summary.csv", h)
        write_summary_csv(rows_unflagged, out / "summary_unflagged.csv", h)
        tables = [format_tables(config, rows, c) for c in config.coord_names]
        (out / "tables.txt").write_text(f"# manifest.json config_hash={h}\n" + "\n".join(tables))
        _write_json(
            out / "manifest.json",
            _manifest(config, "complete", now, time.strftime("%Y-%m-%dT%H:%M:%S%z")),
        )
        result.out_dir = out
    return result
