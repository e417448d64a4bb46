"""Metrics, the Repeat baseline, comparison tables and smoothness diagnostics."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .data import make_windows, repeat_forecast
from .errors import ConfigError, DataError, ShapeError
from .tensor import STD_EPS

REPEAT = "Repeat"
RESULT_COLUMNS = ("dataset", "model", "L_P", "mse", "mae", "seed")


def _pair(y_hat, y):
    y_hat, y = np.asarray(y_hat, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if y_hat.shape != y.shape:
        raise ShapeError(f"prediction shape {y_hat.shape} differs from target shape {y.shape}")
    if y.size == 0:
        raise ShapeError("cannot score empty arrays")
    return y_hat, y


def mse(y_hat, y):
    y_hat, y = _pair(y_hat, y)
    return float(np.mean((y_hat - y) ** 2))


def mae(y_hat, y):
    y_hat, y = _pair(y_hat, y)
    return float(np.mean(np.abs(y_hat - y)))


@dataclass
class RunReport:
    dataset: str
    model: str
    horizons: dict  # L_P -> (mse, mae)
    repeat: dict = field(default_factory=dict)  # L_P -> (mse, mae) on the same windows
    seeds: list = field(default_factory=list)
    wall_time: float = 0.0

    def __post_init__(self):
        self.horizons = {int(k): tuple(map(float, v)) for k, v in sorted(self.horizons.items())}
        self.repeat = {int(k): tuple(map(float, v)) for k, v in sorted(self.repeat.items())}
        for k, (a, b) in self.horizons.items():
            if a < 0 or b < 0:
                raise ValueError(f"negative metric at L_P={k}")

    def rows(self, seed=None):
        seed = self.seeds[0] if seed is None and self.seeds else seed
        return [(self.dataset, self.model, k, m, a, seed) for k, (m, a) in self.horizons.items()]

    def repeat_report(self):
        return RunReport(self.dataset, REPEAT, self.repeat, {}, list(self.seeds))


def evaluate_windows(predict, windows):
    """(mse, mae) of ``predict(X_I)`` against the windows' targets."""
    pred = predict(windows.X_I)
    return mse(pred, windows.X_P), mae(pred, windows.X_P)


def evaluate(models, frame, L_P_list=None, dataset="data", model_id="CATS", seed=0, which="test", stride=1):
    """Score trained model(s) on stride-1 windows of a standardized frame.

    ``models`` is one model or a mapping L_P -> model. The Repeat baseline is
    scored on the identical windows.
    """
    if not isinstance(models, dict):
        models = {models.L_P: models}
    if L_P_list is None:
        L_P_list = sorted(models)
    horizons, repeat = {}, {}
    for L_P in L_P_list:
        if L_P not in models:
            raise ConfigError(f"no model for horizon L_P={L_P}")
        model = models[L_P]
        w = make_windows(frame, which, model.L_I, L_P, stride=stride)
        horizons[L_P] = evaluate_windows(model.predict, w)
        repeat[L_P] = evaluate_windows(lambda X: repeat_forecast(X, L_P), w)
    return RunReport(dataset, model_id, horizons, repeat, [seed])


def evaluate_repeat(frame, L_I, L_P_list, dataset="data", which="test", stride=1):
    horizons = {}
    for L_P in L_P_list:
        w = make_windows(frame, which, L_I, L_P, stride=stride)
        horizons[L_P] = evaluate_windows(lambda X: repeat_forecast(X, L_P), w)
    return RunReport(dataset, REPEAT, horizons)


# ---------------------------------------------------------------------------
# results CSV
# ---------------------------------------------------------------------------


def write_results_csv(reports, path, include_repeat=True):
    """Rows (dataset, model, L_P, mse, mae, seed); floats as repr for exact round trips."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for r in reports:
            seed = r.seeds[0] if r.seeds else ""
            for k, (m, a) in r.horizons.items():
                w.writerow([r.dataset, r.model, k, repr(m), repr(a), seed])
            if include_repeat:
                for k, (m, a) in r.repeat.items():
                    w.writerow([r.dataset, REPEAT, k, repr(m), repr(a), seed])


def read_results_csv(path):
    """Reports averaged over seeds, one per (dataset, model); duplicate Repeat rows collapse."""
    acc = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(RESULT_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise DataError(f"{path}: missing columns {sorted(missing)}")
        for i, row in enumerate(reader, start=2):
            try:
                key = (row["dataset"], row["model"])
                L_P = int(row["L_P"])
                vals = (float(row["mse"]), float(row["mae"]))
            except ValueError as exc:
                raise DataError(f"{path}: row {i}: {exc}") from None
            seed = row["seed"]
            acc.setdefault(key, {}).setdefault(L_P, {})[seed] = vals
    reports = []
    for (dataset, model), per_h in acc.items():
        horizons = {k: tuple(np.mean(list(v.values()), axis=0)) for k, v in per_h.items()}
        seeds = sorted({s for v in per_h.values() for s in v})
        reports.append(RunReport(dataset, model, horizons, {}, seeds))
    return reports


# ---------------------------------------------------------------------------
# comparison table
# ---------------------------------------------------------------------------


@dataclass
class ComparisonTable:
    datasets: list
    models: list  # compared models, Repeat excluded
    avg_mse: dict  # (dataset, model) -> mean MSE over horizons; includes Repeat
    pct: dict  # (dataset, model) -> 100 * avg / avg_repeat
    avg_pct: dict  # model -> mean pct over datasets
    avg_rank: dict  # model -> mean rank over sub-experiments
    wins: dict  # model -> number of rank-1 sub-experiments
    n_sub: int = 0

    def to_text(self):
        cols = self.models + [REPEAT]
        width = max(12, *(len(c) + 2 for c in cols))
        name_w = max(10, *(len(d) + 2 for d in self.datasets), len("AvgRank") + 2)
        lines = ["".ljust(name_w) + "".join(c.rjust(width) for c in cols)]
        for d in self.datasets:
            cells = []
            for m in cols:
                if (d, m) not in self.avg_mse:
                    cells.append("-".rjust(width))
                elif m == REPEAT:
                    cells.append(f"{self.avg_mse[d, m]:.3f}".rjust(width))
                else:
                    cells.append(f"{self.avg_mse[d, m]:.3f} ({self.pct[d, m]:.1f}%)".rjust(width))
            lines.append(d.ljust(name_w) + "".join(cells))
        lines.append("Avg%".ljust(name_w) + "".join(f"{self.avg_pct[m]:.1f}%".rjust(width) for m in self.models))
        lines.append("AvgRank".ljust(name_w) + "".join(f"{self.avg_rank[m]:.2f}".rjust(width) for m in self.models))
        lines.append("#Win".ljust(name_w) + "".join(f"{self.wins[m]}".rjust(width) for m in self.models))
        return "\n".join(lines) + "\n"

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["dataset", "model", "avg_mse", "pct_of_repeat"])
            for d in self.datasets:
                for m in self.models + [REPEAT]:
                    if (d, m) in self.avg_mse:
                        w.writerow([d, m, repr(self.avg_mse[d, m]), repr(self.pct.get((d, m), 100.0))])
            for m in self.models:
                w.writerow(["Avg%", m, "", repr(self.avg_pct[m])])
                w.writerow(["AvgRank", m, "", repr(self.avg_rank[m])])
                w.writerow(["#Win", m, "", self.wins[m]])


def comparison_table(reports):
    """Aggregate reports into avg MSE, % of Repeat, AvgRank and #Win.

    Ranks are taken per (dataset, horizon, metric) among the non-Repeat
    models; ties share the lowest rank and every tied first counts as a win.
    A metric that is NaN for any model in a sub-experiment is skipped.
    """
    by_key = {}
    for r in reports:
        by_key[(r.dataset, r.model)] = r
        if r.repeat and (r.dataset, REPEAT) not in by_key:
            by_key[(r.dataset, REPEAT)] = r.repeat_report()
    datasets = sorted({d for d, _ in by_key}, key=lambda d: [r.dataset for r in reports].index(d))
    models = []
    for r in reports:
        if r.model != REPEAT and r.model not in models:
            models.append(r.model)
    if not models:
        raise ConfigError("comparison table needs at least one model besides Repeat")

    avg_mse, pct = {}, {}
    for d in datasets:
        if (d, REPEAT) not in by_key:
            raise ConfigError(f"dataset {d!r} has no Repeat baseline")
        rep = by_key[d, REPEAT]
        rep_avg = float(np.mean([v[0] for v in rep.horizons.values()]))
        avg_mse[d, REPEAT] = rep_avg
        for m in models:
            if (d, m) in by_key:
                a = float(np.mean([v[0] for v in by_key[d, m].horizons.values()]))
                avg_mse[d, m] = a
                pct[d, m] = 100.0 * a / rep_avg

    ranks = {m: [] for m in models}
    wins = {m: 0 for m in models}
    n_sub = 0
    for d in datasets:
        present = [m for m in models if (d, m) in by_key]
        horizons = sorted({k for m in present for k in by_key[d, m].horizons})
        for k in horizons:
            for metric in (0, 1):
                vals = [by_key[d, m].horizons.get(k, (math.nan, math.nan))[metric] for m in present]
                if any(math.isnan(v) for v in vals):
                    continue
                n_sub += 1
                for m, rank in zip(present, rankdata(vals, method="min")):
                    ranks[m].append(float(rank))
                    wins[m] += int(rank == 1)
    avg_pct = {m: float(np.mean([pct[d, m] for d in datasets if (d, m) in pct])) for m in models}
    avg_rank = {m: float(np.mean(ranks[m])) if ranks[m] else math.nan for m in models}
    return ComparisonTable(datasets, models, avg_mse, pct, avg_pct, avg_rank, wins, n_sub)


# ---------------------------------------------------------------------------
# smoothness
# ---------------------------------------------------------------------------


def smoothness_report(diag, eps=STD_EPS):
    """First-difference energy of the post-gate ATS, normalized per channel.

    For each window and channel, S = sum_t ((A_t - A_{t-1}) / sigma)^2 with
    sigma the population std over the window (floored at eps). Reported per
    channel as means over windows:

    - ``energy``: S / L_I, the continuity-loss normalization
    - ``quadratic_variation``: S itself
    - ``mean_step_energy``: S / (L_I - 1), averaged over the actual differences
    """
    A = diag.ats if hasattr(diag, "ats") else diag
    A = np.asarray(A, dtype=np.float64)
    if A.ndim == 2:
        A = A[None]
    if A.ndim != 3:
        raise ShapeError(f"expected ATS of shape (B, N, L_I), got {A.shape}")
    B, N, L = A.shape
    if N == 0:
        empty = np.zeros(0)
        return {"energy": empty, "quadratic_variation": empty, "mean_step_energy": empty, "mean_energy": 0.0}
    sigma = np.maximum(A.std(axis=-1, keepdims=True), eps)
    S = np.sum((np.diff(A, axis=-1) / sigma) ** 2, axis=-1).mean(axis=0)
    energy = S / L
    return {
        "energy": energy,
        "quadratic_variation": S,
        "mean_step_energy": S / max(L - 1, 1),
        "mean_energy": float(energy.mean()),
    }
