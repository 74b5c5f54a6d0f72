"""Post-hoc analysis: error consistency between classifiers and dissimilarity curves."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .harness import LOG_COLUMNS, RunError, read_log


class AnalysisError(ValueError):
    pass


@dataclass
class PredictionSet:
    ids: np.ndarray
    predicted: np.ndarray
    labels: np.ndarray
    accuracy: float | None = None

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.predicted = np.asarray(self.predicted)
        self.labels = np.asarray(self.labels)
        if not (len(self.ids) == len(self.predicted) == len(self.labels)):
            raise AnalysisError("ids, predictions and labels must have equal length")
        if len(np.unique(self.ids)) != len(self.ids):
            raise AnalysisError("example ids must be unique")
        acc = float(self.correct.mean()) if len(self.ids) else 0.0
        if self.accuracy is not None and abs(self.accuracy - acc) > 1e-9:
            raise AnalysisError(f"stored accuracy {self.accuracy} != recomputed {acc}")
        self.accuracy = acc

    @property
    def correct(self) -> np.ndarray:
        return self.predicted == self.labels

    @classmethod
    def from_logits(cls, ids, logits, labels) -> "PredictionSet":
        logits = np.asarray(logits)
        pred = (logits[:, 0] > 0).astype(np.int64) if logits.shape[1] == 1 else logits.argmax(axis=1)
        return cls(ids, pred, labels)

    def save(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("id", "predicted", "label"))
            for i, p, y in zip(self.ids, self.predicted, self.labels):
                w.writerow((int(i), int(p), int(y)))

    @classmethod
    def load(cls, path) -> "PredictionSet":
        with open(path, newline="", encoding="utf-8") as fh:
            r = csv.DictReader(fh)
            if r.fieldnames != ["id", "predicted", "label"]:
                raise AnalysisError(f"{path}: expected columns id,predicted,label")
            rows = [(int(d["id"]), int(d["predicted"]), int(d["label"])) for d in r]
        a = np.array(rows, dtype=np.int64).reshape(-1, 3)
        return cls(a[:, 0], a[:, 1], a[:, 2])


@dataclass(frozen=True)
class ErrorConsistencyReport:
    c_obs: float
    c_exp: float
    kappa: float


def error_consistency(p1: PredictionSet, p2: PredictionSet) -> ErrorConsistencyReport:
    """Chance-corrected agreement of per-sample correctness, joined on example id."""
    if len(p1.ids) != len(p2.ids) or set(p1.ids.tolist()) != set(p2.ids.tolist()):
        raise AnalysisError("prediction sets cover different example ids")
    if len(p1.ids) == 0:
        raise AnalysisError("empty prediction sets")
    o1, o2 = np.argsort(p1.ids, kind="stable"), np.argsort(p2.ids, kind="stable")
    k1, k2 = p1.correct[o1], p2.correct[o2]
    a1, a2 = float(k1.mean()), float(k2.mean())
    c_exp = a1 * a2 + (1 - a1) * (1 - a2)
    if c_exp >= 1.0:
        raise AnalysisError("kappa is undefined: expected agreement is 1 (both always right or both always wrong)")
    c_obs = float((k1 == k2).mean())
    return ErrorConsistencyReport(c_obs, c_exp, (c_obs - c_exp) / (1 - c_exp))


def kappa_from_rates(a1: float, a2: float, c_obs: float) -> ErrorConsistencyReport:
    c_exp = a1 * a2 + (1 - a1) * (1 - a2)
    if c_exp >= 1.0:
        raise AnalysisError("kappa is undefined when expected agreement is 1")
    return ErrorConsistencyReport(c_obs, c_exp, (c_obs - c_exp) / (1 - c_exp))


# ---------------------------------------------------------------- curves

@dataclass
class CurveSeries:
    name: str
    steps: np.ndarray
    mean: np.ndarray
    se: np.ndarray
    n_seeds: int


def extract_dissim_curves(paths, name: str | None = None, column: str = "dissim_loss") -> list[CurveSeries]:
    """Seed-mean and standard error of the per-step training ``column``.

    Logs are grouped by experiment_id; within a group every seed must cover
    the same steps.
    """
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    groups: dict[str, dict[int, dict[int, float]]] = {}
    for p in paths:
        try:
            rows = read_log(p)
        except (RunError, KeyError, ValueError) as e:
            raise AnalysisError(f"{p}: log does not match the schema: {e}") from e
        for r in rows:
            if r["split"] != "train":
                continue
            groups.setdefault(r["experiment_id"], {}).setdefault(r["seed"], {})[r["step"]] = r[column]
    out = []
    for eid in sorted(groups):
        seeds = groups[eid]
        steps = sorted(next(iter(seeds.values())))
        for s, d in seeds.items():
            if sorted(d) != steps:
                raise AnalysisError(f"{eid}: seed {s} covers different steps")
        m = np.array([[seeds[s][t] for t in steps] for s in sorted(seeds)], dtype=np.float64)
        se = m.std(axis=0, ddof=1) / np.sqrt(len(m)) if len(m) > 1 else np.zeros(len(steps))
        out.append(CurveSeries(name or eid if len(groups) == 1 else eid, np.array(steps), m.mean(axis=0),
                               se, len(m)))
    return out


def epoch_means(series: CurveSeries, steps_per_epoch: int) -> np.ndarray:
    """Average a per-step curve over consecutive blocks of ``steps_per_epoch``."""
    n = len(series.mean) // steps_per_epoch
    return series.mean[: n * steps_per_epoch].reshape(n, steps_per_epoch).mean(axis=1)


CURVE_COLUMNS = ("series", "step", "mean", "se", "n_seeds")


def emit_curves(series: list[CurveSeries], fmt: str, out_path, title: str = "",
                ylabel: str = "dissimilarity loss") -> str:
    if not series:
        raise AnalysisError("no series to emit")
    if fmt not in ("csv", "svg"):
        raise AnalysisError(f"unknown format {fmt!r}")
    d = os.path.dirname(os.path.abspath(out_path))
    if not os.path.isdir(d) or not os.access(d, os.W_OK):
        raise AnalysisError(f"cannot write to {out_path}")
    if fmt == "csv":
        with open(out_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CURVE_COLUMNS)
            for s in series:
                for t, m, e in zip(s.steps, s.mean, s.se):
                    w.writerow((s.name, int(t), repr(float(m)), repr(float(e)), s.n_seeds))
        return out_path
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    with matplotlib.rc_context({"svg.fonttype": "none", "svg.hashsalt": "guidelab"}):
        fig, ax = plt.subplots(figsize=(6, 4))
        for s in series:
            line, = ax.plot(s.steps, s.mean, label=s.name, lw=1.2)
            ax.fill_between(s.steps, s.mean - s.se, s.mean + s.se, color=line.get_color(), alpha=0.25, lw=0)
        ax.set_xlabel("step")
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        ax.legend()
        fig.tight_layout()
        fig.savefig(out_path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return out_path


def read_curves(path) -> list[CurveSeries]:
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.DictReader(fh)
        if tuple(r.fieldnames or ()) != CURVE_COLUMNS:
            raise AnalysisError(f"{path}: unexpected columns")
        acc: dict[str, list] = {}
        for row in r:
            acc.setdefault(row["series"], []).append(
                (int(row["step"]), float(row["mean"]), float(row["se"]), int(row["n_seeds"])))
    out = []
    for name, rows in acc.items():
        a = list(zip(*rows))
        out.append(CurveSeries(name, np.array(a[0]), np.array(a[1]), np.array(a[2]), a[3][0]))
    return out


__all__ = ["PredictionSet", "ErrorConsistencyReport", "error_consistency", "kappa_from_rates",
           "CurveSeries", "extract_dissim_curves", "emit_curves", "read_curves", "epoch_means",
           "AnalysisError", "LOG_COLUMNS"]
