"""Reconstruction accuracy, the paired t-test and stage-timed run reports."""

from __future__ import annotations

import csv
import json
import math
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import betainc

from ._validation import check_permutation
from .docproc import ReconstructionInstance
from .projector import count_inferences

STAGES = ("pro", "pw", "opt")
BATCH_COLUMNS = ("n", "pro_s", "pw_s", "opt_s", "inferences", "accuracy")


class DegenerateTestError(ValueError):
    """The paired differences have zero variance, so ``t`` is undefined."""


def _order_of(solution) -> list[int]:
    return list(getattr(solution, "order", solution))


def is_positive(a, b, relaxed: bool = False) -> bool:
    """Whether shred ``b`` may directly follow shred ``a``."""
    if a.page_id == b.page_id and b.gt_index == a.gt_index + 1:
        return True
    return relaxed and a.page_id != b.page_id and a.is_page_last and b.is_page_first


def accuracy(solution, instance: ReconstructionInstance, relaxed: bool = False) -> float:
    """Fraction of the ``n - 1`` adjacent placements that are positive pairs.

    ``solution`` is a :class:`~shredrec.solver.Solution` or a plain order,
    indexing ``instance.shreds``.  ``relaxed`` also accepts a page's last
    shred followed by another page's first shred, so page order is ignored.
    """
    order = check_permutation(_order_of(solution), instance.n)
    shreds = instance.shreds
    hits = sum(is_positive(shreds[a], shreds[b], relaxed) for a, b in zip(order[:-1], order[1:]))
    return hits / (instance.n - 1)


def per_page_accuracy(solutions, instances, relaxed: bool = False) -> list[float]:
    return [accuracy(s, inst, relaxed) for s, inst in zip(solutions, instances)]


def paired_t_test(acc_a, acc_b) -> float:
    """Two-sided p-value of the paired t statistic (``n - 1`` degrees of freedom)."""
    a = np.asarray(acc_a, dtype=np.float64)
    b = np.asarray(acc_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be 1-D and of equal length")
    n = a.size
    if n < 2:
        raise ValueError("paired t-test needs at least two pairs")
    diff = a - b
    sd = diff.std(ddof=1)
    # a constant shift leaves rounding noise in sd; treat it as zero
    if sd <= 1e-12 * max(1.0, float(np.abs(diff).max())):
        raise DegenerateTestError("differences have zero variance")
    t = diff.mean() / (sd / math.sqrt(n))
    df = n - 1
    # P(|T| > |t|) = I_{df / (df + t^2)}(df / 2, 1 / 2)
    return float(betainc(df / 2.0, 0.5, df / (df + t * t)))


# -- timing --------------------------------------------------------------------


@dataclass
class RunReport:
    n: int
    multi_page: bool = False
    accuracy: float = math.nan
    relaxed_accuracy: float = math.nan
    timings: dict = field(default_factory=lambda: {s: 0.0 for s in STAGES})
    inference_count: int = 0
    stage_inferences: dict = field(default_factory=lambda: {s: 0 for s in STAGES})
    order: list = field(default_factory=list)
    objective: float = math.nan
    solver: str = ""
    config: dict = field(default_factory=dict)

    def to_dict(self, timings: bool = True) -> dict:
        out = asdict(self)
        if not timings:
            out.pop("timings")
        return out

    def to_json(self, timings: bool = True) -> str:
        return json.dumps(_jsonable(self.to_dict(timings)), indent=1, sort_keys=True)

    def save(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".partial")
        tmp.write_text(self.to_json() + "\n")
        tmp.replace(path)

    def batch_row(self) -> dict:
        """The ``accuracy`` column is the relaxed one for multi-page instances."""
        acc = self.relaxed_accuracy if self.multi_page else self.accuracy
        return {"n": self.n, "pro_s": self.timings["pro"], "pw_s": self.timings["pw"],
                "opt_s": self.timings["opt"], "inferences": self.inference_count,
                "accuracy": acc}


def _jsonable(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def load_report(path) -> RunReport:
    data = json.loads(Path(path).read_text())
    for key in ("accuracy", "relaxed_accuracy", "objective"):
        if data.get(key) is None:
            data[key] = math.nan
    return RunReport(**data)


class StageTimer:
    """Accumulates monotonic wall time and inference counts per stage.

    Stages may be entered several times (their times add up) but never
    nested inside one another.
    """

    def __init__(self, report: RunReport):
        self.report = report
        self._active = None

    @contextmanager
    def stage(self, name: str):
        if name not in STAGES:
            raise ValueError(f"unknown stage {name!r}; expected one of {STAGES}")
        if self._active is not None:
            raise RuntimeError(f"stage {name!r} overlaps running stage {self._active!r}")
        self._active = name
        before = count_inferences()["total"]
        start = time.perf_counter()
        try:
            yield
        finally:
            elapsed = time.perf_counter() - start
            used = count_inferences()["total"] - before
            self._active = None
            self.report.timings[name] += elapsed
            self.report.stage_inferences[name] += used
            self.report.inference_count += used


def stage_timer(report: RunReport) -> StageTimer:
    return StageTimer(report)


def write_batch_csv(reports, path) -> None:
    """One row per instance: ``n, pro_s, pw_s, opt_s, inferences, accuracy``."""
    path = Path(path)
    tmp = path.with_name(path.name + ".partial")
    with tmp.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=BATCH_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for r in reports:
            writer.writerow(r.batch_row() if isinstance(r, RunReport) else r)
    tmp.replace(path)


def read_batch_csv(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for row in rows:
        out.append({"n": int(row["n"]), "pro_s": float(row["pro_s"]), "pw_s": float(row["pw_s"]),
                    "opt_s": float(row["opt_s"]), "inferences": int(row["inferences"]),
                    "accuracy": float(row["accuracy"])})
    return out


def loglog_slope(x, y) -> float:
    """Least-squares slope of ``log y`` against ``log x``."""
    x = np.log(np.asarray(x, dtype=np.float64))
    y = np.log(np.asarray(y, dtype=np.float64))
    return float(np.polyfit(x, y, 1)[0])
