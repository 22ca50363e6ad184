"""Concordance correlation, the challenge score and fold tables."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InsufficientDataError

BASELINE = ("Baseline", 0.2400, 0.2000)


@dataclass(frozen=True)
class CccBreakdown:
    mean_x: float
    mean_y: float
    var_x: float
    var_y: float
    cov_xy: float
    pearson: float
    ccc: float
    n: int
    degenerate: bool = False


def _exact_mean(x: np.ndarray, fsum=False) -> float:
    # a constant series must have zero spread, which rounding in the sum can break
    if x[0] == x.min() == x.max():
        return float(x[0])
    return math.fsum(x) / x.size if fsum else float(x.mean())


class MomentAccumulator:
    """Streaming first and second (co-)moments of paired samples.

    Chunks are reduced in float64 and merged with the pairwise update of
    Chan, Golub and LeVeque, so the result does not depend on holding the
    whole series in memory. Feed order is the reduction order.
    """

    def __init__(self):
        self.n = 0
        self.mean_x = 0.0
        self.mean_y = 0.0
        self.m2_x = 0.0
        self.m2_y = 0.0
        self.c_xy = 0.0

    def update(self, x, y):
        x = np.asarray(x, dtype=np.float64).ravel()
        y = np.asarray(y, dtype=np.float64).ravel()
        nb = x.size
        if nb == 0:
            return self
        mx, my = _exact_mean(x), _exact_mean(y)
        dx, dy = x - mx, y - my
        m2x, m2y, cxy = float(dx @ dx), float(dy @ dy), float(dx @ dy)
        na = self.n
        n = na + nb
        ex, ey = mx - self.mean_x, my - self.mean_y
        self.mean_x += ex * nb / n
        self.mean_y += ey * nb / n
        self.m2_x += m2x + ex * ex * na * nb / n
        self.m2_y += m2y + ey * ey * na * nb / n
        self.c_xy += cxy + ex * ey * na * nb / n
        self.n = n
        return self

    def result(self) -> CccBreakdown:
        if self.n < 2:
            raise InsufficientDataError(f"CCC needs at least 2 valid paired samples, got {self.n}")
        var_x = self.m2_x / self.n
        var_y = self.m2_y / self.n
        cov = self.c_xy / self.n
        return _breakdown(self.mean_x, self.mean_y, var_x, var_y, cov, self.n)


def _breakdown(mx, my, vx, vy, cov, n) -> CccBreakdown:
    sx_sy = math.sqrt(vx * vy)
    pearson = cov / sx_sy if sx_sy > 0 else 0.0
    denom = vx + vy + (mx - my) ** 2
    if denom > 0:
        value, degenerate = 2.0 * cov / denom, False
    else:
        value, degenerate = 0.0, True
    return CccBreakdown(mx, my, vx, vy, cov, pearson, value, n, degenerate)


def _valid_pairs(x, y, mask):
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"series lengths differ: {x.size} vs {y.size}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool).ravel()
        x, y = x[mask], y[mask]
    return x, y


def ccc(x, y, mask=None, chunk: int = 1 << 16) -> CccBreakdown:
    """Concordance correlation of two series over the frames where ``mask`` is true.

    Moments use the population (divide-by-N) convention. A zero denominator
    (both series constant with equal means) yields ``ccc = 0`` and sets
    ``degenerate``.
    """
    x, y = _valid_pairs(x, y, mask)
    acc = MomentAccumulator()
    for start in range(0, x.size, chunk):
        acc.update(x[start : start + chunk], y[start : start + chunk])
    return acc.result()


def ccc_direct(x, y, mask=None) -> CccBreakdown:
    """Two-pass textbook evaluation of the same quantity; used as an oracle."""
    x, y = _valid_pairs(x, y, mask)
    n = x.size
    if n < 2:
        raise InsufficientDataError(f"CCC needs at least 2 valid paired samples, got {n}")
    mx = _exact_mean(x, fsum=True)
    my = _exact_mean(y, fsum=True)
    vx = math.fsum((x - mx) ** 2) / n
    vy = math.fsum((y - my) ** 2) / n
    cov = math.fsum((x - mx) * (y - my)) / n
    return _breakdown(mx, my, vx, vy, cov, n)


def p_va(ccc_v: float, ccc_a: float) -> float:
    """Challenge score: mean of the valence and arousal CCCs."""
    return (ccc_a + ccc_v) / 2


@dataclass(frozen=True)
class EvalReport:
    ccc_v: float
    ccc_a: float
    p_va: float
    n_valid: int
    valence: CccBreakdown | None = field(default=None, compare=False)
    arousal: CccBreakdown | None = field(default=None, compare=False)

    @classmethod
    def from_cccs(cls, ccc_v: float, ccc_a: float, n_valid: int = 0) -> "EvalReport":
        return cls(ccc_v, ccc_a, p_va(ccc_v, ccc_a), n_valid)

    def row(self, fold) -> str:
        return f"{fold},{self.ccc_v:.4f},{self.ccc_a:.4f},{self.p_va:.4f}"


def evaluate(predictions, labels) -> EvalReport:
    """Score predictions against labels over all valid frames.

    ``predictions`` is an [n, 2] array or a list of them (one per video);
    ``labels`` is the matching :class:`~mamba_va.data.VaSeries` or list.
    Multiple videos are concatenated before computing CCC.
    """
    if not isinstance(predictions, (list, tuple)):
        predictions, labels = [predictions], [labels]
    if len(predictions) != len(labels):
        raise ValueError(f"{len(predictions)} prediction arrays for {len(labels)} label series")
    acc_v, acc_a = MomentAccumulator(), MomentAccumulator()
    for pred, lab in zip(predictions, labels):
        pred = np.asarray(pred)
        if pred.shape != (len(lab.valid), 2):
            raise ValueError(f"predictions of shape {pred.shape} do not align with {len(lab.valid)} labelled frames")
        m = lab.valid
        acc_v.update(pred[m, 0], lab.valence[m])
        acc_a.update(pred[m, 1], lab.arousal[m])
    v, a = acc_v.result(), acc_a.result()
    return EvalReport(v.ccc, a.ccc, p_va(v.ccc, a.ccc), v.n, v, a)


class FoldTable:
    """Per-fold results, an average row when there is more than one fold, and optionally the baseline."""

    def __init__(self, rows: list[tuple[str, EvalReport]], baseline: bool = True):
        if not rows:
            raise ValueError("fold report needs at least one fold")
        self.rows = [(str(fold), rep) for fold, rep in rows]
        self.baseline = baseline

    def table_rows(self) -> list[tuple]:
        """``(fold, ccc_v, ccc_a, p_va, n_valid)`` for every printed row."""
        out = [(fold, rep.ccc_v, rep.ccc_a, rep.p_va, rep.n_valid) for fold, rep in self.rows]
        if len(self.rows) > 1:
            mv = float(np.mean([r.ccc_v for _, r in self.rows]))
            ma = float(np.mean([r.ccc_a for _, r in self.rows]))
            out.append(("Mean", mv, ma, p_va(mv, ma), sum(r.n_valid for _, r in self.rows)))
        if self.baseline:
            name, bv, ba = BASELINE
            out.append((name, bv, ba, p_va(bv, ba), None))
        return out

    def to_text(self) -> str:
        lines = [f"{'Fold':<10}{'Valence(CCC)':>14}{'Arousal(CCC)':>14}{'Average(CCC)':>14}"]
        for fold, v, a, avg, _ in self.table_rows():
            lines.append(f"{fold:<10}{v:>14.4f}{a:>14.4f}{avg:>14.4f}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["fold", "ccc_valence", "ccc_arousal", "p_va", "n_valid"])
        for fold, v, a, avg, n in self.table_rows():
            writer.writerow([fold, f"{v:.4f}", f"{a:.4f}", f"{avg:.4f}", "" if n is None else n])
        return buf.getvalue()


def fold_report(reports, baseline: bool = True) -> FoldTable:
    """Build a :class:`FoldTable` from ``(fold, EvalReport)`` pairs or a plain list of reports."""
    reports = list(reports)
    if not reports:
        raise ValueError("fold report needs at least one fold")
    if isinstance(reports[0], EvalReport):
        reports = list(enumerate(reports))
    return FoldTable(reports, baseline)

