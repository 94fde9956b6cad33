"""Visual-search metrics, hazard-recognition indices, correlation and validation arithmetic."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Iterable, Mapping, Sequence

from .errors import (
    CountExceedsTotal,
    DegenerateSample,
    EmptyList,
    KeyMismatch,
    LengthMismatch,
    SchemaError,
    TooFewWorkers,
    ZeroSystemDwell,
    ZeroTotal,
    ZeroVariance,
)

METRIC_NAMES = ("SD", "FT", "FC", "MFD", "ROAFT", "FR")
_METRIC_COLUMNS = {"SD": "sd_ms", "FT": "ft_ms", "FC": "fc", "MFD": "mfd_ms", "ROAFT": "roaft", "FR": "fr"}
WORKER_HEADER = ["worker_id", "av_hri", "sd_ms", "ft_ms", "fc", "mfd_ms", "roaft", "fr"]


def round_half_up(x: float, ndigits: int = 0) -> float:
    q = Decimal(1).scaleb(-ndigits)
    r = Decimal(repr(float(x))).quantize(q, rounding=ROUND_HALF_UP)
    return int(r) if ndigits == 0 else float(r)


# --- hazard recognition -----------------------------------------------------------

def compute_hri(identified: int, total: int) -> float:
    if total < 1:
        raise ZeroTotal("total pre-identified hazards must be >= 1")
    if identified < 0 or identified > total:
        raise CountExceedsTotal(f"identified={identified} not within [0, {total}]")
    return identified / total


def compute_av_hri(hri: Sequence[float]) -> float:
    hri = list(hri)
    if not hri:
        raise EmptyList("need at least one HRI value")
    return math.fsum(hri) / len(hri)


@dataclass(frozen=True)
class HazardRecognitionRecord:
    worker_id: str
    counts: tuple  # (identified, total) per image

    @property
    def hri(self) -> list[float]:
        return [compute_hri(i, t) for i, t in self.counts]

    @property
    def av_hri(self) -> float:
        return compute_av_hri(self.hri)


# --- visual-search metrics -----------------------------------------------------------

@dataclass(frozen=True)
class MetricsReport:
    sd_ms: float
    fc: int
    ft_ms: float
    mfd_ms: float | None
    roaft: float | None
    fr: float | None
    dwell_ms: dict = field(default_factory=dict)

    @property
    def ft_sd_ratio(self) -> float:
        return self.ft_ms / self.sd_ms

    def to_dict(self, rounded: bool = True) -> dict:
        r = (lambda v, n: None if v is None else round_half_up(v, n)) if rounded else (lambda v, n: v)
        return {
            "sd_ms": self.sd_ms,
            "fc": self.fc,
            "ft_ms": self.ft_ms,
            "mfd_ms": r(self.mfd_ms, 2),
            "roaft": r(self.roaft, 4),
            "fr": r(self.fr, 4),
            "ft_sd_ratio": r(self.ft_sd_ratio, 2),
            "dwell_ms": dict(self.dwell_ms),
        }


def compute_metrics(fixations, dwells, span_ms: float, aoi_ids: Iterable[str] = ()) -> MetricsReport:
    """SD, FC, FT, MFD, ROAFT, FR and per-AOI dwell time.

    A fixation counts as on-target when its ``aoi_id`` (centroid hit test)
    is set.  With no fixations MFD, ROAFT and FR are ``None``.
    """
    if not span_ms > 0:
        raise ValueError("session span must be > 0")
    fixations = list(fixations)
    fc = len(fixations)
    ft = math.fsum(f.end - f.start for f in fixations)
    on_target = [f for f in fixations if f.aoi_id is not None]
    dwell_ms = {a: 0.0 for a in aoi_ids}
    for d in dwells:
        dwell_ms[d.aoi_id] = dwell_ms.get(d.aoi_id, 0.0) + d.duration
    if fc == 0:
        return MetricsReport(float(span_ms), 0, 0.0, None, None, None, dwell_ms)
    on_time = math.fsum(f.end - f.start for f in on_target)
    return MetricsReport(
        sd_ms=float(span_ms),
        fc=fc,
        ft_ms=ft,
        mfd_ms=ft / fc,
        roaft=on_time / ft if ft > 0 else None,
        fr=len(on_target) / fc,
        dwell_ms=dwell_ms,
    )


# --- correlation ---------------------------------------------------------------------

def pearson_r(x: Sequence[float], y: Sequence[float]) -> float:
    x, y = [float(v) for v in x], [float(v) for v in y]
    if len(x) != len(y):
        raise LengthMismatch(f"lengths differ: {len(x)} vs {len(y)}")
    n = len(x)
    if n < 2:
        raise LengthMismatch("need at least two pairs")
    mx, my = math.fsum(x) / n, math.fsum(y) / n
    dx = [v - mx for v in x]
    dy = [v - my for v in y]
    sxx = math.fsum(v * v for v in dx)
    syy = math.fsum(v * v for v in dy)
    if sxx == 0 or syy == 0:
        raise ZeroVariance("both samples need nonzero variance")
    sxy = math.fsum(a * b for a, b in zip(dx, dy))
    r = sxy / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def _betacf(a: float, b: float, x: float, eps: float = 1e-15, max_iter: int = 10000) -> float:
    """Continued fraction of the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def regularized_incomplete_beta(a: float, b: float, x: float, xc: float | None = None) -> float:
    """I_x(a, b) for a, b > 0 and 0 <= x <= 1.

    ``xc`` optionally supplies 1 - x computed without cancellation.
    """
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be positive")
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if xc is None:
        xc = 1.0 - x
    if x == 0.0 or xc == 0.0:
        return 0.0 if x == 0.0 else 1.0
    ln_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log(xc)
    front = math.exp(ln_front)
    # the fraction converges fast on this side of the mean; use symmetry otherwise
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, xc) / b


def p_value_two_tailed(r: float, n: int) -> float:
    """Two-sided p for H0: rho = 0 via t = r sqrt(n-2) / sqrt(1-r^2) on n-2 df."""
    if n < 3:
        raise DegenerateSample("need n >= 3")
    if not abs(r) < 1.0:
        raise DegenerateSample("|r| must be < 1")
    df = n - 2
    t2 = r * r * df / (1.0 - r * r)
    if t2 < df:
        # small |t|: the complement side keeps precision
        return 1.0 - regularized_incomplete_beta(0.5, 0.5 * df, t2 / (df + t2), df / (df + t2))
    return regularized_incomplete_beta(0.5 * df, 0.5, df / (df + t2), t2 / (df + t2))


@dataclass(frozen=True)
class WorkerMetrics:
    worker_id: str
    av_hri: float
    sd_ms: float | None = None
    ft_ms: float | None = None
    fc: float | None = None
    mfd_ms: float | None = None
    roaft: float | None = None
    fr: float | None = None

    def metric(self, name: str) -> float | None:
        return getattr(self, _METRIC_COLUMNS[name])


@dataclass(frozen=True)
class CorrelationRow:
    metric: str
    r: float | None
    p: float | None
    n: int

    def to_dict(self) -> dict:
        return {"metric": self.metric, "r": self.r, "p": self.p, "n": self.n}


def correlation_table(workers: Sequence[WorkerMetrics]) -> list[CorrelationRow]:
    """Pearson r and two-sided p of each metric against AV_HRI (rows in SD, FT, FC, MFD, ROAFT, FR order)."""
    workers = list(workers)
    if len(workers) < 3:
        raise TooFewWorkers(f"need at least 3 workers, got {len(workers)}")
    rows = []
    for name in METRIC_NAMES:
        pairs = [(w.metric(name), w.av_hri) for w in workers if w.metric(name) is not None and w.av_hri is not None]
        n = len(pairs)
        r = p = None
        if n >= 3:
            try:
                r = pearson_r([a for a, _ in pairs], [b for _, b in pairs])
            except ZeroVariance:
                r = None
            if r is not None:
                p = 0.0 if abs(r) >= 1.0 else p_value_two_tailed(r, n)
        rows.append(CorrelationRow(name, r, p, n))
    return rows


def read_worker_metrics(path) -> list[WorkerMetrics]:
    """Parse ``worker_id,av_hri,sd_ms,ft_ms,fc,mfd_ms,roaft,fr``; blank cells are missing."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != WORKER_HEADER:
            raise SchemaError(f"{path}: expected header {','.join(WORKER_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or not any(c.strip() for c in row):
                continue
            if len(row) != len(WORKER_HEADER):
                raise SchemaError(f"{path}:{lineno}: expected {len(WORKER_HEADER)} fields")
            try:
                vals = [None if c.strip() == "" else float(c) for c in row[1:]]
            except ValueError as exc:
                raise SchemaError(f"{path}:{lineno}: {exc}") from exc
            if vals[0] is None:
                raise SchemaError(f"{path}:{lineno}: av_hri is required")
            out.append(WorkerMetrics(row[0].strip(), *vals))
    return out


# --- validation ------------------------------------------------------------------------

@dataclass(frozen=True)
class ValidationResult:
    aoi_ids: tuple
    system_ms: tuple
    manual_ms: tuple
    variation_ms: tuple
    accuracy_pct: tuple  # rounded integer percent
    accuracy_raw: tuple
    mean_pct: int
    mean_raw: float

    def to_dict(self) -> dict:
        return {
            "rows": [
                {"aoi_id": a, "system_ms": s, "manual_ms": m, "variation_ms": v, "accuracy_pct": acc}
                for a, s, m, v, acc in zip(self.aoi_ids, self.system_ms, self.manual_ms, self.variation_ms, self.accuracy_pct)
            ],
            "mean_accuracy_pct": self.mean_pct,
            "mean_accuracy_raw": self.mean_raw,
        }


def validation_accuracy(system_dt: Mapping[str, float], manual_dt: Mapping[str, float]) -> ValidationResult:
    """Per-AOI accuracy ``(1 - |system - manual| / system) * 100`` and its mean."""
    if set(system_dt) != set(manual_dt):
        raise KeyMismatch(f"AOI keys differ: {sorted(set(system_dt) ^ set(manual_dt))}")
    if not system_dt:
        raise EmptyList("no AOIs to validate")
    ids = tuple(system_dt)
    var, raw = [], []
    for a in ids:
        s, m = float(system_dt[a]), float(manual_dt[a])
        if not s > 0:
            raise ZeroSystemDwell(f"system dwell for {a} must be > 0")
        v = abs(s - m)
        var.append(v)
        raw.append((1.0 - v / s) * 100.0)
    mean_raw = math.fsum(raw) / len(raw)
    return ValidationResult(
        ids,
        tuple(float(system_dt[a]) for a in ids),
        tuple(float(manual_dt[a]) for a in ids),
        tuple(var),
        tuple(round_half_up(x) for x in raw),
        tuple(raw),
        round_half_up(mean_raw),
        mean_raw,
    )


def manual_dwell_oracle(hits: Sequence[str | None], mfd_ms: float, set_frames: int = 6,
                        aoi_ids: Iterable[str] = ()) -> dict:
    """Count disjoint runs of ``set_frames`` consecutive in-AOI frames, times ``mfd_ms``."""
    if not mfd_ms > 0:
        raise ValueError("mfd_ms must be > 0")
    sets = {a: 0 for a in aoi_ids}
    run_id, run_len = None, 0
    for h in list(hits) + [None]:
        if h == run_id and h is not None:
            run_len += 1
            continue
        if run_id is not None:
            sets[run_id] = sets.get(run_id, 0) + run_len // set_frames
        run_id, run_len = h, 1
    return {a: n * mfd_ms for a, n in sets.items()}


# --- report tables -------------------------------------------------------------------

def correlation_rows(rows: Sequence[CorrelationRow]) -> list[list]:
    return [["Metric", "Pearson's Correlation Coef", "p-value", "N"]] + [
        [r.metric, "" if r.r is None else round_half_up(r.r, 3), "" if r.p is None else round_half_up(r.p, 3), r.n]
        for r in rows
    ]


def dwell_rows(report: MetricsReport, aoi_ids: Sequence[str] | None = None) -> list[list]:
    ids = list(aoi_ids) if aoi_ids is not None else list(report.dwell_ms)
    return [[f"DT_{a} (ms)" for a in ids], [report.dwell_ms.get(a, 0.0) for a in ids]]


def search_rows(report: MetricsReport) -> list[list]:
    mfd = "" if report.mfd_ms is None else round_half_up(report.mfd_ms, 2)
    return [["SD (ms)", "FC", "FT (ms)", "MFD"], [report.sd_ms, report.fc, report.ft_ms, mfd]]


def validation_rows(v: ValidationResult) -> list[list]:
    return [
        ["AOI", *v.aoi_ids],
        ["DT System", *v.system_ms],
        ["DT Manual", *v.manual_ms],
        ["Variation (ms)", *v.variation_ms],
        ["Accuracy %", *[f"{a}%" for a in v.accuracy_pct]],
    ]


def write_table_csv(path, rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)
