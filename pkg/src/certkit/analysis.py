"""Cross-experiment analyses: gap-vs-gain line fits, robust overfitting,
pairwise certification confusion, comparison tables and SVG plots."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from html import escape
from typing import Iterable, Mapping, Sequence

import numpy as np

from .certify import CertificationRecord, summarize
from .errors import FitError, ValidationError
from .train import ExperimentRecord

AUX_AMOUNTS = ("none", "1x", "5x", "10x")


@dataclass(frozen=True)
class GapGainPoint:
    base_gap: float  # percentage points, train - test clean accuracy of the base model
    delta_cert: float  # percentage points, aux cert - base cert
    model_family: str
    aux_amount: str


@dataclass(frozen=True)
class LineFit:
    slope: float
    intercept: float
    r2: float
    n: int

    def predict(self, x):
        return self.intercept + self.slope * np.asarray(x, dtype=np.float64)


def fit_line(x, y) -> LineFit:
    """Unweighted ordinary least squares of y on (1, x)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValidationError("x and y must be equal-length vectors")
    if len(x) < 2:
        raise FitError(f"need at least 2 points for a line fit, got {len(x)}")
    xc = x - x.mean()
    sxx = float(xc @ xc)
    if sxx <= 1e-300 or np.ptp(x) == 0.0:
        raise FitError("all x values are equal; slope is undetermined")
    slope = float(xc @ (y - y.mean())) / sxx
    intercept = float(y.mean() - slope * x.mean())
    resid = y - (intercept + slope * x)
    ss_res = float(resid @ resid)
    yc = y - y.mean()
    ss_tot = float(yc @ yc)
    # a constant y is fitted exactly by the horizontal line
    r2 = 1.0 if ss_tot == 0.0 else min(1.0, max(0.0, 1.0 - ss_res / ss_tot))
    return LineFit(slope, intercept, r2, len(x))


def gap_gain_fit(points: Sequence[GapGainPoint], group_by_family: bool = True) -> dict[str, LineFit]:
    """Line fit of certified gain against base generalization gap.

    Grouped fits are keyed by model family; the pooled fit is keyed "all".
    """
    groups: dict[str, list[GapGainPoint]] = {}
    for p in points:
        groups.setdefault(p.model_family if group_by_family else "all", []).append(p)
    if not groups:
        raise FitError("no points to fit")
    out = {}
    for key in sorted(groups):
        pts = groups[key]
        try:
            out[key] = fit_line([p.base_gap for p in pts], [p.delta_cert for p in pts])
        except FitError as exc:
            raise FitError(f"group {key!r}: {exc}") from None
    return out


def gap_gain_points(records: Iterable[ExperimentRecord], strict: bool = True) -> list[GapGainPoint]:
    """Pair each aux run with the no-aux run sharing all other tags.

    Unpaired aux runs raise ValidationError, or are dropped when ``strict`` is off.
    """
    base, aux = {}, []
    for r in records:
        key = _config_key(r.tags)
        if r.tags.get("aux_amount", "none") == "none":
            base[key] = r
        else:
            aux.append(r)
    points = []
    for r in aux:
        b = base.get(_config_key(r.tags))
        if b is None:
            if not strict:
                continue
            raise ValidationError(f"aux run {dict(r.tags)} has no matching baseline")
        points.append(GapGainPoint(b.generalization_gap_at_best, r.best.test_cert - b.best.test_cert,
                                   r.tags.get("model_family", "model"), r.tags["aux_amount"]))
    return points


def _config_key(tags: Mapping[str, str]) -> tuple:
    return tuple(sorted((k, v) for k, v in tags.items() if k not in ("aux_amount", "ratio")))


@dataclass(frozen=True)
class OverfittingReport:
    epoch_distance: int
    cert_delta: float


def robust_overfitting_report(record: ExperimentRecord) -> OverfittingReport:
    best, last = record.best, record.last
    return OverfittingReport(last.epoch - best.epoch, best.test_cert - last.test_cert)


# state index = 2 * correct + certified
CONFUSION_STATES = ("wrong/uncert", "wrong/cert", "correct/uncert", "correct/cert")


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray  # counts[state_a, state_b]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def marginal(self, which: str = "a") -> np.ndarray:
        return self.counts.sum(axis=1 if which == "a" else 0)

    def clean_acc(self, which: str = "a") -> float:
        m = self.marginal(which)
        return float(m[2] + m[3]) / self.total

    def certified_acc(self, which: str = "a") -> float:
        return float(self.marginal(which)[3]) / self.total

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("a\\b",) + CONFUSION_STATES)
        for name, row in zip(CONFUSION_STATES, self.counts):
            w.writerow((name,) + tuple(int(v) for v in row))
        return buf.getvalue()


def _state(r: CertificationRecord) -> int:
    return 2 * int(r.correct) + int(r.certified)


def certification_confusion(records_a: Sequence[CertificationRecord],
                            records_b: Sequence[CertificationRecord]) -> ConfusionMatrix:
    a = sorted(records_a, key=lambda r: r.sample_id)
    b = sorted(records_b, key=lambda r: r.sample_id)
    ids_a = [r.sample_id for r in a]
    if len(set(ids_a)) != len(ids_a):
        raise ValidationError("duplicate sample ids in first record set")
    if ids_a != [r.sample_id for r in b]:
        raise ValidationError("record sets cover different samples")
    counts = np.zeros((4, 4), dtype=np.int64)
    for ra, rb in zip(a, b):
        if ra.true_label != rb.true_label:
            raise ValidationError(f"sample {ra.sample_id} has different labels in the two sets")
        counts[_state(ra), _state(rb)] += 1
    return ConfusionMatrix(counts)


def confusion_matches_summaries(cm: ConfusionMatrix, records_a, records_b) -> bool:
    sa, sb = summarize(records_a), summarize(records_b)
    return (cm.clean_acc("a") == sa.clean_acc and cm.certified_acc("a") == sa.certified_acc
            and cm.clean_acc("b") == sb.clean_acc and cm.certified_acc("b") == sb.certified_acc)


@dataclass(frozen=True)
class ComparisonRow:
    key: tuple[str, ...]  # (model_family, model_size, epochs)
    clean: dict[str, float]
    cert: dict[str, float]

    @property
    def delta_cert(self) -> float:
        """Signed largest certified gain of any aux amount over the baseline."""
        gains = [v - self.cert["none"] for k, v in self.cert.items() if k != "none"]
        return max(gains) if gains else 0.0

    @property
    def best_amount(self) -> str:
        # earliest column in AUX_AMOUNTS order wins ties
        return max(_ordered(self.cert), key=lambda k: (self.cert[k], -AUX_AMOUNTS.index(k)))


def _ordered(d: Mapping[str, float]) -> list[str]:
    return [a for a in AUX_AMOUNTS if a in d]


@dataclass(frozen=True)
class ComparisonTable:
    rows: list[ComparisonRow]

    def amounts(self) -> list[str]:
        seen = {a for r in self.rows for a in r.cert}
        return [a for a in AUX_AMOUNTS if a in seen]

    def to_csv(self) -> str:
        amounts = self.amounts()
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        head = ["model_family", "model_size", "epochs"]
        for a in amounts:
            head += [f"clean_{a}", f"cert_{a}"]
        w.writerow(head + ["best", "delta_cert"])
        for r in self.rows:
            line = list(r.key)
            for a in amounts:
                line += [_fmt(r.clean.get(a)), _fmt(r.cert.get(a))]
            w.writerow(line + [r.best_amount, f"{r.delta_cert:+.2f}"])
        return buf.getvalue()

    def to_text(self) -> str:
        """Fixed-width table; the best certified entry per row is starred."""
        amounts = self.amounts()
        lines = ["  ".join(["family", "size", "epochs"] + [f"{a:>14}" for a in amounts] + ["  dCert"])]
        for r in self.rows:
            cells = []
            for a in amounts:
                if a not in r.cert:
                    cells.append(f"{'-':>14}")
                    continue
                mark = "*" if a == r.best_amount else " "
                cells.append(f"{r.clean[a]:6.2f}/{r.cert[a]:6.2f}{mark}")
            lines.append("  ".join(list(r.key) + cells + [f"{r.delta_cert:+7.2f}"]))
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    return "" if v is None else f"{v:.2f}"


def comparison_table(records: Sequence[ExperimentRecord]) -> ComparisonTable:
    """One row per (family, size, epochs), columns per aux amount, from each run's best epoch."""
    grid: dict[tuple, dict[str, ExperimentRecord]] = {}
    for r in records:
        amount = r.tags.get("aux_amount", "none")
        if amount not in AUX_AMOUNTS:
            raise ValidationError(f"unknown aux_amount tag {amount!r}")
        key = (r.tags.get("model_family", "model"), r.tags.get("model_size", "-"), str(r.tags.get("epochs", "-")))
        cell = grid.setdefault(key, {})
        if amount in cell:
            raise ValidationError(f"duplicate run for {key} with aux {amount}")
        cell[amount] = r
    rows = []
    for key in sorted(grid, key=_row_sort_key):
        cell = grid[key]
        if "none" not in cell:
            raise ValidationError(f"row {key} has no no-aux baseline")
        rows.append(ComparisonRow(key, {a: cell[a].best.test_clean for a in _ordered(cell)},
                                  {a: cell[a].best.test_cert for a in _ordered(cell)}))
    return ComparisonTable(rows)


def _row_sort_key(key):
    fam, size, epochs = key
    return (fam, size, int(epochs) if epochs.isdigit() else 0, epochs)


def gap_gain_csv(points: Sequence[GapGainPoint], fits: Mapping[str, LineFit]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("kind", "model_family", "aux_amount", "base_gap", "delta_cert", "slope", "intercept", "r2"))
    for p in points:
        w.writerow(("point", p.model_family, p.aux_amount, f"{p.base_gap:.6f}", f"{p.delta_cert:.6f}", "", "", ""))
    for fam, f in fits.items():
        w.writerow(("fit", fam, "", "", "", f"{f.slope:.9g}", f"{f.intercept:.9g}", f"{f.r2:.9g}"))
    return buf.getvalue()


# --- plotting -------------------------------------------------------------

SVG_WIDTH, SVG_HEIGHT = 800, 600
_MARGIN = (70, 30, 40, 60)  # left, right, top, bottom
_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


@dataclass(frozen=True)
class Series:
    label: str
    x: Sequence[float]
    y: Sequence[float]
    style: str = "line"  # line | scatter | step


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def svg_plot(series: Sequence[Series], title: str = "", xlabel: str = "", ylabel: str = "") -> str:
    """Static SVG chart on a fixed 800x600 viewBox; output depends only on the inputs."""
    xs = np.concatenate([np.asarray(s.x, dtype=np.float64) for s in series]) if series else np.zeros(0)
    ys = np.concatenate([np.asarray(s.y, dtype=np.float64) for s in series]) if series else np.zeros(0)
    if xs.size and not (np.all(np.isfinite(xs)) and np.all(np.isfinite(ys))):
        raise ValidationError("plot data must be finite")
    x0, x1 = (float(xs.min()), float(xs.max())) if xs.size else (0.0, 1.0)
    y0, y1 = (float(ys.min()), float(ys.max())) if ys.size else (0.0, 1.0)
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    ml, mr, mt, mb = _MARGIN
    pw, ph = SVG_WIDTH - ml - mr, SVG_HEIGHT - mt - mb

    def px(v):
        return ml + (v - x0) / (x1 - x0) * pw

    def py(v):
        return mt + ph - (v - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {SVG_WIDTH} {SVG_HEIGHT}" '
           f'width="{SVG_WIDTH}" height="{SVG_HEIGHT}" font-family="sans-serif" font-size="12">',
           f'<rect x="0" y="0" width="{SVG_WIDTH}" height="{SVG_HEIGHT}" fill="white"/>',
           f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
    for t in _ticks(x0, x1):
        out.append(f'<text x="{px(t):.2f}" y="{mt + ph + 18}" text-anchor="middle">{t:.3g}</text>')
    for t in _ticks(y0, y1):
        out.append(f'<text x="{ml - 6}" y="{py(t) + 4:.2f}" text-anchor="end">{t:.3g}</text>')
    if title:
        out.append(f'<text x="{SVG_WIDTH / 2:.0f}" y="{mt - 14}" text-anchor="middle" font-size="15">{escape(title)}</text>')
    if xlabel:
        out.append(f'<text x="{ml + pw / 2:.0f}" y="{SVG_HEIGHT - 16}" text-anchor="middle">{escape(xlabel)}</text>')
    if ylabel:
        out.append(f'<text x="18" y="{mt + ph / 2:.0f}" text-anchor="middle" '
                   f'transform="rotate(-90 18 {mt + ph / 2:.0f})">{escape(ylabel)}</text>')
    for i, s in enumerate(series):
        color = _COLORS[i % len(_COLORS)]
        pts = list(zip(np.asarray(s.x, dtype=np.float64), np.asarray(s.y, dtype=np.float64)))
        if s.style == "scatter":
            out += [f'<circle cx="{px(a):.2f}" cy="{py(b):.2f}" r="4" fill="{color}"/>' for a, b in pts]
        elif pts:
            if s.style == "step":
                stepped = [pts[0]]
                for (a, _), (c, d) in zip(pts, pts[1:]):
                    stepped += [(c, stepped[-1][1]), (c, d)]
                pts = stepped
            path = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in pts)
            out.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="2"/>')
        ly = mt + 16 + 18 * i
        out.append(f'<rect x="{ml + pw - 150}" y="{ly - 9}" width="10" height="10" fill="{color}"/>')
        out.append(f'<text x="{ml + pw - 134}" y="{ly}">{escape(s.label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def cdf_series(records: Sequence[CertificationRecord], thresholds, label: str) -> list[Series]:
    """Count of samples with radius >= t, overall and split by correctness."""
    t = np.asarray(thresholds, dtype=np.float64)
    radii = np.array([r.radius for r in records])
    correct = np.array([r.correct for r in records], dtype=bool)

    def count(mask):
        return [(radii[mask] >= v).sum() for v in t]

    return [Series(f"{label} all", t, count(np.ones_like(correct)), "step"),
            Series(f"{label} correct", t, count(correct), "step"),
            Series(f"{label} incorrect", t, count(~correct), "step")]
