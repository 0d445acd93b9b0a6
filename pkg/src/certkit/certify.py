"""Margin certificates from Lipschitz bounds, dataset summaries, radius
distributions and an independent search-based soundness check."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, ValidationError
from .lipnet import LipschitzBreakdown, Network, NormKind, forward, lipschitz_breakdown
from .numerics import as_tensor

DEFAULT_EPSILON = {NormKind.LINF: Fraction(8, 255), NormKind.L2: Fraction(36, 255)}
RADIUS_CAP_FACTOR = 10.0


@dataclass(frozen=True)
class ThreatModel:
    norm: NormKind
    epsilon: float

    def __post_init__(self):
        object.__setattr__(self, "norm", NormKind.parse(self.norm))
        eps = float(self.epsilon)
        if not eps > 0 or not np.isfinite(eps):
            raise ValidationError(f"epsilon must be positive and finite, got {self.epsilon}")
        object.__setattr__(self, "epsilon", eps)

    @classmethod
    def default(cls, norm) -> "ThreatModel":
        norm = NormKind.parse(norm)
        return cls(norm, float(DEFAULT_EPSILON[norm]))

    @property
    def radius_cap(self) -> float:
        return RADIUS_CAP_FACTOR * self.epsilon


@dataclass(frozen=True)
class CertificationRecord:
    sample_id: int
    predicted: int
    true_label: int
    correct: bool
    radius: float
    certified: bool


def certify_sample(
    logits,
    breakdown: LipschitzBreakdown,
    true_label: int,
    threat: ThreatModel | None = None,
    sample_id: int = 0,
    radius_cap: float | None = None,
) -> CertificationRecord:
    """Certify one sample from its logits.

    radius = min over j != pred of (z_pred - z_j) / K[pred][j]. A pair with
    K = 0 and a strictly positive margin can never flip and contributes
    +inf; an all-infinite radius is reported as ``radius_cap`` (10 epsilon
    by default).
    """
    z = as_tensor(logits, "logits").reshape(-1)
    k = breakdown.head_pairwise
    if k.shape != (z.size, z.size):
        raise ValidationError(f"breakdown is for {k.shape[0]} classes, logits have {z.size}")
    pred = int(np.argmax(z))
    margins = z[pred] - z
    kp = k[pred]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(kp > 0, margins / np.where(kp > 0, kp, 1.0), np.where(margins > 0, np.inf, 0.0))
    ratios[pred] = np.inf
    radius = float(max(ratios.min(), 0.0)) if z.size > 1 else np.inf
    if np.isinf(radius):
        if radius_cap is None:
            if threat is None:
                raise ValidationError("an unbounded radius needs a threat model or explicit radius_cap")
            radius_cap = threat.radius_cap
        radius = float(radius_cap)
    correct = pred == int(true_label)
    certified = bool(correct and threat is not None and radius >= threat.epsilon)
    return CertificationRecord(int(sample_id), pred, int(true_label), bool(correct), radius, certified)


@dataclass(frozen=True)
class CertificationSummary:
    n: int
    clean_acc: float
    certified_acc: float


def summarize(records: Sequence[CertificationRecord]) -> CertificationSummary:
    n = len(records)
    if n == 0:
        raise ValidationError("no records to summarize")
    return CertificationSummary(
        n,
        sum(r.correct for r in records) / n,
        sum(r.certified for r in records) / n,
    )


def certify_dataset(
    net: Network,
    inputs,
    labels,
    threat: ThreatModel,
    batch_size: int = 1024,
    breakdown: LipschitzBreakdown | None = None,
) -> tuple[list[CertificationRecord], CertificationSummary]:
    inputs = as_tensor(inputs, "inputs")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if inputs.ndim != 2 or len(inputs) == 0:
        raise ValidationError("certify_dataset needs a non-empty batch of inputs")
    if len(labels) != len(inputs):
        raise ValidationError(f"{len(inputs)} inputs but {len(labels)} labels")
    if threat.norm != net.norm:
        raise ConfigError(f"threat norm {threat.norm.value} does not match network norm {net.norm.value}")
    if breakdown is None:
        breakdown = lipschitz_breakdown(net, "certify_exact")
    records = []
    for start in range(0, len(inputs), batch_size):
        logits = forward(net, inputs[start : start + batch_size], mode="eval")
        for offset, row in enumerate(logits):
            i = start + offset
            records.append(certify_sample(row, breakdown, labels[i], threat, sample_id=i))
    return records, summarize(records)


def radius_cdf(records: Sequence[CertificationRecord], thresholds, split_by_correct: bool = False):
    """Count records with radius >= t for every threshold.

    Returns an int array, or a dict ``{"correct": ..., "incorrect": ...}``
    when ``split_by_correct`` is set.
    """
    t = np.asarray(thresholds, dtype=np.float64)
    if t.ndim != 1 or np.any(np.diff(t) <= 0):
        raise ValidationError("thresholds must be strictly increasing")

    def counts(rs):
        radii = np.sort(np.array([r.radius for r in rs], dtype=np.float64))
        return len(radii) - np.searchsorted(radii, t, side="left")

    if not split_by_correct:
        return counts(records)
    return {
        "correct": counts([r for r in records if r.correct]),
        "incorrect": counts([r for r in records if not r.correct]),
    }


@dataclass(frozen=True)
class OverRobustness:
    fraction_above_eps: float
    fraction_above_2eps: float
    mean_radius_certified: float


def over_robustness_report(records: Sequence[CertificationRecord], threat: ThreatModel) -> OverRobustness:
    """Fractions of all records certified at epsilon and at 2 epsilon."""
    if not records:
        raise ValidationError("over_robustness_report needs records")
    n = len(records)
    eps = threat.epsilon
    certified = [r for r in records if r.correct and r.radius >= eps]
    above2 = sum(1 for r in certified if r.radius >= 2 * eps)
    mean = float(np.mean([r.radius for r in certified])) if certified else 0.0
    return OverRobustness(len(certified) / n, above2 / n, mean)


CSV_HEADER = ("sample_id", "predicted", "true_label", "correct", "radius", "certified")


def records_to_csv(records: Iterable[CertificationRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in sorted(records, key=lambda r: r.sample_id):
        w.writerow([r.sample_id, r.predicted, r.true_label, int(r.correct), f"{r.radius:.9g}", int(r.certified)])
    return buf.getvalue()


def records_from_csv(text: str) -> list[CertificationRecord]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != CSV_HEADER:
        raise ValidationError("records CSV has an unexpected header")
    out = []
    for row in rows[1:]:
        sid, pred, lab, corr, rad, cert = row
        out.append(CertificationRecord(int(sid), int(pred), int(lab), corr == "1", float(rad), cert == "1"))
    return out


# ---------------------------------------------------------------- soundness oracle


@dataclass(frozen=True)
class SoundnessVerdict:
    sound: bool
    witness: np.ndarray | None = None
    evaluated: int = 0

    def __str__(self):
        return "SOUND" if self.sound else f"VIOLATION at delta={self.witness}"


GRID_MAX_DIM = 3


def _ball_grid(dim: int, r: float, steps: int, norm: NormKind) -> np.ndarray:
    axis = np.linspace(-r, r, steps)
    mesh = np.stack(np.meshgrid(*([axis] * dim), indexing="ij"), axis=-1).reshape(-1, dim)
    if norm == NormKind.L2:
        mesh = mesh[np.sqrt(np.sum(mesh * mesh, axis=1)) <= r]
        # add points on the sphere itself, where a violation would appear first
        if dim == 2:
            ang = np.linspace(0.0, 2 * np.pi, 4 * steps, endpoint=False)
            mesh = np.vstack([mesh, r * np.stack([np.cos(ang), np.sin(ang)], axis=1)])
    return mesh


def _project(delta: np.ndarray, r: float, norm: NormKind) -> np.ndarray:
    if norm == NormKind.LINF:
        return np.clip(delta, -r, r)
    nrm = np.sqrt(np.sum(delta * delta, axis=-1, keepdims=True))
    return delta * np.minimum(1.0, r / np.maximum(nrm, 1e-300))


def soundness_oracle(
    net: Network,
    x,
    record: CertificationRecord,
    threat: ThreatModel,
    grid_steps: int = 101,
    mode: str = "grid",
    restarts: int = 200,
    steps: int = 50,
    seed: int = 0,
    shrink: float = 0.999,
) -> SoundnessVerdict:
    """Search the ball of radius ``shrink * record.radius`` for a label flip.

    ``grid`` mode enumerates a regular grid (inputs of dimension <= 3);
    ``random`` mode runs projected random search from ``restarts`` starting
    points on the ball boundary.
    """
    x = as_tensor(x, "x").reshape(-1)
    norm = threat.norm
    r = shrink * record.radius
    if r <= 0:
        return SoundnessVerdict(True)
    dim = x.size
    if mode == "grid":
        if dim > GRID_MAX_DIM:
            raise ConfigError(f"grid search is limited to {GRID_MAX_DIM} input dims (got {dim}); use mode='random'")
        delta = _ball_grid(dim, r, grid_steps, norm)
        preds = np.argmax(forward(net, x + delta), axis=1)
        bad = np.flatnonzero(preds != record.predicted)
        if bad.size:
            return SoundnessVerdict(False, delta[bad[0]], len(delta))
        return SoundnessVerdict(True, None, len(delta))
    if mode != "random":
        raise ConfigError(f"unknown oracle mode {mode!r}")

    rng = np.random.default_rng(seed)
    delta = rng.standard_normal((restarts, dim))
    if norm == NormKind.LINF:
        delta = r * np.sign(delta)
    else:
        delta = _project(delta * (r / np.linalg.norm(delta, axis=1, keepdims=True)), r, norm)

    def margin(d):
        z = forward(net, x + d)
        preds = np.argmax(z, axis=1)
        pred_logit = z[:, record.predicted].copy()
        z[:, record.predicted] = -np.inf
        return pred_logit - z.max(axis=1), preds

    m, preds = margin(delta)
    evaluated = restarts
    step = 0.25 * r
    for _ in range(steps):
        bad = np.flatnonzero(preds != record.predicted)
        if bad.size:
            return SoundnessVerdict(False, delta[bad[0]], evaluated)
        cand = _project(delta + step * rng.standard_normal(delta.shape), r, norm)
        cm, cpreds = margin(cand)
        evaluated += restarts
        better = cm < m
        delta[better], m[better], preds[better] = cand[better], cm[better], cpreds[better]
        step *= 0.93
    bad = np.flatnonzero(preds != record.predicted)
    if bad.size:
        return SoundnessVerdict(False, delta[bad[0]], evaluated)
    return SoundnessVerdict(True, None, evaluated)
