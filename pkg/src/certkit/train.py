"""Certified training: Lipschitz-margin cross-entropy, SGD with momentum,
cosine / multi-step schedules and best-epoch checkpointing."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
import numpy as np

from .certify import ThreatModel, certify_dataset
from .data import LabeledDataset, MixedDataConfig, mixed_epoch
from .errors import ConfigError, NumericError
from .lipnet import (
    LipschitzBreakdown,
    Network,
    backward,
    forward_tape,
    head_pairwise_grad,
    lipschitz_breakdown,
)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    threat: ThreatModel
    batch_size: int = 128
    lr: float = 0.05
    momentum: float = 0.9
    scheduler: str = "cosine"
    milestones: tuple[int, ...] = ()
    decay: float = 0.1
    dropout_enabled: bool = True
    margin_temp: float = 1.0
    eval_every: int = 1
    train_eval_size: int = 1000
    seed: int = 0
    # margin used by the loss; None trains at the threat radius
    margin_epsilon: float | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("batch_size and eval_every must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.margin_epsilon is not None and not (self.margin_epsilon >= 0 and math.isfinite(self.margin_epsilon)):
            raise ConfigError("margin_epsilon must be finite and >= 0")
        if self.margin_temp <= 0:
            raise ConfigError("margin_temp must be positive")
        if self.scheduler not in ("cosine", "multistep"):
            raise ConfigError(f"unknown scheduler {self.scheduler!r}")
        ms = tuple(int(m) for m in self.milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])) or any(m < 0 or m >= self.epochs for m in ms):
            raise ConfigError("milestones must be strictly increasing and below epochs")
        object.__setattr__(self, "milestones", ms)


def lr_schedule(cfg: TrainConfig, epoch: int) -> float:
    if not 0 <= epoch < cfg.epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {cfg.epochs})")
    if cfg.scheduler == "cosine":
        return cfg.lr * (1.0 + math.cos(math.pi * epoch / cfg.epochs)) / 2.0
    passed = sum(1 for m in cfg.milestones if m <= epoch)
    return cfg.lr * cfg.decay**passed


@dataclass(frozen=True)
class LossResult:
    value: float
    grad_logits: np.ndarray
    grad_k: np.ndarray  # dL/dK for the pairwise head constants


def margin_loss(logits, labels, breakdown: LipschitzBreakdown | np.ndarray, epsilon: float,
                temp: float = 1.0) -> LossResult:
    """Mean cross-entropy of the margin-adjusted logits z_j + eps * K[y][j].

    Non-label logits are raised by the largest change an epsilon-perturbation
    could cause in the pairwise difference, so minimizing the loss pushes
    certified margins up, not just clean margins.
    """
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    k = breakdown.head_pairwise if isinstance(breakdown, LipschitzBreakdown) else np.asarray(breakdown)
    n, c = z.shape
    rows = np.arange(n)
    adj = z + epsilon * k[y]
    adj[rows, y] = z[rows, y]
    s = adj / temp
    s = s - s.max(axis=1, keepdims=True)
    logp = s - np.log(np.sum(np.exp(s), axis=1, keepdims=True))
    loss = float(-np.mean(logp[rows, y]))
    p = np.exp(logp)
    p[rows, y] -= 1.0
    g = p / (temp * n)
    gk = np.zeros((c, c))
    gz_off = g.copy()
    gz_off[rows, y] = 0.0
    np.add.at(gk, y, epsilon * gz_off)
    return LossResult(loss, g, gk)


@dataclass(frozen=True)
class EpochRow:
    epoch: int
    lr: float
    train_clean: float
    test_clean: float
    train_cert: float
    test_cert: float
    loss: float


RECORD_HEADER = ("epoch", "lr", "train_clean", "test_clean", "train_cert", "test_cert", "loss")


@dataclass
class ExperimentRecord:
    rows: list[EpochRow] = field(default_factory=list)
    tags: dict[str, str] = field(default_factory=dict)

    @property
    def best_index(self) -> int:
        if not self.rows:
            raise ValueError("record has no evaluated epochs")
        best = 0
        for i, r in enumerate(self.rows):
            if r.test_cert > self.rows[best].test_cert:
                best = i
        return best

    @property
    def best_epoch(self) -> int:
        return self.rows[self.best_index].epoch

    @property
    def best(self) -> EpochRow:
        return self.rows[self.best_index]

    @property
    def last(self) -> EpochRow:
        return self.rows[-1]

    @property
    def generalization_gap_at_best(self) -> float:
        b = self.best
        return b.train_clean - b.test_clean

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(RECORD_HEADER)
        for r in self.rows:
            w.writerow([r.epoch] + [f"{v:.10g}" for v in (r.lr, r.train_clean, r.test_clean,
                                                        r.train_cert, r.test_cert, r.loss)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, tags=None) -> "ExperimentRecord":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or tuple(rows[0]) != RECORD_HEADER:
            raise ValueError("experiment record CSV has an unexpected header")
        out = [EpochRow(int(r[0]), *(float(v) for v in r[1:])) for r in rows[1:]]
        return cls(out, dict(tags or {}))


@dataclass
class TrainResult:
    record: ExperimentRecord
    best: Network
    last: Network


class TrainingDiverged(NumericError):
    def __init__(self, message, checkpoint: Network, record: ExperimentRecord):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.record = record


def _step_seed(seed: int, epoch: int, batch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, batch]).generate_state(1)[0])


def evaluate(net: Network, ds: LabeledDataset, threat: ThreatModel) -> tuple[float, float]:
    """Clean and certified accuracy, in percent."""
    _, summary = certify_dataset(net, ds.inputs, ds.labels, threat)
    return 100.0 * summary.clean_acc, 100.0 * summary.certified_acc


def sgd_step(net: Network, velocity, grads, lr: float, momentum: float):
    new_params, new_vel = [], []
    for layer, vel, grad in zip(net.layers, velocity, grads):
        p, v = {}, {}
        for name, value in layer.params.items():
            v[name] = momentum * vel[name] + grad[name]
            p[name] = value - lr * v[name]
            if not np.all(np.isfinite(p[name])):
                raise NumericError(f"{layer.kind.name}.{name} became non-finite")
        new_params.append(p)
        new_vel.append(v)
    return net.with_layer_params(new_params), new_vel


def train(net: Network, mix: MixedDataConfig, test: LabeledDataset, cfg: TrainConfig,
          progress=None) -> TrainResult:
    """Train with margin loss over mixed epochs, evaluating every ``eval_every`` epochs.

    The best checkpoint maximizes test certified accuracy (earliest epoch on
    ties). Model selection therefore uses the test split.
    """
    if cfg.threat.norm != net.norm:
        raise ConfigError(f"threat norm {cfg.threat.norm.value} does not match network norm {net.norm.value}")
    if mix.real.dim != net.in_dim or test.dim != net.in_dim:
        raise ConfigError(f"data dimension does not match network input width {net.in_dim}")
    if mix.batch_size != cfg.batch_size:
        mix = MixedDataConfig(mix.real, mix.generated, mix.ratio, mix.epoch_size, cfg.batch_size,
                              mix.seed, mix.replacement_across_epochs)
    eps = cfg.threat.epsilon if cfg.margin_epsilon is None else float(cfg.margin_epsilon)
    mode = "train" if cfg.dropout_enabled else "eval"
    rng = np.random.default_rng([cfg.seed, 7])
    n_eval = min(cfg.train_eval_size, len(mix.real))
    train_eval = mix.real.subset(np.sort(rng.permutation(len(mix.real))[:n_eval]))

    record = ExperimentRecord()
    velocity = [{k: np.zeros_like(v) for k, v in l.params.items()} for l in net.layers]
    best_net, best_cert = net, -1.0
    for epoch in range(cfg.epochs):
        lr = lr_schedule(cfg, epoch)
        losses = []
        for b, batch in enumerate(mixed_epoch(mix, epoch)):
            where = f"epoch {epoch}, batch {b}"
            # overflow is detected explicitly below, so silence numpy's warnings
            with np.errstate(over="ignore", invalid="ignore"):
                logits, tape = forward_tape(net, batch.inputs, mode, _step_seed(cfg.seed, epoch, b))
                if not np.all(np.isfinite(logits)):
                    raise TrainingDiverged(f"logits became non-finite at {where}", net, record)
                bd = lipschitz_breakdown(net, "train_estimate")
                res = margin_loss(logits, batch.labels, bd, eps, cfg.margin_temp)
                if not np.isfinite(res.value):
                    raise TrainingDiverged(f"loss became {res.value} at {where}", net, record)
                grads, _ = backward(net, tape, res.grad_logits)
                grads[-1]["weight"] = grads[-1]["weight"] + head_pairwise_grad(net, res.grad_k, bd.backbone)
                try:
                    net, velocity = sgd_step(net, velocity, grads, lr, cfg.momentum)
                except NumericError as exc:
                    raise TrainingDiverged(f"{exc} at {where}", net, record) from None
            losses.append(res.value * len(batch.labels))
        if (epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1:
            tr_clean, tr_cert = evaluate(net, train_eval, cfg.threat)
            te_clean, te_cert = evaluate(net, test, cfg.threat)
            row = EpochRow(epoch, lr, tr_clean, te_clean, tr_cert, te_cert, sum(losses) / mix.epoch_size)
            record.rows.append(row)
            if te_cert > best_cert:
                best_cert, best_net = te_cert, net
            if progress is not None:
                progress(row)
    return TrainResult(record, best_net, net)
