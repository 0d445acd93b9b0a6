"""End-to-end acceptance criteria for certkit.

Each test prints one ``criterion N: PASS|FAIL`` line and the module prints a
summary at the end of the run. ``python tests/test_acceptance.py`` runs only
this file.
"""
import contextlib
import functools
import io
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

from certkit.analysis import (
    AUX_AMOUNTS,
    certification_confusion,
    comparison_table,
    fit_line,
    gap_gain_fit,
    GapGainPoint,
)
from certkit.certify import ThreatModel, certify_dataset, soundness_oracle
from certkit.cli import ExperimentConfig, main, run_training
from certkit.data import LabeledDataset, MixedDataConfig, batch_generated_counts, mixed_epoch
from certkit.fixtures import moons_splits
from certkit.lipnet import LayerKind, build_network, forward, layer_constant, lipschitz_breakdown
from certkit.numerics import cayley_orthogonalize, exact_spectral_norm, power_iteration, skew
from certkit.train import EpochRow, ExperimentRecord, TrainConfig, train

from oracles import (
    KIND_NORMS,
    empirical_lipschitz_excess,
    margin_loss_gradient_error,
    network_gradient_error,
    norm_of,
    probe_network,
    random_layer,
)

RESULTS: dict[int, str] = {}


def criterion(number: int, budget_s: float | None = None):
    """Record PASS/FAIL for one criterion; the time budget is part of the check."""
    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            start = time.perf_counter()
            try:
                detail = fn(*args, **kwargs) or ""
                took = time.perf_counter() - start
                if budget_s is not None:
                    assert took < budget_s, f"took {took:.0f}s, budget {budget_s:.0f}s"
            except BaseException as exc:
                took = time.perf_counter() - start
                RESULTS[number] = f"criterion {number}: FAIL ({took:.1f}s) {exc}".splitlines()[0]
                print(RESULTS[number])
                raise
            RESULTS[number] = f"criterion {number}: PASS ({took:.1f}s) {detail}".rstrip()
            print(RESULTS[number])
        return run
    return wrap


@pytest.fixture(scope="module", autouse=True)
def summary(request):
    yield
    reporter = request.config.pluginmanager.get_plugin("terminalreporter")
    lines = [RESULTS[k] for k in sorted(RESULTS)]
    if reporter is not None:
        reporter.write_line("")
        for line in lines:
            reporter.write_line(line)
    else:
        print("\n".join(lines))


# ---------------------------------------------------------------- 1


def trained_two_input_nets():
    specs = [("l2", "orthogonal", "S"), ("l2", "spectral", "S"), ("linf", "linfdist", "XS"), ("linf", "sortnet", "XS")]
    for i, (norm, family, size) in enumerate(specs):
        tr, te = moons_splits(400, 600, seed=i + 1)
        threat = ThreatModel.default(norm)
        net = build_network(norm, 2, 2, size=size, family=family, seed=i + 1, init_data=tr.inputs)
        cfg = TrainConfig(epochs=40, threat=threat, batch_size=40, lr=0.1, eval_every=10, seed=i + 1)
        best = train(net, MixedDataConfig(tr, None, 0.0, batch_size=40, seed=i + 1), te, cfg).best
        yield family, best, te, threat


@criterion(1, budget_s=300)
def test_certification_soundness():
    total, violations, parts = 0, 0, []
    for family, net, te, threat in trained_two_input_nets():
        records, _ = certify_dataset(net, te.inputs, te.labels, threat)
        certified = [r for r in records if r.certified]
        for r in certified:
            violations += not soundness_oracle(net, te.inputs[r.sample_id], r, threat, grid_steps=101).sound
        total += len(certified)
        parts.append(f"{family}:{len(certified)}")
    assert total >= 1000, f"only {total} certified points"
    assert violations == 0, f"{violations} violations among {total} certified points"
    return f"{total} certified points, 0 violations ({', '.join(parts)})"


# ---------------------------------------------------------------- 2


@criterion(2, budget_s=30)
def test_spectral_oracle():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for i in range(200):
        m, n = (int(v) for v in rng.integers(1, 65, 2))
        w = rng.standard_normal((m, n))
        exact = exact_spectral_norm(w)
        worst = max(worst, abs(power_iteration(w, seed=i).sigma - exact) / exact)
    assert worst < 1e-6, f"power iteration relative error {worst:.2e}"
    symmetric = (1 + np.sqrt(5)) / 2
    fixtures = [
        (np.diag([3.0, 1.0]), 3.0),
        (np.array([[1.0, 1.0], [0.0, 1.0]]), np.sqrt((3 + np.sqrt(5)) / 2)),
        (np.array([[1.0, 1.0], [1.0, 0.0]]), symmetric),
        (np.array([[0.0, 2.0], [-2.0, 0.0]]), 2.0),
        (np.array([[1.0, 2.0], [2.0, 4.0]]), 5.0),
        (np.zeros((2, 2)), 0.0),
    ]
    for w, expected in fixtures:
        assert abs(exact_spectral_norm(w) - expected) < 1e-9, w.tolist()
    return f"worst power-iteration rel err {worst:.1e}"


# ---------------------------------------------------------------- 3


@criterion(3, budget_s=120)
def test_gradient_suite():
    worst = {}
    for kind in LayerKind:
        err = 0.0
        for seed in range(50):
            rng = np.random.default_rng(seed)
            for norm in KIND_NORMS[kind]:
                net = probe_network(kind, rng, norm)
                x = rng.uniform(-1, 1, (3, net.in_dim))
                mode = "train" if kind == LayerKind.DROPOUT else "eval"
                err = max(err, network_gradient_error(net, x, mode, seed, rng))
        worst[kind.name] = err
    worst["margin_loss"] = max(margin_loss_gradient_error(np.random.default_rng(s)) for s in range(50))
    bad = {k: v for k, v in worst.items() if not v < 1e-4}
    assert not bad, f"gradient errors above 1e-4: {bad}"
    return f"worst rel err {max(worst.values()):.1e}"


# ---------------------------------------------------------------- 4


@criterion(4, budget_s=120)
def test_orthogonality_and_lipschitz():
    rng = np.random.default_rng(4)
    ortho = 0.0
    for _ in range(200):
        n = int(rng.integers(1, 33))
        w = cayley_orthogonalize(skew(rng.standard_normal((n, n))))
        ortho = max(ortho, float(np.max(np.abs(w.T @ w - np.eye(n)))))
    assert ortho < 1e-8, f"max |W^T W - I| = {ortho:.2e}"

    excess = -np.inf
    for kind in LayerKind:
        if kind == LayerKind.LINEAR_HEAD:
            continue
        for norm in KIND_NORMS[kind]:
            for mode in (("eval", "train") if kind == LayerKind.DROPOUT else ("eval",)):
                layer = random_layer(kind, rng, 6, 5)
                c = layer_constant(layer, norm, "certify_exact")
                if mode == "train":
                    # inverted dropout scales kept units by 1 / (1 - rate)
                    c /= 1.0 - layer.dropout_rate
                excess = max(excess, empirical_lipschitz_excess(layer, norm, c, rng, mode=mode))
    # the head's pairwise logit differences against the composed bound
    for norm in ("l2", "linf"):
        net = build_network(norm, 4, 5, size="XS", seed=3, init_data=rng.uniform(0, 1, (40, 4)))
        k = lipschitz_breakdown(net).head_pairwise
        x = rng.uniform(0, 1, (10_000, 4))
        y = x + np.where(np.arange(10_000) % 2 == 0, 1e-3, 0.3)[:, None] * rng.standard_normal(x.shape)
        zx, zy = forward(net, x), forward(net, y)
        dist = norm_of(x - y, net.norm)
        for i in range(5):
            for j in range(5):
                lhs = np.abs((zx[:, i] - zx[:, j]) - (zy[:, i] - zy[:, j]))
                excess = max(excess, float(np.max(lhs - k[i, j] * dist)))
    assert excess <= 1e-9, f"empirical Lipschitz ratio exceeds bound by {excess:.2e}"
    return f"max |W^T W - I| {ortho:.1e}, max excess {excess:.1e}"


# ---------------------------------------------------------------- 5


@criterion(5, budget_s=30)
def test_mixing_contract():
    assert sum(batch_generated_counts(0.7, 50_000, 128)) == 35_000
    checked = 0
    for ratio in np.round(np.arange(11) * 0.1, 1):
        for size in (1, 10, 100, 999, 50_000):
            for batch in (1, 3, 32, 128, 1000):
                counts = batch_generated_counts(float(ratio), size, batch)
                assert sum(counts) == int(np.floor(ratio * size + 0.5 + 1e-9)), (ratio, size, batch)
                checked += 1
    # through the sampler itself
    rng = np.random.default_rng(5)
    real = LabeledDataset(rng.uniform(0, 1, (50_000, 1)), np.zeros(50_000, int))
    gen = LabeledDataset(rng.uniform(0, 1, (40_000, 1)), np.zeros(40_000, int), "generated")
    batches = mixed_epoch(MixedDataConfig(real, gen, 0.7, 50_000, 128, seed=0), 0)
    n_gen = sum(int(b.generated.sum()) for b in batches)
    assert n_gen == 35_000, n_gen
    return f"35000 generated per epoch, {checked} (ratio, size, batch) cases exact"


# ---------------------------------------------------------------- 6 and 7

SEEDS = range(5)


def digits_config(seed: int, aux: str, epochs: int = 100) -> ExperimentConfig:
    return ExperimentConfig(fixture="digits", n_train=500, n_test=1000, norm="l2", size="M", epochs=epochs,
                            batch_size=50, lr=0.1, margin_temp=1.0, eval_every=5, rank=8, floor=1e-3,
                            aux=aux, ratio=0.7, seed=seed)


@functools.lru_cache(maxsize=None)
def digits_run(seed: int, aux: str, epochs: int = 100) -> ExperimentRecord:
    with tempfile.TemporaryDirectory() as d:
        return run_training(digits_config(seed, aux, epochs), Path(d))


@criterion(6, budget_s=1200)
def test_directional_reproduction():
    base = [digits_run(s, "none") for s in SEEDS]
    aux = [digits_run(s, "5x") for s in SEEDS]
    gap_base = float(np.mean([r.generalization_gap_at_best for r in base]))
    gap_aux = float(np.mean([r.generalization_gap_at_best for r in aux]))
    cert_gain = float(np.mean([a.best.test_cert - b.best.test_cert for a, b in zip(aux, base)]))
    reduction = (gap_base - gap_aux) / gap_base
    detail = (f"gap {gap_base:.2f} -> {gap_aux:.2f} ({100 * reduction:.1f}% reduction), "
              f"certified {cert_gain:+.2f} points")
    assert gap_base >= 10.0, f"base gap {gap_base:.2f} below 10 points; {detail}"
    assert reduction >= 0.5, f"gap reduction below 50%: {detail}"
    assert cert_gain >= 2.0, f"certified gain below 2 points: {detail}"
    return detail


@criterion(7)
def test_monotone_epochs():
    short = [digits_run(s, "5x") for s in SEEDS]
    long = [digits_run(s, "5x", 200) for s in SEEDS]
    drops = [a.best.test_cert - b.best.test_cert for a, b in zip(short, long)]
    mean_drop = float(np.mean(drops))
    detail = f"mean certified change {-mean_drop:+.2f} points (per seed {[round(-d, 2) for d in drops]})"
    assert mean_drop <= 0.5, f"doubling epochs lost more than 0.5 points: {detail}"
    return detail


# ---------------------------------------------------------------- 8

# family, epochs, (clean, cert) per aux amount, reported delta, best column
REFERENCE_ROWS = [
    ("linfdist", 800, [(57.34, 34.25), (61.04, 36.98), (60.35, 36.00), (60.64, 36.30)], 2.73, "1x"),
    ("linfdist", 1600, [(57.19, 34.00), (62.02, 37.53), (61.39, 37.20), (61.40, 37.03)], 3.53, "1x"),
    ("sortnet_dropout", 3000, [(53.38, 39.72), (52.50, 41.23), (52.78, 40.35), (53.29, 41.32)], 1.60, "10x"),
    ("sortnet_dropout", 6000, [(53.36, 39.05), (52.41, 40.70), (52.57, 40.23), (53.09, 40.65)], 1.65, "1x"),
    ("sortnet", 3000, [(56.09, 37.44), (54.28, 41.51), (54.36, 41.71), (54.18, 41.41)], 4.27, "5x"),
    ("sortnet", 6000, [(54.81, 36.50), (54.72, 41.76), (54.36, 41.52), (54.75, 41.78)], 5.28, "10x"),
]


def reference_records():
    for family, epochs, cells, _, _ in REFERENCE_ROWS:
        for amount, (clean, cert) in zip(AUX_AMOUNTS, cells):
            yield ExperimentRecord([EpochRow(epochs - 1, 0.0, 100.0, clean, 0.0, cert, 0.0)],
                                   {"model_family": family, "model_size": "-", "epochs": str(epochs),
                                    "aux_amount": amount})


@criterion(8, budget_s=60)
def test_analysis_oracles():
    rng = np.random.default_rng(8)
    worst = 0.0
    for trial in range(100):
        n = int(rng.integers(2, 60))
        x, y = rng.uniform(-50, 50, n), rng.normal(0, 10, n)
        if np.ptp(x) == 0:
            continue
        a = np.stack([x, np.ones(n)], axis=1)
        slope, intercept = np.linalg.lstsq(a, y, rcond=None)[0]
        f = fit_line(x, y)
        worst = max(worst, abs(f.slope - slope), abs(f.intercept - intercept))
    fam = gap_gain_fit([GapGainPoint(g, 0.3 * g + 1, "a", "5x") for g in (1.0, 4.0, 9.0)])["a"]
    worst = max(worst, abs(fam.slope - 0.3), abs(fam.intercept - 1.0))
    assert worst < 1e-9, f"fit deviates from normal equations by {worst:.2e}"

    for seed in range(5):
        r = np.random.default_rng(seed)
        x = r.uniform(0, 1, (300, 2))
        y = (x[:, 0] > x[:, 1]).astype(int)
        threat = ThreatModel("l2", 0.02)
        ra, sa = certify_dataset(build_network("l2", 2, 2, size="XS", seed=seed), x, y, threat)
        rb, sb = certify_dataset(build_network("l2", 2, 2, size="XS", seed=seed + 50), x, y, threat)
        cm = certification_confusion(ra, rb)
        assert cm.clean_acc("a") == sa.clean_acc and cm.certified_acc("a") == sa.certified_acc
        assert cm.clean_acc("b") == sb.clean_acc and cm.certified_acc("b") == sb.certified_acc

    table = comparison_table(list(reference_records()))
    by_key = {(row.key[0], int(row.key[2])): row for row in table.rows}
    for family, epochs, _, delta, best in REFERENCE_ROWS:
        row = by_key[(family, epochs)]
        assert f"{row.delta_cert:+.2f}" == f"{delta:+.2f}", (family, epochs, row.delta_cert)
        assert row.best_amount == best, (family, epochs, row.best_amount)
    return f"fit err {worst:.1e}; {len(REFERENCE_ROWS)} reference rows reproduce their deltas"


# ---------------------------------------------------------------- 9

PIPELINE_CFG = """\
fixture = moons
n_train = 150
n_test = 100
epochs = 4
batch_size = 25
lr = 0.1
size = XS
epsilon = 1/50
sweep_sizes = XS,S
"""


def cli(*argv):
    with contextlib.redirect_stdout(io.StringIO()), contextlib.redirect_stderr(io.StringIO()):
        code = main([str(a) for a in argv])
    assert code == 0, argv
    return code


def run_pipeline(root: Path):
    root.mkdir(parents=True)
    cfg = root / "exp.cfg"
    cfg.write_text(PIPELINE_CFG)
    cli("fixture", "moons", "--out", root / "fx", "--n-train", 150, "--n-test", 100)
    cli("generate", cfg, "--out", root / "pools")
    cli("train", cfg, "--out", root / "run", "--aux", "5x")
    cli("certify", root / "run" / "best.lipn", root / "fx" / "test.ldst", "--out", root / "cert", "--oracle")
    cli("sweep", "size", cfg, "--out", root / "sweep")
    cli("analyze", root / "sweep", "--out", root / "analysis")


@criterion(9, budget_s=300)
def test_determinism(tmp_path):
    run_pipeline(tmp_path / "a")
    run_pipeline(tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*")
                   if p.is_file() and p.suffix in (".csv", ".ldst", ".lipn", ".svg", ".txt"))
    csvs = [p for p in files if p.suffix == ".csv"]
    assert len(csvs) >= 15, [str(p) for p in csvs]
    differ = [str(p) for p in files if (tmp_path / "a" / p).read_bytes() != (tmp_path / "b" / p).read_bytes()]
    assert not differ, f"outputs differ between reruns: {differ}"
    return f"{len(csvs)} CSV files ({len(files)} artifacts) byte-identical across reruns"


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
