import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from certkit.errors import ConfigError, DimensionError, FormatError, StateError, UnsupportedVersionError
from certkit.lipnet import (
    LayerKind,
    LayerSpec,
    Network,
    NormKind,
    backward,
    build_network,
    checkpoint_bytes,
    forward,
    forward_tape,
    layer_constant,
    lipschitz_breakdown,
    load_checkpoint,
    network_from_bytes,
    save_checkpoint,
)

from oracles import (
    KIND_NORMS,
    empirical_lipschitz_excess,
    network_gradient_error,
    probe_network,
    random_layer,
)


def head(w, b=None):
    w = np.asarray(w, dtype=float)
    return LayerSpec(LayerKind.LINEAR_HEAD, w.shape[1], w.shape[0],
                     {"weight": w, "bias": np.zeros(w.shape[0]) if b is None else b})


def test_identity_head_forward():
    net = Network((head(np.eye(2)),), "l2")
    np.testing.assert_array_equal(forward(net, [1.0, 2.0]), [[1.0, 2.0]])


def test_linf_dist_forward():
    unit = LayerSpec(LayerKind.LINF_DIST, 2, 1, {"weight": [[0.0, 1.0]], "bias": [0.0]})
    net = Network((unit, head([[1.0]])), "linf")
    assert forward(net, [0.2, 0.8])[0, 0] == pytest.approx(0.2, abs=1e-15)


def test_minmax_sort_forward_and_odd_unit():
    sort = LayerSpec(LayerKind.MINMAX_SORT, 4, 4)
    net = Network((sort, head(np.eye(4))), "l2")
    np.testing.assert_array_equal(forward(net, [3.0, 1.0, 0.0, 5.0]), [[1.0, 3.0, 0.0, 5.0]])
    odd = Network((LayerSpec(LayerKind.MINMAX_SORT, 3, 3), head(np.eye(3))), "linf")
    np.testing.assert_array_equal(forward(odd, [2.0, 1.0, -7.0]), [[1.0, 2.0, -7.0]])


def test_head_gradient_is_outer_sum_of_inputs():
    net = Network((head(np.ones((3, 2))),), "l2")
    x = np.array([[1.0, 2.0], [3.0, -1.0]])
    _, tape = forward_tape(net, x)
    grads, gx = backward(net, tape, np.ones((2, 3)))
    np.testing.assert_array_equal(grads[0]["weight"], np.tile(x.sum(axis=0), (3, 1)))
    np.testing.assert_array_equal(grads[0]["bias"], [2.0, 2.0, 2.0])
    np.testing.assert_array_equal(gx, np.full((2, 2), 3.0))


def test_linf_dist_gradient_on_unique_max():
    unit = LayerSpec(LayerKind.LINF_DIST, 3, 1, {"weight": [[0.0, 0.0, 0.0]], "bias": [0.0]})
    net = Network((unit, head([[1.0]])), "linf")
    _, tape = forward_tape(net, [0.1, -0.5, 0.2])
    _, gx = backward(net, tape, [[1.0]])
    np.testing.assert_array_equal(gx, [[0.0, -1.0, 0.0]])


def test_linf_dist_ties_pick_lowest_index():
    unit = LayerSpec(LayerKind.LINF_DIST, 2, 1, {"weight": [[0.0, 0.0]], "bias": [0.0]})
    net = Network((unit, head([[1.0]])), "linf")
    _, tape = forward_tape(net, [0.3, -0.3])
    _, gx = backward(net, tape, [[1.0]])
    np.testing.assert_array_equal(gx, [[1.0, 0.0]])


def test_backward_needs_matching_tape():
    net = Network((head(np.eye(2)),), "l2")
    with pytest.raises(StateError):
        backward(net, None, [[1.0, 1.0]])
    other = Network((head(np.eye(2)),), "l2")
    _, tape = forward_tape(other, [1.0, 1.0])
    with pytest.raises(StateError):
        backward(net, tape, [[1.0, 1.0]])


def test_forward_rejects_wrong_width():
    net = Network((head(np.eye(2)),), "l2")
    with pytest.raises(DimensionError):
        forward(net, np.ones((1, 3)))


@pytest.mark.parametrize("kind", list(LayerKind))
def test_layer_gradients_match_finite_differences(kind):
    worst = 0.0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        for norm in KIND_NORMS[kind]:
            net = probe_network(kind, rng, norm)
            x = rng.uniform(-1, 1, (3, net.in_dim))
            mode = "train" if kind == LayerKind.DROPOUT else "eval"
            worst = max(worst, network_gradient_error(net, x, mode, seed, rng))
    assert worst < 1e-4


def test_built_network_gradient_matches_finite_differences():
    for seed in range(5):
        for norm in ("l2", "linf"):
            rng = np.random.default_rng(seed)
            net = build_network(norm, 3, 3, size="XS", width=4, depth=2, seed=seed,
                                init_data=rng.uniform(0, 1, (20, 3)), dropout_rate=0.2)
            x = rng.uniform(0, 1, (4, 3))
            assert network_gradient_error(net, x, "train", seed, rng) < 1e-4


def test_breakdown_orthogonal_sort_identity_head():
    ortho = random_layer(LayerKind.ORTHOGONAL_DENSE, np.random.default_rng(0), 2, 2)
    net = Network((ortho, LayerSpec(LayerKind.MINMAX_SORT, 2, 2), head(np.eye(2))), "l2")
    bd = lipschitz_breakdown(net)
    assert bd.per_layer == (1.0, 1.0) and bd.backbone == 1.0
    assert bd.head_pairwise[0, 1] == pytest.approx(math.sqrt(2), rel=1e-15)


def test_breakdown_linf_uses_l1_dual():
    unit = random_layer(LayerKind.LINF_DIST, np.random.default_rng(0), 4, 3)
    net = Network((unit, head([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])), "linf")
    bd = lipschitz_breakdown(net)
    assert bd.backbone == 1.0 and bd.head_pairwise[0, 1] == 2.0


def test_breakdown_invariants_random_nets():
    for seed in range(20):
        net = build_network("l2", 5, 4, family="spectral", width=6, depth=3, seed=seed)
        exact = lipschitz_breakdown(net, "certify_exact")
        est = lipschitz_breakdown(net, "train_estimate")
        assert exact.backbone == pytest.approx(np.prod(exact.per_layer), rel=1e-12)
        assert exact.backbone >= est.backbone - 1e-9
        k = exact.head_pairwise
        np.testing.assert_array_equal(k, k.T)
        assert np.all(np.diag(k) == 0)


def test_spectral_backbone_bounds_empirical_slope():
    rng = np.random.default_rng(1)
    net = build_network("l2", 4, 3, family="spectral", width=8, depth=3, seed=3)
    bd = lipschitz_breakdown(net)
    x = rng.uniform(0, 1, (10_000, 4))
    y = x + rng.standard_normal(x.shape) * 0.05
    fx, fy = forward(net, x), forward(net, y)
    # pairwise logit differences against the pairwise constants
    worst = 0.0
    for i in range(3):
        for j in range(i + 1, 3):
            slope = np.abs((fx[:, i] - fx[:, j]) - (fy[:, i] - fy[:, j])) / np.linalg.norm(x - y, axis=1)
            worst = max(worst, float(slope.max() - bd.head_pairwise[i, j]))
    assert worst <= 1e-9


@pytest.mark.parametrize("kind", [k for k in LayerKind if k != LayerKind.LINEAR_HEAD])
def test_empirical_lipschitz_per_layer_kind(kind):
    rng = np.random.default_rng(int(kind))
    for norm in KIND_NORMS[kind]:
        layer = random_layer(kind, rng, 6, 5)
        c = layer_constant(layer, norm, "certify_exact")
        assert empirical_lipschitz_excess(layer, norm, c, rng) <= 1e-9


def test_layer_norm_legality():
    ortho = random_layer(LayerKind.ORTHOGONAL_DENSE, np.random.default_rng(0), 2, 2)
    with pytest.raises(ConfigError):
        Network((ortho, head(np.eye(2))), "linf")
    unit = random_layer(LayerKind.LINF_DIST, np.random.default_rng(0), 2, 2)
    with pytest.raises(ConfigError):
        Network((unit, head(np.eye(2))), "l2")
    with pytest.raises(ConfigError):
        layer_constant(unit, NormKind.L2, "certify_exact")
    with pytest.raises(ConfigError):
        Network((head(np.eye(2)), head(np.eye(2))), "l2")


def test_orthogonal_preserves_norm_rectangular():
    rng = np.random.default_rng(4)
    for d_in, d_out in [(3, 5), (5, 5), (6, 2)]:
        layer = random_layer(LayerKind.ORTHOGONAL_DENSE, rng, d_in, d_out)
        w = layer.effective_weight()
        assert np.linalg.norm(w, 2) <= 1.0 + 1e-12
        if d_out >= d_in:
            x = rng.standard_normal(d_in)
            assert abs(np.linalg.norm(w @ x) - np.linalg.norm(x)) <= 1e-8 * np.linalg.norm(x)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=9))
def test_minmax_is_per_pair_permutation(values):
    d = len(values)
    net = Network((LayerSpec(LayerKind.MINMAX_SORT, d, d), head(np.eye(d))), "l2")
    out = forward(net, values)[0]
    for i in range(0, d - 1, 2):
        assert sorted(out[i:i + 2]) == sorted(values[i:i + 2])
    if d % 2:
        assert out[-1] == values[-1]


def test_dropout_eval_identity_and_train_replay():
    drop = LayerSpec(LayerKind.DROPOUT, 50, 50, dropout_rate=0.4)
    net = Network((drop, head(np.eye(50))), "l2")
    x = np.random.default_rng(0).uniform(0.5, 1.0, (8, 50))
    np.testing.assert_array_equal(forward(net, x, "eval"), x)
    a, b = forward(net, x, "train", seed=9), forward(net, x, "train", seed=9)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, forward(net, x, "train", seed=10))
    kept = a != 0
    np.testing.assert_allclose(a[kept], x[kept] / 0.6, rtol=1e-15)
    assert 0.45 < kept.mean() < 0.75


def test_checkpoint_round_trip_bit_exact(tmp_path):
    for norm in ("l2", "linf"):
        net = build_network(norm, 6, 3, size="XS", dropout_rate=0.25, seed=2,
                            init_data=np.random.default_rng(0).uniform(0, 1, (10, 6)))
        blob = checkpoint_bytes(net)
        again = network_from_bytes(blob)
        assert checkpoint_bytes(again) == blob
        for a, b in zip(net.layers, again.layers):
            assert a.kind == b.kind and a.dropout_rate == b.dropout_rate
            for k in a.params:
                assert a.params[k].tobytes() == b.params[k].tobytes()
        save_checkpoint(net, tmp_path / f"{norm}.lipn")
        assert checkpoint_bytes(load_checkpoint(tmp_path / f"{norm}.lipn")) == blob


def test_checkpoint_header_layout():
    net = Network((head(np.eye(2)),), "linf")
    blob = checkpoint_bytes(net)
    assert blob[:4] == b"LIPN"
    assert struct.unpack_from("<IBI", blob, 4) == (1, 1, 1)
    assert struct.unpack_from("<BIId", blob, 13) == (int(LayerKind.LINEAR_HEAD), 2, 2, 0.0)
    assert len(blob) == 13 + 17 + 8 * (4 + 2)


def test_checkpoint_truncation_and_version_errors():
    blob = checkpoint_bytes(build_network("l2", 4, 2, size="XS", seed=0))
    for cut in (0, 3, 12, 20, len(blob) - 1):
        with pytest.raises(FormatError, match="offset"):
            network_from_bytes(blob[:cut])
    bumped = blob[:4] + struct.pack("<I", 99) + blob[8:]
    with pytest.raises(UnsupportedVersionError):
        network_from_bytes(bumped)
    with pytest.raises(FormatError):
        network_from_bytes(b"NOPE" + blob[4:])
    with pytest.raises(FormatError):
        network_from_bytes(blob + b"\x00")


def test_build_network_rejects_bad_family():
    with pytest.raises(ConfigError):
        build_network("l2", 4, 2, family="linfdist")
    with pytest.raises(ConfigError):
        build_network("l2", 4, 2, size="XXL")
