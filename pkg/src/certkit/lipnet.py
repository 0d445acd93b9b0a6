"""Lipschitz-bounded layers, the network container and its checkpoint format.

Every layer kind exposes a provable Lipschitz constant for the norm its
network is built for. The network's backbone constant is the product of the
per-layer constants; the linear head contributes one constant per pair of
classes (dual norm of the difference of two weight rows).
"""
from __future__ import annotations

import enum
import io
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, FormatError, StateError, UnsupportedVersionError
from .numerics import (
    as_tensor,
    cayley_backward,
    cayley_orthogonalize,
    exact_spectral_norm,
    power_iteration,
)

# seed used for every training-time spectral estimate; fixed so forward is pure
SPECTRAL_SEED = 0
SPECTRAL_TOL = 1e-12
SPECTRAL_MAX_ITER = 2000


class NormKind(enum.Enum):
    L2 = "l2"
    LINF = "linf"

    @classmethod
    def parse(cls, value) -> "NormKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ConfigError(f"unknown norm {value!r}; expected l2 or linf") from None


class LayerKind(enum.IntEnum):
    SPECTRAL_DENSE = 1
    ORTHOGONAL_DENSE = 2
    LINF_DIST = 3
    MINMAX_SORT = 4
    DROPOUT = 5
    LINEAR_HEAD = 6


_L2_ONLY = {LayerKind.SPECTRAL_DENSE, LayerKind.ORTHOGONAL_DENSE}
_LINF_ONLY = {LayerKind.LINF_DIST}


def param_shapes(kind: LayerKind, in_dim: int, out_dim: int) -> dict[str, tuple[int, ...]]:
    """Parameter names and shapes, in checkpoint order."""
    if kind in (LayerKind.SPECTRAL_DENSE, LayerKind.LINF_DIST, LayerKind.LINEAR_HEAD):
        return {"weight": (out_dim, in_dim), "bias": (out_dim,)}
    if kind == LayerKind.ORTHOGONAL_DENSE:
        n = max(in_dim, out_dim)
        return {"skew": (n, n), "bias": (out_dim,)}
    return {}


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    in_dim: int
    out_dim: int
    params: Mapping[str, np.ndarray] = field(default_factory=dict)
    dropout_rate: float = 0.0

    def __post_init__(self):
        kind = LayerKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if self.in_dim < 1 or self.out_dim < 1:
            raise ConfigError(f"{kind.name}: dims must be positive, got {self.in_dim}->{self.out_dim}")
        if kind in (LayerKind.MINMAX_SORT, LayerKind.DROPOUT) and self.in_dim != self.out_dim:
            raise ConfigError(f"{kind.name} must preserve dimension")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout rate must lie in [0, 1), got {self.dropout_rate}")
        if kind != LayerKind.DROPOUT and self.dropout_rate != 0.0:
            raise ConfigError("dropout_rate is only meaningful for Dropout layers")
        shapes = param_shapes(kind, self.in_dim, self.out_dim)
        if set(self.params) != set(shapes):
            raise ConfigError(f"{kind.name} expects params {sorted(shapes)}, got {sorted(self.params)}")
        clean = {}
        for name, shape in shapes.items():
            arr = as_tensor(self.params[name], f"{kind.name}.{name}")
            if arr.shape != shape:
                raise DimensionError(f"{kind.name}.{name} has shape {arr.shape}, expected {shape}")
            arr = arr.copy()
            arr.setflags(write=False)
            clean[name] = arr
        object.__setattr__(self, "params", clean)

    def with_params(self, params: Mapping[str, np.ndarray]) -> "LayerSpec":
        return replace(self, params=dict(params))

    def effective_weight(self) -> np.ndarray:
        """The matrix actually applied by dense kinds (normalized / orthogonalized)."""
        if self.kind == LayerKind.ORTHOGONAL_DENSE:
            return cayley_orthogonalize(self.params["skew"])[: self.out_dim, : self.in_dim]
        if self.kind == LayerKind.SPECTRAL_DENSE:
            w = self.params["weight"]
            est = power_iteration(w, SPECTRAL_TOL, SPECTRAL_MAX_ITER, SPECTRAL_SEED)
            return w / est.sigma if est.sigma > 0 else w
        if self.kind == LayerKind.LINEAR_HEAD:
            return self.params["weight"]
        raise ValueError(f"{self.kind.name} has no weight matrix")


@dataclass(frozen=True)
class Network:
    layers: tuple[LayerSpec, ...]
    norm: NormKind

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "norm", NormKind.parse(self.norm))
        if not self.layers:
            raise ConfigError("network has no layers")
        heads = [i for i, l in enumerate(self.layers) if l.kind == LayerKind.LINEAR_HEAD]
        if heads != [len(self.layers) - 1]:
            raise ConfigError("network needs exactly one LinearHead, in final position")
        for i, (a, b) in enumerate(zip(self.layers, self.layers[1:])):
            if a.out_dim != b.in_dim:
                raise DimensionError(f"layer {i} outputs {a.out_dim} but layer {i + 1} expects {b.in_dim}")
        for layer in self.layers:
            if self.norm == NormKind.LINF and layer.kind in _L2_ONLY:
                raise ConfigError(f"{layer.kind.name} is not 1-Lipschitz under linf; use it in l2 networks")
            if self.norm == NormKind.L2 and layer.kind in _LINF_ONLY:
                raise ConfigError(f"{layer.kind.name} is only legal in linf networks")

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def num_classes(self) -> int:
        return self.layers[-1].out_dim

    @property
    def head(self) -> LayerSpec:
        return self.layers[-1]

    def with_layer_params(self, params: Sequence[Mapping[str, np.ndarray]]) -> "Network":
        layers = [l.with_params(p) if l.params else l for l, p in zip(self.layers, params)]
        return replace(self, layers=tuple(layers))


# ---------------------------------------------------------------- forward/backward


@dataclass
class Tape:
    """Per-layer intermediates recorded by :func:`forward_tape`."""

    net: Network
    mode: str
    seed: int
    caches: list = field(default_factory=list)


def _forward_layer(layer: LayerSpec, h: np.ndarray, mode: str, rng):
    kind = layer.kind
    p = layer.params
    if kind == LayerKind.SPECTRAL_DENSE:
        w = p["weight"]
        est = power_iteration(w, SPECTRAL_TOL, SPECTRAL_MAX_ITER, SPECTRAL_SEED)
        sigma = est.sigma if est.sigma > 0 else 1.0
        return h @ (w / sigma).T + p["bias"], (h, sigma, est.u, est.v)
    if kind == LayerKind.ORTHOGONAL_DENSE:
        full = cayley_orthogonalize(p["skew"])
        w = full[: layer.out_dim, : layer.in_dim]
        return h @ w.T + p["bias"], (h, full)
    if kind == LayerKind.LINEAR_HEAD:
        return h @ p["weight"].T + p["bias"], (h,)
    if kind == LayerKind.LINF_DIST:
        diff = h[:, None, :] - p["weight"][None, :, :]
        absd = np.abs(diff)
        # argmax picks the lowest index among ties
        idx = np.argmax(absd, axis=2)
        dist = np.take_along_axis(absd, idx[:, :, None], axis=2)[:, :, 0]
        sign = np.where(np.take_along_axis(diff, idx[:, :, None], axis=2)[:, :, 0] >= 0, 1.0, -1.0)
        return dist + p["bias"], (h.shape, idx, sign)
    if kind == LayerKind.MINMAX_SORT:
        out = h.copy()
        npair = layer.in_dim // 2
        a = h[:, 0 : 2 * npair : 2]
        b = h[:, 1 : 2 * npair : 2]
        swap = a > b
        out[:, 0 : 2 * npair : 2] = np.minimum(a, b)
        out[:, 1 : 2 * npair : 2] = np.maximum(a, b)
        return out, (swap,)
    if kind == LayerKind.DROPOUT:
        rate = layer.dropout_rate
        if mode != "train" or rate == 0.0:
            return h, (None,)
        mask = (rng.random(h.shape) >= rate) / (1.0 - rate)
        return h * mask, (mask,)
    raise ValueError(f"unhandled layer kind {kind}")


def _backward_layer(layer: LayerSpec, cache, g: np.ndarray):
    kind = layer.kind
    p = layer.params
    if kind == LayerKind.SPECTRAL_DENSE:
        h, sigma, u, v = cache
        w = p["weight"]
        g_eff = g.T @ h
        gw = g_eff / sigma
        if u is not None:
            # d sigma / dW = u vᵀ at the estimated top singular pair
            gw = gw - (np.sum(g_eff * w) / sigma**2) * np.outer(u, v)
        return {"weight": gw, "bias": g.sum(axis=0)}, g @ (w / sigma)
    if kind == LayerKind.ORTHOGONAL_DENSE:
        h, full = cache
        w = full[: layer.out_dim, : layer.in_dim]
        g_full = np.zeros_like(full)
        g_full[: layer.out_dim, : layer.in_dim] = g.T @ h
        g_skew = cayley_backward(p["skew"], full, g_full)
        return {"skew": g_skew, "bias": g.sum(axis=0)}, g @ w
    if kind == LayerKind.LINEAR_HEAD:
        (h,) = cache
        return {"weight": g.T @ h, "bias": g.sum(axis=0)}, g @ p["weight"]
    if kind == LayerKind.LINF_DIST:
        shape, idx, sign = cache
        batch, d = shape
        units = layer.out_dim
        gs = g * sign  # (batch, units)
        gx = np.zeros(shape)
        # scatter each unit's contribution onto its arg-max coordinate
        rows = np.repeat(np.arange(batch), units)
        np.add.at(gx, (rows, idx.reshape(-1)), gs.reshape(-1))
        gw = np.zeros((units, d))
        cols = np.tile(np.arange(units), batch)
        np.add.at(gw, (cols, idx.reshape(-1)), -gs.reshape(-1))
        return {"weight": gw, "bias": g.sum(axis=0)}, gx
    if kind == LayerKind.MINMAX_SORT:
        (swap,) = cache
        gx = g.copy()
        npair = layer.in_dim // 2
        ga = g[:, 0 : 2 * npair : 2]
        gb = g[:, 1 : 2 * npair : 2]
        gx[:, 0 : 2 * npair : 2] = np.where(swap, gb, ga)
        gx[:, 1 : 2 * npair : 2] = np.where(swap, ga, gb)
        return {}, gx
    if kind == LayerKind.DROPOUT:
        (mask,) = cache
        return {}, g if mask is None else g * mask
    raise ValueError(f"unhandled layer kind {kind}")


def _check_mode(mode: str) -> None:
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")


def _prepare_input(net: Network, x) -> np.ndarray:
    x = as_tensor(x, "x")
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.in_dim:
        raise DimensionError(f"network expects inputs of width {net.in_dim}, got shape {x.shape}")
    return x


def forward_tape(net: Network, x, mode: str = "eval", seed: int = 0) -> tuple[np.ndarray, Tape]:
    _check_mode(mode)
    h = _prepare_input(net, x)
    rng = np.random.default_rng(seed)
    tape = Tape(net=net, mode=mode, seed=seed)
    for layer in net.layers:
        h, cache = _forward_layer(layer, h, mode, rng)
        tape.caches.append(cache)
    return h, tape


def forward(net: Network, x, mode: str = "eval", seed: int = 0) -> np.ndarray:
    """Logits for a batch (or a single sample, returned as a 1-row batch)."""
    return forward_tape(net, x, mode, seed)[0]


def backward(net: Network, tape: Tape | None, grad_logits) -> tuple[list[dict[str, np.ndarray]], np.ndarray]:
    """Parameter gradients (one dict per layer) and the input gradient."""
    if tape is None or tape.net is not net or len(tape.caches) != len(net.layers):
        raise StateError("backward needs the tape recorded by forward_tape on the same network")
    g = as_tensor(grad_logits, "grad_logits")
    if g.ndim == 1:
        g = g[None, :]
    grads: list[dict[str, np.ndarray]] = [None] * len(net.layers)  # type: ignore[list-item]
    for i in range(len(net.layers) - 1, -1, -1):
        grads[i], g = _backward_layer(net.layers[i], tape.caches[i], g)
    return grads, g


# ---------------------------------------------------------------- Lipschitz bounds


@dataclass(frozen=True)
class LipschitzBreakdown:
    per_layer: tuple[float, ...]
    backbone: float
    head_pairwise: np.ndarray
    norm: NormKind
    mode: str

    @property
    def head_dual_norms(self) -> np.ndarray:
        """Pairwise dual norms of head row differences (without the backbone factor)."""
        if self.backbone == 0:
            return np.zeros_like(self.head_pairwise)
        return self.head_pairwise / self.backbone


def dual_norm(v: np.ndarray, norm: NormKind, axis=-1) -> np.ndarray:
    if norm == NormKind.L2:
        return np.sqrt(np.sum(v * v, axis=axis))
    return np.sum(np.abs(v), axis=axis)


def layer_constant(layer: LayerSpec, norm: NormKind, bound_mode: str) -> float:
    kind = layer.kind
    if norm == NormKind.LINF and kind in _L2_ONLY or norm == NormKind.L2 and kind in _LINF_ONLY:
        raise ConfigError(f"{kind.name} has no bound under {norm.value}")
    if kind == LayerKind.SPECTRAL_DENSE:
        w_eff = layer.effective_weight()
        if bound_mode == "certify_exact":
            return exact_spectral_norm(w_eff)
        return power_iteration(w_eff, SPECTRAL_TOL, SPECTRAL_MAX_ITER, SPECTRAL_SEED).sigma
    # orthogonal, distance, sort and (eval-mode) dropout layers are 1-Lipschitz
    return 1.0


def lipschitz_breakdown(net: Network, bound_mode: str = "certify_exact") -> LipschitzBreakdown:
    if bound_mode not in ("train_estimate", "certify_exact"):
        raise ConfigError(f"unknown bound mode {bound_mode!r}")
    per_layer = tuple(layer_constant(l, net.norm, bound_mode) for l in net.layers[:-1])
    backbone = float(np.prod(per_layer)) if per_layer else 1.0
    w = net.head.params["weight"]
    k = backbone * dual_norm(w[:, None, :] - w[None, :, :], net.norm)
    return LipschitzBreakdown(per_layer, backbone, k, net.norm, bound_mode)


def head_pairwise_grad(net: Network, grad_k: np.ndarray, backbone: float) -> np.ndarray:
    """Push dL/dK back onto the head weight rows (backbone held constant)."""
    w = net.head.params["weight"]
    diff = w[:, None, :] - w[None, :, :]
    if net.norm == NormKind.L2:
        nrm = np.sqrt(np.sum(diff * diff, axis=-1, keepdims=True))
        dirs = np.divide(diff, nrm, out=np.zeros_like(diff), where=nrm > 0)
    else:
        dirs = np.sign(diff)
    coeff = (grad_k + grad_k.T)[:, :, None] * backbone
    # K[i][j] depends on w_i with +dirs[i,j] and on w_j with -dirs[i,j]; symmetric sum covers both
    return np.sum(coeff * dirs, axis=1)


# ---------------------------------------------------------------- construction

SIZE_PRESETS: dict[str, tuple[int, int]] = {
    # size -> (hidden blocks, width)
    "XS": (1, 32),
    "S": (2, 64),
    "M": (3, 96),
    "L": (4, 128),
}

FAMILIES = {
    "orthogonal": NormKind.L2,
    "spectral": NormKind.L2,
    "linfdist": NormKind.LINF,
    "sortnet": NormKind.LINF,
}


def default_family(norm: NormKind) -> str:
    return "orthogonal" if NormKind.parse(norm) == NormKind.L2 else "linfdist"


def build_network(
    norm,
    in_dim: int,
    num_classes: int,
    size: str = "S",
    family: str | None = None,
    dropout_rate: float = 0.0,
    seed: int = 0,
    init_data: np.ndarray | None = None,
    width: int | None = None,
    depth: int | None = None,
) -> Network:
    """Build a preset network.

    ``init_data`` (rows of training inputs) seeds distance-unit prototypes;
    without it prototypes are drawn uniformly from [0, 1].
    """
    norm = NormKind.parse(norm)
    family = family or default_family(norm)
    if family not in FAMILIES:
        raise ConfigError(f"unknown family {family!r}; choose from {sorted(FAMILIES)}")
    if FAMILIES[family] != norm:
        raise ConfigError(f"family {family!r} requires norm {FAMILIES[family].value}, got {norm.value}")
    if size not in SIZE_PRESETS:
        raise ConfigError(f"unknown size {size!r}; choose from {sorted(SIZE_PRESETS)}")
    blocks, w_default = SIZE_PRESETS[size]
    blocks = depth or blocks
    width = width or w_default
    rng = np.random.default_rng(seed)

    layers: list[LayerSpec] = []
    d = in_dim
    probe = None
    if init_data is not None:
        init_data = as_tensor(init_data, "init_data")
        take = rng.choice(len(init_data), size=width, replace=len(init_data) < width)
        probe = init_data[take]

    def add(layer):
        nonlocal probe
        layers.append(layer)
        if probe is not None:
            probe = _forward_layer(layer, probe, "eval", None)[0]

    for _ in range(blocks):
        if family == "orthogonal":
            n = max(d, width)
            add(LayerSpec(LayerKind.ORTHOGONAL_DENSE, d, width,
                          {"skew": 0.1 * rng.standard_normal((n, n)), "bias": np.zeros(width)}))
            add(LayerSpec(LayerKind.MINMAX_SORT, width, width))
        elif family == "spectral":
            lim = 1.0 / np.sqrt(d)
            add(LayerSpec(LayerKind.SPECTRAL_DENSE, d, width,
                          {"weight": rng.uniform(-lim, lim, (width, d)), "bias": np.zeros(width)}))
            add(LayerSpec(LayerKind.MINMAX_SORT, width, width))
        else:
            if probe is not None:
                protos = probe + 0.01 * rng.standard_normal(probe.shape)
            else:
                protos = rng.uniform(0.0, 1.0, (width, d))
            add(LayerSpec(LayerKind.LINF_DIST, d, width, {"weight": protos, "bias": np.zeros(width)}))
            if family == "sortnet":
                add(LayerSpec(LayerKind.MINMAX_SORT, width, width))
        if dropout_rate > 0:
            add(LayerSpec(LayerKind.DROPOUT, width, width, dropout_rate=dropout_rate))
        d = width

    scale = 1.0 / np.sqrt(d) if norm == NormKind.L2 else 1.0 / d
    layers.append(LayerSpec(LayerKind.LINEAR_HEAD, d, num_classes,
                            {"weight": scale * rng.standard_normal((num_classes, d)),
                             "bias": np.zeros(num_classes)}))
    return Network(tuple(layers), norm)


# ---------------------------------------------------------------- checkpoint I/O

CHECKPOINT_MAGIC = b"LIPN"
CHECKPOINT_VERSION = 1
_NORM_TAGS = {NormKind.L2: 0, NormKind.LINF: 1}
_HEADER = struct.Struct("<4sIBI")
_LAYER = struct.Struct("<BIId")


def checkpoint_bytes(net: Network) -> bytes:
    buf = io.BytesIO()
    buf.write(_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, _NORM_TAGS[net.norm], len(net.layers)))
    for layer in net.layers:
        buf.write(_LAYER.pack(int(layer.kind), layer.in_dim, layer.out_dim, layer.dropout_rate))
        for name in param_shapes(layer.kind, layer.in_dim, layer.out_dim):
            buf.write(np.ascontiguousarray(layer.params[name], dtype="<f8").tobytes())
    return buf.getvalue()


def _need(data: bytes, offset: int, count: int, what: str) -> None:
    if offset + count > len(data):
        raise FormatError(f"truncated checkpoint while reading {what}: need {count} bytes, "
                          f"{len(data) - offset} left", offset)


def network_from_bytes(data: bytes) -> Network:
    _need(data, 0, _HEADER.size, "header")
    magic, version, norm_tag, count = _HEADER.unpack_from(data, 0)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}", 0)
    if version != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint version {version}", 4)
    norms = {v: k for k, v in _NORM_TAGS.items()}
    if norm_tag not in norms:
        raise FormatError(f"unknown norm tag {norm_tag}", 8)
    offset = _HEADER.size
    layers = []
    for i in range(count):
        _need(data, offset, _LAYER.size, f"layer {i} header")
        kind_tag, in_dim, out_dim, rate = _LAYER.unpack_from(data, offset)
        try:
            kind = LayerKind(kind_tag)
        except ValueError:
            raise FormatError(f"unknown layer kind {kind_tag}", offset) from None
        offset += _LAYER.size
        params = {}
        for name, shape in param_shapes(kind, in_dim, out_dim).items():
            nbytes = 8 * int(np.prod(shape))
            _need(data, offset, nbytes, f"layer {i} {name}")
            params[name] = np.frombuffer(data, dtype="<f8", count=nbytes // 8, offset=offset).reshape(shape)
            offset += nbytes
        layers.append(LayerSpec(kind, in_dim, out_dim, params, rate))
    if offset != len(data):
        raise FormatError(f"{len(data) - offset} trailing bytes after last layer", offset)
    return Network(tuple(layers), norms[norm_tag])


def save_checkpoint(net: Network, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(net))


def load_checkpoint(path) -> Network:
    return network_from_bytes(Path(path).read_bytes())
