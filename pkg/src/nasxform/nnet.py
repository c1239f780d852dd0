"""Plain conv -> relu networks built from ConvSpec layers, and Fisher Potential.

The Fisher Potential of a network at initialisation is, per output channel,

    delta_c = 1/(2N) * sum_n ( -sum_ij A[n, i, j] * g[n, i, j] ) ** 2

where ``A`` is the channel's post-relu activation and ``g`` the gradient of
the loss with respect to it. A layer scores the sum over its channels and the
network the sum over its layers.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, InvalidSpec, ShapeMismatch
from .ir import ConvSpec

SCHEMA_VERSION = 1
HEAD_STREAM = 10_000  # seed stream index reserved for the classifier head


@dataclass(frozen=True)
class Layer:
    spec: ConvSpec
    relu: bool = True


@dataclass
class Network:
    layers: list[Layer]
    num_classes: int
    weights: list[list[np.ndarray]]  # per layer, one array per channel split
    head_w: np.ndarray
    head_b: np.ndarray
    seed: int = 0

    def __post_init__(self):
        check_chain([l.spec for l in self.layers])
        for l, ws in zip(self.layers, self.weights):
            shapes = [tuple(w.shape) for w in ws]
            if shapes != l.spec.weight_shapes:
                raise ShapeMismatch(f"weights {shapes} do not fit {l.spec.weight_shapes}")
        if self.head_w.shape != (self.num_classes, self.out_channels):
            raise ShapeMismatch(f"head weights {self.head_w.shape} do not fit "
                                f"({self.num_classes}, {self.out_channels})")

    @property
    def specs(self) -> list[ConvSpec]:
        return [l.spec for l in self.layers]

    @property
    def input_shape(self) -> tuple[int, int, int]:
        s = self.layers[0].spec
        return (s.Ci, s.H, s.W)

    @property
    def out_channels(self) -> int:
        return self.layers[-1].spec.Co_eff

    @property
    def macs(self) -> int:
        return sum(l.spec.macs for l in self.layers)


def check_chain(specs: Sequence[ConvSpec]) -> None:
    """Adjacent layers must agree on channel count and spatial size."""
    if not specs:
        raise ShapeMismatch("a network needs at least one layer")
    for k, (a, b) in enumerate(zip(specs, specs[1:])):
        if a.Co_eff != b.Ci:
            raise ShapeMismatch(f"layer {k} produces {a.Co_eff} channels, layer {k + 1} expects {b.Ci}")
        if (a.Ho_eff, a.Wo_eff) != (b.H, b.W):
            raise ShapeMismatch(f"layer {k} produces {a.Ho_eff}x{a.Wo_eff}, layer {k + 1} expects {b.H}x{b.W}")


def repair_chain(specs: Sequence[ConvSpec]) -> list[ConvSpec]:
    """Propagate each layer's output channels and size into the next layer's input."""
    out = [specs[0]]
    for s in specs[1:]:
        prev = out[-1]
        out.append(s.replace(Ci=prev.Co_eff, H=prev.Ho_eff, W=prev.Wo_eff))
    return out


def init_weights(spec: ConvSpec, seed: int, layer: int) -> list[np.ndarray]:
    """Fan-in scaled Gaussian weights; part ``k`` of layer ``l`` draws from
    the stream ``(seed, l, k)`` so untouched layers are identical across
    candidate networks."""
    ws = []
    for k, shape in enumerate(spec.weight_shapes):
        fan_in = shape[1] * shape[2] * shape[3]
        rng = np.random.default_rng([seed, layer, k])
        ws.append(rng.standard_normal(shape) * np.sqrt(2.0 / fan_in))
    return ws


def build_network(specs: Sequence[Union[ConvSpec, Layer]], num_classes: int = 10, seed: int = 0) -> Network:
    layers = [s if isinstance(s, Layer) else Layer(s) for s in specs]
    check_chain([l.spec for l in layers])
    weights = [init_weights(l.spec, seed, k) for k, l in enumerate(layers)]
    c = layers[-1].spec.Co_eff
    rng = np.random.default_rng([seed, HEAD_STREAM])
    head_w = rng.standard_normal((num_classes, c)) * np.sqrt(1.0 / c)
    return Network(layers, num_classes, weights, head_w, np.zeros(num_classes), seed)


def zero_network(net: Network) -> Network:
    return dataclasses.replace(
        net,
        weights=[[np.zeros_like(w) for w in ws] for ws in net.weights],
        head_w=np.zeros_like(net.head_w),
        head_b=np.zeros_like(net.head_b),
    )


@dataclass
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 4 or len(self.inputs) < 1:
            raise ShapeMismatch("batch inputs must be N x C x H x W with N >= 1")
        if self.labels.shape != (len(self.inputs),):
            raise ShapeMismatch("one label per example is required")

    @property
    def n(self) -> int:
        return len(self.inputs)


def make_batch(input_shape: Sequence[int], n: int = 32, num_classes: int = 10, seed: int = 0) -> Batch:
    """Seeded synthetic minibatch: Gaussian inputs, uniform labels."""
    rng = np.random.default_rng([seed, 0xBA7C])
    x = rng.standard_normal((n, *input_shape))
    y = rng.integers(0, num_classes, size=n)
    return Batch(x, y)


# --------------------------------------------------------------------------- #
# forward / backward

@dataclass
class _Trace:
    loss: ad.Var
    acts: list[ad.Var]
    params: list[ad.Var]


def _layer_forward(x: ad.Var, spec: ConvSpec, ws: Sequence[ad.Var]) -> ad.Var:
    if spec.bottleneck_in > 1:
        x = ad.channel_slice(x, 0, spec.Ci_eff)
    out_hw = (spec.Ho_eff, spec.Wo_eff)
    pieces = [ad.conv2d(x, w, spec.stride, spec.pad, g, out_hw) for (_, _, g), w in zip(spec.parts, ws)]
    return ad.concat_channels(pieces)


def _trace(net: Network, batch: Batch, act_offsets: Optional[dict[int, np.ndarray]] = None) -> _Trace:
    if tuple(batch.inputs.shape[1:]) != net.input_shape:
        raise ShapeMismatch(f"batch examples are {batch.inputs.shape[1:]}, network expects {net.input_shape}")
    if batch.labels.size and (batch.labels.max() >= net.num_classes or batch.labels.min() < 0):
        raise ShapeMismatch("labels out of range for the classifier")
    x = ad.Var(batch.inputs)
    params: list[ad.Var] = []
    acts: list[ad.Var] = []
    for k, (layer, ws) in enumerate(zip(net.layers, net.weights)):
        wv = [ad.Var(w) for w in ws]
        params.extend(wv)
        y = _layer_forward(x, layer.spec, wv)
        if layer.relu:
            y = ad.relu(y)
        if act_offsets and k in act_offsets:
            y = ad.add_const(y, act_offsets[k])
        acts.append(y)
        x = y
    hw, hb = ad.Var(net.head_w), ad.Var(net.head_b)
    params.extend([hw, hb])
    logits = ad.linear(ad.global_avg_pool(x), hw, hb)
    return _Trace(ad.softmax_cross_entropy(logits, batch.labels), acts, params)


def forward(net: Network, batch: Batch,
            act_offsets: Optional[dict[int, np.ndarray]] = None) -> tuple[float, list[np.ndarray]]:
    """Cross-entropy loss and the post-nonlinearity activation of every layer."""
    t = _trace(net, batch, act_offsets)
    return float(t.loss.value), [a.value for a in t.acts]


def gradients(net: Network, batch: Batch) -> tuple[float, list[np.ndarray], list[np.ndarray], list[np.ndarray]]:
    """``(loss, activations, activation gradients, parameter gradients)``.

    Parameter gradients follow the order: every weight array of every layer,
    then head weights, then head bias.
    """
    t = _trace(net, batch)
    ad.backward(t.loss)
    zero = lambda v: v.grad if v.grad is not None else np.zeros_like(v.value)  # noqa: E731
    return (float(t.loss.value), [a.value for a in t.acts],
            [zero(a) for a in t.acts], [zero(p) for p in t.params])


def activation_gradients(net: Network, batch: Batch) -> list[np.ndarray]:
    return gradients(net, batch)[2]


# --------------------------------------------------------------------------- #
# Fisher Potential

@dataclass
class FisherReport:
    per_layer: list[float]
    total: float
    seed: int
    per_channel: list[list[float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"per_layer": self.per_layer, "total": self.total, "seed": self.seed}

    def format(self) -> str:
        lines = [f"fisher seed={self.seed}", "layer  delta_l"]
        for k, v in enumerate(self.per_layer):
            lines.append(f"{k:<5d}  {v:.12e}")
        lines.append(f"total  {self.total:.12e}")
        return "\n".join(lines)


def fisher_channel(A: np.ndarray, g: np.ndarray) -> float:
    """Fisher score of one channel from ``N x H x W`` activations and gradients."""
    A, g = np.asarray(A, dtype=np.float64), np.asarray(g, dtype=np.float64)
    if A.shape != g.shape or A.ndim != 3:
        raise ShapeMismatch(f"activation {A.shape} and gradient {g.shape} must be equal N x H x W")
    per_example = -(A * g).sum(axis=(1, 2))
    return float(0.5 * np.mean(per_example ** 2))


def fisher_channels(A: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Per-channel scores of ``N x C x H x W`` tensors, vectorised."""
    if A.shape != g.shape or A.ndim != 4:
        raise ShapeMismatch(f"activation {A.shape} and gradient {g.shape} must be equal N x C x H x W")
    per = -(A * g).sum(axis=(2, 3))
    return 0.5 * np.mean(per ** 2, axis=0)


def fisher_layer(A: np.ndarray, g: np.ndarray) -> float:
    return float(fisher_channels(A, g).sum())


def fisher_potential(net: Network, batch: Batch) -> FisherReport:
    _, acts, grads, _ = gradients(net, batch)
    per_channel = [fisher_channels(a, g) for a, g in zip(acts, grads)]
    per_layer = [float(c.sum()) for c in per_channel]
    return FisherReport(per_layer, float(sum(per_layer)), net.seed, [c.tolist() for c in per_channel])


@dataclass
class FisherDecision:
    accepted: bool
    original: FisherReport
    candidate: FisherReport
    reason: str = ""

    def __bool__(self) -> bool:
        return self.accepted


def fisher_decision(original: FisherReport, candidate: FisherReport,
                    layer_veto: Optional[float] = None) -> FisherDecision:
    """Accept iff the candidate's potential is not below the original's.

    With ``layer_veto`` set, additionally reject when any layer keeps less than
    that fraction of its original score.
    """
    if candidate.total < original.total:
        return FisherDecision(False, original, candidate,
                              f"fisher potential {candidate.total:.6g} < original {original.total:.6g}")
    if layer_veto is not None:
        for k, (o, c) in enumerate(zip(original.per_layer, candidate.per_layer)):
            if c < layer_veto * o:
                return FisherDecision(False, original, candidate, f"layer {k} keeps {c / o:.3g} of its score")
    return FisherDecision(True, original, candidate)


def legality_fisher(original: Network, candidate: Network, batch: Batch,
                    layer_veto: Optional[float] = None) -> FisherDecision:
    return fisher_decision(fisher_potential(original, batch), fisher_potential(candidate, batch), layer_veto)


# --------------------------------------------------------------------------- #
# config files

LAYER_FIELDS = {f.name for f in dataclasses.fields(ConvSpec)} | {"relu"}


@dataclass
class NetworkConfig:
    layers: list[Layer]
    num_classes: int = 10
    seed: int = 0
    batch_size: int = 32

    def build(self, seed: Optional[int] = None) -> Network:
        return build_network(self.layers, self.num_classes, self.seed if seed is None else seed)

    def batch(self, seed: Optional[int] = None) -> Batch:
        return make_batch(self.build(seed).input_shape, self.batch_size, self.num_classes,
                          self.seed if seed is None else seed)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "num_classes": self.num_classes,
            "seed": self.seed,
            "batch_size": self.batch_size,
            "layers": [dict(l.spec.to_dict(), relu=l.relu) for l in self.layers],
        }


def network_config_from_dict(d: dict) -> NetworkConfig:
    if not isinstance(d, dict):
        raise ConfigError("network config must be a JSON object")
    version = d.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")
    unknown = set(d) - {"schema_version", "num_classes", "seed", "batch_size", "layers"}
    if unknown:
        raise ConfigError(f"unknown network config fields: {sorted(unknown)}")
    raw = d.get("layers")
    if not isinstance(raw, list) or not raw:
        raise ConfigError("field 'layers' must be a non-empty list")
    layers = []
    for k, entry in enumerate(raw):
        if not isinstance(entry, dict):
            raise ConfigError(f"layers[{k}] must be an object")
        bad = set(entry) - LAYER_FIELDS
        if bad:
            raise ConfigError(f"layers[{k}] has unknown fields {sorted(bad)}")
        entry = dict(entry)
        relu = bool(entry.pop("relu", True))
        try:
            layers.append(Layer(ConvSpec.from_dict(entry), relu))
        except InvalidSpec as exc:
            raise ConfigError(f"layers[{k}]: {exc}") from exc
    cfg = NetworkConfig(layers)
    for name in ("num_classes", "seed", "batch_size"):
        if name in d:
            v = d[name]
            if not isinstance(v, int) or isinstance(v, bool) or v < (0 if name == "seed" else 1):
                raise ConfigError(f"field {name!r} must be a {'non-negative' if name == 'seed' else 'positive'} integer")
            setattr(cfg, name, v)
    try:
        check_chain([l.spec for l in layers])
    except ShapeMismatch as exc:
        raise ConfigError(f"layers: {exc}") from exc
    return cfg


def load_network_config(path: Union[str, Path]) -> NetworkConfig:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return network_config_from_dict(d)


def toy_network_config(channels: int = 8, size: int = 8, depth: int = 4, num_classes: int = 10,
                       seed: int = 0, batch_size: int = 32, in_channels: Optional[int] = None) -> NetworkConfig:
    """A ``depth``-layer 3x3 conv chain with ``channels`` channels at ``size`` x ``size``."""
    cin = channels if in_channels is None else in_channels
    layers = []
    for k in range(depth):
        layers.append(Layer(ConvSpec(Ci=cin if k == 0 else channels, Co=channels, H=size, W=size,
                                     Kh=3, Kw=3, pad=1)))
    return NetworkConfig(layers, num_classes, seed, batch_size)
