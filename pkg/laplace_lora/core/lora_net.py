"""
LoRA-Adapted MLP Classifier

Feedforward classifier with frozen base weights and a LoRA adapter on every
linear layer:

    z = w0 @ x + scale * b @ (a @ drop(x)),   scale = alpha / rank

Each adapter is exposed to the curvature code as two sublayers, the
A-sublayer (weight a, shape rank x n_in) and the B-sublayer (weight b,
shape n_out x rank). Only adapter parameters are trainable; w0 never
receives a gradient.

Forward and backward work on one input at a time; batching is a loop in the
callers so curvature accumulation sees exactly one vector pair per datum.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from laplace_lora.config import Activation, NetworkConfig
from laplace_lora.core import numeric_text
from laplace_lora.core.errors import BadConfig, DimMismatch, FormatError, TraceMismatch
from laplace_lora.core.linalg import Matrix, Vector, unvec, vec

logger = logging.getLogger("laplace-lora.lora_net")

CHECKPOINT_KIND = "checkpoint"


def sublayer_id(layer: int, kind: str) -> str:
    """Stable sublayer name, e.g. layer2.lora_b"""
    return f"layer{layer}.lora_{kind}"


@dataclass
class LoraLinear:
    """
    One linear layer with a LoRA adapter

    Attributes:
        w0: Frozen base weight (n_out x n_in)
        a: Adapter down-projection (rank x n_in)
        b: Adapter up-projection (n_out x rank), zero at init
        alpha: Scale numerator; the adapter product is scaled by alpha/rank
    """

    w0: Matrix
    a: Matrix
    b: Matrix
    alpha: float

    @property
    def n_in(self) -> int:
        return int(self.w0.shape[1])

    @property
    def n_out(self) -> int:
        return int(self.w0.shape[0])

    @property
    def rank(self) -> int:
        return int(self.a.shape[0])

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def delta_w(self) -> Matrix:
        return self.scale * self.b @ self.a


@dataclass(frozen=True)
class SublayerSpec:
    """Position of one sublayer's weight inside the flat parameter vector"""

    id: str
    layer: int
    kind: str
    offset: int
    shape: Tuple[int, int]

    @property
    def size(self) -> int:
        return self.shape[0] * self.shape[1]

    @property
    def index(self) -> int:
        """Sublayer position in network order (2*layer for a, 2*layer+1 for b)"""
        return 2 * self.layer + (0 if self.kind == "a" else 1)


@dataclass(frozen=True)
class ParamLayout:
    """Ordered sublayer table; a restricted layout keeps the original ids"""

    entries: Tuple[SublayerSpec, ...]

    @property
    def size(self) -> int:
        return sum(e.size for e in self.entries)

    @property
    def ids(self) -> Tuple[str, ...]:
        return tuple(e.id for e in self.entries)

    def get(self, sid: str) -> SublayerSpec:
        for entry in self.entries:
            if entry.id == sid:
                return entry
        raise KeyError(sid)

    def slice(self, sid: str) -> slice:
        entry = self.get(sid)
        return slice(entry.offset, entry.offset + entry.size)

    def restrict(self, ids: Sequence[str]) -> "ParamLayout":
        wanted = set(ids)
        offset = 0
        entries = []
        for entry in self.entries:
            if entry.id in wanted:
                entries.append(
                    SublayerSpec(entry.id, entry.layer, entry.kind, offset, entry.shape)
                )
                offset += entry.size
        if len(entries) != len(wanted):
            raise KeyError(f"Unknown sublayers: {sorted(wanted - set(self.ids))}")
        return ParamLayout(tuple(entries))


@dataclass
class ParamVector:
    """Flat LoRA parameter (or gradient) vector with its layout"""

    theta: Vector
    layout: ParamLayout

    def __post_init__(self) -> None:
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.theta.shape != (self.layout.size,):
            raise DimMismatch(
                f"Parameter vector of length {self.theta.size} does not match "
                f"layout size {self.layout.size}"
            )

    def block(self, sid: str) -> Matrix:
        entry = self.layout.get(sid)
        return unvec(self.theta[self.layout.slice(sid)], *entry.shape)

    def restrict(self, ids: Sequence[str]) -> "ParamVector":
        sub = self.layout.restrict(ids)
        return ParamVector(
            np.concatenate([self.theta[self.layout.slice(e.id)] for e in sub.entries])
            if sub.entries
            else np.zeros(0),
            sub,
        )


@dataclass
class LoraNetwork:
    """Stack of LoRA-adapted linear layers with an activation between them"""

    layers: List[LoraLinear]
    activation: Activation = Activation.TANH

    @property
    def n_classes(self) -> int:
        return self.layers[-1].n_out

    @property
    def input_dim(self) -> int:
        return self.layers[0].n_in

    @property
    def dims(self) -> List[int]:
        return [self.layers[0].n_in] + [layer.n_out for layer in self.layers]

    @property
    def n_params(self) -> int:
        return self.layout().size

    def layout(self) -> ParamLayout:
        entries = []
        offset = 0
        for i, layer in enumerate(self.layers):
            for kind, weight in (("a", layer.a), ("b", layer.b)):
                shape = (int(weight.shape[0]), int(weight.shape[1]))
                entries.append(SublayerSpec(sublayer_id(i, kind), i, kind, offset, shape))
                offset += shape[0] * shape[1]
        return ParamLayout(tuple(entries))

    def last_layer_ids(self) -> Tuple[str, str]:
        last = len(self.layers) - 1
        return sublayer_id(last, "a"), sublayer_id(last, "b")

    def weight(self, sid: str) -> Matrix:
        entry = self.layout().get(sid)
        layer = self.layers[entry.layer]
        return layer.a if entry.kind == "a" else layer.b

    def get_params(self) -> ParamVector:
        layout = self.layout()
        theta = np.concatenate([vec(self.weight(e.id)) for e in layout.entries])
        return ParamVector(theta, layout)

    def with_params(self, params: Union[ParamVector, Vector]) -> "LoraNetwork":
        """New network sharing w0 with this one and carrying the given adapters"""
        layout = self.layout()
        theta = params.theta if isinstance(params, ParamVector) else np.asarray(params)
        if theta.shape != (layout.size,):
            raise DimMismatch(f"Expected {layout.size} parameters, got {theta.shape}")
        layers = []
        for i, layer in enumerate(self.layers):
            a_spec = layout.get(sublayer_id(i, "a"))
            b_spec = layout.get(sublayer_id(i, "b"))
            a = unvec(theta[layout.slice(a_spec.id)], *a_spec.shape).copy()
            b = unvec(theta[layout.slice(b_spec.id)], *b_spec.shape).copy()
            layers.append(LoraLinear(w0=layer.w0, a=a, b=b, alpha=layer.alpha))
        return LoraNetwork(layers=layers, activation=self.activation)

    def copy(self) -> "LoraNetwork":
        return self.with_params(self.get_params())


@dataclass(frozen=True)
class Dropout:
    """Inverted dropout on the adapter path, masks drawn from seed"""

    rate: float
    seed: int

    def __post_init__(self) -> None:
        if not 0.0 <= self.rate < 1.0:
            raise BadConfig(f"Dropout rate must be in [0, 1), got {self.rate}")


@dataclass
class ForwardTrace:
    """
    Intermediate values of one forward pass

    Attributes:
        inputs: Input of each layer
        adapter_inputs: Dropout-masked input fed to each adapter
        masks: Inverted-dropout multipliers per layer (None without dropout)
        hidden: Adapter bottleneck a @ adapter_input per layer
        pre_activations: z of each layer
        logits: Output of the last layer
    """

    inputs: List[Vector] = field(default_factory=list)
    adapter_inputs: List[Vector] = field(default_factory=list)
    masks: List[Optional[Vector]] = field(default_factory=list)
    hidden: List[Vector] = field(default_factory=list)
    pre_activations: List[Vector] = field(default_factory=list)
    logits: Vector = field(default_factory=lambda: np.zeros(0))


@dataclass
class SublayerIO:
    """Input vector and output-gradient vector of one sublayer for one datum"""

    sublayer: str
    input: Vector
    output_grad: Vector


def init_network(config: NetworkConfig, seed: int) -> LoraNetwork:
    """
    Build a network with Gaussian base weights and zero-effect adapters

    w0 and a are drawn with fan-in scaling (std 1/sqrt(n_in)); b starts at
    zero so the adapted network initially equals the base network.
    """
    dims = config.dims
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise BadConfig(f"Invalid network dims {dims}")
    if config.rank < 1:
        raise BadConfig("LoRA rank must be at least 1")

    rng = np.random.default_rng(seed)
    layers = []
    for n_in, n_out in zip(dims[:-1], dims[1:]):
        if config.rank > min(n_in, n_out):
            raise BadConfig(f"rank {config.rank} exceeds min({n_in}, {n_out})")
        std = 1.0 / np.sqrt(n_in)
        w0 = rng.normal(0.0, std, size=(n_out, n_in))
        a = rng.normal(0.0, std, size=(config.rank, n_in))
        b = np.zeros((n_out, config.rank))
        layers.append(LoraLinear(w0=w0, a=a, b=b, alpha=float(config.alpha)))

    net = LoraNetwork(layers=layers, activation=Activation(config.activation))
    logger.debug(f"Initialized network dims={dims} rank={config.rank} D={net.n_params}")
    return net


def _activate(net: LoraNetwork, z: Vector) -> Vector:
    if net.activation == Activation.RELU:
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _activation_grad(net: LoraNetwork, z: Vector) -> Vector:
    if net.activation == Activation.RELU:
        return (z > 0.0).astype(np.float64)
    t = np.tanh(z)
    return 1.0 - t * t


def forward(net: LoraNetwork, x: Vector, dropout: Optional[Dropout] = None) -> ForwardTrace:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (net.input_dim,):
        raise DimMismatch(f"Input of shape {x.shape} does not match input_dim {net.input_dim}")

    rng = None
    if dropout is not None and dropout.rate > 0.0:
        rng = np.random.default_rng(dropout.seed)

    trace = ForwardTrace()
    h = x
    last = len(net.layers) - 1
    for i, layer in enumerate(net.layers):
        mask = None
        xd = h
        if rng is not None and dropout is not None:
            keep = rng.random(layer.n_in) >= dropout.rate
            mask = keep / (1.0 - dropout.rate)
            xd = h * mask
        u = layer.a @ xd
        z = layer.w0 @ h + layer.scale * (layer.b @ u)

        trace.inputs.append(h)
        trace.adapter_inputs.append(xd)
        trace.masks.append(mask)
        trace.hidden.append(u)
        trace.pre_activations.append(z)
        h = z if i == last else _activate(net, z)

    trace.logits = h
    return trace


def backward(
    net: LoraNetwork, trace: ForwardTrace, grad_logits: Vector
) -> Tuple[ParamVector, List[SublayerIO]]:
    """
    Backpropagate a logit gradient to the adapter parameters

    Returns:
        grads: Gradient over all adapter entries, in layout order
        sublayer_io: Per-sublayer (input, output gradient) pairs, layout
            order. A weight gradient is output_grad @ input^T.
    """
    if len(trace.pre_activations) != len(net.layers):
        raise TraceMismatch("Trace does not come from a network of this depth")
    for layer, z, xin in zip(net.layers, trace.pre_activations, trace.inputs):
        if z.shape != (layer.n_out,) or xin.shape != (layer.n_in,):
            raise TraceMismatch("Trace shapes do not match network dims")
    g = np.asarray(grad_logits, dtype=np.float64)
    if g.shape != (net.n_classes,):
        raise DimMismatch(f"grad_logits of shape {g.shape}, expected ({net.n_classes},)")

    layout = net.layout()
    grads: Dict[str, Matrix] = {}
    io: Dict[str, SublayerIO] = {}
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        if i < len(net.layers) - 1:
            g = g * _activation_grad(net, trace.pre_activations[i])
        s = layer.scale
        u = trace.hidden[i]
        xd = trace.adapter_inputs[i]

        b_in = s * u
        a_grad_out = s * (layer.b.T @ g)
        grads[sublayer_id(i, "b")] = np.outer(g, b_in)
        grads[sublayer_id(i, "a")] = np.outer(a_grad_out, xd)
        io[sublayer_id(i, "b")] = SublayerIO(sublayer_id(i, "b"), b_in, g)
        io[sublayer_id(i, "a")] = SublayerIO(sublayer_id(i, "a"), xd, a_grad_out)

        if i > 0:
            adapter_back = layer.a.T @ a_grad_out
            mask = trace.masks[i]
            if mask is not None:
                adapter_back = adapter_back * mask
            g = layer.w0.T @ g + adapter_back

    theta = np.concatenate([vec(grads[e.id]) for e in layout.entries])
    return ParamVector(theta, layout), [io[e.id] for e in layout.entries]


@dataclass
class LogitsJacobian:
    """
    Jacobian of the logits with respect to the adapter parameters at one input

    Attributes:
        logits: MAP logits at the input
        per_class: For each class i, the gradient of logit i as one weight-shaped
            matrix G per sublayer
        layout: Parameter layout the rows are expressed in
    """

    logits: Vector
    per_class: List[Dict[str, Matrix]]
    layout: ParamLayout

    @property
    def n_classes(self) -> int:
        return len(self.per_class)

    def dense(self, ids: Optional[Sequence[str]] = None) -> Matrix:
        """n_classes x D matrix, optionally restricted to some sublayers"""
        layout = self.layout if ids is None else self.layout.restrict(ids)
        rows = [
            np.concatenate([vec(g[e.id]) for e in layout.entries])
            if layout.entries
            else np.zeros(0)
            for g in self.per_class
        ]
        return np.vstack(rows)


def logits_jacobian(net: LoraNetwork, x: Vector) -> LogitsJacobian:
    trace = forward(net, x)
    layout = net.layout()
    per_class = []
    for c in range(net.n_classes):
        onehot = np.zeros(net.n_classes)
        onehot[c] = 1.0
        grads, _ = backward(net, trace, onehot)
        per_class.append({e.id: grads.block(e.id) for e in layout.entries})
    return LogitsJacobian(logits=trace.logits, per_class=per_class, layout=layout)


def predict_logits(
    net: LoraNetwork, features: Matrix, dropout_rate: float = 0.0, seed: int = 0
) -> Matrix:
    """Logits for every row of features; with dropout each row gets its own mask seed"""
    features = np.asarray(features, dtype=np.float64)
    out = np.zeros((features.shape[0], net.n_classes))
    seeds = np.random.default_rng(seed).integers(0, 2**31 - 1, size=features.shape[0])
    for n in range(features.shape[0]):
        dropout = Dropout(dropout_rate, int(seeds[n])) if dropout_rate > 0.0 else None
        out[n] = forward(net, features[n], dropout).logits
    return out


def save_checkpoint(net: LoraNetwork, path: Union[str, Path], step: int = 0) -> Path:
    doc = numeric_text.NumericDocument(kind=CHECKPOINT_KIND)
    doc.header = {
        "dims": ",".join(str(d) for d in net.dims),
        "rank": ",".join(str(layer.rank) for layer in net.layers),
        "alpha": "%.17g" % net.layers[0].alpha,
        "activation": net.activation.value,
        "n_classes": str(net.n_classes),
        "step": str(step),
    }
    for i, layer in enumerate(net.layers):
        doc.blocks[f"layer{i}.w0"] = layer.w0
        doc.blocks[sublayer_id(i, "a")] = layer.a
        doc.blocks[sublayer_id(i, "b")] = layer.b
    return numeric_text.save(doc, path)


def load_checkpoint(path: Union[str, Path]) -> Tuple[LoraNetwork, int]:
    """Read a checkpoint file; returns the network and its training step"""
    doc = numeric_text.load(path, CHECKPOINT_KIND)
    try:
        dims = [int(d) for d in doc.require("dims").split(",")]
        ranks = [int(r) for r in doc.require("rank").split(",")]
        alpha = float(doc.require("alpha"))
        activation = Activation(doc.require("activation"))
        step = int(doc.header.get("step", "0"))
    except ValueError as e:
        raise FormatError(f"Bad checkpoint header: {e}") from e
    if len(ranks) == 1:
        ranks = ranks * (len(dims) - 1)
    if len(ranks) != len(dims) - 1:
        raise FormatError("Checkpoint rank list does not match its dims")

    layers = []
    for i, (n_in, n_out) in enumerate(zip(dims[:-1], dims[1:])):
        w0 = doc.block(f"layer{i}.w0")
        a = doc.block(sublayer_id(i, "a"))
        b = doc.block(sublayer_id(i, "b"))
        if w0.shape != (n_out, n_in) or a.shape != (ranks[i], n_in) or b.shape != (
            n_out,
            ranks[i],
        ):
            raise FormatError(f"Checkpoint layer {i} blocks do not match dims")
        layers.append(LoraLinear(w0=w0, a=a, b=b, alpha=alpha))
    return LoraNetwork(layers=layers, activation=activation), step
