"""Model building: layer specs, graph lowering, and dense reference forward.

Each builder lowers a layer to primitive nodes plus shape transforms.  A
matrix multiply becomes one vectorized dot node whose operands are the input
repeated across output neurons and the weight repeated across the batch, so
every (sample, neuron) pair owns its private copy of the weights on its own
edges; consensus at the parameter node is what ties them together.  Bias and
activation fuse into a single sum-relu node fed by (pre-activation, bias).

``forward`` methods are deliberately plain dense numpy, independent of the
graph lowering, so the two paths cross-check each other.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import projops
from .graph import Graph, GraphBuilder, GraphBuildError, ParamTree, Ref
from .projops import (
    CrossEntropyProx,
    Dot,
    Margin,
    Max,
    Quantize,
    Sum,
    SumReLU,
    TargetKind,
    Tensor,
)


# ---------------------------------------------------------------------------
# Layer specs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Linear:
    in_features: int
    out_features: int

    def __post_init__(self):
        if self.in_features < 1 or self.out_features < 1:
            raise GraphBuildError("linear layer dimensions must be positive")


@dataclass(frozen=True)
class ReLUBias:
    width: int

    def __post_init__(self):
        if self.width < 1:
            raise GraphBuildError("relu width must be positive")


@dataclass(frozen=True)
class Conv2d:
    """3x3 convolution, stride 1, padding 1 (fixed geometry)."""

    in_channels: int
    out_channels: int
    ksize: int = 3

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise GraphBuildError("conv channel counts must be positive")
        if self.ksize != 3:
            raise GraphBuildError("only 3x3 kernels are supported")


@dataclass(frozen=True)
class MaxPoolSpatial:
    """Global spatial max per channel: (B, H, W, C) -> (B, C)."""


@dataclass(frozen=True)
class SkipPool:
    """Pool the current feature map into the readout concat; pass map onward."""


@dataclass(frozen=True)
class QuantizeLayer:
    k: int
    alpha: float


LayerSpec = Linear | ReLUBias | Conv2d | MaxPoolSpatial | SkipPool | QuantizeLayer


# ---------------------------------------------------------------------------
# Graph lowering helpers
# ---------------------------------------------------------------------------


def build_linear(b: GraphBuilder, x: Ref, w: Ref) -> Ref:
    """Matrix multiply (B, n) @ (n, m) as one dot node over width-n operands."""
    if len(x.shape) != 2 or len(w.shape) != 2 or x.shape[1] != w.shape[0]:
        raise GraphBuildError(
            f"linear: input {x.shape} incompatible with weight {w.shape}"
        )
    batch, n = x.shape
    m = w.shape[1]
    xr = b.repeat(x, axis=1, reps=m)  # (B, m, n)
    wr = b.transpose(w, (1, 0))  # (m, n)
    wr = b.repeat(wr, axis=0, reps=batch)  # (B, m, n)
    return b.primitive(Dot(n), [xr, wr])  # (B, m)


def build_relu_bias(b: GraphBuilder, x: Ref, bias: Ref) -> Ref:
    """ReLU(x + bias) as a fanin-2 sum-relu over (pre-activation, bias)."""
    if bias.shape != x.shape[-1:]:
        raise GraphBuildError(
            f"relu bias width {bias.shape} does not match input {x.shape}"
        )
    br = bias
    for dim in reversed(x.shape[:-1]):
        br = b.repeat(br, axis=0, reps=dim)
    return b.primitive(SumReLU(2), [x, br])


def build_conv2d(b: GraphBuilder, x: Ref, kernel: Ref, spec: Conv2d) -> Ref:
    """Per-pixel dot of 3x3 patches against the (repeated) kernel."""
    batch, h, w_, cin = x.shape
    if kernel.shape != (spec.ksize, spec.ksize, spec.in_channels, spec.out_channels):
        raise GraphBuildError(f"conv kernel shape {kernel.shape} mismatch")
    if cin != spec.in_channels:
        raise GraphBuildError(
            f"conv expects {spec.in_channels} input channels, got {cin}"
        )
    k = spec.ksize
    cout = spec.out_channels
    patches = b.conv_patch(b.pad(x, 1), k)  # (B, H, W, k, k, Cin)
    patches = b.reshape(patches, (batch, h, w_, k * k * cin))
    patches = b.repeat(patches, axis=3, reps=cout)  # (B, H, W, Cout, k*k*Cin)

    kr = b.transpose(kernel, (3, 0, 1, 2))  # (Cout, k, k, Cin)
    kr = b.reshape(kr, (cout, k * k * cin))
    kr = b.repeat(kr, axis=0, reps=w_)
    kr = b.repeat(kr, axis=0, reps=h)
    kr = b.repeat(kr, axis=0, reps=batch)  # (B, H, W, Cout, k*k*Cin)
    return b.primitive(Dot(k * k * cin), [patches, kr])  # (B, H, W, Cout)


def build_max_pool(b: GraphBuilder, x: Ref) -> Ref:
    batch, h, w_, c = x.shape
    xt = b.transpose(x, (0, 3, 1, 2))
    xt = b.reshape(xt, (batch, c, h * w_))
    return b.primitive(Max(h * w_), [xt])  # (B, C)


def attach_loss(b: GraphBuilder, logits: Ref, labels: Tensor, kind: TargetKind,
                num_classes: int) -> int:
    """Attach the target node consuming a (B, classes) logit block."""
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= num_classes:
        raise GraphBuildError(
            f"label out of range [0, {num_classes}): {labels.min()}..{labels.max()}"
        )
    onehot = one_hot(labels, num_classes)
    return b.target(kind, onehot, logits)


def one_hot(labels: Tensor, num_classes: int) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros(labels.shape + (num_classes,), dtype=np.float64)
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out


# ---------------------------------------------------------------------------
# Feed-forward models (MLP / CNN)
# ---------------------------------------------------------------------------


@dataclass
class FeedForward:
    """MLP or CNN: a layer stack, optional readout concat, and a loss kind.

    ``skip`` concatenates every post-relu hidden block (CNNs: each pooled
    feature vector) and feeds the concatenation to the final linear layer.
    """

    layers: list[LayerSpec]
    input_shape: tuple[int, ...]  # per-sample shape
    num_classes: int
    loss: TargetKind
    skip: bool = False
    arch: str = "mlp"

    # -- parameters -----------------------------------------------------------

    def param_specs(self) -> list[tuple[str, tuple[int, ...], float]]:
        """(name, shape, init scale) per parameter, in layer order."""
        specs = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Linear):
                scale = np.sqrt(1.0 / layer.in_features)
                specs.append((f"layer{i}.weight", (layer.in_features, layer.out_features), scale))
            elif isinstance(layer, ReLUBias):
                specs.append((f"layer{i}.bias", (layer.width,), 0.0))
            elif isinstance(layer, Conv2d):
                scale = np.sqrt(1.0 / (layer.ksize * layer.ksize * layer.in_channels))
                shape = (layer.ksize, layer.ksize, layer.in_channels, layer.out_channels)
                specs.append((f"layer{i}.kernel", shape, scale))
        return specs

    def init_params(self, seed: int) -> ParamTree:
        rng = np.random.default_rng(seed)
        params: ParamTree = {}
        for name, shape, scale in self.param_specs():
            if scale == 0.0:
                params[name] = np.zeros(shape)
            else:
                params[name] = rng.uniform(-scale, scale, size=shape)
        return params

    # -- dense reference forward ------------------------------------------------

    def forward(self, params: ParamTree, x: Tensor) -> Tensor:
        x = np.asarray(x, dtype=np.float64)
        skips = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Linear):
                if i == len(self.layers) - 1 and self.skip:
                    x = np.concatenate(skips, axis=-1)
                x = x @ params[f"layer{i}.weight"]
            elif isinstance(layer, ReLUBias):
                x = np.maximum(x + params[f"layer{i}.bias"], 0.0)
                if x.ndim == 2:
                    skips.append(x)
            elif isinstance(layer, Conv2d):
                x = _conv2d_dense(x, params[f"layer{i}.kernel"])
            elif isinstance(layer, MaxPoolSpatial):
                pooled = x.max(axis=(1, 2))
                skips.append(pooled)
                x = pooled
            elif isinstance(layer, SkipPool):
                skips.append(x.max(axis=(1, 2)))
            elif isinstance(layer, QuantizeLayer):
                x = projops.forward_primitive(
                    Quantize(layer.k, layer.alpha), [x]
                )
        return x

    # -- graph lowering -----------------------------------------------------------

    def build_graph(self, params: ParamTree, x: Tensor, y: Tensor) -> Graph:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != self.input_shape:
            raise GraphBuildError(
                f"input shape {x.shape[1:]} does not match model {self.input_shape}"
            )
        b = GraphBuilder()
        ref = b.constant(x)
        skips: list[Ref] = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Linear):
                if i == len(self.layers) - 1 and self.skip:
                    if len(skips) < 2:
                        raise GraphBuildError("skip readout needs at least two hidden blocks")
                    batch = ref.shape[0]
                    parts = [
                        b.repeat(s, axis=1, reps=layer.out_features) for s in skips
                    ]
                    joined = b.concat(parts, axis=-1)  # (B, out, sum_widths)
                    w = b.parameter(f"layer{i}.weight", params[f"layer{i}.weight"])
                    wr = b.transpose(w, (1, 0))
                    wr = b.repeat(wr, axis=0, reps=batch)
                    ref = b.primitive(Dot(joined.shape[-1]), [joined, wr])
                else:
                    w = b.parameter(f"layer{i}.weight", params[f"layer{i}.weight"])
                    ref = build_linear(b, ref, w)
            elif isinstance(layer, ReLUBias):
                bias = b.parameter(f"layer{i}.bias", params[f"layer{i}.bias"])
                ref = build_relu_bias(b, ref, bias)
                if len(ref.shape) == 2:
                    skips.append(ref)
            elif isinstance(layer, Conv2d):
                kernel = b.parameter(f"layer{i}.kernel", params[f"layer{i}.kernel"])
                ref = build_conv2d(b, ref, kernel, layer)
            elif isinstance(layer, MaxPoolSpatial):
                ref = build_max_pool(b, ref)
                skips.append(ref)
            elif isinstance(layer, SkipPool):
                skips.append(build_max_pool(b, ref))
            elif isinstance(layer, QuantizeLayer):
                ref = b.primitive(Quantize(layer.k, layer.alpha), [ref])
        attach_loss(b, ref, y, self.loss, self.num_classes)
        return b.finish()

    # -- metrics ------------------------------------------------------------------

    def batch_loss(self, params: ParamTree, x: Tensor, y: Tensor) -> float:
        logits = self.forward(params, x)
        onehot = one_hot(y, self.num_classes)
        if isinstance(self.loss, CrossEntropyProx):
            return float(projops.cross_entropy_loss(logits, onehot).mean())
        return float(margin_loss(logits, onehot, self.loss.m))

    def accuracy(self, params: ParamTree, x: Tensor, y: Tensor) -> float:
        logits = self.forward(params, x)
        return float((logits.argmax(axis=-1) == np.asarray(y)).mean())

    def spec_dict(self) -> dict:
        return {
            "arch": self.arch,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "skip": self.skip,
            "loss": _loss_dict(self.loss),
            "layers": [_layer_dict(l) for l in self.layers],
        }


def _conv2d_dense(x: Tensor, kernel: Tensor) -> Tensor:
    k = kernel.shape[0]
    pad = k // 2
    b, h, w, cin = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    # windows: (B, H, W, Cin, k, k); kernel: (k, k, Cin, Cout)
    return np.einsum("bhwcij,ijco->bhwo", windows, kernel)


def margin_loss(logits: Tensor, onehot: Tensor, m: float) -> float:
    """Total margin violation per sample, averaged over the batch."""
    pos = onehot > 0.5
    viol = np.where(pos, np.maximum(m - logits, 0.0), np.maximum(logits, 0.0))
    return float(viol.sum(axis=-1).mean())


# ---------------------------------------------------------------------------
# Architecture constructors
# ---------------------------------------------------------------------------


def mlp(
    input_dim: int,
    hidden: int,
    depth: int,
    num_classes: int,
    loss: TargetKind,
    skip: bool = False,
    quantize: QuantizeLayer | None = None,
) -> FeedForward:
    if hidden < 1 or depth < 1:
        raise GraphBuildError("mlp needs positive hidden width and depth")
    layers: list[LayerSpec] = []
    in_dim = input_dim
    for _ in range(depth):
        layers.append(Linear(in_dim, hidden))
        layers.append(ReLUBias(hidden))
        if quantize is not None:
            layers.append(quantize)
        in_dim = hidden
    readout_in = hidden * depth if skip else hidden
    layers.append(Linear(readout_in, num_classes))
    return FeedForward(layers, (input_dim,), num_classes, loss, skip=skip, arch="mlp")


def cnn(
    input_hw: tuple[int, int],
    in_channels: int,
    channels: int,
    depth: int,
    num_classes: int,
    loss: TargetKind,
    skip: bool = False,
) -> FeedForward:
    layers: list[LayerSpec] = []
    cin = in_channels
    for i in range(depth):
        layers.append(Conv2d(cin, channels))
        layers.append(ReLUBias(channels))
        if skip and i < depth - 1:
            layers.append(SkipPool())
        cin = channels
    layers.append(MaxPoolSpatial())
    readout_in = channels * depth if skip else channels
    layers.append(Linear(readout_in, num_classes))
    return FeedForward(
        layers,
        (input_hw[0], input_hw[1], in_channels),
        num_classes,
        loss,
        skip=skip,
        arch="cnn",
    )


@dataclass
class IdentityModel:
    """Single identity primitive between input and target; the smallest model."""

    loss: TargetKind
    num_classes: int = 1

    def init_params(self, seed: int) -> ParamTree:
        return {}

    def forward(self, params: ParamTree, x: Tensor) -> Tensor:
        return np.asarray(x, dtype=np.float64)

    def build_graph(self, params: ParamTree, x: Tensor, y: Tensor) -> Graph:
        b = GraphBuilder()
        ref = b.constant(np.asarray(x, dtype=np.float64))
        ref = b.primitive(projops.Identity(), [ref])
        labels = np.asarray(y, dtype=np.float64)
        if labels.shape != ref.shape:
            raise GraphBuildError("identity model: labels must match input shape")
        b.target(self.loss, labels, ref)
        return b.finish()

    def batch_loss(self, params: ParamTree, x: Tensor, y: Tensor) -> float:
        return float("nan")


# ---------------------------------------------------------------------------
# Recurrent model
# ---------------------------------------------------------------------------


@dataclass
class Rnn:
    """Character RNN: an MLP cell over (embedding, previous hidden state).

    The cell trunk is shared; two linear heads emit next-char logits and the
    raw next state, which becomes the hidden input after a relu.  All weights
    are shared across time steps through single parameter nodes.
    """

    vocab: int
    embed_dim: int
    hidden: int
    num_classes: int
    loss: TargetKind
    depth: int = 1

    def param_specs(self) -> list[tuple[str, tuple[int, ...], float]]:
        specs = [("embed.weight", (self.vocab, self.embed_dim), 1.0)]
        in_dim = self.embed_dim + self.hidden
        for i in range(self.depth):
            scale = np.sqrt(1.0 / in_dim)
            specs.append((f"cell{i}.weight", (in_dim, self.hidden), scale))
            specs.append((f"cell{i}.bias", (self.hidden,), 0.0))
            in_dim = self.hidden
        scale = np.sqrt(1.0 / self.hidden)
        specs.append(("logits.weight", (self.hidden, self.num_classes), scale))
        specs.append(("state.weight", (self.hidden, self.hidden), scale))
        return specs

    def init_params(self, seed: int) -> ParamTree:
        rng = np.random.default_rng(seed)
        params: ParamTree = {}
        for name, shape, scale in self.param_specs():
            if scale == 0.0:
                params[name] = np.zeros(shape)
            else:
                params[name] = rng.uniform(-scale, scale, size=shape)
        return params

    def forward(self, params: ParamTree, x: Tensor) -> Tensor:
        """Logits for every step: (B, T, vocab)."""
        x = np.asarray(x, dtype=np.int64)
        batch, steps = x.shape
        h = np.zeros((batch, self.hidden))
        outs = []
        for t in range(steps):
            e = params["embed.weight"][x[:, t]]
            a = np.concatenate([e, h], axis=-1)
            for i in range(self.depth):
                a = np.maximum(a @ params[f"cell{i}.weight"] + params[f"cell{i}.bias"], 0.0)
            outs.append(a @ params["logits.weight"])
            h = np.maximum(a @ params["state.weight"], 0.0)
        return np.stack(outs, axis=1)

    def build_graph(self, params: ParamTree, x: Tensor, y: Tensor) -> Graph:
        x = np.asarray(x, dtype=np.int64)
        y = np.asarray(y, dtype=np.int64)
        if x.shape != y.shape:
            raise GraphBuildError("rnn: inputs and targets must share (B, T)")
        batch, steps = x.shape
        if steps < 1:
            raise GraphBuildError("rnn: needs at least one step")
        b = GraphBuilder()
        embed = b.parameter("embed.weight", params["embed.weight"])
        cell_ws = [
            b.parameter(f"cell{i}.weight", params[f"cell{i}.weight"])
            for i in range(self.depth)
        ]
        cell_bs = [
            b.parameter(f"cell{i}.bias", params[f"cell{i}.bias"])
            for i in range(self.depth)
        ]
        w_logits = b.parameter("logits.weight", params["logits.weight"])
        w_state = b.parameter("state.weight", params["state.weight"])

        h: Ref = b.constant(np.zeros((batch, self.hidden)))
        for t in range(steps):
            et = b.index(embed, x[:, t])  # (B, embed_dim)
            a = self._cell_input(b, et, h, cell_ws[0])
            a = build_relu_bias(b, a, cell_bs[0])
            for i in range(1, self.depth):
                a = build_linear(b, a, cell_ws[i])
                a = build_relu_bias(b, a, cell_bs[i])
            logits = build_linear(b, a, w_logits)
            attach_loss(b, logits, y[:, t], self.loss, self.num_classes)
            raw = build_linear(b, a, w_state)
            h = b.primitive(SumReLU(1), [raw])
        return b.finish()

    def _cell_input(self, b: GraphBuilder, et: Ref, h: Ref, w: Ref) -> Ref:
        """Dot of concat(embedding, state) against the trunk weight."""
        batch = et.shape[0]
        width = w.shape[1]
        er = b.repeat(et, axis=1, reps=width)  # (B, width, embed)
        hr = b.repeat(h, axis=1, reps=width)  # (B, width, hidden)
        joined = b.concat([er, hr], axis=-1)  # (B, width, embed+hidden)
        wr = b.transpose(w, (1, 0))
        wr = b.repeat(wr, axis=0, reps=batch)
        return b.primitive(Dot(joined.shape[-1]), [joined, wr])

    def batch_loss(self, params: ParamTree, x: Tensor, y: Tensor) -> float:
        logits = self.forward(params, x)
        onehot = one_hot(y, self.num_classes)
        if isinstance(self.loss, CrossEntropyProx):
            return float(projops.cross_entropy_loss(logits, onehot).mean())
        return float(margin_loss(logits, onehot, self.loss.m))

    def accuracy(self, params: ParamTree, x: Tensor, y: Tensor) -> float:
        """Fraction of correctly predicted next characters."""
        logits = self.forward(params, x)
        return float((logits.argmax(axis=-1) == np.asarray(y)).mean())

    def spec_dict(self) -> dict:
        return {
            "arch": "rnn",
            "vocab": self.vocab,
            "embed_dim": self.embed_dim,
            "hidden": self.hidden,
            "num_classes": self.num_classes,
            "depth": self.depth,
            "loss": _loss_dict(self.loss),
        }


# ---------------------------------------------------------------------------
# Spec (de)serialization and evaluation helpers
# ---------------------------------------------------------------------------


def _loss_dict(loss: TargetKind) -> dict:
    if isinstance(loss, CrossEntropyProx):
        return {"kind": "ce", "lam": loss.lam}
    return {"kind": "margin", "m": loss.m}


def loss_from_dict(d: dict) -> TargetKind:
    if d["kind"] == "ce":
        return CrossEntropyProx(d["lam"])
    if d["kind"] == "margin":
        return Margin(d["m"])
    raise ValueError(f"unknown loss kind: {d['kind']}")


def _layer_dict(layer: LayerSpec) -> dict:
    if isinstance(layer, Linear):
        return {"kind": "linear", "in": layer.in_features, "out": layer.out_features}
    if isinstance(layer, ReLUBias):
        return {"kind": "relu_bias", "width": layer.width}
    if isinstance(layer, Conv2d):
        return {"kind": "conv2d", "in": layer.in_channels, "out": layer.out_channels}
    if isinstance(layer, MaxPoolSpatial):
        return {"kind": "max_pool"}
    if isinstance(layer, SkipPool):
        return {"kind": "skip_pool"}
    if isinstance(layer, QuantizeLayer):
        return {"kind": "quantize", "k": layer.k, "alpha": layer.alpha}
    raise TypeError(f"unknown layer: {layer!r}")


def _layer_from_dict(d: dict) -> LayerSpec:
    kind = d["kind"]
    if kind == "linear":
        return Linear(d["in"], d["out"])
    if kind == "relu_bias":
        return ReLUBias(d["width"])
    if kind == "conv2d":
        return Conv2d(d["in"], d["out"])
    if kind == "max_pool":
        return MaxPoolSpatial()
    if kind == "skip_pool":
        return SkipPool()
    if kind == "quantize":
        return QuantizeLayer(d["k"], d["alpha"])
    raise ValueError(f"unknown layer kind: {kind}")


def model_from_spec(spec: dict):
    if spec["arch"] in ("mlp", "cnn"):
        return FeedForward(
            [_layer_from_dict(d) for d in spec["layers"]],
            tuple(spec["input_shape"]),
            spec["num_classes"],
            loss_from_dict(spec["loss"]),
            skip=spec["skip"],
            arch=spec["arch"],
        )
    if spec["arch"] == "rnn":
        return Rnn(
            vocab=spec["vocab"],
            embed_dim=spec["embed_dim"],
            hidden=spec["hidden"],
            num_classes=spec["num_classes"],
            loss=loss_from_dict(spec["loss"]),
            depth=spec["depth"],
        )
    raise ValueError(f"unknown arch: {spec['arch']}")


def forward_eval(model, params: ParamTree, inputs: Tensor) -> Tensor:
    """Dense forward pass of a built model (no graph materialization)."""
    return model.forward(params, inputs)
