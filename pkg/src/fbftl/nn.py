"""Minimal numpy network: dense and stride-1 same-padded conv layers.

Trainable layers are numbered 1..M in order of appearance; the cut index
``m_c`` refers to that numbering. Layer *positions* (0-based indices into
``Architecture.layers``) are used internally. Labels are 0-based class
indices.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from .errors import ConfigError
from .seeds import stream

PROB_FLOOR = 1e-12

Shape = tuple[int, ...]


# --------------------------------------------------------------------------- layers


@dataclass(frozen=True)
class Dense:
    input_nodes: int
    output_nodes: int
    bias: bool = True
    kind = "dense"
    trainable = True

    @property
    def in_shape(self) -> Shape:
        return (self.input_nodes,)

    @property
    def out_shape(self) -> Shape:
        return (self.output_nodes,)

    @property
    def n_params(self) -> int:
        return self.output_nodes * (self.input_nodes + int(self.bias))

    @property
    def fan_in(self) -> int:
        return self.input_nodes

    @property
    def multiplications(self) -> int:
        # one pass over a single sample
        return self.n_params


@dataclass(frozen=True)
class Conv2D:
    """Stride-1, same-padded 2-D convolution on ``(a, b, c_in)`` inputs."""

    input_shape: Shape
    kernel: tuple[int, int]
    out_channels: int
    kind = "conv2d"
    trainable = True

    @property
    def in_shape(self) -> Shape:
        return tuple(self.input_shape)

    @property
    def out_shape(self) -> Shape:
        a, b, _ = self.input_shape
        return (a, b, self.out_channels)

    @property
    def n_params(self) -> int:
        kh, kw = self.kernel
        return self.out_channels * (kh * kw * self.input_shape[2] + 1)

    @property
    def fan_in(self) -> int:
        kh, kw = self.kernel
        return kh * kw * self.input_shape[2]

    @property
    def multiplications(self) -> int:
        a, b, _ = self.input_shape
        return a * b * self.n_params


@dataclass(frozen=True)
class Pool:
    """Non-overlapping max pooling with a square window."""

    input_shape: Shape
    size: int = 2
    kind = "pool"
    trainable = False
    n_params = 0
    multiplications = 0

    @property
    def in_shape(self) -> Shape:
        return tuple(self.input_shape)

    @property
    def out_shape(self) -> Shape:
        a, b, c = self.input_shape
        return (a // self.size, b // self.size, c)


@dataclass(frozen=True)
class Activation:
    fn: str
    shape: Shape
    kind = "activation"
    trainable = False
    n_params = 0
    multiplications = 0

    @property
    def in_shape(self) -> Shape:
        return tuple(self.shape)

    @property
    def out_shape(self) -> Shape:
        return tuple(self.shape)


@dataclass(frozen=True)
class Flatten:
    input_shape: Shape
    kind = "flatten"
    trainable = False
    n_params = 0
    multiplications = 0

    @property
    def in_shape(self) -> Shape:
        return tuple(self.input_shape)

    @property
    def out_shape(self) -> Shape:
        return (int(np.prod(self.input_shape)),)


LayerSpec = Dense | Conv2D | Pool | Activation | Flatten
ACTIVATIONS = ("relu", "softmax", "identity")


# --------------------------------------------------------------------------- architecture


@dataclass(frozen=True)
class Architecture:
    layers: tuple[LayerSpec, ...]
    cut_index: int
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        self._validate()

    def _validate(self) -> None:
        if not self.layers:
            raise ConfigError("architecture has no layers", "layers")
        for i, layer in enumerate(self.layers):
            where = f"layers[{i}]"
            if any(int(s) <= 0 for s in layer.in_shape):
                raise ConfigError(f"non-positive input shape {layer.in_shape}", where)
            if isinstance(layer, Dense) and layer.output_nodes <= 0:
                raise ConfigError("dense layer needs output_nodes > 0", where)
            if isinstance(layer, Conv2D):
                if len(layer.input_shape) != 3:
                    raise ConfigError("conv2d input must be (a, b, c)", where)
                if any(k % 2 == 0 or k <= 0 for k in layer.kernel):
                    raise ConfigError("only odd kernel sizes support same padding at stride 1", where)
                if layer.out_channels <= 0:
                    raise ConfigError("conv2d needs out_channels > 0", where)
            if isinstance(layer, Pool):
                a, b, _ = layer.input_shape
                if layer.size < 1 or a % layer.size or b % layer.size:
                    raise ConfigError(f"pool size {layer.size} must divide {a}x{b}", where)
            if isinstance(layer, Activation) and layer.fn not in ACTIVATIONS:
                raise ConfigError(f"unknown activation {layer.fn!r}", where)
            if i > 0 and tuple(self.layers[i - 1].out_shape) != tuple(layer.in_shape):
                raise ConfigError(
                    f"input shape {tuple(layer.in_shape)} does not match previous output "
                    f"{tuple(self.layers[i - 1].out_shape)}",
                    where,
                )
        for i, layer in enumerate(self.layers[:-1]):
            if isinstance(layer, Activation) and layer.fn == "softmax":
                raise ConfigError("softmax is only allowed as the final layer", f"layers[{i}]")
        M = len(self.trainable_positions)
        if M == 0:
            raise ConfigError("architecture has no trainable layers", "layers")
        if not 1 <= self.cut_index <= M:
            raise ConfigError(f"cut_index must lie in [1, {M}]", "cut_index")
        cut = self.layers[self.cut_position]
        if not isinstance(cut, Dense):
            raise ConfigError("cut layer must be dense", f"layers[{self.cut_position}]")
        if self.out_shape != (self.num_classes,):
            raise ConfigError(
                f"final output {self.out_shape} does not match num_classes={self.num_classes}",
                f"layers[{len(self.layers) - 1}]",
            )

    @property
    def trainable_positions(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if layer.trainable]

    @property
    def M(self) -> int:
        return len(self.trainable_positions)

    def position(self, m: int) -> int:
        """Layer position of trainable layer ``m`` (1-based)."""
        return self.trainable_positions[m - 1]

    @property
    def cut_position(self) -> int:
        return self.position(self.cut_index)

    @property
    def feature_width(self) -> int:
        """N^-_{m_c}: input width of the cut layer."""
        return self.layers[self.cut_position].input_nodes

    @property
    def in_shape(self) -> Shape:
        return tuple(self.layers[0].in_shape)

    @property
    def out_shape(self) -> Shape:
        return tuple(self.layers[-1].out_shape)

    def trainable(self, m: int) -> Dense | Conv2D:
        return self.layers[self.position(m)]

    def span(self, first: int, last: int) -> tuple[int, int]:
        """Layer positions ``[start, stop)`` executed by trainable layers first..last.

        Non-trainable layers between trainable ``last`` and ``last + 1`` belong
        to the span, so the extractor (1..m_c-1) ends right at the cut layer.
        """
        start = 0 if first <= 1 else self.position(first)
        stop = len(self.layers) if last >= self.M else self.position(last + 1)
        return start, stop


def mlp(widths: Sequence[int], cut_index: int, bias: bool = True) -> Architecture:
    """Dense ReLU network ``widths[0] -> ... -> widths[-1]`` with a softmax head."""
    layers: list[LayerSpec] = []
    for i, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
        layers.append(Dense(int(n_in), int(n_out), bias))
        last = i == len(widths) - 2
        layers.append(Activation("softmax" if last else "relu", (int(n_out),)))
    return Architecture(tuple(layers), cut_index, int(widths[-1]))


def architecture_from_dict(cfg: dict[str, Any]) -> Architecture:
    """Build an architecture from the declarative config mapping.

    Input shapes are chained from ``input``; a layer may restate its input
    size, which is then checked.
    """
    if not isinstance(cfg, dict):
        raise ConfigError("architecture config must be a mapping")
    for key in ("input", "layers", "cut_index", "num_classes"):
        if key not in cfg:
            raise ConfigError("missing key", key)
    shape = cfg["input"]
    shape = (int(shape),) if isinstance(shape, (int, float)) else tuple(int(s) for s in shape)
    layers: list[LayerSpec] = []
    for i, raw in enumerate(cfg["layers"]):
        where = f"layers[{i}]"
        if not isinstance(raw, dict) or "kind" not in raw:
            raise ConfigError("each layer needs a 'kind'", where)
        kind = raw["kind"]
        try:
            if kind == "dense":
                if len(shape) != 1:
                    raise ConfigError(f"dense layer needs a flat input, got {shape}", where)
                n_in = int(raw.get("input_nodes", shape[0]))
                if n_in != shape[0]:
                    raise ConfigError(f"input_nodes={n_in} but previous output is {shape[0]}", where)
                layer: LayerSpec = Dense(n_in, int(raw["output_nodes"]), bool(raw.get("bias", True)))
            elif kind == "conv2d":
                if len(shape) != 3:
                    raise ConfigError(f"conv2d needs an (a, b, c) input, got {shape}", where)
                if int(raw.get("stride", 1)) != 1:
                    raise ConfigError("only stride 1 is supported", where)
                if raw.get("padding", "same") != "same":
                    raise ConfigError("only same padding is supported", where)
                kernel = raw["kernel"]
                kernel = (int(kernel), int(kernel)) if isinstance(kernel, int) else tuple(int(k) for k in kernel)
                layer = Conv2D(shape, kernel, int(raw["channels"]))
            elif kind == "pool":
                if len(shape) != 3:
                    raise ConfigError(f"pool needs an (a, b, c) input, got {shape}", where)
                layer = Pool(shape, int(raw.get("size", 2)))
            elif kind == "activation":
                layer = Activation(str(raw["fn"]), shape)
            elif kind == "flatten":
                layer = Flatten(shape)
            else:
                raise ConfigError(f"unknown layer kind {kind!r}", where)
        except KeyError as exc:
            raise ConfigError(f"missing field {exc.args[0]!r}", where) from None
        if isinstance(layer, Pool):
            a, b, _ = shape
            if layer.size < 1 or a % layer.size or b % layer.size:
                raise ConfigError(f"pool size {layer.size} must divide {a}x{b}", where)
        layers.append(layer)
        shape = tuple(layer.out_shape)
    return Architecture(tuple(layers), int(cfg["cut_index"]), int(cfg["num_classes"]))


def load_architecture(source: str | Path | dict) -> Architecture:
    if isinstance(source, dict):
        return architecture_from_dict(source)
    path = Path(source)
    if not path.exists():
        raise ConfigError(f"architecture file {path} not found", "arch")
    return architecture_from_dict(yaml.safe_load(path.read_text()))


# --------------------------------------------------------------------------- parameters


@dataclass
class ParamVector:
    """Flat parameters for trainable layers ``first_layer .. first_layer+len(offsets)-1``."""

    values: np.ndarray
    layer_offsets: tuple[int, ...]
    first_layer: int = 1

    @property
    def last_layer(self) -> int:
        return self.first_layer + len(self.layer_offsets) - 1

    @property
    def layers(self) -> range:
        return range(self.first_layer, self.last_layer + 1)

    def bounds(self, m: int) -> tuple[int, int]:
        if m not in self.layers:
            raise ConfigError(f"trainable layer {m} not covered by parameters {self.first_layer}..{self.last_layer}")
        i = m - self.first_layer
        end = self.layer_offsets[i + 1] if i + 1 < len(self.layer_offsets) else len(self.values)
        return self.layer_offsets[i], end

    def block(self, m: int) -> np.ndarray:
        lo, hi = self.bounds(m)
        return self.values[lo:hi]

    def slice(self, first: int, last: int) -> "ParamVector":
        lo, _ = self.bounds(first)
        _, hi = self.bounds(last)
        offsets = tuple(self.bounds(m)[0] - lo for m in range(first, last + 1))
        return ParamVector(self.values[lo:hi].copy(), offsets, first)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layer_offsets, self.first_layer)

    def __len__(self) -> int:
        return len(self.values)


def layout(arch: Architecture, first: int = 1, last: int | None = None) -> tuple[int, ...]:
    last = arch.M if last is None else last
    offsets, pos = [], 0
    for m in range(first, last + 1):
        offsets.append(pos)
        pos += arch.trainable(m).n_params
    return tuple(offsets)


def zeros(arch: Architecture, first: int = 1, last: int | None = None) -> ParamVector:
    last = arch.M if last is None else last
    return ParamVector(np.zeros(count_params(arch, first, last)), layout(arch, first, last), first)


def init_params(arch: Architecture, seed: int, first: int = 1, last: int | None = None) -> ParamVector:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init, one seeded substream per layer.

    Because every layer draws from its own stream, initializing a sub-range
    gives bitwise the same blocks as slicing a full initialization.
    """
    p = zeros(arch, first, last)
    for m in p.layers:
        layer = arch.trainable(m)
        bound = 1.0 / np.sqrt(layer.fan_in)
        p.block(m)[:] = stream(seed, "init", m).uniform(-bound, bound, size=layer.n_params)
    return p


def concat(*parts: ParamVector) -> ParamVector:
    """Join contiguous parameter ranges (e.g. extractor + head)."""
    parts = tuple(sorted(parts, key=lambda p: p.first_layer))
    for a, b in zip(parts[:-1], parts[1:]):
        if a.last_layer + 1 != b.first_layer:
            raise ConfigError("parameter ranges are not contiguous")
    offsets, base = [], 0
    for p in parts:
        offsets.extend(o + base for o in p.layer_offsets)
        base += len(p.values)
    return ParamVector(np.concatenate([p.values for p in parts]), tuple(offsets), parts[0].first_layer)


def _check_coverage(arch: Architecture, params: ParamVector) -> None:
    expected = count_params(arch, params.first_layer, params.last_layer)
    if params.last_layer > arch.M or params.first_layer < 1 or len(params.values) != expected:
        raise ConfigError(
            f"parameter vector of length {len(params.values)} does not match layers "
            f"{params.first_layer}..{params.last_layer} (expected {expected})"
        )
    if params.layer_offsets != layout(arch, params.first_layer, params.last_layer):
        raise ConfigError("parameter offsets do not match the architecture")


def _dense_wb(layer: Dense, block: np.ndarray) -> tuple[np.ndarray, np.ndarray | None]:
    nw = layer.output_nodes * layer.input_nodes
    w = block[:nw].reshape(layer.output_nodes, layer.input_nodes)
    b = block[nw:] if layer.bias else None
    return w, b


def _conv_wb(layer: Conv2D, block: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    kh, kw = layer.kernel
    cin = layer.input_shape[2]
    nw = kh * kw * cin * layer.out_channels
    return block[:nw].reshape(kh, kw, cin, layer.out_channels), block[nw:]


# --------------------------------------------------------------------------- forward / backward


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _patches(x: np.ndarray, kernel: tuple[int, int]) -> np.ndarray:
    """(B, a, b, c) -> (B, a, b, kh, kw, c) windows of the zero-padded input."""
    kh, kw = kernel
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    # sliding_window_view puts the window axes last: (B, a, b, c, kh, kw)
    return win.transpose(0, 1, 2, 4, 5, 3)


@dataclass
class ForwardCache:
    """Activations ``acts[i]`` entering layer ``start + i``; ``acts[-1]`` is the output."""

    acts: list[np.ndarray]
    start: int
    stop: int
    first_layer: int
    last_layer: int
    batched: bool
    cut_position: int = field(default=-1)

    @property
    def output(self) -> np.ndarray:
        return self.acts[-1] if self.batched else self.acts[-1][0]

    @property
    def features(self) -> np.ndarray | None:
        """z: the input to the cut layer, when the executed span contains it."""
        if self.start <= self.cut_position <= self.stop:
            z = self.acts[self.cut_position - self.start]
            return z if self.batched else z[0]
        return None


def forward(arch: Architecture, params: ParamVector, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Run the layers spanned by ``params`` on one sample or a batch.

    Full-model params map raw inputs to class probabilities; extractor params
    (1..m_c-1) map inputs to features z; head params (m_c..M) map z to
    probabilities.
    """
    _check_coverage(arch, params)
    start, stop = arch.span(params.first_layer, params.last_layer)
    in_shape = tuple(arch.layers[start].in_shape)
    x = np.asarray(x, dtype=np.float64)
    if x.shape == in_shape:
        batched, h = False, x[None, ...]
    elif x.shape[1:] == in_shape:
        batched, h = True, x
    else:
        raise ConfigError(f"input shape {x.shape} does not match layer input {in_shape}")
    acts = [h]
    m = params.first_layer
    for pos in range(start, stop):
        layer = arch.layers[pos]
        if isinstance(layer, Dense):
            w, b = _dense_wb(layer, params.block(m))
            h = h @ w.T
            if b is not None:
                h = h + b
            m += 1
        elif isinstance(layer, Conv2D):
            w, b = _conv_wb(layer, params.block(m))
            cols = _patches(h, layer.kernel)
            B, a, bb = h.shape[:3]
            h = cols.reshape(B * a * bb, -1) @ w.reshape(-1, layer.out_channels) + b
            h = h.reshape(B, a, bb, layer.out_channels)
            m += 1
        elif isinstance(layer, Pool):
            s = layer.size
            B, a, bb, c = h.shape
            h = h.reshape(B, a // s, s, bb // s, s, c).max(axis=(2, 4))
        elif isinstance(layer, Flatten):
            h = h.reshape(h.shape[0], -1)
        elif isinstance(layer, Activation):
            if layer.fn == "relu":
                h = np.maximum(h, 0.0)
            elif layer.fn == "softmax":
                h = softmax(h)
        acts.append(h)
    cache = ForwardCache(acts, start, stop, params.first_layer, params.last_layer, batched, arch.cut_position)
    return cache.output, cache


def loss(probabilities: np.ndarray, y) -> float | np.ndarray:
    """Categorical cross-entropy -ln p_y, with p_y floored at ``PROB_FLOOR``."""
    p = np.asarray(probabilities, dtype=np.float64)
    if p.ndim == 1:
        return float(-np.log(max(p[int(y)], PROB_FLOOR)))
    y = np.asarray(y, dtype=np.int64)
    return -np.log(np.maximum(p[np.arange(len(p)), y], PROB_FLOOR))


def backward(
    arch: Architecture,
    params: ParamVector,
    cache: ForwardCache,
    y,
    scope: str = "full",
) -> ParamVector:
    """Gradient of the summed cross-entropy over the cached batch.

    ``scope="head"`` stops back-propagation at the cut layer and returns only
    layers m_c..M.
    """
    if scope not in ("full", "head"):
        raise ConfigError(f"unknown scope {scope!r}")
    if not isinstance(arch.layers[-1], Activation) or arch.layers[-1].fn != "softmax":
        raise ConfigError("backward needs a softmax output layer")
    if cache.stop != len(arch.layers):
        raise ConfigError("backward needs a cache that reaches the output layer")
    if (cache.first_layer, cache.last_layer) != (params.first_layer, params.last_layer):
        raise RuntimeError("stale cache: parameter coverage differs from the forward pass")
    n = len(cache.acts[0])
    for i, a in enumerate(cache.acts[:-1]):
        if a.shape[1:] != tuple(arch.layers[cache.start + i].in_shape) or len(a) != n:
            raise RuntimeError(f"stale cache: activation {i} has shape {a.shape}")

    first = params.first_layer if scope == "full" else max(params.first_layer, arch.cut_index)
    if first > params.last_layer:
        raise ConfigError("head scope requires parameters covering the cut layer")
    stop_pos = cache.start if first == params.first_layer else arch.position(first)
    grad = zeros(arch, first, params.last_layer)

    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if len(y) != n:
        raise ConfigError(f"{len(y)} labels for a batch of {n}")
    probs = cache.acts[-1]
    delta = probs.copy()
    delta[np.arange(n), y] -= 1.0  # d(-ln softmax_y)/d logits

    m = params.last_layer
    for pos in range(len(arch.layers) - 2, stop_pos - 1, -1):
        layer = arch.layers[pos]
        inp = cache.acts[pos - cache.start]
        need_input_grad = pos > stop_pos
        if isinstance(layer, Dense):
            w, b = _dense_wb(layer, params.block(m))
            gw, gb = _dense_wb(layer, grad.block(m))
            gw[:] = delta.T @ inp
            if gb is not None:
                gb[:] = delta.sum(axis=0)
            if need_input_grad:
                delta = delta @ w
            m -= 1
        elif isinstance(layer, Conv2D):
            w, _ = _conv_wb(layer, params.block(m))
            gw, gb = _conv_wb(layer, grad.block(m))
            kh, kw = layer.kernel
            cols = _patches(inp, layer.kernel)
            B, a, bb, cin = inp.shape
            d2 = delta.reshape(-1, layer.out_channels)
            gw[:] = (cols.reshape(B * a * bb, -1).T @ d2).reshape(gw.shape)
            gb[:] = d2.sum(axis=0)
            if need_input_grad:
                dcols = (d2 @ w.reshape(-1, layer.out_channels).T).reshape(B, a, bb, kh, kw, cin)
                ph, pw = kh // 2, kw // 2
                dxp = np.zeros((B, a + 2 * ph, bb + 2 * pw, cin))
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, i : i + a, j : j + bb, :] += dcols[:, :, :, i, j, :]
                delta = dxp[:, ph : ph + a, pw : pw + bb, :]
            m -= 1
        elif isinstance(layer, Pool):
            s = layer.size
            B, a, bb, c = inp.shape
            blocks = inp.reshape(B, a // s, s, bb // s, s, c).transpose(0, 1, 3, 5, 2, 4).reshape(B, a // s, bb // s, c, s * s)
            onehot = np.zeros_like(blocks)
            np.put_along_axis(onehot, blocks.argmax(axis=-1)[..., None], 1.0, axis=-1)
            spread = onehot * delta[..., None]
            delta = spread.reshape(B, a // s, bb // s, c, s, s).transpose(0, 1, 4, 2, 5, 3).reshape(B, a, bb, c)
        elif isinstance(layer, Flatten):
            delta = delta.reshape(inp.shape)
        elif isinstance(layer, Activation):
            if layer.fn == "relu":
                delta = delta * (inp > 0)
            elif layer.fn == "softmax":
                raise ConfigError("softmax is only allowed as the final layer")
    return grad


def sgd_step(params: ParamVector, grad: ParamVector, lr: float, scale: float = 1.0) -> ParamVector:
    """``params - lr * scale * grad`` on the layers ``grad`` covers."""
    out = params.copy()
    if grad.first_layer == params.first_layer and len(grad.values) == len(params.values):
        out.values -= lr * scale * grad.values
        return out
    if grad.first_layer < params.first_layer or grad.last_layer > params.last_layer:
        raise ConfigError("gradient covers layers outside the parameter vector")
    lo, _ = params.bounds(grad.first_layer)
    if len(grad.values) != params.bounds(grad.last_layer)[1] - lo:
        raise ConfigError("gradient length does not match parameter blocks")
    out.values[lo : lo + len(grad.values)] -= lr * scale * grad.values
    return out


# --------------------------------------------------------------------------- counting


def count_params(arch: Architecture, from_layer: int = 1, to_layer: int | None = None) -> int:
    """Sum of T_m over trainable layers ``from_layer..to_layer`` (empty range -> 0)."""
    to_layer = arch.M if to_layer is None else to_layer
    return sum(arch.trainable(m).n_params for m in range(max(from_layer, 1), min(to_layer, arch.M) + 1))


def complexity(
    arch: Architecture,
    from_layer: int = 1,
    to_layer: int | None = None,
    passes: str = "forward",
) -> int:
    """Per-sample multiplication count X over a trainable-layer range.

    Dense layers cost T_m per pass, conv layers a*b*T_m; a backward pass
    costs the same again.
    """
    if passes not in ("forward", "forward+backward"):
        raise ConfigError(f"unknown passes {passes!r}")
    to_layer = arch.M if to_layer is None else to_layer
    total = sum(arch.trainable(m).multiplications for m in range(max(from_layer, 1), min(to_layer, arch.M) + 1))
    return 2 * total if passes == "forward+backward" else total


def predict(arch: Architecture, params: ParamVector, x: np.ndarray, batch: int = 4096) -> np.ndarray:
    """Arg-max class for each row of ``x``."""
    out = []
    for i in range(0, len(x), batch):
        probs, _ = forward(arch, params, x[i : i + batch])
        out.append(probs.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def accuracy(arch: Architecture, params: ParamVector, x: np.ndarray, y: np.ndarray) -> float:
    if len(x) == 0:
        return 0.0
    return float(np.mean(predict(arch, params, x) == np.asarray(y)))
