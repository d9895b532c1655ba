"""A small numpy CNN with hand-written backpropagation.

Tensors are float64 numpy arrays in NHWC layout. A network is described by
a :class:`NetworkSpec` (an ordered list of layer descriptors) and carries
its trainable state in :class:`NetworkParams`.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, InputError, ParameterError, SpecError

# -- layer descriptors -----------------------------------------------------------


@dataclass(frozen=True)
class Conv2D:
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 0
    kind = "conv2d"


@dataclass(frozen=True)
class ReLU:
    kind = "relu"


@dataclass(frozen=True)
class MaxPool:
    window: int = 2
    stride: int = 2
    kind = "maxpool"


@dataclass(frozen=True)
class Flatten:
    kind = "flatten"


@dataclass(frozen=True)
class Dense:
    units: int
    kind = "dense"


@dataclass(frozen=True)
class Softmax:
    kind = "softmax"


LAYER_TYPES = {cls.kind: cls for cls in (Conv2D, ReLU, MaxPool, Flatten, Dense, Softmax)}


def layer_to_dict(layer):
    d = {"kind": layer.kind}
    d.update({k: getattr(layer, k) for k in layer.__dataclass_fields__})
    return d


def layer_from_dict(d):
    d = dict(d)
    try:
        cls = LAYER_TYPES[d.pop("kind")]
    except KeyError as exc:
        raise SpecError(f"unknown layer kind in {d}") from exc
    return cls(**d)


@dataclass
class NetworkSpec:
    layers: list
    input_shape: tuple = (64, 64, 1)
    embedding_layer: int | None = None

    def shapes(self):
        """Check the shape chain; returns the output shape (excluding N) of every layer."""
        shape = tuple(self.input_shape)
        if len(shape) != 3 or min(shape) < 1:
            raise SpecError(f"input shape must be (H, W, C), got {shape}")
        out = []
        softmax_at = [i for i, l in enumerate(self.layers) if isinstance(l, Softmax)]
        if softmax_at != [len(self.layers) - 1]:
            raise SpecError("exactly one Softmax is required, as the last layer")
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv2D):
                if len(shape) != 3:
                    raise SpecError(f"layer {i} (conv2d) needs a 3-D input, got {shape}")
                h, w, _ = shape
                k, s, p = layer.kernel, layer.stride, layer.padding
                ho, wo = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
                if min(k, s, layer.out_channels) < 1 or p < 0 or ho < 1 or wo < 1:
                    raise SpecError(f"layer {i} (conv2d) does not fit input {shape}")
                shape = (ho, wo, layer.out_channels)
            elif isinstance(layer, MaxPool):
                if len(shape) != 3:
                    raise SpecError(f"layer {i} (maxpool) needs a 3-D input, got {shape}")
                h, w, c = shape
                ho, wo = (h - layer.window) // layer.stride + 1, (w - layer.window) // layer.stride + 1
                if ho < 1 or wo < 1:
                    raise SpecError(f"layer {i} (maxpool) window larger than input {shape}")
                shape = (ho, wo, c)
            elif isinstance(layer, Flatten):
                shape = (int(np.prod(shape)),)
            elif isinstance(layer, Dense):
                if len(shape) != 1:
                    raise SpecError(f"layer {i} (dense) needs a flat input, got {shape}; add Flatten")
                shape = (layer.units,)
            elif isinstance(layer, (ReLU, Softmax)):
                pass
            else:
                raise SpecError(f"layer {i}: unsupported layer {layer!r}")
            out.append(shape)
        if len(out[-1]) != 1:
            raise SpecError("network must end in a flat class distribution")
        if self.embedding_layer is not None:
            e = self.embedding_layer
            dense_after = [i for i, l in enumerate(self.layers) if isinstance(l, Dense) and i > e]
            if not (0 <= e < len(self.layers)) or not isinstance(self.layers[e], Dense) or not dense_after:
                raise SpecError("embedding_layer must be a Dense layer that precedes the classifier Dense")
        return out

    @property
    def num_classes(self):
        return self.shapes()[-1][0]

    def to_dict(self):
        return {"layers": [layer_to_dict(l) for l in self.layers],
                "input_shape": list(self.input_shape),
                "embedding_layer": self.embedding_layer}

    @classmethod
    def from_dict(cls, d):
        return cls([layer_from_dict(l) for l in d["layers"]], tuple(d["input_shape"]), d.get("embedding_layer"))


def default_spec(num_classes=4, side=64, embedding=128):
    """conv3x3x16 / relu / pool2 / conv3x3x32 / relu / pool2 / flatten / dense(embedding) / dense(K) / softmax."""
    layers = [Conv2D(16, 3), ReLU(), MaxPool(2, 2), Conv2D(32, 3), ReLU(), MaxPool(2, 2),
              Flatten(), Dense(embedding), Dense(num_classes), Softmax()]
    return NetworkSpec(layers, (side, side, 1), embedding_layer=7)


@dataclass
class NetworkParams:
    """Per-layer parameter dicts (``{"W": ..., "b": ...}``, empty for
    parameterless layers) plus optional named extra groups."""

    spec: NetworkSpec
    layers: list
    seed: int | None = None
    groups: dict = field(default_factory=dict)

    def copy(self):
        return NetworkParams(self.spec, [{k: v.copy() for k, v in d.items()} for d in self.layers],
                             self.seed, {g: {k: v.copy() for k, v in d.items()} for g, d in self.groups.items()})

    def named(self):
        """Yield (layer index, name, array) in declaration order."""
        for i, d in enumerate(self.layers):
            for name in sorted(d):
                yield i, name, d[name]

    def zeros_like(self):
        return [{k: np.zeros_like(v) for k, v in d.items()} for d in self.layers]


def build(spec, seed=0):
    """He-normal weights (std = sqrt(2 / fan_in)) and zero biases."""
    shapes = spec.shapes()
    rng = np.random.default_rng(seed)
    layers = []
    prev = tuple(spec.input_shape)
    for layer, shape in zip(spec.layers, shapes):
        if isinstance(layer, Conv2D):
            fan_in = layer.kernel * layer.kernel * prev[2]
            w = rng.standard_normal((layer.kernel, layer.kernel, prev[2], layer.out_channels))
            layers.append({"W": w * np.sqrt(2.0 / fan_in), "b": np.zeros(layer.out_channels)})
        elif isinstance(layer, Dense):
            w = rng.standard_normal((prev[0], layer.units))
            layers.append({"W": w * np.sqrt(2.0 / prev[0]), "b": np.zeros(layer.units)})
        else:
            layers.append({})
        prev = shape
    return NetworkParams(spec, layers, seed)


# -- per-layer forward / backward ------------------------------------------------

def _windows(x, k, s):
    """(N, Ho, Wo, C, k, k) view of sliding windows."""
    v = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(1, 2))
    return v[:, ::s, ::s]


def conv_forward(x, W, b, stride=1, padding=0):
    k = W.shape[0]
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    win = _windows(x, k, stride)
    n, ho, wo, c = win.shape[:4]
    cols = win.reshape(n * ho * wo, c * k * k)
    wmat = W.transpose(2, 0, 1, 3).reshape(c * k * k, -1)
    out = cols @ wmat + b
    return out.reshape(n, ho, wo, -1), cols


def conv_backward(dout, x_shape, cols, W, stride=1, padding=0):
    k, _, c, f = W.shape
    n, ho, wo, _ = dout.shape
    d2 = dout.reshape(-1, f)
    wmat = W.transpose(2, 0, 1, 3).reshape(c * k * k, f)
    dW = (cols.T @ d2).reshape(c, k, k, f).transpose(1, 2, 0, 3)
    db = d2.sum(axis=0)
    dcols = (d2 @ wmat.T).reshape(n, ho, wo, c, k, k)
    hp, wp = x_shape[1] + 2 * padding, x_shape[2] + 2 * padding
    dx = np.zeros((n, hp, wp, c))
    for i in range(k):
        for j in range(k):
            dx[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[..., i, j]
    if padding:
        dx = dx[:, padding:-padding, padding:-padding, :]
    return dx, dW, db


def maxpool_forward(x, window, stride):
    win = _windows(x, window, stride)
    n, ho, wo, c = win.shape[:4]
    flat = win.reshape(n, ho, wo, c, window * window)
    arg = flat.argmax(axis=-1)  # first maximum wins ties
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, arg


def maxpool_backward(dout, x_shape, arg, window, stride):
    dx = np.zeros(x_shape)
    n, ho, wo, c = dout.shape
    for idx in range(window * window):
        i, j = divmod(idx, window)
        dx[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += np.where(arg == idx, dout, 0.0)
    return dx


def softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(dp, p):
    return p * (dp - (dp * p).sum(axis=1, keepdims=True))


class ForwardTrace:
    """Inputs and caches of every layer for one batch; backward consumes it once."""

    def __init__(self, inputs, caches, output):
        self.inputs = inputs
        self.caches = caches
        self.output = output
        self.consumed = False

    def activation(self, layer_index):
        """Output of layer ``layer_index``."""
        if layer_index + 1 < len(self.inputs):
            return self.inputs[layer_index + 1]
        return self.output


def _check_batch(params, x):
    x = np.asarray(x, dtype=np.float64)
    expected = tuple(params.spec.input_shape)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise InputError(f"batch shape {x.shape} does not match network input (N, {expected})")
    return x


def forward_layers(params, x, start=0, stop=None):
    """Run layers [start, stop); returns (output, inputs, caches)."""
    layers = params.spec.layers
    stop = len(layers) if stop is None else stop
    inputs, caches = [], []
    for i in range(start, stop):
        layer, p = layers[i], params.layers[i]
        inputs.append(x)
        if isinstance(layer, Conv2D):
            x, cache = conv_forward(x, p["W"], p["b"], layer.stride, layer.padding)
        elif isinstance(layer, ReLU):
            cache = None
            x = np.maximum(x, 0.0)
        elif isinstance(layer, MaxPool):
            x, cache = maxpool_forward(x, layer.window, layer.stride)
        elif isinstance(layer, Flatten):
            cache = None
            x = x.reshape(x.shape[0], -1)
        elif isinstance(layer, Dense):
            cache = None
            x = x @ p["W"] + p["b"]
        elif isinstance(layer, Softmax):
            x = softmax(x)
            cache = x
        caches.append(cache)
    return x, inputs, caches


def backward_layers(params, inputs, caches, dout, start=0, need_input_grad=False):
    """Backpropagate ``dout`` through layers [start, start + len(inputs)).

    Returns (per-layer grad dicts for those layers, gradient wrt the first input).
    """
    layers = params.spec.layers
    grads = [dict() for _ in inputs]
    for k in range(len(inputs) - 1, -1, -1):
        i = start + k
        layer, p, x = layers[i], params.layers[i], inputs[k]
        last = k == 0 and not need_input_grad
        if isinstance(layer, Conv2D):
            if last:
                d2 = dout.reshape(-1, dout.shape[-1])
                kk, _, c, f = p["W"].shape
                grads[k] = {"W": (caches[k].T @ d2).reshape(c, kk, kk, f).transpose(1, 2, 0, 3),
                            "b": d2.sum(axis=0)}
                dout = None
                break
            dout, dW, db = conv_backward(dout, x.shape, caches[k], p["W"], layer.stride, layer.padding)
            grads[k] = {"W": dW, "b": db}
        elif isinstance(layer, ReLU):
            dout = dout * (x > 0)
        elif isinstance(layer, MaxPool):
            dout = maxpool_backward(dout, x.shape, caches[k], layer.window, layer.stride)
        elif isinstance(layer, Flatten):
            dout = dout.reshape(x.shape)
        elif isinstance(layer, Dense):
            grads[k] = {"W": x.T @ dout, "b": dout.sum(axis=0)}
            dout = dout @ p["W"].T
        elif isinstance(layer, Softmax):
            dout = softmax_backward(dout, caches[k])
    return grads, dout


def forward(params, batch):
    """Return (class probabilities (N, K), trace)."""
    x = _check_batch(params, batch)
    out, inputs, caches = forward_layers(params, x)
    return out, ForwardTrace(inputs, caches, out)


def backward(params, trace, dprobs):
    """Gradients of a scalar loss given dL/dprobs."""
    if trace.consumed:
        raise InputError("forward trace already consumed by a backward pass")
    trace.consumed = True
    grads, _ = backward_layers(params, trace.inputs, trace.caches, dprobs)
    return grads


PROB_FLOOR = 1e-12


def _weights_for(class_weights, k):
    if class_weights is None:
        return np.ones(k)
    w = np.asarray(class_weights, dtype=np.float64)
    if w.shape != (k,):
        raise InputError(f"class weights must have length {k}")
    return w


def loss_and_grad(params, trace, probs, labels, class_weights=None):
    """Class-weighted cross-entropy, mean over the batch, and its gradient."""
    labels = np.asarray(labels)
    n, k = probs.shape
    if labels.shape != (n,) or np.any(labels < 0) or np.any(labels >= k):
        raise InputError(f"labels must be {n} integers in [0, {k})")
    w = _weights_for(class_weights, k)[labels]
    p_true = probs[np.arange(n), labels]
    loss = float(np.mean(w * -np.log(np.maximum(p_true, PROB_FLOOR))))
    dprobs = np.zeros_like(probs)
    dprobs[np.arange(n), labels] = np.where(p_true > PROB_FLOOR, -w / (n * np.maximum(p_true, PROB_FLOOR)), 0.0)
    return loss, backward(params, trace, dprobs)


# -- optimizers --------------------------------------------------------------------

@dataclass
class OptimizerConfig:
    name: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self):
        if self.name not in ("sgd", "adam"):
            raise ParameterError(f"unknown optimizer {self.name!r}")
        if self.lr <= 0:
            raise ParameterError("lr must be positive")
        return self


def update_array(p, g, opt_state, key, cfg):
    """One in-place optimizer update of array ``p``; ``opt_state["t"]`` is the step count."""
    t = opt_state["t"]
    if cfg.name == "sgd":
        v = opt_state.setdefault(key, np.zeros_like(p))
        v *= cfg.momentum
        v += g
        p -= cfg.lr * v
    else:
        m, v = opt_state.setdefault(key, (np.zeros_like(p), np.zeros_like(p)))
        m *= cfg.beta1
        m += (1 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1 - cfg.beta2) * g * g
        mhat = m / (1 - cfg.beta1 ** t)
        vhat = v / (1 - cfg.beta2 ** t)
        p -= cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps)


def step(params, grads, opt_state, cfg, trainable=None):
    """Apply one optimizer update in place and return ``params``.

    ``grads`` mirrors ``params.layers``; ``trainable`` optionally restricts
    the update to a set of layer indices.
    """
    cfg.validate()
    opt_state["t"] = opt_state.get("t", 0) + 1
    for i, name, p in params.named():
        if trainable is not None and i not in trainable:
            continue
        g = grads[i].get(name)
        if g is not None:
            update_array(p, g, opt_state, (i, name), cfg)
    return params


# -- training ------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    class_weights: object = "balanced"  # "balanced", "uniform", or explicit per-class weights
    seed: int = 0
    shuffle: bool = True

    def validate(self):
        if self.epochs < 0:
            raise ParameterError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ParameterError("batch_size must be at least 1")
        self.optimizer.validate()
        return self


def _as_xy(data):
    if isinstance(data, tuple):
        x, y = data
        return np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.int64)
    return data.arrays()


def resolve_class_weights(spec_weights, y, k):
    from .dataset import balanced_weights

    if spec_weights is None or (isinstance(spec_weights, str) and spec_weights == "uniform"):
        return np.ones(k)
    if isinstance(spec_weights, str) and spec_weights == "balanced":
        return balanced_weights(np.bincount(y, minlength=k))
    return _weights_for(spec_weights, k)


def train(params, train_set, cfg, trainable=None):
    """Minibatch training; ``train_set`` is a PatchSet or an (X, y) pair.

    Returns (params, history) where history has one
    ``{"epoch", "loss", "accuracy"}`` row per epoch.
    """
    cfg.validate()
    x, y = _as_xy(train_set)
    if len(y) == 0:
        raise InputError("training set is empty")
    if np.any(y < 0):
        raise InputError("training set contains unlabeled patches")
    k = params.spec.num_classes
    weights = resolve_class_weights(cfg.class_weights, y, k)
    rng = np.random.default_rng(cfg.seed)
    opt_state = {}
    history = []
    n = len(y)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n) if cfg.shuffle else np.arange(n)
        total_loss, correct = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            probs, trace = forward(params, x[idx])
            loss, grads = loss_and_grad(params, trace, probs, y[idx], weights)
            step(params, grads, opt_state, cfg.optimizer, trainable)
            total_loss += loss * len(idx)
            correct += int(np.sum(argmax_lowest(probs) == y[idx]))
        history.append({"epoch": epoch + 1, "loss": total_loss / n, "accuracy": correct / n})
    return params, history


def argmax_lowest(probs):
    """Row-wise argmax; ties go to the lowest index (numpy's rule)."""
    return np.argmax(probs, axis=1)


def predict(params, patches, batch_size=128):
    """Return (classes, confidences, distributions) for a PatchSet or (N, H, W, C) array."""
    x = patches if isinstance(patches, np.ndarray) else _as_xy(patches)[0]
    x = _check_batch(params, x) if len(x) else np.zeros((0,) + tuple(params.spec.input_shape))
    k = params.spec.num_classes
    out = np.zeros((len(x), k))
    for start in range(0, len(x), batch_size):
        out[start:start + batch_size] = forward_layers(params, x[start:start + batch_size])[0]
    cls = argmax_lowest(out) if len(x) else np.zeros(0, dtype=np.int64)
    conf = out[np.arange(len(x)), cls] if len(x) else np.zeros(0)
    return cls, conf, out


def evaluate(params, data, class_weights=None):
    """Return (truths, predictions, mean unweighted cross-entropy)."""
    x, y = _as_xy(data)
    if len(y) == 0:
        return y, y.copy(), float("nan")
    cls, _, probs = predict(params, x)
    loss = float(np.mean(-np.log(np.maximum(probs[np.arange(len(y)), y], PROB_FLOOR))))
    return y, cls, loss


# -- persistence ------------------------------------------------------------------

MAGIC = b"TMW1"
FORMAT_VERSION = 1


def _entries(params):
    out = [(f"layer{i}.{name}", arr) for i, name, arr in params.named()]
    for g in sorted(params.groups):
        for name in sorted(params.groups[g]):
            out.append((f"{g}.{name}", params.groups[g][name]))
    return out


def dumps_weights(params):
    entries = _entries(params)
    header = {
        "version": FORMAT_VERSION,
        "dtype": "f64",
        "spec": params.spec.to_dict(),
        "seed": params.seed,
        "tensors": [[name, list(arr.shape)] for name, arr in entries],
        "groups": sorted(params.groups),
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(hbytes)))
    buf.write(hbytes)
    for _, arr in entries:
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def save_weights(params, path):
    with open(path, "wb") as fh:
        fh.write(dumps_weights(params))


def loads_weights(raw, spec=None):
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise FormatError("not a TMW1 weight file (bad magic)")
    (hlen,) = struct.unpack("<I", raw[4:8])
    if 8 + hlen > len(raw):
        raise FormatError("truncated weight file header")
    try:
        header = json.loads(raw[8:8 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError("corrupt weight file header") from exc
    if header.get("version") != FORMAT_VERSION or header.get("dtype") != "f64":
        raise FormatError(f"unsupported weight file version/dtype: {header.get('version')}, {header.get('dtype')}")
    try:
        stored = NetworkSpec.from_dict(header["spec"])
        stored.shapes()
    except (KeyError, TypeError, SpecError) as exc:
        raise FormatError(f"weight file carries an invalid network description: {exc}") from exc
    if spec is not None and spec.to_dict() != stored.to_dict():
        raise FormatError("weight file network does not match the expected network")
    tensors = header["tensors"]
    total = sum(int(np.prod(shape)) for _, shape in tensors)
    payload = raw[8 + hlen:]
    if len(payload) != 8 * total:
        raise FormatError(f"payload holds {len(payload)} bytes, header declares {8 * total}")
    flat = np.frombuffer(payload, dtype="<f8")
    expected = build_shapes(stored)
    layers = [dict() for _ in stored.layers]
    groups = {}
    pos = 0
    for name, shape in tensors:
        n = int(np.prod(shape))
        arr = flat[pos:pos + n].reshape(shape).astype(np.float64)
        pos += n
        owner, _, pname = name.partition(".")
        if owner.startswith("layer") and owner[5:].isdigit():
            i = int(owner[5:])
            if expected.get((i, pname)) != tuple(shape):
                raise FormatError(f"tensor {name} has shape {tuple(shape)}, network expects {expected.get((i, pname))}")
            layers[i][pname] = arr
        else:
            groups.setdefault(owner, {})[pname] = arr
    missing = set(expected) - {(i, k) for i, d in enumerate(layers) for k in d}
    if missing:
        raise FormatError(f"weight file lacks tensors for {sorted(missing)}")
    return NetworkParams(stored, layers, header.get("seed"), groups)


def build_shapes(spec):
    return {(i, name): arr.shape for i, name, arr in build(spec, 0).named()}


def load_weights(path, spec=None):
    with open(path, "rb") as fh:
        raw = fh.read()
    return loads_weights(raw, spec)
