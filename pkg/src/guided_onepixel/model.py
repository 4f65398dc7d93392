"""A small numpy CNN with analytic input gradients, SGD training and a weight file format.

Layers are immutable; ``forward``/``backward`` return and consume explicit caches,
so a single :class:`Model` can be queried from many threads at once.

Arrays are batched NHWC: ``(batch, height, width, channels)``. Parameters are
stored as float32 (the on-disk precision); all arithmetic runs in float64.
"""

import io
import json
import logging
import struct
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import EmptyCorpusError, FormatError, ShapeError, VersionError
from .imaging import Image

log = logging.getLogger(__name__)

MAGIC = b"GOPW"
FORMAT_VERSION = 1


def _f64(a):
    return np.asarray(a, dtype=np.float64)


@dataclass(frozen=True, eq=False)
class Conv2D:
    """Stride-1 convolution with zero 'same' padding. weight: (filters, in_channels, k, k)."""

    weight: np.ndarray
    bias: np.ndarray
    kind = "conv2d"

    @property
    def params(self):
        return (self.weight, self.bias)

    def with_params(self, weight, bias):
        return Conv2D(weight, bias)

    def output_shape(self, shape):
        h, w, c = shape
        if c != self.weight.shape[1]:
            raise ShapeError(f"conv2d expects {self.weight.shape[1]} channels, got {c}")
        return (h, w, self.weight.shape[0])

    def forward(self, x):
        b, h, w, c = x.shape
        f, _, k, _ = self.weight.shape
        p = k // 2
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
        # windows: (b, h, w, c, k, k), matching the weight's (c, k, k) layout
        cols = sliding_window_view(xp, (k, k), axis=(1, 2)).reshape(b, h * w, c * k * k)
        wmat = _f64(self.weight).reshape(f, c * k * k).T
        # stacked matmul: one fixed-shape product per image, so results do not depend on batch size
        y = np.matmul(cols, wmat) + _f64(self.bias)
        return y.reshape(b, h, w, f), (cols, x.shape)

    def infer(self, x):
        return self.forward(x)[0]

    def backward(self, dy, cache, param_grads=False):
        cols, (b, h, w, c) = cache
        f, _, k, _ = self.weight.shape
        p = k // 2
        dy2 = dy.reshape(b * h * w, f)
        wmat = _f64(self.weight).reshape(f, c * k * k)
        dcols = (dy2 @ wmat).reshape(b, h, w, c, k, k)
        dxp = np.zeros((b, h + 2 * p, w + 2 * p, c))
        for i in range(k):
            for j in range(k):
                dxp[:, i:i + h, j:j + w, :] += dcols[..., i, j]
        dx = dxp[:, p:p + h, p:p + w, :]
        grads = None
        if param_grads:
            dw = (cols.reshape(b * h * w, -1).T @ dy2).T.reshape(self.weight.shape)
            grads = (dw, dy2.sum(axis=0))
        return dx, grads


@dataclass(frozen=True, eq=False)
class ReLU:
    kind = "relu"
    params = ()

    def with_params(self):
        return self

    def output_shape(self, shape):
        return shape

    def forward(self, x):
        mask = x > 0
        return np.where(mask, x, 0.0), mask

    def infer(self, x):
        return np.maximum(x, 0.0)

    def backward(self, dy, mask, param_grads=False):
        return np.where(mask, dy, 0.0), (() if param_grads else None)


@dataclass(frozen=True, eq=False)
class MaxPool2:
    """2x2 max pooling, stride 2; odd trailing rows/columns are dropped.

    Ties route the gradient to the first maximum in row-major window order.
    """

    kind = "maxpool2"
    params = ()

    def with_params(self):
        return self

    def output_shape(self, shape):
        h, w, c = shape
        if h < 2 or w < 2:
            raise ShapeError(f"maxpool2 needs at least 2x2 input, got {h}x{w}")
        return (h // 2, w // 2, c)

    def forward(self, x):
        b, h, w, c = x.shape
        h2, w2 = h // 2, w // 2
        r = x[:, :2 * h2, :2 * w2, :].reshape(b, h2, 2, w2, 2, c)
        r = r.transpose(0, 1, 3, 5, 2, 4).reshape(b, h2, w2, c, 4)
        idx = r.argmax(axis=-1)[..., None]
        y = np.take_along_axis(r, idx, axis=-1)[..., 0]
        return y, (idx, x.shape)

    def infer(self, x):
        h2, w2 = x.shape[1] // 2 * 2, x.shape[2] // 2 * 2
        return np.maximum(np.maximum(x[:, 0:h2:2, 0:w2:2], x[:, 0:h2:2, 1:w2:2]),
                          np.maximum(x[:, 1:h2:2, 0:w2:2], x[:, 1:h2:2, 1:w2:2]))

    def backward(self, dy, cache, param_grads=False):
        idx, (b, h, w, c) = cache
        h2, w2 = h // 2, w // 2
        dr = np.zeros((b, h2, w2, c, 4))
        np.put_along_axis(dr, idx, dy[..., None], axis=-1)
        dr = dr.reshape(b, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
        dx = np.zeros((b, h, w, c))
        dx[:, :2 * h2, :2 * w2, :] = dr.reshape(b, 2 * h2, 2 * w2, c)
        return dx, (() if param_grads else None)


@dataclass(frozen=True, eq=False)
class Dense:
    """Fully connected layer over the flattened (row-major HWC) input. weight: (inputs, outputs)."""

    weight: np.ndarray
    bias: np.ndarray
    kind = "dense"

    @property
    def params(self):
        return (self.weight, self.bias)

    def with_params(self, weight, bias):
        return Dense(weight, bias)

    def output_shape(self, shape):
        n = int(np.prod(shape))
        if n != self.weight.shape[0]:
            raise ShapeError(f"dense expects {self.weight.shape[0]} inputs, got {n}")
        return (1, 1, self.weight.shape[1])

    def forward(self, x):
        flat = x.reshape(x.shape[0], -1)
        y = np.matmul(flat[:, None, :], _f64(self.weight))[:, 0] + _f64(self.bias)
        return y.reshape(x.shape[0], 1, 1, -1), (flat, x.shape)

    def infer(self, x):
        return self.forward(x)[0]

    def backward(self, dy, cache, param_grads=False):
        flat, shape = cache
        dy2 = dy.reshape(dy.shape[0], -1)
        dx = (dy2 @ _f64(self.weight).T).reshape(shape)
        grads = (flat.T @ dy2, dy2.sum(axis=0)) if param_grads else None
        return dx, grads


@dataclass(frozen=True, eq=False)
class Softmax:
    """Terminal marker; the model applies softmax to the preceding layer's scores."""

    kind = "softmax"
    params = ()

    def with_params(self):
        return self

    def output_shape(self, shape):
        return shape


LAYER_TYPES = {cls.kind: cls for cls in (Conv2D, ReLU, MaxPool2, Dense, Softmax)}


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True, eq=False)
class Model:
    """Sequential classifier ending in softmax over ``num_classes`` outputs."""

    input_shape: Tuple[int, int, int]
    layers: tuple
    num_classes: int = field(init=False)

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers or not isinstance(layers[-1], Softmax):
            raise ShapeError("the final layer must be Softmax")
        if any(isinstance(l, Softmax) for l in layers[:-1]):
            raise ShapeError("Softmax may only appear as the final layer")
        frozen = []
        for layer in layers:
            params = []
            for p in layer.params:
                a = np.array(p, dtype=np.float32)
                a.setflags(write=False)
                params.append(a)
            frozen.append(layer.with_params(*params))
        shape = tuple(int(s) for s in self.input_shape)
        object.__setattr__(self, "input_shape", shape)
        for layer in frozen:
            shape = layer.output_shape(shape)
        if shape[:2] != (1, 1):
            raise ShapeError(f"network output must be a score vector, got shape {shape}")
        object.__setattr__(self, "layers", tuple(frozen))
        object.__setattr__(self, "num_classes", shape[2])

    @property
    def parameters(self):
        return [p for layer in self.layers for p in layer.params]

    def same_parameters(self, other):
        """True when architecture and every parameter are bit-identical."""
        if self.input_shape != other.input_shape or len(self.layers) != len(other.layers):
            return False
        for a, b in zip(self.layers, other.layers):
            if a.kind != b.kind:
                return False
            for pa, pb in zip(a.params, b.params):
                if pa.shape != pb.shape or pa.tobytes() != pb.tobytes():
                    return False
        return True


def _as_batch(model, x):
    """Coerce an Image, HxWxC array or NxHxWxC array into a float64 batch."""
    if isinstance(x, Image):
        x = x.data
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or x.shape[1:] != model.input_shape:
        got = x.shape[1:] if x.ndim == 4 else x.shape
        raise ShapeError(f"model expects input shape {model.input_shape}, got {got}")
    return x, single


def _scores(layers, x, keep_cache=False):
    caches = []
    for layer in layers[:-1]:
        if keep_cache:
            x, cache = layer.forward(x)
            caches.append(cache)
        else:
            x = layer.infer(x)
    return x.reshape(x.shape[0], -1), caches


def _backprop(layers, dscores, caches, param_grads=False):
    d = dscores.reshape(dscores.shape[0], 1, 1, -1)
    grads = []
    for layer, cache in zip(reversed(layers[:-1]), reversed(caches)):
        d, g = layer.backward(d, cache, param_grads)
        grads.append(g)
    grads.reverse()
    return d, grads


def logits(model, x):
    """Pre-softmax class scores for an image or a batch."""
    xb, single = _as_batch(model, x)
    s, _ = _scores(model.layers, xb)
    return s[0] if single else s


def forward(model, x):
    """Softmax class probabilities for one image (shape (K,)) or a batch (shape (B, K))."""
    xb, single = _as_batch(model, x)
    s, _ = _scores(model.layers, xb)
    p = softmax(s)
    return p[0] if single else p


def predict(model, x):
    """Argmax of :func:`forward`; ``np.argmax`` breaks ties toward the lowest index."""
    p = forward(model, x)
    if p.ndim == 1:
        return int(np.argmax(p))
    return np.argmax(p, axis=1)


def input_gradient(model, x, class_index):
    """Gradient of the pre-softmax score of ``class_index`` w.r.t. every input intensity.

    Accepts a single image (returns HxWxC) or a batch with one class index per item.
    Inputs need not lie in [0, 1].
    """
    xb, single = _as_batch(model, x)
    idx = np.broadcast_to(np.asarray(class_index), (xb.shape[0],))
    if np.any(idx < 0) or np.any(idx >= model.num_classes):
        raise IndexError(f"class index {class_index} out of range for {model.num_classes} classes")
    _, caches = _scores(model.layers, xb, keep_cache=True)
    seed = np.zeros((xb.shape[0], model.num_classes))
    seed[np.arange(xb.shape[0]), idx] = 1.0
    dx, _ = _backprop(model.layers, seed, caches)
    return dx[0] if single else dx


def build_desk_model(input_shape, num_classes, seed=0):
    """conv3x3(8) -> ReLU -> pool -> conv3x3(16) -> ReLU -> pool -> dense -> softmax.

    He-normal initialisation (std sqrt(2 / fan_in)) from ``np.random.default_rng(seed)``,
    drawn in layer order; biases start at zero.
    """
    h, w, c = input_shape
    rng = np.random.default_rng(seed)

    def he(shape, fan_in):
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)

    flat = (h // 4) * (w // 4) * 16
    layers = (
        Conv2D(he((8, c, 3, 3), c * 9), np.zeros(8)),
        ReLU(),
        MaxPool2(),
        Conv2D(he((16, 8, 3, 3), 8 * 9), np.zeros(16)),
        ReLU(),
        MaxPool2(),
        Dense(he((flat, num_classes), flat), np.zeros(num_classes)),
        Softmax(),
    )
    return Model((h, w, c), layers)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    epochs: int = 20
    batch_size: int = 16
    seed: int = 0


@dataclass(frozen=True, eq=False)
class TrainResult:
    model: Model
    accuracy: float
    losses: tuple


def accuracy(model, images, labels=None):
    """Fraction of ``images`` whose prediction equals its label."""
    xs, ys = _stack(images, labels)
    if len(ys) == 0:
        return float("nan")
    return float(np.mean(predict(model, xs) == ys))


def _stack(images, labels=None):
    images = list(images)
    if labels is None:
        labels = [im.label for im in images]
    xs = np.stack([im.data if isinstance(im, Image) else np.asarray(im, dtype=np.float64) for im in images]) \
        if images else np.zeros((0,))
    return xs, np.asarray(labels, dtype=np.int64)


def train(model, images, config=TrainConfig(), labels=None):
    """Mini-batch SGD on softmax cross-entropy.

    The epoch order is shuffled with ``np.random.default_rng(config.seed)``; a fixed
    seed gives bit-identical parameters. Returns a :class:`TrainResult` holding the
    new model, its final training accuracy and the per-epoch mean loss.
    """
    xs, ys = _stack(images, labels)
    n = len(ys)
    if n == 0:
        raise EmptyCorpusError("cannot train on an empty corpus")
    if np.any(ys < 0) or np.any(ys >= model.num_classes):
        raise IndexError(f"labels must lie in [0, {model.num_classes})")
    xs, _ = _as_batch(model, xs)
    rng = np.random.default_rng(config.seed)

    master = [[p.astype(np.float64) for p in layer.params] for layer in model.layers]
    losses = []
    for _ in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size]
            layers = [layer.with_params(*ps) for layer, ps in zip(model.layers, master)]
            s, caches = _scores(layers, xs[batch], keep_cache=True)
            p = softmax(s)
            m = len(batch)
            total += -np.log(np.clip(p[np.arange(m), ys[batch]], 1e-300, None)).sum()
            d = p.copy()
            d[np.arange(m), ys[batch]] -= 1.0
            _, grads = _backprop(layers, d / m, caches, param_grads=True)
            for ps, gs in zip(master, grads + [()]):
                for prm, g in zip(ps, gs):
                    prm -= config.learning_rate * g
        losses.append(total / n)
        log.debug("epoch %d loss %.4f", len(losses), losses[-1])

    trained = Model(model.input_shape,
                    tuple(layer.with_params(*ps) for layer, ps in zip(model.layers, master)))
    acc = accuracy(trained, xs, ys)
    log.info("final training accuracy %.4f", acc)
    return TrainResult(trained, acc, tuple(losses))


# weight file layout:
#   magic "GOPW" | u32 LE version | u32 LE header length | UTF-8 JSON header | param blocks
# The header lists input_shape, num_classes and each layer's type and parameter shapes.
# Parameter blocks follow in layer order, each raw little-endian float32, C order.

def _header(model):
    layers = []
    for layer in model.layers:
        entry = {"type": layer.kind}
        if layer.params:
            entry["shapes"] = [list(p.shape) for p in layer.params]
        layers.append(entry)
    return {"input_shape": list(model.input_shape), "num_classes": model.num_classes, "layers": layers}


def dump_model(model):
    out = io.BytesIO()
    header = json.dumps(_header(model), sort_keys=True, separators=(",", ":")).encode("utf-8")
    out.write(MAGIC)
    out.write(struct.pack("<II", FORMAT_VERSION, len(header)))
    out.write(header)
    for p in model.parameters:
        out.write(np.ascontiguousarray(p, dtype="<f4").tobytes())
    return out.getvalue()


def parse_model(buf):
    if len(buf) < 4:
        raise FormatError("file too short for magic bytes", len(buf))
    if buf[:4] != MAGIC:
        raise FormatError(f"magic mismatch: expected {MAGIC!r}, found {bytes(buf[:4])!r}", 0)
    if len(buf) < 12:
        raise FormatError("truncated version/header-length fields", len(buf))
    version, hlen = struct.unpack_from("<II", buf, 4)
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported weight file version {version} (expected {FORMAT_VERSION})", 4)
    pos = 12
    if len(buf) < pos + hlen:
        raise FormatError(f"truncated header: need {hlen} bytes", len(buf))
    try:
        header = json.loads(buf[pos:pos + hlen].decode("utf-8"))
        input_shape = tuple(int(s) for s in header["input_shape"])
        layer_specs = header["layers"]
        declared_k = int(header["num_classes"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"malformed header: {exc}", pos) from None
    pos += hlen

    layers = []
    for spec in layer_specs:
        kind = spec.get("type") if isinstance(spec, dict) else None
        if kind not in LAYER_TYPES:
            raise FormatError(f"unknown layer type {kind!r}", 12)
        params = []
        for shape in spec.get("shapes", []):
            count = int(np.prod(shape))
            nbytes = 4 * count
            if len(buf) < pos + nbytes:
                raise FormatError(f"truncated {kind} parameter block: need {nbytes} bytes", len(buf))
            params.append(np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(shape))
            pos += nbytes
        try:
            layers.append(LAYER_TYPES[kind]().with_params(*params) if not params
                          else LAYER_TYPES[kind](*params))
        except TypeError:
            raise FormatError(f"wrong parameter count for {kind}", pos) from None
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after parameters", pos)
    try:
        model = Model(input_shape, tuple(layers))
    except ShapeError as exc:
        raise FormatError(f"inconsistent architecture: {exc}", 12) from None
    if model.num_classes != declared_k:
        raise FormatError(f"header declares {declared_k} classes, layers give {model.num_classes}", 12)
    return model


def save_model(model, path):
    with open(path, "wb") as fh:
        fh.write(dump_model(model))


def load_model(path):
    with open(path, "rb") as fh:
        return parse_model(fh.read())
