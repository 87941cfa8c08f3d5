"""A small convolutional classifier with hand-derived backpropagation.

Layout: conv3x3 -> ReLU -> conv3x3 -> ReLU -> dropout -> flatten -> fc -> ReLU
-> fc -> ReLU -> fc (10 logits).  Convolutions use stride 1 and padding 1, so
the spatial size is preserved at every input resolution.

Activations are kept channels-last (N, H, W, C) internally; the flatten step
therefore orders fc1 inputs as (row, col, channel).  Parameters live in one
flat float64 vector and the named tensors are views into it, which makes
flattening free and keeps the ordering fixed.
"""

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_image_batch
from .exceptions import DomainError, FormatError, NumericalError, ShapeError
from .privacy import make_generator

N_CLASSES = 10
KERNEL = 3


@dataclass(frozen=True)
class Architecture:
    side: int
    conv_channels: tuple = (8, 16)
    hidden: tuple = (128, 64)
    dropout: float = 0.5
    n_classes: int = N_CLASSES

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.side < 1:
            raise ShapeError(f"side must be positive, got {self.side}")
        if len(self.conv_channels) != 2 or len(self.hidden) != 2:
            raise ShapeError("architecture needs exactly two conv layers and two hidden fc layers")
        if not 0.0 <= self.dropout < 1.0:
            raise DomainError(f"dropout rate must be in [0, 1), got {self.dropout}")

    def param_shapes(self):
        c1, c2 = self.conv_channels
        h1, h2 = self.hidden
        return {
            "conv1.weight": (c1, 1, KERNEL, KERNEL),
            "conv1.bias": (c1,),
            "conv2.weight": (c2, c1, KERNEL, KERNEL),
            "conv2.bias": (c2,),
            "fc1.weight": (self.side * self.side * c2, h1),
            "fc1.bias": (h1,),
            "fc2.weight": (h1, h2),
            "fc2.bias": (h2,),
            "fc3.weight": (h2, self.n_classes),
            "fc3.bias": (self.n_classes,),
        }

    def n_params(self):
        return sum(int(np.prod(s)) for s in self.param_shapes().values())

    def to_dict(self):
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        d["hidden"] = list(self.hidden)
        return d


class ModelParams:
    """Named parameter tensors backed by one flat vector."""

    def __init__(self, arch, vector=None):
        self.arch = arch
        n = arch.n_params()
        if vector is None:
            vector = np.zeros(n)
        vector = np.array(vector, dtype=np.float64)
        if vector.shape != (n,):
            raise ShapeError(f"{arch} needs {n} parameters, got vector of shape {vector.shape}")
        self.vector = vector
        self.tensors = {}
        offset = 0
        for name, shape in arch.param_shapes().items():
            size = int(np.prod(shape))
            self.tensors[name] = vector[offset:offset + size].reshape(shape)
            offset += size

    def __getitem__(self, name):
        return self.tensors[name]

    def flatten(self):
        return self.vector.copy()

    @classmethod
    def from_vector(cls, arch, vector):
        return cls(arch, vector)

    def copy(self):
        return ModelParams(self.arch, self.vector)

    def __eq__(self, other):
        return (isinstance(other, ModelParams) and self.arch == other.arch
                and np.array_equal(self.vector, other.vector))

    def __repr__(self):
        return f"ModelParams({self.arch}, n={self.vector.size})"


def init_params(arch, seed):
    """He-uniform weights (bound ``sqrt(6 / fan_in)``), zero biases."""
    rng = make_generator(seed)
    params = ModelParams(arch)
    for name, tensor in params.tensors.items():
        if name.endswith(".weight"):
            fan_in = int(np.prod(tensor.shape[1:])) if name.startswith("conv") else tensor.shape[0]
            bound = np.sqrt(6.0 / fan_in)
            tensor[...] = rng.uniform(-bound, bound, size=tensor.shape)
    return params


def _conv_forward(x, w, b):
    # x: (N, H, W, C) -> (N, H, W, F); im2col rows ordered (kh, kw, C)
    n, h, wd, c = x.shape
    f = w.shape[0]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    windows = sliding_window_view(xp, (KERNEL, KERNEL), axis=(1, 2))
    cols = windows.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * wd, KERNEL * KERNEL * c)
    out = cols @ w.transpose(0, 2, 3, 1).reshape(f, -1).T + b
    return out.reshape(n, h, wd, f), cols


def _conv_backward(dout, cols, w, x_shape, need_dx=True):
    n, h, wd, c = x_shape
    f = w.shape[0]
    d2 = dout.reshape(-1, f)
    dw = (d2.T @ cols).reshape(f, KERNEL, KERNEL, c).transpose(0, 3, 1, 2)
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = (d2 @ w.transpose(0, 2, 3, 1).reshape(f, -1)).reshape(n, h, wd, KERNEL, KERNEL, c)
    dxp = np.zeros((n, h + 2, wd + 2, c))
    for i in range(KERNEL):
        for j in range(KERNEL):
            dxp[:, i:i + h, j:j + wd, :] += dcols[:, :, :, i, j, :]
    return dxp[:, 1:-1, 1:-1, :], dw, db


def _as_input(params, batch):
    x = check_image_batch(batch, "batch").astype(np.float64, copy=False)
    s = params.arch.side
    if x.shape[1:] != (s, s):
        raise ShapeError(f"model expects {s}x{s} inputs, got {x.shape[1]}x{x.shape[2]}")
    return x[..., np.newaxis]


def _dropout_mask(shape, rate, seed):
    keep = 1.0 - rate
    keys = seed if isinstance(seed, tuple) else (seed,)
    return (make_generator(*keys).random(shape) < keep) / keep


def _forward(params, x, train_mode, dropout_seed):
    t = params.tensors
    cache = {}
    z1, cache["cols1"] = _conv_forward(x, t["conv1.weight"], t["conv1.bias"])
    a1 = np.maximum(z1, 0.0)
    z2, cache["cols2"] = _conv_forward(a1, t["conv2.weight"], t["conv2.bias"])
    a2 = np.maximum(z2, 0.0)
    rate = params.arch.dropout
    mask = None
    if train_mode and rate > 0.0:
        if dropout_seed is None:
            raise DomainError("train-mode forward with dropout needs a dropout_seed")
        mask = _dropout_mask(a2.shape, rate, dropout_seed)
        a2 = a2 * mask
    flat = a2.reshape(len(x), -1)
    z3 = flat @ t["fc1.weight"] + t["fc1.bias"]
    a3 = np.maximum(z3, 0.0)
    z4 = a3 @ t["fc2.weight"] + t["fc2.bias"]
    a4 = np.maximum(z4, 0.0)
    logits = a4 @ t["fc3.weight"] + t["fc3.bias"]
    cache.update(x=x, z1=z1, a1=a1, z2=z2, mask=mask, flat=flat, z3=z3, a3=a3, z4=z4, a4=a4)
    return logits, cache


def forward(params, batch, train_mode=False, dropout_seed=None):
    """Logits of shape (N, 10) for a batch of shape (N, S, S) or (N, 1, S, S)."""
    logits, _ = _forward(params, _as_input(params, batch), train_mode, dropout_seed)
    return logits


def log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def loss_and_grad(params, batch, labels, dropout_seed=None, train_mode=True, batch_index=0):
    """Mean softmax cross-entropy and its gradient as a flat vector.

    Dropout is active when ``train_mode`` is set and the architecture's rate
    is non-zero; the mask is a deterministic function of ``dropout_seed``.
    """
    x = _as_input(params, batch)
    labels = np.asarray(labels)
    if len(labels) != len(x) or len(x) == 0:
        raise ShapeError(f"need a non-empty batch with one label per image ({len(x)} vs {len(labels)})")
    if labels.min() < 0 or labels.max() >= params.arch.n_classes:
        raise DomainError(f"labels must lie in [0, {params.arch.n_classes})")
    logits, c = _forward(params, x, train_mode, dropout_seed)
    logp = log_softmax(logits)
    n = len(x)
    loss = -logp[np.arange(n), labels].mean()
    if not np.isfinite(loss):
        raise NumericalError(f"non-finite loss {loss} on batch {batch_index}")

    t = params.tensors
    grad = ModelParams(params.arch)
    g = grad.tensors

    dz = np.exp(logp)
    dz[np.arange(n), labels] -= 1.0
    dz /= n
    g["fc3.weight"][...] = c["a4"].T @ dz
    g["fc3.bias"][...] = dz.sum(axis=0)
    dz = (dz @ t["fc3.weight"].T) * (c["z4"] > 0)
    g["fc2.weight"][...] = c["a3"].T @ dz
    g["fc2.bias"][...] = dz.sum(axis=0)
    dz = (dz @ t["fc2.weight"].T) * (c["z3"] > 0)
    g["fc1.weight"][...] = c["flat"].T @ dz
    g["fc1.bias"][...] = dz.sum(axis=0)
    da2 = (dz @ t["fc1.weight"].T).reshape(c["z2"].shape)
    if c["mask"] is not None:
        da2 = da2 * c["mask"]
    dz2 = da2 * (c["z2"] > 0)
    da1, g["conv2.weight"][...], g["conv2.bias"][...] = _conv_backward(
        dz2, c["cols2"], t["conv2.weight"], c["a1"].shape)
    dz1 = da1 * (c["z1"] > 0)
    _, g["conv1.weight"][...], g["conv1.bias"][...] = _conv_backward(
        dz1, c["cols1"], t["conv1.weight"], x.shape, need_dx=False)
    return float(loss), grad.vector


def sgd_step(params, grad, lr):
    """Return ``params - lr * grad`` (a new object; ``params`` is untouched)."""
    if lr < 0:
        raise DomainError(f"learning rate must be non-negative, got {lr}")
    grad = np.asarray(grad, dtype=np.float64)
    if isinstance(params, ModelParams):
        if grad.shape != params.vector.shape:
            raise ShapeError(f"gradient length {grad.size} != parameter count {params.vector.size}")
        return ModelParams(params.arch, params.vector - lr * grad)
    return np.asarray(params, dtype=np.float64) - lr * grad


def predict_logits(params, images, batch_size=1000):
    x = check_image_batch(images, "images")
    out = [forward(params, x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.empty((0, params.arch.n_classes))


def evaluate_accuracy(params, images, labels, batch_size=1000):
    """Fraction of images whose argmax logit equals the label (dropout off)."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise DomainError("cannot evaluate accuracy on an empty dataset")
    pred = predict_logits(params, images, batch_size).argmax(axis=1)
    return float(np.mean(pred == labels))


_CHECKPOINT_MAGIC = b"HFLM"
_CHECKPOINT_VERSION = 1


def save_checkpoint(params, path):
    """Versioned binary: magic, version, length-prefixed JSON descriptor, length-prefixed float64 LE vector."""
    descriptor = json.dumps(params.arch.to_dict(), sort_keys=True).encode()
    data = params.vector.astype("<f8").tobytes()
    payload = (_CHECKPOINT_MAGIC + struct.pack("<I", _CHECKPOINT_VERSION)
               + struct.pack("<I", len(descriptor)) + descriptor
               + struct.pack("<Q", params.vector.size) + data)
    Path(path).write_bytes(payload)


def load_checkpoint(path):
    data = Path(path).read_bytes()
    if data[:4] != _CHECKPOINT_MAGIC:
        raise FormatError(f"{path} is not a model checkpoint")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != _CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (dlen,) = struct.unpack_from("<I", data, 8)
    arch = Architecture(**json.loads(data[12:12 + dlen]))
    (count,) = struct.unpack_from("<Q", data, 12 + dlen)
    start = 20 + dlen
    if len(data) != start + 8 * count:
        raise FormatError(f"checkpoint {path} has {len(data) - start} payload bytes, expected {8 * count}")
    return ModelParams(arch, np.frombuffer(data, dtype="<f8", offset=start).astype(np.float64))


def train_epoch(params, images, labels, lr, batch_size, seed, epoch=0):
    """One shuffled pass of mini-batch SGD.

    Returns the new params and the sum of the step gradients.  With a constant
    learning rate that sum equals ``(start - end) / lr``.
    """
    n = len(labels)
    # a single full batch keeps its natural order
    order = np.arange(n) if batch_size >= n else make_generator(seed, epoch, 0).permutation(n)
    grad_sum = np.zeros_like(params.vector)
    for step, start in enumerate(range(0, len(order), batch_size)):
        idx = order[start:start + batch_size]
        _, grad = loss_and_grad(params, images[idx], labels[idx],
                                dropout_seed=(seed, epoch, 1, step), batch_index=step)
        params = sgd_step(params, grad, lr)
        grad_sum += grad
    return params, grad_sum


class ConvNetClassifier(ClassifierMixin, BaseEstimator):
    """Centralized mini-batch SGD training of the two-conv/three-fc network."""

    def __init__(self, conv_channels=(8, 16), hidden=(128, 64), dropout=0.5,
                 learning_rate=0.05, batch_size=64, epochs=5, random_state=0):
        self.conv_channels = conv_channels
        self.hidden = hidden
        self.dropout = dropout
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.random_state = random_state

    def fit(self, X, y):
        X = check_image_batch(X).astype(np.float64)
        y = np.asarray(y, dtype=np.int64)
        if X.shape[1] != X.shape[2]:
            raise ShapeError(f"square images required, got {X.shape[1:]}")
        arch = Architecture(X.shape[1], self.conv_channels, self.hidden, self.dropout)
        params = init_params(arch, self.random_state)
        for epoch in range(self.epochs):
            params, _ = train_epoch(params, X, y, self.learning_rate, self.batch_size,
                                    self.random_state, epoch)
        self.params_ = params
        self.classes_ = np.arange(N_CLASSES)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "params_")
        return predict_logits(self.params_, X)

    def predict_proba(self, X):
        return np.exp(log_softmax(self.decision_function(X)))

    def predict(self, X):
        return self.classes_[self.decision_function(X).argmax(axis=1)]
