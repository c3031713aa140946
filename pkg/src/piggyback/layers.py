"""Layers with explicit forward/backward passes, and the network that chains them.

Each ``*_forward`` returns ``(out, cache)``; the matching ``*_backward``
consumes the cache. ``Network`` executes an ordered list of ``LayerSpec``
against a parameter dictionary and, optionally, per-layer masks.
"""

from dataclasses import asdict, dataclass, field

import numpy as np

from piggyback.errors import ConfigError, DataError, DegenerateBatchError, DimensionError
from piggyback.masking import masked_conv_backward, masked_conv_forward, masked_linear_backward, masked_linear_forward
from piggyback.tensor import conv2d_backward, conv2d_forward, conv_output_size

DENSE, CONV, RELU, MAXPOOL, BATCHNORM, FLATTEN, HEAD = (
    "dense", "conv", "relu", "maxpool", "batchnorm", "flatten", "head",
)
KINDS = (DENSE, CONV, RELU, MAXPOOL, BATCHNORM, FLATTEN, HEAD)

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    in_features: int = 0
    out_features: int = 0
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    pad: int = 0
    channels: int = 0
    bias: bool = True
    maskable: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.maskable and self.kind not in (DENSE, CONV):
            raise ConfigError(f"layer {self.name!r} of kind {self.kind} cannot be maskable")

    @property
    def has_weight(self):
        return self.kind in (DENSE, CONV, HEAD)

    def weight_shape(self):
        if self.kind in (DENSE, HEAD):
            return (self.out_features, self.in_features)
        if self.kind == CONV:
            return (self.out_channels, self.in_channels, self.kernel, self.kernel)
        raise ConfigError(f"layer {self.name!r} has no weight")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = BN_EPS

    def __post_init__(self):
        if self.eps <= 0:
            raise ConfigError("batchnorm epsilon must be > 0")
        if np.any(np.asarray(self.running_var) < 0):
            raise ConfigError("batchnorm running variance must be >= 0")

    @classmethod
    def fresh(cls, channels):
        return cls(np.ones(channels), np.zeros(channels), np.zeros(channels), np.ones(channels))

    def copy(self):
        return BatchNormParams(
            self.gamma.copy(), self.beta.copy(), self.running_mean.copy(), self.running_var.copy(), self.eps
        )


# -- dense ---------------------------------------------------------------

def dense_forward(x, W, bias=None):
    if x.ndim != 2 or x.shape[1] != W.shape[1]:
        raise DimensionError(f"dense: input {x.shape} vs weight {W.shape}")
    y = x @ W.T
    if bias is not None:
        y = y + bias
    return y, x


def dense_backward(dy, x, W, need_dx=True):
    """Return ``(dx, dW, db)``; ``dW = dy^T x`` summed over the batch."""
    if dy.shape != (x.shape[0], W.shape[0]):
        raise DimensionError(f"dense_backward: dy {dy.shape} vs x {x.shape}, W {W.shape}")
    dW = dy.T @ x
    db = dy.sum(axis=0)
    dx = dy @ W if need_dx else None
    return dx, dW, db


# -- elementwise / shape ---------------------------------------------------

def relu_forward(x):
    return np.maximum(x, 0.0), x > 0


def relu_backward(dy, cache):
    return dy * cache


def flatten_forward(x):
    return x.reshape(x.shape[0], -1), x.shape


def flatten_backward(dy, cache):
    return dy.reshape(cache)


def maxpool_forward(x, kernel=2, stride=None):
    """Max pooling over (N,C,H,W); ties go to the first maximum in row-major window order."""
    stride = kernel if stride is None else stride
    n, c, h, w = x.shape
    if kernel > h or kernel > w:
        raise DimensionError(f"maxpool kernel {kernel} larger than input {h}x{w}")
    win = np.lib.stride_tricks.sliding_window_view(x, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(*win.shape[:4], kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, (x.shape, arg, kernel, stride)


def maxpool_backward(dy, cache):
    shape, arg, kernel, stride = cache
    dx = np.zeros(shape)
    ho, wo = arg.shape[2:]
    hs = stride * (ho - 1) + 1
    ws = stride * (wo - 1) + 1
    for q in range(kernel * kernel):
        i, j = divmod(q, kernel)
        dx[:, :, i:i + hs:stride, j:j + ws:stride] += dy * (arg == q)
    return dx


# -- batch normalisation -----------------------------------------------------

def _bn_axes(x):
    if x.ndim == 2:
        return (0,), (1, -1)
    if x.ndim == 4:
        return (0, 2, 3), (1, -1, 1, 1)
    raise DimensionError(f"batchnorm expects 2-d or 4-d input, got {x.shape}")


def batchnorm_forward(x, params, training=False, update_stats=True, momentum=BN_MOMENTUM):
    """Normalise per channel. Training mode uses batch statistics and, when
    ``update_stats``, moves the running statistics (in place) by ``momentum``."""
    axes, bshape = _bn_axes(x)
    if x.shape[1] != params.gamma.shape[0]:
        raise DimensionError(f"batchnorm: {x.shape[1]} channels vs {params.gamma.shape[0]} parameters")
    if training:
        if x.shape[0] < 2:
            raise DegenerateBatchError("batchnorm in training mode needs a batch of at least 2")
        count = x.size // x.shape[1]
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        if update_stats:
            params.running_mean *= 1 - momentum
            params.running_mean += momentum * mean
            params.running_var *= 1 - momentum
            params.running_var += momentum * var * count / (count - 1)
    else:
        mean, var = params.running_mean, params.running_var
    inv_std = 1.0 / np.sqrt(var + params.eps)
    xhat = (x - mean.reshape(bshape)) * inv_std.reshape(bshape)
    y = params.gamma.reshape(bshape) * xhat + params.beta.reshape(bshape)
    return y, (xhat, inv_std, params.gamma, training)


def batchnorm_backward(dy, cache):
    """Return ``(dx, dgamma, dbeta)``."""
    xhat, inv_std, gamma, training = cache
    axes, bshape = _bn_axes(dy)
    dgamma = (dy * xhat).sum(axis=axes)
    dbeta = dy.sum(axis=axes)
    dxhat = dy * gamma.reshape(bshape)
    if not training:
        return dxhat * inv_std.reshape(bshape), dgamma, dbeta
    count = dy.size // dy.shape[1]
    dx = (inv_std.reshape(bshape) / count) * (
        count * dxhat
        - dxhat.sum(axis=axes).reshape(bshape)
        - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape)
    )
    return dx, dgamma, dbeta


# -- loss --------------------------------------------------------------------

def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise DataError(f"labels shape {labels.shape} != ({n},)")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise DataError(f"label out of range [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(logsum - z[rows, labels]))
    grad = np.exp(z - logsum[:, None])
    grad[rows, labels] -= 1.0
    return loss, grad / n


# -- network -----------------------------------------------------------------

BN_FROZEN = "frozen"
BN_TRAIN = "train"


@dataclass
class Network:
    """An executable stack of layers.

    ``params`` maps layer name to a dict holding ``weight``/``bias`` arrays
    (dense, conv, head) or a ``BatchNormParams`` under ``"bn"``. ``masks``
    maps maskable layer names to thresholded masks; layers without a mask
    run unmasked. ``bn_mode`` is ``"frozen"`` (always running statistics,
    nothing written) or ``"train"`` (batch statistics while training).
    """

    layers: list
    params: dict
    masks: dict = field(default_factory=dict)
    bn_mode: str = BN_FROZEN

    def __post_init__(self):
        if self.bn_mode not in (BN_FROZEN, BN_TRAIN):
            raise ConfigError(f"unknown batchnorm mode {self.bn_mode!r}")
        self._caches = None

    @property
    def head(self):
        return self.layers[-1]

    def effective_weight(self, spec):
        W = self.params[spec.name]["weight"]
        m = self.masks.get(spec.name)
        return W if m is None else W * m

    def forward(self, x, training=False):
        caches = [] if training else None
        h = np.asarray(x, dtype=np.float64)
        for spec in self.layers:
            h, cache = self._forward_layer(spec, h, training)
            if training:
                caches.append(cache)
        self._caches = caches
        return h

    def _forward_layer(self, spec, h, training):
        kind = spec.kind
        if kind in (DENSE, HEAD):
            p = self.params[spec.name]
            m = self.masks.get(spec.name)
            if m is None:
                return dense_forward(h, p["weight"], p.get("bias"))
            return masked_linear_forward(h, p["weight"], m, p.get("bias")), h
        if kind == CONV:
            p = self.params[spec.name]
            m = self.masks.get(spec.name)
            W = p["weight"] if m is None else p["weight"] * m
            y = conv2d_forward(h, W, spec.stride, spec.pad)
            if p.get("bias") is not None:
                y = y + p["bias"].reshape(1, -1, 1, 1)
            return y, h
        if kind == RELU:
            return relu_forward(h)
        if kind == MAXPOOL:
            return maxpool_forward(h, spec.kernel, spec.stride)
        if kind == FLATTEN:
            return flatten_forward(h)
        if kind == BATCHNORM:
            bn_training = training and self.bn_mode == BN_TRAIN
            return batchnorm_forward(h, self.params[spec.name]["bn"], training=bn_training)
        raise ConfigError(f"unknown layer kind {kind!r}")

    def backward(self, dlogits, want):
        """Backpropagate ``dlogits`` through the cached forward pass.

        ``want`` is a set of ``(layer_name, slot)`` pairs with slot one of
        ``weight``, ``bias``, ``mask``, ``gamma``, ``beta``; only those
        gradients are returned. Propagation stops below the deepest layer
        that still has something wanted.
        """
        if self._caches is None:
            raise RuntimeError("backward called without a training-mode forward pass")
        wanted_layers = {name for name, _ in want}
        deepest = min((i for i, s in enumerate(self.layers) if s.name in wanted_layers), default=len(self.layers))
        grads = {}
        dh = dlogits
        for i in range(len(self.layers) - 1, deepest - 1, -1):
            spec = self.layers[i]
            cache = self._caches[i]
            need_dx = i > deepest
            dh = self._backward_layer(spec, dh, cache, want, grads, need_dx)
        return grads

    def _backward_layer(self, spec, dy, cache, want, grads, need_dx):
        kind, name = spec.kind, spec.name
        if kind in (DENSE, HEAD, CONV):
            p = self.params[name]
            m = self.masks.get(name)
            W = p["weight"]
            x = cache
            if (name, "mask") in want and m is None:
                raise ConfigError(f"layer {name!r} has no mask to train")
            if kind == CONV:
                if (name, "mask") in want and (name, "weight") not in want:
                    dx, grads[(name, "mask")] = masked_conv_backward(
                        dy, x, W, m, spec.stride, spec.pad, need_dx=need_dx
                    )
                else:
                    dx, dk = conv2d_backward(dy, x, self.effective_weight(spec), spec.stride, spec.pad, need_dx=need_dx)
                    if (name, "mask") in want:
                        grads[(name, "mask")] = dk * W
                    if (name, "weight") in want:
                        grads[(name, "weight")] = dk if m is None else dk * m
                if (name, "bias") in want:
                    grads[(name, "bias")] = dy.sum(axis=(0, 2, 3))
                return dx
            if (name, "mask") in want and (name, "weight") not in want:
                dx, grads[(name, "mask")] = masked_linear_backward(dy, x, W, m)
            else:
                dx, dW, _ = dense_backward(dy, x, self.effective_weight(spec), need_dx=need_dx)
                if (name, "mask") in want:
                    grads[(name, "mask")] = dW * W
                if (name, "weight") in want:
                    grads[(name, "weight")] = dW if m is None else dW * m
            if (name, "bias") in want:
                grads[(name, "bias")] = dy.sum(axis=0)
            return dx
        if kind == RELU:
            return relu_backward(dy, cache)
        if kind == MAXPOOL:
            return maxpool_backward(dy, cache)
        if kind == FLATTEN:
            return flatten_backward(dy, cache)
        if kind == BATCHNORM:
            dx, dgamma, dbeta = batchnorm_backward(dy, cache)
            if (name, "gamma") in want:
                grads[(name, "gamma")] = dgamma
            if (name, "beta") in want:
                grads[(name, "beta")] = dbeta
            return dx
        raise ConfigError(f"unknown layer kind {kind!r}")


def output_shape(layers, input_shape):
    """Propagate a per-sample input shape through ``layers``; validates wiring."""
    shape = tuple(input_shape)
    for spec in layers:
        if spec.kind in (DENSE, HEAD):
            if len(shape) != 1 or shape[0] != spec.in_features:
                raise ConfigError(f"layer {spec.name!r} expects {spec.in_features} features, got {shape}")
            shape = (spec.out_features,)
        elif spec.kind == CONV:
            if len(shape) != 3 or shape[0] != spec.in_channels:
                raise ConfigError(f"layer {spec.name!r} expects {spec.in_channels} channels, got {shape}")
            shape = (
                spec.out_channels,
                conv_output_size(shape[1], spec.kernel, spec.stride, spec.pad),
                conv_output_size(shape[2], spec.kernel, spec.stride, spec.pad),
            )
        elif spec.kind == MAXPOOL:
            shape = (shape[0], (shape[1] - spec.kernel) // spec.stride + 1, (shape[2] - spec.kernel) // spec.stride + 1)
        elif spec.kind == FLATTEN:
            shape = (int(np.prod(shape)),)
        elif spec.kind == BATCHNORM:
            if shape[0] != spec.channels:
                raise ConfigError(f"batchnorm {spec.name!r} expects {spec.channels} channels, got {shape}")
    return shape


def build_architecture(input_shape, num_classes, arch="mlp", hidden=(128, 6), channels=(8, 16)):
    """Plain feed-forward stacks used throughout: ``mlp``, ``mlp-bn`` and ``cnn``."""
    layers = []
    if arch in ("mlp", "mlp-bn"):
        if len(input_shape) != 1:
            raise ConfigError(f"{arch} needs vector input, got shape {input_shape}")
        fan_in = input_shape[0]
        for i, width in enumerate(hidden, start=1):
            layers.append(LayerSpec(f"fc{i}", DENSE, in_features=fan_in, out_features=width, maskable=True))
            if arch == "mlp-bn":
                layers.append(LayerSpec(f"bn{i}", BATCHNORM, channels=width))
            layers.append(LayerSpec(f"relu{i}", RELU))
            fan_in = width
    elif arch == "cnn":
        if len(input_shape) != 3:
            raise ConfigError(f"cnn needs C x H x W input, got shape {input_shape}")
        c = input_shape[0]
        for i, width in enumerate(channels, start=1):
            layers += [
                LayerSpec(f"conv{i}", CONV, in_channels=c, out_channels=width, kernel=3, pad=1, maskable=True),
                LayerSpec(f"bn{i}", BATCHNORM, channels=width),
                LayerSpec(f"relu{i}", RELU),
                LayerSpec(f"pool{i}", MAXPOOL, kernel=2, stride=2),
            ]
            c = width
        layers.append(LayerSpec("flatten", FLATTEN))
        fan_in = output_shape(layers, input_shape)[0]
        for i, width in enumerate(hidden[:1], start=len(channels) + 1):
            layers.append(LayerSpec(f"fc{i}", DENSE, in_features=fan_in, out_features=width, maskable=True))
            layers.append(LayerSpec(f"relu{i}", RELU))
            fan_in = width
    else:
        raise ConfigError(f"unknown architecture {arch!r}")
    layers.append(LayerSpec("head", HEAD, in_features=fan_in, out_features=num_classes))
    output_shape(layers, input_shape)
    return layers


def init_params(layers, rng):
    """Fan-in scaled uniform weights, zero biases, identity batchnorm."""
    params = {}
    for spec in layers:
        if spec.has_weight:
            shape = spec.weight_shape()
            fan_in = int(np.prod(shape[1:]))
            gain = np.sqrt(6.0) if spec.kind != HEAD else 1.0
            bound = gain / np.sqrt(fan_in)
            params[spec.name] = {
                "weight": rng.uniform(-bound, bound, size=shape),
                "bias": np.zeros(shape[0]) if spec.bias else None,
            }
        elif spec.kind == BATCHNORM:
            params[spec.name] = {"bn": BatchNormParams.fresh(spec.channels)}
    return params


def init_head(spec, rng):
    bound = 1.0 / np.sqrt(spec.in_features)
    return {
        "weight": rng.uniform(-bound, bound, size=spec.weight_shape()),
        "bias": np.zeros(spec.out_features) if spec.bias else None,
    }
