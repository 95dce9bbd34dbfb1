"""Small NHWC tensor engine with hand-written reverse-mode gradients.

Only the pieces the projection networks need are here: 2-D convolution,
max-pooling, ReLU, sigmoid, channel concatenation (inside the fire block),
the contrastive loss and plain SGD.  Arrays are plain ``numpy.ndarray``;
every layer caches what its backward pass needs during ``forward``.

Shapes are ``(batch, height, width, channels)`` throughout.
"""

from __future__ import annotations

import math
from typing import Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

PADDING_MODES = ("same", "valid")


class NonFiniteError(FloatingPointError):
    """A forward or loss computation produced NaN or Inf."""


class GraphNotEvaluatedError(RuntimeError):
    """``backward`` called before a recorded ``forward``."""


def _pair(v) -> tuple:
    if isinstance(v, (tuple, list)):
        if len(v) != 2:
            raise ValueError(f"expected a pair, got {v!r}")
        return tuple(v)
    return (v, v)


def _axis_padding(size: int, k: int, stride: int, mode: str) -> tuple[int, int, int]:
    """Return ``(out, pad_before, pad_after)`` along one axis.

    ``same`` gives ``ceil(size / stride)`` outputs with the surplus padding
    placed after (the TensorFlow convention); ``valid`` gives
    ``(size - k) // stride + 1``.
    """
    if mode == "valid":
        if size < k:
            raise ValueError(f"input extent {size} smaller than kernel {k}")
        return (size - k) // stride + 1, 0, 0
    if mode == "same":
        out = -(-size // stride)
        total = max((out - 1) * stride + k - size, 0)
        return out, total // 2, total - total // 2
    raise ValueError(f"padding must be one of {PADDING_MODES}, got {mode!r}")


def output_size(size: tuple[int, int], kernel, stride, padding) -> tuple[int, int]:
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    return (_axis_padding(size[0], kh, sh, ph)[0], _axis_padding(size[1], kw, sw, pw)[0])


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values after {where}")


def _windows(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, ho: int, wo: int) -> np.ndarray:
    # (N, Ho, Wo, C, kh, kw) strided view
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    return win[:, : (ho - 1) * sh + 1 : sh, : (wo - 1) * sw + 1 : sw]


class Layer:
    """Base class. Subclasses fill ``params`` and ``grads`` with matching keys."""

    kind = "layer"

    def __init__(self) -> None:
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def spec(self) -> dict:
        return {"kind": self.kind}

    def children(self) -> list["Layer"]:
        return []

    def zero_grad(self) -> None:
        for key, value in self.params.items():
            self.grads[key] = np.zeros_like(value)


class Conv2D(Layer):
    """Cross-correlation with bias. Weights are ``(kh, kw, in_ch, out_ch)``."""

    kind = "conv"

    def __init__(self, in_channels: int, out_channels: int, kernel, stride=1,
                 padding="same", rng: np.random.Generator | None = None,
                 dtype=np.float32):
        super().__init__()
        self.kernel = _pair(kernel)
        self.stride = _pair(stride)
        self.padding = _pair(padding)
        for mode in self.padding:
            if mode not in PADDING_MODES:
                raise ValueError(f"padding must be one of {PADDING_MODES}, got {mode!r}")
        if min(self.kernel) < 1 or min(self.stride) < 1:
            raise ValueError("kernel and stride must be positive")
        self.in_channels = in_channels
        self.out_channels = out_channels
        kh, kw = self.kernel
        fan_in = kh * kw * in_channels
        rng = rng if rng is not None else np.random.default_rng(0)
        limit = math.sqrt(6.0 / fan_in)
        self.params["weight"] = rng.uniform(
            -limit, limit, size=(kh, kw, in_channels, out_channels)).astype(dtype)
        self.params["bias"] = np.zeros(out_channels, dtype=dtype)
        self.zero_grad()
        self._cache = None
        # the network's first layer has no use for d(loss)/d(image)
        self.input_grad = True

    def spec(self) -> dict:
        return {"kind": self.kind, "kernel": list(self.kernel), "stride": list(self.stride),
                "padding": list(self.padding), "in_channels": self.in_channels,
                "out_channels": self.out_channels}

    def _geometry(self, h: int, w: int):
        kh, kw = self.kernel
        sh, sw = self.stride
        ho, pt, pb = _axis_padding(h, kh, sh, self.padding[0])
        wo, pl, pr = _axis_padding(w, kw, sw, self.padding[1])
        return ho, wo, (pt, pb), (pl, pr)

    def forward(self, x: np.ndarray) -> np.ndarray:
        n, h, w, c = x.shape
        if c != self.in_channels:
            raise ValueError(f"conv expects {self.in_channels} channels, got {c}")
        kh, kw = self.kernel
        sh, sw = self.stride
        ho, wo, pad_h, pad_w = self._geometry(h, w)
        weight = self.params["weight"]
        wmat = weight.reshape(kh * kw * c, self.out_channels)
        if (kh, kw, sh, sw) == (1, 1, 1, 1):
            cols = x.reshape(n * h * w, c)
        else:
            xp = x
            if any(pad_h) or any(pad_w):
                xp = np.pad(x, ((0, 0), pad_h, pad_w, (0, 0)))
            win = _windows(xp, kh, kw, sh, sw, ho, wo)
            cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)
        y = cols @ wmat
        y += self.params["bias"]
        self._cache = (x.shape, cols, pad_h, pad_w, ho, wo)
        return y.reshape(n, ho, wo, self.out_channels)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise GraphNotEvaluatedError("conv backward before forward")
        (n, h, w, c), cols, pad_h, pad_w, ho, wo = self._cache
        kh, kw = self.kernel
        sh, sw = self.stride
        dyf = dy.reshape(n * ho * wo, self.out_channels)
        weight = self.params["weight"]
        wmat = weight.reshape(kh * kw * c, self.out_channels)
        self.grads["weight"] += (cols.T @ dyf).reshape(weight.shape)
        self.grads["bias"] += dyf.sum(axis=0, dtype=np.float64).astype(dyf.dtype)
        if not self.input_grad:
            return None
        dcols = dyf @ wmat.T
        if (kh, kw, sh, sw) == (1, 1, 1, 1):
            return dcols.reshape(n, h, w, c)
        dcols = dcols.reshape(n, ho, wo, kh, kw, c)
        hp, wp = h + sum(pad_h), w + sum(pad_w)
        dxp = np.zeros((n, hp, wp, c), dtype=dy.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw, :] += dcols[:, :, :, i, j, :]
        return dxp[:, pad_h[0] : pad_h[0] + h, pad_w[0] : pad_w[0] + w, :]


class MaxPool2D(Layer):
    """Window maximum; ``same`` padding behaves as if padded with -inf."""

    kind = "maxpool"

    def __init__(self, kernel=3, stride=2, padding="same"):
        super().__init__()
        self.kernel = _pair(kernel)
        self.stride = _pair(stride)
        self.padding = _pair(padding)
        self._cache = None

    def spec(self) -> dict:
        return {"kind": self.kind, "kernel": list(self.kernel), "stride": list(self.stride),
                "padding": list(self.padding)}

    def forward(self, x: np.ndarray) -> np.ndarray:
        n, h, w, c = x.shape
        kh, kw = self.kernel
        sh, sw = self.stride
        ho, pt, pb = _axis_padding(h, kh, sh, self.padding[0])
        wo, pl, pr = _axis_padding(w, kw, sw, self.padding[1])
        xp = x
        if pt or pb or pl or pr:
            xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)), constant_values=-np.inf)
        # running max over the kh*kw shifted grids; ties keep the earliest offset
        y = None
        arg = np.zeros((n, ho, wo, c), dtype=np.int8)
        for k in range(kh * kw):
            i, j = divmod(k, kw)
            grid = xp[:, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw, :]
            if y is None:
                y = grid.copy()
                continue
            # branch-free update; boolean-mask writes are several times slower here
            better = (grid > y).view(np.int8)
            np.maximum(y, grid, out=y)
            arg -= arg * better
            arg += better * np.int8(k)
        self._cache = (x.shape, arg, (pt, pb), (pl, pr), ho, wo)
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise GraphNotEvaluatedError("maxpool backward before forward")
        (n, h, w, c), arg, pad_h, pad_w, ho, wo = self._cache
        kh, kw = self.kernel
        sh, sw = self.stride
        dxp = np.zeros((n, h + sum(pad_h), w + sum(pad_w), c), dtype=dy.dtype)
        for k in range(kh * kw):
            i, j = divmod(k, kw)
            dxp[:, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw, :] += dy * (arg == k)
        return dxp[:, pad_h[0] : pad_h[0] + h, pad_w[0] : pad_w[0] + w, :]


class ReLU(Layer):
    kind = "relu"

    def __init__(self):
        super().__init__()
        self._mask = None

    def forward(self, x):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dy):
        if self._mask is None:
            raise GraphNotEvaluatedError("relu backward before forward")
        return dy * self._mask


class Sigmoid(Layer):
    kind = "sigmoid"

    def __init__(self):
        super().__init__()
        self._out = None

    def forward(self, x):
        self._out = expit(x)
        return self._out

    def backward(self, dy):
        if self._out is None:
            raise GraphNotEvaluatedError("sigmoid backward before forward")
        return dy * self._out * (1 - self._out)


def concat_forward(parts: Sequence[np.ndarray]) -> np.ndarray:
    """Concatenate along channels."""
    return np.concatenate(parts, axis=-1)


def concat_backward(dy: np.ndarray, channels: Sequence[int]) -> list[np.ndarray]:
    """Split an upstream gradient back into per-input channel blocks."""
    return np.split(dy, np.cumsum(channels)[:-1], axis=-1)


class Fire(Layer):
    """SqueezeNet fire block: 1x1 squeeze, then 1x1 and 3x3 expands concatenated.

    With ``row_padding='valid'`` the 3x3 expand does not pad vertically and
    the 1x1 branch is cropped by one row at each end so both branches stay
    aligned.  This keeps every output row a function of a bounded band of
    input rows, which is what makes tall-strip inference equal to per-window
    inference.
    """

    kind = "fire"

    def __init__(self, in_channels: int, squeeze: int, expand: int,
                 row_padding: str = "valid", rng=None, dtype=np.float32):
        super().__init__()
        self.row_padding = row_padding
        self.squeeze = Conv2D(in_channels, squeeze, 1, 1, "same", rng=rng, dtype=dtype)
        self.expand1 = Conv2D(squeeze, expand, 1, 1, "same", rng=rng, dtype=dtype)
        self.expand3 = Conv2D(squeeze, expand, 3, 1, (row_padding, "same"), rng=rng, dtype=dtype)
        self.relu_s, self.relu_1, self.relu_3 = ReLU(), ReLU(), ReLU()
        self.crop = 1 if row_padding == "valid" else 0
        self.out_channels = 2 * expand
        self._shape = None

    def children(self):
        return [self.squeeze, self.expand1, self.expand3]

    def spec(self) -> dict:
        return {"kind": self.kind, "row_padding": self.row_padding,
                "squeeze": self.squeeze.spec(), "expand1": self.expand1.spec(),
                "expand3": self.expand3.spec()}

    def forward(self, x):
        s = self.relu_s.forward(self.squeeze.forward(x))
        self._shape = s.shape
        s1 = s[:, self.crop : s.shape[1] - self.crop] if self.crop else s
        e1 = self.relu_1.forward(self.expand1.forward(s1))
        e3 = self.relu_3.forward(self.expand3.forward(s))
        return concat_forward([e1, e3])

    def backward(self, dy):
        if self._shape is None:
            raise GraphNotEvaluatedError("fire backward before forward")
        d1, d3 = concat_backward(dy, [self.expand1.out_channels, self.expand3.out_channels])
        ds = self.expand3.backward(self.relu_3.backward(d3))
        ds1 = self.expand1.backward(self.relu_1.backward(d1))
        if self.crop:
            ds[:, self.crop : ds.shape[1] - self.crop] += ds1
        else:
            ds = ds + ds1
        return self.squeeze.backward(self.relu_s.backward(ds))


class Sequential(Layer):
    """A chain of layers; the recorded forward pass is the backward graph."""

    kind = "sequential"

    def __init__(self, layers: Sequence[Layer]):
        super().__init__()
        self.layers = list(layers)
        self._evaluated = False

    def children(self):
        return list(self.layers)

    def spec(self) -> dict:
        return {"kind": self.kind, "layers": [layer.spec() for layer in self.layers]}

    def forward(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x)
        _check_finite(x, "forward pass")
        self._evaluated = True
        return x

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if not self._evaluated:
            raise GraphNotEvaluatedError("backward called before forward")
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
            if dy is None:
                break
        return dy

    def zero_grad(self) -> None:
        for _, layer in iter_param_layers(self):
            layer.zero_grad()


def iter_param_layers(root: Layer, prefix: str = "") -> Iterator[tuple[str, Layer]]:
    """Yield ``(path, layer)`` for every layer owning parameters, in declaration order."""
    if root.params:
        yield prefix.rstrip("."), root
    for i, child in enumerate(root.children()):
        yield from iter_param_layers(child, f"{prefix}{i}.")


def named_parameters(root: Layer) -> list[tuple[str, np.ndarray]]:
    return [(f"{path}.{key}", layer.params[key])
            for path, layer in iter_param_layers(root) for key in ("weight", "bias")]


def named_gradients(root: Layer) -> list[tuple[str, np.ndarray]]:
    return [(f"{path}.{key}", layer.grads[key])
            for path, layer in iter_param_layers(root) for key in ("weight", "bias")]


def cast_parameters(root: Layer, dtype) -> None:
    for _, layer in iter_param_layers(root):
        for key in list(layer.params):
            layer.params[key] = layer.params[key].astype(dtype)
        layer.zero_grad()


def contrastive_loss(e_l: np.ndarray, e_r: np.ndarray, y, margin: float = 1.0,
                     convention: str = "intent"):
    """Margin contrastive loss between left and right embeddings.

    ``e_l`` and ``e_r`` are ``(N, ..., d)`` (typically ``(N, 1, 1, d)``) and
    ``y`` holds 1 for matching pairs and 0 otherwise.  With
    ``convention='intent'`` matching pairs pay ``dist**2`` and non-matching
    pairs pay ``max(0, margin - dist)**2``; ``'literal'`` swaps the two
    branches.  Both carry the usual factor 1/2.

    Returns ``(mean_loss, per_sample_loss, grad_l, grad_r)``; gradients are
    of the mean loss and have the dtype of the inputs.
    """
    if e_l.shape != e_r.shape:
        raise ValueError(f"embedding shapes differ: {e_l.shape} vs {e_r.shape}")
    if margin <= 0:
        raise ValueError("margin must be positive")
    if convention not in ("intent", "literal"):
        raise ValueError("convention must be 'intent' or 'literal'")
    n = e_l.shape[0]
    a = e_l.reshape(n, -1).astype(np.float64)
    b = e_r.reshape(n, -1).astype(np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(n)
    pull = y if convention == "intent" else 1.0 - y
    push = 1.0 - pull
    diff = a - b
    dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    hinge = np.maximum(0.0, margin - dist)
    per_sample = 0.5 * (pull * dist**2 + push * hinge**2)
    # d(dist)/d(a) = diff / dist; hinge term contributes -hinge * diff / dist
    safe = np.where(dist > 0, dist, 1.0)
    coeff = pull - push * hinge / safe
    grad = (coeff[:, None] * diff) / n
    loss = float(per_sample.mean())
    if not math.isfinite(loss):
        raise NonFiniteError("non-finite contrastive loss")
    return (loss, per_sample, grad.reshape(e_l.shape).astype(e_l.dtype),
            (-grad).reshape(e_r.shape).astype(e_r.dtype))


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], lr: float) -> None:
    """In-place ``p <- p - lr * g`` for each parameter."""
    if len(params) != len(grads):
        raise ValueError("parameter and gradient lists differ in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
        p -= np.asarray(lr * g, dtype=p.dtype)
