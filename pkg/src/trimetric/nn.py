"""Layers and the five-layer embedding network.

Every layer works on a single image laid out as (channels, height, width)
in float64. Forward functions return whatever the matching backward needs;
there is no autodiff machinery, each backward is written out by hand.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractViolation, DegenerateInputError, InvalidShapeError, NumericError

PARAM_NAMES = ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "fc_w", "fc_b")


def _out_extent(n: int, k: int, stride: int) -> int:
    return (n - k) // stride + 1


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {what}")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1) -> np.ndarray:
    """Valid (unpadded) cross-correlation of one (C, H, W) input with (O, C, k, k) kernels."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or w.ndim != 4:
        raise InvalidShapeError(f"conv2d expects (C,H,W) input and (O,C,k,k) weights, got {x.shape} and {w.shape}")
    if w.shape[1] != x.shape[0]:
        raise InvalidShapeError(f"input has {x.shape[0]} channels, kernels expect {w.shape[1]}")
    if b.shape != (w.shape[0],):
        raise InvalidShapeError(f"bias shape {b.shape} does not match {w.shape[0]} kernels")
    kh, kw = w.shape[2:]
    if kh > x.shape[1] or kw > x.shape[2]:
        raise InvalidShapeError(f"kernel {kh}x{kw} does not fit input {x.shape[1]}x{x.shape[2]}")
    if stride < 1:
        raise InvalidShapeError(f"stride must be >= 1, got {stride}")
    _check_finite(x, "conv2d input")

    windows = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    out = np.tensordot(w, windows, axes=([1, 2, 3], [0, 3, 4]))
    out += b[:, None, None]
    return out


def conv2d_backward(x: np.ndarray, w: np.ndarray, stride: int, out_grad: np.ndarray):
    """Return (weight_grad, bias_grad, input_grad) for :func:`conv2d_forward`."""
    kh, kw = w.shape[2:]
    ho = _out_extent(x.shape[1], kh, stride)
    wo = _out_extent(x.shape[2], kw, stride)
    if out_grad.shape != (w.shape[0], ho, wo):
        raise InvalidShapeError(f"out_grad shape {out_grad.shape}, expected {(w.shape[0], ho, wo)}")

    windows = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    weight_grad = np.tensordot(out_grad, windows, axes=([1, 2], [1, 2]))
    bias_grad = out_grad.sum(axis=(1, 2))

    # cols[c, i, j, p, q] is the gradient reaching x[c, p*stride + i, q*stride + j]
    cols = np.tensordot(w, out_grad, axes=([0], [0]))
    input_grad = np.zeros_like(x, dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            input_grad[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, i, j]
    return weight_grad, bias_grad, input_grad


# ---------------------------------------------------------------------------
# overlapped max pooling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PoolIndices:
    """Flat input index of the winning element of every pooling window."""

    flat: np.ndarray
    input_shape: tuple


def maxpool_forward(x: np.ndarray, z: int = 2, s: int = 1) -> tuple[np.ndarray, PoolIndices]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise InvalidShapeError(f"maxpool expects (C,H,W), got {x.shape}")
    c, h, wd = x.shape
    if z > h or z > wd or z < 1 or s < 1:
        raise InvalidShapeError(f"pool window {z} (stride {s}) does not fit {h}x{wd}")
    _check_finite(x, "maxpool input")

    windows = sliding_window_view(x, (z, z), axis=(1, 2))[:, ::s, ::s]
    ho, wo = windows.shape[1:3]
    flat_windows = windows.reshape(c, ho, wo, z * z)
    # np.argmax returns the first occurrence, which is the tie-break we want
    local = flat_windows.argmax(axis=-1)
    out = np.take_along_axis(flat_windows, local[..., None], axis=-1)[..., 0]

    rows = np.arange(ho)[:, None] * s + local // z
    cols = np.arange(wo)[None, :] * s + local % z
    flat = (np.arange(c)[:, None, None] * h + rows) * wd + cols
    return out, PoolIndices(flat, (c, h, wd))


def maxpool_backward(indices: PoolIndices, out_grad: np.ndarray) -> np.ndarray:
    if out_grad.shape != indices.flat.shape:
        raise InvalidShapeError(f"out_grad shape {out_grad.shape}, expected {indices.flat.shape}")
    size = int(np.prod(indices.input_shape))
    # windows overlap when s < z, so contributions must accumulate
    grad = np.bincount(indices.flat.ravel(), weights=out_grad.ravel(), minlength=size)
    return grad.reshape(indices.input_shape)


# ---------------------------------------------------------------------------
# elementwise / dense
# ---------------------------------------------------------------------------

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, out_grad: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is taken as 0
    return np.where(x > 0, out_grad, 0.0)


def fc_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """y = W x + b on the channel-major flattening of ``x``."""
    v = np.asarray(x, dtype=np.float64).reshape(-1)
    if w.ndim != 2 or w.shape[1] != v.size or b.shape != (w.shape[0],):
        raise InvalidShapeError(f"fc weights {w.shape} / bias {b.shape} do not accept input of length {v.size}")
    return w @ v + b


def fc_backward(x: np.ndarray, w: np.ndarray, out_grad: np.ndarray):
    v = np.asarray(x, dtype=np.float64).reshape(-1)
    if out_grad.shape != (w.shape[0],):
        raise InvalidShapeError(f"out_grad shape {out_grad.shape}, expected {(w.shape[0],)}")
    weight_grad = np.outer(out_grad, v)
    bias_grad = out_grad.copy()
    input_grad = (w.T @ out_grad).reshape(np.shape(x))
    return weight_grad, bias_grad, input_grad


def l2_normalize(x: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norm = np.sqrt(np.dot(x, x))
    if not np.isfinite(norm):
        raise NumericError("non-finite values reaching the normalization layer")
    if norm <= eps:
        raise DegenerateInputError(f"cannot normalize a vector of norm {norm:.3e} (eps={eps:g})")
    return x / norm


def l2_normalize_backward(x: np.ndarray, out_grad: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    y = l2_normalize(x, eps)
    norm = np.sqrt(np.dot(x, x))
    return (out_grad - y * np.dot(y, out_grad)) / norm


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ArchitectureConfig:
    input_shape: tuple = (3, 250, 100)
    conv1_channels: int = 32
    conv1_kernel: int = 5
    conv1_stride: int = 2
    conv2_channels: int = 32
    conv2_kernel: int = 5
    conv2_stride: int = 1
    pool_size: int = 2
    pool_stride: int = 1
    embedding_dim: int = 400
    eps: float = 1e-12

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        self.validate()

    @classmethod
    def paper(cls) -> "ArchitectureConfig":
        return cls()

    @classmethod
    def desk(cls) -> "ArchitectureConfig":
        """Shrunken network used by tests and desk-scale runs."""
        return cls(input_shape=(3, 20, 12), conv1_channels=8, conv1_kernel=3,
                   conv2_channels=8, conv2_kernel=3, embedding_dim=16)

    def with_input(self, height: int, width: int) -> "ArchitectureConfig":
        return replace(self, input_shape=(self.input_shape[0], height, width))

    def layer_shapes(self) -> dict:
        """Output shape of each stage, computed with valid-window arithmetic."""
        c, h, w = self.input_shape
        shapes = {}

        def step(name, channels, k, stride, h, w):
            if k > h or k > w:
                raise InvalidShapeError(f"{name}: window {k} does not fit {h}x{w}")
            h, w = _out_extent(h, k, stride), _out_extent(w, k, stride)
            shapes[name] = (channels, h, w)
            return h, w

        h, w = step("conv1", self.conv1_channels, self.conv1_kernel, self.conv1_stride, h, w)
        h, w = step("pool1", self.conv1_channels, self.pool_size, self.pool_stride, h, w)
        h, w = step("conv2", self.conv2_channels, self.conv2_kernel, self.conv2_stride, h, w)
        h, w = step("pool2", self.conv2_channels, self.pool_size, self.pool_stride, h, w)
        shapes["fc"] = (self.embedding_dim,)
        return shapes

    @property
    def flat_size(self) -> int:
        return int(np.prod(self.layer_shapes()["pool2"]))

    def validate(self) -> None:
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise InvalidShapeError(f"bad input shape {self.input_shape}")
        for name in ("conv1_stride", "conv2_stride", "pool_stride", "pool_size",
                     "conv1_kernel", "conv2_kernel", "conv1_channels", "conv2_channels",
                     "embedding_dim"):
            if getattr(self, name) < 1:
                raise InvalidShapeError(f"{name} must be >= 1")
        if not self.eps > 0:
            raise InvalidShapeError("eps must be positive")
        self.layer_shapes()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureConfig":
        return cls(**d)


@dataclass
class NetworkParams:
    """Parameter arrays of the network; gradients reuse the same container."""

    config: ArchitectureConfig
    conv1_w: np.ndarray
    conv1_b: np.ndarray
    conv2_w: np.ndarray
    conv2_b: np.ndarray
    fc_w: np.ndarray
    fc_b: np.ndarray

    def __post_init__(self):
        for name, shape in self.expected_shapes(self.config).items():
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise InvalidShapeError(f"{name} has shape {arr.shape}, expected {shape}")
            setattr(self, name, arr)

    @staticmethod
    def expected_shapes(cfg: ArchitectureConfig) -> dict:
        c = cfg.input_shape[0]
        return {
            "conv1_w": (cfg.conv1_channels, c, cfg.conv1_kernel, cfg.conv1_kernel),
            "conv1_b": (cfg.conv1_channels,),
            "conv2_w": (cfg.conv2_channels, cfg.conv1_channels, cfg.conv2_kernel, cfg.conv2_kernel),
            "conv2_b": (cfg.conv2_channels,),
            "fc_w": (cfg.embedding_dim, cfg.flat_size),
            "fc_b": (cfg.embedding_dim,),
        }

    @classmethod
    def zeros(cls, cfg: ArchitectureConfig) -> "NetworkParams":
        return cls(cfg, **{k: np.zeros(s) for k, s in cls.expected_shapes(cfg).items()})

    def zeros_like(self) -> "NetworkParams":
        return NetworkParams.zeros(self.config)

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        for name in PARAM_NAMES:
            yield name, getattr(self, name)

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.config, **{k: v.copy() for k, v in self.items()})

    def add_(self, other: "NetworkParams", scale: float = 1.0) -> "NetworkParams":
        """In-place ``self += scale * other``."""
        for name, arr in self.items():
            if scale == 1.0:
                arr += getattr(other, name)
            else:
                arr += scale * getattr(other, name)
        return self

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for _, v in self.items()])

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for _, v in self.items())


def init_params(cfg: ArchitectureConfig, seed: int = 0, conv_std: float = 0.01,
                fc_std: float = 0.001) -> NetworkParams:
    """Zero-mean Gaussian weights (conv std 0.01, fc std 0.001), zero biases."""
    rng = np.random.default_rng(seed)
    shapes = NetworkParams.expected_shapes(cfg)
    return NetworkParams(
        cfg,
        conv1_w=rng.normal(0.0, conv_std, shapes["conv1_w"]),
        conv1_b=np.zeros(shapes["conv1_b"]),
        conv2_w=rng.normal(0.0, conv_std, shapes["conv2_w"]),
        conv2_b=np.zeros(shapes["conv2_b"]),
        fc_w=rng.normal(0.0, fc_std, shapes["fc_w"]),
        fc_b=np.zeros(shapes["fc_b"]),
    )


@dataclass
class ForwardCache:
    params: NetworkParams
    image: np.ndarray
    conv1: np.ndarray
    relu1: np.ndarray
    pool1_idx: PoolIndices
    pool1: np.ndarray
    conv2: np.ndarray
    relu2: np.ndarray
    pool2_idx: PoolIndices
    pool2: np.ndarray
    fc: np.ndarray
    embedding: np.ndarray = field(repr=False)


def network_forward(image: np.ndarray, params: NetworkParams) -> tuple[np.ndarray, ForwardCache]:
    """conv1 -> ReLU -> pool -> conv2 -> ReLU -> pool -> fc -> L2 normalize."""
    cfg = params.config
    image = np.asarray(image, dtype=np.float64)
    if image.shape != cfg.input_shape:
        raise InvalidShapeError(f"image shape {image.shape}, network expects {cfg.input_shape}")

    conv1 = conv2d_forward(image, params.conv1_w, params.conv1_b, cfg.conv1_stride)
    relu1 = relu(conv1)
    pool1, idx1 = maxpool_forward(relu1, cfg.pool_size, cfg.pool_stride)
    conv2 = conv2d_forward(pool1, params.conv2_w, params.conv2_b, cfg.conv2_stride)
    relu2 = relu(conv2)
    pool2, idx2 = maxpool_forward(relu2, cfg.pool_size, cfg.pool_stride)
    fc = fc_forward(pool2, params.fc_w, params.fc_b)
    emb = l2_normalize(fc, cfg.eps)
    cache = ForwardCache(params, image, conv1, relu1, idx1, pool1, conv2, relu2, idx2, pool2, fc, emb)
    return emb, cache


def network_backward(cache: ForwardCache, output_grad: np.ndarray, params: NetworkParams) -> NetworkParams:
    """Parameter gradient of ``output_grad . F_W(image)`` for the cached image."""
    if cache.params is not params:
        raise ContractViolation("forward cache was produced with different parameters")
    cfg = params.config
    output_grad = np.asarray(output_grad, dtype=np.float64)
    if output_grad.shape != (cfg.embedding_dim,):
        raise InvalidShapeError(f"output_grad shape {output_grad.shape}, expected {(cfg.embedding_dim,)}")

    g = l2_normalize_backward(cache.fc, output_grad, cfg.eps)
    fc_w, fc_b, g = fc_backward(cache.pool2, params.fc_w, g)
    g = maxpool_backward(cache.pool2_idx, g)
    g = relu_backward(cache.conv2, g)
    conv2_w, conv2_b, g = conv2d_backward(cache.pool1, params.conv2_w, cfg.conv2_stride, g)
    g = maxpool_backward(cache.pool1_idx, g)
    g = relu_backward(cache.conv1, g)
    conv1_w, conv1_b, _ = conv2d_backward(cache.image, params.conv1_w, cfg.conv1_stride, g)
    return NetworkParams(cfg, conv1_w, conv1_b, conv2_w, conv2_b, fc_w, fc_b)


def embed(image: np.ndarray, params: NetworkParams) -> np.ndarray:
    return network_forward(image, params)[0]
