"""Sequential network with manual backpropagation, momentum SGD and checkpoints.

Supported layers: 3x3 convolution (stride 1, pad 1), dense, ReLU, 2x2 max
pooling and flatten. One layer may be marked as the *tap*: its output is
returned from :meth:`Network.forward` and an extra gradient can be injected
there during :meth:`Network.backward`.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

CONV = "conv"
DENSE = "dense"
RELU = "relu"
MAXPOOL = "maxpool"
FLATTEN = "flatten"
KINDS = (CONV, DENSE, RELU, MAXPOOL, FLATTEN)


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    size: int = 0  # out channels (conv) or out features (dense)
    tap: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in (CONV, DENSE) and self.size < 1:
            raise ValueError(f"{self.kind} layer needs a positive size, got {self.size}")


def conv(size: int, tap: bool = False) -> LayerSpec:
    return LayerSpec(CONV, size, tap)


def dense(size: int, tap: bool = False) -> LayerSpec:
    return LayerSpec(DENSE, size, tap)


def relu(tap: bool = False) -> LayerSpec:
    return LayerSpec(RELU, 0, tap)


def maxpool(tap: bool = False) -> LayerSpec:
    return LayerSpec(MAXPOOL, 0, tap)


def flatten() -> LayerSpec:
    return LayerSpec(FLATTEN)


def _im2col(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # n, c, h, w, 3, 3
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * 9)


def _col2im(cols: np.ndarray, shape) -> np.ndarray:
    n, c, h, w = shape
    cols = cols.reshape(n, h, w, c, 3, 3)
    dxp = np.zeros((n, c, h + 2, w + 2))
    for i in range(3):
        for j in range(3):
            dxp[:, :, i:i + h, j:j + w] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dxp[:, :, 1:-1, 1:-1]


@dataclass
class Forward:
    logits: np.ndarray
    tap: Optional[np.ndarray]
    caches: list = field(repr=False)


class Network:
    """A stack of layers with parameters for an input of shape ``(C, H, W)``.

    ``params`` holds one dict per layer (empty for parameter-free layers)
    with keys ``"w"`` and ``"b"``.
    """

    def __init__(self, layers: Sequence[LayerSpec], in_shape: Tuple[int, int, int], seed: int = 0):
        self.layers = list(layers)
        self.in_shape = tuple(int(s) for s in in_shape)
        if sum(layer.tap for layer in self.layers) > 1:
            raise ValueError("at most one layer may be the transfer tap")
        self.shapes = self._infer_shapes()
        self.seed = seed
        self.params: List[dict] = []
        init_params(self, seed)

    def _infer_shapes(self):
        shapes = [self.in_shape]
        shape = self.in_shape
        for idx, layer in enumerate(self.layers):
            if layer.kind in (CONV, MAXPOOL) and len(shape) != 3:
                raise ValueError(f"layer {idx} ({layer.kind}) needs a C-H-W input, got {shape}")
            if layer.kind == CONV:
                shape = (layer.size, shape[1], shape[2])
            elif layer.kind == MAXPOOL:
                if shape[1] < 2 or shape[2] < 2:
                    raise ValueError(f"layer {idx} cannot pool a {shape[1]}x{shape[2]} map")
                shape = (shape[0], shape[1] // 2, shape[2] // 2)
            elif layer.kind == FLATTEN:
                shape = (int(np.prod(shape)),)
            elif layer.kind == DENSE:
                if len(shape) != 1:
                    raise ValueError(f"layer {idx} (dense) needs a flat input, got {shape}; add a flatten layer")
                shape = (layer.size,)
            shapes.append(shape)
        if len(shape) != 1:
            raise ValueError(f"network must end in a flat logit vector, got {shape}")
        return shapes

    @property
    def tap_index(self) -> Optional[int]:
        for i, layer in enumerate(self.layers):
            if layer.tap:
                return i
        return None

    @property
    def num_classes(self) -> int:
        return self.shapes[-1][0]

    def param_arrays(self) -> List[np.ndarray]:
        return [p[k] for p in self.params for k in ("w", "b") if k in p]

    def num_params(self) -> int:
        return sum(a.size for a in self.param_arrays())

    def forward(self, x) -> Forward:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != self.in_shape:
            raise ValueError(f"input shape {x.shape[1:]} does not match network input {self.in_shape}")
        caches = []
        tap = None
        for layer, p in zip(self.layers, self.params):
            if layer.kind == CONV:
                cols = _im2col(x)
                wmat = p["w"].reshape(layer.size, -1)
                out = cols @ wmat.T + p["b"]
                n, _, h, w = x.shape
                caches.append((cols, x.shape))
                x = out.reshape(n, h, w, layer.size).transpose(0, 3, 1, 2)
            elif layer.kind == DENSE:
                caches.append(x)
                x = x @ p["w"] + p["b"]
            elif layer.kind == RELU:
                mask = x > 0
                caches.append(mask)
                x = x * mask
            elif layer.kind == MAXPOOL:
                n, c, h, w = x.shape
                h2, w2 = h // 2, w // 2
                blocks = x[:, :, :2 * h2, :2 * w2].reshape(n, c, h2, 2, w2, 2)
                blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
                arg = blocks.argmax(axis=-1)
                caches.append((arg, x.shape))
                x = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
            else:  # flatten
                caches.append(x.shape)
                x = x.reshape(x.shape[0], -1)
            if layer.tap:
                tap = x
        return Forward(x, tap, caches)

    def backward(self, caches, grad_logits, grad_tap=None) -> List[dict]:
        """Parameter gradients given d(loss)/d(logits) and, optionally, d(loss)/d(tap output)."""
        if len(caches) != len(self.layers):
            raise ValueError("caches do not come from this network")
        g = np.asarray(grad_logits, dtype=np.float64)
        grads: List[dict] = [{} for _ in self.layers]
        for idx in range(len(self.layers) - 1, -1, -1):
            layer, p, cache = self.layers[idx], self.params[idx], caches[idx]
            if layer.tap and grad_tap is not None:
                if grad_tap.shape != g.shape:
                    raise ValueError(f"tap gradient shape {grad_tap.shape} != tap output {g.shape}")
                g = g + grad_tap
            if layer.kind == CONV:
                cols, in_shape = cache
                g2 = g.transpose(0, 2, 3, 1).reshape(-1, layer.size)
                grads[idx] = {"w": (g2.T @ cols).reshape(p["w"].shape), "b": g2.sum(axis=0)}
                if idx > 0:
                    g = _col2im(g2 @ p["w"].reshape(layer.size, -1), in_shape)
            elif layer.kind == DENSE:
                x = cache
                grads[idx] = {"w": x.T @ g, "b": g.sum(axis=0)}
                g = g @ p["w"].T
            elif layer.kind == RELU:
                g = g * cache
            elif layer.kind == MAXPOOL:
                arg, in_shape = cache
                n, c, h, w = in_shape
                h2, w2 = h // 2, w // 2
                sel = np.zeros((n, c, h2, w2, 4))
                np.put_along_axis(sel, arg[..., None], g[..., None], axis=-1)
                sel = sel.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
                g = np.zeros(in_shape)
                g[:, :, :2 * h2, :2 * w2] = sel
            else:
                g = g.reshape(cache)
        return grads

    def predict(self, x, batch_size: int = 512) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        out = [self.forward(x[i:i + batch_size]).logits.argmax(axis=1) for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def init_params(net: Network, seed: int) -> Network:
    """He-normal weights (std sqrt(2 / fan_in)) and zero biases, drawn in layer order."""
    rng = np.random.default_rng(seed)
    params = []
    for layer, in_shape in zip(net.layers, net.shapes[:-1]):
        if layer.kind == CONV:
            fan_in = in_shape[0] * 9
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(layer.size, in_shape[0], 3, 3))
            params.append({"w": w, "b": np.zeros(layer.size)})
        elif layer.kind == DENSE:
            fan_in = in_shape[0]
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, layer.size))
            params.append({"w": w, "b": np.zeros(layer.size)})
        else:
            params.append({})
    net.params = params
    net.seed = seed
    return net


@dataclass
class SgdConfig:
    lr: float = 0.2
    momentum: float = 0.9
    weight_decay: float = 1e-4
    milestones: Tuple[int, ...] = (30, 45)
    lr_decay: float = 0.1

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if not self.weight_decay >= 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError(f"milestones must be strictly increasing, got {self.milestones}")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** sum(m <= epoch for m in self.milestones)


class SGD:
    """Heavy-ball momentum SGD with L2 weight decay, updating arrays in place."""

    def __init__(self, cfg: SgdConfig):
        self.cfg = cfg
        self.velocity: List[np.ndarray] = []

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray], epoch: int) -> None:
        if len(params) != len(grads):
            raise ValueError("parameter and gradient lists differ in length")
        if not self.velocity:
            self.velocity = [np.zeros_like(p) for p in params]
        lr = self.cfg.lr_at(epoch)
        for p, g, v in zip(params, grads, self.velocity):
            if p.shape != g.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
            v *= self.cfg.momentum
            v += g + self.cfg.weight_decay * p
            p -= lr * v


def sgd_step(net: Network, grads: List[dict], cfg: SgdConfig, opt: Optional[SGD], epoch: int) -> SGD:
    opt = opt or SGD(cfg)
    opt.step(net.param_arrays(), [g[k] for g in grads for k in ("w", "b") if k in g], epoch)
    return opt


MAGIC = b"NSTCKPT1"
_KIND_TAGS = {CONV: 1, DENSE: 2, RELU: 3, MAXPOOL: 4, FLATTEN: 5}
_TAG_KINDS = {v: k for k, v in _KIND_TAGS.items()}


class CheckpointError(ValueError):
    pass


def save_checkpoint(net: Network, path) -> None:
    out = bytearray(MAGIC)
    out += struct.pack("<I", len(net.layers))
    out += struct.pack("<3I", *net.in_shape)
    for layer, p in zip(net.layers, net.params):
        arrays = [p[k] for k in ("w", "b") if k in p]
        out += struct.pack("<BBII", _KIND_TAGS[layer.kind], int(layer.tap), layer.size, len(arrays))
        for a in arrays:
            out += struct.pack("<I", a.ndim)
            out += struct.pack(f"<{a.ndim}I", *a.shape)
            out += np.ascontiguousarray(a, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path) -> Network:
    buf = Path(path).read_bytes()
    pos = 0

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise CheckpointError(f"{path}: truncated checkpoint")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: not an NSTCKPT1 checkpoint")
    pos = 8
    (count,) = take("<I")
    in_shape = take("<3I")
    layers, arrays = [], []
    for _ in range(count):
        tag, tap, size, n_arrays = take("<BBII")
        if tag not in _TAG_KINDS:
            raise CheckpointError(f"{path}: unknown layer tag {tag}")
        layers.append(LayerSpec(_TAG_KINDS[tag], size, bool(tap)))
        layer_arrays = []
        for _ in range(n_arrays):
            (ndim,) = take("<I")
            shape = take(f"<{ndim}I")
            n = int(np.prod(shape))
            if pos + 8 * n > len(buf):
                raise CheckpointError(f"{path}: truncated checkpoint")
            layer_arrays.append(np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64))
            pos += 8 * n
        arrays.append(layer_arrays)
    net = Network(layers, in_shape)
    for idx, (p, loaded) in enumerate(zip(net.params, arrays)):
        keys = [k for k in ("w", "b") if k in p]
        if len(keys) != len(loaded) or any(p[k].shape != a.shape for k, a in zip(keys, loaded)):
            raise CheckpointError(f"{path}: layer {idx} parameter shapes do not match its architecture")
        for k, a in zip(keys, loaded):
            p[k] = a
    return net
