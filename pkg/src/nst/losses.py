"""Transfer losses: NST, KD, FitNet, AT, and weighted combinations.

Each loss returns a :class:`LossValue` holding its scalar contribution and
the gradient with respect to the student's outputs (logits for KD, tap
features for the feature-based losses). Teacher tensors are constants.
When teacher and student tap maps differ spatially, the teacher map is
bilinearly resized to the student's size before comparison.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Union

import numpy as np

from .mmd import GAUSSIAN, LINEAR, POLY, KernelSpec, mmd_sq_normalized, normalize_backward
from .tensor import as_batch4, as_matrix, bilinear_resize, row_l2_normalize

ABS_SUM = "abssum"
SQ_SUM = "sqsum"
MAPPINGS = (ABS_SUM, SQ_SUM)

# Loss weights used in the reference experiments.
DEFAULT_NST_WEIGHT = {LINEAR: 50.0, POLY: 50.0, GAUSSIAN: 100.0}
DEFAULT_FITNET_WEIGHT = 100.0
DEFAULT_AT_WEIGHT = 1000.0
DEFAULT_KD_TAU = 4.0
DEFAULT_KD_WEIGHT = 16.0


def _check_weight(weight):
    if not weight >= 0:
        raise ValueError(f"loss weight must be >= 0, got {weight}")


@dataclass(frozen=True)
class NST:
    kernel: KernelSpec = field(default_factory=KernelSpec.poly)
    weight: Optional[float] = None

    def __post_init__(self):
        if self.weight is None:
            object.__setattr__(self, "weight", DEFAULT_NST_WEIGHT[self.kernel.family])
        _check_weight(self.weight)

    @property
    def name(self) -> str:
        return f"nst-{self.kernel.family}"


@dataclass(frozen=True)
class KD:
    tau: float = DEFAULT_KD_TAU
    weight: float = DEFAULT_KD_WEIGHT

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"temperature must be > 0, got {self.tau}")
        _check_weight(self.weight)

    name = "kd"


@dataclass(frozen=True)
class FitNet:
    weight: float = DEFAULT_FITNET_WEIGHT

    def __post_init__(self):
        _check_weight(self.weight)

    name = "fitnet"


@dataclass(frozen=True)
class AT:
    mapping: str = SQ_SUM
    weight: float = DEFAULT_AT_WEIGHT

    def __post_init__(self):
        if self.mapping not in MAPPINGS:
            raise ValueError(f"unknown attention mapping {self.mapping!r}")
        _check_weight(self.weight)

    name = "at"


@dataclass(frozen=True)
class Combined:
    parts: tuple

    def __post_init__(self):
        object.__setattr__(self, "parts", tuple(self.parts))
        if not self.parts:
            raise ValueError("a combined loss needs at least one part")
        if any(isinstance(p, Combined) for p in self.parts):
            raise ValueError("combined losses cannot be nested")

    @property
    def name(self) -> str:
        return "+".join(p.name for p in self.parts)


TransferLoss = Union[NST, KD, FitNet, AT, Combined]


@dataclass
class Adapter:
    """1x1 projection from student channels to teacher channels for FitNet."""

    weight: np.ndarray  # (C_T, C_S)
    bias: np.ndarray  # (C_T,)

    @classmethod
    def init(cls, c_t: int, c_s: int, seed: int = 0) -> "Adapter":
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0.0, np.sqrt(1.0 / c_s), size=(c_t, c_s)), np.zeros(c_t))

    def apply(self, f_s: np.ndarray) -> np.ndarray:
        return np.einsum("tc,nchw->nthw", self.weight, f_s) + self.bias[None, :, None, None]


@dataclass
class LossValue:
    total: float
    ce_part: float = 0.0
    transfer_part: float = 0.0
    grad_logits: Optional[np.ndarray] = None
    grad_feature: Optional[np.ndarray] = None
    grad_adapter: Optional[Adapter] = None


def _transfer(value, grad_logits=None, grad_feature=None, grad_adapter=None) -> LossValue:
    return LossValue(float(value), 0.0, float(value), grad_logits, grad_feature, grad_adapter)


def _match_teacher(f_t, f_s):
    f_t = as_batch4(f_t)
    f_s = as_batch4(f_s)
    if f_t.shape[0] != f_s.shape[0]:
        raise ValueError(f"batch size mismatch: teacher {f_t.shape[0]} vs student {f_s.shape[0]}")
    if f_t.shape[2:] != f_s.shape[2:]:
        f_t = bilinear_resize(f_t, f_s.shape[2], f_s.shape[3])
    return f_t, f_s


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softened_softmax(logits, tau: float = 1.0) -> np.ndarray:
    if not tau > 0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    return np.exp(log_softmax(as_matrix(logits) / tau))


def nst_loss(f_t, f_s, spec: KernelSpec, weight: float) -> LossValue:
    """``weight/2`` times the batch-mean MMD between per-sample channel patterns."""
    f_t, f_s = _match_teacher(f_t, f_s)
    n, c_s, h, w = f_s.shape
    value = 0.0
    grad = np.zeros_like(f_s)
    for i in range(n):
        res = mmd_sq_normalized(spec, f_t[i].reshape(f_t.shape[1], h * w), f_s[i].reshape(c_s, h * w), True)
        value += res.value
        grad[i] = res.grad_y.reshape(c_s, h, w)
    scale = weight / (2.0 * n)
    return _transfer(scale * value, grad_feature=scale * grad)


def kd_loss(logits_t, logits_s, tau: float, weight: float) -> LossValue:
    """``weight * tau^2`` times the batch-mean KL(p_T || p_S) between softened outputs.

    This is the soft-target cross-entropy minus the teacher's (constant)
    entropy, so it has the same gradient and vanishes when the logits agree.
    """
    logits_t = as_matrix(logits_t)
    logits_s = as_matrix(logits_s)
    if logits_t.shape != logits_s.shape:
        raise ValueError(f"logit shape mismatch: {logits_t.shape} vs {logits_s.shape}")
    if not tau > 0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    n = logits_s.shape[0]
    log_p_t = log_softmax(logits_t / tau)
    p_t = np.exp(log_p_t)
    log_p_s = log_softmax(logits_s / tau)
    value = weight * tau**2 * (p_t * (log_p_t - log_p_s)).sum() / n
    grad = weight * tau * (np.exp(log_p_s) - p_t) / n
    return _transfer(value, grad_logits=grad)


def fitnet_loss(f_t, f_s, adapter: Optional[Adapter], weight: float) -> LossValue:
    """Squared error between teacher features and (adapted) student features.

    Normalized by ``C_T*H*W`` and averaged over the batch, then halved and
    scaled by ``weight``.
    """
    f_t, f_s = _match_teacher(f_t, f_s)
    n, c_t, h, w = f_t.shape
    if adapter is None:
        if f_s.shape[1] != c_t:
            raise ValueError(f"channel mismatch ({f_s.shape[1]} vs {c_t}) requires an adapter")
        mapped = f_s
    else:
        if adapter.weight.shape != (c_t, f_s.shape[1]):
            raise ValueError(f"adapter shape {adapter.weight.shape} does not map {f_s.shape[1]} -> {c_t} channels")
        mapped = adapter.apply(f_s)
    diff = mapped - f_t
    denom = n * c_t * h * w
    value = 0.5 * weight * np.sum(diff * diff) / denom
    g = weight * diff / denom
    if adapter is None:
        return _transfer(value, grad_feature=g)
    grad_adapter = Adapter(np.einsum("nthw,nchw->tc", g, f_s), g.sum(axis=(0, 2, 3)))
    return _transfer(value, grad_feature=np.einsum("tc,nthw->nchw", adapter.weight, g), grad_adapter=grad_adapter)


def _attention_raw(f: np.ndarray, mapping: str) -> np.ndarray:
    if mapping == ABS_SUM:
        s = np.abs(f).sum(axis=1)
    elif mapping == SQ_SUM:
        s = (f * f).sum(axis=1)
    else:
        raise ValueError(f"unknown attention mapping {mapping!r}")
    return s.reshape(f.shape[0], -1)


def attention_map(f, mapping: str = SQ_SUM) -> np.ndarray:
    """Channel-collapsed, l2-normalized spatial map; one row of length H*W per sample."""
    return row_l2_normalize(_attention_raw(as_batch4(f), mapping))


def at_loss(f_t, f_s, mapping: str, weight: float) -> LossValue:
    f_t, f_s = _match_teacher(f_t, f_s)
    n = f_s.shape[0]
    a_t = attention_map(f_t, mapping)
    raw_s = _attention_raw(f_s, mapping)
    a_s = row_l2_normalize(raw_s)
    diff = a_s - a_t
    value = weight * np.sum(diff * diff) / n
    g_raw = normalize_backward(raw_s, 2.0 * weight * diff / n).reshape(n, 1, *f_s.shape[2:])
    if mapping == ABS_SUM:
        grad = np.sign(f_s) * g_raw
    else:
        grad = 2.0 * f_s * g_raw
    return _transfer(value, grad_feature=grad)


def gram_matrix_normalized(f) -> np.ndarray:
    """Position-by-position Gram matrix of the row-normalized map, divided by the channel count."""
    f_hat = row_l2_normalize(f)
    return f_hat.T @ f_hat / f_hat.shape[0]


def cross_entropy(logits_s, labels) -> tuple:
    logits_s = as_matrix(logits_s)
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits_s.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    log_p = log_softmax(logits_s)
    rows = np.arange(n)
    value = -log_p[rows, labels].sum() / n
    grad = np.exp(log_p)
    grad[rows, labels] -= 1.0
    return float(value), grad / n


def total_loss(logits_s, labels, transfers: Sequence[LossValue] = ()) -> LossValue:
    """Mean cross-entropy on the labels plus every evaluated transfer term."""
    ce, grad_logits = cross_entropy(logits_s, labels)
    transfer = 0.0
    grad_feature = None
    grad_adapter = None
    for t in transfers:
        transfer += t.transfer_part
        if t.grad_logits is not None:
            grad_logits = grad_logits + t.grad_logits
        if t.grad_feature is not None:
            grad_feature = t.grad_feature if grad_feature is None else grad_feature + t.grad_feature
        if t.grad_adapter is not None:
            grad_adapter = t.grad_adapter if grad_adapter is None else Adapter(
                grad_adapter.weight + t.grad_adapter.weight, grad_adapter.bias + t.grad_adapter.bias)
    return LossValue(ce + transfer, ce, transfer, grad_logits, grad_feature, grad_adapter)


def evaluate_transfer(loss: TransferLoss, logits_t, logits_s, f_t, f_s, adapter: Optional[Adapter] = None) -> List[LossValue]:
    """Evaluate one configured transfer loss; a Combined loss yields one value per part."""
    if isinstance(loss, Combined):
        out = []
        for part in loss.parts:
            out.extend(evaluate_transfer(part, logits_t, logits_s, f_t, f_s, adapter))
        return out
    if isinstance(loss, NST):
        return [nst_loss(f_t, f_s, loss.kernel, loss.weight)]
    if isinstance(loss, KD):
        return [kd_loss(logits_t, logits_s, loss.tau, loss.weight)]
    if isinstance(loss, FitNet):
        return [fitnet_loss(f_t, f_s, adapter, loss.weight)]
    if isinstance(loss, AT):
        return [at_loss(f_t, f_s, loss.mapping, loss.weight)]
    raise TypeError(f"not a transfer loss: {loss!r}")


def needs_features(loss: Optional[TransferLoss]) -> bool:
    if loss is None:
        return False
    if isinstance(loss, Combined):
        return any(needs_features(p) for p in loss.parts)
    return not isinstance(loss, KD)


def needs_adapter(loss: Optional[TransferLoss]) -> bool:
    if isinstance(loss, Combined):
        return any(needs_adapter(p) for p in loss.parts)
    return isinstance(loss, FitNet)
