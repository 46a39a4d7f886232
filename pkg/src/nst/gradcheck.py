"""Central finite-difference checks for every analytic gradient in the package.

``run_all`` returns one :class:`SuiteResult` per checked gradient. The
error metric is the worst entrywise relative error
``|analytic - numeric| / max(|analytic|, |numeric|, floor)``; the floor keeps
entries that are zero up to roundoff from dominating.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

import numpy as np

from . import losses as L
from .mmd import KernelSpec, mmd_sq, mmd_sq_normalized
from .net import Network, conv, dense, flatten, maxpool, relu

STEP = 1e-5
TOLERANCE = 1e-4
FLOOR = 1e-7


@dataclass
class SuiteResult:
    name: str
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def numeric_grad(f: Callable[[], float], x: np.ndarray, step: float = STEP, indices=None) -> np.ndarray:
    """Central differences of ``f`` w.r.t. entries of ``x`` (perturbed in place, then restored)."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size) if indices is None else indices:
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def rel_error(analytic, numeric, floor: float = FLOOR) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def _kernels() -> Dict[str, KernelSpec]:
    return {
        "linear": KernelSpec.linear(),
        "poly": KernelSpec.poly(2, 0.0),
        "poly3": KernelSpec.poly(3, 0.5),
        "gaussian": KernelSpec.gaussian(0.7),
    }


def _frozen(spec: KernelSpec, sigma_sq) -> KernelSpec:
    # Bandwidth is a stop-gradient constant, so the numeric side must freeze it too.
    return KernelSpec.gaussian(sigma_sq) if spec.family == "gaussian" else spec


def check_mmd_sq(rng, corrupt=1.0) -> float:
    worst = 0.0
    specs = list(_kernels().values()) + [KernelSpec.gaussian()]
    for spec in specs:
        x = rng.normal(size=(4, 6))
        y = rng.normal(size=(4, 6))
        res = mmd_sq(spec, x, y, True)
        fixed = _frozen(spec, res.sigma_sq_used)
        num = numeric_grad(lambda: mmd_sq(fixed, x, y).value, y)
        worst = max(worst, rel_error(corrupt * res.grad_y, num))
    return worst


def check_mmd_sq_normalized(rng, corrupt=1.0) -> float:
    worst = 0.0
    specs = list(_kernels().values()) + [KernelSpec.gaussian()]
    for spec in specs:
        f_t = rng.normal(size=(5, 6))
        f_s = rng.normal(size=(4, 6))
        res = mmd_sq_normalized(spec, f_t, f_s, True)
        fixed = _frozen(spec, res.sigma_sq_used)
        num = numeric_grad(lambda: mmd_sq_normalized(fixed, f_t, f_s).value, f_s)
        worst = max(worst, rel_error(corrupt * res.grad_y, num))
    return worst


def check_nst(rng, corrupt=1.0) -> float:
    worst = 0.0
    for spec in _kernels().values():
        f_t = rng.normal(size=(2, 5, 4, 4))
        f_s = rng.normal(size=(2, 3, 2, 2))  # teacher is resized to 2x2
        val = L.nst_loss(f_t, f_s, spec, 1.7)
        num = numeric_grad(lambda: L.nst_loss(f_t, f_s, spec, 1.7).transfer_part, f_s)
        worst = max(worst, rel_error(corrupt * val.grad_feature, num))
    return worst


def check_kd(rng, corrupt=1.0) -> float:
    worst = 0.0
    for tau in (1.0, 4.0):
        lt = rng.normal(size=(3, 5))
        ls = rng.normal(size=(3, 5))
        val = L.kd_loss(lt, ls, tau, 2.0)
        num = numeric_grad(lambda: L.kd_loss(lt, ls, tau, 2.0).transfer_part, ls)
        worst = max(worst, rel_error(corrupt * val.grad_logits, num))
    return worst


def check_fitnet(rng, corrupt=1.0) -> float:
    f_t = rng.normal(size=(2, 4, 3, 3))
    f_s = rng.normal(size=(2, 3, 3, 3))
    ad = L.Adapter.init(4, 3, seed=int(rng.integers(1 << 31)))
    ad.bias[:] = rng.normal(size=4)

    def value():
        return L.fitnet_loss(f_t, f_s, ad, 3.0).transfer_part

    val = L.fitnet_loss(f_t, f_s, ad, 3.0)
    errs = [
        rel_error(corrupt * val.grad_feature, numeric_grad(value, f_s)),
        rel_error(val.grad_adapter.weight, numeric_grad(value, ad.weight)),
        rel_error(val.grad_adapter.bias, numeric_grad(value, ad.bias)),
    ]
    same = rng.normal(size=(2, 3, 3, 3))
    val = L.fitnet_loss(f_t[:, :3], same, None, 3.0)
    errs.append(rel_error(corrupt * val.grad_feature,
                          numeric_grad(lambda: L.fitnet_loss(f_t[:, :3], same, None, 3.0).transfer_part, same)))
    return max(errs)


def check_at(rng, corrupt=1.0) -> float:
    worst = 0.0
    for mapping in L.MAPPINGS:
        f_t = rng.normal(size=(2, 4, 3, 3))
        f_s = rng.normal(size=(2, 2, 3, 3))
        val = L.at_loss(f_t, f_s, mapping, 5.0)
        num = numeric_grad(lambda: L.at_loss(f_t, f_s, mapping, 5.0).transfer_part, f_s)
        worst = max(worst, rel_error(corrupt * val.grad_feature, num))
    return worst


def check_cross_entropy(rng, corrupt=1.0) -> float:
    logits = rng.normal(size=(4, 6))
    labels = rng.integers(0, 6, size=4)
    _, grad = L.cross_entropy(logits, labels)
    num = numeric_grad(lambda: L.cross_entropy(logits, labels)[0], logits)
    return rel_error(corrupt * grad, num)


def tiny_pair(seed: int):
    teacher = Network([conv(6), relu(tap=True), maxpool(), flatten(), dense(3)], (2, 4, 4), seed=seed)
    student = Network([conv(3), relu(tap=True), maxpool(), flatten(), dense(3)], (2, 4, 4), seed=seed + 1)
    return teacher, student


def network_loss(student: Network, x, labels, loss: Optional[L.TransferLoss], t_out, adapter=None) -> L.LossValue:
    out = student.forward(x)
    transfers = []
    if loss is not None:
        transfers = L.evaluate_transfer(loss, t_out.logits, out.logits, t_out.tap, out.tap, adapter)
    return L.total_loss(out.logits, labels, transfers), out


def check_network(rng, loss: Optional[L.TransferLoss], corrupt=1.0, n_params: int = 20) -> float:
    teacher, student = tiny_pair(int(rng.integers(1 << 30)))
    x = rng.normal(size=(3, 2, 4, 4))
    labels = rng.integers(0, 3, size=3)
    t_out = teacher.forward(x)
    adapter = L.Adapter.init(6, 3, seed=1) if L.needs_adapter(loss) else None
    val, out = network_loss(student, x, labels, loss, t_out, adapter)
    grads = student.backward(out.caches, val.grad_logits, val.grad_feature)
    arrays = student.param_arrays()
    flat_grads = [g[k] for g in grads for k in ("w", "b") if k in g]
    sizes = np.array([a.size for a in arrays])
    picks = rng.choice(int(sizes.sum()), size=min(n_params, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    analytic, numeric = [], []
    for flat_idx in picks:
        k = int(np.searchsorted(offsets, flat_idx, side="right") - 1)
        local = int(flat_idx - offsets[k])
        num = numeric_grad(lambda: network_loss(student, x, labels, loss, t_out, adapter)[0].total,
                           arrays[k], indices=[local])
        analytic.append(flat_grads[k].reshape(-1)[local])
        numeric.append(num.reshape(-1)[local])
    return rel_error(corrupt * np.array(analytic), np.array(numeric))


def network_suites() -> Dict[str, Optional[L.TransferLoss]]:
    return {
        "network[ce]": None,
        "network[nst-linear]": L.NST(KernelSpec.linear(), 1.0),
        "network[nst-poly]": L.NST(KernelSpec.poly(), 1.0),
        "network[nst-gaussian]": L.NST(KernelSpec.gaussian(0.5), 1.0),
        "network[kd]": L.KD(4.0, 1.0),
        "network[fitnet]": L.FitNet(1.0),
        "network[at]": L.AT(L.SQ_SUM, 1.0),
        "network[kd+nst]": L.Combined((L.KD(4.0, 1.0), L.NST(KernelSpec.poly(), 1.0))),
    }


SUITES: Dict[str, Callable] = {
    "mmd_sq": check_mmd_sq,
    "mmd_sq_normalized": check_mmd_sq_normalized,
    "nst_loss": check_nst,
    "kd_loss": check_kd,
    "fitnet_loss": check_fitnet,
    "at_loss": check_at,
    "cross_entropy": check_cross_entropy,
}


def run_all(seed: int = 0, corrupt: Optional[str] = None) -> List[SuiteResult]:
    """Run every suite. ``corrupt`` names a suite whose analytic gradient is scaled by 1.01 (test hook)."""
    results = []
    for i, (name, fn) in enumerate(SUITES.items()):
        rng = np.random.default_rng([seed, i])
        results.append(SuiteResult(name, fn(rng, 1.01 if name == corrupt else 1.0)))
    for i, (name, loss) in enumerate(network_suites().items()):
        rng = np.random.default_rng([seed, 100 + i])
        results.append(SuiteResult(name, check_network(rng, loss, 1.01 if name == corrupt else 1.0)))
    return results


def all_names() -> List[str]:
    return list(SUITES) + list(network_suites())
