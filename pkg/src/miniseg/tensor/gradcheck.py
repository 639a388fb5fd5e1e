"""Central finite-difference check of analytic gradients.

The op under test is evaluated in float64. A fixed random projection turns the
output into a scalar, the tape gives the analytic gradient of that scalar and
the numeric gradient comes from (f(x+h) - f(x-h)) / 2h, one element at a time.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence

import numpy as np

from . import ops
from .core import Tensor, backward, no_grad

FD_STEP = 1e-4
REL_TOL = 1e-3


@dataclass
class GradcheckResult:
    name: str
    max_rel_error: float
    per_input: List[float]

    @property
    def passed(self) -> bool:
        return self.max_rel_error < REL_TOL


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| scaled by the larger of the two gradients' max magnitude."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    diff = np.abs(analytic - numeric).max(initial=0.0)
    if scale == 0.0:
        return float(diff)
    return float(diff / scale)


def check_gradients(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    name: str = "op",
    eps: float = FD_STEP,
    seed: int = 0,
) -> GradcheckResult:
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    leaves = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    out = fn(*leaves)
    proj = np.random.default_rng(seed).standard_normal(out.shape)
    proj_t = Tensor(proj, dtype=np.float64)
    loss = ops.sum_all(ops.mul_broadcast(out, proj_t)) if out.ndim else ops.scale(out, 1.0)
    backward(loss, leaves)

    def scalar(vals: List[np.ndarray]) -> float:
        with no_grad():
            y = fn(*[Tensor(v, dtype=np.float64) for v in vals]).data
        return float((y * proj).sum()) if y.ndim else float(y)

    errors = []
    for k, leaf in enumerate(leaves):
        numeric = np.zeros_like(arrays[k])
        flat = numeric.reshape(-1)
        base = arrays[k].reshape(-1)
        for idx in range(base.size):
            orig = base[idx]
            base[idx] = orig + eps
            fp = scalar(arrays)
            base[idx] = orig - eps
            fm = scalar(arrays)
            base[idx] = orig
            flat[idx] = (fp - fm) / (2 * eps)
        errors.append(relative_error(leaf.grad, numeric))
    return GradcheckResult(name, max(errors), errors)


def _bn_train(x, g, b):
    c = x.shape[1]
    return ops.batch_norm(x, g, b, np.zeros(c), np.ones(c), training=True)


def _bn_eval(x, g, b):
    c = x.shape[1]
    rm = np.linspace(-0.5, 0.5, c)
    rv = np.linspace(0.5, 2.0, c)
    return ops.batch_norm(x, g, b, rm, rv, training=False)


def _away_from_zero(a: np.ndarray, margin: float = 0.05) -> np.ndarray:
    return np.where(np.abs(a) < margin, np.sign(a + 1e-12) * margin + a, a)


def default_suite(seed: int = 0) -> Dict[str, Callable[[], GradcheckResult]]:
    """Every differentiable op on small random inputs (at most 2x4x6x6)."""
    rng = np.random.default_rng(seed)

    def r(*shape):
        return rng.standard_normal(shape)

    def conv_case(name, cin, cout, k, s, p, d, g, bias):
        spec = ops.ConvSpec(cin, cout, (k, k), s, p, d, g, bias)
        args = [r(2, cin, 6, 6), r(*spec.weight_shape)]
        if bias:
            args.append(r(cout))
            return lambda: check_gradients(lambda x, w, b: ops.conv2d(x, w, b, spec), args, name)
        return lambda: check_gradients(lambda x, w: ops.conv2d(x, w, None, spec), args, name)

    suite: Dict[str, Callable[[], GradcheckResult]] = {}
    conv_cases = {
        "conv2d_vanilla3x3_s1": (4, 4, 3, 1, 1, 1, 1, False),
        "conv2d_vanilla3x3_s2": (3, 4, 3, 2, 1, 1, 1, False),
        "conv2d_pointwise_bias": (4, 2, 1, 1, 0, 1, 1, True),
        "conv2d_grouped_pointwise": (4, 4, 1, 1, 0, 1, 2, False),
        "conv2d_grouped_attention_bias": (4, 2, 1, 1, 0, 1, 2, True),
        "conv2d_depthwise3x3_r2": (4, 4, 3, 1, 2, 2, 4, False),
        "conv2d_depthwise3x3_r4_s2": (4, 4, 3, 2, 4, 4, 4, False),
        "conv2d_depthwise5x5_s2": (4, 4, 5, 2, 2, 1, 4, False),
    }
    for name, args in conv_cases.items():
        suite[name] = conv_case(name, *args)

    x = r(2, 4, 6, 6)
    suite["avg_pool2d_s1"] = lambda: check_gradients(lambda t: ops.avg_pool2d(t, 1), [x], "avg_pool2d_s1")
    suite["avg_pool2d_s2"] = lambda: check_gradients(lambda t: ops.avg_pool2d(t, 2), [x], "avg_pool2d_s2")
    suite["batch_norm_train"] = lambda: check_gradients(
        _bn_train, [r(2, 4, 6, 6), 1 + 0.1 * r(4), r(4)], "batch_norm_train"
    )
    suite["batch_norm_eval"] = lambda: check_gradients(_bn_eval, [r(2, 4, 6, 6), r(4), r(4)], "batch_norm_eval")
    suite["prelu"] = lambda: check_gradients(ops.prelu, [_away_from_zero(r(2, 4, 6, 6)), r(4)], "prelu")
    suite["relu"] = lambda: check_gradients(ops.relu, [_away_from_zero(r(2, 4, 6, 6))], "relu")
    suite["sigmoid"] = lambda: check_gradients(ops.sigmoid, [r(2, 4, 6, 6)], "sigmoid")
    suite["softmax_channels"] = lambda: check_gradients(ops.softmax_channels, [r(2, 4, 6, 6)], "softmax_channels")
    target = rng.integers(0, 2, size=(2, 6, 6))
    suite["cross_entropy"] = lambda: check_gradients(
        lambda t: ops.cross_entropy(t, target), [r(2, 2, 6, 6)], "cross_entropy"
    )
    suite["add"] = lambda: check_gradients(ops.add, [r(2, 4, 6, 6), r(2, 4, 6, 6)], "add")
    suite["mul_broadcast"] = lambda: check_gradients(ops.mul_broadcast, [r(2, 4, 6, 6), r(2, 1, 6, 6)], "mul_broadcast")
    suite["mul_same_shape"] = lambda: check_gradients(ops.mul_broadcast, [r(2, 4, 6, 6), r(2, 4, 6, 6)], "mul_same_shape")
    suite["concat_channels"] = lambda: check_gradients(
        lambda a, b: ops.concat_channels([a, b]), [r(2, 2, 6, 6), r(2, 2, 6, 6)], "concat_channels"
    )
    suite["split_channels"] = lambda: check_gradients(
        lambda t: ops.concat_channels(list(reversed(ops.split_channels(t, 2)))), [r(2, 4, 6, 6)], "split_channels"
    )
    suite["upsample_bilinear_x2"] = lambda: check_gradients(
        lambda t: ops.upsample_bilinear(t, 2), [r(2, 4, 3, 3)], "upsample_bilinear_x2"
    )
    suite["upsample_bilinear_x4"] = lambda: check_gradients(
        lambda t: ops.upsample_bilinear(t, 4), [r(1, 2, 2, 3)], "upsample_bilinear_x4"
    )
    return suite


def run_suite(seed: int = 0) -> List[GradcheckResult]:
    return [case() for case in default_suite(seed).values()]
