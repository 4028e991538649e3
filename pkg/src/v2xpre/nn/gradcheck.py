"""Central finite-difference gradient checking."""
import numpy as np

from v2xpre.nn.tensor import Tensor, backward


def numeric_grad(fn, inputs, k, eps=1e-6):
    x = inputs[k].data
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + eps
        fp = fn(*inputs).item()
        x[idx] = orig - eps
        fm = fn(*inputs).item()
        x[idx] = orig
        g[idx] = (fp - fm) / (2 * eps)
    return g


def rel_error(num, ana) -> float:
    """||num - ana|| / max(||num||, ||ana||) over a whole gradient tensor.

    Elementwise ratios are dominated by finite-difference round-off on
    entries that are nearly zero; the norm ratio is not.
    """
    scale = max(np.linalg.norm(num), np.linalg.norm(ana))
    return float(np.linalg.norm(num - ana) / scale) if scale > 0 else 0.0


def max_rel_error(fn, arrays, eps=1e-6):
    """Worst ``rel_error`` of analytic vs central-difference gradients of scalar ``fn``."""
    inputs = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    out = fn(*inputs)
    backward(out, inputs)
    worst = 0.0
    for k, t in enumerate(inputs):
        worst = max(worst, rel_error(numeric_grad(fn, inputs, k, eps), t.grad))
    return worst
