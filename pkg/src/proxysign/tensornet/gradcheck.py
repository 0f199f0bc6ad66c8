"""Finite-difference verification of reverse-mode gradients."""

import numpy as np

from proxysign.errors import NumericalError
from proxysign.tensornet.ops import kink_recorder
from proxysign.tensornet.tensor import Tensor, no_grad


def nudge_from_kinks(x, margin=0.1):
    """Move entries lying within ``margin`` of zero out to +-margin.

    Keeps central differences away from the ReLU kink.
    """
    x = np.array(x, dtype=np.float64, copy=True)
    near = np.abs(x) < margin
    x[near] = np.where(x[near] >= 0, margin, -margin)
    return x


def _evaluate(f, inputs, track):
    with no_grad():
        if not track:
            return float(f(*inputs).data), None
        with kink_recorder() as log:
            value = float(f(*inputs).data)
        return value, log


def grad_check(f, inputs, eps=1e-4, max_coords=64, seed=0, skip_kinks=False, stats=None):
    """Maximum relative error between reverse-mode and central-difference gradients.

    ``f`` maps the input tensors to a scalar Tensor.  Up to ``max_coords``
    coordinates per input are sampled; the error per coordinate is
    |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|).

    With ``skip_kinks`` a coordinate whose +-eps evaluations change any ReLU
    mask or max-pool choice is skipped, since the difference quotient then
    straddles a non-differentiable point.  ``stats`` (a dict) receives the
    number of coordinates checked and skipped.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("grad_check needs float64 inputs")
        t.requires_grad = True
        t.grad = None
    if skip_kinks:
        _, base = _evaluate(f, inputs, True)
    checked = skipped = 0
    out = f(*inputs)
    if not np.all(np.isfinite(out.data)):
        raise NumericalError("function value is not finite")
    out.backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in inputs:
        g_ad = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        count = flat.size
        idx = np.arange(count) if count <= max_coords else rng.choice(count, max_coords, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            up, sig_up = _evaluate(f, inputs, skip_kinks)
            flat[i] = orig - eps
            down, sig_down = _evaluate(f, inputs, skip_kinks)
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericalError("function value is not finite")
            if skip_kinks and (sig_up != base or sig_down != base):
                skipped += 1
                continue
            checked += 1
            g_fd = (up - down) / (2 * eps)
            a = float(g_ad.reshape(-1)[i])
            worst = max(worst, abs(a - g_fd) / max(1e-8, abs(a) + abs(g_fd)))
    if stats is not None:
        stats.update(checked=checked, skipped=skipped)
    return worst
