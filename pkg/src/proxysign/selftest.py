"""Built-in numerical checks: conv3d against the direct oracle, and gradients
of every differentiable op against central differences."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from proxysign.tensornet import (
    Tensor,
    add,
    batchnorm3d,
    conv3d,
    global_avg_pool,
    grad_check,
    linear,
    maxpool3d,
    mul,
    nudge_from_kinks,
    relu,
    softmax_crossentropy,
    total,
)
from proxysign.tensornet.reference import conv3d_direct

CONV_TOL = 1e-6
GRAD_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    value: float
    limit: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.value) and self.value < self.limit)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.value:.3g} (limit {self.limit:g}, {self.seconds:.1f}s)"


def random_conv_case(rng):
    """A small random conv3d problem with fan-in scaled f32 weights."""
    n = int(rng.integers(1, 3))
    c_in = int(rng.integers(1, 5))
    c_out = int(rng.integers(1, 5))
    kernel = tuple(int(v) for v in rng.integers(1, 4, size=3))
    stride = tuple(int(v) for v in rng.integers(1, 3, size=3))
    pad = tuple(int(rng.integers(0, k)) for k in kernel)
    dims = tuple(int(max(k, rng.integers(3, 9))) for k in kernel)
    x = rng.uniform(-1, 1, (n, c_in) + dims).astype(np.float32)
    bound = np.sqrt(3.0 / (c_in * np.prod(kernel)))
    k = (rng.uniform(-1, 1, (c_out, c_in) + kernel) * bound).astype(np.float32)
    return x, k, stride, pad


def conv_oracle_error(cases=200, seed=0) -> float:
    """Worst absolute deviation of conv3d from the f64 direct sum over random cases."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        x, k, stride, pad = random_conv_case(rng)
        got = conv3d(Tensor(x), Tensor(k), stride, pad).data
        ref = conv3d_direct(x, k, stride, pad)
        if got.shape != ref.shape:
            return float("inf")
        worst = max(worst, float(np.max(np.abs(got.astype(np.float64) - ref))))
    return worst


def _distinct(rng, shape, spacing=0.05):
    """Values with pairwise gaps of ``spacing`` so max-pool has no near-ties."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * spacing - n * spacing / 2).reshape(shape).astype(np.float64)


def _tiny_network(rng):
    from proxysign.model import NetConfig, build_resnet3d

    model = build_resnet3d(NetConfig(depth=18, num_classes=3, T=8, width=2, input_size=16), rng)
    for t in model.named_parameters().values():
        t.data = t.data.astype(np.float64)
    return model


def gradient_cases(seed=0):
    """(name, f, inputs, eps) tuples covering each op and a composite network.

    The composite is piecewise smooth, so its check skips coordinates whose
    difference quotient crosses a ReLU or max-pool switch.
    """
    rng = np.random.default_rng(seed)

    def t(a):
        return Tensor(np.asarray(a, dtype=np.float64))

    def u(*shape):
        return rng.uniform(-1, 1, shape)

    labels = np.array([0, 2])
    cases = [
        ("add", lambda a, b: total(mul(add(a, b), add(a, b))), [t(u(2, 3, 4)), t(u(2, 3, 4))], 1e-5),
        ("mul", lambda a, b: total(mul(mul(a, b), a)), [t(u(2, 3, 4)), t(u(2, 3, 4))], 1e-5),
        ("relu", lambda a: total(mul(relu(a), a)), [t(nudge_from_kinks(u(2, 3, 4, 5)))], 1e-5),
        ("global_avg_pool", lambda a: total(mul(global_avg_pool(a), global_avg_pool(a))),
         [t(u(2, 3, 2, 3, 4))], 1e-5),
        ("linear", lambda x, w, b: total(mul(linear(x, w, b), linear(x, w, b))),
         [t(u(3, 5)), t(u(4, 5)), t(u(4))], 1e-5),
        ("softmax_crossentropy", lambda z: softmax_crossentropy(z, labels)[0], [t(3 * u(2, 4))], 1e-5),
    ]
    for stride, pad in (((1, 1, 1), (0, 0, 0)), ((1, 2, 2), (1, 1, 1)), ((2, 1, 2), (0, 2, 1))):
        w = rng.standard_normal((2, 3, 3, 2, 3))
        r = rng.standard_normal(conv3d(Tensor(u(2, 3, 5, 6, 5)), Tensor(w), stride, pad).shape)
        cases.append((f"conv3d s{stride} p{pad}",
                      lambda x, k, s=stride, p=pad, r=r: total(mul(conv3d(x, k, s, p), t(r))),
                      [t(u(2, 3, 5, 6, 5)), t(w)], 1e-5))
    for window, stride, pad in ((2, 2, 0), (3, 2, 1), ((1, 3, 3), (1, 2, 2), (0, 1, 1))):
        x = _distinct(rng, (2, 2, 4, 5, 5))
        r = rng.standard_normal(maxpool3d(Tensor(x), window, stride, pad).shape)
        cases.append((f"maxpool3d w{window} s{stride} p{pad}",
                      lambda a, w=window, s=stride, p=pad, r=r: total(mul(maxpool3d(a, w, s, p), t(r))),
                      [t(x)], 1e-5))

    def bn(x, g, b, r=rng.standard_normal((3, 2, 3, 3, 2))):
        mean, var = np.zeros(2), np.ones(2)
        return total(mul(batchnorm3d(x, g, b, mean, var, training=True), t(r)))

    cases.append(("batchnorm3d", bn, [t(u(3, 2, 3, 3, 2)), t(1 + 0.2 * u(2)), t(u(2))], 1e-5))

    # grad_check perturbs its inputs in place, so the model's own parameter
    # tensors can be passed directly
    model = _tiny_network(rng)
    params = model.named_parameters()
    chosen = ["stem.weight", "stem_bn.gamma", "stage1.0.conv1.weight", "stage2.0.shortcut.conv.weight",
              "stage4.1.bn2.beta", "head.weight", "head.bias"]
    # batch of 4 keeps the last stage's batch norm away from the 2-sample degenerate case
    batch_labels = np.array([0, 1, 2, 0])
    cases.append(("resnet18 composite",
                  lambda xin, *ws: softmax_crossentropy(model.forward(xin, training=True), batch_labels)[0],
                  [t(rng.uniform(0, 1, (4, 3, 8, 16, 16)))] + [params[n] for n in chosen], 1e-6))
    return cases


def run_gradient_checks(seed=0, max_coords=24) -> list[CheckResult]:
    out = []
    for name, f, inputs, eps in gradient_cases(seed):
        t0 = time.perf_counter()
        stats = {}
        err = grad_check(f, inputs, eps=eps, max_coords=max_coords, seed=seed,
                         skip_kinks=name.endswith("composite"), stats=stats)
        if stats["checked"] == 0:
            err = float("nan")
        out.append(CheckResult(f"grad {name}", err, GRAD_TOL, time.perf_counter() - t0))
    return out


def run_selftest(conv_cases=200, seed=0) -> list[CheckResult]:
    t0 = time.perf_counter()
    err = conv_oracle_error(conv_cases, seed)
    results = [CheckResult(f"conv3d oracle ({conv_cases} cases)", err, CONV_TOL, time.perf_counter() - t0)]
    return results + run_gradient_checks(seed)
