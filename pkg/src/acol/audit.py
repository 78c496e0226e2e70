"""Self-checks: gradient audits and the map-equivalence measurement.

Each check returns a :class:`Check` with the measured worst-case error and
the tolerance it is held to. ``run_all`` is what ``acol verify`` prints.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import acol_net as net
from . import tensor_core as tc
from .locmaps import equivalence_report

__all__ = ["Check", "naive_conv2d", "run_all", "CHECKS"]

FD_TOL = 1e-4
EQUIV_TOL = {np.float64: 1e-12, np.float32: 1e-5}


@dataclass
class Check:
    name: str
    error: float
    tol: float
    seconds: float = 0.0
    note: str = ""

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error <= self.tol)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f"  ({self.note})" if self.note else ""
        return f"{status}  {self.name:<22} worst={self.error:.3e}  tol={self.tol:.0e}  {self.seconds:.2f}s{extra}"


def naive_conv2d(x, weight, bias, stride=1, pad=0):
    """Direct six-loop cross-correlation, the reference for the fast path."""
    n, cin, h, w = x.shape
    cout, _, kh, kw = weight.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo), dtype=np.result_type(x, weight))
    for b in range(n):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = bias[o]
                    for c in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[b, c, i * stride + u, j * stride + v] * weight[o, c, u, v]
                    out[b, o, i, j] = acc
    return out


def _projected(fn_out, probe):
    # scalar loss <out, probe>, whose gradient w.r.t. out is the probe
    return lambda: float(np.sum(fn_out() * probe))


def check_conv(seed=0, n_probes=32) -> Check:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k, pad in ((3, 1), (1, 0)):
        x = rng.standard_normal((2, 3, 6, 6))
        p = tc.ConvLayerParams(rng.standard_normal((4, 3, k, k)), rng.standard_normal(4), 1, pad)
        ref = naive_conv2d(x, p.weight, p.bias, 1, pad)
        worst = max(worst, float(np.abs(tc.conv2d_forward(x, p) - ref).max()))
        probe = rng.standard_normal(ref.shape)
        gx, gw, gb = tc.conv2d_backward(x, p, probe)
        f = _projected(lambda: tc.conv2d_forward(x, p), probe)
        worst = max(worst, tc.finite_difference_check(f, [x, p.weight, p.bias], [gx, gw, gb], n_probes=n_probes, seed=seed))
    return Check("conv2d", worst, FD_TOL)


def _away_from_kinks(rng, shape, eps=1e-5):
    x = rng.standard_normal(shape)
    small = np.abs(x) < 10 * eps
    x[small] = np.copysign(20 * eps, x[small] + 1e-300)
    return x


def check_relu(seed=0, n_probes=32) -> Check:
    rng = np.random.default_rng(seed)
    x = _away_from_kinks(rng, (2, 3, 5, 5))
    probe = rng.standard_normal(x.shape)
    g = tc.relu_backward(x, probe)
    return Check("relu", tc.finite_difference_check(_projected(lambda: tc.relu(x), probe), [x], [g], n_probes=n_probes), FD_TOL)


def check_maxpool(seed=0, n_probes=32) -> Check:
    rng = np.random.default_rng(seed)
    # distinct values spaced well above eps, so no window has a near tie
    x = rng.permutation(2 * 3 * 6 * 6).reshape(2, 3, 6, 6) * 1e-2
    out, arg = tc.maxpool2(x)
    probe = rng.standard_normal(out.shape)
    g = tc.maxpool2_backward(probe, arg)
    f = _projected(lambda: tc.maxpool2(x)[0], probe)
    return Check("maxpool2", tc.finite_difference_check(f, [x], [g], n_probes=n_probes), FD_TOL)


def check_gap(seed=0, n_probes=32) -> Check:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 4, 5))
    probe = rng.standard_normal((2, 3))
    g = tc.gap_backward(probe, x.shape)
    return Check("gap", tc.finite_difference_check(_projected(lambda: tc.gap(x), probe), [x], [g], n_probes=n_probes), FD_TOL)


def check_softmax_ce(seed=0, n_probes=32) -> Check:
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((5, 4)) * 3
    labels = rng.integers(0, 4, size=5)
    _, g = tc.softmax_cross_entropy(logits, labels)
    f = lambda: tc.softmax_cross_entropy(logits, labels)[0]  # noqa: E731
    return Check("softmax_ce", tc.finite_difference_check(f, [logits], [g], n_probes=n_probes), FD_TOL)


def check_full_network(seed=0, n_probes=32, delta=0.6) -> Check:
    """Every parameter tensor of a small two-branch network, erase mask frozen."""
    params = net.init_params(
        num_categories=3, backbone_widths=(4, 6, 8), branch_width=5, seed=seed + 1, dtype=np.float64
    )
    rng = np.random.default_rng(seed)
    x = rng.random((2, 3, 16, 16)) - 0.5
    y = np.array([0, 2])
    rec = net.acol_forward(x, params, delta, y)
    mask = rec.mask.copy()
    _, grads = net.acol_loss_and_grads(rec, y, params)
    named = params.named_tensors()

    def loss():
        r = net.acol_forward(x, params, delta, y, mask=mask)
        return tc.softmax_cross_entropy(r.logits_a, y)[0] + tc.softmax_cross_entropy(r.logits_b, y)[0]

    worst = tc.finite_difference_check(
        loss, list(named.values()), [grads[k] for k in named], n_probes=n_probes, seed=seed
    )
    return Check("full_network", worst, FD_TOL, note=f"{len(named)} tensors, {int(mask.sum())} erased cells")


def _equivalence(dtype) -> Check:
    r = equivalence_report(seed=0, trials=100, k=64, c=10, h=8, dtype=dtype)
    name = "equivalence_f64" if dtype is np.float64 else "equivalence_f32"
    worst = max(r["max_logit_diff"], r["max_map_diff"])
    return Check(name, worst, EQUIV_TOL[dtype], note=f"logits {r['max_logit_diff']:.1e}, maps {r['max_map_diff']:.1e}")


CHECKS = {
    "conv2d": check_conv,
    "relu": check_relu,
    "maxpool2": check_maxpool,
    "gap": check_gap,
    "softmax_ce": check_softmax_ce,
    "full_network": check_full_network,
    "equivalence_f64": lambda: _equivalence(np.float64),
    "equivalence_f32": lambda: _equivalence(np.float32),
}


def run_all(names=None) -> list[Check]:
    out = []
    for name in names or CHECKS:
        t = time.perf_counter()
        c = CHECKS[name]()
        c.seconds = time.perf_counter() - t
        out.append(c)
    return out
