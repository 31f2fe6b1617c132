"""Finite-difference verification suite behind the gradcheck command."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import losses as L
from . import maskgen as M
from . import tensor as T
from .config import ModelConfig
from .detector import focal_loss, smooth_l1_loss
from .model import Model
from .tensor import Tensor, finite_diff_check, record_op

RTOL = 1e-4
EPS = 1e-5


@dataclass
class CheckResult:
    name: str
    max_error: float
    passed: bool


def _wide(rng, shape, grad=True, scale=1.0):
    return Tensor(rng.normal(size=shape) * scale, dtype=np.float64, requires_grad=grad)


def _quad(y):
    return T.reduce_sum(T.mul(y, y))


def _op_checks(rng):
    checks = []
    x = _wide(rng, (2, 5, 5))
    w = _wide(rng, (3, 2, 3, 3))
    b = _wide(rng, 3)
    checks.append(("conv2d", lambda: _quad(T.conv2d(x, w, b, stride=1, padding=1)), [x, w, b]))
    x2 = _wide(rng, (2, 6, 6))
    checks.append(("conv2d_stride2", lambda: _quad(T.conv2d(x2, w, b, stride=2, padding=1)),
                   [x2, w, b]))
    xt = _wide(rng, (2, 3, 3))
    wt = _wide(rng, (2, 3, 2, 2))
    checks.append(("transposed_conv2d", lambda: _quad(T.transposed_conv2d(xt, wt, stride=2)),
                   [xt, wt]))
    xf = _wide(rng, 6)
    wf = _wide(rng, (4, 6))
    bf = _wide(rng, 4)
    checks.append(("fully_connected", lambda: _quad(T.fully_connected(xf, wf, bf)), [xf, wf, bf]))
    xe = Tensor(rng.normal(size=9) + 0.5, dtype=np.float64, requires_grad=True)
    checks.append(("relu", lambda: _quad(T.relu(xe)), [xe]))
    checks.append(("sigmoid", lambda: _quad(T.sigmoid(xe)), [xe]))
    a1 = _wide(rng, 5)
    a2 = _wide(rng, 5)
    checks.append(("add", lambda: _quad(T.add(a1, a2)), [a1, a2]))
    checks.append(("mul", lambda: _quad(T.mul(a1, a2)), [a1, a2]))
    checks.append(("scale", lambda: _quad(T.scale(a1, 1.7)), [a1]))
    xr = _wide(rng, 12)
    checks.append(("reshape", lambda: _quad(T.reshape(xr, (3, 4))), [xr]))
    xu = _wide(rng, (2, 3, 3))
    checks.append(("upsample2x", lambda: _quad(T.upsample2x(xu)), [xu]))
    return checks


def _chain_checks(rng):
    checks = []
    tmpl = _wide(rng, (4, 4, 4))
    dynw = _wide(rng, (3, 4, 3, 3))
    checks.append(("instance_conv", lambda: _quad(M.instance_conv(tmpl, dynw)), [tmpl, dynw]))

    cfg = ModelConfig(channels=4, template_channels=9, mask_channels=4, kernel_area=1)
    model = Model.from_config(cfg, seed=0, dtype=np.float64)
    patch = Tensor(rng.normal(size=(1, 4, 3, 3)), dtype=np.float64)
    ind = Tensor(rng.normal(size=(1, 10)), dtype=np.float64)
    target = (rng.uniform(size=(1, 4, 4)) > 0.5).astype(float)
    wmap = L.edge_weight_map(target)
    chain_params = [model.params[k] for k in
                    ("mask.upscale.w", "mask.fc.w", "head.conv0.w", "head.deconv.w",
                     "head.out.w", "head.out.b")]

    def chain():
        logits = model.mask_forward(patch, ind)
        return L.weighted_bce(logits, target, wmap)

    checks.append(("maskgen_chain_weighted_bce", chain, chain_params))
    return checks


def _loss_checks(rng):
    checks = []
    xb = _wide(rng, (4, 4))
    tb = (rng.uniform(size=(4, 4)) > 0.5).astype(float)
    wb = L.edge_weight_map(tb)
    checks.append(("weighted_bce", lambda: L.weighted_bce(xb, tb, wb), [xb]))
    xf = _wide(rng, (6, 2))
    tf = (rng.uniform(size=(6, 2)) > 0.6).astype(float)
    checks.append(("focal_loss", lambda: focal_loss(xf, tf), [xf]))
    xs = _wide(rng, (5, 4), scale=2.0)
    ts = rng.normal(size=(5, 4))
    ps = rng.uniform(size=5) > 0.4
    checks.append(("smooth_l1", lambda: smooth_l1_loss(xs, ts, ps), [xs]))
    return checks


def _faulty_check(rng):
    # negative control: a deliberately corrupted backward must be caught
    x = _wide(rng, 6)

    def faulty_double(t):
        out_data = t.data * 2.0

        def bwd(g):
            if t.requires_grad:
                t.accumulate_grad(g * 2.0 * 1.01)  # corrupted by 1%

        return record_op("faulty_double", (t,), out_data, bwd)

    return ("injected_fault", lambda: _quad(faulty_double(x)), [x])


def run_suite(trials: int = 10, inject_fault: bool = False) -> list[CheckResult]:
    """Every differentiable op and the full mask chain, `trials` times each."""
    results = []
    builders = (_op_checks, _chain_checks, _loss_checks)
    worst: dict[str, float] = {}
    for trial in range(trials):
        rng = np.random.default_rng(1000 + trial)
        for build in builders:
            for name, f, params in build(rng):
                err = finite_diff_check(f, params, eps=EPS)
                worst[name] = max(worst.get(name, 0.0), err)
    for name, err in worst.items():
        results.append(CheckResult(name, err, err <= RTOL))
    if inject_fault:
        rng = np.random.default_rng(99)
        name, f, params = _faulty_check(rng)
        err = finite_diff_check(f, params, eps=EPS)
        results.append(CheckResult(name, err, err <= RTOL))
    return results


def format_results(results: list[CheckResult]) -> str:
    lines = [f"{'check':34s} {'max_rel_err':>12s}  status"]
    for r in results:
        lines.append(f"{r.name:34s} {r.max_error:12.3e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
