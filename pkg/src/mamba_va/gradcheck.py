"""Central finite-difference checks for every differentiable op.

Each check builds a random float64 instance with every dimension <= 8,
contracts the op's output with a fixed random cotangent to get a scalar,
and compares the hand-written backward against central differences with
step ``h = 1e-3``. The reported error for one input is

    max |analytic - numeric| / max(max |analytic|, max |numeric|, 1e-12)

and a check's error is the worst over its inputs.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import scan as sc
from . import tensor as tc
from .layers import MambaConfig, MambaVA, TcnConfig, mamba_block_backward, mamba_block_forward

STEP = 1e-3


def numerical_grad(f, x: np.ndarray, h: float = STEP) -> np.ndarray:
    """d f / d x by central differences; ``x`` is perturbed in place and restored."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def rel_error(analytic, numeric) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0), np.abs(n).max(initial=0), 1e-12)
    return float(np.abs(a - n).max(initial=0) / scale)


def _check(forward, backward, inputs: dict[str, np.ndarray], rng) -> float:
    """``forward(**inputs) -> out``; ``backward(dout, **inputs) -> dict of grads``."""
    cot = rng.standard_normal(np.shape(forward(**inputs)))
    grads = backward(cot, **inputs)

    def scalar():
        return float(np.sum(forward(**inputs) * cot))

    return max(rel_error(grads[name], numerical_grad(scalar, inputs[name])) for name in grads)


# individual checks ----------------------------------------------------------


def check_matmul(rng):
    inputs = {"a": rng.standard_normal((2, 3, 4)), "b": rng.standard_normal((4, 5))}
    return _check(
        lambda a, b: tc.matmul(a, b),
        lambda d, a, b: dict(zip("ab", tc.matmul_backward(d, a, b))),
        inputs, rng,
    )


def check_conv1d_causal(rng):
    inputs = {"x": rng.standard_normal((2, 3, 8)), "kernel": rng.standard_normal((4, 3, 3)), "bias": rng.standard_normal(4)}
    return _check(
        lambda x, kernel, bias: tc.conv1d_causal(x, kernel, bias, 2),
        lambda d, x, kernel, bias: dict(zip(("x", "kernel", "bias"), tc.conv1d_causal_backward(d, x, kernel, 2))),
        inputs, rng,
    )


def check_depthwise_conv(rng):
    inputs = {"x": rng.standard_normal((2, 7, 5)), "kernel": rng.standard_normal((5, 4)), "bias": rng.standard_normal(5)}
    return _check(
        lambda x, kernel, bias: tc.depthwise_conv1d_causal(x, kernel, bias),
        lambda d, x, kernel, bias: dict(zip(("x", "kernel", "bias"), tc.depthwise_conv1d_causal_backward(d, x, kernel))),
        inputs, rng,
    )


def check_layer_norm(rng):
    inputs = {"x": rng.standard_normal((3, 6)), "gamma": rng.standard_normal(6), "beta": rng.standard_normal(6)}
    return _check(
        lambda x, gamma, beta: tc.layer_norm(x, gamma, beta),
        lambda d, x, gamma, beta: dict(zip(("x", "gamma", "beta"), tc.layer_norm_backward(d, x, gamma))),
        inputs, rng,
    )


def _elementwise(fwd, bwd, rng, from_output=False):
    inputs = {"x": rng.uniform(-3, 3, size=(4, 5))}

    def backward(d, x):
        return {"x": bwd(d, fwd(x) if from_output else x)}

    return _check(lambda x: fwd(x), backward, inputs, rng)


def check_silu(rng):
    return _elementwise(tc.silu, tc.silu_backward, rng)


def check_softplus(rng):
    return _elementwise(tc.softplus, tc.softplus_backward, rng)


def check_tanh(rng):
    return _elementwise(tc.tanh, tc.tanh_backward, rng, from_output=True)


def check_discretize(rng):
    inputs = {
        "delta": rng.uniform(0.05, 1.0, size=(3, 4, 1)),
        "a": -rng.uniform(0.5, 4.0, size=(4, 2)),
        "b": rng.standard_normal((3, 4, 2)),
    }

    def forward(delta, a, b):
        a_bar, b_bar = sc.discretize(delta, a, b)
        return np.stack([a_bar * np.ones_like(b_bar), b_bar])

    def backward(d, delta, a, b):
        dd, da, db = sc.discretize_backward(d[0], d[1], delta, a, b)
        return {"delta": dd.sum(axis=-1, keepdims=True), "a": da.sum(axis=0), "b": db}

    return _check(forward, backward, inputs, rng)


def check_scan(rng):
    t, d, n = 5, 2, 3
    inputs = {
        "a_bar": rng.uniform(0.2, 0.95, size=(t, d, n)),
        "bx_bar": rng.standard_normal((t, d, n)),
        "c": rng.standard_normal((t, n)),
        "d_skip": rng.standard_normal(d),
        "x": rng.standard_normal((t, d)),
    }

    def backward(dy, a_bar, bx_bar, c, d_skip, x):
        _, h = sc.ssm_scan_sequential(a_bar, bx_bar, c, d_skip, x, return_states=True)
        grads = sc.scan_backward(dy, a_bar, c, d_skip, x, h)
        return dict(zip(("a_bar", "bx_bar", "c", "d_skip", "x"), grads))

    return _check(sc.ssm_scan_sequential, backward, inputs, rng)


def _tiny_model(rng, in_dim=4, hidden=8, state=2, tcn_layers=1, mamba_layers=1, w=8):
    tcn = TcnConfig(in_dim=in_dim, hidden_dim=hidden, layers=tcn_layers, kernel_size=3,
                    dilations=tuple(2**i for i in range(tcn_layers)), dropout=0.0)
    mamba = MambaConfig(d_model=hidden, n_layers=mamba_layers, state_dim=state, conv_width=4, expand=1)
    model = MambaVA.create(tcn, mamba, rng, dtype=np.float64)
    # zero-initialised projections make some gradients vanish; randomise them
    for name, t in model.params.items():
        if name.endswith(("out_proj", "bias")) and not name.endswith("dt.bias"):
            t.data[...] = rng.standard_normal(t.shape) * 0.3
    return model


def check_mamba_block(rng):
    model = _tiny_model(rng, hidden=6, state=3)
    cfg, prefix = model.mamba, "mamba.0."
    params = {k: v for k, v in model.params.items() if k.startswith(prefix)}
    x = rng.standard_normal((2, 5, cfg.d_model))
    cot = rng.standard_normal(x.shape)

    def scalar():
        return float(np.sum(mamba_block_forward(x, params, prefix, cfg)[0] * cot))

    for t in params.values():
        t.zero_grad()
    _, cache = mamba_block_forward(x, params, prefix, cfg)
    dx = mamba_block_backward(cot, cache, params, prefix, cfg)
    errs = [rel_error(dx, numerical_grad(scalar, x))]
    errs += [rel_error(t.grad, numerical_grad(scalar, t.data)) for t in params.values()]
    return max(errs)


def check_ccc_loss(rng):
    from .training import ccc_loss

    target = rng.uniform(-1, 1, size=(3, 6, 2))
    mask = rng.random((3, 6)) > 0.2
    inputs = {"pred": rng.uniform(-1, 1, size=(3, 6, 2))}

    def forward(pred):
        return np.array(ccc_loss(pred, target, mask)[0])

    def backward(d, pred):
        return {"pred": float(d) * ccc_loss(pred, target, mask)[1]}

    return _check(forward, backward, inputs, rng)


def check_model(rng):
    """CCC loss composed with a tiny full model (TCN, Mamba block, norm, head)."""
    from .training import ccc_loss

    model = _tiny_model(rng)
    f = rng.standard_normal((1, 8, model.tcn.in_dim))
    target = rng.uniform(-0.9, 0.9, size=(1, 8, 2))

    def scalar():
        return ccc_loss(model.forward(f)[0], target)[0]

    model.zero_grad()
    pred, cache = model.forward(f)
    df = model.backward(ccc_loss(pred, target)[1], cache)
    errs = [rel_error(df, numerical_grad(scalar, f))]
    errs += [rel_error(t.grad, numerical_grad(scalar, t.data)) for t in model.params.values()]
    return max(errs)


CHECKS = {
    "matmul": check_matmul,
    "conv1d_causal": check_conv1d_causal,
    "depthwise_conv1d_causal": check_depthwise_conv,
    "layer_norm": check_layer_norm,
    "silu": check_silu,
    "softplus": check_softplus,
    "tanh": check_tanh,
    "discretize": check_discretize,
    "ssm_scan": check_scan,
    "mamba_block": check_mamba_block,
    "ccc_loss": check_ccc_loss,
    "model": check_model,
}

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance


def run_checks(names=None, seed: int = 0) -> list[CheckResult]:
    results = []
    for name in names or CHECKS:
        rng = np.random.default_rng([seed, list(CHECKS).index(name)])
        start = time.perf_counter()
        err = CHECKS[name](rng)
        results.append(CheckResult(name, err, TOLERANCE, time.perf_counter() - start))
    return results

