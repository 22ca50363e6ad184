"""TCN front end, cascaded Mamba blocks and the bounded valence/arousal head.

Layout conventions: model inputs and outputs are time-major ``[B, T, C]``.
The TCN works channel-major ``[B, C, T]`` internally and transposes back
before the Mamba stack.

Each ``*_forward`` returns ``(output, cache)``; the matching ``*_backward``
takes the upstream gradient and the cache, accumulates parameter gradients
into ``Tensor.grad`` and returns the gradient w.r.t. its input.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as tc
from .errors import ConfigError, ShapeError
from .scan import discretize, discretize_backward, scan_backward, ssm_scan
from .tensor import Tensor


@dataclass(frozen=True)
class TcnConfig:
    in_dim: int = 1024
    hidden_dim: int = 256
    layers: int = 4
    kernel_size: int = 15
    dilations: tuple[int, ...] = (1, 2, 4, 8)
    dropout: float = 0.3

    def __post_init__(self):
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        if self.layers != len(self.dilations):
            raise ConfigError(f"TCN has {self.layers} layers but {len(self.dilations)} dilations")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd and >= 1, got {self.kernel_size}")
        if self.in_dim < 1 or self.hidden_dim < 1 or self.layers < 1 or min(self.dilations) < 1:
            raise ConfigError("TCN dimensions and dilations must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def receptive_field(self) -> int:
        return 1 + sum((self.kernel_size - 1) * d for d in self.dilations)


@dataclass(frozen=True)
class MambaConfig:
    d_model: int = 256
    n_layers: int = 4
    state_dim: int = 8
    conv_width: int = 4
    expand: int = 1

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 1:
                raise ConfigError(f"MambaConfig.{name} must be positive, got {value}")

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_model


# ---------------------------------------------------------------------------
# parameters


def _uniform(rng, shape, bound, dtype=np.float32):
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype))


def init_params(tcn: TcnConfig, mamba: MambaConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, Tensor]:
    """Fresh parameters for the full model, keyed by stable dotted names.

    Conv and projection weights are uniform in +-1/sqrt(fan_in). Each Mamba
    block's output projection starts at zero, so every block is initially
    the identity map. ``A_log`` rows are ``ln(1..N)`` and the step-size
    bias is the inverse softplus of log-uniform draws from [1e-3, 1e-1].
    """
    if mamba.d_model != tcn.hidden_dim:
        raise ConfigError(f"Mamba d_model {mamba.d_model} != TCN hidden_dim {tcn.hidden_dim}")
    h, k = tcn.hidden_dim, tcn.kernel_size
    p: dict[str, Tensor] = {}
    c_in = tcn.in_dim
    for layer in range(tcn.layers):
        p[f"tcn.{layer}.weight"] = _uniform(rng, (h, c_in, k), 1 / math.sqrt(c_in * k), dtype)
        p[f"tcn.{layer}.bias"] = Tensor(np.zeros(h, dtype))
        if layer == 0:
            p["tcn.res.weight"] = _uniform(rng, (h, c_in, 1), 1 / math.sqrt(c_in), dtype)
            p["tcn.res.bias"] = Tensor(np.zeros(h, dtype))
        c_in = h

    d, e, n = mamba.d_model, mamba.d_inner, mamba.state_dim
    for layer in range(mamba.n_layers):
        pre = f"mamba.{layer}."
        p[pre + "norm.weight"] = Tensor(np.ones(d, dtype))
        p[pre + "norm.bias"] = Tensor(np.zeros(d, dtype))
        p[pre + "in_proj"] = _uniform(rng, (d, 2 * e), 1 / math.sqrt(d), dtype)
        p[pre + "conv.weight"] = _uniform(rng, (e, mamba.conv_width), 1 / math.sqrt(mamba.conv_width), dtype)
        p[pre + "conv.bias"] = Tensor(np.zeros(e, dtype))
        p[pre + "dt.weight"] = _uniform(rng, (e, e), 0.1 / math.sqrt(e), dtype)
        dt0 = np.exp(rng.uniform(math.log(1e-3), math.log(1e-1), size=e))
        p[pre + "dt.bias"] = Tensor(tc.inverse_softplus(dt0).astype(dtype))
        p[pre + "B.weight"] = _uniform(rng, (e, n), 1 / math.sqrt(e), dtype)
        p[pre + "C.weight"] = _uniform(rng, (e, n), 1 / math.sqrt(e), dtype)
        p[pre + "A_log"] = Tensor(np.tile(np.log(np.arange(1, n + 1, dtype=np.float64)), (e, 1)).astype(dtype))
        p[pre + "D"] = Tensor(np.ones(e, dtype))
        p[pre + "out_proj"] = Tensor(np.zeros((e, d), dtype))

    p["norm_f.weight"] = Tensor(np.ones(d, dtype))
    p["norm_f.bias"] = Tensor(np.zeros(d, dtype))
    p["head.weight"] = _uniform(rng, (d, 2), 1 / math.sqrt(d), dtype)
    p["head.bias"] = Tensor(np.zeros(2, dtype))
    return p


def param_shapes(tcn: TcnConfig, mamba: MambaConfig) -> dict[str, tuple[int, ...]]:
    rng = np.random.default_rng(0)
    return {name: t.shape for name, t in init_params(tcn, mamba, rng).items()}


# ---------------------------------------------------------------------------
# TCN


def tcn_forward(f: np.ndarray, params, cfg: TcnConfig, training=False, rng=None, dropout=None):
    """``f`` [B, T, in_dim] -> ``g`` [B, T, hidden].

    Each layer: dilated causal conv -> ReLU -> dropout, added to a residual
    path (a 1x1 conv on the first layer, identity afterwards). ``dropout``
    overrides the configured rate.
    """
    rate = cfg.dropout if dropout is None else dropout
    if f.shape[-1] != cfg.in_dim:
        raise ShapeError(f"TCN expects feature width {cfg.in_dim}, got input of shape {f.shape}")
    h = np.ascontiguousarray(f.transpose(0, 2, 1))
    caches = []
    for layer, dil in enumerate(cfg.dilations):
        w = params[f"tcn.{layer}.weight"].data
        pre = tc.conv1d_causal(h, w, params[f"tcn.{layer}.bias"].data, dil)
        mask = tc.dropout_mask(pre.shape, rate, training, rng, dtype=pre.dtype.type)
        act = tc.relu(pre)
        if mask is not None:
            act = act * mask
        if layer == 0:
            res = tc.conv1d_causal(h, params["tcn.res.weight"].data, params["tcn.res.bias"].data, 1)
        else:
            res = h
        caches.append((h, pre, mask))
        h = res + act
    return np.ascontiguousarray(h.transpose(0, 2, 1)), caches


def tcn_backward(dg: np.ndarray, caches, params, cfg: TcnConfig):
    dh = np.ascontiguousarray(dg.transpose(0, 2, 1))
    for layer in reversed(range(cfg.layers)):
        h_in, pre, mask = caches[layer]
        dact = dh if mask is None else dh * mask
        dpre = tc.relu_backward(dact, pre)
        dx, dw, db = tc.conv1d_causal_backward(dpre, h_in, params[f"tcn.{layer}.weight"].data, cfg.dilations[layer])
        params[f"tcn.{layer}.weight"].accumulate(dw)
        params[f"tcn.{layer}.bias"].accumulate(db)
        if layer == 0:
            dres, dw, db = tc.conv1d_causal_backward(dh, h_in, params["tcn.res.weight"].data, 1)
            params["tcn.res.weight"].accumulate(dw)
            params["tcn.res.bias"].accumulate(db)
        else:
            dres = dh
        dh = dx + dres
    return dh.transpose(0, 2, 1)


# ---------------------------------------------------------------------------
# Mamba block


def _sum_to(arr: np.ndarray, shape) -> np.ndarray:
    lead = arr.ndim - len(shape)
    out = arr.sum(axis=tuple(range(lead))) if lead else arr
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and out.shape[i] != 1)
    return out.sum(axis=axes, keepdims=True) if axes else out


def mamba_block_forward(x: np.ndarray, params, prefix: str, cfg: MambaConfig):
    """Pre-norm residual selective-SSM block on ``x`` [B, T, d_model].

    norm -> input projection into an SSM branch and a gate branch; the SSM
    branch runs a depthwise causal conv, SiLU, then the selective scan with
    input-dependent step size, B and C; the result is gated by SiLU(gate),
    projected back to d_model and added to the input.
    """
    p = {k[len(prefix) :]: v.data for k, v in params.items() if k.startswith(prefix)}
    if x.shape[-1] != cfg.d_model:
        raise ShapeError(f"{prefix}: expected width {cfg.d_model}, got input of shape {x.shape}")
    e = cfg.d_inner
    u = tc.layer_norm(x, p["norm.weight"], p["norm.bias"])
    xz = tc.matmul(u, p["in_proj"])
    xs, z = xz[..., :e], xz[..., e:]
    xc = tc.depthwise_conv1d_causal(xs, p["conv.weight"], p["conv.bias"])
    xa = tc.silu(xc)
    dt_raw = tc.matmul(xa, p["dt.weight"]) + p["dt.bias"]
    delta = tc.softplus(dt_raw)
    bm = tc.matmul(xa, p["B.weight"])
    cm = tc.matmul(xa, p["C.weight"])
    a = -np.exp(p["A_log"])
    b_in = bm[..., None, :] * xa[..., :, None]
    a_bar, bx_bar = discretize(delta[..., None], a, b_in)
    y, h = ssm_scan(a_bar, bx_bar, cm, p["D"], xa, return_states=True)
    sz = tc.silu(z)
    merged = y * sz
    out = x + tc.matmul(merged, p["out_proj"])
    cache = dict(x=x, u=u, xs=xs, z=z, xc=xc, xa=xa, dt_raw=dt_raw, delta=delta, bm=bm, cm=cm,
                 a=a, b_in=b_in, a_bar=a_bar, h=h, y=y, sz=sz, merged=merged)
    return out, cache


def mamba_block_backward(dout: np.ndarray, cache, params, prefix: str, cfg: MambaConfig):
    c = cache
    p = {k[len(prefix) :]: v.data for k, v in params.items() if k.startswith(prefix)}

    def acc(name, g):
        params[prefix + name].accumulate(np.asarray(g, dtype=params[prefix + name].data.dtype))

    dmerged, dw = tc.matmul_backward(dout, c["merged"], p["out_proj"])
    acc("out_proj", dw)
    dy = dmerged * c["sz"]
    dz = tc.silu_backward(dmerged * c["y"], c["z"])

    da_bar, dbx_bar, dcm, dd, dxa = scan_backward(dy, c["a_bar"], c["cm"], p["D"], c["xa"], c["h"])
    acc("D", dd)
    ddelta, da, db_in = discretize_backward(da_bar, dbx_bar, c["delta"][..., None], c["a"], c["b_in"])
    acc("A_log", _sum_to(da, c["a"].shape) * c["a"])
    ddelta = ddelta.sum(axis=-1)
    dbm = np.einsum("...dn,...d->...n", db_in, c["xa"])
    dxa = dxa + np.einsum("...dn,...n->...d", db_in, c["bm"])

    ddt_raw = tc.softplus_backward(ddelta, c["dt_raw"])
    acc("dt.bias", ddt_raw.reshape(-1, ddt_raw.shape[-1]).sum(axis=0))
    for name, grad in (("dt.weight", ddt_raw), ("B.weight", dbm), ("C.weight", dcm)):
        dx_part, dw = tc.matmul_backward(grad, c["xa"], p[name])
        acc(name, dw)
        dxa = dxa + dx_part

    dxc = tc.silu_backward(dxa, c["xc"])
    dxs, dk, dkb = tc.depthwise_conv1d_causal_backward(dxc, c["xs"], p["conv.weight"])
    acc("conv.weight", dk)
    acc("conv.bias", dkb)

    dxz = np.concatenate([dxs, dz], axis=-1)
    du, dw = tc.matmul_backward(dxz, c["u"], p["in_proj"])
    acc("in_proj", dw)
    dx_norm, dg, dbeta = tc.layer_norm_backward(du, c["x"], p["norm.weight"])
    acc("norm.weight", dg)
    acc("norm.bias", dbeta)
    return (dout + dx_norm).astype(dout.dtype)


# ---------------------------------------------------------------------------
# head


def head_forward(m: np.ndarray, params):
    """Affine map to two outputs then tanh; column 0 is valence, 1 is arousal."""
    w, b = params["head.weight"].data, params["head.bias"].data
    out = np.tanh(tc.matmul(m, w) + b)
    return out, (m, out)


def head_backward(dout: np.ndarray, cache, params):
    m, out = cache
    dpre = tc.tanh_backward(dout, out)
    dm, dw = tc.matmul_backward(dpre, m, params["head.weight"].data)
    params["head.weight"].accumulate(dw.astype(params["head.weight"].data.dtype))
    params["head.bias"].accumulate(dpre.reshape(-1, 2).sum(axis=0).astype(params["head.bias"].data.dtype))
    return dm


# ---------------------------------------------------------------------------
# full model


@dataclass
class MambaVA:
    """TCN -> Mamba blocks -> final norm -> tanh head."""

    tcn: TcnConfig
    mamba: MambaConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def create(cls, tcn: TcnConfig, mamba: MambaConfig, rng: np.random.Generator, dtype=np.float32) -> "MambaVA":
        return cls(tcn, mamba, init_params(tcn, mamba, rng, dtype))

    def __post_init__(self):
        if self.params:
            self.check_params(self.params)

    def check_params(self, params):
        expected = param_shapes(self.tcn, self.mamba)
        for name, shape in expected.items():
            if name in params and params[name].shape != shape:
                raise ShapeError(f"tensor {name!r} has shape {params[name].shape}, config expects {shape}")
        missing = set(expected) - set(params)
        if missing:
            raise ShapeError(f"missing tensors: {sorted(missing)}")
        extra = set(params) - set(expected)
        if extra:
            raise ShapeError(f"unexpected tensors: {sorted(extra)}")

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()

    def forward(self, f: np.ndarray, training: bool = False, rng: np.random.Generator | None = None, dropout=None):
        """``f`` [B, T, in_dim] (or [T, in_dim]) -> predictions [B, T, 2] and a cache."""
        squeeze = f.ndim == 2
        if squeeze:
            f = f[None]
        if f.ndim != 3 or f.shape[1] < 1:
            raise ShapeError(f"model input must be [B, T, in_dim] with T >= 1, got {f.shape}")
        f = f.astype(self.params["head.weight"].data.dtype, copy=False)
        g, tcn_cache = tcn_forward(f, self.params, self.tcn, training, rng, dropout)
        m = g
        block_caches = []
        for layer in range(self.mamba.n_layers):
            m, bc = mamba_block_forward(m, self.params, f"mamba.{layer}.", self.mamba)
            block_caches.append(bc)
        mn = tc.layer_norm(m, self.params["norm_f.weight"].data, self.params["norm_f.bias"].data)
        out, head_cache = head_forward(mn, self.params)
        cache = (squeeze, tcn_cache, block_caches, m, head_cache)
        return (out[0] if squeeze else out), cache

    def backward(self, dout: np.ndarray, cache) -> np.ndarray:
        squeeze, tcn_cache, block_caches, m, head_cache = cache
        if squeeze:
            dout = dout[None]
        dmn = head_backward(dout, head_cache, self.params)
        dm, dg, db = tc.layer_norm_backward(dmn, m, self.params["norm_f.weight"].data)
        self.params["norm_f.weight"].accumulate(dg)
        self.params["norm_f.bias"].accumulate(db)
        for layer in reversed(range(self.mamba.n_layers)):
            dm = mamba_block_backward(dm, block_caches[layer], self.params, f"mamba.{layer}.", self.mamba)
        df = tcn_backward(dm, tcn_cache, self.params, self.tcn)
        return df[0] if squeeze else df

    def predict(self, f: np.ndarray) -> np.ndarray:
        return self.forward(f, training=False)[0]

    def astype(self, dtype) -> "MambaVA":
        return MambaVA(self.tcn, self.mamba, {k: Tensor(v.data.astype(dtype)) for k, v in self.params.items()})

    def config_items(self) -> dict[str, str]:
        items = {f"tcn.{k}": v for k, v in asdict(self.tcn).items()}
        items.update({f"mamba.{k}": v for k, v in asdict(self.mamba).items()})
        items["tcn.dilations"] = ",".join(str(d) for d in self.tcn.dilations)
        return {k: str(v) for k, v in items.items()}


def configs_from_items(items: dict[str, str]) -> tuple[TcnConfig, MambaConfig]:
    """Inverse of :meth:`MambaVA.config_items`; ignores keys outside ``tcn.`` and ``mamba.``."""
    try:
        tcn = TcnConfig(
            in_dim=int(items["tcn.in_dim"]),
            hidden_dim=int(items["tcn.hidden_dim"]),
            layers=int(items["tcn.layers"]),
            kernel_size=int(items["tcn.kernel_size"]),
            dilations=tuple(int(d) for d in items["tcn.dilations"].split(",")),
            dropout=float(items["tcn.dropout"]),
        )
        mamba = MambaConfig(**{k: int(items[f"mamba.{k}"]) for k in MambaConfig.__dataclass_fields__})
    except KeyError as exc:
        raise ConfigError(f"model config block is missing key {exc.args[0]!r}") from None
    return tcn, mamba
