"""Selective state-space recurrence: discretization and two scan evaluators.

The recurrence, per (channel d, state n) lane and starting from h = 0, is

    h[t] = a_bar[t] * h[t-1] + bx_bar[t]
    y[t, d] = sum_n c[t, n] * h[t, d, n] + d_skip[d] * x[t, d]

``ssm_scan_sequential`` walks it step by step and serves as the oracle for
``ssm_scan_parallel``, which evaluates the same thing as a work-efficient
(up-sweep / down-sweep) prefix scan over the associative operator

    (a1, b1) o (a2, b2) = (a2 * a1, a2 * b1 + b2).

Both evaluators run the recurrence in float64 and return the input dtype.
Arrays may carry any number of leading batch axes.
"""

from __future__ import annotations

import time

import numpy as np

from .errors import ShapeError


def discretize(delta, a, b):
    """Zero-order-hold discretization of ``dh/dt = a h + b u``.

    Returns ``(a_bar, b_bar)`` with ``a_bar = exp(delta a)`` and
    ``b_bar = (exp(delta a) - 1) / a * b``; at ``a == 0`` the gain takes its
    limit ``delta * b``. Works elementwise with broadcasting.
    """
    delta = np.asarray(delta)
    a = np.asarray(a)
    da = delta * a
    a_bar = np.exp(da)
    return a_bar, zoh_gain(delta, a) * b


def zoh_gain(delta, a):
    """``expm1(delta a) / a``, continuous through ``a = 0``."""
    delta = np.asarray(delta)
    a = np.asarray(a)
    zero = a == 0
    if not zero.any():
        return np.expm1(delta * a) / a
    safe_a = np.where(zero, 1, a)
    return np.where(zero, delta, np.expm1(delta * a) / safe_a)


def discretize_backward(da_bar, db_bar, delta, a, b):
    """Gradients of :func:`discretize` w.r.t. ``(delta, a, b)``.

    Results are in the broadcast shape of the inputs; callers reduce them
    to their parameter shapes.
    """
    delta = np.asarray(delta)
    a = np.asarray(a)
    em1 = np.expm1(delta * a)
    e = em1 + 1
    zero = a == 0
    if zero.any():
        safe_a = np.where(zero, 1, a)
        gain = np.where(zero, delta, em1 / safe_a)
        dgain_da = np.where(zero, 0.5 * delta * delta, (delta * e - gain) / safe_a)
    else:
        gain = em1 / a
        dgain_da = (delta * e - gain) / a
    db_b = db_bar * b
    ddelta = (da_bar * a + db_b) * e
    da = da_bar * delta * e + db_b * dgain_da
    db = db_bar * gain
    return ddelta, da, db


# ---------------------------------------------------------------------------
# first-order linear recurrences along axis 0


def combine(p, q):
    """The scan operator: apply element ``p`` first, then ``q``."""
    a1, b1 = p
    a2, b2 = q
    return a2 * a1, a2 * b1 + b2


def linear_scan_sequential(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``h[t] = a[t] h[t-1] + b[t]`` along axis 0 with ``h[-1] = 0``."""
    h = np.empty(np.broadcast_shapes(a.shape, b.shape), dtype=np.float64)
    state = np.zeros(h.shape[1:], dtype=np.float64)
    for t in range(h.shape[0]):
        state = a[t] * state + b[t]
        h[t] = state
    return h


def linear_scan_parallel(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Same contract as :func:`linear_scan_sequential`, as a Blelloch scan.

    The time axis is padded to a power of two with identity elements
    ``(1, 0)``. The up-sweep builds partial products in place; the
    down-sweep turns them into exclusive prefixes, whose ``b`` part is
    exactly ``h[t-1]``. Each tree level is one vectorized update over all
    lanes, and the combination order is fixed by the tree shape.

    The down-sweep only tracks the ``b`` half of each prefix: combining a
    parent prefix with a left subtree reads the parent's ``b`` and the
    subtree's up-sweep ``a``, never the parent's ``a``.
    """
    shape = np.broadcast_shapes(a.shape, b.shape)
    n = shape[0]
    size = 1 << max(0, (n - 1).bit_length())
    pa = np.ones((size,) + shape[1:], dtype=np.float64)
    pb = np.zeros((size,) + shape[1:], dtype=np.float64)
    pa[:n] = a
    pb[:n] = b

    step = 1
    while step < size:
        left = slice(step - 1, size, 2 * step)
        right = slice(2 * step - 1, size, 2 * step)
        # combine((a_l, b_l), (a_r, b_r)) = (a_r a_l, a_r b_l + b_r), written in place
        pb[right] += pa[right] * pb[left]
        pa[right] *= pa[left]
        step *= 2

    pb[size - 1] = 0.0
    step = size // 2
    while step >= 1:
        left = slice(step - 1, size, 2 * step)
        right = slice(2 * step - 1, size, 2 * step)
        child_b = pb[left].copy()
        pb[left] = pb[right]
        pb[right] *= pa[left]
        pb[right] += child_b
        step //= 2

    out = pb[:n]
    out *= a
    out += b
    return out


# ---------------------------------------------------------------------------
# selective scan


def _check_scan(a_bar, bx_bar, c, d_skip, x):
    if a_bar.ndim < 3 or a_bar.shape != bx_bar.shape:
        raise ShapeError(f"a_bar {a_bar.shape} and bx_bar {bx_bar.shape} must match as [..., T, D, N]")
    lead, (t, d, n) = a_bar.shape[:-3], a_bar.shape[-3:]
    if c.shape != lead + (t, n):
        raise ShapeError(f"c has shape {c.shape}, expected {lead + (t, n)}")
    if d_skip.shape != (d,):
        raise ShapeError(f"d_skip has shape {d_skip.shape}, expected {(d,)}")
    if x.shape != lead + (t, d):
        raise ShapeError(f"x has shape {x.shape}, expected {lead + (t, d)}")


def _readout(h, c, d_skip, x):
    return np.einsum("...tdn,...tn->...td", h, c) + d_skip * x


def _time_first(arr):
    return np.moveaxis(arr, -3, 0)


def _scan(linear_scan, a_bar, bx_bar, c, d_skip, x, return_states):
    _check_scan(a_bar, bx_bar, c, d_skip, x)
    out_dtype = np.result_type(a_bar, bx_bar, c, x)
    h = linear_scan(_time_first(a_bar.astype(np.float64)), _time_first(bx_bar.astype(np.float64)))
    h = np.moveaxis(h, 0, -3)
    y = _readout(h, c.astype(np.float64), d_skip.astype(np.float64), x.astype(np.float64)).astype(out_dtype)
    if return_states:
        return y, h.astype(out_dtype)
    return y


def ssm_scan_sequential(a_bar, bx_bar, c, d_skip, x, return_states=False):
    """Selective scan, one time step at a time.

    Shapes: ``a_bar, bx_bar`` [..., T, D, N]; ``c`` [..., T, N];
    ``d_skip`` [D]; ``x`` [..., T, D]. Returns ``y`` [..., T, D], plus the
    hidden states [..., T, D, N] when ``return_states`` is set.
    """
    return _scan(linear_scan_sequential, a_bar, bx_bar, c, d_skip, x, return_states)


def ssm_scan_parallel(a_bar, bx_bar, c, d_skip, x, return_states=False):
    """Selective scan via the parallel prefix scan; same contract as the sequential one."""
    return _scan(linear_scan_parallel, a_bar, bx_bar, c, d_skip, x, return_states)


# Below this many independent lanes per step, per-step interpreter overhead
# dominates the sequential loop and the log-depth tree wins; above it the
# single streaming pass of the sequential loop is cheaper in numpy.
PARALLEL_MAX_LANES = 256


def choose_variant(a_bar_shape) -> str:
    lanes = int(np.prod(a_bar_shape)) // a_bar_shape[-3]
    return "parallel" if lanes < PARALLEL_MAX_LANES else "sequential"


def ssm_scan(a_bar, bx_bar, c, d_skip, x, return_states=False, variant="auto"):
    """Dispatch to one of the two scan evaluators; ``auto`` picks by lane count."""
    if variant == "auto":
        variant = choose_variant(a_bar.shape)
    return SCAN_VARIANTS[variant](a_bar, bx_bar, c, d_skip, x, return_states)


def scan_backward(dy, a_bar, c, d_skip, x, h, variant="auto"):
    """Reverse-mode gradients of the selective scan.

    ``h`` are the hidden states retained from the forward pass. The state
    adjoint obeys its own linear recurrence running backwards in time,

        lam[t] = c[t] * dy[t] + a_bar[t+1] * lam[t+1],

    which is evaluated with the same scan machinery on reversed arrays.
    Returns ``(da_bar, dbx_bar, dc, dd_skip, dx)``.
    """
    out_dtype = np.result_type(dy, a_bar, c, x)
    dy64 = dy.astype(np.float64)
    g = dy64[..., :, :, None] * c.astype(np.float64)[..., :, None, :]
    a_t = _time_first(a_bar.astype(np.float64))
    a_next = np.concatenate([a_t[1:], np.zeros_like(a_t[:1])], axis=0)
    if variant == "auto":
        variant = choose_variant(a_bar.shape)
    linear_scan = linear_scan_parallel if variant == "parallel" else linear_scan_sequential
    lam = linear_scan(a_next[::-1], _time_first(g)[::-1])[::-1]

    h_t = _time_first(h.astype(np.float64))
    h_prev = np.concatenate([np.zeros_like(h_t[:1]), h_t[:-1]], axis=0)
    da_bar = np.moveaxis(lam * h_prev, 0, -3)
    dbx_bar = np.moveaxis(lam, 0, -3)
    dc = np.einsum("...tdn,...td->...tn", h.astype(np.float64), dy64)
    dd_skip = (dy64 * x).reshape(-1, x.shape[-1]).sum(axis=0)
    dx = dy64 * d_skip
    return (
        da_bar.astype(out_dtype),
        dbx_bar.astype(out_dtype),
        dc.astype(out_dtype),
        dd_skip.astype(d_skip.dtype),
        dx.astype(out_dtype),
    )


# ---------------------------------------------------------------------------
# benchmark

SCAN_VARIANTS = {"sequential": ssm_scan_sequential, "parallel": ssm_scan_parallel}


def random_scan_inputs(rng: np.random.Generator, t: int, d_inner: int, n: int, dtype=np.float32):
    """Random but realistic scan inputs, built through :func:`discretize`.

    Step sizes are log-uniform in [1e-3, 1e-1] and the state matrix is
    ``-(1..N)``, which keeps every ``a_bar`` inside (0, 1).
    """
    delta = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=(t, d_inner, 1)))
    a = -np.arange(1, n + 1, dtype=np.float64)
    b = rng.standard_normal((t, 1, n))
    x = rng.standard_normal((t, d_inner))
    a_bar, b_bar = discretize(delta, a, b)
    bx_bar = b_bar * x[:, :, None]
    c = rng.standard_normal((t, n))
    d_skip = rng.standard_normal(d_inner)
    return tuple(arr.astype(dtype) for arr in (a_bar, bx_bar, c, d_skip, x))


def benchmark_scan(sizes, variants=("sequential", "parallel"), repeats=3, seed=0):
    """Time each scan variant; returns rows ``variant, T, d_inner, N, nanos_per_element``.

    A row's time is the best of ``repeats`` runs divided by ``T * d_inner * N``.
    """
    rng = np.random.default_rng(seed)
    rows = []
    for t, d_inner, n in sizes:
        inputs = random_scan_inputs(rng, t, d_inner, n)
        for name in variants:
            fn = SCAN_VARIANTS[name]
            best = float("inf")
            for _ in range(repeats):
                start = time.perf_counter_ns()
                fn(*inputs)
                best = min(best, time.perf_counter_ns() - start)
            rows.append(
                {"variant": name, "T": t, "d_inner": d_inner, "N": n, "nanos_per_element": best / (t * d_inner * n)}
            )
    return rows
