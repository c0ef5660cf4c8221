"""State-space sequence primitives and the gated block built on them.

All LTI utilities here are plain numpy and serve as contracts/oracles;
the differentiable path through a block uses the autodiff primitives.
The continuous system h' = A h + B x, y = C h is discretized with the
zero-order hold rule and executed either as a sequential recurrence, a
global convolution (LTI only), or an input-dependent (selective) scan.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import DataError

RMSNORM_EPS = 1e-4


@dataclass
class SsmParams:
    """Diagonal per-channel state matrices; A = -exp(a_log) keeps |Abar| < 1."""

    a_log: np.ndarray  # (C, N)
    n_state: int

    @property
    def a(self) -> np.ndarray:
        return -np.exp(self.a_log)


def discretize_zoh(a, b, delta):
    """ZOH discretization of (a, b) at step delta for diagonal, stable a.

    abar = exp(delta a); bbar = expm1(delta a)/a * b, with the first-order
    limit delta*b when |delta a| < 1e-8.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if np.any(a >= 0):
        raise DataError("continuous state matrix entries must be strictly negative")
    if np.any(delta <= 0):
        raise DataError("step size must be positive")
    z = delta * a
    abar = np.exp(z)
    small = np.abs(z) < 1e-8
    bbar = np.where(small, delta * (1.0 + 0.5 * z) * b, np.expm1(z) / a * b)
    return abar, bbar


def ssm_recurrence(x, abar, bbar, c):
    """Sequential unrolling: h_t = abar h_{t-1} + bbar x_t, y_t = <c, h_t>.

    x: (L,); abar, bbar, c: (N,). O(L N) time, O(N) state.
    """
    x = np.asarray(x, dtype=np.float64)
    abar = np.atleast_1d(np.asarray(abar, dtype=np.float64))
    bbar = np.atleast_1d(np.asarray(bbar, dtype=np.float64))
    c = np.atleast_1d(np.asarray(c, dtype=np.float64))
    h = np.zeros_like(abar)
    y = np.empty_like(x)
    for t in range(x.shape[0]):
        h = abar * h + bbar * x[t]
        y[t] = c @ h
    return y


def ssm_kernel(abar, bbar, c, length):
    """Global convolution kernel K[k] = <c, abar^k bbar>."""
    abar = np.atleast_1d(np.asarray(abar, dtype=np.float64))
    bbar = np.atleast_1d(np.asarray(bbar, dtype=np.float64))
    c = np.atleast_1d(np.asarray(c, dtype=np.float64))
    powers = abar[None, :] ** np.arange(length)[:, None]
    return powers * bbar @ c


def ssm_convolution(x, abar, bbar, c):
    """Causal convolution of x with the global kernel; LTI parameters only."""
    x = np.asarray(x, dtype=np.float64)
    for p in (abar, bbar, c):
        if np.asarray(p).ndim > 1:
            raise DataError("convolution mode requires time-invariant parameters")
    k = ssm_kernel(abar, bbar, c, x.shape[0])
    return np.convolve(x, k)[: x.shape[0]]


# ---------------------------------------------------------------------------
# selective (input-dependent) scan, forward-only reference paths

def selective_scan_sequential(x, delta, bmat, cmat, a):
    """Per-step ZOH then recurrence; x, delta (L, C); bmat, cmat (L, N); a (C, N)."""
    L, C = x.shape
    N = a.shape[1]
    h = np.zeros((C, N))
    y = np.empty((L, C))
    for t in range(L):
        z = delta[t][:, None] * a
        abar = np.exp(z)
        small = np.abs(z) < 1e-8
        g = np.where(small, delta[t][:, None] * (1.0 + 0.5 * z), np.expm1(z) / a)
        h = abar * h + (g * bmat[t][None, :]) * x[t][:, None]
        y[t] = h @ cmat[t]
    return y


def selective_scan_chunked(x, delta, bmat, cmat, a, chunk=16):
    """Blocked evaluation of the same scan.

    Within-chunk recurrences run vectorized across all chunks at once;
    chunk boundary states are then combined by a short sequential pass.
    Must agree with the sequential scan to floating-point noise.
    """
    L, C = x.shape
    N = a.shape[1]
    pad = (-L) % chunk
    if pad:
        z = np.zeros((pad, x.shape[1]))
        x = np.concatenate([x, z])
        delta = np.concatenate([delta, np.ones((pad, x.shape[1]))])
        bmat = np.concatenate([bmat, np.zeros((pad, N))])
        cmat = np.concatenate([cmat, np.zeros((pad, N))])
    Lp = x.shape[0]
    nc = Lp // chunk
    zc = delta.reshape(nc, chunk, C)[..., None] * a  # (nc, chunk, C, N)
    abar = np.exp(zc)
    small = np.abs(zc) < 1e-8
    g = np.where(small, delta.reshape(nc, chunk, C)[..., None] * (1.0 + 0.5 * zc), np.expm1(zc) / a)
    u = g * bmat.reshape(nc, chunk, 1, N) * x.reshape(nc, chunk, C, 1)
    # pass 1: within-chunk scan from zero state, all chunks in parallel
    h = np.zeros((nc, C, N))
    hs = np.empty((nc, chunk, C, N))
    aprod = np.ones((nc, C, N))
    for t in range(chunk):
        h = abar[:, t] * h + u[:, t]
        aprod = aprod * abar[:, t]
        hs[:, t] = h
    # pass 2: combine chunk aggregates sequentially
    starts = np.zeros((nc, C, N))
    carry = np.zeros((C, N))
    for i in range(nc):
        starts[i] = carry
        carry = aprod[i] * carry + hs[i, -1]
    # pass 3: add the propagated chunk-start state
    acum = np.ones((nc, C, N))
    for t in range(chunk):
        acum = acum * abar[:, t]
        hs[:, t] += acum * starts
    y = np.einsum("ktcn,ktn->ktc", hs, cmat.reshape(nc, chunk, N))
    return y.reshape(Lp, C)[:L]


# ---------------------------------------------------------------------------
# block

@dataclass
class MambaBlockWeights:
    norm_scale: ad.Tensor  # (d,)
    in_proj_main: ad.Tensor  # (d, d_inner)
    in_proj_gate: ad.Tensor  # (d, d_inner)
    conv_w: ad.Tensor  # (d_inner, k)
    conv_b: ad.Tensor  # (d_inner,)
    delta_w: ad.Tensor  # (d_inner, d_inner)
    delta_b: ad.Tensor  # (d_inner,)
    b_w: ad.Tensor  # (d_inner, N)
    c_w: ad.Tensor  # (d_inner, N)
    a_log: ad.Tensor  # (d_inner, N)
    out_proj: ad.Tensor  # (d_inner, d)

    def named_parameters(self, prefix):
        return {f"{prefix}.{n}": getattr(self, n) for n in (
            "norm_scale", "in_proj_main", "in_proj_gate", "conv_w", "conv_b",
            "delta_w", "delta_b", "b_w", "c_w", "a_log", "out_proj")}


def init_block(rng, d, d_inner, n_state, conv_width) -> MambaBlockWeights:
    def mat(rows, cols, scale=None):
        s = scale if scale is not None else 1.0 / np.sqrt(rows)
        return ad.tensor(rng.normal(0.0, s, size=(rows, cols)), requires_grad=True)

    a_log = ad.tensor(
        np.log(np.tile(np.arange(1, n_state + 1, dtype=np.float64), (d_inner, 1))),
        requires_grad=True,
    )
    return MambaBlockWeights(
        norm_scale=ad.tensor(np.ones(d), requires_grad=True),
        in_proj_main=mat(d, d_inner),
        in_proj_gate=mat(d, d_inner),
        conv_w=ad.tensor(rng.normal(0.0, 0.5, size=(d_inner, conv_width)), requires_grad=True),
        conv_b=ad.tensor(np.zeros(d_inner), requires_grad=True),
        delta_w=mat(d_inner, d_inner, scale=0.1 / np.sqrt(d_inner)),
        delta_b=ad.tensor(np.full(d_inner, -1.0), requires_grad=True),
        b_w=mat(d_inner, n_state),
        c_w=mat(d_inner, n_state),
        a_log=a_log,
        out_proj=mat(d_inner, d),
    )


def rmsnorm(x: ad.Tensor, scale: ad.Tensor) -> ad.Tensor:
    """x / rms(x) * scale along the last axis."""
    ms = ad.tmean(ad.mul(x, x), axis=-1, keepdims=True)
    inv = ad.power(ad.add(ms, RMSNORM_EPS), -0.5)
    return ad.mul(ad.mul(x, inv), scale)


def mamba_block_forward(h_in: ad.Tensor, w: MambaBlockWeights) -> ad.Tensor:
    """Gated SSM block with residual connection; h_in (B, L, d)."""
    xn = rmsnorm(h_in, w.norm_scale)
    xm = ad.matmul(xn, w.in_proj_main)
    xg = ad.matmul(xn, w.in_proj_gate)
    xc = ad.silu(ad.causal_conv1d(xm, w.conv_w, w.conv_b))
    delta = ad.softplus(ad.add(ad.matmul(xc, w.delta_w), w.delta_b))
    bmat = ad.matmul(xc, w.b_w)
    cmat = ad.matmul(xc, w.c_w)
    a = ad.neg(ad.exp(w.a_log))
    y = ad.selective_scan(xc, delta, bmat, cmat, a)
    gated = ad.mul(y, ad.silu(xg))
    return ad.add(h_in, ad.matmul(gated, w.out_proj))
