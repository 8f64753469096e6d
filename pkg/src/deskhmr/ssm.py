"""Diagonal state-space kernels: ZOH discretization, recurrent and convolutional
LTI scans, and the input-dependent (selective) scan used by the Mamba blocks.

The LTI functions work on plain arrays for a single input channel with an
``n_state``-long diagonal state. :func:`selective_scan` is a tape primitive with
a hand-derived backward pass.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ContractError, ShapeError, Tensor, as_tensor, record

SMALL_Z = 1e-6


class InvariantError(RuntimeError):
    """An internal invariant (e.g. positive step size) was violated."""


@dataclass
class SsmParams:
    A: np.ndarray       # (n_state,) diagonal, 1/step
    B: np.ndarray       # (n_state,)
    C: np.ndarray       # (n_state,)
    delta: float        # step size, > 0

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64).reshape(-1)
        self.B = np.asarray(self.B, dtype=np.float64).reshape(-1)
        self.C = np.asarray(self.C, dtype=np.float64).reshape(-1)
        if not (self.A.shape == self.B.shape == self.C.shape):
            raise ShapeError(f"A, B, C must share n_state, got {self.A.shape}, {self.B.shape}, {self.C.shape}")


@dataclass
class DiscreteSsm:
    A_bar: np.ndarray
    B_bar: np.ndarray


def zoh_factor(z: np.ndarray) -> np.ndarray:
    """``(exp(z) - 1) / z`` with the two-term series ``1 + z/2`` below |z| < 1e-6."""
    z = np.asarray(z, dtype=np.float64)
    small = np.abs(z) < SMALL_Z
    zs = np.where(small, 1.0, z)
    return np.where(small, 1.0 + 0.5 * z, np.expm1(zs) / zs)


def zoh_factor_grad(z: np.ndarray) -> np.ndarray:
    """Derivative of :func:`zoh_factor` (0.5 on the series branch)."""
    z = np.asarray(z, dtype=np.float64)
    small = np.abs(z) < SMALL_Z
    zs = np.where(small, 1.0, z)
    return np.where(small, 0.5, (zs * np.exp(zs) - np.expm1(zs)) / (zs * zs))


def discretize_zoh(p: SsmParams) -> DiscreteSsm:
    if not p.delta > 0:
        raise ContractError(f"discretize_zoh: delta must be > 0, got {p.delta}")
    if not np.all(np.isfinite(p.A)):
        raise ContractError("discretize_zoh: A must be finite")
    z = p.delta * p.A
    return DiscreteSsm(A_bar=np.exp(z), B_bar=zoh_factor(z) * p.delta * p.B)


def scan_recurrent(d: DiscreteSsm, C, x, h0=None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    C = np.asarray(C, dtype=np.float64).reshape(-1)
    if x.size < 1:
        raise ShapeError("scan_recurrent: need L >= 1")
    h = np.zeros_like(d.A_bar) if h0 is None else np.array(h0, dtype=np.float64)
    y = np.empty_like(x)
    for t, xt in enumerate(x):
        h = d.A_bar * h + d.B_bar * xt
        y[t] = C @ h
    return y


def build_conv_kernel(d: DiscreteSsm, C, L: int) -> np.ndarray:
    if L < 1:
        raise ShapeError("build_conv_kernel: need L >= 1")
    C = np.asarray(C, dtype=np.float64).reshape(-1)
    powers = d.A_bar[None, :] ** np.arange(L)[:, None]
    return powers @ (C * d.B_bar)


def scan_convolutional(kernel, x) -> np.ndarray:
    kernel = np.asarray(kernel, dtype=np.float64).reshape(-1)
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if kernel.size != x.size:
        raise ContractError(f"scan_convolutional: kernel length {kernel.size} != sequence length {x.size}")
    L = x.size
    # y[t] = sum_k K[k] x[t-k]
    toeplitz = np.zeros((L, L))
    for k in range(L):
        toeplitz[np.arange(k, L), np.arange(0, L - k)] = kernel[k]
    return toeplitz @ x


def selective_scan(x, delta, A, B, C, resets=None) -> Tensor:
    """Selective scan over axis 1.

    Shapes: ``x`` and ``delta`` (batch, L, D); ``A`` (D, N); ``B`` and ``C``
    (batch, L, N). For every channel ``d``::

        h_t = exp(delta_t A_d) * h_{t-1} + zoh(delta_t A_d) delta_t B_t x_t
        y_t = C_t . h_t

    ``resets`` is an optional length-L boolean mask; where set, the state is
    zeroed before the step, splitting the sequence into independent segments.
    """
    x, delta, A, B, C = (as_tensor(t) for t in (x, delta, A, B, C))
    if x.ndim != 3 or delta.shape != x.shape:
        raise ShapeError(f"selective_scan: x {x.shape} and delta {delta.shape} must be equal (b, L, D)")
    b, L, D = x.shape
    if A.ndim != 2 or A.shape[0] != D:
        raise ShapeError(f"selective_scan: A {A.shape} must be (D={D}, N)")
    N = A.shape[1]
    if B.shape != (b, L, N) or C.shape != (b, L, N):
        raise ShapeError(f"selective_scan: B {B.shape}, C {C.shape} must be {(b, L, N)}")
    dd = delta.data
    # NaN is left to propagate so callers' non-finite guards can report it with context
    if np.any(dd <= 0):
        raise InvariantError("selective_scan: non-positive step size after link function")
    rs = np.zeros(L, dtype=bool) if resets is None else np.asarray(resets, dtype=bool)
    if rs.shape != (L,):
        raise ShapeError(f"selective_scan: resets length {rs.shape} != L={L}")

    xd, Ad, Bd, Cd = x.data, A.data, B.data, C.data
    z = dd[..., None] * Ad                          # (b, L, D, N)
    em1 = np.expm1(z)
    # |z| >= min(delta) * min|A| everywhere, so the series branch is usually skipped wholesale
    exact = dd.min() * np.abs(Ad).min() >= SMALL_Z
    fz = em1 / z if exact else zoh_factor(z)
    # time-major copies keep the per-step slices contiguous
    Abar_t = np.ascontiguousarray(np.moveaxis(em1, 1, 0)) + 1.0
    hs_t = np.moveaxis(fz * (dd * xd)[..., None] * Bd[:, :, None, :], 1, 0).copy()
    for t in range(1, L):
        if not rs[t]:
            hs_t[t] += Abar_t[t] * hs_t[t - 1]
    hs = np.moveaxis(hs_t, 0, 1)
    y = np.einsum("bldn,bln->bld", hs, Cd)

    def vjp(gy):
        gC = np.einsum("bld,bldn->bln", gy, hs)
        gh_t = np.einsum("lbd,lbn->lbdn", np.moveaxis(gy, 1, 0), np.moveaxis(Cd, 1, 0))
        for t in range(L - 2, -1, -1):
            if not rs[t + 1]:
                gh_t[t] += Abar_t[t + 1] * gh_t[t + 1]
        gAbar_t = np.zeros_like(gh_t)
        gAbar_t[1:] = gh_t[1:] * hs_t[:-1]
        gAbar_t[rs] = 0.0
        gh = np.moveaxis(gh_t, 0, 1)
        gAbar = np.moveaxis(gAbar_t, 0, 1)
        Abar = np.moveaxis(Abar_t, 0, 1)
        dfz = (Abar - fz) / z if exact else zoh_factor_grad(z)
        gBB = gh * xd[..., None]                    # dL/dBbar
        gx = np.einsum("bldn,bldn,bln->bld", gh, fz, Bd, optimize=True) * dd
        gz = gAbar * Abar + gBB * dfz * (dd[..., None] * Bd[:, :, None, :])
        gdelta = (np.einsum("bldn,bldn,bln->bld", gBB, fz, Bd, optimize=True)
                  + np.einsum("bldn,dn->bld", gz, Ad))
        gB = np.einsum("bldn,bldn,bld->bln", gBB, fz, dd, optimize=True)
        gA = np.einsum("bldn,bld->dn", gz, dd)
        return gx, gdelta, gA, gB, gC

    return record("selective_scan", y, (x, delta, A, B, C), vjp)


def selective_scan_reference(x, delta, A, B, C) -> np.ndarray:
    """Loop-per-channel evaluation of :func:`selective_scan` built on the LTI helpers."""
    x, delta, A, B, C = (np.asarray(v, dtype=np.float64) for v in (x, delta, A, B, C))
    b, L, D = x.shape
    y = np.zeros_like(x)
    for i in range(b):
        for d in range(D):
            h = np.zeros(A.shape[1])
            for t in range(L):
                disc = discretize_zoh(SsmParams(A[d], B[i, t], C[i, t], float(delta[i, t, d])))
                h = disc.A_bar * h + disc.B_bar * x[i, t, d]
                y[i, t, d] = C[i, t] @ h
    return y
