"""First-order linear recurrence ``h[t] = a[t] * h[t-1] + b[t]`` with ``h[-1] = 0``.

Two interchangeable routes over the last axis:

* ``kernel``: compiled sequential loop (numba) with an analytic backward.
  O(L) work; this is what the model uses.
* ``prefix``: Hillis-Steele prefix scan in plain torch ops (autograd
  handles the backward). Optionally split into chunks whose carries are
  chained sequentially.

:func:`fused_selective_scan` goes one step further and runs the whole
discretise/scan/readout of a diagonal SSM in one compiled loop, so the
``[C, N, L]`` intermediates never exist as tensors.
"""
from __future__ import annotations

import numba
import numpy as np
import torch


@numba.njit(cache=True)
def _forward_kernel(a, b, h):
    m, n = a.shape
    for i in range(m):
        acc = 0.0
        for t in range(n):
            acc = a[i, t] * acc + b[i, t]
            h[i, t] = acc


@numba.njit(cache=True)
def _backward_kernel(a, h, gh, ga, gb):
    m, n = a.shape
    for i in range(m):
        g = 0.0
        for t in range(n - 1, -1, -1):
            g = gh[i, t] + g
            gb[i, t] = g
            if t > 0:
                ga[i, t] = g * h[i, t - 1]
            else:
                ga[i, t] = 0.0
            g = g * a[i, t]


def _flat(x):
    return np.ascontiguousarray(x.detach().reshape(-1, x.shape[-1]).numpy())


class _LinearScan(torch.autograd.Function):
    @staticmethod
    def forward(ctx, a, b):
        a_np, b_np = _flat(a), _flat(b)
        h_np = np.empty_like(a_np)
        _forward_kernel(a_np, b_np, h_np)
        h = torch.from_numpy(h_np).view(a.shape)
        ctx.save_for_backward(a, h)
        return h

    @staticmethod
    def backward(ctx, gh):
        a, h = ctx.saved_tensors
        a_np, h_np, gh_np = _flat(a), _flat(h), _flat(gh.contiguous())
        ga, gb = np.empty_like(a_np), np.empty_like(a_np)
        _backward_kernel(a_np, h_np, gh_np, ga, gb)
        return torch.from_numpy(ga).view(a.shape), torch.from_numpy(gb).view(a.shape)


def _prefix(a, b):
    # inclusive scan under (a1, b1) o (a2, b2) = (a1 a2, a2 b1 + b2)
    n = a.shape[-1]
    shift = 1
    while shift < n:
        a_prev = torch.nn.functional.pad(a[..., :-shift], (shift, 0), value=1.0)
        b_prev = torch.nn.functional.pad(b[..., :-shift], (shift, 0), value=0.0)
        b = a * b_prev + b
        a = a * a_prev
        shift *= 2
    return a, b


def prefix_scan(a: torch.Tensor, b: torch.Tensor, chunk_size=None) -> torch.Tensor:
    n = a.shape[-1]
    if chunk_size is None or chunk_size >= n:
        return _prefix(a, b)[1]
    outs = []
    carry = torch.zeros_like(b[..., 0])
    for s in range(0, n, chunk_size):
        cum_a, h = _prefix(a[..., s:s + chunk_size], b[..., s:s + chunk_size])
        h = h + cum_a * carry[..., None]
        outs.append(h)
        carry = h[..., -1]
    return torch.cat(outs, dim=-1)


def linear_scan(a: torch.Tensor, b: torch.Tensor, method: str = "kernel", chunk_size=None) -> torch.Tensor:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    if method == "kernel":
        if a.device.type != "cpu":
            return prefix_scan(a, b, chunk_size)
        a, b = torch.broadcast_tensors(a, b)
        return _LinearScan.apply(a.contiguous(), b.contiguous())
    if method == "prefix":
        return prefix_scan(a, b, chunk_size)
    raise ValueError(f"unknown scan method {method!r}")


@numba.njit(cache=True, fastmath=True)
def _ssm_forward(x, em, A, Bm, Cm, y, hs):
    # em[m, c, n, t] = expm1(delta[m, c, t] * A[m, c, n])
    m_, c_, l_ = x.shape
    n_ = A.shape[2]
    for m in range(m_):
        for c in range(c_):
            for t in range(l_):
                y[m, c, t] = 0.0
            for n in range(n_):
                inv = 1.0 / A[m, c, n]
                h = 0.0
                for t in range(l_):
                    e1 = em[m, c, n, t]
                    h = (e1 + 1.0) * h + e1 * inv * Bm[m, n, t] * x[m, c, t]
                    hs[m, c, n, t] = h
                    y[m, c, t] += Cm[m, n, t] * h


@numba.njit(cache=True, fastmath=True)
def _ssm_backward(x, em, A, Bm, Cm, hs, gy, gx, gem, gA, gB, gC):
    m_, c_, l_ = x.shape
    n_ = A.shape[2]
    for m in range(m_):
        for c in range(c_):
            for n in range(n_):
                inv = 1.0 / A[m, c, n]
                g = 0.0          # dL/dh[t], accumulated backwards
                a_next = 0.0
                ga = 0.0
                for t in range(l_ - 1, -1, -1):
                    e1 = em[m, c, n, t]
                    h_prev = hs[m, c, n, t - 1] if t > 0 else 0.0
                    g = gy[m, c, t] * Cm[m, n, t] + g * a_next
                    gC[m, n, t] += gy[m, c, t] * hs[m, c, n, t]
                    bx = Bm[m, n, t] * x[m, c, t]
                    # h = (e1 + 1) h_prev + e1 / A * bx
                    gem[m, c, n, t] = g * (h_prev + inv * bx)
                    ga -= g * e1 * inv * inv * bx
                    gB[m, n, t] += g * e1 * inv * x[m, c, t]
                    gx[m, c, t] += g * e1 * inv * Bm[m, n, t]
                    a_next = e1 + 1.0
                gA[m, c, n] = ga


class _FusedSSM(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, em, A, Bm, Cm):
        xs, es, As, Bs, Cs = (t.detach().contiguous().numpy() for t in (x, em, A, Bm, Cm))
        y = np.empty_like(xs)
        hs = np.empty_like(es)
        _ssm_forward(xs, es, As, Bs, Cs, y, hs)
        ctx.save_for_backward(x, em, A, Bm, Cm, torch.from_numpy(hs))
        return torch.from_numpy(y)

    @staticmethod
    def backward(ctx, gy):
        x, em, A, Bm, Cm, hs = (t.detach().contiguous().numpy() for t in ctx.saved_tensors)
        gy = gy.contiguous().numpy()
        gx, gem = np.zeros_like(x), np.empty_like(em)
        gA, gB, gC = np.zeros_like(A), np.zeros_like(Bm), np.zeros_like(Cm)
        _ssm_backward(x, em, A, Bm, Cm, hs, gy, gx, gem, gA, gB, gC)
        return tuple(torch.from_numpy(g) for g in (gx, gem, gA, gB, gC))


def fused_selective_scan(x, delta, A, Bm, Cm):
    """``y[t] = C[t] . h[t]`` for the ZOH-discretised diagonal SSM.

    ``x, delta: [..., C, L]``, ``Bm, Cm: [..., N, L]``, ``A: [..., C, N]``
    (leading dims broadcast). The skip term is left to the caller.

    ``expm1(delta * A)`` is evaluated by torch (vectorised) and the compiled
    loop does the rest; autograd differentiates through the ``expm1``.
    """
    lead = torch.broadcast_shapes(x.shape[:-2], Bm.shape[:-2], A.shape[:-2])
    c, l = x.shape[-2:]
    n = Bm.shape[-2]

    def flat(t, tail):
        return t.expand(lead + tail).reshape((-1,) + tail).contiguous()

    A = flat(A, (c, n))
    delta = flat(delta, (c, l))
    em = torch.expm1(delta.unsqueeze(-2) * A.unsqueeze(-1))
    y = _FusedSSM.apply(flat(x, (c, l)), em, A, flat(Bm, (n, l)), flat(Cm, (n, l)))
    return y.reshape(lead + (c, l))
