"""Functional neural-net building blocks over ParamStore.

Layers are plain functions: parameters are created on first use (seeded by
name, so results never depend on call order) and wrapped per-tape. Masks are
constant numpy arrays of 0/1; masked attention scores get a -1e9 offset, and
rows with no unmasked key are zeroed after the softmax.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import ParamStore, Tensor


def param(store: ParamStore, name: str, shape, init: str = "xavier") -> Tensor:
    store.ensure(name, shape, init)
    return store.tensor(name)


def linear(store, name, x: Tensor, din: int, dout: int, bias: bool = True) -> Tensor:
    y = T.matmul(x, param(store, f"{name}/w", (din, dout)))
    if bias:
        y = T.add(y, param(store, f"{name}/b", (dout,), init="zeros"))
    return y


def mlp(store, name, x: Tensor, dims: list[int]) -> Tensor:
    """Fully-connected stack with relu between layers (none after the last)."""
    for i in range(len(dims) - 1):
        x = linear(store, f"{name}/l{i}", x, dims[i], dims[i + 1])
        if i < len(dims) - 2:
            x = T.relu(x)
    return x


def layer_norm(store, name, x: Tensor, d: int) -> Tensor:
    gain = param(store, f"{name}/gain", (d,), init="ones")
    bias = param(store, f"{name}/bias", (d,), init="zeros")
    return T.layer_norm(x, gain, bias)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, d = x.shape
    return T.transpose(T.reshape(x, (b, t, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, dk = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, t, h * dk))


def attend(store, name, query: Tensor, keys: Tensor, values: Tensor,
           d_model: int, heads: int, mask: np.ndarray | None = None,
           return_weights: bool = False):
    """Multi-head scaled dot-product attention.

    query: [B, Tq, D]; keys/values: [B, Tk, D]; mask: [B, Tq, Tk] of 0/1
    (1 = may attend). Output [B, Tq, D] via a learned output projection.
    """
    if d_model % heads:
        raise ValueError(f"attend: d_model {d_model} not divisible by heads {heads}")
    q = _split_heads(linear(store, f"{name}/q", query, d_model, d_model, bias=False), heads)
    k = _split_heads(linear(store, f"{name}/k", keys, d_model, d_model, bias=False), heads)
    v = _split_heads(linear(store, f"{name}/v", values, d_model, d_model, bias=False), heads)
    scale = 1.0 / np.sqrt(d_model // heads)
    scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), scale)
    b, _, tq, tk = scores.shape
    if mask is not None:
        offset = np.where(mask[:, None, :, :] > 0, 0.0, -1e9)
        scores = T.add(scores, np.broadcast_to(offset, (b, heads, tq, tk)).copy())
    weights = T.softmax(scores, axis=-1)
    if mask is not None:
        keep = (mask.sum(axis=-1) > 0).astype(np.float64)[:, None, :, None]
        weights = T.mul(weights, np.broadcast_to(keep, (b, heads, tq, tk)).copy())
    out = linear(store, f"{name}/out", _merge_heads(T.matmul(weights, v)),
                 d_model, d_model)
    if mask is not None:
        # a query with no unmasked keys yields exactly zero, so residual
        # callers pass such rows through untouched (bias included)
        row_keep = (mask.sum(axis=-1) > 0).astype(np.float64)[:, :, None]
        out = T.mul(out, np.broadcast_to(row_keep, out.shape).copy())
    if return_weights:
        return out, weights
    return out


def ffn(store, name, x: Tensor, d: int) -> Tensor:
    h = T.relu(linear(store, f"{name}/up", x, d, 4 * d))
    return linear(store, f"{name}/down", h, 4 * d, d)


def transformer_last_token(store, name, x: Tensor, d_model: int, heads: int,
                           layers: int, valid: np.ndarray | None = None) -> Tensor:
    """Pre-norm transformer over sequences; returns the final-timestep token.

    x: [B, T, D]. valid: optional [B, T] of 0/1; invalid steps are excluded
    as attention keys (zero-padded inputs otherwise pass through residuals).
    Positional information comes from a learned embedding of length T.
    """
    b, t, d = x.shape
    x = T.add(x, param(store, f"{name}/posemb", (t, d_model)))
    mask = None
    if valid is not None:
        mask = np.broadcast_to(valid[:, None, :], (b, t, t)).copy()
    for i in range(layers):
        h = layer_norm(store, f"{name}/ln_a{i}", x, d_model)
        x = T.add(x, attend(store, f"{name}/attn{i}", h, h, h, d_model, heads, mask))
        h = layer_norm(store, f"{name}/ln_f{i}", x, d_model)
        x = T.add(x, ffn(store, f"{name}/ffn{i}", h, d_model))
    x = layer_norm(store, f"{name}/ln_out", x, d_model)
    return T.slice_(x, (slice(None), -1))


def gru_cell(store, name, x: Tensor, h: Tensor, dx: int, dh: int) -> Tensor:
    """One GRU step: x [B, dx], h [B, dh] -> new hidden [B, dh]."""
    def gate(tag):
        return T.add(linear(store, f"{name}/i{tag}", x, dx, dh),
                     linear(store, f"{name}/h{tag}", h, dh, dh, bias=False))
    r = T.sigmoid(gate("r"))
    z = T.sigmoid(gate("z"))
    n = T.tanh(T.add(linear(store, f"{name}/in", x, dx, dh),
                     T.mul(r, linear(store, f"{name}/hn", h, dh, dh, bias=False))))
    return T.add(T.mul(T.sub(1.0, z), n), T.mul(z, h))
