"""Recurrent and attention building blocks on top of :mod:`actforecast.tensor`.

All blocks accept optional leading batch axes: a GRU input may be ``T x k``
or ``B x T x k``, and likewise for the attention encoders.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, fields

import numpy as np

from . import tensor as tn
from .errors import ConfigError
from .tensor import ShapeError, Tensor


def param_rng(seed: int, name: str) -> np.random.Generator:
    """Independent stream per parameter name, so models that share a
    sub-module under the same seed also share its initial weights."""
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def init_matrix(seed: int, name: str, shape: tuple[int, int]) -> Tensor:
    bound = math.sqrt(1.0 / shape[0])
    return Tensor(param_rng(seed, name).uniform(-bound, bound, size=shape), requires_grad=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones_param(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


# --- GRU ------------------------------------------------------------------------


@dataclass
class GruParams:
    W_z: Tensor
    U_z: Tensor
    b_z: Tensor
    W_r: Tensor
    U_r: Tensor
    b_r: Tensor
    W_n: Tensor
    U_n: Tensor
    b_n: Tensor

    @classmethod
    def init(cls, k_in: int, k_h: int, seed: int, prefix: str) -> GruParams:
        kw = {}
        for gate in "zrn":
            kw[f"W_{gate}"] = init_matrix(seed, f"{prefix}.W_{gate}", (k_in, k_h))
            kw[f"U_{gate}"] = init_matrix(seed, f"{prefix}.U_{gate}", (k_h, k_h))
            kw[f"b_{gate}"] = zeros_param((k_h,))
        return cls(**kw)

    @property
    def k_in(self) -> int:
        return self.W_z.shape[0]

    @property
    def k_h(self) -> int:
        return self.U_z.shape[0]

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{f.name}": getattr(self, f.name) for f in fields(self)}


def gru_cell_step(x: Tensor, h_prev: Tensor, params: GruParams) -> Tensor:
    """One GRU update::

        z = sigmoid(x W_z + h U_z + b_z)
        r = sigmoid(x W_r + h U_r + b_r)
        n = tanh(x W_n + (r * h) U_n + b_n)
        h' = (1 - z) * h + z * n
    """
    if x.shape[-1] != params.k_in or h_prev.shape[-1] != params.k_h:
        raise ShapeError(f"gru_cell_step: x {x.shape}, h {h_prev.shape} vs cell ({params.k_in}, {params.k_h})")
    return _gru_update(x @ params.W_z + params.b_z, x @ params.W_r + params.b_r, x @ params.W_n + params.b_n, h_prev, params)


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # tanh form: one ufunc, no overflow
    return 0.5 + 0.5 * np.tanh(0.5 * v)


def _weight_grad(inp: np.ndarray, delta: np.ndarray) -> np.ndarray:
    k = inp.shape[-1]
    inp = np.broadcast_to(inp, delta.shape[:-1] + (k,))
    return inp.reshape(-1, k).T @ delta.reshape(-1, delta.shape[-1])


def _gru_update(xz: Tensor, xr: Tensor, xn: Tensor, h: Tensor, params: GruParams) -> Tensor:
    """Gate arithmetic of one step as a single graph node.

    ``xz, xr, xn`` already hold the input projections plus biases. Fusing the
    recurrent half keeps the tape short; :func:`gru_update_reference` is the
    same computation built from primitive ops.
    """
    U_z, U_r, U_n = params.U_z, params.U_r, params.U_n
    hd = h.data
    z = _sigmoid(xz.data + hd @ U_z.data)
    r = _sigmoid(xr.data + hd @ U_r.data)
    rh = r * hd
    n = np.tanh(xn.data + rh @ U_n.data)
    out = hd + z * (n - hd)

    def fn(g):
        dpn = g * z * (1.0 - n * n)
        d_rh = dpn @ U_n.data.T
        dpr = d_rh * hd * r * (1.0 - r)
        dpz = g * (n - hd) * z * (1.0 - z)
        dh = g * (1.0 - z) + d_rh * r + dpr @ U_r.data.T + dpz @ U_z.data.T
        return (
            tn._unbroadcast(dpz, xz.shape),
            tn._unbroadcast(dpr, xr.shape),
            tn._unbroadcast(dpn, xn.shape),
            tn._unbroadcast(dh, h.shape),
            _weight_grad(hd, dpz),
            _weight_grad(hd, dpr),
            _weight_grad(rh, dpn),
        )

    return tn._node(out, (xz, xr, xn, h, U_z, U_r, U_n), fn, "gru_update")


def gru_update_reference(xz: Tensor, xr: Tensor, xn: Tensor, h: Tensor, params: GruParams) -> Tensor:
    z = tn.sigmoid(xz + h @ params.U_z)
    r = tn.sigmoid(xr + h @ params.U_r)
    n = tn.tanh(xn + (r * h) @ params.U_n)
    return h + z * (n - h)


def gru_run(X: Tensor, params: GruParams, h0: Tensor | None = None, reverse: bool = False) -> list[Tensor]:
    """Run a GRU over axis -2 of ``X``; returns states aligned with input rows.

    Input projections are computed for the whole sequence up front, so each
    step only pays for the recurrent matmuls.
    """
    T = X.shape[-2]
    if T == 0:
        raise tn.EmptySequenceError("gru_run: empty sequence")
    if X.shape[-1] != params.k_in:
        raise ShapeError(f"gru_run: input width {X.shape[-1]} != cell input {params.k_in}")
    xz = X @ params.W_z + params.b_z
    xr = X @ params.W_r + params.b_r
    xn = X @ params.W_n + params.b_n
    h = h0 if h0 is not None else Tensor(np.zeros(X.shape[:-2] + (params.k_h,)))
    states: list[Tensor | None] = [None] * T
    for t in (range(T - 1, -1, -1) if reverse else range(T)):
        idx = (Ellipsis, t, slice(None))
        h = _gru_update(xz[idx], xr[idx], xn[idx], h, params)
        states[t] = h
    return states


@dataclass
class EncoderOutput:
    H: Tensor  # (..., T, d_h): forward half then backward half
    h_last: Tensor  # (..., d_h)


def bigru_encode(X: Tensor, fwd: GruParams, bwd: GruParams) -> EncoderOutput:
    if X.shape[-2] == 0:
        raise tn.EmptySequenceError("bigru_encode: empty sequence")
    f_states = gru_run(X, fwd)
    b_states = gru_run(X, bwd, reverse=True)
    H = tn.concat([tn.stack(f_states, axis=-2), tn.stack(b_states, axis=-2)], axis=-1)
    h_last = tn.concat([f_states[-1], b_states[0]], axis=-1)
    return EncoderOutput(H, h_last)


# --- self-attention block -------------------------------------------------------


@dataclass
class FeatureAttnParams:
    """One transformer encoder layer whose tokens are rows of its input.

    For feature-wise attention the rows are the ``d`` feature dimensions and
    ``d_model = T``; every head keeps ``d_k = d_model`` (heads are not split),
    so ``W_o`` is ``(heads * d_k) x d_model``.
    """

    W_q: list[Tensor]
    W_k: list[Tensor]
    W_v: list[Tensor]
    W_o: Tensor
    W_a1: Tensor
    W_a2: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor

    @classmethod
    def init(cls, d_model: int, heads: int, d_ff: int, seed: int, prefix: str = "attn") -> FeatureAttnParams:
        if heads < 1:
            raise ConfigError(f"heads must be >= 1, got {heads}")
        d_k = d_model
        proj = {
            kind: [init_matrix(seed, f"{prefix}.W_{kind}.{i}", (d_model, d_k)) for i in range(heads)]
            for kind in "qkv"
        }
        return cls(
            W_q=proj["q"],
            W_k=proj["k"],
            W_v=proj["v"],
            W_o=init_matrix(seed, f"{prefix}.W_o", (heads * d_k, d_model)),
            W_a1=init_matrix(seed, f"{prefix}.W_a1", (d_model, d_ff)),
            W_a2=init_matrix(seed, f"{prefix}.W_a2", (d_ff, d_model)),
            ln1_gain=ones_param((d_model,)),
            ln1_bias=zeros_param((d_model,)),
            ln2_gain=ones_param((d_model,)),
            ln2_bias=zeros_param((d_model,)),
        )

    @property
    def heads(self) -> int:
        return len(self.W_q)

    @property
    def d_model(self) -> int:
        return self.W_o.shape[1]

    @property
    def d_k(self) -> int:
        return self.W_q[0].shape[1]

    @property
    def d_ff(self) -> int:
        return self.W_a1.shape[1]

    def named(self, prefix: str = "attn") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for kind in "qkv":
            for i, w in enumerate(getattr(self, f"W_{kind}")):
                out[f"{prefix}.W_{kind}.{i}"] = w
        for name in ("W_o", "W_a1", "W_a2", "ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias"):
            out[f"{prefix}.{name}"] = getattr(self, name)
        return out


def attention_block(Z: Tensor, params: FeatureAttnParams, eps: float = 1e-5) -> tuple[Tensor, list[Tensor]]:
    """Multi-head self-attention + residual/LayerNorm + ReLU feed-forward.

    ``Z`` is ``(..., n_tokens, d_model)``; returns the block output of the same
    shape and the per-head ``n_tokens x n_tokens`` attention matrices.
    """
    if Z.shape[-1] != params.d_model:
        raise ConfigError(f"attention input width {Z.shape[-1]} != d_model {params.d_model}")
    scale = 1.0 / math.sqrt(params.d_k)
    heads, attn = [], []
    for Wq, Wk, Wv in zip(params.W_q, params.W_k, params.W_v):
        Q, K, V = Z @ Wq, Z @ Wk, Z @ Wv
        P = tn.softmax_rows((Q @ tn.transpose(K)) * scale)
        attn.append(P)
        heads.append(P @ V)
    A = (heads[0] if len(heads) == 1 else tn.concat(heads, axis=-1)) @ params.W_o
    B = tn.layer_norm(Z + A, params.ln1_gain, params.ln1_bias, eps)
    F = tn.relu(B @ params.W_a1) @ params.W_a2
    return tn.layer_norm(B + F, params.ln2_gain, params.ln2_bias, eps), attn


def feature_attention_encode(X: Tensor, params: FeatureAttnParams, return_attention: bool = False,
                             eps: float = 1e-5):
    """Attend over the feature axis of a ``(..., T, d)`` sequence.

    The block runs on ``X^T`` so queries, keys and values are the ``d``
    feature rows and each attention matrix is ``d x d``. The output is
    transposed back to ``(..., T, d)``.
    """
    if X.shape[-2] != params.d_model:
        raise ConfigError(f"feature attention needs T == d_model: T={X.shape[-2]}, d_model={params.d_model}")
    out, attn = attention_block(tn.transpose(X), params, eps)
    C = tn.transpose(out)
    return (C, attn) if return_attention else C


def temporal_attention_encode(X: Tensor, params: FeatureAttnParams, return_attention: bool = False,
                              eps: float = 1e-5):
    """Conventional attention over time steps (``T x T`` matrices); ``d_model = d``."""
    if X.shape[-1] != params.d_model:
        raise ConfigError(f"temporal attention needs d == d_model: d={X.shape[-1]}, d_model={params.d_model}")
    C, attn = attention_block(X, params, eps)
    return (C, attn) if return_attention else C


# --- dropout, embedding -----------------------------------------------------------


def dropout_apply(v: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity at inference or when ``rate == 0``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return v
    keep = (rng.random(v.shape) >= rate) / (1.0 - rate)
    return v * keep


def embed_labels(labels, table: Tensor) -> Tensor:
    """Look up label embeddings; row ``N`` (the last) is the start symbol."""
    return tn.embed(table, labels)
