"""Parameterised building blocks: projections, attention, LSTMs, transformers.

All layers accept a leading batch axis.  Sequences are laid out as
``(B, T, d)`` and sets as ``(B, N, d)``.  No layer adds positional
information, so set-valued inputs are handled order-free.
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor


class ConfigurationError(ValueError):
    """Layer widths that cannot work together."""


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Base class.  Parameters and sub-modules are discovered from attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{path}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def assign_names(self) -> None:
        for name, p in self.named_parameters():
            p.name = name

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


class Linear(Module):
    """Affine map ``x W + b`` along the trailing axis."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.d_in, self.d_out = d_in, d_out
        self.W = Parameter(_uniform(rng, d_in, (d_in, d_out)))
        self.b = Parameter(_uniform(rng, d_in, (d_out,))) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ValueError(f"Linear expects trailing width {self.d_in}, got shape {x.shape}")
        if x.ndim == 1:
            y = ad.reshape(ad.matmul(ad.reshape(x, (1, -1)), self.W), (self.d_out,))
        else:
            y = ad.matmul(x, self.W)
        return y if self.b is None else y + self.b


def fully_connected(x: Tensor, params: Linear) -> Tensor:
    return params(x)


class AdditiveAttention(Module):
    """Additive attention ``w^T tanh(W^T q + U^T k + b)`` with softmax over keys.

    ``query`` is ``(B, Q, d_q)``, ``keys`` ``(B, K, d_k)`` and ``values``
    ``(B, K, d_v)``.  Returns ``(weights (B, Q, K), summary (B, Q, d_v))``.
    """

    def __init__(self, d_q: int, d_k: int, d_h: int, rng: np.random.Generator):
        self.d_q, self.d_k, self.d_h = d_q, d_k, d_h
        self.W = Parameter(_uniform(rng, d_q, (d_q, d_h)))
        self.U = Parameter(_uniform(rng, d_k, (d_k, d_h)))
        self.b = Parameter(_uniform(rng, d_h, (d_h,)))
        self.w = Parameter(_uniform(rng, d_h, (d_h, 1)))

    def project_keys(self, keys: Tensor) -> Tensor:
        """``U^T k + b`` for every key, shaped ``(B, 1, K, d_h)``; reusable across queries."""
        if keys.shape[-2] == 0:
            raise ad.EmptyInputError("additive attention over an empty key set")
        B, K = keys.shape[0], keys.shape[1]
        return ad.reshape(ad.matmul(keys, self.U) + self.b, (B, 1, K, self.d_h))

    def attend(self, query: Tensor, projected_keys: Tensor, values: Tensor):
        Q = query.shape[1]
        K = projected_keys.shape[2]
        qh = ad.reshape(ad.matmul(query, self.W), (query.shape[0], Q, 1, self.d_h))
        logits = ad.reshape(ad.matmul(ad.tanh(qh + projected_keys), self.w), (-1, Q, K))
        weights = ad.softmax(logits, axis=-1)
        return weights, ad.matmul(weights, values)

    def __call__(self, query: Tensor, keys: Tensor, values: Tensor | None = None):
        values = keys if values is None else values
        return self.attend(query, self.project_keys(keys), values)


def additive_attention(query, keys, values, params: AdditiveAttention):
    """Single-query convenience form: ``query (d_q,)``, ``keys (K, d_k)``."""
    q = ad.reshape(ad.as_tensor(query), (1, 1, -1))
    k = ad.reshape(ad.as_tensor(keys), (1,) + ad.as_tensor(keys).shape)
    v = ad.reshape(ad.as_tensor(values), (1,) + ad.as_tensor(values).shape)
    weights, summary = params(q, k, v)
    return ad.reshape(weights, (weights.shape[-1],)), ad.reshape(summary, (summary.shape[-1],))


class LSTMCell(Module):
    """LSTM cell with gate order (input, forget, cell, output)."""

    def __init__(self, d_in: int, d_hidden: int, rng: np.random.Generator):
        self.d_in, self.d_hidden = d_in, d_hidden
        h = d_hidden
        fan = d_in + h
        self.W_x = Parameter(_uniform(rng, fan, (d_in, 4 * h)))
        self.W_h = Parameter(_uniform(rng, fan, (h, 4 * h)))
        bias = _uniform(rng, fan, (4 * h,))
        bias[h : 2 * h] = 1.0
        self.b = Parameter(bias)

    def project_inputs(self, x: Tensor) -> Tensor:
        """Input contribution to all gates; lets a sequence be projected once."""
        if x.shape[-1] != self.d_in:
            raise ValueError(f"LSTM expects input width {self.d_in}, got {x.shape}")
        return ad.matmul(x, self.W_x) + self.b

    def step_projected(self, xw: Tensor, state: tuple[Tensor, Tensor]):
        h_prev, c_prev = state
        h = self.d_hidden
        gates = xw + ad.matmul(h_prev, self.W_h)
        sig = ad.sigmoid(gates)
        i, f, o = sig[..., :h], sig[..., h : 2 * h], sig[..., 3 * h :]
        g = ad.tanh(gates[..., 2 * h : 3 * h])
        c = f * c_prev + i * g
        h_new = o * ad.tanh(c)
        return h_new, c

    def __call__(self, x: Tensor, state: tuple[Tensor, Tensor]):
        if state[0].shape[-1] != self.d_hidden or state[1].shape[-1] != self.d_hidden:
            raise ValueError(f"LSTM state width must be {self.d_hidden}")
        return self.step_projected(self.project_inputs(x), state)

    def zero_state(self, batch: int) -> tuple[Tensor, Tensor]:
        return ad.zeros((batch, self.d_hidden)), ad.zeros((batch, self.d_hidden))


def lstm_step(x: Tensor, state, params: LSTMCell):
    """Unbatched step: ``x (d_in,)``, ``state (h, c)`` each ``(d_hidden,)``."""
    h, c = state
    out_h, out_c = params(
        ad.reshape(ad.as_tensor(x), (1, -1)),
        (ad.reshape(ad.as_tensor(h), (1, -1)), ad.reshape(ad.as_tensor(c), (1, -1))),
    )
    return ad.reshape(out_h, (params.d_hidden,)), ad.reshape(out_c, (params.d_hidden,))


class BiLSTM(Module):
    """Bidirectional LSTM; output at step t is ``[forward_t ; backward_t]``."""

    def __init__(self, d_in: int, d_model: int, rng: np.random.Generator):
        if d_model % 2:
            raise ConfigurationError(f"BiLSTM output width must be even, got {d_model}")
        self.d_in, self.d_model = d_in, d_model
        self.forward_cell = LSTMCell(d_in, d_model // 2, rng)
        self.backward_cell = LSTMCell(d_in, d_model // 2, rng)

    def _run(self, cell: LSTMCell, X: Tensor, reverse: bool) -> list[Tensor]:
        B, T = X.shape[0], X.shape[1]
        xw = cell.project_inputs(X)
        state = cell.zero_state(B)
        outputs: list[Tensor] = [None] * T  # type: ignore[list-item]
        steps = range(T - 1, -1, -1) if reverse else range(T)
        for t in steps:
            state = cell.step_projected(xw[:, t, :], state)
            outputs[t] = state[0]
        return outputs

    def __call__(self, X: Tensor) -> Tensor:
        if X.ndim != 3:
            raise ValueError(f"BiLSTM expects (B, T, d), got {X.shape}")
        if X.shape[1] == 0:
            raise ad.EmptyInputError("BiLSTM over an empty sequence")
        fwd = self._run(self.forward_cell, X, reverse=False)
        bwd = self._run(self.backward_cell, X, reverse=True)
        return ad.concat([ad.stack(fwd, axis=1), ad.stack(bwd, axis=1)], axis=-1)


def bilstm_encode(X: Tensor, params: BiLSTM) -> Tensor:
    """Unbatched form: ``X (T, d_in)`` to ``(T, d_model)``."""
    X = ad.as_tensor(X)
    out = params(ad.reshape(X, (1,) + X.shape))
    return ad.reshape(out, out.shape[1:])


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.eps = eps
        self.gamma = Parameter(np.ones(d))
        self.beta = Parameter(np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        mu = ad.mean(x, axis=-1, keepdims=True)
        xc = x - mu
        var = ad.mean(xc * xc, axis=-1, keepdims=True)
        return xc / ad.sqrt(var + self.eps) * self.gamma + self.beta


class MultiHeadAttention(Module):
    """Scaled dot-product attention with ``heads`` parallel heads."""

    def __init__(self, d_model: int, heads: int, rng: np.random.Generator):
        if d_model % heads:
            raise ConfigurationError(f"{heads} heads do not divide width {d_model}")
        self.d_model, self.heads = d_model, heads
        self.q = Linear(d_model, d_model, rng)
        # a key bias only shifts each query's scores by a constant, which the
        # softmax cancels; it would be a parameter with identically zero gradient
        self.k = Linear(d_model, d_model, rng, bias=False)
        self.v = Linear(d_model, d_model, rng)
        self.o = Linear(d_model, d_model, rng)
        self.last_weights: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        B, n, _ = x.shape
        dh = self.d_model // self.heads
        return ad.transpose(ad.reshape(x, (B, n, self.heads, dh)), (0, 2, 1, 3))

    def __call__(self, x: Tensor, memory: Tensor) -> Tensor:
        if memory.shape[1] == 0 or x.shape[1] == 0:
            raise ad.EmptyInputError("attention over an empty set")
        B, n, d = x.shape
        dh = d // self.heads
        q, k, v = self._split(self.q(x)), self._split(self.k(memory)), self._split(self.v(memory))
        scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
        weights = ad.softmax(scores, axis=-1)
        self.last_weights = weights.data
        ctx = ad.matmul(weights, v)
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (B, n, d))
        return self.o(ctx)


class FeedForward(Module):
    def __init__(self, d_model: int, d_inner: int, rng: np.random.Generator):
        self.inner = Linear(d_model, d_inner, rng)
        self.outer = Linear(d_inner, d_model, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.outer(ad.relu(self.inner(x)))


class TransformerEncoderLayer(Module):
    """Pre-norm self-attention block followed by a feed-forward block."""

    def __init__(self, d_model: int, heads: int, d_inner: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, heads, rng)
        self.norm2 = LayerNorm(d_model)
        self.ffn = FeedForward(d_model, d_inner, rng)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h)
        return x + self.ffn(self.norm2(x))


class TransformerDecoderLayer(Module):
    """Pre-norm self-attention over slots, cross-attention into memory, FFN."""

    def __init__(self, d_model: int, heads: int, d_inner: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(d_model)
        self.self_attn = MultiHeadAttention(d_model, heads, rng)
        self.norm2 = LayerNorm(d_model)
        self.cross_attn = MultiHeadAttention(d_model, heads, rng)
        self.norm3 = LayerNorm(d_model)
        self.ffn = FeedForward(d_model, d_inner, rng)

    def __call__(self, x: Tensor, memory: Tensor) -> Tensor:
        h = self.norm1(x)
        x = x + self.self_attn(h, h)
        x = x + self.cross_attn(self.norm2(x), memory)
        return x + self.ffn(self.norm3(x))


class TransformerEncoder(Module):
    def __init__(self, d_model, heads, layers, rng, ffn_mult: int = 4):
        self.layers = [TransformerEncoderLayer(d_model, heads, ffn_mult * d_model, rng) for _ in range(layers)]
        self.norm = LayerNorm(d_model)

    def __call__(self, O: Tensor) -> Tensor:
        if O.shape[-2] == 0:
            raise ad.EmptyInputError("transformer encoder over an empty set")
        x = O
        for layer in self.layers:
            x = layer(x)
        return self.norm(x)


class TransformerDecoder(Module):
    def __init__(self, d_model, heads, layers, rng, ffn_mult: int = 4):
        self.layers = [TransformerDecoderLayer(d_model, heads, ffn_mult * d_model, rng) for _ in range(layers)]
        self.norm = LayerNorm(d_model)

    def __call__(self, memory: Tensor, queries: Tensor, content: Tensor | None = None) -> Tensor:
        """``memory (B, L, d)``, ``queries (N, d)``, ``content (B, d)`` or None."""
        if memory.shape[-2] == 0 or queries.shape[0] == 0:
            raise ad.EmptyInputError("transformer decoder needs N >= 1 and L >= 1")
        B = memory.shape[0]
        n, d = queries.shape
        x = ad.reshape(queries, (1, n, d))
        if content is not None:
            x = x + ad.reshape(content, (B, 1, d))
        else:
            x = x + ad.zeros((B, 1, d))
        for layer in self.layers:
            x = layer(x, memory)
        return self.norm(x)


def transformer_encode(O: Tensor, layers: TransformerEncoder) -> Tensor:
    O = ad.as_tensor(O)
    out = layers(ad.reshape(O, (1,) + O.shape))
    return ad.reshape(out, out.shape[1:])


def transformer_decode(memory, queries, content, layers: TransformerDecoder) -> Tensor:
    memory = ad.as_tensor(memory)
    out = layers(
        ad.reshape(memory, (1,) + memory.shape),
        ad.as_tensor(queries),
        None if content is None else ad.reshape(ad.as_tensor(content), (1, -1)),
    )
    return ad.reshape(out, out.shape[1:])
