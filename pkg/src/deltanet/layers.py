"""Neural building blocks on top of :mod:`deltanet.numerics`.

All layers accept an optional leading batch axis. Parameters are plain leaf
tensors discovered by :meth:`Module.named_parameters`.
"""
from __future__ import annotations

import math

import numpy as np

from . import numerics as nx
from .numerics import DimensionError, Tensor, UsageError

__all__ = [
    "Module",
    "Embedding",
    "Linear",
    "LstmCell",
    "BiLstmEncoder",
    "MultiHeadAttention",
    "AttentionBank",
    "ConvEncoder",
    "uniform_init",
    "scaled_normal_init",
]

RECURRENT_INIT = 0.08


def uniform_init(rng: np.random.Generator, shape, bound: float = RECURRENT_INIT) -> Tensor:
    return nx.parameter(rng.uniform(-bound, bound, size=shape))


def scaled_normal_init(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    return nx.parameter(rng.standard_normal(shape) / math.sqrt(fan_in))


def zeros_init(shape) -> Tensor:
    return nx.parameter(np.zeros(shape))


class Module:
    def named_parameters(self, prefix: str = ""):
        for key, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{key}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self) -> dict:
        params = dict(self.named_parameters())
        for name, p in params.items():
            p.name = name
        return params


class Embedding(Module):
    def __init__(self, vocab_size: int, dim: int, rng: np.random.Generator, pad_id: int = 0):
        self.weight = scaled_normal_init(rng, (vocab_size, dim), dim)
        self.pad_id = pad_id

    @property
    def vocab_size(self) -> int:
        return self.weight.shape[0]

    def __call__(self, tokens) -> Tensor:
        return nx.take(self.weight, np.asarray(tokens, dtype=np.int64), axis=0)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True):
        self.weight = scaled_normal_init(rng, (in_dim, out_dim), in_dim)
        self.bias = zeros_init((out_dim,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = nx.matmul(x, self.weight)
        return y if self.bias is None else nx.add(y, self.bias)


class LstmCell(Module):
    """LSTM with gates packed as ``[input | forget | cell | output]``.

    With ``n_dirs > 1`` the cell holds independent weights for several
    directions that run in lockstep; inputs then carry a leading direction
    axis of that size.
    """

    def __init__(self, in_dim: int, hidden: int, rng: np.random.Generator, n_dirs: int = 1):
        self.hidden = hidden
        self.in_dim = in_dim
        self.n_dirs = n_dirs
        if n_dirs == 1:
            self.w_x = uniform_init(rng, (in_dim, 4 * hidden))
            self.w_h = uniform_init(rng, (hidden, 4 * hidden))
            self.b = zeros_init((4 * hidden,))
        else:
            self.w_x = uniform_init(rng, (n_dirs, 1, in_dim, 4 * hidden))
            self.w_h = uniform_init(rng, (n_dirs, hidden, 4 * hidden))
            self.b = zeros_init((n_dirs, 1, 1, 4 * hidden))

    def project_inputs(self, x: Tensor) -> Tensor:
        """Input half of the gate pre-activations for a whole sequence."""
        if x.shape[-1] != self.in_dim:
            raise DimensionError(f"lstm input width {x.shape[-1]} != {self.in_dim}")
        return nx.add(nx.matmul(x, self.w_x), self.b)

    def recur(self, x_proj: Tensor, h_prev: Tensor, c_prev: Tensor):
        gates = nx.add(x_proj, nx.matmul(h_prev, self.w_h))
        c = nx.lstm_state(gates, c_prev)
        h = nx.lstm_hidden(gates, c)
        return h, c

    def step(self, x: Tensor, h_prev: Tensor, c_prev: Tensor):
        if h_prev.shape[-1] != self.hidden or c_prev.shape[-1] != self.hidden:
            raise DimensionError(
                f"lstm state widths {h_prev.shape[-1]}, {c_prev.shape[-1]} != {self.hidden}")
        if self.n_dirs != 1:
            raise UsageError("step() is for single-direction cells; use recur()")
        return self.recur(self.project_inputs(x), h_prev, c_prev)


def reversal_index(lengths: np.ndarray, n: int) -> np.ndarray:
    """Per-row permutation reversing the first ``lengths[b]`` positions."""
    pos = np.arange(n)[None, :]
    lens = np.asarray(lengths)[:, None]
    return np.where(pos < lens, lens - 1 - pos, pos)


class BiLstmEncoder(Module):
    """Stacked bidirectional LSTM followed by a ``2D -> D`` projection.

    Padded sequences are handled by reversing only the real prefix of each
    row for the backward direction, so neither direction ever reads padding
    before a real token.
    """

    def __init__(self, dim: int, rng: np.random.Generator, n_layers: int = 2, project: bool = True):
        self.dim = dim
        self.layers = [LstmCell(dim if i == 0 else 2 * dim, dim, rng, n_dirs=2)
                       for i in range(n_layers)]
        self.proj = Linear(2 * dim, dim, rng) if project else None

    def encode_states(self, x: Tensor, lengths) -> Tensor:
        """Concatenated ``[forward; backward]`` states of the top layer, ``(B, N, 2D)``."""
        B, N, _ = x.shape
        lengths = np.asarray(lengths, dtype=np.int64)
        if N == 0 or np.any(lengths < 1):
            raise DimensionError("bilstm_encode: empty report")
        rows = np.arange(B)[:, None]
        rev = reversal_index(lengths, N)
        layer_in = x
        for cell in self.layers:
            both = nx.stack([layer_in, nx.index(layer_in, (rows, rev))], axis=0)
            proj = cell.project_inputs(both)
            h = nx.Tensor(np.zeros((2, B, self.dim), dtype=x.data.dtype))
            c = nx.Tensor(np.zeros((2, B, self.dim), dtype=x.data.dtype))
            outs = []
            for t in range(N):
                h, c = cell.recur(nx.index(proj, (slice(None), slice(None), t)), h, c)
                outs.append(h)
            seq = nx.stack(outs, axis=2)  # (2, B, N, D)
            fwd = nx.index(seq, 0)
            bwd = nx.index(nx.index(seq, 1), (rows, rev))
            layer_in = nx.concat([fwd, bwd], axis=-1)
        return layer_in

    def __call__(self, x: Tensor, lengths) -> Tensor:
        states = self.encode_states(x, lengths)
        return states if self.proj is None else self.proj(states)


class AttentionBank:
    """Key/value rows already projected and split into heads."""

    __slots__ = ("keys_t", "values", "mask", "rows")

    def __init__(self, keys_t: Tensor, values: Tensor, mask: np.ndarray | None, rows: int):
        self.keys_t = keys_t
        self.values = values
        self.mask = mask
        self.rows = rows


class MultiHeadAttention(Module):
    """Scaled dot-product attention with ``heads`` heads and output projection."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise DimensionError(f"attention width {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.w_q = Linear(dim, dim, rng)
        self.w_k = Linear(dim, dim, rng)
        self.w_v = Linear(dim, dim, rng)
        self.w_o = Linear(dim, dim, rng)

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    def prepare(self, keys: Tensor, values: Tensor, mask=None) -> AttentionBank:
        """Project a ``(B, M, D)`` bank once so it can serve many queries."""
        if keys.shape != values.shape:
            raise DimensionError(f"keys {keys.shape} and values {values.shape} differ")
        B, M, _ = keys.shape
        H, dh = self.heads, self.head_dim
        k = nx.transpose(nx.reshape(self.w_k(keys), (B, M, H, dh)), (0, 2, 3, 1))
        v = nx.transpose(nx.reshape(self.w_v(values), (B, M, H, dh)), (0, 2, 1, 3))
        if mask is not None:
            mask = np.asarray(mask, dtype=bool).reshape(B, 1, 1, M)
            if not np.all(mask.any(axis=-1)):
                raise UsageError("attention: every key is masked")
        return AttentionBank(k, v, mask, M)

    def attend(self, query: Tensor, bank: AttentionBank):
        """``query`` is ``(B, 1, D)``; returns output ``(B, 1, D)`` and weights ``(B, H, 1, M)``."""
        B = query.shape[0]
        H, dh = self.heads, self.head_dim
        q = nx.reshape(self.w_q(query), (B, H, 1, dh))
        scores = nx.scale(nx.matmul(q, bank.keys_t), 1.0 / math.sqrt(dh))
        weights = nx.softmax_rows(scores, bank.mask)
        ctx = nx.reshape(nx.matmul(weights, bank.values), (B, 1, self.dim))
        return self.w_o(ctx), weights

    def __call__(self, query: Tensor, keys: Tensor, values: Tensor, key_mask=None):
        """Single-example attention: ``query`` ``(1, D)``, ``keys``/``values`` ``(M, D)``.

        Masked rows are removed before attending, so the result is
        bit-identical to attending over the unmasked rows only.
        """
        if keys.ndim != 2 or values.ndim != 2 or query.ndim != 2:
            raise DimensionError("mha expects 2-D query, keys and values")
        if keys.shape != values.shape:
            raise DimensionError(f"keys {keys.shape} and values {values.shape} differ")
        if key_mask is not None:
            keep = np.flatnonzero(np.asarray(key_mask, dtype=bool))
            if keep.size == 0:
                raise UsageError("attention: every key is masked")
            if keep.size < keys.shape[0]:
                keys, values = nx.index(keys, keep), nx.index(values, keep)
        M = keys.shape[0]
        bank = self.prepare(nx.reshape(keys, (1, M, self.dim)), nx.reshape(values, (1, M, self.dim)))
        out, weights = self.attend(nx.reshape(query, (1, 1, self.dim)), bank)
        return nx.reshape(out, (1, self.dim)), weights.data[0, :, 0, :]


class ConvEncoder(Module):
    """Stages of 3x3 conv + tanh + 2x2 average pooling, then a per-position projection.

    Two fixed coordinate planes (row and column in [-1, 1]) are appended to the
    input channels. Position then enters the features non-linearly, so it is
    still visible in the difference of two feature maps, where an additive
    position embedding would cancel.

    The number of stages is fixed by the input side length and the requested
    number of output positions ``K``: each stage halves the side, and the
    final map must be ``sqrt(K) x sqrt(K)``.
    """

    def __init__(self, in_channels: int, image_size: int, positions: int, dim: int,
                 rng: np.random.Generator, channels=(8, 16), coords: bool = True):
        side = math.isqrt(positions)
        if side * side != positions:
            raise DimensionError(f"K={positions} is not a square number of positions")
        ratio = image_size // side
        if ratio * side != image_size or ratio & (ratio - 1):
            raise DimensionError(
                f"image side {image_size} cannot be pooled to {side}x{side} by halving")
        n_stages = ratio.bit_length() - 1
        chans = list(channels)[:n_stages]
        while len(chans) < n_stages:
            chans.append(chans[-1] if chans else 8)
        self.in_channels = in_channels
        self.coords = coords
        self.image_size = image_size
        self.positions = positions
        self.dim = dim
        self.kernels = []
        self.biases = []
        c_in = in_channels + (2 if coords else 0)
        for c_out in chans:
            self.kernels.append(scaled_normal_init(rng, (c_out, c_in, 3, 3), 9 * c_in))
            self.biases.append(zeros_init((c_out,)))
            c_in = c_out
        self.out_channels = c_in
        self.proj = Linear(c_in, dim, rng)

    def named_parameters(self, prefix: str = ""):
        for i, (w, b) in enumerate(zip(self.kernels, self.biases)):
            yield f"{prefix}conv{i}.weight", w
            yield f"{prefix}conv{i}.bias", b
        yield from self.proj.named_parameters(prefix + "proj.")

    def _coord_planes(self, batch: int, dtype) -> np.ndarray:
        ramp = np.linspace(-1.0, 1.0, self.image_size, dtype=dtype)
        planes = np.stack([np.repeat(ramp[:, None], self.image_size, axis=1),
                           np.repeat(ramp[None, :], self.image_size, axis=0)])
        return np.broadcast_to(planes, (batch, 2, self.image_size, self.image_size)).copy()

    def __call__(self, images) -> Tensor:
        """``(B, C, H, W)`` or ``(C, H, W)`` images to ``(B, K, D)`` / ``(K, D)`` features."""
        x = images if isinstance(images, Tensor) else nx.Tensor(np.asarray(images, dtype=nx.get_default_dtype()))
        single = x.ndim == 3
        if single:
            x = nx.reshape(x, (1,) + x.shape)
        expected = (self.in_channels, self.image_size, self.image_size)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise DimensionError(f"conv_encode: image shape {x.shape[1:]} != configured {expected}")
        if self.coords:
            x = nx.concat([x, nx.Tensor(self._coord_planes(x.shape[0], x.data.dtype))], axis=1)
        for w, b in zip(self.kernels, self.biases):
            x = nx.avg_pool2d(nx.tanh(nx.conv2d(x, w, b, pad=1)), 2)
        B, C, h, w_ = x.shape
        x = nx.reshape(nx.transpose(x, (0, 2, 3, 1)), (B, h * w_, C))
        out = self.proj(x)
        return nx.reshape(out, out.shape[1:]) if single else out
