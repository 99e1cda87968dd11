"""Neural net building blocks with explicit reverse-mode gradients.

Every layer caches what its backward pass needs during forward; one forward
must be followed by at most one backward on the same inputs. Parameters are
float64 throughout so finite-difference checks are tight.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from ..util import AvlabError

NEG_INF = -1e30  # additive attention mask value; avoids inf-inf NaNs in backward


class Parameter:
    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    phi = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return 0.5 * (1.0 + erf(x / np.sqrt(2.0))) + x * phi


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def sinusoid_positions(t: int, dim: int) -> np.ndarray:
    pos = np.arange(t)[:, None]
    i = np.arange(dim // 2)[None, :]
    angles = pos / np.power(10000.0, 2.0 * i / dim)
    pe = np.zeros((t, dim))
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles)
    return pe


class Linear:
    def __init__(self, name: str, d_in: int, d_out: int, rng: np.random.Generator,
                 bias: bool = True, zero_init: bool = False):
        w = np.zeros((d_in, d_out)) if zero_init else rng.normal(0.0, 0.02, size=(d_in, d_out))
        self.W = Parameter(f"{name}.W", w)
        self.b = Parameter(f"{name}.b", np.zeros(d_out)) if bias else None
        self._x: np.ndarray | None = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        out = x @ self.W.value
        if self.b is not None:
            out = out + self.b.value
        return out

    def backward(self, dout: np.ndarray) -> np.ndarray:
        self.W.grad += self._x.T @ dout
        if self.b is not None:
            self.b.grad += dout.sum(axis=0)
        return dout @ self.W.value.T

    @property
    def params(self) -> list[Parameter]:
        return [self.W] + ([self.b] if self.b is not None else [])


class LayerNorm:
    def __init__(self, name: str, dim: int, eps: float = 1e-5):
        self.gamma = Parameter(f"{name}.scale", np.ones(dim))
        self.beta = Parameter(f"{name}.offset", np.zeros(dim))
        self.eps = eps
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        mean = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv_std
        self._cache = (xhat, inv_std)
        return self.gamma.value * xhat + self.beta.value

    def backward(self, dout: np.ndarray) -> np.ndarray:
        xhat, inv_std = self._cache
        n = xhat.shape[-1]
        self.gamma.grad += (dout * xhat).sum(axis=0)
        self.beta.grad += dout.sum(axis=0)
        dxhat = dout * self.gamma.value
        return inv_std / n * (
            n * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )

    @property
    def params(self) -> list[Parameter]:
        return [self.gamma, self.beta]


class MultiHeadAttention:
    """Self- or cross-attention over [T, d] sequences (no batch axis)."""

    def __init__(self, name: str, d_model: int, n_heads: int, rng: np.random.Generator):
        if d_model % n_heads != 0:
            raise AvlabError("d_model must divide evenly into heads")
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.wq = Linear(f"{name}.q", d_model, d_model, rng)
        self.wk = Linear(f"{name}.k", d_model, d_model, rng)
        self.wv = Linear(f"{name}.v", d_model, d_model, rng)
        self.wo = Linear(f"{name}.out", d_model, d_model, rng)
        self._cache = None
        self.last_attention: np.ndarray | None = None  # [h, Tq, Tk]

    def _split(self, x: np.ndarray) -> np.ndarray:
        t = x.shape[0]
        return x.reshape(t, self.n_heads, self.d_head).transpose(1, 0, 2)

    def _merge(self, x: np.ndarray) -> np.ndarray:
        h, t, d = x.shape
        return x.transpose(1, 0, 2).reshape(t, h * d)

    def forward(self, x: np.ndarray, memory: np.ndarray | None = None,
                attn_mask: np.ndarray | None = None) -> np.ndarray:
        kv = x if memory is None else memory
        q = self._split(self.wq.forward(x))
        k = self._split(self.wk.forward(kv))
        v = self._split(self.wv.forward(kv))
        scale = 1.0 / np.sqrt(self.d_head)
        scores = (q @ k.transpose(0, 2, 1)) * scale
        if attn_mask is not None:
            scores = scores + attn_mask[None, :, :]
        attn = softmax(scores, axis=-1)
        ctx = attn @ v
        out = self.wo.forward(self._merge(ctx))
        self._cache = (q, k, v, attn, scale, memory is not None)
        self.last_attention = attn
        return out

    def backward(self, dout: np.ndarray) -> tuple[np.ndarray, np.ndarray | None]:
        """Returns (dx, dmemory); dmemory is None for self-attention, in which
        case the key/value path gradient is already folded into dx."""
        q, k, v, attn, scale, is_cross = self._cache
        dctx = self._split(self.wo.backward(dout))
        dattn = dctx @ v.transpose(0, 2, 1)
        dv = attn.transpose(0, 2, 1) @ dctx
        dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
        dq = (dscores @ k) * scale
        dk = (dscores.transpose(0, 2, 1) @ q) * scale
        dx = self.wq.backward(self._merge(dq))
        dkv = self.wk.backward(self._merge(dk)) + self.wv.backward(self._merge(dv))
        if is_cross:
            return dx, dkv
        return dx + dkv, None

    @property
    def params(self) -> list[Parameter]:
        return self.wq.params + self.wk.params + self.wv.params + self.wo.params


class FeedForward:
    def __init__(self, name: str, d_model: int, d_ff: int, rng: np.random.Generator):
        self.lin1 = Linear(f"{name}.in", d_model, d_ff, rng)
        self.lin2 = Linear(f"{name}.out", d_ff, d_model, rng)
        self._pre = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        pre = self.lin1.forward(x)
        self._pre = pre
        return self.lin2.forward(gelu(pre))

    def backward(self, dout: np.ndarray) -> np.ndarray:
        dhidden = self.lin2.backward(dout)
        return self.lin1.backward(dhidden * gelu_grad(self._pre))

    @property
    def params(self) -> list[Parameter]:
        return self.lin1.params + self.lin2.params


class EncoderBlock:
    """Pre-norm: x + Attn(LN(x)), then x + FFN(LN(x))."""

    def __init__(self, name: str, d_model: int, n_heads: int, d_ff: int, rng: np.random.Generator):
        self.ln1 = LayerNorm(f"{name}.ln_attn", d_model)
        self.attn = MultiHeadAttention(f"{name}.attn", d_model, n_heads, rng)
        self.ln2 = LayerNorm(f"{name}.ln_ffn", d_model)
        self.ffn = FeedForward(f"{name}.ffn", d_model, d_ff, rng)

    def forward(self, x: np.ndarray, attn_mask: np.ndarray | None = None) -> np.ndarray:
        x = x + self.attn.forward(self.ln1.forward(x), attn_mask=attn_mask)
        return x + self.ffn.forward(self.ln2.forward(x))

    def backward(self, dout: np.ndarray) -> np.ndarray:
        dx1 = dout + self.ln2.backward(self.ffn.backward(dout))
        dattn, _ = self.attn.backward(dx1)
        return dx1 + self.ln1.backward(dattn)

    @property
    def params(self) -> list[Parameter]:
        return self.ln1.params + self.attn.params + self.ln2.params + self.ffn.params


class DecoderBlock:
    """Pre-norm causal self-attention, cross-attention to memory, then FFN."""

    def __init__(self, name: str, d_model: int, n_heads: int, d_ff: int, rng: np.random.Generator):
        self.ln1 = LayerNorm(f"{name}.ln_self", d_model)
        self.self_attn = MultiHeadAttention(f"{name}.self", d_model, n_heads, rng)
        self.ln2 = LayerNorm(f"{name}.ln_cross", d_model)
        self.cross_attn = MultiHeadAttention(f"{name}.cross", d_model, n_heads, rng)
        self.ln3 = LayerNorm(f"{name}.ln_ffn", d_model)
        self.ffn = FeedForward(f"{name}.ffn", d_model, d_ff, rng)

    def forward(self, x: np.ndarray, memory: np.ndarray, causal_mask: np.ndarray,
                memory_mask: np.ndarray | None = None) -> np.ndarray:
        x = x + self.self_attn.forward(self.ln1.forward(x), attn_mask=causal_mask)
        x = x + self.cross_attn.forward(self.ln2.forward(x), memory=memory, attn_mask=memory_mask)
        return x + self.ffn.forward(self.ln3.forward(x))

    def backward(self, dout: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        dx2 = dout + self.ln3.backward(self.ffn.backward(dout))
        dcross, dmemory = self.cross_attn.backward(dx2)
        dx1 = dx2 + self.ln2.backward(dcross)
        dself, _ = self.self_attn.backward(dx1)
        return dx1 + self.ln1.backward(dself), dmemory

    @property
    def params(self) -> list[Parameter]:
        return (
            self.ln1.params + self.self_attn.params + self.ln2.params
            + self.cross_attn.params + self.ln3.params + self.ffn.params
        )


def causal_mask(t: int) -> np.ndarray:
    mask = np.zeros((t, t))
    mask[np.triu_indices(t, k=1)] = NEG_INF
    return mask


def padding_mask(valid: np.ndarray) -> np.ndarray:
    """Additive [T, T] mask hiding invalid key positions from every query."""
    t = valid.size
    mask = np.zeros((t, t))
    mask[:, ~valid] = NEG_INF
    return mask
