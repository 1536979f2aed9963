"""Causal multi-head self-attention and the pre-norm transformer block."""

import numpy as np

from . import tensor as T
from .tensor import Tensor, ShapeError

__all__ = ["causal_mask", "CausalSelfAttention", "TransformerBlock"]

# Additive mask value. Large enough that exp(x - rowmax) underflows to an
# exact 0.0 for masked entries, so causality holds bitwise, while keeping
# every intermediate finite (a -inf mask would trip the non-finite check).
# Not larger than 1e9: the check sums whole arrays in their own dtype, and
# masked score blocks must stay far from float32 range even in bulk.
_MASK_VALUE = -1e9

_mask_cache = {}


def causal_mask(t):
    """(t, t) additive mask: 0 on and below the diagonal, _MASK_VALUE above."""
    m = _mask_cache.get(t)
    if m is None:
        m = np.triu(np.full((t, t), _MASK_VALUE), k=1)
        m.setflags(write=False)
        _mask_cache[t] = m
    return m


class CausalSelfAttention:
    """Multi-head scaled dot-product attention with a causal mask."""

    def __init__(self, rng, d_model, n_heads, residual_scale=1.0):
        if d_model % n_heads != 0:
            raise ShapeError(f"d_model {d_model} not divisible by {n_heads} heads")
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        std = 1.0 / np.sqrt(d_model)
        self.w_qkv = Tensor(rng.standard_normal((d_model, 3 * d_model)) * std,
                            requires_grad=True)
        self.b_qkv = Tensor(np.zeros(3 * d_model), requires_grad=True)
        self.w_out = Tensor(rng.standard_normal((d_model, d_model)) * std * residual_scale,
                            requires_grad=True)
        self.b_out = Tensor(np.zeros(d_model), requires_grad=True)

    def named_params(self, prefix=""):
        names = {"qkv.w": self.w_qkv, "qkv.b": self.b_qkv,
                 "out.w": self.w_out, "out.b": self.b_out}
        return {prefix + k: v for k, v in names.items()}

    def __call__(self, x, collect_probs=None):
        """x: (B, T, D). collect_probs, if a list, receives the (B, H, T, T)
        attention weights as a plain array (test hook)."""
        bsz, tt, d = x.shape
        h, hd = self.n_heads, self.d_head
        qkv = T.affine(x, self.w_qkv, self.b_qkv)

        def heads(lo):
            part = T.tslice(qkv, (Ellipsis, slice(lo, lo + d)))
            return T.transpose_axes(T.reshape(part, (bsz, tt, h, hd)), 1, 2)

        q, k, v = heads(0), heads(d), heads(2 * d)
        scores = T.scale(T.matmul(q, T.transpose_2d(k)), 1.0 / np.sqrt(hd))
        scores = T.add(scores, Tensor(causal_mask(tt)))
        att = T.softmax_last_dim(scores)
        if collect_probs is not None:
            collect_probs.append(att.data.copy())
        out = T.matmul(att, v)
        out = T.reshape(T.transpose_axes(out, 1, 2), (bsz, tt, d))
        return T.affine(out, self.w_out, self.b_out)


class TransformerBlock:
    """Pre-norm block: x + attn(ln(x)), then x + mlp(ln(x)); 4x gelu MLP."""

    def __init__(self, rng, d_model, n_heads, residual_scale=1.0):
        self.attn = CausalSelfAttention(rng, d_model, n_heads, residual_scale)
        d_mlp = 4 * d_model
        self.ln1_g = Tensor(np.ones(d_model), requires_grad=True)
        self.ln1_b = Tensor(np.zeros(d_model), requires_grad=True)
        self.ln2_g = Tensor(np.ones(d_model), requires_grad=True)
        self.ln2_b = Tensor(np.zeros(d_model), requires_grad=True)
        self.mlp_w1 = Tensor(rng.standard_normal((d_model, d_mlp)) / np.sqrt(d_model),
                             requires_grad=True)
        self.mlp_b1 = Tensor(np.zeros(d_mlp), requires_grad=True)
        self.mlp_w2 = Tensor(
            rng.standard_normal((d_mlp, d_model)) / np.sqrt(d_mlp) * residual_scale,
            requires_grad=True)
        self.mlp_b2 = Tensor(np.zeros(d_model), requires_grad=True)

    def named_params(self, prefix=""):
        names = {"ln1.gain": self.ln1_g, "ln1.bias": self.ln1_b,
                 "ln2.gain": self.ln2_g, "ln2.bias": self.ln2_b,
                 "mlp.w1": self.mlp_w1, "mlp.b1": self.mlp_b1,
                 "mlp.w2": self.mlp_w2, "mlp.b2": self.mlp_b2}
        out = {prefix + k: v for k, v in names.items()}
        out.update(self.attn.named_params(prefix + "attn."))
        return out

    def __call__(self, x, collect_probs=None):
        y = T.add(x, self.attn(T.layer_norm(x, self.ln1_g, self.ln1_b),
                               collect_probs=collect_probs))
        hidden = T.gelu(T.affine(T.layer_norm(y, self.ln2_g, self.ln2_b),
                                 self.mlp_w1, self.mlp_b1))
        return T.add(y, T.affine(hidden, self.mlp_w2, self.mlp_b2))
