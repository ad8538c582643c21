"""Transformer building blocks: patch embedding, attention variants, blocks.

Token layout is fixed everywhere: ``tokens[:, 0]`` is the class token and
``tokens[:, 1:]`` are the P patch tokens in raster order.

Three attention variants share one implementation:

* plain multi-head self-attention;
* graph-guided attention, where the pre-softmax logits ``Q K^T`` are
  multiplied elementwise by a constant ``(P+1) x (P+1)`` adjacency before
  the ``1/sqrt(d_head)`` scaling;
* transferability-aware attention, where the class-token row of the softmax
  weights is multiplied by ``[1; scores]`` after the softmax, with no
  renormalisation. Patch-token rows are left untouched.

Adjacencies and scores are numpy constants, so no gradient can reach them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import truncnorm

from tat import autodiff as ad
from tat.autodiff import Tensor

INIT_STD = 0.02


class ConfigError(ValueError):
    """Inconsistent layer configuration or missing kind-specific input."""


class ContractError(ValueError):
    """A constant input (adjacency or score) violates its value range."""


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD, dtype=np.float64):
    """Normal(0, std) truncated to +-2 std."""
    vals = truncnorm.rvs(-2.0, 2.0, loc=0.0, scale=std, size=shape, random_state=rng)
    return np.asarray(vals, dtype=dtype).reshape(shape)


class Module:
    """Minimal parameter container: ``named_parameters`` walks attributes."""

    def named_parameters(self, prefix=""):
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]


class Linear(Module):
    def __init__(self, d_in, d_out, rng, dtype=np.float64):
        self.weight = Tensor(trunc_normal(rng, (d_in, d_out), dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return ad.matmul(x, self.weight) + self.bias


class LayerNorm(Module):
    def __init__(self, d, dtype=np.float64, eps=1e-6):
        self.gain = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)
        self.eps = eps

    def __call__(self, x):
        return ad.layer_norm(x, self.gain, self.bias, self.eps)


class Mlp(Module):
    """Two affine maps with a GELU between them."""

    def __init__(self, d_in, d_hidden, d_out, rng, dtype=np.float64):
        self.fc1 = Linear(d_in, d_hidden, rng, dtype)
        self.fc2 = Linear(d_hidden, d_out, rng, dtype)

    def __call__(self, x):
        return self.fc2(ad.gelu(self.fc1(x)))


# --------------------------------------------------------------------------
# patch embedding
# --------------------------------------------------------------------------


def patchify(sc: np.ndarray, patch_size: int) -> np.ndarray:
    """Split ``[B, N, N]`` into ``[B, P, p*p]`` raster-ordered flattened patches."""
    b, n, n2 = sc.shape
    if n != n2:
        raise ConfigError(f"connectivity matrices must be square, got {sc.shape[1:]}")
    if n % patch_size:
        raise ConfigError(f"matrix side {n} is not divisible by patch size {patch_size}")
    g = n // patch_size
    x = sc.reshape(b, g, patch_size, g, patch_size).transpose(0, 1, 3, 2, 4)
    return np.ascontiguousarray(x.reshape(b, g * g, patch_size * patch_size))


class PatchEmbedding(Module):
    def __init__(self, n_nodes, patch_size, d_model, rng, dtype=np.float64):
        if n_nodes % patch_size:
            raise ConfigError(f"matrix side {n_nodes} is not divisible by patch size {patch_size}")
        self.patch_size = patch_size
        self.n_patches = (n_nodes // patch_size) ** 2
        self.proj = Linear(patch_size * patch_size, d_model, rng, dtype)
        self.cls_token = Tensor(trunc_normal(rng, (1, 1, d_model), dtype=dtype), requires_grad=True)
        self.pos_embed = Tensor(
            trunc_normal(rng, (1, self.n_patches + 1, d_model), dtype=dtype), requires_grad=True
        )

    def __call__(self, sc) -> Tensor:
        sc = np.asarray(sc.data if isinstance(sc, Tensor) else sc, dtype=self.pos_embed.dtype)
        patches = Tensor(patchify(sc, self.patch_size))
        tokens = self.proj(patches)
        b, _, d = tokens.shape
        cls = ad.broadcast_to(self.cls_token, (b, 1, d))
        return ad.concat([cls, tokens], axis=1) + self.pos_embed


def patch_embed(sc, embedding: PatchEmbedding) -> Tensor:
    return embedding(sc)


# --------------------------------------------------------------------------
# attention
# --------------------------------------------------------------------------


@dataclass
class AttentionParams:
    """Per-head projections packed column-wise: head ``h`` owns columns
    ``h*d_head:(h+1)*d_head`` of ``w_q``, ``w_k`` and ``w_v``."""

    w_q: Tensor
    b_q: Tensor
    w_k: Tensor
    b_k: Tensor
    w_v: Tensor
    b_v: Tensor
    w_o: Tensor
    b_o: Tensor
    n_heads: int
    d_head: int

    def __post_init__(self):
        d_model = self.w_q.shape[0]
        inner = self.n_heads * self.d_head
        for name in ("w_q", "w_k", "w_v"):
            if getattr(self, name).shape != (d_model, inner):
                raise ConfigError(f"{name} has shape {getattr(self, name).shape}, expected {(d_model, inner)}")
        if self.w_o.shape != (inner, d_model):
            raise ConfigError(f"w_o has shape {self.w_o.shape}, expected {(inner, d_model)}")


class MultiHeadAttention(Module):
    def __init__(self, d_model, n_heads, d_head, rng, dtype=np.float64):
        inner = n_heads * d_head
        self.q = Linear(d_model, inner, rng, dtype)
        self.k = Linear(d_model, inner, rng, dtype)
        self.v = Linear(d_model, inner, rng, dtype)
        self.o = Linear(inner, d_model, rng, dtype)
        self.n_heads = n_heads
        self.d_head = d_head

    @property
    def params(self) -> AttentionParams:
        return AttentionParams(
            self.q.weight, self.q.bias, self.k.weight, self.k.bias,
            self.v.weight, self.v.bias, self.o.weight, self.o.bias,
            self.n_heads, self.d_head,
        )


def _split_heads(x: Tensor, n_heads: int, d_head: int) -> Tensor:
    b, t, _ = x.shape
    return ad.transpose(ad.reshape(x, (b, t, n_heads, d_head)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, t, h * dh))


def pad_adjacency(a: np.ndarray) -> np.ndarray:
    """Embed a ``P x P`` patch adjacency into ``(P+1) x (P+1)`` with a ones
    class-token row and column."""
    p = a.shape[0]
    full = np.ones((p + 1, p + 1), dtype=a.dtype)
    full[1:, 1:] = a
    return full


def class_row_mask(scores: np.ndarray, n_tokens: int) -> np.ndarray:
    """``[B, 1, T, T]`` multiplier: ones except class-token row = ``[1; scores]``."""
    b = scores.shape[0]
    mask = np.ones((b, 1, n_tokens, n_tokens), dtype=scores.dtype)
    mask[:, 0, 0, 1:] = scores
    return mask


def _check_unit_range(name, arr):
    if arr.size and (not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0):
        raise ContractError(f"{name} entries must lie in [0, 1]")


def attention(tokens: Tensor, params: AttentionParams, adjacency=None, scores=None) -> Tensor:
    """Shared multi-head attention kernel behind all three variants.

    ``adjacency`` is a ``[T, T]`` array multiplied into ``Q K^T`` before
    scaling; ``scores`` is ``[B, P]`` multiplied into the class-token row of
    the softmax weights.
    """
    b, t, _ = tokens.shape
    h, dh = params.n_heads, params.d_head
    q = _split_heads(ad.matmul(tokens, params.w_q) + params.b_q, h, dh)
    k = _split_heads(ad.matmul(tokens, params.w_k) + params.b_k, h, dh)
    v = _split_heads(ad.matmul(tokens, params.w_v) + params.b_v, h, dh)
    logits = ad.matmul(q, ad.swapaxes(k, -1, -2))
    if adjacency is not None:
        adjacency = np.asarray(adjacency, dtype=tokens.dtype)
        if adjacency.shape != (t, t):
            raise ConfigError(f"adjacency shape {adjacency.shape} does not match {t} tokens")
        logits = logits * Tensor(adjacency)
    logits = ad.scale(logits, 1.0 / math.sqrt(dh))
    weights = ad.softmax(logits, axis=-1)
    if scores is not None:
        scores = np.asarray(scores, dtype=tokens.dtype)
        if scores.shape != (b, t - 1):
            raise ConfigError(f"scores shape {scores.shape} does not match batch {b} x {t - 1} patches")
        weights = weights * Tensor(class_row_mask(scores, t))
    out = _merge_heads(ad.matmul(weights, v))
    return ad.matmul(out, params.w_o) + params.b_o


def self_attention(tokens: Tensor, params: AttentionParams) -> Tensor:
    return attention(tokens, params)


def tag_guided_sa(tokens: Tensor, params: AttentionParams, a_full) -> Tensor:
    a_full = np.asarray(a_full.data if isinstance(a_full, Tensor) else a_full)
    _check_unit_range("adjacency", a_full[1:, 1:])
    if not (np.all(a_full[0, :] == 1.0) and np.all(a_full[:, 0] == 1.0)):
        raise ContractError("adjacency class-token row and column must be 1")
    return attention(tokens, params, adjacency=a_full)


def mtas(tokens: Tensor, params: AttentionParams, scores) -> Tensor:
    scores = np.asarray(scores.data if isinstance(scores, Tensor) else scores)
    _check_unit_range("scores", scores)
    return attention(tokens, params, scores=scores)


def tas(q_cls: Tensor, k: Tensor, v: Tensor, scores) -> Tensor:
    """Single-head class-token attention with post-softmax score weighting.

    ``q_cls`` is ``[B, d]``, ``k`` and ``v`` are ``[B, P+1, d]``, ``scores``
    is ``[B, P]``. Returns ``[B, d]``.
    """
    q_cls, k, v = ad.as_tensor(q_cls), ad.as_tensor(k), ad.as_tensor(v)
    scores = np.asarray(scores.data if isinstance(scores, Tensor) else scores, dtype=k.dtype)
    _check_unit_range("scores", scores)
    b, t, d = k.shape
    q3 = ad.reshape(q_cls, (b, 1, d))
    logits = ad.scale(ad.matmul(q3, ad.swapaxes(k, -1, -2)), 1.0 / math.sqrt(d))
    w = ad.softmax(logits, axis=-1)
    keep = np.concatenate([np.ones((b, 1), dtype=k.dtype), scores], axis=1).reshape(b, 1, t)
    return ad.reshape(ad.matmul(w * Tensor(keep), v), (b, v.shape[-1]))


# --------------------------------------------------------------------------
# transformer block
# --------------------------------------------------------------------------

BLOCK_KINDS = ("plain", "tag_guided", "tat_final")


class TransformerBlock(Module):
    """Pre-norm residual block: ``x + Attn(LN(x))`` then ``x + MLP(LN(x))``."""

    def __init__(self, d_model, n_heads, d_head, rng, kind="plain", mlp_ratio=4, dtype=np.float64):
        if kind not in BLOCK_KINDS:
            raise ConfigError(f"unknown block kind {kind!r}")
        self.kind = kind
        self.ln1 = LayerNorm(d_model, dtype)
        self.attn = MultiHeadAttention(d_model, n_heads, d_head, rng, dtype)
        self.ln2 = LayerNorm(d_model, dtype)
        self.mlp = Mlp(d_model, mlp_ratio * d_model, d_model, rng, dtype)

    def __call__(self, x: Tensor, kind=None, a_full=None, score_fn=None, scores=None):
        """Apply the block.

        ``kind`` overrides the configured kind. ``tag_guided`` needs
        ``a_full``. ``tat_final`` needs ``score_fn`` (mapping the normalised
        patch tokens to ``[B, P]`` scores) or precomputed ``scores``.
        """
        kind = kind or self.kind
        h = self.ln1(x)
        if kind == "plain":
            att = self_attention(h, self.attn.params)
        elif kind == "tag_guided":
            if a_full is None:
                raise ConfigError("tag_guided block needs an adjacency")
            att = tag_guided_sa(h, self.attn.params, a_full)
        else:
            if scores is None:
                if score_fn is None:
                    raise ConfigError("tat_final block needs a score function or scores")
                scores = score_fn(h[:, 1:, :])
            att = mtas(h, self.attn.params, scores)
        x = x + att
        return x + self.mlp(self.ln2(x))


def transformer_block(tokens, block: TransformerBlock, attention_kind=None, **kw):
    return block(tokens, kind=attention_kind, **kw)
