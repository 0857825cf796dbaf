"""Multi-headed self/cross attention and pre-norm transformer layers.

Self-attention projects queries, keys, and values from one token set;
cross-attention takes queries from one set and keys/values from another.
Layers are pre-norm residual blocks: attention then a GELU MLP, each applied
to the layer-normalized input and added back.

Parameters are stored per head (each head owns its own (d, d_head) query,
key, and value projections); the forward pass concatenates them into single
(d, d) matmuls, which is arithmetically the per-head computation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import (
    ShapeError,
    Tensor,
    add,
    concat,
    gelu,
    layer_norm,
    matmul,
    mul,
    reshape,
    scale,
    slice_axis,
    softmax,
    transpose,
)
from .tokenizer import EmbeddingParams


@dataclass
class AttentionParams:
    """Per-head projections plus the shared output projection."""

    wq: list[Tensor]              # heads x (d, d_head)
    wk: list[Tensor]
    wv: list[Tensor]
    bq: list[Tensor]              # heads x (d_head,)
    bk: list[Tensor]
    bv: list[Tensor]
    wo: Tensor                    # (d, d)
    bo: Tensor                    # (d,)

    @property
    def heads(self) -> int:
        return len(self.wq)

    @property
    def dim(self) -> int:
        return self.wo.shape[0]

    @property
    def head_dim(self) -> int:
        return self.wq[0].shape[1]

    def named(self, prefix: str):
        for h in range(self.heads):
            yield f"{prefix}.h{h}.wq", self.wq[h]
            yield f"{prefix}.h{h}.wk", self.wk[h]
            yield f"{prefix}.h{h}.wv", self.wv[h]
            yield f"{prefix}.h{h}.bq", self.bq[h]
            yield f"{prefix}.h{h}.bk", self.bk[h]
            yield f"{prefix}.h{h}.bv", self.bv[h]
        yield f"{prefix}.wo", self.wo
        yield f"{prefix}.bo", self.bo


@dataclass
class LayerParams:
    attn: AttentionParams
    ln1_gamma: Tensor
    ln1_beta: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor
    mlp_w1: Tensor                # (d, d_mlp)
    mlp_b1: Tensor
    mlp_w2: Tensor                # (d_mlp, d)
    mlp_b2: Tensor

    def named(self, prefix: str):
        yield from self.attn.named(f"{prefix}.attn")
        yield f"{prefix}.ln1.gamma", self.ln1_gamma
        yield f"{prefix}.ln1.beta", self.ln1_beta
        yield f"{prefix}.ln2.gamma", self.ln2_gamma
        yield f"{prefix}.ln2.beta", self.ln2_beta
        yield f"{prefix}.mlp.w1", self.mlp_w1
        yield f"{prefix}.mlp.b1", self.mlp_b1
        yield f"{prefix}.mlp.w2", self.mlp_w2
        yield f"{prefix}.mlp.b2", self.mlp_b2


@dataclass
class ModalityParams:
    """One modality's embedding plus its stack of transformer layers."""

    embed: EmbeddingParams
    layers: list[LayerParams]

    def named(self, prefix: str):
        yield from self.embed.named(f"{prefix}.embed")
        for i, layer in enumerate(self.layers):
            yield from layer.named(f"{prefix}.layer{i}")


@dataclass
class AttentionRecord:
    """Row-stochastic attention of one (cross-)attention call.

    ``weights`` is (heads, Nq, Nk) for unbatched inputs or (B, heads, Nq, Nk)
    for batched ones. ``query_ids``/``key_ids`` are global token indices
    filled in by the model that owns the token layout.
    """

    weights: np.ndarray
    query_ids: np.ndarray | None = None
    key_ids: np.ndarray | None = None

    def head_mean(self) -> np.ndarray:
        return self.weights.mean(axis=-3)


def _ensure_batched(x: Tensor) -> tuple[Tensor, bool]:
    if len(x.shape) == 2:
        return reshape(x, (1,) + x.shape), False
    if len(x.shape) == 3:
        return x, True
    raise ShapeError(f"token tensors must be rank 2 or 3, got {x.shape}")


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return transpose(reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def mca(
    x: Tensor,
    y: Tensor,
    params: AttentionParams,
    record: bool = False,
    key_mask: np.ndarray | None = None,
) -> tuple[Tensor, AttentionRecord | None]:
    """Cross attention: queries from ``x``, keys and values from ``y``.

    ``key_mask`` (Nk,) of 0/1 zeroes attention columns after the softmax;
    this is an analysis hook for severing flow through chosen keys, so the
    masked rows are intentionally left unnormalized.
    """
    same = x is y
    x, x_batched = _ensure_batched(x)
    y = x if same else _ensure_batched(y)[0]
    d = params.dim
    if x.shape[-1] != d or y.shape[-1] != d:
        raise ShapeError(f"token width must be {d}, got {x.shape} and {y.shape}")
    heads, dh = params.heads, params.head_dim

    if x is y:
        # Self attention: one fused gemm for q, k, and v.
        wqkv = concat(params.wq + params.wk + params.wv, axis=1)      # (d, 3d)
        bqkv = concat(params.bq + params.bk + params.bv, axis=0)
        qkv = add(matmul(x, wqkv), bqkv)
        q = _split_heads(slice_axis(qkv, -1, 0, d), heads)
        k = _split_heads(slice_axis(qkv, -1, d, 2 * d), heads)
        v = _split_heads(slice_axis(qkv, -1, 2 * d, 3 * d), heads)
    else:
        wq = concat(params.wq, axis=1)                                # (d, d)
        wkv = concat(params.wk + params.wv, axis=1)
        q = _split_heads(add(matmul(x, wq), concat(params.bq, axis=0)), heads)
        kv = add(matmul(y, wkv), concat(params.bk + params.bv, axis=0))
        k = _split_heads(slice_axis(kv, -1, 0, d), heads)
        v = _split_heads(slice_axis(kv, -1, d, 2 * d), heads)

    scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    attn = softmax(scores, axis=-1)                  # (B, H, Nq, Nk)
    rec = None
    if record:
        w = attn.data.copy()
        rec = AttentionRecord(weights=w if x_batched else w[0])
    if key_mask is not None:
        attn = mul(attn, Tensor(np.asarray(key_mask, dtype=np.float64)))

    ctx = matmul(attn, v)                            # (B, H, Nq, dh)
    b, nq = x.shape[0], x.shape[1]
    merged = reshape(transpose(ctx, (0, 2, 1, 3)), (b, nq, heads * dh))
    out = add(matmul(merged, params.wo), params.bo)
    if not x_batched:
        out = reshape(out, (nq, d))
    return out, rec


def msa(
    x: Tensor,
    params: AttentionParams,
    record: bool = False,
    key_mask: np.ndarray | None = None,
) -> tuple[Tensor, AttentionRecord | None]:
    """Self attention; queries, keys, and values all from ``x``."""
    return mca(x, x, params, record=record, key_mask=key_mask)


def transformer_layer(
    z: Tensor,
    params: LayerParams,
    record: bool = False,
    branch_scale: float = 1.0,
    key_mask: np.ndarray | None = None,
) -> tuple[Tensor, AttentionRecord | None]:
    """Pre-norm block: z + MSA(LN(z)), then + MLP(LN(.)).

    ``branch_scale`` multiplies both residual branches (stochastic-depth
    rescaling); 1.0 is the plain layer.
    """
    attn_out, rec = msa(layer_norm(z, params.ln1_gamma, params.ln1_beta), params.attn,
                        record=record, key_mask=key_mask)
    if branch_scale != 1.0:
        attn_out = scale(attn_out, branch_scale)
    y = add(z, attn_out)
    h = layer_norm(y, params.ln2_gamma, params.ln2_beta)
    h = add(matmul(h, params.mlp_w1), params.mlp_b1)
    h = add(matmul(gelu(h), params.mlp_w2), params.mlp_b2)
    if branch_scale != 1.0:
        h = scale(h, branch_scale)
    return add(y, h), rec


def cross_transformer_layer(
    z1: Tensor,
    z2: Tensor,
    params: LayerParams,
    record: bool = False,
    branch_scale: float = 1.0,
    key_mask: np.ndarray | None = None,
) -> tuple[Tensor, AttentionRecord | None]:
    """Pre-norm block with cross attention: z1 + MCA(LN(z1), LN(z2)), + MLP.

    ``z1`` is the query set being updated; ``z2`` supplies keys and values
    (it may be a superset containing ``z1``). Both are normalized with the
    same first layer-norm parameters.
    """
    attn_out, rec = mca(
        layer_norm(z1, params.ln1_gamma, params.ln1_beta),
        layer_norm(z2, params.ln1_gamma, params.ln1_beta),
        params.attn,
        record=record,
        key_mask=key_mask,
    )
    if branch_scale != 1.0:
        attn_out = scale(attn_out, branch_scale)
    y = add(z1, attn_out)
    h = layer_norm(y, params.ln2_gamma, params.ln2_beta)
    h = add(matmul(h, params.mlp_w1), params.mlp_b1)
    h = add(matmul(gelu(h), params.mlp_w2), params.mlp_b2)
    if branch_scale != 1.0:
        h = scale(h, branch_scale)
    return add(y, h), rec
