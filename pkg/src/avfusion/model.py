"""The audiovisual fusion transformer.

Two token towers (frames, spectrogram) run unimodally for the first
``fusion_layer`` layers; the remaining layers couple them with one of three
strategies:

* ``vanilla-shared``: one self-attention layer over the concatenated tokens
  with shared weights;
* ``vanilla-cross``: each modality's tokens are updated by cross attention
  against the full concatenated set, with that modality's own weights;
* ``bottleneck``: each modality runs a self-attention layer over its own
  tokens plus a small set of shared latent fusion tokens. The latents are
  the only channel between modalities. In symmetric mode both modalities
  update them in parallel from the same input latents and the results are
  averaged; in rgb-first/spec-first mode the updates run sequentially.

Classification reads the final CLS token of each modality through one shared
linear head and averages the pre-softmax logits.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import (
    AttentionParams,
    AttentionRecord,
    LayerParams,
    ModalityParams,
    cross_transformer_layer,
    transformer_layer,
)
from .config import ModelConfig
from .engine import Tensor, add, concat, expand_batch, matmul, reshape, scale, slice_axis
from .tokenizer import EmbeddingParams, embed_patch_batch

BOTTLENECK_INIT_STD = 0.02


@dataclass
class ClassifierHead:
    """Linear map(s) from CLS representation to logits, shared across
    modalities. One (w, b) pair in single mode, two in verb-noun mode."""

    weights: list[tuple[Tensor, Tensor]]

    def apply(self, cls_vec: Tensor) -> list[Tensor]:
        return [add(matmul(cls_vec, w), b) for w, b in self.weights]

    def named(self, prefix: str):
        for i, (w, b) in enumerate(self.weights):
            yield f"{prefix}.h{i}.w", w
            yield f"{prefix}.h{i}.b", b


@dataclass
class ModelParams:
    rgb: ModalityParams | None
    spec: ModalityParams | None
    fsn: Tensor | None            # (B, d) learned fusion latents
    head: ClassifierHead

    def named(self):
        seen: set[int] = set()
        if self.rgb is not None:
            for name, t in self.rgb.named("rgb"):
                seen.add(id(t))
                yield name, t
        if self.spec is not None:
            for name, t in self.spec.named("spec"):
                if id(t) in seen:
                    continue  # shared encoder weights already emitted
                seen.add(id(t))
                yield name, t
        if self.fsn is not None:
            yield "fsn", self.fsn
        yield from self.head.named("head")

    def trainable(self) -> list[Tensor]:
        return [t for _, t in self.named()]


@dataclass(frozen=True)
class TokenLayout:
    """Global token index layout: [rgb block | fsn block | spec block]."""

    n_rgb: int
    n_fsn: int
    n_spec: int

    @property
    def total(self) -> int:
        return self.n_rgb + self.n_fsn + self.n_spec

    @property
    def rgb_ids(self) -> np.ndarray:
        return np.arange(0, self.n_rgb)

    @property
    def fsn_ids(self) -> np.ndarray:
        return np.arange(self.n_rgb, self.n_rgb + self.n_fsn)

    @property
    def spec_ids(self) -> np.ndarray:
        return np.arange(self.n_rgb + self.n_fsn, self.total)

    @property
    def rgb_cls_id(self) -> int:
        return 0

    @property
    def spec_cls_id(self) -> int:
        return self.n_rgb + self.n_fsn


@dataclass
class LayerTrace:
    """Attention recorded for one layer, tagged with the fusion topology."""

    index: int
    kind: str                     # unimodal | shared | cross | bottleneck
    sequential: bool
    records: list[AttentionRecord]


@dataclass
class ForwardResult:
    logits: Tensor | None         # (B, classes); None in verb-noun mode
    head_logits: list[Tensor]     # per-head averaged logits
    z_rgb: Tensor | None
    z_spec: Tensor | None
    fsn: Tensor | None
    traces: list[LayerTrace] | None
    layout: TokenLayout
    layer_states: list[dict[str, Tensor | None]]


# ---------------------------------------------------------------------------
# Initialization.

def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    x = rng.normal(0.0, std, size=shape)
    while True:
        bad = np.abs(x) > 2.0 * std
        if not bad.any():
            return x
        x[bad] = rng.normal(0.0, std, size=int(bad.sum()))


def _init_attention(rng: np.random.Generator, dim: int, heads: int) -> AttentionParams:
    dh = dim // heads
    mk = lambda shape: Tensor(_trunc_normal(rng, shape, 0.02), requires_grad=True)
    zeros = lambda shape: Tensor(np.zeros(shape), requires_grad=True)
    return AttentionParams(
        wq=[mk((dim, dh)) for _ in range(heads)],
        wk=[mk((dim, dh)) for _ in range(heads)],
        wv=[mk((dim, dh)) for _ in range(heads)],
        bq=[zeros((dh,)) for _ in range(heads)],
        bk=[zeros((dh,)) for _ in range(heads)],
        bv=[zeros((dh,)) for _ in range(heads)],
        wo=mk((dim, dim)),
        bo=zeros((dim,)),
    )


def _init_layer(rng: np.random.Generator, dim: int, mlp_dim: int, heads: int) -> LayerParams:
    mk = lambda shape: Tensor(_trunc_normal(rng, shape, 0.02), requires_grad=True)
    zeros = lambda shape: Tensor(np.zeros(shape), requires_grad=True)
    ones = lambda shape: Tensor(np.ones(shape), requires_grad=True)
    return LayerParams(
        attn=_init_attention(rng, dim, heads),
        ln1_gamma=ones((dim,)),
        ln1_beta=zeros((dim,)),
        ln2_gamma=ones((dim,)),
        ln2_beta=zeros((dim,)),
        mlp_w1=mk((dim, mlp_dim)),
        mlp_b1=zeros((mlp_dim,)),
        mlp_w2=mk((mlp_dim, dim)),
        mlp_b2=zeros((dim,)),
    )


def _init_embedding(rng: np.random.Generator, patch_dim: int, dim: int, n_max: int) -> EmbeddingParams:
    return EmbeddingParams(
        proj=Tensor(_trunc_normal(rng, (patch_dim, dim), 0.02), requires_grad=True),
        cls=Tensor(rng.normal(0.0, 0.02, size=(dim,)), requires_grad=True),
        pos=Tensor(rng.normal(0.0, 0.02, size=(n_max + 1, dim)), requires_grad=True),
    )


def init_params(config: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """Fresh parameters: truncated-normal (std 0.02) projections, Gaussian
    (std 0.02) positions / CLS / fusion latents, unit layer norms, and a
    zero classifier."""
    config.validate()
    tok = config.tokenizer
    d, heads, mlp = config.dim, config.heads, config.mlp_dim

    def tower(patch_dim: int, n_tokens: int) -> ModalityParams:
        return ModalityParams(
            embed=_init_embedding(rng, patch_dim, d, n_tokens),
            layers=[_init_layer(rng, d, mlp, heads) for _ in range(config.depth)],
        )

    rgb = spec = None
    if config.modality in ("av", "rgb"):
        rgb = tower(tok.rgb_patch_dim, tok.rgb_token_count())
    if config.modality in ("av", "spec"):
        spec = tower(tok.spec_patch_dim, tok.spec_token_count())
    if config.modality == "av" and config.share_weights:
        spec.layers = rgb.layers  # shared encoder, separate embeddings

    fsn = None
    if config.modality == "av" and config.strategy == "bottleneck" and config.bottleneck_tokens > 0:
        fsn = Tensor(
            rng.normal(0.0, BOTTLENECK_INIT_STD, size=(config.bottleneck_tokens, d)),
            requires_grad=True,
        )

    if config.head_mode == "verb-noun":
        sizes = [config.verb_classes, config.noun_classes]
    else:
        sizes = [config.num_classes]
    head = ClassifierHead(
        weights=[
            (Tensor(np.zeros((d, c)), requires_grad=True), Tensor(np.zeros(c), requires_grad=True))
            for c in sizes
        ]
    )
    return ModelParams(rgb=rgb, spec=spec, fsn=fsn, head=head)


# ---------------------------------------------------------------------------
# Stochastic depth.

def stochastic_depth(layer_fn, z: Tensor, p: float, rng: np.random.Generator | None, training: bool):
    """Skip the layer with probability ``p`` during training; otherwise run
    it with residual branches scaled by 1/(1-p). Inference always applies
    the layer unscaled. ``layer_fn(z, branch_scale)`` must return z'."""
    if not training or p <= 0.0:
        return layer_fn(z, 1.0)
    if rng.uniform() < p:
        return z
    return layer_fn(z, 1.0 / (1.0 - p))


class _DropSchedule:
    """Per-layer keep/scale decisions for one forward pass."""

    def __init__(self, p: float, rng: np.random.Generator | None, training: bool):
        self.p = p if training else 0.0
        self.rng = rng

    def draw(self) -> float | None:
        """None means skip the layer; otherwise the branch scale to use."""
        if self.p <= 0.0:
            return 1.0
        if self.rng.uniform() < self.p:
            return None
        return 1.0 / (1.0 - self.p)


# ---------------------------------------------------------------------------
# The model.

class FusionModel:
    def __init__(self, config: ModelConfig, params: ModelParams):
        config.validate()
        self.config = config
        self.params = params

    # -- token bookkeeping --

    def token_layout(self) -> TokenLayout:
        tok = self.config.tokenizer
        n_rgb = tok.rgb_token_count() + 1 if self.config.modality in ("av", "rgb") else 0
        n_spec = tok.spec_token_count() + 1 if self.config.modality in ("av", "spec") else 0
        has_fsn = (
            self.config.modality == "av"
            and self.config.strategy == "bottleneck"
            and self.config.fusion_layer < self.config.depth
        )
        n_fsn = self.config.bottleneck_tokens if has_fsn else 0
        return TokenLayout(n_rgb=n_rgb, n_fsn=n_fsn, n_spec=n_spec)

    # -- forward --

    def forward_patches(
        self,
        rgb_patches: Tensor | np.ndarray | None,
        spec_patches: Tensor | np.ndarray | None,
        training: bool = False,
        drop_rng: np.random.Generator | None = None,
        stochastic_depth_p: float = 0.0,
        collect_attention: bool = False,
        mask_bottleneck_keys: bool = False,
    ) -> ForwardResult:
        """Run the network on batched patch arrays, (B, N, patch_dim)."""
        cfg = self.config
        layout = self.token_layout()
        if cfg.modality == "rgb":
            return self._forward_unimodal_tower(
                rgb_patches, self.params.rgb, layout, training, drop_rng,
                stochastic_depth_p, collect_attention, "rgb",
            )
        if cfg.modality == "spec":
            return self._forward_unimodal_tower(
                spec_patches, self.params.spec, layout, training, drop_rng,
                stochastic_depth_p, collect_attention, "spec",
            )

        drops = _DropSchedule(stochastic_depth_p, drop_rng, training)
        z_rgb = embed_patch_batch(_as_tensor3(rgb_patches), self.params.rgb.embed)
        z_spec = embed_patch_batch(_as_tensor3(spec_patches), self.params.spec.embed)
        batch = z_rgb.shape[0]
        traces: list[LayerTrace] | None = [] if collect_attention else None
        states: list[dict[str, Tensor | None]] = []

        fsn = None
        for l in range(cfg.fusion_layer):
            z_rgb, rec_r = self._apply_self(z_rgb, self.params.rgb.layers[l], drops, collect_attention)
            z_spec, rec_s = self._apply_self(z_spec, self.params.spec.layers[l], drops, collect_attention)
            if collect_attention:
                traces.append(LayerTrace(
                    index=l, kind="unimodal", sequential=False,
                    records=_tag_records(layout, [(rec_r, "rgb", "rgb"), (rec_s, "spec", "spec")]),
                ))
            states.append({"rgb": z_rgb, "fsn": None, "spec": z_spec})

        if cfg.fusion_layer < cfg.depth and layout.n_fsn > 0:
            fsn = expand_batch(self.params.fsn, batch)  # (B, n_fsn, d)

        for l in range(cfg.fusion_layer, cfg.depth):
            z_rgb, z_spec, fsn, trace = self._fusion_layer(
                l, z_rgb, z_spec, fsn, layout, drops, collect_attention, mask_bottleneck_keys
            )
            if collect_attention:
                traces.append(trace)
            states.append({"rgb": z_rgb, "fsn": fsn, "spec": z_spec})

        cls_rgb = reshape(slice_axis(z_rgb, 1, 0, 1), (batch, cfg.dim))
        cls_spec = reshape(slice_axis(z_spec, 1, 0, 1), (batch, cfg.dim))
        head_logits = [
            scale(add(lr, ls), 0.5)
            for lr, ls in zip(self.params.head.apply(cls_rgb), self.params.head.apply(cls_spec))
        ]
        logits = head_logits[0] if cfg.head_mode == "single" else None
        return ForwardResult(
            logits=logits, head_logits=head_logits, z_rgb=z_rgb, z_spec=z_spec,
            fsn=fsn, traces=traces, layout=layout, layer_states=states,
        )

    def _forward_unimodal_tower(
        self, patches, tower: ModalityParams, layout: TokenLayout, training: bool,
        drop_rng, stochastic_depth_p: float, collect_attention: bool, modality: str,
    ) -> ForwardResult:
        drops = _DropSchedule(stochastic_depth_p, drop_rng, training)
        z = embed_patch_batch(_as_tensor3(patches), tower.embed)
        batch = z.shape[0]
        traces = [] if collect_attention else None
        states: list[dict[str, Tensor | None]] = []
        for l in range(self.config.depth):
            z, rec = self._apply_self(z, tower.layers[l], drops, collect_attention)
            if collect_attention:
                traces.append(LayerTrace(
                    index=l, kind="unimodal", sequential=False,
                    records=_tag_records(layout, [(rec, modality, modality)]),
                ))
            states.append({"rgb": z if modality == "rgb" else None,
                           "fsn": None,
                           "spec": z if modality == "spec" else None})
        cls_vec = reshape(slice_axis(z, 1, 0, 1), (batch, self.config.dim))
        head_logits = self.params.head.apply(cls_vec)
        logits = head_logits[0] if self.config.head_mode == "single" else None
        return ForwardResult(
            logits=logits, head_logits=head_logits,
            z_rgb=z if modality == "rgb" else None,
            z_spec=z if modality == "spec" else None,
            fsn=None, traces=traces, layout=layout, layer_states=states,
        )

    def _apply_self(self, z, layer: LayerParams, drops: _DropSchedule, record: bool):
        s = drops.draw()
        if s is None:
            return z, None
        return transformer_layer(z, layer, record=record, branch_scale=s)

    def _fusion_layer(
        self, l: int, z_rgb, z_spec, fsn, layout: TokenLayout,
        drops: _DropSchedule, record: bool, mask_fsn: bool,
    ):
        cfg = self.config
        n_rgb, n_fsn, n_spec = layout.n_rgb, layout.n_fsn, layout.n_spec

        if cfg.strategy == "vanilla-shared":
            s = drops.draw()
            if s is None:
                return z_rgb, z_spec, fsn, LayerTrace(l, "shared", False, [])
            both = concat([z_rgb, z_spec], axis=1)
            out, rec = transformer_layer(both, self.params.rgb.layers[l], record=record, branch_scale=s)
            trace = LayerTrace(l, "shared", False,
                               _tag_records(layout, [(rec, "all", "all")]))
            return slice_axis(out, 1, 0, n_rgb), slice_axis(out, 1, n_rgb, n_rgb + n_spec), fsn, trace

        if cfg.strategy == "vanilla-cross":
            s = drops.draw()
            if s is None:
                return z_rgb, z_spec, fsn, LayerTrace(l, "cross", False, [])
            full = concat([z_rgb, z_spec], axis=1)
            new_rgb, rec_r = cross_transformer_layer(
                z_rgb, full, self.params.rgb.layers[l], record=record, branch_scale=s)
            new_spec, rec_s = cross_transformer_layer(
                z_spec, full, self.params.spec.layers[l], record=record, branch_scale=s)
            trace = LayerTrace(l, "cross", False,
                               _tag_records(layout, [(rec_r, "rgb", "all"), (rec_s, "spec", "all")]))
            return new_rgb, new_spec, fsn, trace

        # bottleneck
        if n_fsn == 0:
            z_rgb, rec_r = self._apply_self(z_rgb, self.params.rgb.layers[l], drops, record)
            z_spec, rec_s = self._apply_self(z_spec, self.params.spec.layers[l], drops, record)
            trace = LayerTrace(l, "unimodal", False,
                               _tag_records(layout, [(rec_r, "rgb", "rgb"), (rec_s, "spec", "spec")]))
            return z_rgb, z_spec, fsn, trace

        s = drops.draw()
        if s is None:
            return z_rgb, z_spec, fsn, LayerTrace(l, "bottleneck", False, [])

        mask_rgb = _fsn_key_mask(n_rgb, n_fsn) if mask_fsn else None
        mask_spec = _fsn_key_mask(n_spec, n_fsn) if mask_fsn else None

        def sub_update(z, latents, layer, key_mask):
            n = z.shape[1]
            block = concat([z, latents], axis=1)
            out, rec = transformer_layer(block, layer, record=record,
                                         branch_scale=s, key_mask=key_mask)
            return slice_axis(out, 1, 0, n), slice_axis(out, 1, n, n + n_fsn), rec

        if cfg.update_mode == "symmetric":
            new_rgb, fsn_rgb, rec_r = sub_update(z_rgb, fsn, self.params.rgb.layers[l], mask_rgb)
            new_spec, fsn_spec, rec_s = sub_update(z_spec, fsn, self.params.spec.layers[l], mask_spec)
            new_fsn = scale(add(fsn_rgb, fsn_spec), 0.5)
            trace = LayerTrace(l, "bottleneck", False,
                               _tag_records(layout, [(rec_r, "rgb+fsn", "rgb+fsn"),
                                                     (rec_s, "spec+fsn", "spec+fsn")]))
            return new_rgb, new_spec, new_fsn, trace

        first_rgb = cfg.update_mode == "rgb-first"
        if first_rgb:
            new_rgb, fsn_mid, rec_1 = sub_update(z_rgb, fsn, self.params.rgb.layers[l], mask_rgb)
            new_spec, new_fsn, rec_2 = sub_update(z_spec, fsn_mid, self.params.spec.layers[l], mask_spec)
            tags = [(rec_1, "rgb+fsn", "rgb+fsn"), (rec_2, "spec+fsn", "spec+fsn")]
        else:
            new_spec, fsn_mid, rec_1 = sub_update(z_spec, fsn, self.params.spec.layers[l], mask_spec)
            new_rgb, new_fsn, rec_2 = sub_update(z_rgb, fsn_mid, self.params.rgb.layers[l], mask_rgb)
            tags = [(rec_1, "spec+fsn", "spec+fsn"), (rec_2, "rgb+fsn", "rgb+fsn")]
        trace = LayerTrace(l, "bottleneck", True, _tag_records(layout, tags))
        return new_rgb, new_spec, new_fsn, trace


def _as_tensor3(x) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    if len(t.shape) != 3:
        raise ValueError(f"patch batches must be (B, N, patch_dim), got {t.shape}")
    return t


def _fsn_key_mask(n_tokens: int, n_fsn: int) -> np.ndarray:
    mask = np.ones(n_tokens + n_fsn)
    mask[n_tokens:] = 0.0
    return mask


def _ids_for(layout: TokenLayout, tag: str) -> np.ndarray:
    if tag == "rgb":
        return layout.rgb_ids
    if tag == "spec":
        return layout.spec_ids
    if tag == "all":
        return np.concatenate([layout.rgb_ids, layout.spec_ids])
    if tag == "rgb+fsn":
        return np.concatenate([layout.rgb_ids, layout.fsn_ids])
    if tag == "spec+fsn":
        return np.concatenate([layout.spec_ids, layout.fsn_ids])
    raise ValueError(f"unknown token tag {tag!r}")


def _tag_records(layout: TokenLayout, tagged) -> list[AttentionRecord]:
    out = []
    for rec, q_tag, k_tag in tagged:
        if rec is None:
            continue
        rec.query_ids = _ids_for(layout, q_tag)
        rec.key_ids = _ids_for(layout, k_tag)
        out.append(rec)
    return out
