"""Vision-transformer building blocks: patch embedding, pre-norm encoder
blocks with multi-head self-attention, and a class-token classifier head.

All forward functions accept either a single example (no batch axis) or a
leading batch axis, and run through the autodiff tensor ops so gradients
flow end to end.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor


def trunc_normal(rng, shape, std=0.02, dtype=np.float32):
    """Normal(0, std) redrawing anything beyond two standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while np.any(bad):
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out.astype(dtype)


# ---------------------------------------------------------------------------
# patches
# ---------------------------------------------------------------------------

@dataclass
class PatchSequence:
    """Flattened non-overlapping square patches of one image."""

    patches: Tensor                     # [N, P*P*C]
    patch_side: int
    channels: int
    source_shape: tuple                 # (H, W, C)

    @property
    def n_patches(self):
        return self.patches.shape[0]


def _check_divisible(h, w, patch_side):
    if patch_side <= 0 or h % patch_side != 0 or w % patch_side != 0:
        raise ShapeError(f"image {h}x{w} not divisible into {patch_side}x{patch_side} patches")


def image_to_patches(x, patch_side):
    """[..., H, W, C] -> [..., N, P*P*C] in row-major patch-grid order."""
    x = T.as_tensor(x)
    if x.ndim == 3:
        h, w, c = x.shape
        _check_divisible(h, w, patch_side)
        gh, gw = h // patch_side, w // patch_side
        t = T.reshape(x, (gh, patch_side, gw, patch_side, c))
        t = T.transpose(t, (0, 2, 1, 3, 4))
        return T.reshape(t, (gh * gw, patch_side * patch_side * c))
    if x.ndim == 4:
        b, h, w, c = x.shape
        _check_divisible(h, w, patch_side)
        gh, gw = h // patch_side, w // patch_side
        t = T.reshape(x, (b, gh, patch_side, gw, patch_side, c))
        t = T.transpose(t, (0, 1, 3, 2, 4, 5))
        return T.reshape(t, (b, gh * gw, patch_side * patch_side * c))
    raise ShapeError(f"expected [H,W,C] or [B,H,W,C] image, got shape {x.shape}")


def patches_to_image(p, patch_side, source_shape):
    """Exact inverse of ``image_to_patches`` for the given source shape."""
    p = T.as_tensor(p)
    h, w, c = source_shape
    _check_divisible(h, w, patch_side)
    gh, gw = h // patch_side, w // patch_side
    if p.ndim == 2:
        t = T.reshape(p, (gh, gw, patch_side, patch_side, c))
        t = T.transpose(t, (0, 2, 1, 3, 4))
        return T.reshape(t, (h, w, c))
    if p.ndim == 3:
        b = p.shape[0]
        t = T.reshape(p, (b, gh, gw, patch_side, patch_side, c))
        t = T.transpose(t, (0, 1, 3, 2, 4, 5))
        return T.reshape(t, (b, h, w, c))
    raise ShapeError(f"expected [N,D] or [B,N,D] patches, got shape {p.shape}")


def patchify(image, patch_side):
    """Split one [H, W, C] image into its PatchSequence."""
    image = T.as_tensor(image)
    if image.ndim != 3:
        raise ShapeError(f"patchify expects a single [H,W,C] image, got shape {image.shape}")
    patches = image_to_patches(image, patch_side)
    h, w, c = image.shape
    return PatchSequence(patches=patches, patch_side=patch_side, channels=c,
                         source_shape=(h, w, c))


def unpatchify(seq):
    return patches_to_image(seq.patches, seq.patch_side, seq.source_shape)


# ---------------------------------------------------------------------------
# embedding
# ---------------------------------------------------------------------------

@dataclass
class EmbeddingLayer:
    """Linear patch projection plus class token and positional table."""

    projection: Tensor       # [P*P*C, D]
    class_token: Tensor      # [D]
    positional: Tensor       # [N+1, D]

    def parameters(self):
        return {"proj": self.projection, "cls": self.class_token, "pos": self.positional}


def init_embedding(rng, patch_dim, dim, n_patches, dtype=np.float32):
    return EmbeddingLayer(
        projection=Tensor(trunc_normal(rng, (patch_dim, dim), dtype=dtype), requires_grad=True),
        class_token=Tensor(np.zeros(dim, dtype=dtype), requires_grad=True),
        positional=Tensor(np.zeros((n_patches + 1, dim), dtype=dtype), requires_grad=True),
    )


def embed(patches, layer):
    """Project patches, prepend the class token, add positional rows.

    Accepts a PatchSequence, an [N, P*P*C] tensor, or a batched
    [B, N, P*P*C] tensor; returns [(B,) N+1, D] tokens.
    """
    if isinstance(patches, PatchSequence):
        patches = patches.patches
    patches = T.as_tensor(patches)
    n = patches.shape[-2]
    if layer.positional.shape[0] != n + 1:
        raise ShapeError(
            f"positional table has {layer.positional.shape[0]} rows, need {n + 1}")
    projected = T.matmul(patches, layer.projection)
    dim = layer.projection.shape[1]
    cls_row = T.reshape(layer.class_token, (1, dim))
    if projected.ndim == 3:
        cls_row = T.broadcast_to(T.reshape(cls_row, (1, 1, dim)),
                                 (projected.shape[0], 1, dim))
    tokens = T.concat([cls_row, projected], axis=-2)
    return T.add(tokens, layer.positional)


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------

@dataclass
class EncoderBlock:
    """Pre-norm transformer block: attention and a 4x GELU feed-forward."""

    heads: int
    norm1_gain: Tensor
    norm1_bias: Tensor
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    norm2_gain: Tensor
    norm2_bias: Tensor
    w_up: Tensor
    b_up: Tensor
    w_down: Tensor
    b_down: Tensor

    def parameters(self):
        out = {}
        for name in ("norm1_gain", "norm1_bias", "wq", "bq", "wk", "bk", "wv", "bv",
                     "wo", "bo", "norm2_gain", "norm2_bias", "w_up", "b_up",
                     "w_down", "b_down"):
            out[name] = getattr(self, name)
        return out


def init_block(rng, dim, heads, dtype=np.float32, ffn_mult=4):
    if dim % heads != 0:
        raise ShapeError(f"dim {dim} not divisible by heads {heads}")

    def w(shape):
        return Tensor(trunc_normal(rng, shape, dtype=dtype), requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    def ones(shape):
        return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)

    hidden = ffn_mult * dim
    return EncoderBlock(
        heads=heads,
        norm1_gain=ones(dim), norm1_bias=zeros(dim),
        wq=w((dim, dim)), bq=zeros(dim),
        wk=w((dim, dim)), bk=zeros(dim),
        wv=w((dim, dim)), bv=zeros(dim),
        wo=w((dim, dim)), bo=zeros(dim),
        norm2_gain=ones(dim), norm2_bias=zeros(dim),
        w_up=w((dim, hidden)), b_up=zeros(hidden),
        w_down=w((hidden, dim)), b_down=zeros(dim),
    )


def attention(x, block, attn_sink=None):
    """Multi-head self-attention over [(B,) T, D] tokens.

    When `attn_sink` is a list, the post-softmax attention arrays
    ([(B,) heads, T, T]) are appended to it for inspection.
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = T.reshape(x, (1,) + tuple(x.shape))
    b, t, d = x.shape
    h = block.heads
    dh = d // h

    def split_heads(m):
        m = T.reshape(m, (b, t, h, dh))
        return T.transpose(m, (0, 2, 1, 3))  # [B, h, T, dh]

    q = split_heads(T.linear(x, block.wq, block.bq))
    k = split_heads(T.linear(x, block.wk, block.bk))
    v = split_heads(T.linear(x, block.wv, block.bv))

    scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    probs = T.softmax(scores, axis=-1)
    if attn_sink is not None:
        attn_sink.append(probs.data[0] if squeeze else probs.data)
    ctx = T.matmul(probs, v)                       # [B, h, T, dh]
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, t, d))
    out = T.linear(ctx, block.wo, block.bo)
    if squeeze:
        out = T.reshape(out, (t, d))
    return out


def feed_forward(x, block):
    hidden = T.gelu(T.linear(x, block.w_up, block.b_up))
    return T.linear(hidden, block.w_down, block.b_down)


def encode(tokens, blocks, attn_sink=None):
    """Apply pre-norm encoder blocks: x += MHSA(LN(x)); x += FFN(LN(x))."""
    x = T.as_tensor(tokens)
    for block in blocks:
        if x.shape[-1] != block.wq.shape[0]:
            raise ShapeError(
                f"token width {x.shape[-1]} does not match block width {block.wq.shape[0]}")
        x = T.add(x, attention(T.layer_norm(x, block.norm1_gain, block.norm1_bias), block,
                               attn_sink=attn_sink))
        x = T.add(x, feed_forward(T.layer_norm(x, block.norm2_gain, block.norm2_bias), block))
    return x


# ---------------------------------------------------------------------------
# classification head
# ---------------------------------------------------------------------------

@dataclass
class ClassifierHead:
    """Final norm over the class token followed by a linear map to logits.

    ``norm_gain``/``norm_bias`` may be None to bypass normalization (used by
    tests that need an identity head path).
    """

    weight: Tensor           # [D, K]
    bias: Tensor             # [K]
    norm_gain: Tensor | None = None
    norm_bias: Tensor | None = None

    def parameters(self):
        out = {"weight": self.weight, "bias": self.bias}
        if self.norm_gain is not None:
            out["norm_gain"] = self.norm_gain
            out["norm_bias"] = self.norm_bias
        return out


def init_head(rng, dim, classes, dtype=np.float32):
    return ClassifierHead(
        weight=Tensor(trunc_normal(rng, (dim, classes), dtype=dtype), requires_grad=True),
        bias=Tensor(np.zeros(classes, dtype=dtype), requires_grad=True),
        norm_gain=Tensor(np.ones(dim, dtype=dtype), requires_grad=True),
        norm_bias=Tensor(np.zeros(dim, dtype=dtype), requires_grad=True),
    )


def classify(tokens, head):
    """Logits from the class token (row 0) only."""
    tokens = T.as_tensor(tokens)
    if tokens.size == 0:
        raise ShapeError("classify of empty token tensor")
    cls = tokens[..., 0, :]
    if head.norm_gain is not None:
        cls = T.layer_norm(cls, head.norm_gain, head.norm_bias)
    single = cls.ndim == 1
    if single:
        cls = T.reshape(cls, (1, -1))
    logits = T.linear(cls, head.weight, head.bias)
    if single:
        logits = T.reshape(logits, (-1,))
    return logits


# ---------------------------------------------------------------------------
# full classifier
# ---------------------------------------------------------------------------

@dataclass
class VitClassifier:
    """Patch embedding + encoder stack + class-token head."""

    patch_side: int
    embedding: EmbeddingLayer
    blocks: list = field(default_factory=list)
    head: ClassifierHead = None

    def forward(self, images, attn_sink=None):
        patches = image_to_patches(images, self.patch_side)
        tokens = encode(embed(patches, self.embedding), self.blocks, attn_sink=attn_sink)
        return classify(tokens, self.head)

    def named_parameters(self):
        out = {}
        for name, p in self.embedding.parameters().items():
            out[f"embed.{name}"] = p
        for i, block in enumerate(self.blocks):
            for name, p in block.parameters().items():
                out[f"block{i}.{name}"] = p
        for name, p in self.head.parameters().items():
            out[f"head.{name}"] = p
        return out

    def load_arrays(self, arrays, prefix=""):
        for name, p in self.named_parameters().items():
            arr = arrays[prefix + name]
            if arr.shape != p.data.shape:
                raise ShapeError(f"checkpoint tensor {name} has shape {arr.shape}, expected {p.data.shape}")
            p.data = np.ascontiguousarray(arr.astype(p.dtype))


def build_classifier(rng, image_shape, patch_side, dim, heads, depth, classes,
                     dtype=np.float32):
    h, w, c = image_shape
    _check_divisible(h, w, patch_side)
    n = (h // patch_side) * (w // patch_side)
    return VitClassifier(
        patch_side=patch_side,
        embedding=init_embedding(rng, patch_side * patch_side * c, dim, n, dtype=dtype),
        blocks=[init_block(rng, dim, heads, dtype=dtype) for _ in range(depth)],
        head=init_head(rng, dim, classes, dtype=dtype),
    )
