"""Mask generation: a shallow ViT trunk scoring every patch, mask assembly
and application, random-mask negatives, and the alternating adversarial
training loop that shapes the scores.

Mask conventions used throughout:

* ``scores`` (one value per patch, in (0, 1)): how discardable a patch is.
  High score means the patch carries nothing the classifier needs.
* deployment mask: ``assemble_mask(scores)`` has pixel value
  ``1 - score`` and multiplies the image, so high-score patches are
  suppressed and low-score patches are kept.
* adversarial view: during mask training the judge network is shown the
  *complement* of the deployment mask, i.e. pixels weighted by ``score``
  (exactly what deployment throws away). The score head is rewarded when
  that view makes the judge's class output uniform, so recognizable
  content is forced out of the discard set, while a penalty pins the mean
  score to the target discard ratio.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from . import vit
from .errors import DegenerateMaskError, DomainError, NumericError, ShapeError
from .tensor import Tape, Tensor, backward, frozen


# ---------------------------------------------------------------------------
# mask generator network
# ---------------------------------------------------------------------------

@dataclass
class MaskGenerator:
    """Shallow ViT trunk with a per-patch linear + sigmoid scoring head."""

    patch_side: int
    embedding: vit.EmbeddingLayer
    blocks: list
    head_weight: Tensor      # [D, 1]
    head_bias: Tensor        # [1]

    def named_parameters(self):
        out = {}
        for name, p in self.embedding.parameters().items():
            out[f"embed.{name}"] = p
        for i, block in enumerate(self.blocks):
            for name, p in block.parameters().items():
                out[f"block{i}.{name}"] = p
        out["head.weight"] = self.head_weight
        out["head.bias"] = self.head_bias
        return out

    def load_arrays(self, arrays, prefix=""):
        for name, p in self.named_parameters().items():
            arr = arrays[prefix + name]
            if arr.shape != p.data.shape:
                raise ShapeError(f"checkpoint tensor {name} has shape {arr.shape}, expected {p.data.shape}")
            p.data = np.ascontiguousarray(arr.astype(p.dtype))


def build_mask_generator(rng, image_shape, patch_side, dim, heads, depth,
                         dtype=np.float32, initial_score=None):
    """Build the scoring network.

    `initial_score` sets the head bias so every patch starts near that
    score. Starting at the target discard ratio keeps the area budget
    satisfied from the first step, which removes the violent early
    transient that would otherwise outpace the judge.
    """
    h, w, c = image_shape
    n = (h // patch_side) * (w // patch_side)
    bias = 0.0
    if initial_score is not None:
        if not 0.0 < initial_score < 1.0:
            raise DomainError(f"initial score must lie in (0, 1), got {initial_score}")
        bias = float(np.log(initial_score / (1.0 - initial_score)))
    return MaskGenerator(
        patch_side=patch_side,
        embedding=vit.init_embedding(rng, patch_side * patch_side * c, dim, n, dtype=dtype),
        blocks=[vit.init_block(rng, dim, heads, dtype=dtype) for _ in range(depth)],
        head_weight=Tensor(vit.trunc_normal(rng, (dim, 1), dtype=dtype), requires_grad=True),
        head_bias=Tensor(np.full(1, bias, dtype=dtype), requires_grad=True),
    )


def gen_patch_masks(images, gen):
    """Per-patch discard scores in (0, 1) for [(B,) H, W, C] input."""
    patches = vit.image_to_patches(images, gen.patch_side)
    tokens = vit.encode(vit.embed(patches, gen.embedding), gen.blocks)
    patch_tokens = tokens[..., 1:, :]        # drop the class token row
    raw = T.linear(patch_tokens, gen.head_weight, gen.head_bias)
    scores = T.sigmoid(raw)
    return T.reshape(scores, scores.shape[:-1])   # [..., N]


# ---------------------------------------------------------------------------
# mask assembly and application
# ---------------------------------------------------------------------------

@dataclass
class MaskSet:
    """Patch scores together with the assembled full-resolution keep-mask."""

    patch_scores: Tensor     # [N], discardability per patch
    full_mask: Tensor        # [H, W, C], pixel value 1 - score of its patch
    ratio_target: float


def assemble_mask(patch_scores, patch_side, height, width, channels):
    """Full-resolution keep-mask: every pixel of patch i equals 1 - score_i."""
    patch_scores = T.as_tensor(patch_scores)
    gh, gw = height // patch_side, width // patch_side
    n = gh * gw
    if height % patch_side or width % patch_side:
        raise ShapeError(f"image {height}x{width} not divisible by patch side {patch_side}")
    if patch_scores.shape[-1] != n:
        raise ShapeError(f"got {patch_scores.shape[-1]} patch scores for a {gh}x{gw} grid")
    keep = T.sub(1.0, patch_scores)
    if keep.ndim == 1:
        t = T.reshape(keep, (gh, 1, gw, 1, 1))
        t = T.broadcast_to(t, (gh, patch_side, gw, patch_side, channels))
        return T.reshape(t, (height, width, channels))
    if keep.ndim == 2:
        b = keep.shape[0]
        t = T.reshape(keep, (b, gh, 1, gw, 1, 1))
        t = T.broadcast_to(t, (b, gh, patch_side, gw, patch_side, channels))
        return T.reshape(t, (b, height, width, channels))
    raise ShapeError(f"expected [N] or [B,N] patch scores, got shape {patch_scores.shape}")


def apply_mask(image, full_mask):
    """Elementwise product of image and mask (soft masking, no threshold)."""
    image, full_mask = T.as_tensor(image), T.as_tensor(full_mask)
    if image.shape != full_mask.shape:
        raise ShapeError(f"image shape {image.shape} != mask shape {full_mask.shape}")
    return T.mul(image, full_mask)


def sample_random_mask(n_patches, ratio, rng):
    """Hard random scores: exactly round(ratio * N) patches set to 1 (discard)."""
    if not 0.0 < ratio < 1.0:
        raise DomainError(f"mask ratio must lie in (0, 1), got {ratio}")
    k = int(np.floor(ratio * n_patches + 0.5))
    if k == 0 or k == n_patches:
        raise DegenerateMaskError(
            f"ratio {ratio} with {n_patches} patches would mask {k} patches")
    scores = np.zeros(n_patches, dtype=np.float32)
    scores[rng.choice(n_patches, size=k, replace=False)] = 1.0
    return Tensor(scores)


def mask_mean(patch_scores):
    """Arithmetic mean of the patch scores (the realized discard area)."""
    patch_scores = T.as_tensor(patch_scores)
    if patch_scores.size < 1:
        raise ShapeError("mask_mean of empty scores")
    return T.tensor_mean(patch_scores, axis=-1)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def generator_loss(logits, patch_scores, ratio):
    """Uniformity pressure plus discard-area budget.

    Variance of the judge's softmax output (driving it toward an
    uninformative, uniform response) plus the absolute gap between the
    mean patch score and the target ratio. Accepts single vectors or
    batches; batch losses are averaged.
    """
    logits = T.as_tensor(logits)
    if logits.shape[-1] < 2:
        raise DomainError("generator loss needs at least 2 classes")
    spread = T.variance(T.softmax(logits, axis=-1), axis=-1)
    budget = T.absolute(T.sub(mask_mean(patch_scores), float(ratio)))
    total = T.add(spread, budget)
    if total.ndim == 0:
        return total
    return T.tensor_mean(total)


def discriminator_loss(logits_generated, logits_random, labels):
    """Sum of classification losses on the generated-view and random-view logits."""
    return T.add(T.cross_entropy(logits_generated, labels),
                 T.cross_entropy(logits_random, labels))


# ---------------------------------------------------------------------------
# alternating training
# ---------------------------------------------------------------------------

@dataclass
class GanSchedule:
    """Alternation plan: per-phase step counts and total alternations."""

    disc_steps: int = 1
    gen_steps: int = 1
    alternations: int = 2000

    def validate(self):
        if self.disc_steps < 0 or self.gen_steps < 0 or self.alternations < 0:
            raise DomainError("schedule counts must be nonnegative")
        return self


class _BatchStream:
    """Deterministic shuffled index batches, reshuffling each full pass."""

    def __init__(self, n, batch_size, rng):
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = rng
        self._order = rng.permutation(n)
        self._pos = 0

    def next(self):
        if self._pos + self.batch_size > self.n:
            self._order = self.rng.permutation(self.n)
            self._pos = 0
        batch = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return batch


def adversarial_view(images, patch_scores, patch_side):
    """Judge input during mask training: pixels weighted by their patch score.

    This is the complement of the deployment mask, showing exactly the
    content the deployment pipeline would discard.
    """
    shape = images.shape[-3:]
    keep_complement = assemble_mask(T.sub(1.0, T.as_tensor(patch_scores)),
                                    patch_side, *shape)
    return apply_mask(images, keep_complement)


def deployment_view(images, patch_scores, patch_side):
    """Classifier input: pixels weighted by 1 - score (keep what matters)."""
    images = T.as_tensor(images)
    mask = assemble_mask(patch_scores, patch_side, *images.shape[-3:])
    return apply_mask(images, mask)


def train_gan(images, labels, gen, disc, schedule, ratio, gen_opt, disc_opt,
              batch_size, rng, on_row=None):
    """Alternate judge (discriminator) and score-head (generator) updates.

    `images` is an [n, H, W, C] float array, `labels` the observed integer
    labels. Returns the per-step log as a list of dicts with keys
    step/phase/loss/mask_mean/gap; `on_row` is called with each row as it
    is produced so partial logs survive a numeric abort. Both learning
    rates decay exponentially at every dataset-sized block of steps, which
    anneals the adversarial game into a settled final mask.
    """
    schedule.validate()
    if len(images) == 0:
        raise DomainError("empty training set")
    n_patches = gen.embedding.positional.shape[0] - 1
    h, w, c = images.shape[1:]
    stream = _BatchStream(len(images), batch_size, rng)
    gen_params = list(gen.named_parameters().values())
    disc_params = list(disc.named_parameters().values())
    steps_per_epoch = max(1, len(images) // min(batch_size, len(images)))

    rows = []

    def emit(step, phase, loss_value, mean_score):
        row = {"step": step, "phase": phase, "loss": loss_value,
               "mask_mean": mean_score, "gap": abs(mean_score - ratio)}
        rows.append(row)
        if on_row is not None:
            on_row(row)
        if not np.isfinite(loss_value):
            raise NumericError(f"non-finite loss at step {step} ({phase} phase)")
        if step % steps_per_epoch == 0:
            gen_opt.end_epoch()
            disc_opt.end_epoch()

    step = 0
    for _ in range(schedule.alternations):
        for _ in range(schedule.disc_steps):
            idx = stream.next()
            batch = Tensor(images[idx])
            batch_labels = labels[idx]
            # frozen generator: scores are plain constants here
            scores = gen_patch_masks(batch, gen)
            rand_scores = Tensor(np.stack(
                [sample_random_mask(n_patches, ratio, rng).data for _ in idx]))
            with Tape() as tape:
                gen_view = adversarial_view(batch, scores, gen.patch_side)
                # the random negative is the same kind of object as the
                # generated one: a discard view of ratio-m area, so the
                # judge learns the whole sparse-view family, not just the
                # generator's current output distribution
                rand_view = adversarial_view(batch, rand_scores, gen.patch_side)
                # one stacked forward, then split: same loss, half the overhead
                logits = disc.forward(T.concat([gen_view, rand_view], axis=0))
                loss = discriminator_loss(logits[:len(idx)], logits[len(idx):],
                                          batch_labels)
                backward(loss, tape)
            disc_opt.step()
            T.zero_grad(disc_params)
            step += 1
            emit(step, "disc", loss.item(), float(scores.data.mean()))
        for _ in range(schedule.gen_steps):
            idx = stream.next()
            batch = Tensor(images[idx])
            with frozen(disc_params), Tape() as tape:
                scores = gen_patch_masks(batch, gen)
                gen_view = adversarial_view(batch, scores, gen.patch_side)
                logits = disc.forward(gen_view)
                loss = generator_loss(logits, scores, ratio)
                backward(loss, tape)
            gen_opt.step()
            T.zero_grad(gen_params)
            step += 1
            emit(step, "gen", loss.item(), float(scores.data.mean()))
    return rows
