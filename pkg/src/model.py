"""The full two-tower model and its per-variant loss wiring."""

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .alignment import AlignmentHead, BatchAssembly, total_loss
from .config import STREAM_INIT, ModelConfig
from .nn import Module
from .tensor import Tensor, index, reshape
from .text import TextEncoder
from .vision import PreparedImage, SegmentHierarchy, VisionEncoder

logger = logging.getLogger(__name__)


@dataclass
class LossBreakdown:
    part: Tensor
    whole: Tensor
    total: Tensor


class CaftModel(Module):
    """Text encoder, vision encoder and alignment head built from one seed.

    Every variant allocates the same parameters, so checkpoints move freely
    between variants; only the loss wiring and feature taps differ.
    """

    def __init__(self, config: ModelConfig, seed: int, variant: str = "caft"):
        rng = np.random.default_rng([seed, STREAM_INIT])
        self._config = config
        self._variant = variant
        self.text = TextEncoder(config, rng)
        self.vision = VisionEncoder(config, rng, variant)
        self.head = AlignmentHead(config, rng)

    @property
    def config(self) -> ModelConfig:
        return self._config

    @property
    def variant(self) -> str:
        return self._variant

    def encode_images(self, images: Sequence[PreparedImage]) -> SegmentHierarchy:
        return self.vision(images)

    def caption_embeddings(self, batch: BatchAssembly):
        """Sub-caption embeddings ``(B*K, D)`` and whole-caption embeddings ``(B, D)``.

        The flat-text variant skips the adapter and the whole-caption transformer.
        """
        images, per_image, context = batch.token_ids.shape
        t_sub = self.text.encode_sub(
            batch.token_ids.reshape(images * per_image, context)
        )
        if self.variant == "flat-text":
            return t_sub, self.text.encode_flat(batch.caption_tokens)
        width = t_sub.shape[-1]
        grouped = reshape(t_sub, (images, per_image, width))
        first = index(grouped, (slice(None), slice(0, batch.num_chunks)))
        adapted = self.text.adapt(first)
        mask = batch.chunk_mask[:, : batch.num_chunks]
        t_whole = self.text.encode_whole(adapted, mask)
        return t_sub, t_whole

    def losses(
        self, batch: BatchAssembly, images: Sequence[PreparedImage]
    ) -> LossBreakdown:
        hierarchy = self.encode_images(images)
        t_sub, t_whole = self.caption_embeddings(batch)
        whole = self.head.whole_loss(hierarchy.v_coarse, t_whole)
        if self.variant == "no-part":
            part = Tensor(0.0)
        else:
            count, per_image = batch.token_ids.shape[:2]
            owner = np.repeat(np.arange(count), per_image)
            part = self.head.part_loss(
                hierarchy.v_fine, t_sub, owner, batch.chunk_mask.reshape(-1)
            )
        return LossBreakdown(part=part, whole=whole, total=total_loss(part, whole))
