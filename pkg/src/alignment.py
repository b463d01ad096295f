"""Batch assembly, attention pooling, and the part/whole sigmoid objectives."""

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .config import ModelConfig
from .nn import Linear, Module, const_param
from .tensor import (
    Tensor,
    add,
    exp,
    index,
    l2_normalize,
    log_sigmoid,
    matmul,
    mul,
    no_grad,
    permute,
    reduce_mean,
    reduce_sum,
    reshape,
    scale,
    softmax,
)
from .text import Vocabulary, chunk_random, tokenize_chunk

logger = logging.getLogger(__name__)

SCORE_BLOCK = 32


class BatchError(ValueError):
    """Raised when a batch cannot be assembled or scored."""

    pass


@dataclass
class BatchAssembly:
    """B images with K sub-captions each; the first N come from one long caption."""

    sample_ids: List[int]
    sub_captions: List[List[str]]
    token_ids: np.ndarray
    chunk_mask: np.ndarray
    provenance: List[List[str]]
    caption_tokens: np.ndarray
    num_chunks: int


@dataclass
class SimilarityReport:
    whole_scores: np.ndarray
    part_scores: np.ndarray
    combined: np.ndarray
    alpha: float


def assemble_batch(
    samples: Sequence,
    sub_captions: int,
    num_chunks: int,
    rng: np.random.Generator,
    vocab: Vocabulary,
    context: int,
) -> BatchAssembly:
    """Chunk each long caption into N sub-captions; top up to K from short captions."""
    if sub_captions < num_chunks:
        raise BatchError(f"K={sub_captions} must be >= N={num_chunks}")
    texts: List[List[str]] = []
    provenance: List[List[str]] = []
    for sample in samples:
        sentences = list(sample.long_caption)
        if not sentences:
            raise BatchError(f"Sample {sample.sample_id} has no caption")
        chunks = chunk_random(sentences, num_chunks, rng)
        row = [" ".join(sentences[i] for i in chunk) for chunk in chunks]
        origin = ["long"] * num_chunks
        pool = list(sample.short_captions)
        pool_name = "short"
        if not pool:
            pool, pool_name = sentences, "long"
        for _ in range(sub_captions - num_chunks):
            pick = int(rng.integers(len(pool)))
            row.append(pool[pick])
            origin.append(f"{pool_name}:{pick}")
        texts.append(row)
        provenance.append(origin)

    token_ids = np.stack(
        [np.stack([tokenize_chunk(t, vocab, context) for t in row]) for row in texts]
    )
    caption_tokens = np.stack(
        [tokenize_chunk(" ".join(s.long_caption), vocab, context) for s in samples]
    )
    return BatchAssembly(
        sample_ids=[s.sample_id for s in samples],
        sub_captions=texts,
        token_ids=token_ids,
        chunk_mask=np.ones(token_ids.shape[:2], dtype=bool),
        provenance=provenance,
        caption_tokens=caption_tokens,
        num_chunks=num_chunks,
    )


def sigmoid_pair_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Per-pair ``-log sigmoid(y * logit)``."""
    return scale(log_sigmoid(mul(logits, labels.astype(np.float64))), -1.0)


def pair_cosine(a: Tensor, b: Tensor) -> Tensor:
    """``(P, D)`` x ``(Q, D)`` -> ``(P, Q)`` cosine matrix, one row dot per pair."""
    rows, cols = a.shape[0], b.shape[0]
    left = index(l2_normalize(a), np.repeat(np.arange(rows), cols))
    right = index(l2_normalize(b), np.tile(np.arange(cols), rows))
    return reshape(reduce_sum(mul(left, right), axis=-1), (rows, cols))


class AlignmentHead(Module):
    """Attention pooling plus the learnable (log_scale, bias) pairs of both losses."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        width = config.embed_dim
        self.heads = config.pool_heads
        self.query = Linear(width, width, rng)
        self.key = Linear(width, width, rng)
        self.value = Linear(width, width, rng)
        self.out = Linear(width, width, rng)
        initial_scale = math.log(1.0 / config.init_temperature)
        self.part_log_scale = const_param((), initial_scale)
        self.part_bias = const_param((), config.init_bias)
        self.whole_log_scale = const_param((), initial_scale)
        self.whole_bias = const_param((), config.init_bias)

    def pool(self, queries: Tensor, segments: Tensor) -> Tuple[Tensor, Tensor]:
        """Cross-attend ``(J, D)`` queries to every image's ``(B, M, D)`` segments.

        Returns text-grounded features ``(B, J, D)`` and head-averaged
        attention ``(B, J, M)``.
        """
        count, width = queries.shape
        batch, segments_count, _ = segments.shape
        head_width = width // self.heads
        per_head = (batch, segments_count, self.heads, head_width)
        q = reshape(self.query(queries), (count, self.heads, head_width))
        q = permute(q, (1, 0, 2))
        k = reshape(self.key(segments), per_head)
        v = reshape(self.value(segments), per_head)
        k = permute(k, (0, 2, 3, 1))
        v = permute(v, (0, 2, 1, 3))
        scores = scale(matmul(q, k), 1.0 / math.sqrt(head_width))
        attention = softmax(scores)
        mixed = permute(matmul(attention, v), (0, 2, 1, 3))
        grounded = self.out(reshape(mixed, (batch, count, width)))
        return grounded, reduce_mean(attention, axis=1)

    def attn_pool(self, query: Tensor, segments: Tensor) -> Tuple[Tensor, Tensor]:
        """Single query ``(D,)`` over one image's ``(M, D)`` segments."""
        grounded, attention = self.pool(
            reshape(query, (1, query.shape[-1])),
            reshape(segments, (1, *segments.shape)),
        )
        return grounded[0, 0], attention[0, 0]

    def part_loss(
        self,
        v_fine: Tensor,
        t_sub: Tensor,
        owner: np.ndarray,
        valid: np.ndarray,
    ) -> Tensor:
        """Sigmoid loss between every image and every valid sub-caption.

        ``t_sub`` is ``(J, D)``; ``owner[j]`` is the image index sub-caption j
        belongs to. The sum over terms is divided by ``B * valid count``.
        """
        valid = np.asarray(valid, dtype=bool)
        if not valid.any():
            raise BatchError("part loss needs at least one valid sub-caption")
        keep = np.flatnonzero(valid)
        queries = index(t_sub, keep)
        grounded, _ = self.pool(queries, v_fine)
        batch = v_fine.shape[0]
        cosine = reduce_sum(
            mul(l2_normalize(grounded), l2_normalize(queries)), axis=-1
        )
        logits = add(mul(cosine, exp(self.part_log_scale)), self.part_bias)
        owners = np.asarray(owner)[keep]
        labels = np.where(np.arange(batch)[:, None] == owners[None, :], 1, -1)
        total = reduce_sum(sigmoid_pair_loss(logits, labels), exact=True)
        return scale(total, 1.0 / (batch * keep.size))

    def whole_loss(self, v_coarse: Tensor, t_whole: Tensor) -> Tensor:
        """Sigmoid loss over all B x B image/caption pairs, averaged."""
        if v_coarse.shape != t_whole.shape:
            raise BatchError(
                f"image batch {v_coarse.shape} does not match "
                f"caption batch {t_whole.shape}"
            )
        batch = v_coarse.shape[0]
        logits = add(
            mul(pair_cosine(v_coarse, t_whole), exp(self.whole_log_scale)),
            self.whole_bias,
        )
        labels = np.where(np.eye(batch, dtype=bool), 1, -1)
        total = reduce_sum(sigmoid_pair_loss(logits, labels), exact=True)
        return scale(total, 1.0 / (batch * batch))

    def temperatures(self) -> Tuple[float, float]:
        """Effective (tau_p, tau_w) = exp(-log_scale)."""
        return (
            math.exp(-self.part_log_scale.item()),
            math.exp(-self.whole_log_scale.item()),
        )


def total_loss(part: Tensor, whole: Tensor) -> Tensor:
    return add(part, whole)


def _cosine_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = a / np.maximum(np.linalg.norm(a, axis=-1, keepdims=True), 1e-12)
    b = b / np.maximum(np.linalg.norm(b, axis=-1, keepdims=True), 1e-12)
    return (a * b).sum(axis=-1)


def score_matrix(
    v_fine: Tensor,
    v_coarse: Tensor,
    t_sub: Tensor,
    t_whole: Tensor,
    chunk_mask: np.ndarray,
    alpha: float,
    head: AlignmentHead,
    block: int = SCORE_BLOCK,
) -> SimilarityReport:
    """Whole, part and combined image-by-caption scores.

    ``t_sub`` holds the pre-adapter chunk embeddings ``(C, N, D)``; invalid
    chunks are left out of the part-level sum.
    """
    if not 0.0 <= alpha <= 1.0:
        raise BatchError(f"alpha must lie in [0, 1], got {alpha}")
    images, captions = v_coarse.shape[0], t_whole.shape[0]
    chunk_mask = np.asarray(chunk_mask, dtype=bool)
    with no_grad():
        whole = np.empty((images, captions))
        for i in range(images):
            whole[i] = _cosine_rows(
                np.broadcast_to(v_coarse.data[i], t_whole.shape), t_whole.data
            )
        chunks = t_sub.shape[1]
        queries = reshape(t_sub, (captions * chunks, t_sub.shape[2]))
        part = np.empty((images, captions))
        for start in range(0, images, block):
            grounded, _ = head.pool(queries, v_fine[start : start + block])
            cosine = _cosine_rows(
                grounded.data, np.broadcast_to(queries.data, grounded.shape)
            )
            cosine = cosine.reshape(-1, captions, chunks)
            masked = np.where(chunk_mask[None], cosine, 0.0)
            part[start : start + block] = masked.sum(axis=-1)
    combined = (1.0 - alpha) * whole + alpha * part
    return SimilarityReport(whole, part, combined, alpha)
