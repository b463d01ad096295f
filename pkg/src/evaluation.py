"""Retrieval recall, zero-shot grounding, Otsu binarization and mIoU."""

import logging
import math
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .alignment import score_matrix
from .imageio import write_pgm
from .model import CaftModel
from .tensor import concat, no_grad
from .text import (
    CaptionError,
    Vocabulary,
    build_hierarchy,
    tokenize_chunk,
    words_of,
)
from .vision import ImageCache, SegmentHierarchy

logger = logging.getLogger(__name__)

OTSU_BINS = 256
ENCODE_BLOCK = 32


class GroundingError(ValueError):
    """Raised for unusable grounding queries or mismatched masks."""

    pass


@dataclass
class RetrievalResult:
    alpha: float
    i2t_r1: float
    t2i_r1: float
    i2t_ranks: List[int]
    t2i_ranks: List[int]


@dataclass
class GroundingResult:
    query_id: str
    heatmap: np.ndarray
    mask: np.ndarray
    degenerate: bool
    iou: Optional[float] = None
    mass_inside: Optional[float] = None


@dataclass
class EvaluationReport:
    queries: int
    retrieval: List[RetrievalResult]
    grounding: List[GroundingResult] = field(default_factory=list)

    @property
    def miou(self) -> float:
        scored = [g.iou for g in self.grounding if g.iou is not None]
        return math.fsum(scored) / len(scored) if scored else float("nan")

    @property
    def mean_mass_inside(self) -> float:
        scored = [g.mass_inside for g in self.grounding if g.mass_inside is not None]
        return math.fsum(scored) / len(scored) if scored else float("nan")

    def render(self) -> str:
        lines = []
        for result in self.retrieval:
            lines += [
                f"[alpha {result.alpha:g}]",
                f"queries,{self.queries}",
                "alpha,i2t_r1,t2i_r1",
                f"{result.alpha:g},{result.i2t_r1:.6f},{result.t2i_r1:.6f}",
            ]
        lines += ["[grounding]", "query_id,iou"]
        lines += [f"{g.query_id},{g.iou:.6f}" for g in self.grounding]
        degenerate = sum(g.degenerate for g in self.grounding)
        lines += [
            "[summary]",
            f"miou,{self.miou:.6f}",
            f"mass_inside,{self.mean_mass_inside:.6f}",
            f"degenerate,{degenerate}",
        ]
        return "\n".join(lines) + "\n"

    def write(self, path: str) -> None:
        target = Path(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        fd, temp_path = tempfile.mkstemp(
            dir=target.parent, prefix=f".tmp_{target.stem}_"
        )
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as f:
                f.write(self.render())
            os.replace(temp_path, target)
        except OSError:
            if os.path.exists(temp_path):
                os.remove(temp_path)
            raise


def recall_at_1(scores: np.ndarray, truth: Sequence[int]) -> float:
    """Fraction of rows whose first maximal column is the ground truth."""
    scores = np.asarray(scores)
    hits = int(np.sum(np.argmax(scores, axis=1) == np.asarray(truth)))
    return hits / scores.shape[0]


def ranks(scores: np.ndarray, truth: Sequence[int]) -> List[int]:
    """Rank of the ground-truth column per row, ties resolved toward lower index."""
    scores = np.asarray(scores)
    out = []
    for row, target in zip(scores, truth):
        better = np.sum(row > row[target]) + np.sum(row[:target] == row[target])
        out.append(int(better))
    return out


def otsu_threshold(heatmap: np.ndarray) -> Tuple[np.ndarray, bool]:
    """Binarize by the 256-bin threshold that maximizes between-class variance.

    Returns the mask and whether the heatmap was degenerate (fewer than two
    distinct values, in which case the mask is empty).
    """
    values = np.asarray(heatmap, dtype=np.float64)
    low, high = values.min(), values.max()
    if not high > low:
        return np.zeros(values.shape, dtype=bool), True
    normalized = (values - low) / (high - low)
    bins = np.minimum((normalized * OTSU_BINS).astype(np.int64), OTSU_BINS - 1)
    counts = np.bincount(bins.ravel(), minlength=OTSU_BINS)
    total_count = int(counts.sum())
    total_mass = int(np.dot(np.arange(OTSU_BINS), counts))

    best_t, best_score = 0, Fraction(-1)
    below_count = below_mass = 0
    for t in range(OTSU_BINS - 1):
        below_count += int(counts[t])
        below_mass += t * int(counts[t])
        above_count = total_count - below_count
        if below_count == 0 or above_count == 0:
            continue
        above_mass = total_mass - below_mass
        # proportional to w0 * w1 * (mu0 - mu1)^2
        score = Fraction(
            (below_mass * above_count - above_mass * below_count) ** 2,
            below_count * above_count,
        )
        if score > best_score:
            best_t, best_score = t, score
    return bins > best_t, False


def miou(predicted: Sequence[np.ndarray], truths: Sequence[np.ndarray]) -> float:
    """Mean intersection over union; an empty union scores 1."""
    if len(predicted) != len(truths):
        raise GroundingError(f"{len(predicted)} predictions for {len(truths)} truths")
    return math.fsum(iou(p, t) for p, t in zip(predicted, truths)) / len(predicted)


def iou(predicted: np.ndarray, truth: np.ndarray) -> float:
    predicted, truth = np.asarray(predicted, dtype=bool), np.asarray(truth, dtype=bool)
    if predicted.shape != truth.shape:
        raise GroundingError(f"mask shapes differ: {predicted.shape} vs {truth.shape}")
    union = int(np.sum(predicted | truth))
    if union == 0:
        return 1.0
    return int(np.sum(predicted & truth)) / union


def mass_inside(heatmap: np.ndarray, mask: np.ndarray) -> float:
    """Share of heatmap mass that falls inside a binary mask."""
    heatmap = np.asarray(heatmap, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if heatmap.shape != mask.shape:
        raise GroundingError(f"mask shape {mask.shape} does not match {heatmap.shape}")
    total = math.fsum(heatmap.ravel().tolist())
    return math.fsum(heatmap[mask].tolist()) / total if total > 0 else 0.0


def heatmaps_from_weights(
    pixel_map: np.ndarray, weights: np.ndarray, shape: Tuple[int, int]
) -> np.ndarray:
    """Push ``(Q, M)`` segment weights through a ``(H*W, M)`` map; each sums to 1."""
    maps = np.asarray(weights) @ pixel_map.T
    maps = maps / maps.sum(axis=-1, keepdims=True)
    return maps.reshape(-1, *shape)


def ground_queries(
    texts: Sequence[str],
    image: SegmentHierarchy,
    model: CaftModel,
    vocab: Vocabulary,
    position: int = 0,
) -> np.ndarray:
    """Heatmaps ``(Q, H, W)`` for each query against one image of ``image``."""
    for text in texts:
        if not words_of(text):
            raise GroundingError(f"Grounding query has no words: {text!r}")
    context = model.config.context_length
    tokens = np.stack([tokenize_chunk(t, vocab, context) for t in texts])
    with no_grad():
        queries = model.text.encode_sub(tokens)
        _, attention = model.head.pool(queries, image.v_fine[position : position + 1])
    pixel_map = image.fine_pixel_map()[position]
    return heatmaps_from_weights(pixel_map, attention.data[0], image.labels.shape[1:])


def ground_query(
    query_text: str,
    image: SegmentHierarchy,
    model: CaftModel,
    vocab: Vocabulary,
) -> GroundingResult:
    heatmap = ground_queries([query_text], image, model, vocab)[0]
    mask, degenerate = otsu_threshold(heatmap)
    return GroundingResult(
        query_id="query", heatmap=heatmap, mask=mask, degenerate=degenerate
    )


def export_heatmap(out_dir: str, name: str, result: GroundingResult) -> None:
    """Write ``{name}_heatmap.pgm`` (peak-scaled) and ``{name}_mask.pgm``."""
    peak = result.heatmap.max()
    scaled = result.heatmap / peak if peak > 0 else result.heatmap
    write_pgm(str(Path(out_dir) / f"{name}_heatmap.pgm"), scaled)
    write_pgm(str(Path(out_dir) / f"{name}_mask.pgm"), result.mask.astype(np.float64))


def _encode_block(
    model: CaftModel, cache: ImageCache, samples: Sequence
) -> SegmentHierarchy:
    with no_grad():
        return model.encode_images([cache.get(s.sample_id, s.image) for s in samples])


def _ground_sample(
    model: CaftModel, vocab: Vocabulary, sample, image: SegmentHierarchy, position: int
) -> List[GroundingResult]:
    objects = sorted(sample.sentence_to_object.items())
    if not objects:
        return []
    texts = [sample.long_caption[s] for s, _ in objects]
    heatmaps = ground_queries(texts, image, model, vocab, position)
    results = []
    for heatmap, (_, k) in zip(heatmaps, objects):
        mask, degenerate = otsu_threshold(heatmap)
        truth = sample.masks[k]
        results.append(
            GroundingResult(
                query_id=f"{sample.sample_id:04d}_{k}",
                heatmap=heatmap,
                mask=mask,
                degenerate=degenerate,
                iou=iou(mask, truth),
                mass_inside=mass_inside(heatmap, truth),
            )
        )
    return results


def evaluate(
    model: CaftModel,
    vocab: Vocabulary,
    samples: Sequence,
    alphas: Sequence[float],
    cache: Optional[ImageCache] = None,
    max_workers: int = 1,
    heatmap_dir: Optional[str] = None,
) -> EvaluationReport:
    """Retrieval per alpha with balanced chunking, then grounding of each object."""
    if not samples:
        raise GroundingError("Evaluation needs at least one sample")
    cache = cache or ImageCache(model.config, model.variant, max_workers)
    cache.warm(samples)
    blocks = [
        samples[i : i + ENCODE_BLOCK] for i in range(0, len(samples), ENCODE_BLOCK)
    ]
    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        encoded = list(executor.map(lambda b: _encode_block(model, cache, b), blocks))

    config = model.config
    try:
        hierarchies = [
            build_hierarchy(
                s.long_caption, vocab, config.num_chunks, config.context_length
            )
            for s in samples
        ]
    except CaptionError as e:
        raise GroundingError(f"Unusable caption in evaluation corpus: {e}")
    with no_grad():
        v_fine = concat([h.v_fine for h in encoded], axis=0)
        v_coarse = concat([h.v_coarse for h in encoded], axis=0)
        t_sub, t_whole = model.text.encode_hierarchies(hierarchies)
        if model.variant == "flat-text":
            flat = np.stack(
                [
                    tokenize_chunk(
                        " ".join(s.long_caption), vocab, config.context_length
                    )
                    for s in samples
                ]
            )
            t_whole = model.text.encode_flat(flat)
    chunk_mask = np.stack([h.chunk_mask for h in hierarchies])
    truth = list(range(len(samples)))

    retrieval = []
    for alpha in alphas:
        report = score_matrix(
            v_fine, v_coarse, t_sub, t_whole, chunk_mask, alpha, model.head
        )
        result = RetrievalResult(
            alpha=alpha,
            i2t_r1=recall_at_1(report.combined, truth),
            t2i_r1=recall_at_1(report.combined.T, truth),
            i2t_ranks=ranks(report.combined, truth),
            t2i_ranks=ranks(report.combined.T, truth),
        )
        logger.info(
            f"alpha={alpha:g}: i2t R@1={result.i2t_r1:.4f} t2i R@1={result.t2i_r1:.4f}"
        )
        retrieval.append(result)

    jobs = []
    for block, hierarchy in zip(blocks, encoded):
        for position, sample in enumerate(block):
            jobs.append((sample, hierarchy, position))
    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        grounded = list(
            executor.map(lambda job: _ground_sample(model, vocab, *job), jobs)
        )
    grounding = sorted(
        (g for group in grounded for g in group), key=lambda g: g.query_id
    )

    if heatmap_dir is not None:
        for result in grounding:
            export_heatmap(heatmap_dir, result.query_id, result)

    report = EvaluationReport(
        queries=len(samples), retrieval=retrieval, grounding=grounding
    )
    logger.info(
        f"grounding over {len(grounding)} queries: mIoU={report.miou:.4f} "
        f"mass_inside={report.mean_mass_inside:.4f}"
    )
    return report
