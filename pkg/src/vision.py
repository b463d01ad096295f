"""Fine-to-coarse visual encoder over superpixel tokens."""

import logging
import math
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from threading import Lock
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .config import ModelConfig
from .nn import LayerNorm, Linear, Module, TransformerBlock, const_param, init_param
from .tensor import (
    Tensor,
    add,
    concat,
    div,
    exp,
    expand,
    index,
    l2_normalize,
    matmul,
    mul,
    permute,
    reduce_sum,
    reshape,
    scale,
    softmax,
)

logger = logging.getLogger(__name__)

NEIGHBORHOOD_FEATURES = 27


class SuperpixelError(ValueError):
    """Raised when a superpixel count does not fit the image."""

    pass


class GroupingError(ValueError):
    """Raised when a grouping target is not smaller than its input."""

    pass


@dataclass
class SuperpixelMap:
    labels: np.ndarray
    count: int


@dataclass
class PreparedImage:
    """Superpixel map plus the pooled pixel features a forward pass needs."""

    labels: np.ndarray
    count: int
    features: np.ndarray
    centroids: np.ndarray


def grid_shape(count: int) -> Tuple[int, int]:
    """Rows and columns of the most square grid with ``count`` cells."""
    rows = max(d for d in range(1, int(math.isqrt(count)) + 1) if count % d == 0)
    return rows, count // rows


def grid_labels(height: int, width: int, count: int) -> np.ndarray:
    rows, cols = grid_shape(count)
    ys, xs = np.mgrid[0:height, 0:width]
    return (ys * rows // height) * cols + (xs * cols // width)


def _region_means(values: np.ndarray, labels: np.ndarray, count: int) -> np.ndarray:
    sizes = np.bincount(labels, minlength=count).astype(np.float64)
    sums = np.stack(
        [
            np.bincount(labels, weights=values[:, j], minlength=count)
            for j in range(values.shape[1])
        ],
        axis=1,
    )
    return sums / np.maximum(sizes, 1.0)[:, None]


def _repair_connectivity(labels: np.ndarray, count: int) -> np.ndarray:
    """Merge every non-largest 4-connected piece into its dominant neighbor."""
    labels = labels.copy()
    changed = True
    while changed:
        changed = False
        for label in range(count):
            pieces, n_pieces = ndimage.label(labels == label)
            if n_pieces <= 1:
                continue
            sizes = np.bincount(pieces.ravel())[1:]
            keep = int(np.argmax(sizes)) + 1
            for piece in range(1, n_pieces + 1):
                if piece == keep:
                    continue
                region = pieces == piece
                border = ndimage.binary_dilation(region) & ~region
                neighbors = labels[border]
                neighbors = neighbors[neighbors != label]
                labels[region] = int(np.argmax(np.bincount(neighbors, minlength=count)))
                changed = True
    return labels


def _last_bfs_pixel(region: np.ndarray) -> Tuple[int, int]:
    """Pixel whose removal keeps a 4-connected region connected."""
    height, width = region.shape
    start = tuple(int(v) for v in np.argwhere(region)[0])
    seen = {start}
    queue = deque([start])
    last = start
    while queue:
        last = queue.popleft()
        y, x = last
        for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
            if 0 <= ny < height and 0 <= nx < width and region[ny, nx]:
                if (ny, nx) not in seen:
                    seen.add((ny, nx))
                    queue.append((ny, nx))
    return last


def _fill_empty(labels: np.ndarray, count: int) -> np.ndarray:
    labels = labels.copy()
    for label in range(count):
        if np.any(labels == label):
            continue
        donor = int(np.argmax(np.bincount(labels.ravel(), minlength=count)))
        labels[_last_bfs_pixel(labels == donor)] = label
    return labels


def superpixelize(
    image: np.ndarray,
    count: int,
    iterations: int = 10,
    position_weight: float = 0.5,
) -> SuperpixelMap:
    """Grid-seeded k-means over (r, g, b, wx, wy) with connectivity repair."""
    height, width = image.shape[:2]
    if count < 1 or count > height * width // 4:
        raise SuperpixelError(
            f"{count} superpixels do not fit a {height}x{width} image "
            f"(at most {height * width // 4})"
        )
    ys, xs = np.mgrid[0:height, 0:width]
    features = np.concatenate(
        [
            image.reshape(-1, 3),
            position_weight * ((xs.reshape(-1, 1) + 0.5) / width),
            position_weight * ((ys.reshape(-1, 1) + 0.5) / height),
        ],
        axis=1,
    )
    labels = grid_labels(height, width, count).ravel()
    centers = _region_means(features, labels, count)
    feature_norms = (features * features).sum(axis=1, keepdims=True)
    for _ in range(iterations):
        distances = (
            feature_norms - 2.0 * features @ centers.T + (centers * centers).sum(axis=1)
        )
        assigned = np.argmin(distances, axis=1)
        if np.array_equal(assigned, labels):
            break
        labels = assigned
        occupied = np.bincount(labels, minlength=count) > 0
        centers = np.where(
            occupied[:, None], _region_means(features, labels, count), centers
        )
    repaired = _repair_connectivity(labels.reshape(height, width), count)
    return SuperpixelMap(_fill_empty(repaired, count), count)


def neighborhood_features(image: np.ndarray) -> np.ndarray:
    """3x3 RGB neighborhood of every pixel with edge padding, ``(H, W, 27)``."""
    height, width = image.shape[:2]
    padded = np.pad(image, ((1, 1), (1, 1), (0, 0)), mode="edge")
    shifts = [
        padded[dy : dy + height, dx : dx + width] for dy in range(3) for dx in range(3)
    ]
    return np.concatenate(shifts, axis=2)


def prepare_image(image: np.ndarray, superpixels: SuperpixelMap) -> PreparedImage:
    """Per-superpixel mean pixel features and normalized centroids."""
    height, width = image.shape[:2]
    labels = superpixels.labels.ravel()
    pixel_features = neighborhood_features(image).reshape(-1, NEIGHBORHOOD_FEATURES)
    ys, xs = np.mgrid[0:height, 0:width]
    coords = np.stack(
        [(xs.ravel() + 0.5) / width, (ys.ravel() + 0.5) / height], axis=1
    )
    return PreparedImage(
        labels=superpixels.labels,
        count=superpixels.count,
        features=_region_means(pixel_features, labels, superpixels.count),
        centroids=_region_means(coords, labels, superpixels.count),
    )


def prepare_for(image: np.ndarray, config: ModelConfig, variant: str) -> PreparedImage:
    """Superpixels for grouping variants, a uniform patch grid for plain-vit."""
    if variant == "plain-vit":
        height, width = image.shape[:2]
        superpixels = SuperpixelMap(
            grid_labels(height, width, config.superpixels), config.superpixels
        )
    else:
        superpixels = superpixelize(
            image,
            config.superpixels,
            config.superpixel_iterations,
            config.position_weight,
        )
    return prepare_image(image, superpixels)


class ImageCache:
    """Prepared images keyed by sample id; superpixels are computed once."""

    def __init__(self, config: ModelConfig, variant: str, max_workers: int = 1):
        self.config = config
        self.variant = variant
        self.max_workers = max_workers
        self.logger = logging.getLogger(__name__)
        self._prepared: Dict[int, PreparedImage] = {}
        self._lock = Lock()

    def get(self, sample_id: int, image: np.ndarray) -> PreparedImage:
        with self._lock:
            cached = self._prepared.get(sample_id)
        if cached is not None:
            return cached
        prepared = prepare_for(image, self.config, self.variant)
        with self._lock:
            self._prepared.setdefault(sample_id, prepared)
            return self._prepared[sample_id]

    def warm(self, samples: Sequence) -> None:
        """Prepare every sample on a thread pool."""
        todo = [s for s in samples if s.sample_id not in self._prepared]
        if not todo:
            return
        self.logger.info(
            f"Preparing {len(todo)} images with {self.max_workers} workers"
        )
        with ThreadPoolExecutor(max_workers=self.max_workers) as executor:
            list(executor.map(lambda s: self.get(s.sample_id, s.image), todo))


@dataclass
class SegmentHierarchy:
    """Batch-first visual hierarchy of one or more images."""

    labels: np.ndarray
    stage_tokens: List[Tensor]
    stage_assignments: List[np.ndarray]
    cls: Tensor
    v_fine: Tensor
    v_coarse: Tensor
    superpixel_to_fine: np.ndarray

    def pixel_assignment(self, stage: int) -> np.ndarray:
        """Pixel to stage-``stage`` segment distributions, ``(B, H*W, K)``."""
        batch, count = self.labels.shape[0], self.superpixel_to_fine.shape[1]
        composed = np.broadcast_to(np.eye(count), (batch, count, count))
        for assignment in self.stage_assignments[:stage]:
            composed = np.matmul(composed, assignment)
        return self._to_pixels(composed)

    def fine_pixel_map(self) -> np.ndarray:
        """Pixel to fine-token distributions, ``(B, H*W, M)``."""
        return self._to_pixels(self.superpixel_to_fine)

    def _to_pixels(self, per_superpixel: np.ndarray) -> np.ndarray:
        flat = self.labels.reshape(self.labels.shape[0], -1)
        return np.stack([per_superpixel[b][flat[b]] for b in range(flat.shape[0])])


def farthest_point_indices(features: np.ndarray, count: int) -> np.ndarray:
    """Deterministic farthest-point sampling starting from row 0."""
    chosen = [0]
    distance = ((features - features[0]) ** 2).sum(axis=1)
    distance[0] = -np.inf
    for _ in range(count - 1):
        nxt = int(np.argmax(distance))
        chosen.append(nxt)
        distance = np.minimum(distance, ((features - features[nxt]) ** 2).sum(axis=1))
        distance[chosen] = -np.inf
    return np.array(chosen, dtype=np.int64)


class GroupingStage(Module):
    """Learnable temperature and the block that refines merged tokens."""

    def __init__(
        self,
        width: int,
        heads: int,
        mlp_ratio: int,
        temperature: float,
        rng: np.random.Generator,
    ):
        self.log_temp = const_param((), math.log(temperature))
        self.merge = TransformerBlock(width, heads, mlp_ratio, rng)


def group_stage(
    tokens: Tensor, cls: Tensor, target: int, stage: GroupingStage
) -> Tuple[Tensor, Tensor, Tensor]:
    """Softly cluster ``(B, M, C)`` tokens into ``target`` segments.

    Returns the merged tokens ``(B, K, C)``, the updated CLS ``(B, C)`` and the
    assignment ``(B, M, K)`` whose rows sum to one.
    """
    batch, count, width = tokens.shape
    if target >= count:
        raise GroupingError(f"Cannot group {count} tokens into {target} segments")
    picks = np.stack(
        [farthest_point_indices(tokens.data[b], target) for b in range(batch)]
    )
    centroids = index(tokens, (np.arange(batch)[:, None], picks))
    similarity = matmul(
        l2_normalize(tokens), permute(l2_normalize(centroids), (0, 2, 1))
    )
    assignment = softmax(mul(similarity, exp(scale(stage.log_temp, -1.0))))
    transport = permute(assignment, (0, 2, 1))
    mass = reduce_sum(transport, axis=-1, keepdims=True)
    merged = matmul(div(transport, expand(mass, transport.shape)), tokens)
    sequence = stage.merge(concat([reshape(cls, (batch, 1, width)), merged], axis=1))
    return sequence[:, 1:], sequence[:, 0], assignment


class VisionStage(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        width = config.vision_width
        self.blocks = [
            TransformerBlock(width, config.heads, config.mlp_ratio, rng)
            for _ in range(config.blocks_per_stage)
        ]
        self.grouper = GroupingStage(
            width, config.heads, config.mlp_ratio, config.grouping_temperature, rng
        )


class VisionEncoder(Module):
    """Superpixel tokens grouped through three stages; CLS rides along."""

    def __init__(
        self, config: ModelConfig, rng: np.random.Generator, variant: str = "caft"
    ):
        width = config.vision_width
        self.stage_sizes = tuple(config.stage_sizes)
        self.variant = variant
        self.patch_embed = Linear(NEIGHBORHOOD_FEATURES, width, rng)
        self.pos_embed = Linear(2, width, rng)
        self.cls_token = init_param(rng, (width,), 0.02)
        self.stages = [VisionStage(config, rng) for _ in self.stage_sizes]
        self.ln_fine = LayerNorm(width)
        self.fine_proj = Linear(width, config.embed_dim, rng, bias=False)
        self.ln_out = LayerNorm(width)
        self.coarse_proj = Linear(width, config.embed_dim, rng, bias=False)

    def superpixel_tokens(self, images: Sequence[PreparedImage]) -> Tensor:
        features = np.stack([p.features for p in images])
        centroids = np.stack([p.centroids for p in images])
        return add(
            self.patch_embed(Tensor(features)), self.pos_embed(Tensor(centroids))
        )

    def __call__(self, images: Sequence[PreparedImage]) -> SegmentHierarchy:
        tokens = self.superpixel_tokens(images)
        batch, count, width = tokens.shape
        cls = add(np.zeros((batch, width)), self.cls_token)
        stage_tokens = [tokens]
        assignments: List[np.ndarray] = []
        fine: Optional[Tensor] = None
        for position, (stage, target) in enumerate(zip(self.stages, self.stage_sizes)):
            sequence = concat([reshape(cls, (batch, 1, width)), tokens], axis=1)
            for block in stage.blocks:
                sequence = block(sequence)
            cls, tokens = sequence[:, 0], sequence[:, 1:]
            if position == 1 and self.variant not in ("flat-loss", "plain-vit"):
                fine = tokens
            if self.variant == "plain-vit":
                sequence = stage.grouper.merge(sequence)
                cls, tokens = sequence[:, 0], sequence[:, 1:]
            else:
                tokens, cls, assignment = group_stage(
                    tokens, cls, target, stage.grouper
                )
                assignments.append(assignment.numpy())
            stage_tokens.append(tokens)

        first = self.stage_sizes[0]
        if self.variant == "plain-vit":
            stride = count // first
            fine = tokens[:, ::stride][:, :first]
            to_fine = np.zeros((count, first))
            nearest = np.minimum(np.arange(count) // stride, first - 1)
            to_fine[np.arange(count), nearest] = 1.0
            superpixel_to_fine = np.broadcast_to(to_fine, (batch, count, first)).copy()
        elif self.variant == "flat-loss":
            fine = tokens
            superpixel_to_fine = assignments[0] @ assignments[1] @ assignments[2]
        else:
            superpixel_to_fine = assignments[0]

        return SegmentHierarchy(
            labels=np.stack([p.labels for p in images]),
            stage_tokens=stage_tokens,
            stage_assignments=assignments,
            cls=cls,
            v_fine=self.fine_proj(self.ln_fine(fine)),
            v_coarse=self.coarse_proj(self.ln_out(cls)),
            superpixel_to_fine=superpixel_to_fine,
        )


def encode_image(
    image: np.ndarray,
    encoder: VisionEncoder,
    config: ModelConfig,
) -> SegmentHierarchy:
    """Superpixelize and encode a single image; results keep a batch axis of 1."""
    return encoder([prepare_for(image, config, encoder.variant)])
