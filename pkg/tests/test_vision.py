"""Tests for superpixels, grouping and the vision encoder."""

import numpy as np
import pytest
from scipy import ndimage

from src.config import VARIANTS
from src.nn import Module
from src.synthdata import generate_one
from src.tensor import Tensor, add, gradcheck, mul, no_grad, reduce_sum
from src.vision import (
    NEIGHBORHOOD_FEATURES,
    GroupingError,
    GroupingStage,
    ImageCache,
    SuperpixelError,
    SuperpixelMap,
    VisionEncoder,
    encode_image,
    farthest_point_indices,
    grid_labels,
    grid_shape,
    group_stage,
    neighborhood_features,
    prepare_for,
    prepare_image,
    superpixelize,
)


class TestSuperpixels:
    """Deterministic superpixel maps."""

    def setup_method(self):
        """Set up test fixtures."""
        self.image = generate_one(0, 0, 32).image

    def test_grid_shape(self):
        """Grids are as square as the count allows."""
        assert grid_shape(16) == (4, 4)
        assert grid_shape(196) == (14, 14)
        assert grid_shape(12) == (3, 4)

    def test_grid_labels_cover_every_cell(self):
        """Each grid cell gets an equal share of a divisible canvas."""
        labels = grid_labels(8, 8, 16)
        assert np.bincount(labels.ravel()).tolist() == [4] * 16

    def test_every_label_used_and_connected(self):
        """Each superpixel id is present and 4-connected."""
        result = superpixelize(self.image, 64)
        assert result.labels.shape == (32, 32)
        for label in range(64):
            _, pieces = ndimage.label(result.labels == label)
            assert pieces == 1

    def test_deterministic(self):
        """The same image gives the same labels."""
        first = superpixelize(self.image, 16, iterations=5)
        second = superpixelize(self.image, 16, iterations=5)
        np.testing.assert_array_equal(first.labels, second.labels)

    def test_uniform_image_keeps_grid(self):
        """Without color contrast the grid seeding is a fixed point."""
        image = np.full((16, 16, 3), 0.5)
        result = superpixelize(image, 16)
        np.testing.assert_array_equal(result.labels, grid_labels(16, 16, 16))

    def test_red_blue_halves(self):
        """Two superpixels split a red/blue image at its middle column."""
        image = np.zeros((16, 20, 3))
        image[:, :10] = [1.0, 0.0, 0.0]
        image[:, 10:] = [0.0, 0.0, 1.0]
        labels = superpixelize(image, 2).labels
        assert labels[0, 0] != labels[0, -1]
        for row in labels:
            boundary = int(np.flatnonzero(row != row[0])[0])
            assert abs(boundary - 10) <= 1
            assert np.all(row[:boundary] == row[0])
            assert np.all(row[boundary:] == row[-1])

    def test_too_many_superpixels(self):
        """More than HW/4 superpixels is rejected."""
        with pytest.raises(SuperpixelError):
            superpixelize(np.zeros((8, 8, 3)), 17)

    def test_neighborhood_features(self):
        """Every pixel gets 27 values; the center block is the pixel itself."""
        features = neighborhood_features(self.image)
        assert features.shape == (32, 32, NEIGHBORHOOD_FEATURES)
        np.testing.assert_array_equal(features[..., 12:15], self.image)

    def test_prepare_for_plain_vit_uses_grid(self, tiny_config):
        """plain-vit tokens come from a uniform patch grid."""
        image = generate_one(0, 1, 24).image
        prepared = prepare_for(image, tiny_config, "plain-vit")
        np.testing.assert_array_equal(prepared.labels, grid_labels(24, 24, 16))
        assert prepared.features.shape == (16, NEIGHBORHOOD_FEATURES)


class TestGrouping:
    """Farthest-point seeding and soft assignment."""

    def setup_method(self):
        """Set up test fixtures."""
        self.rng = np.random.default_rng(0)

    def test_farthest_point_order(self):
        """Seeding starts at row 0 then takes the farthest point."""
        points = np.array([[0.0, 0.0], [1.0, 0.0], [10.0, 0.0], [5.0, 0.0]])
        assert farthest_point_indices(points, 3).tolist() == [0, 2, 3]

    def test_assignment_rows_sum_to_one(self):
        """Each token's assignment is a distribution over segments."""
        stage = GroupingStage(4, 2, 2, 0.07, self.rng)
        tokens = Tensor(self.rng.normal(size=(2, 6, 4)))
        with no_grad():
            merged, cls, assignment = group_stage(
                tokens, Tensor(np.zeros((2, 4))), 3, stage
            )
        assert merged.shape == (2, 3, 4)
        assert cls.shape == (2, 4)
        np.testing.assert_allclose(assignment.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_planted_clusters_are_pure(self):
        """Two tight, far-apart clusters each claim their own segment."""
        stage = GroupingStage(8, 2, 2, 0.05, self.rng)
        centers = np.eye(8)[:2]
        members = np.repeat(centers, 4, axis=0)
        tokens = Tensor((members + 0.01 * self.rng.normal(size=(8, 8)))[None])
        with no_grad():
            _, _, assignment = group_stage(tokens, Tensor(np.zeros((1, 8))), 2, stage)
        rows = assignment.data[0]
        assert np.all(rows[:4, 0] >= 0.99)
        assert np.all(rows[4:, 1] >= 0.99)

    def test_one_less_than_input(self):
        """Grouping M tokens into M - 1 segments is allowed."""
        stage = GroupingStage(4, 2, 2, 0.07, self.rng)
        tokens = Tensor(self.rng.normal(size=(1, 5, 4)))
        with no_grad():
            merged, _, assignment = group_stage(
                tokens, Tensor(np.zeros((1, 4))), 4, stage
            )
        assert merged.shape == (1, 4, 4)
        np.testing.assert_allclose(assignment.data.sum(axis=-1), 1.0, atol=1e-9)

    def test_target_must_shrink(self):
        """Grouping into as many segments as tokens is rejected."""
        stage = GroupingStage(4, 2, 2, 0.07, self.rng)
        with pytest.raises(GroupingError):
            group_stage(Tensor(np.zeros((1, 3, 4))), Tensor(np.zeros((1, 4))), 3, stage)

    def test_gradients(self):
        """Grouping passes gradcheck through assignment and merge."""
        stage = GroupingStage(4, 2, 2, 0.5, self.rng)
        tokens = Tensor(self.rng.normal(size=(1, 5, 4)), requires_grad=True)
        cls = Tensor(self.rng.normal(size=(1, 4)), requires_grad=True)
        weights = Tensor(self.rng.normal(size=(2, 4)))

        def loss(t, c, log_temp):
            merged, new_cls, _ = group_stage(t, c, 2, stage)
            return reduce_sum(mul(merged, weights)) + reduce_sum(new_cls)

        assert gradcheck(loss, [tokens, cls, stage.log_temp])


class TestVisionEncoder:
    """End-to-end visual hierarchy."""

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_shapes_per_variant(self, tiny_config, samples, variant):
        """Every variant yields fine and coarse features of the expected size."""
        encoder = VisionEncoder(tiny_config, np.random.default_rng(0), variant)
        images = [prepare_for(s.image, tiny_config, variant) for s in samples[:2]]
        with no_grad():
            hierarchy = encoder(images)
        fine_count = 2 if variant == "flat-loss" else tiny_config.stage_sizes[0]
        assert hierarchy.v_fine.shape == (2, fine_count, tiny_config.embed_dim)
        assert hierarchy.v_coarse.shape == (2, tiny_config.embed_dim)
        pixel_map = hierarchy.fine_pixel_map()
        assert pixel_map.shape == (2, 24 * 24, fine_count)
        np.testing.assert_allclose(pixel_map.sum(axis=-1), 1.0, atol=1e-9)

    def test_superpixel_tokens_per_image(self, tiny_config, samples):
        """One token per superpixel; an image's tokens ignore its batch mates."""
        encoder = VisionEncoder(tiny_config, np.random.default_rng(0))
        images = [prepare_for(s.image, tiny_config, "caft") for s in samples[:2]]
        with no_grad():
            batched = encoder.superpixel_tokens(images).data
            alone = encoder.superpixel_tokens(images[:1]).data
        count = images[0].features.shape[0]
        assert batched.shape == (2, count, tiny_config.vision_width)
        np.testing.assert_allclose(batched[0], alone[0], rtol=1e-12, atol=1e-12)

    def test_relabeling_permutes_token_rows(self, tiny_config, samples):
        """Renumbering superpixels renumbers their tokens the same way."""
        encoder = VisionEncoder(tiny_config, np.random.default_rng(0))
        image = samples[0].image
        superpixels = superpixelize(image, tiny_config.superpixels, 3)
        order = np.random.default_rng(4).permutation(superpixels.count)
        relabeled = SuperpixelMap(order[superpixels.labels], superpixels.count)
        with no_grad():
            tokens = encoder.superpixel_tokens([prepare_image(image, superpixels)])
            moved = encoder.superpixel_tokens([prepare_image(image, relabeled)])
        np.testing.assert_allclose(
            moved.data[0][order], tokens.data[0], rtol=1e-12, atol=1e-12
        )

    def test_single_superpixel_token(self, tiny_config, samples):
        """One superpixel pools the whole image at centroid (0.5, 0.5)."""
        encoder = VisionEncoder(tiny_config, np.random.default_rng(0))
        image = samples[0].image
        whole = SuperpixelMap(np.zeros(image.shape[:2], dtype=np.int64), 1)
        prepared = prepare_image(image, whole)
        np.testing.assert_allclose(prepared.centroids, [[0.5, 0.5]], atol=1e-12)
        pixels = neighborhood_features(image).reshape(-1, NEIGHBORHOOD_FEATURES)
        mean = pixels.mean(axis=0)
        np.testing.assert_allclose(prepared.features[0], mean, atol=1e-12)
        with no_grad():
            token = encoder.superpixel_tokens([prepared]).data[0, 0]
            expected = add(
                encoder.patch_embed(Tensor(mean[None])),
                encoder.pos_embed(Tensor(np.array([[0.5, 0.5]]))),
            ).data[0]
        np.testing.assert_allclose(token, expected, rtol=1e-9, atol=1e-12)

    def test_stage_assignments_compose(self, tiny_config, samples):
        """Composed pixel assignments stay row-stochastic at every stage."""
        encoder = VisionEncoder(tiny_config, np.random.default_rng(0))
        with no_grad():
            hierarchy = encode_image(samples[0].image, encoder, tiny_config)
        for stage, size in enumerate(tiny_config.stage_sizes, start=1):
            composed = hierarchy.pixel_assignment(stage)
            assert composed.shape == (1, 24 * 24, size)
            np.testing.assert_allclose(composed.sum(axis=-1), 1.0, atol=1e-9)

    def test_plain_vit_map_is_crisp(self, tiny_config, samples):
        """Patch tokens map each pixel to exactly one fine token."""
        encoder = VisionEncoder(tiny_config, np.random.default_rng(0), "plain-vit")
        with no_grad():
            prepared = prepare_for(samples[0].image, tiny_config, "plain-vit")
            hierarchy = encoder([prepared])
        assert set(np.unique(hierarchy.fine_pixel_map())) <= {0.0, 1.0}

    def test_parameters_shared_across_variants(self, tiny_config):
        """Ablations allocate the same parameter names and shapes."""
        shapes = {}
        for variant in VARIANTS:
            encoder = VisionEncoder(tiny_config, np.random.default_rng(0), variant)
            shapes[variant] = {n: p.shape for n, p in encoder.parameters().items()}
        assert all(s == shapes["caft"] for s in shapes.values())
        assert isinstance(encoder, Module)

    def test_image_cache_prepares_once(self, tiny_config, samples):
        """Cached preparations are reused by sample id."""
        cache = ImageCache(tiny_config, "caft", max_workers=2)
        cache.warm(samples[:3])
        first = cache.get(samples[0].sample_id, samples[0].image)
        assert cache.get(samples[0].sample_id, samples[0].image) is first
