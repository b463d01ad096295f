"""Tests for synthetic scene generation, corpus splitting and corpus files."""

import filecmp
import shutil
import tempfile
from pathlib import Path

import numpy as np
import pytest

from src.synthdata import (
    GRID,
    LOCATIONS,
    CorpusError,
    SceneError,
    corpus_split,
    generate,
    generate_one,
    parse_object_sentence,
    read_corpus,
    vocabulary,
    write_corpus,
)
from src.text import UNK, tokenize_chunk


class TestGenerate:
    """Scene sampling and rendering."""

    def test_deterministic_per_index(self):
        """Regenerating an index yields an identical sample."""
        first, second = generate_one(0, 0, 32), generate_one(0, 0, 32)
        assert first.scene == second.scene
        assert first.image.tobytes() == second.image.tobytes()
        assert first.long_caption == second.long_caption

    def test_parallel_matches_serial(self):
        """Worker count does not change the output."""
        serial = generate(3, 6, 32)
        parallel = generate(3, 6, 32, max_workers=3)
        assert [s.scene for s in serial] == [s.scene for s in parallel]

    def test_sentence_count(self):
        """One scene sentence plus one per object."""
        for sample in generate(1, 50, 32):
            assert len(sample.long_caption) == len(sample.scene.objects) + 1
            assert 2 <= len(sample.scene.objects) <= 4

    def test_masks_are_disjoint_and_large_enough(self):
        """Masks never overlap and cover at least 9 pixels at canvas 32."""
        for sample in generate(2, 300, 32):
            total = np.zeros((32, 32), dtype=int)
            for mask in sample.masks:
                assert mask.sum() >= 9
                total += mask
            assert total.max() <= 1

    def test_objects_are_distinct(self):
        """No two objects share a cell or a (color, shape) pair."""
        for sample in generate(4, 200, 32):
            objects = sample.scene.objects
            assert len({o.cell for o in objects}) == len(objects)
            assert len({(o.color, o.shape) for o in objects}) == len(objects)
            assert all(o.color != sample.scene.background for o in objects)

    def test_caption_faithfulness(self):
        """Each object sentence names the color, shape and cell of its mask."""
        for sample in generate(5, 200, 32):
            for sentence_index, k in sample.sentence_to_object.items():
                obj = sample.scene.objects[k]
                color, shape, location = parse_object_sentence(
                    sample.long_caption[sentence_index]
                )
                ys, xs = np.nonzero(sample.masks[k])
                step = 32 / GRID
                cell = int(ys.mean() // step) * GRID + int(xs.mean() // step)
                assert (color, shape) == (obj.color, obj.shape)
                assert location == LOCATIONS[cell]

    def test_closed_vocabulary(self):
        """Generated captions tokenize without UNK."""
        vocab = vocabulary()
        for sample in generate(6, 100, 32):
            for text in sample.long_caption + sample.short_captions:
                assert UNK not in tokenize_chunk(text, vocab, 32).tolist()

    def test_canvas_too_small(self):
        """Canvases under 24 pixels are rejected."""
        with pytest.raises(SceneError, match="Canvas"):
            generate(0, 1, 16)

    def test_count_must_be_positive(self):
        """Zero samples is rejected."""
        with pytest.raises(SceneError):
            generate(0, 0, 32)


class TestSplit:
    """Seeded train/test split."""

    def test_sizes_and_partition(self):
        """100 samples at 0.8 split 80/20 and cover the input."""
        samples = generate(0, 100, 24)
        train, test = corpus_split(samples, 0.8, seed=0)
        assert (len(train), len(test)) == (80, 20)
        ids = sorted(s.sample_id for s in train + test)
        assert ids == list(range(100))

    def test_deterministic(self):
        """The same seed gives the same split."""
        samples = generate(0, 40, 24)
        first = corpus_split(samples, 0.75, seed=9)
        second = corpus_split(samples, 0.75, seed=9)
        assert [s.sample_id for s in first[0]] == [s.sample_id for s in second[0]]

    def test_no_scene_on_both_sides(self):
        """Duplicated scenes stay on one side."""
        samples = generate(0, 20, 24)
        duplicated = samples + [generate_one(0, 3, 24)]
        train, test = corpus_split(duplicated, 0.5, seed=1)
        assert not {s.scene for s in train} & {s.scene for s in test}

    def test_bad_fraction(self):
        """Fractions outside (0, 1) are rejected."""
        with pytest.raises(SceneError):
            corpus_split(generate(0, 4, 24), 1.0, seed=0)

    def test_empty_side(self):
        """A split that empties one side is rejected."""
        with pytest.raises(SceneError, match="empty"):
            corpus_split(generate(0, 2, 24), 0.1, seed=0)


class TestCorpusFiles:
    """Corpus directory layout."""

    def setup_method(self):
        """Set up test fixtures."""
        self.temp_dir = tempfile.mkdtemp()
        self.root = Path(self.temp_dir)

    def teardown_method(self):
        """Clean up test fixtures."""
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_layout(self):
        """Images, masks, captions, manifest and vocabulary are written."""
        samples = generate(0, 3, 24)
        write_corpus(str(self.root / "data"), samples)
        data = self.root / "data"
        assert (data / "manifest.txt").is_file()
        assert (data / "vocab.txt").is_file()
        assert (data / "images" / "0000.ppm").is_file()
        assert (data / "masks" / "0000_0.pgm").is_file()
        captions = (data / "captions" / "0000.txt").read_text().splitlines()
        assert captions == samples[0].long_caption

    def test_read_back(self):
        """read_corpus restores scenes, images, masks and captions."""
        samples = generate(0, 4, 24)
        write_corpus(str(self.root / "data"), samples)
        loaded, vocab = read_corpus(str(self.root / "data"))
        assert vocab == vocabulary()
        for original, restored in zip(samples, loaded):
            assert restored.scene == original.scene
            np.testing.assert_array_equal(restored.image, original.image)
            for a, b in zip(restored.masks, original.masks):
                np.testing.assert_array_equal(a, b)
            assert restored.short_captions == original.short_captions

    def test_byte_identical_rewrites(self):
        """Writing the same corpus twice yields identical files."""
        samples = generate(0, 3, 24)
        write_corpus(str(self.root / "a"), samples)
        write_corpus(str(self.root / "b"), generate(0, 3, 24))
        comparison = filecmp.dircmp(self.root / "a", self.root / "b")
        assert not comparison.diff_files
        for sub in ("images", "masks", "captions"):
            _, mismatch, errors = filecmp.cmpfiles(
                self.root / "a" / sub,
                self.root / "b" / sub,
                [p.name for p in (self.root / "a" / sub).iterdir()],
                shallow=False,
            )
            assert not mismatch and not errors

    def test_missing_manifest(self):
        """A directory without a manifest is not a corpus."""
        with pytest.raises(CorpusError, match="manifest"):
            read_corpus(str(self.root))
