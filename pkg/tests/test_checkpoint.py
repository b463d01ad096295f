"""Tests for checkpoint files and training resume."""

import shutil
import tempfile
from pathlib import Path

import numpy as np
import pytest

from src.checkpoint import (
    MAGIC,
    CheckpointError,
    checkpoint_load,
    checkpoint_save,
    restore_model,
)
from src.config import RunConfig, config_digest
from src.model import CaftModel
from src.training import Trainer, TrainState
from src.vision import ImageCache


class TestCheckpointFiles:
    """Binary layout, validation and round trips."""

    def setup_method(self):
        """Set up test fixtures."""
        self.temp_dir = tempfile.mkdtemp()
        self.path = str(Path(self.temp_dir) / "ckpt.bin")

    def teardown_method(self):
        """Clean up test fixtures."""
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def save_fresh(self, tiny_run, vocab):
        model = CaftModel(tiny_run.model, tiny_run.train.seed)
        state = TrainState.fresh(model, tiny_run.train.seed)
        checkpoint_save(self.path, state, tiny_run, vocab.tokens)
        return model, state

    def test_load_restores_everything(self, tiny_run, vocab):
        """Parameters, moments, step, rng state, config and vocabulary survive."""
        _, state = self.save_fresh(tiny_run, vocab)
        loaded = checkpoint_load(self.path)
        assert loaded.run_config == tiny_run
        assert loaded.vocab == vocab.tokens
        assert loaded.state.step == 0
        assert loaded.state.rng_state == state.rng_state
        for name, param in state.params.items():
            np.testing.assert_array_equal(loaded.state.params[name].data, param.data)
            np.testing.assert_array_equal(
                loaded.state.first_moment[name], state.first_moment[name]
            )

    def test_resave_is_byte_identical(self, tiny_run, vocab):
        """save -> load -> save reproduces the same bytes."""
        self.save_fresh(tiny_run, vocab)
        loaded = checkpoint_load(self.path)
        again = str(Path(self.temp_dir) / "again.bin")
        checkpoint_save(again, loaded.state, loaded.run_config, loaded.vocab)
        assert Path(again).read_bytes() == Path(self.path).read_bytes()

    def test_starts_with_magic(self, tiny_run, vocab):
        """Files open with the format magic."""
        self.save_fresh(tiny_run, vocab)
        assert Path(self.path).read_bytes()[:4] == MAGIC

    def test_truncated(self, tiny_run, vocab):
        """A cut-off file is rejected."""
        self.save_fresh(tiny_run, vocab)
        payload = Path(self.path).read_bytes()
        Path(self.path).write_bytes(payload[: len(payload) // 2])
        with pytest.raises(CheckpointError, match="truncated"):
            checkpoint_load(self.path)

    def test_trailing_bytes(self, tiny_run, vocab):
        """Extra bytes after the rng record are rejected."""
        self.save_fresh(tiny_run, vocab)
        with open(self.path, "ab") as f:
            f.write(b"\x00")
        with pytest.raises(CheckpointError, match="trailing"):
            checkpoint_load(self.path)

    def test_bad_magic(self):
        """Foreign files are rejected."""
        Path(self.path).write_bytes(b"NOPE" + bytes(32))
        with pytest.raises(CheckpointError, match="magic"):
            checkpoint_load(self.path)

    def test_missing_file(self):
        """A missing path is a CheckpointError."""
        with pytest.raises(CheckpointError, match="Cannot read"):
            checkpoint_load(str(Path(self.temp_dir) / "missing.bin"))

    def test_digest_mismatch(self, tiny_run, vocab):
        """Loading against a different model configuration fails."""
        self.save_fresh(tiny_run, vocab)
        other = tiny_run.model.model_copy(update={"embed_dim": 16})
        with pytest.raises(CheckpointError, match="differs"):
            checkpoint_load(self.path, expected_digest=config_digest(other))

    def test_restore_rejects_other_shapes(self, tiny_run, vocab):
        """restore_model refuses a run config with another model digest."""
        self.save_fresh(tiny_run, vocab)
        other = RunConfig(
            model=tiny_run.model.model_copy(update={"embed_dim": 16}),
            train=tiny_run.train,
        )
        with pytest.raises(CheckpointError):
            restore_model(checkpoint_load(self.path), other)

    def test_restore_binds_state(self, tiny_run, vocab):
        """The restored state updates the restored model's own parameters."""
        model, _ = self.save_fresh(tiny_run, vocab)
        restored, state = restore_model(checkpoint_load(self.path))
        assert state.params["text.token_embedding"] is restored.text.token_embedding
        np.testing.assert_array_equal(
            restored.text.token_embedding.data, model.text.token_embedding.data
        )


class TestResume:
    """Interrupted training continues bit-identically."""

    def setup_method(self):
        """Set up test fixtures."""
        self.temp_dir = tempfile.mkdtemp()
        self.dir = Path(self.temp_dir)

    def teardown_method(self):
        """Clean up test fixtures."""
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    @pytest.mark.slow
    def test_resume_matches_uninterrupted(self, tiny_run, samples, vocab):
        """2 steps + save + load + 2 steps equals 4 straight steps."""
        cache = ImageCache(tiny_run.model, "caft")

        straight = CaftModel(tiny_run.model, tiny_run.train.seed)
        Trainer(
            straight, tiny_run, samples, vocab, cache,
            metrics_path=str(self.dir / "straight.csv"),
        ).train(4)

        first = CaftModel(tiny_run.model, tiny_run.train.seed)
        state = Trainer(
            first, tiny_run, samples, vocab, cache,
            metrics_path=str(self.dir / "resumed.csv"),
        ).train(2)
        checkpoint_save(str(self.dir / "half.bin"), state, tiny_run, vocab.tokens)
        model, state = restore_model(checkpoint_load(str(self.dir / "half.bin")))
        Trainer(
            model, tiny_run, samples, vocab, cache, state,
            metrics_path=str(self.dir / "resumed.csv"),
        ).train(4)

        for name, param in straight.parameters().items():
            np.testing.assert_array_equal(model.parameters()[name].data, param.data)
        assert (self.dir / "resumed.csv").read_bytes() == (
            self.dir / "straight.csv"
        ).read_bytes()
