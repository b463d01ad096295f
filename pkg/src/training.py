"""AdamW with warmup and cosine decay, and the epoch/batch training loop."""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .alignment import assemble_batch
from .config import STREAM_BATCH, STREAM_ORDER, RunConfig, TrainConfig
from .model import CaftModel
from .tensor import NumericalError, Tensor, backward
from .text import Vocabulary
from .vision import ImageCache

logger = logging.getLogger(__name__)

METRICS_HEADER = "step,lr,part_loss,whole_loss,total,tau_p,tau_w"


class TrainingError(NumericalError):
    """Raised when a training step produces non-finite values."""

    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


@dataclass
class TrainState:
    step: int
    params: Dict[str, Tensor]
    first_moment: Dict[str, np.ndarray]
    second_moment: Dict[str, np.ndarray]
    rng_state: dict = field(default_factory=dict)

    @classmethod
    def fresh(cls, model: CaftModel, seed: int) -> "TrainState":
        params = model.parameters()
        return cls(
            step=0,
            params=params,
            first_moment={n: np.zeros_like(p.data) for n, p in params.items()},
            second_moment={n: np.zeros_like(p.data) for n, p in params.items()},
            rng_state=np.random.default_rng([seed, STREAM_BATCH]).bit_generator.state,
        )


def lr_at(step: int, config: TrainConfig, total_steps: int) -> float:
    """Linear warmup to ``base_lr``, then cosine decay to zero at ``total_steps``."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if total_steps <= config.warmup_steps:
        raise ValueError(
            f"total steps ({total_steps}) must exceed "
            f"warmup steps ({config.warmup_steps})"
        )
    if step < config.warmup_steps:
        return config.base_lr * step / config.warmup_steps
    progress = min(step - config.warmup_steps, total_steps - config.warmup_steps)
    fraction = progress / (total_steps - config.warmup_steps)
    return config.base_lr * 0.5 * (1.0 + math.cos(math.pi * fraction))


def decays(name: str, param: Tensor) -> bool:
    """Matrices decay; scalars, gains, biases and positional parameters do not.

    A parameter is positional when its own name or its owning layer starts
    with ``pos_`` (``text.pos_sub``, ``vision.pos_embed.weight``).
    """
    positional = any(part.startswith("pos_") for part in name.split(".")[-2:])
    return param.ndim >= 2 and not positional


def clip_gradients(
    grads: Dict[str, np.ndarray], max_norm: float
) -> Tuple[Dict[str, np.ndarray], float]:
    """Rescale all gradients together when their global L2 norm exceeds ``max_norm``."""
    norm = math.sqrt(math.fsum(float((g * g).sum()) for g in grads.values()))
    if norm > max_norm:
        factor = max_norm / norm
        grads = {name: g * factor for name, g in grads.items()}
    return grads, norm


def adamw_step(
    state: TrainState,
    grads: Dict[str, np.ndarray],
    lr: float,
    config: TrainConfig,
) -> TrainState:
    """Decoupled weight decay plus bias-corrected Adam moments, in place."""
    t = state.step + 1
    correction1 = 1.0 - config.beta1**t
    correction2 = 1.0 - config.beta2**t
    for name, param in state.params.items():
        grad = grads[name]
        if not np.all(np.isfinite(grad)):
            raise NumericalError(f"non-finite gradient for parameter {name}")
        m = state.first_moment[name]
        v = state.second_moment[name]
        m *= config.beta1
        m += (1.0 - config.beta1) * grad
        v *= config.beta2
        v += (1.0 - config.beta2) * grad * grad
        if config.weight_decay and decays(name, param):
            param.data -= lr * config.weight_decay * param.data
        update = (m / correction1) / (np.sqrt(v / correction2) + config.adam_eps)
        param.data -= lr * update
    state.step = t
    return state


class Trainer:
    """Owns one model and its TrainState for the duration of a run."""

    def __init__(
        self,
        model: CaftModel,
        run_config: RunConfig,
        samples: Sequence,
        vocab: Vocabulary,
        cache: ImageCache,
        state: Optional[TrainState] = None,
        metrics_path: Optional[str] = None,
    ):
        if not samples:
            raise ValueError("Training needs at least one sample")
        self.model = model
        self.run_config = run_config
        self.config = run_config.train
        self.samples = list(samples)
        self.vocab = vocab
        self.cache = cache
        self.state = state or TrainState.fresh(model, self.config.seed)
        self.metrics_path = metrics_path
        self.logger = logging.getLogger(__name__)
        self._rng = np.random.default_rng()
        self._rng.bit_generator.state = self.state.rng_state
        self.steps_per_epoch = math.ceil(len(self.samples) / self.config.batch_size)
        self.total_steps = self.config.epochs * self.steps_per_epoch

    def batch_indices(self, step: int) -> np.ndarray:
        """Sample positions for the batch that completes step ``step + 1``."""
        epoch, position = divmod(step, self.steps_per_epoch)
        rng = np.random.default_rng([self.config.seed, STREAM_ORDER, epoch])
        order = rng.permutation(len(self.samples))
        size = self.config.batch_size
        return order[position * size : (position + 1) * size]

    def _open_metrics(self):
        if self.metrics_path is None:
            return None
        path = Path(self.metrics_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        if self.state.step == 0 or not path.exists():
            handle = open(path, "w", encoding="utf-8")
            handle.write(METRICS_HEADER + "\n")
        else:
            handle = open(path, "a", encoding="utf-8")
        return handle

    def train_step(self) -> List[float]:
        """Run one optimization step and return its metrics row."""
        step = self.state.step
        model_config = self.model.config
        picked = [self.samples[i] for i in self.batch_indices(step)]
        batch = assemble_batch(
            picked,
            model_config.sub_captions,
            model_config.num_chunks,
            self._rng,
            self.vocab,
            model_config.context_length,
        )
        images = [self.cache.get(s.sample_id, s.image) for s in picked]
        lr = lr_at(step + 1, self.config, self.total_steps)
        try:
            self.model.zero_grad()
            losses = self.model.losses(batch, images)
            backward(losses.total)
            grads = {
                name: (p.grad if p.grad is not None else np.zeros_like(p.data))
                for name, p in self.state.params.items()
            }
            grads, norm = clip_gradients(grads, self.config.grad_clip)
            if not math.isfinite(norm):
                raise NumericalError("gradient norm is not finite")
            adamw_step(self.state, grads, lr, self.config)
        except NumericalError as e:
            raise TrainingError(step + 1, str(e))
        self.state.rng_state = self._rng.bit_generator.state
        tau_p, tau_w = self.model.head.temperatures()
        return [
            float(self.state.step),
            lr,
            losses.part.item(),
            losses.whole.item(),
            losses.total.item(),
            tau_p,
            tau_w,
        ]

    def train(self, max_steps: Optional[int] = None) -> TrainState:
        """Train until ``total_steps`` (or ``max_steps``) steps have completed."""
        stop = self.total_steps
        if max_steps is not None:
            stop = min(max_steps, stop)
        self.logger.info(
            f"Training {self.model.variant} on {len(self.samples)} samples: "
            f"{self.steps_per_epoch} steps/epoch, {self.total_steps} total, "
            f"resuming at step {self.state.step}"
        )
        handle = self._open_metrics()
        try:
            while self.state.step < stop:
                row = self.train_step()
                if handle is not None:
                    values = ",".join(f"{v:.17g}" for v in row[1:])
                    handle.write(f"{int(row[0])},{values}\n")
                    handle.flush()
                if self.state.step % self.config.log_every == 0:
                    self.logger.info(
                        f"step {self.state.step}/{self.total_steps} lr={row[1]:.3e} "
                        f"part={row[2]:.4f} whole={row[3]:.4f} total={row[4]:.4f}"
                    )
        finally:
            if handle is not None:
                handle.close()
        return self.state


def train(
    samples: Sequence,
    vocab: Vocabulary,
    run_config: RunConfig,
    cache: Optional[ImageCache] = None,
    metrics_path: Optional[str] = None,
) -> Tuple[CaftModel, TrainState]:
    """Build a model from the run seed and train it on ``samples``."""
    model_config = run_config.model.model_copy(update={"vocab_size": len(vocab)})
    run_config = run_config.model_copy(update={"model": model_config})
    model = CaftModel(model_config, run_config.train.seed, run_config.train.variant)
    cache = cache or ImageCache(model_config, run_config.train.variant)
    cache.warm(samples)
    trainer = Trainer(
        model, run_config, samples, vocab, cache, metrics_path=metrics_path
    )
    return model, trainer.train()
