"""Caption hierarchy: sentence splitting, chunking, tokenization and text encoders."""

import logging
import os
import re
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .config import ModelConfig
from .nn import (
    LayerNorm,
    Linear,
    Module,
    TransformerBlock,
    causal_mask,
    init_param,
    const_param,
    key_padding_mask,
)
from .tensor import (
    Tensor,
    add,
    concat,
    embedding,
    gelu,
    index,
    mul,
    reshape,
    sub,
)

logger = logging.getLogger(__name__)

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")

_SENTENCE_BREAK = re.compile(r"(?<=[.!?])\s+")
_WORD = re.compile(r"[a-z0-9]+")


class CaptionError(ValueError):
    """Raised when a caption has no usable content."""

    pass


class ChunkingError(ValueError):
    """Raised when sentences cannot be grouped into chunks."""

    pass


class VocabularyError(ValueError):
    """Raised when a vocabulary file is malformed."""

    pass


def words_of(text: str) -> List[str]:
    return _WORD.findall(text.lower())


class Vocabulary:
    """Word-level vocabulary with four reserved ids."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:4]) != SPECIAL_TOKENS:
            raise VocabularyError(
                f"First four tokens must be {SPECIAL_TOKENS}, got {tokens[:4]}"
            )
        if len(set(tokens)) != len(tokens):
            raise VocabularyError("Vocabulary tokens must be unique")
        self.tokens = tokens
        self._ids = {token: i for i, token in enumerate(tokens)}

    @classmethod
    def from_words(cls, words: Iterable[str]) -> "Vocabulary":
        """Build from arbitrary words; ids follow sorted order after the specials."""
        unique = sorted({w.lower() for w in words} - set(SPECIAL_TOKENS))
        return cls([*SPECIAL_TOKENS, *unique])

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def id_of(self, word: str) -> int:
        return self._ids.get(word, UNK)

    def save(self, path: str) -> None:
        """Write one token per line via a temporary file and atomic rename."""
        target = Path(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        fd, temp_path = tempfile.mkstemp(dir=target.parent, prefix=".tmp_vocab_")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as f:
                f.write("\n".join(self.tokens) + "\n")
            os.replace(temp_path, target)
        except OSError:
            if os.path.exists(temp_path):
                os.remove(temp_path)
            raise

    @classmethod
    def load(cls, path: str) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([line.strip() for line in lines if line.strip()])


@dataclass
class CaptionHierarchy:
    """A caption split into sentences and grouped into N tokenized chunks."""

    sentences: List[str]
    chunks: List[List[int]]
    chunk_mask: np.ndarray
    token_ids: np.ndarray

    def chunk_texts(self) -> List[str]:
        return [" ".join(self.sentences[i] for i in chunk) for chunk in self.chunks]


def split_sentences(caption: str) -> List[str]:
    """Split on . ! ? followed by whitespace; a trailing fragment is kept."""
    if not caption or not words_of(caption):
        raise CaptionError(f"Caption has no alphanumeric content: {caption!r}")
    parts = (part.strip() for part in _SENTENCE_BREAK.split(caption.strip()))
    return [part for part in parts if part]


def _check_chunk_args(sentences: Sequence[str], n_chunks: int) -> None:
    if n_chunks < 1:
        raise ChunkingError(f"Number of chunks must be >= 1, got {n_chunks}")
    if not sentences:
        raise ChunkingError("Cannot chunk an empty sentence list")


def chunk_random(
    sentences: Sequence[str], n_chunks: int, rng: np.random.Generator
) -> List[List[int]]:
    """Training chunking: 1-3 consecutive sentences per chunk.

    Sentences past the consumed prefix are discarded. With fewer sentences
    than chunks, every sentence gets a chunk and the rest resample a single
    sentence with replacement.
    """
    _check_chunk_args(sentences, n_chunks)
    total = len(sentences)
    if total < n_chunks:
        chunks = [[i] for i in range(total)]
        chunks += [[int(rng.integers(total))] for _ in range(n_chunks - total)]
        return chunks

    pool = min(total, 3 * n_chunks)
    chunks = []
    start = 0
    for position in range(n_chunks):
        still_needed = n_chunks - position - 1
        largest = min(3, pool - start - still_needed)
        size = int(rng.integers(1, largest + 1))
        chunks.append(list(range(start, start + size)))
        start += size
    return chunks


def chunk_balanced(
    sentences: Sequence[str], n_chunks: int
) -> Tuple[List[List[int]], np.ndarray]:
    """Inference chunking: fairest consecutive split, larger chunks first.

    Returns the chunks and a validity mask; with fewer sentences than chunks
    the trailing chunks repeat the last sentence and are marked invalid.
    """
    _check_chunk_args(sentences, n_chunks)
    total = len(sentences)
    if total < n_chunks:
        chunks = [[i] for i in range(total)]
        chunks += [[total - 1] for _ in range(n_chunks - total)]
        mask = np.array([i < total for i in range(n_chunks)])
        return chunks, mask

    base, extra = divmod(total, n_chunks)
    chunks = []
    start = 0
    for position in range(n_chunks):
        size = base + (1 if position < extra else 0)
        chunks.append(list(range(start, start + size)))
        start += size
    return chunks, np.ones(n_chunks, dtype=bool)


def tokenize_chunk(text: str, vocab: Vocabulary, context: int) -> np.ndarray:
    """BOS + lowercase word ids + EOS, truncated to ``context`` and PAD-filled."""
    if context < 3:
        raise ValueError(f"context must be >= 3, got {context}")
    ids = [vocab.id_of(w) for w in words_of(text)][: context - 2]
    sequence = [BOS, *ids, EOS]
    sequence += [PAD] * (context - len(sequence))
    return np.array(sequence, dtype=np.int64)


def build_hierarchy(
    caption: Union[str, Sequence[str]],
    vocab: Vocabulary,
    n_chunks: int,
    context: int,
    rng: Optional[np.random.Generator] = None,
) -> CaptionHierarchy:
    """Chunk a caption (random with ``rng``, balanced without) and tokenize it."""
    if isinstance(caption, str):
        sentences = split_sentences(caption)
    else:
        sentences = list(caption)
    if rng is None:
        chunks, mask = chunk_balanced(sentences, n_chunks)
    else:
        chunks = chunk_random(sentences, n_chunks, rng)
        mask = np.ones(n_chunks, dtype=bool)
    hierarchy = CaptionHierarchy(sentences, chunks, mask, np.zeros(0))
    hierarchy.token_ids = np.stack(
        [tokenize_chunk(t, vocab, context) for t in hierarchy.chunk_texts()]
    )
    return hierarchy


class Adapter(Module):
    """Residual MLP adapter ``g * mlp(x) + (1 - g) * x`` with a scalar gate."""

    def __init__(self, width: int, gate: float, rng: np.random.Generator):
        self.fc_down = Linear(width, width // 4, rng)
        self.fc_up = Linear(width // 4, width, rng)
        self.gate = const_param((), gate)

    def __call__(self, x: Tensor) -> Tensor:
        hidden = self.fc_up(gelu(self.fc_down(x)))
        return add(mul(self.gate, hidden), mul(sub(1.0, self.gate), x))


class TextEncoder(Module):
    """Sub-caption transformer, adapter, and whole-caption transformer."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        width = config.embed_dim
        self.context_length = config.context_length
        self.num_chunks = config.num_chunks
        self.token_embedding = init_param(rng, (config.vocab_size, width), 0.02)
        self.pos_sub = init_param(rng, (config.context_length, width), 0.01)
        self.sub_blocks = [
            TransformerBlock(width, config.heads, config.mlp_ratio, rng)
            for _ in range(config.sub_layers)
        ]
        self.ln_sub = LayerNorm(width)
        self.sub_proj = Linear(width, width, rng, bias=False)
        self.adapter = Adapter(width, config.adapter_gate, rng)
        self.cls_whole = init_param(rng, (width,), 0.02)
        self.pos_whole = init_param(rng, (config.num_chunks + 1, width), 0.01)
        self.whole_blocks = [
            TransformerBlock(width, config.heads, config.mlp_ratio, rng)
            for _ in range(config.whole_layers)
        ]
        self.ln_whole = LayerNorm(width)
        self.whole_proj = Linear(width, width, rng, bias=False)
        self._causal = causal_mask(config.context_length)

    def encode_sub(self, token_ids: np.ndarray) -> Tensor:
        """Encode ``(J, context)`` token rows independently; read out at EOS."""
        token_ids = np.asarray(token_ids, dtype=np.int64)
        if token_ids.ndim != 2 or token_ids.shape[1] != self.context_length:
            raise ValueError(
                f"token rows must have shape (J, {self.context_length}), "
                f"got {token_ids.shape}"
            )
        x = add(embedding(self.token_embedding, token_ids), self.pos_sub)
        for block in self.sub_blocks:
            x = block(x, self._causal)
        x = self.ln_sub(x)
        eos_at = np.argmax(token_ids == EOS, axis=1)
        readout = index(x, (np.arange(token_ids.shape[0]), eos_at))
        return self.sub_proj(readout)

    def adapt(self, t_sub: Tensor) -> Tensor:
        return self.adapter(t_sub)

    def encode_whole(self, adapted: Tensor, chunk_mask: np.ndarray) -> Tensor:
        """Compose ``(..., N, D)`` adapted chunk embeddings into ``(..., D)``.

        Chunks with a false mask entry are hidden from attention.
        """
        chunk_mask = np.asarray(chunk_mask, dtype=bool)
        if chunk_mask.shape != adapted.shape[:-1]:
            raise ValueError(
                f"chunk mask shape {chunk_mask.shape} does not match "
                f"embeddings {adapted.shape}"
            )
        if not np.all(chunk_mask.any(axis=-1)):
            raise ValueError("encode_whole needs at least one valid chunk per caption")
        *lead, _, width = adapted.shape
        cls = add(np.zeros((*lead, 1, width)), self.cls_whole)
        x = add(concat([adapted, cls], axis=-2), self.pos_whole)
        valid = np.concatenate(
            [chunk_mask, np.ones((*lead, 1), dtype=bool)], axis=-1
        )
        blocked = key_padding_mask(valid)
        for block in self.whole_blocks:
            x = block(x, blocked)
        x = self.ln_whole(x)
        readout = index(x, (*([slice(None)] * len(lead)), -1))
        return self.whole_proj(readout)

    def encode_flat(self, token_ids: np.ndarray) -> Tensor:
        """Whole caption through the sub-caption transformer alone, truncated."""
        return self.encode_sub(token_ids)

    def encode_hierarchies(self, hierarchies: Sequence[CaptionHierarchy]):
        """Encode captions to ``t_sub`` ``(C, N, D)`` and ``t_whole`` ``(C, D)``."""
        tokens = np.concatenate([h.token_ids for h in hierarchies])
        count, width = len(hierarchies), self.sub_proj.weight.shape[1]
        t_sub = reshape(self.encode_sub(tokens), (count, self.num_chunks, width))
        mask = np.stack([h.chunk_mask for h in hierarchies])
        t_whole = self.encode_whole(self.adapt(t_sub), mask)
        return t_sub, t_whole
