"""Shared builders for random layer states and tiny models."""

import numpy as np
import pytest

from layerblend.data import CLS_ID, EOS_ID, PAD_ID, TokenizedSequence
from layerblend.diffcore import Tensor
from layerblend.encoder import LayerStates


def make_masks(rng: np.random.Generator, seq_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Random but well-formed attention / code-token masks for one sequence."""
    n_code = int(rng.integers(1, seq_len - 2))
    attention = np.zeros(seq_len, dtype=bool)
    attention[: n_code + 2] = True          # CLS + code + EOS
    code = np.zeros(seq_len, dtype=bool)
    code[1 : 1 + n_code] = True
    return attention, code


def make_states(rng: np.random.Generator, num_layers: int, seq_len: int,
                hidden: int, batch: int | None = None,
                requires_grad: bool = False) -> LayerStates:
    """Random LayerStates with consistent masks; batched when asked."""
    if batch is None:
        values = rng.standard_normal((num_layers, seq_len, hidden))
        attention, code = make_masks(rng, seq_len)
    else:
        values = rng.standard_normal((num_layers, batch, seq_len, hidden))
        pairs = [make_masks(rng, seq_len) for _ in range(batch)]
        attention = np.stack([p[0] for p in pairs])
        code = np.stack([p[1] for p in pairs])
    return LayerStates(
        states=Tensor(values, requires_grad=requires_grad),
        attention_mask=attention,
        code_token_mask=code,
    )


def make_sequence(rng: np.random.Generator, seq_len: int, vocab: int,
                  label: int = 0) -> TokenizedSequence:
    """A hand-built tokenized sequence over an arbitrary vocabulary size."""
    n_code = int(rng.integers(1, seq_len - 2))
    ids = np.full(seq_len, PAD_ID, dtype=np.int64)
    ids[0] = CLS_ID
    ids[1 : 1 + n_code] = rng.integers(4, vocab, size=n_code)
    ids[1 + n_code] = EOS_ID
    attention = ids != PAD_ID
    code = np.zeros(seq_len, dtype=bool)
    code[1 : 1 + n_code] = True
    return TokenizedSequence(ids, attention, code, label=label)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
