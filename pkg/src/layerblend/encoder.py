"""A small bidirectional encoder that keeps every layer's hidden states.

Blocks follow the original post-layer-norm order (self-attention, residual,
layer norm, GELU feed-forward, residual, layer norm) with learned absolute
position embeddings and no segment embeddings. PAD positions are masked out
as attention keys but their own hidden states are still computed, so
pooling over "all tokens" has a defined value at every position.

The module also covers checkpoint serialisation, pruning a model to its
first ``l`` blocks, and a small masked-token pretraining loop.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from . import diffcore as dc
from .data import MASK_ID, VOCAB_SIZE, TokenizedSequence, batch_iter
from .diffcore import Adam, Tensor
from .errors import CheckpointError, ContractError, InputError, VocabularyError

LN_EPS = 1e-5
INIT_STD = 0.02
ATTN_MASK_BIAS = -1e9
MLM_MASK_RATE = 0.15
CHECKPOINT_FORMAT_VERSION = 1

Mode = Literal["train", "eval"]


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int
    hidden_size: int
    max_seq: int
    num_heads: int
    ffn_size: int
    vocab_size: int = VOCAB_SIZE
    dropout: float = 0.1

    def __post_init__(self):
        if self.num_layers < 1:
            raise ContractError("need at least one encoder layer")
        if self.max_seq < 4:
            raise ContractError("max_seq must leave room for CLS, a token, EOS, PAD")
        if self.hidden_size % self.num_heads != 0:
            raise ContractError(
                f"hidden size {self.hidden_size} not divisible by "
                f"{self.num_heads} heads"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ContractError("dropout must lie in [0, 1)")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


#: small profile used throughout the desk-scale experiments
DESK_PROFILE = EncoderConfig(
    num_layers=4, hidden_size=32, max_seq=64, num_heads=2, ffn_size=64
)


@dataclass
class LayerStates:
    """All per-layer hidden states for a batch (or a single sequence).

    ``states`` has shape (L, S, H) for one sequence or (L, B, S, H) for a
    batch; row ``l-1`` is the output of encoder block ``l``. The embedding
    output is not included. The masks have shape (S,) or (B, S).
    """

    states: Tensor
    attention_mask: np.ndarray
    code_token_mask: np.ndarray

    def __post_init__(self):
        if self.states.ndim not in (3, 4):
            raise ContractError(
                f"layer states must be (L, S, H) or (L, B, S, H), got "
                f"{self.states.shape}"
            )

    @property
    def num_layers(self) -> int:
        return self.states.shape[0]


def _attention_param_names(layer: int) -> list[str]:
    pre = f"layer{layer}."
    return [pre + n for n in (
        "attn_q_w", "attn_q_b", "attn_k_w", "attn_k_b",
        "attn_v_w", "attn_v_b", "attn_out_w", "attn_out_b",
        "ln1_gamma", "ln1_beta",
        "ffn_in_w", "ffn_in_b", "ffn_out_w", "ffn_out_b",
        "ln2_gamma", "ln2_beta",
    )]


def expected_parameter_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    """The exact parameter set a checkpoint of ``config`` must contain."""
    h, f = config.hidden_size, config.ffn_size
    shapes: dict[str, tuple[int, ...]] = {
        "embed.tokens": (config.vocab_size, h),
        "embed.positions": (config.max_seq, h),
        "embed.ln_gamma": (h,),
        "embed.ln_beta": (h,),
    }
    per_layer = {
        "attn_q_w": (h, h), "attn_q_b": (h,),
        "attn_k_w": (h, h), "attn_k_b": (h,),
        "attn_v_w": (h, h), "attn_v_b": (h,),
        "attn_out_w": (h, h), "attn_out_b": (h,),
        "ln1_gamma": (h,), "ln1_beta": (h,),
        "ffn_in_w": (h, f), "ffn_in_b": (f,),
        "ffn_out_w": (f, h), "ffn_out_b": (h,),
        "ln2_gamma": (h,), "ln2_beta": (h,),
    }
    for layer in range(1, config.num_layers + 1):
        for name, shape in per_layer.items():
            shapes[f"layer{layer}.{name}"] = shape
    return shapes


def init_parameters(config: EncoderConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    for name, shape in expected_parameter_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("gamma"):
            values = np.ones(shape)
        elif leaf.endswith(("_b", "beta")):
            values = np.zeros(shape)
        else:
            values = rng.normal(0.0, INIT_STD, size=shape)
        params[name] = Tensor(values, requires_grad=True)
    return params


@dataclass
class Checkpoint:
    """Config plus a complete named parameter collection."""

    config: EncoderConfig
    params: dict[str, np.ndarray]
    format_version: int = CHECKPOINT_FORMAT_VERSION


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    path = Path(path)
    meta = json.dumps(
        {"format_version": ckpt.format_version, "config": ckpt.config.to_dict()},
        sort_keys=True,
    )
    tmp = path.with_name(path.name + ".tmp")
    arrays = {f"param.{k}": v for k, v in ckpt.params.items()}
    with tmp.open("wb") as fh:
        np.savez(fh, meta=np.array(meta), **arrays)
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Load and fully validate a checkpoint; partial models never escape."""
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as archive:
            if "meta" not in archive:
                raise CheckpointError(f"{path}: not a model checkpoint (no meta entry)")
            meta = json.loads(str(archive["meta"]))
            params = {
                k[len("param."):]: archive[k]
                for k in archive.files
                if k.startswith("param.")
            }
    except CheckpointError:
        raise
    except Exception as exc:  # zip corruption, json, bad dtype...
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc})") from exc
    if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {meta.get('format_version')} unsupported "
            f"(expected {CHECKPOINT_FORMAT_VERSION})"
        )
    config = EncoderConfig.from_dict(meta["config"])
    expected = expected_parameter_shapes(config)
    missing = sorted(set(expected) - set(params))
    if missing:
        raise CheckpointError(f"{path}: checkpoint lacks parameter {missing[0]!r}")
    extra = sorted(set(params) - set(expected))
    if extra:
        raise CheckpointError(f"{path}: unexpected parameter {extra[0]!r}")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise CheckpointError(
                f"{path}: parameter {name!r} has shape {params[name].shape}, "
                f"expected {shape}"
            )
    return Checkpoint(config=config, params=params)


def prune_model(ckpt: Checkpoint, num_layers: int) -> Checkpoint:
    """Keep the embedding and the first ``num_layers`` blocks verbatim."""
    full = ckpt.config.num_layers
    if not 1 <= num_layers <= full:
        raise ContractError(
            f"cannot prune a {full}-layer model to {num_layers} layers"
        )
    config = dataclasses.replace(ckpt.config, num_layers=num_layers)
    keep = set(expected_parameter_shapes(config))
    params = {k: v.copy() for k, v in ckpt.params.items() if k in keep}
    return Checkpoint(config=config, params=params)


class Encoder:
    """The trainable model: embedding plus ``num_layers`` attention blocks."""

    def __init__(self, config: EncoderConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    @classmethod
    def fresh(cls, config: EncoderConfig, rng: np.random.Generator) -> "Encoder":
        return cls(config, init_parameters(config, rng))

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, dropout: float | None = None) -> "Encoder":
        config = ckpt.config
        if dropout is not None:
            config = dataclasses.replace(config, dropout=dropout)
        params = {
            name: Tensor(values.copy(), requires_grad=True)
            for name, values in ckpt.params.items()
        }
        return cls(config, params)

    def to_checkpoint(self) -> Checkpoint:
        return Checkpoint(
            config=self.config,
            params={name: p.values.copy() for name, p in self.params.items()},
        )

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.params)

    # -- embedding ---------------------------------------------------------

    def _check_ids(self, ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(ids)
        if ids.shape[-1] != self.config.max_seq:
            raise ContractError(
                f"sequence length {ids.shape[-1]} does not match model "
                f"max_seq {self.config.max_seq}"
            )
        if ids.min() < 0 or ids.max() >= self.config.vocab_size:
            raise VocabularyError(
                f"token id outside vocabulary of size {self.config.vocab_size}"
            )
        return ids

    def embedding_sum(self, token_ids: np.ndarray) -> Tensor:
        """Token embedding plus position embedding, before normalisation."""
        ids = self._check_ids(token_ids)
        gathered = dc.getitem(self.params["embed.tokens"], ids)
        return dc.add(gathered, self.params["embed.positions"])

    def embed(self, token_ids, mode: Mode = "eval",
              rng: np.random.Generator | None = None) -> Tensor:
        """Embed ids of shape (S,) or (B, S); dropout in train mode only."""
        out = dc.layer_norm(
            self.embedding_sum(token_ids),
            self.params["embed.ln_gamma"],
            self.params["embed.ln_beta"],
            eps=LN_EPS,
        )
        if mode == "train" and self.config.dropout > 0.0:
            out = dc.dropout(out, self.config.dropout, rng)
        return out

    # -- transformer blocks ------------------------------------------------

    def _block(self, x: Tensor, layer: int, attn_bias: np.ndarray,
               mode: Mode, rng: np.random.Generator | None) -> Tensor:
        cfg = self.config
        p = self.params
        pre = f"layer{layer}."
        batch, seq, hidden = x.shape
        heads = cfg.num_heads
        head_dim = hidden // heads

        def project(kind: str) -> Tensor:
            y = dc.add(dc.matmul(x, p[pre + f"attn_{kind}_w"]), p[pre + f"attn_{kind}_b"])
            return dc.reshape(y, (batch, seq, heads, head_dim))

        # scale q instead of the much larger score tensor
        q = dc.scale(dc.transpose(project("q"), (0, 2, 1, 3)), 1.0 / np.sqrt(head_dim))
        k = dc.transpose(project("k"), (0, 2, 3, 1))
        v = dc.transpose(project("v"), (0, 2, 1, 3))
        scores = dc.add_const(dc.matmul(q, k), attn_bias)
        weights = dc.softmax(scores, axis=-1)
        context = dc.reshape(
            dc.transpose(dc.matmul(weights, v), (0, 2, 1, 3)),
            (batch, seq, hidden),
        )
        attn_out = dc.add(dc.matmul(context, p[pre + "attn_out_w"]), p[pre + "attn_out_b"])
        if mode == "train" and cfg.dropout > 0.0:
            attn_out = dc.dropout(attn_out, cfg.dropout, rng)
        x = dc.layer_norm(dc.add(x, attn_out), p[pre + "ln1_gamma"], p[pre + "ln1_beta"], eps=LN_EPS)

        inner = dc.gelu(dc.add(dc.matmul(x, p[pre + "ffn_in_w"]), p[pre + "ffn_in_b"]))
        ffn_out = dc.add(dc.matmul(inner, p[pre + "ffn_out_w"]), p[pre + "ffn_out_b"])
        if mode == "train" and cfg.dropout > 0.0:
            ffn_out = dc.dropout(ffn_out, cfg.dropout, rng)
        return dc.layer_norm(dc.add(x, ffn_out), p[pre + "ln2_gamma"], p[pre + "ln2_beta"], eps=LN_EPS)

    def _layer_outputs(self, ids: np.ndarray, attention_mask: np.ndarray,
                       mode: Mode, rng: np.random.Generator | None) -> list[Tensor]:
        x = self.embed(ids, mode, rng)
        attn_bias = np.where(attention_mask, 0.0, ATTN_MASK_BIAS)[:, None, None, :]
        outputs = []
        for layer in range(1, self.config.num_layers + 1):
            x = self._block(x, layer, attn_bias, mode, rng)
            outputs.append(x)
        return outputs

    def encode_arrays(self, ids: np.ndarray, attention_mask: np.ndarray,
                      code_token_mask: np.ndarray, mode: Mode = "eval",
                      rng: np.random.Generator | None = None) -> LayerStates:
        single = np.asarray(ids).ndim == 1
        ids = self._check_ids(np.atleast_2d(ids))
        attention_mask = np.atleast_2d(attention_mask)
        code_token_mask = np.atleast_2d(code_token_mask)
        outputs = self._layer_outputs(ids, attention_mask, mode, rng)
        states = dc.stack(outputs, axis=0)
        if single:
            depth, _, seq, hidden = states.shape
            states = dc.reshape(states, (depth, seq, hidden))
            attention_mask = attention_mask[0]
            code_token_mask = code_token_mask[0]
        return LayerStates(
            states=states,
            attention_mask=attention_mask,
            code_token_mask=code_token_mask,
        )

    def encode(self, sequences: TokenizedSequence | Sequence[TokenizedSequence],
               mode: Mode = "eval",
               rng: np.random.Generator | None = None) -> LayerStates:
        """Hidden states of every block.

        A single sequence yields (L, S, H) states; a list yields
        (L, B, S, H) with the batch axis second.
        """
        if isinstance(sequences, TokenizedSequence):
            seq = sequences
            return self.encode_arrays(seq.ids, seq.attention_mask,
                                      seq.code_token_mask, mode=mode, rng=rng)
        if not sequences:
            raise InputError("encode needs at least one sequence")
        ids = np.stack([s.ids for s in sequences])
        attn = np.stack([s.attention_mask for s in sequences])
        code = np.stack([s.code_token_mask for s in sequences])
        return self.encode_arrays(ids, attn, code, mode=mode, rng=rng)


# ---------------------------------------------------------------------------
# masked-token pretraining


@dataclass(frozen=True)
class MlmHyper:
    batch_size: int = 64
    learning_rate: float = 1e-3
    epochs: int = 10


@dataclass
class MlmOutcome:
    checkpoint: Checkpoint
    epoch_losses: list[float]


def choose_mask_positions(code_token_mask: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Pick ~15% (at least one) of the code-token positions of one sequence."""
    positions = np.flatnonzero(code_token_mask)
    if positions.size == 0:
        return positions
    k = max(1, round(MLM_MASK_RATE * positions.size))
    return rng.choice(positions, size=k, replace=False)


def mlm_pretrain(
    corpus: Sequence[TokenizedSequence],
    config: EncoderConfig,
    hyper: MlmHyper,
    seed: int,
) -> MlmOutcome:
    """Train the encoder to recover masked byte tokens; returns a checkpoint.

    Each epoch redraws the masked positions. The vocabulary head used for
    the objective is dropped from the returned checkpoint.
    """
    if not corpus:
        raise InputError("pretraining corpus is empty")
    init_rng = np.random.default_rng([seed, 11])
    mask_rng = np.random.default_rng([seed, 13])
    drop_rng = np.random.default_rng([seed, 17])
    encoder = Encoder.fresh(config, init_rng)
    head_w = Tensor(init_rng.normal(0.0, INIT_STD, (config.hidden_size, config.vocab_size)),
                    requires_grad=True)
    head_b = Tensor(np.zeros(config.vocab_size), requires_grad=True)
    trainable = dict(encoder.parameters())
    trainable["mlm.head_w"] = head_w
    trainable["mlm.head_b"] = head_b
    optimizer = Adam(trainable, lr=hyper.learning_rate)

    losses = []
    for epoch in range(1, hyper.epochs + 1):
        loss_sum = 0.0
        masked_total = 0
        for batch in batch_iter(corpus, hyper.batch_size, seed, epoch):
            ids = np.stack([s.ids for s in batch])
            attn = np.stack([s.attention_mask for s in batch])
            rows, cols, targets = [], [], []
            for row, s in enumerate(batch):
                for pos in choose_mask_positions(s.code_token_mask, mask_rng):
                    rows.append(row)
                    cols.append(pos)
                    targets.append(ids[row, pos])
            if not rows:
                continue
            masked_ids = ids.copy()
            masked_ids[rows, cols] = MASK_ID
            hidden = encoder.embed(masked_ids, "train", drop_rng)
            bias = np.where(attn, 0.0, ATTN_MASK_BIAS)[:, None, None, :]
            for layer in range(1, config.num_layers + 1):
                hidden = encoder._block(hidden, layer, bias, "train", drop_rng)
            flat = dc.reshape(hidden, (ids.shape[0] * ids.shape[1], config.hidden_size))
            picked = dc.getitem(flat, np.asarray(rows) * ids.shape[1] + np.asarray(cols))
            logits = dc.add(dc.matmul(picked, head_w), head_b)
            loss = dc.cross_entropy(logits, np.asarray(targets))
            optimizer.zero_grad()
            dc.backward(loss)
            optimizer.step()
            loss_sum += loss.item() * len(rows)
            masked_total += len(rows)
        losses.append(loss_sum / masked_total)
    return MlmOutcome(checkpoint=encoder.to_checkpoint(), epoch_losses=losses)
