"""Twelve strategies that reduce per-layer hidden states to one H-vector.

Given the (L, S, H) states of one sequence (or (L, B, S, H) for a batch),
each strategy produces a representation of size H so the classification
head stays identical across strategies:

  i     CLS of the last layer (the baseline)
  ii    CLS of one chosen layer
  iii   max over layers of the CLS vectors
  iv    weighted sum over layers of the CLS vectors
  v     max over tokens within one layer
  vi    max over layers, then max over tokens
  vii   max over layers, then weighted sum over tokens
  viii  max over tokens per layer, then weighted sum over layers
  ix    weighted sum over tokens within one layer
  x     weighted sum over tokens per layer (shared weights), then weighted
        sum over layers
  xi    weighted sum over layers per token, then weighted sum over tokens
  xii   CLS of the last layer of a pruned model

Strategies v-xi come in two scopes: pooling over every position (CLS, EOS
and PAD included) or over code tokens only. Token weights are shared
across layers; layer weights are shared across tokens. Both kinds of
weight vector initialise to a uniform mean and train unconstrained.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .encoder import EncoderConfig, LayerStates
from .errors import ContractError

STRATEGIES = ("i", "ii", "iii", "iv", "v", "vi", "vii", "viii", "ix", "x", "xi", "xii")
SCOPES = ("all", "code")

#: strategies that only ever see CLS vectors; token scope has no meaning
CLS_ONLY = frozenset({"i", "ii", "iii", "iv", "xii"})
#: strategies requiring a chosen layer
NEEDS_LAYER = frozenset({"ii", "v", "ix", "xii"})
TOKEN_WEIGHTED = frozenset({"vii", "ix", "x", "xi"})
LAYER_WEIGHTED = frozenset({"iv", "viii", "x", "xi"})


@dataclass(frozen=True)
class CombinationSpec:
    """One strategy plus its optional layer index and token scope."""

    strategy: str
    layer: int | None = None
    scope: str = "all"

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ContractError(f"unknown strategy {self.strategy!r}")
        if self.scope not in SCOPES:
            raise ContractError(f"unknown scope {self.scope!r}")
        if self.strategy in NEEDS_LAYER:
            if self.layer is None or self.layer < 1:
                raise ContractError(f"strategy ({self.strategy}) needs a layer >= 1")
        elif self.layer is not None:
            raise ContractError(f"strategy ({self.strategy}) takes no layer index")
        if self.strategy in CLS_ONLY and self.scope != "all":
            raise ContractError(
                f"strategy ({self.strategy}) uses CLS tokens only; scope is meaningless"
            )

    def __str__(self) -> str:
        parts = [self.strategy]
        if self.layer is not None:
            parts.append(f"layer={self.layer}")
        if self.strategy not in CLS_ONLY:
            parts.append(f"scope={self.scope}")
        return ":".join(parts)

    @classmethod
    def parse(cls, text: str) -> "CombinationSpec":
        """Parse the textual form, e.g. ``ii:layer=3`` or ``v:layer=2:scope=code``."""
        parts = text.strip().split(":")
        strategy = parts[0]
        layer: int | None = None
        scope = "all"
        for part in parts[1:]:
            key, _, value = part.partition("=")
            if key == "layer":
                try:
                    layer = int(value)
                except ValueError:
                    raise ContractError(f"bad layer in spec {text!r}") from None
            elif key == "scope":
                scope = value
            else:
                raise ContractError(f"unknown field {key!r} in spec {text!r}")
        if strategy in CLS_ONLY:
            scope = "all"
        return cls(strategy=strategy, layer=layer, scope=scope)

    def validate_for_grid(self, num_layers: int) -> None:
        """Range-check the layer index against the full model depth."""
        if self.strategy in ("ii", "xii") and not 1 <= (self.layer or 0) <= num_layers - 1:
            raise ContractError(
                f"spec ({self.strategy}) needs 1 <= layer <= {num_layers - 1}, "
                f"got {self.layer}"
            )
        if self.strategy in ("v", "ix") and not 1 <= (self.layer or 0) <= num_layers:
            raise ContractError(
                f"spec ({self.strategy}) needs 1 <= layer <= {num_layers}, "
                f"got {self.layer}"
            )


@dataclass
class CombinerParams:
    """Learnable weight vectors, allocated only when a spec needs them."""

    token_weights: Tensor | None = None
    layer_weights: Tensor | None = None

    def as_dict(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        if self.token_weights is not None:
            out["combiner.token_weights"] = self.token_weights
        if self.layer_weights is not None:
            out["combiner.layer_weights"] = self.layer_weights
        return out


def allocate_params(spec: CombinationSpec, config: EncoderConfig) -> CombinerParams:
    """Uniform-initialised weights: every weighted sum starts as a mean."""
    params = CombinerParams()
    if spec.strategy in TOKEN_WEIGHTED:
        n = config.max_seq
        params.token_weights = Tensor(np.full(n, 1.0 / n), requires_grad=True)
    if spec.strategy in LAYER_WEIGHTED:
        n = config.num_layers
        params.layer_weights = Tensor(np.full(n, 1.0 / n), requires_grad=True)
    return params


def added_param_count(spec: CombinationSpec, config: EncoderConfig) -> int:
    """How many learnable weights the spec adds on top of the base model."""
    count = 0
    if spec.strategy in TOKEN_WEIGHTED:
        count += config.max_seq
    if spec.strategy in LAYER_WEIGHTED:
        count += config.num_layers
    return count


# ---------------------------------------------------------------------------
# pieces


def slice_cls(states: LayerStates, layer: int) -> Tensor:
    """The CLS-position (token index 0) row of encoder block ``layer``."""
    depth = states.num_layers
    if not 1 <= layer <= depth:
        raise ContractError(f"layer {layer} out of range 1..{depth}")
    return dc.getitem(states.states, (layer - 1, Ellipsis, 0, slice(None)))


def _all_cls(states: LayerStates) -> Tensor:
    # (L, H) or (L, B, H)
    return dc.getitem(states.states, (slice(None), Ellipsis, 0, slice(None)))


def pool_tokens_max(layer_slice: Tensor, scope_mask: np.ndarray | None) -> Tensor:
    """Per-dimension max over included token positions of one layer slice."""
    return dc.max_reduce(layer_slice, axis=layer_slice.ndim - 2, mask=scope_mask)


def pool_layers_max(states: Tensor) -> Tensor:
    """Per-token, per-dimension max across layers of an (L, ..., S, H) tensor."""
    return dc.max_reduce(states, axis=0)


def sum_tokens_weighted(layer_slice: Tensor, token_weights: Tensor,
                        scope_mask: np.ndarray | None) -> Tensor:
    """Learnable-weighted sum over token positions; excluded ones add zero."""
    return dc.weighted_reduce(
        layer_slice, token_weights, axis=layer_slice.ndim - 2, mask=scope_mask
    )


def sum_layers_weighted(per_layer: Tensor, layer_weights: Tensor) -> Tensor:
    """Learnable-weighted sum over the leading layer axis."""
    return dc.weighted_reduce(per_layer, layer_weights, axis=0)


def _token_mask(states: LayerStates, spec: CombinationSpec, *, with_layer_axis: bool):
    """The scope mask shaped for a token reduction, or None for all-tokens."""
    if spec.strategy in CLS_ONLY or spec.scope == "all":
        return None
    mask = states.code_token_mask
    if with_layer_axis:
        return mask[None, ..., None]
    return mask


def _require(spec: CombinationSpec, params: CombinerParams | None,
             which: str) -> Tensor:
    vec = getattr(params, which, None) if params is not None else None
    if vec is None:
        raise ContractError(f"spec ({spec.strategy}) needs allocated {which}")
    return vec


def combine(states: LayerStates, spec: CombinationSpec,
            params: CombinerParams | None = None) -> Tensor:
    """Reduce layer states to one representation vector of size H.

    Returns shape (H,) for single-sequence states and (B, H) for batches.
    For strategy (xii) the states must come from a model already pruned to
    ``spec.layer`` blocks.
    """
    st = states.states
    depth = states.num_layers

    if spec.strategy == "i":
        return slice_cls(states, depth)
    if spec.strategy == "ii":
        return slice_cls(states, spec.layer)
    if spec.strategy == "xii":
        if spec.layer != depth:
            raise ContractError(
                f"spec (xii) with layer={spec.layer} needs states from a "
                f"{spec.layer}-layer model, got {depth} layers"
            )
        return slice_cls(states, depth)
    if spec.strategy == "iii":
        return dc.max_reduce(_all_cls(states), axis=0)
    if spec.strategy == "iv":
        return sum_layers_weighted(_all_cls(states), _require(spec, params, "layer_weights"))

    if spec.layer is not None and not 1 <= spec.layer <= depth:
        raise ContractError(f"layer {spec.layer} out of range 1..{depth}")

    if spec.strategy == "v":
        layer_slice = dc.getitem(st, spec.layer - 1)
        return pool_tokens_max(layer_slice, _token_mask(states, spec, with_layer_axis=False))
    if spec.strategy == "vi":
        merged = pool_layers_max(st)
        return pool_tokens_max(merged, _token_mask(states, spec, with_layer_axis=False))
    if spec.strategy == "vii":
        merged = pool_layers_max(st)
        return sum_tokens_weighted(
            merged, _require(spec, params, "token_weights"),
            _token_mask(states, spec, with_layer_axis=False),
        )
    if spec.strategy == "viii":
        per_layer = dc.max_reduce(
            st, axis=st.ndim - 2, mask=_token_mask(states, spec, with_layer_axis=True)
        )
        return sum_layers_weighted(per_layer, _require(spec, params, "layer_weights"))
    if spec.strategy == "ix":
        layer_slice = dc.getitem(st, spec.layer - 1)
        return sum_tokens_weighted(
            layer_slice, _require(spec, params, "token_weights"),
            _token_mask(states, spec, with_layer_axis=False),
        )
    if spec.strategy == "x":
        per_layer = dc.weighted_reduce(
            st, _require(spec, params, "token_weights"), axis=st.ndim - 2,
            mask=_token_mask(states, spec, with_layer_axis=True),
        )
        return sum_layers_weighted(per_layer, _require(spec, params, "layer_weights"))
    if spec.strategy == "xi":
        per_token = sum_layers_weighted(st, _require(spec, params, "layer_weights"))
        return sum_tokens_weighted(
            per_token, _require(spec, params, "token_weights"),
            _token_mask(states, spec, with_layer_axis=False),
        )
    raise ContractError(f"unhandled strategy {spec.strategy!r}")


def validate_spec_for_model(spec: CombinationSpec, model_layers: int) -> None:
    """Check a spec against the depth of the model that will produce states."""
    if spec.strategy == "xii":
        if spec.layer != model_layers:
            raise ContractError(
                f"spec (xii) layer={spec.layer} needs a model pruned to that "
                f"depth, got {model_layers} layers"
            )
        return
    if spec.layer is not None and not 1 <= spec.layer <= model_layers:
        raise ContractError(
            f"spec ({spec.strategy}) layer {spec.layer} out of range "
            f"1..{model_layers}"
        )
