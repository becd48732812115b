"""Cross-attention decoder with a masking hook, plus FFN detection heads.

The decoder follows the set-prediction convention: query embeddings act as
additive positional terms, attention keys are features plus positional
embedding, and each layer concatenates per-head readouts, projects, adds
the residual and applies a two-layer FFN. Query self-attention is omitted
on purpose, which keeps every query's pass independent of the others.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, ShapeError
from .scenes import FeatureGrid

QUERY_KINDS = ("learnable", "gbs", "amm_copy")


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 32            # D, embedding width
    heads: int = 2           # T, cross-attention heads
    layers: int = 2          # decoder depth
    num_queries: int = 16    # N_q, learnable query count
    num_classes: int = 5     # C; class logits add a no-object slot
    num_verbs: int = 4       # V
    ffn_hidden: int = 64
    head_hidden: int = 64

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.dim % 4 != 0:
            raise ConfigError(f"dim {self.dim} must be divisible by 4")
        if min(self.heads, self.layers, self.num_queries,
               self.num_classes, self.num_verbs) < 1:
            raise ConfigError("model sizes must be positive")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


@dataclass
class QuerySet:
    """A batch of query embeddings tagged by provenance.

    ``origin`` maps each row to the ground-truth pair it answers for;
    learnable queries have no origin.
    """

    kind: str
    embeddings: Tensor                   # [N, D]
    origin: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.kind not in QUERY_KINDS:
            raise ContractError(f"unknown query kind {self.kind!r}")
        n = self.embeddings.data.shape[0]
        if self.kind == "learnable":
            if self.origin is not None:
                raise ContractError("learnable queries carry no origin map")
        elif self.origin is None or len(self.origin) != n:
            raise ContractError(f"{self.kind} queries need one origin per row")


@dataclass
class DecoderOutputs:
    embeddings: list[Tensor]                   # per layer, [N, D]
    attention: list[list[Tensor]]              # [layer][head], pre-mask, rows sum to 1
    masked_attention: list[list[Tensor]]       # [layer][head], post-mask


@dataclass
class Predictions:
    human_boxes: Tensor   # [N, 4] center-size, sigmoid-bounded
    object_boxes: Tensor  # [N, 4]
    class_logits: Tensor  # [N, C+1]; last column is no-object
    verb_logits: Tensor   # [N, V]


class ModelParams:
    """All trainable tensors in a deterministic named order."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.tensors: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True)
        self.tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def items(self):
        return self.tensors.items()

    def groups(self) -> dict[str, list[str]]:
        """Parameter names bucketed for gradient reporting."""
        out: dict[str, list[str]] = {}
        for name in self.tensors:
            group = name.split(".")[0] if "." in name else name
            out.setdefault(group, []).append(name)
        return out


def _identity_ffn_init(d: int, hid: int, rng, noise: float = 0.02):
    """Weights making relu(x @ w1) @ w2 equal x at initialization.

    The hidden layer splits x into positive and negative parts and the
    output reassembles them, so each decoder layer starts out passing its
    input through unchanged (there is no skip connection around the FFN).
    Requires hid >= 2d; small noise breaks the symmetry.
    """
    if hid < 2 * d:
        w1 = rng.standard_normal((d, hid)) / math.sqrt(d)
        w2 = rng.standard_normal((hid, d)) / math.sqrt(hid)
        return w1, w2
    w1 = rng.standard_normal((d, hid)) * noise
    w2 = rng.standard_normal((hid, d)) * noise
    w1[:, :d] += np.eye(d)
    w1[:, d:2 * d] -= np.eye(d)
    w2[:d, :] += np.eye(d)
    w2[d:2 * d, :] -= np.eye(d)
    return w1, w2


def init_params(config: ModelConfig, rng: np.random.Generator) -> ModelParams:
    params = ModelParams(config)
    d, dh, hid = config.dim, config.head_dim, config.ffn_hidden
    params.add("queries", rng.standard_normal((config.num_queries, d)))
    for l in range(config.layers):
        for h in range(config.heads):
            for tag in ("wq", "wk", "wv"):
                params.add(f"dec{l}.h{h}.{tag}",
                           rng.standard_normal((d, dh)) / math.sqrt(d))
        params.add(f"dec{l}.wo", rng.standard_normal((d, d)) / math.sqrt(d))
        ffn_w1, ffn_w2 = _identity_ffn_init(d, hid, rng)
        params.add(f"dec{l}.ffn.w1", ffn_w1)
        params.add(f"dec{l}.ffn.b1", np.zeros(hid))
        params.add(f"dec{l}.ffn.w2", ffn_w2)
        params.add(f"dec{l}.ffn.b2", np.zeros(d))
    head_sizes = {"hbox": 4, "obox": 4, "cls": config.num_classes + 1,
                  "verb": config.num_verbs}
    hh = config.head_hidden
    for tag, width in head_sizes.items():
        params.add(f"head_{tag}.w1", rng.standard_normal((d, hh)) / math.sqrt(d))
        params.add(f"head_{tag}.b1", np.zeros(hh))
        params.add(f"head_{tag}.w2", rng.standard_normal((hh, width)) / math.sqrt(hh))
        params.add(f"head_{tag}.b2", np.zeros(width))
    params.add("gbs.w1", rng.standard_normal((12, d)) / math.sqrt(12.0))
    params.add("gbs.b1", np.zeros(d))
    params.add("gbs.w2", rng.standard_normal((d, d)) / math.sqrt(d))
    params.add("gbs.b2", np.zeros(d))
    return params


def _ffn(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    h = ad.relu(ad.linear(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    return ad.linear(h, params[f"{prefix}.w2"], params[f"{prefix}.b2"])


def decoder_forward(queries: QuerySet, grid: FeatureGrid, params: ModelParams,
                    mask_hook=None) -> DecoderOutputs:
    """Run the stacked cross-attention layers over one feature grid.

    ``mask_hook(layer, head, attention)`` may replace an attention map
    before the value product; it must preserve the map's shape.
    """
    config = params.config
    n = queries.embeddings.data.shape[0]
    if queries.embeddings.data.shape[1] != config.dim:
        raise ShapeError("query dim does not match the model")
    if grid.features.data.shape[1] != config.dim:
        raise ShapeError("feature dim does not match the model")
    keys_src = ad.add(grid.features, grid.pos_embed)
    inv_temp = 1.0 / math.sqrt(config.head_dim)
    state = Tensor(np.zeros((n, config.dim)))
    embeddings, attention, masked_attention = [], [], []
    for l in range(config.layers):
        x = ad.add(state, queries.embeddings)
        head_outs, attn_row, masked_row = [], [], []
        for h in range(config.heads):
            q = ad.matmul(x, params[f"dec{l}.h{h}.wq"])           # [N, dh]
            k = ad.matmul(keys_src, params[f"dec{l}.h{h}.wk"])    # [HW, dh]
            logits = ad.scale(ad.matmul(q, ad.transpose(k)), inv_temp)
            attn = ad.softmax_rows(logits)                        # [N, HW]
            used = attn
            if mask_hook is not None:
                used = mask_hook(l, h, attn)
                if not isinstance(used, Tensor) or used.data.shape != attn.data.shape:
                    raise ContractError("mask_hook must return a tensor of the same shape")
            values = ad.matmul(grid.features, params[f"dec{l}.h{h}.wv"])
            head_outs.append(ad.matmul(used, values))             # [N, dh]
            attn_row.append(attn)
            masked_row.append(used)
        projected = ad.matmul(ad.concat_cols(head_outs), params[f"dec{l}.wo"])
        state = _ffn(ad.add(state, projected), params, f"dec{l}.ffn")
        embeddings.append(state)
        attention.append(attn_row)
        masked_attention.append(masked_row)
    return DecoderOutputs(embeddings, attention, masked_attention)


def detection_heads(embedding: Tensor, params: ModelParams) -> Predictions:
    """Two-layer FFN heads; box coordinates go through a sigmoid."""
    return Predictions(
        human_boxes=ad.sigmoid(_ffn(embedding, params, "head_hbox")),
        object_boxes=ad.sigmoid(_ffn(embedding, params, "head_obox")),
        class_logits=_ffn(embedding, params, "head_cls"),
        verb_logits=_ffn(embedding, params, "head_verb"),
    )


def learnable_queries(params: ModelParams) -> QuerySet:
    return QuerySet("learnable", params["queries"])
