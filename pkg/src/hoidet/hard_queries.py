"""Hard-positive query construction and the joint-learning schedules.

Two mechanisms produce queries that must predict from degraded evidence:
box-shift encoding builds queries from IoU-perturbed ground-truth
coordinates, and attention masking zeroes a random subset of the top-K
attention positions of matched learnable queries. Schedules combine them
per iteration: alternate, cascaded, or parallel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .boxes import Box, ShiftConfig, shift_box
from .errors import ConfigError, ContractError
from .losses import LossWeights, branch_loss
from .matching import Assignment
from .model import ModelParams, QuerySet, decoder_forward, detection_heads
from .scenes import HOIPair, Scene

STRATEGIES = ("baseline", "gbs_only", "amm_only", "ajl", "cjl", "pjl")
_SHIFT_STRATEGIES = {"gbs_only", "ajl", "cjl", "pjl"}
_MASK_STRATEGIES = {"amm_only", "ajl", "cjl", "pjl"}


@dataclass(frozen=True)
class AmmConfig:
    """Attention-masking knobs: how many top positions are eligible and the
    probability that an eligible position is zeroed."""

    k: int = 32
    gamma: float = 0.4
    per_layer_resample: bool = True
    # Prose-vs-pseudocode disagreement on Bernoulli(gamma): the default
    # zeroes an eligible position with probability gamma; the flag flips to
    # "keep with probability gamma".
    gamma_is_keep_prob: bool = False

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("top-K count must be >= 1")
        if not (0.0 <= self.gamma <= 1.0):
            raise ConfigError("gamma must be in [0, 1]")


@dataclass(frozen=True)
class HqmConfig:
    """Strategy selector plus the ablation toggles tied to it."""

    strategy: str = "baseline"
    no_shift: bool = False         # encode the unshifted prior
    gaussian_noise: bool = False   # unshifted prior + noise on the query
    no_topk: bool = False          # mask uniformly at rate gamma*K/(H*W)
    reference_self: bool = False   # top-K from the hard query's own map
    mask_learnable: bool = False   # mask the learnable pass, no hard queries
    noise_sigma: float = 0.1

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if (self.no_shift or self.gaussian_noise) and self.strategy not in _SHIFT_STRATEGIES:
            raise ConfigError("shift ablations need a shift-based strategy")
        if self.no_shift and self.gaussian_noise:
            raise ConfigError("no_shift and gaussian_noise are mutually exclusive")
        if (self.no_topk or self.reference_self) and self.strategy not in _MASK_STRATEGIES:
            raise ConfigError("masking ablations need a masking strategy")
        if self.mask_learnable and self.strategy != "amm_only":
            raise ConfigError("mask_learnable is an amm_only variant")


@dataclass
class LearnablePass:
    """Artifacts of the learnable forward pass one iteration produces."""

    grid: object                 # FeatureGrid
    queries: QuerySet
    outputs: object              # DecoderOutputs
    predictions: object          # Predictions
    assignment: Assignment


class DrawStore:
    """Record-and-replay buffer for stochastic draws.

    During a capture pass every draw is sampled and remembered; once frozen
    the same keys replay identically, which makes a loss with embedded
    sampling a deterministic function of the parameters.
    """

    def __init__(self):
        self._draws = {}
        self.frozen = False

    def take(self, key, sampler):
        if key in self._draws:
            return self._draws[key]
        if self.frozen:
            raise ContractError(f"no frozen draw recorded under {key!r}")
        value = sampler()
        self._draws[key] = value
        return value

    def freeze(self):
        self.frozen = True


def pair_prior(pair: HOIPair) -> np.ndarray:
    """The 12-entry location prior of one pair."""
    return prior_from_boxes(pair.human, pair.object)


def prior_from_boxes(human: Box, obj: Box) -> np.ndarray:
    """[centers and sizes of both boxes, center offset, both areas]."""
    return np.array([
        human.cx, human.cy, human.w, human.h,
        obj.cx, obj.cy, obj.w, obj.h,
        human.cx - obj.cx, human.cy - obj.cy,
        human.w * human.h, obj.w * obj.h,
    ])


def shift_pair(pair: HOIPair, cfg: ShiftConfig, rng) -> tuple[Box, Box]:
    """Shift both boxes independently under the IoU constraint."""
    return shift_box(pair.human, cfg, rng), shift_box(pair.object, cfg, rng)


def gbs_encode(pair: HOIPair, params: ModelParams, rng,
               shift_cfg: ShiftConfig, hqm: HqmConfig | None = None,
               prior: np.ndarray | None = None) -> Tensor:
    """Encode one pair into a query: shift, project through the two-layer
    FFN, bound with tanh. Returns a [1, D] tensor.

    ``prior`` short-circuits the shift (used to replay frozen draws). The
    no-shift variant encodes the exact ground-truth prior; the noise
    variant adds Gaussian noise to the bounded query instead of shifting.
    """
    hqm = hqm or HqmConfig(strategy="gbs_only")
    add_noise = hqm.gaussian_noise
    if prior is None:
        if hqm.no_shift or hqm.gaussian_noise:
            prior = pair_prior(pair)
        else:
            prior = prior_from_boxes(*shift_pair(pair, shift_cfg, rng))
    hidden = ad.relu(ad.linear(Tensor(prior[None, :]), params["gbs.w1"], params["gbs.b1"]))
    query = ad.tanh(ad.linear(hidden, params["gbs.w2"], params["gbs.b2"]))
    if add_noise:
        query = ad.add(query, Tensor(rng.normal(0.0, hqm.noise_sigma, size=query.data.shape)))
    return query


def topk_indices(reference: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries; ties prefer the lower index."""
    if k > reference.shape[-1]:
        raise ConfigError(f"top-K {k} exceeds row length {reference.shape[-1]}")
    return np.argsort(-reference, kind="stable")[:k]


def sample_mask(reference: np.ndarray, cfg: AmmConfig, rng,
                uniform: bool = False) -> np.ndarray:
    """Binary keep-mask over one attention row.

    Positions outside the top-K are always kept. With ``uniform`` the top-K
    targeting is dropped and every position is zeroed independently at rate
    gamma*K/n (the "w/o top-K" variant).
    """
    n = reference.shape[-1]
    mask = np.ones(n)
    if uniform:
        rate = min(1.0, cfg.gamma * cfg.k / n)
        mask[rng.random(n) < rate] = 0.0
        return mask
    idx = topk_indices(reference, cfg.k)
    draws = rng.random(cfg.k)
    zeroed = (draws >= cfg.gamma) if cfg.gamma_is_keep_prob else (draws < cfg.gamma)
    mask[idx[zeroed]] = 0.0
    return mask


def amm_mask(a_m: np.ndarray, a_l_ref: np.ndarray, cfg: AmmConfig, rng) -> np.ndarray:
    """Mask one attention row against a reference row.

    Entries outside the reference's top-K are returned bit-identical; each
    top-K position is zeroed independently with probability gamma.
    """
    a_m = np.asarray(a_m, dtype=np.float64)
    a_l_ref = np.asarray(a_l_ref, dtype=np.float64)
    if a_m.shape != a_l_ref.shape:
        raise ContractError("attention row and reference differ in length")
    return a_m * sample_mask(a_l_ref, cfg, rng)


def select_positive_queries(assignment: Assignment, q_l: QuerySet) -> QuerySet:
    """Copy matched learnable-query embeddings, detached from the source.

    The hard pass trains the shared decoder and heads; gradients must not
    flow back into the learnable queries through the copy.
    """
    if not assignment.pairs:
        raise ContractError("cannot copy positive queries from an empty assignment")
    queries = [q for q, _ in assignment.pairs]
    origins = tuple(t for _, t in assignment.pairs)
    copied = q_l.embeddings.data[queries].copy()
    return QuerySet("amm_copy", Tensor(copied), origin=origins)


def ajl_step(iteration: int) -> str:
    """Even iterations run the shift branch, odd the masking branch."""
    return "gbs" if iteration % 2 == 0 else "amm"


# ---------------------------------------------------------------------------
# Hard-branch execution
# ---------------------------------------------------------------------------

def _identity_assignment(n: int) -> Assignment:
    return Assignment(tuple((i, i) for i in range(n)))


def _gbs_queries(scene: Scene, params: ModelParams, rng, shift_cfg, hqm,
                 store: DrawStore | None) -> QuerySet:
    rows = []
    for i, pair in enumerate(scene.pairs):
        if hqm.no_shift or hqm.gaussian_noise:
            prior = pair_prior(pair)
        else:
            def draw(pair=pair):
                return prior_from_boxes(*shift_pair(pair, shift_cfg, rng))
            prior = store.take(("gbs_prior", i), draw) if store else draw()
        rows.append(gbs_encode(pair, params, rng, shift_cfg, hqm, prior=prior))
    embeddings = rows[0] if len(rows) == 1 else ad.concat_rows(rows)
    return QuerySet("gbs", embeddings, origin=tuple(range(len(scene.pairs))))


def _mask_hook(reference_rows, amm_cfg: AmmConfig, hqm: HqmConfig, rng,
               store: DrawStore | None, tag: str):
    """Build a decoder hook that masks each hard query's attention row.

    ``reference_rows(layer, head, attn_data)`` returns the [n, HW] reference
    block whose top-K entries are eligible. Masks resample per layer and
    head unless configured otherwise, in which case layer 0's masks repeat.
    """
    cache = {}

    def hook(layer, head, attn):
        mask_layer = layer if amm_cfg.per_layer_resample else 0
        key = (tag, mask_layer, head)
        if key in cache:
            mask = cache[key]
        else:
            def draw():
                ref = reference_rows(mask_layer, head, attn.data)
                return np.stack([
                    sample_mask(ref[i], amm_cfg, rng, uniform=hqm.no_topk)
                    for i in range(ref.shape[0])
                ])
            mask = store.take(("amm_mask",) + key, draw) if store else draw()
            cache[key] = mask
        return ad.mul(attn, Tensor(mask))

    return hook


def _hard_pass_loss(queries: QuerySet, scene: Scene, grid, params, weights,
                    mask_hook=None):
    outputs = decoder_forward(queries, grid, params, mask_hook=mask_hook)
    preds = detection_heads(outputs.embeddings[-1], params)
    targets = [scene.pairs[t] for t in queries.origin]
    assignment = _identity_assignment(len(targets))
    return branch_loss(preds, targets, assignment, weights)


def _amm_loss(scene, artifacts, params, weights, amm_cfg, hqm, rng, store):
    if not artifacts.assignment.pairs:
        return None, {"amm_empty": True}
    if store is not None:
        # freeze the copied embeddings too: the copy edge carries no
        # gradient, so the differentiated function must hold it constant
        data = store.take(("amm_copy",), lambda: select_positive_queries(
            artifacts.assignment, artifacts.queries).embeddings.data)
        origins = tuple(t for _, t in artifacts.assignment.pairs)
        copies = QuerySet("amm_copy", Tensor(data), origin=origins)
    else:
        copies = select_positive_queries(artifacts.assignment, artifacts.queries)
    matched_queries = [q for q, _ in artifacts.assignment.pairs]

    def reference_rows(layer, head, attn_data):
        if hqm.reference_self:
            return attn_data
        return artifacts.outputs.attention[layer][head].data[matched_queries]

    hook = _mask_hook(reference_rows, amm_cfg, hqm, rng, store, tag="amm")
    breakdown = _hard_pass_loss(copies, scene, artifacts.grid, params, weights, hook)
    return breakdown.weighted_total, {"branch": "amm"}


def _gbs_loss(scene, artifacts, params, weights, shift_cfg, hqm, rng, store):
    queries = _gbs_queries(scene, params, rng, shift_cfg, hqm, store)
    breakdown = _hard_pass_loss(queries, scene, artifacts.grid, params, weights)
    return breakdown.weighted_total, {"branch": "gbs"}


def _cjl_loss(scene, artifacts, params, weights, shift_cfg, amm_cfg, hqm, rng, store):
    queries = _gbs_queries(scene, params, rng, shift_cfg, hqm, store)
    matched = artifacts.assignment.query_for_target()

    def reference_rows(layer, head, attn_data):
        if hqm.reference_self:
            return attn_data
        rows = np.empty_like(attn_data)
        maps = artifacts.outputs.attention[layer][head].data
        for i, t in enumerate(queries.origin):
            # an unmatched pair would keep its own map (mask stays live)
            rows[i] = maps[matched[t]] if t in matched else attn_data[i]
        return rows

    hook = _mask_hook(reference_rows, amm_cfg, hqm, rng, store, tag="cjl")
    breakdown = _hard_pass_loss(queries, scene, artifacts.grid, params, weights, hook)
    return breakdown.weighted_total, {"branch": "cjl"}


def run_hard_branch(hqm: HqmConfig, scene: Scene, artifacts: LearnablePass,
                    params: ModelParams, weights: LossWeights,
                    shift_cfg: ShiftConfig, amm_cfg: AmmConfig,
                    rng, iteration: int = 0, store: DrawStore | None = None):
    """Run the configured hard branch for one scene.

    The learnable pass (and its matching) must have completed first; its
    artifacts supply the copied queries and the mask references. Returns
    (hard loss tensor or None, diagnostics).
    """
    strategy = hqm.strategy
    if strategy == "baseline" or hqm.mask_learnable:
        return None, {"branch": "none"}
    if strategy == "ajl":
        strategy = f"{ajl_step(iteration)}_only"
    if strategy == "gbs_only":
        return _gbs_loss(scene, artifacts, params, weights, shift_cfg, hqm, rng, store)
    if strategy == "amm_only":
        return _amm_loss(scene, artifacts, params, weights, amm_cfg, hqm, rng, store)
    if strategy == "cjl":
        return _cjl_loss(scene, artifacts, params, weights, shift_cfg, amm_cfg,
                         hqm, rng, store)
    # pjl: both sets in parallel, each branch at half weight
    gbs_term, _ = _gbs_loss(scene, artifacts, params, weights, shift_cfg, hqm, rng, store)
    amm_term, diag = _amm_loss(scene, artifacts, params, weights, amm_cfg, hqm, rng, store)
    if amm_term is None:
        return ad.scale(gbs_term, 0.5), {"branch": "pjl", **diag}
    return ad.add(ad.scale(gbs_term, 0.5), ad.scale(amm_term, 0.5)), {"branch": "pjl"}


def learnable_mask_hook(amm_cfg: AmmConfig, hqm: HqmConfig, rng,
                        store: DrawStore | None = None):
    """Hook for the mask_learnable variant: every learnable query's map is
    masked against its own values (no hard queries are built)."""
    def reference_rows(layer, head, attn_data):
        return attn_data

    return _mask_hook(reference_rows, amm_cfg, hqm, rng, store, tag="lmask")
