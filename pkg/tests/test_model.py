import numpy as np
import pytest

from hoidet import autodiff as ad
from hoidet.autodiff import GradientTape, Tensor
from hoidet.errors import ConfigError, ContractError
from hoidet.model import (ModelConfig, ModelParams, Predictions, QuerySet,
                          decoder_forward, detection_heads, init_params,
                          learnable_queries)
from hoidet.scenes import FeatureGrid, positional_embedding

TINY = ModelConfig(dim=8, heads=2, layers=2, num_queries=4,
                   num_classes=3, num_verbs=3, ffn_hidden=8)


def _grid(cells, dim, rng) -> FeatureGrid:
    return FeatureGrid(features=Tensor(rng.standard_normal((cells, dim))),
                       pos_embed=Tensor(rng.uniform(-1, 1, size=(cells, dim))))


def test_single_cell_attention_is_one():
    rng = np.random.default_rng(0)
    params = init_params(TINY, rng)
    out = decoder_forward(learnable_queries(params), _grid(1, 8, rng), params)
    for layer in out.attention:
        for attn in layer:
            np.testing.assert_array_equal(attn.data, np.ones((4, 1)))


def test_attention_rows_sum_to_one_every_layer_head():
    rng = np.random.default_rng(1)
    params = init_params(TINY, rng)
    out = decoder_forward(learnable_queries(params), _grid(36, 8, rng), params)
    assert len(out.embeddings) == TINY.layers
    for layer in out.attention:
        assert len(layer) == TINY.heads
        for attn in layer:
            np.testing.assert_allclose(attn.data.sum(axis=1), 1.0, atol=1e-9)


def test_identity_hook_bit_identical():
    rng = np.random.default_rng(2)
    params = init_params(TINY, rng)
    grid = _grid(16, 8, rng)
    plain = decoder_forward(learnable_queries(params), grid, params)
    hooked = decoder_forward(learnable_queries(params), grid, params,
                             mask_hook=lambda l, h, a: a)
    for a, b in zip(plain.embeddings, hooked.embeddings):
        assert np.array_equal(a.data, b.data)


def test_mask_hook_zeroes_are_exact_and_used():
    rng = np.random.default_rng(3)
    params = init_params(TINY, rng)
    grid = _grid(10, 8, rng)
    zero_cols = [0, 3, 7]

    def hook(layer, head, attn):
        mask = np.ones(attn.data.shape)
        mask[:, zero_cols] = 0.0
        return ad.mul(attn, Tensor(mask))

    out = decoder_forward(learnable_queries(params), grid, params, mask_hook=hook)
    for layer, (row, mrow) in enumerate(zip(out.attention, out.masked_attention)):
        for attn, masked in zip(row, mrow):
            assert np.all(masked.data[:, zero_cols] == 0.0)
            keep = [c for c in range(10) if c not in zero_cols]
            assert np.array_equal(masked.data[:, keep], attn.data[:, keep])
            assert np.all(masked.data.sum(axis=1) <= 1.0 + 1e-12)


def test_bad_hook_shape_rejected():
    rng = np.random.default_rng(4)
    params = init_params(TINY, rng)
    with pytest.raises(ContractError):
        decoder_forward(learnable_queries(params), _grid(6, 8, rng), params,
                        mask_hook=lambda l, h, a: Tensor(a.data[:, :2]))


def test_forward_unaffected_by_earlier_passes():
    rng = np.random.default_rng(5)
    params = init_params(TINY, rng)
    grid = _grid(12, 8, rng)
    first = decoder_forward(learnable_queries(params), grid, params)
    other = QuerySet("gbs", Tensor(rng.standard_normal((2, 8))), origin=(0, 1))
    decoder_forward(other, grid, params)
    second = decoder_forward(learnable_queries(params), grid, params)
    for a, b in zip(first.embeddings, second.embeddings):
        assert np.array_equal(a.data, b.data)


def test_zero_weight_heads_give_neutral_predictions():
    params = init_params(TINY, np.random.default_rng(6))
    for name, t in params.items():
        if name.startswith("head_"):
            t.data[:] = 0.0
    emb = Tensor(np.random.default_rng(7).standard_normal((4, 8)))
    preds = detection_heads(emb, params)
    np.testing.assert_array_equal(preds.human_boxes.data, np.full((4, 4), 0.5))
    np.testing.assert_array_equal(preds.object_boxes.data, np.full((4, 4), 0.5))
    np.testing.assert_array_equal(preds.class_logits.data, np.zeros((4, 4)))
    np.testing.assert_array_equal(preds.verb_logits.data, np.zeros((4, 3)))


def test_heads_deterministic_and_bounded():
    rng = np.random.default_rng(8)
    params = init_params(TINY, rng)
    emb = Tensor(rng.standard_normal((4, 8)))
    a = detection_heads(emb, params)
    b = detection_heads(emb, params)
    assert np.array_equal(a.class_logits.data, b.class_logits.data)
    assert np.all((a.human_boxes.data > 0) & (a.human_boxes.data < 1))


def test_decoder_gradients_match_finite_differences():
    rng = np.random.default_rng(9)
    params = init_params(TINY, rng)
    pos = positional_embedding(2, 3, 8)
    grid = FeatureGrid(features=Tensor(rng.standard_normal((6, 8)) + pos),
                       pos_embed=Tensor(pos))

    def loss():
        out = decoder_forward(learnable_queries(params), grid, params)
        preds = detection_heads(out.embeddings[-1], params)
        return ad.mean_all(ad.add(ad.sum_all(preds.human_boxes),
                                  ad.add(ad.sum_all(preds.class_logits),
                                         ad.sum_all(preds.verb_logits))))

    subset = {name: t for name, t in params.items()
              if name in ("dec0.h0.wq", "dec0.h1.wv", "dec1.wo", "dec1.ffn_w1",
                          "head_cls.w2", "head_hbox.b1", "queries")}
    assert ad.finite_diff_check(loss, subset) < 1e-4


def test_query_set_validation():
    with pytest.raises(ContractError):
        QuerySet("learnable", Tensor(np.zeros((2, 8))), origin=(0, 1))
    with pytest.raises(ContractError):
        QuerySet("gbs", Tensor(np.zeros((2, 8))))
    with pytest.raises(ContractError):
        QuerySet("wrong", Tensor(np.zeros((2, 8))))


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(dim=10, heads=3)
    with pytest.raises(ConfigError):
        ModelConfig(dim=6)
