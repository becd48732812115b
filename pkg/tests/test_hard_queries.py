import numpy as np
import pytest

from hoidet import autodiff as ad
from hoidet.autodiff import GradientTape, Tensor
from hoidet.boxes import Box, ShiftConfig, iou
from hoidet.errors import ConfigError, ContractError
from hoidet.hard_queries import (AmmConfig, DrawStore, HqmConfig, LearnablePass,
                                 ajl_step, amm_mask, gbs_encode, pair_prior,
                                 prior_from_boxes, run_hard_branch,
                                 sample_mask, select_positive_queries,
                                 shift_pair, topk_indices)
from hoidet.losses import LossWeights, branch_loss
from hoidet.matching import Assignment, hungarian, matching_cost
from hoidet.model import (ModelConfig, QuerySet, decoder_forward,
                          detection_heads, init_params, learnable_queries)
from hoidet.scenes import (HOIPair, Scene, SceneSpec, class_table, encode_scene,
                           generate_scene)

WEIGHTS = LossWeights()
SHIFT = ShiftConfig(0.4, 0.6)
TINY = ModelConfig(dim=8, heads=2, layers=2, num_queries=4,
                   num_classes=3, num_verbs=3, ffn_hidden=8)
TINY_SPEC = SceneSpec(num_classes=3, num_verbs=3, grid_h=4, grid_w=4,
                      pairs_min=1, pairs_max=2)


class TestPairPrior:
    def test_pinned_example(self):
        pair = HOIPair(Box(0.3, 0.4, 0.2, 0.2), Box(0.5, 0.4, 0.1, 0.2), 0, (1,))
        got = pair_prior(pair)
        want = [0.3, 0.4, 0.2, 0.2, 0.5, 0.4, 0.1, 0.2, -0.2, 0.0, 0.04, 0.02]
        np.testing.assert_allclose(got, want, atol=1e-15)

    def test_identical_boxes(self):
        b = Box(0.5, 0.5, 0.2, 0.3)
        got = prior_from_boxes(b, b)
        assert got[8] == 0.0 and got[9] == 0.0
        assert got[10] == got[11]

    def test_derived_entries_consistent(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            w1, h1, w2, h2 = rng.uniform(0.05, 0.4, size=4)
            a = Box(rng.uniform(w1 / 2, 1 - w1 / 2), rng.uniform(h1 / 2, 1 - h1 / 2), w1, h1)
            b = Box(rng.uniform(w2 / 2, 1 - w2 / 2), rng.uniform(h2 / 2, 1 - h2 / 2), w2, h2)
            p = prior_from_boxes(a, b)
            assert abs(p[8] - (p[0] - p[4])) < 1e-12
            assert abs(p[9] - (p[1] - p[5])) < 1e-12
            assert abs(p[10] - p[2] * p[3]) < 1e-12
            assert abs(p[11] - p[6] * p[7]) < 1e-12


class TestGbsEncode:
    def _pair(self):
        return HOIPair(Box(0.4, 0.4, 0.3, 0.3), Box(0.65, 0.6, 0.2, 0.25), 1, (1, 0, 0))

    def test_output_strictly_inside_unit_interval(self):
        params = init_params(TINY, np.random.default_rng(1))
        q = gbs_encode(self._pair(), params, np.random.default_rng(2), SHIFT)
        assert q.data.shape == (1, 8)
        assert np.all(np.abs(q.data) < 1.0)

    def test_shifted_boxes_respect_iou_band(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            h, o = shift_pair(self._pair(), SHIFT, rng)
            assert 0.4 <= iou(self._pair().human, h) <= 0.6
            assert 0.4 <= iou(self._pair().object, o) <= 0.6

    def test_no_shift_encodes_exact_prior(self):
        params = init_params(TINY, np.random.default_rng(4))
        flag = HqmConfig(strategy="gbs_only", no_shift=True)
        a = gbs_encode(self._pair(), params, np.random.default_rng(5), SHIFT, flag)
        b = gbs_encode(self._pair(), params, np.random.default_rng(99), SHIFT, flag)
        assert np.array_equal(a.data, b.data)  # no randomness consumed

    def test_gaussian_noise_variant_perturbs_post_tanh(self):
        params = init_params(TINY, np.random.default_rng(6))
        flag = HqmConfig(strategy="gbs_only", gaussian_noise=True)
        base = gbs_encode(self._pair(), params, np.random.default_rng(7), SHIFT,
                          HqmConfig(strategy="gbs_only", no_shift=True))
        noisy = gbs_encode(self._pair(), params, np.random.default_rng(7), SHIFT, flag)
        delta = noisy.data - base.data
        assert np.any(delta != 0.0)
        assert np.all(np.abs(delta) < 0.8)  # sigma = 0.1 noise, not a reshuffle


class TestAmmMask:
    def test_gamma_zero_identity(self):
        row = np.array([0.4, 0.3, 0.2, 0.1])
        out = amm_mask(row, row, AmmConfig(k=2, gamma=0.0), np.random.default_rng(0))
        assert np.array_equal(out, row)

    def test_gamma_one_zeroes_topk_only(self):
        row = np.array([0.4, 0.3, 0.2, 0.1])
        out = amm_mask(row, row, AmmConfig(k=2, gamma=1.0), np.random.default_rng(0))
        np.testing.assert_array_equal(out, [0.0, 0.0, 0.2, 0.1])

    def test_ties_prefer_lower_index(self):
        ref = np.array([0.25, 0.25, 0.25, 0.25])
        np.testing.assert_array_equal(topk_indices(ref, 2), [0, 1])

    def test_outside_topk_bit_identical_all_seeds(self):
        rng_ref = np.random.default_rng(1)
        cfg = AmmConfig(k=5, gamma=0.4)
        for seed in range(200):
            ref = rng_ref.random(20)
            ref /= ref.sum()
            a_m = rng_ref.random(20)
            out = amm_mask(a_m, ref, cfg, np.random.default_rng(seed))
            outside = np.setdiff1d(np.arange(20), topk_indices(ref, 5))
            assert np.array_equal(out[outside], a_m[outside])
            assert np.all((out == 0.0) | (out == a_m))

    def test_mask_rate_within_band(self):
        cfg = AmmConfig(k=50, gamma=0.4)
        ref = np.random.default_rng(2).random(100)
        masked = 0
        trials = 1000
        for seed in range(trials):
            mask = sample_mask(ref, cfg, np.random.default_rng(seed))
            masked += (mask[topk_indices(ref, 50)] == 0).sum()
        rate = masked / (trials * 50)
        assert 0.35 <= rate <= 0.45

    def test_keep_probability_reading_flips_rate(self):
        cfg = AmmConfig(k=50, gamma=0.4, gamma_is_keep_prob=True)
        ref = np.random.default_rng(3).random(100)
        masked = 0
        for seed in range(500):
            mask = sample_mask(ref, cfg, np.random.default_rng(seed))
            masked += (mask[topk_indices(ref, 50)] == 0).sum()
        rate = masked / (500 * 50)
        assert 0.55 <= rate <= 0.65

    def test_k_exceeding_row_rejected(self):
        with pytest.raises(ConfigError):
            amm_mask(np.ones(4), np.ones(4), AmmConfig(k=5, gamma=0.5),
                     np.random.default_rng(0))

    def test_invalid_config(self):
        with pytest.raises(ConfigError):
            AmmConfig(k=0)
        with pytest.raises(ConfigError):
            AmmConfig(k=1, gamma=1.5)


class TestSelectPositiveQueries:
    def test_copies_are_bit_equal_and_detached(self):
        rng = np.random.default_rng(4)
        q_l = QuerySet("learnable", ad.parameter((6, 8), rng))
        assignment = Assignment(((3, 0), (1, 1)))
        out = select_positive_queries(assignment, q_l)
        assert out.kind == "amm_copy"
        assert out.origin == (0, 1)
        assert np.array_equal(out.embeddings.data, q_l.embeddings.data[[3, 1]])
        assert out.embeddings.requires_grad is False

    def test_single_target(self):
        q_l = QuerySet("learnable", Tensor(np.arange(8.0).reshape(2, 4)))
        out = select_positive_queries(Assignment(((1, 0),)), q_l)
        assert out.embeddings.data.shape == (1, 4)

    def test_empty_assignment_rejected(self):
        q_l = QuerySet("learnable", Tensor(np.zeros((2, 4))))
        with pytest.raises(ContractError):
            select_positive_queries(Assignment(()), q_l)


def test_ajl_parity():
    assert ajl_step(0) == "gbs"
    assert ajl_step(1) == "amm"
    assert [ajl_step(i) for i in range(6)] == ["gbs", "amm", "gbs", "amm", "gbs", "amm"]
    runs = [ajl_step(i) for i in range(2 * 17)]
    assert runs.count("gbs") == 17 and runs.count("amm") == 17


# ---------------------------------------------------------------------------
# Full hard-branch execution
# ---------------------------------------------------------------------------

def _learnable_pass(params, scene, table):
    grid = encode_scene(scene, table)
    queries = learnable_queries(params)
    outputs = decoder_forward(queries, grid, params)
    preds = detection_heads(outputs.embeddings[-1], params)
    cost = matching_cost(preds, list(scene.pairs), WEIGHTS)
    assignment = hungarian(cost)
    return LearnablePass(grid, queries, outputs, preds, assignment)


@pytest.fixture
def setting():
    params = init_params(TINY, np.random.default_rng(10))
    scene = generate_scene(TINY_SPEC, np.random.default_rng(11))
    table = class_table(TINY_SPEC.num_classes, TINY.dim)
    artifacts = _learnable_pass(params, scene, table)
    return params, scene, artifacts


AMM = AmmConfig(k=4, gamma=0.4)


def test_baseline_runs_no_hard_pass(setting):
    params, scene, artifacts = setting
    loss, diag = run_hard_branch(HqmConfig("baseline"), scene, artifacts, params,
                                 WEIGHTS, SHIFT, AMM, np.random.default_rng(0))
    assert loss is None and diag["branch"] == "none"


def test_pjl_is_half_gbs_plus_half_amm(setting):
    params, scene, artifacts = setting
    store = DrawStore()
    loss_pjl, _ = run_hard_branch(HqmConfig("pjl"), scene, artifacts, params,
                                  WEIGHTS, SHIFT, AMM, np.random.default_rng(1),
                                  store=store)
    store.freeze()
    gbs, _ = run_hard_branch(HqmConfig("gbs_only"), scene, artifacts, params,
                             WEIGHTS, SHIFT, AMM, np.random.default_rng(99),
                             store=store)
    amm_cfg = HqmConfig("amm_only")
    amm, _ = run_hard_branch(amm_cfg, scene, artifacts, params,
                             WEIGHTS, SHIFT, AMM, np.random.default_rng(98),
                             store=store)
    assert loss_pjl.item() == pytest.approx(0.5 * gbs.item() + 0.5 * amm.item(),
                                            abs=1e-12)


def test_ajl_iteration_zero_matches_gbs_bitwise(setting):
    params, scene, artifacts = setting
    store = DrawStore()
    ajl_loss, diag = run_hard_branch(HqmConfig("ajl"), scene, artifacts, params,
                                     WEIGHTS, SHIFT, AMM, np.random.default_rng(2),
                                     iteration=0, store=store)
    assert diag["branch"] == "gbs"
    store.freeze()
    gbs_loss, _ = run_hard_branch(HqmConfig("gbs_only"), scene, artifacts, params,
                                  WEIGHTS, SHIFT, AMM, np.random.default_rng(3),
                                  store=store)
    assert ajl_loss.item() == gbs_loss.item()


def test_ajl_iteration_one_uses_masking(setting):
    params, scene, artifacts = setting
    _, diag = run_hard_branch(HqmConfig("ajl"), scene, artifacts, params,
                              WEIGHTS, SHIFT, AMM, np.random.default_rng(4),
                              iteration=1)
    assert diag["branch"] == "amm"


def test_cjl_runs_and_produces_finite_loss(setting):
    params, scene, artifacts = setting
    loss, diag = run_hard_branch(HqmConfig("cjl"), scene, artifacts, params,
                                 WEIGHTS, SHIFT, AMM, np.random.default_rng(5))
    assert diag["branch"] == "cjl"
    assert np.isfinite(loss.item())


def test_hard_branch_gradients_reach_shared_weights(setting):
    params, scene, artifacts_unused = setting
    table = class_table(TINY_SPEC.num_classes, TINY.dim)
    with GradientTape() as tape:
        artifacts = _learnable_pass(params, scene, table)
        loss, _ = run_hard_branch(HqmConfig("amm_only"), scene, artifacts, params,
                                  WEIGHTS, SHIFT, AMM, np.random.default_rng(6))
    grads = tape.backward(loss)
    # decoder weights train through the hard pass, learnable queries do not
    assert np.any(grads[params["dec0.h0.wv"]].data != 0.0)
    assert np.all(grads[params["queries"]].data == 0.0)


def test_gbs_branch_trains_prior_ffn(setting):
    params, scene, artifacts_unused = setting
    table = class_table(TINY_SPEC.num_classes, TINY.dim)
    with GradientTape() as tape:
        artifacts = _learnable_pass(params, scene, table)
        loss, _ = run_hard_branch(HqmConfig("gbs_only"), scene, artifacts, params,
                                  WEIGHTS, SHIFT, AMM, np.random.default_rng(7))
    grads = tape.backward(loss)
    assert np.any(grads[params["gbs.w1"]].data != 0.0)


def test_flag_validation():
    with pytest.raises(ConfigError):
        HqmConfig(strategy="baseline", no_shift=True)
    with pytest.raises(ConfigError):
        HqmConfig(strategy="gbs_only", no_topk=True)
    with pytest.raises(ConfigError):
        HqmConfig(strategy="gbs_only", no_shift=True, gaussian_noise=True)
    with pytest.raises(ConfigError):
        HqmConfig(strategy="ajl", mask_learnable=True)
    with pytest.raises(ConfigError):
        HqmConfig(strategy="nope")


def test_masked_positions_subset_of_reference_topk(setting):
    params, scene, artifacts = setting
    store = DrawStore()
    run_hard_branch(HqmConfig("amm_only"), scene, artifacts, params,
                    WEIGHTS, SHIFT, AMM, np.random.default_rng(8), store=store)
    matched_queries = [q for q, _ in artifacts.assignment.pairs]
    for (kind, tag, layer, head), mask in store._draws.items():
        assert kind == "amm_mask"
        refs = artifacts.outputs.attention[layer][head].data[matched_queries]
        for i in range(mask.shape[0]):
            zeroed = np.flatnonzero(mask[i] == 0.0)
            allowed = set(topk_indices(refs[i], AMM.k).tolist())
            assert set(zeroed.tolist()) <= allowed
