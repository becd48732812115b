import numpy as np
import pytest

from hoidet.autodiff import Tensor
from hoidet.boxes import Box
from hoidet.errors import ContractError
from hoidet.losses import LossWeights
from hoidet.matching import (Assignment, assignment_cost, brute_force_assignment,
                             hungarian, matching_cost)
from hoidet.model import Predictions
from hoidet.scenes import HOIPair


class TestHungarian:
    def test_two_by_two_pinned(self):
        # brute force over both permutations: 1+4=5 vs 2+2=4
        out = hungarian(np.array([[1.0, 2.0], [2.0, 4.0]]))
        assert out.pairs == ((1, 0), (0, 1))
        assert assignment_cost(np.array([[1.0, 2.0], [2.0, 4.0]]), out) == 4.0

    def test_diagonal_dominant_identity(self):
        cost = np.full((4, 4), 5.0)
        np.fill_diagonal(cost, 0.0)
        assert hungarian(cost).pairs == ((0, 0), (1, 1), (2, 2), (3, 3))

    def test_matches_brute_force_on_random_instances(self):
        rng = np.random.default_rng(0)
        for _ in range(300):
            nq = int(rng.integers(1, 9))
            ng = int(rng.integers(1, nq + 1))
            cost = rng.uniform(0, 10, size=(nq, ng))
            fast = hungarian(cost)
            slow = brute_force_assignment(cost)
            assert assignment_cost(cost, fast) == assignment_cost(cost, slow)

    def test_row_constant_invariance_square(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            cost = rng.uniform(0, 5, size=(5, 5))
            base = hungarian(cost)
            shifted = cost.copy()
            shifted[2, :] += 3.7
            assert hungarian(shifted).pairs == base.pairs

    def test_lexicographic_tie_break(self):
        # every assignment ties, so target 0 takes query 0, target 1 query 1
        out = hungarian(np.ones((4, 2)))
        assert out.pairs == ((0, 0), (1, 1))
        assert out.pairs == brute_force_assignment(np.ones((4, 2))).pairs

    def test_tie_break_agrees_with_brute_force_on_discrete_costs(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            nq = int(rng.integers(2, 7))
            ng = int(rng.integers(1, nq + 1))
            cost = rng.integers(0, 3, size=(nq, ng)).astype(float)
            assert hungarian(cost).pairs == brute_force_assignment(cost).pairs

    def test_rejects_more_targets_than_queries(self):
        with pytest.raises(ContractError):
            hungarian(np.ones((2, 3)))

    def test_rejects_nonfinite(self):
        with pytest.raises(ContractError):
            hungarian(np.array([[np.nan, 1.0], [1.0, 1.0]]))


class TestBruteForce:
    def test_one_by_one(self):
        assert brute_force_assignment(np.array([[3.0]])).pairs == ((0, 0),)

    def test_guard(self):
        with pytest.raises(ContractError):
            brute_force_assignment(np.ones((9, 2)))


class TestAssignment:
    def test_rejects_duplicates(self):
        with pytest.raises(ContractError):
            Assignment(((0, 0), (0, 1)))

    def test_rejects_unsorted_targets(self):
        with pytest.raises(ContractError):
            Assignment(((0, 1), (1, 0)))


def _preds_for(nq, num_classes, num_verbs, rng):
    return Predictions(
        human_boxes=Tensor(rng.uniform(0.3, 0.7, size=(nq, 4))),
        object_boxes=Tensor(rng.uniform(0.3, 0.7, size=(nq, 4))),
        class_logits=Tensor(rng.standard_normal((nq, num_classes + 1))),
        verb_logits=Tensor(rng.standard_normal((nq, num_verbs))),
    )


class TestMatchingCost:
    def setup_method(self):
        self.weights = LossWeights()
        self.pair = HOIPair(Box(0.4, 0.4, 0.2, 0.2), Box(0.6, 0.6, 0.2, 0.2), 1, (1, 0, 0, 1))

    def test_exact_prediction_dominates(self):
        rng = np.random.default_rng(3)
        preds = _preds_for(4, 5, 4, rng)
        # query 2 predicts the target exactly and confidently
        preds.human_boxes.data[2] = self.pair.human.as_array()
        preds.object_boxes.data[2] = self.pair.object.as_array()
        preds.class_logits.data[2] = 0.0
        preds.class_logits.data[2, 1] = 20.0
        preds.verb_logits.data[2] = np.where(np.array(self.pair.verbs) > 0, 20.0, -20.0)
        cost = matching_cost(preds, [self.pair], self.weights)
        assert cost[2, 0] == min(cost[:, 0])
        assert cost[2, 0] < 0.01  # only the verb-BCE floor remains

    def test_finite_on_random_inputs(self):
        rng = np.random.default_rng(4)
        preds = _preds_for(6, 5, 4, rng)
        cost = matching_cost(preds, [self.pair, self.pair], self.weights)
        assert np.all(np.isfinite(cost))
        assert cost.shape == (6, 2)

    def test_monotone_in_box_distance(self):
        rng = np.random.default_rng(5)
        preds = _preds_for(3, 5, 4, rng)
        preds.human_boxes.data[1] = self.pair.human.as_array() + [0.05, 0.0, 0.0, 0.0]
        near = matching_cost(preds, [self.pair], self.weights)
        preds.human_boxes.data[1] = self.pair.human.as_array() + [0.3, 0.0, 0.0, 0.0]
        far = matching_cost(preds, [self.pair], self.weights)
        assert far[1, 0] > near[1, 0]


def test_hungarian_runs_fast_enough():
    import time
    rng = np.random.default_rng(6)
    start = time.perf_counter()
    for _ in range(200):
        hungarian(rng.uniform(0, 1, size=(16, 3)))
    assert time.perf_counter() - start < 2.0
