import numpy as np
import pytest

from splitmf.attack import (
    AttackKnowledge,
    AttackObservation,
    attack_trace,
    recover_rating,
    recover_residual,
)
from splitmf.bench import run_leakage_demo
from splitmf.errors import EmptyTraceError, IllConditionedError
from splitmf.mf import RatingMatrix, grad_item


def single_user_gradient(u, ratings, v_by_item):
    """Forward model: column j of the item gradient is -2 e_ij u."""
    d = u.shape[0]
    m = len(v_by_item)
    V = np.column_stack(v_by_item)
    R = RatingMatrix.from_entries(1, m, [(0, j, r) for j, r in enumerate(ratings)])
    return grad_item(u.reshape(1, d), V, R, 0.0)


class TestRecoverResidual:
    def test_constructed_inversion(self):
        u = np.array([1.0, 0.0])
        G = np.array([-1.0, 0.0])  # e = 0.5
        assert recover_residual(G, u, 0) == pytest.approx(0.5)

    def test_zero_gradient_zero_residual(self):
        assert recover_residual(np.zeros(3), np.array([1.0, 2.0, 3.0]), 1) == 0.0

    def test_matches_forward_model(self):
        rng = np.random.default_rng(4)
        u = rng.normal(size=4)
        ratings = rng.uniform(1, 5, size=6)
        V = [rng.normal(size=4) for _ in range(6)]
        G = single_user_gradient(u, ratings, V)
        for j in range(6):
            true_e = ratings[j] - u @ V[j]
            got = recover_residual(G[:, j], u, int(np.argmax(np.abs(u))))
            assert got == pytest.approx(true_e, abs=1e-10)

    def test_small_pivot_rejected(self):
        u = np.array([1e-12, 1.0])
        with pytest.raises(IllConditionedError):
            recover_residual(np.array([0.5, 0.5]), u, 0)
        # The other component still works.
        recover_residual(np.array([0.5, 0.5]), u, 1)


class TestRecoverRating:
    def test_constructed_rating(self):
        u = np.array([1.0, 1.0])
        v = np.array([1.0, 2.0])
        G = np.array([-2.0, -2.0])  # r=4: e = 4 - 3 = 1
        assert recover_rating(G, u, v, 0) == pytest.approx(4.0)

    def test_perfect_fit_returns_prediction(self):
        u = np.array([0.5, -1.5])
        v = np.array([2.0, 1.0])
        assert recover_rating(np.zeros(2), u, v, 1) == pytest.approx(float(u @ v))

    def test_inversion_exact_for_every_usable_pivot(self):
        # Forward-generated gradients invert back to the rating at 1e-10 for
        # every component with |u_k| above the conditioning floor.
        rng = np.random.default_rng(9)
        for _ in range(20):
            u = rng.normal(size=5)
            ratings = rng.uniform(1, 5, size=8)
            V = [rng.normal(size=5) for _ in range(8)]
            G = single_user_gradient(u, ratings, V)
            for j in range(8):
                vals = [
                    recover_rating(G[:, j], u, V[j], k)
                    for k in range(5)
                    if abs(u[k]) > 1e-6
                ]
                for val in vals:
                    assert val == pytest.approx(ratings[j], abs=1e-10)
                # Consistency across pivots, the attacker's internal check.
                assert max(vals) - min(vals) < 1e-8

    def test_observation_wrapper(self):
        u = np.array([1.0, 1.0])
        v = np.array([1.0, 2.0])
        obs = AttackObservation(round=0, grad_col=np.array([-2.0, -2.0]), u=u, v=v)
        assert obs.recover() == pytest.approx(4.0)


class TestAttackTrace:
    def test_plain_capture_recovers_ratings(self):
        demo = run_leakage_demo(seed=1, modes=("plain",))["plain"]
        assert demo.report.mode == "plain"
        assert demo.report.mean_abs_error < 1e-4
        # Micro-slice: every single rating comes back, not just on average.
        assert max(demo.report.abs_errors.values()) < 1e-4

    def test_shared_capture_resists_recovery(self):
        demo = run_leakage_demo(seed=1, modes=("shared",))["shared"]
        assert demo.report.mode == "shared"
        assert demo.report.mean_abs_error >= 0.5

    def test_modes_side_by_side(self):
        demos = run_leakage_demo(seed=6)
        assert demos["plain"].report.mean_abs_error < 1e-4
        assert demos["shared"].report.mean_abs_error >= 0.5

    def test_regularizer_stripping(self):
        demo = run_leakage_demo(seed=2, reg_item=0.05, modes=("plain",))["plain"]
        assert demo.report.mean_abs_error < 1e-4

    def test_empty_capture_rejected(self):
        cfg_demo = run_leakage_demo(seed=3, modes=("plain",))["plain"]
        knowledge = cfg_demo.knowledge
        from splitmf.protocol import ProtocolConfig
        from splitmf.mf import TrainConfig

        cfg = ProtocolConfig(2, "plain", train=TrainConfig(dim=4, reg_item=0.0))
        with pytest.raises(EmptyTraceError):
            attack_trace(b"", knowledge, cfg)

    def test_capture_without_knowledge_rejected(self):
        demo = run_leakage_demo(seed=3, modes=("plain",))["plain"]
        from splitmf.protocol import ProtocolConfig
        from splitmf.mf import TrainConfig

        cfg = ProtocolConfig(2, "plain", train=TrainConfig(dim=4, reg_item=0.0))
        starved = AttackKnowledge(user_by_round={}, true_ratings=demo.knowledge.true_ratings)
        with pytest.raises(EmptyTraceError):
            attack_trace(demo.capture, starved, cfg)
