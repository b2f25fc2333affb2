import numpy as np
import pytest

from selfheal.engine import (
    NetworkState,
    make_params,
    step_alg1,
    step_svl,
    uniform_state,
    zero_state,
)
from selfheal.graph import Topology, build_laplacian, ring_lattice
from selfheal.objectives import QuadraticObjective
from selfheal.resilience import (
    BernoulliLoss,
    EdgeMemory,
    ForgettingConfig,
    MaskSchedule,
    apply_forgetting,
    step_alg2,
    step_svl_holdlast,
)


@pytest.fixture
def two_node():
    top = Topology(n=2, edges=((1, 2, 0.5), (2, 1, 0.5)))
    return top, build_laplacian(top)


class TestLossModels:
    def test_rate_validated(self):
        with pytest.raises(ValueError):
            BernoulliLoss(1.0)
        with pytest.raises(ValueError):
            BernoulliLoss(-0.1)

    def test_zero_rate_loses_nothing(self, lattice):
        loss = BernoulliLoss(0.0, seed=3)
        assert loss.lost_edges(17, lattice.edges) == set()

    def test_draws_pure_in_seed_and_step(self, lattice):
        a = BernoulliLoss(0.3, seed=9)
        b = BernoulliLoss(0.3, seed=9)
        for k in (0, 5, 123):
            assert a.lost_edges(k, lattice.edges) == b.lost_edges(k, lattice.edges)
        assert a.lost_edges(0, lattice.edges) != a.lost_edges(1, lattice.edges)

    def test_empirical_rate(self, lattice):
        loss = BernoulliLoss(0.3, seed=0)
        total = sum(len(loss.lost_edges(k, lattice.edges)) for k in range(2000))
        assert total / (2000 * len(lattice.edges)) == pytest.approx(0.3, abs=0.02)

    def test_mask_schedule_from_text(self):
        sched = MaskSchedule.from_text("1:2, 3:1\n\n2:3\n")
        assert sched.lost_edges(0, []) == {(1, 2), (3, 1)}
        assert sched.lost_edges(1, []) == set()
        assert sched.lost_edges(2, []) == {(2, 3)}
        assert sched.lost_edges(99, []) == set()

    def test_mask_schedule_bad_token(self):
        with pytest.raises(ValueError, match="line 2"):
            MaskSchedule.from_text("1:2\n1-2\n")


class TestLosslessEquivalence:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_alg2_bitwise_matches_alg1_without_loss(self, lattice, lattice_lap,
                                                    quad_model, quad_x_opt,
                                                    default_params, seed):
        a = uniform_state(7, 2, -1.0, 1.0, seed)
        b = a
        memory = EdgeMemory()
        for _ in range(200):
            a, ra = step_alg1(a, default_params, lattice_lap, quad_model,
                              quad_x_opt)
            b, rb = step_alg2(b, memory, default_params, lattice_lap, lattice,
                              quad_model, set(), quad_x_opt)
            assert np.array_equal(a.w1, b.w1)
            assert np.array_equal(a.w2, b.w2)
            assert np.array_equal(ra.v, rb.v)

    def test_holdlast_bitwise_matches_svl_without_loss(self, lattice,
                                                       lattice_lap, quad_model,
                                                       quad_x_opt,
                                                       default_params):
        a = zero_state(7, 2)
        b = a
        memory = EdgeMemory()
        for _ in range(200):
            a, _ = step_svl(a, default_params, lattice_lap, quad_model,
                            quad_x_opt)
            b, _ = step_svl_holdlast(b, memory, default_params, lattice_lap,
                                     lattice, quad_model, set(), quad_x_opt)
            assert np.array_equal(a.w1, b.w1)
            assert np.array_equal(a.w2, b.w2)


class TestExtrapolation:
    def test_lost_edge_memory_arithmetic(self, two_node):
        """A lost edge advances its memory by eta times the receiver's
        previous estimate."""
        top, lap = two_node
        params = make_params(0.3, 0.5, 1.0, 0.5)  # eta = 0.5
        model = QuadraticObjective(np.zeros((2, 1)))
        memory = EdgeMemory(
            values={(1, 2): np.array([1.0]), (2, 1): np.array([0.0])},
            last_received={(1, 2): 0, (2, 1): 0},
            ever_received={(1, 2), (2, 1)},
            x_prev=np.array([[2.0], [0.0]]),
        )
        state = NetworkState(w1=np.zeros((2, 1)), w2=np.zeros((2, 1)), k=1)
        step_alg2(state, memory, params, lap, top, model, lost={(1, 2)})
        # receiver 1 extrapolates: 0.5 * 2.0 + 1.0
        assert memory.values[(1, 2)][0] == pytest.approx(2.0)
        # the delivered edge took the fresh transmission (y = 0 here)
        assert memory.values[(2, 1)][0] == pytest.approx(0.0)

    def test_total_blackout_after_convergence_is_exact(self, lattice,
                                                       lattice_lap, quad_model,
                                                       quad_x_opt,
                                                       default_params):
        """Once the network has settled, the extrapolation rule reproduces
        the transmitted signal exactly, so losing every packet changes
        nothing."""
        state = zero_state(7, 2)
        memory = EdgeMemory()
        for _ in range(600):
            state, record = step_alg2(state, memory, default_params,
                                      lattice_lap, lattice, quad_model, set(),
                                      quad_x_opt)
        assert record.max_error < 1e-12
        every_edge = {(i, j) for i, j, _ in lattice.edges}
        for _ in range(100):
            state, record = step_alg2(state, memory, default_params,
                                      lattice_lap, lattice, quad_model,
                                      every_edge, quad_x_opt)
        assert record.max_error < 1e-9

    def test_converges_under_heavy_loss(self, lattice, lattice_lap, quad_model,
                                        quad_x_opt, default_params):
        loss = BernoulliLoss(0.3, seed=11)
        state = uniform_state(7, 2, -1.0, 1.0, 7)
        memory = EdgeMemory()
        for _ in range(3000):
            lost = loss.lost_edges(state.k, lattice.edges)
            state, record = step_alg2(state, memory, default_params,
                                      lattice_lap, lattice, quad_model, lost,
                                      quad_x_opt)
        assert record.max_error < 1e-10

    def test_holdlast_stalls_under_same_loss(self, lattice, lattice_lap,
                                             quad_model, quad_x_opt,
                                             default_params):
        loss = BernoulliLoss(0.3, seed=11)
        state = zero_state(7, 2)
        memory = EdgeMemory()
        for _ in range(3000):
            lost = loss.lost_edges(state.k, lattice.edges)
            state, record = step_svl_holdlast(state, memory, default_params,
                                              lattice_lap, lattice, quad_model,
                                              lost, quad_x_opt)
        assert record.max_error > 1e-4


class TestForgetting:
    def test_config_validated(self):
        with pytest.raises(ValueError):
            ForgettingConfig(0)

    def test_fresh_edges_survive(self):
        memory = EdgeMemory(values={(1, 2): np.array([1.0])},
                            last_received={(1, 2): 9},
                            ever_received={(1, 2)})
        apply_forgetting(memory, k=10, config=ForgettingConfig(q=2))
        assert (1, 2) in memory.values

    def test_stale_edge_cleared(self):
        memory = EdgeMemory(values={(1, 2): np.array([1.0])},
                            last_received={(1, 2): 3},
                            ever_received={(1, 2)})
        apply_forgetting(memory, k=10, config=ForgettingConfig(q=2))
        assert (1, 2) not in memory.values
        assert (1, 2) in memory.ever_received  # severed, not forgotten entirely

    def test_cleared_edge_contributes_zero(self, two_node):
        """A severed in-edge drops out of the mixing sum instead of being
        extrapolated."""
        top, lap = two_node
        params = make_params(0.3, 0.5, 1.0, 0.5)
        model = QuadraticObjective(np.zeros((2, 1)))
        memory = EdgeMemory(
            values={(2, 1): np.array([5.0])},
            last_received={(1, 2): 0, (2, 1): 0},
            ever_received={(1, 2), (2, 1)},
            x_prev=np.zeros((2, 1)),
        )
        w1 = np.array([[1.0], [3.0]])
        state = NetworkState(w1=w1, w2=np.zeros((2, 1)), k=1)
        _, record = step_alg2(state, memory, params, lap, top, model,
                              lost={(1, 2), (2, 1)})
        y = params.delta * w1
        # receiver 1 sees nothing on its severed edge: v_1 = L11 * y_1
        assert record.v[0, 0] == pytest.approx(lap.entries[0, 0] * y[0, 0])
        # receiver 2 still extrapolates its initialized edge
        expected = lap.entries[1, 1] * y[1, 0] + lap.entries[1, 0] * 5.0
        assert record.v[1, 0] == pytest.approx(expected)

    def test_zero_loss_with_forgetting_matches_alg1(self, lattice, lattice_lap,
                                                    quad_model, quad_x_opt,
                                                    default_params):
        a = uniform_state(7, 2, -1.0, 1.0, 4)
        b = a
        memory = EdgeMemory()
        config = ForgettingConfig(q=1)
        for _ in range(100):
            apply_forgetting(memory, b.k, config)
            a, _ = step_alg1(a, default_params, lattice_lap, quad_model,
                             quad_x_opt)
            b, _ = step_alg2(b, memory, default_params, lattice_lap, lattice,
                             quad_model, set(), quad_x_opt)
            assert np.array_equal(a.w1, b.w1)
            assert np.array_equal(a.w2, b.w2)

    def test_recovery_after_severance(self, lattice, lattice_lap, quad_model,
                                      quad_x_opt, default_params):
        """An edge silenced long enough to be severed rejoins cleanly once
        packets flow again."""
        state = uniform_state(7, 2, -1.0, 1.0, 8)
        memory = EdgeMemory()
        config = ForgettingConfig(q=5)
        silenced = {(1, 2), (2, 1)}
        for _ in range(300):
            apply_forgetting(memory, state.k, config)
            state, _ = step_alg2(state, memory, default_params, lattice_lap,
                                 lattice, quad_model, silenced, quad_x_opt)
        assert (1, 2) not in memory.values
        for _ in range(600):
            apply_forgetting(memory, state.k, config)
            state, record = step_alg2(state, memory, default_params,
                                      lattice_lap, lattice, quad_model, set(),
                                      quad_x_opt)
        assert record.max_error < 1e-10
