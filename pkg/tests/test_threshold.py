import numpy as np
import pytest

from ssdg.errors import ConfigError, ContractViolation
from ssdg.pseudo_label import (
    AdaptiveThresholdSelector,
    FixedThresholdSelector,
    create_selector,
)
from ssdg.threshold import (
    SHARED_KEY,
    DomainThreshold,
    ThresholdConfig,
    ThresholdState,
    fixed_select,
    local_thresholds,
    select,
    update_expectations,
    update_global,
)


def _random_distributions(rng, n, num_classes, sharpness=1.0):
    logits = rng.standard_normal((n, num_classes)) * sharpness
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


class TestGlobalThreshold:
    def test_initial_value(self):
        state = DomainThreshold.initial(7, 0.999)
        assert state.tau_g == pytest.approx(1 / 7)
        assert state.step == 0

    def test_single_update(self):
        state = DomainThreshold(num_classes=2, ema_lambda=0.9, tau_g=0.5, expectations=np.full(2, 0.5))
        state = update_global(state, np.array([0.7, 0.9]))
        assert state.tau_g == pytest.approx(0.53)
        assert state.step == 1

    def test_closed_form_geometric_decay(self):
        lam, c = 0.9, 0.8
        state = DomainThreshold.initial(5, lam)
        start = state.tau_g
        for t in range(1, 101):
            state = update_global(state, np.full(4, c))
            assert abs(state.tau_g - c) == pytest.approx(lam ** t * abs(start - c), abs=1e-12)

    def test_stays_in_convex_hull(self, rng):
        state = DomainThreshold.initial(4, 0.95)
        seen = [state.tau_g]
        for _ in range(50):
            conf = rng.uniform(0.25, 1.0, size=8)
            seen.append(conf.mean())
            state = update_global(state, conf)
            assert min(seen) - 1e-12 <= state.tau_g <= max(seen) + 1e-12

    def test_empty_batch_keeps_state(self):
        state = DomainThreshold.initial(3, 0.9)
        after = update_global(state, np.zeros(0))
        assert after.tau_g == state.tau_g and after.step == 0
        assert after.warnings


class TestExpectations:
    def test_initial_uniform(self):
        np.testing.assert_array_equal(DomainThreshold.initial(4, 0.9).expectations, np.full(4, 0.25))

    def test_single_update(self):
        state = DomainThreshold(num_classes=2, ema_lambda=0.5, tau_g=0.5, expectations=np.array([0.2, 0.8]))
        state = update_expectations(state, np.array([[0.7, 0.3], [0.5, 0.5]]))
        np.testing.assert_allclose(state.expectations, [0.4, 0.6])
        assert state.step == 0

    def test_stays_a_distribution(self, rng):
        state = DomainThreshold.initial(5, 0.8)
        for _ in range(30):
            state = update_expectations(state, _random_distributions(rng, 6, 5, sharpness=3.0))
        assert state.expectations.sum() == pytest.approx(1.0)
        assert np.all((state.expectations >= 0) & (state.expectations <= 1))

    def test_wrong_width(self):
        with pytest.raises(ContractViolation):
            update_expectations(DomainThreshold.initial(3, 0.9), np.full((2, 4), 0.25))


class TestLocalThresholds:
    def test_maxnorm(self):
        state = DomainThreshold(num_classes=3, ema_lambda=0.9, tau_g=0.6, expectations=np.array([0.2, 0.4, 0.4]))
        np.testing.assert_allclose(local_thresholds(state), [0.3, 0.6, 0.6])

    def test_uniform_expectations(self):
        state = DomainThreshold.initial(4, 0.9)
        np.testing.assert_allclose(local_thresholds(state), np.full(4, 0.25))

    def test_ceiling_on_random_states(self, rng):
        for _ in range(1000):
            num_classes = int(rng.integers(2, 12))
            e = rng.dirichlet(np.full(num_classes, rng.uniform(0.1, 5.0)))
            tau = float(rng.uniform(1.0 / num_classes, 1.0))
            state = DomainThreshold(num_classes=num_classes, ema_lambda=0.9, tau_g=tau, expectations=e)
            thresholds = local_thresholds(state)
            assert thresholds[np.argmax(e)] == tau
            assert np.all(thresholds <= tau)

    def test_all_zero_degenerates(self):
        state = DomainThreshold(num_classes=3, ema_lambda=0.9, tau_g=0.4, expectations=np.zeros(3))
        np.testing.assert_array_equal(local_thresholds(state), np.full(3, 0.4))


class TestSelect:
    def _state_with(self, tau_g, expectations):
        state = ThresholdState.create([0, 1], len(expectations), 0.9)
        states = dict(state.states)
        states[0] = DomainThreshold(len(expectations), 0.9, tau_g, np.asarray(expectations, dtype=float))
        return ThresholdState(state.domains, state.num_classes, 0.9, True, states)

    def test_selected_above_threshold(self):
        state = self._state_with(0.8, [0.5, 0.5])
        batch = select(state, np.array([[0.1, 0.9]]), 0)
        assert batch.selected.tolist() == [True]
        assert batch.pseudo_labels.tolist() == [1]

    def test_rejected_below_threshold(self):
        state = self._state_with(0.6, [0.5, 0.5])
        assert select(state, np.array([[0.55, 0.45]]), 0).selected.tolist() == [False]

    def test_equal_is_not_selected(self):
        state = self._state_with(0.75, [0.5, 0.5])
        assert select(state, np.array([[0.75, 0.25]]), 0).selected.tolist() == [False]

    def test_argmax_tie_takes_lowest_class(self):
        state = self._state_with(0.3, [0.5, 0.5])
        batch = select(state, np.array([[0.5, 0.5]]), 0)
        assert batch.pseudo_labels.tolist() == [0]

    def test_unknown_domain(self):
        with pytest.raises(ContractViolation):
            select(ThresholdState.create([0, 1], 2), np.array([[0.5, 0.5]]), 5)

    def test_superset_of_fixed_selection(self, rng):
        for _ in range(20):
            e = rng.dirichlet(np.ones(4))
            state = self._state_with(rng.uniform(0.25, 0.9), e)
            q = _random_distributions(rng, 50, 4, sharpness=3.0)
            tau = 0.9
            adaptive = select(state, q, 0).selected
            fixed = fixed_select(tau, q).selected
            assert np.all(adaptive[fixed])

    def test_batch_yield(self):
        state = self._state_with(0.6, [0.5, 0.5])
        a = select(state, np.array([[0.9, 0.1], [0.5, 0.5]]), 0, example_ids=np.array([3, 4]))
        assert a.num_selected == 1 and a.yield_rate == 0.5


class TestFixedSelect:
    def test_canonical_value(self):
        assert fixed_select(0.95, np.array([[0.96, 0.04]])).selected.tolist() == [True]

    def test_near_one_selects_nothing(self, rng):
        q = _random_distributions(rng, 100, 3)
        assert fixed_select(1 - 1e-12, q).num_selected == 0

    def test_monotone_in_tau(self, rng):
        q = _random_distributions(rng, 200, 4, sharpness=2.0)
        counts = [fixed_select(t, q).num_selected for t in np.linspace(0.3, 0.99, 15)]
        assert counts == sorted(counts, reverse=True)

    def test_invalid_tau(self):
        with pytest.raises(ConfigError):
            fixed_select(1.0, np.array([[0.5, 0.5]]))


class TestThresholdState:
    def test_domain_isolation(self, rng):
        state = ThresholdState.create([0, 1, 2], 3, 0.9)
        before = state.states[1]
        after = state.update(0, _random_distributions(rng, 8, 3))
        assert after.states[1] is before
        assert after.states[0].step == 1
        assert state.states[0].step == 0

    def test_shared_state(self, rng):
        state = ThresholdState.create([0, 1], 3, 0.9, per_domain=False)
        assert list(state.states) == [SHARED_KEY]
        state = state.update(0, _random_distributions(rng, 8, 3)).update(1, _random_distributions(rng, 8, 3))
        assert state.domain_state(0) is state.domain_state(1)
        assert state.domain_state(0).step == 2

    def test_shared_step_pools_domains_once(self, rng):
        q0 = _random_distributions(rng, 6, 3, sharpness=2.0)
        q1 = _random_distributions(rng, 10, 3, sharpness=0.5)
        state = ThresholdState.create([0, 1], 3, 0.9, per_domain=False)
        forward = state.update_step({0: q0, 1: q1}).domain_state(0)
        backward = state.update_step({1: q1, 0: q0}).domain_state(0)
        pooled = np.concatenate([q0, q1])

        assert forward.step == 1
        assert forward.tau_g == backward.tau_g
        assert forward.tau_g == pytest.approx(0.9 / 3 + 0.1 * pooled.max(axis=1).mean(), abs=1e-15)
        np.testing.assert_allclose(forward.expectations, 0.9 / 3 + 0.1 * pooled.mean(axis=0), atol=1e-15)

    def test_per_domain_step_matches_separate_updates(self, rng):
        q0, q1 = _random_distributions(rng, 5, 3), _random_distributions(rng, 7, 3)
        state = ThresholdState.create([0, 1], 3, 0.9)
        together = state.update_step({0: q0, 1: q1})
        separate = state.update(0, q0).update(1, q1)
        for d in (0, 1):
            assert together.domain_state(d).tau_g == separate.domain_state(d).tau_g
            np.testing.assert_array_equal(together.domain_state(d).expectations,
                                          separate.domain_state(d).expectations)

    def test_step_rejects_wrong_class_count(self, rng):
        state = ThresholdState.create([0], 3, 0.9)
        with pytest.raises(ContractViolation):
            state.update_step({0: _random_distributions(rng, 4, 2)})

    def test_pure_fold_over_stream(self, rng):
        stream = [(int(rng.integers(0, 2)), _random_distributions(rng, 5, 3)) for _ in range(25)]

        def replay():
            s = ThresholdState.create([0, 1], 3, 0.95)
            for d, q in stream:
                s = s.update(d, q)
            return s

        a, b = replay(), replay()
        for d in (0, 1):
            assert a.domain_state(d).tau_g == b.domain_state(d).tau_g
            np.testing.assert_array_equal(a.domain_state(d).expectations, b.domain_state(d).expectations)


class TestSelectors:
    def test_factory(self):
        config = ThresholdConfig()
        assert isinstance(create_selector("cat", [0, 1], 3, config), AdaptiveThresholdSelector)
        assert isinstance(create_selector("fixmatch_baseline", [0, 1], 3, config), FixedThresholdSelector)
        assert create_selector("supervised_only", [0, 1], 3, config) is None
        assert create_selector("full_labels", [0, 1], 3, config) is None

    def test_invalid_lambda(self):
        with pytest.raises(ConfigError):
            create_selector("cat", [0], 3, ThresholdConfig(ema_lambda=1.0))

    def test_early_yield_beats_fixed(self, rng):
        # 训练早期：预测平缓，置信度远低于 0.95
        adaptive = AdaptiveThresholdSelector([0, 1], 5, ThresholdConfig(ema_lambda=0.999))
        fixed = FixedThresholdSelector([0, 1], 5, 0.95)
        total_adaptive = total_fixed = 0
        for step in range(50):
            d = step % 2
            q = _random_distributions(rng, 32, 5, sharpness=1.5)
            total_adaptive += adaptive.select(q, d).num_selected
            total_fixed += fixed.select(q, d).num_selected
            adaptive.observe({d: q})
            fixed.observe({d: q})
        assert total_adaptive >= total_fixed
        assert total_adaptive > 0

    def test_snapshot(self, rng):
        selector = AdaptiveThresholdSelector([0, 2], 3, ThresholdConfig())
        selector.observe({2: _random_distributions(rng, 4, 3)})
        snap = selector.snapshot()
        assert set(snap) == {0, 2}
        assert snap[2]["step"] == 1 and snap[0]["step"] == 0
        assert len(snap[0]["thresholds"]) == 3
        fixed = FixedThresholdSelector([0], 3, 0.9).snapshot()
        assert fixed[0]["expectations"] is None and fixed[0]["thresholds"] == [0.9, 0.9, 0.9]
