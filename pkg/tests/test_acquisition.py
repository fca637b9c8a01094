import math
from dataclasses import replace

import numpy as np
import pytest

from robust_metabo.acquisition import (
    ConfidenceParams,
    argmax_first,
    beta_t,
    build_rff_sampler,
    meta_information_gain,
    sample_function,
    tau,
    ts_select,
    ts_select_index,
    ucb_acquisition,
    ucb_select,
    ucb_select_index,
)
from robust_metabo.gp import Dataset, KernelSpec, fit, gain_from_variance
from robust_metabo.meta import MetaState, MetaTask

KERNEL = KernelSpec(0.1, 1.0, 0.01, 0.01)

# Written out independently of the implementation and evaluated as text.
BETA_FORMULA = "B + sigma * sqrt(2 * (gamma + 1 + log(4 / delta)))"
TAU_FORMULA = "B + sigma * sqrt(2 * (gamma_N + 1 + log(4 * M / delta)))"


def _eval(formula, **env):
    return eval(formula, {"sqrt": math.sqrt, "log": math.log}, env)


def _state(num_tasks, nu, weights=None):
    state = MetaState.initial(num_tasks, eta=0.05)
    if weights is not None:
        state = replace(state, weights=np.asarray(weights, float))
    return replace(state, nu=nu)


def _task(task_id, offset):
    x = np.linspace(0.0, 1.0, 8).reshape(-1, 1)
    return MetaTask.from_data(task_id, Dataset(x, np.cos(5 * x[:, 0]) + offset), KERNEL)


def _target():
    x = np.array([[0.15], [0.55], [0.8]])
    return fit(KERNEL, Dataset(x, [0.2, 1.0, -0.4]))


class TestSchedules:
    def test_beta_example(self):
        params = ConfidenceParams(rkhs_bound=1.0, delta=0.1, sigma=0.1, gamma_running=0.0)
        assert beta_t(params, 1) == pytest.approx(1.3062, abs=1e-4)

    @pytest.mark.parametrize("gamma", [0.0, 0.7, 12.5])
    @pytest.mark.parametrize("delta", [0.05, 0.5])
    def test_beta_matches_formula(self, gamma, delta):
        params = ConfidenceParams(rkhs_bound=1.3, delta=delta, sigma=0.2, gamma_running=gamma)
        expected = _eval(BETA_FORMULA, B=1.3, sigma=0.2, gamma=gamma, delta=delta)
        assert beta_t(params, 3) == pytest.approx(expected, rel=1e-15)

    def test_zero_noise_gives_b(self):
        assert beta_t(ConfidenceParams(rkhs_bound=2.5, sigma=0.0, gamma_running=3.0), 4) == 2.5

    def test_beta_increasing_in_gamma(self):
        values = [beta_t(ConfidenceParams(gamma_running=g), 1) for g in np.linspace(0, 10, 12)]
        assert all(a < b for a, b in zip(values, values[1:]))

    def test_fixed_beta(self):
        assert beta_t(ConfidenceParams(fixed_beta=2.0, gamma_running=5.0), 7) == 2.0

    def test_tau_example(self):
        params = ConfidenceParams(rkhs_bound=1.0, delta=0.1, sigma=0.1, num_meta=4)
        assert tau(params, 0.0) == pytest.approx(1.348573, abs=1e-6)

    @pytest.mark.parametrize("m", [1, 3, 10])
    def test_tau_matches_formula(self, m):
        params = ConfidenceParams(rkhs_bound=0.8, delta=0.2, sigma=0.3, num_meta=m)
        expected = _eval(TAU_FORMULA, B=0.8, sigma=0.3, gamma_N=4.2, M=m, delta=0.2)
        assert tau(params, 4.2) == pytest.approx(expected, rel=1e-15)

    def test_tau_single_task_reduces_to_beta(self):
        params = ConfidenceParams(num_meta=1, gamma_running=2.0)
        assert tau(params, 2.0) == pytest.approx(beta_t(params, 1), rel=1e-15)

    def test_tau_increasing_in_m(self):
        values = [tau(ConfidenceParams(num_meta=m), 1.0) for m in range(1, 8)]
        assert all(a < b for a, b in zip(values, values[1:]))

    def test_meta_information_gain_is_chain_rule_sum(self):
        task = _task(0, 0.0)
        total, data = 0.0, Dataset.empty(1)
        for x, y in zip(task.data.inputs, task.data.outputs):
            var = fit(KERNEL, data, "meta").predict_many(x.reshape(1, -1))[1][0]
            total += gain_from_variance(var, KERNEL.noise_variance)
            data = data.append(x, y)
        assert meta_information_gain(task) == pytest.approx(total, rel=1e-10)


class TestUcb:
    def _parts(self, x):
        target = _target()
        task = _task(0, 0.3)
        mu, var = target.predict_many(np.atleast_2d(x))
        mm, mv = task.posterior.predict_many(np.atleast_2d(x))
        return target, task, mu[0] + 1.5 * math.sqrt(var[0]), mm[0] + 2.0 * math.sqrt(mv[0])

    def test_nu_zero_is_gp_ucb(self):
        target, task, target_ucb, _ = self._parts([0.4])
        value = ucb_acquisition([0.4], target, [task], _state(1, 0.0), 1.5, 2.0)
        assert value == target_ucb

    def test_nu_one_is_meta_ucb(self):
        target, task, _, meta_ucb = self._parts([0.4])
        value = ucb_acquisition([0.4], target, [task], _state(1, 1.0), 1.5, 2.0)
        assert value == pytest.approx(meta_ucb, rel=1e-14)

    def test_half_is_average(self):
        target, task, target_ucb, meta_ucb = self._parts([0.7])
        value = ucb_acquisition([0.7], target, [task], _state(1, 0.5), 1.5, 2.0)
        assert value == pytest.approx(0.5 * (target_ucb + meta_ucb), rel=1e-14)

    @pytest.mark.parametrize("nu", [0.1, 0.37, 0.9])
    def test_linear_in_nu(self, nu):
        target = _target()
        tasks = [_task(0, 0.3), _task(1, -1.0)]
        w = [0.3, 0.7]
        a = ucb_acquisition([0.33], target, tasks, _state(2, 1.0, w), 1.5, 2.0)
        b = ucb_acquisition([0.33], target, tasks, _state(2, 0.0, w), 1.5, 2.0)
        mid = ucb_acquisition([0.33], target, tasks, _state(2, nu, w), 1.5, 2.0)
        assert mid == pytest.approx(nu * a + (1 - nu) * b, rel=1e-13)

    def test_select_single_point(self):
        assert ucb_select([[0.42]], _target(), [], _state(0, 0.0), 1.5, 2.0) == pytest.approx([0.42])

    def test_prior_ties_go_to_first_index(self):
        domain = np.linspace(0, 1, 25).reshape(-1, 1)
        prior = fit(KERNEL, Dataset.empty(1))
        assert ucb_select_index(domain, prior, [], _state(0, 0.0), 1.5, 2.0) == 0

    def test_rounding_level_ties_go_to_first_index(self):
        scores = np.array([0.3, 1.5, 1.5 + 2e-16, 1.5 - 1e-9])
        assert argmax_first(scores) == 1
        assert argmax_first(np.array([1.0, 1.0 + 1e-9])) == 1

    def test_empty_domain(self):
        with pytest.raises(ValueError):
            ucb_select_index(np.empty((0, 1)), _target(), [], _state(0, 0.0), 1.5, 2.0)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_exhaustive_scan(self, seed):
        rng = np.random.default_rng(seed)
        domain = rng.uniform(size=(40, 1))
        tasks = [_task(0, rng.normal()), _task(1, rng.normal())]
        w = rng.dirichlet([1, 1])
        state = _state(2, float(rng.uniform()), w)
        target = _target()
        best, best_idx = -math.inf, None
        for i, x in enumerate(domain):
            value = ucb_acquisition(x, target, tasks, state, 1.4, 2.1)
            if value > best:
                best, best_idx = value, i
        assert ucb_select_index(domain, target, tasks, state, 1.4, 2.1) == best_idx


def _rff_fixture():
    kernel = KernelSpec(0.2, 1.0, 0.01, 0.01)
    x = np.linspace(0.05, 0.95, 10).reshape(-1, 1)
    y = np.sin(2 * np.pi * x[:, 0]) + 0.1 * np.random.default_rng(7).standard_normal(10)
    return fit(kernel, Dataset(x, y), "meta")


class TestRff:
    def test_feature_norm(self):
        post = _rff_fixture()
        sampler = build_rff_sampler(post, 120, 1.0, rng_seed=0)
        phi = sampler.features(np.random.default_rng(1).uniform(-2, 3, size=(100, 1)))
        assert np.max(np.abs(np.sum(phi**2, axis=1) - 1.0)) <= 1e-9

    def test_feature_norm_general_signal_variance(self):
        post = fit(KernelSpec(0.3, 2.7, 0.01, 0.01), Dataset([[0.1, 0.2]], [0.5]), "meta")
        sampler = build_rff_sampler(post, 50, 1.0, rng_seed=4)
        phi = sampler.features(np.random.default_rng(2).uniform(size=(100, 2)))
        assert np.max(np.abs(np.sum(phi**2, axis=1) - 2.7)) <= 1e-9

    def test_empty_data_zero_mean(self):
        sampler = build_rff_sampler(fit(KERNEL, Dataset.empty(1)), 60, 1.0, rng_seed=0)
        assert np.array_equal(sampler.weight_mean, np.zeros(60))
        grid = np.linspace(0, 1, 30).reshape(-1, 1)
        mean = np.mean([sample_function(sampler, i)(grid) for i in range(400)], axis=0)
        assert np.max(np.abs(mean)) < 0.25

    def test_sample_mean_tracks_exact_posterior_mean(self):
        post = _rff_fixture()
        sampler = build_rff_sampler(post, 120, 1.0, rng_seed=0)
        grid = np.linspace(0, 1, 100).reshape(-1, 1)
        mean = np.mean([sample_function(sampler, i)(grid) for i in range(500)], axis=0)
        assert np.max(np.abs(mean - post.predict_many(grid)[0])) <= 0.1

    def test_zero_covariance_is_deterministic(self):
        sampler = build_rff_sampler(_rff_fixture(), 30, scale=0.0, rng_seed=0)
        assert np.array_equal(sample_function(sampler, 1).weights, sampler.weight_mean)
        assert np.array_equal(sample_function(sampler, 2).weights, sampler.weight_mean)

    def test_same_seed_same_function(self):
        sampler = build_rff_sampler(_rff_fixture(), 30, 1.0, rng_seed=0)
        assert np.array_equal(sample_function(sampler, 9).weights, sample_function(sampler, 9).weights)
        assert not np.array_equal(sample_function(sampler, 9).weights, sample_function(sampler, 10).weights)

    def test_sample_variance_scales_with_inflation(self):
        kernel = KernelSpec(0.2, 1.0, 0.01, 0.01)
        x = np.linspace(0.0, 0.4, 10).reshape(-1, 1)
        post = fit(kernel, Dataset(x, np.sin(2 * np.pi * x[:, 0])), "meta")
        probe = np.array([[0.75], [1.0]])
        scale = 2.0
        sampler = build_rff_sampler(post, 120, scale, rng_seed=0)
        draws = np.array([sample_function(sampler, i)(probe) for i in range(2000)])
        expected = scale**2 * post.predict_many(probe)[1]
        assert np.all(np.abs(draws.var(axis=0) / expected - 1) <= 0.2)


class TestTsSelect:
    def _setup(self, nu, num_tasks=1):
        domain = np.linspace(0, 1, 50).reshape(-1, 1)
        sampler = build_rff_sampler(_target(), 40, 1.0, rng_seed=0)
        tasks = [_task(i, 0.1 * i) for i in range(num_tasks)]
        meta = [sample_function(build_rff_sampler(t.posterior, 40, 1.0, 100 + t.id), 5) for t in tasks]
        return domain, sampler, meta, _state(num_tasks, nu)

    def test_nu_zero_always_target(self):
        domain, sampler, meta, state = self._setup(0.0)
        meta_values = np.vstack([m(domain) for m in meta])
        for seed in range(200):
            assert ts_select_index(domain, sampler, meta_values, state, seed)[1] is False

    def test_nu_one_single_task_takes_meta_argmax(self):
        domain, sampler, meta, state = self._setup(1.0)
        expected = domain[int(np.argmax(meta[0](domain)))]
        for seed in range(20):
            assert ts_select(domain, sampler, meta, state, seed) == pytest.approx(expected)

    def test_branch_frequency(self):
        domain, sampler, meta, state = self._setup(0.3)
        meta_values = np.vstack([m(domain) for m in meta])
        hits = sum(ts_select_index(domain, sampler, meta_values, state, s)[1] for s in range(10_000))
        assert abs(hits / 10_000 - 0.3) <= 0.02

    def test_constant_shift_keeps_meta_choice(self):
        domain, sampler, meta, _ = self._setup(1.0, num_tasks=3)
        state = _state(3, 1.0, [0.2, 0.5, 0.3])
        values = np.vstack([m(domain) for m in meta])
        a, _ = ts_select_index(domain, sampler, values, state, 0)
        b, _ = ts_select_index(domain, sampler, values + 4.2, state, 0)
        assert a == b

    def test_empty_domain(self):
        _, sampler, _, state = self._setup(0.0)
        with pytest.raises(ValueError):
            ts_select_index(np.empty((0, 1)), sampler, np.empty((1, 0)), state, 0)
