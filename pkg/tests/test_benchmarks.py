import math

import numpy as np
import pytest
from scipy.integrate import quad

from execlab.benchmarks import (
    DegenerateRatioError,
    Schedule,
    agg_nash_continuous_is,
    agg_nash_grid_schedule,
    agg_nash_inventory,
    agg_nash_rate,
    benchmark_table,
    best_response_schedule,
    deterministic_is_quadratic,
    equilibrium_params,
    evaluate_schedule_is,
    own_nash_grid_schedule,
    sz_general_inventory,
    twap_is_closed_form,
    twap_schedule,
)
from execlab.market import Convention, MarketParams, table1_params


@pytest.fixture
def p():
    return table1_params(sigma=0.0)


def quadratic_is_oracle(params, x, w):
    """Independent sigma=0 shortfall: kappa*sum x_m (X_{m-1}+W_{m-1}) + temp."""
    X = np.concatenate(([0.0], np.cumsum(x)[:-1]))
    W = np.concatenate(([0.0], np.cumsum(w)[:-1]))
    perm = params.kappa * np.sum(x * (X + W))
    c = params.a / params.tau
    if params.convention is Convention.AGGREGATE:
        return perm + c * np.sum(x * (x + w))
    return perm + c * np.sum(x * x)


class TestEquilibriumParams:
    def test_table1_constants(self, p):
        eq = equilibrium_params(p)
        assert eq.beta_agg == pytest.approx(1 / 6, rel=1e-15)
        assert eq.beta_own == pytest.approx(1 / 4, rel=1e-15)
        assert eq.Lambda == 4.5
        assert eq.rho == pytest.approx(7 / 9, rel=1e-15)
        assert eq.beta_own > eq.beta_agg

    def test_risk_neutral_nu_reduction(self, p):
        eq = equilibrium_params(p)
        assert eq.nu_sigma == pytest.approx(p.kappa / (6 * p.a), rel=1e-15)
        assert eq.nu_delta == pytest.approx(p.kappa / (2 * p.a), rel=1e-15)


class TestSchiedZhangGeneral:
    def test_boundary_values(self, p):
        q1, q2 = sz_general_inventory(0.0, p, 70.0, 30.0)
        assert (q1, q2) == pytest.approx((70.0, 30.0), rel=1e-12)
        q1, q2 = sz_general_inventory(p.horizon, p, 70.0, 30.0)
        assert (q1, q2) == pytest.approx((0.0, 0.0), abs=1e-12)

    def test_symmetric_inventories_equal(self):
        p = table1_params(sigma=0.4, lambda_risk=2.0)
        for t in np.linspace(0, 10, 7):
            q1, q2 = sz_general_inventory(t, p, 50.0, 50.0)
            assert q1 == pytest.approx(q2, rel=1e-14)

    def test_reduction_to_symmetric_closed_form(self, p):
        for t in range(11):
            q1, q2 = sz_general_inventory(float(t), p, 100.0, 100.0)
            expect = agg_nash_inventory(float(t), p)
            assert abs(q1 - expect) < 1e-12
            assert abs(q2 - expect) < 1e-12

    def test_extreme_arguments_stable(self):
        # huge risk aversion: nu*T far beyond the clamp must not overflow
        p = table1_params(sigma=50.0, lambda_risk=1e6)
        q1, q2 = sz_general_inventory(5.0, p, 100.0, 80.0)
        assert math.isfinite(q1) and math.isfinite(q2)


class TestAggNashGrid:
    def test_table1_first_trade(self, p):
        v = agg_nash_grid_schedule(p).trades
        # forward-difference oracle of the continuous inventory
        diff = [
            agg_nash_inventory(m, p) - agg_nash_inventory(m + 1.0, p) for m in range(10)
        ]
        assert np.allclose(v, diff, atol=1e-12)
        assert v[0] == pytest.approx(18.9266, abs=5e-4)

    def test_telescoping_sum(self, p):
        assert agg_nash_grid_schedule(p).trades.sum() == pytest.approx(100.0, abs=1e-12)

    def test_large_a_limit_is_twap(self):
        p = table1_params(a=1e6, sigma=0.0)
        v = agg_nash_grid_schedule(p).trades
        assert np.max(np.abs(v - 10.0)) < 1e-6


class TestContinuousIs:
    def test_table1_value(self, p):
        assert agg_nash_continuous_is(p) == pytest.approx(14.886, abs=5e-4)

    def test_quadrature_oracle(self, p):
        # independent evaluation: kappa*int u(t)*(int_0^t 2u) dt + a*int u*2u dt
        beta, q0, T = 1 / 6, 100.0, 10.0
        u = lambda t: agg_nash_rate(t, p)
        cum = lambda t: 2 * (q0 - agg_nash_inventory(t, p))
        perm, _ = quad(lambda t: u(t) * cum(t), 0, T, epsabs=1e-12, epsrel=1e-12)
        temp, _ = quad(lambda t: 2 * u(t) ** 2, 0, T, epsabs=1e-12, epsrel=1e-12)
        val = p.kappa * perm + p.a * temp
        assert agg_nash_continuous_is(p) == pytest.approx(val, rel=1e-8)

    def test_coth_limit(self):
        p = table1_params(horizon=1e7, n_slices=10, sigma=0.0)
        assert agg_nash_continuous_is(p) == pytest.approx(
            p.kappa * 100.0**2 * 4 / 3, rel=1e-9
        )

    def test_exceeds_continuous_twap_cost(self, p):
        rate = 100.0 / 10.0
        perm, _ = quad(lambda t: rate * (2 * rate * t), 0, 10.0)
        temp, _ = quad(lambda t: 2 * rate**2, 0, 10.0)
        twap_ct = p.kappa * perm + p.a * temp
        assert agg_nash_continuous_is(p) > twap_ct


class TestOwnNashGrid:
    def test_table1_values(self, p):
        eq = equilibrium_params(p)
        v = own_nash_grid_schedule(p).trades
        assert eq.Lambda == 4.5 and eq.rho == pytest.approx(7 / 9, rel=1e-15)
        # geometric-sum normalization oracle
        brute = 100.0 * np.array([eq.rho**m for m in range(10)])
        brute /= brute.sum()
        assert np.allclose(v, brute * 100.0, atol=1e-10)
        assert v[0] == pytest.approx(24.18, abs=5e-3)

    def test_geometric_ratio(self, p):
        v = own_nash_grid_schedule(p).trades
        assert np.allclose(v[:-1] / v[1:], 9 / 7, atol=1e-12)
        assert v.sum() == pytest.approx(100.0, abs=1e-12)

    def test_large_a_limit_is_twap(self):
        v = own_nash_grid_schedule(table1_params(a=1e6)).trades
        assert np.max(np.abs(v - 10.0)) < 1e-6

    def test_degenerate_ratio(self):
        with pytest.raises(DegenerateRatioError):
            own_nash_grid_schedule(table1_params(a=0.0002))

    def test_front_loading_order(self, p):
        v_own = own_nash_grid_schedule(p).trades[0]
        v_agg = agg_nash_grid_schedule(p).trades[0]
        assert v_own > v_agg > 10.0


class TestTwap:
    def test_schedule(self, p):
        assert np.array_equal(twap_schedule(p).trades, np.full(10, 10.0))
        p1 = table1_params(n_slices=1)
        assert np.array_equal(twap_schedule(p1).trades, [100.0])

    def test_closed_forms(self, p):
        assert twap_is_closed_form(p, "aggregate") == pytest.approx(13.0, abs=1e-12)
        assert twap_is_closed_form(p, "own") == pytest.approx(11.0, abs=1e-12)

    def test_zero_permanent_ratio_two(self):
        p = table1_params(kappa=1e-300)
        agg = twap_is_closed_form(p, "aggregate")
        own = twap_is_closed_form(p, "own")
        assert agg / own == pytest.approx(2.0, abs=1e-12)

    def test_matches_simulator(self, p):
        tw = twap_schedule(p)
        mean, _ = evaluate_schedule_is(p, [tw, tw])
        assert mean[0] == pytest.approx(13.0, abs=1e-9)
        mean, _ = evaluate_schedule_is(p.with_convention("own"), [tw, tw])
        assert mean[0] == pytest.approx(11.0, abs=1e-9)


class TestEvaluateScheduleIs:
    def test_benchmark_points(self, p):
        agg = agg_nash_grid_schedule(p)
        mean, std = evaluate_schedule_is(p, [agg, agg])
        assert std[0] == 0.0
        assert mean[0] == pytest.approx(quadratic_is_oracle(p, agg.trades, agg.trades), abs=1e-9)
        # golden value, cross-checked against the quadratic oracle above
        assert mean[0] == pytest.approx(13.655823950125196, abs=1e-9)

        own_env = p.with_convention("own")
        ow = own_nash_grid_schedule(own_env)
        mean, _ = evaluate_schedule_is(own_env, [ow, ow])
        assert mean[0] == pytest.approx(
            quadratic_is_oracle(own_env, ow.trades, ow.trades), abs=1e-9
        )
        assert mean[0] == pytest.approx(11.470387012925777, abs=1e-9)

    def test_vanishing_noise(self, p):
        noisy = table1_params(sigma=1e-9)
        tw = twap_schedule(p)
        mean, _ = evaluate_schedule_is(noisy, [tw, tw], n_episodes=16, seed=3)
        assert mean[0] == pytest.approx(13.0, abs=1e-6)

    def test_zero_episodes_rejected(self, p):
        with pytest.raises(ValueError):
            evaluate_schedule_is(p, [twap_schedule(p)] * 2, n_episodes=0)


class TestBestResponse:
    def test_quadratic_form_matches_simulator(self, p):
        rng = np.random.default_rng(0)
        for conv in ("aggregate", "own"):
            env = p.with_convention(conv)
            w = rng.dirichlet(np.ones(10)) * 100.0
            x = rng.dirichlet(np.ones(10)) * 100.0
            h, b = deterministic_is_quadratic(env, w)
            val = 0.5 * x @ h @ x + b @ x
            assert val == pytest.approx(quadratic_is_oracle(env, x, w), rel=1e-12)

    def test_own_nash_stationary_under_kernel_cost(self, p):
        own_env = p.with_convention("own")
        nash = own_nash_grid_schedule(own_env)
        br = best_response_schedule(own_env, nash, cost_model="kernel")
        assert np.max(np.abs(br.trades - nash.trades)) < 1e-6

    def test_simulator_cost_response_front_loads(self, p):
        # under the env's own pricing the geometric schedule is NOT stationary:
        # the response front-loads harder and strictly undercuts it
        own_env = p.with_convention("own")
        nash = own_nash_grid_schedule(own_env)
        br = best_response_schedule(own_env, nash, cost_model="simulator")
        assert br.trades[0] > nash.trades[0] + 5.0
        assert quadratic_is_oracle(own_env, br.trades, nash.trades) < quadratic_is_oracle(
            own_env, nash.trades, nash.trades
        ) - 0.01


class TestBenchmarkTable:
    def test_contents(self):
        table = benchmark_table(table1_params())
        assert table["beta_agg"] == pytest.approx(1 / 6, rel=1e-15)
        assert table["rho"] == pytest.approx(7 / 9, rel=1e-15)
        assert table["is_points"]["twap_agg"] == pytest.approx(13.0, abs=1e-9)
        assert table["is_points"]["twap_own"] == pytest.approx(11.0, abs=1e-9)
        assert table["is_points"]["agg_nash"] == pytest.approx(13.6558239501, abs=1e-8)
        assert table["is_points"]["own_nash"] == pytest.approx(11.4703870129, abs=1e-8)
        assert table["continuous_is"] == pytest.approx(14.886, abs=5e-4)
