import copy
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ebfield import scenario
from ebfield.errors import InvalidInputError, ScenarioValidationError, ToleranceError
from ebfield.estimator import Posterior
from ebfield.report import FIELD_COLUMNS, coverage_from_csv, emit_plotdata, read_csv
from ebfield.scenario import (PRESETS, HeatTruth, QuadraticTruth, ScenarioConfig, build_problem,
                              generate_spline_scenario, generate_temperature, monte_carlo,
                              noise_generator, run_pipeline, trial_metrics)


def custom(**changes):
    raw = copy.deepcopy(PRESETS["spline"])
    raw["scenario"] = "custom"
    raw.update(changes)
    return raw


class TestHeatTruth:
    truth = HeatTruth(6.0, 3.0, 3.0, 0.0, 2.0 * math.pi / 3.0, 3.0, 0.0)

    def test_boundary_values_exact(self):
        assert self.truth(0.0) == 3.0
        assert self.truth(2.0 * math.pi / 3.0) == 0.0

    def test_constants_from_boundary_conditions(self):
        # independent: solve C1 s + C0 = w - A sin(w s + phi) at both ends
        s1, sn = 0.0, 2.0 * math.pi / 3.0
        a = np.array([[s1, 1.0], [sn, 1.0]])
        b = np.array([3.0 - 6.0 * math.sin(3.0 * s1 + 3.0), 0.0 - 6.0 * math.sin(3.0 * sn + 3.0)])
        c1, c0 = np.linalg.solve(a, b)
        assert self.truth.c1 == pytest.approx(c1, abs=1e-14)
        assert self.truth.c0 == pytest.approx(c0, abs=1e-14)
        assert self.truth.c1 == pytest.approx(-1.43239, abs=1e-5)
        assert self.truth.c0 == pytest.approx(2.15328, abs=1e-5)

    def test_matches_constant_form(self):
        s = np.linspace(0.0, 2.0 * math.pi / 3.0, 50)
        t = self.truth
        np.testing.assert_allclose(t(s), 6.0 * np.sin(3.0 * s + 3.0) + t.c1 * s + t.c0, atol=1e-13)

    @settings(max_examples=50)
    @given(a=st.floats(0.1, 10), w=st.floats(0.1, 5), p=st.floats(-3, 3), s1=st.floats(-2, 0),
           width=st.floats(0.5, 4), w1=st.floats(-5, 5), wn=st.floats(-5, 5))
    def test_boundary_conditions_for_any_parameters(self, a, w, p, s1, width, w1, wn):
        t = HeatTruth(a, w, p, s1, s1 + width, w1, wn)
        for s, target in ((t.s1, w1), (t.sn, wn)):
            assert t(s) == pytest.approx(target, abs=1e-12)
            assert a * math.sin(w * s + p) + t.c1 * s + t.c0 == pytest.approx(target, abs=1e-9)

    def test_satisfies_differential_equation(self):
        s = np.linspace(0.2, 1.8, 9)
        h = 1e-4
        second = (self.truth(s + h) - 2 * self.truth(s) + self.truth(s - h)) / h ** 2
        np.testing.assert_allclose(second, -6.0 * 9.0 * np.sin(3.0 * s + 3.0), rtol=1e-5, atol=1e-5)


class TestQuadraticTruth:
    truth = QuadraticTruth(0.1, 0.1, 10.0)

    def test_values(self):
        assert self.truth(0.0) == 10.0
        assert self.truth(-15.0) == pytest.approx(31.0, abs=1e-12)


class TestGeneration:
    def test_same_seed_same_data(self):
        cfg = ScenarioConfig.preset("temperature", seed=11)
        a, _ = generate_temperature(cfg)
        b, _ = generate_temperature(cfg)
        assert a == b

    def test_different_seeds_differ(self):
        a, _ = generate_temperature(ScenarioConfig.preset("temperature", seed=1))
        b, _ = generate_temperature(ScenarioConfig.preset("temperature", seed=2))
        assert a != b

    def test_zero_noise_reproduces_truth(self):
        cfg = ScenarioConfig.preset("temperature", noise_variance=0.0)
        obs, truth = generate_temperature(cfg)
        for sensor in obs.sensors:
            assert set(sensor.observations) == {float(truth(sensor.location[0]))}

    def test_sample_counts(self):
        obs, _ = generate_spline_scenario(ScenarioConfig.preset("spline"))
        assert obs.counts.tolist() == scenario.SPLINE_SAMPLES
        assert obs.n == 12

    def test_noise_statistics(self):
        z = noise_generator(0).standard_normal(200_000)
        assert abs(z.mean()) < 0.01 and abs(z.std() - 1.0) < 0.01

    def test_temperature_needs_three_sensors(self):
        cfg = ScenarioConfig.preset("temperature", locations={"uniform": [0.0, 1.0], "count": 2})
        with pytest.raises(InvalidInputError):
            generate_temperature(cfg)

    def test_knot_indices_checked(self):
        cfg = ScenarioConfig.preset("spline", dynamics={"kind": "spline", "knots": [1, 13],
                                                        "init": None})
        with pytest.raises(InvalidInputError):
            generate_spline_scenario(cfg)

    def test_default_spline_knots(self):
        problem = build_problem(ScenarioConfig.preset("spline"))
        s = np.array(scenario.SPLINE_LOCATIONS)
        np.testing.assert_array_equal(problem.dynamics.knots, s[[0, 2, 4, 6, 11]])


class TestConfig:
    def test_round_trip_idempotent(self):
        for name in PRESETS:
            text = ScenarioConfig.preset(name).dumps()
            assert ScenarioConfig.loads(text).dumps() == text

    @settings(max_examples=25)
    @given(seed=st.integers(0, 2 ** 40), noise=st.floats(1e-4, 10.0), count=st.integers(3, 40))
    def test_round_trip_property(self, seed, noise, count):
        cfg = ScenarioConfig.preset("temperature", seed=seed, noise_variance=noise,
                                    locations={"uniform": [0.0, 2.0], "count": count})
        again = ScenarioConfig.loads(cfg.dumps())
        assert again == cfg and again.dumps() == cfg.dumps()

    @pytest.mark.parametrize("raw", [
        {"scenario": "temperature", "seed": 0, "colour": 1},
        {"scenario": "temperature", "seed": 0, "kernel": {"signal_variance": 1.0, "nugget": 0.1}},
        {"scenario": "temperature", "seed": 0, "solver": {"tolerance": 1.0}},
        {"scenario": "temperature", "seed": 0, "truth": {"family": "heat", "B": 1.0}},
    ])
    def test_unknown_keys_rejected(self, raw):
        with pytest.raises(InvalidInputError, match="unknown|bad solver"):
            ScenarioConfig.from_dict(raw)

    def test_seed_mandatory(self):
        with pytest.raises(InvalidInputError, match="seed"):
            ScenarioConfig.from_dict({"scenario": "temperature"})

    def test_seed_must_be_integer(self):
        with pytest.raises(InvalidInputError):
            ScenarioConfig.from_dict({"scenario": "temperature", "seed": 1.5})

    def test_unknown_scenario_kind(self):
        with pytest.raises(InvalidInputError):
            ScenarioConfig.from_dict({"scenario": "ocean", "seed": 0})

    def test_custom_needs_every_field(self):
        with pytest.raises(InvalidInputError, match="missing"):
            ScenarioConfig.from_dict({"scenario": "custom", "seed": 0})

    def test_invalid_json(self):
        with pytest.raises(InvalidInputError):
            ScenarioConfig.loads("{not json")

    def test_partial_override_keeps_preset_values(self):
        cfg = ScenarioConfig.from_dict({"scenario": "temperature", "seed": 3,
                                        "kernel": {"signal_variance": 2.0}})
        assert cfg.kernel == {"signal_variance": 2.0, "support_length": None}

    def test_default_support_is_twice_max_spacing(self):
        cfg = ScenarioConfig.preset("spline")
        assert cfg.build_kernel(cfg.sensor_locations()).support_length == 12.0

    def test_duplicate_locations_fail_validation(self):
        locs = list(scenario.SPLINE_LOCATIONS)
        locs[1] = locs[0]
        cfg = ScenarioConfig.from_dict(custom(locations={"explicit": locs}))
        with pytest.raises(ScenarioValidationError) as info:
            build_problem(cfg)
        assert "sensors 1 and 2" in str(info.value)


class TestMetrics:
    def test_truth_as_mean_gives_zero_rmse(self):
        truth = np.array([1.0, 2.0, 3.0])
        post = Posterior.from_moments(truth, np.eye(3) * 0.01)
        m = trial_metrics(truth, truth + 0.5, post)
        assert m.rmse_map == 0.0 and m.rmse_prior == pytest.approx(0.5)
        assert m.coverage95 == 1.0

    def test_gamma_error(self):
        post = Posterior.from_moments([0.0], [[1.0]])
        m = trial_metrics([0.0], [0.0], post, gamma=[5.7, 3.0], true_gamma=np.array([6.0, 3.0]))
        assert m.gamma_error == pytest.approx((0.05, 0.0))


class TestPipeline:
    @pytest.mark.parametrize("name", ["temperature", "spline"])
    def test_centralized(self, name):
        res = run_pipeline(ScenarioConfig.preset(name))
        assert 0.0 <= res.metrics.coverage95 <= 1.0
        assert res.metrics.rmse_map >= 0.0
        assert res.posterior.mean.shape == (res.problem.grid.m,)
        assert res.trace is None

    def test_distributed_reports_comparison(self):
        res = run_pipeline(ScenarioConfig.preset("spline"), "distributed")
        assert res.trace.total_messages > 0
        assert all(v for k, v in res.comparison.items() if k.endswith("_ok"))

    def test_distributed_tolerance_enforced(self, monkeypatch):
        monkeypatch.setattr(scenario, "LOCAL_MAP_ATOL", -1.0)
        with pytest.raises(ToleranceError):
            run_pipeline(ScenarioConfig.preset("spline"), "distributed")

    def test_bad_mode(self):
        with pytest.raises(InvalidInputError):
            run_pipeline(ScenarioConfig.preset("spline"), "federated")

    def test_temperature_gamma_error_within_five_percent(self):
        res = run_pipeline(ScenarioConfig.preset("temperature", seed=4))
        assert max(res.metrics.gamma_error) <= 0.05


class TestMonteCarlo:
    def test_single_trial_equals_pipeline(self):
        cfg = ScenarioConfig.preset("spline", seed=7)
        rep = monte_carlo(cfg, 1)
        single = run_pipeline(cfg).metrics
        assert rep["rmse_map"]["mean"] == single.rmse_map
        assert rep["coverage95"]["mean"] == single.coverage95
        assert rep["pooled_coverage95"] == single.coverage95
        assert rep["rmse_map"]["std"] == 0.0

    def test_deterministic(self):
        cfg = ScenarioConfig.preset("temperature")
        assert json.dumps(monte_carlo(cfg, 3)) == json.dumps(monte_carlo(cfg, 3))

    def test_needs_a_trial(self):
        with pytest.raises(InvalidInputError):
            monte_carlo(ScenarioConfig.preset("spline"), 0)


class TestPlotData:
    def test_files_round_trip(self, tmp_path):
        res = run_pipeline(ScenarioConfig.preset("temperature"))
        files = emit_plotdata(res, tmp_path)
        header, rows = read_csv(files["field"])
        assert tuple(header) == FIELD_COLUMNS
        assert len(rows) == res.problem.grid.m
        table = np.array(rows)
        np.testing.assert_array_equal(table[:, 3], res.posterior.mean)
        np.testing.assert_array_equal(table[:, 4], res.posterior.lower95)
        np.testing.assert_array_equal(table[:, 2], res.prior_mean)
        assert np.all(table[:, 4] <= table[:, 3]) and np.all(table[:, 3] <= table[:, 5])
        assert coverage_from_csv(files["field"]) == res.metrics.coverage95

    def test_points_long_format(self, tmp_path):
        res = run_pipeline(ScenarioConfig.preset("spline"))
        header, rows = read_csv(emit_plotdata(res, tmp_path)["points"])
        assert header == ["sensor", "s", "xbar", "L", "observation"]
        assert len(rows) == sum(scenario.SPLINE_SAMPLES)
        by_sensor = {}
        for sensor, _, xbar, count, x in rows:
            by_sensor.setdefault(sensor, []).append(x)
            assert len([r for r in rows if r[0] == sensor]) == count
        for k, xs in by_sensor.items():
            assert np.mean(xs) == pytest.approx(res.problem.system.xbar[int(k) - 1], rel=1e-14)

    def test_unwritable_path(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        res = run_pipeline(ScenarioConfig.preset("spline"))
        with pytest.raises(InvalidInputError):
            emit_plotdata(res, blocker / "sub")
