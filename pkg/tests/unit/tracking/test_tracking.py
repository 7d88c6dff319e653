"""Unit tests for tracking.py: filters, partition fitting, measurement and the daily loop."""

import numpy as np
import pytest
from pydantic import ValidationError

from errors import ConfigurationError, DimensionError
from hull import reduce_class
from tracking import (
    TRACKING_COLUMNS,
    Disturbance,
    DisturbanceKind,
    MeasurementModel,
    PartitionWeights,
    TrackingState,
    estimate_actual,
    filter_coefficients,
    fit_partition,
    initial_state,
    relative_model_error,
    response_matrix_from_classes,
    rotating_reference,
    run_adaptation,
    simulate_measurement,
    tracking_frame,
    tracking_plot_data,
)

pytestmark = pytest.mark.tracking


@pytest.fixture
def Y():
    return np.random.default_rng(5).normal(size=(3, 24)) * 100.0


def fixed_point_state(z_bar, lam_bar, tau=7.0):
    z_bar = np.atleast_2d(z_bar)
    lam_bar = np.atleast_1d(lam_bar)
    return TrackingState(
        z_filt=z_bar,
        lam_filt=lam_bar,
        z_prev=z_bar,
        lam_prev=lam_bar,
        y_hat=z_bar / lam_bar[:, None],
        tau_adapt=tau,
    )


class TestFilter:
    def test_coefficients(self):
        a, b = filter_coefficients(7.0)
        assert a == pytest.approx(13 / 15)
        assert b == pytest.approx(1 / 15)
        assert a + 2 * b == pytest.approx(1.0)

    def test_rejects_non_positive_time_constant(self):
        with pytest.raises(ValueError):
            filter_coefficients(0.0)

    def test_unit_dc_gain(self):
        z_bar = np.array([[3.0, -1.5, 0.25]])
        state = fixed_point_state(z_bar, 0.4)
        for _ in range(50):
            state = state.step(z_bar, [0.4])
        np.testing.assert_allclose(state.z_filt, z_bar, rtol=1e-12)
        np.testing.assert_allclose(state.lam_filt, [0.4], rtol=1e-12)

    def test_step_response(self):
        a, b = filter_coefficients(7.0)
        state = initial_state(np.zeros((1, 1)), tau=7.0)
        outputs, expected, prev_out, prev_in = [], [], 0.0, 0.0
        for _ in range(10):
            state = state.step([[1.0]], [1.0])
            outputs.append(float(state.z_filt[0, 0]))
            prev_out = a * prev_out + b * (1.0 + prev_in)
            prev_in = 1.0
            expected.append(prev_out)
        np.testing.assert_allclose(outputs, expected, rtol=1e-12)
        assert np.all(np.diff(outputs) > 0)
        assert outputs[6] == pytest.approx(0.6045, abs=1e-4)
        first_above = next(day for day, f in enumerate(outputs) if f >= 0.63)
        assert 6 <= first_above <= 8

    def test_very_slow_filter_stays_put(self):
        state = initial_state(np.zeros((1, 2)), tau=1e9)
        for _ in range(100):
            state = state.step([[5.0, -5.0]], [1.0])
        assert np.abs(state.z_filt).max() < 1e-5

    def test_state_is_immutable(self):
        state = initial_state(np.ones((2, 3)), tau=7.0)
        nxt = state.step(np.ones((2, 3)), [0.5, 0.5])
        assert state.day_index == 0
        assert nxt.day_index == 1
        np.testing.assert_array_equal(state.z_filt, 0.0)

    def test_step_shape_check(self):
        state = initial_state(np.ones((2, 3)), tau=7.0)
        with pytest.raises(DimensionError):
            state.step(np.ones((3, 3)), [0.5, 0.5])

    def test_sampling_period_is_one_day(self):
        with pytest.raises(ValidationError):
            initial_state(np.ones((1, 3)), tau=7.0, t_s=0.5)


class TestEstimateActual:
    def test_ratio_of_filters(self):
        state = fixed_point_state(np.array([[2.0, 4.0], [1.0, 1.0]]), [0.5, 0.25])
        np.testing.assert_allclose(estimate_actual(state).Y, [[4.0, 8.0], [4.0, 4.0]])

    def test_row_below_floor_is_untouched(self):
        state = TrackingState(
            z_filt=[[2.0, 4.0], [9.0, 9.0]],
            lam_filt=[0.5, 0.0],
            z_prev=[[2.0, 4.0], [0.0, 0.0]],
            lam_prev=[0.5, 0.0],
            y_hat=[[1.0, 1.0], [7.0, -7.0]],
        )
        estimate = estimate_actual(state).Y
        np.testing.assert_allclose(estimate[0], [4.0, 8.0])
        np.testing.assert_array_equal(estimate[1], [7.0, -7.0])

    def test_identical_filters_cancel(self):
        z = np.array([[3.0, -2.0, 0.5]])
        state = initial_state(np.zeros((1, 3)), tau=7.0).step(z, [1.0])
        np.testing.assert_allclose(estimate_actual(state).Y, z, rtol=1e-12)

    def test_constant_weights_recover_the_true_response(self, Y):
        state = initial_state(Y * 1.5, tau=7.0)
        for _ in range(70):
            state = state.step(0.5 * Y, [0.5, 0.5, 0.5])
        np.testing.assert_allclose(estimate_actual(state).Y, Y, rtol=1e-3)


class TestFitPartition:
    def test_row_of_the_model_is_reproduced(self, Y):
        weights = fit_partition(Y, Y[1])
        np.testing.assert_allclose(weights.lambdas, [0.0, 1.0, 0.0], atol=1e-8)
        assert weights.residual_kw <= 1e-6 * np.linalg.norm(Y[1])

    def test_zero_reference(self, Y):
        weights = fit_partition(Y, np.zeros(24))
        np.testing.assert_allclose(weights.lambdas, 0.0, atol=1e-12)
        assert not weights.measured.any()

    def test_orthogonal_rows_separate(self):
        rows = np.zeros((2, 6))
        rows[0, ::2] = 1.0
        rows[1, 1::2] = 2.0
        weights = fit_partition(rows, 0.3 * rows[0] + 0.4 * rows[1])
        np.testing.assert_allclose(weights.lambdas, [0.3, 0.4], atol=1e-9)

    @pytest.mark.parametrize("seed", range(5))
    def test_weights_stay_on_the_simplex(self, Y, seed):
        ref = np.random.default_rng(seed).normal(size=24) * 300.0
        weights = fit_partition(Y, ref)
        assert np.all(weights.lambdas >= 0)
        assert weights.lambdas.sum() <= 1 + 1e-9
        assert weights.kkt.worst <= 1e-8

    def test_unconstrained_fit_flags_rank_deficiency(self, Y):
        doubled = np.vstack([Y[0], Y[0], Y[1]])
        weights = fit_partition(doubled, 0.5 * Y[0] + 0.2 * Y[1], simplex=False)
        assert weights.rank_deficient
        np.testing.assert_allclose(weights.lambdas, [0.25, 0.25, 0.2], atol=1e-9)

    def test_unconstrained_fit_may_leave_the_simplex(self, Y):
        weights = fit_partition(Y, 2.0 * Y[0] - Y[2], simplex=False)
        np.testing.assert_allclose(weights.lambdas, [2.0, 0.0, -1.0], atol=1e-9)
        assert not weights.simplex

    def test_reference_length_mismatch(self, Y):
        with pytest.raises(DimensionError):
            fit_partition(Y, np.zeros(12))

    def test_simplex_weights_are_validated(self):
        with pytest.raises(ValidationError):
            PartitionWeights(lambdas=[0.7, 0.7])


class TestSimulateMeasurement:
    def test_noiseless(self, Y):
        weights = PartitionWeights(lambdas=[0.2, 0.3, 0.5])
        z = simulate_measurement(Y, weights, MeasurementModel(epsilon_rel=0.0), day=4)
        np.testing.assert_array_equal(z, np.array([0.2, 0.3, 0.5])[:, None] * Y)

    def test_undispatched_partitions_are_not_measured(self, Y):
        weights = PartitionWeights(lambdas=[0.0, 0.6, 0.4])
        z = simulate_measurement(Y, weights, MeasurementModel(), day=0)
        np.testing.assert_array_equal(z[0], 0.0)
        assert np.all(z[1] != 0.0)

    def test_noise_depends_only_on_seed_and_day(self, Y):
        weights = PartitionWeights(lambdas=[0.2, 0.3, 0.5])
        model = MeasurementModel(seed=9)
        a = simulate_measurement(Y, weights, model, day=3)
        b = simulate_measurement(Y, weights, model, day=3)
        c = simulate_measurement(Y, weights, model, day=4)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_noise_is_centred(self):
        Y = np.array([[10.0, -20.0, 5.0]])
        weights = PartitionWeights(lambdas=[0.5])
        model = MeasurementModel(epsilon_rel=0.02, seed=1)
        draws = 10_000
        eps = np.array(
            [simulate_measurement(Y, weights, model, day) - 0.5 * Y for day in range(draws)]
        )
        sd = 0.02 * np.sqrt(np.mean(Y * Y))
        assert np.std(eps) == pytest.approx(sd, rel=0.05)
        assert abs(eps.mean()) <= 3 * sd / np.sqrt(eps.size)
        assert np.all(np.abs(eps.mean(axis=0)) <= 4 * sd / np.sqrt(draws))


class TestReferencesAndResponse:
    def test_rotating_reference_is_reachable(self, Y):
        refs = rotating_reference(Y, days=6, perturbation=0.0)
        assert refs.shape == (6, 24)
        for day, ref in enumerate(refs):
            weights = fit_partition(Y, ref)
            expected = np.full(3, 0.9 * 0.2)
            expected[day % 3] += 0.9 * 0.4
            np.testing.assert_allclose(weights.lambdas, expected, atol=1e-8)

    def test_rotating_reference_is_seeded(self, Y):
        np.testing.assert_array_equal(
            rotating_reference(Y, 5, seed=2), rotating_reference(Y, 5, seed=2)
        )

    def test_rejects_scale_outside_unit_interval(self, Y):
        with pytest.raises(ConfigurationError):
            rotating_reference(Y, 5, scale=1.5)

    def test_response_matrix_from_classes(self, synthetic_fleet):
        reduced = [reduce_class(der)[0] for der in synthetic_fleet]
        response = response_matrix_from_classes(reduced, max_partitions=3)
        assert response.Y.shape == (3, 24)
        assert len(response.labels) == 3
        assert not any(label.endswith("-null") for label in response.labels)
        assert np.all(np.abs(response.Y).sum(axis=1) > 0)

    def test_response_matrix_needs_dispatchable_sequences(self, triangle_class):
        null_only = triangle_class.model_copy(update={"pairs": triangle_class.pairs[:1]})
        with pytest.raises(ConfigurationError):
            response_matrix_from_classes([null_only])


class TestDisturbance:
    def test_permute_rotates_rows(self, Y):
        moved = Disturbance(day=3).apply(Y)
        np.testing.assert_array_equal(moved, Y[[2, 0, 1]])

    def test_replace_needs_new_response(self):
        with pytest.raises(ValidationError):
            Disturbance(day=3, kind=DisturbanceKind.REPLACE)

    def test_replace_shape_check(self, Y):
        disturbance = Disturbance(day=1, kind="replace", new_Y=np.ones((2, 24)))
        with pytest.raises(DimensionError):
            disturbance.apply(Y)


class TestRelativeModelError:
    def test_scaled_by_true_response(self, Y):
        assert relative_model_error(1.1 * Y, Y) == pytest.approx(0.1)

    def test_all_zero_truth(self):
        zeros = np.zeros((3, 24))
        assert relative_model_error(zeros, zeros) == 0.0
        assert relative_model_error(np.ones((3, 24)), zeros) == float("inf")


class TestRunAdaptation:
    def test_self_consistent_loop_tracks_exactly(self, Y):
        refs = rotating_reference(Y, 20, perturbation=0.0)
        log = run_adaptation(Y, refs, 20, model=MeasurementModel(epsilon_rel=0.0))
        scale = np.sqrt(np.mean(Y * Y))
        assert log.series("tracking_rmse_kw").max() <= 1e-8 * scale
        assert log.series("model_error_rel").max() <= 1e-10

    def test_wrong_model_is_corrected(self, Y):
        refs = rotating_reference(Y, 30, perturbation=0.0)
        wrong = Y * np.array([[1.05], [0.95], [1.02]])
        log = run_adaptation(
            wrong, refs, 30, model=MeasurementModel(epsilon_rel=0.0), Y_true=Y
        )
        assert log.records[-1].model_error_rel <= 1e-8

    def test_null_disturbance_changes_nothing(self, Y):
        refs = rotating_reference(Y, 15, seed=3)
        model = MeasurementModel(seed=4)
        plain = run_adaptation(Y, refs, 15, model=model)
        same = run_adaptation(
            Y, refs, 15, model=model, disturbance=Disturbance(day=5, kind="replace", new_Y=Y)
        )
        for field in ("tracking_rmse_kw", "model_error_rel", "min_lam_filt"):
            np.testing.assert_array_equal(plain.series(field), same.series(field))
        np.testing.assert_array_equal(plain.final_state.y_hat, same.final_state.y_hat)

    def test_disturbance_outside_horizon(self, Y):
        refs = rotating_reference(Y, 5)
        with pytest.raises(ConfigurationError):
            run_adaptation(Y, refs, 5, disturbance=Disturbance(day=5))

    def test_reference_count_must_match_days(self, Y):
        with pytest.raises(DimensionError):
            run_adaptation(Y, rotating_reference(Y, 4), 5)

    def test_recovers_from_a_major_disturbance(self, Y):
        days, tau, day = 60, 7.0, 30
        refs = rotating_reference(Y, days, seed=1)
        log = run_adaptation(
            Y,
            refs,
            days,
            tau=tau,
            disturbance=Disturbance(day=day),
            model=MeasurementModel(epsilon_rel=0.02, seed=3),
        )
        error = log.series("model_error_rel")
        rmse = log.series("tracking_rmse_kw")
        assert int(np.argmax(error)) == day
        assert error[day] > 5 * error[day - 1]
        assert error[day + 21] < 0.1 * error[day]
        assert rmse[day + 21] <= 2 * rmse[day - 1]
        assert log.metadata["disturbance_kind"] == "permute"
        assert not log.records[day - 1].disturbed and log.records[day].disturbed

    def test_same_inputs_same_log(self, Y):
        refs = rotating_reference(Y, 12, seed=2)
        kwargs = dict(disturbance=Disturbance(day=6), model=MeasurementModel(seed=8))
        assert run_adaptation(Y, refs, 12, **kwargs).records == run_adaptation(
            Y, refs, 12, **kwargs
        ).records

    def test_frames(self, Y):
        log = run_adaptation(Y, rotating_reference(Y, 8), 8)
        frame = tracking_frame(log)
        assert list(frame.columns) == TRACKING_COLUMNS
        assert len(frame) == 8
        data = tracking_plot_data(log)
        assert data["days"] == list(range(8))
        assert set(data["series"]) == {"tracking_rmse_kw", "model_error_rel"}
