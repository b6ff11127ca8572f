"""field_sim のテスト"""
import math
import time

import numpy as np
import pytest

from src.model_core import ModelParams, SamplingGrid, derive_spectrum, eigfun
from src.field_sim import (
    CoordinateBlock,
    FieldSimError,
    FoldedRequiresUniformGrid,
    RngStreamSpec,
    SlabSynthesizer,
    TruncationSpec,
    UnstableSchemeWarning,
    field_variance,
    ou_step_em,
    ou_step_exact,
    simulate_coordinates,
    simulate_field,
    simulate_fields,
    stationary_variance,
    synthesize_field,
)

TRUTH = ModelParams(theta0=0.0, theta1=0.2, eta1=0.2, theta2=0.2, sigma=1.0, alpha=0.5)
LAM11 = 4.04784176


class TestOUSteps:
    def test_exact_deterministic_decay(self):
        assert ou_step_exact(1.0, 1.0, 0.0, math.log(2), 0.0) == pytest.approx(0.5)

    def test_exact_transition_sd(self):
        noise_sd = LAM11 ** -0.25
        sd = ou_step_exact(0.0, LAM11, noise_sd, 0.001, 1.0)
        assert sd == pytest.approx(noise_sd * math.sqrt(-math.expm1(-2 * LAM11 * 0.001) / (2 * LAM11)), rel=1e-14)
        assert sd == pytest.approx(0.02227, abs=5e-5)

    def test_exact_small_dt_has_vanishing_variance(self):
        assert abs(ou_step_exact(0.0, 3.0, 1.0, 1e-12, 1.0)) < 1e-5

    def test_em_step(self):
        assert ou_step_em(1.0, LAM11, 1.0, 0.001, 0.0) == pytest.approx(0.99595216, abs=1e-8)
        assert ou_step_em(5.0, 10.0, 0.0, 0.1, 0.3) == 0.0

    def test_em_unstable_warning(self):
        with pytest.warns(UnstableSchemeWarning):
            ou_step_em(1.0, 100.0, 1.0, 0.02, 0.0)

    def test_em_matches_exact_mean_to_second_order(self):
        dt, lam = 1e-4, 1.0
        assert abs(ou_step_exact(1.0, lam, 0.0, dt, 0.0) - ou_step_em(1.0, lam, 0.0, dt, 0.0)) < 1e-8

    def test_exact_moments_monte_carlo(self):
        rng = np.random.default_rng(12345)
        draws = 100_000
        x0, lam, noise_sd, dt = 0.7, LAM11, LAM11 ** -0.25, 0.01
        samples = ou_step_exact(x0, lam, noise_sd, dt, rng.standard_normal(draws))

        mean = math.exp(-lam * dt) * x0
        var = noise_sd ** 2 * (1 - math.exp(-2 * lam * dt)) / (2 * lam)
        assert abs(samples.mean() - mean) < 4 * math.sqrt(var / draws)
        assert abs(samples.var(ddof=1) - var) < 4 * var * math.sqrt(2 / (draws - 1))

    def test_em_weak_error_order(self):
        # 同じ乱数で厳密遷移と並走させ、E[x_T²] の偏りを dt に回帰
        lam, noise_sd, x0, paths = 1.0, 1.0, 1.0, 100_000
        dts, biases = [], []
        for steps in (10, 20, 40, 80):
            dt = 1.0 / steps
            rng = np.random.default_rng(steps)
            x_em = np.full(paths, x0)
            x_exact = np.full(paths, x0)
            for _ in range(steps):
                gauss = rng.standard_normal(paths)
                x_em = ou_step_em(x_em, lam, noise_sd, dt, gauss)
                x_exact = ou_step_exact(x_exact, lam, noise_sd, dt, gauss)
            bias = float(np.mean(x_em ** 2 - x_exact ** 2))

            decay = (1 - lam * dt) ** (2 * steps)
            m2_em = decay * x0 ** 2 + noise_sd ** 2 * dt * (1 - decay) / (1 - (1 - lam * dt) ** 2)
            m2_exact = math.exp(-2 * lam) * x0 ** 2 + noise_sd ** 2 * -math.expm1(-2 * lam) / (2 * lam)
            assert bias == pytest.approx(m2_em - m2_exact, rel=0.1)
            dts.append(dt)
            biases.append(bias)

        slope = np.polyfit(np.log(dts), np.log(biases), 1)[0]
        assert 0.9 < slope < 1.2


class TestSimulateCoordinates:
    def test_zero_sigma_gives_zero_paths(self):
        params = ModelParams(theta0=0.0, theta1=0.2, eta1=0.2, theta2=0.2, sigma=0.0, alpha=0.5)
        blocks = list(simulate_coordinates(params, TruncationSpec(4, 3), 5, seed=1))
        assert [b.t_index for b in blocks] == list(range(6))
        assert all(not b.values.any() for b in blocks)

    def test_blocks_are_read_only(self):
        block = next(iter(simulate_coordinates(TRUTH, TruncationSpec(2, 2), 3, seed=1)))
        with pytest.raises(ValueError):
            block.values[0, 0] = 1.0

    def test_thread_count_does_not_change_output(self):
        trunc = TruncationSpec(9, 5)
        single = [b.values for b in simulate_coordinates(TRUTH, trunc, 6, seed=7, threads=1)]
        multi = [b.values for b in simulate_coordinates(TRUTH, trunc, 6, seed=7, threads=4)]
        assert all(np.array_equal(a, b) for a, b in zip(single, multi))

    def test_seeds_differ(self):
        trunc = TruncationSpec(3, 3)
        a = list(simulate_coordinates(TRUTH, trunc, 2, seed=1))[-1].values
        b = list(simulate_coordinates(TRUTH, trunc, 2, seed=2))[-1].values
        assert not np.array_equal(a, b)

    def test_initial_block_from_x0(self):
        x0 = np.arange(6, dtype=float).reshape(2, 3)
        first = next(iter(simulate_coordinates(TRUTH, TruncationSpec(2, 3), 4, x0=x0)))
        assert np.array_equal(first.values, x0)

    def test_x0_shape_checked(self):
        with pytest.raises(FieldSimError):
            list(simulate_coordinates(TRUTH, TruncationSpec(2, 3), 4, x0=np.zeros((3, 3))))

    def test_em_scheme_warns_when_unstable(self):
        with pytest.warns(UnstableSchemeWarning):
            list(simulate_coordinates(TRUTH, TruncationSpec(30, 30), 4, scheme="em"))

    def test_variance_at_time_one(self):
        reps = 2000
        finals = np.array([
            list(simulate_coordinates(TRUTH, TruncationSpec(1, 1), 10, seed=s))[-1].values[0, 0]
            for s in range(reps)
        ])
        var = LAM11 ** -0.5 * (1 - math.exp(-2 * LAM11)) / (2 * LAM11)
        assert abs(finals.var(ddof=1) - var) < 4 * var * math.sqrt(2 / (reps - 1))

    def test_stationary_start_stays_stationary(self):
        trunc = TruncationSpec(2, 2)
        var = np.array([[stationary_variance(TRUTH, l1, l2) for l2 in (1, 2)] for l1 in (1, 2)])
        assert var[0, 0] == pytest.approx(LAM11 ** -0.5 / (2 * LAM11), rel=1e-8)

        reps = 2000
        rng = np.random.default_rng(99)
        finals = np.array([
            list(simulate_coordinates(
                TRUTH, trunc, 10, seed=s, x0=np.sqrt(var) * rng.standard_normal((2, 2))
            ))[-1].values
            for s in range(reps)
        ])
        sample = finals.var(axis=0, ddof=1)
        assert np.all(np.abs(sample - var) < 4 * var * math.sqrt(2 / (reps - 1)))

    def test_row_streams_independent_of_each_other(self):
        streams = RngStreamSpec(42)
        a = streams.row_generator(1).standard_normal(5)
        b = streams.row_generator(2).standard_normal(5)
        assert not np.array_equal(a, b)
        assert np.array_equal(a, RngStreamSpec(42).row_generator(1).standard_normal(5))


class TestSynthesis:
    def test_single_mode(self):
        spec = derive_spectrum(TRUTH)
        grid = SamplingGrid(2, 8, 8)
        coeffs = np.zeros((4, 4))
        coeffs[0, 0] = 1.0
        slab = SlabSynthesizer(spec, TruncationSpec(4, 4), grid.y_nodes(), grid.z_nodes(), "naive")(coeffs)
        y, z = np.meshgrid(grid.y_nodes(), grid.z_nodes(), indexing="ij")
        assert slab == pytest.approx(eigfun(spec, 1, 1, y, z), abs=1e-14)

    @pytest.mark.parametrize("mode", ["naive", "folded"])
    def test_boundary_exactly_zero(self, mode):
        spec = derive_spectrum(TRUTH)
        grid = SamplingGrid(2, 16, 16)
        coeffs = np.random.default_rng(3).standard_normal((64, 64))
        slab = SlabSynthesizer(spec, TruncationSpec(64, 64), grid.y_nodes(), grid.z_nodes(), mode)(coeffs)
        assert np.all(slab[0, :] == 0.0) and np.all(slab[-1, :] == 0.0)
        assert np.all(slab[:, 0] == 0.0) and np.all(slab[:, -1] == 0.0)

    @pytest.mark.parametrize("l, m", [(64, 16), (256, 32), (20, 16), (100, 7)])
    def test_folded_matches_naive(self, l, m):
        params = ModelParams(theta0=0.5, theta1=0.6, eta1=-0.4, theta2=0.3, sigma=1.0, alpha=0.7)
        spec = derive_spectrum(params)
        grid = SamplingGrid(2, m, m)
        trunc = TruncationSpec(l, l)
        coeffs = np.random.default_rng(l + m).standard_normal((l, l))
        naive = SlabSynthesizer(spec, trunc, grid.y_nodes(), grid.z_nodes(), "naive")(coeffs)
        folded = SlabSynthesizer(spec, trunc, grid.y_nodes(), grid.z_nodes(), "folded")(coeffs)
        assert np.max(np.abs(naive - folded)) < 1e-9

    def test_folded_requires_uniform_grid(self):
        spec = derive_spectrum(TRUTH)
        grid = SamplingGrid.shifted(10, 0.01, 50)
        with pytest.raises(FoldedRequiresUniformGrid):
            SlabSynthesizer(spec, TruncationSpec(200, 200), grid.y_nodes(), grid.z_nodes(), "folded")

    def test_auto_mode_selection(self):
        spec = derive_spectrum(TRUTH)
        uniform = SamplingGrid(2, 10, 10)
        shifted = SamplingGrid.shifted(2, 0.01, 10)
        big = TruncationSpec(50, 50)
        assert SlabSynthesizer(spec, big, uniform.y_nodes(), uniform.z_nodes()).mode.value == "folded"
        assert SlabSynthesizer(spec, big, shifted.y_nodes(), shifted.z_nodes()).mode.value == "naive"
        small = TruncationSpec(10, 10)
        assert SlabSynthesizer(spec, small, uniform.y_nodes(), uniform.z_nodes()).mode.value == "naive"

    def test_synthesize_field_from_blocks(self):
        spec = derive_spectrum(TRUTH)
        grid = SamplingGrid(2, 4, 4)
        coeffs = np.zeros((2, 2))
        coeffs[1, 0] = 2.0
        blocks = [CoordinateBlock(i, coeffs * i) for i in range(3)]
        record = synthesize_field(blocks, spec, grid, mode="naive", seed=5)
        y, z = np.meshgrid(grid.y_nodes(), grid.z_nodes(), indexing="ij")
        assert record.values[2] == pytest.approx(4.0 * eigfun(spec, 2, 1, y, z), abs=1e-13)
        assert record.seed == 5

    def test_synthesize_field_checks_block_count(self):
        spec = derive_spectrum(TRUTH)
        blocks = [CoordinateBlock(0, np.zeros((2, 2)))]
        with pytest.raises(FieldSimError):
            synthesize_field(blocks, spec, SamplingGrid(2, 4, 4))


class TestSimulateField:
    def test_zero_sigma_zero_field(self):
        params = ModelParams(theta0=0.0, theta1=0.2, eta1=0.2, theta2=0.2, sigma=0.0, alpha=0.5)
        record = simulate_field(params, TruncationSpec(8, 8), SamplingGrid(4, 6, 6), seed=3)
        assert not record.values.any()
        assert record.values.shape == (5, 7, 7)

    def test_deterministic(self):
        grid = SamplingGrid(4, 6, 6)
        a = simulate_field(TRUTH, TruncationSpec(8, 8), grid, seed=11)
        b = simulate_field(TRUTH, TruncationSpec(8, 8), grid, seed=11, threads=3)
        assert np.array_equal(a.values, b.values)

    def test_multi_grid_shares_one_path(self):
        grids = {"fine": SamplingGrid(8, 8, 8), "coarse": SamplingGrid(4, 4, 4)}
        records = simulate_fields(TRUTH, TruncationSpec(12, 12), grids, seed=9)
        fine, coarse = records["fine"].values, records["coarse"].values
        assert coarse == pytest.approx(fine[::2, ::2, ::2], abs=1e-12)

    def test_multi_grid_matches_single_grid(self):
        grid = SamplingGrid(4, 5, 5)
        single = simulate_field(TRUTH, TruncationSpec(6, 6), grid, seed=4)
        multi = simulate_fields(TRUTH, TruncationSpec(6, 6), {"a": grid, "b": SamplingGrid(2, 3, 3)}, seed=4)
        assert np.array_equal(single.values, multi["a"].values)

    def test_substeps_record_at_observation_times(self):
        record = simulate_field(TRUTH, TruncationSpec(3, 3), SamplingGrid(4, 4, 4), seed=1, substeps=5)
        assert record.values.shape == (5, 5, 5)

    def test_field_variance_monte_carlo(self):
        trunc = TruncationSpec(8, 8)
        grid = SamplingGrid(4, 4, 4)
        reps = 600
        probes = np.array([
            simulate_field(TRUTH, trunc, grid, seed=s).values[-1, 2, 2] for s in range(reps)
        ])
        var = field_variance(TRUTH, trunc, 1.0, 0.5, 0.5)
        assert abs(probes.var(ddof=1) - var) < 4 * var * math.sqrt(2 / (reps - 1))


@pytest.mark.perf
def test_folded_synthesis_faster_than_naive():
    spec = derive_spectrum(TRUTH)
    grid = SamplingGrid(2, 200, 200)
    trunc = TruncationSpec(2000, 2000)
    coeffs = np.random.default_rng(0).standard_normal((2000, 2000))
    naive = SlabSynthesizer(spec, trunc, grid.y_nodes(), grid.z_nodes(), "naive")
    folded = SlabSynthesizer(spec, trunc, grid.y_nodes(), grid.z_nodes(), "folded")

    def best_of(func, repeat=3):
        times = []
        for _ in range(repeat):
            start = time.perf_counter()
            func(coeffs)
            times.append(time.perf_counter() - start)
        return min(times)

    assert np.max(np.abs(naive(coeffs) - folded(coeffs))) < 1e-9
    assert best_of(naive) >= 5 * best_of(folded)
