"""
Unit Tests for Analytics Module
"""

import json
import math
import os
import sys
import unittest

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from src.analytics import (
    RateSummary,
    ablation_sweep,
    analyze_runs,
    compare_runs,
    distribution_comparison,
    distribution_from_values,
    flag_agreement,
    hallucination_rate,
    heatmap_matrix,
    kl_divergence,
    position_profile,
    positionwise_comparison,
    shared_bin_edges,
    variance_distribution,
    variances_by_position,
)
from src.detector import DetectorConfig, VarianceDetector
from src.mock_backend import MockModelSpec, PlantedRegion, mock_generate
from src.trace import DecodingConfig, ScoredGeneration, TokenScore

variance_lists = st.lists(
    st.floats(min_value=0.0, max_value=10.0, allow_nan=False, allow_infinity=False),
    min_size=1,
    max_size=60,
)


def _scored(prompt_id, variances, model_id='m', threshold=0.5, flags=None):
    """Scored generation with the given per-position variances (None = unscored)."""
    scores = []
    for t, v in enumerate(variances):
        flagged = flags[t] if flags is not None else (v is not None and v > threshold)
        scores.append(TokenScore(t, f"t{t}", -1.0, v, 3 if v is not None else 1, flagged))
    return ScoredGeneration(prompt_id, model_id, '', threshold, scores)


def _counted(model_id, total, flagged):
    return _scored('p', [1.0] * total, model_id, flags=[i < flagged for i in range(total)])


def _mock_scored(spec, prompts=200, num_samples=5, seed=1):
    config = DecodingConfig(num_samples=num_samples, seed=seed)
    traces = [mock_generate(f"shared prompt {i}", config, spec, prompt_id=f"p{i}") for i in range(prompts)]
    return traces, VarianceDetector().score_corpus(traces).scored


class TestHallucinationRate(unittest.TestCase):
    """Corpus-level rates."""

    def test_table_one_rates(self):
        for model_id, total, flagged, expected in [
            ('gpt-neo-2.7b', 4000, 2897, '72.42'),
            ('falcon-7b-instruct', 4000, 2590, '64.75'),
            ('mistral-7b-instruct', 2396, 641, '26.75'),
        ]:
            rate = hallucination_rate([_counted(model_id, total, flagged)])
            self.assertEqual(rate.rate_display, expected)
            self.assertEqual((rate.total_tokens, rate.hallucinated_tokens), (total, flagged))

    def test_only_scored_tokens_count(self):
        rate = hallucination_rate([_scored('p', [0.9, 0.1, None, None])])
        self.assertEqual((rate.total_tokens, rate.scored_tokens, rate.hallucinated_tokens), (4, 2, 1))
        self.assertEqual(rate.rate_percent, 50.0)

    def test_empty_corpus(self):
        rate = hallucination_rate([], model_id='m')
        self.assertEqual((rate.rate_percent, rate.rate_display), (0.0, '0.00'))

    def test_mixed_models(self):
        with self.assertRaises(ValueError):
            hallucination_rate([_scored('a', [0.1], 'm1'), _scored('b', [0.1], 'm2')])

    def test_inconsistent_counts(self):
        with self.assertRaises(ValueError):
            RateSummary('m', total_tokens=5, scored_tokens=3, hallucinated_tokens=4)


class TestPositionProfile(unittest.TestCase):

    def setUp(self):
        self.scored = [
            _scored('a', [0.9, 0.1, 0.7]),
            _scored('b', [0.1, 0.1]),
            _scored('c', [0.9, None]),
        ]

    def test_profile(self):
        profile = position_profile(self.scored, max_position=4)
        self.assertEqual(profile.support_count, (3, 2, 1, 0))
        self.assertEqual(profile.flagged_count, (2, 0, 1, 0))
        self.assertAlmostEqual(profile.flag_probability[0], 2 / 3)
        self.assertAlmostEqual(profile.mean_variance[0], 1.9 / 3)
        self.assertTrue(math.isnan(profile.flag_probability[3]))
        self.assertTrue(math.isnan(profile.mean_variance[3]))
        self.assertEqual(profile.supported_positions(), [0, 1, 2])

    def test_frame_carries_threshold(self):
        frame = position_profile(self.scored, max_position=3).to_frame()
        self.assertEqual(list(frame['position']), [0, 1, 2])
        self.assertTrue((frame['threshold'] == 0.5).all())

    def test_variances_by_position(self):
        columns = variances_by_position(self.scored, max_position=2)
        self.assertEqual(columns[0].tolist(), [0.9, 0.1, 0.9])
        self.assertEqual(columns[1].tolist(), [0.1, 0.1])

    def test_flag_probability_rises_in_planted_region(self):
        spec = MockModelSpec(seed=3, planted_regions=[PlantedRegion(10, 20, 1.0)])
        _, scored = _mock_scored(spec, prompts=100, num_samples=30)
        probability = position_profile(scored).flag_probability
        self.assertTrue(all(p > 0.85 for p in probability[10:20]))
        self.assertTrue(all(p < 0.05 for p in probability[:10] + probability[20:]))


class TestVarianceDistribution(unittest.TestCase):
    """Histograms, empirical CDFs and KL divergence."""

    def test_explicit_edges(self):
        dist = distribution_from_values([0.1, 0.9], (0.0, 0.5, 1.0))
        self.assertEqual(dist.bin_counts, (1, 1))
        self.assertEqual(dist.cdf_points, ((0.5, 0.5), (1.0, 1.0)))

    def test_all_zero_variances(self):
        dist = variance_distribution([_scored('a', [0.0, 0.0, 0.0])])
        self.assertEqual(len(dist.bin_edges), 51)
        self.assertEqual(dist.bin_edges[-1], 1.0)
        self.assertEqual(dist.bin_counts[0], 3)
        self.assertEqual(dist.cdf_points[0][1], 1.0)

    def test_empty(self):
        dist = variance_distribution([_scored('a', [None])])
        self.assertEqual(dist.total, 0)
        self.assertEqual(dist.cdf_points, ())

    def test_invalid_edges(self):
        with self.assertRaises(ValueError):
            distribution_from_values([0.1], (0.0, 1.0))
        with self.assertRaises(ValueError):
            distribution_from_values([0.1], (0.0, 0.5, 0.5))
        with self.assertRaises(ValueError):
            shared_bin_edges([0.1], bins=1)

    @settings(max_examples=1000, deadline=None)
    @given(variance_lists)
    def test_cdf_monotone_with_terminal_one(self, values):
        dist = distribution_from_values(values, shared_bin_edges(np.asarray(values), bins=10))
        fractions = [f for _, f in dist.cdf_points]
        self.assertEqual(fractions, sorted(fractions))
        self.assertEqual(fractions[-1], 1.0)
        self.assertEqual(dist.total, len(values))

    @settings(max_examples=1000, deadline=None)
    @given(variance_lists, variance_lists)
    def test_histogram_additivity(self, first, second):
        edges = shared_bin_edges(np.asarray(first), np.asarray(second), bins=8)
        combined = distribution_from_values(first + second, edges).bin_counts
        separate = [a + b for a, b in zip(distribution_from_values(first, edges).bin_counts,
                                          distribution_from_values(second, edges).bin_counts)]
        self.assertEqual(list(combined), separate)

    @settings(max_examples=1000, deadline=None)
    @given(variance_lists, variance_lists)
    def test_kl_properties(self, first, second):
        edges = shared_bin_edges(np.asarray(first), np.asarray(second), bins=12)
        p = distribution_from_values(first, edges)
        q = distribution_from_values(second, edges)
        forward, backward = kl_divergence(p, q), kl_divergence(q, p)
        self.assertGreaterEqual(forward.kl_pq, 0.0)
        self.assertGreaterEqual(forward.kl_qp, 0.0)
        self.assertEqual(forward.kl_sym, backward.kl_sym)
        self.assertLessEqual(kl_divergence(p, p).kl_sym, 1e-12)

    def test_kl_point_mass_against_uniform(self):
        edges = (0.0, 0.5, 1.0)
        p = distribution_from_values([0.1], edges)
        q = distribution_from_values([0.1, 0.9], edges)
        self.assertAlmostEqual(kl_divergence(p, q).kl_pq, math.log(2), delta=1e-6)

    def test_kl_requires_shared_edges(self):
        p = distribution_from_values([0.1], (0.0, 0.5, 1.0))
        q = distribution_from_values([0.1], (0.0, 0.6, 1.0))
        with self.assertRaises(ValueError):
            kl_divergence(p, q)


class TestHeatmap(unittest.TestCase):

    def test_matrix_pads_missing_cells(self):
        heatmap = heatmap_matrix({
            'neo': _scored('q', [0.2, 0.8, None]),
            'falcon': _scored('q', [0.1], 'falcon'),
        })
        self.assertEqual(heatmap.shape, (2, 3))
        self.assertEqual(heatmap.values[0, :2].tolist(), [0.2, 0.8])
        self.assertTrue(math.isnan(heatmap.values[0, 2]))
        self.assertTrue(np.isnan(heatmap.values[1, 1:]).all())

        frame = heatmap.to_frame()
        self.assertEqual(len(frame), 6)
        self.assertEqual(int(frame['missing'].sum()), 3)

    def test_prompt_mismatch(self):
        with self.assertRaises(ValueError):
            heatmap_matrix({'a': _scored('q1', [0.1]), 'b': _scored('q2', [0.1])})


class TestComparison(unittest.TestCase):
    """Per-position divergences between runs."""

    def test_self_comparison_is_zero(self):
        scored = [_scored(f"p{i}", [0.1 * i, 0.5, 0.05 * i]) for i in range(6)]
        comparison, whole = compare_runs(scored, scored)
        self.assertEqual(comparison.positions, [0, 1, 2])
        for row in comparison.rows:
            self.assertLessEqual(row.kl_sym, 1e-12)
            self.assertEqual(row.abs_mean_variance_diff, 0.0)
        self.assertLessEqual(whole.kl_sym, 1e-12)

    def test_disjoint_prompts(self):
        comparison, whole = compare_runs([_scored('a', [0.1])], [_scored('b', [0.1])])
        self.assertEqual(comparison.rows, ())
        self.assertIsNone(whole)
        self.assertTrue(comparison.kl_frame().empty)

    def test_no_co_supported_positions(self):
        a = [_scored('p', [0.1, None], 'a')]
        b = [_scored('p', [None, 0.2], 'b')]
        comparison = positionwise_comparison(
            position_profile(a, 2), position_profile(b, 2),
            variances_by_position(a, 2), variances_by_position(b, 2),
        )
        self.assertEqual(comparison.rows, ())

    def test_swap_symmetry(self):
        rng = np.random.default_rng(5)
        a = [_scored(f"p{i}", rng.exponential(0.5, size=5).tolist(), 'a') for i in range(30)]
        b = [_scored(f"p{i}", rng.exponential(0.2, size=5).tolist(), 'b') for i in range(30)]
        forward, _ = compare_runs(a, b)
        backward, _ = compare_runs(b, a)
        self.assertEqual([r.kl_sym for r in forward.rows], [r.kl_sym for r in backward.rows])
        self.assertEqual([r.kl_ab for r in forward.rows], [r.kl_ba for r in backward.rows])

    def test_planted_region_shows_up_in_mean_difference(self):
        _, noisy = _mock_scored(MockModelSpec(seed=4, planted_regions=[PlantedRegion(10, 20, 1.0)]))
        _, quiet = _mock_scored(MockModelSpec(seed=4, stable_noise_sd=0.0))
        comparison, whole = compare_runs(noisy, quiet)
        diffs = {r.position: r.abs_mean_variance_diff for r in comparison.rows}
        # population variance of 5 draws with unit sd averages 4/5
        for t in range(10, 20):
            self.assertAlmostEqual(diffs[t], 0.8, delta=0.15)
        for t in list(range(10)) + list(range(20, 40)):
            self.assertLess(diffs[t], 0.01)
        self.assertGreater(whole.kl_sym, 0.0)

    def test_distribution_comparison_identity(self):
        scored = [_scored('p', [0.1, 0.4, 0.9])]
        self.assertLessEqual(distribution_comparison(scored, scored).kl_sym, 1e-12)


class TestFlagAgreement(unittest.TestCase):

    def test_counts(self):
        scored = [_scored('p', [0.9, 0.9, 0.1, 0.1, None])]
        agreement = flag_agreement(scored, {'p': {0, 2, 4}}, {'p': [{0}, {2, 3}, {4}]})
        self.assertEqual(
            (agreement.true_positive, agreement.false_positive, agreement.false_negative, agreement.true_negative),
            (1, 1, 1, 1),
        )
        self.assertEqual((agreement.precision, agreement.recall, agreement.false_flag_rate), (0.5, 0.5, 0.5))
        self.assertAlmostEqual(agreement.span_recall, 1 / 3)

    def test_no_labels(self):
        agreement = flag_agreement([_scored('p', [0.1])], {})
        self.assertEqual((agreement.precision, agreement.recall, agreement.span_recall), (0.0, 0.0, 0.0))


class TestAblation(unittest.TestCase):
    """Sweeps over threshold, sample count and length."""

    def setUp(self):
        spec = MockModelSpec(seed=8, stable_noise_sd=0.4, planted_regions=[PlantedRegion(5, 15, 1.0)])
        self.traces, _ = _mock_scored(spec, prompts=30, num_samples=3)

    def test_threshold_axis(self):
        grid = ablation_sweep(self.traces, 'threshold', [0.6, 0.4, 0.5, 0.5])
        self.assertEqual([p.axis_value for p in grid.points], [0.4, 0.5, 0.6])
        rates = [p.rate.rate_percent for p in grid.points]
        self.assertEqual(rates, sorted(rates, reverse=True))
        self.assertEqual(len(grid.to_frame()), 3)

    def test_num_samples_axis(self):
        grid = ablation_sweep(self.traces, 'num_samples', [2, 3])
        self.assertEqual([p.axis_value for p in grid.points], [2, 3])
        self.assertEqual(grid.errors, ())

    def test_single_sample_rejected(self):
        grid = ablation_sweep(self.traces, 'num_samples', [1])
        self.assertEqual(grid.points, ())
        [(value, message)] = grid.errors
        self.assertEqual(value, 1)
        self.assertIn('at least 2 samples', message)

    def test_more_samples_than_collected(self):
        grid = ablation_sweep(self.traces, 'num_samples', [2, 4])
        self.assertEqual([p.axis_value for p in grid.points], [2])
        self.assertEqual([v for v, _ in grid.errors], [4])
        self.assertEqual(len(grid.to_frame()), 2)

    def test_non_finite_values_become_errors(self):
        for axis, values, kept in [
            ('num_samples', [2, math.inf], [2]),
            ('threshold', [0.5, math.nan], [0.5]),
            ('length_bucket', [0, math.nan], [0]),
        ]:
            with self.subTest(axis=axis):
                grid = ablation_sweep(self.traces, axis, values)
                self.assertEqual([p.axis_value for p in grid.points], kept)
                [(value, message)] = grid.errors
                self.assertFalse(math.isfinite(value))
                self.assertIn('finite', message)

    def test_length_buckets_partition_corpus(self):
        spec = MockModelSpec(seed=9, answer_length=40, planted_regions=[PlantedRegion(0, 10, 1.0)])
        traces = []
        for i, length in enumerate([5, 12, 25, 40, 8]):
            config = DecodingConfig(num_samples=3, max_new_tokens=length, seed=1)
            traces.append(mock_generate(f"q{i}", config, spec, prompt_id=f"q{i}"))
        grid = ablation_sweep(traces, 'length_bucket', [0, 10, 30])
        self.assertEqual([p.rate.total_tokens for p in grid.points], [5 + 8, 12 + 25, 40])
        whole = hallucination_rate(VarianceDetector().score_corpus(traces).scored)
        self.assertEqual(sum(p.rate.hallucinated_tokens for p in grid.points), whole.hallucinated_tokens)

    def test_unknown_axis(self):
        with self.assertRaises(ValueError):
            ablation_sweep(self.traces, 'temperature', [0.5])

    def test_base_config_is_used(self):
        grid = ablation_sweep(self.traces, 'num_samples', [3], DetectorConfig(min_support=3, threshold=100.0))
        self.assertEqual(grid.points[0].rate.hallucinated_tokens, 0)


class TestRunReport(unittest.TestCase):

    def setUp(self):
        self.runs = {
            'neo': [_scored('q1', [0.9, 0.1], 'neo'), _scored('q2', [0.6], 'neo')],
            'mistral': [_scored('q1', [0.1, 0.2, 0.3], 'mistral')],
        }

    def test_report_is_strict_json(self):
        report = analyze_runs(self.runs, bins=4, max_position=3, heatmap_prompt='q1')
        text = json.dumps(report.to_dict(), allow_nan=False)
        self.assertIn('"heatmap"', text)
        self.assertEqual([r.model_id for r in report.rates], ['neo', 'mistral'])
        self.assertEqual(report.distributions[0].bin_edges, report.distributions[1].bin_edges)

    def test_frames(self):
        frames = analyze_runs(self.runs, bins=4, max_position=3).frames()
        self.assertEqual(set(frames), {'rates', 'position_profile', 'histogram', 'cdf'})
        self.assertEqual(len(frames['rates']), 2)
        self.assertEqual(len(frames['position_profile']), 6)
        self.assertEqual(len(frames['histogram']), 8)

    def test_heatmap_prompt_missing(self):
        with self.assertRaises(KeyError):
            analyze_runs(self.runs, heatmap_prompt='q2')


if __name__ == '__main__':
    unittest.main()
