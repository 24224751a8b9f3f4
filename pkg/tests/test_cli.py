"""
Unit Tests for Command Line Module
"""

import io
import json
import os
import sys
import tempfile
import unittest
from contextlib import redirect_stderr, redirect_stdout
from pathlib import Path
from unittest.mock import patch

import pandas as pd

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from src.cli import main, parse_values
from src.errors import EXIT_BACKEND, EXIT_CONFIGURATION, EXIT_INPUT_FORMAT, EXIT_OK, ConfigurationError
from src.trace import read_scored, read_traces


def run_cli(*argv):
    out, err = io.StringIO(), io.StringIO()
    with redirect_stdout(out), redirect_stderr(err):
        code = main([str(a) for a in argv])
    return code, out.getvalue(), err.getvalue()


def error_summary(stderr: str) -> dict:
    return json.loads(stderr.strip().splitlines()[-1])


class CliTestCase(unittest.TestCase):
    """Shared temp workspace with a five-prompt corpus and a mock spec."""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)
        self.corpus = self.dir / 'corpus.jsonl'
        self.corpus.write_text(''.join(
            json.dumps({'id': f"q{i}", 'dataset': 'squad_v2', 'context': f"Paragraph {i} about rivers.",
                        'question': f"Which king built bridge {i}?"}) + '\n'
            for i in range(5)
        ), encoding='utf-8')
        self.spec = self.dir / 'mock_spec.json'
        self.spec.write_text(json.dumps({
            'seed': 11, 'answer_length': 30, 'stable_noise_sd': 0.05,
            'planted_regions': [[8, 16, 1.0]],
        }), encoding='utf-8')
        self.quiet_spec = self.dir / 'quiet_spec.json'
        self.quiet_spec.write_text(json.dumps({'seed': 11, 'answer_length': 30, 'stable_noise_sd': 0.0}),
                                   encoding='utf-8')

    def tearDown(self):
        self.tmp.cleanup()

    def sample(self, out, spec=None, *extra):
        return run_cli('sample', '--corpus', self.corpus, '--mock', '--mock-spec', spec or self.spec,
                       '--seed', 7, '--num-samples', 5, '--out', out, *extra)

    def pipeline(self, root: Path, model='mock', spec=None):
        self.assertEqual(self.sample(root / 'sample', spec, '--model', model)[0], EXIT_OK)
        self.assertEqual(run_cli('score', root / 'sample' / 'traces.jsonl', '--out', root / 'score')[0], EXIT_OK)
        return root / 'score' / 'scored.jsonl'


class TestSampleCommand(CliTestCase):

    def test_mock_sampling(self):
        code, stdout, _ = self.sample(self.dir / 'out')
        self.assertEqual(code, EXIT_OK)
        traces = read_traces(self.dir / 'out' / 'traces.jsonl')
        self.assertEqual(len(traces), 5)
        self.assertTrue(all(len(t.samples) == 5 for t in traces))
        self.assertIn('5 written', stdout)

        manifest = json.loads((self.dir / 'out' / 'manifest.json').read_text(encoding='utf-8'))
        self.assertEqual(manifest['command'], 'sample')
        self.assertEqual(manifest['seed'], 7)
        self.assertEqual(manifest['decoding_config']['num_samples'], 5)
        self.assertEqual(manifest['backend']['backend'], 'mock')
        self.assertEqual(len(manifest['corpus']['sha256']), 64)

    def test_rerun_adds_nothing(self):
        self.sample(self.dir / 'out')
        before = (self.dir / 'out' / 'traces.jsonl').read_bytes()
        code, stdout, _ = self.sample(self.dir / 'out')
        self.assertEqual(code, EXIT_OK)
        self.assertIn('5 skipped', stdout)
        self.assertEqual((self.dir / 'out' / 'traces.jsonl').read_bytes(), before)

    @patch('src.sampler.requests.Session.post')
    def test_missing_api_key_fails_before_any_request(self, mock_post):
        env = {k: v for k, v in os.environ.items() if k != 'TOKENVAR_API_KEY'}
        with patch.dict(os.environ, env, clear=True):
            code, _, stderr = run_cli('sample', '--corpus', self.corpus, '--backend-url', 'http://localhost:9/v1',
                                      '--model', 'm', '--out', self.dir / 'out')
        self.assertEqual(code, EXIT_CONFIGURATION)
        summary = error_summary(stderr)
        self.assertEqual(summary['error'], 'ConfigurationError')
        self.assertIn('TOKENVAR_API_KEY', summary['message'])
        mock_post.assert_not_called()

    def test_failed_prompts_give_backend_exit_code(self):
        spec = self.dir / 'failing.json'
        spec.write_text(json.dumps({'fail_on_ids': ['q2']}), encoding='utf-8')
        code, _, stderr = self.sample(self.dir / 'out', spec)
        self.assertEqual(code, EXIT_BACKEND)
        self.assertEqual(len(read_traces(self.dir / 'out' / 'traces.jsonl')), 4)
        self.assertTrue((self.dir / 'out' / 'errors.jsonl').exists())
        self.assertEqual(error_summary(stderr)['exit_code'], EXIT_BACKEND)

    def test_invalid_decoding_flag(self):
        code, _, _ = self.sample(self.dir / 'out', None, '--top-p', '1.5')
        self.assertEqual(code, EXIT_CONFIGURATION)

    def test_duplicate_ids(self):
        with open(self.corpus, 'a', encoding='utf-8') as f:
            f.write(json.dumps({'id': 'q0', 'question': 'again?'}) + '\n')
        code, _, stderr = self.sample(self.dir / 'out')
        self.assertEqual(code, EXIT_INPUT_FORMAT)
        self.assertIn("Duplicate prompt id 'q0'", error_summary(stderr)['message'])

    def test_corpus_with_invalid_utf8(self):
        with open(self.corpus, 'ab') as f:
            f.write(b'{"id": "q9", "question": "\xff\xfe"}\n')
        code, _, stderr = self.sample(self.dir / 'out')
        self.assertEqual(code, EXIT_INPUT_FORMAT)
        self.assertIn('line 6: not valid UTF-8', error_summary(stderr)['message'])

    def test_squad_file_with_invalid_utf8(self):
        squad = self.dir / 'squad.json'
        squad.write_bytes(b'{"data": "\xff"}')
        code, _, stderr = run_cli('sample', '--corpus', squad, '--adapter', 'squad_v2', '--mock',
                                  '--out', self.dir / 'out')
        self.assertEqual(code, EXIT_INPUT_FORMAT)
        self.assertIn('not valid UTF-8', error_summary(stderr)['message'])


class TestScoreCommand(CliTestCase):

    def test_zero_noise_has_no_flags(self):
        scored = read_scored(self.pipeline(self.dir / 'run', spec=self.quiet_spec))
        self.assertEqual(sum(s.hallucinated_count for s in scored), 0)

    def test_zero_threshold_flags_every_varying_token(self):
        self.sample(self.dir / 'sample')
        run_cli('score', self.dir / 'sample' / 'traces.jsonl', '--threshold', 0.0, '--out', self.dir / 'score')
        for record in read_scored(self.dir / 'score' / 'scored.jsonl'):
            for t in record.token_scores:
                self.assertEqual(t.hallucinated, t.variance > 0)

    def test_denominator_scaling(self):
        self.sample(self.dir / 'sample')
        traces = self.dir / 'sample' / 'traces.jsonl'
        run_cli('score', traces, '--out', self.dir / 'pop')
        run_cli('score', traces, '--denominator', 'n-1', '--out', self.dir / 'unbiased')
        population = read_scored(self.dir / 'pop' / 'scored.jsonl')
        unbiased = read_scored(self.dir / 'unbiased' / 'scored.jsonl')
        for a, b in zip(population, unbiased):
            for x, y in zip(a.token_scores, b.token_scores):
                self.assertLessEqual(abs(y.variance - x.variance * 5 / 4), 1e-12)

    def test_corpus_attaches_prompt_text(self):
        self.sample(self.dir / 'sample')
        run_cli('score', self.dir / 'sample' / 'traces.jsonl', '--corpus', self.corpus, '--out', self.dir / 'score')
        first = read_scored(self.dir / 'score' / 'scored.jsonl')[0]
        self.assertEqual(first.prompt, "Paragraph 0 about rivers.\n\nQ: Which king built bridge 0?\nA:")

    def test_schema_mismatch(self):
        self.sample(self.dir / 'sample')
        path = self.dir / 'sample' / 'traces.jsonl'
        path.write_text(path.read_text(encoding='utf-8').replace('"schema_version": "1"', '"schema_version": "9"'),
                        encoding='utf-8')
        code, _, stderr = run_cli('score', path, '--out', self.dir / 'score')
        self.assertEqual(code, EXIT_INPUT_FORMAT)
        self.assertEqual(error_summary(stderr)['error'], 'SchemaVersionError')

    def test_missing_trace_file(self):
        code, _, _ = run_cli('score', self.dir / 'nope.jsonl', '--out', self.dir / 'score')
        self.assertEqual(code, EXIT_INPUT_FORMAT)


class TestAnalyzeCommand(CliTestCase):

    def test_three_models(self):
        files = [self.pipeline(self.dir / name, model=name) for name in ('neo', 'falcon', 'mistral')]
        code, stdout, _ = run_cli('analyze', *files, '--heatmap-prompt', 'q1', '--out', self.dir / 'report')
        self.assertEqual(code, EXIT_OK)
        for name in ('neo', 'falcon', 'mistral'):
            self.assertIn(name, stdout)

        rates = pd.read_csv(self.dir / 'report' / 'rates.csv')
        self.assertEqual(list(rates['model_id']), ['neo', 'falcon', 'mistral'])
        for name in ('report.json', 'position_profile.csv', 'histogram.csv', 'cdf.csv', 'heatmap.csv',
                     'manifest.json'):
            self.assertTrue((self.dir / 'report' / name).exists(), name)

    def test_heatmap_prompt_missing_names_file(self):
        scored = self.pipeline(self.dir / 'run')
        code, _, stderr = run_cli('analyze', scored, '--heatmap-prompt', 'zzz', '--out', self.dir / 'report')
        self.assertEqual(code, EXIT_INPUT_FORMAT)
        self.assertIn(str(scored), error_summary(stderr)['message'])

    def test_empty_input(self):
        empty = self.dir / 'empty.jsonl'
        empty.write_text('', encoding='utf-8')
        code, _, _ = run_cli('analyze', empty, '--out', self.dir / 'report')
        self.assertEqual(code, EXIT_INPUT_FORMAT)


class TestCompareCommand(CliTestCase):

    def test_compare_with_itself(self):
        scored = self.pipeline(self.dir / 'run')
        self.assertEqual(run_cli('compare', scored, scored, '--out', self.dir / 'cmp')[0], EXIT_OK)
        kl = pd.read_csv(self.dir / 'cmp' / 'kl.csv')
        diff = pd.read_csv(self.dir / 'cmp' / 'mean_diff.csv')
        self.assertEqual(len(kl), 30)
        self.assertTrue((kl['kl_sym'] <= 1e-12).all())
        self.assertTrue((diff['abs_mean_variance_diff'] == 0).all())

    def test_disjoint_prompts(self):
        scored = self.pipeline(self.dir / 'run')
        other = self.dir / 'other.jsonl'
        other.write_text(scored.read_text(encoding='utf-8').replace('"prompt_id": "q', '"prompt_id": "x'),
                         encoding='utf-8')
        code, _, _ = run_cli('compare', scored, other, '--out', self.dir / 'cmp')
        self.assertEqual(code, EXIT_OK)
        self.assertTrue(pd.read_csv(self.dir / 'cmp' / 'kl.csv').empty)
        comparison = json.loads((self.dir / 'cmp' / 'comparison.json').read_text(encoding='utf-8'))
        self.assertIsNone(comparison['distribution_kl'])


class TestAblateCommand(CliTestCase):

    def setUp(self):
        super().setUp()
        self.sample(self.dir / 'sample')
        self.traces = self.dir / 'sample' / 'traces.jsonl'

    def test_threshold_sweep(self):
        code, _, _ = run_cli('ablate', self.traces, '--axis', 'threshold', '--values', '0.4,0.5,0.6',
                             '--out', self.dir / 'ablate')
        self.assertEqual(code, EXIT_OK)
        grid = pd.read_csv(self.dir / 'ablate' / 'ablation.csv')
        self.assertEqual(list(grid['axis_value']), [0.4, 0.5, 0.6])
        self.assertTrue(grid['rate_percent'].is_monotonic_decreasing)

    def test_num_samples_sweep(self):
        code, _, _ = run_cli('ablate', self.traces, '--axis', 'num_samples', '--values', '2,3',
                             '--out', self.dir / 'ablate')
        self.assertEqual(code, EXIT_OK)
        self.assertEqual(len(pd.read_csv(self.dir / 'ablate' / 'ablation.csv')), 2)

    def test_infinite_sample_count_is_an_error_row(self):
        code, _, _ = run_cli('ablate', self.traces, '--axis', 'num_samples', '--values', '2,inf',
                             '--out', self.dir / 'ablate')
        self.assertEqual(code, EXIT_OK)
        grid = pd.read_csv(self.dir / 'ablate' / 'ablation.csv')
        self.assertEqual(len(grid), 2)
        self.assertEqual(grid['error'].notna().sum(), 1)
        manifest = json.loads((self.dir / 'ablate' / 'manifest.json').read_text(encoding='utf-8'))
        self.assertEqual(manifest['values'], '2,inf')

    def test_single_sample_rejected(self):
        code, _, stderr = run_cli('ablate', self.traces, '--axis', 'num_samples', '--values', '1',
                                  '--out', self.dir / 'ablate')
        self.assertEqual(code, EXIT_CONFIGURATION)
        self.assertIn('at least 2 samples', error_summary(stderr)['message'])

    def test_parse_values(self):
        self.assertEqual(parse_values('0.4, 0.5,0.6'), [0.4, 0.5, 0.6])
        with self.assertRaises(ConfigurationError):
            parse_values('0.4,abc')


class TestReproducibility(CliTestCase):
    """Identical seeds give byte-identical artefacts."""

    def test_two_runs_match(self):
        artefacts = []
        for name in ('first', 'second'):
            root = self.dir / name
            scored = self.pipeline(root)
            run_cli('analyze', scored, '--out', root / 'analyze')
            artefacts.append([
                (root / 'sample' / 'traces.jsonl').read_bytes(),
                scored.read_bytes(),
                (root / 'analyze' / 'report.json').read_bytes(),
                (root / 'analyze' / 'rates.csv').read_bytes(),
            ])
        self.assertEqual(artefacts[0], artefacts[1])


if __name__ == '__main__':
    unittest.main()
