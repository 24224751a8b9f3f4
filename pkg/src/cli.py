"""
Command Line Module
Subcommand pipeline: sample -> score -> analyze / compare / ablate, with files as
the interchange between stages
"""

import argparse
import json
import os
import sys
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Dict, List, Optional

from loguru import logger

from . import __version__
from .analytics import AXES, DEFAULT_BINS, DEFAULT_MAX_POSITION, ablation_sweep, analyze_runs, compare_runs
from .detector import POPULATION, SAMPLE, DetectorConfig, VarianceDetector
from .errors import (
    EXIT_INTERNAL,
    EXIT_OK,
    BackendError,
    ConfigurationError,
    InputFormatError,
    ToolkitError,
)
from .mock_backend import MockBackend, MockModelSpec
from .sampler import API_KEY_ENV, BackendConfig, CompletionBackend, run_sampling
from .trace import (
    ADAPTERS,
    DEFAULT_CONTEXT_LIMIT,
    DecodingConfig,
    build_prompt,
    read_prompts,
    read_scored,
    read_traces,
    write_scored,
)
from .utils import file_digest, format_rate_table, save_to_json, write_csv, write_jsonl

ENV_PREFIX = 'TOKENVAR_'

TRACES_FILE = 'traces.jsonl'
SCORED_FILE = 'scored.jsonl'
SCORE_ERRORS_FILE = 'score_errors.jsonl'
REPORT_FILE = 'report.json'
COMPARISON_FILE = 'comparison.json'
ABLATION_FILE = 'ablation.csv'
MANIFEST_FILE = 'manifest.json'

DENOMINATOR_FLAGS = {'n': POPULATION, 'n-1': SAMPLE, POPULATION: POPULATION, SAMPLE: SAMPLE}


def configure_logging(verbose: bool = False) -> None:
    """Send log records to stderr, at DEBUG when verbose."""
    logger.remove()
    logger.add(
        sys.stderr,
        level='DEBUG' if verbose else 'INFO',
        format="<green>{time:HH:mm:ss}</green> | <level>{level: <8}</level> | {message}",
    )


def env_value(name: str, cast: Callable = str, default=None):
    """
    Read a TOKENVAR_* environment variable.

    Raises:
        ConfigurationError: the value cannot be converted
    """
    raw = os.getenv(ENV_PREFIX + name)
    if raw is None or raw.strip() == '':
        return default
    try:
        return cast(raw.strip())
    except ValueError:
        raise ConfigurationError(f"{ENV_PREFIX}{name}={raw!r} is not a valid {cast.__name__}")


def _resolve(flag_value, env_name: str, cast: Callable, default):
    """Flag beats environment beats default."""
    if flag_value is not None:
        return flag_value
    return env_value(env_name, cast, default)


def write_manifest(out_dir: Path, command: str, argv: List[str], started_at: str, **fields) -> Path:
    """
    Write the run manifest for an output directory.

    Digests are SHA-256 over the input files' bytes.
    """
    manifest = {
        'toolkit_version': __version__,
        'command': command,
        'argv': argv,
        'started_at': started_at,
        'finished_at': _now(),
        'digest_algorithm': 'sha256',
        **fields,
    }
    return save_to_json(manifest, out_dir / MANIFEST_FILE)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _detector_config(args) -> DetectorConfig:
    try:
        return DetectorConfig(
            threshold=args.threshold,
            variance_denominator=DENOMINATOR_FLAGS[args.denominator],
            min_support=args.min_support,
        )
    except ValueError as e:
        raise ConfigurationError(f"Invalid detector settings: {e}")


def _decoding_config(args) -> DecodingConfig:
    try:
        return DecodingConfig(
            temperature=args.temperature,
            top_p=args.top_p,
            top_k=args.top_k,
            max_new_tokens=args.max_new_tokens,
            num_samples=args.num_samples,
            seed=_resolve(args.seed, 'SEED', int, None),
        )
    except ValueError as e:
        raise ConfigurationError(f"Invalid decoding settings: {e}")


def build_backend(args):
    """
    Build the backend named by the flags.

    Checks every required setting before any request is made.

    Returns:
        (backend, identity dict for the manifest)
    """
    max_concurrency = _resolve(args.max_concurrency, 'MAX_CONCURRENCY', int, 4)

    if args.mock:
        spec = MockModelSpec.load(args.mock_spec) if args.mock_spec else MockModelSpec()
        try:
            backend = MockBackend(spec, model_id=args.model or 'mock', max_concurrency=max_concurrency)
        except ValueError as e:
            raise ConfigurationError(str(e))
        identity = backend.identity()
        if args.mock_spec:
            identity['spec_digest'] = file_digest(args.mock_spec)
        return backend, identity

    base_url = _resolve(args.backend_url, 'BACKEND_URL', str, None)
    model_id = _resolve(args.model, 'MODEL', str, None)
    if not base_url:
        raise ConfigurationError(f"No backend URL: pass --backend-url or set {ENV_PREFIX}BACKEND_URL")
    if not model_id:
        raise ConfigurationError(f"No model: pass --model or set {ENV_PREFIX}MODEL")
    if not os.getenv(API_KEY_ENV):
        raise ConfigurationError(f"{API_KEY_ENV} is not set; it is required for non-mock backends")

    try:
        config = BackendConfig.from_env(
            base_url,
            model_id,
            request_timeout=_resolve(args.timeout, 'REQUEST_TIMEOUT', float, 60.0),
            max_retries=_resolve(args.max_retries, 'MAX_RETRIES', int, 3),
            max_concurrency=max_concurrency,
            supports_top_k=not args.no_top_k_support,
            supports_seed=not args.no_seed_support,
        )
    except ValueError as e:
        raise ConfigurationError(f"Invalid backend settings: {e}")
    backend = CompletionBackend(config)
    return backend, backend.identity()


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_sample(args, argv: List[str]) -> int:
    """Collect n generations per prompt into traces.jsonl (resumable)."""
    started_at = _now()
    out_dir = Path(args.out)
    decoding = _decoding_config(args)
    backend, identity = build_backend(args)
    if args.context_limit < 0:
        raise ConfigurationError(f"--context-limit must be nonnegative, got {args.context_limit}")

    prompts = read_prompts(args.corpus, args.adapter, args.unanswerable_only)
    summary = run_sampling(
        prompts,
        decoding,
        backend,
        out_dir / TRACES_FILE,
        context_limit=args.context_limit,
        progress=sys.stderr.isatty(),
    )

    write_manifest(
        out_dir, 'sample', argv, started_at,
        decoding_config=decoding.to_dict(),
        backend=identity,
        corpus={'path': str(args.corpus), 'adapter': args.adapter, 'sha256': file_digest(args.corpus),
                'unanswerable_only': args.unanswerable_only, 'context_limit': args.context_limit},
        seed=decoding.seed,
        summary={'written': summary.written, 'skipped': summary.skipped, 'failed': summary.failed},
    )
    print(f"Traces: {summary.written} written, {summary.skipped} skipped, {summary.failed} failed "
          f"-> {out_dir / TRACES_FILE}")

    if summary.failed:
        raise BackendError(
            f"{summary.failed} prompt(s) failed; see {(out_dir / TRACES_FILE).with_name('errors.jsonl')} "
            f"and rerun the same command to retry them"
        )
    return EXIT_OK


def cmd_score(args, argv: List[str]) -> int:
    """Score a trace file into scored.jsonl."""
    started_at = _now()
    out_dir = Path(args.out)
    config = _detector_config(args)
    traces = read_traces(args.traces)
    result = VarianceDetector(config).score_corpus(traces)

    scored = result.scored
    if args.corpus:
        prompts = {r.id: r for r in read_prompts(args.corpus, args.adapter)}
        scored = [
            replace(s, prompt=build_prompt(prompts[s.prompt_id], args.context_limit),
                    gold_answer=prompts[s.prompt_id].gold_answer)
            if s.prompt_id in prompts else s
            for s in scored
        ]

    write_scored(scored, out_dir / SCORED_FILE)
    if result.failures:
        write_jsonl(
            ({'prompt_id': f.prompt_id, 'stage': 'score', 'index': f.index, 'message': f.message}
             for f in result.failures),
            out_dir / SCORE_ERRORS_FILE,
        )

    write_manifest(
        out_dir, 'score', argv, started_at,
        detector_config=config.to_dict(),
        traces={'path': str(args.traces), 'sha256': file_digest(args.traces)},
        corpus={'path': str(args.corpus), 'sha256': file_digest(args.corpus)} if args.corpus else None,
        summary={'scored': len(scored), 'failed': len(result.failures)},
    )
    print(f"Scored {len(scored)} generation sets ({len(result.failures)} failed) -> {out_dir / SCORED_FILE}")
    return EXIT_OK


def _load_runs(paths: List[str]) -> Dict[str, Dict]:
    """Read scored files into run label -> {'path', 'records'}; one run per model per file."""
    runs: Dict[str, Dict] = {}
    for path in paths:
        records = read_scored(path)
        if not records:
            raise InputFormatError(f"{path}: no scored records")
        by_model: Dict[str, List] = {}
        for record in records:
            by_model.setdefault(record.model_id, []).append(record)
        for model_id, group in by_model.items():
            label, copy = model_id, 1
            while label in runs:
                copy += 1
                label = f"{model_id} ({path})" if copy == 2 else f"{model_id} ({path}) #{copy}"
            runs[label] = {'path': path, 'records': group}
    return runs


def cmd_analyze(args, argv: List[str]) -> int:
    """Rates, position profiles, distributions and heatmap data for scored runs."""
    started_at = _now()
    out_dir = Path(args.out)
    if args.bins < 2:
        raise ConfigurationError(f"--bins must be at least 2, got {args.bins}")
    if args.max_position < 1:
        raise ConfigurationError(f"--max-position must be at least 1, got {args.max_position}")

    runs = _load_runs(args.scored)
    if args.heatmap_prompt is not None:
        for label, run in runs.items():
            if not any(r.prompt_id == args.heatmap_prompt for r in run['records']):
                raise InputFormatError(
                    f"{run['path']}: prompt id '{args.heatmap_prompt}' not found (run {label})"
                )

    report = analyze_runs(
        {label: run['records'] for label, run in runs.items()},
        bins=args.bins,
        max_position=args.max_position,
        heatmap_prompt=args.heatmap_prompt,
    )
    save_to_json(report.to_dict(), out_dir / REPORT_FILE)
    for name, frame in report.frames().items():
        write_csv(frame, out_dir / f"{name}.csv")

    write_manifest(
        out_dir, 'analyze', argv, started_at,
        inputs=[{'path': str(p), 'sha256': file_digest(p)} for p in args.scored],
        bins=args.bins,
        max_position=args.max_position,
        heatmap_prompt=args.heatmap_prompt,
    )
    print(format_rate_table([
        {'model': r.model_id, 'total_tokens': r.total_tokens, 'scored_tokens': r.scored_tokens,
         'hallucinated_tokens': r.hallucinated_tokens, 'rate': r.rate_display}
        for r in report.rates
    ]))
    logger.info(f"Report written to {out_dir}")
    return EXIT_OK


def cmd_compare(args, argv: List[str]) -> int:
    """Per-position KL and mean-variance differences between two scored runs."""
    started_at = _now()
    out_dir = Path(args.out)
    if args.bins < 2:
        raise ConfigurationError(f"--bins must be at least 2, got {args.bins}")

    scored_a, scored_b = read_scored(args.scored_a), read_scored(args.scored_b)
    try:
        comparison, distribution_kl = compare_runs(scored_a, scored_b, args.bins, args.max_position)
    except ValueError as e:
        raise InputFormatError(str(e))

    write_csv(comparison.kl_frame(), out_dir / 'kl.csv')
    write_csv(comparison.mean_diff_frame(), out_dir / 'mean_diff.csv')
    shared = sorted({r.prompt_id for r in scored_a} & {r.prompt_id for r in scored_b})
    save_to_json({
        'model_a': comparison.model_a,
        'model_b': comparison.model_b,
        'shared_prompts': len(shared),
        'compared_positions': comparison.positions,
        'distribution_kl': None if distribution_kl is None else {
            'kl_ab': distribution_kl.kl_pq,
            'kl_ba': distribution_kl.kl_qp,
            'kl_sym': distribution_kl.kl_sym,
        },
    }, out_dir / COMPARISON_FILE)

    write_manifest(
        out_dir, 'compare', argv, started_at,
        inputs=[{'path': str(p), 'sha256': file_digest(p)} for p in (args.scored_a, args.scored_b)],
        bins=args.bins,
        max_position=args.max_position,
    )
    print(f"Compared {comparison.model_a} vs {comparison.model_b} at {len(comparison.rows)} positions "
          f"-> {out_dir}")
    return EXIT_OK


def parse_values(text: str) -> List[float]:
    """Parse a comma-separated list of numbers."""
    try:
        return [float(v) for v in text.split(',') if v.strip()]
    except ValueError:
        raise ConfigurationError(f"--values must be comma-separated numbers, got {text!r}")


def cmd_ablate(args, argv: List[str]) -> int:
    """Rescore a trace file along one axis without resampling."""
    started_at = _now()
    out_dir = Path(args.out)
    config = _detector_config(args)
    values = parse_values(args.values)
    if not values:
        raise ConfigurationError("--values is empty")

    traces = read_traces(args.traces)
    try:
        grid = ablation_sweep(traces, args.axis, values, config)
    except ValueError as e:
        raise InputFormatError(str(e))
    if not grid.points:
        raise ConfigurationError('; '.join(f"{args.axis}={v}: {m}" for v, m in grid.errors))

    write_csv(grid.to_frame(), out_dir / ABLATION_FILE)
    write_manifest(
        out_dir, 'ablate', argv, started_at,
        detector_config=config.to_dict(),
        traces={'path': str(args.traces), 'sha256': file_digest(args.traces)},
        axis=args.axis,
        values=args.values,
    )
    for point in grid.points:
        print(f"{args.axis}={point.axis_value:g}: {point.rate.rate_display}% "
              f"({point.rate.hallucinated_tokens}/{point.rate.scored_tokens})")
    return EXIT_OK


COMMANDS = {
    'sample': cmd_sample,
    'score': cmd_score,
    'analyze': cmd_analyze,
    'compare': cmd_compare,
    'ablate': cmd_ablate,
}


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_detector_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--threshold', type=float, default=0.5, help="Variance threshold tau (default 0.5)")
    parser.add_argument('--denominator', choices=sorted(DENOMINATOR_FLAGS), default='n',
                        help="Variance denominator: n (population) or n-1 (sample)")
    parser.add_argument('--min-support', type=int, default=2,
                        help="Samples needed at a position before it is scored (default 2)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='tokenvar',
        description="Token-level hallucination detection from cross-sample log-probability variance",
    )
    parser.add_argument('--version', action='version', version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest='command', required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--out', required=True, help="Output directory")
    common.add_argument('--verbose', action='store_true', help="Debug logging")

    sample = sub.add_parser('sample', parents=[common], help="Collect stochastic generations with logprobs")
    sample.add_argument('--corpus', required=True, help="Prompt corpus file")
    sample.add_argument('--adapter', choices=ADAPTERS, default='jsonl')
    sample.add_argument('--unanswerable-only', action='store_true',
                        help="Keep only prompts without a gold answer")
    sample.add_argument('--context-limit', type=int, default=DEFAULT_CONTEXT_LIMIT,
                        help="Context truncation in characters (default 300)")
    sample.add_argument('--backend-url', help=f"Completions endpoint base URL ({ENV_PREFIX}BACKEND_URL)")
    sample.add_argument('--model', help=f"Model id ({ENV_PREFIX}MODEL)")
    sample.add_argument('--mock', action='store_true', help="Use the deterministic mock backend")
    sample.add_argument('--mock-spec', help="JSON file with mock model parameters")
    sample.add_argument('--num-samples', type=int, default=3)
    sample.add_argument('--temperature', type=float, default=0.9)
    sample.add_argument('--top-p', type=float, default=0.95)
    sample.add_argument('--top-k', type=int, default=50)
    sample.add_argument('--max-new-tokens', type=int, default=40)
    sample.add_argument('--seed', type=int, help=f"Run seed ({ENV_PREFIX}SEED)")
    sample.add_argument('--max-concurrency', type=int, help=f"In-flight requests ({ENV_PREFIX}MAX_CONCURRENCY)")
    sample.add_argument('--max-retries', type=int, help=f"Retries per request ({ENV_PREFIX}MAX_RETRIES)")
    sample.add_argument('--timeout', type=float, help=f"Request timeout in seconds ({ENV_PREFIX}REQUEST_TIMEOUT)")
    sample.add_argument('--no-top-k-support', action='store_true',
                        help="The backend cannot honour top_k; sample without it")
    sample.add_argument('--no-seed-support', action='store_true',
                        help="The backend ignores per-request seeds; send none")

    score = sub.add_parser('score', parents=[common], help="Score traces token by token")
    score.add_argument('traces', help="Trace file")
    _add_detector_flags(score)
    score.add_argument('--corpus', help="Prompt corpus, to attach prompt text and gold answers")
    score.add_argument('--adapter', choices=ADAPTERS, default='jsonl')
    score.add_argument('--context-limit', type=int, default=DEFAULT_CONTEXT_LIMIT)

    analyze = sub.add_parser('analyze', parents=[common], help="Rates, profiles, distributions, heatmap")
    analyze.add_argument('scored', nargs='+', help="Scored files")
    analyze.add_argument('--bins', type=int, default=DEFAULT_BINS)
    analyze.add_argument('--max-position', type=int, default=DEFAULT_MAX_POSITION)
    analyze.add_argument('--heatmap-prompt', help="Prompt id shared by every run")

    compare = sub.add_parser('compare', parents=[common], help="Compare two scored runs")
    compare.add_argument('scored_a')
    compare.add_argument('scored_b')
    compare.add_argument('--bins', type=int, default=DEFAULT_BINS)
    compare.add_argument('--max-position', type=int, default=DEFAULT_MAX_POSITION)

    ablate = sub.add_parser('ablate', parents=[common], help="Sweep one detector parameter")
    ablate.add_argument('traces', help="Trace file")
    ablate.add_argument('--axis', choices=AXES, required=True)
    ablate.add_argument('--values', required=True, help="Comma-separated axis values")
    _add_detector_flags(ablate)

    return parser


def _report_failure(error: BaseException, exit_code: int) -> int:
    summary = {'error': type(error).__name__, 'exit_code': exit_code, 'message': str(error)}
    print(json.dumps(summary), file=sys.stderr)
    return exit_code


def main(argv: Optional[List[str]] = None) -> int:
    """
    Run one subcommand.

    Returns:
        Process exit code: 0 ok, 2 configuration, 3 input format, 4 backend, 5 internal
    """
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)

    try:
        return COMMANDS[args.command](args, argv)
    except ToolkitError as e:
        logger.error(str(e))
        return _report_failure(e, e.exit_code)
    except FileNotFoundError as e:
        return _report_failure(InputFormatError(f"{e.filename}: file not found"), InputFormatError.exit_code)
    except Exception as e:
        logger.exception(f"Unexpected error in '{args.command}'")
        return _report_failure(e, EXIT_INTERNAL)
