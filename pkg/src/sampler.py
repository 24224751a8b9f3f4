"""
Sampler Module
Collects n stochastic generations with per-token log probabilities from an
OpenAI-compatible completions endpoint
"""

import hashlib
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import requests
from dotenv import load_dotenv
from loguru import logger
from tqdm import tqdm

from .errors import BackendError, LogprobsUnavailableError, SamplingError
from .trace import (
    DEFAULT_CONTEXT_LIMIT,
    DecodingConfig,
    GenerationSample,
    GenerationSet,
    PromptRecord,
    build_prompt,
    generation_set_to_dict,
    trace_keys,
)
from .utils import append_jsonl, derive_seed

load_dotenv()

API_KEY_ENV = 'TOKENVAR_API_KEY'


@dataclass(frozen=True)
class BackendConfig:
    """Connection settings for an HTTP completions backend."""

    base_url: str
    model_id: str
    api_key: Optional[str] = field(default=None, repr=False)
    request_timeout: float = 60.0
    max_retries: int = 3
    max_concurrency: int = 4
    supports_top_k: bool = True
    supports_seed: bool = True
    retry_backoff: float = 1.0

    def __post_init__(self):
        if not self.base_url:
            raise ValueError("base_url is required")
        if not self.model_id:
            raise ValueError("model_id is required")
        if self.max_concurrency < 1:
            raise ValueError(f"max_concurrency must be at least 1, got {self.max_concurrency}")
        if self.max_retries < 0:
            raise ValueError(f"max_retries must be nonnegative, got {self.max_retries}")
        if not self.request_timeout > 0:
            raise ValueError(f"request_timeout must be positive, got {self.request_timeout}")

    @classmethod
    def from_env(cls, base_url: str, model_id: str, **kwargs) -> 'BackendConfig':
        """Build a config whose API key comes from the environment."""
        return cls(base_url=base_url, model_id=model_id, api_key=os.getenv(API_KEY_ENV), **kwargs)

    @property
    def url_hash(self) -> str:
        return hashlib.sha256(self.base_url.encode('utf-8')).hexdigest()[:16]


class CompletionBackend:
    """
    Client for a completions endpoint that reports per-token log probabilities.

    Each call requests a single sampled completion (n=1) and asks for the
    log probability of every emitted token.
    """

    FINISH_REASONS = {'length': 'length', 'stop': 'stop', 'eos': 'stop'}

    def __init__(self, config: BackendConfig, session: Optional[requests.Session] = None):
        """
        Initialize the backend client.

        Args:
            config: Connection settings
            session: Optional requests session (tests pass a mock)
        """
        self.config = config
        self.session = session or requests.Session()
        self.headers = {'Content-Type': 'application/json'}
        if config.api_key:
            self.headers['Authorization'] = f"Bearer {config.api_key}"
        self._top_k_warned = False
        self._lock = threading.Lock()

    @property
    def model_id(self) -> str:
        return self.config.model_id

    @property
    def supports_seed(self) -> bool:
        return self.config.supports_seed

    @property
    def max_concurrency(self) -> int:
        return self.config.max_concurrency

    @property
    def endpoint(self) -> str:
        return self.config.base_url.rstrip('/') + '/completions'

    def identity(self) -> Dict:
        return {'backend': 'http', 'model_id': self.model_id, 'url_hash': self.config.url_hash}

    def build_payload(self, prompt: str, config: DecodingConfig, seed: Optional[int]) -> Dict:
        """
        Build the JSON request body for one sampled completion.

        Args:
            prompt: Prompt text
            config: Decoding parameters
            seed: Per-sample seed, or None to rely on backend randomness

        Returns:
            Request payload
        """
        payload = {
            'model': self.config.model_id,
            'prompt': prompt,
            'max_tokens': config.max_new_tokens,
            'temperature': config.temperature,
            'top_p': config.top_p,
            'n': 1,
            'logprobs': 1,
        }
        if config.top_k:
            if self.config.supports_top_k:
                payload['top_k'] = config.top_k
            else:
                with self._lock:
                    if not self._top_k_warned:
                        logger.warning(
                            f"Backend {self.model_id} cannot honor top_k; sampling without top_k={config.top_k}"
                        )
                        self._top_k_warned = True
        if seed is not None:
            payload['seed'] = seed
        return payload

    def parse_response(self, body: Dict, sample_index: int) -> GenerationSample:
        """
        Extract tokens and log probabilities from a response body.

        Accepts both the completions layout (logprobs.tokens / logprobs.token_logprobs)
        and the chat layout (logprobs.content[].token / .logprob).

        Raises:
            LogprobsUnavailableError: the response carries no per-token log probabilities
            BackendError: the response is otherwise unusable
        """
        choices = body.get('choices') if isinstance(body, dict) else None
        if not choices:
            raise BackendError("Backend response has no choices")
        choice = choices[0]
        logprobs = choice.get('logprobs')
        if not logprobs:
            raise LogprobsUnavailableError(
                f"Backend {self.model_id} returned no log probabilities; detection needs them"
            )

        if isinstance(logprobs.get('content'), list):
            tokens = [entry.get('token') for entry in logprobs['content']]
            values = [entry.get('logprob') for entry in logprobs['content']]
        elif 'tokens' in logprobs and 'token_logprobs' in logprobs:
            tokens = logprobs['tokens']
            values = logprobs['token_logprobs']
        else:
            raise LogprobsUnavailableError(
                f"Backend {self.model_id} returned log probabilities in an unknown layout"
            )
        if any(v is None for v in values):
            raise LogprobsUnavailableError(f"Backend {self.model_id} omitted some token log probabilities")

        finish_reason = self.FINISH_REASONS.get(choice.get('finish_reason'), 'other')
        try:
            # backends occasionally report +0.0000001 for certain tokens
            return GenerationSample(
                sample_index=sample_index,
                tokens=tokens,
                logprobs=[min(float(v), 0.0) for v in values],
                finish_reason=finish_reason,
            )
        except (TypeError, ValueError) as e:
            raise BackendError(f"Backend {self.model_id} returned an invalid sample: {e}")

    def complete(self, prompt: str, config: DecodingConfig, sample_index: int,
                 seed: Optional[int] = None, prompt_id: str = '') -> GenerationSample:
        """
        Request one sampled completion, retrying transport errors and HTTP 429/5xx.

        Returns:
            The sample with the backend-reported log probability of each emitted token
        """
        payload = self.build_payload(prompt, config, seed)
        attempts = self.config.max_retries + 1
        last_error = None

        for attempt in range(attempts):
            try:
                response = self.session.post(
                    self.endpoint,
                    headers=self.headers,
                    json=payload,
                    timeout=self.config.request_timeout,
                )
            except requests.exceptions.RequestException as req_err:
                last_error = f"transport error: {req_err}"
            else:
                if response.status_code == 200:
                    try:
                        body = response.json()
                    except ValueError as e:
                        raise BackendError(f"Backend {self.model_id} returned invalid JSON: {e}")
                    return self.parse_response(body, sample_index)
                if response.status_code == 429 or response.status_code >= 500:
                    last_error = f"HTTP {response.status_code}"
                else:
                    raise BackendError(
                        f"Backend {self.model_id} rejected the request for '{prompt_id}' "
                        f"(HTTP {response.status_code}): {str(response.text)[:200]}"
                    )

            if attempt < attempts - 1:
                wait = self.config.retry_backoff * (2 ** attempt)
                logger.warning(
                    f"{last_error} for '{prompt_id}' sample {sample_index}, "
                    f"retry {attempt + 1}/{self.config.max_retries} in {wait:.1f}s"
                )
                time.sleep(wait)

        raise BackendError(
            f"Backend {self.model_id} failed for '{prompt_id}' sample {sample_index} "
            f"after {attempts} attempts (last error: {last_error})"
        )


def sample_seeds(prompt_id: str, config: DecodingConfig) -> List[Optional[int]]:
    """One sub-seed per sample, mixed from the run seed, prompt id and sample index."""
    if config.seed is None:
        return [None] * config.num_samples
    return [derive_seed(config.seed, prompt_id, i) for i in range(config.num_samples)]


def sample_generations(prompt: str, config: DecodingConfig, backend, prompt_id: str = '') -> GenerationSet:
    """
    Collect config.num_samples generations for one prompt.

    Requests fan out over at most backend.max_concurrency threads and are
    reassembled in sample_index order. Samples get distinct sub-seeds when the
    backend supports seeding, otherwise sampling relies on backend randomness.

    Args:
        prompt: Prompt text
        config: Decoding parameters
        backend: CompletionBackend or MockBackend
        prompt_id: Id recorded in the set and mixed into the sub-seeds

    Returns:
        GenerationSet with exactly config.num_samples samples

    Raises:
        LogprobsUnavailableError: the backend cannot report log probabilities
        SamplingError: some samples failed after retries
    """
    n = config.num_samples
    if backend.supports_seed:
        seeds = sample_seeds(prompt_id, config)
    else:
        seeds = [None] * n
    samples: List[Optional[GenerationSample]] = [None] * n
    failures = {}

    with ThreadPoolExecutor(max_workers=min(backend.max_concurrency, n)) as pool:
        futures = {
            pool.submit(backend.complete, prompt, config, i, seeds[i], prompt_id): i
            for i in range(n)
        }
        for future in as_completed(futures):
            i = futures[future]
            try:
                samples[i] = future.result()
            except BackendError as e:
                failures[i] = e

    for error in failures.values():
        if isinstance(error, LogprobsUnavailableError):
            raise error
    if failures:
        succeeded = n - len(failures)
        first = failures[min(failures)]
        raise SamplingError(
            f"Collected {succeeded} of {n} samples for '{prompt_id}': {first}",
            succeeded=succeeded,
            requested=n,
        )

    return GenerationSet(prompt_id=prompt_id, model_id=backend.model_id, config=config, samples=samples)


@dataclass
class SamplingSummary:
    written: int = 0
    skipped: int = 0
    failed: int = 0


def _repair_tail(path: Path) -> None:
    """Drop a partial last line left by an interrupted writer."""
    if not path.exists() or path.stat().st_size == 0:
        return
    data = path.read_bytes()
    if data.endswith(b'\n'):
        return
    keep = data.rfind(b'\n') + 1
    logger.warning(f"Dropping incomplete last line of {path}")
    with open(path, 'r+b') as f:
        f.truncate(keep)


def run_sampling(prompts: List[PromptRecord], config: DecodingConfig, backend, out_path,
                 context_limit: int = DEFAULT_CONTEXT_LIMIT, errors_path=None,
                 progress: bool = False) -> SamplingSummary:
    """
    Sample every prompt and append one trace line per prompt.

    Prompts already present in out_path for this backend's model are skipped,
    so an interrupted run can be resumed. A prompt that fails is recorded in the
    error sidecar and the batch continues.

    Args:
        prompts: Prompt records
        config: Decoding parameters
        backend: CompletionBackend or MockBackend
        out_path: Trace file (appended)
        context_limit: Context truncation in characters
        errors_path: Error sidecar (defaults to errors.jsonl next to out_path)
        progress: Show a progress bar

    Returns:
        Counts of written, skipped and failed prompts
    """
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    errors_path = Path(errors_path) if errors_path else out_path.with_name('errors.jsonl')
    _repair_tail(out_path)
    done = trace_keys(out_path)
    summary = SamplingSummary()

    with open(out_path, 'a', encoding='utf-8', newline='\n') as trace_file:
        for record in tqdm(prompts, desc=f"Sampling {backend.model_id}", disable=not progress):
            if (record.id, backend.model_id) in done:
                summary.skipped += 1
                continue
            prompt = build_prompt(record, context_limit)
            try:
                gen_set = sample_generations(prompt, config, backend, prompt_id=record.id)
            except LogprobsUnavailableError:
                raise
            except BackendError as e:
                logger.error(f"Prompt '{record.id}' failed: {e}")
                with open(errors_path, 'a', encoding='utf-8', newline='\n') as errors_file:
                    append_jsonl({'prompt_id': record.id, 'stage': 'sample', 'message': str(e)}, errors_file)
                summary.failed += 1
                continue
            append_jsonl(generation_set_to_dict(gen_set), trace_file)
            done.add((record.id, backend.model_id))
            summary.written += 1

    if summary.skipped:
        logger.warning(f"Skipped {summary.skipped} prompts already present in {out_path}")
    logger.info(
        f"Sampling finished: {summary.written} written, {summary.skipped} skipped, {summary.failed} failed"
    )
    return summary
