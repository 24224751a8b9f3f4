"""
Mock Backend Module
Deterministic stand-in for an inference backend, with noise planted at known
positions so detection quality can be checked against closed-form variances
"""

from dataclasses import dataclass
from typing import Dict, FrozenSet, Optional, Tuple

import numpy as np

from .errors import BackendError, ConfigurationError, InputFormatError
from .trace import DecodingConfig, GenerationSample, GenerationSet
from .utils import derive_seed, load_from_json

DEFAULT_VOCAB = (
    ' the', ' of', ' and', ' in', ' was', ' by', ' Paris', ' Curie', ' Marie',
    ' discovered', ' 1898', ' river', ' king', ' city', ' first', ' born', '.', ',',
)


@dataclass(frozen=True)
class PlantedRegion:
    """Half-open position range [start, end) whose logprobs carry extra noise."""

    start: int
    end: int
    noise_sd: float


@dataclass(frozen=True)
class MockModelSpec:
    """
    Parameters of the mock model.

    Every sample of a prompt emits the same tokens; only the logprobs differ, by
    Gaussian noise whose standard deviation depends on the position.
    """

    seed: int = 0
    vocab: Tuple[str, ...] = DEFAULT_VOCAB
    answer_length: int = 40
    base_logprob: float = -6.0
    stable_noise_sd: float = 0.05
    planted_regions: Tuple[PlantedRegion, ...] = ()
    fail_on_ids: Tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, 'vocab', tuple(self.vocab))
        object.__setattr__(self, 'planted_regions', tuple(
            r if isinstance(r, PlantedRegion) else PlantedRegion(*r) for r in self.planted_regions
        ))
        object.__setattr__(self, 'fail_on_ids', tuple(str(i) for i in self.fail_on_ids))

        if not self.vocab:
            raise ValueError("vocab must not be empty")
        if self.answer_length < 1:
            raise ValueError(f"answer_length must be positive, got {self.answer_length}")
        if self.base_logprob > 0:
            raise ValueError(f"base_logprob must be <= 0, got {self.base_logprob}")
        if self.stable_noise_sd < 0:
            raise ValueError(f"stable_noise_sd must be nonnegative, got {self.stable_noise_sd}")

        previous_end = 0
        for region in sorted(self.planted_regions, key=lambda r: r.start):
            if not 0 <= region.start < region.end <= self.answer_length:
                raise ValueError(
                    f"planted region [{region.start}, {region.end}) outside [0, {self.answer_length})"
                )
            if region.start < previous_end:
                raise ValueError(f"planted region [{region.start}, {region.end}) overlaps another")
            if not region.noise_sd > self.stable_noise_sd:
                raise ValueError(
                    f"planted noise_sd {region.noise_sd} must exceed stable_noise_sd {self.stable_noise_sd}"
                )
            previous_end = region.end

    def noise_profile(self, length: int) -> np.ndarray:
        """Noise standard deviation at each of the first `length` positions."""
        sds = np.full(length, self.stable_noise_sd, dtype=float)
        for region in self.planted_regions:
            sds[region.start:min(region.end, length)] = region.noise_sd
        return sds

    def planted_positions(self, length: Optional[int] = None) -> FrozenSet[int]:
        """Positions covered by planted regions, optionally capped at a length."""
        limit = self.answer_length if length is None else min(length, self.answer_length)
        return frozenset(
            t for region in self.planted_regions for t in range(region.start, min(region.end, limit))
        )

    def planted_spans(self, length: Optional[int] = None) -> Tuple[FrozenSet[int], ...]:
        """Planted regions as separate position sets (empty ones dropped)."""
        limit = self.answer_length if length is None else min(length, self.answer_length)
        spans = (frozenset(range(r.start, min(r.end, limit))) for r in self.planted_regions)
        return tuple(span for span in spans if span)

    def to_dict(self) -> Dict:
        return {
            'seed': self.seed,
            'vocab': list(self.vocab),
            'answer_length': self.answer_length,
            'base_logprob': self.base_logprob,
            'stable_noise_sd': self.stable_noise_sd,
            'planted_regions': [[r.start, r.end, r.noise_sd] for r in self.planted_regions],
            'fail_on_ids': list(self.fail_on_ids),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'MockModelSpec':
        defaults = cls()
        return cls(
            seed=int(data.get('seed', defaults.seed)),
            vocab=data.get('vocab', defaults.vocab),
            answer_length=int(data.get('answer_length', defaults.answer_length)),
            base_logprob=float(data.get('base_logprob', defaults.base_logprob)),
            stable_noise_sd=float(data.get('stable_noise_sd', defaults.stable_noise_sd)),
            planted_regions=[
                PlantedRegion(int(r[0]), int(r[1]), float(r[2])) for r in data.get('planted_regions', [])
            ],
            fail_on_ids=data.get('fail_on_ids', ()),
        )

    @classmethod
    def load(cls, path) -> 'MockModelSpec':
        try:
            return cls.from_dict(load_from_json(path))
        except (OSError, InputFormatError) as e:
            raise ConfigurationError(f"Cannot read mock spec {path}: {e}")
        except (TypeError, ValueError, IndexError, AttributeError) as e:
            raise ConfigurationError(f"Invalid mock spec {path}: {e}")


def mock_sample(prompt: str, config: DecodingConfig, spec: MockModelSpec, sample_index: int,
                prompt_id: str = '') -> GenerationSample:
    """
    Draw one mock sample.

    Tokens depend only on (spec.seed, prompt), so they line up across samples.
    Noise depends on (spec.seed, config.seed, prompt_id, sample_index).
    """
    length = min(spec.answer_length, config.max_new_tokens)
    run_seed = 0 if config.seed is None else config.seed

    token_rng = np.random.default_rng(derive_seed('tokens', spec.seed, prompt))
    token_ids = token_rng.integers(0, len(spec.vocab), size=length)

    noise_rng = np.random.default_rng(derive_seed('noise', spec.seed, run_seed, prompt_id, sample_index))
    noise = noise_rng.standard_normal(length) * spec.noise_profile(length)
    logprobs = np.minimum(spec.base_logprob + noise, 0.0)

    return GenerationSample(
        sample_index=sample_index,
        tokens=[spec.vocab[i] for i in token_ids],
        logprobs=logprobs.tolist(),
        finish_reason='length' if spec.answer_length > config.max_new_tokens else 'stop',
    )


def mock_generate(prompt: str, config: DecodingConfig, spec: MockModelSpec,
                  model_id: str = 'mock', prompt_id: str = '') -> GenerationSet:
    """
    Generate a full set of mock samples for a prompt.

    Args:
        prompt: Prompt text
        config: Decoding config (num_samples, max_new_tokens and seed are used)
        spec: Mock model parameters
        model_id: Model id recorded in the set
        prompt_id: Prompt id recorded in the set and mixed into the noise seed

    Returns:
        A GenerationSet that is a pure function of (prompt, prompt_id, config.seed, spec.seed)
    """
    samples = [mock_sample(prompt, config, spec, i, prompt_id) for i in range(config.num_samples)]
    return GenerationSet(prompt_id=prompt_id, model_id=model_id, config=config, samples=samples)


class MockBackend:
    """
    Backend adapter over mock_sample. Stateless, so safe to call from many threads.
    """

    supports_seed = True

    def __init__(self, spec: MockModelSpec, model_id: str = 'mock', max_concurrency: int = 4):
        if max_concurrency < 1:
            raise ValueError(f"max_concurrency must be at least 1, got {max_concurrency}")
        self.spec = spec
        self.model_id = model_id
        self.max_concurrency = max_concurrency

    def complete(self, prompt: str, config: DecodingConfig, sample_index: int,
                 seed: Optional[int] = None, prompt_id: str = '') -> GenerationSample:
        # seed is unused: mock noise is keyed on prompt_id so it matches mock_generate
        if prompt_id in self.spec.fail_on_ids:
            raise BackendError(f"mock backend configured to fail on '{prompt_id}'")
        return mock_sample(prompt, config, self.spec, sample_index, prompt_id)

    def identity(self) -> Dict:
        return {'backend': 'mock', 'model_id': self.model_id, 'spec_seed': self.spec.seed}
