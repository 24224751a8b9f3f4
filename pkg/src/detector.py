"""
Detector Module
Scores each token position by the variance of its log probability across
stochastic generations and flags high-variance tokens as hallucinated
"""

import math
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

from loguru import logger

from .errors import InsufficientSupportError
from .trace import GenerationSet, ScoredGeneration, TokenScore

POPULATION = 'population_n'
SAMPLE = 'sample_n_minus_1'
DENOMINATORS = (POPULATION, SAMPLE)


@dataclass(frozen=True)
class DetectorConfig:
    """Scoring parameters."""

    threshold: float = 0.5
    variance_denominator: str = POPULATION
    min_support: int = 2
    alignment: str = 'positional'

    def __post_init__(self):
        if not self.threshold >= 0:
            raise ValueError(f"threshold must be >= 0, got {self.threshold}")
        if self.variance_denominator not in DENOMINATORS:
            raise ValueError(
                f"variance_denominator must be one of {DENOMINATORS}, got '{self.variance_denominator}'"
            )
        if self.min_support < 2:
            raise ValueError(f"min_support must be at least 2, got {self.min_support}")
        if self.alignment != 'positional':
            raise ValueError(f"Unsupported alignment '{self.alignment}' (only 'positional')")

    def to_dict(self) -> dict:
        return {
            'threshold': self.threshold,
            'variance_denominator': self.variance_denominator,
            'min_support': self.min_support,
            'alignment': self.alignment,
        }


def position_stats(logprobs_at_t: Sequence[float], denom: str = POPULATION) -> Tuple[float, float]:
    """
    Mean and variance of the log probabilities observed at one position.

    Two-pass with exactly rounded sums, so the result does not depend on the
    order of the inputs. An all-equal list has variance exactly 0.

    Args:
        logprobs_at_t: One log probability per contributing sample
        denom: POPULATION (divide by n) or SAMPLE (divide by n - 1)

    Returns:
        (mean, variance)

    Raises:
        InsufficientSupportError: fewer than two values
    """
    n = len(logprobs_at_t)
    if n < 2:
        raise InsufficientSupportError(f"variance needs at least 2 samples, got {n}")
    if denom not in DENOMINATORS:
        raise ValueError(f"Unknown denominator '{denom}'")

    first = logprobs_at_t[0]
    if all(lp == first for lp in logprobs_at_t):
        # fsum(n * x) / n can miss x by an ulp
        return float(first), 0.0

    mean = math.fsum(logprobs_at_t) / n
    squared = math.fsum((lp - mean) ** 2 for lp in logprobs_at_t)
    d = n if denom == POPULATION else n - 1
    return mean, max(squared / d, 0.0)


@dataclass
class ScoringFailure:
    index: int
    prompt_id: str
    message: str


@dataclass
class CorpusScores:
    """Result of scoring a corpus: scored records in input order plus per-set failures."""

    scored: List[ScoredGeneration] = field(default_factory=list)
    failures: List[ScoringFailure] = field(default_factory=list)


class VarianceDetector:
    """
    Token-level hallucination detector over sets of sampled generations.
    """

    def __init__(self, config: DetectorConfig = None):
        """
        Initialize the detector.

        Args:
            config: Scoring parameters (defaults: tau=0.5, population variance, min_support=2)
        """
        self.config = config or DetectorConfig()

    def score_generation_set(self, gen_set: GenerationSet) -> ScoredGeneration:
        """
        Annotate the reference sample of a set token by token.

        Position t gathers the log probability at index t from every sample long
        enough to have one, whatever token that sample emitted there.

        Args:
            gen_set: Samples for one prompt and model

        Returns:
            ScoredGeneration with one TokenScore per reference token
        """
        if not gen_set.samples:
            raise ValueError(f"GenerationSet '{gen_set.prompt_id}' has no samples")

        cfg = self.config
        reference = gen_set.reference
        token_scores = []
        for t, token in enumerate(reference.tokens):
            column = [sample.logprobs[t] for sample in gen_set.samples if len(sample) > t]
            support = len(column)
            if support >= cfg.min_support:
                mean, variance = position_stats(column, cfg.variance_denominator)
                flagged = variance > cfg.threshold
            else:
                mean = math.fsum(column) / support
                variance = None
                flagged = False
            token_scores.append(TokenScore(
                position=t,
                token=token,
                mean_logprob=mean,
                variance=variance,
                support=support,
                hallucinated=flagged,
            ))

        return ScoredGeneration(
            prompt_id=gen_set.prompt_id,
            model_id=gen_set.model_id,
            answer_text=''.join(reference.tokens),
            threshold=cfg.threshold,
            token_scores=token_scores,
        )

    def score_corpus(self, traces: Sequence[GenerationSet]) -> CorpusScores:
        """
        Score every set, collecting failures instead of aborting.

        Args:
            traces: Generation sets

        Returns:
            CorpusScores with scored records in input order
        """
        result = CorpusScores()
        for index, gen_set in enumerate(traces):
            try:
                if len(gen_set.samples) < self.config.min_support:
                    raise InsufficientSupportError(
                        f"only {len(gen_set.samples)} sample(s); variance needs at least "
                        f"{self.config.min_support}"
                    )
                scored = self.score_generation_set(gen_set)
            except ValueError as e:
                logger.warning(f"Could not score '{gen_set.prompt_id}': {e}")
                result.failures.append(ScoringFailure(index, gen_set.prompt_id, str(e)))
                continue
            result.scored.append(scored)

        logger.info(f"Scored {len(result.scored)} generation sets ({len(result.failures)} failed)")
        return result


def rethreshold(scored: ScoredGeneration, threshold: float) -> ScoredGeneration:
    """Re-flag a scored generation at a new threshold, reusing its stored variances."""
    if not threshold >= 0:
        raise ValueError(f"threshold must be >= 0, got {threshold}")
    token_scores = [
        TokenScore(
            position=s.position,
            token=s.token,
            mean_logprob=s.mean_logprob,
            variance=s.variance,
            support=s.support,
            hallucinated=s.variance is not None and s.variance > threshold,
        )
        for s in scored.token_scores
    ]
    return ScoredGeneration(
        prompt_id=scored.prompt_id,
        model_id=scored.model_id,
        answer_text=scored.answer_text,
        threshold=threshold,
        token_scores=token_scores,
        prompt=scored.prompt,
        gold_answer=scored.gold_answer,
    )
