"""
Trace Module
Data model for prompts, sampled generations and scored outputs, plus every file
format the toolkit reads or writes
"""

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

from loguru import logger

from .errors import DuplicatePromptError, InputFormatError, SchemaVersionError
from .utils import iter_jsonl, load_from_json, truncate_text, write_jsonl

SCHEMA_VERSION = "1"
DEFAULT_CONTEXT_LIMIT = 300
XSUM_INSTRUCTION = "Summarize the article in one sentence."

DATASETS = ('squad_v2', 'triviaqa_nocontext', 'xsum', 'custom')
ADAPTERS = ('jsonl', 'squad_v2', 'triviaqa', 'xsum')
FINISH_REASONS = ('length', 'stop', 'other')


@dataclass(frozen=True)
class PromptRecord:
    """One evaluation item."""

    id: str
    dataset: str
    context: str
    question: str
    gold_answer: Optional[str] = None

    def __post_init__(self):
        if not self.id:
            raise ValueError("PromptRecord.id must be nonempty")
        if self.dataset not in DATASETS:
            raise ValueError(f"Unknown dataset '{self.dataset}' (expected one of {DATASETS})")

    @property
    def is_unanswerable(self) -> bool:
        return not self.gold_answer


@dataclass(frozen=True)
class DecodingConfig:
    """Stochastic decoding parameters shared by every sample of a prompt."""

    temperature: float = 0.9
    top_p: float = 0.95
    top_k: int = 50
    max_new_tokens: int = 40
    num_samples: int = 3
    seed: Optional[int] = None

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if not 0 < self.top_p <= 1:
            raise ValueError(f"top_p must be in (0, 1], got {self.top_p}")
        if self.top_k < 0:
            raise ValueError(f"top_k must be nonnegative, got {self.top_k}")
        if self.max_new_tokens < 1:
            raise ValueError(f"max_new_tokens must be positive, got {self.max_new_tokens}")
        if self.num_samples < 1:
            raise ValueError(f"num_samples must be at least 1, got {self.num_samples}")

    def to_dict(self) -> Dict:
        return {
            'temperature': self.temperature,
            'top_p': self.top_p,
            'top_k': self.top_k,
            'max_new_tokens': self.max_new_tokens,
            'num_samples': self.num_samples,
            'seed': self.seed,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'DecodingConfig':
        return cls(
            temperature=float(data['temperature']),
            top_p=float(data['top_p']),
            top_k=int(data['top_k']),
            max_new_tokens=int(data['max_new_tokens']),
            num_samples=int(data['num_samples']),
            seed=None if data.get('seed') is None else int(data['seed']),
        )


@dataclass(frozen=True)
class GenerationSample:
    """One sampled completion with the log probability of every emitted token."""

    sample_index: int
    tokens: Tuple[str, ...]
    logprobs: Tuple[float, ...]
    finish_reason: str = 'other'

    def __post_init__(self):
        object.__setattr__(self, 'tokens', tuple(self.tokens))
        object.__setattr__(self, 'logprobs', tuple(float(lp) for lp in self.logprobs))
        if len(self.tokens) != len(self.logprobs):
            raise ValueError(
                f"sample {self.sample_index}: {len(self.tokens)} tokens but "
                f"{len(self.logprobs)} logprobs"
            )
        for lp in self.logprobs:
            if not math.isfinite(lp) or lp > 0:
                raise ValueError(f"sample {self.sample_index}: logprob {lp!r} is not a finite value <= 0")
        if self.finish_reason not in FINISH_REASONS:
            raise ValueError(f"Unknown finish_reason '{self.finish_reason}'")

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class GenerationSet:
    """The n samples collected for one prompt and model."""

    prompt_id: str
    model_id: str
    config: DecodingConfig
    samples: Tuple[GenerationSample, ...]
    reference_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'samples', tuple(self.samples))
        if not self.samples:
            raise ValueError(f"GenerationSet '{self.prompt_id}' has no samples")
        if not 0 <= self.reference_index < len(self.samples):
            raise ValueError(
                f"reference_index {self.reference_index} out of range for "
                f"{len(self.samples)} samples"
            )

    @property
    def reference(self) -> GenerationSample:
        return self.samples[self.reference_index]

    def truncated(self, k: int) -> 'GenerationSet':
        """Keep only the first k samples (reference falls back to sample 0 if dropped)."""
        reference_index = self.reference_index if self.reference_index < k else 0
        return replace(self, samples=self.samples[:k], reference_index=reference_index)


@dataclass(frozen=True)
class TokenScore:
    """Cross-sample statistics for one position of the reference generation."""

    position: int
    token: str
    mean_logprob: Optional[float]
    variance: Optional[float]
    support: int
    hallucinated: bool

    @property
    def is_scored(self) -> bool:
        return self.variance is not None


@dataclass(frozen=True)
class ScoredGeneration:
    """A reference generation annotated token by token."""

    prompt_id: str
    model_id: str
    answer_text: str
    threshold: float
    token_scores: Tuple[TokenScore, ...]
    prompt: Optional[str] = None
    gold_answer: Optional[str] = None
    hallucinated_count: int = field(init=False)
    scored_count: int = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, 'token_scores', tuple(self.token_scores))
        object.__setattr__(self, 'hallucinated_count', sum(1 for s in self.token_scores if s.hallucinated))
        object.__setattr__(self, 'scored_count', sum(1 for s in self.token_scores if s.is_scored))

    @property
    def total_count(self) -> int:
        return len(self.token_scores)


def build_prompt(record: PromptRecord, context_limit: int = DEFAULT_CONTEXT_LIMIT) -> str:
    """
    Build the completion prompt for a record.

    Args:
        record: The prompt record
        context_limit: Maximum context length in characters

    Returns:
        The truncated context followed by the question block
    """
    if context_limit < 0:
        raise ValueError(f"context_limit must be nonnegative, got {context_limit}")
    context = truncate_text(record.context, context_limit)
    return f"{context}\n\nQ: {record.question}\nA:"


# ---------------------------------------------------------------------------
# Prompt corpora
# ---------------------------------------------------------------------------

def _records_from_jsonl(path) -> Iterable[Tuple[int, PromptRecord]]:
    for line_number, row in iter_jsonl(path):
        try:
            record = PromptRecord(
                id=str(row['id']),
                dataset=row.get('dataset', 'custom'),
                context=row.get('context', '') or '',
                question=row['question'],
                gold_answer=row.get('gold_answer') or None,
            )
        except (KeyError, ValueError, TypeError) as e:
            raise InputFormatError(f"{path}: line {line_number}: invalid prompt record ({e})")
        yield line_number, record


def _records_from_squad(path) -> Iterable[Tuple[int, PromptRecord]]:
    data = load_from_json(path)
    try:
        for article in data['data']:
            for paragraph in article['paragraphs']:
                for qa in paragraph['qas']:
                    answers = [a['text'] for a in qa.get('answers', []) if a.get('text')]
                    impossible = qa.get('is_impossible', False) or not answers
                    yield None, PromptRecord(
                        id=str(qa['id']),
                        dataset='squad_v2',
                        context=paragraph['context'],
                        question=qa['question'],
                        gold_answer=None if impossible else answers[0],
                    )
    except (KeyError, TypeError, ValueError) as e:
        raise InputFormatError(f"{path}: not a SQuAD v2 file ({e!r})")


def _records_from_triviaqa(path) -> Iterable[Tuple[int, PromptRecord]]:
    data = load_from_json(path)
    try:
        for item in data['Data']:
            answer = item.get('Answer') or {}
            yield None, PromptRecord(
                id=str(item['QuestionId']),
                dataset='triviaqa_nocontext',
                context='',
                question=item['Question'],
                gold_answer=answer.get('Value') or None,
            )
    except (KeyError, TypeError, ValueError) as e:
        raise InputFormatError(f"{path}: not a TriviaQA file ({e!r})")


def _records_from_xsum(path) -> Iterable[Tuple[int, PromptRecord]]:
    for line_number, row in iter_jsonl(path):
        try:
            yield line_number, PromptRecord(
                id=str(row['id']),
                dataset='xsum',
                context=row['document'],
                question=XSUM_INSTRUCTION,
                gold_answer=row.get('summary') or None,
            )
        except (KeyError, TypeError, ValueError) as e:
            raise InputFormatError(f"{path}: line {line_number}: not an XSum record ({e!r})")


_ADAPTER_READERS = {
    'jsonl': _records_from_jsonl,
    'squad_v2': _records_from_squad,
    'triviaqa': _records_from_triviaqa,
    'xsum': _records_from_xsum,
}


def read_prompts(path, adapter: str = 'jsonl', unanswerable_only: bool = False) -> List[PromptRecord]:
    """
    Read a prompt corpus.

    Args:
        path: Corpus file
        adapter: One of 'jsonl', 'squad_v2', 'triviaqa', 'xsum'
        unanswerable_only: Keep only records without a gold answer

    Returns:
        Validated prompt records in file order

    Raises:
        InputFormatError: malformed line (named by number) or duplicate id
    """
    if adapter not in _ADAPTER_READERS:
        raise InputFormatError(f"Unknown adapter '{adapter}' (expected one of {ADAPTERS})")

    records = []
    seen = set()
    for line_number, record in _ADAPTER_READERS[adapter](path):
        if record.id in seen:
            raise DuplicatePromptError(record.id, line_number)
        seen.add(record.id)
        if unanswerable_only and not record.is_unanswerable:
            continue
        records.append(record)

    logger.info(f"Loaded {len(records)} prompts from {path} ({adapter})")
    return records


# ---------------------------------------------------------------------------
# Traces
# ---------------------------------------------------------------------------

def generation_set_to_dict(gen_set: GenerationSet) -> Dict:
    return {
        'schema_version': SCHEMA_VERSION,
        'prompt_id': gen_set.prompt_id,
        'model_id': gen_set.model_id,
        'config': gen_set.config.to_dict(),
        'reference_index': gen_set.reference_index,
        'samples': [
            {
                'sample_index': sample.sample_index,
                'tokens': list(sample.tokens),
                'logprobs': list(sample.logprobs),
                'finish_reason': sample.finish_reason,
            }
            for sample in gen_set.samples
        ],
    }


def generation_set_from_dict(data: Dict, line_number: int = None) -> GenerationSet:
    location = f"line {line_number}: " if line_number else ""
    if data.get('schema_version') != SCHEMA_VERSION:
        raise SchemaVersionError(data.get('schema_version'), SCHEMA_VERSION, line_number)
    try:
        samples = []
        for raw in data['samples']:
            if len(raw['tokens']) != len(raw['logprobs']):
                raise InputFormatError(
                    f"{location}sample {raw.get('sample_index')}: length mismatch, "
                    f"{len(raw['tokens'])} tokens vs {len(raw['logprobs'])} logprobs"
                )
            samples.append(GenerationSample(
                sample_index=int(raw['sample_index']),
                tokens=raw['tokens'],
                logprobs=raw['logprobs'],
                finish_reason=raw.get('finish_reason', 'other'),
            ))
        return GenerationSet(
            prompt_id=str(data['prompt_id']),
            model_id=str(data['model_id']),
            config=DecodingConfig.from_dict(data['config']),
            samples=samples,
            reference_index=int(data.get('reference_index', 0)),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise InputFormatError(f"{location}invalid trace record ({e})")


def write_traces(sets: Iterable[GenerationSet], path) -> Path:
    """Write generation sets as a trace file, one set per line."""
    return write_jsonl((generation_set_to_dict(s) for s in sets), path)


def read_traces(path) -> List[GenerationSet]:
    """
    Read a trace file.

    Raises:
        SchemaVersionError: a line declares an unsupported schema_version
        InputFormatError: malformed line or token/logprob length mismatch
    """
    sets = []
    for line_number, row in iter_jsonl(path):
        try:
            sets.append(generation_set_from_dict(row, line_number))
        except InputFormatError as e:
            if isinstance(e, SchemaVersionError):
                raise
            raise InputFormatError(f"{path}: {e}")
    return sets


def trace_keys(path) -> set:
    """(prompt_id, model_id) pairs already present in a trace file, for resuming."""
    if not Path(path).exists():
        return set()
    return {(str(row.get('prompt_id')), str(row.get('model_id'))) for _, row in iter_jsonl(path)}


# ---------------------------------------------------------------------------
# Scored outputs
# ---------------------------------------------------------------------------

def scored_to_dict(scored: ScoredGeneration) -> Dict:
    record = {
        'schema_version': SCHEMA_VERSION,
        'prompt_id': scored.prompt_id,
        'model_id': scored.model_id,
        'answer_text': scored.answer_text,
        'threshold': scored.threshold,
        'hallucinated_count': scored.hallucinated_count,
        'scored_count': scored.scored_count,
        'total_count': scored.total_count,
        'tokens': [
            {
                'token': s.token,
                'variance': s.variance,
                'hallucinated': s.hallucinated,
                'mean_logprob': s.mean_logprob,
                'position': s.position,
                'support': s.support,
            }
            for s in scored.token_scores
        ],
    }
    if scored.prompt is not None:
        record['prompt'] = scored.prompt
    if scored.gold_answer is not None:
        record['gold_answer'] = scored.gold_answer
    return record


def scored_from_dict(data: Dict, line_number: int = None) -> ScoredGeneration:
    location = f"line {line_number}: " if line_number else ""
    if data.get('schema_version') != SCHEMA_VERSION:
        raise SchemaVersionError(data.get('schema_version'), SCHEMA_VERSION, line_number)
    try:
        token_scores = [
            TokenScore(
                position=int(t['position']),
                token=t['token'],
                mean_logprob=t.get('mean_logprob'),
                variance=t['variance'],
                support=int(t['support']),
                hallucinated=bool(t['hallucinated']),
            )
            for t in data['tokens']
        ]
        scored = ScoredGeneration(
            prompt_id=str(data['prompt_id']),
            model_id=str(data['model_id']),
            answer_text=data['answer_text'],
            threshold=float(data['threshold']),
            token_scores=token_scores,
            prompt=data.get('prompt'),
            gold_answer=data.get('gold_answer'),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise InputFormatError(f"{location}invalid scored record ({e})")
    if 'hallucinated_count' in data and data['hallucinated_count'] != scored.hallucinated_count:
        raise InputFormatError(f"{location}hallucinated_count does not match token flags")
    problem = _token_score_problem(scored)
    if problem:
        raise InputFormatError(f"{location}{problem}")
    return scored


def _token_score_problem(scored: ScoredGeneration) -> Optional[str]:
    """Describe the first token score that breaks the flagging rule, if any."""
    if not (math.isfinite(scored.threshold) and scored.threshold >= 0):
        return f"threshold must be a finite value >= 0, got {scored.threshold}"
    for index, s in enumerate(scored.token_scores):
        where = f"token {index}"
        if s.position != index:
            return f"{where}: position {s.position} out of order"
        if s.support < 1:
            return f"{where}: support must be at least 1, got {s.support}"
        if s.variance is None:
            if s.hallucinated:
                return f"{where}: flagged without a variance"
            continue
        if not (isinstance(s.variance, (int, float)) and math.isfinite(s.variance) and s.variance >= 0):
            return f"{where}: variance must be a finite value >= 0, got {s.variance!r}"
        if s.support < 2:
            return f"{where}: variance needs support >= 2, got {s.support}"
        if s.hallucinated != (s.variance > scored.threshold):
            return f"{where}: flag does not match variance {s.variance} at threshold {scored.threshold}"
    return None


def write_scored(scored: Iterable[ScoredGeneration], path) -> Path:
    """Write scored generations, one record per line."""
    return write_jsonl((scored_to_dict(s) for s in scored), path)


def read_scored(path) -> List[ScoredGeneration]:
    """Read a scored file written by write_scored."""
    records = []
    for line_number, row in iter_jsonl(path):
        try:
            records.append(scored_from_dict(row, line_number))
        except SchemaVersionError:
            raise
        except InputFormatError as e:
            raise InputFormatError(f"{path}: {e}")
    return records
