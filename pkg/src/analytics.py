"""
Analytics Module
Corpus-level diagnostics over scored generations: hallucination rates, position
profiles, variance distributions, heatmaps, KL divergences and ablation sweeps
"""

import math
from dataclasses import dataclass, field
from typing import Collection, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from loguru import logger
from scipy.special import rel_entr

from .detector import DetectorConfig, VarianceDetector, rethreshold
from .trace import GenerationSet, ScoredGeneration
from .utils import format_percent

DEFAULT_BINS = 50
DEFAULT_MAX_POSITION = 40
DEFAULT_EPSILON = 1e-9
AXES = ('threshold', 'num_samples', 'length_bucket')


def _nan_to_none(value):
    if value is None:
        return None
    value = float(value)
    return None if math.isnan(value) else value


def _single_model_id(records, model_id: Optional[str] = None) -> str:
    ids = sorted({r.model_id for r in records})
    if len(ids) > 1:
        raise ValueError(f"Records mix model ids: {', '.join(ids)}")
    if ids:
        return ids[0]
    return model_id or ''


# ---------------------------------------------------------------------------
# Rates
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RateSummary:
    """Hallucinated-token counts for one model."""

    model_id: str
    total_tokens: int
    scored_tokens: int
    hallucinated_tokens: int
    rate_percent: float = field(init=False)

    def __post_init__(self):
        if not 0 <= self.hallucinated_tokens <= self.scored_tokens <= self.total_tokens:
            raise ValueError(
                f"counts must satisfy 0 <= hallucinated ({self.hallucinated_tokens}) <= "
                f"scored ({self.scored_tokens}) <= total ({self.total_tokens})"
            )
        rate = 100.0 * self.hallucinated_tokens / self.scored_tokens if self.scored_tokens else 0.0
        object.__setattr__(self, 'rate_percent', rate)

    @property
    def rate_display(self) -> str:
        """Rate with two decimals, rounded half to even."""
        return format_percent(self.hallucinated_tokens, self.scored_tokens)

    def to_dict(self) -> Dict:
        return {
            'model_id': self.model_id,
            'total_tokens': self.total_tokens,
            'scored_tokens': self.scored_tokens,
            'hallucinated_tokens': self.hallucinated_tokens,
            'rate_percent': self.rate_percent,
            'rate_display': self.rate_display,
        }


def hallucination_rate(scored: Sequence[ScoredGeneration], model_id: Optional[str] = None) -> RateSummary:
    """
    Percentage of scored tokens flagged as hallucinated.

    Args:
        scored: Scored generations of one model
        model_id: Model id to report when `scored` is empty

    Returns:
        RateSummary over all records

    Raises:
        ValueError: records from more than one model
    """
    return RateSummary(
        model_id=_single_model_id(scored, model_id),
        total_tokens=sum(s.total_count for s in scored),
        scored_tokens=sum(s.scored_count for s in scored),
        hallucinated_tokens=sum(s.hallucinated_count for s in scored),
    )


# ---------------------------------------------------------------------------
# Position profiles
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PositionProfile:
    """Per-position flag probability and mean variance across a corpus."""

    model_id: str
    max_position: int
    support_count: Tuple[int, ...]
    flagged_count: Tuple[int, ...]
    mean_variance: Tuple[float, ...]
    threshold: Optional[float] = None

    @property
    def flag_probability(self) -> Tuple[float, ...]:
        return tuple(
            flagged / support if support else float('nan')
            for flagged, support in zip(self.flagged_count, self.support_count)
        )

    def supported_positions(self) -> List[int]:
        return [t for t, support in enumerate(self.support_count) if support > 0]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            'model_id': self.model_id,
            'position': range(self.max_position),
            'support_count': self.support_count,
            'flagged_count': self.flagged_count,
            'flag_probability': self.flag_probability,
            'mean_variance': self.mean_variance,
            'threshold': self.threshold,
        })


def variances_by_position(scored: Sequence[ScoredGeneration], max_position: int = DEFAULT_MAX_POSITION) -> List[np.ndarray]:
    """Scored variances grouped by position t < max_position."""
    columns: List[List[float]] = [[] for _ in range(max_position)]
    for record in scored:
        for s in record.token_scores:
            if s.is_scored and s.position < max_position:
                columns[s.position].append(s.variance)
    return [np.asarray(column, dtype=float) for column in columns]


def position_profile(scored: Sequence[ScoredGeneration], max_position: int = DEFAULT_MAX_POSITION) -> PositionProfile:
    """
    Flag probability and mean variance at each position.

    Args:
        scored: Scored generations of one model
        max_position: Number of leading positions to profile

    Returns:
        PositionProfile; positions without scored tokens have support 0 and NaN statistics
    """
    if max_position < 1:
        raise ValueError(f"max_position must be at least 1, got {max_position}")

    support = [0] * max_position
    flagged = [0] * max_position
    variances: List[List[float]] = [[] for _ in range(max_position)]
    for record in scored:
        for s in record.token_scores:
            if not s.is_scored or s.position >= max_position:
                continue
            support[s.position] += 1
            flagged[s.position] += int(s.hallucinated)
            variances[s.position].append(s.variance)

    thresholds = {r.threshold for r in scored}
    return PositionProfile(
        model_id=_single_model_id(scored),
        max_position=max_position,
        support_count=tuple(support),
        flagged_count=tuple(flagged),
        mean_variance=tuple(math.fsum(v) / len(v) if v else float('nan') for v in variances),
        threshold=thresholds.pop() if len(thresholds) == 1 else None,
    )


# ---------------------------------------------------------------------------
# Variance distributions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VarianceDistribution:
    """Histogram and empirical CDF of token variances."""

    model_id: str
    bin_edges: Tuple[float, ...]
    bin_counts: Tuple[int, ...]
    cdf_points: Tuple[Tuple[float, float], ...]

    @property
    def total(self) -> int:
        return sum(self.bin_counts)

    def histogram_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            'model_id': self.model_id,
            'bin_left': self.bin_edges[:-1],
            'bin_right': self.bin_edges[1:],
            'count': self.bin_counts,
        })

    def cdf_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [(self.model_id, v, f) for v, f in self.cdf_points],
            columns=['model_id', 'variance', 'cumulative_fraction'],
        )


def scored_variances(scored: Sequence[ScoredGeneration]) -> np.ndarray:
    """All defined variances of a corpus, in record order."""
    return np.asarray([s.variance for r in scored for s in r.token_scores if s.is_scored], dtype=float)


def shared_bin_edges(*variance_sets, bins: int = DEFAULT_BINS) -> Tuple[float, ...]:
    """
    Uniform edges over [0, max observed variance] across every given set.

    Args:
        variance_sets: Arrays of variances to cover
        bins: Number of bins

    Returns:
        bins + 1 strictly increasing edges (upper edge 1.0 when every variance is 0)
    """
    if bins < 2:
        raise ValueError(f"bins must be at least 2, got {bins}")
    upper = max((float(np.max(v)) for v in variance_sets if len(v)), default=0.0)
    edges = np.linspace(0.0, upper, bins + 1)
    if not np.all(np.diff(edges) > 0):
        # all zero, or too small to split into distinct edges
        edges = np.linspace(0.0, max(upper, 1.0), bins + 1)
    return tuple(edges.tolist())


def distribution_from_values(values, edges: Sequence[float], model_id: str = '') -> VarianceDistribution:
    """
    Bin variances against fixed edges.

    Values outside the edges are clipped into the first or last bin.
    """
    edges = np.asarray(edges, dtype=float)
    if edges.ndim != 1 or len(edges) < 3 or not np.all(np.diff(edges) > 0):
        raise ValueError("bin edges must be strictly increasing with at least 2 bins")
    values = np.clip(np.asarray(values, dtype=float), edges[0], edges[-1])
    counts, _ = np.histogram(values, bins=edges)
    if len(values):
        ordered = np.sort(values)
        fractions = np.searchsorted(ordered, edges[1:], side='right') / len(values)
        cdf_points = tuple(zip(edges[1:].tolist(), fractions.tolist()))
    else:
        cdf_points = ()
    return VarianceDistribution(
        model_id=model_id,
        bin_edges=tuple(edges.tolist()),
        bin_counts=tuple(int(c) for c in counts),
        cdf_points=cdf_points,
    )


def variance_distribution(scored: Sequence[ScoredGeneration], bins: int = DEFAULT_BINS,
                          edges: Optional[Sequence[float]] = None) -> VarianceDistribution:
    """
    Histogram and CDF of every scored variance in a corpus.

    Args:
        scored: Scored generations of one model
        bins: Number of uniform bins when `edges` is not given
        edges: Shared edges, for distributions that will be compared

    Returns:
        VarianceDistribution (empty CDF when nothing was scored)
    """
    values = scored_variances(scored)
    if edges is None:
        edges = shared_bin_edges(values, bins=bins)
    return distribution_from_values(values, edges, _single_model_id(scored))


# ---------------------------------------------------------------------------
# Heatmaps
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HeatmapMatrix:
    """Model x position variances for one shared prompt; NaN marks missing cells."""

    prompt_id: str
    model_ids: Tuple[str, ...]
    tokens: Tuple[Tuple[str, ...], ...]
    values: np.ndarray = field(compare=False)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for i, model_id in enumerate(self.model_ids):
            for t in range(self.values.shape[1]):
                token = self.tokens[i][t] if t < len(self.tokens[i]) else None
                value = self.values[i, t]
                rows.append((self.prompt_id, model_id, t, token, value, bool(np.isnan(value))))
        return pd.DataFrame(rows, columns=['prompt_id', 'model_id', 'position', 'token', 'variance', 'missing'])


def heatmap_matrix(scored_by_model: Mapping[str, ScoredGeneration]) -> HeatmapMatrix:
    """
    Variance matrix across models for one shared prompt.

    Args:
        scored_by_model: Model label -> scored generation of the same prompt

    Returns:
        HeatmapMatrix padded with NaN beyond each model's length

    Raises:
        ValueError: the generations belong to different prompts
    """
    prompt_ids = {s.prompt_id for s in scored_by_model.values()}
    if len(prompt_ids) != 1:
        raise ValueError(f"Heatmap needs one shared prompt, got {sorted(prompt_ids)}")

    width = max(s.total_count for s in scored_by_model.values())
    values = np.full((len(scored_by_model), width), np.nan)
    for i, record in enumerate(scored_by_model.values()):
        for s in record.token_scores:
            if s.is_scored:
                values[i, s.position] = s.variance

    return HeatmapMatrix(
        prompt_id=prompt_ids.pop(),
        model_ids=tuple(scored_by_model),
        tokens=tuple(tuple(s.token for s in r.token_scores) for r in scored_by_model.values()),
        values=values,
    )


# ---------------------------------------------------------------------------
# Divergences and model comparison
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KLResult:
    kl_pq: float
    kl_qp: float
    kl_sym: float


def _smoothed(counts, epsilon: float) -> np.ndarray:
    counts = np.asarray(counts, dtype=float)
    total = counts.sum()
    probs = counts / total if total > 0 else np.zeros_like(counts)
    probs = probs + epsilon
    return probs / probs.sum()


def kl_divergence(dist_p: VarianceDistribution, dist_q: VarianceDistribution,
                  epsilon: float = DEFAULT_EPSILON) -> KLResult:
    """
    KL divergence in both directions between two binned distributions.

    Args:
        dist_p: First distribution
        dist_q: Second distribution (same edges)
        epsilon: Additive smoothing mass per bin, before renormalizing

    Returns:
        KLResult with KL(P||Q), KL(Q||P) and their mean

    Raises:
        ValueError: bin edges differ or epsilon is not positive
    """
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    if dist_p.bin_edges != dist_q.bin_edges:
        raise ValueError("KL divergence needs distributions with identical bin edges")

    p = _smoothed(dist_p.bin_counts, epsilon)
    q = _smoothed(dist_q.bin_counts, epsilon)
    kl_pq = max(float(np.sum(rel_entr(p, q))), 0.0)
    kl_qp = max(float(np.sum(rel_entr(q, p))), 0.0)
    return KLResult(kl_pq, kl_qp, (kl_pq + kl_qp) / 2)


@dataclass(frozen=True)
class PositionComparison:
    position: int
    kl_ab: float
    kl_ba: float
    kl_sym: float
    mean_variance_a: float
    mean_variance_b: float
    abs_mean_variance_diff: float
    support_a: int
    support_b: int


@dataclass(frozen=True)
class ModelComparison:
    """Per-position divergences between two runs."""

    model_a: str
    model_b: str
    rows: Tuple[PositionComparison, ...] = ()

    @property
    def positions(self) -> List[int]:
        return [row.position for row in self.rows]

    def kl_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [(r.position, self.model_a, self.model_b, r.kl_ab, r.kl_ba, r.kl_sym, r.support_a, r.support_b)
             for r in self.rows],
            columns=['position', 'model_a', 'model_b', 'kl_ab', 'kl_ba', 'kl_sym', 'support_a', 'support_b'],
        )

    def mean_diff_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [(r.position, self.model_a, self.model_b, r.mean_variance_a, r.mean_variance_b,
              r.abs_mean_variance_diff) for r in self.rows],
            columns=['position', 'model_a', 'model_b', 'mean_variance_a', 'mean_variance_b',
                     'abs_mean_variance_diff'],
        )


def positionwise_comparison(profile_a: PositionProfile, profile_b: PositionProfile,
                            variances_a: Sequence[np.ndarray], variances_b: Sequence[np.ndarray],
                            bins: int = DEFAULT_BINS, epsilon: float = DEFAULT_EPSILON) -> ModelComparison:
    """
    Compare two runs position by position.

    At every position both runs support, the two variance samples are binned
    on shared edges and fed to kl_divergence; the absolute difference of the
    mean variances is reported alongside.

    Args:
        profile_a: Position profile of run A
        profile_b: Position profile of run B
        variances_a: Variances of run A grouped by position
        variances_b: Variances of run B grouped by position
        bins: Bins per position histogram
        epsilon: KL smoothing mass

    Returns:
        ModelComparison (empty, with a warning, when no position is co-supported)
    """
    limit = min(profile_a.max_position, profile_b.max_position, len(variances_a), len(variances_b))
    rows = []
    for t in range(limit):
        if not (profile_a.support_count[t] and profile_b.support_count[t]):
            continue
        edges = shared_bin_edges(variances_a[t], variances_b[t], bins=bins)
        kl = kl_divergence(
            distribution_from_values(variances_a[t], edges, profile_a.model_id),
            distribution_from_values(variances_b[t], edges, profile_b.model_id),
            epsilon,
        )
        mean_a, mean_b = profile_a.mean_variance[t], profile_b.mean_variance[t]
        rows.append(PositionComparison(
            position=t,
            kl_ab=kl.kl_pq,
            kl_ba=kl.kl_qp,
            kl_sym=kl.kl_sym,
            mean_variance_a=mean_a,
            mean_variance_b=mean_b,
            abs_mean_variance_diff=abs(mean_a - mean_b),
            support_a=profile_a.support_count[t],
            support_b=profile_b.support_count[t],
        ))

    if not rows:
        logger.warning(f"No co-supported positions between {profile_a.model_id} and {profile_b.model_id}")
    return ModelComparison(profile_a.model_id, profile_b.model_id, tuple(rows))


def distribution_comparison(scored_a: Sequence[ScoredGeneration], scored_b: Sequence[ScoredGeneration],
                            bins: int = DEFAULT_BINS, epsilon: float = DEFAULT_EPSILON) -> KLResult:
    """KL divergence between the pooled variance distributions of two runs."""
    values_a, values_b = scored_variances(scored_a), scored_variances(scored_b)
    edges = shared_bin_edges(values_a, values_b, bins=bins)
    return kl_divergence(
        distribution_from_values(values_a, edges),
        distribution_from_values(values_b, edges),
        epsilon,
    )


def compare_runs(scored_a: Sequence[ScoredGeneration], scored_b: Sequence[ScoredGeneration],
                 bins: int = DEFAULT_BINS, max_position: int = DEFAULT_MAX_POSITION,
                 epsilon: float = DEFAULT_EPSILON) -> Tuple[ModelComparison, Optional[KLResult]]:
    """
    Compare two scored runs over the prompts they share.

    Returns:
        (per-position comparison, whole-distribution KL); the KL is None when
        the runs share no prompt
    """
    shared = {r.prompt_id for r in scored_a} & {r.prompt_id for r in scored_b}
    model_a, model_b = _single_model_id(scored_a), _single_model_id(scored_b)
    if not shared:
        logger.warning(f"Runs {model_a} and {model_b} share no prompt ids; comparison is empty")
        return ModelComparison(model_a, model_b), None

    subset_a = [r for r in scored_a if r.prompt_id in shared]
    subset_b = [r for r in scored_b if r.prompt_id in shared]
    comparison = positionwise_comparison(
        position_profile(subset_a, max_position),
        position_profile(subset_b, max_position),
        variances_by_position(subset_a, max_position),
        variances_by_position(subset_b, max_position),
        bins=bins,
        epsilon=epsilon,
    )
    return comparison, distribution_comparison(subset_a, subset_b, bins, epsilon)


# ---------------------------------------------------------------------------
# Agreement with reference labels
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AgreementSummary:
    true_positive: int
    false_positive: int
    false_negative: int
    true_negative: int
    span_total: int = 0
    span_detected: int = 0

    @staticmethod
    def _ratio(num: int, den: int) -> float:
        return num / den if den else 0.0

    @property
    def precision(self) -> float:
        return self._ratio(self.true_positive, self.true_positive + self.false_positive)

    @property
    def recall(self) -> float:
        return self._ratio(self.true_positive, self.true_positive + self.false_negative)

    @property
    def false_flag_rate(self) -> float:
        return self._ratio(self.false_positive, self.false_positive + self.true_negative)

    @property
    def span_recall(self) -> float:
        return self._ratio(self.span_detected, self.span_total)


def flag_agreement(scored: Sequence[ScoredGeneration], labels: Mapping[str, Collection[int]],
                   spans: Optional[Mapping[str, Sequence[Collection[int]]]] = None) -> AgreementSummary:
    """
    Token-level agreement between flags and reference hallucination labels.

    Args:
        scored: Scored generations
        labels: prompt_id -> positions known to be hallucinated
        spans: prompt_id -> labelled spans; a span counts as detected when any of
            its scored positions is flagged

    Returns:
        AgreementSummary over scored tokens only
    """
    tp = fp = fn = tn = 0
    span_total = span_detected = 0
    for record in scored:
        positive = set(labels.get(record.prompt_id, ()))
        flagged = set()
        for s in record.token_scores:
            if not s.is_scored:
                continue
            if s.hallucinated:
                flagged.add(s.position)
            if s.position in positive:
                tp += s.hallucinated
                fn += not s.hallucinated
            else:
                fp += s.hallucinated
                tn += not s.hallucinated
        if spans is not None:
            for span in spans.get(record.prompt_id, ()):
                span_total += 1
                span_detected += bool(flagged & set(span))
    return AgreementSummary(tp, fp, fn, tn, span_total, span_detected)


# ---------------------------------------------------------------------------
# Ablation sweeps
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AblationPoint:
    axis_value: float
    rate: RateSummary


@dataclass(frozen=True)
class AblationGrid:
    """Hallucination rates along one swept parameter."""

    axis: str
    points: Tuple[AblationPoint, ...]
    errors: Tuple[Tuple[float, str], ...] = ()

    def to_frame(self) -> pd.DataFrame:
        rows = [
            {'axis': self.axis, 'axis_value': p.axis_value, **p.rate.to_dict(), 'error': None}
            for p in self.points
        ]
        rows += [
            {'axis': self.axis, 'axis_value': value, 'model_id': None, 'total_tokens': None,
             'scored_tokens': None, 'hallucinated_tokens': None, 'rate_percent': None,
             'rate_display': None, 'error': message}
            for value, message in self.errors
        ]
        frame = pd.DataFrame(rows, columns=[
            'axis', 'axis_value', 'model_id', 'total_tokens', 'scored_tokens',
            'hallucinated_tokens', 'rate_percent', 'rate_display', 'error',
        ])
        return frame.sort_values('axis_value', kind='stable').reset_index(drop=True)


def ablation_sweep(traces: Sequence[GenerationSet], axis: str, values: Sequence[float],
                   base_cfg: DetectorConfig = None) -> AblationGrid:
    """
    Rescore a corpus along one parameter axis without resampling.

    Args:
        traces: Generation sets of one model
        axis: 'threshold' (rethreshold stored variances), 'num_samples' (use the
            first k samples of each set) or 'length_bucket' (partition generations
            by scored length; each value is a bucket's lower bound)
        values: Axis values; sorted and de-duplicated
        base_cfg: Detector settings for everything not being swept

    Returns:
        AblationGrid; out-of-range values become error entries

    Raises:
        ValueError: unknown axis or traces from more than one model
    """
    if axis not in AXES:
        raise ValueError(f"Unknown ablation axis '{axis}' (expected one of {AXES})")
    base_cfg = base_cfg or DetectorConfig()
    detector = VarianceDetector(base_cfg)
    model_id = _single_model_id(traces)
    points, errors = [], []

    def reject(value, message):
        logger.warning(f"Ablation {axis}={value} rejected: {message}")
        errors.append((value, message))

    # NaN breaks sorting and every range check below
    for value in values:
        if not math.isfinite(value):
            reject(value, "axis values must be finite")
    values = sorted({v for v in values if math.isfinite(v)})

    if axis == 'threshold':
        scored = detector.score_corpus(traces).scored
        for tau in values:
            if tau < 0:
                reject(tau, "threshold must be >= 0")
                continue
            points.append(AblationPoint(tau, hallucination_rate([rethreshold(s, tau) for s in scored], model_id)))

    elif axis == 'num_samples':
        available = min((len(t.samples) for t in traces), default=0)
        for k in values:
            if k != int(k) or k < 2:
                reject(k, "variance needs at least 2 samples per position; num_samples must be an integer >= 2")
                continue
            if k > available:
                reject(k, f"only {available} samples available in every set")
                continue
            truncated = [t.truncated(int(k)) for t in traces]
            scored = detector.score_corpus(truncated).scored
            points.append(AblationPoint(int(k), hallucination_rate(scored, model_id)))

    else:
        scored = detector.score_corpus(traces).scored
        bounds = [v for v in values if v >= 0]
        for value in values:
            if value < 0:
                reject(value, "length bucket bounds must be >= 0")
        for i, low in enumerate(bounds):
            high = bounds[i + 1] if i + 1 < len(bounds) else math.inf
            bucket = [s for s in scored if low <= s.scored_count < high]
            points.append(AblationPoint(low, hallucination_rate(bucket, model_id)))

    return AblationGrid(axis, tuple(points), tuple(errors))


# ---------------------------------------------------------------------------
# Run report
# ---------------------------------------------------------------------------

@dataclass
class RunReport:
    """Corpus-level aggregates for one or more scored runs."""

    rates: List[RateSummary]
    profiles: List[PositionProfile]
    distributions: List[VarianceDistribution]
    heatmap: Optional[HeatmapMatrix] = None

    def frames(self) -> Dict[str, pd.DataFrame]:
        frames = {
            'rates': pd.DataFrame([r.to_dict() for r in self.rates]),
            'position_profile': pd.concat([p.to_frame() for p in self.profiles], ignore_index=True),
            'histogram': pd.concat([d.histogram_frame() for d in self.distributions], ignore_index=True),
            'cdf': pd.concat([d.cdf_frame() for d in self.distributions], ignore_index=True),
        }
        if self.heatmap is not None:
            frames['heatmap'] = self.heatmap.to_frame()
        return frames

    def to_dict(self) -> Dict:
        report = {
            'rates': [r.to_dict() for r in self.rates],
            'position_profiles': [
                {
                    'model_id': p.model_id,
                    'threshold': p.threshold,
                    'support_count': list(p.support_count),
                    'flag_probability': [_nan_to_none(v) for v in p.flag_probability],
                    'mean_variance': [_nan_to_none(v) for v in p.mean_variance],
                }
                for p in self.profiles
            ],
            'variance_distributions': [
                {
                    'model_id': d.model_id,
                    'bin_edges': list(d.bin_edges),
                    'bin_counts': list(d.bin_counts),
                    'cdf_points': [list(point) for point in d.cdf_points],
                }
                for d in self.distributions
            ],
        }
        if self.heatmap is not None:
            report['heatmap'] = {
                'prompt_id': self.heatmap.prompt_id,
                'model_ids': list(self.heatmap.model_ids),
                'tokens': [list(t) for t in self.heatmap.tokens],
                'values': [[_nan_to_none(v) for v in row] for row in self.heatmap.values.tolist()],
            }
        return report


def analyze_runs(runs: Mapping[str, Sequence[ScoredGeneration]], bins: int = DEFAULT_BINS,
                 max_position: int = DEFAULT_MAX_POSITION, heatmap_prompt: Optional[str] = None) -> RunReport:
    """
    Build the full diagnostic report for several runs.

    Distributions share one set of bin edges so they can be compared directly.

    Args:
        runs: Run label -> scored generations of that run
        bins: Histogram bins
        max_position: Position profile length
        heatmap_prompt: Prompt id to build a heatmap for (must exist in every run)

    Returns:
        RunReport
    """
    all_values = [scored_variances(records) for records in runs.values()]
    edges = shared_bin_edges(*all_values, bins=bins)

    rates, profiles, distributions = [], [], []
    for label, records in runs.items():
        rate = hallucination_rate(records, label)
        rates.append(RateSummary(label, rate.total_tokens, rate.scored_tokens, rate.hallucinated_tokens))
        profile = position_profile(records, max_position)
        profiles.append(PositionProfile(label, profile.max_position, profile.support_count,
                                        profile.flagged_count, profile.mean_variance, profile.threshold))
        distributions.append(distribution_from_values(scored_variances(records), edges, label))

    heatmap = None
    if heatmap_prompt is not None:
        by_model = {}
        for label, records in runs.items():
            match = [r for r in records if r.prompt_id == heatmap_prompt]
            if not match:
                raise KeyError(label)
            by_model[label] = match[0]
        heatmap = heatmap_matrix(by_model)

    return RunReport(rates, profiles, distributions, heatmap)
