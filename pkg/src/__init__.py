"""
Token Variance Toolkit - Main Package
"""

__version__ = '1.0.0'

from .analytics import RateSummary, hallucination_rate, position_profile, variance_distribution
from .detector import DetectorConfig, VarianceDetector
from .errors import ToolkitError
from .trace import DecodingConfig, GenerationSample, GenerationSet, PromptRecord, ScoredGeneration

__all__ = [
    'DecodingConfig',
    'DetectorConfig',
    'GenerationSample',
    'GenerationSet',
    'PromptRecord',
    'RateSummary',
    'ScoredGeneration',
    'ToolkitError',
    'VarianceDetector',
    'hallucination_rate',
    'position_profile',
    'variance_distribution',
]
