"""Experiment orchestration: pretraining, comparisons, aggregation and the CLI."""
from .parsing import parse_response

__all__ = ["parse_response"]
