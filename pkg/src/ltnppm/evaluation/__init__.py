"""Metrics, the experiment harness and the synthetic log generator."""

from .metrics import MetricSet, compute_metrics

__all__ = ["MetricSet", "compute_metrics"]
