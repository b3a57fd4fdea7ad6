"""Outcome prediction on event-log prefixes with differentiable logic rules."""

__version__ = "0.1.0"
