"""Membership-inference leakage auditing for models trained with and without DP."""

__version__ = "0.1.0"
