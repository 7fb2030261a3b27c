"""
Theory Module
Finite-distribution checks linking predictive power and inversion.
"""

from . import theory_validator

__all__ = ['theory_validator']
