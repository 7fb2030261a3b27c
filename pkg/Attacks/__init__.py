"""
Attacks Module
Secret revelation (GMI) and the EMI / PII baselines.
"""

from . import inversion

__all__ = ['inversion']
