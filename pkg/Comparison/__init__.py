"""
Comparison Module
Quantitative scoring of reconstructions.
"""

from . import attack_metrics

__all__ = ['attack_metrics']
