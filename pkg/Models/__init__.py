"""
Models Module
Target and evaluation classifiers, ordinary and differentially private training.
"""

from . import classifiers, trainer, dp_trainer

__all__ = ['classifiers', 'trainer', 'dp_trainer']
