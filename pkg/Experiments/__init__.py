"""
Experiments Module
Declarative experiment configs and the staged pipeline that runs them.
"""

from . import experiment_config, pipeline

__all__ = ['experiment_config', 'pipeline']
