"""
Prior Module
Public knowledge distillation: generator/critic networks and their training.
"""

from . import gan_networks, gan_trainer

__all__ = ['gan_networks', 'gan_trainer']
