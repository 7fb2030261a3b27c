"""
Ingestion Module
Handles dataset loading, private/public splits and auxiliary-knowledge synthesis.
"""

from . import dataset_loader, auxiliary_knowledge, augmentation

__all__ = ['dataset_loader', 'auxiliary_knowledge', 'augmentation']
