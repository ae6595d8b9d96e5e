"""NN-enriched reproducing kernel particle method for brittle fracture."""
import logging

__version__ = "0.1.0"

logging.getLogger(__name__).addHandler(logging.NullHandler())
