"""Desk-scale medical LM adaptation pipeline.

Continued pre-training, supervised fine-tuning and direct preference
optimization on a compact character-level transformer, with the data
construction and evaluation machinery to run the whole loop end to end.
"""

__version__ = "0.1.0"
