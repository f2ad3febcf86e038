"""Bootstrap a curved-text detector from few pixel-level labels.

A small strongly annotated set trains a baseline detector; a large weakly
annotated (boxes only) or unannotated pool is then pseudo-annotated and
folded back into training over several rounds.  Three pseudo-annotation
strategies are provided, plus a toy trainable detector, a synthetic scene
generator, an instance-level evaluator, and a CLI tying them together.
"""

__version__ = "0.1.0"
