"""Two-branch few-shot learner: emotion-guided similarity network with joint and alternate training."""

__version__ = "0.1.0"
