"""Motion-prediction rewards for residual RL in 2D manipulation tasks."""

__version__ = "0.1.0"
