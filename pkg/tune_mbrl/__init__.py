"""tune-mbrl - Hyperparameter optimization for model-based reinforcement learning."""

__version__ = "0.1.0"
