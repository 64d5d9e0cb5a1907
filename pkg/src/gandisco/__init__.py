"""Object discovery with generative, ranking and adversarial networks on a numpy autodiff core."""

__version__ = "0.1.0"
