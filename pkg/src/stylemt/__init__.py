"""Style-biased multi-task image attribute classification on a numpy autodiff core."""

__version__ = "0.1.0"
