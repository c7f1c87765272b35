"""Weight-generating convolutions (WeightNet, CondConv, kernel-level SE) on a small numpy autodiff core."""
__version__ = "0.1.0"
