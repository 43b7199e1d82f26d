"""densect: DenseNet CT classification on a self-contained numpy autograd core."""

__version__ = "0.1.0"
