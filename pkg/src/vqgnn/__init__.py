"""Mini-batch graph neural network training with vector-quantized out-of-batch messages."""

__version__ = "0.1.0"
