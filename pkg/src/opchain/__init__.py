"""Known-operator learning: fixed differentiable operators chained with small
trainable sigmoid networks, worst-case error bounds for such chains, and a
synthetic X-ray material-decomposition study."""

__version__ = "0.1.0"
