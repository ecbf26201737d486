"""Video compressive sensing with multi-rate CNNs and a synthesizing LSTM."""

__version__ = "0.1.0"
