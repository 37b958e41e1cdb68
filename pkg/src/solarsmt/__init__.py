"""Solar Multimodal Transformer: intraday GHI forecasting from a camera frame and GHI history."""

__version__ = "0.1.0"
