"""Image captioning from scratch on numpy: windowed-attention encoder, attention LSTM decoder."""

__version__ = "0.1.0"
