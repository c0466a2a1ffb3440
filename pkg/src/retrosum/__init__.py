"""RetroSum: retrieval-enhanced abstractive summarization at desk scale."""

__version__ = "0.1.0"
