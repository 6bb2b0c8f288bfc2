"""Self-supervised ViT embeddings with few-shot calibration and retrieval fine-tuning."""

__version__ = "0.1.0"
