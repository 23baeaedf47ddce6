"""Cross-block orchestrated PEFT (coefficient sets, relation matrix, hypercomplex head) on a toy ViT segmenter."""

__version__ = "0.1.0"
