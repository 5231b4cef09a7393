"""Multi-linear (block-term) attention and a small language model built on it."""
