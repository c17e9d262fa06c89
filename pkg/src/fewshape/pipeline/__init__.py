"""Data, training, inference, evaluation and benchmarking."""
