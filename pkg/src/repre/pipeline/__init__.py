"""Data, training loop, persistence, evaluation and the command line."""
