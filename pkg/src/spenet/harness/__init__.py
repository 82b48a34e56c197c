"""Data generation, training, rotation-regime evaluation and exports."""
