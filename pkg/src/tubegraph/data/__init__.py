"""File formats, synthetic scenarios and datasets."""
