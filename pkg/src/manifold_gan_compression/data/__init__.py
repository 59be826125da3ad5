"""
Synthetic paired datasets with known latent factors.
"""

from .datagen import (
    Dataset,
    LatentFactors,
    PairedSample,
    generate_dataset,
    generate_splits,
    oracle_neighbors,
    oracle_neighbor_table,
)
from .storage import load_data_config, load_datasets, save_datasets

__all__ = [
    "Dataset",
    "LatentFactors",
    "PairedSample",
    "generate_dataset",
    "generate_splits",
    "oracle_neighbors",
    "oracle_neighbor_table",
    "load_data_config",
    "load_datasets",
    "save_datasets",
]
