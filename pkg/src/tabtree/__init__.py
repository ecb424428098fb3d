"""Tree-conditioned autoregressive generation of synthetic tabular data."""

from .dataset import ColumnSpec, DataError, Schema, Table, drop_missing, load_csv, split, write_csv
from .quantizer import DataTokenizer, VocabLayout, fit_tokenizer
from .tree import Ensemble, TreeParams, apply_leaves, fit_gbm, predict, tune_hyperparams

__version__ = "0.1.0"

__all__ = [
    "ColumnSpec", "DataError", "Schema", "Table", "drop_missing", "load_csv", "split", "write_csv",
    "DataTokenizer", "VocabLayout", "fit_tokenizer",
    "Ensemble", "TreeParams", "apply_leaves", "fit_gbm", "predict", "tune_hyperparams",
]
