"""Data model, preprocessing, file formats, splits and synthetic generation."""
from tcrdrp.data.dataset import Dataset, LoadReport, ResponseRecord
from tcrdrp.data.graphs import (
    ATOM_FEATURES, MAX_ATOMS, DrugGraph, GraphError, PaddedDrugGraph, normalize_adjacency, pad_graph,
)
from tcrdrp.data.io import DataFormatError, load_dataset, read_responses, save_dataset
from tcrdrp.data.omics import OmicsError, OmicsProfile, RawProfile, preprocess_omics, quantile_normalize
from tcrdrp.data.splits import DrugCellKFold, SplitError, SplitPlan, make_split
from tcrdrp.data.synthetic import REAL_DATA_DIMS, SynthConfig, synth_generate, synth_raw

__all__ = [
    "Dataset", "LoadReport", "ResponseRecord", "ATOM_FEATURES", "MAX_ATOMS", "DrugGraph",
    "GraphError", "PaddedDrugGraph", "normalize_adjacency", "pad_graph", "DataFormatError",
    "load_dataset", "read_responses", "save_dataset", "OmicsError", "OmicsProfile", "RawProfile",
    "preprocess_omics", "quantile_normalize", "DrugCellKFold", "SplitError", "SplitPlan",
    "make_split", "REAL_DATA_DIMS", "SynthConfig", "synth_generate", "synth_raw",
]
