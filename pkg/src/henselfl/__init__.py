"""Federated-learning privacy testbed: lossless base-p block packing followed by one-shot Gaussian noise."""

from .data import PipelineConfig, PrivacyPreprocessor, PrivateDataset, RawDataset, prepare_private_dataset
from .experiment import ExperimentConfig, RunReport, run_grid, run_scenario
from .federated import FederatedHenselClassifier
from .hensel import CompressionConfig, HenselCompressor, compress_matrix, decompress_matrix, pack_block, unpack_block
from .nn import Architecture, ConvNetClassifier, ModelParams
from .privacy import GaussianNoiser, PrivacyParams, add_noise, cumulative_leakage, gaussian_variance

__version__ = "0.1.0"

__all__ = [
    "Architecture", "CompressionConfig", "ConvNetClassifier", "ExperimentConfig",
    "FederatedHenselClassifier", "GaussianNoiser", "HenselCompressor", "ModelParams", "PipelineConfig",
    "PrivacyParams", "PrivacyPreprocessor", "PrivateDataset", "RawDataset", "RunReport",
    "add_noise", "compress_matrix", "cumulative_leakage", "decompress_matrix", "gaussian_variance",
    "pack_block", "prepare_private_dataset", "run_grid", "run_scenario", "unpack_block",
]
