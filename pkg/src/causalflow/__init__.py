"""Graph-constrained normalizing flows for longitudinal counterfactuals, with evolutionary imputation."""

__version__ = "0.1.0"

from .dag import CausalGraph, Node  # noqa: E402
from .synthgen import GeneratorConfig, PanelDataset, generate, oracle_ate, oracle_hr  # noqa: E402

__all__ = [
    "CausalGraph",
    "GeneratorConfig",
    "Node",
    "PanelDataset",
    "__version__",
    "generate",
    "oracle_ate",
    "oracle_hr",
]
