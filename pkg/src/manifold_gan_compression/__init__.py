"""
Manifold-guided GAN compression: agent-driven channel pruning of a generator
and its discriminator, followed by distillation finetuning.
"""

from .config import RunConfig, load_config
from .core.run_manager import RunManager
from .pipeline import StagePipeline
from .utils.result import OperationResult

__version__ = "0.1.0"
__all__ = [
    "RunConfig",
    "load_config",
    "RunManager",
    "StagePipeline",
    "OperationResult"
]
