"""Label-guided self-distillation for an axial-shift MLP fault detector."""
from .config import ConfigError, DistillConfig, RunConfig, SynthConfig, load_config
from .distill import DistillDetector, distill_loss, infer, total_loss

__all__ = ["ConfigError", "DistillConfig", "RunConfig", "SynthConfig", "load_config",
           "DistillDetector", "distill_loss", "infer", "total_loss"]
__version__ = "0.1.0"
