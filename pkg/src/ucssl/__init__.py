"""Self-supervised pretraining and Mayo-score benchmarking for colonoscopy images."""

from ucssl.errors import ValidationError

__version__ = "0.1.0"

NUM_CLASSES = 4
CLASS_NAMES = ("Mayo_0", "Mayo_1", "Mayo_2", "Mayo_3")

__all__ = ["ValidationError", "NUM_CLASSES", "CLASS_NAMES", "__version__"]
