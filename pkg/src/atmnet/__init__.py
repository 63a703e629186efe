"""Active token mixing backbones on a small numpy autodiff engine."""
from .backbone import build_variant, count_flops, count_params, forward
from .config import VARIANTS, get_variant

__all__ = ["VARIANTS", "build_variant", "count_flops", "count_params", "forward", "get_variant"]
__version__ = "0.1.0"
