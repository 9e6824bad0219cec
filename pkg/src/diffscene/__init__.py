"""diffscene: masked-diffusion scene description at desk scale.

Provides a closed token grammar, a synthetic scene generator, a numpy
transformer with exact gradients, mask-and-predict training, confidence-
scheduled parallel decoding, an autoregressive baseline, and the metrics and
ablation harness used to compare them.
"""

__version__ = "0.3.0"
__all__ = ["__version__"]
