"""crcseg: few-shot shape segmentation built on a from-scratch tape engine.

Subpackages split along the pipeline: tensor/optim (autodiff core), data
(synthetic shapes, episodes, netpbm persistence), model (the segmentation
network), train (losses, episodic training, k-shot adaptation), metrics and
experiments (evaluation + ablation harness), cli (entry point).
"""

__version__ = "0.1.0"

from .tensor import Tape, Tensor  # noqa: F401
