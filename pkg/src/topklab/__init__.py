"""topklab: spatial Top-K sparsity in a from-scratch CNN/autodiff lab.

Implements the channel-wise spatial Top-K operator (hard and
mean-replacement variants) inside a tape-based autodiff engine, plus the
instruments around it: a procedural cue-conflict dataset, shape/texture
bias evaluation, Gram-matrix texture synthesis with Top-K ablation,
masked-activation reconstruction, and Top-K mask dynamics.
"""

from .sparsity import TopKConfig, resolve_k, topk_forward, topk_select, topk_vjp
from .tensor import Tape, Tensor, backward, finite_diff_grad

__all__ = [
    "Tensor", "Tape", "backward", "finite_diff_grad",
    "TopKConfig", "resolve_k", "topk_select", "topk_forward", "topk_vjp",
]

__version__ = "0.1.0"
