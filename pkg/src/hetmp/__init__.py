"""Relation-aware message passing on heterogeneous graphs.

Modules:

- ``graph``: typed schema, CSR adjacency, validation, reverse relations
- ``tensor``: minimal reverse-mode autodiff over numpy arrays
- ``layers``: intra/inter-relation aggregation and status update phases
- ``sampling``: per-relation neighbor sampling into layer blocks
- ``train``: AdamW, FLAG, feature propagation, the training loop
- ``data``: on-disk graph format, synthetic graphs, reports
- ``oracle``: slow dense reference implementation
- ``cli``: the ``hetmp`` command

Hot loops live in a compiled extension with a numpy fallback; see
``hetmp.kernels.BACKEND``.
"""
from .graph import HeteroGraph, HeteroSchema, add_reverse_relations, validate
from .kernels import BACKEND
from .layers import ModelConfig, build_model_config, model_forward, param_count
from .sampling import full_batch, sample_batch
from .train import TrainConfig, fit

__all__ = [
    "BACKEND", "HeteroGraph", "HeteroSchema", "ModelConfig", "TrainConfig",
    "add_reverse_relations", "build_model_config", "fit", "full_batch",
    "model_forward", "param_count", "sample_batch", "validate",
]
