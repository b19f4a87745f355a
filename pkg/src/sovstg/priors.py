"""Learnable label-specific priors and inference-query initialization."""
from __future__ import annotations

from collections.abc import Iterable

import torch
from torch import nn


class ConfigurationError(ValueError):
    pass


class LabelPriors(nn.Module):
    """Object/verb prior banks plus the coefficient matrices mixing them into queries.

    ``t_o`` (C_o x D) and ``t_v`` (C_v x D) are shared by query initialization,
    denoising-query encoding and the subject-object fusion; nothing else owns a
    copy of them.
    """

    def __init__(self, num_objects: int, num_verbs: int, d_model: int, num_queries: int,
                 init_std: float = 0.02):
        super().__init__()
        if min(num_objects, num_verbs, d_model, num_queries) < 1:
            raise ConfigurationError("class counts, width and query count must be positive")
        self.t_o = nn.Parameter(torch.randn(num_objects, d_model) * init_std)
        self.t_v = nn.Parameter(torch.randn(num_verbs, d_model) * init_std)
        self.A_o = nn.Parameter(torch.randn(num_queries, num_objects) * init_std)
        self.A_v = nn.Parameter(torch.randn(num_queries, num_verbs) * init_std)

    @property
    def num_objects(self) -> int:
        return self.t_o.shape[0]

    @property
    def num_verbs(self) -> int:
        return self.t_v.shape[0]

    @property
    def d_model(self) -> int:
        return self.t_o.shape[1]

    @property
    def num_queries(self) -> int:
        return self.A_o.shape[0]

    def init_inference_queries(self) -> torch.Tensor:
        return init_inference_queries(self.t_o, self.t_v, self.A_o, self.A_v)

    def select_object_vector(self, class_index: int) -> torch.Tensor:
        if not 0 <= class_index < self.num_objects:
            raise IndexError(f"object class {class_index} out of range [0, {self.num_objects})")
        return self.t_o[class_index]

    def encode_verb_multilabel(self, index_set: Iterable[int]) -> torch.Tensor:
        idx = sorted(set(int(i) for i in index_set))
        if not idx:
            raise ValueError("verb label set is empty; every HOI instance has at least one verb")
        if idx[0] < 0 or idx[-1] >= self.num_verbs:
            raise IndexError(f"verb index out of range [0, {self.num_verbs})")
        return self.t_v[idx].sum(0)

    # batched forms used by the denoising builder
    def encode_objects(self, labels: torch.Tensor) -> torch.Tensor:
        return self.t_o[labels]

    def encode_verbs(self, multihot: torch.Tensor) -> torch.Tensor:
        if multihot.numel() and (multihot.sum(-1) == 0).any():
            raise ValueError("verb label set is empty; every HOI instance has at least one verb")
        return multihot.to(self.t_v.dtype) @ self.t_v


def init_inference_queries(t_o: torch.Tensor, t_v: torch.Tensor,
                           A_o: torch.Tensor, A_v: torch.Tensor) -> torch.Tensor:
    """``A_o @ t_o + A_v @ t_v``, recomputed every call so gradients reach the banks."""
    if A_o.shape[1] != t_o.shape[0] or A_v.shape[1] != t_v.shape[0]:
        raise ConfigurationError(
            f"coefficient shapes {tuple(A_o.shape)}, {tuple(A_v.shape)} do not match "
            f"banks {tuple(t_o.shape)}, {tuple(t_v.shape)}")
    if A_o.shape[0] != A_v.shape[0] or t_o.shape[1] != t_v.shape[1]:
        raise ConfigurationError("object and verb branches disagree on query count or width")
    return A_o @ t_o + A_v @ t_v
