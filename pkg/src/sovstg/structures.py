from __future__ import annotations

from dataclasses import dataclass

import torch

from .geometry import Box


@dataclass(frozen=True)
class HOIInstance:
    """One annotated interaction: subject box, object box + class, verb set."""

    subject: Box
    object: Box
    object_class: int
    verbs: tuple[int, ...]

    def verb_multihot(self, num_verbs: int) -> torch.Tensor:
        v = torch.zeros(num_verbs)
        v[list(self.verbs)] = 1.0
        return v


def instances_to_targets(instances: list[HOIInstance], num_verbs: int,
                         hoi_index: dict[tuple[int, int], int] | None = None,
                         dtype=torch.float32) -> dict[str, torch.Tensor]:
    """Stack instances of one image into the tensor form used by losses and denoising."""
    k = len(instances)
    targets = {
        "sub_boxes": torch.tensor([i.subject.as_list() for i in instances], dtype=dtype).reshape(k, 4),
        "obj_boxes": torch.tensor([i.object.as_list() for i in instances], dtype=dtype).reshape(k, 4),
        "obj_labels": torch.tensor([i.object_class for i in instances], dtype=torch.long).reshape(k),
        "verb_labels": torch.zeros(k, num_verbs, dtype=dtype),
    }
    for n, inst in enumerate(instances):
        targets["verb_labels"][n, list(inst.verbs)] = 1.0
    if hoi_index is not None:
        hoi = torch.zeros(k, len(hoi_index), dtype=dtype)
        for n, inst in enumerate(instances):
            for v in inst.verbs:
                c = hoi_index.get((inst.object_class, v))
                if c is not None:
                    hoi[n, c] = 1.0
        targets["hoi_labels"] = hoi
    return targets
