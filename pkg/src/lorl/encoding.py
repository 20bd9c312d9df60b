"""Slot profiles and scene encodings produced by the perception models."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor


@dataclass
class SlotProfile:
    """One slot: latent z, component image x, mask m, objectness s."""

    z: Tensor  # (d,)
    x: Tensor  # (H, W, 3)
    m: Tensor  # (H, W)
    s: Tensor  # scalar


@dataclass
class SceneEncoding:
    """Stacked slot profiles for one scene."""

    z: Tensor  # (K, d)
    x: Tensor  # (K, H, W, 3)
    m: Tensor  # (K, H, W)
    s: Tensor  # (K,)
    model_tag: str = "slot-attention"

    @property
    def num_slots(self) -> int:
        return self.z.shape[0]

    @property
    def profiles(self) -> list[SlotProfile]:
        return [
            SlotProfile(z=self.z[k], x=self.x[k], m=self.m[k], s=self.s[k])
            for k in range(self.num_slots)
        ]

    @staticmethod
    def from_profiles(profiles: list[SlotProfile], model_tag: str = "slot-attention") -> "SceneEncoding":
        if not profiles:
            raise ValueError("need at least one slot profile")
        return SceneEncoding(
            z=torch.stack([p.z for p in profiles]),
            x=torch.stack([p.x for p in profiles]),
            m=torch.stack([p.m for p in profiles]),
            s=torch.stack([p.s for p in profiles]),
            model_tag=model_tag,
        )

    def detach(self) -> "SceneEncoding":
        return SceneEncoding(
            z=self.z.detach(), x=self.x.detach(), m=self.m.detach(),
            s=self.s.detach(), model_tag=self.model_tag,
        )


def check_partition_of_unity(encoding: SceneEncoding, tol: float = 1e-5) -> bool:
    total = encoding.m.sum(dim=0)
    return bool(torch.all((total - 1.0).abs() <= tol))
