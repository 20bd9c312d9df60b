"""Perception models (slot attention and MONet) and their losses."""

from __future__ import annotations

from typing import Sequence, Union

import torch
from torch import Tensor

from ..encoding import SceneEncoding, SlotProfile
from .monet import MONetConfig, MONetModel, monet_decompose
from .slot_attention import (
    SlotAttentionConfig,
    SlotAttentionModel,
    decode_slots,
    sa_encode,
)

__all__ = [
    "MONetConfig", "MONetModel", "monet_decompose",
    "SlotAttentionConfig", "SlotAttentionModel", "decode_slots", "sa_encode",
    "compose_image", "loss_slot", "loss_monet", "build_model",
]

ProfilesLike = Union[SceneEncoding, Sequence[SlotProfile]]


def _as_encoding(profiles: ProfilesLike) -> SceneEncoding:
    if isinstance(profiles, SceneEncoding):
        return profiles
    return SceneEncoding.from_profiles(list(profiles))


def compose_image(profiles: ProfilesLike) -> Tensor:
    """Objectness-weighted composition: sum_k s_k * m_k * x_k, shape (H, W, 3)."""
    enc = _as_encoding(profiles)
    return (enc.s[:, None, None, None] * enc.m.unsqueeze(-1) * enc.x).sum(dim=0)


def loss_slot(profiles: ProfilesLike, image: Tensor) -> Tensor:
    """Squared L2 reconstruction error of the composed image."""
    return (compose_image(profiles) - image).pow(2).sum()


def loss_monet(profiles: ProfilesLike, kl_terms: Tensor, image: Tensor, beta_kl: float) -> Tensor:
    """Reconstruction error plus beta-weighted KL over components."""
    return loss_slot(profiles, image) + beta_kl * kl_terms.sum()


def build_model(model_tag: str, image_size: int, num_slots: int, latent_dim: int = 64):
    if model_tag == "slot-attention":
        return SlotAttentionModel(SlotAttentionConfig(
            num_slots=num_slots, slot_dim=latent_dim, image_size=image_size))
    if model_tag == "monet":
        return MONetModel(MONetConfig(
            num_slots=num_slots, latent_dim=latent_dim, image_size=image_size))
    raise ValueError(f"unknown model tag '{model_tag}'")
