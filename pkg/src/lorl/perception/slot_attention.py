"""Slot-attention encoder with a spatial broadcast decoder and objectness head."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from ..encoding import SceneEncoding


@dataclass(frozen=True)
class SlotAttentionConfig:
    num_slots: int = 7
    slot_dim: int = 64
    iterations: int = 3
    encoder_channels: int = 32
    decoder_channels: int = 32
    image_size: int = 64

    def __post_init__(self):
        if self.num_slots < 2:
            raise ValueError("num_slots must be >= 2")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.image_size % 8 != 0:
            raise ValueError("image_size must be divisible by 8")


def _coord_grid(size: int, device, dtype) -> Tensor:
    """(size*size, 4) grid of (x, y, 1-x, 1-y) in [0, 1]."""
    axis = torch.linspace(0.0, 1.0, size, device=device, dtype=dtype)
    ys, xs = torch.meshgrid(axis, axis, indexing="ij")
    grid = torch.stack([xs, ys, 1.0 - xs, 1.0 - ys], dim=-1)
    return grid.reshape(size * size, 4)


class SlotAttentionModel(nn.Module):
    """Encoder, iterative slot attention, and per-slot broadcast decoder.

    The decoder emits per-slot RGB plus a mask logit (softmaxed across slots)
    and, from its second-last feature map, a pooled objectness score.
    """

    def __init__(self, config: SlotAttentionConfig):
        super().__init__()
        self.config = config
        c, d = config.encoder_channels, config.slot_dim
        self.encoder = nn.Sequential(
            nn.Conv2d(3, c, 5, padding=2), nn.ReLU(),
            nn.Conv2d(c, c, 5, padding=2), nn.ReLU(),
            nn.Conv2d(c, c, 5, padding=2), nn.ReLU(),
            nn.Conv2d(c, c, 5, padding=2),
        )
        self.pos_embed = nn.Linear(4, c)
        self.feature_norm = nn.LayerNorm(c)
        self.feature_mlp = nn.Sequential(nn.Linear(c, c), nn.ReLU(), nn.Linear(c, c))

        self.slots_mu = nn.Parameter(torch.zeros(1, d))
        self.slots_log_sigma = nn.Parameter(torch.zeros(1, d))
        self.norm_inputs = nn.LayerNorm(c)
        self.norm_slots = nn.LayerNorm(d)
        self.norm_mlp = nn.LayerNorm(d)
        self.project_q = nn.Linear(d, d, bias=False)
        self.project_k = nn.Linear(c, d, bias=False)
        self.project_v = nn.Linear(c, d, bias=False)
        self.gru = nn.GRUCell(d, d)
        self.slot_mlp = nn.Sequential(nn.Linear(d, 2 * d), nn.ReLU(), nn.Linear(2 * d, d))

        dc = config.decoder_channels
        self.decoder_pos = nn.Linear(4, d)
        self.decoder = nn.Sequential(
            nn.ConvTranspose2d(d, dc, 4, stride=2, padding=1), nn.ReLU(),
            nn.ConvTranspose2d(dc, dc, 4, stride=2, padding=1), nn.ReLU(),
            nn.ConvTranspose2d(dc, dc, 4, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(dc, dc, 3, padding=1), nn.ReLU(),
        )
        self.decoder_out = nn.Conv2d(dc, 4, 3, padding=1)
        self.objectness = nn.Linear(dc, 1)
        nn.init.zeros_(self.objectness.weight)
        # start near s ~ 0.95 so early training matches the plain model
        nn.init.constant_(self.objectness.bias, 3.0)

    # -- encoder ------------------------------------------------------------

    def features(self, images: Tensor) -> Tensor:
        """(B, 3, H, W) -> (B, H*W, C) positional features."""
        B = images.shape[0]
        h = self.encoder(images)
        h = h.flatten(2).transpose(1, 2)  # (B, HW, C)
        grid = _coord_grid(self.config.image_size, images.device, images.dtype)
        h = h + self.pos_embed(grid)
        return self.feature_mlp(self.feature_norm(h))

    def init_slots(self, batch: int, generator=None, device=None, dtype=None) -> Tensor:
        noise = torch.randn(
            batch, self.config.num_slots, self.config.slot_dim,
            generator=generator, device=device or self.slots_mu.device,
            dtype=dtype or self.slots_mu.dtype,
        )
        return self.slots_mu + self.slots_log_sigma.exp() * noise

    def attend(
        self, inputs: Tensor, slots: Tensor, return_attn: bool = False
    ) -> Tensor | tuple[Tensor, list[Tensor]]:
        """Refine slots for `iterations` rounds over (B, HW, C) inputs."""
        inputs = self.norm_inputs(inputs)
        k = self.project_k(inputs)
        v = self.project_v(inputs)
        scale = self.config.slot_dim ** -0.5
        attns = []
        for _ in range(self.config.iterations):
            slots_prev = slots
            q = self.project_q(self.norm_slots(slots))
            logits = scale * torch.einsum("bkd,bnd->bkn", q, k)
            attn = F.softmax(logits, dim=1)  # normalize across slots
            attns.append(attn)
            weights = attn + 1e-8
            weights = weights / weights.sum(dim=2, keepdim=True)
            updates = torch.einsum("bkn,bnd->bkd", weights, v)
            B, K, d = slots.shape
            slots = self.gru(updates.reshape(B * K, d), slots_prev.reshape(B * K, d))
            slots = slots.reshape(B, K, d)
            slots = slots + self.slot_mlp(self.norm_mlp(slots))
        if return_attn:
            return slots, attns
        return slots

    def encode(self, images: Tensor, generator=None) -> Tensor:
        """(B, 3, H, W) -> (B, K, d) slot latents."""
        slots = self.init_slots(images.shape[0], generator, images.device, images.dtype)
        return self.attend(self.features(images), slots)

    # -- decoder ------------------------------------------------------------

    def decode(self, slots: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """(B, K, d) -> rgb (B, K, H, W, 3), masks (B, K, H, W), s (B, K)."""
        B, K, d = slots.shape
        size = self.config.image_size
        init = size // 8
        grid = _coord_grid(init, slots.device, slots.dtype)
        pos = self.decoder_pos(grid).reshape(init, init, d).permute(2, 0, 1)
        x = slots.reshape(B * K, d, 1, 1).expand(B * K, d, init, init) + pos
        features = self.decoder(x)  # (B*K, dc, H, W), the second-last layer
        out = self.decoder_out(features)
        rgb = torch.sigmoid(out[:, :3]).reshape(B, K, 3, size, size).permute(0, 1, 3, 4, 2)
        mask_logits = out[:, 3].reshape(B, K, size, size)
        masks = F.softmax(mask_logits, dim=1)
        pooled = features.mean(dim=(2, 3))
        s = torch.sigmoid(self.objectness(pooled)).reshape(B, K)
        return rgb, masks, s

    def forward(self, images: Tensor, generator=None) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        slots = self.encode(images, generator)
        rgb, masks, s = self.decode(slots)
        return slots, rgb, masks, s

    def encode_scene(self, image: Tensor, generator=None) -> SceneEncoding:
        """Single (H, W, 3) image -> SceneEncoding."""
        batch = image.permute(2, 0, 1).unsqueeze(0)
        slots, rgb, masks, s = self.forward(batch, generator)
        return SceneEncoding(
            z=slots[0], x=rgb[0], m=masks[0], s=s[0], model_tag="slot-attention"
        )


def sa_encode(image: Tensor, model: SlotAttentionModel, generator=None) -> Tensor:
    """(H, W, 3) image -> (K, d) slot latents."""
    if image.shape[0] != model.config.image_size:
        raise ValueError(
            f"image side {image.shape[0]} != configured {model.config.image_size}"
        )
    return model.encode(image.permute(2, 0, 1).unsqueeze(0), generator)[0]


def decode_slots(latents: Tensor, model: SlotAttentionModel) -> SceneEncoding:
    """(K, d) latents -> decoded SceneEncoding."""
    rgb, masks, s = model.decode(latents.unsqueeze(0))
    return SceneEncoding(
        z=latents, x=rgb[0], m=masks[0], s=s[0], model_tag="slot-attention"
    )
