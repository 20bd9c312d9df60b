"""MONet-style recurrent scene decomposition with an objectness head.

A small U-Net predicts per-step attention over the remaining scope; a
component VAE encodes and reconstructs each masked component. The scope
recursion guarantees a pixelwise partition of unity across steps.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from ..encoding import SceneEncoding


@dataclass(frozen=True)
class MONetConfig:
    num_slots: int = 5
    latent_dim: int = 16
    beta_kl: float = 0.5
    channels: int = 16
    image_size: int = 64

    def __post_init__(self):
        if self.num_slots < 2:
            raise ValueError("num_slots must be >= 2")
        if self.beta_kl < 0:
            raise ValueError("beta_kl must be >= 0")
        if self.image_size % 8 != 0:
            raise ValueError("image_size must be divisible by 8")


class AttentionUNet(nn.Module):
    """3-level U-Net over (image, scope) -> attention logit map."""

    def __init__(self, channels: int):
        super().__init__()
        c = channels
        self.down1 = nn.Sequential(nn.Conv2d(4, c, 3, padding=1), nn.ReLU())
        self.down2 = nn.Sequential(nn.Conv2d(c, 2 * c, 3, padding=1), nn.ReLU())
        self.down3 = nn.Sequential(nn.Conv2d(2 * c, 4 * c, 3, padding=1), nn.ReLU())
        self.up2 = nn.Sequential(nn.Conv2d(6 * c, 2 * c, 3, padding=1), nn.ReLU())
        self.up1 = nn.Sequential(nn.Conv2d(3 * c, c, 3, padding=1), nn.ReLU())
        self.out = nn.Conv2d(c, 1, 3, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        h1 = self.down1(x)
        h2 = self.down2(F.avg_pool2d(h1, 2))
        h3 = self.down3(F.avg_pool2d(h2, 2))
        u2 = self.up2(torch.cat([F.interpolate(h3, scale_factor=2, mode="nearest"), h2], dim=1))
        u1 = self.up1(torch.cat([F.interpolate(u2, scale_factor=2, mode="nearest"), h1], dim=1))
        return self.out(u1)[:, 0]


class MONetModel(nn.Module):
    def __init__(self, config: MONetConfig):
        super().__init__()
        self.config = config
        c, d = config.channels, config.latent_dim
        self.attention = AttentionUNet(c)
        feat = config.image_size // 8
        self.encoder = nn.Sequential(
            nn.Conv2d(4, c, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(c, 2 * c, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(2 * c, 2 * c, 3, stride=2, padding=1), nn.ReLU(),
            nn.Flatten(),
            nn.Linear(2 * c * feat * feat, 2 * d),
        )
        self.decoder_pos = nn.Linear(4, d)
        self.decoder = nn.Sequential(
            nn.ConvTranspose2d(d, c, 4, stride=2, padding=1), nn.ReLU(),
            nn.ConvTranspose2d(c, c, 4, stride=2, padding=1), nn.ReLU(),
            nn.ConvTranspose2d(c, c, 4, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(c, c, 3, padding=1), nn.ReLU(),
        )
        self.decoder_out = nn.Conv2d(c, 3, 3, padding=1)
        self.objectness = nn.Linear(c, 1)
        nn.init.zeros_(self.objectness.weight)
        nn.init.constant_(self.objectness.bias, 3.0)

    def attention_masks(self, images: Tensor, num_steps: Optional[int] = None) -> Tensor:
        """Scope recursion: (B, 3, H, W) -> masks (B, K, H, W), summing to 1."""
        K = num_steps or self.config.num_slots
        B, _, H, W = images.shape
        scope = torch.ones(B, H, W, device=images.device, dtype=images.dtype)
        masks = []
        for k in range(K):
            if k == K - 1:
                masks.append(scope)  # last step takes the whole remaining scope
                break
            alpha = torch.sigmoid(self.attention(torch.cat([images, scope.unsqueeze(1)], dim=1)))
            masks.append(scope * alpha)
            scope = scope * (1.0 - alpha)
        return torch.stack(masks, dim=1)

    def encode_component(self, images: Tensor, mask: Tensor, generator=None) -> tuple[Tensor, Tensor, Tensor]:
        """Posterior sample z and its KL for one masked component."""
        h = self.encoder(torch.cat([images, mask.unsqueeze(1)], dim=1))
        mu, log_sigma = h.chunk(2, dim=1)
        sigma = log_sigma.exp()
        noise = torch.randn(mu.shape, generator=generator, device=mu.device, dtype=mu.dtype)
        z = mu + sigma * noise
        kl = 0.5 * (mu.pow(2) + sigma.pow(2) - 1.0 - 2.0 * log_sigma).sum(dim=1)
        return z, kl, mu

    def decode_component(self, z: Tensor) -> tuple[Tensor, Tensor]:
        """(B, d) -> rgb (B, H, W, 3) and objectness s (B,)."""
        B, d = z.shape
        init = self.config.image_size // 8
        grid_axis = torch.linspace(0.0, 1.0, init, device=z.device, dtype=z.dtype)
        ys, xs = torch.meshgrid(grid_axis, grid_axis, indexing="ij")
        grid = torch.stack([xs, ys, 1 - xs, 1 - ys], dim=-1).reshape(init * init, 4)
        pos = self.decoder_pos(grid).reshape(init, init, d).permute(2, 0, 1)
        x = z.reshape(B, d, 1, 1).expand(B, d, init, init) + pos
        features = self.decoder(x)
        rgb = torch.sigmoid(self.decoder_out(features)).permute(0, 2, 3, 1)
        s = torch.sigmoid(self.objectness(features.mean(dim=(2, 3)))).reshape(B)
        return rgb, s

    def decompose(
        self, images: Tensor, generator=None, num_steps: Optional[int] = None
    ) -> tuple[Tensor, Tensor, Tensor, Tensor, Tensor]:
        """(B, 3, H, W) -> masks (B,K,H,W), z (B,K,d), rgb (B,K,H,W,3),
        kl (B,K), s (B,K)."""
        masks = self.attention_masks(images, num_steps)
        K = masks.shape[1]
        zs, kls, rgbs, ss = [], [], [], []
        for k in range(K):
            z, kl, _ = self.encode_component(images, masks[:, k], generator)
            rgb, s = self.decode_component(z)
            zs.append(z)
            kls.append(kl)
            rgbs.append(rgb)
            ss.append(s)
        return (
            masks,
            torch.stack(zs, dim=1),
            torch.stack(rgbs, dim=1),
            torch.stack(kls, dim=1),
            torch.stack(ss, dim=1),
        )

    def encode_scene(self, image: Tensor, generator=None) -> SceneEncoding:
        batch = image.permute(2, 0, 1).unsqueeze(0)
        masks, z, rgb, kl, s = self.decompose(batch, generator)
        return SceneEncoding(z=z[0], x=rgb[0], m=masks[0], s=s[0], model_tag="monet")


def monet_decompose(
    image: Tensor, model: MONetModel, generator=None, num_steps: Optional[int] = None
) -> tuple[SceneEncoding, Tensor]:
    """(H, W, 3) image -> (SceneEncoding, per-slot KL terms)."""
    if image.shape[0] != model.config.image_size:
        raise ValueError(
            f"image side {image.shape[0]} != configured {model.config.image_size}"
        )
    batch = image.permute(2, 0, 1).unsqueeze(0)
    masks, z, rgb, kl, s = model.decompose(batch, generator, num_steps)
    enc = SceneEncoding(z=z[0], x=rgb[0], m=masks[0], s=s[0], model_tag="monet")
    return enc, kl[0]
