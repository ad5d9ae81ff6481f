"""Lightweight convolutional segmenter with tokenized shifted-MLP stages (UNeXt family)."""

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def _shift(x, H, W, dim, pad):
    """Roll channel groups by -pad..pad along a spatial axis (2=H, 3=W)."""
    B, N, C = x.shape
    xn = x.transpose(1, 2).reshape(B, C, H, W)
    xn = F.pad(xn, (pad, pad, pad, pad))
    chunks = torch.chunk(xn, 2 * pad + 1, dim=1)
    shifted = [torch.roll(c, s, dim) for c, s in zip(chunks, range(-pad, pad + 1))]
    xn = torch.cat(shifted, dim=1)
    xn = xn[:, :, pad:pad + H, pad:pad + W]
    return xn.reshape(B, C, H * W).transpose(1, 2)


class DWConv(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.dwconv = nn.Conv2d(dim, dim, 3, 1, 1, bias=True, groups=dim)

    def forward(self, x, H, W):
        B, N, C = x.shape
        x = x.transpose(1, 2).reshape(B, C, H, W)
        x = self.dwconv(x)
        return x.flatten(2).transpose(1, 2)


class ShiftMLP(nn.Module):
    def __init__(self, dim, hidden=None, shift_size=5):
        super().__init__()
        hidden = hidden or dim
        self.pad = shift_size // 2
        self.fc1 = nn.Linear(dim, hidden)
        self.dwconv = DWConv(hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x, H, W):
        x = _shift(x, H, W, 2, self.pad)
        x = self.fc1(x)
        x = self.act(self.dwconv(x, H, W))
        x = _shift(x, H, W, 3, self.pad)
        return self.fc2(x)


class ShiftedBlock(nn.Module):
    def __init__(self, dim, mlp_ratio=1.0):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.mlp = ShiftMLP(dim, int(dim * mlp_ratio))

    def forward(self, x, H, W):
        return x + self.mlp(self.norm(x), H, W)


class OverlapPatchEmbed(nn.Module):
    def __init__(self, in_ch, embed_dim, patch_size=3, stride=2):
        super().__init__()
        self.proj = nn.Conv2d(in_ch, embed_dim, patch_size, stride, patch_size // 2)
        self.norm = nn.LayerNorm(embed_dim)

    def forward(self, x):
        x = self.proj(x)
        _, _, H, W = x.shape
        x = self.norm(x.flatten(2).transpose(1, 2))
        return x, H, W


class UNeXt(nn.Module):
    """Three conv stages, two tokenized-MLP stages, mirrored decoder with additive skips.

    ``channels`` are the five encoder widths; the decoder mirrors them. Spatial
    input size must be a multiple of 32.
    """

    def __init__(self, num_classes=2, in_ch=3, channels=(32, 64, 128, 160, 256)):
        super().__init__()
        c1, c2, c3, c4, c5 = channels
        self.encoder1 = nn.Conv2d(in_ch, c1, 3, 1, 1)
        self.encoder2 = nn.Conv2d(c1, c2, 3, 1, 1)
        self.encoder3 = nn.Conv2d(c2, c3, 3, 1, 1)
        self.ebn1 = nn.BatchNorm2d(c1)
        self.ebn2 = nn.BatchNorm2d(c2)
        self.ebn3 = nn.BatchNorm2d(c3)

        self.patch_embed3 = OverlapPatchEmbed(c3, c4)
        self.patch_embed4 = OverlapPatchEmbed(c4, c5)
        self.block1 = ShiftedBlock(c4)
        self.block2 = ShiftedBlock(c5)
        self.norm3 = nn.LayerNorm(c4)
        self.norm4 = nn.LayerNorm(c5)

        self.decoder1 = nn.Conv2d(c5, c4, 3, 1, 1)
        self.decoder2 = nn.Conv2d(c4, c3, 3, 1, 1)
        self.decoder3 = nn.Conv2d(c3, c2, 3, 1, 1)
        self.decoder4 = nn.Conv2d(c2, c1, 3, 1, 1)
        self.decoder5 = nn.Conv2d(c1, c1, 3, 1, 1)
        self.dbn1 = nn.BatchNorm2d(c4)
        self.dbn2 = nn.BatchNorm2d(c3)
        self.dbn3 = nn.BatchNorm2d(c2)
        self.dbn4 = nn.BatchNorm2d(c1)
        self.dblock1 = ShiftedBlock(c4)
        self.dblock2 = ShiftedBlock(c3)
        self.dnorm3 = nn.LayerNorm(c4)
        self.dnorm4 = nn.LayerNorm(c3)

        self.final = nn.Conv2d(c1, num_classes, 1)
        self.apply(self._init_weights)

    @staticmethod
    def _init_weights(m):
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Conv2d):
            fan_out = m.kernel_size[0] * m.kernel_size[1] * m.out_channels // m.groups
            nn.init.normal_(m.weight, 0, math.sqrt(2.0 / fan_out))
            if m.bias is not None:
                nn.init.zeros_(m.bias)

    @staticmethod
    def _up(x):
        return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)

    @staticmethod
    def _to_map(x, H, W):
        B, N, C = x.shape
        return x.transpose(1, 2).reshape(B, C, H, W)

    def forward(self, x):
        out = F.relu(F.max_pool2d(self.ebn1(self.encoder1(x)), 2))
        t1 = out
        out = F.relu(F.max_pool2d(self.ebn2(self.encoder2(out)), 2))
        t2 = out
        out = F.relu(F.max_pool2d(self.ebn3(self.encoder3(out)), 2))
        t3 = out

        out, H, W = self.patch_embed3(out)
        out = self.norm3(self.block1(out, H, W))
        out = self._to_map(out, H, W)
        t4 = out

        out, H, W = self.patch_embed4(out)
        out = self.norm4(self.block2(out, H, W))
        out = self._to_map(out, H, W)

        out = F.relu(self._up(self.dbn1(self.decoder1(out)))) + t4
        _, _, H, W = out.shape
        out = out.flatten(2).transpose(1, 2)
        out = self.dnorm3(self.dblock1(out, H, W))
        out = self._to_map(out, H, W)

        out = F.relu(self._up(self.dbn2(self.decoder2(out)))) + t3
        _, _, H, W = out.shape
        out = out.flatten(2).transpose(1, 2)
        out = self.dnorm4(self.dblock2(out, H, W))
        out = self._to_map(out, H, W)

        out = F.relu(self._up(self.dbn3(self.decoder3(out)))) + t2
        out = F.relu(self._up(self.dbn4(self.decoder4(out)))) + t1
        out = F.relu(self._up(self.decoder5(out)))
        return self.final(out)
