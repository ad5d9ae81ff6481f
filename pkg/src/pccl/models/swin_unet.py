"""U-shaped shifted-window transformer segmenter (Swin-Unet family)."""

import torch
import torch.nn as nn


def window_partition(x, ws):
    B, H, W, C = x.shape
    x = x.view(B, H // ws, ws, W // ws, ws, C)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, ws * ws, C)


def window_reverse(windows, ws, H, W):
    B = windows.shape[0] // ((H // ws) * (W // ws))
    x = windows.view(B, H // ws, W // ws, ws, ws, -1)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(B, H, W, -1)


class WindowAttention(nn.Module):
    """Multi-head self attention inside non-overlapping windows, with relative position bias."""

    def __init__(self, dim, window_size, num_heads):
        super().__init__()
        self.dim = dim
        self.window_size = window_size
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5

        self.relative_position_bias_table = nn.Parameter(
            torch.zeros((2 * window_size - 1) ** 2, num_heads))
        coords = torch.stack(torch.meshgrid(
            torch.arange(window_size), torch.arange(window_size), indexing="ij")).flatten(1)
        rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0) + (window_size - 1)
        self.register_buffer(
            "relative_position_index", rel[..., 0] * (2 * window_size - 1) + rel[..., 1],
            persistent=False)

        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        nn.init.trunc_normal_(self.relative_position_bias_table, std=0.02)

    def forward(self, x, mask=None):
        B_, N, C = x.shape
        qkv = self.qkv(x).reshape(B_, N, 3, self.num_heads, C // self.num_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q * self.scale) @ k.transpose(-2, -1)
        bias = self.relative_position_bias_table[self.relative_position_index.view(-1)]
        attn = attn + bias.view(N, N, -1).permute(2, 0, 1).unsqueeze(0)
        if mask is not None:
            nW = mask.shape[0]
            attn = attn.view(B_ // nW, nW, self.num_heads, N, N) + mask.unsqueeze(1).unsqueeze(0)
            attn = attn.view(-1, self.num_heads, N, N)
        attn = attn.softmax(dim=-1)
        x = (attn @ v).transpose(1, 2).reshape(B_, N, C)
        return self.proj(x)


class Mlp(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class SwinBlock(nn.Module):
    def __init__(self, dim, resolution, num_heads, window_size=7, shift=False, mlp_ratio=4.0):
        super().__init__()
        self.resolution = resolution
        if resolution <= window_size:
            # window covers the whole map: nothing to shift
            window_size = resolution
            shift = False
        self.window_size = window_size
        self.shift_size = window_size // 2 if shift else 0

        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, window_size, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

        if self.shift_size:
            H = W = resolution
            img_mask = torch.zeros(1, H, W, 1)
            cuts = (slice(0, -window_size), slice(-window_size, -self.shift_size),
                    slice(-self.shift_size, None))
            cnt = 0
            for h in cuts:
                for w in cuts:
                    img_mask[:, h, w, :] = cnt
                    cnt += 1
            mw = window_partition(img_mask, window_size).squeeze(-1)
            attn_mask = mw.unsqueeze(1) - mw.unsqueeze(2)
            attn_mask = attn_mask.masked_fill(attn_mask != 0, -100.0).masked_fill(attn_mask == 0, 0.0)
        else:
            attn_mask = None
        self.register_buffer("attn_mask", attn_mask, persistent=False)

    def forward(self, x):
        H = W = self.resolution
        B, L, C = x.shape
        shortcut = x
        x = self.norm1(x).view(B, H, W, C)
        if self.shift_size:
            x = torch.roll(x, (-self.shift_size, -self.shift_size), dims=(1, 2))
        windows = self.attn(window_partition(x, self.window_size), mask=self.attn_mask)
        x = window_reverse(windows, self.window_size, H, W)
        if self.shift_size:
            x = torch.roll(x, (self.shift_size, self.shift_size), dims=(1, 2))
        x = shortcut + x.reshape(B, H * W, C)
        return x + self.mlp(self.norm2(x))


class PatchMerging(nn.Module):
    def __init__(self, resolution, dim):
        super().__init__()
        self.resolution = resolution
        self.norm = nn.LayerNorm(4 * dim)
        self.reduction = nn.Linear(4 * dim, 2 * dim, bias=False)

    def forward(self, x):
        H = W = self.resolution
        B, L, C = x.shape
        x = x.view(B, H, W, C)
        x = torch.cat([x[:, 0::2, 0::2], x[:, 1::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 1::2]], -1)
        return self.reduction(self.norm(x.view(B, -1, 4 * C)))


class PatchExpand(nn.Module):
    """Inverse of PatchMerging: linear expansion then pixel-shuffle to ``scale``x resolution."""

    def __init__(self, resolution, dim, scale=2, out_dim=None):
        super().__init__()
        self.resolution = resolution
        self.scale = scale
        self.out_dim = out_dim or dim // 2
        self.expand = nn.Linear(dim, scale * scale * self.out_dim, bias=False)
        self.norm = nn.LayerNorm(self.out_dim)

    def forward(self, x):
        H = W = self.resolution
        s, c = self.scale, self.out_dim
        x = self.expand(x)
        B = x.shape[0]
        x = x.view(B, H, W, s, s, c).permute(0, 1, 3, 2, 4, 5).reshape(B, H * s * W * s, c)
        return self.norm(x)


class SwinUnet(nn.Module):
    """Encoder stages of ``dims``, a bottleneck at ``bottleneck_dim``, mirrored decoder.

    Every stage holds ``depth`` blocks alternating regular and shifted windows.
    """

    def __init__(self, img_size=448, num_classes=2, in_ch=3, patch_size=4,
                 dims=(96, 192, 384), bottleneck_dim=768, depth=2,
                 num_heads=(3, 6, 12, 24), window_size=7):
        super().__init__()
        stage_dims = list(dims) + [bottleneck_dim]
        n = len(stage_dims)
        for a, b in zip(stage_dims, stage_dims[1:]):
            if b != 2 * a:
                raise ValueError(f"stage dims must double per stage, got {stage_dims}")
        res0 = img_size // patch_size

        self.patch_embed = nn.Conv2d(in_ch, dims[0], patch_size, patch_size)
        self.patch_norm = nn.LayerNorm(dims[0])

        self.encoder = nn.ModuleList()
        self.merges = nn.ModuleList()
        for i, d in enumerate(stage_dims):
            res = res0 // 2 ** i
            self.encoder.append(nn.ModuleList(
                SwinBlock(d, res, num_heads[i], window_size, shift=bool(j % 2)) for j in range(depth)))
            if i < n - 1:
                self.merges.append(PatchMerging(res, d))
        self.norm = nn.LayerNorm(bottleneck_dim)

        self.expands = nn.ModuleList()
        self.concat_back = nn.ModuleList()
        self.decoder = nn.ModuleList()
        for i in reversed(range(n - 1)):
            res = res0 // 2 ** i
            d = stage_dims[i]
            self.expands.append(PatchExpand(res // 2, 2 * d))
            self.concat_back.append(nn.Linear(2 * d, d))
            self.decoder.append(nn.ModuleList(
                SwinBlock(d, res, num_heads[i], window_size, shift=bool(j % 2)) for j in range(depth)))
        self.norm_up = nn.LayerNorm(dims[0])
        self.final_expand = PatchExpand(res0, dims[0], scale=patch_size, out_dim=dims[0])
        self.output = nn.Conv2d(dims[0], num_classes, 1, bias=False)
        self.res0 = res0
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

    def forward(self, x):
        x = self.patch_embed(x).flatten(2).transpose(1, 2)
        x = self.patch_norm(x)

        skips = []
        for i, blocks in enumerate(self.encoder):
            for blk in blocks:
                x = blk(x)
            if i < len(self.merges):
                skips.append(x)
                x = self.merges[i](x)
        x = self.norm(x)

        for expand, cat, blocks in zip(self.expands, self.concat_back, self.decoder):
            x = expand(x)
            x = cat(torch.cat([x, skips.pop()], -1))
            for blk in blocks:
                x = blk(x)
        x = self.norm_up(x)

        x = self.final_expand(x)
        B, L, C = x.shape
        S = self.res0 * self.final_expand.scale
        x = x.view(B, S, S, C).permute(0, 3, 1, 2)
        return self.output(x)
