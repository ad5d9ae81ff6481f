"""Segmenter construction, profiling, EMA teacher and checkpoint archive."""

from __future__ import annotations

import copy
import dataclasses
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn

from ..core import ValidationError
from .swin_unet import SwinUnet, WindowAttention
from .unext import UNeXt

KINDS = ("lightweight_conv", "windowed_transformer")

PAPER_CHANNELS = (32, 64, 128, 160, 256)
DESK_CHANNELS = (8, 16, 32, 40, 64)


@dataclass(frozen=True)
class SegmenterSpec:
    kind: str
    input_size: int = 448
    num_classes: int = 2
    scale: str = "paper"
    encoder_channels: tuple = PAPER_CHANNELS
    block_dims: tuple = (96, 192, 384)
    bottleneck_dim: int = 768
    window_size: int = 7
    patch_size: int = 4
    depth: int = 2
    num_heads: tuple = (3, 6, 12, 24)

    @classmethod
    def for_scale(cls, kind, scale="paper", num_classes=2, input_size=None):
        if scale == "paper":
            return cls(kind, input_size or 448, num_classes, "paper")
        if scale == "desk":
            return cls(kind, input_size or 64, num_classes, "desk",
                       encoder_channels=DESK_CHANNELS, block_dims=(24, 48, 96),
                       bottleneck_dim=192, window_size=4)
        raise ValidationError(f"unknown scale {scale!r}")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("encoder_channels", "block_dims", "num_heads"):
            d[k] = tuple(d[k])
        return cls(**d)

    def check(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown segmenter kind {self.kind!r}; expected one of {KINDS}")
        if self.num_classes < 2:
            raise ValidationError("num_classes must be >= 2")
        S = self.input_size
        if self.kind == "lightweight_conv":
            if len(self.encoder_channels) != 5:
                raise ValidationError("lightweight_conv needs exactly five encoder channel widths")
            if S % 32:
                raise ValidationError(f"input_size {S} is not a multiple of 32 (five 2x downsamplings)")
            return
        n_stages = len(self.block_dims) + 1
        if len(self.num_heads) < n_stages:
            raise ValidationError(f"need {n_stages} head counts, got {self.num_heads}")
        if S % (self.patch_size * 2 ** (n_stages - 1)):
            raise ValidationError(
                f"input_size {S} must be divisible by patch_size*2^{n_stages - 1} = "
                f"{self.patch_size * 2 ** (n_stages - 1)}")
        res = S // self.patch_size
        for i in range(n_stages):
            r = res // 2 ** i
            w = min(self.window_size, r)
            if r % w:
                raise ValidationError(
                    f"stage {i} resolution {r} cannot be tiled by window size {self.window_size}")


def build_segmenter(spec, seed=None):
    """Instantiate the network described by ``spec``.

    With ``seed`` set, initialisation is reproducible and leaves the global
    torch RNG untouched.
    """
    spec.check()
    with torch.random.fork_rng(devices=[]):
        if seed is not None:
            torch.manual_seed(seed)
        if spec.kind == "lightweight_conv":
            model = UNeXt(spec.num_classes, channels=spec.encoder_channels)
        else:
            model = SwinUnet(spec.input_size, spec.num_classes, patch_size=spec.patch_size,
                             dims=spec.block_dims, bottleneck_dim=spec.bottleneck_dim,
                             depth=spec.depth, num_heads=spec.num_heads,
                             window_size=spec.window_size)
    model.spec = spec
    return model


def forward(model, images):
    """Logit map for a (B, 3, S, S) image batch, with shape checking."""
    spec = getattr(model, "spec", None)
    if images.dim() != 4 or images.shape[1] != 3:
        raise ValidationError(f"expected a (B, 3, S, S) image batch, got {tuple(images.shape)}")
    if spec is not None and tuple(images.shape[-2:]) != (spec.input_size, spec.input_size):
        raise ValidationError(
            f"image size {tuple(images.shape[-2:])} does not match the model input size "
            f"{spec.input_size}x{spec.input_size}")
    return model(images)


def count_parameters(model):
    return sum(p.numel() for p in model.parameters())


def count_flops(model, input_size=None, in_ch=3):
    """FLOPs (2 x multiply-accumulates) of one forward pass on a single image.

    Counts convolutions, linear layers and the two attention matmuls
    (QK^T and AV); normalisation, activations and resampling are ignored.
    """
    if input_size is None:
        input_size = model.spec.input_size
    macs = 0

    def conv_hook(m, inp, out):
        nonlocal macs
        k = m.kernel_size[0] * m.kernel_size[1] * m.in_channels // m.groups
        macs += out.numel() * k

    def linear_hook(m, inp, out):
        nonlocal macs
        macs += out.numel() * m.in_features

    def attn_hook(m, inp, out):
        nonlocal macs
        B_, N, C = inp[0].shape
        macs += 2 * B_ * N * N * C

    hooks = []
    for m in model.modules():
        if isinstance(m, nn.Conv2d):
            hooks.append(m.register_forward_hook(conv_hook))
        elif isinstance(m, nn.Linear):
            hooks.append(m.register_forward_hook(linear_hook))
        elif isinstance(m, WindowAttention):
            hooks.append(m.register_forward_hook(attn_hook))
    was_training = model.training
    try:
        model.eval()
        with torch.no_grad():
            model(torch.zeros(1, in_ch, input_size, input_size))
    finally:
        for h in hooks:
            h.remove()
        model.train(was_training)
    return 2 * macs


# ---------------------------------------------------------------------------
# EMA teacher

def ema_decay_at(step, decay):
    """Warm-up schedule: the effective decay never exceeds 1 - 1/(step + 1)."""
    return min(1.0 - 1.0 / (step + 1), decay)


class EMATeacher:
    """Frozen copy of a student whose weights track an exponential moving average.

    ``model`` never receives gradients; ``step`` counts completed updates.
    """

    def __init__(self, student, decay=0.99):
        self.model = copy.deepcopy(student)
        for p in self.model.parameters():
            p.requires_grad_(False)
            p.grad = None
        self.model.eval()
        self.decay = decay
        self.step = 0

    def parameters(self):
        return list(self.model.parameters())

    @torch.no_grad()
    def __call__(self, images):
        self.model.eval()
        return self.model(images)


@torch.no_grad()
def ema_update(teacher, student, decay=None):
    """teacher <- decay * teacher + (1 - decay) * student, parameter-wise.

    Floating-point buffers (batch-norm statistics) are copied from the student.
    Returns the updated teacher.
    """
    decay = teacher.decay if decay is None else decay
    if not 0.0 <= decay <= 1.0:
        raise ValidationError(f"decay must lie in [0, 1], got {decay}")
    t_params = list(teacher.model.parameters())
    s_params = list(student.parameters())
    if len(t_params) != len(s_params):
        raise ValidationError("teacher and student have different parameter counts")
    for t, s in zip(t_params, s_params):
        if t.shape != s.shape:
            raise ValidationError(f"parameter shape mismatch: teacher {tuple(t.shape)} vs student {tuple(s.shape)}")
    for t, s in zip(t_params, s_params):
        t.mul_(decay).add_(s.detach(), alpha=1.0 - decay)
    for t, s in zip(teacher.model.buffers(), student.buffers()):
        t.copy_(s)
    teacher.step += 1
    return teacher


# ---------------------------------------------------------------------------
# checkpoint archive

def save_checkpoint(path, model, config_hash=None, extra=None):
    """Write parameters, spec and config hash as one archive, atomically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "spec": model.spec.to_dict(),
        "config_hash": config_hash,
        "state_dict": {k: v.detach().clone() for k, v in model.state_dict().items()},
    }
    if extra:
        payload["extra"] = extra
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    os.close(fd)
    try:
        torch.save(payload, tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)
    return path


def load_checkpoint(path):
    """Returns (model, payload). The model is rebuilt from the stored spec."""
    payload = torch.load(path, map_location="cpu", weights_only=True)
    spec = SegmenterSpec.from_dict(payload["spec"])
    model = build_segmenter(spec)
    model.load_state_dict(payload["state_dict"])
    return model, payload


def load_pretrained(model, path, strict=False):
    """Optional hook: copy matching tensors from a plain state-dict file into ``model``."""
    state = torch.load(path, map_location="cpu", weights_only=True)
    if "state_dict" in state:
        state = state["state_dict"]
    own = model.state_dict()
    matched = {k: v for k, v in state.items() if k in own and own[k].shape == v.shape}
    model.load_state_dict(matched, strict=strict)
    return sorted(matched)
