"""Reconstruction network, image translators and discriminator."""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn

from .geometry import Mesh, decode_mesh, make_sphere_template, offset_dim, split_offsets

RECON_CONV = (64, 128, 256)
RECON_FC = (1024, 1024, 512, 1024, 2048)
TRANSLATOR_ENC = (64, 128, 256, 512, 512)
DISCRIMINATOR_CONV = (64, 128, 256)
IMAGE_CHANNELS = 4


def check_image_batch(images: torch.Tensor, image_size: int | None = None) -> torch.Tensor:
    """Validate a ``(B, 4, H, W)`` image batch; a single ``(4, H, W)`` image is promoted."""
    if not torch.is_tensor(images):
        raise TypeError("expected a torch tensor")
    if images.dim() == 3:
        images = images[None]
    if images.dim() != 4 or images.shape[1] != IMAGE_CHANNELS:
        raise ValueError(f"expected images of shape (B, 4, H, W), got {tuple(images.shape)}")
    if image_size is not None and images.shape[-2:] != (image_size, image_size):
        raise ValueError(f"expected {image_size}x{image_size} images, got "
                         f"{images.shape[-2]}x{images.shape[-1]}")
    return images


class ReconstructionNet(nn.Module):
    """Image to mesh: 5x5 stride-2 conv trunk, fully connected head, template decoding."""

    def __init__(self, image_size: int = 64, template: Mesh | None = None):
        super().__init__()
        if image_size % 8:
            raise ValueError("image_size must be divisible by 8")
        self.image_size = image_size
        self.template = template if template is not None else make_sphere_template()
        layers, c_in = [], IMAGE_CHANNELS
        for c in RECON_CONV:
            layers += [nn.Conv2d(c_in, c, 5, stride=2, padding=2), nn.BatchNorm2d(c), nn.ReLU()]
            c_in = c
        self.trunk = nn.Sequential(*layers)
        fc, d_in = [], c_in * (image_size // 8) ** 2
        for d in RECON_FC:
            fc += [nn.Linear(d_in, d), nn.ReLU()]
            d_in = d
        fc.append(nn.Linear(d_in, offset_dim(self.template)))
        self.head = nn.Sequential(*fc)

    @property
    def output_dim(self) -> int:
        return self.head[-1].out_features

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """Raw ``(B, 3V + 3)`` offsets."""
        images = check_image_batch(images, self.image_size)
        return self.head(self.trunk(images).flatten(1))

    def vertices(self, images: torch.Tensor) -> torch.Tensor:
        """Decoded ``(B, V, 3)`` vertex positions; faces are ``self.template.faces``."""
        per_vertex, global_offset = split_offsets(self(images), self.template.num_vertices)
        return decode_mesh(per_vertex, global_offset, self.template)


def _down(c_in, c_out, norm=True):
    layers = [nn.Conv2d(c_in, c_out, 4, stride=2, padding=1)]
    if norm:
        layers.append(nn.BatchNorm2d(c_out))
    layers.append(nn.LeakyReLU(0.2))
    return nn.Sequential(*layers)


def _up(c_in, c_out):
    return nn.Sequential(nn.ConvTranspose2d(c_in, c_out, 4, stride=2, padding=1),
                         nn.BatchNorm2d(c_out), nn.LeakyReLU(0.2))


class Translator(nn.Module):
    """U-Net style encoder/decoder with skip connections, output in [0, 1].

    The encoder is five 4x4 stride-2 blocks (64-128-256-512-512); the decoder
    mirrors them with transposed convolutions and concatenated skips. The
    final tanh is mapped affinely onto [0, 1].
    """

    def __init__(self, in_channels: int = IMAGE_CHANNELS, out_channels: int = IMAGE_CHANNELS):
        super().__init__()
        chans = TRANSLATOR_ENC
        self.encoder = nn.ModuleList()
        c_in = in_channels
        for c in chans:
            self.encoder.append(_down(c_in, c))
            c_in = c
        self.decoder = nn.ModuleList()
        skips = list(chans[:-1])[::-1]          # 512, 256, 128, 64
        c_in = chans[-1]
        for c in skips:
            self.decoder.append(_up(c_in, c))
            c_in = 2 * c
        self.final = nn.ConvTranspose2d(c_in, out_channels, 4, stride=2, padding=1)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        x = check_image_batch(images)
        if x.shape[-1] % 32 or x.shape[-2] % 32:
            raise ValueError("translator input size must be a multiple of 32")
        feats = []
        for block in self.encoder:
            x = block(x)
            feats.append(x)
        for block, skip in zip(self.decoder, feats[-2::-1]):
            x = torch.cat([block(x), skip], dim=1)
        return 0.5 * (torch.tanh(self.final(x)) + 1.0)

    @staticmethod
    def input_window(o: int) -> tuple[int, int]:
        """Inclusive range of input rows (or columns) that output row ``o`` depends on.

        Propagates index intervals backwards through every path: a 4x4
        stride-2 conv with padding 1 maps ``[lo, hi]`` to ``[2lo - 1, 2hi + 2]``,
        the matching transposed conv to ``[ceil((lo - 2) / 2), floor((hi + 1) / 2)]``.
        Ignores clipping at the image border.
        """
        depth = len(TRANSLATOR_ENC)

        def encoder(level, lo, hi):
            for _ in range(level):
                lo, hi = 2 * lo - 1, 2 * hi + 2
            return lo, hi

        def up(lo, hi):
            return -((2 - lo) // 2), (hi + 1) // 2

        def concat(level, lo, hi):
            s_lo, s_hi = encoder(level, lo, hi)
            d_lo, d_hi = up(lo, hi)
            if level + 1 == depth:
                u_lo, u_hi = encoder(depth, d_lo, d_hi)
            else:
                u_lo, u_hi = concat(level + 1, d_lo, d_hi)
            return min(s_lo, u_lo), max(s_hi, u_hi)

        return concat(1, *up(o, o))

    @classmethod
    def receptive_radius(cls) -> int:
        """Largest distance between an output pixel and any input pixel it depends on."""
        period = 2 ** len(TRANSLATOR_ENC)
        return max(max(o - lo, hi - o) for o in range(period) for lo, hi in [cls.input_window(o)])


class Discriminator(nn.Module):
    """Conv blocks 64-128-256 then a 1-channel conv, spatial mean, logistic sigmoid."""

    def __init__(self, in_channels: int = IMAGE_CHANNELS):
        super().__init__()
        layers, c_in = [], in_channels
        for c in DISCRIMINATOR_CONV:
            layers.append(_down(c_in, c))
            c_in = c
        layers.append(nn.Conv2d(c_in, 1, 4, stride=2, padding=1))
        self.body = nn.Sequential(*layers)

    def logits(self, images: torch.Tensor) -> torch.Tensor:
        return self.body(check_image_batch(images)).mean(dim=(1, 2, 3))

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """Per-image probability in (0, 1) of being a translated (not rendered) image."""
        return torch.sigmoid(self.logits(images))


# -- initialization -------------------------------------------------------------------------


def init_parameters(module: nn.Module, generator: torch.Generator, std: float = 0.02,
                    last_layer_scale: float | None = None) -> nn.Module:
    """Draw all weights from ``generator`` so initialization is seed-reproducible.

    Conv and transposed-conv weights ~ N(0, std^2); batch-norm scales ~ N(1, std^2);
    linear layers use uniform fan-in scaling. Biases start at zero.
    ``last_layer_scale`` shrinks the final linear layer (used for the
    reconstruction head so an untrained network outputs a near-sphere).
    """
    linears = [m for m in module.modules() if isinstance(m, nn.Linear)]
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                m.weight.copy_(torch.randn(m.weight.shape, generator=generator) * std)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.BatchNorm2d):
                m.weight.copy_(1.0 + torch.randn(m.weight.shape, generator=generator) * std)
                m.bias.zero_()
                m.reset_running_stats()
            elif isinstance(m, nn.Linear):
                bound = 1.0 / math.sqrt(m.in_features)
                w = (torch.rand(m.weight.shape, generator=generator) * 2 - 1) * bound
                if last_layer_scale is not None and m is linears[-1]:
                    w *= last_layer_scale
                m.weight.copy_(w)
                m.bias.zero_()
    return module


def init_reconstruction(module: nn.Module, generator: torch.Generator) -> nn.Module:
    """Kaiming init for the conv trunk; uniform fan-in init for the fully connected head.

    The fan-in head keeps hidden activations small, so an untrained network
    outputs a near-sphere and a single Adam step moves vertices by ~1e-2
    rather than crumpling the mesh.
    """
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, nn.Conv2d):
                fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                m.weight.copy_(torch.randn(m.weight.shape, generator=generator) * math.sqrt(2.0 / fan_in))
                m.bias.zero_()
            elif isinstance(m, nn.BatchNorm2d):
                m.weight.fill_(1.0)
                m.bias.zero_()
                m.reset_running_stats()
            elif isinstance(m, nn.Linear):
                bound = 1.0 / math.sqrt(m.in_features)
                m.weight.copy_((torch.rand(m.weight.shape, generator=generator) * 2 - 1) * bound)
                m.bias.zero_()
    return module


def make_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def reinitialize(kind: str, generator: torch.Generator | int) -> nn.Module:
    """Fresh network of ``kind`` in {"i2r", "r2i", "D", "R"} drawn from ``generator``.

    The reconstruction network is built at 64x64; use
    :func:`build_reconstruction` for other sizes.
    """
    if isinstance(generator, (int, np.integer)):
        generator = make_generator(int(generator))
    if kind in ("i2r", "r2i"):
        return init_parameters(Translator(), generator)
    if kind == "D":
        return init_parameters(Discriminator(), generator)
    if kind == "R":
        return build_reconstruction(64, generator)
    raise ValueError(f"unknown network kind {kind!r}")


def build_reconstruction(image_size: int, generator: torch.Generator | int) -> ReconstructionNet:
    if isinstance(generator, (int, np.integer)):
        generator = make_generator(int(generator))
    return init_reconstruction(ReconstructionNet(image_size), generator)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def flat_parameters(module: nn.Module) -> torch.Tensor:
    return torch.cat([p.detach().flatten() for p in module.parameters()])
