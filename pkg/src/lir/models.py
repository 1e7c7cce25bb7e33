"""Encoders, generators, discriminators and the frozen perceptual extractor.

Layout (UNIT family, desk scale):

* content encoder: 7x7 conv, ``downsamples`` stride-2 4x4 convs, residual
  blocks; instance norm throughout.
* generator: residual blocks, ``downsamples`` x (nearest upsample + 3x3 conv),
  7x7 conv to image channels, sigmoid.
* noise encoder: three convs (the first ``downsamples`` of them stride 2) and
  two 1x1 heads for mean and log-variance. No normalization, so the noise
  amplitude survives to the code.
* image discriminator: ``disc_layers`` stride-2 4x4 convs and a 1x1 logit
  projection (patch logits).
* representation discriminator: four stride-2 3x3 convs, global average pool,
  1x1 logit projection.
"""

from __future__ import annotations

import dataclasses
import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from lir.imaging import stream_seed

WEIGHT_MAGIC = b"LIRW"
WEIGHT_VERSION = 1
LOGVAR_CLAMP = 10.0

VGG19_CFG = (64, 64, "M", 128, 128, "M", 256, 256, 256, 256, "M", 512, 512, 512, 512, "M", 512)
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
PHI_FALLBACK_SEED = 19


class ShapeError(ValueError):
    pass


class WeightFileError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    base_channels: int = 32
    downsamples: int = 2
    content_res_blocks: int = 4
    generator_res_blocks: int = 4
    noise_code_channels: int = 8
    disc_layers: int = 4
    repr_disc_layers: int = 4
    image_channels: int = 3
    use_noise_encoder: bool = True
    # VGG-19 channel multiplier for the frozen extractor (1.0 = stock widths).
    phi_width: float = 1.0
    phi_weights: str = ""

    def __post_init__(self):
        for name in ("base_channels", "downsamples", "content_res_blocks", "generator_res_blocks",
                     "noise_code_channels", "disc_layers", "repr_disc_layers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.image_channels not in (1, 3):
            raise ConfigError("image_channels must be 1 or 3")
        if self.phi_width <= 0:
            raise ConfigError("phi_width must be positive")

    @property
    def code_channels(self) -> int:
        return self.base_channels * 2**self.downsamples

    @property
    def multiple(self) -> int:
        return 2**self.downsamples

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class NoiseCode(NamedTuple):
    mu: torch.Tensor
    log_var: torch.Tensor
    sample: torch.Tensor


def _conv(cin, cout, k, stride=1, pad_mode="reflect"):
    return nn.Conv2d(cin, cout, k, stride=stride, padding=(k - 1) // 2 if stride == 1 else 1,
                     padding_mode=pad_mode)


class ResBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.body = nn.Sequential(
            _conv(ch, ch, 3), nn.InstanceNorm2d(ch, affine=True), nn.ReLU(inplace=True),
            _conv(ch, ch, 3), nn.InstanceNorm2d(ch, affine=True),
        )

    def forward(self, x):
        return x + self.body(x)


def _check_divisible(x: torch.Tensor, multiple: int):
    if x.dim() != 4:
        raise ShapeError(f"expected a (N, C, H, W) batch, got shape {tuple(x.shape)}")
    h, w = x.shape[-2:]
    if h % multiple or w % multiple:
        raise ShapeError(f"input {h}x{w} not divisible by {multiple}; pad before encoding")


class ContentEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.multiple = cfg.multiple
        self.in_channels = cfg.image_channels
        ch = cfg.base_channels
        # normalization only inside residual branches: the skip path keeps absolute intensity
        layers = [_conv(cfg.image_channels, ch, 7), nn.ReLU(inplace=True)]
        for _ in range(cfg.downsamples):
            layers += [_conv(ch, 2 * ch, 4, stride=2), nn.ReLU(inplace=True)]
            ch *= 2
        layers += [ResBlock(ch) for _ in range(cfg.content_res_blocks)]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        _check_divisible(x, self.multiple)
        if x.shape[1] != self.in_channels:
            raise ShapeError(f"expected {self.in_channels} image channels, got {x.shape[1]}")
        return self.net(x)


class NoiseEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig, n_convs: int = 3):
        super().__init__()
        self.multiple = cfg.multiple
        layers, cin, ch = [], cfg.image_channels, cfg.base_channels
        for i in range(max(n_convs, cfg.downsamples)):
            stride = 2 if i < cfg.downsamples else 1
            layers += [_conv(cin, ch, 4 if stride == 2 else 3, stride=stride), nn.ReLU(inplace=True)]
            cin, ch = ch, ch * 2
        self.body = nn.Sequential(*layers)
        self.mu = nn.Conv2d(cin, cfg.noise_code_channels, 1)
        self.log_var = nn.Conv2d(cin, cfg.noise_code_channels, 1)

    def forward(self, x, generator: torch.Generator | None = None) -> NoiseCode:
        _check_divisible(x, self.multiple)
        h = self.body(x)
        mu = self.mu(h)
        log_var = self.log_var(h).clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP)
        eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
        return NoiseCode(mu, log_var, mu + torch.exp(0.5 * log_var) * eps)


class Generator(nn.Module):
    def __init__(self, cfg: ModelConfig, in_channels: int):
        super().__init__()
        ch = cfg.code_channels
        self.in_channels = in_channels
        layers = []
        if in_channels != ch:
            layers += [_conv(in_channels, ch, 3), nn.ReLU(inplace=True)]
        layers += [ResBlock(ch) for _ in range(cfg.generator_res_blocks)]
        for _ in range(cfg.downsamples):
            layers += [nn.Upsample(scale_factor=2, mode="nearest"), _conv(ch, ch // 2, 3),
                       nn.ReLU(inplace=True)]
            ch //= 2
        layers += [_conv(ch, cfg.image_channels, 7), nn.Sigmoid()]
        self.net = nn.Sequential(*layers)

    def forward(self, z):
        if z.dim() != 4 or z.shape[1] != self.in_channels:
            raise ShapeError(f"generator expects {self.in_channels} code channels, got shape {tuple(z.shape)}")
        return self.net(z)


class ImageDiscriminator(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        layers, cin, ch = [], cfg.image_channels, cfg.base_channels
        for _ in range(cfg.disc_layers):
            layers += [nn.Conv2d(cin, ch, 4, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True)]
            cin, ch = ch, min(ch * 2, cfg.base_channels * 8)
        self.body = nn.Sequential(*layers)
        self.head = nn.Conv2d(cin, 1, 1)
        self.min_size = 2**cfg.disc_layers

    def forward(self, x):
        if min(x.shape[-2:]) < self.min_size:
            raise ShapeError(f"discriminator input {tuple(x.shape[-2:])} below receptive minimum {self.min_size}")
        return self.head(self.body(x))


class ReprDiscriminator(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        ch = cfg.code_channels
        layers = []
        for _ in range(cfg.repr_disc_layers):
            layers += [nn.Conv2d(ch, ch, 3, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True)]
        self.body = nn.Sequential(*layers)
        self.head = nn.Conv2d(ch, 1, 1)
        self.in_channels = ch

    def forward(self, z):
        if z.dim() != 4 or z.shape[1] != self.in_channels:
            raise ShapeError(f"representation discriminator expects {self.in_channels} channels")
        h = self.body(z).mean(dim=(2, 3), keepdim=True)
        return self.head(h).flatten()


class PerceptualExtractor(nn.Module):
    """VGG-19 feature stack truncated at conv5_1 (pre-activation output).

    Gray inputs are replicated to three channels; inputs are ImageNet
    normalized. Parameters never require gradients.
    """

    def __init__(self, width: float = 1.0):
        super().__init__()
        layers, cin = [], 3
        for v in VGG19_CFG:
            if v == "M":
                layers.append(nn.MaxPool2d(2, 2))
            else:
                cout = max(1, int(round(v * width)))
                layers += [nn.Conv2d(cin, cout, 3, padding=1), nn.ReLU(inplace=False)]
                cin = cout
        layers.pop()  # keep conv5_1 itself, not its ReLU
        self.features = nn.Sequential(*layers)
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1), persistent=False)
        self.min_size = 16

    def forward(self, x):
        if min(x.shape[-2:]) < self.min_size:
            raise ShapeError(f"perceptual extractor needs inputs >= {self.min_size} pixels")
        if x.shape[1] == 1:
            x = x.expand(-1, 3, -1, -1)
        x = (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        return self.features(x)

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        return self

    def train(self, mode: bool = True):
        return super().train(False)


class ModelSet(nn.Module):
    """All networks of the framework. ``E_N`` is ``None`` without a noise branch."""

    TRAINABLE_G = ("E_X", "E_Y", "E_N", "G_X", "G_Y")
    TRAINABLE_D = ("D_X", "D_Y", "D_R")

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.config = cfg
        cz = cfg.code_channels
        self.E_X = ContentEncoder(cfg)
        self.E_Y = ContentEncoder(cfg)
        self.E_N = NoiseEncoder(cfg) if cfg.use_noise_encoder else None
        self.G_X = Generator(cfg, cz + cfg.noise_code_channels if cfg.use_noise_encoder else cz)
        self.G_Y = Generator(cfg, cz)
        self.D_X = ImageDiscriminator(cfg)
        self.D_Y = ImageDiscriminator(cfg)
        self.D_R = ReprDiscriminator(cfg)
        self.phi = PerceptualExtractor(cfg.phi_width).freeze()

    def generator_parameters(self):
        return [p for n in self.TRAINABLE_G if getattr(self, n) is not None for p in getattr(self, n).parameters()]

    def discriminator_parameters(self):
        return [p for n in self.TRAINABLE_D for p in getattr(self, n).parameters()]

    def trainable_manifest(self) -> list[str]:
        return [n for n, p in self.named_parameters() if p.requires_grad]


# ---------------------------------------------------------------------------
# Forward helpers
# ---------------------------------------------------------------------------


def content_encode(encoder: nn.Module, x: torch.Tensor) -> torch.Tensor:
    return encoder(x)


def noise_encode(encoder: NoiseEncoder, x: torch.Tensor, generator: torch.Generator | None = None) -> NoiseCode:
    return encoder(x, generator)


def generate_clean(g_y: nn.Module, z: torch.Tensor) -> torch.Tensor:
    return g_y(z)


def generate_noisy(g_x: nn.Module, z: torch.Tensor, n: NoiseCode | None) -> torch.Tensor:
    """Decode ``[z ; n.sample]`` (channel concat) or ``z`` alone without a noise code."""
    if n is None:
        return g_x(z)
    if z.shape[-2:] != n.sample.shape[-2:] or z.shape[0] != n.sample.shape[0]:
        raise ShapeError(f"content code {tuple(z.shape)} and noise code {tuple(n.sample.shape)} disagree")
    return g_x(torch.cat([z, n.sample], dim=1))


def discriminate_image(d: nn.Module, x: torch.Tensor) -> torch.Tensor:
    return d(x)


def discriminate_repr(d: nn.Module, z: torch.Tensor) -> torch.Tensor:
    return d(z)


def perceptual_features(phi: PerceptualExtractor | None, x: torch.Tensor) -> torch.Tensor:
    if phi is None:
        raise ConfigError("perceptual extractor not loaded")
    return phi(x)


# ---------------------------------------------------------------------------
# Initialization and serialization
# ---------------------------------------------------------------------------


def _init_module(module: nn.Module, gen: torch.Generator, zero_head: bool):
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1] // m.groups
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.InstanceNorm2d) and m.affine:
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, ResBlock):
                m.body[-1].weight.zero_()  # residual branch starts as identity
            elif isinstance(m, Generator):
                m.net[-2].weight.mul_(0.5 ** 0.5)  # no ReLU before the sigmoid: gain 1
    if zero_head:
        with torch.no_grad():
            module.head.weight.zero_()
            module.head.bias.zero_()


def init_phi(phi: PerceptualExtractor, weights: str = "") -> PerceptualExtractor:
    """Load VGG-19 weights into ``phi`` or fall back to the fixed-seed random extractor.

    ``weights`` may be a torchvision-style ``state_dict`` (``features.N.weight``
    keys, ``.pth``) or a LIRW file holding ``phi.*`` tensors.
    """
    if not weights:
        _init_module(phi, torch_stream_for(PHI_FALLBACK_SEED, "phi"), zero_head=False)
        return phi.freeze()
    path = Path(weights)
    if not path.is_file():
        raise ConfigError(f"perceptual weight file {path} not found")
    if path.suffix.lower() == ".lirw":
        tensors, _ = read_weight_file(path)
        state = {k[len("phi."):]: v for k, v in tensors.items() if k.startswith("phi.")}
    else:
        state = torch.load(path, map_location="cpu", weights_only=True)
        state = {k: v for k, v in state.items() if k.startswith("features.")}
    own = phi.state_dict()
    for name, t in own.items():
        if name not in state:
            raise ConfigError(f"perceptual weights missing tensor {name}")
        if tuple(state[name].shape) != tuple(t.shape):
            raise ConfigError(f"perceptual tensor {name}: shape {tuple(state[name].shape)} != {tuple(t.shape)}")
        with torch.no_grad():
            t.copy_(state[name])
    return phi.freeze()


def torch_stream_for(seed: int, label: str) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(stream_seed(seed, label))
    return g


def init_params(config: ModelConfig, seed: int = 0) -> ModelSet:
    """Build a ModelSet with deterministic He-normal convolutions.

    Every network draws from its own stream, so re-initializing one network
    leaves the others untouched. Discriminator logit heads start at zero.
    """
    models = ModelSet(config)
    for name in ("E_X", "E_Y", "E_N", "G_X", "G_Y", "D_X", "D_Y", "D_R"):
        net = getattr(models, name)
        if net is not None:
            _init_module(net, torch_stream_for(seed, f"init:{name}"), zero_head=name.startswith("D_"))
    init_phi(models.phi, config.phi_weights)
    return models


def write_weight_file(path, tensors: dict[str, torch.Tensor], echo: dict) -> None:
    buf = io.BytesIO()
    buf.write(WEIGHT_MAGIC)
    buf.write(struct.pack("<II", WEIGHT_VERSION, len(tensors)))
    for name, t in tensors.items():
        raw = name.encode("utf-8")
        arr = t.detach().cpu().to(torch.float32).contiguous().numpy()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.astype("<f4").tobytes())
    buf.write(json.dumps(echo, sort_keys=True).encode("utf-8"))
    Path(path).write_bytes(buf.getvalue())


def read_weight_file(path) -> tuple[dict[str, torch.Tensor], dict]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise WeightFileError(f"{path}: {exc}") from exc
    if data[:4] != WEIGHT_MAGIC:
        raise WeightFileError(f"{path}: bad magic {data[:4]!r}")
    try:
        version, count = struct.unpack_from("<II", data, 4)
        if version != WEIGHT_VERSION:
            raise WeightFileError(f"{path}: unsupported version {version}")
        off = 12
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off : off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", data, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", data, off)
            off += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            if off + 4 * n > len(data):
                raise WeightFileError(f"{path}: tensor {name} truncated")
            arr = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(dims)
            off += 4 * n
            tensors[name] = torch.from_numpy(arr.astype(np.float32))
        echo = json.loads(data[off:].decode("utf-8")) if off < len(data) else {}
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WeightFileError(f"{path}: malformed weight file ({exc})") from exc
    return tensors, echo


def model_tensors(models: ModelSet) -> dict[str, torch.Tensor]:
    return dict(models.state_dict())


def save_weights(models: ModelSet, path, extra: dict | None = None) -> None:
    echo = {"model_config": models.config.to_dict()}
    if extra:
        echo.update(extra)
    write_weight_file(path, model_tensors(models), echo)


def assign_tensors(models: ModelSet, tensors: dict[str, torch.Tensor], path="<memory>") -> None:
    own = models.state_dict()
    for name, t in own.items():
        if name not in tensors:
            raise WeightFileError(f"{path}: missing tensor {name}")
        if tuple(tensors[name].shape) != tuple(t.shape):
            raise WeightFileError(
                f"{path}: tensor {name} has shape {tuple(tensors[name].shape)}, expected {tuple(t.shape)}")
        with torch.no_grad():
            t.copy_(tensors[name])


def load_weights(path) -> ModelSet:
    tensors, echo = read_weight_file(path)
    if "model_config" not in echo:
        raise WeightFileError(f"{path}: missing model configuration echo")
    cfg = ModelConfig.from_dict(echo["model_config"])
    # phi comes from the file, not from the configured weight path
    models = ModelSet(dataclasses.replace(cfg, phi_weights=""))
    models.config = cfg
    assign_tensors(models, tensors, path)
    models.phi.freeze()
    return models


def count_parameters(module: nn.Module | None) -> int:
    return 0 if module is None else sum(p.numel() for p in module.parameters())
