"""Decomposing networks: image -> (depth, albedo, light, pose) and confidences.

``f_d``, ``f_a``, ``f_c`` and ``f_cc`` are skip-free convolutional
encoder-decoders with four stride-2 stages down to an ``image_size / 16``
bottleneck; ``f_l`` and ``f_v`` are convolutional encoders with an affine head.
All heads are initialised with small weights so raw outputs start near zero.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, NamedTuple, Optional

import numpy as np
import torch
from torch import nn

from .render import CameraIntrinsics, CanonicalModel, Lighting, Pose

MODULE_NAMES = ("f_d", "f_a", "f_l", "f_v", "f_c", "f_cc")
CKPT_MAGIC = "LEMUL-CKPT-1"
CONF_FLOOR = 1e-3
HEAD_INIT_STD = 1e-3


@dataclass(frozen=True)
class DecomposerConfig:
    image_size: int = 64
    base_channels: int = 32
    bottleneck_dim: int = 256
    rot_bound: float = math.pi / 3
    trans_bound: float = 0.1
    seed: int = 0
    fov_degrees: float = 10.0
    depth_range: tuple = (0.9, 1.1)

    def __post_init__(self):
        s = self.image_size
        if s < 16 or s & (s - 1):
            raise ValueError(f"image_size must be a power of two >= 16, got {s}")
        if self.base_channels < 1 or self.bottleneck_dim < 1:
            raise ValueError("base_channels and bottleneck_dim must be positive")
        if self.rot_bound <= 0 or self.trans_bound <= 0:
            raise ValueError("pose bounds must be positive")
        object.__setattr__(self, "depth_range", tuple(float(x) for x in self.depth_range))

    @property
    def camera(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.fov_degrees, self.image_size, self.depth_range)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["depth_range"] = list(self.depth_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DecomposerConfig":
        d = dict(d)
        if "depth_range" in d:
            d["depth_range"] = tuple(d["depth_range"])
        return cls(**d)


class DecompositionOutput(NamedTuple):
    depth: torch.Tensor  # (B, H, W)
    albedo: torch.Tensor  # (B, 3, H, W)
    light: Lighting
    pose: Pose

    @property
    def model(self) -> CanonicalModel:
        return CanonicalModel(self.depth, self.albedo)


class ConfidencePair(NamedTuple):
    c_l1: torch.Tensor  # (B, H, W)
    c_pe: torch.Tensor  # (B, H/4, W/4)


def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(16, max(1, channels // 4)), channels)


def _up(cin: int, cout: int):
    # bilinear resize + conv instead of a strided transposed conv: no
    # checkerboard ripple, which the depth-to-normal map amplifies badly
    return nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False), nn.Conv2d(cin, cout, 3, 1, 1)


class Encoder(nn.Module):
    def __init__(self, cin: int, cout: int, image_size: int, nf: int, zdim: int):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(cin, nf, 4, 2, 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(nf, nf * 2, 4, 2, 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(nf * 2, nf * 4, 4, 2, 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(nf * 4, nf * 8, 4, 2, 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(nf * 8, zdim, image_size // 16, 1, 0),
            nn.ReLU(inplace=True),
        )
        self.head = nn.Linear(zdim, cout)

    def forward(self, x):
        return self.head(self.features(x).flatten(1))


class EncoderDecoder(nn.Module):
    """Returns the full-resolution map and the stride-4 decoder features."""

    def __init__(self, cin: int, cout: int, nf: int, zdim: int):
        super().__init__()
        self.encoder = nn.Sequential(
            nn.Conv2d(cin, nf, 4, 2, 1),
            _norm(nf),
            nn.ReLU(inplace=True),
            nn.Conv2d(nf, nf * 2, 4, 2, 1),
            _norm(nf * 2),
            nn.ReLU(inplace=True),
            nn.Conv2d(nf * 2, nf * 4, 4, 2, 1),
            _norm(nf * 4),
            nn.ReLU(inplace=True),
            nn.Conv2d(nf * 4, zdim, 4, 2, 1),
            nn.ReLU(inplace=True),
        )
        self.up_to_quarter = nn.Sequential(
            *_up(zdim, nf * 4),
            _norm(nf * 4),
            nn.ReLU(inplace=True),
            *_up(nf * 4, nf * 2),
            _norm(nf * 2),
            nn.ReLU(inplace=True),
        )
        self.up_to_full = nn.Sequential(
            *_up(nf * 2, nf),
            _norm(nf),
            nn.ReLU(inplace=True),
            *_up(nf, nf),
            _norm(nf),
            nn.ReLU(inplace=True),
        )
        self.head = nn.Conv2d(nf, cout, 5, 1, 2)

    def forward(self, x):
        quarter = self.up_to_quarter(self.encoder(x))
        return self.head(self.up_to_full(quarter)), quarter


class ConfidenceNet(nn.Module):
    def __init__(self, cin: int, nf: int, zdim: int):
        super().__init__()
        self.body = EncoderDecoder(cin, 1, nf, zdim)
        self.pe_head = nn.Conv2d(nf * 2, 1, 3, 1, 1)

    def forward(self, x) -> ConfidencePair:
        full, quarter = self.body(x)
        raw_l1 = full[:, 0]
        raw_pe = self.pe_head(quarter)[:, 0]
        return ConfidencePair(
            torch.exp(raw_l1).clamp_min(CONF_FLOOR), torch.exp(raw_pe).clamp_min(CONF_FLOOR)
        )


class Decomposer(nn.Module):
    def __init__(self, config: DecomposerConfig = DecomposerConfig()):
        super().__init__()
        self.config = config
        nf, z, s = config.base_channels, config.bottleneck_dim, config.image_size
        self.f_d = EncoderDecoder(3, 1, nf, z)
        self.f_a = EncoderDecoder(3, 3, nf, z)
        self.f_l = Encoder(3, 4, s, nf, z)
        self.f_v = Encoder(3, 6, s, nf, z)
        self.f_c = ConfidenceNet(3, nf, z)
        self.f_cc = ConfidenceNet(6, nf, z)
        self.reset_parameters(config.seed)

    @property
    def camera(self) -> CameraIntrinsics:
        return self.config.camera

    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        heads = {id(m) for m in self._heads()}
        for module in self.modules():
            if isinstance(module, (nn.Conv2d, nn.Linear)):
                w = module.weight
                if id(module) in heads:
                    std = HEAD_INIT_STD
                else:
                    std = math.sqrt(2.0 / w[0].numel())
                with torch.no_grad():
                    w.copy_(torch.randn(w.shape, generator=gen) * std)
                    module.bias.zero_()
            elif isinstance(module, nn.GroupNorm):
                nn.init.ones_(module.weight)
                nn.init.zeros_(module.bias)

    def _heads(self):
        return [
            self.f_d.head,
            self.f_a.head,
            self.f_l.head,
            self.f_v.head,
            self.f_c.body.head,
            self.f_c.pe_head,
            self.f_cc.body.head,
            self.f_cc.pe_head,
        ]

    def _check_image(self, image: torch.Tensor, channels: int = 3) -> torch.Tensor:
        if image.dim() == 3:
            image = image[None]
        s = self.config.image_size
        if image.dim() != 4 or image.shape[1] != channels or image.shape[-2:] != (s, s):
            raise ValueError(f"expected images of shape (B, {channels}, {s}, {s}), got {tuple(image.shape)}")
        return image

    def _prep(self, image):
        return image * 2 - 1

    def decompose(self, image: torch.Tensor) -> DecompositionOutput:
        image = self._check_image(image)
        x = self._prep(image)
        cam = self.camera
        depth = cam.d_mid + cam.d_half * torch.tanh(self.f_d(x)[0][:, 0])
        albedo = torch.sigmoid(self.f_a(x)[0])
        raw_l = self.f_l(x)
        light = Lighting(
            torch.sigmoid(raw_l[:, 0]),
            torch.sigmoid(raw_l[:, 1]),
            torch.tanh(raw_l[:, 2]),
            torch.tanh(raw_l[:, 3]),
        )
        raw_v = torch.tanh(self.f_v(x))
        pose = Pose(raw_v[:, :3] * self.config.rot_bound, raw_v[:, 3:] * self.config.trans_bound)
        return DecompositionOutput(depth, albedo, light, pose)

    def confidence(self, image: torch.Tensor) -> ConfidencePair:
        image = self._check_image(image)
        return self.f_c(self._prep(image))

    def cross_confidence(self, image_i: torch.Tensor, image_j: torch.Tensor) -> ConfidencePair:
        image_i = self._check_image(image_i)
        image_j = self._check_image(image_j)
        if image_i.shape != image_j.shape:
            raise ValueError(f"image pair shapes differ: {tuple(image_i.shape)} vs {tuple(image_j.shape)}")
        return self.f_cc(self._prep(torch.cat([image_i, image_j], 1)))

    def forward(self, image):
        return self.decompose(image)

    def parameter_counts(self) -> Dict[str, int]:
        return {name: sum(p.numel() for p in getattr(self, name).parameters()) for name in MODULE_NAMES}


def init_params(config: DecomposerConfig) -> Decomposer:
    """A freshly initialised decomposer; deterministic in ``config.seed``."""
    return Decomposer(config)


# ---------------------------------------------------------------------------
# checkpoints: a zip of .npy arrays (numpy .npz) plus a JSON metadata entry


def save_checkpoint(path, net: Decomposer, extra_meta: Optional[dict] = None, extra_arrays: Optional[dict] = None):
    arrays = {}
    for name in MODULE_NAMES:
        for key, value in getattr(net, name).state_dict().items():
            arrays[f"{name}/{key}"] = value.detach().cpu().numpy()
    for key, value in (extra_arrays or {}).items():
        arrays[key] = np.asarray(value)
    meta = {"magic": CKPT_MAGIC, "config": net.config.to_dict()}
    meta.update(extra_meta or {})
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    tmp.replace(path)
    return path


def read_checkpoint(path):
    """Return ``(meta, arrays)`` after checking the format magic."""
    with np.load(path, allow_pickle=False) as data:
        if "__meta__" not in data.files:
            raise ValueError(f"{path}: not a checkpoint (missing metadata)")
        meta = json.loads(data["__meta__"].tobytes().decode())
        if meta.get("magic") != CKPT_MAGIC:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('magic')!r}")
        arrays = {k: data[k] for k in data.files if k != "__meta__"}
    return meta, arrays


def load_checkpoint(path):
    """Rebuild the decomposer stored at ``path``; returns ``(net, meta, arrays)``."""
    meta, arrays = read_checkpoint(path)
    net = Decomposer(DecomposerConfig.from_dict(meta["config"]))
    for name in MODULE_NAMES:
        module = getattr(net, name)
        prefix = name + "/"
        state = {k[len(prefix):]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith(prefix)}
        module.load_state_dict(state)
    return net, meta, arrays
