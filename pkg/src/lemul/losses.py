"""Training objectives: confidence-weighted reconstruction, cross-view
component swapping and edge-aware albedo smoothness."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import List, NamedTuple, Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .render import CameraIntrinsics, CanonicalModel, Lighting, Pose, RenderedView, render


@dataclass(frozen=True)
class LossWeights:
    lambda_pe: float = 1.0
    lambda_cross: float = 0.5
    lambda_al: float = 0.5
    sigma_c: float = 0.05
    sigma_d: float = 2.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be nonnegative")
        if self.sigma_c <= 0 or self.sigma_d <= 0:
            raise ValueError("sigma_c and sigma_d must be positive")


class LossBreakdown(NamedTuple):
    rec: torch.Tensor
    rec_cross: torch.Tensor
    al: torch.Tensor
    al_cross: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict:
        return {k: float(v) for k, v in self._asdict().items()}


def combine(rec, rec_cross, al, al_cross, weights: LossWeights) -> LossBreakdown:
    total = rec + weights.lambda_cross * rec_cross + weights.lambda_al * (al + weights.lambda_cross * al_cross)
    return LossBreakdown(rec, rec_cross, al, al_cross, total)


# ---------------------------------------------------------------------------
# per-image terms; all accept a leading batch dim and return one value per item


def l1_conf_loss(image: torch.Tensor, image_prime: torch.Tensor, conf: torch.Tensor) -> torch.Tensor:
    """Mean over pixels of ``sqrt(2) |I - I'|_1 / c + ln c``.

    Images are ``(B, C, H, W)``; ``conf`` is ``(B, H, W)``. The L1 norm sums
    over channels.
    """
    if image.shape != image_prime.shape:
        raise ValueError(f"image shapes differ: {tuple(image.shape)} vs {tuple(image_prime.shape)}")
    if conf.shape != image.shape[:1] + image.shape[2:]:
        raise ValueError(f"confidence {tuple(conf.shape)} does not match image {tuple(image.shape)}")
    if (conf <= 0).any():
        raise ValueError("confidence map must be strictly positive")
    residual = (image - image_prime).abs().sum(1)
    return (math.sqrt(2) * residual / conf + torch.log(conf)).flatten(1).mean(1)


def perceptual_conf_loss(feat: torch.Tensor, feat_prime: torch.Tensor, conf: torch.Tensor) -> torch.Tensor:
    """Mean over feature cells of ``||f - f'||^2 / (2 c^2) + ln c``."""
    if feat.shape != feat_prime.shape:
        raise ValueError(f"feature shapes differ: {tuple(feat.shape)} vs {tuple(feat_prime.shape)}")
    if conf.shape != feat.shape[:1] + feat.shape[2:]:
        raise ValueError(f"confidence {tuple(conf.shape)} does not match features {tuple(feat.shape)}")
    if (conf <= 0).any():
        raise ValueError("confidence map must be strictly positive")
    sq = (feat - feat_prime).pow(2).sum(1)
    return (sq / (2 * conf**2) + torch.log(conf)).flatten(1).mean(1)


class PerceptualFeatures(nn.Module):
    """Frozen 4-layer conv stack producing stride-4 features.

    Weights are orthogonal with a fixed seed. ``load_external`` swaps in any
    compatible state dict (e.g. converted pretrained weights).
    """

    def __init__(self, channels: int = 32, seed: int = 0):
        super().__init__()
        self.layers = nn.Sequential(
            nn.Conv2d(3, channels // 2, 3, 1, 1),
            nn.ReLU(),
            nn.Conv2d(channels // 2, channels, 3, 2, 1),
            nn.ReLU(),
            nn.Conv2d(channels, channels, 3, 1, 1),
            nn.ReLU(),
            nn.Conv2d(channels, channels, 3, 2, 1),
        )
        gen = torch.Generator().manual_seed(seed)
        for m in self.layers:
            if isinstance(m, nn.Conv2d):
                with torch.no_grad():
                    nn.init.orthogonal_(m.weight, generator=gen)
                    m.bias.zero_()
        self.requires_grad_(False)

    def load_external(self, state_dict) -> None:
        self.load_state_dict(state_dict)
        self.requires_grad_(False)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        # follows the input dtype so float64 gradient checks work without a copy of the module
        x = image * 2 - 1
        for layer in self.layers:
            if isinstance(layer, nn.Conv2d):
                x = F.conv2d(x, layer.weight.to(x.dtype), layer.bias.to(x.dtype), layer.stride, layer.padding)
            else:
                x = layer(x)
        return x


def albedo_smoothness(
    image: torch.Tensor,
    albedo: torch.Tensor,
    depth: torch.Tensor,
    mask: torch.Tensor,
    weights: LossWeights = LossWeights(),
) -> torch.Tensor:
    """Edge-aware albedo smoothness over the masked pixels, one value per item.

    Per pixel the weighted albedo differences to every in-mask 8-neighbour are
    summed first and the squared norm of that sum (over channels) is averaged
    over the mask. Items with an empty mask contribute 0.
    """
    if image.dim() == 3:
        image, albedo, depth, mask = image[None], albedo[None], depth[None], mask[None]
    b, _, h, w = albedo.shape
    if image.shape[-2:] != (h, w) or depth.shape[-2:] != (h, w) or mask.shape[-2:] != (h, w):
        raise ValueError("albedo_smoothness inputs are not pixel-aligned")
    maskf = mask.to(albedo.dtype)

    def shifted(t, dy, dx):
        # t[..., y + dy, x + dx], zero padded
        pad = F.pad(t, (1, 1, 1, 1))
        return pad[..., 1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]

    acc = torch.zeros_like(albedo)
    d4 = depth[:, None]
    m4 = maskf[:, None]
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            wc = torch.exp(-(image - shifted(image, dy, dx)).pow(2).sum(1, keepdim=True) / (2 * weights.sigma_c**2))
            wd = torch.exp(-(d4 - shifted(d4, dy, dx)).pow(2) / (2 * weights.sigma_d**2))
            acc = acc + shifted(m4, dy, dx) * wc * wd * (albedo - shifted(albedo, dy, dx))
    per_pixel = acc.pow(2).sum(1) * maskf
    count = maskf.flatten(1).sum(1)
    return per_pixel.flatten(1).sum(1) / count.clamp_min(1)


def direct_consistency(depths: Sequence[torch.Tensor], albedos: Sequence[torch.Tensor]) -> torch.Tensor:
    """Diagnostic only: sum over ordered view pairs of L2 distances of canonical maps."""
    total = depths[0].new_zeros(depths[0].shape[0])
    for i in range(len(depths)):
        for j in range(len(depths)):
            if i != j:
                total = total + (depths[i] - depths[j]).flatten(1).norm(dim=1)
                total = total + (albedos[i] - albedos[j]).flatten(1).norm(dim=1)
    return total


# ---------------------------------------------------------------------------
# instance-level objectives


@dataclass
class ViewOutputs:
    """Everything the objectives need for one instance batch.

    Lists are indexed by view; each tensor keeps a leading instance batch dim.
    """

    images: List[torch.Tensor]
    depth: List[torch.Tensor]
    albedo: List[torch.Tensor]
    light: List[Lighting]
    pose: List[Pose]
    conf: list  # ConfidencePair per view (F_c)
    cross_conf: Optional[dict] = None  # (i, j) -> ConfidencePair from F_cc(I_i, I_j)

    @property
    def m(self) -> int:
        return len(self.images)

    def model(self, i: int) -> CanonicalModel:
        return CanonicalModel(self.depth[i], self.albedo[i])


def pivot_pairs(m: int):
    """Ordered (target view, model view) pairs involving the pivot view 0."""
    pairs = []
    for i in range(1, m):
        pairs.append((i, 0))
        pairs.append((0, i))
    return pairs


class LossContext:
    """Renders and perceptual features shared by the instance-level objectives.

    Renders are keyed by ``(model view, target view)``: the canonical maps of
    the model view under the light and pose of the target view. ``prefetch``
    evaluates many keys in one batched rasterization.
    """

    def __init__(self, out: ViewOutputs, cam: CameraIntrinsics, features, rot_bound: float = math.pi / 3, trans_bound: float = 0.1):
        self.out, self.cam, self.features = out, cam, features
        self.bounds = dict(rot_bound=rot_bound, trans_bound=trans_bound)
        self._renders = {}
        self._input_feats = None

    def prefetch(self, keys) -> None:
        keys = [k for k in dict.fromkeys(keys) if k not in self._renders]
        if not keys:
            return
        o = self.out
        model = CanonicalModel(
            torch.cat([o.depth[mv] for mv, _ in keys]), torch.cat([o.albedo[mv] for mv, _ in keys])
        )
        light = Lighting.from_tensor(torch.cat([o.light[tv].as_tensor() for _, tv in keys]))
        pose = Pose.from_tensor(torch.cat([o.pose[tv].as_tensor() for _, tv in keys]))
        view = render(model, light, pose, self.cam, **self.bounds)
        b = o.images[0].shape[0]
        parts = [t.split(b) for t in (view.image, view.view_depth, view.mask, view.albedo, view.alpha)]
        for n, key in enumerate(keys):
            self._renders[key] = RenderedView(*(p[n] for p in parts))

    def render(self, model_view: int, target_view: int) -> RenderedView:
        self.prefetch([(model_view, target_view)])
        return self._renders[(model_view, target_view)]

    def input_features(self, view: int) -> torch.Tensor:
        if self._input_feats is None:
            b = self.out.images[0].shape[0]
            self._input_feats = self.features(torch.cat(self.out.images)).split(b)
        return self._input_feats[view]


def _rec_terms(ctx: LossContext, keys, confs, weights: LossWeights) -> torch.Tensor:
    """Summed reconstruction terms for ``(model view, target view)`` keys."""
    ctx.prefetch(keys)
    out = ctx.out
    b = out.images[0].shape[0]
    target = torch.cat([out.images[tv] for _, tv in keys])
    recon = torch.cat([ctx.render(*k).image for k in keys])
    loss = l1_conf_loss(target, recon, torch.cat([c.c_l1 for c in confs]))
    if weights.lambda_pe:
        f_target = torch.cat([ctx.input_features(tv) for _, tv in keys])
        loss = loss + weights.lambda_pe * perceptual_conf_loss(
            f_target, ctx.features(recon), torch.cat([c.c_pe for c in confs])
        )
    return loss.view(len(keys), b).sum(0)


def reconstruction_loss(out: ViewOutputs, ctx: LossContext, weights: LossWeights) -> torch.Tensor:
    """Sum over views of the same-view confidence-weighted L1 + perceptual terms."""
    if out.m < 1:
        raise ValueError("reconstruction_loss needs at least one view")
    keys = [(i, i) for i in range(out.m)]
    return _rec_terms(ctx, keys, out.conf, weights)


def cross_view_loss(out: ViewOutputs, ctx: LossContext, weights: LossWeights):
    """Pivot-pair component-swapping loss. Returns ``(loss, n_terms)``.

    Pair ``(i, j)`` renders view ``i``'s light and pose with view ``j``'s
    canonical depth and albedo and compares it to image ``i`` under
    ``F_cc(I_i, I_j)`` confidences. Fewer than two views gives ``(0, 0)``.
    """
    if out.m < 2:
        return out.images[0].new_zeros(out.images[0].shape[0]), 0
    pairs = pivot_pairs(out.m)
    keys = [(j, i) for i, j in pairs]
    return _rec_terms(ctx, keys, [out.cross_conf[p] for p in pairs], weights), len(pairs)


def albedo_losses(out: ViewOutputs, ctx: LossContext, weights: LossWeights, cross: bool = True):
    """Same-view and pivot cross-view albedo smoothness: ``(al, al_cross)``.

    With ``cross=False`` only the same-view term is evaluated.
    """
    b = out.images[0].shape[0]
    same = [(i, i) for i in range(out.m)]
    cross = [(j, i) for i, j in pivot_pairs(out.m)] if cross else []
    keys = same + cross
    ctx.prefetch(keys)
    views = [ctx.render(*k) for k in keys]
    per = albedo_smoothness(
        torch.cat([out.images[tv] for _, tv in keys]),
        torch.cat([v.albedo for v in views]),
        torch.cat([v.view_depth for v in views]),
        torch.cat([v.mask for v in views]),
        weights,
    ).view(len(keys), b)
    al = per[: len(same)].sum(0)
    al_cross = per[len(same) :].sum(0) if cross else out.images[0].new_zeros(b)
    return al, al_cross


def total_loss(
    out: ViewOutputs,
    cam: CameraIntrinsics,
    features,
    weights: LossWeights = LossWeights(),
    *,
    rot_bound: float = math.pi / 3,
    trans_bound: float = 0.1,
    reduce: bool = True,
) -> LossBreakdown:
    """Full objective for a batch of instances (mean over instances if ``reduce``).

    Terms whose weight is zero are not evaluated and reported as 0.
    """
    ctx = LossContext(out, cam, features, rot_bound, trans_bound)
    zero = out.images[0].new_zeros(out.images[0].shape[0])
    use_cross = bool(weights.lambda_cross) and out.m > 1
    keys = [(i, i) for i in range(out.m)]
    if use_cross:
        keys += [(j, i) for i, j in pivot_pairs(out.m)]
    ctx.prefetch(keys)
    rec = reconstruction_loss(out, ctx, weights)
    rec_cross = cross_view_loss(out, ctx, weights)[0] if use_cross else zero
    if weights.lambda_al:
        al, al_cross = albedo_losses(out, ctx, weights, cross=use_cross)
    else:
        al, al_cross = zero, zero
    if reduce:
        rec, rec_cross, al, al_cross = (t.mean() for t in (rec, rec_cross, al, al_cross))
    return combine(rec, rec_cross, al, al_cross, weights)
