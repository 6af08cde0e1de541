"""Depth evaluation: scale-invariant depth error, mean angle deviation and
the constant-depth baselines."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F

from .data import GroundTruthView, read_image
from .decomposer import Decomposer, DecompositionOutput
from .render import CameraIntrinsics, CanonicalModel, Lighting, Pose, normals_from_depth, warp


@dataclass(frozen=True)
class DepthEvalResult:
    side: float
    mad_degrees: float
    n_pixels: int

    def __post_init__(self):
        if self.n_pixels <= 0:
            raise ValueError("DepthEvalResult needs at least one evaluated pixel")


@dataclass
class AggregateResult:
    side_mean: float
    side_std: float
    mad_mean: float
    mad_std: float
    per_image: List[tuple]  # (image_id, DepthEvalResult)

    @property
    def n_images(self) -> int:
        return len(self.per_image)

    def summary(self) -> str:
        return (
            f"SIDE {self.side_mean:.5f} +- {self.side_std:.5f}  "
            f"MAD {self.mad_mean:.3f} +- {self.mad_std:.3f} deg  ({self.n_images} images)"
        )


def _as_bool_mask(mask, like: torch.Tensor) -> torch.Tensor:
    if mask is None:
        return torch.ones(like.shape, dtype=torch.bool)
    mask = torch.as_tensor(mask).bool()
    if mask.shape != like.shape:
        raise ValueError(f"mask {tuple(mask.shape)} does not match depth {tuple(like.shape)}")
    return mask


def side(d_pred: torch.Tensor, d_gt: torch.Tensor, mask=None) -> float:
    """Population standard deviation of ``ln d_pred - ln d_gt`` over the mask."""
    d_pred = torch.as_tensor(d_pred, dtype=torch.float64)
    d_gt = torch.as_tensor(d_gt, dtype=torch.float64)
    if d_pred.shape != d_gt.shape:
        raise ValueError(f"depth maps are not aligned: {tuple(d_pred.shape)} vs {tuple(d_gt.shape)}")
    mask = _as_bool_mask(mask, d_gt)
    if not mask.any():
        raise ValueError("side: empty mask")
    p, g = d_pred[mask], d_gt[mask]
    if (p <= 0).any() or (g <= 0).any():
        raise ValueError("side: nonpositive depth inside the mask")
    delta = torch.log(p) - torch.log(g)
    # centred two-pass form: a constant log offset gives ~1e-16, not sqrt(eps)
    return math.sqrt(float((delta - delta.mean()).pow(2).mean()))


def normal_angles(n_pred: torch.Tensor, n_gt: torch.Tensor) -> torch.Tensor:
    """Per-pixel angle in degrees between two ``(..., 3)`` unit normal fields.

    Same value as ``arccos(clamp(n_pred . n_gt, -1, 1))`` but evaluated as
    ``2 atan2(|n_pred - n_gt|, |n_pred + n_gt|)``, which stays accurate near 0
    and 180 degrees and is exactly 0 for identical normals.
    """
    diff = (n_pred - n_gt).norm(dim=-1)
    summ = (n_pred + n_gt).norm(dim=-1)
    return torch.rad2deg(2.0 * torch.atan2(diff, summ))


def mad(d_pred: torch.Tensor, d_gt: torch.Tensor, cam: CameraIntrinsics, mask=None) -> float:
    """Mean angle (degrees) between the normal maps of two depth maps, over the mask."""
    d_pred = torch.as_tensor(d_pred, dtype=torch.float64)
    d_gt = torch.as_tensor(d_gt, dtype=torch.float64)
    if d_pred.shape != d_gt.shape:
        raise ValueError(f"depth maps are not aligned: {tuple(d_pred.shape)} vs {tuple(d_gt.shape)}")
    mask = _as_bool_mask(mask, d_gt)
    if not mask.any():
        raise ValueError("mad: empty mask")
    angles = normal_angles(normals_from_depth(d_pred, cam)[0], normals_from_depth(d_gt, cam)[0])
    return float(angles[mask].mean())


def erode_mask(mask: torch.Tensor, pixels: int = 1) -> torch.Tensor:
    """Binary erosion with a square ``(2 * pixels + 1)`` window; outside the frame counts as empty."""
    m = torch.as_tensor(mask).bool()
    if pixels <= 0:
        return m.clone()
    inv = (~m).to(torch.float32)[None, None]
    inv = F.pad(inv, (pixels,) * 4, value=1.0)
    grown = F.max_pool2d(inv, 2 * pixels + 1, stride=1)
    return grown[0, 0] < 0.5


def null_depth_baseline(cam: CameraIntrinsics) -> torch.Tensor:
    """Constant fronto-parallel plane at the middle of the depth range."""
    s = cam.image_size
    return torch.full((s, s), cam.d_mid, dtype=torch.float64)


def mean_depth_baseline(gts: Sequence, cam: Optional[CameraIntrinsics] = None) -> torch.Tensor:
    """Pixel-wise mean of the ground-truth depth maps over the views covering each pixel.

    Entries may be :class:`GroundTruthView` or bare depth tensors (all pixels
    valid). Pixels no view covers fall back to the middle of the depth range.
    """
    if len(gts) == 0:
        raise ValueError("mean_depth_baseline needs a nonempty ground-truth set")
    depths, masks = [], []
    for g in gts:
        if isinstance(g, GroundTruthView):
            depths.append(g.depth.to(torch.float64))
            masks.append(g.mask.bool())
        else:
            d = torch.as_tensor(g, dtype=torch.float64)
            depths.append(d)
            masks.append(torch.ones(d.shape, dtype=torch.bool))
    d = torch.stack(depths)
    m = torch.stack(masks).to(torch.float64)
    count = m.sum(0)
    fill = cam.d_mid if cam is not None else float(d[m.bool()].mean())
    mean = (d * m).sum(0) / count.clamp_min(1)
    return torch.where(count > 0, mean, torch.full_like(mean, fill))


def evaluate_depth(
    d_pred: torch.Tensor, pred_mask, gt: GroundTruthView, cam: CameraIntrinsics, erosion: int = 1
) -> DepthEvalResult:
    """Compare a view-frame depth map with one ground-truth view on the eroded intersection mask."""
    gt_mask = gt.mask.bool()
    mask = gt_mask if pred_mask is None else gt_mask & torch.as_tensor(pred_mask).bool()
    mask = erode_mask(mask, erosion)
    if not mask.any():
        raise ValueError(f"{gt.image_id}: prediction and ground truth do not overlap")
    d_pred = torch.as_tensor(d_pred, dtype=torch.float64)
    # outside the mask the values are irrelevant but must stay positive and finite
    d_pred = torch.where(mask, d_pred, gt.depth.to(torch.float64))
    return DepthEvalResult(side(d_pred, gt.depth, mask), mad(d_pred, gt.depth, cam, mask), int(mask.sum()))


Predictor = Callable[[GroundTruthView], DecompositionOutput]


def network_predictor(net: Decomposer) -> Predictor:
    size = net.config.image_size

    def predict(gt: GroundTruthView) -> DecompositionOutput:
        with torch.no_grad():
            return net.decompose(read_image(gt.image_path, size)[None])

    return predict


def groundtruth_predictor(dtype=torch.float64) -> Predictor:
    """Decompositions read straight from the generator's canonical maps and view parameters."""

    def predict(gt: GroundTruthView) -> DecompositionOutput:
        with np.load(gt.canonical_path) as canon:
            depth = torch.from_numpy(canon["depth"]).to(dtype)[None]
            albedo = torch.from_numpy(canon["albedo"]).to(dtype)[None]
        light = Lighting.from_tensor(torch.tensor([gt.light], dtype=dtype))
        pose = Pose.from_tensor(torch.tensor([gt.pose], dtype=dtype))
        return DecompositionOutput(depth, albedo, light, pose)

    return predict


def evaluate_dataset(
    predictor: Union[Decomposer, Predictor],
    gts: Sequence[GroundTruthView],
    cam: Optional[CameraIntrinsics] = None,
    *,
    rot_bound: Optional[float] = None,
    trans_bound: Optional[float] = None,
    erosion: int = 1,
) -> AggregateResult:
    """Decompose every test image, warp its canonical depth to its predicted view
    and score it against the ground-truth view depth."""
    if isinstance(predictor, Decomposer):
        cam = cam or predictor.camera
        rot_bound = rot_bound if rot_bound is not None else predictor.config.rot_bound
        trans_bound = trans_bound if trans_bound is not None else predictor.config.trans_bound
        predictor = network_predictor(predictor)
    if cam is None:
        raise ValueError("evaluate_dataset needs camera intrinsics")
    bounds = dict(rot_bound=rot_bound or math.pi, trans_bound=trans_bound or 1.0)
    results = []
    for gt in gts:
        out = predictor(gt)
        with torch.no_grad():
            depth_v, _, mask_v = warp(CanonicalModel(out.depth, out.albedo), out.pose, cam, **bounds)
        results.append((gt.image_id, evaluate_depth(depth_v[0], mask_v[0], gt, cam, erosion)))
    return aggregate(results)


def evaluate_baseline(depth: torch.Tensor, gts: Sequence[GroundTruthView], cam: CameraIntrinsics, erosion: int = 1) -> AggregateResult:
    """Score one fixed depth map (a baseline) against every ground-truth view."""
    return aggregate([(gt.image_id, evaluate_depth(depth, None, gt, cam, erosion)) for gt in gts])


def aggregate(results: Sequence[tuple]) -> AggregateResult:
    if not results:
        raise ValueError("nothing to aggregate")
    s = np.array([r.side for _, r in results])
    m = np.array([r.mad_degrees for _, r in results])
    return AggregateResult(float(s.mean()), float(s.std()), float(m.mean()), float(m.std()), list(results))


def write_results_csv(path, result: AggregateResult) -> Path:
    """One row per image then an ``aggregate`` row holding the means (written atomically)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "side", "mad", "n_pixels"])
        for image_id, r in result.per_image:
            w.writerow([image_id, repr(r.side), repr(r.mad_degrees), r.n_pixels])
        total = sum(r.n_pixels for _, r in result.per_image)
        w.writerow(["aggregate", repr(result.side_mean), repr(result.mad_mean), total])
    tmp.replace(path)
    return path
