"""Differentiable image formation for depth-grid objects.

A canonical depth map is unprojected to a grid of 3D points (one vertex per
pixel centre), rigidly moved by a pose, meshed with two triangles per pixel
cell and rasterized under a perspective camera with a z-buffer. Attributes
(depth, albedo, normals) are interpolated with perspective-correct
barycentrics, so gradients reach depth, albedo, lighting and pose.

Conventions
-----------
* Image tensors are ``(B, 3, H, W)``, depth maps ``(B, H, W)``.
* Camera frame: x right, y down, z forward (away from the camera). Pixel
  ``(row, col)`` has centre ``(u=col, v=row)``.
* Normals are ``cross(dP/du, dP/dv)`` of the unprojected point grid, which
  gives ``(0, 0, 1)`` for a fronto-parallel plane. Light directions live in
  the same frame, so ``n . l`` is the Lambertian cosine.
* Poses rotate about the object centre ``(0, 0, d_mid)``; rotations are
  extrinsic x, then y, then z.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import NamedTuple, Optional

import torch
import torch.nn.functional as F

BACKGROUND = 1.0
SIGMA_SOFT = 1e-4
DEFAULT_ROT_BOUND = math.pi / 3
DEFAULT_TRANS_BOUND = 0.1


@dataclass(frozen=True)
class CameraIntrinsics:
    fov_degrees: float = 10.0
    image_size: int = 64
    depth_range: tuple = (0.9, 1.1)

    def __post_init__(self):
        if not 0.0 < self.fov_degrees < 90.0:
            raise ValueError(f"fov_degrees must lie in (0, 90), got {self.fov_degrees}")
        if int(self.image_size) != self.image_size or self.image_size < 4:
            raise ValueError(f"image_size must be an integer >= 4, got {self.image_size}")
        d_min, d_max = self.depth_range
        if not 0.0 < d_min < d_max:
            raise ValueError(f"depth_range must satisfy 0 < d_min < d_max, got {self.depth_range}")
        object.__setattr__(self, "depth_range", (float(d_min), float(d_max)))

    @property
    def focal(self) -> float:
        return (self.image_size - 1) / 2.0 / math.tan(math.radians(self.fov_degrees) / 2.0)

    @property
    def center(self) -> float:
        return (self.image_size - 1) / 2.0

    @property
    def d_mid(self) -> float:
        return 0.5 * (self.depth_range[0] + self.depth_range[1])

    @property
    def d_half(self) -> float:
        return 0.5 * (self.depth_range[1] - self.depth_range[0])

    @property
    def znear(self) -> float:
        return 0.1 * self.depth_range[0]

    @property
    def zfar(self) -> float:
        return 10.0 * self.depth_range[1]


@dataclass
class Lighting:
    """Ambient/diffuse weights and light direction, each of shape ``(B,)``."""

    k_s: torch.Tensor
    k_d: torch.Tensor
    l_x: torch.Tensor
    l_y: torch.Tensor

    @classmethod
    def from_tensor(cls, t: torch.Tensor) -> "Lighting":
        t = torch.as_tensor(t)
        if t.dim() == 1:
            t = t[None]
        return cls(t[:, 0], t[:, 1], t[:, 2], t[:, 3])

    def as_tensor(self) -> torch.Tensor:
        return torch.stack([self.k_s, self.k_d, self.l_x, self.l_y], dim=-1)

    def validate(self, tol: float = 1e-6) -> None:
        t = self.as_tensor()
        if not torch.isfinite(t).all():
            raise ValueError("lighting contains non-finite values")
        if (t[:, :2] < -tol).any() or (t[:, :2] > 1 + tol).any():
            raise ValueError("k_s and k_d must lie in [0, 1]")
        if (t[:, 2:].abs() > 1 + tol).any():
            raise ValueError("l_x and l_y must lie in [-1, 1]")


@dataclass
class Pose:
    """Euler rotation (radians) and translation, each of shape ``(B, 3)``."""

    rotation: torch.Tensor
    translation: torch.Tensor

    @classmethod
    def from_tensor(cls, t: torch.Tensor) -> "Pose":
        t = torch.as_tensor(t)
        if t.dim() == 1:
            t = t[None]
        return cls(t[:, :3], t[:, 3:6])

    @classmethod
    def identity(cls, batch: int = 1, dtype=torch.float32, device=None) -> "Pose":
        z = torch.zeros(batch, 3, dtype=dtype, device=device)
        return cls(z, z.clone())

    def as_tensor(self) -> torch.Tensor:
        return torch.cat([self.rotation, self.translation], dim=-1)

    def validate(self, rot_bound: float, trans_bound: float, tol: float = 1e-6) -> None:
        t = self.as_tensor()
        if not torch.isfinite(t).all():
            raise ValueError("pose contains non-finite values")
        if (self.rotation.abs() > rot_bound + tol).any():
            raise ValueError(f"pose rotation exceeds bound {rot_bound:.4f} rad")
        if (self.translation.abs() > trans_bound + tol).any():
            raise ValueError(f"pose translation exceeds bound {trans_bound:.4f}")


@dataclass
class CanonicalModel:
    depth: torch.Tensor  # (B, H, W)
    albedo: torch.Tensor  # (B, C, H, W)

    def __post_init__(self):
        if self.depth.dim() == 2:
            self.depth = self.depth[None]
        if self.albedo.dim() == 3:
            self.albedo = self.albedo[None]
        if self.depth.shape[0] != self.albedo.shape[0] or self.depth.shape[-2:] != self.albedo.shape[-2:]:
            raise ValueError(
                f"depth {tuple(self.depth.shape)} and albedo {tuple(self.albedo.shape)} are not aligned"
            )


@dataclass
class RenderedView:
    image: torch.Tensor  # (B, 3, H, W)
    view_depth: torch.Tensor  # (B, H, W), 0 outside mask
    mask: torch.Tensor  # (B, H, W) bool
    albedo: Optional[torch.Tensor] = None  # view-space albedo, 0 outside mask
    alpha: Optional[torch.Tensor] = field(default=None, repr=False)


class Fragments(NamedTuple):
    face_idx: torch.Tensor  # (B, H, W) long, -1 where empty
    bary: torch.Tensor  # (B, H, W, 3) perspective-correct weights
    zbuf: torch.Tensor  # (B, H, W) interpolated view depth
    alpha: torch.Tensor  # (B, H, W) soft coverage
    mask: torch.Tensor  # (B, H, W) bool


# ---------------------------------------------------------------------------
# geometry


def pixel_grid(cam: CameraIntrinsics, dtype=torch.float32, device=None):
    s = cam.image_size
    coords = torch.arange(s, dtype=dtype, device=device)
    v, u = torch.meshgrid(coords, coords, indexing="ij")
    return u, v


def unproject(depth: torch.Tensor, cam: CameraIntrinsics) -> torch.Tensor:
    """Lift a ``(B, H, W)`` depth map to camera-space points ``(B, H, W, 3)``."""
    u, v = pixel_grid(cam, depth.dtype, depth.device)
    x = (u - cam.center) / cam.focal * depth
    y = (v - cam.center) / cam.focal * depth
    return torch.stack([x, y, depth], dim=-1)


def project(points: torch.Tensor, cam: CameraIntrinsics) -> torch.Tensor:
    """Perspective projection of ``(..., 3)`` points to pixel coordinates ``(..., 2)``."""
    z = points[..., 2]
    u = cam.focal * points[..., 0] / z + cam.center
    v = cam.focal * points[..., 1] / z + cam.center
    return torch.stack([u, v], dim=-1)


def euler_to_matrix(rotation: torch.Tensor) -> torch.Tensor:
    """``(B, 3)`` extrinsic x-y-z Euler angles to ``(B, 3, 3)`` matrices ``Rz @ Ry @ Rx``."""
    rx, ry, rz = rotation.unbind(-1)
    one, zero = torch.ones_like(rx), torch.zeros_like(rx)
    cx, sx = torch.cos(rx), torch.sin(rx)
    cy, sy = torch.cos(ry), torch.sin(ry)
    cz, sz = torch.cos(rz), torch.sin(rz)
    mx = torch.stack([one, zero, zero, zero, cx, -sx, zero, sx, cx], -1).view(-1, 3, 3)
    my = torch.stack([cy, zero, sy, zero, one, zero, -sy, zero, cy], -1).view(-1, 3, 3)
    mz = torch.stack([cz, -sz, zero, sz, cz, zero, zero, zero, one], -1).view(-1, 3, 3)
    return mz @ my @ mx


def transform_points(points: torch.Tensor, pose: Pose, cam: CameraIntrinsics) -> torch.Tensor:
    """Rigidly move ``(B, N, 3)`` points about the object centre."""
    rot = euler_to_matrix(pose.rotation.to(points.dtype))
    pivot = points.new_tensor([0.0, 0.0, cam.d_mid])
    moved = (points - pivot) @ rot.transpose(1, 2)
    return moved + pivot + pose.translation.to(points.dtype)[:, None, :]


def normals_from_depth(depth: torch.Tensor, cam: CameraIntrinsics) -> torch.Tensor:
    """Unit normals ``(B, H, W, 3)`` of the unprojected point grid.

    Tangents are central differences in the interior and one-sided
    differences on the border.
    """
    if depth.dim() == 2:
        depth = depth[None]
    if not torch.isfinite(depth).all():
        raise ValueError("normals_from_depth: depth map contains non-finite values")
    points = unproject(depth, cam)
    du = torch.gradient(points, dim=2)[0]
    dv = torch.gradient(points, dim=1)[0]
    return F.normalize(torch.cross(du, dv, dim=-1), dim=-1, eps=1e-12)


def light_direction(light: Lighting) -> torch.Tensor:
    d = torch.stack([light.l_x, light.l_y, torch.ones_like(light.l_x)], dim=-1)
    return d / d.norm(dim=-1, keepdim=True)


def shade(albedo_view: torch.Tensor, normals_view: torch.Tensor, light: Lighting) -> torch.Tensor:
    """Ambient + Lambertian diffuse shading, clamped to ``[0, 1]``.

    ``albedo_view`` is ``(B, C, H, W)`` and ``normals_view`` ``(B, H, W, 3)``.
    """
    if albedo_view.dim() != 4 or normals_view.dim() != 4 or normals_view.shape[-1] != 3:
        raise ValueError("shade expects albedo (B, C, H, W) and normals (B, H, W, 3)")
    b, _, h, w = albedo_view.shape
    if normals_view.shape[:3] != (b, h, w):
        raise ValueError(
            f"shade: albedo {tuple(albedo_view.shape)} and normals {tuple(normals_view.shape)} misaligned"
        )
    ldir = light_direction(light).to(normals_view.dtype)
    cos = (normals_view * ldir[:, None, None, :]).sum(-1).clamp(min=0)
    shading = light.k_s[:, None, None] + light.k_d[:, None, None] * cos
    return (albedo_view * shading[:, None]).clamp(0, 1)


# ---------------------------------------------------------------------------
# mesh topology


@lru_cache(maxsize=8)
def _grid_topology(h: int, w: int):
    """Faces ``(F, 3)`` and edge neighbours ``(F, 3)`` of the pixel-grid mesh.

    Exactly two counter-clockwise (in pixel coordinates) triangles per cell:
    ``(tl, br, bl)`` and ``(tl, tr, br)``. Edge ``k`` joins vertex ``k`` and
    ``k + 1``; its neighbour is the face across it, or -1 on the grid border.
    """
    i, j = torch.meshgrid(torch.arange(h - 1), torch.arange(w - 1), indexing="ij")
    i, j = i.reshape(-1), j.reshape(-1)
    tl = i * w + j
    tr, bl, br = tl + 1, tl + w, tl + w + 1
    t0 = torch.stack([tl, br, bl], -1)
    t1 = torch.stack([tl, tr, br], -1)
    faces = torch.stack([t0, t1], 1).reshape(-1, 3)

    cell = i * (w - 1) + j
    none = torch.full_like(cell, -1)
    lower = torch.where(i + 1 < h - 1, 2 * (cell + (w - 1)) + 1, none)
    left = torch.where(j > 0, 2 * (cell - 1) + 1, none)
    upper = torch.where(i > 0, 2 * (cell - (w - 1)), none)
    right = torch.where(j + 1 < w - 1, 2 * (cell + 1), none)
    n0 = torch.stack([2 * cell + 1, lower, left], -1)
    n1 = torch.stack([upper, right, 2 * cell], -1)
    neighbours = torch.stack([n0, n1], 1).reshape(-1, 3)
    return faces, neighbours


def _edge(a_u, a_v, b_u, b_v, p_u, p_v):
    return (b_u - a_u) * (p_v - a_v) - (b_v - a_v) * (p_u - a_u)


def _segment_distance(p_u, p_v, a_u, a_v, b_u, b_v):
    eu, ev = b_u - a_u, b_v - a_v
    t = ((p_u - a_u) * eu + (p_v - a_v) * ev) / (eu * eu + ev * ev).clamp_min(1e-20)
    t = t.clamp(0, 1)
    du, dv = p_u - (a_u + t * eu), p_v - (a_v + t * ev)
    return torch.sqrt(du * du + dv * dv + 1e-30)


def rasterize(verts: torch.Tensor, grid_hw: tuple, cam: CameraIntrinsics, sigma: float = SIGMA_SOFT) -> Fragments:
    """Z-buffered rasterization of the pixel-grid mesh with vertices ``verts``.

    ``verts`` is ``(B, h*w, 3)`` in camera space. Visibility (which face owns a
    pixel) is decided without gradients; barycentrics and soft coverage of the
    winning face are then recomputed differentiably. Back-facing, degenerate
    and near/far-clipped faces are dropped.
    """
    h, w = grid_hw
    s = cam.image_size
    b = verts.shape[0]
    dtype, device = verts.dtype, verts.device
    faces, neighbours = _grid_topology(h, w)
    faces, neighbours = faces.to(device), neighbours.to(device)
    nf = faces.shape[0]
    tol = 1e-9 if dtype == torch.float64 else 1e-5

    uv = project(verts, cam)
    fu = uv[..., 0][:, faces]  # (B, F, 3)
    fv = uv[..., 1][:, faces]
    fz = verts[..., 2][:, faces]

    with torch.no_grad():
        area = _edge(fu[..., 0], fv[..., 0], fu[..., 1], fv[..., 1], fu[..., 2], fv[..., 2])
        valid = (area > 1e-10) & (fz > cam.znear).all(-1) & (fz < cam.zfar).all(-1)
        valid &= torch.isfinite(fu).all(-1) & torch.isfinite(fv).all(-1)

        pad = 1e-4
        u0 = torch.ceil(fu.min(-1).values - pad).clamp(0, s - 1)
        u1 = torch.floor(fu.max(-1).values + pad).clamp(-1, s - 1)
        v0 = torch.ceil(fv.min(-1).values - pad).clamp(0, s - 1)
        v1 = torch.floor(fv.max(-1).values + pad).clamp(-1, s - 1)
        wid = (u1 - u0 + 1).clamp(min=0)
        hei = (v1 - v0 + 1).clamp(min=0)
        counts = torch.where(valid, wid * hei, torch.zeros_like(wid)).long().reshape(-1)

        flat_face = torch.repeat_interleave(torch.arange(b * nf, device=device), counts)
        starts = torch.cumsum(counts, 0) - counts
        local = torch.arange(flat_face.numel(), device=device) - starts[flat_face]
        wid_f = wid.reshape(-1).long()[flat_face]
        pu = (u0.reshape(-1).long()[flat_face] + local % wid_f).to(dtype)
        pv = (v0.reshape(-1).long()[flat_face] + local // wid_f).to(dtype)

        cu = fu.reshape(-1, 3)[flat_face]
        cv = fv.reshape(-1, 3)[flat_face]
        cz = fz.reshape(-1, 3)[flat_face]
        carea = area.reshape(-1)[flat_face]
        b0 = _edge(cu[:, 1], cv[:, 1], cu[:, 2], cv[:, 2], pu, pv) / carea
        b1 = _edge(cu[:, 2], cv[:, 2], cu[:, 0], cv[:, 0], pu, pv) / carea
        b2 = _edge(cu[:, 0], cv[:, 0], cu[:, 1], cv[:, 1], pu, pv) / carea
        inside = (b0 >= -tol) & (b1 >= -tol) & (b2 >= -tol)
        inv_z = b0 / cz[:, 0] + b1 / cz[:, 1] + b2 / cz[:, 2]
        inside &= inv_z > 0

        flat_face, pu, pv, inv_z = flat_face[inside], pu[inside], pv[inside], inv_z[inside]
        batch_of = flat_face // nf
        pix = batch_of * s * s + pv.long() * s + pu.long()
        # nearest surface = largest 1/z; ties go to the lowest face index
        best = torch.full((b * s * s,), -math.inf, dtype=dtype, device=device)
        best = best.scatter_reduce(0, pix, inv_z, reduce="amax", include_self=True)
        cand = inv_z == best[pix]
        sentinel = b * nf
        owner = torch.full((b * s * s,), sentinel, dtype=torch.long, device=device)
        owner = owner.scatter_reduce(0, pix[cand], flat_face[cand], reduce="amin", include_self=True)
        mask_flat = owner < sentinel

        sil_edges = (neighbours[None].expand(b, -1, -1) < 0) | ~torch.gather(
            valid, 1, neighbours.clamp(min=0).reshape(1, -1).expand(b, -1)
        ).reshape(b, nf, 3)
        sil_edges = sil_edges.reshape(-1, 3)

    pix_ids = torch.nonzero(mask_flat, as_tuple=True)[0]
    win = owner[pix_ids]
    pu = (pix_ids % s).to(dtype)
    pv = ((pix_ids // s) % s).to(dtype)
    wu = fu.reshape(-1, 3)[win]
    wv = fv.reshape(-1, 3)[win]
    wz = fz.reshape(-1, 3)[win]
    warea = _edge(wu[:, 0], wv[:, 0], wu[:, 1], wv[:, 1], wu[:, 2], wv[:, 2])
    bs = torch.stack(
        [
            _edge(wu[:, 1], wv[:, 1], wu[:, 2], wv[:, 2], pu, pv),
            _edge(wu[:, 2], wv[:, 2], wu[:, 0], wv[:, 0], pu, pv),
            _edge(wu[:, 0], wv[:, 0], wu[:, 1], wv[:, 1], pu, pv),
        ],
        -1,
    ) / warea[:, None]
    persp = bs / wz
    inv = persp.sum(-1, keepdim=True)
    bary_pc = persp / inv
    zbuf_vals = 1.0 / inv[:, 0]

    # soft coverage: signed distance (NDC units) to the silhouette edges of the winner
    dists = torch.stack(
        [
            _segment_distance(pu, pv, wu[:, k], wv[:, k], wu[:, (k + 1) % 3], wv[:, (k + 1) % 3])
            for k in range(3)
        ],
        -1,
    ) * (2.0 / s)
    dists = torch.where(sil_edges[win], dists, torch.full_like(dists, math.inf))
    alpha_vals = torch.sigmoid(dists.min(-1).values / sigma)

    n_pix = b * s * s
    face_map = torch.full((n_pix,), -1, dtype=torch.long, device=device)
    face_map[pix_ids] = win % nf
    bary = torch.zeros(n_pix, 3, dtype=dtype, device=device).index_put((pix_ids,), bary_pc)
    zbuf = torch.zeros(n_pix, dtype=dtype, device=device).index_put((pix_ids,), zbuf_vals)
    alpha = torch.zeros(n_pix, dtype=dtype, device=device).index_put((pix_ids,), alpha_vals)
    return Fragments(
        face_map.view(b, s, s),
        bary.view(b, s, s, 3),
        zbuf.view(b, s, s),
        alpha.view(b, s, s),
        mask_flat.view(b, s, s),
    )


def interpolate(fragments: Fragments, vertex_attrs: torch.Tensor, grid_hw: tuple) -> torch.Tensor:
    """Interpolate ``(B, N, C)`` per-vertex attributes to ``(B, H, W, C)``; 0 where empty."""
    faces, _ = _grid_topology(*grid_hw)
    faces = faces.to(vertex_attrs.device)
    b, s = fragments.face_idx.shape[:2]
    idx = fragments.face_idx.clamp(min=0).reshape(b, -1)
    verts_of_pix = faces[idx]  # (B, S*S, 3)
    c = vertex_attrs.shape[-1]
    gathered = torch.gather(
        vertex_attrs, 1, verts_of_pix.reshape(b, -1, 1).expand(-1, -1, c)
    ).reshape(b, s * s, 3, c)
    # a0 + b1 (a1 - a0) + b2 (a2 - a0): equal to sum_k b_k a_k since the weights
    # sum to one, and exact for constant attributes
    bary = fragments.bary.reshape(b, s * s, 3, 1)
    base = gathered[:, :, 0]
    out = base + bary[:, :, 1] * (gathered[:, :, 1] - base) + bary[:, :, 2] * (gathered[:, :, 2] - base)
    out = out * fragments.mask.reshape(b, s * s, 1)
    return out.reshape(b, s, s, c)


# ---------------------------------------------------------------------------
# render / warp


def _check_model(model: CanonicalModel, cam: CameraIntrinsics) -> None:
    s = cam.image_size
    if model.depth.shape[-2:] != (s, s):
        raise ValueError(f"depth map is {tuple(model.depth.shape[-2:])}, camera expects {s}x{s}")
    if not torch.isfinite(model.depth).all():
        raise ValueError("canonical depth contains non-finite values")


def _pose_batch(pose: Pose, b: int) -> Pose:
    if pose.rotation.shape[0] == b:
        return pose
    if pose.rotation.shape[0] == 1:
        return Pose(pose.rotation.expand(b, 3), pose.translation.expand(b, 3))
    raise ValueError(f"pose batch {pose.rotation.shape[0]} does not match model batch {b}")


def _rasterize_model(model, pose, cam, rot_bound, trans_bound, with_normals):
    _check_model(model, cam)
    b, h, w = model.depth.shape
    pose = _pose_batch(pose, b)
    pose.validate(rot_bound, trans_bound)
    points = unproject(model.depth, cam).reshape(b, h * w, 3)
    verts = transform_points(points, pose, cam)
    frags = rasterize(verts, (h, w), cam)
    attrs = [model.albedo.flatten(2).transpose(1, 2)]
    if with_normals:
        rot = euler_to_matrix(pose.rotation.to(model.depth.dtype))
        normals = normals_from_depth(model.depth, cam).reshape(b, h * w, 3) @ rot.transpose(1, 2)
        attrs.append(normals)
    interp = interpolate(frags, torch.cat(attrs, -1), (h, w))
    c = model.albedo.shape[1]
    albedo_v = interp[..., :c].permute(0, 3, 1, 2)
    normals_v = None
    if with_normals:
        normals_v = F.normalize(interp[..., c:], dim=-1, eps=1e-12)
    return frags, albedo_v, normals_v


def render(
    model: CanonicalModel,
    light: Lighting,
    pose: Pose,
    cam: CameraIntrinsics,
    *,
    rot_bound: float = DEFAULT_ROT_BOUND,
    trans_bound: float = DEFAULT_TRANS_BOUND,
) -> RenderedView:
    """Render a canonical model under ``light`` at ``pose``.

    The returned view also carries the warped albedo, which is what
    :func:`warp` would return for the same pose.
    """
    frags, albedo_v, normals_v = _rasterize_model(model, pose, cam, rot_bound, trans_bound, True)
    shaded = shade(albedo_v, normals_v, light)
    alpha = frags.alpha[:, None]
    composed = alpha * shaded + (1 - alpha) * BACKGROUND
    image = torch.where(frags.mask[:, None], composed, torch.full_like(composed, BACKGROUND))
    return RenderedView(image, frags.zbuf, frags.mask, albedo_v, frags.alpha)


def warp(
    model: CanonicalModel,
    pose: Pose,
    cam: CameraIntrinsics,
    *,
    rot_bound: float = DEFAULT_ROT_BOUND,
    trans_bound: float = DEFAULT_TRANS_BOUND,
):
    """Canonical depth and albedo re-rendered at ``pose``: ``(depth_v, albedo_v, mask)``."""
    frags, albedo_v, _ = _rasterize_model(model, pose, cam, rot_bound, trans_bound, False)
    return frags.zbuf, albedo_v, frags.mask
