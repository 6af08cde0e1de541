"""Training-instance assembly and a procedural dataset with ground-truth depth.

On-disk layout written by :func:`generate_synthetic`::

    root/
      manifest.jsonl          one InstanceRecord per line (paths relative to root)
      groundtruth.jsonl       per-instance generation parameters, light and pose per view
      spec.json               the SyntheticSpec used
      images/<id>/view_00.png ...
      depth/<id>/view_00.png  16-bit view-space depth, with view_00.range.txt sidecar
      mask/<id>/view_00.png   covered pixels
      canonical/<id>.npz      float canonical depth and albedo

User-supplied data only needs ``root/<instance_id>/<image files>``.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image

from .render import CameraIntrinsics, CanonicalModel, Lighting, Pose, render

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}
REGIMES = ("flip_pair", "fixed_set", "sampled_collection")


# ---------------------------------------------------------------------------
# image / depth IO


def _atomic_save(img: Image.Image, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    img.save(tmp, format="PNG")
    tmp.replace(path)


def to_uint8(image: torch.Tensor) -> np.ndarray:
    """``(3, H, W)`` float image in [0, 1] to ``(H, W, 3)`` uint8."""
    arr = image.detach().cpu().double().clamp(0, 1).permute(1, 2, 0).numpy()
    return np.round(arr * 255).astype(np.uint8)


def write_image(path, image: torch.Tensor) -> None:
    _atomic_save(Image.fromarray(to_uint8(image), mode="RGB"), Path(path))


def read_image(path, image_size: Optional[int] = None) -> torch.Tensor:
    path = Path(path)
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except Exception as exc:  # PIL raises a zoo of exception types
        raise ValueError(f"cannot decode image {path}: {exc}") from exc
    if image_size is not None and arr.shape[:2] != (image_size, image_size):
        raise ValueError(f"{path}: image is {arr.shape[1]}x{arr.shape[0]}, expected {image_size}x{image_size}")
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def write_mask(path, mask: torch.Tensor) -> None:
    arr = mask.detach().cpu().numpy().astype(np.uint8) * 255
    _atomic_save(Image.fromarray(arr, mode="L"), Path(path))


def read_mask(path) -> torch.Tensor:
    with Image.open(path) as im:
        return torch.from_numpy(np.asarray(im.convert("L")) > 127)


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".range.txt")


def write_depth(path, depth: torch.Tensor, lo: float, hi: float) -> None:
    """16-bit PNG with ``value = lo + (hi - lo) * q / 65535`` and a sidecar range file."""
    if not hi > lo:
        raise ValueError(f"depth range must be increasing, got ({lo}, {hi})")
    d = depth.detach().cpu().double().numpy()
    q = np.round(np.clip((d - lo) / (hi - lo), 0, 1) * 65535).astype(np.uint16)
    path = Path(path)
    _atomic_save(Image.fromarray(q), path)
    side = sidecar_path(path)
    tmp = side.with_name(side.name + ".tmp")
    tmp.write_text(f"{lo!r} {hi!r}\n")
    tmp.replace(side)


def read_depth(path) -> torch.Tensor:
    path = Path(path)
    lo, hi = (float(x) for x in sidecar_path(path).read_text().split())
    with Image.open(path) as im:
        q = np.asarray(im, dtype=np.float64)
    return torch.from_numpy(lo + (hi - lo) * q / 65535.0)


# ---------------------------------------------------------------------------
# manifests and sampling


@dataclass
class InstanceRecord:
    instance_id: str
    image_paths: List[str]
    regime: str = "sampled_collection"

    def __post_init__(self):
        if not self.image_paths:
            raise ValueError(f"instance {self.instance_id!r} has no images")
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}; expected one of {REGIMES}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str, root: Optional[Path] = None) -> "InstanceRecord":
        d = json.loads(line)
        rec = cls(**d)
        if root is not None:
            rec.image_paths = [str(Path(root) / p) if not os.path.isabs(p) else p for p in rec.image_paths]
        return rec


def _image_files(directory: Path) -> List[Path]:
    return sorted(p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def load_manifest(root, regime: str = "sampled_collection", image_size: Optional[int] = None) -> List[InstanceRecord]:
    """Scan ``root/<instance_id>/<images>`` into records (lexicographic order).

    In ``flip_pair`` mode every image becomes its own record, including images
    lying directly in ``root``. Each image is decoded once to validate it.
    """
    root = Path(root)
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}")
    if not root.is_dir():
        raise ValueError(f"data root {root} is not a directory")
    records = []
    subdirs = sorted(p for p in root.iterdir() if p.is_dir())
    if regime == "flip_pair":
        for f in _image_files(root):
            records.append(InstanceRecord(f.stem, [str(f)], regime))
    for sub in subdirs:
        files = _image_files(sub)
        if not files:
            raise ValueError(f"instance directory {sub} contains no images")
        if regime == "flip_pair":
            records.extend(InstanceRecord(f"{sub.name}/{f.stem}", [str(f)], regime) for f in files)
        else:
            records.append(InstanceRecord(sub.name, [str(f) for f in files], regime))
    if not records:
        raise ValueError(f"data root {root} contains no instances")
    for rec in records:
        for p in rec.image_paths:
            read_image(p, image_size)
    return records


def open_dataset(path, regime: Optional[str] = None, image_size: Optional[int] = None) -> List[InstanceRecord]:
    """Records from ``path/manifest.jsonl`` if present, else by scanning ``path``."""
    path = Path(path)
    manifest = path / "manifest.jsonl"
    if manifest.exists():
        records = [InstanceRecord.from_json(l, path) for l in manifest.read_text().splitlines() if l.strip()]
        if not records:
            raise ValueError(f"{manifest} is empty")
        if regime == "flip_pair":
            records = [
                InstanceRecord(f"{r.instance_id}/{Path(p).stem}", [p], "flip_pair")
                for r in records
                for p in r.image_paths
            ]
        elif regime is not None:
            for r in records:
                r.regime = regime
        return records
    return load_manifest(path, regime or "sampled_collection", image_size)


class InstanceSample(NamedTuple):
    instance_id: str
    paths: Tuple[str, ...]
    flipped: Tuple[bool, ...]


def flip_pair_expand(image: torch.Tensor):
    """``(image, left-right mirror)``; works on ``(..., H, W)`` tensors."""
    return image, torch.flip(image, dims=[-1])


def sample_epoch(records: Sequence[InstanceRecord], m: int, rng: np.random.Generator) -> List[InstanceSample]:
    """One epoch plan: one instance per record, in record order.

    ``sampled_collection`` draws ``m`` distinct images (with replacement if the
    record is too small), kept in lexicographic order so index 0 is the pivot;
    ``fixed_set`` passes all images through; ``flip_pair`` yields the image
    and its mirror.
    """
    plan = []
    for rec in records:
        paths = rec.image_paths
        if rec.regime == "flip_pair":
            p = paths[0] if len(paths) == 1 else paths[int(rng.integers(len(paths)))]
            plan.append(InstanceSample(rec.instance_id, (p, p), (False, True)))
        elif rec.regime == "fixed_set":
            plan.append(InstanceSample(rec.instance_id, tuple(paths), (False,) * len(paths)))
        else:
            if len(paths) >= m:
                idx = np.sort(rng.choice(len(paths), size=m, replace=False))
            else:
                idx = rng.choice(len(paths), size=m, replace=True)
            plan.append(InstanceSample(rec.instance_id, tuple(paths[i] for i in idx), (False,) * m))
    return plan


class ImageStore:
    """Decoded-image cache; optional thread pool (``LEMUL_NUM_WORKERS``) for prefetch."""

    def __init__(self, image_size: Optional[int] = None, workers: Optional[int] = None):
        self.image_size = image_size
        self.workers = int(os.environ.get("LEMUL_NUM_WORKERS", "0")) if workers is None else workers
        self._cache: Dict[str, torch.Tensor] = {}

    def get(self, path: str) -> torch.Tensor:
        if path not in self._cache:
            self._cache[path] = read_image(path, self.image_size)
        return self._cache[path]

    def prefetch(self, paths: Iterable[str]) -> None:
        todo = sorted({p for p in paths if p not in self._cache})
        if self.workers > 0 and len(todo) > 1:
            with ThreadPoolExecutor(self.workers) as pool:
                for p, img in zip(todo, pool.map(lambda q: read_image(q, self.image_size), todo)):
                    self._cache[p] = img
        else:
            for p in todo:
                self.get(p)

    def load(self, sample: InstanceSample) -> torch.Tensor:
        views = []
        for p, flip in zip(sample.paths, sample.flipped):
            img = self.get(p)
            views.append(torch.flip(img, dims=[-1]) if flip else img)
        return torch.stack(views)

    def batch(self, samples: Sequence[InstanceSample]) -> torch.Tensor:
        """``(B, M, 3, H, W)``; all samples must share M."""
        self.prefetch(p for s in samples for p in s.paths)
        return torch.stack([self.load(s) for s in samples])


# ---------------------------------------------------------------------------
# synthetic generator

ALBEDO_PATTERNS = ("blobs", "stripes", "checker", "mixed")


@dataclass
class SyntheticSpec:
    count: int = 10
    seed: int = 0
    views_per_instance: int = 2
    bump_count: Tuple[int, int] = (1, 4)
    bump_amplitude: Tuple[float, float] = (0.005, 0.02)
    bump_width: Tuple[float, float] = (0.15, 0.35)
    # shared broad bump toward the camera that gives the collection a common
    # coarse shape; (0, 0) turns it off
    dome_amplitude: Tuple[float, float] = (0.04, 0.06)
    dome_width: Tuple[float, float] = (0.45, 0.6)
    dome_jitter: float = 0.1
    albedo_pattern: str = "mixed"
    k_s_range: Tuple[float, float] = (0.2, 0.5)
    k_d_range: Tuple[float, float] = (0.4, 0.7)
    light_xy_range: Tuple[float, float] = (-0.8, 0.8)
    rot_range_deg: Tuple[float, float, float] = (10.0, 25.0, 5.0)
    trans_range: Tuple[float, float, float] = (0.005, 0.005, 0.01)
    symmetric: bool = False
    image_size: int = 64
    fov_degrees: float = 10.0
    depth_range: Tuple[float, float] = (0.9, 1.1)

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if self.views_per_instance < 2:
            raise ValueError("views_per_instance must be >= 2")
        if self.albedo_pattern not in ALBEDO_PATTERNS:
            raise ValueError(f"albedo_pattern must be one of {ALBEDO_PATTERNS}")
        if min(self.bump_count) < 0 or self.bump_count[0] > self.bump_count[1]:
            raise ValueError("bump_count must be a nonnegative (lo, hi) range")
        if max(self.rot_range_deg) > 30.0:
            raise ValueError("synthetic rotations are limited to +-30 degrees")
        if min(self.dome_amplitude) < 0 or self.dome_amplitude[0] > self.dome_amplitude[1]:
            raise ValueError("dome_amplitude must be a nonnegative (lo, hi) range")
        for name in ("bump_count", "bump_amplitude", "bump_width", "dome_amplitude", "dome_width", "k_s_range", "k_d_range",
                     "light_xy_range", "rot_range_deg", "trans_range", "depth_range"):
            setattr(self, name, tuple(getattr(self, name)))

    @property
    def camera(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.fov_degrees, self.image_size, self.depth_range)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synthetic spec keys: {sorted(unknown)}")
        return cls(**d)


def _norm_grid(s: int):
    c = torch.linspace(-1, 1, s, dtype=torch.float64)
    y, x = torch.meshgrid(c, c, indexing="ij")
    return x, y


def synth_depth(params: dict, cam: CameraIntrinsics) -> torch.Tensor:
    x, y = _norm_grid(cam.image_size)
    d = torch.full_like(x, params.get("plane", cam.d_mid))
    for amp, cx, cy, width in params["bumps"]:
        d = d + amp * torch.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * width**2))
    if params.get("symmetric"):
        d = 0.5 * (d + torch.flip(d, dims=[-1]))
    lo, hi = cam.depth_range
    return d.clamp(lo + 1e-3, hi - 1e-3)


def synth_albedo(params: dict, s: int) -> torch.Tensor:
    x, y = _norm_grid(s)
    base = torch.tensor(params["base"], dtype=torch.float64)[:, None, None]
    kind = params["pattern"]
    if kind == "blobs":
        a = base.expand(3, s, s).clone()
        for color, cx, cy, width in params["blobs"]:
            g = torch.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * width**2))
            a = a * (1 - g) + torch.tensor(color, dtype=torch.float64)[:, None, None] * g
    else:
        theta, period = params["angle"], params["period"]
        t = x * math.cos(theta) + y * math.sin(theta)
        if kind == "stripes":
            wave = 0.5 + 0.5 * torch.tanh(4 * torch.sin(2 * math.pi * t / period))
        else:
            t2 = -x * math.sin(theta) + y * math.cos(theta)
            wave = 0.5 + 0.5 * torch.tanh(4 * torch.sin(2 * math.pi * t / period) * torch.sin(2 * math.pi * t2 / period))
        other = torch.tensor(params["other"], dtype=torch.float64)[:, None, None]
        a = base * (1 - wave) + other * wave
    if params.get("symmetric"):
        a = 0.5 * (a + torch.flip(a, dims=[-1]))
    return a.clamp(0, 1)


def _uniform(rng, lo_hi):
    lo, hi = lo_hi
    return float(rng.uniform(lo, hi)) if hi > lo else float(lo)


def sample_instance_params(spec: SyntheticSpec, rng: np.random.Generator) -> dict:
    k = int(rng.integers(spec.bump_count[0], spec.bump_count[1] + 1))
    bumps, plane = [], None
    if spec.dome_amplitude[1] > 0:
        amp = _uniform(rng, spec.dome_amplitude)
        j = spec.dome_jitter
        bumps.append([-amp, float(rng.uniform(-j, j)), float(rng.uniform(-j, j)), _uniform(rng, spec.dome_width)])
        # recess the base plane so the dome sits around the middle of the depth range
        plane = spec.camera.d_mid + 0.5 * amp
    for _ in range(k):
        amp = _uniform(rng, spec.bump_amplitude) * (1 if rng.random() < 0.5 else -1)
        bumps.append([amp, float(rng.uniform(-0.6, 0.6)), float(rng.uniform(-0.6, 0.6)), _uniform(rng, spec.bump_width)])
    pattern = spec.albedo_pattern
    if pattern == "mixed":
        pattern = ALBEDO_PATTERNS[int(rng.integers(3))]
    albedo = {"pattern": pattern, "base": rng.uniform(0.3, 0.9, 3).tolist(), "symmetric": spec.symmetric}
    if pattern == "blobs":
        albedo["blobs"] = [
            [rng.uniform(0.2, 0.9, 3).tolist(), float(rng.uniform(-0.8, 0.8)), float(rng.uniform(-0.8, 0.8)), float(rng.uniform(0.1, 0.3))]
            for _ in range(int(rng.integers(2, 5)))
        ]
    else:
        albedo["other"] = rng.uniform(0.2, 0.9, 3).tolist()
        albedo["angle"] = 0.0 if spec.symmetric else float(rng.uniform(0, math.pi))
        albedo["period"] = float(rng.uniform(0.5, 1.2))
    depth = {"bumps": bumps, "symmetric": spec.symmetric}
    if plane is not None:
        depth["plane"] = plane
    return {"depth": depth, "albedo": albedo}


def sample_view_params(spec: SyntheticSpec, rng: np.random.Generator) -> dict:
    light = [
        _uniform(rng, spec.k_s_range),
        _uniform(rng, spec.k_d_range),
        _uniform(rng, spec.light_xy_range),
        _uniform(rng, spec.light_xy_range),
    ]
    rot = [math.radians(float(rng.uniform(-r, r))) if r > 0 else 0.0 for r in spec.rot_range_deg]
    trans = [float(rng.uniform(-t, t)) if t > 0 else 0.0 for t in spec.trans_range]
    return {"light": light, "pose": rot + trans}


def canonical_model(params: dict, cam: CameraIntrinsics) -> CanonicalModel:
    return CanonicalModel(synth_depth(params["depth"], cam)[None], synth_albedo(params["albedo"], cam.image_size)[None])


def _rel(path: Path, root: Path) -> str:
    return str(path.relative_to(root))


def generate_synthetic(spec: SyntheticSpec, out_dir) -> List[InstanceRecord]:
    """Render ``spec.count`` instances of ``spec.views_per_instance`` views to ``out_dir``.

    Bit-identical for a fixed spec. Returns the records written to the manifest.
    """
    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
        probe = root / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ValueError(f"cannot write to {root}: {exc}") from exc
    cam = spec.camera
    rng = np.random.default_rng(spec.seed)
    records, gt_lines = [], []
    width = max(3, len(str(spec.count - 1)))
    for n in range(spec.count):
        iid = f"inst_{n:0{width}d}"
        params = sample_instance_params(spec, rng)
        model = canonical_model(params, cam)
        canon_path = root / "canonical" / f"{iid}.npz"
        canon_path.parent.mkdir(parents=True, exist_ok=True)
        np.savez(canon_path, depth=model.depth[0].numpy(), albedo=model.albedo[0].numpy())
        views, paths = [], []
        for v in range(spec.views_per_instance):
            vp = sample_view_params(spec, rng)
            light = Lighting.from_tensor(torch.tensor(vp["light"], dtype=torch.float64))
            pose = Pose.from_tensor(torch.tensor(vp["pose"], dtype=torch.float64))
            view = render(model, light, pose, cam)
            img_path = root / "images" / iid / f"view_{v:02d}.png"
            depth_path = root / "depth" / iid / f"view_{v:02d}.png"
            mask_path = root / "mask" / iid / f"view_{v:02d}.png"
            write_image(img_path, view.image[0])
            mask = view.mask[0]
            vd = view.view_depth[0]
            lo = float(vd[mask].min()) - 1e-3 if mask.any() else cam.depth_range[0]
            hi = float(vd[mask].max()) + 1e-3 if mask.any() else cam.depth_range[1]
            write_depth(depth_path, torch.where(mask, vd, torch.full_like(vd, lo)), lo, hi)
            write_mask(mask_path, mask)
            paths.append(img_path)
            views.append({
                "image": _rel(img_path, root),
                "depth": _rel(depth_path, root),
                "mask": _rel(mask_path, root),
                **vp,
            })
        records.append(InstanceRecord(iid, [_rel(p, root) for p in paths], "sampled_collection"))
        gt_lines.append(json.dumps({"instance_id": iid, "canonical": _rel(canon_path, root), "params": params, "views": views}, sort_keys=True))
    (root / "manifest.jsonl").write_text("".join(r.to_json() + "\n" for r in records))
    (root / "groundtruth.jsonl").write_text("".join(l + "\n" for l in gt_lines))
    spec_dict = asdict(spec)
    (root / "spec.json").write_text(json.dumps(spec_dict, indent=2, sort_keys=True))
    return [InstanceRecord(r.instance_id, [str(root / p) for p in r.image_paths], r.regime) for r in records]


@dataclass
class GroundTruthView:
    image_id: str
    image_path: Path
    depth: torch.Tensor
    mask: torch.Tensor
    light: List[float]
    pose: List[float]
    canonical_path: Path


def load_groundtruth(root) -> List[GroundTruthView]:
    """Flatten ``groundtruth.jsonl`` into one entry per rendered view."""
    root = Path(root)
    gt_file = root / "groundtruth.jsonl"
    if not gt_file.exists():
        raise ValueError(f"{root} has no groundtruth.jsonl; not a synthetic test set")
    out = []
    for line in gt_file.read_text().splitlines():
        if not line.strip():
            continue
        entry = json.loads(line)
        for v in entry["views"]:
            out.append(
                GroundTruthView(
                    image_id=f"{entry['instance_id']}/{Path(v['image']).stem}",
                    image_path=root / v["image"],
                    depth=read_depth(root / v["depth"]),
                    mask=read_mask(root / v["mask"]),
                    light=v["light"],
                    pose=v["pose"],
                    canonical_path=root / entry["canonical"],
                )
            )
    return out
