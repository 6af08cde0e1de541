"""``lemul`` command line: generate, train, refine, infer, eval, render.

Configuration files are flat JSON objects with dotted keys such as
``trainer.learning_rate`` or ``synthetic.count``; command-line flags override
them. Every command writes ``manifest.json`` listing its artifacts and, on
failure, prints a single JSON line on stderr and exits nonzero.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
import traceback
from dataclasses import fields
from pathlib import Path
from typing import Dict, List, Optional

import torch

from .data import (
    REGIMES,
    SyntheticSpec,
    generate_synthetic,
    load_groundtruth,
    open_dataset,
    read_image,
    write_depth,
    write_image,
)
from .decomposer import DecomposerConfig, load_checkpoint
from .losses import LossWeights
from .metrics import evaluate_dataset, groundtruth_predictor, write_results_csv
from .render import CanonicalModel, Lighting, Pose, normals_from_depth, render
from .train import TrainConfig, texture_refine, train

log = logging.getLogger("lemul")

EXIT_FAILURE = 1


def _names(cls, skip=()):
    return [f.name for f in fields(cls) if f.name not in skip]


SCHEMA: Dict[str, List[str]] = {
    "trainer": _names(TrainConfig, skip=("weights",)),
    "losses": _names(LossWeights),
    "decomposer": _names(DecomposerConfig, skip=("seed",)),
    "data": ["path", "regime"],
    "refine": ["steps", "learning_rate", "batch_images"],
    "synthetic": _names(SyntheticSpec),
}
KNOWN_KEYS = {f"{section}.{name}" for section, names in SCHEMA.items() for name in names}


class CliError(Exception):
    """A user-facing failure reported as one line on stderr."""


# ---------------------------------------------------------------------------
# configuration


def load_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise CliError(f"config {path} must be a JSON object")
    check_keys(cfg)
    return cfg


def check_keys(cfg: dict) -> None:
    unknown = sorted(set(cfg) - KNOWN_KEYS)
    if unknown:
        raise CliError(f"unknown config keys: {', '.join(unknown)}")


def section(cfg: dict, name: str) -> dict:
    prefix = name + "."
    return {k[len(prefix) :]: v for k, v in cfg.items() if k.startswith(prefix)}


def apply_overrides(cfg: dict, args) -> dict:
    cfg = dict(cfg)
    if getattr(args, "seed", None) is not None:
        cfg["trainer.seed"] = args.seed
        cfg["synthetic.seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        key = "refine.steps" if args.command == "refine" else "trainer.max_steps"
        cfg[key] = args.steps
    if getattr(args, "m_views", None) is not None:
        cfg["trainer.m_views"] = args.m_views
    if getattr(args, "flip_pairs", False):
        cfg["data.regime"] = "flip_pair"
        cfg["trainer.m_views"] = 2
    if getattr(args, "data", None) is not None:
        cfg["data.path"] = str(Path(args.data).resolve())
    return cfg


def build_train_config(cfg: dict) -> TrainConfig:
    tr = section(cfg, "trainer")
    tr["weights"] = LossWeights(**section(cfg, "losses"))
    if "betas" in tr:
        tr["betas"] = tuple(tr["betas"])
    return TrainConfig(**tr)


def build_net_config(cfg: dict, seed: int) -> DecomposerConfig:
    return DecomposerConfig.from_dict({**section(cfg, "decomposer"), "seed": seed})


def flatten_snapshot(tc: TrainConfig, nc: DecomposerConfig, data: dict) -> dict:
    """Dotted-key config that reproduces a training run when fed back with ``--config``."""
    flat = {}
    for k, v in tc.to_dict().items():
        if k == "weights":
            flat.update({f"losses.{wk}": wv for wk, wv in v.items()})
        else:
            flat[f"trainer.{k}"] = v
    flat.update({f"decomposer.{k}": v for k, v in nc.to_dict().items() if k != "seed"})
    flat.update({f"data.{k}": v for k, v in data.items()})
    return flat


# ---------------------------------------------------------------------------
# artifact bookkeeping


class Artifacts:
    def __init__(self, out: Path, command: str):
        self.out = out
        self.command = command
        self.paths: List[Path] = []

    def add(self, path) -> Path:
        self.paths.append(Path(path))
        return Path(path)

    def write_json(self, name: str, obj) -> Path:
        return self.add(atomic_write_text(self.out / name, json.dumps(obj, indent=2, sort_keys=True) + "\n"))

    def finish(self, extra: Optional[dict] = None) -> Path:
        entries = []
        for p in self.paths:
            data = p.read_bytes()
            entries.append({"path": str(p.relative_to(self.out)) if p.is_relative_to(self.out) else str(p),
                            "bytes": len(data), "sha256": hashlib.sha256(data).hexdigest()})
        body = {"command": self.command, "artifacts": entries}
        body.update(extra or {})
        return atomic_write_text(self.out / "manifest.json", json.dumps(body, indent=2, sort_keys=True) + "\n")


def atomic_write_text(path: Path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)
    return path


def _out_dir(args) -> Path:
    if args.out is None:
        raise CliError("--out is required")
    out = Path(args.out).resolve()
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(value, flag: str):
    if value is None:
        raise CliError(f"{flag} is required")
    return value


def _load_net(ckpt):
    path = Path(_require(ckpt, "--ckpt"))
    if not path.is_file():
        raise CliError(f"checkpoint {path} does not exist")
    try:
        net, meta, _ = load_checkpoint(path)
    except (ValueError, KeyError, OSError) as exc:
        raise CliError(f"cannot load checkpoint {path}: {exc}") from exc
    net.eval()
    return net, meta


def _dataset(cfg: dict):
    root = _require(cfg.get("data.path"), "--data")
    regime = cfg.get("data.regime")
    if regime is not None and regime not in REGIMES:
        raise CliError(f"data.regime must be one of {REGIMES}")
    return open_dataset(root, regime, cfg.get("decomposer.image_size"))


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    cfg = apply_overrides(load_config(args.config), args)
    out = _out_dir(args)
    spec = SyntheticSpec.from_dict(section(cfg, "synthetic"))
    if args.count is not None:
        spec = SyntheticSpec.from_dict({**section(cfg, "synthetic"), "count": args.count})
    records = generate_synthetic(spec, out)
    arts = Artifacts(out, "generate")
    for name in ("manifest.jsonl", "groundtruth.jsonl", "spec.json"):
        arts.add(out / name)
    for sub in ("images", "depth", "mask", "canonical"):
        for p in sorted((out / sub).rglob("*")):
            if p.is_file():
                arts.add(p)
    arts.finish({"instances": len(records)})
    print(f"wrote {len(records)} instances to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = apply_overrides(load_config(args.config), args)
    out = _out_dir(args)
    tc = build_train_config(cfg)
    nc = build_net_config(cfg, tc.seed)
    records = _dataset(cfg)
    snapshot = flatten_snapshot(tc, nc, {"path": cfg["data.path"], "regime": cfg.get("data.regime") or records[0].regime})
    resume = Path(args.resume) if args.resume else None
    result = train(tc, records, out, net_config=nc, resume=resume, snapshot=snapshot)
    arts = Artifacts(out, "train")
    arts.add(out / "config.json")
    arts.add(out / "loss_log.csv")
    for p in sorted(out.glob("ckpt_step*.lemul")):
        arts.add(p)
    arts.finish({"final_checkpoint": result.checkpoint.name, "steps": result.steps, "stopped_early": result.stopped_early})
    print(result.checkpoint)
    return 0


def cmd_refine(args) -> int:
    cfg = apply_overrides(load_config(args.config), args)
    out = _out_dir(args)
    ckpt = Path(_require(args.ckpt, "--ckpt"))
    _load_net(ckpt)
    rf = section(cfg, "refine")
    records = _dataset(cfg)
    seed = cfg.get("trainer.seed", 0)
    result = texture_refine(
        ckpt,
        records,
        int(rf.get("steps", 100)),
        out,
        learning_rate=float(rf.get("learning_rate", 1e-4)),
        batch_images=int(rf.get("batch_images", 8)),
        seed=seed,
        weights=LossWeights(**section(cfg, "losses")),
    )
    arts = Artifacts(out, "refine")
    arts.add(out / "refine_log.csv")
    arts.add(result.checkpoint)
    arts.finish({"steps": result.steps})
    print(result.checkpoint)
    return 0


def normal_image(normals: torch.Tensor) -> torch.Tensor:
    """``(H, W, 3)`` unit normals to an RGB image with ``(n + 1) / 2`` colouring."""
    return ((normals + 1) / 2).permute(2, 0, 1).clamp(0, 1)


def _decompose_image(net, image_path):
    path = Path(_require(image_path, "--image"))
    try:
        image = read_image(path, net.config.image_size)
    except (ValueError, OSError) as exc:
        raise CliError(str(exc)) from exc
    with torch.no_grad():
        return image, net.decompose(image[None])


def cmd_infer(args) -> int:
    net, _ = _load_net(args.ckpt)
    out = _out_dir(args)
    image, dec = _decompose_image(net, args.image)
    cam = net.camera
    arts = Artifacts(out, "infer")
    with torch.no_grad():
        depth = dec.depth[0]
        write_depth(arts.add(out / "depth.png"), depth, *cam.depth_range)
        arts.add(out / "depth.range.txt")
        write_image(arts.add(out / "albedo.png"), dec.albedo[0])
        write_image(arts.add(out / "normal.png"), normal_image(normals_from_depth(depth, cam)[0]))
        view = render(dec.model, dec.light, dec.pose, cam, rot_bound=net.config.rot_bound, trans_bound=net.config.trans_bound)
        write_image(arts.add(out / "reconstruction.png"), view.image[0])
        l1 = float((view.image[0] - image).abs().mean())
    params = {
        "light": {k: float(getattr(dec.light, k)[0]) for k in ("k_s", "k_d", "l_x", "l_y")},
        "pose": {"rotation": dec.pose.rotation[0].tolist(), "translation": dec.pose.translation[0].tolist()},
        "reconstruction_l1": l1,
    }
    arts.write_json("params.json", params)
    arts.finish({"image": str(Path(args.image).resolve())})
    print(json.dumps(params, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    out = _out_dir(args)
    data = Path(_require(args.data, "--data"))
    try:
        gts = load_groundtruth(data)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    if args.groundtruth:
        spec = SyntheticSpec.from_dict(json.loads((data / "spec.json").read_text()))
        result = evaluate_dataset(groundtruth_predictor(), gts, spec.camera, rot_bound=math.pi, trans_bound=1.0)
    else:
        net, _ = _load_net(args.ckpt)
        result = evaluate_dataset(net, gts)
    arts = Artifacts(out, "eval")
    arts.add(write_results_csv(out / "metrics.csv", result))
    arts.finish({"side_mean": result.side_mean, "mad_mean": result.mad_mean, "n_images": result.n_images})
    print(result.summary())
    return 0


def parse_pose(text: str) -> List[float]:
    """``rx,ry,rz[,tx,ty,tz]`` with rotations in degrees."""
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError as exc:
        raise CliError(f"bad pose {text!r}: {exc}") from exc
    if len(vals) not in (3, 6):
        raise CliError(f"bad pose {text!r}: expected 3 or 6 comma-separated numbers")
    vals += [0.0] * (6 - len(vals))
    return [math.radians(v) for v in vals[:3]] + vals[3:]


DEFAULT_RENDER_POSES = ("0,-25,0", "0,25,0")
TEXTURELESS_ALBEDO = 0.8
TEXTURELESS_LIGHT = (0.3, 0.7, -0.4, -0.4)


def cmd_render(args) -> int:
    net, _ = _load_net(args.ckpt)
    out = _out_dir(args)
    _, dec = _decompose_image(net, args.image)
    cam = net.camera
    poses = [parse_pose(p) for p in (args.pose or DEFAULT_RENDER_POSES)]
    arts = Artifacts(out, "render")
    gray = CanonicalModel(dec.depth, torch.full_like(dec.albedo, TEXTURELESS_ALBEDO))
    plain_light = Lighting.from_tensor(torch.tensor([TEXTURELESS_LIGHT]))
    # explicit user poses may exceed the training bounds
    bounds = dict(rot_bound=math.pi, trans_bound=float("inf"))
    with torch.no_grad():
        for k, p in enumerate(poses):
            pose = Pose.from_tensor(torch.tensor([p]))
            plain = render(gray, plain_light, pose, cam, **bounds)
            textured = render(dec.model, dec.light, pose, cam, **bounds)
            write_image(arts.add(out / f"textureless_{k:02d}.png"), plain.image[0])
            write_image(arts.add(out / f"textured_{k:02d}.png"), textured.image[0])
    canon = normal_image(normals_from_depth(dec.depth[0], cam)[0])
    write_image(arts.add(out / "canonical_normal.png"), canon)
    arts.finish({"poses": poses})
    print(f"rendered {len(poses)} poses to {out}")
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "refine": cmd_refine,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "render": cmd_render,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lemul", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=False, ckpt=False, image=False):
        p.add_argument("--config", help="flat JSON config with dotted keys")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int)
        if data:
            p.add_argument("--data", help="dataset directory")
        if ckpt:
            p.add_argument("--ckpt", help="checkpoint file (.lemul)")
        if image:
            p.add_argument("--image", help="input image")
        return p

    g = common(sub.add_parser("generate", help="write a synthetic dataset"))
    g.add_argument("--count", type=int, help="number of instances (overrides synthetic.count)")

    t = common(sub.add_parser("train", help="train all networks"), data=True)
    t.add_argument("--steps", type=int)
    t.add_argument("--m-views", dest="m_views", type=int)
    t.add_argument("--flip-pairs", dest="flip_pairs", action="store_true", help="train on image + mirror pairs")
    t.add_argument("--resume", help="checkpoint to resume from")

    r = common(sub.add_parser("refine", help="texture refinement of f_a, f_l, f_c"), data=True, ckpt=True)
    r.add_argument("--steps", type=int)

    common(sub.add_parser("infer", help="decompose one image"), ckpt=True, image=True)

    e = common(sub.add_parser("eval", help="SIDE/MAD on a synthetic test set"), data=True, ckpt=True)
    e.add_argument("--groundtruth", action="store_true", help="score ground-truth decompositions instead of a checkpoint")

    rd = common(sub.add_parser("render", help="re-render an image's reconstruction at new poses"), ckpt=True, image=True)
    rd.add_argument("--pose", action="append", help="rx,ry,rz[,tx,ty,tz] in degrees / camera units; repeatable")
    return parser


def _error_line(command: str, exc: BaseException) -> str:
    msg = " ".join(str(exc).split()) or type(exc).__name__
    return json.dumps({"error": type(exc).__name__, "command": command, "message": msg}, sort_keys=True)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (CliError, ValueError, OSError, KeyError, TypeError) as exc:
        if args.verbose:
            traceback.print_exc()
        print(_error_line(args.command, exc), file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
