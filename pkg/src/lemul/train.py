"""Joint optimisation of the six networks, checkpoint/resume and texture refinement."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterator, List, Optional, Sequence

import numpy as np
import torch

from .data import ImageStore, InstanceRecord, InstanceSample, sample_epoch
from .decomposer import MODULE_NAMES, Decomposer, DecomposerConfig, load_checkpoint, save_checkpoint
from .render import Lighting, Pose
from .losses import LossBreakdown, LossWeights, PerceptualFeatures, ViewOutputs, pivot_pairs, total_loss

log = logging.getLogger(__name__)

LOSS_FIELDS = ("rec", "rec_cross", "al", "al_cross", "total")
REFINE_MODULES = ("f_a", "f_l", "f_c")


class NonFiniteLossError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_instances: int = 8
    max_steps: int = 1000
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    eval_every: int = 0
    m_views: int = 3
    checkpoint_every: int = 1000
    early_stop_window: int = 100
    early_stop_tol: float = 1e-4
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_instances < 1:
            raise ValueError("batch_instances must be >= 1")
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")
        if self.m_views < 1:
            raise ValueError("m_views must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "weights" in d and isinstance(d["weights"], dict):
            d["weights"] = LossWeights(**d["weights"])
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


def eval_steps(max_steps: int, eval_every: int) -> List[int]:
    """Steps (1-based, after the update) at which evaluation rows are emitted."""
    if eval_every <= 0:
        return []
    return list(range(eval_every, max_steps + 1, eval_every))


# ---------------------------------------------------------------------------
# forward


def forward_views(net: Decomposer, images: torch.Tensor, cross: bool = True) -> ViewOutputs:
    """Run every network on a ``(B, M, 3, H, W)`` batch of instances."""
    b, m = images.shape[:2]
    flat = images.reshape(b * m, *images.shape[2:])
    dec = net.decompose(flat)
    conf = net.confidence(flat)

    def split(t):
        return list(t.reshape(b, m, *t.shape[1:]).unbind(1))

    lights = split(dec.light.as_tensor())
    poses = split(dec.pose.as_tensor())
    out = ViewOutputs(
        images=list(images.unbind(1)),
        depth=split(dec.depth),
        albedo=split(dec.albedo),
        light=[Lighting.from_tensor(t) for t in lights],
        pose=[Pose.from_tensor(t) for t in poses],
        conf=[type(conf)(a, c) for a, c in zip(split(conf.c_l1), split(conf.c_pe))],
    )
    if cross and m > 1:
        pairs = pivot_pairs(m)
        first = torch.cat([images[:, i] for i, _ in pairs])
        second = torch.cat([images[:, j] for _, j in pairs])
        cc = net.cross_confidence(first, second)
        l1 = cc.c_l1.split(b)
        pe = cc.c_pe.split(b)
        out.cross_conf = {pair: type(cc)(l1[k], pe[k]) for k, pair in enumerate(pairs)}
    return out


def batch_loss(net, features, images, weights: LossWeights, reduce=True) -> LossBreakdown:
    cross = weights.lambda_cross > 0 and images.shape[1] > 1
    out = forward_views(net, images, cross=cross)
    return total_loss(
        out,
        net.camera,
        features,
        weights,
        rot_bound=net.config.rot_bound,
        trans_bound=net.config.trans_bound,
        reduce=reduce,
    )


def make_optimizer(params, config: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=config.learning_rate, betas=tuple(config.betas), eps=config.adam_eps, weight_decay=0.0)


def _nonfinite_instances(net, images) -> List[int]:
    """Indices of batch items whose images or decomposition contain NaN/inf."""
    b, m = images.shape[:2]
    with torch.no_grad():
        dec = net.decompose(images.reshape(b * m, *images.shape[2:]))
    bad = ~torch.isfinite(images.reshape(b, -1)).all(1)
    for t in (dec.depth, dec.albedo, dec.light.as_tensor(), dec.pose.as_tensor()):
        bad |= ~torch.isfinite(t.reshape(b, -1)).all(1)
    return torch.nonzero(bad).flatten().tolist()


def train_step(net, optimizer, features, images, weights: LossWeights, instance_ids: Sequence[str] = ()) -> LossBreakdown:
    """One Adam update against the batch-mean total loss; returns the breakdown as floats."""
    optimizer.zero_grad(set_to_none=True)

    def names(idx):
        return [instance_ids[k] if k < len(instance_ids) else str(k) for k in idx] or list(instance_ids)

    try:
        breakdown = batch_loss(net, features, images, weights)
    except ValueError as exc:
        bad = _nonfinite_instances(net, images)
        if not bad:
            raise
        raise NonFiniteLossError(f"non-finite network outputs ({exc}) for instances {names(bad)}") from exc
    if not torch.isfinite(breakdown.total):
        with torch.no_grad():
            per_item = batch_loss(net, features, images, weights, reduce=False).total
        bad = torch.nonzero(~torch.isfinite(per_item)).flatten().tolist()
        raise NonFiniteLossError(f"non-finite loss {float(breakdown.total)} for instances {names(bad)}")
    breakdown.total.backward()
    optimizer.step()
    return LossBreakdown(*(t.detach() for t in breakdown))


# ---------------------------------------------------------------------------
# data stream


def _epoch_batches(records, config: TrainConfig, epoch: int) -> List[List[InstanceSample]]:
    rng = np.random.default_rng([config.seed, epoch])
    plan = sample_epoch(records, config.m_views, rng)
    order = rng.permutation(len(plan))
    plan = [plan[k] for k in order]
    batches = []
    by_m = {}
    for s in plan:
        by_m.setdefault(len(s.paths), []).append(s)
    for m in sorted(by_m):
        group = by_m[m]
        for k in range(0, len(group), config.batch_instances):
            batches.append(group[k : k + config.batch_instances])
    return batches


def batch_stream(records, config: TrainConfig, start_step: int = 0) -> Iterator[List[InstanceSample]]:
    """Infinite deterministic stream of batches, positioned at ``start_step``."""
    epoch, skip = 0, start_step
    while True:
        batches = _epoch_batches(records, config, epoch)
        if skip >= len(batches):
            skip -= len(batches)
        else:
            for batch in batches[skip:]:
                yield batch
            skip = 0
        epoch += 1


# ---------------------------------------------------------------------------
# checkpoints with optimiser state


def _optim_arrays(net: Decomposer, optimizer) -> dict:
    arrays = {}
    names = {id(p): n for n, p in net.named_parameters()}
    for group in optimizer.param_groups:
        for p in group["params"]:
            st = optimizer.state.get(p)
            if not st:
                continue
            n = names[id(p)]
            arrays[f"optim/{n}/exp_avg"] = st["exp_avg"].numpy()
            arrays[f"optim/{n}/exp_avg_sq"] = st["exp_avg_sq"].numpy()
            arrays[f"optim/{n}/step"] = np.asarray(float(st["step"]))
    return arrays


def _restore_optim(net: Decomposer, optimizer, arrays: dict) -> None:
    params = dict(net.named_parameters())
    for key in arrays:
        if not key.startswith("optim/") or not key.endswith("/exp_avg"):
            continue
        n = key[len("optim/") : -len("/exp_avg")]
        p = params[n]
        optimizer.state[p] = {
            "step": torch.tensor(float(arrays[f"optim/{n}/step"])),
            "exp_avg": torch.from_numpy(arrays[f"optim/{n}/exp_avg"].copy()),
            "exp_avg_sq": torch.from_numpy(arrays[f"optim/{n}/exp_avg_sq"].copy()),
        }


def checkpoint_name(step: int) -> str:
    return f"ckpt_step{step}.lemul"


@dataclass
class TrainResult:
    checkpoint: Path
    steps: int
    history: List[dict]
    stopped_early: bool = False


class _CsvLog:
    def __init__(self, path: Path, header: Sequence[str], append: bool):
        self.path = path
        fresh = not (append and path.exists())
        self.fh = open(path, "w" if fresh else "a", newline="")
        self.writer = csv.writer(self.fh)
        if fresh:
            self.writer.writerow(header)

    def row(self, values):
        self.writer.writerow(values)
        self.fh.flush()

    def close(self):
        self.fh.close()


def _truncate_log(path: Path, step: int) -> None:
    """Drop rows past ``step`` so a resumed run continues a consistent log."""
    if not path.exists():
        return
    lines = path.read_text().splitlines()
    kept = [lines[0]] + [l for l in lines[1:] if l and int(l.split(",")[0]) <= step]
    path.write_text("\n".join(kept) + "\n")


def train(
    config: TrainConfig,
    records: Sequence[InstanceRecord],
    out_dir,
    *,
    net_config: Optional[DecomposerConfig] = None,
    resume: Optional[Path] = None,
    evaluator: Optional[Callable[[Decomposer], dict]] = None,
    snapshot: Optional[dict] = None,
    stop_after: Optional[int] = None,
) -> TrainResult:
    """Train from scratch (or ``resume``) for ``config.max_steps`` total updates.

    Writes ``ckpt_step<N>.lemul`` every ``checkpoint_every`` steps and at the
    end, ``loss_log.csv`` and a ``config.json`` snapshot. ``evaluator`` is
    called at the steps given by :func:`eval_steps` and its dict appended to
    ``eval_log.csv``. ``stop_after`` interrupts the run after that many total
    steps (used to exercise resumption).
    """
    if not records:
        raise ValueError("training needs a nonempty dataset")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(config.seed)

    start = 0
    history: List[float] = []
    if resume is not None:
        net, meta, arrays = load_checkpoint(resume)
        start = int(meta.get("step", 0))
        history = list(meta.get("loss_window", []))
    else:
        net = Decomposer(net_config or DecomposerConfig(seed=config.seed))
    features = PerceptualFeatures()
    optimizer = make_optimizer(net.parameters(), config)
    if resume is not None:
        _restore_optim(net, optimizer, arrays)

    with open(out / "config.json", "w") as fh:
        json.dump(snapshot or {"trainer": config.to_dict(), "decomposer": net.config.to_dict()}, fh, indent=2, sort_keys=True)

    _truncate_log(out / "loss_log.csv", start)
    _truncate_log(out / "eval_log.csv", start)
    loss_log = _CsvLog(out / "loss_log.csv", ("step",) + LOSS_FIELDS, append=resume is not None)
    eval_log = None
    eval_at = set(eval_steps(config.max_steps, config.eval_every))

    def save(step):
        meta = {"step": step, "loss_window": history[-2 * max(config.early_stop_window, 1):], "train_config": config.to_dict()}
        return save_checkpoint(out / checkpoint_name(step), net, meta, _optim_arrays(net, optimizer))

    store = ImageStore(net.config.image_size)
    rows = []
    step = start
    stopped_early = False
    last_ckpt = None
    try:
        if start == 0:
            last_ckpt = save(0)
        stream = batch_stream(records, config, start)
        end = config.max_steps if stop_after is None else min(config.max_steps, stop_after)
        while step < end:
            samples = next(stream)
            images = store.batch(samples)
            bd = train_step(net, optimizer, features, images, config.weights, [s.instance_id for s in samples])
            step += 1
            vals = [float(getattr(bd, k)) for k in LOSS_FIELDS]
            loss_log.row([step] + vals)
            rows.append(dict(zip(("step",) + LOSS_FIELDS, [step] + vals)))
            history.append(vals[-1])
            if step % 50 == 0 or step == 1:
                log.info("step %d total %.5f rec %.5f", step, vals[-1], vals[0])
            if evaluator is not None and step in eval_at:
                metrics = evaluator(net)
                if eval_log is None:
                    _truncate_log(out / "eval_log.csv", step - 1)
                    eval_log = _CsvLog(out / "eval_log.csv", ["step"] + sorted(metrics), append=True)
                eval_log.row([step] + [metrics[k] for k in sorted(metrics)])
            if config.checkpoint_every and step % config.checkpoint_every == 0:
                last_ckpt = save(step)
            w = config.early_stop_window
            if w and step % w == 0 and len(history) >= 2 * w:
                prev = float(np.mean(history[-2 * w : -w]))
                cur = float(np.mean(history[-w:]))
                if prev - cur < config.early_stop_tol:
                    log.info("early stop at step %d (moving average %.6f -> %.6f)", step, prev, cur)
                    stopped_early = True
                    break
        if last_ckpt is None or last_ckpt.name != checkpoint_name(step):
            last_ckpt = save(step)
    finally:
        loss_log.close()
        if eval_log is not None:
            eval_log.close()
    return TrainResult(last_ckpt, step, rows, stopped_early)


def texture_refine(
    checkpoint,
    records: Sequence[InstanceRecord],
    steps: int,
    out_dir,
    *,
    learning_rate: float = 1e-4,
    batch_images: int = 8,
    seed: int = 0,
    weights: LossWeights = LossWeights(),
) -> TrainResult:
    """Fine-tune ``f_a``, ``f_l`` and ``f_c`` on single images; all else frozen.

    Each image of the dataset becomes an M=1 instance, so only the
    reconstruction and same-view albedo terms are active.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    net, meta, _ = load_checkpoint(checkpoint)
    torch.manual_seed(seed)
    for name in MODULE_NAMES:
        getattr(net, name).requires_grad_(name in REFINE_MODULES)
    params = [p for name in REFINE_MODULES for p in getattr(net, name).parameters()]
    cfg = TrainConfig(learning_rate=learning_rate, batch_instances=batch_images, seed=seed, m_views=1, weights=weights)
    optimizer = make_optimizer(params, cfg)
    features = PerceptualFeatures()
    singles = [
        InstanceRecord(f"{r.instance_id}/{k}", [p], "fixed_set")
        for r in records
        for k, p in enumerate(r.image_paths)
    ]
    store = ImageStore(net.config.image_size)
    stream = batch_stream(singles, cfg)
    refine_weights = replace(weights, lambda_cross=0.0)
    rows = []
    log_csv = _CsvLog(out / "refine_log.csv", ("step",) + LOSS_FIELDS, append=False)
    try:
        for step in range(1, steps + 1):
            samples = next(stream)
            images = store.batch(samples)
            bd = train_step(net, optimizer, features, images, refine_weights, [s.instance_id for s in samples])
            vals = [float(getattr(bd, k)) for k in LOSS_FIELDS]
            log_csv.row([step] + vals)
            rows.append(dict(zip(("step",) + LOSS_FIELDS, [step] + vals)))
    finally:
        log_csv.close()
    net.requires_grad_(True)
    base_step = int(meta.get("step", 0))
    path = save_checkpoint(out / f"refined_{checkpoint_name(base_step)}", net, {"step": base_step, "refine_steps": steps})
    return TrainResult(path, steps, rows)
