"""End-to-end acceptance runs A1-A7.

Each test records one PASS/FAIL line (shown in the terminal summary). A4 and
A5 share one desk-scale training run; set ``LEMUL_ACCEPTANCE_CACHE`` to a
directory to reuse that run between sessions.
"""

import hashlib
import json
import math
import os
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
import pytest
import torch

from lemul.data import SyntheticSpec, generate_synthetic, load_groundtruth, open_dataset, read_image
from lemul.decomposer import ConfidencePair, DecomposerConfig, MODULE_NAMES, load_checkpoint
from lemul.losses import (
    LossContext,
    LossWeights,
    PerceptualFeatures,
    ViewOutputs,
    albedo_losses,
    albedo_smoothness,
    combine,
    cross_view_loss,
    l1_conf_loss,
    perceptual_conf_loss,
    pivot_pairs,
    total_loss,
)
from lemul.metrics import (
    evaluate_baseline,
    evaluate_dataset,
    mad,
    mean_depth_baseline,
    null_depth_baseline,
    side,
)
from lemul.render import (
    CameraIntrinsics,
    CanonicalModel,
    Lighting,
    Pose,
    interpolate,
    light_direction,
    normals_from_depth,
    euler_to_matrix,
    rasterize,
    render,
    shade,
    transform_points,
    unproject,
    warp,
)
from lemul.train import TrainConfig, forward_views, texture_refine, train

D = torch.float64
CAM8 = CameraIntrinsics(10.0, 8, (0.9, 1.1))
FD_STEP = 1e-4
FD_TOL = 1e-3


# ---------------------------------------------------------------------------
# A1: analytic vs central finite differences


def _jacobian_check(fn, inputs, valid_fn=None):
    """Relative error ``|J_fd - J| / |J|`` over the entries ``valid_fn`` keeps.

    ``fn`` maps the input tensors to ``(outputs, aux)``; ``valid_fn(aux_base,
    aux_plus, aux_minus)`` returns a boolean mask shaped like ``outputs`` that
    drops entries whose perturbation crosses a non-smooth point.
    """
    inputs = [x.detach().clone() for x in inputs]
    base_out, base_aux = fn(*inputs)
    analytic = torch.autograd.functional.jacobian(lambda *xs: fn(*xs)[0], tuple(inputs))
    num, den = 0.0, 0.0
    n_cols = 0
    for k, x in enumerate(inputs):
        jac = analytic[k].reshape(base_out.numel(), -1)
        for i in range(x.numel()):
            plus, minus = x.clone(), x.clone()
            plus.view(-1)[i] += FD_STEP
            minus.view(-1)[i] -= FD_STEP
            args_p = [plus if j == k else inputs[j] for j in range(len(inputs))]
            args_m = [minus if j == k else inputs[j] for j in range(len(inputs))]
            with torch.no_grad():
                out_p, aux_p = fn(*args_p)
                out_m, aux_m = fn(*args_m)
            fd = ((out_p - out_m) / (2 * FD_STEP)).reshape(-1)
            keep = torch.ones_like(fd, dtype=torch.bool)
            if valid_fn is not None:
                keep = valid_fn(base_aux, aux_p, aux_m).reshape(-1)
            num += float(((fd - jac[:, i]) * keep).pow(2).sum())
            den += float((jac[:, i] * keep).pow(2).sum())
            n_cols += 1
    return math.sqrt(num) / max(math.sqrt(den), 1e-300), n_cols


def _bumpy_depth(seed, s=8, amp=0.02):
    gen = torch.Generator().manual_seed(seed)
    c = torch.linspace(-1, 1, s, dtype=D)
    y, x = torch.meshgrid(c, c, indexing="ij")
    cx, cy = (0.6 * (torch.rand(2, generator=gen, dtype=D) - 0.5)).tolist()
    bump = amp * torch.exp(-((x - cx) ** 2 + (y - cy) ** 2) / 0.4)
    noise = 0.002 * torch.rand(s, s, generator=gen, dtype=D)
    return (1.0 + bump + noise)[None]


def _albedo(seed, s=8):
    gen = torch.Generator().manual_seed(seed + 1000)
    return 0.2 + 0.5 * torch.rand(1, 3, s, s, generator=gen, dtype=D)


A1_LIGHT = torch.tensor([[0.25, 0.6, 0.3, -0.2]], dtype=D)
A1_POSE = torch.tensor([[0.08, -0.12, 0.04, 0.002, -0.001, 0.01]], dtype=D)


def _fragments(depth, pose):
    b, h, w = depth.shape
    verts = transform_points(unproject(depth, CAM8).reshape(b, h * w, 3), Pose.from_tensor(pose), CAM8)
    return rasterize(verts, (h, w), CAM8)


def _render_aux(depth, pose, light):
    """Face ownership, soft coverage and n.l per pixel, used to spot non-smooth entries."""
    with torch.no_grad():
        frags = _fragments(depth, pose)
        rot = euler_to_matrix(pose[:, :3])
        normals = normals_from_depth(depth, CAM8).reshape(1, -1, 3) @ rot.transpose(1, 2)
        n_v = torch.nn.functional.normalize(interpolate(frags, normals, (8, 8)), dim=-1, eps=1e-12)
        cos = (n_v * light_direction(Lighting.from_tensor(light))[:, None, None, :]).sum(-1)
    return {"face": frags.face_idx, "alpha": frags.alpha, "cos": cos, "mask": frags.mask}


def _smooth_pixels(base, plus, minus):
    keep = torch.ones_like(base["mask"])
    for aux in (base, plus, minus):
        a = aux["alpha"]
        keep &= aux["face"] == base["face"]
        keep &= (a < 1e-12) | (a > 1 - 1e-12) | ~aux["mask"]
        keep &= (aux["cos"].abs() > 1e-6) | ~aux["mask"]
    return keep


def _a1_render():
    depth, albedo = _bumpy_depth(0), _albedo(0)

    def fn(d, a, l, p):
        view = render(CanonicalModel(d, a), Lighting.from_tensor(l), Pose.from_tensor(p), CAM8)
        return view.image, _render_aux(d, p, l)

    def valid(b, p, m):
        return _smooth_pixels(b, p, m)[:, None].expand(1, 3, 8, 8)

    return _jacobian_check(fn, [depth, albedo, A1_LIGHT, A1_POSE], valid)


def _a1_warp():
    depth, albedo = _bumpy_depth(1), _albedo(1)

    def fn(d, a, p):
        zbuf, alb, _ = warp(CanonicalModel(d, a), Pose.from_tensor(p), CAM8)
        return torch.cat([zbuf[:, None], alb], 1), _render_aux(d, p, A1_LIGHT)

    def valid(b, p, m):
        keep = _smooth_pixels(b, p, m)
        return keep[:, None].expand(1, 4, 8, 8)

    return _jacobian_check(fn, [depth, albedo, A1_POSE], valid)


def _a1_shade():
    gen = torch.Generator().manual_seed(2)
    albedo = 0.2 + 0.5 * torch.rand(1, 3, 8, 8, generator=gen, dtype=D)
    normals = torch.nn.functional.normalize(torch.randn(1, 8, 8, 3, generator=gen, dtype=D) + torch.tensor([0, 0, 2.0], dtype=D), dim=-1)

    def fn(a, n, l):
        cos = (n * light_direction(Lighting.from_tensor(l))[:, None, None, :]).sum(-1)
        return shade(a, n, Lighting.from_tensor(l)), {"cos": cos.detach()}

    def valid(b, p, m):
        # the max(0, n.l) kink
        keep = b["cos"].abs() > 1e-3
        keep &= ((p["cos"] > 0) == (b["cos"] > 0)) & ((m["cos"] > 0) == (b["cos"] > 0))
        return keep[:, None].expand(1, 3, 8, 8)

    return _jacobian_check(fn, [albedo, normals, A1_LIGHT], valid)


def _a1_l1():
    gen = torch.Generator().manual_seed(3)
    image = torch.rand(1, 3, 8, 8, generator=gen, dtype=D)
    # residuals kept away from the |x| kink at 0
    sign = torch.where(torch.rand(1, 3, 8, 8, generator=gen, dtype=D) > 0.5, 1.0, -1.0)
    prime = image + sign * (0.05 + 0.2 * torch.rand(1, 3, 8, 8, generator=gen, dtype=D))
    conf = 0.5 + torch.rand(1, 8, 8, generator=gen, dtype=D)
    return _jacobian_check(lambda x, c: (l1_conf_loss(image, x, c), None), [prime, conf])


def _a1_pe():
    gen = torch.Generator().manual_seed(4)
    f = torch.randn(1, 8, 2, 2, generator=gen, dtype=D)
    g = torch.randn(1, 8, 2, 2, generator=gen, dtype=D)
    conf = 0.5 + torch.rand(1, 2, 2, generator=gen, dtype=D)
    return _jacobian_check(lambda x, c: (perceptual_conf_loss(f, x, c), None), [g, conf])


def _a1_albedo():
    gen = torch.Generator().manual_seed(5)
    image = torch.rand(1, 3, 8, 8, generator=gen, dtype=D)
    albedo = torch.rand(1, 3, 8, 8, generator=gen, dtype=D)
    depth = 0.9 + 0.2 * torch.rand(1, 8, 8, generator=gen, dtype=D)
    mask = torch.rand(1, 8, 8, generator=gen) > 0.2
    # sigma_c widened so the image-edge weights are not all vanishingly small
    w = LossWeights(sigma_c=0.3, sigma_d=0.05)
    return _jacobian_check(lambda a, d: (albedo_smoothness(image, a, d, mask, w), None), [albedo, depth])


def test_a1_gradient_suite(acceptance):
    start = time.monotonic()
    results = {
        "shade": _a1_shade(),
        "render": _a1_render(),
        "warp": _a1_warp(),
        "l1_conf_loss": _a1_l1(),
        "perceptual_conf_loss": _a1_pe(),
        "albedo_smoothness": _a1_albedo(),
    }
    elapsed = time.monotonic() - start
    worst = max(err for err, _ in results.values())
    ok = worst < FD_TOL and elapsed < 120
    detail = ", ".join(f"{k} {err:.1e}" for k, (err, _) in results.items())
    acceptance("A1", ok, f"max rel err {worst:.2e} < {FD_TOL:g} [{detail}] in {elapsed:.0f}s")
    assert ok


# ---------------------------------------------------------------------------
# A2: exact loss identities

CAM16 = CameraIntrinsics(10.0, 16)


def _ones(s, value=1.0):
    return ConfidencePair(torch.full((1, s, s), value, dtype=D), torch.full((1, s // 4, s // 4), value, dtype=D))


def _instance(m=2):
    c = torch.linspace(-1, 1, 16, dtype=D)
    y, x = torch.meshgrid(c, c, indexing="ij")
    depth = (1.0 + 0.02 * torch.exp(-(x**2 + y**2) / 0.3))[None]
    albedo = 0.3 + 0.4 * torch.rand(1, 3, 16, 16, generator=torch.Generator().manual_seed(0), dtype=D)
    lights = [Lighting.from_tensor(torch.tensor([[0.3, 0.6, 0.1 * k, -0.2]], dtype=D)) for k in range(m)]
    poses = [Pose.from_tensor(torch.tensor([[0.0, 0.1 * k, 0.0, 0.0, 0.0, 0.0]], dtype=D)) for k in range(m)]
    images = [render(CanonicalModel(depth, albedo), lights[k], poses[k], CAM16).image for k in range(m)]
    return ViewOutputs(
        images=images,
        depth=[depth.clone() for _ in range(m)],
        albedo=[albedo.clone() for _ in range(m)],
        light=lights,
        pose=poses,
        conf=[_ones(16) for _ in range(m)],
        cross_conf={p: _ones(16) for p in pivot_pairs(m)},
    )


def test_a2_loss_identities(acceptance):
    checks = {}
    img = torch.rand(1, 3, 16, 16, dtype=D)
    checks["l1 zero at perfect reconstruction, c=1"] = float(l1_conf_loss(img, img, torch.ones(1, 16, 16, dtype=D))) == 0.0
    feat = torch.rand(1, 8, 4, 4, dtype=D)
    checks["pe zero at perfect reconstruction, c=1"] = float(perceptual_conf_loss(feat, feat, torch.ones(1, 4, 4, dtype=D))) == 0.0
    e = torch.full((1, 16, 16), math.e, dtype=D)
    checks["ln c term = 1 at c=e"] = float(l1_conf_loss(img, img, e)) == 1.0
    const = torch.full((1, 3, 16, 16), 0.4, dtype=D)
    depth = 0.9 + 0.2 * torch.rand(1, 16, 16, dtype=D)
    mask = torch.ones(1, 16, 16, dtype=torch.bool)
    checks["albedo loss 0 on constant albedo"] = float(albedo_smoothness(img, const, depth, mask)) == 0.0

    out = _instance()
    ctx = LossContext(out, CAM16, PerceptualFeatures())
    ctx.prefetch([(0, 0), (1, 1), (0, 1), (1, 0)])
    checks["swapped render bit-equals same-view render"] = torch.equal(ctx.render(1, 0).image, ctx.render(0, 0).image) and torch.equal(
        ctx.render(0, 1).image, ctx.render(1, 1).image
    )
    w = LossWeights()
    bd = total_loss(out, CAM16, PerceptualFeatures(), w)
    again = combine(bd.rec, bd.rec_cross, bd.al, bd.al_cross, w)
    manual = bd.rec + w.lambda_cross * bd.rec_cross + w.lambda_al * (bd.al + w.lambda_cross * bd.al_cross)
    checks["recombination bit-exact"] = torch.equal(bd.total, again.total) and torch.equal(bd.total, manual)
    cross, _ = cross_view_loss(out, ctx, w)
    checks["cross-view zero for identical views"] = float(cross) == 0.0
    failed = [k for k, v in checks.items() if not v]
    acceptance("A2", not failed, f"{len(checks) - len(failed)}/{len(checks)} identities exact" + (f"; failed: {failed}" if failed else ""))
    assert not failed


# ---------------------------------------------------------------------------
# A3: single-instance overfit


def test_a3_overfit_single_instance(tmp_path, acceptance):
    root = tmp_path / "data"
    generate_synthetic(SyntheticSpec(count=1, seed=11, views_per_instance=2), root)
    records = open_dataset(root)
    cfg = TrainConfig(learning_rate=1e-4, batch_instances=1, max_steps=500, m_views=2, seed=0, early_stop_window=0, checkpoint_every=0)
    assert cfg.weights == LossWeights(lambda_pe=1.0, lambda_cross=0.5, lambda_al=0.5)
    start = time.monotonic()
    net_cfg = DecomposerConfig(seed=0)
    step0 = _loss_at(net_cfg, records, cfg)
    result = train(cfg, records, tmp_path / "run", net_config=net_cfg)
    elapsed = time.monotonic() - start
    net = load_checkpoint(result.checkpoint)[0].eval()
    final = _loss_at(net, records, cfg)
    images = torch.stack([read_image(p) for p in records[0].image_paths])
    with torch.no_grad():
        dec = net.decompose(images)
        view = render(dec.model, dec.light, dec.pose, net.camera, rot_bound=net.config.rot_bound, trans_bound=net.config.trans_bound)
    mae = float((view.image - images).abs().mean())
    ok = final < 0.5 * step0 and mae < 0.05 and elapsed < 900
    acceptance("A3", ok, f"total loss {step0:.4f} -> {final:.4f} (ratio {final / step0:.3f} < 0.5), reconstruction MAE {mae:.4f} < 0.05, {elapsed:.0f}s")
    assert ok


def _loss_at(net_or_cfg, records, cfg):
    from lemul.decomposer import Decomposer
    from lemul.data import ImageStore, sample_epoch

    net = Decomposer(net_or_cfg) if isinstance(net_or_cfg, DecomposerConfig) else net_or_cfg
    net.eval()
    plan = sample_epoch(records, cfg.m_views, np.random.default_rng(0))
    images = ImageStore().batch(plan)
    with torch.no_grad():
        out = forward_views(net, images)
        bd = total_loss(out, net.camera, PerceptualFeatures(), cfg.weights, rot_bound=net.config.rot_bound, trans_bound=net.config.trans_bound)
    return float(bd.total)


# ---------------------------------------------------------------------------
# A4 / A5: desk-scale training run

A4_TRAIN = SyntheticSpec(count=200, seed=0, views_per_instance=6)
A4_TEST = SyntheticSpec(count=25, seed=1, views_per_instance=2)
A4_NET = DecomposerConfig(base_channels=16, seed=0)
A4_CONFIG = TrainConfig(batch_instances=4, max_steps=4000, m_views=3, seed=0, early_stop_window=0, checkpoint_every=1000)
A4_BUDGET_S = 4 * 3600


def _a4_key():
    blob = json.dumps([asdict(A4_TRAIN), A4_NET.to_dict(), A4_CONFIG.to_dict()], sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@pytest.fixture(scope="session")
def a4_run(tmp_path_factory):
    cache = os.environ.get("LEMUL_ACCEPTANCE_CACHE")
    root = Path(cache) / f"a4_{_a4_key()}" if cache else tmp_path_factory.mktemp("a4")
    done = root / "done.json"
    if not done.exists():
        generate_synthetic(A4_TRAIN, root / "train")
        generate_synthetic(A4_TEST, root / "test")
        start = time.monotonic()
        result = train(A4_CONFIG, open_dataset(root / "train"), root / "run", net_config=A4_NET)
        elapsed = time.monotonic() - start
        done.write_text(json.dumps({"checkpoint": result.checkpoint.name, "steps": result.steps, "seconds": elapsed}))
    info = json.loads(done.read_text())
    return root, root / "run" / info["checkpoint"], info


def test_a4_beats_constant_depth_baselines(a4_run, acceptance):
    root, ckpt, info = a4_run
    net = load_checkpoint(ckpt)[0].eval()
    gts = load_groundtruth(root / "test")
    cam = net.camera
    model = evaluate_dataset(net, gts)
    null = evaluate_baseline(null_depth_baseline(cam), gts, cam)
    mean = evaluate_baseline(mean_depth_baseline(gts, cam), gts, cam)
    ok_mad = model.mad_mean < 0.7 * null.mad_mean
    ok_side = model.side_mean < mean.side_mean
    ok_budget = info["steps"] <= 20000 and info["seconds"] <= A4_BUDGET_S
    ok = ok_mad and ok_side and ok_budget and model.n_images == 50
    acceptance(
        "A4",
        ok,
        f"MAD {model.mad_mean:.2f} vs 0.7 x null {0.7 * null.mad_mean:.2f} (null {null.mad_mean:.2f}); "
        f"SIDE {model.side_mean:.5f} vs mean-depth {mean.side_mean:.5f}; {info['steps']} steps in {info['seconds'] / 3600:.2f} h",
    )
    assert ok


def _heldout_l1(net, gts):
    total = 0.0
    for gt in gts:
        img = read_image(gt.image_path)[None]
        with torch.no_grad():
            dec = net.decompose(img)
            view = render(dec.model, dec.light, dec.pose, net.camera, rot_bound=net.config.rot_bound, trans_bound=net.config.trans_bound)
        total += float((view.image - img).abs().mean())
    return total / len(gts)


def test_a5_texture_refinement_contract(a4_run, tmp_path, acceptance):
    root, ckpt, _ = a4_run
    refined = texture_refine(ckpt, open_dataset(root / "train"), 300, tmp_path, batch_images=8)
    before = load_checkpoint(ckpt)[0].eval()
    after = load_checkpoint(refined.checkpoint)[0].eval()
    frozen_same = all(
        torch.equal(a, b)
        for name in ("f_d", "f_v", "f_cc")
        for a, b in zip(getattr(before, name).state_dict().values(), getattr(after, name).state_dict().values())
    )
    gts = load_groundtruth(root / "test")
    l1_before, l1_after = _heldout_l1(before, gts), _heldout_l1(after, gts)
    ok = frozen_same and l1_after <= 1.01 * l1_before
    acceptance("A5", ok, f"f_d/f_v/f_cc bit-unchanged: {frozen_same}; held-out L1 {l1_before:.5f} -> {l1_after:.5f} (limit +1%)")
    assert ok


# ---------------------------------------------------------------------------
# A6: metric oracles


def _side_loop(a, b):
    vals = [math.log(a[i, j]) - math.log(b[i, j]) for i in range(a.shape[0]) for j in range(a.shape[1])]
    mean = sum(vals) / len(vals)
    return math.sqrt(sum((v - mean) ** 2 for v in vals) / len(vals))


def _normal_loop(d, cam):
    s = d.shape[0]
    f, c = cam.focal, cam.center

    def point(i, j):
        return [(j - c) / f * d[i, j], (i - c) / f * d[i, j], d[i, j]]

    out = [[None] * s for _ in range(s)]
    for i in range(s):
        for j in range(s):
            jl, jr, il, ir = max(j - 1, 0), min(j + 1, s - 1), max(i - 1, 0), min(i + 1, s - 1)
            pl, pr, pu, pd = point(i, jl), point(i, jr), point(il, j), point(ir, j)
            du = [(pr[k] - pl[k]) / (jr - jl) for k in range(3)]
            dv = [(pd[k] - pu[k]) / (ir - il) for k in range(3)]
            n = [du[1] * dv[2] - du[2] * dv[1], du[2] * dv[0] - du[0] * dv[2], du[0] * dv[1] - du[1] * dv[0]]
            norm = math.sqrt(sum(v * v for v in n))
            out[i][j] = [v / norm for v in n]
    return out


def _mad_loop(a, b, cam):
    na, nb = _normal_loop(a, cam), _normal_loop(b, cam)
    total = 0.0
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            dot = sum(na[i][j][k] * nb[i][j][k] for k in range(3))
            total += math.degrees(math.acos(max(-1.0, min(1.0, dot))))
    return total / a.size


def test_a6_metric_oracles(acceptance):
    cam = CameraIntrinsics(10.0, 4)
    rng = np.random.default_rng(2024)
    worst_side, worst_mad, worst_scale = 0.0, 0.0, 0.0
    for _ in range(100):
        a = rng.uniform(0.9, 1.1, (4, 4))
        b = rng.uniform(0.9, 1.1, (4, 4))
        ta, tb = torch.from_numpy(a), torch.from_numpy(b)
        worst_side = max(worst_side, abs(side(ta, tb) - _side_loop(a, b)))
        worst_mad = max(worst_mad, abs(mad(ta, tb, cam) - _mad_loop(a, b, cam)))
        k = rng.uniform(0.1, 10.0)
        worst_scale = max(worst_scale, side(k * ta, ta))
    ok = worst_side < 1e-9 and worst_mad < 1e-9 and worst_scale < 1e-12
    acceptance("A6", ok, f"max |SIDE - loop| {worst_side:.1e}, max |MAD - loop| {worst_mad:.1e} (< 1e-9); max SIDE(k d, d) {worst_scale:.1e} (< 1e-12)")
    assert ok


# ---------------------------------------------------------------------------
# A7: flip-pair symmetry

A7_SPEC = SyntheticSpec(count=1, seed=7, views_per_instance=4, symmetric=True)
A7_NET = DecomposerConfig(base_channels=16, seed=0)
A7_CONFIG = TrainConfig(batch_instances=4, max_steps=2000, m_views=2, seed=0, early_stop_window=0, checkpoint_every=0)


def _asymmetry(net, paths):
    """Mean over images of ``max |d - mirror(d)| / (max d - min d)`` of the canonical depth,
    plus the same ratio with the mean instead of the max (reported only)."""
    images = torch.stack([read_image(p) for p in paths])
    with torch.no_grad():
        depth = net.decompose(images).depth
    dev = (depth - depth.flip(-1)).abs().flatten(1)
    span = depth.flatten(1).max(1).values - depth.flatten(1).min(1).values
    return float((dev.max(1).values / span).mean()), float((dev.mean(1) / span).mean())


def test_a7_flip_pairs_give_symmetric_depth(tmp_path, acceptance):
    generate_synthetic(A7_SPEC, tmp_path / "data")
    records = open_dataset(tmp_path / "data", "flip_pair")
    assert all(r.regime == "flip_pair" for r in records)
    paths = [r.image_paths[0] for r in records]
    init, _ = _asymmetry(load_checkpoint(train(TrainConfig(max_steps=0), records, tmp_path / "init", net_config=A7_NET).checkpoint)[0].eval(), paths)
    result = train(A7_CONFIG, records, tmp_path / "run", net_config=A7_NET)
    final, final_mean = _asymmetry(load_checkpoint(result.checkpoint)[0].eval(), paths)
    ok = final < 0.05
    acceptance(
        "A7",
        ok,
        f"canonical depth asymmetry {final:.4f} of its range (< 0.05); {init:.4f} at initialisation; mean deviation {final_mean:.4f}",
    )
    assert ok
