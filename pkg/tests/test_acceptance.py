"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The two training criteria (VAE overfit and forecasting vs Copy&Paste) train real models on CPU.
Trained weights and the measured training time are cached under ``.cache/acceptance`` (override
with ``DOME_ACCEPTANCE_CACHE``); set ``DOME_ACCEPTANCE_RETRAIN=1`` to ignore the cache.
"""

import json
import math
import os
import time
from contextlib import contextmanager
from pathlib import Path

import networkx as nx
import numpy as np
import pytest
import torch
import torch.nn.functional as F

from dome import numerics as nxs
from dome.checkpoint import load_vae, load_world, save_vae, save_world
from dome.cli import main
from dome.diffusion import inject_context, make_schedule, predict_x0, q_sample, sample_loop
from dome.dit import DitConfig, SpatioTemporalDiT, condition_mask, masked_loss
from dome.occupancy import SYNTHETIC_CLASSES, ClassEmbedding, compute_metrics, flatten_bev, get_preset
from dome.synthetic import gen_synthetic
from dome.trajectory import (
    NoPath, aggregate_point_cloud, astar, extract_occupancy, make_pose, path_cost, resample_scene,
    trajectory_stats,
)
from dome.vae import REFERENCE_VAE, OccVAE, VaeConfig, kl_divergence, lovasz_softmax, reconstruct, train_vae, vae_loss
from dome.world import WorldModel, evaluate_forecasts, required_poses, rollout, train_world_model

RESULTS = []

CACHE = Path(os.environ.get("DOME_ACCEPTANCE_CACHE", Path(__file__).resolve().parents[1] / ".cache" / "acceptance"))
RETRAIN = os.environ.get("DOME_ACCEPTANCE_RETRAIN") == "1"


@contextmanager
def criterion(number: int, title: str):
    """Record and print one PASS/FAIL line; any assertion inside marks the criterion failed."""
    detail = {}
    try:
        yield detail
    except BaseException as exc:
        line = f"criterion {number} FAIL: {title} | {format_detail(detail)} | {type(exc).__name__}: {exc}"
        RESULTS.append(line)
        print(line)
        raise
    line = f"criterion {number} PASS: {title} | {format_detail(detail)}"
    RESULTS.append(line)
    print(line)


def format_detail(detail: dict) -> str:
    return ", ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in detail.items())


def cached_json(path: Path):
    return None if RETRAIN or not path.exists() else json.loads(path.read_text())


# --------------------------------------------------------------------------- #
# 1. gradient suite


def gradient_cases(rng: np.random.Generator):
    """Scalar closures over every differentiable operation, shapes drawn at random with <= 64 elements."""
    def r(*shape):
        assert math.prod(shape) <= 64
        return torch.from_numpy(rng.normal(size=shape)).requires_grad_(True)

    def fixed(*shape):
        return torch.from_numpy(rng.normal(size=shape))

    d = lambda lo, hi: int(rng.integers(lo, hi + 1))
    cases = []
    m, k, n = d(2, 5), d(2, 5), d(2, 5)
    a, b = r(m, k), r(k, n)
    cases.append(("matmul", {"a": a, "b": b}, lambda: nxs.matmul(a, b).sin().sum()))
    m, n = d(2, 6), d(2, 6)
    x, y = r(m, n), r(n)
    cases.append(("add", {"x": x, "y": y}, lambda: (nxs.add(x, y) ** 2).sum()))
    x2, y2 = r(m, n), r(m, n)
    cases.append(("mul", {"x": x2, "y": y2}, lambda: nxs.mul(x2, y2).tanh().sum()))
    c1, c2 = r(m, d(1, 4)), r(m, d(1, 4))
    cases.append(("concat", {"a": c1, "b": c2}, lambda: (nxs.concat([c1, c2], dim=1) ** 3).sum()))
    s = r(d(3, 6), d(2, 6))
    lo = d(0, 1)
    cases.append(("slice", {"x": s}, lambda: (nxs.slice_(s, 0, lo, lo + 2) ** 2).sum()))
    p, q = d(2, 4), d(2, 4)
    rs, wr = r(p, 2 * q), fixed(2 * p, q)
    cases.append(("reshape", {"x": rs}, lambda: (nxs.reshape(rs, (2 * p, q)) * wr).sin().sum()))
    tr, wt = r(p, q), fixed(q, p)
    cases.append(("transpose", {"x": tr}, lambda: (nxs.transpose(tr, 0, 1) * wt).sin().sum()))
    table = r(d(3, 8), d(2, 6))
    ids = torch.from_numpy(rng.integers(0, table.shape[0], d(2, 6)))
    cases.append(("embedding_lookup", {"E": table}, lambda: nxs.embedding_lookup(table, ids).pow(2).sum()))
    fi, fo = d(2, 6), d(2, 6)
    lx, lw, lb = r(d(2, 5), fi), r(fo, fi), r(fo)
    cases.append(("linear", {"x": lx, "w": lw, "b": lb}, lambda: nxs.linear(lx, lw, lb).tanh().sum()))
    rows, feat = d(2, 5), d(3, 8)
    nxx, nw, nb, wn = r(rows, feat), r(feat), r(feat), fixed(rows, feat)
    cases.append(("layer_norm", {"x": nxx, "w": nw, "b": nb}, lambda: (nxs.layer_norm(nxx, nw, nb) * wn).sum()))
    sm, ws = r(rows, feat), fixed(rows, feat)
    cases.append(("softmax", {"x": sm}, lambda: (nxs.softmax(sm) * ws).sum()))
    g = r(d(8, 40))
    cases.append(("gelu", {"x": g}, lambda: nxs.gelu(g).pow(2).sum()))
    hw = d(4, 5)
    cx, cw, cb = r(1, 2, hw, hw), r(3, 2, 3, 3), r(3)
    cases.append(("conv2d", {"x": cx, "w": cw, "b": cb}, lambda: nxs.conv2d(cx, cw, cb, stride=2, padding=1).sin().sum()))
    vx, vw = r(1, 2, 3, 3, 3), r(2, 2, 2, 2, 2)
    cases.append(("conv3d", {"x": vx, "w": vw}, lambda: nxs.conv3d(vx, vw, stride=1).sin().sum()))
    tx, tw, tb = r(1, 2, 2, 2, 2), r(2, 3, 2, 2, 2), r(3)
    cases.append(("conv_transpose3d", {"x": tx, "w": tw, "b": tb},
                  lambda: nxs.conv_transpose3d(tx, tw, tb, stride=2).pow(2).sum()))
    heads = d(1, 2)
    qq = r(2, d(2, 4), 2 * heads)
    kk2, vv2 = r(2, qq.shape[1], 2 * heads), r(2, qq.shape[1], 2 * heads)
    cases.append(("attention", {"q": qq, "k": kk2, "v": vv2},
                  lambda: nxs.scaled_dot_product_attention(qq, kk2, vv2, num_heads=heads).sin().sum()))

    # flatten_bev over the class embedding
    emb = ClassEmbedding(6, 2)
    labels = torch.from_numpy(rng.integers(0, 6, (1, 3, 3, 2)))
    wb = fixed(1, 3, 3, 4)
    cases.append(("flatten_bev", {"E": emb.weight}, lambda: (flatten_bev(labels, emb) * wb).sum()))

    # vae_loss components on voxel logits and posterior statistics
    nvox, ncls = d(6, 12), 4
    logits = r(nvox, ncls)
    target = torch.from_numpy(rng.integers(0, ncls, nvox))
    cases.append(("cross_entropy", {"logits": logits}, lambda: F.cross_entropy(logits, target)))
    cases.append(("lovasz_softmax", {"logits": logits},
                  lambda: lovasz_softmax(F.softmax(logits, dim=-1), target)))
    logsig = r(d(4, 16))
    mu2 = r(logsig.shape[0])
    cases.append(("kl", {"mu": mu2, "log_sigma": logsig}, lambda: kl_divergence(mu2, logsig.exp())))
    cases.append(("vae_loss", {"logits": logits, "mu": mu2, "log_sigma": logsig},
                  lambda: vae_loss(target, logits, mu2, logsig.exp(), beta=0.3).total))

    # VAE end to end, every parameter tensor of <= 64 elements
    vae = OccVAE(VaeConfig(grid_dims=(4, 4, 2), num_classes=6, emb_dim=2, latent_channels=2, downsample=2,
                           width=4, coarse_depth=1, attn_heads=1))
    vlabels = torch.from_numpy(rng.integers(0, 6, (1, 4, 4, 2)))
    veps = fixed(1, 2, 2, 2)

    def vae_total():
        lo_, m_, s_ = vae(vlabels, veps)
        return vae_loss(vlabels, lo_, m_, s_, beta=0.5).total

    cases.append(("occ_vae", {n_: p_ for n_, p_ in vae.named_parameters() if p_.numel() <= 64}, vae_total))

    # st-dit forward + masked_loss, with nonzero adaLN so every path carries gradient
    dit = SpatioTemporalDiT(DitConfig(n_f=3, latent_hw=(2, 2), channels=2, hidden=8, heads=2, depth=1,
                                      freq_dim=8, L_xy=2, L_yaw=1))
    with torch.no_grad():
        for p_ in dit.parameters():
            p_.copy_(torch.from_numpy(rng.normal(size=tuple(p_.shape))) * 0.3)
    z = r(1, 3, 2, 2, 2)
    eps = fixed(1, 3, 2, 2, 2)
    deltas = fixed(1, 3, 3)
    mask = condition_mask(3, 1)
    params = {n_: p_ for n_, p_ in dit.named_parameters() if p_.numel() <= 64}
    params["z"] = z
    cases.append(("st_dit_masked_loss", params, lambda: masked_loss(dit(z, 77, deltas), eps, mask)))
    return cases


def test_criterion_1_gradient_suite(float64):
    with criterion(1, "finite-difference gradient suite, 64-bit, rel err < 1e-5, < 2 min") as info:
        t0 = time.perf_counter()
        worst, failures, n_cases = 0.0, [], 0
        for seed in range(3):
            for name, params, f in gradient_cases(np.random.default_rng(seed)):
                assert all(p.dtype == torch.float64 for p in params.values())
                rep = nxs.grad_check(f, params, h=1e-6)
                worst = max(worst, rep.max_rel_error)
                n_cases += 1
                if rep.max_rel_error >= 1e-5:
                    failures.append((seed, name, rep.max_rel_error))
        elapsed = time.perf_counter() - t0
        info.update(cases=n_cases, worst_rel_err=worst, seconds=elapsed)
        assert not failures, failures
        assert elapsed < 120


# --------------------------------------------------------------------------- #
# 2. VAE overfit

VAE_OVERFIT = {"data_seed": 0, "n_scenes": 8, "epochs": 30, "batch_size": 8, "lr": 1e-3, "seed": 0}


def overfit_vae():
    d = CACHE / "vae_overfit"
    meta = cached_json(d / "meta.json")
    if meta and meta.get("setup") == VAE_OVERFIT and (d / "vae.ckpt").exists():
        return load_vae(d / "vae.ckpt"), meta["seconds"]
    scenes = gen_synthetic(VAE_OVERFIT["data_seed"], VAE_OVERFIT["n_scenes"])
    frames = np.stack([g.labels for s in scenes for g in s.grids])
    t0 = time.perf_counter()
    res = train_vae(frames, VaeConfig(), epochs=VAE_OVERFIT["epochs"], lr=VAE_OVERFIT["lr"],
                    batch_size=VAE_OVERFIT["batch_size"], seed=VAE_OVERFIT["seed"])
    seconds = time.perf_counter() - t0
    d.mkdir(parents=True, exist_ok=True)
    save_vae(res.model, d / "vae.ckpt")
    (d / "meta.json").write_text(json.dumps({"setup": VAE_OVERFIT, "seconds": seconds}))
    return res.model, seconds


@pytest.mark.slow
def test_criterion_2_vae_overfit():
    with criterion(2, "VAE overfit on 8 scenes: mIoU >= 0.95, IoU >= 0.97 within 30 min; reference ratio 64") as info:
        ref = VaeConfig(**{**REFERENCE_VAE.to_dict(), "latent_channels": 16})
        info["reference_latent"] = "x".join(map(str, ref.latent_shape))
        info["compression_ratio"] = ref.compression_ratio
        assert ref.compression_ratio == 64
        vae, seconds = overfit_vae()
        scenes = gen_synthetic(VAE_OVERFIT["data_seed"], VAE_OVERFIT["n_scenes"])
        frames = np.stack([g.labels for s in scenes for g in s.grids])
        rep = compute_metrics(reconstruct(vae, frames), frames, SYNTHETIC_CLASSES)
        info.update(frames=len(frames), train_seconds=seconds, miou=rep.miou, iou=rep.iou_total)
        assert seconds <= 30 * 60
        assert rep.miou >= 0.95 and rep.iou_total >= 0.97


# --------------------------------------------------------------------------- #
# 3. mask semantics


def test_criterion_3_mask_semantics():
    with criterion(3, "zero gradient into context latents; sampled context frames bit-identical") as info:
        cfg = DitConfig(n_f=5, latent_hw=(3, 3), channels=2, hidden=16, heads=2, depth=1, freq_dim=16)
        schedule = make_schedule(n_inference=20)
        worst_grad = 0.0
        for seed in range(5):
            g = torch.Generator().manual_seed(seed)
            dit = SpatioTemporalDiT(cfg, seed=seed)
            with torch.no_grad():
                for p in dit.parameters():
                    p.add_(torch.randn(p.shape, generator=g) * 0.1)
            n_c = 1 + seed % 4
            mask = condition_mask(cfg.n_f, n_c)
            z0 = torch.randn(2, cfg.n_f, 3, 3, 2, generator=g, requires_grad=True)
            eps = torch.randn(z0.shape, generator=g)
            i = torch.randint(schedule.T, (2,), generator=g)
            z_noisy = q_sample(z0, i, eps, schedule)
            z_noisy.retain_grad()
            z_hat = inject_context(z_noisy, z0, mask)
            z_hat.retain_grad()
            loss = masked_loss(dit(z_hat, i, torch.randn(2, cfg.n_f, 3, generator=g)), eps, mask)
            loss.backward()
            # the clean context latents never receive gradient, and masked frames' noisy inputs receive exactly 0
            assert z0.grad is None or torch.count_nonzero(z0.grad[:, mask]) == 0
            assert torch.count_nonzero(z_noisy.grad[:, mask]) == 0
            worst_grad = max(worst_grad, 0.0 if z0.grad is None else z0.grad[:, mask].abs().max().item())

            z_ctx = torch.randn(1, cfg.n_f, 3, 3, 2, generator=g)
            deltas = torch.randn(1, cfg.n_f, 3, generator=g)
            with torch.no_grad():
                out = sample_loop(lambda z, k: dit(z, torch.full((1,), k), deltas), z_ctx, mask, schedule,
                                  torch.Generator().manual_seed(seed))
            assert out[:, mask].numpy().tobytes() == z_ctx[:, mask].numpy().tobytes()
            assert not torch.equal(out[:, ~mask], z_ctx[:, ~mask])
        info.update(trials=5, max_abs_context_grad=worst_grad)


# --------------------------------------------------------------------------- #
# 4. diffusion schedule


def test_criterion_4_schedule(float64):
    with criterion(4, "alpha-bar monotone, predict_x0 round trip 1e-6, linear-Gaussian sampler 1e-4") as info:
        s = make_schedule(1000, 1e-4, 0.02, n_inference=20)
        ab = s.alpha_bar
        assert np.all(np.diff(ab) < 0) and ab[-1] < 1e-4
        g = torch.Generator().manual_seed(0)
        worst_rt = 0.0
        for i in (0, 1, 10, 250, 500, 999):
            x0 = torch.randn(3, 4, 5, generator=g)
            eps = torch.randn(x0.shape, generator=g)
            back = predict_x0(q_sample(x0, i, eps, s), eps, i, s)
            worst_rt = max(worst_rt, (back - x0).abs().max().item())
        assert worst_rt < 1e-6

        # denoiser that knows the target: eps_hat = (x_i - sqrt(ab) * target) / sqrt(1 - ab)
        target = torch.randn(1, 4, 3, 3, 2, generator=g)
        abt = torch.tensor(np.array(ab))

        def oracle(x, i):
            return (x - abt[i].sqrt() * target) / (1 - abt[i]).sqrt()

        mask = torch.zeros(4, dtype=torch.bool)
        out = sample_loop(oracle, torch.zeros_like(target), mask, s, torch.Generator().manual_seed(1))
        err = (out - target).abs().max().item()
        info.update(alpha_bar_last=float(ab[-1]), roundtrip_err=worst_rt, sampler_err=err,
                    steps=len(s.inference_steps))
        assert len(s.inference_steps) == 20
        assert err < 1e-4


# --------------------------------------------------------------------------- #
# 5. forecasting vs Copy&Paste

WM_SETUP = {
    "train_seed": 100, "train_scenes": 32, "test_seed": 200, "test_scenes": 8, "turn_prob": 0.2,
    "vae": {"downsample": 4, "coarse_depth": 2}, "vae_epochs": 12,
    "dit": {"hidden": 64, "depth": 2}, "dit_steps": 9000, "lr": 2e-3, "batch_size": 8, "use_ema": False,
    "n_c": 4, "starts": [0, 8], "seed": 0,
}


def trained_world_model():
    d = CACHE / "world"
    meta = cached_json(d / "meta.json")
    if meta and meta.get("setup") == WM_SETUP and (d / "model" / "dit.ckpt").exists():
        return load_world(d / "model"), meta["seconds"]
    train = gen_synthetic(WM_SETUP["train_seed"], WM_SETUP["train_scenes"], turn_prob=WM_SETUP["turn_prob"])
    frames = np.stack([g.labels for s in train for g in s.grids])
    t0 = time.perf_counter()
    vae = train_vae(frames, VaeConfig(**WM_SETUP["vae"]), epochs=WM_SETUP["vae_epochs"],
                    batch_size=WM_SETUP["batch_size"], seed=WM_SETUP["seed"]).model
    hw = vae.cfg.latent_shape[:2]
    res = train_world_model(vae, [(s.grids, s.poses) for s in train], DitConfig(latent_hw=hw, **WM_SETUP["dit"]),
                            steps=WM_SETUP["dit_steps"], lr=WM_SETUP["lr"], batch_size=WM_SETUP["batch_size"], n_c=WM_SETUP["n_c"],
                            seed=WM_SETUP["seed"], log_every=250)
    seconds = time.perf_counter() - t0
    save_world(res.model, d / "model", res.store, use_ema=WM_SETUP["use_ema"])
    (d / "meta.json").write_text(json.dumps({"setup": WM_SETUP, "seconds": seconds}))
    return load_world(d / "model"), seconds


@pytest.mark.slow
def test_criterion_5_forecast_beats_copy_paste():
    with criterion(5, "3 s mIoU beats Copy&Paste by >= 10 points after <= 2 h training on 32 scenes") as info:
        model, seconds = trained_world_model()
        test = gen_synthetic(WM_SETUP["test_seed"], WM_SETUP["test_scenes"], turn_prob=WM_SETUP["turn_prob"])
        ev = evaluate_forecasts(model, [(np.stack([g.labels for g in s.grids]), s.poses) for s in test],
                                SYNTHETIC_CLASSES, n_c=WM_SETUP["n_c"], starts=WM_SETUP["starts"],
                                seed=WM_SETUP["seed"])
        print(ev.to_text())
        ours, base = ev.model.rows["mIoU"]["3s"], ev.baseline.rows["mIoU"]["3s"]
        info.update(train_seconds=seconds, model_3s_miou=100 * ours, copy_paste_3s_miou=100 * base,
                    margin_points=100 * (ours - base))
        for col in ("Recon", "1s", "2s", "3s", "Avg"):
            assert ev.model.rows["mIoU"][col] is not None and ev.model.rows["IoU"][col] is not None
        assert all(col in ev.to_text() for col in ("Recon", "1s", "2s", "3s", "Avg"))
        assert seconds <= 2 * 3600
        assert 100 * (ours - base) >= 10


# --------------------------------------------------------------------------- #
# 6. trajectory resampling


def oracle_cost(grid, s, g):
    """Dijkstra on an independently built 8-connected graph with the no-corner-cutting rule."""
    graph = nx.Graph()
    H, W = grid.shape
    for i, j in np.argwhere(grid):
        graph.add_node((i, j))
        for di, dj in [(1, 0), (0, 1), (1, 1), (1, -1)]:
            a, b = i + di, j + dj
            if not (0 <= a < H and 0 <= b < W and grid[a, b]):
                continue
            if di and dj and not (grid[i + di, j] and grid[i, j + dj]):
                continue
            graph.add_edge((i, j), (a, b), weight=math.hypot(di, dj))
    try:
        return nx.dijkstra_path_length(graph, s, g)
    except nx.NetworkXNoPath:
        return None


def test_criterion_6_trajectory_resampling():
    with criterion(6, "drivable waypoints, A* = Dijkstra, exact static round trip, flatter heading histogram") as info:
        table = SYNTHETIC_CLASSES
        preset = get_preset("synthetic")
        scenes = gen_synthetic(7, 20, turn_prob=0.0)
        assert not any(s.meta["turn"] for s in scenes)
        waypoints = on_road = 0
        resampled, exact = [], 0
        for k, s in enumerate(scenes):
            res = resample_scene(s.grids, s.poses, table, preset, num_samples=10, seed=k)
            for sample in res.samples:
                wp = sample.trajectory.waypoints
                waypoints += len(wp)
                on_road += int(res.bev.is_drivable(wp).sum())
                resampled.append(sample.poses)
            g = s.grids[0]
            static = np.where(np.isin(g.labels, sorted(table.dynamic_class_ids)), table.empty_id, g.labels)
            back = extract_occupancy(aggregate_point_cloud([g], [np.eye(4)], table), np.eye(4), preset, table)
            exact += int(np.array_equal(back.labels, static))
        assert waypoints > 0 and on_road == waypoints
        assert exact == len(scenes)

        rng = np.random.default_rng(0)
        matched = 0
        for _ in range(100):
            H, W = rng.integers(2, 33, 2)
            grid = rng.random((H, W)) < rng.uniform(0.55, 0.9)
            free = np.argwhere(grid)
            if len(free) < 2:
                grid[0, 0] = grid[-1, -1] = True
                free = np.argwhere(grid)
            s, g = map(tuple, free[rng.choice(len(free), 2, replace=False)])
            expected = oracle_cost(grid, s, g)
            if expected is None:
                with pytest.raises(NoPath):
                    astar(grid, s, g)
            else:
                cells, cost = astar(grid, s, g)
                assert abs(cost - expected) < 1e-9 and abs(path_cost(cells) - expected) < 1e-9
            matched += 1

        src = trajectory_stats([s.poses for s in scenes])
        new = trajectory_stats(resampled)
        info.update(waypoints=waypoints, on_road_fraction=on_road / waypoints, astar_grids=matched,
                    exact_round_trips=exact, source_max_bin=src["max_bin_fraction"],
                    resampled_max_bin=new["max_bin_fraction"], resampled_sequences=len(resampled))
        assert new["max_bin_fraction"] < src["max_bin_fraction"]


# --------------------------------------------------------------------------- #
# 7. rollout accounting


def test_criterion_7_rollout():
    with criterion(7, "64-frame rollout = 32 s, window stitching bit-identical") as info:
        vae = OccVAE(VaeConfig(grid_dims=(4, 4, 2), emb_dim=2, latent_channels=2, downsample=2, width=4,
                               coarse_depth=1, attn_heads=1))
        dit = SpatioTemporalDiT(DitConfig(n_f=11, latent_hw=(2, 2), channels=2, hidden=8, heads=2, depth=1,
                                          freq_dim=8, L_xy=2, L_yaw=1))
        model = WorldModel(vae, dit, make_schedule(n_inference=4), latent_scale=0.5)
        context = np.random.default_rng(0).integers(0, 6, (4, 4, 4, 2)).astype(np.uint8)
        poses = [make_pose(0.8 * k, 0.0, 0.0) for k in range(required_poses(64, 11, 4))]
        res = rollout(context, poses, 64, model, seed=0, frame_rate=2.0)
        end, stitched = 0, 0
        for k, (_, new) in enumerate(res.windows):
            if k:
                assert res.conditioning[k].tobytes() == res.frames[end - 1].tobytes()
                stitched += 1
            end += new
        info.update(frames=len(res.frames), duration_s=res.duration_s, windows=len(res.windows),
                    stitched=stitched)
        assert len(res.frames) == 64 and res.duration_s == 32.0 and stitched == len(res.windows) - 1


# --------------------------------------------------------------------------- #
# 8. metric oracle


def brute_force(pred, gt, n, empty):
    inter, union = [0] * n, [0] * n
    occ_i = occ_u = 0
    H, W, D = gt.shape
    for i in range(H):
        for j in range(W):
            for k in range(D):
                p, g = int(pred[i, j, k]), int(gt[i, j, k])
                for c in range(n):
                    inter[c] += p == c and g == c
                    union[c] += p == c or g == c
                occ_i += p != empty and g != empty
                occ_u += p != empty or g != empty
    ious = [inter[c] / union[c] for c in range(n) if c != empty and union[c]]
    miou = sum(ious) / len(ious) if ious else 1.0
    return miou, (occ_i / occ_u if occ_u else 1.0), inter, union


def test_criterion_8_metric_oracle():
    with criterion(8, "compute_metrics equals triple-loop counter on 1000 grid pairs") as info:
        rng = np.random.default_rng(0)
        for _ in range(1000):
            shape = (rng.integers(1, 9), rng.integers(1, 9), rng.integers(1, 5))
            n = int(rng.integers(2, 7))
            pred = rng.integers(0, n, shape).astype(np.uint8)
            gt = rng.integers(0, n, shape).astype(np.uint8)
            miou, iou, inter, union = brute_force(pred, gt, n, 0)
            rep = compute_metrics(pred, gt, n)
            assert rep.miou == miou and rep.iou_total == iou
            for c, v in rep.iou_per_class.items():
                assert v == inter[c] / union[c]
        info["pairs"] = 1000


# --------------------------------------------------------------------------- #
# 9. CLI determinism

SMALL = {
    "vae": {"width": 8, "downsample": 8, "latent_channels": 4, "attn_heads": 2},
    "dit": {"hidden": 16, "depth": 1, "heads": 2, "freq_dim": 16},
    "schedule": {"T": 1000, "beta_start": 1e-4, "beta_end": 0.02, "inference_steps": 4},
    "train": {"vae_batch": 8, "wm_batch": 4},
}


def tree_bytes(d: Path) -> dict:
    return {str(p.relative_to(d)): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_criterion_9_cli_determinism(tmp_path):
    with criterion(9, "synth, train-vae, forecast, resample byte-identical across two runs") as info:
        cfg = tmp_path / "small.json"
        cfg.write_text(json.dumps(SMALL))
        outputs = {}
        for run in "ab":
            r = tmp_path / run
            main(["synth", "--seed", "3", "--n-scenes", "2", "--n-frames", "12", "--out", str(r / "data")])
            main(["train-vae", "--config", str(cfg), "--seed", "3", "--data", str(r / "data"), "--epochs", "1",
                  "--out", str(r / "vae")])
            if run == "a":
                main(["train-wm", "--config", str(cfg), "--seed", "3", "--data", str(r / "data"),
                      "--checkpoint", str(r / "vae" / "vae.ckpt"), "--steps", "2", "--out", str(tmp_path / "wm")])
            main(["forecast", "--config", str(cfg), "--seed", "3", "--checkpoint", str(tmp_path / "wm"),
                  "--input", str(r / "data" / "scene_0000.occs"), "--out", str(r / "fc"), "--save-latents"])
            main(["resample", "--seed", "3", "--input", str(r / "data"), "--num-samples", "3",
                  "--out", str(r / "rs")])
            outputs[run] = {cmd: tree_bytes(r / sub) for cmd, sub in
                            [("synth", "data"), ("train-vae", "vae"), ("forecast", "fc"), ("resample", "rs")]}
        same = {cmd: outputs["a"][cmd] == outputs["b"][cmd] for cmd in outputs["a"]}
        info.update({cmd: "identical" if ok else "DIFFERENT" for cmd, ok in same.items()})
        info["files"] = sum(len(v) for v in outputs["a"].values())
        assert all(len(v) for v in outputs["a"].values())
        assert all(same.values())
