"""Acceptance criteria, one test per criterion.

Each test prints a single ``[criterion N] PASS|FAIL ...`` line (visible with
``pytest -v -s`` and always in the terminal summary via ``capsys.disabled``).
"""

import math
import time

import numpy as np
import pytest
from scipy.ndimage import gaussian_filter
from skimage.color import lab2rgb, rgb2lab

from rlednet import gradsuite
from rlednet import metrics as M
from rlednet.checkpoint import load_checkpoint, save_checkpoint
from rlednet.cst import record_attention, shifted_window_mask
from rlednet.data import DegradeConfig, synthetic_pairs
from rlednet.losses import LossConfig, loss_terms, ssim_loss, total_loss, tv_loss
from rlednet.lsrb import init_lsrb, lsrb_forward
from rlednet.network import ModelConfig, init_params, rlednet_forward
from rlednet.params import ParamBuilder, ParamTree
from rlednet.tensor import Tensor, no_grad
from rlednet.training import RANKS, TrainConfig, ablation_configs, layer_widths, new_checkpoint, train, train_step

pytestmark = pytest.mark.filterwarnings("ignore::rlednet.lsrb.RankWarning")


@pytest.fixture
def report(capsys):
    def emit(number: int, title: str, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n[criterion {number}] {'PASS' if ok else 'FAIL'} {title}: {detail}")
        assert ok, detail

    return emit


# 1 -------------------------------------------------------------------------


def test_c1_gradient_suite(report):
    start = time.perf_counter()
    results = gradsuite.run_suite(seeds=20)
    elapsed = time.perf_counter() - start
    failed = [f"{r.name}={r.worst:.2e}" for r in results if not r.passed]
    worst = max(results, key=lambda r: r.worst / r.tol)
    ok = not failed and elapsed < 300 and all(r.seeds >= 20 for r in results)
    detail = f"{len(results)} cases x 20 seeds in {elapsed:.0f}s; tightest {worst.name} {worst.worst:.1e}/{worst.tol:.0e}"
    if failed:
        detail += f"; failed {failed}"
    report(1, "gradient suite", ok, detail)


# 2 -------------------------------------------------------------------------


def test_c2_lsrb_rank_bound(report):
    worst = 0.0
    for case in range(100):
        rng = np.random.default_rng([2, case])
        c = int(rng.choice([16, 24, 32]))
        h, w = (int(v) for v in rng.integers(8, 33, size=2))
        b = ParamBuilder(case, np.float32)
        init_lsrb(b, "lsrb", c, 8)
        params = ParamTree((k, Tensor(v.data + rng.normal(0, 0.3, v.shape).astype(np.float32))) for k, v in b.tree.items())
        x = Tensor(rng.uniform(size=(3, h, w)).astype(np.float32))
        with no_grad():
            out = lsrb_forward(x, params, 8)
        assert out.dtype == np.float32
        s = np.linalg.svd(out.data.reshape(c, -1).T.astype(np.float64), compute_uv=False)
        worst = max(worst, s[8] / s[0])
    report(2, "LSRB rank bound", worst <= 1e-4, f"100 cases at r=8 (f32), worst s9/s1 = {worst:.2e}")


# 3 -------------------------------------------------------------------------


def test_c3_attention_normalisation(report):
    cfg = ModelConfig(c=8, n_enc=2, n_frb=2, window=2)
    params = init_params(cfg, seed=4)
    rng = np.random.default_rng(3)
    for k, t in params.items():
        t.data += rng.normal(0, 0.1, t.shape).astype(t.dtype)
    x = Tensor(rng.uniform(size=(2, 3, 16, 16)).astype(np.float32))
    with no_grad(), record_attention() as log:
        rlednet_forward(x, cfg, params)
    row_err = 0.0
    leak = 0.0
    shifts = set()
    channel_maps = 0
    for entry in log:
        probs = entry["probs"]
        row_err = max(row_err, float(np.abs(probs.astype(np.float64).sum(-1) - 1.0).max()))
        if entry["kind"] == "channel":
            channel_maps += 1
            continue
        shifts.add(entry["shift"])
        if entry["shift"]:
            mask = shifted_window_mask(entry["h"], entry["w"], entry["window"], entry["shift"])
            t = probs.shape[-1]
            per_image = probs.reshape(entry["n"], mask.shape[0], probs.shape[1], t, t)
            blocked = np.broadcast_to(np.isinf(mask)[None, :, None], per_image.shape)
            if blocked.any():
                leak = max(leak, float(per_image[blocked].max()))
    ok = row_err <= 1e-5 and leak < 1e-6 and shifts == {0, 1} and channel_maps > 0
    detail = f"{len(log)} maps, shifts {sorted(shifts)}, {channel_maps} channel maps; max |row-1| {row_err:.1e}, max cross-boundary p {leak:.1e}"
    report(3, "attention normalisation", ok, detail)


# 4 -------------------------------------------------------------------------


def test_c4_residual_identity(report):
    cfg = ModelConfig(c=8, n_enc=2, n_frb=2, window=2)
    params = init_params(cfg, seed=1)
    params["frb.out.weight"].data[...] = 0.0
    params["frb.out.bias"].data[...] = 0.0
    rng = np.random.default_rng(4)
    shapes = [(3, 16, 16), (3, 17, 23), (2, 3, 20, 16), (3, 5, 9), (3, 33, 48)]
    bad = []
    for shape in shapes:
        x = rng.uniform(size=shape).astype(np.float32)
        with no_grad():
            y = rlednet_forward(Tensor(x), cfg, params).data
        if y.shape != x.shape or y.tobytes() != x.tobytes():
            bad.append(shape)
    report(4, "residual identity", not bad, f"{len(shapes)} shapes, bit-exact and shape-preserving; failures {bad}")


# 5 -------------------------------------------------------------------------


def test_c5_loss_sanity(report):
    rng = np.random.default_rng(5)
    const = np.full((3, 24, 24), 0.42)
    zero_total = total_loss(Tensor(const), const).item()
    pred = Tensor(rng.uniform(size=(3, 24, 24)))
    target = rng.uniform(size=(3, 24, 24))
    base = {k: v.item() for k, v in loss_terms(pred, target).items()}
    lin_err = max(
        abs(total_loss(pred, target, LossConfig(lambda_tv=lam)).item() - (base["l1"] + base["ssim"] + lam * base["tv"]))
        for lam in (0.0, 0.05, 0.1, 0.5, 1.0, 3.0)
    )
    smooth = gaussian_filter(rng.uniform(size=(3, 24, 24)), 1.0)
    ssim_self = ssim_loss(Tensor(smooth), smooth).item()
    tv_const = tv_loss(Tensor(const)).item()
    ok = zero_total == 0.0 and lin_err <= 1e-7 and ssim_self < 1e-6 and tv_const == 0.0
    detail = f"total(x,x)={zero_total}, lambda linearity err {lin_err:.1e}, ssim_loss(x,x)={ssim_self:.1e}, tv(const)={tv_const}"
    report(5, "loss sanity", ok, detail)


# 6 -------------------------------------------------------------------------


def _hue_rotate(x, degrees):
    lab = rgb2lab(np.moveaxis(x, 0, -1))
    t = math.radians(degrees)
    a, b = lab[..., 1].copy(), lab[..., 2].copy()
    lab[..., 1] = a * math.cos(t) - b * math.sin(t)
    lab[..., 2] = a * math.sin(t) + b * math.cos(t)
    return np.moveaxis(np.clip(lab2rgb(lab), 0, 1), -1, 0)


def test_c6_metric_sanity(report):
    rng = np.random.default_rng(6)
    x = rng.uniform(0.0, 0.9, (3, 32, 32))
    p = M.psnr(x + 0.1, x)
    s = M.ssim_metric(x, x)
    mae = M.mae(x + 0.1, x)
    scene = np.stack([gaussian_filter(ch, 2.0) for ch in rng.uniform(0.25, 0.75, (3, 32, 32))])
    cse0 = M.cse_substitute(scene, scene)
    rotated = [M.cse_substitute(_hue_rotate(scene, d), scene) for d in (0, 15, 45, 90, 180)]
    increasing = all(a < b for a, b in zip(rotated, rotated[1:]))
    ok = abs(p - 20.0) <= 1e-3 and s == 1.0 and abs(mae - 10.0) <= 1e-6 and cse0 == 0.0 and increasing
    detail = f"psnr {p:.6f} dB, ssim(x,x)={s}, mae {mae:.8f}%, cse(x,x)={cse0}, cse over hue 0/15/45/90/180 = {[round(v, 3) for v in rotated]}"
    report(6, "metric sanity", ok, detail)


# 7 -------------------------------------------------------------------------


def _dataset_terms(ckpt, pairs) -> dict[str, float]:
    low = np.stack([p.low for p in pairs]).astype(np.float32)
    normal = np.stack([p.normal for p in pairs]).astype(np.float32)
    with no_grad():
        terms = loss_terms(rlednet_forward(Tensor(low), ckpt.config, ckpt.params), normal)
    return {k: v.item() for k, v in terms.items()}


@pytest.mark.slow
def test_c7_tiny_overfit(report):
    cfg = ModelConfig(c=16, n_enc=2, n_frb=2, window=8)
    pairs = synthetic_pairs(4, 64, DegradeConfig(sigma=10, gamma=2.2, seed=0))
    tcfg = TrainConfig(iterations=500, batch_size=4, patch_size=64, lr=1e-4, seed=0)
    start = time.perf_counter()
    initial = _dataset_terms(new_checkpoint(cfg, tcfg), pairs)
    ckpt, _ = train(cfg, tcfg, pairs)
    final = _dataset_terms(ckpt, pairs)
    elapsed = time.perf_counter() - start
    with no_grad():
        out = [np.clip(rlednet_forward(Tensor(p.low.astype(np.float32)), cfg, ckpt.params).data, 0, 1) for p in pairs]
    gain = float(np.mean([M.psnr(o, p.normal) - M.psnr(p.low, p.normal) for o, p in zip(out, pairs)]))
    ratio = final["total"] / initial["total"]
    ok = ratio <= 0.2 and gain >= 6.0 and elapsed <= 900
    detail = (
        f"total loss {initial['total']:.4f} -> {final['total']:.4f} ({100 * ratio:.1f}%, need <= 20%), "
        f"l1 term {100 * final['l1'] / initial['l1']:.1f}% of initial, ssim term {final['ssim']:.3f}, "
        f"PSNR gain {gain:+.2f} dB, {elapsed:.0f}s"
    )
    report(7, "tiny overfit", ok, detail)


# 8 -------------------------------------------------------------------------


def test_c8_ablation_harness(report):
    base = ModelConfig(c=32, n_enc=2, n_frb=2, window=2)
    rows = ablation_configs(base)
    names = [name for name, _ in rows]
    pairs = synthetic_pairs(2, 16)
    tcfg = TrainConfig(iterations=1, batch_size=1, patch_size=16)
    low, normal = pairs[0].low[None], pairs[0].normal[None]
    problems = []
    for name, cfg in rows:
        if layer_widths(cfg) != layer_widths(base):
            problems.append(f"{name}: widths")
        ckpt = new_checkpoint(cfg, tcfg)
        before = {k: t.data.copy() for k, t in ckpt.params.items()}
        row = train_step(ckpt, low, normal, tcfg)
        if not math.isfinite(row["total"]):
            problems.append(f"{name}: loss")
        if all(np.array_equal(before[k], t.data) for k, t in ckpt.params.items()):
            problems.append(f"{name}: no update")
        with no_grad():
            y = rlednet_forward(Tensor(low.astype(np.float32)), cfg, ckpt.params)
        if y.shape != low.shape:
            problems.append(f"{name}: shape")
    expected = {"RLED-Net", "W/o LSRB", "W/o SAB", "W/o CAB"} | {f"rank={r}" for r in RANKS}
    ok = not problems and set(names) == expected
    report(8, "ablation harness", ok, f"{len(rows)} variants {names}; problems {problems}")


# 9 -------------------------------------------------------------------------


def test_c9_determinism_and_persistence(report, tmp_path):
    cfg = ModelConfig(c=8, n_enc=2, n_frb=2, window=2)
    pairs = synthetic_pairs(3, 24)
    tcfg = TrainConfig(iterations=4, batch_size=2, patch_size=16, seed=7)
    ckpt_a, hist_a = train(cfg, tcfg, pairs)
    _, hist_b = train(cfg, tcfg, pairs)
    same_curve = [r["total"] for r in hist_a] == [r["total"] for r in hist_b]

    save_checkpoint(tmp_path / "a.ckpt", ckpt_a)
    loaded = load_checkpoint(tmp_path / "a.ckpt", cfg)
    round_trip = all(loaded.params[k].data.tobytes() == t.data.tobytes() for k, t in ckpt_a.params.items())
    round_trip &= all(loaded.optim.m[k].tobytes() == v.tobytes() for k, v in ckpt_a.optim.m.items())
    round_trip &= all(loaded.optim.v[k].tobytes() == v.tobytes() for k, v in ckpt_a.optim.v.items())
    round_trip &= loaded.optim.step == ckpt_a.optim.step

    half = TrainConfig(iterations=2, batch_size=2, patch_size=16, seed=7)
    _, first = train(cfg, half, pairs, out=tmp_path / "half.ckpt")
    split_ckpt, second = train(cfg, half, pairs, resume=load_checkpoint(tmp_path / "half.ckpt", cfg))
    split = [r["total"] for r in first + second] == [r["total"] for r in hist_a]
    split &= all(split_ckpt.params[k].data.tobytes() == t.data.tobytes() for k, t in ckpt_a.params.items())

    ok = same_curve and round_trip and split
    report(9, "determinism and persistence", ok, f"identical curves {same_curve}, bit-exact round trip {round_trip}, split == unbroken {split}")
