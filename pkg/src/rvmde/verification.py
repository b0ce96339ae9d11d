"""Self-check suite behind ``rvmde verify``.

Each check returns a ``CheckResult``; groups can be selected by name.
"""

import math
import time
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import training
from .discretization import decode_ordinal, encode_depth, ordinal_targets, sid_thresholds
from .evaluation import compute_metrics, split_report
from .geometry import Intrinsics, PointCloud, Pose, adjust_intrinsics, project_points, transform_points
from .model import pair_probabilities, upsample
from .radar_input import MerSpec, build_mer

GRAD_TOL = 1e-5


@dataclass
class CheckResult:
    group: str
    name: str
    passed: bool
    detail: str


def _f64(gen, *shape):
    return torch.randn(*shape, generator=gen, dtype=torch.float64)


# ------------------------------------------------------------- gradients

def _module_check(mod, x):
    mod = mod.double()
    return training.grad_check(lambda inp: mod(inp), [x], wrt=[x, *mod.parameters()])


def check_gradients():
    gen = torch.Generator().manual_seed(1234)
    torch.manual_seed(1234)
    out = []

    def record(name, err):
        out.append(CheckResult("grad", name, err < GRAD_TOL, f"max rel err {err:.2e}"))

    conv = nn.Conv2d(2, 3, 3, padding=1)
    record("conv3x3", _module_check(conv, _f64(gen, 1, 2, 5, 5)))
    conv_s2 = nn.Conv2d(2, 2, 3, stride=2, padding=1)
    record("conv3x3 stride2", _module_check(conv_s2, _f64(gen, 2, 2, 6, 6)))

    gn = nn.GroupNorm(2, 4)
    with torch.no_grad():
        gn.weight.copy_(1 + 0.1 * _f64(gen, 4).float())
        gn.bias.copy_(0.1 * _f64(gen, 4).float())
    record("group norm", _module_check(gn, _f64(gen, 2, 4, 4, 4)))
    bn = nn.BatchNorm2d(4).train()
    record("batch norm", _module_check(bn, _f64(gen, 2, 4, 4, 4)))

    x = _f64(gen, 1, 2, 4, 4)
    record("bilinear up x2", training.grad_check(lambda t: upsample(t, 2), [x]))
    x = _f64(gen, 1, 2, 2, 2)
    record("bilinear up x4", training.grad_check(lambda t: upsample(t, 4), [x]))

    logits = _f64(gen, 2, 8, 3, 3)
    record("pair softmax", training.grad_check(pair_probabilities, [logits]))

    logits = _f64(gen, 2, 8, 4, 4)
    labels = torch.randint(0, 4, (2, 4, 4), generator=gen)
    mask = torch.rand(2, 4, 4, generator=gen) > 0.3
    record("ordinal loss", training.grad_check(lambda t: training.ordinal_loss(t, labels, mask), [logits]))

    x = _f64(gen, 2, 3, 4)
    record("identity", training.grad_check(lambda t: t, [x]))
    return out


# ------------------------------------------------------------------ SID

def check_sid(n_depths=10_000, seed=0):
    bins = sid_thresholds(1.0, 80.0, 80)
    t = bins.thresholds
    ratios = t[1:] / t[:-1]
    expected = (80.0 / 1.0) ** (1 / 80)
    rng = np.random.default_rng(seed)
    d = rng.uniform(1.0, 80.0, size=n_depths)
    lab = encode_depth(d.reshape(1, -1), bins).labels
    dec = decode_ordinal(ordinal_targets(lab, bins.K), bins).ravel()
    lab = lab.ravel()
    inside = (t[lab] <= dec) & (dec <= t[lab + 1]) & (t[lab] <= d) & (d <= t[lab + 1])
    return [
        CheckResult("sid", "strictly increasing", bool(np.all(np.diff(t) > 0)), f"K={bins.K}"),
        CheckResult("sid", "exact endpoints", t[0] == 1.0 and t[-1] == 80.0, f"t0={float(t[0])!r} tK={float(t[-1])!r}"),
        CheckResult("sid", "constant ratio", float(np.abs(ratios - expected).max()) < 1e-9,
                    f"max dev {np.abs(ratios - expected).max():.1e}"),
        CheckResult("sid", "encode/decode roundtrip", bool(inside.all()),
                    f"{int(inside.sum())}/{n_depths} decoded inside source bin"),
    ]


# -------------------------------------------------------------- metrics

def brute_force_metrics(pred, gt):
    """Literal per-pixel reference; only pixels with gt > 0 count."""
    n = 0
    s_abs = s_sq = s_log = 0.0
    d1 = d2 = d3 = 0
    for p, g in zip(np.asarray(pred).ravel().tolist(), np.asarray(gt).ravel().tolist()):
        if g <= 0:
            continue
        n += 1
        s_abs += abs(p - g) / g
        s_sq += (p - g) ** 2
        s_log += (math.log(p) - math.log(g)) ** 2
        r = max(p / g, g / p)
        d1 += r < 1.25
        d2 += r < 1.25**2
        d3 += r < 1.25**3
    return {"abs_rel": s_abs / n, "rmse": math.sqrt(s_sq / n), "rmse_log": math.sqrt(s_log / n),
            "delta1": d1 / n, "delta2": d2 / n, "delta3": d3 / n, "n_valid": n}


def _rel(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-300) if a != b else 0.0


def check_metrics(n_pairs=100, size=32, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    samples = []
    for i in range(n_pairs):
        gt = rng.uniform(1.0, 80.0, (size, size)) * (rng.random((size, size)) > 0.3)
        pred = gt * np.exp(rng.normal(0, 0.3, (size, size))) + (gt == 0) * 5.0
        ref = brute_force_metrics(pred, gt)
        got = compute_metrics(pred, gt).to_dict()
        for key, val in ref.items():
            worst = max(worst, _rel(got[key], val))
        samples.append((pred, gt, None, ("day", "night", "rain")[i % 3]))
    reports = split_report(samples)
    ns = np.array([reports[t].n_valid for t in ("day", "night", "rain")], dtype=float)
    r2 = np.array([reports[t].rmse ** 2 for t in ("day", "night", "rain")])
    pooled = float((ns * r2).sum() / ns.sum())
    pool_err = _rel(reports["combine"].rmse ** 2, pooled)
    return [
        CheckResult("metrics", "brute-force agreement", worst < 1e-12, f"max rel err {worst:.1e} over {n_pairs} pairs"),
        CheckResult("metrics", "pooled split identity", pool_err < 1e-10, f"rel err {pool_err:.1e}"),
    ]


# ------------------------------------------------------------- geometry

def random_pose(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    rot = np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])
    return Pose.from_rt(rot, rng.uniform(-5, 5, 3))


def check_geometry(n=1000, seed=0):
    rng = np.random.default_rng(seed)
    worst_rt = 0.0
    worst_comm = 0.0
    for _ in range(n // 100):
        pose = random_pose(rng)
        pts = PointCloud(rng.uniform(-50, 50, (100, 3)))
        back = transform_points(transform_points(pts, pose), pose.inverse())
        worst_rt = max(worst_rt, float(np.abs(back.xyz - pts.xyz).max()))

    width, height = 1600, 900
    k = Intrinsics(1266.4, 1266.4, 816.3, 491.5)
    sx, sy, crop = 900 / 1600, 450 / 900, 100
    k2 = adjust_intrinsics(k, sx, sy, crop)
    cam = PointCloud(np.column_stack([rng.uniform(-20, 20, n), rng.uniform(-10, 10, n), rng.uniform(1, 80, n)]))
    a = project_points(cam, k, width, height)
    b = project_points(cam, k2, round(width * sx), round(height * sy) - crop)
    # every point kept after the crop must have been inside the original image
    same = bool(np.isin(b.index, a.index).all()) and len(b) > 0
    if same:
        pos = np.searchsorted(a.index, b.index)
        worst_comm = max(float(np.abs(a.u[pos] * sx - b.u).max()),
                         float(np.abs(a.v[pos] * sy - crop - b.v).max()))
    return [
        CheckResult("geometry", "transform round trip", worst_rt < 1e-9, f"max err {worst_rt:.1e} m over {n} points"),
        CheckResult("geometry", "projection/intrinsics commutation", same and worst_comm < 1e-9,
                    f"max err {worst_comm:.1e} px over {n} points"),
    ]


# ------------------------------------------------------------------ MER

def check_mer(n_clouds=100, seed=0):
    rng = np.random.default_rng(seed)
    k = Intrinsics(128.0, 128.0, 64.0, 16.0)
    pose = Pose.from_rt([[0, -1, 0], [0, 0, -1], [1, 0, 0]], [0, 1.5, 0])
    spec = MerSpec()
    ok = 0
    for _ in range(n_clouds):
        n = int(rng.integers(1, 30))
        pts = np.column_stack([rng.uniform(2, 40, n), rng.uniform(-15, 15, n), rng.uniform(0, 2, n)])
        mer = build_mer(PointCloud(pts), pose, k, 128, 64, spec) > 0
        ok += all(np.all(mer[j] <= mer[j + 1]) for j in range(1, 5)) and np.all(mer[0] <= mer[5])
    return [CheckResult("mer", "channel support nesting", ok == n_clouds, f"{ok}/{n_clouds} clouds nested")]


# ------------------------------------------------------------------- lr

def check_lr():
    lr = [training.poly_lr(i, 1000, 0.001, 0.9) for i in range(1001)]
    mid = training.poly_lr(500, 1000, 0.001, 0.9)
    return [
        CheckResult("lr", "endpoints", lr[0] == 0.001 and lr[-1] == 0.0, f"lr(0)={lr[0]} lr(max)={lr[-1]}"),
        CheckResult("lr", "strictly decreasing", all(a > b for a, b in zip(lr, lr[1:])), "1000 steps"),
        CheckResult("lr", "midpoint", abs(mid - 5.35887e-4) < 1e-9, f"lr(max/2)={mid:.9e}"),
    ]


SUITES = {
    "grad": check_gradients,
    "sid": check_sid,
    "metrics": check_metrics,
    "geometry": check_geometry,
    "mer": check_mer,
    "lr": check_lr,
}


def run_checks(only=None):
    names = list(SUITES) if not only else list(only)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise ValueError(f"unknown check group(s) {unknown}; choose from {sorted(SUITES)}")
    results = []
    timings = {}
    for name in names:
        t0 = time.perf_counter()
        results.extend(SUITES[name]())
        timings[name] = time.perf_counter() - t0
    return results, timings


def format_results(results):
    width = max(len(f"{r.group}/{r.name}") for r in results)
    lines = [f"{'check':<{width}}  result  detail"]
    for r in results:
        lines.append(f"{r.group + '/' + r.name:<{width}}  {'PASS' if r.passed else 'FAIL':<6}  {r.detail}")
    return "\n".join(lines)
