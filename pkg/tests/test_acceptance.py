"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run with ``pytest tests/test_acceptance.py -v``; the lines are repeated in
the "acceptance criteria" section of the terminal summary.
"""

import statistics
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from rvmde import verification
from rvmde.cli import main as cli_main
from rvmde.data import PreprocessConfig, SynthConfig, load_manifest, load_sample, preprocess, synth_generate
from rvmde.discretization import SidBins, decode_ordinal
from rvmde.evaluation import compute_metrics
from rvmde.model import ModelError, build_model, count_params, tiny_config
from rvmde.training import TrainConfig, fit

ROOT = Path(__file__).resolve().parents[1]
OVERFIT_BINS = SidBins(2.0, 40.0, 16)


def _group(results, group):
    picked = [r for r in results if r.group == group]
    return all(r.passed for r in picked), "; ".join(f"{r.name}: {r.detail}" for r in picked)


def _deterministic():
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


def _prepare(out_dir, mode, seed):
    synth_generate(SynthConfig(seed=seed), out_dir, 8)
    cfg = PreprocessConfig(bins=OVERFIT_BINS, radar_mode=mode, max_depth=40.0)
    return [preprocess(load_sample(p), cfg) for p, _ in load_manifest(out_dir).entries]


def _overfit_config(seed=0):
    return TrainConfig(lr0=0.01, poly_power=0.9, momentum=0.9, weight_decay=1e-4, batch_size=2, max_iters=300,
                       seed=seed)


def test_c01_reference_numbers_documented(acceptance):
    readme = (ROOT / "README.md").read_text()
    needed = ["5.06", "0.90", "3.54", "not reproduced"]
    missing = [s for s in needed if s not in readme]
    ok = acceptance(1, "reference results documented, not claimed", not missing,
                    "README lists full-scale reference targets" if not missing else f"missing {missing}")
    assert ok


def test_c02_gradient_checks(acceptance):
    t0 = time.perf_counter()
    results = verification.check_gradients()
    elapsed = time.perf_counter() - t0
    ok, detail = _group(results, "grad")
    worst = max(float(r.detail.split()[-1]) for r in results)
    ok = ok and elapsed < 120
    acceptance(2, "finite-difference gradients", ok, f"max rel err {worst:.2e} (< 1e-5) in {elapsed:.1f} s")
    assert ok, detail


def test_c03_sid(acceptance):
    results = verification.check_sid()
    ok, detail = _group(results, "sid")
    acceptance(3, "SID bins and round trip", ok, detail)
    assert ok, detail


def test_c04_metric_oracle(acceptance):
    results = verification.check_metrics()
    ok, detail = _group(results, "metrics")
    acceptance(4, "metric oracle", ok, detail)
    assert ok, detail


def test_c05_geometry(acceptance):
    results = verification.check_geometry()
    ok, detail = _group(results, "geometry")
    acceptance(5, "geometry invariants", ok, detail)
    assert ok, detail


@pytest.mark.slow
def test_c06_overfit(acceptance, tmp_path):
    _deterministic()
    prepared = _prepare(tmp_path, "height", seed=7)
    model = build_model(tiny_config(), OVERFIT_BINS, seed=0)
    t0 = time.perf_counter()
    history = fit(model, [p.train_item() for p in prepared], _overfit_config())
    elapsed = time.perf_counter() - t0
    model.eval()
    preds, gts = [], []
    with torch.no_grad():
        for p in prepared:
            probs, _ = model(torch.from_numpy(p.rgb)[None], torch.from_numpy(p.radar)[None])
            depth = decode_ordinal(probs[0].double().numpy(), OVERFIT_BINS)
            mask = p.eval_masks["valid"]
            preds.append(depth[mask])
            gts.append(p.gt_depth[mask])
    report = compute_metrics(np.concatenate(preds), np.concatenate(gts))
    first, last = np.mean(history.loss[:10]), np.mean(history.loss[-10:])
    ok = report.delta1 >= 0.90 and report.rmse <= 1.0 and elapsed <= 600
    acceptance(6, "tiny-config overfit", ok,
               f"delta1 {report.delta1:.4f} (>= 0.90), RMSE {report.rmse:.3f} m (<= 1.0), "
               f"{elapsed:.0f} s, {count_params(model)} params, loss {first:.3f} -> {last:.3f}")
    assert last < 0.25 * first
    assert report.delta1 >= 0.90
    assert elapsed <= 600
    assert report.rmse <= 1.0


@pytest.mark.slow
def test_c07_radar_helps(acceptance, tmp_path):
    _deterministic()
    finals = {"height": [], "none": []}
    for seed in range(3):
        for mode in finals:
            prepared = _prepare(tmp_path / f"{mode}{seed}", mode, seed=100 + seed)
            model = build_model(tiny_config(), OVERFIT_BINS, seed=seed)
            history = fit(model, [p.train_item() for p in prepared], _overfit_config(seed))
            finals[mode].append(float(np.mean(history.loss[-10:])))
    med = {m: statistics.median(v) for m, v in finals.items()}
    ok = med["height"] <= med["none"]
    acceptance(7, "radar input lowers train loss", ok,
               f"median final loss height {med['height']:.4f} vs none {med['none']:.4f} "
               f"(per seed {[round(x, 4) for x in finals['height']]} vs {[round(x, 4) for x in finals['none']]})")
    assert ok


def test_c08_mer(acceptance):
    ok_nest, detail = _group(verification.check_mer(), "mer")
    model = build_model(tiny_config(radar_in_channels=6), OVERFIT_BINS)
    rgb = torch.zeros(1, 3, 64, 128)
    probs, _ = model(rgb, torch.zeros(1, 6, 64, 128))
    accepts = probs.shape == (1, 16, 64, 128)
    try:
        model(rgb, torch.zeros(1, 1, 64, 128))
        rejects = False
    except ModelError:
        rejects = True
    ok = ok_nest and accepts and rejects
    acceptance(8, "MER nesting and 6-channel input", ok,
               f"{detail}; 6-ch accepted {accepts}; 1-ch rejected {rejects}")
    assert ok


@pytest.mark.slow
def test_c09_determinism(acceptance, tmp_path):
    data = tmp_path / "d"
    assert cli_main(["synth", "--config", "tiny", "--out", str(data), "--num", "8", "--seed", "7"]) == 0
    common = ["train", "--config", "tiny", "--data", str(data), "--iters", "40", "--deterministic",
              "--set", "train.checkpoint_every=20"]
    for name in ("a", "b"):
        assert cli_main(common + ["--out", str(tmp_path / name)]) == 0
    same_ckpt = (tmp_path / "a" / "model.ckpt").read_bytes() == (tmp_path / "b" / "model.ckpt").read_bytes()
    assert cli_main(common + ["--out", str(tmp_path / "r"),
                              "--resume", str(tmp_path / "a" / "model.iter000020.ckpt")]) == 0
    curve_a = (tmp_path / "a" / "history.csv").read_text()
    curve_r = (tmp_path / "r" / "history.csv").read_text()
    same_resume = curve_a == curve_r
    same_final = (tmp_path / "a" / "model.ckpt").read_bytes() == (tmp_path / "r" / "model.ckpt").read_bytes()
    ok = same_ckpt and same_resume and same_final
    acceptance(9, "determinism and resume", ok,
               f"repeat checkpoints identical {same_ckpt}; resumed loss curve identical {same_resume}; "
               f"resumed checkpoint identical {same_final}")
    assert ok


def test_c10_lr_schedule(acceptance):
    results = verification.check_lr()
    ok, detail = _group(results, "lr")
    acceptance(10, "poly learning-rate schedule", ok, detail)
    assert ok, detail
