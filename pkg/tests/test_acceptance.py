"""Acceptance gate: one test per criterion, each logging a PASS/FAIL line."""
import time
from fractions import Fraction

import numpy as np
import pytest

from atmnet.analysis import bin_range, collect_offset_histograms, export_offset_histograms, read_histogram
from atmnet.atm import AtmParams, atm_flops, atm_forward, fuse, init_atm_params, recompose_h, recompose_w, OffsetField
from atmnet.backbone import build_variant, count_flops, count_params, flop_breakdown, forward
from atmnet.checkpoint import load_checkpoint, save_checkpoint
from atmnet.config import VARIANTS, DataConfig, TrainConfig
from atmnet.data import ingest_synthetic
from atmnet.engine import Array
from atmnet.gradcheck import run_suite
from atmnet.neck import FeaturePyramid, build_fpn, fpn_forward
from atmnet.train import train

from oracles import atm_loop

PARAM_TARGETS = {"xT": 15e6, "T": 27e6, "S": 39e6, "B": 52e6, "L": 76e6}
FLOP_TARGETS = {"xT": 2.2e9, "T": 4.0e9, "S": 6.9e9, "B": 10.1e9, "L": 12.3e9}


def _table(measured, targets, unit):
    return ", ".join(f"{k} {measured[k] / unit:.2f} vs {targets[k] / unit:.1f} ({measured[k] / targets[k] - 1:+.1%})"
                     for k in targets)


def test_c01_parameter_accounting(criterion):
    with criterion(1, "parameter counts within 3% of the reference table") as info:
        measured = {k: count_params(VARIANTS[k]) for k in PARAM_TARGETS}
        info["detail"] = "M params: " + _table(measured, PARAM_TARGETS, 1e6)
        bad = [k for k in PARAM_TARGETS if abs(measured[k] / PARAM_TARGETS[k] - 1) > 0.03]
        assert not bad, f"outside 3%: {bad}; {info['detail']}"


def test_c02_flop_accounting(criterion):
    with criterion(2, "FLOPs at 224 within 10%; ATM term scales exactly by (384/224)^2") as info:
        measured = {k: count_flops(VARIANTS[k], 224, 224) for k in FLOP_TARGETS}
        a224 = flop_breakdown(VARIANTS["L"], 224, 224)["atm"]
        a384 = flop_breakdown(VARIANTS["L"], 384, 384)["atm"]
        exact = Fraction(a384, a224) == Fraction(384, 224) ** 2
        info["detail"] = f"GFLOPs: {_table(measured, FLOP_TARGETS, 1e9)}; L atm-term ratio exact: {exact}"
        assert exact
        bad = [k for k in FLOP_TARGETS if abs(measured[k] / FLOP_TARGETS[k] - 1) > 0.10]
        assert not bad, f"outside 10%: {bad}; {info['detail']}"


def test_c03_atm_cost_linear_in_height(criterion):
    with criterion(3, "atm_flops(2H,W,C,G) == 2 atm_flops(H,W,C,G) on 20 shapes") as info:
        rng = np.random.default_rng(3)
        for _ in range(20):
            H, W = (int(v) for v in rng.integers(1, 200, 2))
            G = int(rng.integers(1, 97))
            C = G * int(rng.integers(1, 17))
            for refresh in (True, False):
                assert atm_flops(2 * H, W, C, G, refresh) == 2 * atm_flops(H, W, C, G, refresh), (H, W, C, G)
        info["detail"] = "20 shapes, with and without offset prediction"


@pytest.mark.slow
def test_c04_gradient_suite(criterion):
    with criterion(4, "finite-difference suite (64-bit, h=1e-5) max rel. error < 1e-4 in < 2 min") as info:
        t0 = time.perf_counter()
        results = run_suite(seed=0)
        took = time.perf_counter() - t0
        worst = max(results, key=results.get)
        info["detail"] = f"{len(results)} checks, worst {worst} = {results[worst]:.2e}, {took:.1f}s"
        assert results[worst] < 1e-4
        assert took < 120


def test_c05_oracle_equivalence(criterion):
    with criterion(5, "vectorised ATM equals the per-token loop oracle within 1e-6 (100 instances)") as info:
        rng = np.random.default_rng(5)
        worst = 0.0
        for _ in range(100):
            G = int(rng.choice([1, 2, 4]))
            C = G * int(rng.integers(1, 8 // G + 1))
            H, W = (int(v) for v in rng.integers(1, 7, 2))
            named = init_atm_params(rng, C, G, dtype=np.float64)
            for k, v in named.items():
                v.data[...] = rng.normal(size=v.shape) * (2.0 if k.startswith("offset") else 1.0)
            x = rng.normal(size=(2, H, W, C))
            out, _ = atm_forward(Array(x), AtmParams.from_named(named, "", G))
            ref, _, _ = atm_loop(x, {k: v.data for k, v in named.items()})
            worst = max(worst, float(np.abs(out.data - ref).max()))
        info["detail"] = f"max abs diff {worst:.2e}"
        assert worst < 1e-6


@pytest.mark.slow
def test_c06_zero_offset_baseline(criterion):
    with criterion(6, "zero offsets: recompose is a bit-exact identity; frozen accuracy <= unfrozen") as info:
        rng = np.random.default_rng(6)
        for dtype in (np.float32, np.float64):
            x = Array(rng.normal(size=(2, 5, 7, 12)).astype(dtype))
            zero = Array(np.zeros((2, 5, 7, 3), dtype))
            assert np.array_equal(recompose_w(x, OffsetField(zero, "width", 4)).data, x.data)
            assert np.array_equal(recompose_h(x, OffsetField(zero, "height", 4)).data, x.data)
        cfg = dict(total_steps=500, data=DataConfig(task="spatial", num_samples=256))
        free = train(TrainConfig(**cfg))
        frozen = train(TrainConfig(freeze_offsets=True, **cfg))
        assert all(not p.data.any() for k, p in frozen.model.params.items() if ".atm.offset_" in k)
        info["detail"] = f"spatial task train acc: unfrozen {free.final_accuracy:.4f}, frozen {frozen.final_accuracy:.4f}"
        assert frozen.final_accuracy <= free.final_accuracy


def test_c07_fusion_invariants(criterion):
    with criterion(7, "alpha triples sum to 1 (1e-6); output inside branch hull (1000 instances)") as info:
        rng = np.random.default_rng(7)
        worst_sum = worst_hull = 0.0
        for _ in range(1000):
            C = int(rng.integers(1, 9))
            named = init_atm_params(rng, C, 1, predict_offsets=False, dtype=np.float64)
            for v in named.values():
                v.data[...] = rng.normal(scale=2.0, size=v.shape)
            params = AtmParams.from_named(named, "", 1)
            xs = [Array(rng.normal(size=(1, 2, 2, C))) for _ in range(3)]
            out, alphas, hats = fuse(*xs, params, return_gates=True)
            a = alphas.data.reshape(1, 2, 2, 3, C)
            worst_sum = max(worst_sum, float(np.abs(a.sum(axis=3) - 1).max()))
            stack = np.stack([h.data for h in hats])
            lo, hi = stack.min(axis=0), stack.max(axis=0)
            tol = 1e-12 * (1 + np.abs(stack).max())
            worst_hull = max(worst_hull, float(np.maximum(lo - out.data, out.data - hi).max()))
            assert np.all(out.data >= lo - tol) and np.all(out.data <= hi + tol)
        info["detail"] = f"max |sum-1| {worst_sum:.1e}, max hull excursion {max(worst_hull, 0):.1e}"
        assert worst_sum < 1e-6


@pytest.mark.slow
def test_c08_convergence_smoke(criterion):
    with criterion(8, "micro model >= 95% train accuracy in 500 steps, deterministic, < 5 min") as info:
        cfg = TrainConfig(total_steps=500, data=DataConfig(task="stripes", num_samples=256))
        t0 = time.perf_counter()
        first = train(cfg)
        took = time.perf_counter() - t0
        again = train(cfg)
        early = first.losses[:50]
        info["detail"] = (f"acc {first.final_accuracy:.4f}, {took:.1f}s, offset grad norm after step 1 "
                          f"{first.first_offset_grad_norm:.3e}, mean loss steps 1-10 {np.mean(early[:10]):.3f} "
                          f"-> 41-50 {np.mean(early[40:]):.3f}")
        assert first.losses == again.losses
        assert first.first_offset_grad_norm > 0
        assert np.mean(early[40:]) < np.mean(early[:10])
        assert first.final_accuracy >= 0.95
        assert took < 300


def test_c09_variable_resolution(criterion):
    with criterion(9, "one xT model runs at 224, 256 and 320 with finite logits") as info:
        model = build_variant("xT", seed=9)
        rng = np.random.default_rng(9)
        shapes = []
        for res in (224, 256, 320):
            logits = forward(model, rng.normal(size=(1, 3, res, res)).astype(np.float32))
            assert logits.shape == (1, 1000) and np.all(np.isfinite(logits.data))
            shapes.append(res)
        info["detail"] = f"resolutions {shapes}"


def test_c10_checkpoint_and_histograms(criterion, tmp_path):
    with criterion(10, "checkpoint round trip bit-identical; histogram accounting and support") as info:
        model = build_variant("micro", seed=10)
        rng = np.random.default_rng(10)
        for k, p in model.params.items():
            if ".atm.offset_" in k:
                p.data[...] = rng.normal(scale=4.0, size=p.shape)
        save_checkpoint(model, tmp_path / "m.atmc")
        back = load_checkpoint(tmp_path / "m.atmc")
        assert all(back.params[k].data.tobytes() == p.data.tobytes() for k, p in model.params.items())
        x = rng.normal(size=(2, 3, 32, 32)).astype(np.float32)
        assert forward(back, x).data.tobytes() == forward(model, x).data.tobytes()

        data = ingest_synthetic("stripes", 12, 32, seed=10)
        hists = export_offset_histograms(back, data, "center", tmp_path / "hist")
        for h in hists:
            bins, counts = read_histogram(tmp_path / "hist" / f"{h.name}.csv")
            assert counts.sum() == len(data) * h.groups
            lo, hi = bin_range(h.extent, "center")
            assert bins.min() >= -h.extent and bins.max() <= h.extent - 1
            assert (lo, hi) == (bins[0], bins[-1])
        for h in collect_offset_histograms(back, data, "all"):
            assert h.bins.min() >= -h.extent and h.bins.max() <= h.extent - 1
        info["detail"] = f"{len(hists)} histogram files, all sums = samples x groups"


def test_c11_fpn_shape_contract(criterion):
    with criterion(11, "FPN maps (64,128,320,512) to 4 x 256 channels; degenerate ATM equals plain merge") as info:
        rng = np.random.default_rng(11)
        chans = (64, 128, 320, 512)
        levels = [Array(rng.normal(size=(1, 56 >> i, 56 >> i, c)).astype(np.float32)) for i, c in enumerate(chans)]
        for mode in ("plain", "atm"):
            out = fpn_forward(FeaturePyramid(levels), build_fpn(chans, 256, mode, seed=1))
            assert [y.shape for y in out.levels] == [(1, 56 >> i, 56 >> i, 256) for i in range(4)]
            assert out.strides == (4, 8, 16, 32)

        atm = build_fpn(chans, 256, "atm", seed=2, dtype=np.float64)
        plain = build_fpn(chans, 256, "plain", seed=2, dtype=np.float64)
        for k, v in atm.params.items():
            if ".atm." in k:
                v.data[...] = np.eye(256) if ".atm.fc_" in k and k.endswith("weight") else 0.0
        for k, v in plain.params.items():
            if k.startswith("output") and k.endswith("weight"):
                v.data[...] = 0.0
                v.data[1, 1] = np.eye(256)
            elif k in atm.params:
                v.data[...] = atm.params[k].data
        lv64 = FeaturePyramid([Array(x.data.astype(np.float64)) for x in levels])
        a, b = fpn_forward(lv64, atm), fpn_forward(lv64, plain)
        diff = max(float(np.abs(x.data - y.data).max()) for x, y in zip(a.levels, b.levels))
        info["detail"] = f"degenerate ATM vs plain merge max diff {diff:.1e}"
        assert diff < 1e-5
