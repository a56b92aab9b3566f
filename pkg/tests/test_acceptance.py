"""Acceptance suite: one printed PASS/FAIL line per criterion.

Run ``pytest tests/test_acceptance.py -s`` to see the lines; the full-size
pyramid (about 2 min, 3 GB) and the 200-step overfit (about 7 min) are here.
"""
import json
import time
from fractions import Fraction

import numpy as np
import pytest

from oracles import brute_assd, brute_hd95, naive_selective_scan, overlap_counts
from srmamba import config
from srmamba.abss import (PLANES, abss_forward, cross_merge, cross_scan, plane_grid, plane_rearrange,
                          plane_restore, plane_scan)
from srmamba.cli import main
from srmamba.gradcheck import run_suite
from srmamba.metrics import assd, evaluate_case, hd95, overlap_metrics
from srmamba.network import (REFERENCE_PARAMS, NetworkConfig, forward, init_weights, param_count,
                             reverse_attention)
from srmamba.nifti import write_nifti
from srmamba.ssm import SSMParams, init_ssm_params, selective_scan
from srmamba.tensor import Tensor, no_grad
from srmamba.train import AdamState, overfit_sphere, sphere_volume, train_step
from srmamba.weights import save_weights

# tolerances and budgets
SCAN_ATOL = 1e-12
SCAN_SECONDS = 10.0
GRAD_SECONDS = 300.0
FEEDTHROUGH_ATOL = 1e-10
PARAM_BAND = 0.25
OVERFIT_DICE = 0.95
OVERFIT_SECONDS = 600.0

TOY = NetworkConfig(stage_channels=(4, 8, 16), state_dim=4)


VERDICTS = []


def verdict(n, ok, detail, soft=False):
    tag = "PASS" if ok else ("WARN" if soft else "FAIL")
    line = f"[criterion {n:>2}] {tag}: {detail}"
    VERDICTS.append(line)
    print("\n" + line)
    if not soft:
        assert ok, detail


def t64(a):
    return Tensor(np.asarray(a, dtype=np.float64), dtype=np.float64)


def test_criterion_01_scan_matches_naive_recurrence():
    rng = np.random.default_rng(2024)
    worst, elapsed = 0.0, 0.0
    with config.precision("f64"):
        for _ in range(100):
            L, d, N = (int(rng.integers(1, m + 1)) for m in (32, 8, 16))
            p = init_ssm_params(d, N, rng, dtype=np.float64)
            p.a_log.data += rng.uniform(-0.5, 0.5, p.a_log.shape)
            p.b_delta.data[:] = rng.uniform(-3, 1, d)
            u = rng.standard_normal((L, d))
            t0 = time.perf_counter()
            got = selective_scan(t64(u), p).data
            elapsed += time.perf_counter() - t0
            ref = naive_selective_scan(u, *[getattr(p, f).data for f in SSMParams.FIELDS])
            worst = max(worst, float(np.abs(got - ref).max()))
    ok = worst < SCAN_ATOL and elapsed < SCAN_SECONDS
    verdict(1, ok, f"100 instances, max abs diff {worst:.2e} (< {SCAN_ATOL:g}), scan time {elapsed:.2f}s")


def test_criterion_02_gradient_suite():
    t0 = time.perf_counter()
    results = run_suite(instances=3, seed=0)
    dt = time.perf_counter() - t0
    required = ["pointwise", "matmul", "conv3d", "layer_norm", "trilinear_resize", "selective_scan",
                "abss_forward", "sabmamba_forward", "gsc_forward", "srma_forward", "dice_ce_loss"]
    covered = all(any(r.name.startswith(k) for r in results) for k in required)
    bad = [r.name for r in results if not r.passed]
    elem_tol = max(r.tol for r in results if r.name.split(".")[0] in ("pointwise", "matmul", "conv3d", "layer_norm",
                                                                    "trilinear_resize", "shape", "reduce"))
    ok = not bad and covered and dt < GRAD_SECONDS and elem_tol <= 1e-4 and all(r.tol <= 1e-3 for r in results)
    worst = max(results, key=lambda r: r.max_rel_err / r.tol)
    verdict(2, ok, f"{len(results)} ops x 3 instances, failing {bad or 'none'}, tightest margin "
                   f"{worst.name} {worst.max_rel_err:.1e}/{worst.tol:g}, {dt:.1f}s")


def test_criterion_03_traversal_algebra():
    rng = np.random.default_rng(3)
    x = t64(rng.standard_normal((3, 5, 4, 6)))
    four_x = all(np.array_equal(plane_scan(x, pl, None, transform=lambda s: s).data, 4 * x.data)
                 for pl in PLANES)
    f = t64(rng.standard_normal((3, 7, 20)))
    merge = np.array_equal(cross_merge(cross_scan(f, (4, 5))).data, 4 * f.data)
    roundtrip = all(np.array_equal(plane_restore(plane_rearrange(x, pl), pl, x.shape).data, x.data)
                    for pl in PLANES)
    params = {}
    for pl in PLANES:
        p = init_ssm_params(3, 4, rng, dtype=np.float64)
        p.w_c.data[:] = 0.0
        p.d_skip.data[:] = 1.0
        params[pl] = p
    err = float(np.abs(abss_forward(x, params).data - 12 * x.data).max())
    ok = four_x and merge and roundtrip and err < FEEDTHROUGH_ATOL
    verdict(3, ok, f"merge(scan)=4x exact: {four_x and merge}, rearrange round-trip exact: {roundtrip}, "
                   f"feedthrough 12x err {err:.1e}")


def test_criterion_04_reverse_attention_contract():
    rng = np.random.default_rng(4)
    pairs = 0
    antitone = open_interval = True
    for prec in ("f32", "f64"):
        dt = config.DTYPES[prec]
        for spread in (0.1, 1.0, 10.0, 100.0, 1e4):
            for _ in range(20):
                s = (rng.standard_normal((1, 6, 6, 4)) * spread).astype(dt)
                bump = np.where(rng.random(s.shape) < 0.5, np.abs(rng.standard_normal(s.shape)) * spread, 0)
                s2 = np.maximum(s, (s + bump).astype(dt))
                s2 = np.where(rng.random(s.shape) < 0.2, np.nextafter(s, dt(np.inf)), s2).astype(dt)
                a, a2 = (reverse_attention(Tensor(v, dtype=dt)).data for v in (s, s2))
                antitone &= bool((s <= s2).all() and (a >= a2).all())
                open_interval &= bool(((a > 0) & (a < 1)).all() and ((a2 > 0) & (a2 < 1)).all())
                pairs += 1
    verdict(4, antitone and open_interval,
            f"{pairs} map pairs (f32 and f64, spreads up to 1e4): antitone {antitone}, A in (0,1) {open_interval}")


def test_criterion_05_metrics_oracle():
    rng = np.random.default_rng(5)
    mismatches, identity_ok, worst_ulps = 0, True, 0.0
    for _ in range(200):
        shape = tuple(int(n) for n in rng.integers(1, 17, 3))
        a = rng.random(shape) < rng.uniform(0.05, 0.5)
        b = (np.roll(a, tuple(rng.integers(-3, 4, 3)), axis=(0, 1, 2)) ^ (rng.random(shape) < 0.05)
             if rng.random() < 0.5 else rng.random(shape) < rng.uniform(0.05, 0.5))
        a.flat[rng.integers(a.size)] = True
        b.flat[rng.integers(b.size)] = True
        sp = tuple(float(s) for s in rng.choice([0.7, 1.0, 1.5, 3.0], 3))
        m = overlap_metrics(a, b)
        tp, fp, fn = overlap_counts(a, b)
        direct = dict(dice=2 * tp / (2 * tp + fp + fn), iou=tp / (tp + fp + fn), recall=tp / (tp + fn),
                      precision=tp / (tp + fp))
        mismatches += any(m[k] != v for k, v in direct.items())
        mismatches += hd95(a, b, sp) != brute_hd95(a, b, sp)
        mismatches += assd(a, b, sp) != brute_assd(a, b, sp)
        # The identity is exact on the rationals each metric rounds from; once
        # iou itself is rounded, re-deriving dice from it can move by 2 ulps.
        iou = Fraction(tp, tp + fp + fn)
        identity_ok &= m["dice"] == float(2 * iou / (1 + iou)) and m["iou"] == float(iou)
        worst_ulps = max(worst_ulps, abs(m["dice"] - 2 * m["iou"] / (1 + m["iou"])) / np.spacing(m["dice"]))
    verdict(5, mismatches == 0 and identity_ok,
            f"200 pairs up to 16^3: {mismatches} mismatches vs all-pairs/count oracles, dice = 2 iou/(1+iou) "
            f"exact on rationals {identity_ok} (float re-derivation within {worst_ulps:.0f} ulp)")


def test_criterion_06_shape_pyramid():
    cfg = NetworkConfig()
    w = init_weights(cfg, seed=0)
    x = Tensor(np.random.default_rng(6).standard_normal((1, 224, 224, 64)).astype(np.float32))
    t0 = time.perf_counter()
    with no_grad():
        out = forward(x, w, cfg)
    dt = time.perf_counter() - t0
    shapes = [f.shape for f in out.features]
    expect = [(c, 224 // 2 ** i, 224 // 2 ** i, 64 // 2 ** i) for i, c in zip(range(1, 5), (48, 96, 192, 384))]
    ok = shapes == expect and out.logits.shape == (1, 224, 224, 64)
    verdict(6, ok, f"features {shapes}, logits {out.logits.shape} ({dt:.0f}s)")


def test_criterion_07_parameter_count():
    n = param_count(NetworkConfig())
    dev = n / REFERENCE_PARAMS - 1
    verdict(7, abs(dev) <= PARAM_BAND, f"{n:,} parameters vs 17.22M reference ({dev:+.1%}, band +-25%)",
            soft=True)


def test_criterion_08_overfit_sphere():
    res = overfit_sphere(steps=200, size=(32, 32, 16), lr=1e-3, seed=0)
    # determinism: the opening steps replay bit for bit
    replay = []
    for _ in range(2):
        cfg = NetworkConfig()
        xv, m = sphere_volume((32, 32, 16), seed=0)
        w = init_weights(cfg, seed=0)
        st = AdamState(lr=1e-3)
        losses = [train_step(Tensor(xv[None]), m, w, cfg, st)[1] for _ in range(2)]
        replay.append((losses, w["final.weight"].data.tobytes()))
    deterministic = replay[0] == replay[1]
    ok = res["train_dice"] > OVERFIT_DICE and res["seconds"] < OVERFIT_SECONDS and deterministic
    verdict(8, ok, f"train Dice {res['train_dice']:.4f} (> {OVERFIT_DICE}), final loss {res['final_loss']:.4g}, "
                   f"{res['seconds']:.0f}s (< {OVERFIT_SECONDS:.0f}s), replay identical {deterministic}")


def test_criterion_09_eval_report(tmp_path, capsys):
    # Published benchmark numbers need the clinical dataset and GPU-scale
    # training; here the infer -> eval pipeline is exercised on supplied weights.
    w = init_weights(TOY, seed=1)
    save_weights(w, tmp_path / "w.json", {"network": TOY.to_dict()})
    (tmp_path / "img").mkdir()
    (tmp_path / "gt").mkdir()
    (tmp_path / "pred").mkdir()
    for i in range(2):
        xv, m = sphere_volume((24, 24, 16), seed=i)
        write_nifti(xv.astype(np.float32), tmp_path / "img" / f"c{i}.nii", spacing=(0.9, 0.9, 2.0))
        write_nifti(m, tmp_path / "gt" / f"c{i}.nii", spacing=(0.9, 0.9, 2.0))
        assert main(["infer", "--weights", str(tmp_path / "w.json"), "--input", str(tmp_path / "img" / f"c{i}.nii"),
                     "--output", str(tmp_path / "pred" / f"c{i}.nii"), "--threshold", "0.5"]) == 0
    capsys.readouterr()
    code = main(["eval", "--pred", str(tmp_path / "pred"), "--gt", str(tmp_path / "gt"), "--spacing-from-header"])
    rep = json.loads(capsys.readouterr().out)
    keys = {"dice", "iou", "recall", "precision", "f2", "hd95_mm", "assd_mm"}
    ok = code == 0 and len(rep["cases"]) == 2 and all(keys <= set(c) for c in rep["cases"])
    verdict(9, ok, f"eval emitted {len(rep['cases'])} per-case reports with fields {sorted(keys)}")


def test_criterion_10_determinism_across_workers(tmp_path, capsys):
    x = Tensor(sphere_volume((32, 32, 16), seed=3)[0][None])
    w = init_weights(TOY, seed=3)
    logits, grads, masks = set(), set(), set()
    save_weights(w, tmp_path / "w.json", {"network": TOY.to_dict()})
    write_nifti(x.data[0].astype(np.float32), tmp_path / "x.nii")
    for n in (1, 2, 8):
        with config.worker_count(n):
            for _ in range(2):
                with no_grad():
                    logits.add(forward(x, w, TOY).logits.data.tobytes())
            res = run_suite(instances=1, seed=7, only=["selective_scan", "abss", "srma"])
            grads.add(json.dumps([r.to_dict() for r in res]))
        main(["infer", "--weights", str(tmp_path / "w.json"), "--input", str(tmp_path / "x.nii"),
              "--output", str(tmp_path / f"y{n}.nii"), "--workers", str(n)])
        masks.add((tmp_path / f"y{n}.nii").read_bytes())
    capsys.readouterr()
    ok = len(logits) == len(grads) == len(masks) == 1
    verdict(10, ok, f"workers 1/2/8, repeated: forward logits {len(logits)} distinct, gradient-check results "
                    f"{len(grads)} distinct, infer masks {len(masks)} distinct")
