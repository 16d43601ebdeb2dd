"""Acceptance criteria.

Criteria 1-5 run the equivalence suite at full size (10 seeds x 2 presets).
Criteria 6-9 read the artifacts of ``unrolled-lrp sweep --set out_dir=artifacts/sweep``.
Each criterion prints one PASS/FAIL line in the terminal summary.
"""
import csv
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from conftest import ACCEPTANCE_LINES
from unrolled_lrp import checks, data
from unrolled_lrp.metrics import SEG_PALETTE

SWEEP = Path(os.environ.get("UNROLLED_LRP_SWEEP", Path(__file__).resolve().parents[1] / "artifacts" / "sweep"))
SMALL, SECOND, FULL = 4, 20, 800


def record(number, ok, detail):
    ACCEPTANCE_LINES.append(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


@pytest.fixture(scope="module")
def suite():
    start = time.process_time()
    rows = checks.run_suite(checks.SuiteConfig())
    return rows, time.process_time() - start


def asserted(rows, *names):
    picked = [r for r in rows if r.check in names and r.status != "info"]
    assert picked, names
    return picked


def test_budget_and_shape(suite):
    rows, cpu = suite
    seeds = {(r.preset, r.seed) for r in rows if r.check == "decoder_vs_reference"}
    assert len(seeds) == 20
    assert cpu < 300, f"equivalence suite took {cpu:.0f}s CPU"


def test_criterion_1_decoder_matches_reference(suite):
    rows = asserted(suite[0], "decoder_vs_reference")
    worst = max(r.value for r in rows)
    record(1, all(r.status == "pass" for r in rows) and worst < 1e-6,
           f"decoder vs reference LRP, worst relative deviation {worst:.2e} over {len(rows)} (seed, net, class) rows")


def test_criterion_2_lrp0_is_ixg(suite):
    rows = asserted(suite[0], "input_times_gradient")
    worst = max(r.value for r in rows)
    record(2, worst < 1e-6, f"heatmap vs input x gradient, worst relative deviation {worst:.2e}")


def test_criterion_3_conservation(suite):
    rows = asserted(suite[0], "conservation")
    worst = max(r.value for r in rows)
    record(3, worst < 1e-6, f"per-layer totals and heatmap sum vs score, worst relative residual {worst:.2e}")


def test_criterion_4_gradient_partition(suite):
    exact = asserted(suite[0], "partition_exact")
    counts = asserted(suite[0], "partition_smoothed_count")
    zero = all(r.value == 0.0 for r in exact)
    nonzero = all(r.value >= 9 for r in counts)
    detail = ", ".join(f"{r.preset}: {int(r.value)}/10 nonzero at eps=1e-2" for r in counts)
    record(4, zero and nonzero, f"eps=0 encoder-path gradient exactly 0 on {len(exact)} inputs: {zero}; {detail}")


def test_criterion_5_finite_differences(suite):
    rows = asserted(suite[0], "fd_layers", "fd_seg_loss", "fd_cls_loss", "fd_heatmap_loss")
    worst = max(r.value for r in rows)
    record(5, worst < 1e-4, f"central differences, worst relative error {worst:.2e} over {len(rows)} rows")


# -- sweep criteria ---------------------------------------------------------

@pytest.fixture(scope="module")
def cells():
    if not (SWEEP / "summary.csv").exists():
        pytest.fail(f"no sweep artifacts under {SWEEP}; run `unrolled-lrp sweep --set out_dir={SWEEP}`")
    out = {}
    for p in (SWEEP / "cells").glob("*/summary.json"):
        s = json.loads(p.read_text())
        out[(s["model_kind"], s["regime"], s["seed"])] = s
    return out


def miou_table(cells, kind, regime):
    vals = {seed: c["best_miou"] for (k, r, seed), c in cells.items() if k == kind and r == regime}
    assert len(vals) == 3, f"{kind} regime {regime}: {len(vals)} seeds"
    return vals


def test_sweep_budget():
    timing = json.loads((SWEEP / "sweep_timing.json").read_text())
    with open(SWEEP / "summary.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert {(r["model_kind"], int(r["regime"])) for r in rows} == \
        {(k, r) for k in ("unrolled_lrp", "unet", "wsae", "fcn") for r in (SMALL, SECOND, 100, FULL)}
    assert timing["child_cpu_seconds"] < 2 * 3600


def test_criterion_6_low_label_superiority(cells):
    lrp = {r: miou_table(cells, "unrolled_lrp", r) for r in (SMALL, SECOND, FULL)}
    unet = {r: miou_table(cells, "unet", r) for r in (SMALL, SECOND, FULL)}
    mean = {k: {r: np.mean(list(v[r].values())) for r in v} for k, v in (("lrp", lrp), ("unet", unet))}
    means_ok = (mean["lrp"][SMALL] > mean["unet"][SMALL] and mean["lrp"][SECOND] > mean["unet"][SECOND]
                and mean["lrp"][SMALL] - mean["unet"][SMALL] > mean["lrp"][FULL] - mean["unet"][FULL])
    per_seed = 0
    for s in lrp[SMALL]:
        margin = {r: lrp[r][s] - unet[r][s] for r in (SMALL, SECOND, FULL)}
        per_seed += margin[SMALL] > 0 and margin[SECOND] > 0 and margin[SMALL] > margin[FULL]
    detail = (f"mean mIoU unrolled/UNet: r{SMALL} {mean['lrp'][SMALL]:.3f}/{mean['unet'][SMALL]:.3f}, "
              f"r{SECOND} {mean['lrp'][SECOND]:.3f}/{mean['unet'][SECOND]:.3f}, "
              f"r{FULL} {mean['lrp'][FULL]:.3f}/{mean['unet'][FULL]:.3f}; ordering holds on {per_seed}/3 seeds")
    record(6, means_ok and per_seed >= 2, detail)


def test_criterion_7_ablation_ordering(cells):
    m = {k: np.mean(list(miou_table(cells, k, SMALL).values())) for k in ("unrolled_lrp", "wsae", "fcn")}
    record(7, m["unrolled_lrp"] > m["wsae"] > m["fcn"],
           f"regime {SMALL} mean mIoU unrolled {m['unrolled_lrp']:.3f}, WS-AE {m['wsae']:.3f}, FCN {m['fcn']:.3f}")


def test_criterion_8_f1_non_degradation(cells):
    gaps = {}
    for regime in (SMALL, SECOND, 100, FULL):
        runs = [c for (k, r, _), c in cells.items() if k == "unrolled_lrp" and r == regime]
        assert len(runs) == 3
        gaps[regime] = 100 * (np.mean([c["f1_best"] for c in runs]) - np.mean([c["f1_pre"] for c in runs]))
    record(8, all(abs(g) <= 3.0 for g in gaps.values()),
           "F1 change after segmentation training (points): "
           + ", ".join(f"r{r} {g:+.2f}" for r, g in gaps.items()))


def decode_seg(path):
    rgb = np.asarray(Image.open(path).convert("RGB")).astype(int)
    dist = ((rgb[:, :, None, :] - SEG_PALETTE[None, None].astype(int)) ** 2).sum(-1)
    return dist.argmin(-1)


def test_criterion_9_heatmap_evolution(cells):
    cell = SWEEP / "cells" / f"unrolled_lrp_r{FULL}_s0"
    cfg = json.loads((cell / "config.json").read_text())
    ids = cfg["export_ids"]
    epochs = sorted((cell / "export").glob("epoch_*"))
    ds = data.read_dataset(SWEEP / "data")
    k = ds.num_classes
    complete = len(ids) == 6 and len(epochs) == cfg["epochs"] and all(
        len(list(e.glob("*_seg.png"))) == 6 and len(list(e.glob("*.png"))) == 6 * (k + 1) for e in epochs)
    pos = {int(i): n for n, i in enumerate(ds.ids)}
    hits, ious = 0, []
    for i in ids:
        mask = ds.masks[pos[i]]
        fg = np.bincount(mask.ravel(), minlength=k)[1:]
        major = int(fg.argmax()) + 1
        pred = decode_seg(epochs[-1] / f"{i:04d}_seg.png")
        inter = np.sum((pred == major) & (mask == major))
        union = np.sum((pred == major) | (mask == major))
        ious.append(inter / union)
        hits += ious[-1] > 0.5
    record(9, complete and hits >= 4,
           f"{len(epochs)} epoch snapshots complete: {complete}; majority-class IoU "
           + " ".join(f"{v:.2f}" for v in ious) + f" ({hits}/6 above 0.5)")
