"""Executable equivalence suite: decoder vs reference LRP, IxG, conservation,
gradient partition and finite-difference gradient checks on seeded nets.

Rows have status ``pass``/``fail`` for asserted checks and ``info`` for
descriptive ones.  The suite passes iff no row fails.
"""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import nn
from .data import SceneConfig, generate_sample
from .losses import cls_loss, seg_loss
from .lrp import LrpConfig, lrp_full
from .models import UnrolledNet, param_vars
from .nn import MaxPool, ReLU
from .tensor import seeded_rng
from .training import concordance_probe

EQUIV_TOL = 1e-6
FD_TOL = 1e-4
FD_STEP = 1e-5
PARTITION_EPSILON = 1e-2
FAULTS = ("unflipped-kernels",)


@dataclass
class CheckRow:
    seed: int
    preset: str
    epsilon: float
    check: str
    class_id: int | None
    value: float
    tolerance: float
    status: str
    detail: str = ""


@dataclass
class SuiteConfig:
    seeds: int = 10
    presets: tuple = ("vgg-mini", "vgg-deep")
    epsilon: float = 0.0
    fault: str | None = None
    num_classes: int = 5
    width: int = 4
    size: int = 16
    batch: int = 10
    fd_samples: int = 24


def _rel_dev(a, b) -> float:
    scale = np.max(np.abs(b))
    return float(np.max(np.abs(a - b)) / scale) if scale > 0 else float(np.max(np.abs(a)))


def _asserted(value: float, tol: float, strict: bool = True) -> str:
    return "pass" if (value < tol if strict else value <= tol) else "fail"


def _pattern(spec, trace) -> list:
    """Everything that makes the network piecewise linear: ReLU masks and switches."""
    out = []
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, ReLU):
            out.append(trace.acts[i] > 0)
        elif isinstance(layer, MaxPool):
            out.append(trace.switches[i])
    return out


def _same_pattern(a, b) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def _fd_coords(shape, k, rng) -> list:
    total = int(np.prod(shape))
    flat = rng.choice(total, size=min(k, total), replace=False)
    return [np.unravel_index(int(f), shape) for f in np.sort(flat)]


def fd_check(f, analytic: dict, tensors: dict, pattern_of, base_pattern, samples: int, rng, h: float = FD_STEP):
    """Central differences on sampled coordinates of each tensor.

    ``f()`` evaluates the scalar with the tensors as currently mutated;
    ``pattern_of()`` returns the piecewise-linear pattern for that state.
    Coordinates whose perturbation flips a ReLU or a switch are excluded.
    Returns ``(max relative error, checked, excluded)``.
    """
    worst, checked, excluded = 0.0, 0, 0
    for name, x in tensors.items():
        g = analytic[name]
        fd_vals, an_vals = [], []
        for idx in _fd_coords(x.shape, samples, rng):
            old = x[idx]
            x[idx] = old + h
            up, pat_up = f(), pattern_of()
            x[idx] = old - h
            down, pat_down = f(), pattern_of()
            x[idx] = old
            if not (_same_pattern(pat_up, base_pattern) and _same_pattern(pat_down, base_pattern)):
                excluded += 1
                continue
            fd_vals.append((up - down) / (2 * h))
            an_vals.append(g[idx])
        if fd_vals:
            fd_vals, an_vals = np.array(fd_vals), np.array(an_vals)
            scale = max(np.max(np.abs(fd_vals)), np.max(np.abs(an_vals)), 1e-12)
            worst = max(worst, float(np.max(np.abs(fd_vals - an_vals)) / scale))
            checked += len(fd_vals)
    return worst, checked, excluded


def _heatmap_loss_grads(net, img, masks, detach):
    pv = param_vars(net.params, True)
    _, heat, _ = net.graph(img, pv, detach_gates=detach)
    ag.custom(seg_loss, heat, masks).backward()
    return {k: (v.grad if v.grad is not None else np.zeros_like(v.data)) for k, v in pv.items()}


def _encoder_path_contribution(spec, params, img, masks, epsilon) -> float:
    net = UnrolledNet(spec, params, epsilon=epsilon)
    full = _heatmap_loss_grads(net, img, masks, detach=False)
    decoder = _heatmap_loss_grads(net, img, masks, detach=True)
    return max(float(np.max(np.abs(full[k] - decoder[k]))) for k in full)


def check_one(cfg: SuiteConfig, preset: str, seed: int) -> list[CheckRow]:
    eps = cfg.epsilon
    rows = []

    def row(check, class_id, value, tol, status, detail=""):
        rows.append(CheckRow(seed, preset, eps, check, class_id, float(value), tol, status, detail))

    spec = nn.preset(preset, cfg.num_classes, width=cfg.width)
    params = nn.init_params(spec, seed)
    rng = seeded_rng(seed, 0xC4EC)
    img = rng.uniform(size=(cfg.batch, 3, cfg.size, cfg.size))
    K = spec.num_classes
    net = UnrolledNet(spec, params, epsilon=eps, flip_kernels=cfg.fault != "unflipped-kernels")
    scores, heat, trace = net.forward(img)

    refs = [lrp_full(spec, params, trace, c, LrpConfig(eps)) for c in range(K)]
    for c in range(K):
        dev = _rel_dev(heat[:, c], refs[c].heatmap)
        row("decoder_vs_reference", c, dev, EQUIV_TOL, _asserted(dev, EQUIV_TOL), "max relative deviation")

        g = nn.backward(spec, params, trace, np.eye(K)[c]).input
        dev = _rel_dev(heat[:, c], (img * g).sum(axis=1))
        if eps == 0:
            row("input_times_gradient", c, dev, EQUIV_TOL, _asserted(dev, EQUIV_TOL))
        else:
            row("input_times_gradient", c, dev, EQUIV_TOL, "info", "LRP-epsilon is not IxG; reported only")

        s = np.abs(scores[:, c])
        totals = np.stack(refs[c].layer_totals + [heat[:, c].sum(axis=(1, 2))])
        resid = float(np.max(np.abs(totals - scores[:, c]) / s))
        layer_totals = " ".join(f"{t:.6g}" for t in totals[:, 0])
        if eps == 0:
            row("conservation", c, resid, EQUIV_TOL, _asserted(resid, EQUIV_TOL), f"totals[0]: {layer_totals}")
        else:
            row("conservation", c, resid, EQUIV_TOL, "info", f"descriptive; totals[0]: {layer_totals}")

    # one input per seed for the partition rows
    one, masks = img[:1], rng.integers(0, K, size=(1, cfg.size, cfg.size))
    contrib = _encoder_path_contribution(spec, params, one, masks, 0.0)
    row("partition_exact", None, contrib, 0.0, _asserted(contrib, 0.0, strict=False),
        "encoder-path part of heatmap-loss gradient, epsilon=0")
    contrib = _encoder_path_contribution(spec, params, one, masks, PARTITION_EPSILON)
    row("partition_smoothed", None, contrib, 0.0, "info",
        f"epsilon={PARTITION_EPSILON}; {'nonzero' if contrib > 0 else 'zero'}")

    rows.extend(_fd_rows(cfg, preset, seed, eps))

    # relevance magnitude as epsilon grows, for positive-score classes
    eps_ladder = (0.0, 1e-6, 1e-4, 1e-2, 1e-1)
    violations = 0
    for c in range(K):
        pos = scores[:, c] > 0
        if not pos.any():
            continue
        totals = [np.abs(lrp_full(spec, params, trace, c, LrpConfig(e)).relevance.sum(axis=(1, 2, 3)))[pos]
                  for e in eps_ladder]
        violations += int(np.sum(np.diff(np.stack(totals), axis=0) > 1e-12 * totals[0]))
    row("epsilon_monotonicity", None, violations, 0.0, "info", "count of increases along the epsilon ladder")
    return rows


def _fd_rows(cfg: SuiteConfig, preset: str, seed: int, eps: float) -> list[CheckRow]:
    spec = nn.preset(preset, cfg.num_classes, width=3)
    params = nn.init_params(spec, seed)
    rng = seeded_rng(seed, 0xFD)
    img = rng.uniform(size=(2, 3, 8, 8))
    sg = rng.normal(size=(2, spec.num_classes))
    rows = []

    def forward_state():
        return nn.forward(spec, params, img)

    def f():
        return float(np.sum(sg * forward_state()[0]))

    def pattern():
        return _pattern(spec, forward_state()[1])

    _, trace = forward_state()
    base = _pattern(spec, trace)
    grads = nn.backward(spec, params, trace, sg)
    analytic = dict(grads.params, input=grads.input)
    tensors = dict(params, input=img)
    err, n, excl = fd_check(f, analytic, tensors, pattern, base, cfg.fd_samples, rng)
    rows.append(CheckRow(seed, preset, eps, "fd_layers", None, err, FD_TOL, _asserted(err, FD_TOL),
                         f"{n} coordinates checked, {excl} kink-crossing excluded"))

    logits = rng.normal(size=(2, spec.num_classes, 3, 3))
    masks = rng.integers(0, spec.num_classes, size=(2, 3, 3))
    _, g = seg_loss(logits, masks)
    err, n, _ = fd_check(lambda: seg_loss(logits, masks)[0], {"x": g}, {"x": logits}, lambda: [], [],
                         logits.size, rng)
    rows.append(CheckRow(seed, preset, eps, "fd_seg_loss", None, err, FD_TOL, _asserted(err, FD_TOL), f"{n} coordinates"))
    scores = rng.normal(scale=3.0, size=(2, spec.num_classes))
    labels = rng.integers(0, 2, size=(2, spec.num_classes - 1))
    _, g = cls_loss(scores, labels)
    err, n, _ = fd_check(lambda: cls_loss(scores, labels)[0], {"x": g}, {"x": scores}, lambda: [], [],
                         scores.size, rng)
    rows.append(CheckRow(seed, preset, eps, "fd_cls_loss", None, err, FD_TOL, _asserted(err, FD_TOL), f"{n} coordinates"))

    # heatmap loss through the tied decoder
    net = UnrolledNet(spec, params, epsilon=eps)
    seg_masks = rng.integers(0, spec.num_classes, size=(2, 8, 8))
    dec_grads = _heatmap_loss_grads(net, img, seg_masks, detach=eps == 0)
    err, n, excl = fd_check(lambda: seg_loss(net.forward(img)[1], seg_masks)[0], dec_grads, dict(params),
                            pattern, base, cfg.fd_samples, rng)
    rows.append(CheckRow(seed, preset, eps, "fd_heatmap_loss", None, err, FD_TOL, _asserted(err, FD_TOL),
                         f"{n} coordinates checked, {excl} kink-crossing excluded"))
    return rows


def aggregate_rows(cfg: SuiteConfig, rows: list[CheckRow]) -> list[CheckRow]:
    out = []
    for preset in cfg.presets:
        smooth = [r for r in rows if r.preset == preset and r.check == "partition_smoothed"]
        nonzero = sum(r.value > 0 for r in smooth)
        need = int(np.ceil(0.9 * len(smooth)))
        out.append(CheckRow(-1, preset, cfg.epsilon, "partition_smoothed_count", None, nonzero, need,
                            "pass" if nonzero >= need else "fail",
                            f"nonzero encoder-path gradient on {nonzero}/{len(smooth)} inputs"))
    return out


def concordance_rows(cfg: SuiteConfig) -> list[CheckRow]:
    """Loss-concordance probe: absent-class scores after a seg-loss step (reported)."""
    spec = nn.preset(cfg.presets[0], cfg.num_classes, width=cfg.width)
    scene = SceneConfig(height=cfg.size, width=cfg.size, size_range=(0.2, 0.3), min_objects=1, max_objects=1,
                        palette=SceneConfig().palette[: cfg.num_classes - 1])
    held = 0
    for seed in range(cfg.seeds):
        sample = generate_sample(scene, seed)
        net = UnrolledNet(spec, nn.init_params(spec, seed))
        delta = concordance_probe(net, sample.image, sample.mask.astype(np.int64), sample.labels)
        held += int(np.all(delta <= 0))
    return [CheckRow(-1, cfg.presets[0], 0.0, "loss_concordance", None, held, cfg.seeds, "info",
                     f"absent-class scores did not rise on {held}/{cfg.seeds} trials")]


def run_suite(cfg: SuiteConfig, progress=None) -> list[CheckRow]:
    if cfg.fault is not None and cfg.fault not in FAULTS:
        raise ValueError(f"unknown fault {cfg.fault!r}; known: {FAULTS}")
    rows = []
    for preset in cfg.presets:
        for seed in range(cfg.seeds):
            rows.extend(check_one(cfg, preset, seed))
            if progress is not None:
                progress(preset, seed)
    rows.extend(aggregate_rows(cfg, rows))
    rows.extend(concordance_rows(cfg))
    return rows


def failures(rows: list[CheckRow]) -> list[CheckRow]:
    return [r for r in rows if r.status == "fail"]


def write_rows(rows: list[CheckRow], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=list(CheckRow.__dataclass_fields__))
        wr.writeheader()
        for r in rows:
            wr.writerow(asdict(r))
    return path
