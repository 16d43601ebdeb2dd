"""Command-line driver: data generation, pretraining, training, evaluation,
the equivalence suite, heatmap export and the supervision-regime sweep."""
from __future__ import annotations

import argparse
import copy
import csv
import json
import resource
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import checks, data, metrics, models, nn
from .training import (HISTORY_FIELDS, TrainConfig, build_supervision_plan, evaluate,
                       pretrain_classifier, train)


class ConfigError(ValueError):
    pass


def parse_overrides(pairs) -> dict:
    out = {}
    for pair in pairs or ():
        key, sep, raw = pair.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def load_config(cls, path=None, overrides=None):
    """Build dataclass ``cls`` from an optional JSON file plus overrides."""
    raw = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"{path}: config file not found")
        raw = json.loads(path.read_text())
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
    raw.update(overrides or {})
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config field(s) {unknown}; known: {sorted(known)}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


@dataclass
class DataConfig:
    data_dir: str = "data"
    n_images: int = 1000
    n_train: int = 800
    scene: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0 < self.n_train <= self.n_images:
            raise ConfigError(f"need 0 < n_train <= n_images, got {self.n_train}/{self.n_images}")
        self.scene_config()

    def scene_config(self) -> data.SceneConfig:
        unknown = set(self.scene) - {f.name for f in fields(data.SceneConfig)}
        if unknown:
            raise ConfigError(f"unknown scene field(s) {sorted(unknown)}")
        return data.SceneConfig.from_json(self.scene)


@dataclass
class RunConfig:
    model_kind: str = "unrolled_lrp"
    encoder_preset: str = "vgg-mini"
    epsilon: float = 0.0
    lr: float = 3e-3
    epochs: int = 15
    batch_size: int = 10
    regime: int = 800
    seed: int = 0
    data_dir: str = "data"
    out_dir: str = "runs/default"
    width: int = 8
    weight_decay: float = 1e-2
    pixel_fraction: float = 0.5
    steps_per_epoch: int | None = None
    pretrained: str | None = None
    export_ids: list | None = None
    patience: int = 6

    def __post_init__(self):
        if self.model_kind not in models.MODEL_KINDS:
            raise ConfigError(f"model_kind {self.model_kind!r} not in {models.MODEL_KINDS}")
        if self.encoder_preset not in nn.PRESETS:
            raise ConfigError(f"encoder_preset {self.encoder_preset!r} not in {nn.PRESETS}")
        positive = {"batch_size": self.batch_size, "regime": self.regime, "width": self.width}
        for name, v in positive.items():
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if not isinstance(self.epochs, int) or self.epochs < 0:
            raise ConfigError(f"epochs must be a non-negative integer, got {self.epochs!r}")
        for name in ("epsilon", "lr", "weight_decay"):
            if float(getattr(self, name)) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not 0 <= self.pixel_fraction <= 1:
            raise ConfigError("pixel_fraction must lie in [0, 1]")
        if self.epsilon > 0 and self.model_kind != "unrolled_lrp":
            raise ConfigError("epsilon only applies to unrolled_lrp")

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                           weight_decay=self.weight_decay, pixel_fraction=self.pixel_fraction,
                           steps_per_epoch=self.steps_per_epoch, seed=self.seed)


def _load_data(data_dir) -> data.Dataset:
    root = Path(data_dir)
    if not (root / "meta.json").exists():
        raise ConfigError(f"{root}: no dataset found (run gen-data first)")
    return data.read_dataset(root)


def _write_csv(path: Path, rows, columns) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        wr.writeheader()
        for r in rows:
            wr.writerow({k: ("" if r.get(k) is None else r[k]) for k in columns})


def _echo(cfg, out_dir: Path, name="config.json") -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / name).write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n")


def load_model(checkpoint, expect_kind: str | None = None):
    path = Path(checkpoint)
    if not path.exists():
        raise ConfigError(f"{path}: checkpoint not found")
    header, tensors = nn.load_checkpoint(path)
    kind = header.get("model_kind")
    if expect_kind is not None and kind != expect_kind:
        raise ConfigError(f"{path}: checkpoint holds a {kind!r} model but the config asks for {expect_kind!r}")
    spec = nn.EncoderSpec.from_json(header["spec"])
    if kind == "classifier":
        kind = "unrolled_lrp"
    return models.make_model(kind, spec, dict(tensors), epsilon=header.get("epsilon", 0.0)), header


def _class_f1(spec, params, ds) -> float:
    return evaluate(models.UnrolledNet(spec, params), ds).f1


def export_images(model, ds: data.Dataset, ids, out_dir) -> list[Path]:
    """Softmaxed per-class heatmaps and the argmax segmentation for each image id."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pos = {int(i): k for k, i in enumerate(ds.ids)}
    missing = [i for i in ids if int(i) not in pos]
    if missing:
        raise ConfigError(f"image id(s) {missing} not in the dataset split")
    idx = [pos[int(i)] for i in ids]
    _, logits, _ = model.forward(ds.images[idx])
    probs = metrics.softmax(logits, axis=1)
    written = []
    for k, i in enumerate(ids):
        for c, name in enumerate(ds.class_names):
            written.append(metrics.export_heatmap_png(probs[k, c], out_dir / f"{int(i):04d}_{c}_{name}.png",
                                                      "softmaxed", ds.num_classes))
        written.append(metrics.export_segmentation_png(metrics.segment(logits[k]).astype(np.uint8),
                                                       out_dir / f"{int(i):04d}_seg.png"))
    return written


# -- verbs -------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = load_config(DataConfig, args.config, parse_overrides(args.set))
    ds = data.generate(cfg.scene_config(), cfg.n_images, cfg.n_train)
    root = data.write_dataset(ds, cfg.data_dir)
    print(f"wrote {len(ds)} images ({cfg.n_train} train / {cfg.n_images - cfg.n_train} val) to {root}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = load_config(RunConfig, args.config, parse_overrides(args.set))
    tr, va = _load_data(cfg.data_dir).split()
    spec = nn.preset(cfg.encoder_preset, tr.num_classes, width=cfg.width)
    params = nn.init_params(spec, cfg.seed)
    out = Path(cfg.out_dir)
    _echo(cfg, out)
    best, history = pretrain_classifier(spec, params, tr, va, cfg.train_config(), patience=cfg.patience)
    f1 = _class_f1(spec, best, va)
    nn.save_checkpoint(out / "pretrain.ckpt", {"model_kind": "classifier", "spec": spec.to_json(),
                                               "epoch": len(history), "f1": f1, "config": asdict(cfg),
                                               "class_names": list(tr.class_names)}, best)
    _write_csv(out / "pretrain_history.csv", history, ("epoch", "cls_loss", "f1"))
    print(f"pretrained {len(history)} epochs, val F1 {100 * f1:.2f}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(RunConfig, args.config, parse_overrides(args.set))
    tr, va = _load_data(cfg.data_dir).split()
    out = Path(cfg.out_dir)
    spec = nn.preset(cfg.encoder_preset, tr.num_classes, width=cfg.width)
    if cfg.pretrained:
        if not Path(cfg.pretrained).exists():
            raise ConfigError(f"{cfg.pretrained}: pretrained checkpoint not found")
        header, params = nn.load_checkpoint(cfg.pretrained)
        if nn.EncoderSpec.from_json(header["spec"]) != spec:
            raise ConfigError(f"{cfg.pretrained}: encoder does not match {cfg.encoder_preset} width {cfg.width}")
        params = {k: v for k, v in params.items() if not k.startswith("dec.")}
    else:
        params = nn.init_params(spec, cfg.seed)
    plan = build_supervision_plan(tr.labels, [cfg.regime], cfg.seed)
    f1_pre = _class_f1(spec, copy.deepcopy(params), va)
    model = models.make_model(cfg.model_kind, spec, params, seed=cfg.seed, epsilon=cfg.epsilon)
    _echo(cfg, out)

    on_epoch = None
    if cfg.export_ids:
        def on_epoch(epoch, m, row):
            export_images(m, va, cfg.export_ids, out / "export" / f"epoch_{epoch:03d}")

    res = train(model, tr, va, plan.ids(cfg.regime), cfg.train_config(), on_epoch)
    header = {"model_kind": cfg.model_kind, "spec": spec.to_json(), "epoch": res.best_epoch,
              "miou": res.best_miou, "epsilon": cfg.epsilon, "config": asdict(cfg),
              "class_names": list(tr.class_names)}
    nn.save_checkpoint(out / "model.ckpt", header, res.best_params)
    _write_csv(out / "history.csv", res.history, HISTORY_FIELDS)
    _write_csv(out / "timing.csv", [r for r in res.history if r["split"] == "train"], ("epoch", "wall_seconds"))
    best = models.make_model(cfg.model_kind, spec, res.best_params, seed=cfg.seed, epsilon=cfg.epsilon)
    ev = evaluate(best, va)
    val_rows = [r for r in res.history if r["split"] == "val"]
    summary = {"model_kind": cfg.model_kind, "regime": cfg.regime, "seed": cfg.seed,
               "labeled_ids": [int(i) for i in plan.ids(cfg.regime)],
               "best_epoch": res.best_epoch, "best_miou": ev.miou if val_rows else None,
               "final_miou": val_rows[-1]["miou"] if val_rows else None,
               "train_seconds": res.history[-1]["wall_seconds"] if res.history else 0.0,
               "f1_pre": f1_pre, "f1_best": ev.f1, "f1_final": val_rows[-1]["f1"] if val_rows else None,
               "per_class_iou": metrics.iou_report(_accumulate(best, va), va.class_names)["per_class"]}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    f1_txt = "n/a" if ev.f1 is None else f"{100 * ev.f1:.2f}"
    print(f"{cfg.model_kind} regime {cfg.regime} seed {cfg.seed}: best epoch {res.best_epoch}, "
          f"val mIoU {ev.miou:.4f}, F1 {f1_txt}")
    return 0


def _accumulate(model, ds, batch_size=50) -> metrics.ConfusionAccumulator:
    acc = metrics.ConfusionAccumulator(ds.num_classes)
    for s in range(0, len(ds), batch_size):
        acc.update(metrics.segment(model.forward(ds.images[s:s + batch_size])[1]), ds.masks[s:s + batch_size])
    return acc


def cmd_eval(args) -> int:
    expect = None
    if args.config is not None or args.set:
        expect = load_config(RunConfig, args.config, parse_overrides(args.set)).model_kind
    model, header = load_model(args.checkpoint, expect)
    ds = _load_data(args.data_dir)
    tr, va = ds.split()
    split = {"train": tr, "val": va, "all": ds}[args.split]
    if tuple(header.get("class_names", split.class_names)) != tuple(split.class_names):
        raise ConfigError("checkpoint and dataset disagree on class names")
    ev = evaluate(model, split)
    report = metrics.iou_report(_accumulate(model, split), split.class_names)
    report.update(model_kind=header["model_kind"], split=args.split, f1=ev.f1, checkpoint=str(args.checkpoint))
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name(f"eval_{args.split}.json")
    out.write_text(json.dumps(report, indent=2) + "\n")
    f1_txt = "n/a" if ev.f1 is None else f"{100 * ev.f1:.2f}"
    print(f"mIoU {ev.miou:.4f}  F1 {f1_txt}  ({len(split)} images, per-class IoU in {out})")
    return 0


def cmd_export(args) -> int:
    model, _ = load_model(args.checkpoint)
    _, va = _load_data(args.data_dir).split()
    written = export_images(model, va, args.ids, args.out)
    print(f"wrote {len(written)} PNGs to {args.out}")
    return 0


def cmd_check(args) -> int:
    cfg = checks.SuiteConfig(seeds=args.seeds, presets=tuple(args.presets), epsilon=args.epsilon, fault=args.fault)
    start = time.perf_counter()
    rows = checks.run_suite(cfg)
    path = checks.write_rows(rows, args.out)
    bad = checks.failures(rows)
    asserted = sum(r.status != "info" for r in rows)
    print(f"{asserted - len(bad)}/{asserted} asserted checks passed in {time.perf_counter() - start:.1f}s; "
          f"report in {path}")
    for r in bad:
        print(f"FAIL seed={r.seed} preset={r.preset} check={r.check} class={r.class_id} "
              f"value={r.value:.3g} tol={r.tolerance:g} {r.detail}")
    return 1 if bad else 0


# -- sweep -------------------------------------------------------------------

@dataclass
class SweepConfig:
    out_dir: str = "sweep"
    data: dict = field(default_factory=lambda: {"n_images": 1000, "n_train": 800,
                                                "scene": {"height": 32, "width": 32}})
    kinds: list = field(default_factory=lambda: ["unrolled_lrp", "unet", "wsae", "fcn"])
    regimes: list = field(default_factory=lambda: [4, 20, 100, 800])
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    run: dict = field(default_factory=lambda: {"epochs": 12})
    lr_by_kind: dict = field(default_factory=dict)
    lr_grid: list = field(default_factory=lambda: [1e-3, 3e-3, 1e-2])
    select_epochs: int = 8
    pretrain: dict = field(default_factory=lambda: {"epochs": 40, "lr": 3e-3})
    export_ids: list = field(default_factory=lambda: [800, 801, 802, 803, 804, 805])

    def __post_init__(self):
        for k in self.kinds:
            if k not in models.MODEL_KINDS:
                raise ConfigError(f"unknown model kind {k!r} in sweep")
        unknown = set(self.lr_by_kind) - set(models.MODEL_KINDS)
        if unknown:
            raise ConfigError(f"lr_by_kind has unknown kinds {sorted(unknown)}")
        if not self.lr_grid and set(self.kinds) - set(self.lr_by_kind):
            raise ConfigError("lr_grid is empty and lr_by_kind does not cover every kind")
        self.cell_config("unrolled_lrp", max(self.regimes), self.seeds[0], 1e-3)

    def _run(self, kind, regime, seed, lr, out_dir, **extra) -> RunConfig:
        root = Path(self.out_dir)
        return load_config(RunConfig, None, dict(
            self.run, model_kind=kind, regime=regime, seed=seed, lr=lr, data_dir=str(root / "data"),
            out_dir=str(out_dir), pretrained=str(root / "pretrain" / "pretrain.ckpt"), **extra))

    def cell_config(self, kind, regime, seed, lr) -> RunConfig:
        full = regime == max(self.regimes)
        export = self.export_ids if kind == "unrolled_lrp" and full and seed == self.seeds[0] else None
        return self._run(kind, regime, seed, lr, Path(self.out_dir) / "cells" / f"{kind}_r{regime}_s{seed}",
                         export_ids=export)

    def selection_config(self, kind, lr) -> RunConfig:
        """Learning-rate probe: full supervision, first seed, validation mIoU decides."""
        return self._run(kind, max(self.regimes), self.seeds[0], lr,
                         Path(self.out_dir) / "select" / f"{kind}_lr{lr:g}", epochs=self.select_epochs)


def _run_verb(verb: str, cfg, log: Path) -> None:
    cfg_path = log.with_suffix(".json")
    cfg_path.parent.mkdir(parents=True, exist_ok=True)
    cfg_path.write_text(json.dumps(asdict(cfg), indent=2) + "\n")
    with open(log, "w") as fh:
        proc = subprocess.run([sys.executable, "-m", "unrolled_lrp.cli", verb, "--config", str(cfg_path)],
                              stdout=fh, stderr=subprocess.STDOUT)
    if proc.returncode != 0:
        raise RuntimeError(f"{verb} failed; see {log}")


def summarize_sweep(root, kinds, regimes, seeds) -> list[dict]:
    root = Path(root)
    rows = []
    for kind in kinds:
        for regime in regimes:
            cells = []
            for seed in seeds:
                p = root / "cells" / f"{kind}_r{regime}_s{seed}" / "summary.json"
                if p.exists():
                    cells.append(json.loads(p.read_text()))
            if not cells:
                continue
            m = np.array([c["best_miou"] for c in cells])
            row = {"model_kind": kind, "regime": regime, "n_seeds": len(cells),
                   "miou_mean": float(m.mean()), "miou_std": float(m.std()),
                   "miou_per_seed": " ".join(f"{v:.4f}" for v in m),
                   "seeds": " ".join(str(c["seed"]) for c in cells)}
            if cells[0]["f1_best"] is not None:
                row["f1_pre_mean"] = float(np.mean([c["f1_pre"] for c in cells]))
                row["f1_post_mean"] = float(np.mean([c["f1_best"] for c in cells]))
                row["f1_post_per_seed"] = " ".join(f"{c['f1_best']:.4f}" for c in cells)
            rows.append(row)
    return rows


SUMMARY_FIELDS = ("model_kind", "regime", "n_seeds", "miou_mean", "miou_std", "miou_per_seed", "seeds",
                  "f1_pre_mean", "f1_post_mean", "f1_post_per_seed")


def select_learning_rates(cfg: SweepConfig, logs: Path) -> dict:
    """Per-kind learning rate with the best fully supervised validation mIoU."""
    chosen, table = {}, {}
    for kind in cfg.kinds:
        if kind in cfg.lr_by_kind:
            chosen[kind] = float(cfg.lr_by_kind[kind])
            continue
        scores = {}
        for lr in cfg.lr_grid:
            run = cfg.selection_config(kind, lr)
            summary = Path(run.out_dir) / "summary.json"
            if not summary.exists():
                _run_verb("train", run, logs / f"select_{kind}_lr{lr:g}.log")
            scores[lr] = json.loads(summary.read_text())["best_miou"]
        chosen[kind] = max(scores, key=scores.get)
        table[kind] = {f"{lr:g}": v for lr, v in scores.items()}
        print(f"lr for {kind}: {chosen[kind]:g} (" + ", ".join(f"{lr:g}: {v:.4f}" for lr, v in scores.items())
              + ")", flush=True)
    path = Path(cfg.out_dir) / "lr_selection.json"
    path.write_text(json.dumps({"chosen": chosen, "val_miou": table}, indent=2) + "\n")
    return chosen


def cmd_sweep(args) -> int:
    cfg = load_config(SweepConfig, args.config, parse_overrides(args.set))
    root = Path(cfg.out_dir)
    _echo(cfg, root, "sweep_config.json")
    logs = root / "logs"
    if not (root / "data" / "meta.json").exists():
        dcfg = load_config(DataConfig, None, dict(cfg.data, data_dir=str(root / "data")))
        _run_verb("gen-data", dcfg, logs / "gen-data.log")
    if not (root / "pretrain" / "pretrain.ckpt").exists():
        pcfg = load_config(RunConfig, None, dict(cfg.run, **cfg.pretrain, data_dir=str(root / "data"),
                                                 out_dir=str(root / "pretrain")))
        print("pretraining shared classifier", flush=True)
        _run_verb("pretrain", pcfg, logs / "pretrain.log")
    start = time.perf_counter()
    lrs = select_learning_rates(cfg, logs)
    cells = [(s, r, k) for s in cfg.seeds for r in cfg.regimes for k in cfg.kinds]
    for n, (seed, regime, kind) in enumerate(cells, 1):
        cell = cfg.cell_config(kind, regime, seed, lrs[kind])
        if (Path(cell.out_dir) / "summary.json").exists():
            continue
        t = time.perf_counter()
        _run_verb("train", cell, logs / f"{kind}_r{regime}_s{seed}.log")
        s = json.loads((Path(cell.out_dir) / "summary.json").read_text())
        print(f"[{n}/{len(cells)}] {kind} regime {regime} seed {seed}: mIoU {s['best_miou']:.4f} "
              f"({time.perf_counter() - t:.0f}s)", flush=True)
    rows = summarize_sweep(root, cfg.kinds, cfg.regimes, cfg.seeds)
    _write_csv(root / "summary.csv", rows, SUMMARY_FIELDS)
    for r in rows:
        print(f"{r['model_kind']:>14} {r['regime']:>4}  {r['miou_mean']:.4f} ± {r['miou_std']:.4f}")
    usage = resource.getrusage(resource.RUSAGE_CHILDREN)
    timing = {"wall_seconds": time.perf_counter() - start, "child_cpu_seconds": usage.ru_utime + usage.ru_stime,
              "note": "this invocation only; cells resumed from disk are not counted"}
    (root / "sweep_timing.json").write_text(json.dumps(timing, indent=2) + "\n")
    print(f"sweep done in {timing['wall_seconds']:.0f}s ({timing['child_cpu_seconds']:.0f}s CPU); "
          f"summary in {root / 'summary.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="unrolled-lrp", description=__doc__)
    sub = p.add_subparsers(dest="verb", required=True)

    def configurable(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field")
        sp.set_defaults(func=func)
        return sp

    configurable("gen-data", cmd_gen_data, "generate the synthetic shapes dataset")
    configurable("pretrain", cmd_pretrain, "pretrain the classifier encoder")
    configurable("train", cmd_train, "train one model in one supervision regime")
    configurable("sweep", cmd_sweep, "run every model kind x regime x seed")

    sp = configurable("eval", cmd_eval, "evaluate a checkpoint (config only checks the model kind)")
    sp.add_argument("checkpoint")
    sp.add_argument("--data-dir", required=True)
    sp.add_argument("--split", choices=("train", "val", "all"), default="val")
    sp.add_argument("--out", help="per-class IoU JSON (default: next to the checkpoint)")

    sp = sub.add_parser("export", help="write softmaxed heatmaps and segmentations for val images")
    sp.add_argument("checkpoint")
    sp.add_argument("--data-dir", required=True)
    sp.add_argument("--ids", type=int, nargs="+", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_export)

    sp = sub.add_parser("check", help="run the formal equivalence suite")
    sp.add_argument("--seeds", type=int, default=10)
    sp.add_argument("--presets", nargs="+", default=["vgg-mini", "vgg-deep"], choices=nn.PRESETS)
    sp.add_argument("--epsilon", type=float, default=0.0)
    sp.add_argument("--fault", choices=checks.FAULTS)
    sp.add_argument("--out", default="checks.csv")
    sp.set_defaults(func=cmd_check)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, data.DatasetError, nn.SpecError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
