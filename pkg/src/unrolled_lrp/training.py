"""Combined classification + segmentation training with mixed supervision."""
from __future__ import annotations

import copy
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .data import Dataset, augment
from .losses import UNLABELED, cls_loss, seg_loss
from .metrics import ConfusionAccumulator, f1_multilabel, miou, segment
from .models import param_vars
from .optim import AdamW
from .tensor import seeded_rng


class TrainingError(RuntimeError):
    pass


@dataclass
class Batch:
    images: np.ndarray  # (B, 3, H, W)
    image_labels: np.ndarray  # (B, num_fg) multi-hot
    masks: np.ndarray  # (B, H, W); UNLABELED where no pixel labels

    @property
    def pixel_labeled(self) -> np.ndarray:
        return np.any(self.masks != UNLABELED, axis=(1, 2))


@dataclass
class SupervisionPlan:
    labeled: dict  # regime size -> sorted list of dataset indices
    seed: int

    def ids(self, regime: int) -> list:
        return self.labeled[regime]


def _balanced_pick(labels: np.ndarray, size: int, rng, class_probs=None) -> list:
    """Greedy class-balanced sampling without replacement.

    With ``class_probs`` a target class is drawn from that distribution;
    otherwise the currently least-covered class is chosen (random tie-break).
    Then a random unused image containing the class is added.
    """
    n, c = labels.shape
    chosen, used, counts = [], np.zeros(n, dtype=bool), np.zeros(c)
    while len(chosen) < size:
        if class_probs is None:
            order = rng.permutation(c)
            order = order[np.argsort(counts[order], kind="stable")]
        else:
            order = rng.choice(c, size=c, replace=False, p=class_probs)
        for k in order:
            cand = np.flatnonzero(labels[:, k].astype(bool) & ~used)
            if cand.size:
                break
        else:
            cand = np.flatnonzero(~used)
        pick = int(rng.choice(cand))
        used[pick] = True
        chosen.append(pick)
        counts += labels[pick]
    return sorted(chosen)


def build_supervision_plan(labels: np.ndarray, regime_sizes, seed: int,
                           balanced_max_per_class: int = 5) -> SupervisionPlan:
    """Choose which training images keep their pixel labels, per regime.

    Regimes up to ``balanced_max_per_class`` images per class use greedy
    class-balanced sampling (every class at least once); larger ones sample
    classes from the average of the uniform and the empirical class
    distribution.  A regime equal to the dataset size takes everything.
    """
    labels = np.asarray(labels)
    n, c = labels.shape
    plan = {}
    for size in regime_sizes:
        size = int(size)
        if size > n:
            raise ValueError(f"regime {size} exceeds dataset size {n}")
        rng = seeded_rng(seed, 0x51A7, size)
        if size == n:
            plan[size] = list(range(n))
        elif size <= balanced_max_per_class * c:
            if size < c:
                raise ValueError(f"regime {size} cannot cover {c} classes")
            plan[size] = _balanced_pick(labels, size, rng)
            covered = labels[plan[size]].sum(axis=0)
            present = labels.sum(axis=0) > 0
            if np.any(covered[present] == 0):
                raise ValueError(f"regime {size}: could not cover every class")
        else:
            freq = labels.sum(axis=0) / labels.sum()
            plan[size] = _balanced_pick(labels, size, rng, 0.5 * freq + 0.5 / c)
    return SupervisionPlan(labeled=plan, seed=seed)


class CyclicSampler:
    """Endless stream of indices from successive seeded permutations of a pool."""

    def __init__(self, pool, rng):
        self.pool = np.asarray(pool, dtype=np.int64)
        self.rng = rng
        self._order = np.empty(0, dtype=np.int64)

    def take(self, k: int) -> np.ndarray:
        out = []
        while len(out) < k and self.pool.size:
            if self._order.size == 0:
                self._order = self.rng.permutation(self.pool)
            m = min(k - len(out), self._order.size)
            out.extend(self._order[:m])
            self._order = self._order[m:]
        return np.asarray(out, dtype=np.int64)


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 10
    lr: float = 1e-5
    weight_decay: float = 1e-2
    betas: tuple = (0.9, 0.999)
    crop: tuple | None = None
    flip_p: float = 0.5
    pixel_fraction: float = 0.5
    steps_per_epoch: int | None = None
    eval_batch: int = 50
    seed: int = 0


def make_batch(ds: Dataset, idx, labeled_mask, rng, crop=None, flip_p=0.5) -> Batch:
    images, labels, masks = [], [], []
    for i, lab in zip(idx, labeled_mask):
        s = augment(ds.sample(int(i)), rng, crop, flip_p)
        images.append(s.image)
        labels.append(s.labels)
        masks.append(s.mask if lab else np.full_like(s.mask, UNLABELED))
    return Batch(np.stack(images), np.stack(labels), np.stack(masks))


@dataclass
class StepReport:
    total: float
    cls: float
    seg: float


def loss_graph(model, batch: Batch, pv: dict):
    scores, logits, _ = model.graph(batch.images, pv)
    seg = ag.custom(seg_loss, logits, batch.masks)
    total, cls_val = seg, 0.0
    if model.uses_cls_loss:
        cls = ag.custom(cls_loss, scores, batch.image_labels)
        total, cls_val = ag.add(cls, seg), float(cls.data)
    return total, cls_val, float(seg.data)


def combined_step(model, batch: Batch, optim: AdamW) -> StepReport:
    """One update on ``1 * cls_loss + 1 * seg_loss`` (seg only for UNet/FCN)."""
    pv = param_vars(model.params, True)
    total, cls_val, seg_val = loss_graph(model, batch, pv)
    value = float(total.data)
    if not math.isfinite(value):
        raise TrainingError(f"non-finite loss (cls={cls_val}, seg={seg_val}) at step {optim.step_count}")
    total.backward()
    grads = {k: v.grad for k, v in pv.items() if v.grad is not None}
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {k} at step {optim.step_count}")
    optim.step(model.params, grads)
    return StepReport(value, cls_val, seg_val)


@dataclass
class EvalResult:
    miou: float
    iou: np.ndarray
    f1: float | None
    cls_loss: float | None
    seg_loss: float
    predictions: np.ndarray | None = None


def evaluate(model, ds: Dataset, batch_size: int = 50, keep_predictions: bool = False) -> EvalResult:
    acc = ConfusionAccumulator(ds.num_classes)
    all_scores, preds, seg_sum, cls_sum, n = [], [], 0.0, 0.0, 0
    for start in range(0, len(ds), batch_size):
        sl = slice(start, start + batch_size)
        scores, logits, _ = model.forward(ds.images[sl])
        pred = segment(logits)
        acc.update(pred, ds.masks[sl])
        b = len(ds.images[sl])
        seg_sum += seg_loss(logits, ds.masks[sl])[0] * b
        if scores is not None:
            all_scores.append(scores)
            cls_sum += cls_loss(scores, ds.labels[sl])[0] * b
        if keep_predictions:
            preds.append(pred)
        n += b
    m, iou = miou(acc)
    f1 = cls = None
    if all_scores:
        f1 = f1_multilabel(np.concatenate(all_scores)[:, 1:], ds.labels)
        cls = cls_sum / n
    return EvalResult(m, iou, f1, cls, seg_sum / n, np.concatenate(preds) if preds else None)


HISTORY_FIELDS = ("epoch", "split", "miou", "f1", "cls_loss", "seg_loss")


@dataclass
class TrainResult:
    best_params: dict
    best_epoch: int
    best_miou: float
    history: list = field(default_factory=list)


def _batch_indices(model, labeled, unlabeled, lab_sampler, img_sampler, cfg: TrainConfig):
    b = cfg.batch_size
    if not model.mixed_batches or not unlabeled.size:
        idx = lab_sampler.take(b)
        return idx, np.ones(len(idx), dtype=bool)
    n_pix = 0
    if labeled.size:
        n_pix = int(min(max(1, round(cfg.pixel_fraction * b)), labeled.size))
    idx = np.concatenate([lab_sampler.take(n_pix), img_sampler.take(b - n_pix)])
    return idx, np.arange(len(idx)) < n_pix


def train(model, train_ds: Dataset, val_ds: Dataset | None, labeled_ids, cfg: TrainConfig,
          on_epoch=None) -> TrainResult:
    """Train ``model`` in place; returns the best-validation-mIoU parameters.

    ``labeled_ids`` are indices into ``train_ds`` whose masks may be used.
    Models with ``mixed_batches`` fill the rest of each batch with image-level
    labelled images; the others draw only pixel-labelled images.
    ``on_epoch(epoch, model, result_row)`` is called after each evaluation.
    """
    labeled = np.asarray(sorted(labeled_ids), dtype=np.int64)
    unlabeled = np.setdiff1d(np.arange(len(train_ds)), labeled)
    if not model.mixed_batches and labeled.size == 0:
        raise TrainingError(f"{model.kind} needs pixel-labelled images")
    optim = AdamW(lr=cfg.lr, betas=tuple(cfg.betas), weight_decay=cfg.weight_decay)
    lab_sampler = CyclicSampler(labeled, seeded_rng(cfg.seed, 0x5A4, 1))
    img_sampler = CyclicSampler(unlabeled, seeded_rng(cfg.seed, 0x5A4, 2))
    steps = cfg.steps_per_epoch or math.ceil(len(train_ds) / cfg.batch_size)
    result = TrainResult(best_params=copy.deepcopy(model.params), best_epoch=0, best_miou=-1.0)
    start = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        tot_cls = tot_seg = 0.0
        for step in range(steps):
            idx, lab = _batch_indices(model, labeled, unlabeled, lab_sampler, img_sampler, cfg)
            aug_rng = seeded_rng(cfg.seed, 0xA06, epoch, step)
            batch = make_batch(train_ds, idx, lab, aug_rng, cfg.crop, cfg.flip_p)
            rep = combined_step(model, batch, optim)
            tot_cls += rep.cls
            tot_seg += rep.seg
        wall = round(time.perf_counter() - start, 3)
        result.history.append({"epoch": epoch, "split": "train", "miou": None, "f1": None,
                               "cls_loss": tot_cls / steps if model.uses_cls_loss else None,
                               "seg_loss": tot_seg / steps, "wall_seconds": wall})
        if val_ds is not None and len(val_ds):
            ev = evaluate(model, val_ds, cfg.eval_batch)
            row = {"epoch": epoch, "split": "val", "miou": ev.miou, "f1": ev.f1,
                   "cls_loss": ev.cls_loss, "seg_loss": ev.seg_loss, "wall_seconds": wall}
            result.history.append(row)
            if ev.miou > result.best_miou:
                result.best_miou, result.best_epoch = ev.miou, epoch
                result.best_params = copy.deepcopy(model.params)
            if on_epoch is not None:
                on_epoch(epoch, model, row)
    return result


def pretrain_classifier(spec, params: dict, train_ds: Dataset, val_ds: Dataset, cfg: TrainConfig,
                        patience: int = 5, min_delta: float = 0.005):
    """Classification-only training until validation F1 stops improving.

    Returns ``(best_params, history)``; history rows carry ``epoch`` and ``f1``.
    """
    from .models import UnrolledNet

    class _Classifier(UnrolledNet):
        mixed_batches = True

        def graph(self, x, pv):
            from .models import encode
            enc = encode(self.spec, pv, x)
            return enc.scores, None, enc

    clf = _Classifier(spec, params)
    optim = AdamW(lr=cfg.lr, betas=tuple(cfg.betas), weight_decay=cfg.weight_decay)
    sampler = CyclicSampler(np.arange(len(train_ds)), seeded_rng(cfg.seed, 0x9E7))
    steps = cfg.steps_per_epoch or math.ceil(len(train_ds) / cfg.batch_size)
    best, best_f1, stale, history = copy.deepcopy(params), -1.0, 0, []
    for epoch in range(1, cfg.epochs + 1):
        tot = 0.0
        for step in range(steps):
            idx = sampler.take(cfg.batch_size)
            batch = make_batch(train_ds, idx, np.zeros(len(idx), bool), seeded_rng(cfg.seed, 0xA07, epoch, step),
                               cfg.crop, cfg.flip_p)
            pv = param_vars(params, True)
            scores, _, _ = clf.graph(batch.images, pv)
            loss = ag.custom(cls_loss, scores, batch.image_labels)
            if not math.isfinite(float(loss.data)):
                raise TrainingError("non-finite classification loss during pretraining")
            loss.backward()
            optim.step(params, {k: v.grad for k, v in pv.items() if v.grad is not None})
            tot += float(loss.data)
        scores = np.concatenate([clf.graph(val_ds.images[s:s + 100], param_vars(params, False))[0].data
                                 for s in range(0, len(val_ds), 100)])
        f1 = f1_multilabel(scores[:, 1:], val_ds.labels)
        history.append({"epoch": epoch, "cls_loss": tot / steps, "f1": f1})
        if f1 > best_f1 + min_delta:
            best, best_f1, stale = copy.deepcopy(params), f1, 0
        else:
            stale += 1
            if stale >= patience:
                break
    return best, history


def concordance_probe(model, image: np.ndarray, mask: np.ndarray, labels: np.ndarray,
                      step: float = 1e-3) -> np.ndarray:
    """Score change of every absent foreground class after one seg-loss gradient step.

    Plain gradient descent on a copy of the parameters, segmentation loss only,
    on a single fully labelled image.  Returns the per-class score deltas for
    the classes not present in ``labels``.
    """
    params = model.params
    before = model.forward(image)[0][0]
    pv = param_vars(params, True)
    _, heat, _ = model.graph(image[None], pv)
    ag.custom(seg_loss, heat, mask[None]).backward()
    stepped = {k: v - step * pv[k].grad if pv[k].grad is not None else v for k, v in params.items()}
    model.params = stepped
    try:
        after = model.forward(image)[0][0]
    finally:
        model.params = params
    absent = np.flatnonzero(np.asarray(labels) == 0) + 1
    return (after - before)[absent]
