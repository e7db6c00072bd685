"""Training loop, dataset scoring, and cross-validation orchestration.

All randomness (shuffling, augmentation) flows from a single seeded
generator, so a (config, seed) pair reproduces training exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import metrics, objective
from .data import AugmentConfig, Dataset, assign_folds, augment, channel_means, eval_transform, ten_crop
from .errors import BadConfig
from .network import DualHeadNet, NetConfig
from .optim import SGD, PlateauConfig
from .tensor import backward

MODES = ("mtl", "lesion_only", "location_only")


@dataclass
class TrainConfig:
    mode: str = "mtl"
    epochs: int = 6
    batch_size: int = 20
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    aux_weight: float = 1.0
    pretrain_epochs: int = 0      # location-only warmup standing in for transfer init
    seed: int = 0
    net: NetConfig = field(default_factory=NetConfig)
    plateau: PlateauConfig = field(default_factory=PlateauConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    n_folds: int = 5
    use_ten_crop: bool = False


def _check_mode(mode):
    if mode not in MODES:
        raise BadConfig(f"mode must be one of {MODES}, got {mode!r}")


def _batches(n, batch_size, order):
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _stack_batch(samples, idx, rng, aug):
    imgs = np.stack([augment(samples[i], rng, aug) for i in idx])
    u = np.stack([samples[i].u for i in idx])
    v = np.array([samples[i].v for i in idx])
    return imgs, u, v


def _mode_loss(net, imgs, u, v, cfg):
    """Returns (loss node, log fields) for the configured mode."""
    if cfg.mode == "mtl":
        bd, node = objective.joint_loss(
            net, imgs, u, v, gamma=cfg.weight_decay, aux_weight=cfg.aux_weight
        )
        return node, {"lesion_loss": bd.lesion_loss, "location_loss": bd.location_loss,
                      "reg": bd.reg, "total": bd.total}
    les_logits, loc_logits, _, _ = net.forward(imgs)
    if cfg.mode == "lesion_only":
        node = objective.lesion_loss(les_logits, u)
        return node, {"lesion_loss": float(node.data), "total": float(node.data)}
    node = objective.location_loss(loc_logits, v)
    return node, {"location_loss": float(node.data), "total": float(node.data)}


def _heads_for_mode(mode):
    return {"mtl": "both", "lesion_only": "lesion", "location_only": "location"}[mode]


def evaluate_scores(net: DualHeadNet, samples, aug: AugmentConfig,
                    batch_size: int = 20, use_ten_crop: bool = False):
    """Score a sample list; returns (lesion ScoreMatrix, location ScoreMatrix).

    Lesion scores are sigmoid activations, location scores softmax. With
    use_ten_crop the post-activation scores are averaged over the 10 crops.
    """
    ids = [s.id for s in samples]
    les_rows, loc_rows = [], []
    if use_ten_crop:
        for s in samples:
            crops = np.stack(ten_crop(s, aug))
            les_logits, loc_logits, _, _ = net.forward(crops)
            les_rows.append(objective.sigmoid(les_logits.data).mean(axis=0))
            loc_rows.append(objective.softmax(loc_logits.data).mean(axis=0))
    else:
        imgs = [eval_transform(s, aug) for s in samples]
        for start in range(0, len(imgs), batch_size):
            chunk = np.stack(imgs[start : start + batch_size])
            les_logits, loc_logits, _, _ = net.forward(chunk)
            les_rows.extend(objective.sigmoid(les_logits.data))
            loc_rows.extend(objective.softmax(loc_logits.data))
    return (
        metrics.ScoreMatrix(np.stack(les_rows), ids, "lesion"),
        metrics.ScoreMatrix(np.stack(loc_rows), ids, "location"),
    )


def _validation_loss(net, samples, aug, cfg):
    total = 0.0
    n = 0
    for start in range(0, len(samples), cfg.batch_size):
        chunk = samples[start : start + cfg.batch_size]
        imgs = np.stack([eval_transform(s, aug) for s in chunk])
        u = np.stack([s.u for s in chunk])
        v = np.array([s.v for s in chunk])
        _, fields = _mode_loss(net, imgs, u, v, cfg)
        total += fields["total"] * len(chunk)
        n += len(chunk)
    return total / n


def train(net: DualHeadNet, train_samples, val_samples, cfg: TrainConfig, on_epoch=None):
    """Train in place; returns (log records, optimizer, fitted AugmentConfig).

    The returned AugmentConfig carries the training-fold channel means and
    must be reused for any later scoring of this net.
    """
    _check_mode(cfg.mode)
    rng = np.random.default_rng(cfg.seed)
    aug = replace(cfg.augment, channel_means=channel_means(train_samples))
    opt = SGD(net.parameters(_heads_for_mode(cfg.mode)), lr=cfg.lr, momentum=cfg.momentum,
              weight_decay=cfg.weight_decay, plateau=cfg.plateau)
    log = []

    if cfg.pretrain_epochs > 0 and cfg.mode == "mtl":
        warm_cfg = replace(cfg, mode="location_only")
        warm_opt = SGD(net.parameters("location"), lr=cfg.lr, momentum=cfg.momentum,
                       weight_decay=cfg.weight_decay, plateau=cfg.plateau)
        for _ in range(cfg.pretrain_epochs):
            order = rng.permutation(len(train_samples))
            for idx in _batches(len(train_samples), cfg.batch_size, order):
                imgs, u, v = _stack_batch(train_samples, idx, rng, aug)
                node, _ = _mode_loss(net, imgs, u, v, warm_cfg)
                backward(node)
                warm_opt.step()

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_samples))
        sums, count = {}, 0
        for idx in _batches(len(train_samples), cfg.batch_size, order):
            imgs, u, v = _stack_batch(train_samples, idx, rng, aug)
            node, fields = _mode_loss(net, imgs, u, v, cfg)
            backward(node)
            opt.step()
            for k, val in fields.items():
                sums[k] = sums.get(k, 0.0) + val * len(idx)
            count += len(idx)
        record = {"epoch": epoch, **{f"train_{k}": v / count for k, v in sums.items()}}
        if val_samples:
            val_loss = _validation_loss(net, val_samples, aug, cfg)
            record["val_loss"] = val_loss
            les_sm, loc_sm = evaluate_scores(net, val_samples, aug, cfg.batch_size)
            u_val = np.stack([s.u for s in val_samples])
            v_val = np.array([s.v for s in val_samples])
            if cfg.mode != "location_only":
                record["val_map_image"] = metrics.map_image(les_sm, u_val)[0]
            if cfg.mode != "lesion_only":
                record["val_top1"] = metrics.top_k_accuracy(loc_sm, v_val, 1)
            record["lr"] = opt.plateau_update(val_loss)
        else:
            record["lr"] = opt.lr
        log.append(record)
        if on_epoch is not None:
            on_epoch(record, opt, aug)
    return log, opt, aug


def fold_metrics(net, test_samples, aug, cfg: TrainConfig):
    """Evaluation report for one held-out sample set."""
    les_sm, loc_sm = evaluate_scores(net, test_samples, aug, cfg.batch_size,
                                     use_ten_crop=cfg.use_ten_crop)
    u = np.stack([s.u for s in test_samples])
    v = np.array([s.v for s in test_samples])
    report = {}
    if cfg.mode != "location_only":
        m_class, per_class, excluded = metrics.map_class(les_sm, u)
        m_image, _ = metrics.map_image(les_sm, u)
        report["map_class"] = m_class
        report["map_image"] = m_image
        report["per_class_ap"] = per_class
        report["excluded_classes"] = excluded
    if cfg.mode != "lesion_only":
        report["top1"] = metrics.top_k_accuracy(loc_sm, v, 1)
        report["top3"] = metrics.top_k_accuracy(loc_sm, v, min(3, loc_sm.scores.shape[1]))
    return report, les_sm, loc_sm


def cross_validate(ds: Dataset, cfg: TrainConfig):
    """K-fold cross-validation; per-fold seeds are cfg.seed + fold index.

    Each fold trains a fresh net on the remaining folds and evaluates on
    the held-out one, so every sample is scored exactly once.
    """
    _check_mode(cfg.mode)
    if ds.folds is None:
        ds = assign_folds(ds, cfg.n_folds, cfg.seed)
    fold_ids = sorted(set(int(f) for f in ds.folds))
    fold_reports = []
    for f in fold_ids:
        train_samples = [s for s, g in zip(ds.samples, ds.folds) if g != f]
        test_samples = [s for s, g in zip(ds.samples, ds.folds) if g == f]
        fold_cfg = replace(cfg, seed=cfg.seed + f)
        net = DualHeadNet(cfg.net, ds.P, ds.Q, seed=fold_cfg.seed)
        _, _, aug = train(net, train_samples, None, fold_cfg)
        report, _, _ = fold_metrics(net, test_samples, aug, fold_cfg)
        report["fold"] = f
        fold_reports.append(report)
    aggregate = {}
    numeric = [k for k in fold_reports[0] if isinstance(fold_reports[0][k], float)]
    for k in numeric:
        aggregate[k] = float(np.mean([r[k] for r in fold_reports]))
    return {"mode": cfg.mode, "seed": cfg.seed, "folds": fold_reports, "aggregate": aggregate}
