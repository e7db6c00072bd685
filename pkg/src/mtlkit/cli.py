"""Command-line surface: synth, train, eval, ensemble, cv, correlate,
retrieve, attention.

Experiments are described by a single JSON config file; a few common
flags (--seed, --epochs, --mode) override config fields. Every command
honors the seed, and all errors exit nonzero with one machine-parsable
line on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, replace

import numpy as np

from . import analysis, metrics
from .data import (
    AugmentConfig,
    SynthSpec,
    load_manifest,
    planted_correlation,
    save_manifest,
    synthesize,
)
from .errors import BadSpec, DimensionMismatch, MtlkitError
from .network import DualHeadNet, NetConfig, load_checkpoint, save_checkpoint
from .optim import PlateauConfig
from .training import TrainConfig, cross_validate, evaluate_scores, fold_metrics, train


def _load_json(path):
    with open(path) as f:
        return json.load(f)


def train_config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    net = NetConfig(**d.pop("net", {}))
    plateau = PlateauConfig(**d.pop("plateau", {}))
    augment = AugmentConfig(**d.pop("augment", {}))
    known = {k: d[k] for k in d
             if k in TrainConfig.__dataclass_fields__ and k not in ("net", "plateau", "augment")}
    return TrainConfig(net=net, plateau=plateau, augment=augment, **known)


def _aug_to_blob(aug: AugmentConfig) -> dict:
    d = asdict(aug)
    if d["channel_means"] is not None:
        d["channel_means"] = [float(x) for x in np.asarray(d["channel_means"])]
    return d


def _aug_from_blob(d) -> AugmentConfig:
    d = dict(d or {})
    if d.get("channel_means") is not None:
        d["channel_means"] = np.asarray(d["channel_means"], dtype=np.float64)
    return AugmentConfig(**d)


def _check_dims(net: DualHeadNet, ds):
    if net.P != ds.P or net.Q != ds.Q:
        raise DimensionMismatch(
            f"checkpoint has P={net.P}, Q={net.Q}; dataset has P={ds.P}, Q={ds.Q}"
        )


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args):
    spec_dict = _load_json(args.spec)
    p, q = int(spec_dict["P"]), int(spec_dict["Q"])
    if "R" in spec_dict:
        r = np.asarray(spec_dict["R"], dtype=np.float64)
    else:
        r = planted_correlation(p, q, float(spec_dict.get("correlation_strength", 0.9)))
    spec = SynthSpec(
        P=p, Q=q, N=int(spec_dict["N"]), R=r,
        noise=float(spec_dict.get("noise", 0.08)),
        image_size=tuple(spec_dict.get("image_size", (3, 32, 32))),
        seed=int(spec_dict.get("seed", 0)) if args.seed is None else args.seed,
        multi_rate=float(spec_dict.get("multi_rate", 0.3)),
        lesion_amplitude=float(spec_dict.get("lesion_amplitude", 0.10)),
    )
    ds = synthesize(spec)
    manifest = save_manifest(ds, args.out_dir)
    print(manifest)
    return 0


def cmd_train(args):
    raw = _load_json(args.config)
    cfg = train_config_from_dict(raw)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.epochs is not None:
        cfg = replace(cfg, epochs=args.epochs)
    if args.mode is not None:
        cfg = replace(cfg, mode=args.mode)
    ds = load_manifest(raw["manifest"])
    out_dir = args.out_dir or raw.get("out_dir", ".")
    os.makedirs(out_dir, exist_ok=True)

    rng = np.random.default_rng(cfg.seed)
    n_val = int(round(len(ds) * float(raw.get("val_fraction", 0.1))))
    perm = rng.permutation(len(ds))
    val_samples = [ds.samples[i] for i in perm[:n_val]]
    train_samples = [ds.samples[i] for i in perm[n_val:]]

    net = DualHeadNet(cfg.net, ds.P, ds.Q, seed=cfg.seed)
    best = {"val_loss": None}
    best_path = os.path.join(out_dir, "best.ckpt")

    def on_epoch(record, opt, aug):
        vl = record.get("val_loss")
        if vl is not None and (best["val_loss"] is None or vl < best["val_loss"]):
            best["val_loss"] = vl
            save_checkpoint(best_path, net, opt.buffers,
                            {"optimizer": opt.state(), "epoch": record["epoch"],
                             "mode": cfg.mode, "augment": _aug_to_blob(aug)})

    log, opt, aug = train(net, train_samples, val_samples, cfg, on_epoch=on_epoch)
    state = {"optimizer": opt.state(), "epoch": cfg.epochs - 1, "mode": cfg.mode,
             "augment": _aug_to_blob(aug)}
    save_checkpoint(os.path.join(out_dir, "final.ckpt"), net, opt.buffers, state)
    if best["val_loss"] is None:
        save_checkpoint(best_path, net, opt.buffers, state)
    with open(os.path.join(out_dir, "log.jsonl"), "w") as f:
        for record in log:
            f.write(json.dumps(record, sort_keys=True) + "\n")
    with open(os.path.join(out_dir, "config.json"), "w") as f:
        cfg_dict = {**raw, "mode": cfg.mode, "epochs": cfg.epochs, "seed": cfg.seed}
        json.dump(cfg_dict, f, indent=2, sort_keys=True)
    print(out_dir)
    return 0


def cmd_eval(args):
    net, _, state = load_checkpoint(args.checkpoint)
    ds = load_manifest(args.manifest)
    _check_dims(net, ds)
    aug = _aug_from_blob(state.get("augment"))
    les_sm, loc_sm = evaluate_scores(net, ds.samples, aug, use_ten_crop=args.ten_crop)
    u = np.stack([s.u for s in ds.samples])
    v = np.array([s.v for s in ds.samples])
    m_class, per_class, excluded = metrics.map_class(les_sm, u)
    m_image, _ = metrics.map_image(les_sm, u)
    report = {
        "map_class": m_class,
        "map_image": m_image,
        "per_class_ap": {name: ap for name, ap in zip(ds.lesion_names, per_class)},
        "excluded_classes": [ds.lesion_names[i] for i in excluded],
        "top1": metrics.top_k_accuracy(loc_sm, v, 1),
        "top3": metrics.top_k_accuracy(loc_sm, v, min(3, ds.Q)),
        "ten_crop": bool(args.ten_crop),
    }
    if args.scores_out:
        metrics.write_scores(args.scores_out + "_lesion.csv", les_sm, ds.lesion_names)
        metrics.write_scores(args.scores_out + "_location.csv", loc_sm, ds.location_names)
    _emit_report(report, args.report_out)
    return 0


def cmd_ensemble(args):
    a, names_a = metrics.read_scores(args.scores_a, args.kind)
    b, _ = metrics.read_scores(args.scores_b, args.kind)
    combined = (metrics.ensemble_mean if args.method == "mean" else metrics.ensemble_max)(a, b)
    ds = load_manifest(args.labels)
    by_id = {s.id: s for s in ds.samples}
    report = {"method": args.method, "kind": args.kind}
    if args.kind == "lesion":
        u = np.stack([by_id[i].u for i in combined.ids])
        m_class, per_class, excluded = metrics.map_class(combined, u)
        m_image, _ = metrics.map_image(combined, u)
        report.update(map_class=m_class, map_image=m_image,
                      per_class_ap={n: ap for n, ap in zip(names_a, per_class)},
                      excluded_classes=[names_a[i] for i in excluded])
    else:
        v = np.array([by_id[i].v for i in combined.ids])
        report.update(top1=metrics.top_k_accuracy(combined, v, 1),
                      top3=metrics.top_k_accuracy(combined, v, min(3, combined.scores.shape[1])))
    _emit_report(report, args.report_out)
    return 0


def cmd_cv(args):
    raw = _load_json(args.config)
    cfg = train_config_from_dict(raw)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.mode is not None:
        cfg = replace(cfg, mode=args.mode)
    if args.epochs is not None:
        cfg = replace(cfg, epochs=args.epochs)
    ds = load_manifest(raw["manifest"])
    report = cross_validate(ds, cfg)
    _emit_report(report, args.report_out)
    return 0


def cmd_correlate(args):
    ds = load_manifest(args.manifest)
    corr = metrics.correlation_matrix(ds)
    lines = ["lesion," + ",".join(ds.location_names)]
    for name, row in zip(ds.lesion_names, corr.R):
        lines.append(name + "," + ",".join(repr(float(x)) for x in row))
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_retrieve(args):
    net, _, state = load_checkpoint(args.checkpoint)
    index_ds = load_manifest(args.manifest)
    _check_dims(net, index_ds)
    queries = load_manifest(args.queries) if args.queries else index_ds
    aug = _aug_from_blob(state.get("augment"))
    index = analysis.build_index(net, index_ds, aug)
    report = analysis.retrieval_report(net, index, index_ds, queries, args.k, aug)
    _emit_report(report, args.report_out)
    return 0


def cmd_attention(args):
    net, _, state = load_checkpoint(args.checkpoint)
    ds = load_manifest(args.manifest)
    _check_dims(net, ds)
    aug = _aug_from_blob(state.get("augment"))
    by_id = {s.id: s for s in ds.samples}
    if args.id not in by_id:
        raise BadSpec(f"sample id {args.id!r} not found in manifest")
    sample = by_id[args.id]
    if args.class_index is not None:
        class_index = args.class_index
    elif args.head == "lesion":
        class_index = int(np.flatnonzero(sample.u)[0])   # ground-truth primary lesion
    else:
        class_index = sample.v - 1
    from .data import eval_transform

    img = eval_transform(sample, aug)
    amap = analysis.attention(net, img, args.head, class_index, upsample=True)
    analysis.export_attention(args.out_dir, f"{args.id}_{args.head}{class_index}", amap)
    print(args.out_dir)
    return 0


def _emit_report(report, path):
    text = json.dumps(report, indent=2, sort_keys=True)
    if path:
        with open(path, "w") as f:
            f.write(text + "\n")
    else:
        print(text)


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mtlkit",
                                description="Dual-task lesion/location training toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic correlated-label dataset")
    s.add_argument("spec", help="JSON spec file (P, Q, N, R or correlation_strength, ...)")
    s.add_argument("out_dir")
    s.add_argument("--seed", type=int, default=None)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a model from a JSON config")
    s.add_argument("config")
    s.add_argument("--out-dir", default=None)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--epochs", type=int, default=None)
    s.add_argument("--mode", choices=("mtl", "lesion_only", "location_only"), default=None)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    s.add_argument("checkpoint")
    s.add_argument("manifest")
    s.add_argument("--ten-crop", action="store_true")
    s.add_argument("--scores-out", default=None, help="prefix for score CSVs")
    s.add_argument("--report-out", default=None)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ensemble", help="combine two score CSVs and re-evaluate")
    s.add_argument("scores_a")
    s.add_argument("scores_b")
    s.add_argument("--labels", required=True, help="manifest providing ground truth")
    s.add_argument("--kind", choices=("lesion", "location"), default="lesion")
    s.add_argument("--method", choices=("max", "mean"), default="max")
    s.add_argument("--report-out", default=None)
    s.set_defaults(func=cmd_ensemble)

    s = sub.add_parser("cv", help="k-fold cross-validation")
    s.add_argument("config")
    s.add_argument("--mode", choices=("mtl", "lesion_only", "location_only"), default=None)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--epochs", type=int, default=None)
    s.add_argument("--report-out", default=None)
    s.set_defaults(func=cmd_cv)

    s = sub.add_parser("correlate", help="lesion-by-location correlation matrix CSV")
    s.add_argument("manifest")
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_correlate)

    s = sub.add_parser("retrieve", help="nearest-neighbor retrieval report")
    s.add_argument("checkpoint")
    s.add_argument("manifest", help="index dataset")
    s.add_argument("--queries", default=None, help="query manifest (default: index)")
    s.add_argument("--k", type=int, default=5)
    s.add_argument("--report-out", default=None)
    s.set_defaults(func=cmd_retrieve)

    s = sub.add_parser("attention", help="export a class activation map")
    s.add_argument("checkpoint")
    s.add_argument("manifest")
    s.add_argument("--id", required=True)
    s.add_argument("--head", choices=("lesion", "location"), default="lesion")
    s.add_argument("--class-index", type=int, default=None,
                   help="default: the sample's ground-truth class")
    s.add_argument("--out-dir", default=".")
    s.set_defaults(func=cmd_attention)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except MtlkitError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
