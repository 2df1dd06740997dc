"""Command-line pipeline: generate, train, infer, ensemble, evaluate,
postproc. All randomness is controlled by explicit --seed flags."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import data, inference, training
from .evaluation import evaluate
from .network import CascadeNet, load_checkpoint, save_checkpoint


def _add_generate(sub):
    p = sub.add_parser("generate", help="write a synthetic phantom dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--extents", default="4,32,48,48",
                   help="C,D,H,W volume extents")
    p.add_argument("--lesions", type=int, default=1)
    p.add_argument("--noise", type=float, default=0.05)


def _add_train(sub):
    p = sub.add_parser("train", help="train one model on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--config", help="key = value training config file")
    p.add_argument("--seed", type=int, help="overrides the config seed; "
                   "also seeds the weight initialization")
    p.add_argument("--epochs", type=int)
    p.add_argument("--history", help="per-epoch loss CSV path")
    p.add_argument("--base-width", type=int, default=8)
    p.add_argument("--num-scales", type=int, default=3)
    p.add_argument("--downsampler", choices=("pool", "gconv"),
                   default="gconv")


def _add_infer(sub):
    p = sub.add_parser("infer", help="segment one volume with one model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--volume", required=True)
    p.add_argument("--out", required=True, help="label volume path")
    p.add_argument("--patch", type=int, help="tile extent (defaults to the "
                   "largest compatible in-plane extent)")
    p.add_argument("--probs-out", help="optional probability volume path")


def _add_ensemble(sub):
    p = sub.add_parser("ensemble", help="segment one volume with an ensemble")
    p.add_argument("--members", required=True,
                   help="comma-separated checkpoint paths")
    p.add_argument("--volume", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--patch", type=int)


def _add_evaluate(sub):
    p = sub.add_parser("evaluate", help="score predictions against truth")
    p.add_argument("--pred", required=True, help="directory of predicted "
                   "label volumes")
    p.add_argument("--truth", required=True, help="directory of reference "
                   "volumes")
    p.add_argument("--out", required=True, help="report prefix; writes "
                   "<out>.csv and <out>.json")


def _add_postproc(sub):
    p = sub.add_parser("postproc", help="remove small clusters from labels")
    p.add_argument("--labels", required=True, help="input label volume")
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=int, help="minimum cluster size in "
                   "voxels; derived from --stats-data when omitted")
    p.add_argument("--stats-data", help="training dataset directory used to "
                   "derive the threshold")
    p.add_argument("--connectivity", type=int, default=26,
                   choices=(6, 18, 26))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dlaseg",
        description="cascaded multi-scale segmentation on volumetric data")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_generate(sub)
    _add_train(sub)
    _add_infer(sub)
    _add_ensemble(sub)
    _add_evaluate(sub)
    _add_postproc(sub)
    return parser


def _cmd_generate(args) -> int:
    extents = tuple(int(x) for x in args.extents.split(","))
    if len(extents) != 4:
        raise ValueError("--extents must be C,D,H,W")
    spec = data.PhantomSpec(extents=extents, num_lesions=args.lesions,
                            noise=args.noise)
    paths = data.generate_dataset(args.out, args.count, spec, seed=args.seed)
    print(f"wrote {len(paths)} volumes to {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = training.load_config(args.config) if args.config \
        else training.TrainConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.epochs is not None:
        if args.epochs <= cfg.warm_epochs:
            cfg.warm_epochs = max(0, args.epochs // 3)
        cfg.epochs = args.epochs
    dataset = data.load_dataset(args.data)
    net = CascadeNet(in_channels=dataset[0].num_channels,
                     base_width=args.base_width, num_scales=args.num_scales,
                     downsampler=args.downsampler, dropout_p=cfg.dropout_p,
                     loss_weights=cfg.loss_weights, seed=cfg.seed)
    net, history = training.train(dataset, net, cfg)
    save_checkpoint(net, args.out)
    if args.history:
        training.write_history_csv(history, args.history)
    print(f"trained {cfg.epochs} epochs; final L3="
          f"{history[-1].loss_stage3:.4f}; checkpoint at {args.out}")
    return 0


def _write_labels(labels, reference: data.Volume, path) -> None:
    empty = np.zeros((0,) + labels.shape, dtype=np.float32)
    data.write_volume(data.Volume(empty, labels, reference.spacing,
                                  reference.subject_id), path)


def _cmd_infer(args) -> int:
    net = load_checkpoint(args.checkpoint)
    vol = data.read_volume(args.volume)
    probs = inference.predict_volume(vol, net, patch_extent=args.patch)
    labels = inference.labels_from_probs(probs, data.brain_mask(vol.channels))
    _write_labels(labels, vol, args.out)
    if args.probs_out:
        prob_vol = data.Volume(probs.astype(np.float32),
                               np.zeros(labels.shape, dtype=np.uint8),
                               vol.spacing, vol.subject_id)
        data.write_volume(prob_vol, args.probs_out)
    print(f"wrote labels to {args.out}")
    return 0


def _cmd_ensemble(args) -> int:
    members = [load_checkpoint(p.strip())
               for p in args.members.split(",") if p.strip()]
    vol = data.read_volume(args.volume)
    probs = inference.ensemble_predict(vol, members, patch_extent=args.patch)
    labels = inference.labels_from_probs(probs, data.brain_mask(vol.channels))
    _write_labels(labels, vol, args.out)
    print(f"wrote ensemble labels from {len(members)} members to {args.out}")
    return 0


def _cmd_evaluate(args) -> int:
    preds = data.load_dataset(args.pred)
    truths = data.load_dataset(args.truth)
    report = evaluate(preds, truths)
    out = Path(args.out)
    report.to_csv(out.with_suffix(".csv"))
    report.to_json(out.with_suffix(".json"))
    for region, stats in report.aggregates.items():
        hd = stats["hd95"]
        hd_text = f"{hd['mean']:.2f}mm" if hd else "n/a"
        print(f"{region}: dice mean {stats['dice']['mean']:.4f}, "
              f"hd95 mean {hd_text}")
    return 0


def _cmd_postproc(args) -> int:
    vol = data.read_volume(args.labels)
    if args.threshold is not None:
        threshold = args.threshold
    elif args.stats_data:
        threshold = inference.derive_threshold(
            data.load_dataset(args.stats_data),
            connectivity=args.connectivity)
    else:
        raise ValueError("provide --threshold or --stats-data")
    cfg = inference.PostprocConfig(min_cluster_voxels=threshold,
                                   connectivity=args.connectivity)
    filtered = inference.postprocess(vol.labels, cfg)
    _write_labels(filtered, vol, args.out)
    removed = int((vol.labels > 0).sum() - (filtered > 0).sum())
    print(f"removed {removed} voxels below {threshold}; wrote {args.out}")
    return 0


_COMMANDS = {
    "generate": _cmd_generate,
    "train": _cmd_train,
    "infer": _cmd_infer,
    "ensemble": _cmd_ensemble,
    "evaluate": _cmd_evaluate,
    "postproc": _cmd_postproc,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
