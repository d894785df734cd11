"""Command-line entry point.

Subcommands: train-mgn, train-mvt, evaluate, ablate, curves. Every command
takes --config (JSON), optional --seed (overrides the config seed) and
--out (output directory). Exit codes: 0 success, 1 configuration error,
2 numeric abort, 3 I/O or file-format error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import mgn as mgn_mod
from . import train as train_mod
from . import vit
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import compute_metrics, generate_dataset, load_dataset
from .errors import ConfigError, DomainError, FormatError, NumericError, ShapeError
from .optim import AdamW
from .plots import convergence_svg


def _fmt_float(x):
    return "" if x is None else f"{x:.6f}"


def _write_csv(path, header, rows):
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    os.replace(tmp, path)


class _IncrementalCsv:
    """Row-at-a-time CSV writer so partial logs survive an abort."""

    def __init__(self, path, header):
        self.path = path
        self._f = open(path, "w", newline="")
        self._w = csv.writer(self._f, lineterminator="\n")
        self._w.writerow(header)

    def write(self, row):
        self._w.writerow(row)
        self._f.flush()

    def close(self):
        self._f.close()


def _spawn_rngs(seed, count):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(count)]


def _load_or_generate_dataset(config):
    if config.dataset.path:
        return load_dataset(config.dataset.path)
    return generate_dataset(config.dataset_spec())


def _prepare_out(config, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    config.to_json(os.path.join(out_dir, "config.json"))


def _build_generator(config, dataset, rng, mask_ratio=None):
    ratio = config.mgn.mask_ratio if mask_ratio is None else mask_ratio
    return mgn_mod.build_mask_generator(
        rng, dataset.spec.image_shape, config.model.patch_side,
        config.model.dim, config.model.heads, config.mgn.depth,
        initial_score=ratio)


def _build_classifier(config, dataset, rng):
    return vit.build_classifier(
        rng, dataset.spec.image_shape, config.model.patch_side,
        config.model.dim, config.model.heads, config.model.depth,
        dataset.spec.classes)


def _save_model_checkpoint(path, model, optimizer, meta):
    tensors = {name: p.data for name, p in model.named_parameters().items()}
    tensors.update(optimizer.state_arrays())
    meta = dict(meta)
    meta["optimizer"] = optimizer.state_meta()
    save_checkpoint(path, tensors, meta)


def _load_generator(config, dataset, path):
    arrays, meta = load_checkpoint(path)
    gen = _build_generator(config, dataset, np.random.default_rng(0))
    gen.load_arrays(arrays)
    return gen, meta


# ---------------------------------------------------------------------------
# train-mgn
# ---------------------------------------------------------------------------

def cmd_train_mgn(config, out_dir):
    _prepare_out(config, out_dir)
    dataset = _load_or_generate_dataset(config)
    rng_gen, rng_disc, rng_loop = _spawn_rngs(config.seed, 3)
    gen = _build_generator(config, dataset, rng_gen)
    disc = _build_classifier(config, dataset, rng_disc)
    opt_cfg = config.optimizer
    gen_opt = AdamW(gen.named_parameters(), lr=config.mgn.lr_gen,
                    beta1=opt_cfg.beta1, beta2=opt_cfg.beta2, eps=opt_cfg.eps,
                    weight_decay=opt_cfg.weight_decay, lr_decay=opt_cfg.lr_decay)
    disc_opt = AdamW(disc.named_parameters(), lr=config.mgn.lr_disc,
                     beta1=opt_cfg.beta1, beta2=opt_cfg.beta2, eps=opt_cfg.eps,
                     weight_decay=opt_cfg.weight_decay, lr_decay=opt_cfg.lr_decay)
    view = dataset.train_view()
    schedule = mgn_mod.GanSchedule(disc_steps=config.mgn.disc_steps,
                                   gen_steps=config.mgn.gen_steps,
                                   alternations=config.mgn.alternations)
    log = _IncrementalCsv(os.path.join(out_dir, "mgn_log.csv"),
                          ["step", "phase", "loss", "mask_mean", "gap"])
    try:
        mgn_mod.train_gan(view.images, view.labels, gen, disc, schedule,
                          config.mgn.mask_ratio, gen_opt, disc_opt,
                          config.mgn.batch_size, rng_loop,
                          on_row=lambda r: log.write(
                              [r["step"], r["phase"], _fmt_float(r["loss"]),
                               _fmt_float(r["mask_mean"]), _fmt_float(r["gap"])]))
    finally:
        log.close()
    _save_model_checkpoint(os.path.join(out_dir, "mgn.ckpt"), gen, gen_opt,
                           {"kind": "mask_generator",
                            "alternations": config.mgn.alternations,
                            "mask_ratio": config.mgn.mask_ratio})
    return os.path.join(out_dir, "mgn.ckpt")


# ---------------------------------------------------------------------------
# train-mvt
# ---------------------------------------------------------------------------

def cmd_train_mvt(config, out_dir, mgn_path=None):
    _prepare_out(config, out_dir)
    dataset = _load_or_generate_dataset(config)
    rng_model, rng_loop = _spawn_rngs(config.seed, 2)

    view = dataset.train_view()
    test_images, test_labels = dataset.test_arrays()
    if config.mgn.enabled:
        if not mgn_path:
            raise ConfigError("mgn.enabled is true but no --mgn checkpoint was given")
        gen, _ = _load_generator(config, dataset, mgn_path)
        train_inputs = train_mod.masked_images(gen, view.images)
        test_inputs = train_mod.masked_images(gen, test_images)
    else:
        train_inputs = view.images
        test_inputs = test_images

    model = _build_classifier(config, dataset, rng_model)
    opt_cfg = config.optimizer
    optimizer = AdamW(model.named_parameters(), lr=opt_cfg.lr, beta1=opt_cfg.beta1,
                      beta2=opt_cfg.beta2, eps=opt_cfg.eps,
                      weight_decay=opt_cfg.weight_decay, lr_decay=opt_cfg.lr_decay)
    policy = config.relabel.policy() if config.relabel.enabled else None
    audit_truth = dataset.train_true_labels() if policy is not None else None

    log = _IncrementalCsv(os.path.join(out_dir, "mvt_log.csv"),
                          ["epoch", "lr", "train_loss", "train_accuracy",
                           "test_accuracy", "relabel_active", "relabel_changed",
                           "relabel_precision", "relabel_recall"])
    try:
        records, decisions = train_mod.train_classifier(
            model, optimizer, train_inputs, view.labels, test_inputs, test_labels,
            config.train.epochs, config.train.batch_size, rng_loop,
            relabel_policy=policy, audit_truth=audit_truth,
            on_epoch=lambda r: log.write(
                [r.epoch, _fmt_float(r.lr), _fmt_float(r.train_loss),
                 _fmt_float(r.train_accuracy), _fmt_float(r.test_accuracy),
                 int(r.relabel_active), r.relabel_changed,
                 _fmt_float(r.relabel_precision), _fmt_float(r.relabel_recall)]))
    finally:
        log.close()

    if policy is not None:
        _write_csv(os.path.join(out_dir, "relabel_decisions.csv"),
                   ["epoch", "sample_id", "given_prob", "top_prob", "threshold",
                    "changed", "changed_constant_ref"],
                   [[d.epoch, d.sample_id, _fmt_float(d.given_prob),
                     _fmt_float(d.top_prob), _fmt_float(d.threshold),
                     int(d.changed), int(d.changed_constant_ref)]
                    for d in decisions])

    activation = next((r.epoch for r in records if r.relabel_active), None)
    _save_model_checkpoint(os.path.join(out_dir, "mvt.ckpt"), model, optimizer,
                           {"kind": "classifier", "epochs": config.train.epochs,
                            "relabel_activation_epoch": activation})
    return os.path.join(out_dir, "mvt.ckpt")


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def cmd_evaluate(config, out_dir, mvt_path, mgn_path=None, occluded_only=False):
    _prepare_out(config, out_dir)
    dataset = _load_or_generate_dataset(config)
    arrays, meta = load_checkpoint(mvt_path)
    model = _build_classifier(config, dataset, np.random.default_rng(0))
    try:
        model.load_arrays(arrays)
    except KeyError as e:
        raise FormatError(f"checkpoint {mvt_path} is missing tensor {e}") from e

    test_images, test_labels = dataset.test_arrays()
    if config.mgn.enabled:
        if not mgn_path:
            raise ConfigError("mgn.enabled is true but no --mgn checkpoint was given")
        gen, _ = _load_generator(config, dataset, mgn_path)
        test_inputs = train_mod.masked_images(gen, test_images)
    else:
        test_inputs = test_images

    if occluded_only:
        idx = dataset.occluded_test_indices()
        if len(idx) == 0:
            raise DomainError("no occluded samples in the test split")
        test_inputs, test_labels = test_inputs[idx], test_labels[idx]

    metrics, predictions = train_mod.evaluate_model(
        model, test_inputs, test_labels, classes=dataset.spec.classes)
    payload = {
        "n": int(len(test_labels)),
        "occluded_only": bool(occluded_only),
        "overall_accuracy": round(metrics.overall_accuracy, 6),
        "mean_class_accuracy": round(metrics.mean_class_accuracy, 6),
    }
    with open(os.path.join(out_dir, "metrics.json"), "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    _write_csv(os.path.join(out_dir, "confusion.csv"),
               [""] + [f"pred_{k}" for k in range(dataset.spec.classes)],
               [[f"true_{k}"] + metrics.confusion[k].tolist()
                for k in range(dataset.spec.classes)])
    return metrics


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------

def _pipeline_accuracy(config, use_mgn, use_relabel, mask_ratio, relabel_fn=None):
    """One full train+evaluate cell; returns (overall, occluded) accuracy."""
    dataset = _load_or_generate_dataset(config)
    rng_gen, rng_disc, rng_gan, rng_model, rng_loop = _spawn_rngs(config.seed, 5)
    view = dataset.train_view()
    test_images, test_labels = dataset.test_arrays()

    if use_mgn:
        gen = _build_generator(config, dataset, rng_gen, mask_ratio=mask_ratio)
        disc = _build_classifier(config, dataset, rng_disc)
        opt_cfg = config.optimizer
        gen_opt = AdamW(gen.named_parameters(), lr=config.mgn.lr_gen,
                        beta1=opt_cfg.beta1, beta2=opt_cfg.beta2, eps=opt_cfg.eps,
                        weight_decay=opt_cfg.weight_decay, lr_decay=opt_cfg.lr_decay)
        disc_opt = AdamW(disc.named_parameters(), lr=config.mgn.lr_disc,
                         beta1=opt_cfg.beta1, beta2=opt_cfg.beta2, eps=opt_cfg.eps,
                         weight_decay=opt_cfg.weight_decay, lr_decay=opt_cfg.lr_decay)
        schedule = mgn_mod.GanSchedule(disc_steps=config.mgn.disc_steps,
                                       gen_steps=config.mgn.gen_steps,
                                       alternations=config.mgn.alternations)
        mgn_mod.train_gan(view.images, view.labels, gen, disc, schedule,
                          mask_ratio, gen_opt, disc_opt, config.mgn.batch_size,
                          rng_gan)
        train_inputs = train_mod.masked_images(gen, view.images)
        test_inputs = train_mod.masked_images(gen, test_images)
    else:
        train_inputs, test_inputs = view.images, test_images

    model = _build_classifier(config, dataset, rng_model)
    opt_cfg = config.optimizer
    optimizer = AdamW(model.named_parameters(), lr=opt_cfg.lr, beta1=opt_cfg.beta1,
                      beta2=opt_cfg.beta2, eps=opt_cfg.eps,
                      weight_decay=opt_cfg.weight_decay, lr_decay=opt_cfg.lr_decay)
    if use_relabel:
        relabel_cfg = config.relabel
        if relabel_fn is not None:
            from dataclasses import replace
            relabel_cfg = replace(relabel_cfg, fn=relabel_fn)
        policy = relabel_cfg.policy()
        audit_truth = dataset.train_true_labels()
    else:
        policy, audit_truth = None, None
    train_mod.train_classifier(model, optimizer, train_inputs, view.labels,
                               test_inputs, test_labels, config.train.epochs,
                               config.train.batch_size, rng_loop,
                               relabel_policy=policy, audit_truth=audit_truth)

    metrics, _ = train_mod.evaluate_model(model, test_inputs, test_labels,
                                          classes=dataset.spec.classes)
    occ_idx = dataset.occluded_test_indices()
    occ_acc = None
    if len(occ_idx):
        occ_metrics, _ = train_mod.evaluate_model(
            model, test_inputs[occ_idx], test_labels[occ_idx],
            classes=dataset.spec.classes)
        occ_acc = occ_metrics.overall_accuracy
    return metrics.overall_accuracy, occ_acc


AXES = ("mask-ratio", "threshold-fn", "components")


def cmd_ablate(config, out_dir, axis):
    from dataclasses import replace
    if axis not in AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; choose from {AXES}")
    _prepare_out(config, out_dir)
    if axis == "mask-ratio":
        cells = [("0.00", dict(use_mgn=False, use_relabel=False, mask_ratio=0.0))]
        cells += [(f"{m:.2f}", dict(use_mgn=True, use_relabel=False, mask_ratio=m))
                  for m in (0.10, 0.15, 0.20)]
    elif axis == "threshold-fn":
        cells = [(fn, dict(use_mgn=False, use_relabel=True,
                           mask_ratio=config.mgn.mask_ratio, relabel_fn=fn))
                 for fn in ("constant", "linear", "quadratic", "sigmoid")]
    else:
        cells = [(f"mgn={int(m)},relabel={int(r)}",
                  dict(use_mgn=m, use_relabel=r, mask_ratio=config.mgn.mask_ratio))
                 for m in (False, True) for r in (False, True)]

    detail_rows = []
    summary_rows = []
    for cell_name, kwargs in cells:
        accs, occ_accs = [], []
        for seed in config.ablate_seeds:
            run_cfg = replace(config, seed=int(seed))
            acc, occ = _pipeline_accuracy(run_cfg, **kwargs)
            detail_rows.append([axis, cell_name, seed, _fmt_float(acc), _fmt_float(occ)])
            accs.append(acc)
            if occ is not None:
                occ_accs.append(occ)
        summary_rows.append([
            axis, cell_name, len(accs),
            _fmt_float(float(np.mean(accs))), _fmt_float(float(np.std(accs))),
            _fmt_float(float(np.mean(occ_accs)) if occ_accs else None),
            _fmt_float(float(np.std(occ_accs)) if occ_accs else None)])

    _write_csv(os.path.join(out_dir, "ablate_detail.csv"),
               ["axis", "cell", "seed", "test_accuracy", "occluded_accuracy"],
               detail_rows)
    _write_csv(os.path.join(out_dir, "ablate_summary.csv"),
               ["axis", "cell", "seeds", "test_accuracy_mean", "test_accuracy_std",
                "occluded_accuracy_mean", "occluded_accuracy_std"],
               summary_rows)
    return summary_rows


# ---------------------------------------------------------------------------
# curves
# ---------------------------------------------------------------------------

def cmd_curves(log_paths, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    runs = []
    skipped = []
    for path in log_paths:
        try:
            epochs, accs, activation = [], [], None
            with open(path, newline="") as f:
                for row in csv.DictReader(f):
                    epochs.append(int(row["epoch"]))
                    accs.append(float(row["test_accuracy"]))
                    if activation is None and int(row["relabel_active"]):
                        activation = int(row["epoch"])
            if not epochs:
                raise ValueError("log has no epochs")
            label = os.path.basename(os.path.dirname(path)) or os.path.basename(path)
            runs.append({"label": label, "epochs": epochs, "accuracy": accs,
                         "activation_epoch": activation})
        except (OSError, ValueError, KeyError) as e:
            skipped.append((path, str(e)))
            print(f"warning: skipping malformed log {path}: {e}", file=sys.stderr)
    if not runs:
        raise ConfigError("no readable logs")
    svg = convergence_svg(runs)
    with open(os.path.join(out_dir, "curves.svg"), "w") as f:
        f.write(svg)
    rows = []
    for run in runs:
        for e, a in zip(run["epochs"], run["accuracy"]):
            rows.append([run["label"], e, _fmt_float(a)])
    _write_csv(os.path.join(out_dir, "curves.csv"),
               ["run", "epoch", "test_accuracy"], rows)
    return runs, skipped


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _add_common(p):
    p.add_argument("--config", required=True, help="path to JSON run configuration")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", default=None, help="output directory (default: config out_dir)")


def build_parser():
    parser = argparse.ArgumentParser(prog="maskvit",
                                     description="masked ViT pipeline on synthetic data")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-mgn", help="adversarially train the mask generator")
    _add_common(p)

    p = sub.add_parser("train-mvt", help="train the classifier on masked inputs")
    _add_common(p)
    p.add_argument("--mgn", default=None, help="mask-generator checkpoint path")

    p = sub.add_parser("evaluate", help="evaluate a trained classifier")
    _add_common(p)
    p.add_argument("--mvt", required=True, help="classifier checkpoint path")
    p.add_argument("--mgn", default=None, help="mask-generator checkpoint path")
    p.add_argument("--occluded-only", action="store_true",
                   help="restrict to occluded test samples")

    p = sub.add_parser("ablate", help="run an ablation sweep")
    _add_common(p)
    p.add_argument("--axis", required=True, choices=AXES)

    p = sub.add_parser("curves", help="render convergence curves from training logs")
    p.add_argument("logs", nargs="+", help="mvt_log.csv paths")
    p.add_argument("--out", required=True, help="output directory")
    return parser


def _resolve(args):
    config = RunConfig.from_json(args.config)
    if args.seed is not None:
        config.seed = args.seed
    out_dir = args.out or config.out_dir
    return config, out_dir


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "train-mgn":
            config, out = _resolve(args)
            cmd_train_mgn(config, out)
        elif args.command == "train-mvt":
            config, out = _resolve(args)
            cmd_train_mvt(config, out, mgn_path=args.mgn)
        elif args.command == "evaluate":
            config, out = _resolve(args)
            cmd_evaluate(config, out, args.mvt, mgn_path=args.mgn,
                         occluded_only=args.occluded_only)
        elif args.command == "ablate":
            config, out = _resolve(args)
            cmd_ablate(config, out, args.axis)
        elif args.command == "curves":
            cmd_curves(args.logs, args.out)
    except (ConfigError, DomainError, ShapeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except NumericError as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return 2
    except (FormatError, OSError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
