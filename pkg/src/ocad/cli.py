"""Pipeline orchestration: ocad synth | train | eval | report.

Configuration is plain-text ``key = value`` lines with ``#`` comments;
``--set key=value`` flags override file values. All randomness flows from
one master seed through named sub-seeds, so every command is deterministic
given its config.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import anogan as anogan_mod
from . import dataio, ganomaly, stats, synthgen
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .numerics import dft2d_magnitude

DEFAULTS = {
    "seed": "0",
    "out_dir": "runs/default",
    # synthetic corpus
    "synth.n_subjects": "13",
    "synth.slices_per_subject": "6",
    "synth.fps": "60",
    "synth.duration": "5",
    "synth.space": "210",
    "synth.pupil_sigma": "6",
    "synth.tremor_lo": "4",
    "synth.tremor_hi": "7",
    "synth.amp_lo": "3",
    "synth.amp_hi": "6",
    "synth.drift": "4",
    "synth.jitter": "0.5",
    "synth.noise": "4",
    "synth.counts": "",          # optional "label:role:count,..." override
    # training pool: augmented copies per slice (0 disables augmentation)
    "train.augment": "1",
    # model
    "model.input_size": "64",
    "model.nz": "100",
    "model.ngf": "64",
    "model.epochs": "60",
    "model.lr": "2e-4",
    "model.beta1": "0.5",
    "model.beta2": "0.999",
    "model.w_adv": "1",
    "model.w_ctx": "50",
    "model.w_enc": "1",
    # anogan
    "anogan.epochs": "60",
    "anogan.invert_steps": "500",
    "anogan.lambda": "0.1",
    "anogan.step_size": "0.01",
    # folds
    "fold.k": "4",
    "fold.train": "10",
    "fold.val": "3",
}


class RunConfig:
    def __init__(self, values=None):
        self.values = dict(DEFAULTS)
        if values:
            self.values.update(values)

    @classmethod
    def load(cls, path=None, overrides=()):
        values = {}
        if path is not None:
            text = Path(path).read_text(encoding="utf-8")
            for lineno, line in enumerate(text.splitlines(), 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValueError(f"{path}:{lineno}: expected key = value")
                key, _, value = line.partition("=")
                values[key.strip()] = value.strip()
        for item in overrides:
            if "=" not in item:
                raise ValueError(f"--set expects key=value, got {item!r}")
            key, _, value = item.partition("=")
            values[key.strip()] = value.strip()
        cfg = cls(values)
        unknown = set(cfg.values) - set(DEFAULTS)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cfg

    def get(self, key):
        return self.values[key]

    def get_int(self, key):
        return int(self.values[key])

    def get_float(self, key):
        return float(self.values[key])

    def synth_config(self):
        return synthgen.SynthConfig(
            fps=self.get_float("synth.fps"),
            duration=self.get_float("synth.duration"),
            space_extent=self.get_int("synth.space"),
            pupil_sigma=self.get_float("synth.pupil_sigma"),
            tremor_band=(self.get_float("synth.tremor_lo"),
                         self.get_float("synth.tremor_hi")),
            tremor_amp=(self.get_float("synth.amp_lo"),
                        self.get_float("synth.amp_hi")),
            drift_amp=self.get_float("synth.drift"),
            jitter_sigma=self.get_float("synth.jitter"),
            noise_sigma=self.get_float("synth.noise"),
            seed=self.get_int("seed"))

    def ganomaly_config(self, fold=0):
        return ganomaly.GanomalyConfig(
            nz=self.get_int("model.nz"),
            ngf=self.get_int("model.ngf"),
            input_size=self.get_int("model.input_size"),
            w_adv=self.get_float("model.w_adv"),
            w_ctx=self.get_float("model.w_ctx"),
            w_enc=self.get_float("model.w_enc"),
            epochs=self.get_int("model.epochs"),
            lr=self.get_float("model.lr"),
            beta1=self.get_float("model.beta1"),
            beta2=self.get_float("model.beta2"),
            seed=self.get_int("seed") * 1000 + fold)

    def anogan_config(self, fold=0):
        return anogan_mod.AnoganConfig(
            nz=self.get_int("model.nz"),
            ngf=self.get_int("model.ngf"),
            input_size=self.get_int("model.input_size"),
            epochs=self.get_int("anogan.epochs"),
            lr=self.get_float("model.lr"),
            beta1=self.get_float("model.beta1"),
            beta2=self.get_float("model.beta2"),
            invert_steps=self.get_int("anogan.invert_steps"),
            invert_lambda=self.get_float("anogan.lambda"),
            invert_step_size=self.get_float("anogan.step_size"),
            seed=self.get_int("seed") * 1000 + fold)


# ---------------------------------------------------------------------------
# shared helpers

def _fold_plan(cfg: RunConfig, manifest):
    pd_subjects = manifest.subjects(label="pd")
    control_subjects = manifest.subjects(label="control")
    return stats.make_folds(pd_subjects, control_subjects,
                            k=cfg.get_int("fold.k"),
                            seed=(cfg.get_int("seed"), 31337),
                            n_train=cfg.get_int("fold.train"),
                            n_val=cfg.get_int("fold.val"))


def _load_inputs(manifest_path, rows, size):
    base = Path(manifest_path).parent
    inputs, labels = [], []
    for row in rows:
        pixels = dataio.read_pgm(base / row.path)
        img = dataio.SliceImage(pixels=pixels, orientation=row.orientation,
                                subject_id=row.subject_id, eye=row.eye,
                                class_label=row.label)
        inputs.append(dataio.to_net_input(img, size=size))
        labels.append(row.label)
    return inputs, labels


_AUG_KINDS = ("mirror", "translate", "rotate", "rescale", "noise")


def _train_pool_builder(cfg, manifest_path, rows, size):
    """Returns build(epoch) -> (inputs, labels): the epoch's training pool.

    Each pool is every training slice plus ``train.augment`` freshly drawn
    augmented copies (one randomly chosen transform family per copy, from
    epoch-keyed seed streams). Re-drawing the copies every epoch keeps the
    discriminator from memorizing a fixed pool, which would collapse its
    loss and degrade the feature-matching term late in training.
    Augmentation applies only to training data; evaluation always sees
    unmodified slices."""
    base = Path(manifest_path).parent
    copies = cfg.get_int("train.augment")
    seed = cfg.get_int("seed")
    imgs, inputs, labels = [], [], []
    for row in rows:
        pixels = dataio.read_pgm(base / row.path)
        img = dataio.SliceImage(pixels=pixels, orientation=row.orientation,
                                subject_id=row.subject_id, eye=row.eye,
                                class_label=row.label)
        imgs.append(img)
        inputs.append(dataio.to_net_input(img, size=size))
        labels.append(row.label)

    def build(epoch):
        pool, pool_labels = list(inputs), list(labels)
        for index, img in enumerate(imgs):
            for j in range(copies):
                rng = np.random.default_rng((seed, 401, epoch, index, j))
                kind = _AUG_KINDS[rng.integers(0, len(_AUG_KINDS))]
                aug = dataio.augment(img, [dataio.AugmentOp(kind=kind)],
                                     seed=(seed, 409, epoch, index, j))[0]
                pool.append(dataio.to_net_input(aug, size=size))
                pool_labels.append(img.class_label)
        return pool, pool_labels

    return build


def _val_rows(manifest, fold):
    rows = manifest.select(label="pd", subjects=fold.val_pd)
    rows += manifest.select(label="control", subjects=fold.val_control)
    return rows


# ---------------------------------------------------------------------------
# commands

def cmd_synth(cfg: RunConfig):
    out_dir = Path(cfg.get("out_dir")) / "corpus"
    scfg = cfg.synth_config()
    counts_spec = cfg.get("synth.counts")
    n_subjects = cfg.get_int("synth.n_subjects")
    if counts_spec:
        counts = {}
        for item in counts_spec.split(","):
            label, role, n = item.strip().split(":")
            counts[(label, role)] = int(n)
    else:
        per_class = n_subjects * cfg.get_int("synth.slices_per_subject")
        if per_class < 1:
            raise ValueError("zero-count corpus requested")
        counts = {("pd", "pool"): per_class, ("control", "pool"): per_class}
    manifest = synthgen.gen_dataset(scfg, counts, out_dir,
                                    master_seed=cfg.get_int("seed"),
                                    n_subjects=n_subjects,
                                    train_subjects=cfg.get_int("fold.train"))
    per_class = manifest.counts_per_class()
    print(f"corpus: {out_dir}")
    print(f"images: pd={per_class['pd']} control={per_class['control']}")
    print(f"subjects: pd={len(manifest.subjects(label='pd'))} "
          f"control={len(manifest.subjects(label='control'))}")
    return 0


def cmd_train(cfg: RunConfig, manifest_path, fold_index, kind):
    manifest = dataio.read_manifest(manifest_path)
    plan = _fold_plan(cfg, manifest)
    plan.check_no_leakage()
    fold = plan.folds[fold_index]
    rows = manifest.select(label="pd", subjects=fold.train_pd)
    bad = [r for r in rows if r.label != "pd"]
    if bad or not rows:
        raise ValueError("training rows must be PD-only and non-empty")
    size = cfg.get_int("model.input_size")
    build_pool = _train_pool_builder(cfg, manifest_path, rows, size)

    out_dir = Path(cfg.get("out_dir"))
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / f"{kind}_fold{fold_index}.log"
    ckpt_path = out_dir / f"{kind}_fold{fold_index}.ckpt"
    with open(log_path, "w", encoding="utf-8") as log_fh:
        if kind == "ganomaly":
            mcfg = cfg.ganomaly_config(fold_index)
            model = ganomaly.build_model(mcfg)
            log_fh.write("epoch enc ctx adv gen disc\n")

            def log(rec):
                log_fh.write(
                    f"{rec['epoch']} {rec['enc']:.6f} {rec['ctx']:.6f} "
                    f"{rec['adv']:.6f} {rec['gen']:.6f} {rec['disc']:.6f}\n")

            for _ in range(mcfg.epochs):
                pool, pool_labels = build_pool(model.epochs_done)
                ganomaly.train(model, pool, pool_labels, epochs=1, log=log)
        elif kind == "anogan":
            mcfg = cfg.anogan_config(fold_index)
            model = anogan_mod.build_anogan(mcfg)
            log_fh.write("epoch disc gen\n")

            def log(rec):
                log_fh.write(
                    f"{rec['epoch']} {rec['disc']:.6f} {rec['gen']:.6f}\n")

            pool, pool_labels = build_pool(0)
            anogan_mod.train_gan(model, pool, pool_labels, log=log)
        else:
            raise ValueError(f"unknown model kind {kind!r}")
    # out_dir is environment, not experiment identity; keeping it would break
    # byte-identical checkpoints across run directories
    config_echo = {k: v for k, v in cfg.values.items() if k != "out_dir"}
    config_echo["fold"] = str(fold_index)
    save_checkpoint(ckpt_path, kind, config_echo, model.named_parameters())
    print(f"checkpoint: {ckpt_path}")
    print(f"log: {log_path}")
    return 0


def load_model_from_checkpoint(path, cfg: RunConfig):
    kind, echo, tensors = load_checkpoint(path)
    fold = int(echo.get("fold", "0"))
    if kind == "ganomaly":
        model = ganomaly.build_model(cfg.ganomaly_config(fold))
    else:
        model = anogan_mod.build_anogan(cfg.anogan_config(fold))
    model.load_parameters(tensors)
    return kind, model


def _score_fold(cfg, kind, model, manifest_path, manifest, fold):
    rows = _val_rows(manifest, fold)
    size = cfg.get_int("model.input_size")
    inputs, labels = _load_inputs(manifest_path, rows, size)
    samples = []
    for row, x, label in zip(rows, inputs, labels):
        if kind == "ganomaly":
            raw = ganomaly.anomaly_score(model, x)
            comps = ganomaly.score_components(model, x)
        else:
            raw = anogan_mod.anogan_score(model, x, seed=0)
            comps = (0.0, 0.0, 0.0)
        samples.append(ganomaly.ScoredSample(
            subject_id=row.subject_id, eye=row.eye,
            orientation=row.orientation, label=label, raw=raw,
            components=comps))
    normalized = ganomaly.normalize_scores([s.raw for s in samples])
    for s, n in zip(samples, normalized):
        s.normalized = n
    return samples


def _fold_metrics(cfg, kind, samples, fold_index):
    labels = [s.label for s in samples]
    norm = [s.normalized for s in samples]
    points, auc = stats.roc_auc(norm, labels, positive_rule="pd_low")
    threshold = stats.select_threshold(norm, labels, positive_rule="pd_low",
                                       criterion="max_f1")
    conf = stats.confusion_at_threshold(norm, labels, threshold,
                                        positive_rule="pd_low")
    subj_scores = stats.subject_aggregate(samples)
    subj_labels = {s.subject_id: s.label for s in samples}
    subj_ids = sorted(subj_scores)
    subj_conf = stats.confusion_at_threshold(
        [subj_scores[s] for s in subj_ids],
        [subj_labels[s] for s in subj_ids], threshold, positive_rule="pd_low")

    anova = {}
    if kind == "ganomaly":
        names = ("enc", "ctx", "adv")
        for i, name in enumerate(names):
            normal = [s.components[i] for s in samples if s.label == "pd"]
            anomalous = [s.components[i] for s in samples
                         if s.label == "control"]
            res = stats.one_way_anova([normal, anomalous])
            anova[name] = {"f": res.f_stat, "p": res.p_value,
                           "df": [res.df_between, res.df_within]}
    else:
        normal = [s.normalized for s in samples if s.label == "pd"]
        anomalous = [s.normalized for s in samples if s.label == "control"]
        res = stats.one_way_anova([normal, anomalous])
        anova["score"] = {"f": res.f_stat, "p": res.p_value,
                          "df": [res.df_between, res.df_within]}

    return {
        "schema": 1,
        "model": kind,
        "fold": fold_index,
        "auc": auc,
        "threshold": threshold,
        "precision": conf.precision,
        "recall": conf.recall,
        "f1": conf.f1,
        "confusion": {"tp": conf.tp, "fp": conf.fp,
                      "tn": conf.tn, "fn": conf.fn},
        "subject_confusion": {"tp": subj_conf.tp, "fp": subj_conf.fp,
                              "tn": subj_conf.tn, "fn": subj_conf.fn},
        "n_val_pd": sum(1 for s in samples if s.label == "pd"),
        "n_val_control": sum(1 for s in samples if s.label == "control"),
        "anova": anova,
    }, points


def _write_fold_outputs(out_dir, kind, fold_index, samples, metrics, points):
    tag = f"{kind}_fold{fold_index}"
    with open(out_dir / f"roc_{tag}.csv", "w", newline="",
              encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fpr", "tpr", "threshold"])
        for fpr, tpr, thr in points:
            writer.writerow([f"{fpr:.10g}", f"{tpr:.10g}", f"{thr:.10g}"])
    with open(out_dir / f"scores_{tag}.csv", "w", newline="",
              encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject_id", "eye", "orientation", "label",
                         "raw", "normalized"])
        for s in samples:
            writer.writerow([s.subject_id, s.eye, s.orientation, s.label,
                             f"{s.raw:.12g}", f"{s.normalized:.12g}"])
    with open(out_dir / f"components_{tag}.csv", "w", newline="",
              encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject_id", "label", "enc", "ctx", "adv"])
        for s in samples:
            writer.writerow([s.subject_id, s.label,
                             f"{s.components[0]:.12g}",
                             f"{s.components[1]:.12g}",
                             f"{s.components[2]:.12g}"])
    with open(out_dir / f"metrics_{tag}.json", "w", encoding="utf-8") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_eval(cfg: RunConfig, checkpoint_path, manifest_path, fold_index):
    manifest = dataio.read_manifest(manifest_path)
    plan = _fold_plan(cfg, manifest)
    plan.check_no_leakage()
    out_dir = Path(cfg.get("out_dir"))
    out_dir.mkdir(parents=True, exist_ok=True)

    if fold_index == "all":
        kind, _, _ = load_checkpoint(checkpoint_path)
        folds = range(len(plan.folds))
        ckpt_dir = Path(checkpoint_path).parent
        paths = [ckpt_dir / f"{kind}_fold{i}.ckpt" for i in folds]
    else:
        folds = [int(fold_index)]
        paths = [Path(checkpoint_path)]

    all_points = []
    aucs = []
    for i, path in zip(folds, paths):
        kind, model = load_model_from_checkpoint(path, cfg)
        echo_fold = int(load_checkpoint(path)[1].get("fold", "0"))
        if echo_fold != i:
            raise ValueError(
                f"checkpoint {path} was trained on fold {echo_fold}, "
                f"requested fold {i}")
        samples = _score_fold(cfg, kind, model, manifest_path, manifest,
                              plan.folds[i])
        metrics, points = _fold_metrics(cfg, kind, samples, i)
        _write_fold_outputs(out_dir, kind, i, samples, metrics, points)
        all_points.append(points)
        aucs.append(metrics["auc"])
        print(f"fold {i}: auc={metrics['auc']:.4f} "
              f"recall={metrics['recall']:.4f} "
              f"precision={metrics['precision']:.4f}")

    if fold_index == "all":
        grid = np.linspace(0.0, 1.0, 101)
        curves = []
        for points in all_points:
            fprs = np.array([p[0] for p in points])
            tprs = np.array([p[1] for p in points])
            curves.append(np.interp(grid, fprs, tprs))
        curves = np.array(curves)
        mean = curves.mean(axis=0)
        std = curves.std(axis=0)
        with open(out_dir / f"roc_{kind}_mean.csv", "w", newline="",
                  encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["fpr", "tpr_mean", "tpr_std"])
            for f, m, s in zip(grid, mean, std):
                writer.writerow([f"{f:.10g}", f"{m:.10g}", f"{s:.10g}"])
        summary = {"schema": 1, "model": kind, "folds": len(aucs),
                   "auc_mean": float(np.mean(aucs)),
                   "auc_std": float(np.std(aucs)),
                   "auc_per_fold": aucs}
        with open(out_dir / f"metrics_{kind}_summary.json", "w",
                  encoding="utf-8") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")
        print(f"mean auc: {summary['auc_mean']:.4f} "
              f"+- {summary['auc_std']:.4f}")
    return 0


def _spectrum_pgm(diff):
    mag = dft2d_magnitude(diff)
    scaled = np.log1p(mag)
    top = scaled.max()
    if top > 0:
        scaled = scaled / top * 255.0
    return np.clip(np.rint(scaled), 0, 255).astype(np.uint8)


def cmd_report(cfg: RunConfig, checkpoint_path, manifest_path, fold_index):
    manifest = dataio.read_manifest(manifest_path)
    plan = _fold_plan(cfg, manifest)
    fold = plan.folds[fold_index]
    kind, model = load_model_from_checkpoint(checkpoint_path, cfg)
    if kind != "ganomaly":
        raise ValueError("report requires a ganomaly checkpoint")
    out_dir = Path(cfg.get("out_dir")) / "report"
    out_dir.mkdir(parents=True, exist_ok=True)
    size = cfg.get_int("model.input_size")

    for label in ("pd", "control"):
        if label == "pd":
            rows = manifest.select(label="pd", subjects=fold.val_pd)
        else:
            rows = manifest.select(label="control", subjects=fold.val_control)
        if not rows:
            raise ValueError(f"no {label} validation rows for fold {fold_index}")
        row = rows[0]
        inputs, _ = _load_inputs(manifest_path, [row], size)
        x = inputs[0]
        _, xr, _ = ganomaly.generator_pass(model, x)
        to_u8 = lambda t: np.clip(np.rint((t[0] + 1.0) * 127.5),
                                  0, 255).astype(np.uint8)
        dataio.write_pgm(out_dir / f"input_{label}.pgm", to_u8(x))
        dataio.write_pgm(out_dir / f"reconstruction_{label}.pgm", to_u8(xr))
        dataio.write_pgm(out_dir / f"spectrum_{label}.pgm",
                         _spectrum_pgm(x[0] - xr[0]))

    comp_path = Path(cfg.get("out_dir")) / f"components_{kind}_fold{fold_index}.csv"
    if not comp_path.exists():
        raise ValueError(f"missing eval output {comp_path}; run eval first")
    rows = list(csv.DictReader(open(comp_path, encoding="utf-8")))
    with open(out_dir / "boxplot_components.csv", "w", newline="",
              encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["component", "population", "min", "q1", "median",
                         "q3", "max"])
        for comp in ("enc", "ctx", "adv"):
            for pop, lab in (("normal", "pd"), ("anomalous", "control")):
                vals = np.array([float(r[comp]) for r in rows
                                 if r["label"] == lab])
                if vals.size == 0:
                    continue
                q = np.percentile(vals, [0, 25, 50, 75, 100])
                writer.writerow([comp, pop] + [f"{v:.12g}" for v in q])
    print(f"report: {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# entry point

def _categorize(exc):
    if isinstance(exc, CheckpointError):
        return "checkpoint"
    if isinstance(exc, FloatingPointError):
        return "divergence"
    if isinstance(exc, (FileNotFoundError, OSError)):
        return "io"
    if isinstance(exc, (ValueError, KeyError, IndexError)):
        return "validation"
    return "internal"


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ocad",
        description="One-class anomaly detection for fixation slice images")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VAL",
                       help="override a config value")

    p = sub.add_parser("synth", help="generate the synthetic corpus")
    common(p)

    p = sub.add_parser("train", help="train a model on one fold")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--model", choices=["ganomaly", "anogan"],
                   default="ganomaly")

    p = sub.add_parser("eval", help="score and evaluate a fold (or all)")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--fold", default="0",
                   help="fold index, or 'all' for the cross-fold summary")

    p = sub.add_parser("report", help="emit figure data for a fold")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--fold", type=int, default=0)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = RunConfig.load(args.config, args.set)
        if args.command == "synth":
            return cmd_synth(cfg)
        if args.command == "train":
            return cmd_train(cfg, args.manifest, args.fold, args.model)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint, args.manifest, args.fold)
        if args.command == "report":
            return cmd_report(cfg, args.checkpoint, args.manifest, args.fold)
        raise ValueError(f"unknown command {args.command!r}")
    except Exception as exc:  # noqa: BLE001 - single exit funnel
        print(f"error:{_categorize(exc)}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
