"""End-to-end experiment: cohort, pretraining, arms, selection, stacking, evaluation."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from itertools import combinations
from pathlib import Path

import numpy as np

from . import __version__
from .autograd import save_checkpoint
from .config import META_ARMS, VIT_ARMS, RunConfig
from .evalstat import (EvalReport, fisher_exact, fold_dispersion, mann_whitney_u, paired_t,
                       roc_auc, shapiro_wilk, threshold_metrics, write_roc_csv)
from .featselect import select_features
from .fusion import (build_stack, predict_multimodal, save_meta, train_meta_folds)
from .imaging_io import read_raw_cohort, write_nifti
from .phantom import write_cohort
from .preprocess import (assemble_channels, clinical_columns, fit_clinical_stats,
                         preprocess_sample)
from .radiomics import extract_all
from .records import VOCAB
from .rng import child_seed
from .ssl_train import (FoldPlan, assert_no_leakage, encoder_only, finetune, make_folds,
                        pretrain, write_oof_csv, write_training_log)
from .vit3d import (ViTConfig, as_params, attention_rollout, forward,
                    mask_attention_fraction)

log = logging.getLogger(__name__)


class ArmFailure(RuntimeError):
    pass


@dataclass
class Cohort:
    unlabeled: list
    labeled: list  # preprocessed, z-scored
    labeled_raw: list  # preprocessed without intensity normalization (radiomics input)
    distractor: dict  # id -> bool (empty when unknown)

    @property
    def ids(self):
        return [s.id for s in self.labeled]

    @property
    def labels(self):
        return np.array([s.label for s in self.labeled], dtype=np.int64)


@dataclass
class ArmOutput:
    test_prob: np.ndarray
    fold_test_probs: np.ndarray  # (n_test, k)
    extra: dict = field(default_factory=dict)


@dataclass
class RunResult:
    config: RunConfig
    plan: FoldPlan
    cohort: Cohort
    report: EvalReport
    arms: dict  # arm -> ArmOutput
    out: Path


def seeds_for(seed: int) -> dict:
    return {name: child_seed(seed, name) for name in ("folds", "pretrain", "finetune", "selection", "meta")}


def _json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# -- cohort --------------------------------------------------------------

def cmd_generate(cfg: RunConfig, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_cohort(cfg.phantom, out_dir)
    _json(out_dir / "provenance.json", {"generator": "rnvit.phantom", "version": __version__,
                                        "phantom_spec": cfg.phantom.to_dict()})
    return out_dir


def load_cohort(cohort_dir, cfg: RunConfig) -> Cohort:
    cohort_dir = Path(cohort_dir)
    side = cfg.vit.input_side
    spacing = float(cfg.preprocess.get("spacing", 1.0))
    unl_raw = read_raw_cohort(cohort_dir / "unlabeled") if (cohort_dir / "unlabeled").is_dir() else []
    lab_raw = read_raw_cohort(cohort_dir / "labeled")
    for s in lab_raw:
        if s.label is None or s.clinical is None:
            raise ValueError(f"labeled sample {s.id} lacks a label or clinical record")
    meta = cohort_dir / "phantom.json"
    distractor = json.loads(meta.read_text())["distractor"] if meta.exists() else {}
    return Cohort(
        unlabeled=[preprocess_sample(s, side, spacing) for s in unl_raw],
        labeled=[preprocess_sample(s, side, spacing) for s in lab_raw],
        labeled_raw=[preprocess_sample(s, side, spacing, normalize=False) for s in lab_raw],
        distractor=distractor,
    )


def cohort_tests(cohort: Cohort) -> list:
    """Class-wise comparison of the clinical variables (necrosis vs progression)."""
    y = cohort.labels
    recs = [s.clinical for s in cohort.labeled]
    out = []
    for f in ("age", "recurrence_days"):
        vals = np.array([getattr(r, f) for r in recs])
        a, b = vals[y == 1], vals[y == 0]
        out.append((f"{f}: necrosis vs progression", mann_whitney_u(a, b)))
        for name, grp in (("necrosis", a), ("progression", b)):
            if 3 <= len(grp) and np.ptp(grp) > 0:
                out.append((f"{f}: normality ({name})", shapiro_wilk(grp)))
    for f in ("sex", "primary", "systemic"):
        cats = [c for c in VOCAB[f] if any(getattr(r, f) == c for r in recs)]
        table = [[sum(1 for r, l in zip(recs, y) if l == cls and getattr(r, f) == c) for c in cats]
                 for cls in (1, 0)]
        if len(cats) >= 2 and all(sum(row) > 0 for row in table):
            out.append((f"{f}: necrosis vs progression", fisher_exact(table)))
    return out


# -- ViT arms ------------------------------------------------------------

def _vit_config(cfg: RunConfig, arm: str) -> ViTConfig:
    return replace(cfg.vit, in_channels=1) if arm == "ssl_vit_t1ce_only" else cfg.vit


def _inputs(samples, channels):
    return np.stack([assemble_channels(s.image, s.mask, channels) for s in samples])


def attention_maps(fold_params, x, vcfg: ViTConfig, like):
    """Rollout heatmap averaged over fold models (still sums to 1)."""
    heat = None
    for p in fold_params:
        _, trace = forward(as_params(p), x, vcfg, capture=True)
        h = attention_rollout(trace.sample(0), vcfg).voxels
        heat = h if heat is None else heat + h
    return like.with_voxels(heat / len(fold_params))


def run_vit_arm(arm, cfg, cohort, plan, encoder, seeds, out: Path) -> ArmOutput:
    vcfg = _vit_config(cfg, arm)
    X = _inputs(cohort.labeled, vcfg.in_channels)
    y = cohort.labels
    enc = encoder if arm != "scratch_vit" else None
    if arm != "scratch_vit" and enc is None:
        raise ArmFailure(f"{arm} needs a pretrained encoder")
    workers = plan.k if cfg.parallel_folds else 1
    res = finetune(enc, plan, X, y, vcfg, cfg.finetune, seeds["finetune"], workers=workers)
    ck = out / "checkpoints" / arm
    ck.mkdir(parents=True, exist_ok=True)
    for f, p in enumerate(res.fold_params):
        save_checkpoint(ck / f"fold{f}", p, seed=seeds["finetune"], step=cfg.finetune.epochs,
                        config={"arm": arm, "fold": f, "vit": vcfg.to_dict()})
    write_oof_csv(out / f"oof_{arm}.csv", cohort.ids, res, y)
    extra = {"oof": res.oof, "fold_params": res.fold_params}
    if arm in ("ssl_vit", "ssl_vit_t1ce_only"):
        extra["attention"] = export_attention(arm, res.fold_params, vcfg, cohort, plan, X, out)
    return ArmOutput(res.test_mean, res.test_probs, extra)


def export_attention(arm, fold_params, vcfg, cohort, plan, X, out: Path) -> dict:
    d = out / "attention" / arm
    d.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in plan.test:
        s = cohort.labeled[i]
        heat = attention_maps(fold_params, X[i], vcfg, s.image)
        write_nifti(heat, d / f"{s.id}_attention.nii")
        rows.append((s.id, cohort.distractor.get(s.id), mask_attention_fraction(heat, s.mask)))
    with open(d / "mask_fraction.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "distractor", "mask_attention_fraction"])
        for r, dis, frac in rows:
            w.writerow([r, "" if dis is None else int(dis), repr(frac)])
    fr = np.array([r[2] for r in rows])
    dis = np.array([bool(r[1]) for r in rows])
    summary = {"mean_all": float(fr.mean())}
    if dis.any():
        summary["mean_distractor"] = float(fr[dis].mean())
        summary["n_distractor"] = int(dis.sum())
    return summary


# -- tabular arms --------------------------------------------------------

def build_features(cohort: Cohort, plan: FoldPlan):
    pool_recs = [cohort.labeled[i].clinical for i in plan.pool]
    stats = fit_clinical_stats(pool_recs)
    return extract_all(cohort.labeled_raw, stats), stats


def run_meta_arm(arm, cfg, cohort, plan, features, selection, ssl_out, seeds, out: Path) -> ArmOutput:
    ids = cohort.ids
    y = cohort.labels
    pool_ids = [ids[i] for i in plan.pool]
    test_ids = [ids[i] for i in plan.test]
    if arm == "clinical_only":
        cols = clinical_columns(VOCAB)
    else:
        cols = selection.retained_columns
        if not cols and arm == "radiomics_clinical":
            raise ArmFailure("feature selection retained no columns")
    oof = test_img = None
    if arm == "multimodal":
        if ssl_out is None:
            raise ArmFailure("multimodal needs the ssl_vit arm's out-of-fold probabilities")
        oof = np.array([ssl_out.extra["oof"][int(i)] for i in plan.pool])
        test_img = ssl_out.test_prob
    fold = np.array([plan.fold_of[int(i)] for i in plan.pool])
    stack = build_stack(pool_ids, features, cols, y[plan.pool], oof=oof, fold=fold)
    stack.write_csv(out / f"stack_{arm}.csv")
    models = train_meta_folds(stack, plan, cfg.meta, seeds["meta"], tag=arm)
    ck = out / "checkpoints" / arm
    ck.mkdir(parents=True, exist_ok=True)
    for f, m in enumerate(models):
        save_meta(ck / f"fold{f}", m, seed=seeds["meta"], extra={"arm": arm, "fold": f})
    per_fold = np.stack([predict_multimodal(m, features, test_ids, test_img) for m in models], axis=1)
    return ArmOutput(per_fold.mean(axis=1), per_fold)


# -- evaluation ----------------------------------------------------------

def arm_metrics(arm_out: ArmOutput, y_test, roc_path) -> dict:
    curve = roc_auc(arm_out.test_prob, y_test)
    write_roc_csv(roc_path, curve)
    fold_auc = [roc_auc(arm_out.fold_test_probs[:, f], y_test).auc
                for f in range(arm_out.fold_test_probs.shape[1])]
    disp = fold_dispersion(fold_auc)
    m = {
        "test_auc": curve.auc,
        "threshold_metrics": threshold_metrics(arm_out.test_prob, y_test),
        "fold_auc": fold_auc,
        "fold_auc_summary": str(disp),
        "fold_auc_mean": disp.mean,
        "fold_auc_sd": disp.sd,
        "n_test": int(len(y_test)),
    }
    if "attention" in arm_out.extra:
        m["attention"] = arm_out.extra["attention"]
    if "oof" in arm_out.extra:
        oof = arm_out.extra["oof"]
        idx = sorted(oof)
        m["oof_auc"] = roc_auc([oof[i] for i in idx], arm_out.extra["labels"][idx]).auc
    return m


def write_test_predictions(path, ids, y, outputs: dict) -> None:
    arms = list(outputs)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label"] + arms)
        for k, r in enumerate(ids):
            w.writerow([r, int(y[k])] + [repr(float(outputs[a].test_prob[k])) for a in arms])


def run(cfg: RunConfig, cohort_dir=None) -> RunResult:
    """Execute every configured arm on one shared split; returns the in-memory results."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = seeds_for(cfg.seed)
    cohort_dir = cohort_dir or cfg.cohort
    if cohort_dir is None:
        cohort_dir = cmd_generate(cfg, out / "cohort")
    cohort = load_cohort(cohort_dir, cfg)
    y = cohort.labels
    plan = make_folds(y, cfg.folds["k"], cfg.folds["test_fraction"], seeds["folds"])
    assert_no_leakage(plan)
    _json(out / "folds.json", {**plan.to_dict(), "ids": cohort.ids})
    report = EvalReport(cfg.to_dict(), cfg.seed)
    report.seeds = dict(seeds)
    for label, res in cohort_tests(cohort):
        report.add_test(label, res)

    encoder = None
    if any(a in cfg.arms for a in ("ssl_vit", "ssl_vit_t1ce_only")):
        if not cohort.unlabeled:
            raise ArmFailure("pretraining needs an unlabeled cohort")
        XU = _inputs(cohort.unlabeled, cfg.vit.in_channels)
        pre = pretrain(XU, cfg.vit, cfg.pretrain, seeds["pretrain"])
        ck = out / "checkpoints"
        ck.mkdir(parents=True, exist_ok=True)
        save_checkpoint(ck / "pretrain", pre.params, seed=seeds["pretrain"], step=pre.steps,
                        config={"vit": cfg.vit.to_dict(), "pretrain": cfg.raw["pretrain"]})
        write_training_log(out / "pretrain_log.csv", pre.log)
        encoder = encoder_only(pre.params)

    outputs = {}
    for arm in [a for a in cfg.arms if a in VIT_ARMS]:
        try:
            o = run_vit_arm(arm, cfg, cohort, plan, encoder, seeds, out)
            o.extra["labels"] = y
            outputs[arm] = o
        except Exception as e:  # structured failure, other arms continue
            log.exception("arm %s failed", arm)
            report.add_failure(arm, e)

    features = selection = None
    if any(a in cfg.arms for a in META_ARMS):
        try:
            features, _ = build_features(cohort, plan)
            features.to_csv(out / "features.csv")
            pool_tab = features.rows([cohort.ids[i] for i in plan.pool])
            selection = select_features(pool_tab, y[plan.pool], seed=seeds["selection"],
                                        variance_threshold=cfg.selection["variance_threshold"],
                                        corr_threshold=cfg.selection["corr_threshold"],
                                        k=cfg.selection["k"], n_lambdas=cfg.selection["n_lambdas"],
                                        one_se=cfg.selection["one_se"])
            selection.write(out / "selection.json")
        except Exception as e:
            log.exception("feature extraction/selection failed")
            for a in META_ARMS:
                if a in cfg.arms:
                    report.add_failure(a, e)
    if features is not None:
        for arm in [a for a in cfg.arms if a in META_ARMS]:
            try:
                outputs[arm] = run_meta_arm(arm, cfg, cohort, plan, features, selection,
                                            outputs.get("ssl_vit"), seeds, out)
            except Exception as e:
                log.exception("arm %s failed", arm)
                report.add_failure(arm, e)

    y_test = y[plan.test]
    for arm, o in outputs.items():
        report.add_arm(arm, arm_metrics(o, y_test, out / f"roc_{arm}.csv"))
    for a, b in combinations(list(outputs), 2):
        try:
            res = paired_t(report.arms[a]["fold_auc"], report.arms[b]["fold_auc"])
            report.add_test(f"{a} vs {b}: per-fold test AUC", res)
        except ValueError as e:
            report.tests.append({"comparison": f"{a} vs {b}: per-fold test AUC", "error": str(e)})
    write_test_predictions(out / "test_predictions.csv", [cohort.ids[i] for i in plan.test],
                           y_test, outputs)
    report.write(out / "report.json")
    return RunResult(cfg, plan, cohort, report, outputs, out)
