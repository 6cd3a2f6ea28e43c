"""Self-supervised pretraining (context restoration + contrastive) and
stratified k-fold fine-tuning with out-of-fold predictions."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from . import autograd as ag
from .autograd import AdamState, Tensor, adam_step
from .rng import stream
from .vit3d import (
    ViTConfig,
    as_params,
    check_params,
    encode,
    forward,
    init_encoder,
    init_head,
    init_pretext_heads,
    patchify,
    predict_proba,
    unpatchify,
)

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


# -- context restoration -------------------------------------------------

def apply_swaps(x: np.ndarray, swaps, patch_side: int) -> np.ndarray:
    """Swap image-channel patches pairwise; the mask channel is untouched."""
    out = np.array(x, dtype=np.float64, copy=True)
    tokens = patchify(out[:1], patch_side)  # (N, p^3) view on channel 0 only
    for i, j in swaps:
        tokens[[i, j]] = tokens[[j, i]]
    out[:1] = unpatchify(tokens, 1, patch_side)
    return out


def corrupt_context(x: np.ndarray, n_swaps: int, patch_side: int, rng):
    """Swap ``n_swaps`` disjoint patch pairs; returns ``(corrupted, swap_log)``.

    Re-applying the log to the corrupted input restores ``x`` exactly.
    """
    n_patches = (x.shape[-1] // patch_side) ** 3
    if n_swaps < 0 or n_swaps > n_patches // 2:
        raise ValueError(f"n_swaps={n_swaps} outside [0, {n_patches // 2}] for {n_patches} patches")
    picks = rng.permutation(n_patches)[: 2 * n_swaps]
    swaps = [(int(picks[2 * k]), int(picks[2 * k + 1])) for k in range(n_swaps)]
    return apply_swaps(x, swaps, patch_side), swaps


# -- contrastive views ---------------------------------------------------

class View(NamedTuple):
    data: np.ndarray
    params: dict


IDENTITY_VIEW = {"flip": (False, False, False), "rot_k": 0, "rot_plane": 0, "scale": 1.0, "shift": 0.0}
_PLANES = ((0, 1), (0, 2), (1, 2))


def draw_view_params(rng) -> dict:
    return {
        "flip": tuple(bool(f) for f in rng.random(3) < 0.5),
        "rot_k": int(rng.integers(4)),
        "rot_plane": int(rng.integers(3)),
        "scale": float(rng.uniform(0.9, 1.1)),
        "shift": float(rng.uniform(-0.1, 0.1)),
    }


def apply_view(x: np.ndarray, params: dict) -> np.ndarray:
    """Geometric transforms on every channel, intensity only on channel 0."""
    out = np.asarray(x, dtype=np.float64)
    for ax, f in enumerate(params["flip"]):
        if f:
            out = np.flip(out, axis=1 + ax)
    a, b = _PLANES[params["rot_plane"]]
    if params["rot_k"]:
        out = np.rot90(out, params["rot_k"], axes=(1 + a, 1 + b))
    out = np.array(out, copy=True)
    if params["scale"] != 1.0 or params["shift"] != 0.0:
        out[0] = out[0] * params["scale"] + params["shift"]
    return out


def augment_views(x: np.ndarray, rng):
    pa, pb = draw_view_params(rng), draw_view_params(rng)
    return View(apply_view(x, pa), pa), View(apply_view(x, pb), pb)


# -- configs -------------------------------------------------------------

@dataclass
class PretrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 3e-4
    weight_decay: float = 0.05
    n_swaps: int = 4
    contrastive_weight: float = 1.0
    temperature: float = 0.2


@dataclass
class FinetuneConfig:
    epochs: int = 20
    batch_size: int = 16
    lr: float = 1e-4
    weight_decay: float = 0.05
    augment: bool = True
    intensity_jitter: float = 0.0


ENCODER_EXCLUDE = ("recon.", "proj1.", "proj2.", "head.")


def encoder_only(params: dict) -> dict:
    return {k: v for k, v in params.items() if not k.startswith(ENCODER_EXCLUDE)}


def _arrays(params):
    return {k: np.array(v.data, copy=True) for k, v in params.items()}


def _check_finite(loss, where):
    if not math.isfinite(loss):
        raise DivergenceError(f"non-finite loss {loss} at {where}")


# -- pretraining ---------------------------------------------------------

@dataclass
class PretrainResult:
    params: dict  # name -> ndarray (encoder + pretext heads)
    log: list = field(default_factory=list)
    steps: int = 0


def pretrain(X: np.ndarray, cfg: ViTConfig, train: PretrainConfig, seed: int) -> PretrainResult:
    """Joint restoration + NT-Xent pretraining on ``X`` of shape ``(n, C, S, S, S)``."""
    n = len(X)
    if n == 0:
        raise ValueError("pretraining cohort is empty")
    params = as_params({**init_encoder(cfg, seed), **init_pretext_heads(cfg, seed)})
    state = AdamState(lr=train.lr, weight_decay=train.weight_decay)
    lam = train.contrastive_weight
    rows = []
    for epoch in range(train.epochs):
        order = stream(seed, "pretrain-order", epoch).permutation(n)
        sums = np.zeros(3)
        for start in range(0, n, train.batch_size):
            idx = order[start : start + train.batch_size]
            B = len(idx)
            corrupted, views = [], []
            for i in idx:
                r = stream(seed, "pretext", epoch, int(i))
                c, _ = corrupt_context(X[i], train.n_swaps, cfg.patch_side, r)
                corrupted.append(c)
                if lam:
                    va, vb = augment_views(X[i], r)
                    views += [va.data, vb.data]
            batch = np.stack(corrupted + views)
            h, _ = encode(params, batch, cfg)
            recon = ag.add(ag.matmul(h[:B, 1:, :], params["recon.w"]), params["recon.b"])
            target = patchify(X[idx][:, :1], cfg.patch_side)
            l_rec = ag.mse(recon, target)
            loss = l_rec
            l_con = 0.0
            if lam:
                z = h[B:, 0, :]
                z = ag.gelu(ag.add(ag.matmul(z, params["proj1.w"]), params["proj1.b"]))
                z = ag.add(ag.matmul(z, params["proj2.w"]), params["proj2.b"])
                con = ag.nt_xent(z, train.temperature)
                l_con = con.item()
                loss = ag.add(loss, ag.mul(con, lam))
            _check_finite(loss.item(), f"pretrain epoch {epoch}")
            ag.zero_grads(params)
            loss.backward()
            adam_step(params, ag.collect_grads(params), state)
            sums += np.array([l_rec.item(), l_con, loss.item()]) * B
        mean = sums / n
        rows.append({"epoch": epoch + 1, "restoration": mean[0], "contrastive": mean[1], "total": mean[2]})
        log.info("pretrain epoch %d: restoration %.4f contrastive %.4f total %.4f",
                 epoch + 1, *mean)
    return PretrainResult(_arrays(params), rows, state.step)


def write_training_log(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "restoration_loss", "contrastive_loss", "total_loss"])
        for r in rows:
            w.writerow([r["epoch"], repr(float(r["restoration"])), repr(float(r["contrastive"])),
                        repr(float(r["total"]))])


# -- fold planning -------------------------------------------------------

@dataclass
class FoldPlan:
    k: int
    seed: int
    test: np.ndarray
    pool: np.ndarray
    fold_of: dict  # sample index -> fold number, pool members only

    def train_idx(self, f: int) -> np.ndarray:
        return np.array([i for i in self.pool if self.fold_of[int(i)] != f], dtype=np.int64)

    def val_idx(self, f: int) -> np.ndarray:
        return np.array([i for i in self.pool if self.fold_of[int(i)] == f], dtype=np.int64)

    def to_dict(self):
        return {"k": self.k, "seed": self.seed, "test": [int(i) for i in self.test],
                "folds": [[int(i) for i in self.val_idx(f)] for f in range(self.k)]}


def _largest_remainder(counts: dict, total: int) -> dict:
    n = sum(counts.values())
    quotas = {c: counts[c] * total / n for c in counts}
    alloc = {c: int(math.floor(q)) for c, q in quotas.items()}
    left = total - sum(alloc.values())
    for c in sorted(counts, key=lambda c: (-(quotas[c] - alloc[c]), c))[:left]:
        alloc[c] += 1
    return alloc


def make_folds(labels, k: int = 5, test_fraction: float = 0.2, seed: int = 0) -> FoldPlan:
    """Stratified hold-out split, then stratified ``k`` folds on the remainder."""
    labels = np.asarray(labels)
    classes = sorted(set(int(c) for c in labels))
    by_class = {c: np.flatnonzero(labels == c) for c in classes}
    n_test = int(math.floor(test_fraction * len(labels) + 0.5))
    alloc = _largest_remainder({c: len(v) for c, v in by_class.items()}, n_test)
    test, pool_by_class = [], {}
    for c in classes:
        perm = stream(seed, "holdout", c).permutation(by_class[c])
        test += list(perm[: alloc[c]])
        pool_by_class[c] = perm[alloc[c] :]
        if len(pool_by_class[c]) < k:
            raise ValueError(f"class {c} has {len(pool_by_class[c])} pool members, need >= {k}")
    fold_of, offset = {}, 0
    for c in classes:
        members = stream(seed, "folds", c).permutation(pool_by_class[c])
        for j, i in enumerate(members):
            fold_of[int(i)] = (offset + j) % k
        offset = (offset + len(members)) % k
    pool = np.array(sorted(fold_of), dtype=np.int64)
    return FoldPlan(k, seed, np.array(sorted(int(i) for i in test), dtype=np.int64), pool, fold_of)


def assert_no_leakage(plan: FoldPlan) -> None:
    test = set(int(i) for i in plan.test)
    pool = set(int(i) for i in plan.pool)
    assert not test & pool, "test and pool overlap"
    covered = []
    for f in range(plan.k):
        tr, va = set(plan.train_idx(f).tolist()), set(plan.val_idx(f).tolist())
        assert not tr & va, f"fold {f}: training and validation indices overlap"
        assert not (tr | va) & test, f"fold {f}: test index used"
        assert tr | va == pool
        covered += list(va)
    assert sorted(covered) == sorted(pool), "validation folds do not partition the pool"


# -- fine-tuning ---------------------------------------------------------

@dataclass
class FinetuneResult:
    fold_params: list  # per fold: name -> ndarray
    oof: dict  # sample index -> p(necrosis)
    oof_fold: dict  # sample index -> fold that produced it
    test_probs: np.ndarray  # (n_test, k)
    train_sets: list = field(default_factory=list)

    @property
    def test_mean(self) -> np.ndarray:
        return self.test_probs.mean(axis=1)


def adapt_encoder(encoder: dict, cfg: ViTConfig) -> dict:
    """Fit checkpoint encoder weights to ``cfg``.

    The only adaptation is 2 -> 1 input channels, which keeps the image-channel
    rows of the patch projection. Anything else must match exactly.
    """
    enc = dict(encoder)
    w = enc["patch.w"]
    rows = cfg.in_channels * cfg.patch_voxels
    if w.shape[0] != rows:
        if cfg.in_channels == 1 and w.shape[0] == 2 * cfg.patch_voxels:
            enc["patch.w"] = w[: cfg.patch_voxels].copy()
        else:
            raise ValueError(
                f"checkpoint patch projection has {w.shape[0]} inputs, config needs {rows}"
            )
    check_params(enc, cfg)
    return enc


def _augment(x, rng, intensity_jitter):
    out = x
    for ax in range(3):
        if rng.random() < 0.5:
            out = np.flip(out, axis=1 + ax)
    out = np.array(out, copy=True)
    if intensity_jitter:
        out[0] *= rng.uniform(1.0 - intensity_jitter, 1.0 + intensity_jitter)
    return out


def train_classifier(X, y, cfg: ViTConfig, train: FinetuneConfig, seed: int,
                     encoder: Optional[dict] = None, tag="fold") -> dict:
    base = adapt_encoder(encoder, cfg) if encoder is not None else init_encoder(cfg, seed)
    params = as_params({**base, **init_head(cfg, seed)})
    state = AdamState(lr=train.lr, weight_decay=train.weight_decay)
    n = len(X)
    for epoch in range(train.epochs):
        rng = stream(seed, tag, "epoch", epoch)
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, train.batch_size):
            idx = order[start : start + train.batch_size]
            xb = X[idx]
            if train.augment:
                xb = np.stack([_augment(x, rng, train.intensity_jitter) for x in xb])
            logits, _ = forward(params, xb, cfg, rng=rng, training=True)
            loss = ag.cross_entropy(logits, y[idx])
            _check_finite(loss.item(), f"{tag} epoch {epoch}")
            ag.zero_grads(params)
            loss.backward()
            adam_step(params, ag.collect_grads(params), state)
            total += loss.item() * len(idx)
        log.debug("%s epoch %d loss %.4f", tag, epoch + 1, total / n)
    return _arrays(params)


def _fold_job(args):
    f, X, y, cfg, train, seed, encoder = args
    return train_classifier(X, y, cfg, train, seed, encoder, tag=f"fold{f}")


def finetune(encoder: Optional[dict], plan: FoldPlan, X: np.ndarray, y: np.ndarray,
             cfg: ViTConfig, train: FinetuneConfig, seed: int, workers: int = 1) -> FinetuneResult:
    """Train one model per fold; every pool sample is predicted exactly once,
    by the model that did not see it. ``workers > 1`` trains folds in
    separate processes (results are identical, each fold owns its streams)."""
    assert_no_leakage(plan)
    y = np.asarray(y)
    jobs = [(f, X[plan.train_idx(f)], y[plan.train_idx(f)], cfg, train, seed, encoder)
            for f in range(plan.k)]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=min(workers, plan.k)) as ex:
            trained = list(ex.map(_fold_job, jobs))
    else:
        trained = [_fold_job(j) for j in jobs]
    fold_params, oof, oof_fold, train_sets = [], {}, {}, []
    test_probs = np.zeros((len(plan.test), plan.k))
    for f, p in enumerate(trained):
        tr, va = plan.train_idx(f), plan.val_idx(f)
        frozen = as_params(p)
        pv = predict_proba(frozen, X[va], cfg)
        for i, prob in zip(va, pv):
            assert int(i) not in oof, "sample predicted twice"
            oof[int(i)] = float(prob)
            oof_fold[int(i)] = f
        test_probs[:, f] = predict_proba(frozen, X[plan.test], cfg)
        fold_params.append(p)
        train_sets.append(set(int(i) for i in tr))
        log.info("fold %d trained on %d samples", f, len(tr))
    for i, f in oof_fold.items():
        assert i not in train_sets[f]
    return FinetuneResult(fold_params, oof, oof_fold, test_probs, train_sets)


def write_oof_csv(path, ids, result: FinetuneResult, labels) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "fold", "p_necrosis", "label"])
        for i in sorted(result.oof):
            w.writerow([ids[i], result.oof_fold[i], repr(result.oof[i]), int(labels[i])])
