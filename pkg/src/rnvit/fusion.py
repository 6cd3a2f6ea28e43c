"""Stacked multimodal classifier over out-of-fold ViT probabilities and tabular features."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import AdamState, Tensor, adam_step
from .radiomics import FeatureTable
from .rng import stream
from .ssl_train import DivergenceError, FoldPlan
from .vit3d import ViTConfig, as_params, predict_proba

OOF_COLUMN = "oof_probability"
_EPS = 1e-6


class StackError(ValueError):
    pass


def prob_logit(p) -> np.ndarray:
    p = np.clip(np.asarray(p, dtype=np.float64), _EPS, 1.0 - _EPS)
    return np.log(p) - np.log1p(-p)


@dataclass
class StackedDataset:
    ids: list
    columns: list  # optional OOF_COLUMN first, then feature columns
    X: np.ndarray  # raw values; the probability column is in [0, 1]
    y: np.ndarray
    fold: np.ndarray | None = None

    def rows(self, idx) -> "StackedDataset":
        idx = np.asarray(idx)
        return StackedDataset([self.ids[i] for i in idx], list(self.columns), self.X[idx],
                              self.y[idx], None if self.fold is None else self.fold[idx])

    def write_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["id", "label", "fold"] + self.columns)
            for k, r in enumerate(self.ids):
                fold = "" if self.fold is None else int(self.fold[k])
                w.writerow([r, int(self.y[k]), fold] + [repr(float(v)) for v in self.X[k]])
        return path


def build_stack(ids, features: FeatureTable, columns, y, oof=None, fold=None) -> StackedDataset:
    """Join an optional probability vector (aligned to ``ids``) with named feature columns.

    Every requested column must exist; rows are matched to ``features`` by id.
    """
    ids = list(ids)
    missing_ids = [r for r in ids if r not in set(features.ids)]
    if missing_ids:
        raise StackError(f"ids absent from feature table: {missing_ids[:5]}")
    try:
        sub = features.select(list(columns)).rows(ids)
    except KeyError as e:
        raise StackError(f"stack column missing from features: {e}") from e
    parts, names = [], []
    if oof is not None:
        oof = np.asarray(oof, dtype=np.float64)
        if oof.shape != (len(ids),):
            raise StackError(f"probability vector has shape {oof.shape}, expected ({len(ids)},)")
        if np.any(~np.isfinite(oof)) or oof.min() < 0 or oof.max() > 1:
            raise StackError("probabilities must lie in [0, 1]")
        parts.append(oof[:, None])
        names.append(OOF_COLUMN)
    parts.append(sub.values)
    names += list(columns)
    X = np.hstack(parts) if parts else np.zeros((len(ids), 0))
    return StackedDataset(ids, names, X, np.asarray(y, dtype=np.int64),
                          None if fold is None else np.asarray(fold))


# -- meta model ----------------------------------------------------------

@dataclass(frozen=True)
class MetaConfig:
    hidden: tuple = (32, 16)
    dropout: float = 0.1
    epochs: int = 200
    batch_size: int = 16
    lr: float = 3e-3
    weight_decay: float = 1e-3

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class MetaModel:
    columns: list
    mean: np.ndarray
    std: np.ndarray
    params: dict  # name -> ndarray
    config: MetaConfig = field(default_factory=MetaConfig)

    def inputs(self, X: np.ndarray) -> np.ndarray:
        """Raw stack rows -> network inputs (logit for the probability, z-score otherwise)."""
        Z = (np.asarray(X, dtype=np.float64) - self.mean) / self.std
        if self.columns and self.columns[0] == OOF_COLUMN:
            Z[:, 0] = prob_logit(X[:, 0])
        return Z

    def predict(self, X: np.ndarray) -> np.ndarray:
        frozen = {k: Tensor(v) for k, v in self.params.items()}
        z = meta_forward(frozen, self.inputs(X), self.config).data
        return 1.0 / (1.0 + np.exp(-z))

    def to_dict(self):
        return {"columns": list(self.columns), "mean": self.mean.tolist(),
                "std": self.std.tolist(), "config": self.config.to_dict()}


def init_meta(n_in: int, cfg: MetaConfig, seed: int) -> dict:
    rng = stream(seed, "meta-init")
    sizes = [n_in, *cfg.hidden, 1]
    p = {}
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        lim = np.sqrt(6.0 / (a + b))
        p[f"fc{i}.w"] = rng.uniform(-lim, lim, size=(a, b))
        p[f"fc{i}.b"] = np.zeros(b)
    return p


def meta_forward(params, Z, cfg: MetaConfig, rng=None, training=False) -> Tensor:
    """Logits ``(B,)``: linear/GELU/dropout blocks then a linear output."""
    h = Tensor(np.asarray(Z, dtype=np.float64)) if not isinstance(Z, Tensor) else Z
    n_layers = len(cfg.hidden) + 1
    for i in range(n_layers):
        h = ag.add(ag.matmul(h, params[f"fc{i}.w"]), params[f"fc{i}.b"])
        if i < n_layers - 1:
            h = ag.dropout(ag.gelu(h), cfg.dropout if training else 0.0, rng)
    return h.reshape(h.shape[0])


def _stats(stack: StackedDataset):
    mu = stack.X.mean(axis=0)
    sd = stack.X.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    if stack.columns and stack.columns[0] == OOF_COLUMN:
        mu[0], sd[0] = 0.0, 1.0
    return mu, sd


def train_meta(stack: StackedDataset, cfg: MetaConfig = MetaConfig(), seed: int = 0,
               tag: str = "meta", history: list | None = None) -> MetaModel:
    """Mini-batch Adam on binary cross-entropy; standardization fitted on ``stack`` rows."""
    if stack.X.shape[1] == 0:
        raise StackError("stack has no columns")
    if len(stack.ids) < 2:
        raise StackError("meta-model needs at least two rows")
    mu, sd = _stats(stack)
    model = MetaModel(list(stack.columns), mu, sd, {}, cfg)
    Z = model.inputs(stack.X)
    y = stack.y.astype(np.float64)
    params = as_params(init_meta(Z.shape[1], cfg, seed))
    state = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    n = len(y)
    for epoch in range(cfg.epochs):
        rng = stream(seed, tag, "epoch", epoch)
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            logits = meta_forward(params, Z[idx], cfg, rng=rng, training=True)
            loss = ag.bce_with_logits(logits, y[idx])
            if not np.isfinite(loss.item()):
                raise DivergenceError(f"non-finite loss at {tag} epoch {epoch}")
            ag.zero_grads(params)
            loss.backward()
            adam_step(params, ag.collect_grads(params), state)
            total += loss.item() * len(idx)
        if history is not None:
            history.append(total / n)
    model.params = {k: v.data.copy() for k, v in params.items()}
    return model


def train_meta_folds(stack: StackedDataset, plan: FoldPlan, cfg: MetaConfig = MetaConfig(),
                     seed: int = 0, tag: str = "meta") -> list:
    """One meta-model per fold, each fitted on that fold's training rows of the pool stack.

    ``stack`` rows must be ordered like ``plan.pool``.
    """
    pos = {int(i): k for k, i in enumerate(plan.pool)}
    models = []
    for f in range(plan.k):
        rows = [pos[int(i)] for i in plan.train_idx(f)]
        models.append(train_meta(stack.rows(rows), cfg, seed, tag=f"{tag}-fold{f}"))
    return models


def imaging_probability(fold_params, X, cfg: ViTConfig) -> np.ndarray:
    """Mean P(necrosis) over the fold models."""
    return np.mean([predict_proba(as_params(p), X, cfg) for p in fold_params], axis=0)


def predict_multimodal(meta, features: FeatureTable, ids, imaging_prob=None) -> np.ndarray:
    """Stack test rows exactly as in training and average the meta-model outputs.

    ``meta`` is one MetaModel or a list of them; ``imaging_prob`` is the
    fold-averaged ViT probability for ``ids`` (required when the model uses it).
    """
    models = meta if isinstance(meta, (list, tuple)) else [meta]
    cols = models[0].columns
    uses_oof = bool(cols) and cols[0] == OOF_COLUMN
    if uses_oof and imaging_prob is None:
        raise StackError("model was trained with the imaging probability; pass imaging_prob")
    feat_cols = cols[1:] if uses_oof else cols
    stack = build_stack(ids, features, feat_cols, np.zeros(len(ids)),
                        oof=imaging_prob if uses_oof else None)
    return np.mean([m.predict(stack.X) for m in models], axis=0)


def save_meta(path, model: MetaModel, *, seed: int, extra: dict | None = None) -> None:
    ag.save_checkpoint(path, model.params, seed=seed, step=model.config.epochs,
                       config={"meta": model.to_dict(), **(extra or {})})


def load_meta(path) -> MetaModel:
    params, manifest = ag.load_checkpoint(path)
    d = manifest["config"]["meta"]
    c = dict(d["config"])
    c["hidden"] = tuple(c["hidden"])
    return MetaModel(d["columns"], np.array(d["mean"]), np.array(d["std"]), params, MetaConfig(**c))


def write_stack_manifest(path, stack: StackedDataset, extra: dict | None = None) -> None:
    Path(path).write_text(json.dumps({"columns": stack.columns, "n_rows": len(stack.ids),
                                      **(extra or {})}, indent=1, sort_keys=True) + "\n")
