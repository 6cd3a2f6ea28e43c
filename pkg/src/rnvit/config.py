"""Run configuration: packaged JSON defaults, user overrides and validation."""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path

from .fusion import MetaConfig
from .phantom import PhantomSpec
from .ssl_train import FinetuneConfig, PretrainConfig
from .vit3d import ViTConfig

ARMS = ("ssl_vit", "scratch_vit", "ssl_vit_t1ce_only", "radiomics_clinical", "clinical_only",
        "multimodal")
VIT_ARMS = ("ssl_vit", "scratch_vit", "ssl_vit_t1ce_only")
META_ARMS = ("radiomics_clinical", "clinical_only", "multimodal")


class ConfigError(ValueError):
    pass


def default_dict() -> dict:
    text = resources.files("rnvit").joinpath("default.json").read_text()
    return json.loads(text)


def _merge(base: dict, over: dict, path="") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in out:
            raise ConfigError(f"unknown config key {path}{k}")
        if isinstance(out[k], dict) and out[k] and isinstance(v, dict):
            out[k] = _merge(out[k], v, f"{path}{k}.")
        else:
            out[k] = v
    return out


def _build(cls, d, section):
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown keys in {section}: {sorted(unknown)}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{section}: {e}") from e


@dataclass(frozen=True)
class RunConfig:
    raw: dict
    seed: int
    phantom: PhantomSpec
    vit: ViTConfig
    pretrain: PretrainConfig
    finetune: FinetuneConfig
    meta: MetaConfig
    selection: dict
    folds: dict
    preprocess: dict
    arms: tuple
    cohort: str | None
    out: str
    parallel_folds: bool

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)


def load_config(path=None, *, seed=None, arms=None, out=None, parallel_folds=None) -> RunConfig:
    """Defaults, then the JSON file at ``path``, then explicit overrides."""
    d = default_dict()
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
        d = _merge(d, user)
    if seed is not None:
        d["seed"] = int(seed)
    if arms is not None:
        d["arms"] = list(arms)
    if out is not None:
        d["out"] = str(out)
    if parallel_folds is not None:
        d["parallel_folds"] = bool(parallel_folds)
    return from_dict(d)


def from_dict(d: dict) -> RunConfig:
    arms = d.get("arms") or []
    if not arms:
        raise ConfigError("arm list must be nonempty")
    bad = [a for a in arms if a not in ARMS]
    if bad:
        raise ConfigError(f"unknown arms {bad}; choose from {list(ARMS)}")
    if len(set(arms)) != len(arms):
        raise ConfigError("duplicate arms")
    if "multimodal" in arms and "ssl_vit" not in arms:
        raise ConfigError("arm 'multimodal' needs 'ssl_vit' (its out-of-fold probabilities)")
    ordered = tuple(a for a in ARMS if a in arms)
    meta = dict(d["meta"])
    meta["hidden"] = tuple(meta.get("hidden", (32, 16)))
    vit = _build(ViTConfig, d["vit"], "vit")
    if vit.in_channels != 2:
        raise ConfigError("vit.in_channels must be 2; the T1CE-only arm derives its own config")
    cohort = d.get("cohort")
    if cohort is not None and not Path(cohort).is_dir():
        raise ConfigError(f"cohort directory {cohort} does not exist")
    folds = dict(d["folds"])
    if int(folds.get("k", 0)) < 2:
        raise ConfigError("folds.k must be >= 2")
    return RunConfig(
        raw=copy.deepcopy(d),
        seed=int(d["seed"]),
        phantom=_build(PhantomSpec, d["phantom"], "phantom"),
        vit=vit,
        pretrain=_build(PretrainConfig, d["pretrain"], "pretrain"),
        finetune=_build(FinetuneConfig, d["finetune"], "finetune"),
        meta=_build(MetaConfig, meta, "meta"),
        selection=dict(d["selection"]),
        folds=folds,
        preprocess=dict(d["preprocess"]),
        arms=ordered,
        cohort=cohort,
        out=str(d["out"]),
        parallel_folds=bool(d.get("parallel_folds", False)),
    )
