"""Pre-norm 3D Vision Transformer, attention capture and attention rollout."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .rng import stream
from .volume import Volume3D


@dataclass(frozen=True)
class ViTConfig:
    input_side: int = 32
    in_channels: int = 2
    patch_side: int = 8
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 2.0
    dropout: float = 0.0
    num_classes: int = 2
    proj_dim: int = 32

    def __post_init__(self):
        if self.input_side % self.patch_side:
            raise ValueError(f"patch_side {self.patch_side} does not divide input_side {self.input_side}")
        if self.embed_dim % self.heads:
            raise ValueError(f"heads {self.heads} does not divide embed_dim {self.embed_dim}")
        if self.in_channels not in (1, 2):
            raise ValueError("in_channels must be 1 or 2")

    @property
    def grid(self) -> int:
        return self.input_side // self.patch_side

    @property
    def n_patches(self) -> int:
        return self.grid ** 3

    @property
    def n_tokens(self) -> int:
        return self.n_patches + 1

    @property
    def patch_voxels(self) -> int:
        return self.patch_side ** 3

    @property
    def hidden(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))

    def to_dict(self):
        return asdict(self)


# -- tokenisation --------------------------------------------------------

def patchify(x: np.ndarray, patch_side: int) -> np.ndarray:
    """``(..., C, S, S, S)`` -> ``(..., N, C*p^3)``.

    Patches are numbered x-fastest; within a patch vector the layout is
    channel-major, then voxels x-fastest.
    """
    *lead, C, S, S2, S3 = x.shape
    if not S == S2 == S3:
        raise ValueError(f"expected a cubic input, got {x.shape[-3:]}")
    if S % patch_side:
        raise ValueError(f"patch_side {patch_side} does not divide side {S}")
    g, p = S // patch_side, patch_side
    y = x.reshape(*lead, C, g, p, g, p, g, p)
    k = len(lead)
    # [c, gx, px, gy, py, gz, pz] -> [gz, gy, gx, c, pz, py, px]
    order = list(range(k)) + [k + i for i in (5, 3, 1, 0, 6, 4, 2)]
    return y.transpose(order).reshape(*lead, g ** 3, C * p ** 3)


def unpatchify(tokens: np.ndarray, channels: int, patch_side: int) -> np.ndarray:
    *lead, N, P = tokens.shape
    g = int(round(N ** (1 / 3)))
    p = patch_side
    if g ** 3 != N or P != channels * p ** 3:
        raise ValueError(f"token matrix {tokens.shape} inconsistent with C={channels}, p={p}")
    k = len(lead)
    y = tokens.reshape(*lead, g, g, g, channels, p, p, p)  # [gz, gy, gx, c, pz, py, px]
    order = list(range(k)) + [k + i for i in (3, 2, 6, 1, 5, 0, 4)]
    return y.transpose(order).reshape(*lead, channels, g * p, g * p, g * p)


# -- parameters ----------------------------------------------------------

def _xavier(rng, fan_in, fan_out):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def init_encoder(cfg: ViTConfig, seed: int) -> dict:
    rng = stream(seed, "vit-init")
    D, H = cfg.embed_dim, cfg.hidden
    P = cfg.in_channels * cfg.patch_voxels
    p = {
        "patch.w": _xavier(rng, P, D),
        "patch.b": np.zeros(D),
        "cls": rng.normal(0, 0.02, size=(1, 1, D)),
        "pos": rng.normal(0, 0.02, size=(1, cfg.n_tokens, D)),
    }
    for i in range(cfg.depth):
        p.update({
            f"blk{i}.ln1.g": np.ones(D), f"blk{i}.ln1.b": np.zeros(D),
            f"blk{i}.qkv.w": _xavier(rng, D, 3 * D), f"blk{i}.qkv.b": np.zeros(3 * D),
            f"blk{i}.proj.w": _xavier(rng, D, D), f"blk{i}.proj.b": np.zeros(D),
            f"blk{i}.ln2.g": np.ones(D), f"blk{i}.ln2.b": np.zeros(D),
            f"blk{i}.fc1.w": _xavier(rng, D, H), f"blk{i}.fc1.b": np.zeros(H),
            f"blk{i}.fc2.w": _xavier(rng, H, D), f"blk{i}.fc2.b": np.zeros(D),
        })
    p["norm.g"] = np.ones(D)
    p["norm.b"] = np.zeros(D)
    return p


def init_head(cfg: ViTConfig, seed: int) -> dict:
    rng = stream(seed, "vit-head")
    return {
        "head.w": _xavier(rng, cfg.embed_dim, cfg.num_classes),
        "head.b": np.zeros(cfg.num_classes),
    }


def init_pretext_heads(cfg: ViTConfig, seed: int) -> dict:
    rng = stream(seed, "pretext-heads")
    D = cfg.embed_dim
    return {
        "recon.w": _xavier(rng, D, cfg.patch_voxels),
        "recon.b": np.zeros(cfg.patch_voxels),
        "proj1.w": _xavier(rng, D, D), "proj1.b": np.zeros(D),
        "proj2.w": _xavier(rng, D, cfg.proj_dim), "proj2.b": np.zeros(cfg.proj_dim),
    }


def init_params(cfg: ViTConfig, seed: int) -> dict:
    return as_params({**init_encoder(cfg, seed), **init_head(cfg, seed)})


def as_params(arrays: dict) -> dict:
    return {k: Tensor(np.array(v, dtype=np.float64), requires_grad=True) for k, v in arrays.items()}


def check_params(params: dict, cfg: ViTConfig) -> None:
    expected = init_encoder(cfg, 0)
    for k, v in expected.items():
        if k not in params:
            raise ValueError(f"parameter {k} missing for config {cfg}")
        if tuple(params[k].shape) != v.shape:
            raise ValueError(f"parameter {k} has shape {tuple(params[k].shape)}, config needs {v.shape}")


# -- forward -------------------------------------------------------------

def _linear(x, params, name):
    return ag.add(ag.matmul(x, params[name + ".w"]), params[name + ".b"])


def _attention(h, params, i, cfg, trace):
    B, T, D = h.shape
    nh, dh = cfg.heads, D // cfg.heads
    qkv = _linear(h, params, f"blk{i}.qkv").reshape(B, T, 3, nh, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = ag.mul(ag.matmul(q, k.transpose(0, 1, 3, 2)), 1.0 / np.sqrt(dh))
    attn = ag.softmax(scores, axis=-1)
    if trace is not None:
        trace.append(attn.data.copy())
    out = ag.matmul(attn, v).transpose(0, 2, 1, 3).reshape(B, T, D)
    return _linear(out, params, f"blk{i}.proj")


def _tokens(x, params, cfg):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 4:
        x = x[None]
    if x.shape[1:] != (cfg.in_channels,) + (cfg.input_side,) * 3:
        raise ag.ShapeError(
            f"vit forward: input {x.shape[1:]} does not match config "
            f"({cfg.in_channels}, {cfg.input_side}^3)"
        )
    B = x.shape[0]
    patches = Tensor(patchify(x, cfg.patch_side))
    emb = _linear(patches, params, "patch")
    cls = ag.add(params["cls"], Tensor(np.zeros((B, 1, cfg.embed_dim))))
    return ag.add(ag.concat([cls, emb], axis=1), params["pos"])


def encode(params, x, cfg: ViTConfig, *, capture=False, rng=None, training=False):
    """Token states after the final norm, shape ``(B, T, D)``, and the attention trace."""
    trace = [] if capture else None
    p = cfg.dropout if training else 0.0
    h = _tokens(x, params, cfg)
    for i in range(cfg.depth):
        a = ag.layer_norm(h, params[f"blk{i}.ln1.g"], params[f"blk{i}.ln1.b"])
        h = ag.add(h, ag.dropout(_attention(a, params, i, cfg, trace), p, rng))
        m = ag.layer_norm(h, params[f"blk{i}.ln2.g"], params[f"blk{i}.ln2.b"])
        m = ag.gelu(_linear(m, params, f"blk{i}.fc1"))
        m = _linear(ag.dropout(m, p, rng), params, f"blk{i}.fc2")
        h = ag.add(h, ag.dropout(m, p, rng))
    h = ag.layer_norm(h, params["norm.g"], params["norm.b"])
    return h, (AttentionTrace([t for t in trace]) if capture else None)


def forward(params, x, cfg: ViTConfig, *, capture=False, rng=None, training=False):
    """Class logits ``(B, num_classes)`` (or ``(num_classes,)`` for one sample)."""
    single = np.ndim(x) == 4
    h, trace = encode(params, x, cfg, capture=capture, rng=rng, training=training)
    logits = _linear(h[:, 0, :], params, "head")
    if single:
        logits = logits[0]
    return logits, trace


def predict_proba(params, x, cfg: ViTConfig, batch_size: int = 16) -> np.ndarray:
    """P(necrosis) for a batch of inputs, no graph kept."""
    frozen = {k: Tensor(v.data) for k, v in params.items()}
    out = []
    for s in range(0, len(x), batch_size):
        logits, _ = forward(frozen, x[s : s + batch_size], cfg)
        z = logits.data
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        out.append(e[:, 1] / e.sum(axis=1))
    return np.concatenate(out)


# -- explainability ------------------------------------------------------

@dataclass
class AttentionTrace:
    """Per-layer softmaxed attention, each ``(B, heads, T, T)`` or ``(heads, T, T)``."""

    layers: list

    def sample(self, b: int) -> "AttentionTrace":
        return AttentionTrace([a[b] if a.ndim == 4 else a for a in self.layers])


def rollout_matrix(trace: AttentionTrace) -> np.ndarray:
    """Identity-augmented, head-averaged attention multiplied across layers."""
    if not trace.layers:
        raise ValueError("attention rollout needs at least one layer")
    joint = None
    for att in trace.layers:
        att = np.asarray(att)
        if att.ndim != 3:
            raise ValueError(f"expected (heads, T, T) attention per layer, got {att.shape}")
        a = att.mean(axis=0) + np.eye(att.shape[-1])
        a = a / a.sum(axis=-1, keepdims=True)
        joint = a if joint is None else a @ joint
    return joint


def attention_rollout(trace: AttentionTrace, cfg: ViTConfig, like: Volume3D | None = None) -> Volume3D:
    """Class-token rollout spread uniformly over each patch; sums to 1."""
    joint = rollout_matrix(trace)
    w = joint[0, 1:]
    w = w / w.sum()
    if w.size != cfg.n_patches:
        raise ValueError(f"trace has {w.size} patch tokens, config expects {cfg.n_patches}")
    tokens = np.repeat(w[:, None] / cfg.patch_voxels, cfg.patch_voxels, axis=1)
    heat = unpatchify(tokens, 1, cfg.patch_side)[0]
    if like is not None:
        return like.with_voxels(heat)
    return Volume3D(heat)


def mask_attention_fraction(heatmap: Volume3D, mask: Volume3D) -> float:
    if heatmap.dims != mask.dims:
        raise ValueError(f"heatmap {heatmap.dims} and mask {mask.dims} grids differ")
    h = heatmap.voxels
    return float(h[mask.voxels > 0].sum() / h.sum())
