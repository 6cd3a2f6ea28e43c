import csv

import numpy as np
import pytest

from rnvit.phantom import PhantomSpec, generate_cohort
from rnvit.preprocess import assemble_channels
from rnvit.rng import stream
from rnvit.ssl_train import (
    IDENTITY_VIEW,
    FinetuneConfig,
    FoldPlan,
    PretrainConfig,
    adapt_encoder,
    apply_swaps,
    apply_view,
    assert_no_leakage,
    augment_views,
    corrupt_context,
    draw_view_params,
    encoder_only,
    finetune,
    make_folds,
    pretrain,
    write_oof_csv,
    write_training_log,
)
from rnvit.vit3d import ViTConfig, init_encoder, init_pretext_heads, patchify

TINY = ViTConfig(input_side=8, in_channels=2, patch_side=4, embed_dim=8, depth=1, heads=2,
                 proj_dim=4)


def _input(rng, side=8):
    x = rng.normal(size=(2, side, side, side))
    x[1] = (rng.random((side,) * 3) > 0.6).astype(float)
    return x


# -- context restoration -------------------------------------------------

def test_zero_swaps_is_identity(rng):
    x = _input(rng)
    c, log = corrupt_context(x, 0, 4, rng)
    assert log == [] and np.array_equal(c, x)


def test_swaps_touch_only_listed_patches(rng):
    x = _input(rng, 16)
    c, log = corrupt_context(x, 4, 4, rng)
    assert len(log) == 4
    touched = {i for pair in log for i in pair}
    assert len(touched) == 8
    diff = np.flatnonzero(np.any(patchify(c[:1], 4) != patchify(x[:1], 4), axis=1))
    assert set(diff.tolist()) <= touched
    assert np.array_equal(c[1], x[1])


def test_swap_log_involution(rng):
    x = _input(rng, 16)
    c, log = corrupt_context(x, 10, 4, rng)
    assert np.array_equal(apply_swaps(c, log, 4), x)
    assert np.array_equal(apply_swaps(apply_swaps(x, log, 4), log, 4), x)


def test_too_many_swaps(rng):
    with pytest.raises(ValueError):
        corrupt_context(_input(rng), 5, 4, rng)
    with pytest.raises(ValueError):
        corrupt_context(_input(rng), -1, 4, rng)


# -- views ---------------------------------------------------------------

def test_identity_view(rng):
    x = _input(rng)
    assert np.array_equal(apply_view(x, IDENTITY_VIEW), x)


def test_double_flip_is_identity(rng):
    x = _input(rng)
    p = dict(IDENTITY_VIEW, flip=(False, True, False))
    once = apply_view(x, p)
    assert not np.array_equal(once, x)
    assert np.array_equal(apply_view(once, p), x)


def test_four_rotations_are_identity(rng):
    x = _input(rng)
    p = dict(IDENTITY_VIEW, rot_k=1, rot_plane=2)
    y = x
    for _ in range(4):
        y = apply_view(y, p)
    assert np.array_equal(y, x)


def test_mask_stays_binary_and_untouched_by_intensity(rng):
    x = _input(rng)
    for _ in range(50):
        a, b = augment_views(x, rng)
        for v in (a, b):
            assert set(np.unique(v.data[1])) <= {0.0, 1.0}
            assert v.data[1].sum() == x[1].sum()
            assert 0.9 <= v.params["scale"] <= 1.1 and -0.1 <= v.params["shift"] <= 0.1


def test_views_are_reproducible_from_params(rng):
    x = _input(rng)
    a, _ = augment_views(x, stream(0, "v"))
    assert np.array_equal(apply_view(x, a.params), a.data)
    assert draw_view_params(stream(1, "p")) == draw_view_params(stream(1, "p"))


# -- pretraining ---------------------------------------------------------

@pytest.fixture(scope="module")
def phantom_inputs():
    spec = PhantomSpec(n_unlabeled=48, n_labeled=0, volume_side=32, seed=7)
    unl, _ = generate_cohort(spec)
    X = []
    for s in unl:
        v = s.image.voxels
        img = s.image.with_voxels((v - v.mean()) / v.std())
        X.append(assemble_channels(img, s.mask))
    return np.stack(X)


def test_pretrain_loss_decreases_default_model(phantom_inputs):
    res = pretrain(phantom_inputs, ViTConfig(), PretrainConfig(epochs=5, batch_size=16), seed=7)
    totals = [r["total"] for r in res.log]
    assert len(totals) == 5 and totals[4] < totals[0]


def test_pretrain_deterministic_and_logged(tmp_path, rng):
    X = np.stack([_input(rng) for _ in range(6)])
    cfg = PretrainConfig(epochs=2, batch_size=4, n_swaps=2)
    a = pretrain(X, TINY, cfg, seed=3)
    b = pretrain(X, TINY, cfg, seed=3)
    assert a.params.keys() == b.params.keys()
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert a.log == b.log and a.steps == 4
    p = tmp_path / "log.csv"
    write_training_log(p, a.log)
    rows = list(csv.reader(open(p)))
    assert rows[0] == ["epoch", "restoration_loss", "contrastive_loss", "total_loss"]
    assert len(rows) == 3


def test_zero_weight_skips_contrastive_branch(rng):
    X = np.stack([_input(rng) for _ in range(4)])
    cfg = PretrainConfig(epochs=2, batch_size=2, contrastive_weight=0.0, weight_decay=0.05,
                         lr=1e-3)
    res = pretrain(X, TINY, cfg, seed=1)
    init = init_pretext_heads(TINY, 1)
    decay = (1.0 - cfg.lr * cfg.weight_decay) ** res.steps
    for k in ("proj1.w", "proj2.w"):
        # zero gradient: only decoupled weight decay moves these weights
        np.testing.assert_allclose(res.params[k], init[k] * decay, rtol=1e-12)
    assert not np.allclose(res.params["recon.w"], init["recon.w"] * decay)
    assert all(r["contrastive"] == 0.0 for r in res.log)


def test_pretrain_empty():
    with pytest.raises(ValueError):
        pretrain(np.zeros((0, 2, 8, 8, 8)), TINY, PretrainConfig(), 0)


def test_encoder_only_drops_heads():
    p = {**init_encoder(TINY, 0), **init_pretext_heads(TINY, 0), "head.w": np.zeros(1)}
    enc = encoder_only(p)
    assert not any(k.startswith(("recon.", "proj", "head.")) for k in enc)
    assert "patch.w" in enc


# -- folds ---------------------------------------------------------------

def test_split_of_109_lesions():
    labels = np.array([1] * 37 + [0] * 72)
    plan = make_folds(labels, 5, 0.2, seed=0)
    assert len(plan.test) == 22 and len(plan.pool) == 87
    assert not set(plan.test.tolist()) & set(plan.pool.tolist())
    n_pos_pool = int(labels[plan.pool].sum())
    for f in range(5):
        va = plan.val_idx(f)
        pos = int(labels[va].sum())
        expect = n_pos_pool * len(va) / len(plan.pool)
        assert abs(pos - expect) <= 1
        assert pos in (n_pos_pool // 5, -(-n_pos_pool // 5))
    assert_no_leakage(plan)


@pytest.mark.parametrize("seed", range(10))
def test_fold_stratification_random(seed):
    r = stream(seed, "labels")
    n = int(r.integers(30, 150))
    labels = (r.random(n) < r.uniform(0.2, 0.5)).astype(int)
    if min(labels.sum(), n - labels.sum()) < 8:
        labels[:8] = 1
        labels[8:16] = 0
    plan = make_folds(labels, 5, 0.2, seed)
    p = labels[plan.pool].mean()
    for f in range(5):
        va = plan.val_idx(f)
        assert abs(labels[va].sum() - p * len(va)) <= 1
    sizes = [len(plan.val_idx(f)) for f in range(5)]
    assert max(sizes) - min(sizes) <= 1
    assert_no_leakage(plan)


def test_folds_deterministic():
    labels = np.array([0, 1] * 30)
    a, b = make_folds(labels, seed=4), make_folds(labels, seed=4)
    assert a.to_dict() == b.to_dict()
    assert make_folds(labels, seed=5).to_dict() != a.to_dict()


def test_folds_need_k_per_class():
    with pytest.raises(ValueError):
        make_folds(np.array([1] * 5 + [0] * 40), k=5)


def test_leakage_assertion_fires():
    plan = make_folds(np.array([0, 1] * 20), seed=0)
    bad = FoldPlan(plan.k, plan.seed, np.append(plan.test, plan.pool[0]), plan.pool, plan.fold_of)
    with pytest.raises(AssertionError):
        assert_no_leakage(bad)


# -- fine-tuning ---------------------------------------------------------

@pytest.fixture(scope="module")
def small_task():
    r = stream(0, "task")
    y = np.array([0, 1] * 15)
    X = r.normal(size=(30, 2, 8, 8, 8))
    X[y == 1, 0] += 1.0
    X[:, 1] = (X[:, 1] > 0).astype(float)
    plan = make_folds(y, 5, 0.2, seed=0)
    return X, y, plan


def test_oof_covers_pool_once(small_task, tmp_path):
    X, y, plan = small_task
    cfg = FinetuneConfig(epochs=1, batch_size=8)
    res = finetune(None, plan, X, y, TINY, cfg, seed=0)
    assert sorted(res.oof) == sorted(plan.pool.tolist())
    for i, f in res.oof_fold.items():
        assert plan.fold_of[i] == f
        assert i not in res.train_sets[f]
    assert res.test_probs.shape == (len(plan.test), 5)
    assert res.test_mean.shape == (len(plan.test),)
    ids = [f"s{i}" for i in range(len(y))]
    write_oof_csv(tmp_path / "oof.csv", ids, res, y)
    rows = list(csv.DictReader(open(tmp_path / "oof.csv")))
    assert len(rows) == len(plan.pool) and set(rows[0]) == {"id", "fold", "p_necrosis", "label"}


def test_finetune_parallel_matches_serial(small_task):
    X, y, plan = small_task
    cfg = FinetuneConfig(epochs=1, batch_size=8)
    a = finetune(None, plan, X, y, TINY, cfg, seed=2)
    b = finetune(None, plan, X, y, TINY, cfg, seed=2, workers=2)
    assert a.oof == b.oof
    assert np.array_equal(a.test_probs, b.test_probs)


def test_single_channel_from_two_channel_encoder(small_task):
    X, y, plan = small_task
    enc = init_encoder(TINY, 0)
    one = ViTConfig(**{**TINY.to_dict(), "in_channels": 1})
    adapted = adapt_encoder(enc, one)
    np.testing.assert_array_equal(adapted["patch.w"], enc["patch.w"][:64])
    res = finetune(enc, plan, X[:, :1], y, one, FinetuneConfig(epochs=1, batch_size=8), seed=0)
    assert len(res.oof) == len(plan.pool)


def test_encoder_config_mismatch():
    enc = init_encoder(TINY, 0)
    wider = ViTConfig(**{**TINY.to_dict(), "embed_dim": 12, "heads": 2})
    with pytest.raises(ValueError):
        adapt_encoder(enc, wider)
    other_patch = ViTConfig(**{**TINY.to_dict(), "patch_side": 2})
    with pytest.raises(ValueError):
        adapt_encoder(enc, other_patch)
