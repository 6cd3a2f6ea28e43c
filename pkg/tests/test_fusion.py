import numpy as np
import pytest

from rnvit import autograd as ag
from rnvit.fusion import (
    OOF_COLUMN,
    MetaConfig,
    MetaModel,
    StackError,
    build_stack,
    init_meta,
    load_meta,
    meta_forward,
    predict_multimodal,
    prob_logit,
    save_meta,
    train_meta,
    train_meta_folds,
    write_stack_manifest,
)
from rnvit.radiomics import FeatureTable
from rnvit.ssl_train import make_folds


def _features(rng, n=40):
    ids = [f"p{i}" for i in range(n)]
    cols = ["a", "b", "c"]
    return FeatureTable(ids, cols, rng.normal(size=(n, 3)), ["radiomic", "radiomic", "clinical"])


def test_build_stack_shapes_and_order(rng):
    t = _features(rng)
    ids = t.ids[::-1][:30]
    oof = rng.random(30)
    s = build_stack(ids, t, ["c", "a"], np.zeros(30), oof=oof)
    assert s.columns == [OOF_COLUMN, "c", "a"] and s.X.shape == (30, 3)
    np.testing.assert_array_equal(s.X[:, 0], oof)
    np.testing.assert_array_equal(s.X[:, 1], t.rows(ids).column("c"))
    assert s.ids == ids


def test_build_stack_strictness(rng):
    t = _features(rng)
    with pytest.raises(StackError, match="missing"):
        build_stack(t.ids, t, ["a", "zz"], np.zeros(40))
    with pytest.raises(StackError, match="absent"):
        build_stack(["nobody"], t, ["a"], np.zeros(1))
    with pytest.raises(StackError, match=r"\[0, 1\]"):
        build_stack(t.ids, t, ["a"], np.zeros(40), oof=np.full(40, 1.5))
    with pytest.raises(StackError, match="shape"):
        build_stack(t.ids, t, ["a"], np.zeros(40), oof=np.full(39, 0.5))


def test_stack_csv(rng, tmp_path):
    t = _features(rng, 5)
    s = build_stack(t.ids, t, ["a"], [0, 1, 0, 1, 0], oof=np.linspace(0, 1, 5), fold=[0, 1, 2, 3, 4])
    s.write_csv(tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == f"id,label,fold,{OOF_COLUMN},a" and len(lines) == 6
    write_stack_manifest(tmp_path / "m.json", s, {"arm": "x"})
    assert '"n_rows": 5' in (tmp_path / "m.json").read_text()


def _separable(rng, n=40):
    t = _features(rng, n)
    y = np.array([0, 1] * (n // 2))
    oof = np.where(y == 1, rng.uniform(0.7, 0.95, n), rng.uniform(0.05, 0.3, n))
    return t, y, build_stack(t.ids, t, ["a", "b", "c"], y, oof=oof)


def test_perfect_oof_drives_loss_down(rng):
    _, _, s = _separable(rng)
    hist = []
    train_meta(s, MetaConfig(epochs=200), seed=0, history=hist)
    assert len(hist) == 200 and min(hist) < 0.1


def test_same_seed_same_weights(rng):
    _, _, s = _separable(rng)
    cfg = MetaConfig(epochs=5)
    a, b = train_meta(s, cfg, seed=3), train_meta(s, cfg, seed=3)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    c = train_meta(s, cfg, seed=4)
    assert not np.array_equal(a.params["fc0.w"], c.params["fc0.w"])


def test_meta_gradcheck(rng):
    cfg = MetaConfig(hidden=(6, 4), dropout=0.0)
    params = {k: v + 0.1 * rng.normal(size=v.shape) for k, v in init_meta(4, cfg, 0).items()}
    Z = rng.normal(size=(7, 4))
    y = np.array([0, 1, 1, 0, 1, 0, 0], dtype=float)

    def loss(p):
        return ag.bce_with_logits(meta_forward(p, Z, cfg), y)

    assert ag.gradcheck_params(loss, params, per_tensor=1000) < 1e-6


def test_pass_through_weights(rng):
    cfg = MetaConfig(hidden=(2, 1))
    p = {"fc0.w": np.zeros((3, 2)), "fc0.b": np.array([40.0, 0.0]),
         "fc1.w": np.array([[1.0], [0.0]]), "fc1.b": np.zeros(1),
         "fc2.w": np.array([[1.0]]), "fc2.b": np.array([-40.0])}
    p["fc0.w"][0, 0] = 1.0
    # GELU(40 + z) = 40 + z for the logit z, so the output logit is z again
    model = MetaModel([OOF_COLUMN, "a", "b"], np.zeros(3), np.ones(3), p, cfg)
    probs = rng.uniform(0.01, 0.99, 50)
    X = np.column_stack([probs, rng.normal(size=(50, 2))])
    np.testing.assert_allclose(model.predict(X), probs, atol=1e-12)


def test_outputs_bounded(rng):
    _, _, s = _separable(rng)
    model = train_meta(s, MetaConfig(epochs=3), seed=0)
    X = np.column_stack([rng.random(1000), rng.normal(scale=50, size=(1000, 3))])
    p = model.predict(X)
    assert p.shape == (1000,) and np.all((p >= 0) & (p <= 1))


def test_logit_clips():
    assert np.isfinite(prob_logit([0.0, 1.0])).all()
    assert prob_logit(0.5) == 0.0


def test_predict_multimodal_and_checkpoint(rng, tmp_path):
    t, y, s = _separable(rng)
    models = [train_meta(s, MetaConfig(epochs=3), seed=k) for k in range(2)]
    img = rng.random(5)
    ids = t.ids[:5]
    out = predict_multimodal(models, t, ids, img)
    stack = build_stack(ids, t, ["a", "b", "c"], np.zeros(5), oof=img)
    ref = np.mean([m.predict(stack.X) for m in models], axis=0)
    np.testing.assert_array_equal(out, ref)
    with pytest.raises(StackError):
        predict_multimodal(models, t, ids)
    save_meta(tmp_path / "meta", models[0], seed=0)
    back = load_meta(tmp_path / "meta")
    np.testing.assert_array_equal(back.predict(stack.X), models[0].predict(stack.X))
    no_a = t.select(["b", "c"])
    with pytest.raises(StackError):
        predict_multimodal(models, no_a, ids, img)


def test_tabular_only_model(rng):
    t = _features(rng)
    y = np.array([0, 1] * 20)
    s = build_stack(t.ids, t, ["a", "b"], y)
    m = train_meta(s, MetaConfig(epochs=2), seed=0)
    assert m.columns == ["a", "b"]
    assert predict_multimodal(m, t, t.ids[:3]).shape == (3,)


def test_fold_models_use_training_rows_only(rng):
    t, y, s = _separable(rng, 50)
    plan = make_folds(y, 5, 0.2, seed=0)
    pool_ids = [t.ids[i] for i in plan.pool]
    stack = build_stack(pool_ids, t, ["a"], y[plan.pool], oof=rng.random(len(plan.pool)))
    models = train_meta_folds(stack, plan, MetaConfig(epochs=1), seed=0)
    assert len(models) == 5
    for f, m in enumerate(models):
        rows = [k for k, i in enumerate(plan.pool) if plan.fold_of[int(i)] != f]
        sub = stack.X[rows]
        np.testing.assert_allclose(m.mean[1:], sub[:, 1:].mean(axis=0))


def test_train_meta_rejects_degenerate(rng):
    t = _features(rng, 4)
    with pytest.raises(StackError):
        train_meta(build_stack(t.ids[:1], t, ["a"], [0]))
    with pytest.raises(StackError):
        train_meta(build_stack(t.ids, t, [], [0, 1, 0, 1]))
