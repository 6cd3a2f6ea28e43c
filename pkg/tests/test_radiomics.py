import itertools
import math

import numpy as np
import pytest
from scipy import stats

from rnvit import radiomics as rad
from rnvit.preprocess import fit_clinical_stats
from rnvit.records import ClinicalRecord, LesionSample
from rnvit.volume import Volume3D


def _ball(r, side=None):
    side = side or 2 * r + 3
    c = (side - 1) / 2
    x, y, z = np.meshgrid(*(np.arange(side),) * 3, indexing="ij")
    return ((x - c) ** 2 + (y - c) ** 2 + (z - c) ** 2 <= r * r).astype(float)


def _blob(rng, side=10):
    m = np.zeros((side,) * 3)
    m[2:8, 3:7, 2:9] = 1
    m[5, 7:9, 4] = 1
    return rng.normal(size=m.shape), m


# -- first order ---------------------------------------------------------

def test_constant_region():
    img = np.full((3, 3, 3), 4.0)
    f = rad.first_order(img, np.ones((3, 3, 3)))
    assert f["mean"] == 4.0 and f["variance"] == 0.0
    assert f["entropy"] == 0.0 and f["skewness"] == 0.0 and f["kurtosis"] == 0.0


def test_two_voxel_region():
    img = np.zeros((2, 1, 1))
    img[1] = 2.0
    f = rad.first_order(img, np.ones((2, 1, 1)))
    assert f["mean"] == 1.0 and f["variance"] == 1.0 and f["range"] == 2.0
    assert f["energy"] == 4.0


def test_max_entropy():
    vals = np.repeat(np.arange(32.0), 3).reshape(4, 4, 6)
    f = rad.first_order(vals, np.ones(vals.shape))
    assert f["entropy"] == pytest.approx(5.0, abs=1e-12)


def test_first_order_matches_scipy(rng):
    img, m = _blob(rng)
    x = img[m > 0]
    f = rad.first_order(img, m)
    assert f["skewness"] == pytest.approx(stats.skew(x), rel=1e-12)
    assert f["kurtosis"] == pytest.approx(stats.kurtosis(x, fisher=True), rel=1e-12)
    assert f["variance"] == pytest.approx(np.var(x), rel=1e-14)
    assert f["median"] == np.median(x)
    assert f["iqr"] == pytest.approx(stats.iqr(x), rel=1e-14)
    assert f["p10"] == pytest.approx(np.percentile(x, 10))
    counts = np.histogram(x, bins=rad.bin_edges(x))[0]
    assert f["entropy"] == pytest.approx(stats.entropy(counts, base=2), rel=1e-12)


def test_first_order_is_mask_local(rng):
    img, m = _blob(rng)
    other = np.where(m > 0, img, rng.normal(size=img.shape) * 100)
    assert rad.first_order(img, m) == rad.first_order(other, m)


def test_empty_mask():
    with pytest.raises(rad.FeatureError):
        rad.first_order(np.zeros((2, 2, 2)), np.zeros((2, 2, 2)))
    with pytest.raises(rad.FeatureError):
        rad.shape3d(np.zeros((2, 2, 2)))


def test_quantize():
    q = rad.quantize(np.array([0.0, 0.5, 1.0]))
    assert list(q) == [0, 16, 31]
    assert list(rad.quantize(np.array([3.0, 3.0]))) == [0, 0]


# -- shape ---------------------------------------------------------------

def test_single_voxel():
    m = np.zeros((3, 3, 3))
    m[1, 1, 1] = 1
    s = rad.shape3d(m)
    assert s["volume"] == 1 and s["surface_area"] == 6
    assert s["sphericity"] == pytest.approx(math.pi ** (1 / 3) * 6 ** (2 / 3) / 6, rel=1e-12)
    assert s["sphericity"] == pytest.approx(0.806, abs=1e-3)
    assert s["max_diameter"] == 0.0


def test_bar():
    m = np.zeros((4, 3, 3))
    m[1:3, 1, 1] = 1
    s = rad.shape3d(m)
    assert s["surface_area"] == 10 and s["max_diameter"] == 1.0


def test_ball_volume():
    s = rad.shape3d(_ball(5))
    assert abs(s["volume"] - 4 / 3 * math.pi * 125) / (4 / 3 * math.pi * 125) < 0.1
    assert s["max_diameter"] == pytest.approx(10.0)
    assert s["elongation"] == pytest.approx(1.0, abs=1e-9)
    assert s["flatness"] == pytest.approx(1.0, abs=1e-9)


def test_spacing_scales():
    m = _ball(3)
    a, b = rad.shape3d(m), rad.shape3d(m, 2.0)
    assert b["volume"] == 8 * a["volume"] and b["surface_area"] == 4 * a["surface_area"]
    assert b["max_diameter"] == 2 * a["max_diameter"]
    assert b["sphericity"] == pytest.approx(a["sphericity"], rel=1e-12)


def test_surface_area_brute_force(rng):
    m = (rng.random((5, 6, 4)) > 0.5).astype(float)
    faces = 0
    for idx in itertools.product(*map(range, m.shape)):
        if not m[idx]:
            continue
        for a in range(3):
            for s in (-1, 1):
                n = list(idx)
                n[a] += s
                if not (0 <= n[a] < m.shape[a]) or not m[tuple(n)]:
                    faces += 1
    assert rad.shape3d(m)["surface_area"] == faces


def test_elongated_box():
    m = np.zeros((12, 6, 4))
    m[1:11, 1:4, 1:3] = 1  # 10 x 3 x 2
    s = rad.shape3d(m)
    var = np.array([(n * n - 1) / 12 for n in (10, 3, 2)])
    assert s["elongation"] == pytest.approx(math.sqrt(var[1] / var[0]), rel=1e-9)
    assert s["flatness"] == pytest.approx(math.sqrt(var[2] / var[0]), rel=1e-9)
    pts = np.argwhere(m > 0)
    brute = max(np.linalg.norm(p - q) for p in pts for q in pts)
    assert s["max_diameter"] == pytest.approx(brute)


def test_shape_axis_permutation_invariant(rng):
    _, m = _blob(rng)
    a = rad.shape3d(m)
    for perm in itertools.permutations(range(3)):
        b = rad.shape3d(np.transpose(m, perm))
        for k in a:
            assert b[k] == pytest.approx(a[k], rel=1e-12)


def test_diameter_kernels_agree(rng):
    pts = rng.integers(0, 30, size=(300, 3)).astype(np.float64)
    assert rad._max_sqdist_jit(pts) == rad._max_sqdist_numpy(pts, chunk=37)


# -- GLCM ----------------------------------------------------------------

def _glcm_oracle(img, m, bins=32, offsets=rad.DIRECTIONS):
    q = np.full(img.shape, -1)
    q[m > 0] = rad.quantize(img[m > 0], bins)
    mats = []
    for off in offsets:
        P = np.zeros((bins, bins))
        for idx in itertools.product(*map(range, img.shape)):
            j = tuple(np.add(idx, off))
            if all(0 <= a < s for a, s in zip(j, img.shape)) and q[idx] >= 0 and q[j] >= 0:
                P[q[idx], q[j]] += 1
                P[q[j], q[idx]] += 1
        if P.sum():
            mats.append(P / P.sum())
    return mats


def test_constant_region_glcm():
    f = rad.glcm(np.full((3, 3, 3), 2.0), np.ones((3, 3, 3)))
    assert f["joint_energy"] == 1.0 and f["contrast"] == 0.0 and f["joint_entropy"] == 0.0


def test_checkerboard_contrast():
    img = np.zeros((6, 3, 3))
    img[1::2] = 1.0
    f = rad.glcm(img, np.ones(img.shape), directions=[(1, 0, 0)])
    assert f["contrast"] == 31.0 ** 2
    assert f["correlation"] == pytest.approx(-1.0)


def test_glcm_matches_brute_force(rng):
    img, m = _blob(rng, 8)
    ours = rad.glcm_matrices(img, m)
    ref = _glcm_oracle(img, m)
    assert len(ours) == len(ref)
    for a, b in zip(ours, ref):
        np.testing.assert_allclose(a, b, atol=1e-15)
        assert a.sum() == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_array_equal(a, a.T)


def test_glcm_kernels_agree(rng):
    q = rng.integers(-1, 8, size=(7, 6, 5))
    offs = rad.DIRECTIONS * 2
    np.testing.assert_array_equal(rad._glcm_counts_jit(q, offs, 8), rad._glcm_counts_numpy(q, offs, 8))


def test_glcm_features_hand_matrix():
    P = np.array([[0.5, 0.1], [0.1, 0.3]])
    f = rad._glcm_features(P)
    i = np.array([[1, 1], [2, 2]])
    j = i.T
    mu = (i * P).sum()
    sd = math.sqrt((((i - mu) ** 2) * P).sum())
    assert f[0] == pytest.approx(0.2)
    assert f[1] == pytest.approx((((i - mu) * (j - mu)) * P).sum() / sd ** 2)
    assert f[2] == pytest.approx(0.36)
    assert f[3] == pytest.approx(0.8 + 0.2 / 2)
    assert f[4] == pytest.approx(-sum(p * math.log2(p) for p in P.ravel()))


def test_glcm_shift_invariant(rng):
    img, m = _blob(rng)
    a, b = rad.glcm(img, m), rad.glcm(img + 17.0, m)
    for k in a:
        assert b[k] == pytest.approx(a[k], rel=1e-12, abs=1e-12)


def test_glcm_needs_two_voxels():
    m = np.zeros((3, 3, 3))
    m[1, 1, 1] = 1
    with pytest.raises(rad.FeatureError):
        rad.glcm(np.zeros((3, 3, 3)), m)
    far = np.zeros((4, 4, 4))
    far[0, 0, 0] = far[3, 3, 3] = 1  # two voxels, no neighbouring pair
    with pytest.raises(rad.FeatureError):
        rad.glcm(np.zeros((4, 4, 4)), far)


# -- feature table -------------------------------------------------------

def _samples(rng, n=3):
    out = []
    for i in range(n):
        img, m = _blob(rng)
        rec = ClinicalRecord(50.0 + i, "male", "breast", "chemo", 200.0 + 10 * i)
        out.append(LesionSample(f"l{i}", Volume3D(img), Volume3D(m), i % 2, rec))
    return out


def test_extract_all_schema(rng, tmp_path):
    samples = _samples(rng)
    stats = fit_clinical_stats([s.clinical for s in samples])
    t = rad.extract_all(samples, stats)
    assert t.values.shape == (3, 24 + 13)
    assert t.columns[:24] == rad.RADIOMIC_COLUMNS
    assert t.provenance.count("radiomic") == 24 and t.provenance.count("clinical") == 13
    again = rad.extract_all(samples, stats)
    assert t.schema_hash() == again.schema_hash()
    np.testing.assert_array_equal(t.values, again.values)
    p = t.to_csv(tmp_path / "f.csv")
    back = rad.FeatureTable.from_csv(p)
    assert back.columns == t.columns and back.ids == t.ids
    np.testing.assert_array_equal(back.values, t.values)
    assert back.schema_hash() == t.schema_hash() and back.meta["bins"] == 32


def test_identical_lesions_identical_rows(rng):
    s = _samples(rng, 1)[0]
    twin = LesionSample("twin", s.image, s.mask, s.label, s.clinical)
    t = rad.extract_all([s, twin])
    np.testing.assert_array_equal(t.values[0], t.values[1])


def test_extract_all_annotates_errors(rng):
    s = _samples(rng, 1)[0]
    m = np.zeros((3, 3, 3))
    m[1, 1, 1] = 1
    lone = LesionSample("lonely", Volume3D(np.zeros((3, 3, 3))), Volume3D(m), 0)
    with pytest.raises(rad.FeatureError, match="lonely"):
        rad.extract_all([s, lone])
    no_clin = LesionSample("no-clinical", s.image, s.mask, 0)
    stats = fit_clinical_stats([s.clinical])
    with pytest.raises(rad.FeatureError, match="no-clinical"):
        rad.extract_all([no_clin], stats)


def test_table_select_and_rows(rng):
    t = rad.extract_all(_samples(rng))
    sub = t.select(["shape_volume", "firstorder_mean"])
    assert sub.columns == ["shape_volume", "firstorder_mean"] and sub.ids == t.ids
    np.testing.assert_array_equal(sub.column("firstorder_mean"), t.column("firstorder_mean"))
    with pytest.raises(KeyError):
        t.select(["nope"])
    r = t.rows(["l2", "l0"])
    np.testing.assert_array_equal(r.values[0], t.values[2])
    with pytest.raises(ValueError):
        rad.FeatureTable(["a"], ["x", "x"], np.zeros((1, 2)), ["radiomic"] * 2)
    with pytest.raises(ValueError):
        rad.FeatureTable(["a"], ["x"], np.zeros((1, 1)), ["other"])


def test_voxel_order_invariance(rng):
    img, m = _blob(rng)
    base = rad.radiomic_vector(Volume3D(img), Volume3D(m))
    flipped = rad.radiomic_vector(Volume3D(img[::-1, :, ::-1]), Volume3D(m[::-1, :, ::-1]))
    np.testing.assert_allclose(flipped, base, rtol=1e-12, atol=1e-12)
