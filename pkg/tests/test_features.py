import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jamdetect import features as F
from oracles import eig_pca, moving_average_loop

WIDTHS = [300, 297, 295, 291, 150, 150, 100, 100, 99]


# -- rolling windows and transforms -----------------------------------------

def test_rolling_window_minimal_length():
    s = np.arange(1.0, 301.0)
    x = F.rolling_window(s)
    assert x.shape == (1, 300)
    np.testing.assert_array_equal(x[0], s)


def test_rolling_window_overlap_and_shape():
    x = F.rolling_window(np.arange(301.0))
    assert x.shape == (2, 300)
    np.testing.assert_array_equal(x[1][:-1], x[0][1:])
    assert F.rolling_window(np.zeros(1000)).shape == (701, 300)


def test_rolling_window_too_short():
    with pytest.raises(F.FeatureError):
        F.rolling_window(np.zeros(299))


def test_transform_widths():
    x = np.random.default_rng(0).normal(size=(4, 300))
    assert [v.shape[1] for v in F.apply_transformations(x)] == WIDTHS
    assert F.transform_widths(300) == WIDTHS


def test_transform_rejects_wrong_width():
    with pytest.raises(F.FeatureError):
        F.apply_transformations(np.zeros((3, 299)), window=300)


def test_constant_rows_stay_constant():
    for v in F.apply_transformations(np.full((3, 300), -7.25)):
        np.testing.assert_allclose(v, -7.25, rtol=0, atol=1e-12)


def test_transforms_match_loop_oracle():
    x = np.vstack([np.arange(1.0, 301.0), np.random.default_rng(3).normal(size=300)])
    views = F.apply_transformations(x)
    for view, n in zip(views[1:4], (2, 3, 5)):
        np.testing.assert_allclose(view, moving_average_loop(x, n)[:, n:], rtol=0, atol=1e-12)
    # pairwise means of 1..300, then the first two dropped
    np.testing.assert_allclose(views[1][0, :3], [3.5, 4.5, 5.5])
    for view, (step, start, stop) in zip(views[4:], [(2, 0, 300), (2, 1, 300), (3, 0, 300),
                                                     (3, 1, 300), (3, 2, 299)]):
        np.testing.assert_array_equal(view, np.array([[r[j] for j in range(start, stop, step)] for r in x]))


# -- PCA --------------------------------------------------------------------

def _sign_aligned(a, b):
    s = np.sign(np.sum(a * b, axis=0))
    s[s == 0] = 1
    return b * s


def test_pca_matches_eigendecomposition_on_random_50x8():
    m = np.random.default_rng(7).normal(size=(50, 8)) @ np.random.default_rng(8).normal(size=(8, 8))
    model = F.pca_fit(m)
    ratios, vecs, _ = eig_pca(m)
    np.testing.assert_allclose(model.explained_variance_ratio, ratios, atol=1e-8)
    r = model.n_retained
    np.testing.assert_allclose(model.components.T, _sign_aligned(model.components.T, vecs[:, :r]), atol=1e-8)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 64), st.integers(1, 16), st.integers(0, 2**32 - 1))
def test_pca_ratio_oracle_property(rows, cols, seed):
    m = np.random.default_rng(seed).normal(size=(rows, cols)) * np.linspace(1, 5, cols)
    model = F.pca_fit(m)
    ratios, _, _ = eig_pca(m)
    k = min(rows, cols)
    np.testing.assert_allclose(model.explained_variance_ratio[:k], ratios[:k], atol=1e-8)
    assert np.all(np.diff(model.explained_variance_ratio) <= 1e-15)
    assert np.sum(model.explained_variance_ratio[:model.n_retained]) >= 0.99 - 1e-12
    if model.n_retained > 1:
        assert np.sum(model.explained_variance_ratio[:model.n_retained - 1]) < 0.99
    gram = model.components @ model.components.T
    np.testing.assert_allclose(gram, np.eye(model.n_retained), atol=1e-8)


def test_rank_one_keeps_one_component():
    rng = np.random.default_rng(1)
    m = np.outer(rng.normal(size=40), rng.normal(size=12))
    model = F.pca_fit(m)
    assert model.n_retained == 1
    assert model.explained_variance_ratio[0] == pytest.approx(1.0, abs=1e-12)
    assert F.pca_project_top(m, model).shape == (40, 1)


def test_all_equal_matrix_convention():
    model = F.pca_fit(np.full((5, 4), 3.0))
    assert model.n_retained == 1
    assert model.explained_variance_ratio[0] == 1.0


def test_isotropic_gaussian_splits_variance():
    m = np.random.default_rng(2).normal(size=(10_000, 2))
    ratios = F.pca_fit(m).explained_variance_ratio
    np.testing.assert_allclose(ratios, [0.5, 0.5], atol=0.05)


def test_mean_row_projects_to_zero_and_reconstruction_keeps_99_percent():
    m = np.random.default_rng(4).normal(size=(80, 10)) @ np.diag(np.geomspace(10, 0.01, 10))
    model = F.pca_fit(m)
    np.testing.assert_allclose(F.pca_project_top(m.mean(axis=0, keepdims=True), model), 0.0, atol=1e-12)
    scores = (m - model.mean) @ model.components.T
    recon = scores @ model.components + model.mean
    kept = 1 - np.sum((m - recon) ** 2) / np.sum((m - m.mean(axis=0)) ** 2)
    assert kept >= 0.99


def test_projection_column_mismatch():
    model = F.pca_fit(np.random.default_rng(0).normal(size=(10, 4)))
    with pytest.raises(F.FeatureError):
        F.pca_project_top(np.zeros((3, 5)), model)


def test_pca_sign_convention():
    model = F.pca_fit(np.random.default_rng(5).normal(size=(30, 6)))
    c = model.components
    assert np.all(c[np.arange(len(c)), np.argmax(np.abs(c), axis=1)] > 0)


# -- scaling ----------------------------------------------------------------

def test_scale_examples():
    np.testing.assert_array_equal(F.scale_to_range(np.array([[0.0], [1.0]]), -100, -80), [[-100], [-80]])
    col = np.array([[-3.0], [0.5], [2.0]])
    np.testing.assert_allclose(F.scale_to_range(col, -3.0, 2.0), col, atol=1e-12)
    np.testing.assert_array_equal(F.scale_to_range(np.full((4, 1), 9.0), 1.0, 2.0), np.ones((4, 1)))


def test_scale_needs_hi_above_lo():
    with pytest.raises(F.FeatureError):
        F.scale_to_range(np.zeros((2, 1)), 1.0, 1.0)


# -- enhance ----------------------------------------------------------------

def _noisy(n, seed, scale=1.0):
    return np.random.default_rng(seed).normal(size=n) * scale


def test_enhanced_width_los_like():
    em, fitted = F.enhance(_noisy(800, 0))
    assert em.shape == (501, 345)
    assert fitted.n_pca == 45


def test_nlos_regime_gives_309_columns_for_a_slow_sinr():
    """A linear ramp makes every window a shifted copy, so each view is rank 1."""
    rssi, _ = F.enhance(_noisy(900, 1, 4.0) - 95.7)
    sinr, fitted = F.enhance(np.linspace(-50.0, -20.0, 900))
    assert rssi.shape[1] == 345 and sinr.shape[1] == 309
    assert [p.n_retained for p in fitted.pcas] == [1] * 9
    assert 1 + rssi.shape[1] + sinr.shape[1] + 1 == 656


@settings(max_examples=15, deadline=None)
@given(st.integers(300, 700), st.integers(0, 1000))
def test_shape_law_and_range(n, seed):
    s = np.cumsum(_noisy(n, seed))
    em, fitted = F.enhance(s)
    x = F.rolling_window(s)
    assert em.raw.shape == (n - 299, 300)
    assert em.shape[1] == 300 + fitted.n_pca <= 345
    np.testing.assert_array_equal(em.raw, x)
    assert em.pca.min() >= x.min() and em.pca.max() <= x.max()


def test_refit_consistency():
    s = _noisy(700, 9) * 3 - 80
    fresh, fitted = F.enhance(s)
    again, _ = F.enhance(s, fitted)
    np.testing.assert_allclose(again.matrix, fresh.matrix, atol=1e-9)


def test_inference_path_stays_in_training_range():
    _, fitted = F.enhance(_noisy(600, 1))
    em, _ = F.enhance(_noisy(600, 2) * 10, fitted)
    assert em.pca.min() >= fitted.min_x and em.pca.max() <= fitted.max_x


def test_bundle_round_trip(tmp_path):
    from jamdetect.tokenizer import fit_bins
    _, r = F.enhance(_noisy(500, 1))
    _, s = F.enhance(_noisy(500, 2))
    bundle = F.FeatureBundle({"rssi": r, "sinr": s}, {"rssi": fit_bins(np.arange(200.0))})
    back = F.FeatureBundle.load(bundle.save(tmp_path / "b.json"))
    np.testing.assert_array_equal(back.bins["rssi"], bundle.bins["rssi"])
    for k in ("rssi", "sinr"):
        for a, b in zip(back.signals[k].pcas, bundle.signals[k].pcas):
            np.testing.assert_array_equal(a.components, b.components)
        np.testing.assert_array_equal(back.signals[k].col_max, bundle.signals[k].col_max)
    x = _noisy(400, 3)
    np.testing.assert_array_equal(F.enhance(x, back.signals["rssi"])[0].matrix,
                                  F.enhance(x, r)[0].matrix)


def test_bundle_version_is_checked(tmp_path):
    p = tmp_path / "b.json"
    p.write_text('{"version": 99, "signals": {}}')
    with pytest.raises(F.FeatureError):
        F.FeatureBundle.load(p)
